//! Matrix dump format: CSV with 17 significant digits, one row per matrix
//! row, plus a sidecar JSON recording `{rows, cols, name}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

#[derive(Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub rows: usize,
    pub cols: usize,
    pub name: String,
}

/// Writes `<name>.csv` and `<name>.json` into `dir`.
pub fn write_matrix_csv(dir: &Path, name: &str, m: &Matrix) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = String::new();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if j > 0 {
                out.push(',');
            }
            // {:.16e} prints 17 significant digits, '.' decimal separator
            out.push_str(&format!("{:.16e}", m.get(i, j)));
        }
        out.push('\n');
    }
    fs::write(dir.join(format!("{name}.csv")), out)?;
    let sidecar = MatrixSidecar {
        rows: m.rows(),
        cols: m.cols(),
        name: name.to_string(),
    };
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_matrix_csv(dir: &Path, name: &str) -> Result<Matrix> {
    let sidecar: MatrixSidecar =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{name}.json")))?)?;
    let text = fs::read_to_string(dir.join(format!("{name}.csv")))?;
    let mut data = Vec::with_capacity(sidecar.rows * sidecar.cols);
    for line in text.lines() {
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| Error::InvalidParam(format!("bad csv value {field:?}: {e}")))?;
            data.push(v);
        }
    }
    if data.len() != sidecar.rows * sidecar.cols {
        return Err(Error::ShapeMismatch {
            op: "read_matrix_csv",
            expected: format!("{} values", sidecar.rows * sidecar.cols),
            got: format!("{}", data.len()),
        });
    }
    Ok(Matrix::from_vec(sidecar.rows, sidecar.cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Seed, SeedStream};

    #[test]
    fn csv_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = SeedStream::new(Seed(1));
        let m = s.standard_normal(4, 7);
        write_matrix_csv(dir.path(), "w_k", &m).unwrap();
        let back = read_matrix_csv(dir.path(), "w_k").unwrap();
        assert_eq!(m, back);
    }
}
