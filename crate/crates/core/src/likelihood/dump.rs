//! Binary parameter dump: magic `PRMS`, version `u32`, `G`, then `M_g` for each
//! class, `N`, `P` (all `u32`), a diagonal-mode byte, then per component its
//! mixture weight, mean (`N`) and covariance (`N x N` row-major), and finally
//! the `N x P` bias coefficients row-major. Reals are `f64` little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{AppearanceParams, Component};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"PRMS";
const VERSION: u32 = 1;

pub fn write_params(path: impl AsRef<Path>, params: &AppearanceParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let n_classes = params.components.iter().map(|c| c.class + 1).max().unwrap_or(0);
    let mut per_class = vec![0u32; n_classes];
    for c in &params.components {
        per_class[c.class] += 1;
    }
    // components must be grouped by class for the layout to be self-describing
    if params.components.windows(2).any(|w| w[0].class > w[1].class) {
        return Err(Error::InvalidInput("components must be ordered by class".into()));
    }
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(n_classes as u32).to_le_bytes())?;
    for m in per_class {
        w.write_all(&m.to_le_bytes())?;
    }
    w.write_all(&(params.n_contrasts() as u32).to_le_bytes())?;
    w.write_all(&(params.n_basis() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(params.diagonal_mode)])?;
    let n = params.n_contrasts();
    for c in &params.components {
        w.write_all(&c.weight.to_le_bytes())?;
        for v in c.mean.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for r in 0..n {
            for s in 0..n {
                w.write_all(&c.cov[(r, s)].to_le_bytes())?;
            }
        }
    }
    for r in 0..n {
        for p in 0..params.n_basis() {
            w.write_all(&params.bias_coeffs[(r, p)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>) -> Result<AppearanceParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Format("missing PRMS magic".into()));
    }
    let mut u = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    if u()? != VERSION {
        return Err(Error::Format("unsupported parameter dump version".into()));
    }
    let g = u()? as usize;
    let per_class = (0..g).map(|_| u().map(|m| m as usize)).collect::<Result<Vec<_>>>()?;
    let n = u()? as usize;
    let p = u()? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let mut f = || -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    };
    let mut components = Vec::new();
    for (class, &m) in per_class.iter().enumerate() {
        for _ in 0..m {
            let weight = f()?;
            let mean = DVector::from_vec((0..n).map(|_| f()).collect::<Result<Vec<_>>>()?);
            let cov = DMatrix::from_row_slice(n, n, &(0..n * n).map(|_| f()).collect::<Result<Vec<_>>>()?);
            components.push(Component { class, weight, mean, cov });
        }
    }
    let bias = DMatrix::from_row_slice(n, p, &(0..n * p).map(|_| f()).collect::<Result<Vec<_>>>()?);
    AppearanceParams::new(components, bias, flag[0] != 0)
}
