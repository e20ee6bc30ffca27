//! Model file: magic `VAE1`, then latent size, layer count, channel counts,
//! grid dims (`u32`), voxel size and row-major affine (`f32`), parameter
//! count (`u32`), and every parameter as `f32`, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix4;

use super::{Architecture, ShapePriorModel};
use crate::error::{Error, Result};
use crate::volume::io::{read_f32, read_u32};
use crate::volume::VolumeGrid;

pub const VAE_MAGIC: &[u8; 4] = b"VAE1";

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &ShapePriorModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let arch = model.architecture();
    w.write_all(VAE_MAGIC)?;
    put_u32(&mut w, arch.latent_dim)?;
    put_u32(&mut w, arch.channels.len())?;
    for &c in &arch.channels {
        put_u32(&mut w, c)?;
    }
    for d in arch.dims {
        put_u32(&mut w, d)?;
    }
    for v in model.grid().voxel_size() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    let a = model.grid().affine();
    for r in 0..4 {
        for c in 0..4 {
            w.write_all(&(a[(r, c)] as f32).to_le_bytes())?;
        }
    }
    put_u32(&mut w, model.params().len())?;
    for &p in model.params() {
        w.write_all(&(p as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapePriorModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VAE_MAGIC {
        return Err(Error::Format("not a VAE1 model file".into()));
    }
    let latent_dim = read_u32(&mut r)? as usize;
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers > 16 {
        return Err(Error::Format(format!("{n_layers} layers")));
    }
    let channels = (0..n_layers).map(|_| read_u32(&mut r).map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let mut voxel_size = [0.0; 3];
    for v in voxel_size.iter_mut() {
        *v = read_f32(&mut r)? as f64;
    }
    let mut affine = Matrix4::zeros();
    for row in 0..4 {
        for col in 0..4 {
            affine[(row, col)] = read_f32(&mut r)? as f64;
        }
    }
    let arch = Architecture::new(latent_dim, channels, dims).map_err(|e| Error::Format(e.to_string()))?;
    let grid = VolumeGrid::with_affine(dims, voxel_size, affine)?;
    let n = read_u32(&mut r)? as usize;
    if n != arch.n_params() {
        return Err(Error::Format(format!("file holds {n} parameters, architecture needs {}", arch.n_params())));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(read_f32(&mut r)? as f64);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after parameters".into()));
    }
    ShapePriorModel::from_params(arch, grid, params)
}
