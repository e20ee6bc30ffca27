//! AMSH atlas file: magic `AMSH`, version `u32`, `J`, `T`, `K` as `u32`,
//! then deformed vertices, reference vertices, tetrahedra (`u32` indices),
//! alpha (`J x K`), beta and stiffness, all little-endian, reals as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::AtlasMesh;
use crate::error::{Error, Result};

pub const AMSH_MAGIC: &[u8; 4] = b"AMSH";
pub const AMSH_VERSION: u32 = 1;

pub fn write_atlas(path: impl AsRef<Path>, mesh: &AtlasMesh) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(AMSH_MAGIC)?;
    for v in [AMSH_VERSION, mesh.n_vertices() as u32, mesh.n_tets() as u32, mesh.n_labels as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for set in [&mesh.vertices, &mesh.reference_vertices] {
        for p in set.iter() {
            for a in 0..3 {
                w.write_all(&p[a].to_le_bytes())?;
            }
        }
    }
    for t in &mesh.tets {
        for &v in t {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    for &a in mesh.alpha.iter().chain(mesh.beta.iter()) {
        w.write_all(&a.to_le_bytes())?;
    }
    w.write_all(&mesh.stiffness.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn u32_at<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn f64_at<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_atlas(path: impl AsRef<Path>) -> Result<AtlasMesh> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != AMSH_MAGIC {
        return Err(Error::Format("missing AMSH magic".into()));
    }
    let version = u32_at(&mut r)?;
    if version != AMSH_VERSION {
        return Err(Error::Format(format!("unsupported AMSH version {version}")));
    }
    let j = u32_at(&mut r)? as usize;
    let t = u32_at(&mut r)? as usize;
    let k = u32_at(&mut r)? as usize;
    let points = |r: &mut BufReader<File>| -> Result<Vec<Vector3<f64>>> {
        (0..j).map(|_| Ok(Vector3::new(f64_at(r)?, f64_at(r)?, f64_at(r)?))).collect()
    };
    let vertices = points(&mut r)?;
    let reference_vertices = points(&mut r)?;
    let tets = (0..t)
        .map(|_| Ok([u32_at(&mut r)? as usize, u32_at(&mut r)? as usize, u32_at(&mut r)? as usize, u32_at(&mut r)? as usize]))
        .collect::<Result<Vec<_>>>()?;
    let alpha = (0..j * k).map(|_| f64_at(&mut r)).collect::<Result<Vec<_>>>()?;
    let beta = (0..j).map(|_| f64_at(&mut r)).collect::<Result<Vec<_>>>()?;
    let stiffness = f64_at(&mut r)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after AMSH payload".into()));
    }
    let mut mesh = AtlasMesh::new(reference_vertices, tets, alpha, beta, k, stiffness)?;
    mesh.set_vertices(vertices)?;
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::build_atlas;
    use crate::volume::{LabelMap, VolumeGrid};

    #[test]
    fn roundtrip_preserves_everything() {
        let g = VolumeGrid::new([5, 4, 3], [1.0, 1.5, 2.0]).unwrap();
        let labels = (0..g.n_voxels()).map(|i| (i % 3 + 1) as u16).collect();
        let mut atlas = build_atlas(&[LabelMap::new(g, labels).unwrap()], &[], [2, 2, 1]).unwrap();
        let mut v = atlas.vertices().to_vec();
        v[4].x += 0.125;
        atlas.set_vertices(v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atlas.amsh");
        write_atlas(&path, &atlas).unwrap();
        assert_eq!(read_atlas(&path).unwrap(), atlas);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"AMSH");
    }
}
