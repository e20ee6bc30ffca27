//! MVOL on-disk format.
//!
//! Little-endian: magic `MVOL`, version `u32`, dims `3 x u32`, voxel size
//! `3 x f32`, affine `16 x f32` row-major, channel count `u32`, one tag byte
//! per channel, a log-domain byte, then channel-major `f32` samples with x
//! fastest. Label maps use a single channel tagged 254 and a `u16` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix4;

use super::{Contrast, LabelMap, LesionMask, MultiContrastImage, ProbabilityMap, VolumeGrid};
use crate::error::{Error, Result};

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u32 = 1;
const LABEL_TAG: u8 = 254;

struct Header {
    grid: VolumeGrid,
    tags: Vec<u8>,
    log_domain: bool,
}

fn write_header<W: Write>(w: &mut W, grid: &VolumeGrid, tags: &[u8], log_domain: bool) -> Result<()> {
    w.write_all(MVOL_MAGIC)?;
    w.write_all(&MVOL_VERSION.to_le_bytes())?;
    for d in grid.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in grid.voxel_size() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    let a = grid.affine();
    for r in 0..4 {
        for c in 0..4 {
            w.write_all(&(a[(r, c)] as f32).to_le_bytes())?;
        }
    }
    w.write_all(&(tags.len() as u32).to_le_bytes())?;
    w.write_all(tags)?;
    w.write_all(&[u8::from(log_domain)])?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MVOL_MAGIC {
        return Err(Error::Format("missing MVOL magic".into()));
    }
    let version = read_u32(r)?;
    if version != MVOL_VERSION {
        return Err(Error::Format(format!("unsupported MVOL version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let mut voxel_size = [0.0; 3];
    for v in &mut voxel_size {
        *v = read_f32(r)? as f64;
    }
    let mut affine = Matrix4::zeros();
    for row in 0..4 {
        for col in 0..4 {
            affine[(row, col)] = read_f32(r)? as f64;
        }
    }
    let n = read_u32(r)? as usize;
    let mut tags = vec![0u8; n];
    r.read_exact(&mut tags)?;
    let mut log = [0u8; 1];
    r.read_exact(&mut log)?;
    let grid = VolumeGrid::with_affine(dims, voxel_size, affine)?;
    Ok(Header { grid, tags, log_domain: log[0] != 0 })
}

fn write_f32_channels<W: Write>(w: &mut W, channels: impl Iterator<Item = f64>) -> Result<()> {
    for v in channels {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_block<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

fn ensure_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after MVOL payload".into()));
    }
    Ok(())
}

pub fn write_image(path: impl AsRef<Path>, img: &MultiContrastImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let tags: Vec<u8> = img.contrasts().iter().map(|c| c.tag()).collect();
    write_header(&mut w, img.grid(), &tags, img.log_domain())?;
    for c in 0..img.n_contrasts() {
        write_f32_channels(&mut w, img.channel(c).into_iter())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<MultiContrastImage> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let contrasts = h
        .tags
        .iter()
        .map(|&t| Contrast::from_tag(t).ok_or_else(|| Error::Format(format!("tag {t} is not an intensity channel"))))
        .collect::<Result<Vec<_>>>()?;
    let nv = h.grid.n_voxels();
    let mut channels = Vec::with_capacity(contrasts.len());
    for _ in 0..contrasts.len() {
        channels.push(read_f32_block(&mut r, nv)?);
    }
    ensure_eof(&mut r)?;
    MultiContrastImage::from_channels(h.grid, channels, contrasts, h.log_domain)
}

pub fn write_probability(path: impl AsRef<Path>, map: &ProbabilityMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, map.grid(), &[Contrast::Other.tag()], false)?;
    write_f32_channels(&mut w, map.probs().iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_probability(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.tags.len() != 1 || h.tags[0] == LABEL_TAG {
        return Err(Error::Format("probability map must have exactly one f32 channel".into()));
    }
    let probs = read_f32_block(&mut r, h.grid.n_voxels())?;
    ensure_eof(&mut r)?;
    ProbabilityMap::new(h.grid, probs)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &LesionMask) -> Result<()> {
    write_probability(path, &mask.to_probability())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LesionMask> {
    let map = read_probability(path)?;
    if let Some(i) = map.probs().iter().position(|&p| p != 0.0 && p != 1.0) {
        return Err(Error::Format(format!("mask value {} at voxel {i} is not binary", map.probs()[i])));
    }
    let mask = map.probs().iter().map(|&p| p == 1.0).collect();
    LesionMask::new(map.grid().clone(), mask)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, labels.grid(), &[LABEL_TAG], false)?;
    for &l in labels.labels() {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.tags != [LABEL_TAG] {
        return Err(Error::Format("not a label map (expected a single channel tagged 254)".into()));
    }
    let mut buf = vec![0u8; h.grid.n_voxels() * 2];
    r.read_exact(&mut buf)?;
    ensure_eof(&mut r)?;
    let labels = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    LabelMap::new(h.grid, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mvol");
        let g = VolumeGrid::new([2, 1, 1], [1.0, 2.0, 3.0]).unwrap();
        let img = MultiContrastImage::new(g, vec![1.0, 2.0, 3.0, 4.0], vec![Contrast::Flair, Contrast::T2w], true).unwrap();
        write_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = 4 + 4 + 12 + 12 + 64 + 4 + 2 + 1;
        assert_eq!(bytes.len(), header_len + 4 * 4);
        assert_eq!(&bytes[..4], b"MVOL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[header_len - 3..header_len], &[2u8, 1, 1]);
        // channel-major: FLAIR voxel 0, FLAIR voxel 1, T2 voxel 0, ...
        let payload: Vec<f32> = bytes[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(payload, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn label_roundtrip_and_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mvol");
        let g = VolumeGrid::new([3, 2, 1], [1.0; 3]).unwrap();
        let lm = LabelMap::new(g, vec![1, 2, 3, 4, 5, 600]).unwrap();
        write_labels(&path, &lm).unwrap();
        assert_eq!(read_labels(&path).unwrap(), lm);
        assert!(read_image(&path).is_err());
        assert!(read_probability(&path).is_err());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mvol");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn image_roundtrip_is_bit_exact(values in proptest::collection::vec(-1e3f32..1e3, 12), log in any::<bool>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("img.mvol");
            let g = VolumeGrid::new([3, 2, 1], [0.5, 1.0, 2.0]).unwrap();
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let img = MultiContrastImage::new(g, data, vec![Contrast::T1w, Contrast::Pd], log).unwrap();
            write_image(&path, &img).unwrap();
            let back = read_image(&path).unwrap();
            prop_assert_eq!(back.data(), img.data());
            prop_assert_eq!(back.contrasts(), img.contrasts());
            prop_assert_eq!(back.log_domain(), log);
            prop_assert_eq!(back.grid(), img.grid());
        }
    }
}
