//! Assembly of the full-resolution cost volume: per-stage spatial
//! upsampling, interleaving along the disparity dimension, and softmax
//! normalization.
//!
//! Interleaving and the joint softmax commute (softmax is permutation
//! equivariant), so normalization happens after interleaving.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Axis};

use crate::aggregation::StageScoreVolume;
use crate::domain::{Error, FullCostVolume, Result};
use crate::tensor::{val_bilinear_up2d, val_deinterleave, val_interleave, val_softmax1};

fn with_batch(v: &Array3<f32>) -> ndarray::ArrayD<f32> {
    v.clone().insert_axis(Axis(0)).into_dyn()
}

fn drop_batch(v: ndarray::ArrayD<f32>) -> Array3<f32> {
    v.index_axis_move(Axis(0), 0).into_dimensionality().expect("rank-3")
}

/// Corner-aligned bilinear upsampling of each disparity slice to `H x W`.
/// The spatial ratio must be integral and equal on both axes.
pub fn upsample_stage(p: &StageScoreVolume, full_h: usize, full_w: usize) -> Result<Array3<f32>> {
    let (_, h, w) = p.values.dim();
    if !full_h.is_multiple_of(h) || !full_w.is_multiple_of(w) || full_h / h != full_w / w {
        return Err(Error::Shape(format!(
            "target {full_h}x{full_w} is not an integer multiple of {h}x{w}"
        )));
    }
    Ok(drop_batch(val_bilinear_up2d(&with_batch(&p.values), full_h, full_w)))
}

/// Riffles n upsampled stage volumes into the full matching range:
/// `full[d] = stages[d mod n][d div n]`.
pub fn interleave(stages: &[Array3<f32>], n: usize) -> Result<FullCostVolume> {
    if stages.len() != n {
        return Err(Error::Arity(format!("expected {n} stage volumes, got {}", stages.len())));
    }
    let dim = stages[0].dim();
    if stages.iter().any(|s| s.dim() != dim) {
        return Err(Error::Shape("stage volumes must share a shape".into()));
    }
    let batched: Vec<ndarray::ArrayD<f32>> = stages.iter().map(with_batch).collect();
    let refs: Vec<&ndarray::ArrayD<f32>> = batched.iter().collect();
    Ok(FullCostVolume { scores: drop_batch(val_interleave(&refs)), normalized: false })
}

/// Splits a full volume back into its n per-stage slices.
pub fn deinterleave(v: &FullCostVolume, n: usize) -> Result<Vec<Array3<f32>>> {
    if v.scores.dim().0 % n != 0 {
        return Err(Error::Shape(format!(
            "disparity dim {} not divisible by {n}",
            v.scores.dim().0
        )));
    }
    Ok(val_deinterleave(&with_batch(&v.scores), n).into_iter().map(drop_batch).collect())
}

/// Per-pixel softmax over the disparity dimension.
pub fn normalize(v: &FullCostVolume) -> Result<FullCostVolume> {
    if v.scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite score in cost volume".into()));
    }
    Ok(FullCostVolume { scores: drop_batch(val_softmax1(&with_batch(&v.scores))), normalized: true })
}

const VOL_MAGIC: &[u8; 8] = b"MFMVOL01";

/// Writes the documented flat binary container: magic, dtype byte (1 =
/// f32), normalized byte, u32 dims (d, h, w), then little-endian f32
/// payload in C order.
pub fn write_volume(path: &Path, v: &FullCostVolume) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(VOL_MAGIC)?;
    w.write_u8(1)?;
    w.write_u8(v.normalized as u8)?;
    let (d, h, ww) = v.scores.dim();
    for dim in [d, h, ww] {
        w.write_u32::<LittleEndian>(dim as u32)?;
    }
    for x in v.scores.iter() {
        w.write_f32::<LittleEndian>(*x)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<FullCostVolume> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != VOL_MAGIC {
        return Err(Error::Format("not a cost volume file".into()));
    }
    let dtype = r.read_u8()?;
    if dtype != 1 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let normalized = r.read_u8()? != 0;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0f32; d * h * w];
    for x in data.iter_mut() {
        *x = r.read_f32::<LittleEndian>()?;
    }
    Ok(FullCostVolume {
        scores: Array3::from_shape_vec((d, h, w), data)
            .map_err(|e| Error::Format(format!("{e}")))?,
        normalized,
    })
}
