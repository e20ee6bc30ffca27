//! Overlap and volume measures for evaluating segmentations.
//!
//! Ratios with an empty denominator are `None` rather than 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, LesionMask, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub dice: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Predicted volume per structure label.
    pub volumes_mm3: BTreeMap<u16, f64>,
}

fn check_grids(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

pub fn counts(pred: &LesionMask, truth: &LesionMask) -> Result<Counts> {
    check_grids(pred.grid(), truth.grid())?;
    let mut c = Counts { tp: 0, fp: 0, fn_: 0 };
    for (&p, &t) in pred.mask().iter().zip(truth.mask()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// `2|X n Y| / (|X| + |Y|)`; two empty masks score 1.
pub fn dice(x: &LesionMask, y: &LesionMask) -> Result<f64> {
    let c = counts(x, y)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { (2 * c.tp) as f64 / denom as f64 })
}

/// Dice of one structure between two label maps.
pub fn label_dice(a: &LabelMap, b: &LabelMap, label: u16) -> Result<f64> {
    let ma = LesionMask::new(a.grid().clone(), a.labels().iter().map(|&l| l == label).collect())?;
    let mb = LesionMask::new(b.grid().clone(), b.labels().iter().map(|&l| l == label).collect())?;
    dice(&ma, &mb)
}

pub fn precision_recall(pred: &LesionMask, truth: &LesionMask) -> Result<(Option<f64>, Option<f64>)> {
    let c = counts(pred, truth)?;
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_)))
}

/// Sample correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("need at least two samples".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

/// Volume in mm^3 of every label present in the map.
pub fn volumes(labels: &LabelMap) -> BTreeMap<u16, f64> {
    let mut count = BTreeMap::new();
    for &l in labels.labels() {
        *count.entry(l).or_insert(0usize) += 1;
    }
    let v = labels.grid().voxel_volume();
    count.into_iter().map(|(l, n)| (l, n as f64 * v)).collect()
}

pub fn overlap_report(pred: &LesionMask, truth: &LesionMask, labels: Option<&LabelMap>) -> Result<OverlapReport> {
    let c = counts(pred, truth)?;
    let (precision, recall) = precision_recall(pred, truth)?;
    let volumes_mm3 = match labels {
        Some(l) => {
            check_grids(l.grid(), pred.grid())?;
            volumes(l)
        }
        None => BTreeMap::new(),
    };
    Ok(OverlapReport { dice: dice(pred, truth)?, precision, recall, tp: c.tp, fp: c.fp, fn_: c.fn_, volumes_mm3 })
}
