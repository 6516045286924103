//! Overlap scores and modified Hausdorff distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphometry::squared_edt;
use crate::volume::{BinaryVolume, Spacing};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, gt: bool, pred: bool) {
        match (gt, pred) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }
}

pub fn confusion(gt: &BinaryVolume, pred: &BinaryVolume) -> Result<ConfusionCounts> {
    gt.require_same_shape(pred)?;
    let mut c = ConfusionCounts::default();
    for (&g, &p) in gt.voxels().iter().zip(pred.voxels()) {
        c.add(g, p);
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, what: &str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedMetric(format!("{what} has a zero denominator")));
    }
    Ok(num as f64 / den as f64)
}

/// TP / (TP + FN).
pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.tp + c.fn_, "sensitivity")
}

/// TN / (TN + FP).
pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tn, c.tn + c.fp, "specificity")
}

/// TP / (TP + FP + FN).
pub fn jaccard(c: &ConfusionCounts) -> Result<f64> {
    ratio(c.tp, c.tp + c.fp + c.fn_, "jaccard")
}

/// 2 TP / (2 TP + FP + FN), equal to 2 J / (1 + J); one rounding step.
pub fn dice(c: &ConfusionCounts) -> Result<f64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "dice")
}

/// Voxel coordinates with the grid spacing they live on.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<[usize; 3]>,
    pub spacing: Spacing,
}

impl PointSet {
    pub fn from_volume(vol: &BinaryVolume) -> Self {
        Self {
            points: (0..vol.len()).filter(|&i| vol.voxels()[i]).map(|i| vol.coords(i)).collect(),
            spacing: vol.spacing(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground voxels with a background 6-neighbour; the outside of the grid
/// counts as background.
pub fn extract_boundary(seg: &BinaryVolume) -> Result<PointSet> {
    let [nx, ny, nz] = seg.dims();
    let mut points = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !*seg.get(x, y, z) {
                    continue;
                }
                let on_edge = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let exposed = on_edge
                    || !*seg.get(x - 1, y, z)
                    || !*seg.get(x + 1, y, z)
                    || !*seg.get(x, y - 1, z)
                    || !*seg.get(x, y + 1, z)
                    || !*seg.get(x, y, z - 1)
                    || !*seg.get(x, y, z + 1);
                if exposed {
                    points.push([x, y, z]);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Empty("segmentation has no foreground".into()));
    }
    Ok(PointSet {
        points,
        spacing: seg.spacing(),
    })
}

/// Mean over `a` of the distance to the nearest point of `b`, using an
/// exact distance transform seeded by `b` over the joint bounding box.
fn mean_directed(a: &PointSet, b: &PointSet, lo: [usize; 3], dims: [usize; 3]) -> f64 {
    let mut seeds = vec![false; dims[0] * dims[1] * dims[2]];
    let local = |p: &[usize; 3]| (p[0] - lo[0]) + dims[0] * ((p[1] - lo[1]) + dims[1] * (p[2] - lo[2]));
    for p in &b.points {
        seeds[local(p)] = true;
    }
    let d2 = squared_edt(dims, a.spacing, |i| seeds[i], false);
    a.points.iter().map(|p| d2[local(p)].sqrt()).sum::<f64>() / a.len() as f64
}

/// Modified Hausdorff distance: the larger of the two mean directed
/// nearest-neighbour distances, in physical units.
pub fn mhd(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("modified Hausdorff distance of an empty point set".into()));
    }
    if a.spacing != b.spacing {
        return Err(Error::DimensionMismatch("point sets on different grids".into()));
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for p in a.points.iter().chain(&b.points) {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    Ok(mean_directed(a, b, lo, dims).max(mean_directed(b, a, lo, dims)))
}

/// MHD between the boundaries of two segmentations.
pub fn mhd_boundary(gt: &BinaryVolume, pred: &BinaryVolume) -> Result<f64> {
    gt.require_same_shape(pred)?;
    mhd(&extract_boundary(gt)?, &extract_boundary(pred)?)
}

/// MHD between two skeletons' voxel sets.
pub fn mhd_centerline(a: &BinaryVolume, b: &BinaryVolume) -> Result<f64> {
    a.require_same_shape(b)?;
    let (pa, pb) = (PointSet::from_volume(a), PointSet::from_volume(b));
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Empty("centerline has no voxels".into()));
    }
    mhd(&pa, &pb)
}

/// Dice of every z slice; `None` where both slices are empty.
pub fn slice_dice(gt: &BinaryVolume, pred: &BinaryVolume) -> Result<Vec<Option<f64>>> {
    gt.require_same_shape(pred)?;
    Ok((0..gt.dims()[2])
        .map(|z| {
            let mut c = ConfusionCounts::default();
            for (&g, &p) in gt.slice(z).iter().zip(pred.slice(z)) {
                c.add(g, p);
            }
            dice(&c).ok()
        })
        .collect())
}

/// Scores of one segmentation against ground truth. Undefined values are
/// `None` (JSON `null`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub dice: Option<f64>,
    pub jaccard: Option<f64>,
    pub mhd_boundary: Option<f64>,
    pub mhd_centerline: Option<f64>,
    pub confusion: ConfusionCounts,
    pub slice_dice: Vec<Option<f64>>,
}

/// Full report; the centerline distance is computed when both centerlines
/// are given.
pub fn evaluate(
    gt: &BinaryVolume,
    pred: &BinaryVolume,
    centerlines: Option<(&BinaryVolume, &BinaryVolume)>,
) -> Result<EvaluationReport> {
    let c = confusion(gt, pred)?;
    let mhd_centerline = match centerlines {
        Some((a, b)) => mhd_centerline(a, b).ok(),
        None => None,
    };
    Ok(EvaluationReport {
        sensitivity: sensitivity(&c).ok(),
        specificity: specificity(&c).ok(),
        dice: dice(&c).ok(),
        jaccard: jaccard(&c).ok(),
        mhd_boundary: mhd_boundary(gt, pred).ok(),
        mhd_centerline,
        confusion: c,
        slice_dice: slice_dice(gt, pred)?,
    })
}
