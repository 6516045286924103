//! Centerline extraction: thinning, refinement, masking, pruning and the
//! vessel graph.

mod graph;
mod thin;

pub use graph::{build_graph, path_length, prune, CenterlineGraph, Edge, Node, NodeKind, MIN_DEAD_END_VOXELS};
pub use thin::thin3d;

use crate::error::Result;
use crate::morphology::{dilate_ball, fill_holes_slices, majority_3x3x3};
use crate::volume::BinaryVolume;

/// One-voxel-wide 26-connected centerline voxels.
pub type Skeleton = BinaryVolume;

pub const REFINE_DILATION_RADIUS: f64 = 5.0;
pub const MASK_DILATION_RADIUS: f64 = 1.0;

/// Thin, dilate with a radius-5 ball to bridge gaps, smooth with the 3x3x3
/// majority filter, fill holes in every z section and thin again.
pub fn refine_centerline(seg: &BinaryVolume) -> Skeleton {
    let first = thin3d(seg);
    if first.count() == 0 {
        return first;
    }
    let thick = fill_holes_slices(&majority_3x3x3(&dilate_ball(&first, REFINE_DILATION_RADIUS)));
    thin3d(&thick)
}

/// Keeps skeleton voxels inside the segmentation dilated by one voxel.
pub fn mask_skeleton(skel: &Skeleton, seg: &BinaryVolume) -> Result<Skeleton> {
    skel.require_same_shape(seg)?;
    let mask = dilate_ball(seg, MASK_DILATION_RADIUS);
    let mut out = skel.clone();
    for (o, &m) in out.voxels_mut().iter_mut().zip(mask.voxels()) {
        *o &= m;
    }
    Ok(out)
}

/// Refinement, masking and pruning in sequence.
pub fn extract_centerline(seg: &BinaryVolume) -> Result<Skeleton> {
    let refined = refine_centerline(seg);
    Ok(prune(&mask_skeleton(&refined, seg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{count_components, Connectivity};

    fn chain_with_gap() -> BinaryVolume {
        BinaryVolume::from_fn([40, 15, 15], [1.0; 3], |x, y, z| {
            y == 7 && z == 7 && (3..37).contains(&x) && !(18..21).contains(&x)
        })
        .unwrap()
    }

    #[test]
    fn refinement_bridges_gap() {
        let v = chain_with_gap();
        assert_eq!(count_components(&v, Connectivity::TwentySix), 2);
        let r = refine_centerline(&v);
        assert_eq!(count_components(&r, Connectivity::TwentySix), 1);
    }

    #[test]
    fn clean_chain_stays_straight() {
        let v = BinaryVolume::from_fn([40, 15, 15], [1.0; 3], |x, y, z| y == 7 && z == 7 && (5..35).contains(&x)).unwrap();
        let r = refine_centerline(&v);
        let pts: Vec<_> = (0..r.len()).filter(|&i| r.voxels()[i]).map(|i| r.coords(i)).collect();
        assert!(!pts.is_empty());
        assert!(pts.iter().all(|p| p[1].abs_diff(7) <= 1 && p[2].abs_diff(7) <= 1));
        let xmin = pts.iter().map(|p| p[0]).min().unwrap();
        let xmax = pts.iter().map(|p| p[0]).max().unwrap();
        assert!(xmin.abs_diff(5) <= 2 && xmax.abs_diff(34) <= 2, "ends at {xmin}..{xmax}");
    }

    #[test]
    fn empty_input() {
        let e = BinaryVolume::filled([6, 6, 6], [1.0; 3], false).unwrap();
        assert_eq!(refine_centerline(&e).count(), 0);
    }

    #[test]
    fn masking() {
        let seg = BinaryVolume::from_fn([12, 12, 12], [1.0; 3], |x, _, _| x < 5).unwrap();
        let mut skel = BinaryVolume::from_fn([12, 12, 12], [1.0; 3], |x, y, z| x == 2 && y == 6 && z < 10).unwrap();
        assert_eq!(mask_skeleton(&skel, &seg).unwrap(), skel);
        skel.set(8, 3, 3, true);
        let m = mask_skeleton(&skel, &seg).unwrap();
        assert!(!*m.get(8, 3, 3));
        assert_eq!(mask_skeleton(&m, &seg).unwrap(), m);
        let other = BinaryVolume::filled([3, 3, 3], [1.0; 3], false).unwrap();
        assert!(mask_skeleton(&skel, &other).is_err());
    }
}
