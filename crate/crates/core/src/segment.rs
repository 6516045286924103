//! Whole-volume inference by ROI tiling, MC-dropout uncertainty and binary
//! post-processing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::morphology::{self, Connectivity};
use crate::net::{Mode, Model};
use crate::volume::{reflect_index, BinaryVolume, ImageVolume, IntensityDomain, ScalarVolume, Volume};

/// Per-voxel foreground probability in [0, 1].
pub type ProbabilityVolume = ScalarVolume;
/// Per-voxel Shannon entropy in nats, in [0, ln 2].
pub type UncertaintyVolume = ScalarVolume;

pub const DEFAULT_MC_SAMPLES: usize = 20;
pub const DEFAULT_MIN_COMPONENT: usize = 100;

#[derive(Clone, Debug)]
pub struct Prediction {
    pub segmentation: BinaryVolume,
    pub probability: ProbabilityVolume,
    /// Number of tiles that labeled each voxel; exactly 1 everywhere.
    pub coverage: Volume<u8>,
}

#[derive(Clone, Copy, Debug)]
struct Tiling {
    dims: [usize; 3],
    fov: [usize; 3],
    roi: [usize; 3],
    counts: [usize; 3],
}

impl Tiling {
    fn new(dims: [usize; 3], fov: [usize; 3], roi: [usize; 3]) -> Result<Self> {
        let mut counts = [0; 3];
        for a in 0..3 {
            if roi[a] == 0 || roi[a] > fov[a] || !(fov[a] - roi[a]).is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!("roi {roi:?} is not centred in fov {fov:?}")));
            }
            if dims[a] == 0 {
                return Err(Error::Empty("volume has a zero-length axis".into()));
            }
            counts[a] = dims[a].div_ceil(roi[a]);
        }
        Ok(Self {
            dims,
            fov,
            roi,
            counts,
        })
    }

    fn len(&self) -> usize {
        self.counts.iter().product()
    }

    /// ROI origin of tile `t` in volume coordinates.
    fn origin(&self, t: usize) -> [usize; 3] {
        let tx = t % self.counts[0];
        let ty = (t / self.counts[0]) % self.counts[1];
        let tz = t / (self.counts[0] * self.counts[1]);
        [tx * self.roi[0], ty * self.roi[1], tz * self.roi[2]]
    }

    fn patch(&self, vol: &ScalarVolume, t: usize) -> Vec<f32> {
        extract_fov_patch(vol, self.origin(t), self.fov, self.roi)
    }

    /// Scatters per-ROI-voxel values (network order) into `dst`, skipping
    /// voxels past the volume edge.
    fn scatter<T: Copy>(&self, t: usize, values: &[T], dst: &mut Volume<T>, coverage: Option<&mut Volume<u8>>) {
        let o = self.origin(t);
        let [rx, ry, rz] = self.roi;
        let mut cov = coverage;
        for x in 0..rx {
            for y in 0..ry {
                for z in 0..rz {
                    let (vx, vy, vz) = (o[0] + x, o[1] + y, o[2] + z);
                    if vx >= self.dims[0] || vy >= self.dims[1] || vz >= self.dims[2] {
                        continue;
                    }
                    dst.set(vx, vy, vz, values[(x * ry + y) * rz + z]);
                    if let Some(c) = cov.as_deref_mut() {
                        let i = c.index(vx, vy, vz);
                        c.voxels_mut()[i] += 1;
                    }
                }
            }
        }
    }
}

/// FOV patch centred on the ROI whose low corner is `roi_origin`, in
/// network order (`z` fastest), mirrored at the volume borders.
pub fn extract_fov_patch(vol: &ScalarVolume, roi_origin: [usize; 3], fov: [usize; 3], roi: [usize; 3]) -> Vec<f32> {
    let dims = vol.dims();
    let start = |a: usize| roi_origin[a] as isize - ((fov[a] - roi[a]) / 2) as isize;
    let (sx0, sy0, sz0) = (start(0), start(1), start(2));
    let zs: Vec<usize> = (0..fov[2]).map(|z| reflect_index(sz0 + z as isize, dims[2])).collect();
    let mut out = Vec::with_capacity(fov.iter().product());
    for x in 0..fov[0] {
        let sx = reflect_index(sx0 + x as isize, dims[0]);
        for y in 0..fov[1] {
            let sy = reflect_index(sy0 + y as isize, dims[1]);
            for &sz in &zs {
                out.push(*vol.get(sx, sy, sz));
            }
        }
    }
    out
}

/// ROI labels at `roi_origin` in network order; voxels past the volume
/// edge are background.
pub fn extract_roi_labels(gt: &BinaryVolume, roi_origin: [usize; 3], roi: [usize; 3]) -> Vec<bool> {
    let dims = gt.dims();
    let mut out = Vec::with_capacity(roi.iter().product());
    for x in 0..roi[0] {
        for y in 0..roi[1] {
            for z in 0..roi[2] {
                let p = [roi_origin[0] + x, roi_origin[1] + y, roi_origin[2] + z];
                out.push((0..3).all(|a| p[a] < dims[a]) && *gt.get(p[0], p[1], p[2]));
            }
        }
    }
    out
}

fn require_unit(vol: &ImageVolume) -> Result<()> {
    if vol.domain() != IntensityDomain::UnitNormalized {
        return Err(Error::InvalidArgument(
            "segmentation expects a unit-normalized volume; normalize it first".into(),
        ));
    }
    Ok(())
}

/// Deterministic tiled inference. Each ROI tile is classified from the
/// mirrored FOV around it; a probability of exactly 0.5 is background.
pub fn predict_volume(vol: &ImageVolume, model: &Model<f32>) -> Result<Prediction> {
    require_unit(vol)?;
    let spec = model.spec();
    let tiling = Tiling::new(vol.dims(), spec.fov, spec.roi)?;
    let tiles: Vec<Vec<f32>> = (0..tiling.len())
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model.forward_sample(&tiling.patch(vol, t), Mode::Eval, &mut rng)?;
            Ok(out.probs.iter().map(|p| p[1]).collect())
        })
        .collect::<Result<_>>()?;
    let mut probability = vol.grid().map(|_| 0.0f32);
    let mut coverage = vol.grid().map(|_| 0u8);
    for (t, p) in tiles.iter().enumerate() {
        tiling.scatter(t, p, &mut probability, Some(&mut coverage));
    }
    let segmentation = probability.map(|&p| p > 0.5);
    Ok(Prediction {
        segmentation,
        probability,
        coverage,
    })
}

/// Binary entropy in nats with `H(0) = H(1) = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    term(p) + term(1.0 - p)
}

#[derive(Clone, Debug)]
pub struct McOutput {
    /// Entropy of the mean foreground probability.
    pub entropy: UncertaintyVolume,
    pub mean_probability: ProbabilityVolume,
}

/// Test-time dropout: the mean of `n_samples` stochastic foreground
/// probabilities per voxel and its entropy. Tile `t` draws its masks from a
/// stream seeded by `(seed, t)`, so results do not depend on scheduling.
pub fn mc_entropy(vol: &ImageVolume, model: &Model<f32>, n_samples: usize, seed: u64) -> Result<McOutput> {
    require_unit(vol)?;
    if n_samples < 2 {
        return Err(Error::InvalidArgument("MC dropout needs at least 2 samples".into()));
    }
    let spec = model.spec();
    let tiling = Tiling::new(vol.dims(), spec.fov, spec.roi)?;
    let tiles: Vec<Vec<f32>> = (0..tiling.len())
        .into_par_iter()
        .map(|t| {
            let features = model.trunk_features(&tiling.patch(vol, t))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut sum = vec![0.0f64; spec.roi_voxels()];
            for _ in 0..n_samples {
                for (s, p) in sum.iter_mut().zip(model.head_foreground(&features, Some(&mut rng))) {
                    *s += p as f64;
                }
            }
            Ok(sum.iter().map(|s| (s / n_samples as f64) as f32).collect())
        })
        .collect::<Result<_>>()?;
    let mut mean_probability = vol.grid().map(|_| 0.0f32);
    for (t, p) in tiles.iter().enumerate() {
        tiling.scatter(t, p, &mut mean_probability, None);
    }
    let entropy = mean_probability.map(|&p| binary_entropy(p as f64) as f32);
    Ok(McOutput {
        entropy,
        mean_probability,
    })
}

/// Fills 6-connected background pockets that do not reach the border.
pub fn fill_holes(seg: &BinaryVolume) -> BinaryVolume {
    morphology::fill_holes(seg)
}

/// 3x3x3 mean filter thresholded at 0.5 (at least 14 of 27, zero-padded).
pub fn mean_filter_binary(seg: &BinaryVolume) -> BinaryVolume {
    morphology::majority_3x3x3(seg)
}

/// Removes 26-connected components smaller than `min_voxels`.
pub fn remove_small(seg: &BinaryVolume, min_voxels: usize) -> Result<BinaryVolume> {
    if min_voxels == 0 {
        return Err(Error::InvalidArgument("min_voxels must be at least 1".into()));
    }
    Ok(morphology::remove_small_components(seg, min_voxels, Connectivity::TwentySix))
}

/// Hole filling, mean filtering, then small-object removal.
pub fn postprocess(seg: &BinaryVolume, min_voxels: usize) -> Result<BinaryVolume> {
    remove_small(&mean_filter_binary(&fill_holes(seg)), min_voxels)
}
