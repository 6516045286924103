//! Dense 3D grids with physical voxel spacing.
//!
//! Voxels are stored with x varying fastest, then y, then z, so every z
//! slice is a contiguous `nx * ny` block. This matches the page order of a
//! multi-page image stack.

mod io;

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_binary, load_stack, load_stack_with_spacing, save_binary, save_stack, sidecar_path, StackMeta, StackSource};
pub(crate) use io::write_raw_f32;

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// A dense 3D grid of `T` with per-axis spacing in µm/voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: Spacing,
    voxels: Vec<T>,
}

pub type BinaryVolume = Volume<bool>;
pub type ScalarVolume = Volume<f32>;

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

impl<T> Volume<T> {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<T>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{} voxels supplied for dims {dims:?} ({expected} expected)",
                voxels.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut voxels = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        check_geometry(self.dims, spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    #[inline]
    pub fn voxels_mut(&mut self) -> &mut [T] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<T> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Index of `(x, y, z)` if the signed coordinate lies inside the grid.
    #[inline]
    pub fn checked_index(&self, x: isize, y: isize, z: isize) -> Option<usize> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.dims[0] || y >= self.dims[1] || z >= self.dims[2] {
            return None;
        }
        Some(self.index(x, y, z))
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.voxels[i] = value;
    }

    pub fn slice(&self, z: usize) -> &[T] {
        let n = self.dims[0] * self.dims[1];
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [T] {
        let n = self.dims[0] * self.dims[1];
        &mut self.voxels[z * n..(z + 1) * n]
    }

    pub fn same_shape<U>(&self, other: &Volume<U>) -> bool {
        self.dims == other.dims
    }

    pub fn require_same_shape<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!("{:?} vs {:?}", self.dims, other.dims)))
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            voxels: self.voxels.iter().map(f).collect(),
        }
    }
}

impl<T: Clone> Volume<T> {
    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Ok(Self {
            dims,
            spacing,
            voxels: vec![value; dims[0] * dims[1] * dims[2]],
        })
    }
}

impl BinaryVolume {
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensityDomain {
    Raw,
    UnitNormalized,
}

/// Scalar intensity volume tagged with its intensity domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    grid: Volume<f32>,
    domain: IntensityDomain,
}

impl ImageVolume {
    pub fn raw(grid: Volume<f32>) -> Self {
        Self {
            grid,
            domain: IntensityDomain::Raw,
        }
    }

    /// Fails unless every voxel is in `[0, 1]`.
    pub fn unit(grid: Volume<f32>) -> Result<Self> {
        if let Some(v) = grid.voxels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "unit-normalized volume holds out-of-range value {v}"
            )));
        }
        Ok(Self {
            grid,
            domain: IntensityDomain::UnitNormalized,
        })
    }

    pub fn domain(&self) -> IntensityDomain {
        self.domain
    }

    pub fn grid(&self) -> &Volume<f32> {
        &self.grid
    }

    pub fn into_grid(self) -> Volume<f32> {
        self.grid
    }

    pub fn with_spacing(self, spacing: Spacing) -> Result<Self> {
        Ok(Self {
            grid: self.grid.with_spacing(spacing)?,
            domain: self.domain,
        })
    }
}

impl Deref for ImageVolume {
    type Target = Volume<f32>;

    fn deref(&self) -> &Volume<f32> {
        &self.grid
    }
}

/// Linear-interpolated order statistic of an ascending slice (`pct` in 0..=100).
pub fn percentile_sorted(sorted: &[f32], pct: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (pct.clamp(0.0, 100.0) / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64)
}

fn sorted_copy(values: impl Iterator<Item = f32>) -> Vec<f32> {
    let mut v: Vec<f32> = values.collect();
    v.sort_unstable_by(|a, b| a.total_cmp(b));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileScope {
    WholeVolume,
    /// Percentiles estimated independently inside each tile of the given size.
    PerTile(Dims),
}

/// Percentile normalization over the whole volume ("1-99%" by default).
pub fn normalize_percentile(vol: &ImageVolume, lo_pct: f64, hi_pct: f64) -> Result<ImageVolume> {
    normalize_percentile_with(vol, lo_pct, hi_pct, PercentileScope::WholeVolume)
}

pub fn normalize_percentile_with(
    vol: &ImageVolume,
    lo_pct: f64,
    hi_pct: f64,
    scope: PercentileScope,
) -> Result<ImageVolume> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    if let Some(v) = vol.voxels().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("voxel value {v}")));
    }
    let dims = vol.dims();
    let mut out = vol.grid().clone();
    match scope {
        PercentileScope::WholeVolume => {
            let sorted = sorted_copy(vol.voxels().iter().copied());
            let (p_lo, p_hi) = (percentile_sorted(&sorted, lo_pct), percentile_sorted(&sorted, hi_pct));
            if !(p_hi > p_lo) {
                return Err(Error::Degenerate(format!(
                    "percentile range collapses (p{lo_pct} = p{hi_pct} = {p_lo})"
                )));
            }
            for v in out.voxels_mut() {
                *v = linear_clip(*v, p_lo, p_hi);
            }
        }
        PercentileScope::PerTile(tile) => {
            if tile.contains(&0) {
                return Err(Error::InvalidArgument("tile size must be positive".into()));
            }
            for z0 in (0..dims[2]).step_by(tile[2]) {
                for y0 in (0..dims[1]).step_by(tile[1]) {
                    for x0 in (0..dims[0]).step_by(tile[0]) {
                        let xs = x0..(x0 + tile[0]).min(dims[0]);
                        let ys = y0..(y0 + tile[1]).min(dims[1]);
                        let zs = z0..(z0 + tile[2]).min(dims[2]);
                        let mut idx = Vec::new();
                        for z in zs.clone() {
                            for y in ys.clone() {
                                for x in xs.clone() {
                                    idx.push(vol.index(x, y, z));
                                }
                            }
                        }
                        let sorted = sorted_copy(idx.iter().map(|&i| vol.voxels()[i]));
                        let (p_lo, p_hi) =
                            (percentile_sorted(&sorted, lo_pct), percentile_sorted(&sorted, hi_pct));
                        if !(p_hi > p_lo) {
                            return Err(Error::Degenerate(format!(
                                "percentile range collapses in tile at ({x0}, {y0}, {z0})"
                            )));
                        }
                        for i in idx {
                            out.voxels_mut()[i] = linear_clip(vol.voxels()[i], p_lo, p_hi);
                        }
                    }
                }
            }
        }
    }
    ImageVolume::unit(out)
}

#[inline]
fn linear_clip(v: f32, lo: f64, hi: f64) -> f32 {
    (((v as f64) - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
}

/// Trilinear resampling to isotropic `target_spacing` µm voxels.
///
/// Voxel centers are aligned: output voxel `i` samples input coordinate
/// `(i + 0.5) * target / spacing - 0.5`, clamped to the grid.
pub fn resample_isotropic(vol: &ImageVolume, target_spacing: f64) -> Result<ImageVolume> {
    if !(target_spacing > 0.0) || !target_spacing.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let dims = vol.dims();
    let spacing = vol.spacing();
    let mut new_dims = [0usize; 3];
    let mut scale = [0f64; 3];
    for a in 0..3 {
        new_dims[a] = ((dims[a] as f64 * spacing[a] / target_spacing).round() as usize).max(1);
        scale[a] = target_spacing / spacing[a];
    }
    let src = vol.grid();
    let axis_weights = |a: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * scale[a] - 0.5).clamp(0.0, (dims[a] - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(dims[a] - 1);
        (lo, hi, pos - lo as f64)
    };
    let out = Volume::from_fn(new_dims, [target_spacing; 3], |x, y, z| {
        let (x0, x1, fx) = axis_weights(0, x);
        let (y0, y1, fy) = axis_weights(1, y);
        let (z0, z1, fz) = axis_weights(2, z);
        let g = |x, y, z| *src.get(x, y, z) as f64;
        let c00 = g(x0, y0, z0) * (1.0 - fx) + g(x1, y0, z0) * fx;
        let c10 = g(x0, y1, z0) * (1.0 - fx) + g(x1, y1, z0) * fx;
        let c01 = g(x0, y0, z1) * (1.0 - fx) + g(x1, y0, z1) * fx;
        let c11 = g(x0, y1, z1) * (1.0 - fx) + g(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    })?;
    Ok(match vol.domain() {
        IntensityDomain::Raw => ImageVolume::raw(out),
        IntensityDomain::UnitNormalized => {
            // convex combinations of [0,1] values stay in [0,1] up to rounding
            let clamped = out.map(|v| v.clamp(0.0, 1.0));
            ImageVolume::unit(clamped)?
        }
    })
}

/// Mirror index without edge repetition: -1 -> 1, n -> n - 2.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Mirror-pads by `margins` on both sides of each axis.
pub fn pad_reflect<T: Clone>(vol: &Volume<T>, margins: [usize; 3]) -> Result<Volume<T>> {
    pad_reflect_asym(vol, margins, margins)
}

/// Mirror-pads with independent low/high margins per axis.
pub fn pad_reflect_asym<T: Clone>(vol: &Volume<T>, low: [usize; 3], high: [usize; 3]) -> Result<Volume<T>> {
    let dims = vol.dims();
    for a in 0..3 {
        let m = low[a].max(high[a]);
        if m > dims[a] - 1 {
            return Err(Error::InvalidArgument(format!(
                "reflect margin {m} exceeds dim - 1 = {} on axis {a}",
                dims[a] - 1
            )));
        }
    }
    let new_dims = [
        dims[0] + low[0] + high[0],
        dims[1] + low[1] + high[1],
        dims[2] + low[2] + high[2],
    ];
    Volume::from_fn(new_dims, vol.spacing(), |x, y, z| {
        let sx = reflect_index(x as isize - low[0] as isize, dims[0]);
        let sy = reflect_index(y as isize - low[1] as isize, dims[1]);
        let sz = reflect_index(z as isize - low[2] as isize, dims[2]);
        vol.get(sx, sy, sz).clone()
    })
}
