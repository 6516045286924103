//! Slice-wise demons registration for in-vivo motion correction.
//!
//! Each z slice is registered to the already-corrected slice above it. The
//! registration is non-parametric: a dense displacement field is grown by
//! composing small, capped, Gaussian-smoothed demons updates, and the fixed
//! image gradient drives the update (Thirion's passive force).
//!
//! Warps follow the pull convention `out(x) = img(x + s(x))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ImageVolume, IntensityDomain, Volume};

/// Pixels below this squared-force denominator receive no update.
const DENOMINATOR_EPS: f64 = 1e-9;

/// Row-major 2D image (x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Image2 {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl Image2 {
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || data.len() != nx * ny {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {nx}x{ny} image",
                data.len()
            )));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                data.push(f(x, y));
            }
        }
        Self { nx, ny, data }
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: vec![0.0; nx * ny],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[x + self.nx * y]
    }

    #[inline]
    fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.nx as isize - 1) as usize;
        let y = y.clamp(0, self.ny as isize - 1) as usize;
        self.data[x + self.nx * y]
    }

    /// Bilinear sample at a real-valued position, clamped to the edge.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.nx - 1) as f64);
        let y = y.clamp(0.0, (self.ny - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.nx - 1);
        let y1 = (y0 + 1).min(self.ny - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn same_dims(&self, other: &Image2) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    pub fn mse(&self, other: &Image2) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
    }
}

/// Dense per-pixel displacement `(dx, dy)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub nx: usize,
    pub ny: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DeformationField {
    pub fn identity(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            dx: vec![0.0; nx * ny],
            dy: vec![0.0; nx * ny],
        }
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut field = Self::identity(nx, ny);
        for y in 0..ny {
            for x in 0..nx {
                let (a, b) = f(x, y);
                field.dx[x + nx * y] = a;
                field.dy[x + nx * y] = b;
            }
        }
        field
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|v| v.is_finite())
    }

    pub fn negated(&self) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            dx: self.dx.iter().map(|v| -v).collect(),
            dy: self.dy.iter().map(|v| -v).collect(),
        }
    }

    fn component_images(&self) -> (Image2, Image2) {
        (
            Image2 {
                nx: self.nx,
                ny: self.ny,
                data: self.dx.clone(),
            },
            Image2 {
                nx: self.nx,
                ny: self.ny,
                data: self.dy.clone(),
            },
        )
    }

    fn smoothed(&self, sigma: f64) -> Self {
        let (a, b) = self.component_images();
        Self {
            nx: self.nx,
            ny: self.ny,
            dx: gaussian_smooth(&a, sigma).data,
            dy: gaussian_smooth(&b, sigma).data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemonsConfig {
    /// Gaussian regularization width in pixels.
    pub sigma: f64,
    pub max_iters: usize,
    /// Minimum accepted MSE improvement, relative to the initial MSE.
    pub mse_rel_tol: f64,
    /// Largest per-iteration displacement magnitude in pixels.
    pub step_cap: f64,
}

impl Default for DemonsConfig {
    fn default() -> Self {
        Self {
            sigma: 1.3,
            max_iters: 50,
            mse_rel_tol: 1e-4,
            step_cap: 1.0,
        }
    }
}

impl DemonsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("demons sigma must be > 0, got {}", self.sigma)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("demons max_iters must be >= 1".into()));
        }
        if !(self.mse_rel_tol >= 0.0) || !(self.step_cap > 0.0) {
            return Err(Error::InvalidArgument("demons tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub field: DeformationField,
    pub warped: Image2,
    /// MSE before the first iteration followed by one entry per accepted step.
    pub mse_trace: Vec<f64>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_smooth(img: &Image2, sigma: f64) -> Image2 {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Image2::zeros(img.nx, img.ny);
    for y in 0..img.ny {
        for x in 0..img.nx {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                acc += w * img.at_clamped(x as isize + i as isize - r, y as isize);
            }
            tmp.data[x + img.nx * y] = acc;
        }
    }
    let mut out = Image2::zeros(img.nx, img.ny);
    for y in 0..img.ny {
        for x in 0..img.nx {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                acc += w * tmp.at_clamped(x as isize, y as isize + i as isize - r);
            }
            out.data[x + img.nx * y] = acc;
        }
    }
    out
}

/// Central-difference gradient with clamped edges.
fn gradient(img: &Image2) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; img.data.len()];
    let mut gy = vec![0.0; img.data.len()];
    for y in 0..img.ny as isize {
        for x in 0..img.nx as isize {
            let i = x as usize + img.nx * y as usize;
            gx[i] = 0.5 * (img.at_clamped(x + 1, y) - img.at_clamped(x - 1, y));
            gy[i] = 0.5 * (img.at_clamped(x, y + 1) - img.at_clamped(x, y - 1));
        }
    }
    (gx, gy)
}

/// `out(x) = img(x + field(x))`, bilinear, clamped to the edge.
pub fn warp_bilinear(img: &Image2, field: &DeformationField) -> Result<Image2> {
    if img.nx != field.nx || img.ny != field.ny {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs field {}x{}",
            img.nx, img.ny, field.nx, field.ny
        )));
    }
    Ok(Image2::from_fn(img.nx, img.ny, |x, y| {
        let i = x + img.nx * y;
        img.sample(x as f64 + field.dx[i], y as f64 + field.dy[i])
    }))
}

fn check_finite(img: &Image2, what: &str) -> Result<()> {
    if img.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} image contains non-finite values")))
    }
}

/// Registers `moving` onto `fixed`; the returned field `s` makes
/// `moving(x + s(x))` match `fixed(x)`.
pub fn demons_register(fixed: &Image2, moving: &Image2, cfg: &DemonsConfig) -> Result<Registration> {
    cfg.validate()?;
    if !fixed.same_dims(moving) {
        return Err(Error::DimensionMismatch(format!(
            "fixed {}x{} vs moving {}x{}",
            fixed.nx, fixed.ny, moving.nx, moving.ny
        )));
    }
    check_finite(fixed, "fixed")?;
    check_finite(moving, "moving")?;

    let (nx, ny) = (fixed.nx, fixed.ny);
    let (gx, gy) = gradient(fixed);
    let mut field = DeformationField::identity(nx, ny);
    let mut warped = moving.clone();
    let mse0 = warped.mse(fixed);
    let mut trace = vec![mse0];
    if mse0 == 0.0 {
        return Ok(Registration {
            field,
            warped,
            mse_trace: trace,
        });
    }
    let min_gain = cfg.mse_rel_tol * mse0;

    for _ in 0..cfg.max_iters {
        let mut update = DeformationField::identity(nx, ny);
        for i in 0..nx * ny {
            let diff = fixed.data[i] - warped.data[i];
            let denom = gx[i] * gx[i] + gy[i] * gy[i] + diff * diff;
            if denom < DENOMINATOR_EPS {
                continue;
            }
            let (mut ux, mut uy) = (diff * gx[i] / denom, diff * gy[i] / denom);
            let mag = (ux * ux + uy * uy).sqrt();
            if mag > cfg.step_cap {
                ux *= cfg.step_cap / mag;
                uy *= cfg.step_cap / mag;
            }
            update.dx[i] = ux;
            update.dy[i] = uy;
        }
        let update = update.smoothed(cfg.sigma);

        // s'(x) = u(x) + s(x + u(x))
        let (sx, sy) = field.component_images();
        let mut composed = DeformationField::identity(nx, ny);
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * y;
                let (px, py) = (x as f64 + update.dx[i], y as f64 + update.dy[i]);
                composed.dx[i] = update.dx[i] + sx.sample(px, py);
                composed.dy[i] = update.dy[i] + sy.sample(px, py);
            }
        }
        let candidate = composed.smoothed(cfg.sigma);
        let candidate_warped = warp_bilinear(moving, &candidate)?;
        let mse = candidate_warped.mse(fixed);
        let prev = *trace.last().expect("trace is never empty");
        if !(prev - mse >= min_gain) || !candidate.is_finite() {
            break;
        }
        field = candidate;
        warped = candidate_warped;
        trace.push(mse);
        if mse == 0.0 {
            break;
        }
    }
    Ok(Registration {
        field,
        warped,
        mse_trace: trace,
    })
}

#[derive(Clone, Debug)]
pub struct CorrectedStack {
    pub volume: ImageVolume,
    /// One field per slice; slice 0 holds the identity.
    pub fields: Vec<DeformationField>,
    pub mse_traces: Vec<Vec<f64>>,
}

fn slice_image(vol: &Volume<f32>, z: usize, offset: f64, scale: f64) -> Image2 {
    let [nx, ny, _] = vol.dims();
    Image2 {
        nx,
        ny,
        data: vol.slice(z).iter().map(|&v| (v as f64 - offset) * scale).collect(),
    }
}

/// Registers every slice to the corrected previous slice, starting from
/// slice 0 as the fixed reference.
///
/// Intensities are rescaled to `[0, 1]` by the volume's min/max before
/// registration; the output keeps the input's intensity domain.
pub fn correct_stack(vol: &ImageVolume, cfg: &DemonsConfig) -> Result<CorrectedStack> {
    cfg.validate()?;
    let grid = vol.grid();
    let [nx, ny, nz] = grid.dims();
    let (lo, hi) = grid
        .voxels()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("stack contains non-finite values".into()));
    }
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };

    let mut out = grid.clone();
    let mut fields = vec![DeformationField::identity(nx, ny)];
    let mut traces = vec![vec![0.0]];
    let mut previous = slice_image(grid, 0, lo, scale);
    for z in 1..nz {
        let moving = slice_image(grid, z, lo, scale);
        let reg = demons_register(&previous, &moving, cfg)?;
        for (o, &w) in out.slice_mut(z).iter_mut().zip(&reg.warped.data) {
            *o = (w / scale + lo) as f32;
        }
        previous = reg.warped;
        fields.push(reg.field);
        traces.push(reg.mse_trace);
    }
    let volume = match vol.domain() {
        IntensityDomain::Raw => ImageVolume::raw(out),
        IntensityDomain::UnitNormalized => ImageVolume::unit(out.map(|v| v.clamp(0.0, 1.0)))?,
    };
    Ok(CorrectedStack {
        volume,
        fields,
        mse_traces: traces,
    })
}

/// Writes per-slice fields as a raw `f32` array of dims `[nx, ny, 2 * nz]`:
/// for each slice the `dx` plane followed by the `dy` plane.
pub fn save_fields(fields: &[DeformationField], path: impl AsRef<Path>) -> Result<()> {
    let first = fields.first().ok_or_else(|| Error::Empty("no deformation fields".into()))?;
    let mut values = Vec::with_capacity(first.nx * first.ny * 2 * fields.len());
    for f in fields {
        if f.nx != first.nx || f.ny != first.ny {
            return Err(Error::DimensionMismatch("fields differ in size".into()));
        }
        values.extend(f.dx.iter().map(|&v| v as f32));
        values.extend(f.dy.iter().map(|&v| v as f32));
    }
    crate::volume::write_raw_f32(
        path.as_ref(),
        [first.nx, first.ny, 2 * fields.len()],
        [1.0; 3],
        &values,
    )
}

/// Reads fields written by [`save_fields`].
pub fn load_fields(path: impl AsRef<Path>) -> Result<Vec<DeformationField>> {
    let vol = crate::volume::load_stack(path)?;
    let [nx, ny, planes] = vol.dims();
    if planes % 2 != 0 {
        return Err(Error::DimensionMismatch("field file must hold an even number of planes".into()));
    }
    Ok((0..planes / 2)
        .map(|k| DeformationField {
            nx,
            ny,
            dx: vol.slice(2 * k).iter().map(|&v| v as f64).collect(),
            dy: vol.slice(2 * k + 1).iter().map(|&v| v as f64).collect(),
        })
        .collect())
}
