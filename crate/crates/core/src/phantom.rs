//! Synthetic vessel volumes with exact ground truth.
//!
//! Tubes are swept spheres along bounded-curvature random walks that enter
//! and leave through the volume faces. The image is a bright lumen over a
//! dim textured background, darkened by red-blood-cell-like ellipsoids,
//! attenuated with depth, blurred, corrupted by Gaussian noise and finally
//! displaced slice by slice with smooth in-plane warps.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::centerline::{path_length, CenterlineGraph, Edge, Node, NodeKind};
use crate::error::{Error, Result};
use crate::motion::{load_fields, save_fields, warp_bilinear, DeformationField, Image2};
use crate::net::PatchSet;
use crate::segment::{extract_fov_patch, extract_roi_labels};
use crate::volume::{load_binary, load_stack, save_binary, save_stack, BinaryVolume, ImageVolume, IntensityDomain, Volume};

/// Raw intensity of a unit-brightness lumen.
pub const RAW_SCALE: f64 = 30000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_um: f64,
    pub tubes: usize,
    /// Tube radius range in voxels, drawn uniformly per tube.
    pub radius_range: [f64; 2],
    /// Largest direction change per random-walk step; 0 gives straight tubes.
    pub step_angle_deg: f64,
    pub step_length: f64,
    /// Expected dark ellipsoids per 100 µm of vessel.
    pub rbc_per_100um: f64,
    pub noise_sigma: f64,
    /// Per-voxel depth attenuation coefficient along z.
    pub attenuation: f64,
    /// Largest in-plane displacement of the per-slice warps, in pixels.
    pub motion_amplitude: f64,
    pub background_level: f64,
    /// Amplitude of the smooth background texture.
    pub texture_amplitude: f64,
    pub blur_sigma: f64,
    /// Minimum surface-to-surface gap between tubes, in voxels.
    pub min_gap: f64,
    /// Shortest accepted tube centreline, in voxels.
    pub min_length: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing_um: 1.0,
            tubes: 5,
            radius_range: [2.0, 4.5],
            step_angle_deg: 8.0,
            step_length: 1.0,
            rbc_per_100um: 4.0,
            noise_sigma: 0.05,
            attenuation: 0.01,
            motion_amplitude: 0.0,
            background_level: 0.15,
            texture_amplitude: 0.08,
            blur_sigma: 0.6,
            min_gap: 2.0,
            min_length: 16.0,
            max_retries: 500,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("phantom spec: {m}")));
        if self.dims.contains(&0) {
            return bad("dims must be positive");
        }
        if !(self.spacing_um > 0.0) || !(self.step_length > 0.0) {
            return bad("spacing and step length must be positive");
        }
        if !(self.radius_range[0] >= 1.0 && self.radius_range[1] >= self.radius_range[0]) {
            return bad("radius range must satisfy 1 <= min <= max");
        }
        let non_negative = [
            self.step_angle_deg,
            self.rbc_per_100um,
            self.noise_sigma,
            self.attenuation,
            self.motion_amplitude,
            self.texture_amplitude,
            self.blur_sigma,
            self.min_gap,
            self.min_length,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return bad("densities, amplitudes and lengths must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeTruth {
    pub radius: f64,
    /// Centreline polyline in voxel coordinates; both ends lie on faces.
    pub points: Vec<[f64; 3]>,
    pub length_um: f64,
    pub chord_um: f64,
    pub tortuosity: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    /// Motion-corrupted raw image.
    pub image: ImageVolume,
    /// The same image before the per-slice warps.
    pub clean: ImageVolume,
    pub gt: BinaryVolume,
    pub graph: CenterlineGraph,
    /// Warp applied to each slice (`warped(x) = clean(x + w(x))`); slice 0
    /// is the identity.
    pub motion: Vec<DeformationField>,
    pub tubes: Vec<TubeTruth>,
}

type P3 = [f64; 3];

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: P3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn unit(a: P3) -> P3 {
    scale(a, 1.0 / norm(a))
}

fn random_unit(rng: &mut ChaCha8Rng) -> P3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        if norm(v) > 1e-6 {
            return unit(v);
        }
    }
}

fn inside(p: P3, dims: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64)
}

/// Largest `t` in `[0, 1]` keeping `p + t d` inside the box.
fn exit_fraction(p: P3, d: P3, dims: [usize; 3]) -> f64 {
    let mut t: f64 = 1.0;
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        if d[a] > 0.0 {
            t = t.min((hi - p[a]) / d[a]);
        } else if d[a] < 0.0 {
            t = t.min(-p[a] / d[a]);
        }
    }
    t.max(0.0)
}

fn random_walk(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<P3> {
    let dims = spec.dims;
    let face = rng.random_range(0..6);
    let axis = face / 2;
    let mut start = [0.0; 3];
    for a in 0..3 {
        start[a] = rng.random_range(0.0..=(dims[a] - 1) as f64);
    }
    start[axis] = if face % 2 == 0 { 0.0 } else { (dims[axis] - 1) as f64 };
    let mut inward = [0.0; 3];
    inward[axis] = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut dir = unit(add(inward, scale(random_unit(rng), 0.5)));
    if dir[axis] * inward[axis] <= 0.05 {
        dir = inward;
    }
    let max_angle = spec.step_angle_deg.to_radians();
    let mut points = vec![start];
    let mut p = start;
    let max_steps = 10 * dims.iter().sum::<usize>();
    for _ in 0..max_steps {
        if max_angle > 0.0 {
            let r = random_unit(rng);
            let perp = sub(r, scale(dir, dot(r, dir)));
            if norm(perp) > 1e-9 {
                let angle = rng.random_range(0.0..=max_angle);
                dir = unit(add(scale(dir, angle.cos()), scale(unit(perp), angle.sin())));
            }
        }
        let step = scale(dir, spec.step_length);
        let next = add(p, step);
        if inside(next, dims) {
            points.push(next);
            p = next;
        } else {
            let t = exit_fraction(p, step, dims);
            if t > 1e-9 {
                points.push(add(p, scale(step, t)));
            }
            break;
        }
    }
    points
}

fn polyline_length(points: &[P3], spacing: f64) -> f64 {
    points.windows(2).map(|w| norm(sub(w[1], w[0]))).sum::<f64>() * spacing
}

fn point_segment_distance(p: P3, a: P3, b: P3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 { 0.0 } else { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) };
    norm(sub(p, add(a, scale(ab, t))))
}

/// Visits voxels within `radius` of any polyline segment.
fn for_each_near(points: &[P3], radius: f64, dims: [usize; 3], mut f: impl FnMut(usize, usize, usize, f64)) {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let lo: Vec<usize> = (0..3).map(|k| (a[k].min(b[k]) - radius).floor().max(0.0) as usize).collect();
        let hi: Vec<usize> = (0..3)
            .map(|k| ((a[k].max(b[k]) + radius).ceil() as usize).min(dims[k] - 1))
            .collect();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d = point_segment_distance([x as f64, y as f64, z as f64], a, b);
                    if d <= radius {
                        f(x, y, z, d);
                    }
                }
            }
        }
    }
}

/// 26-connected voxel chain through the rounded polyline vertices.
fn rasterize(points: &[P3], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let clamp_round = |p: P3| -> [isize; 3] {
        [
            p[0].round().clamp(0.0, (dims[0] - 1) as f64) as isize,
            p[1].round().clamp(0.0, (dims[1] - 1) as f64) as isize,
            p[2].round().clamp(0.0, (dims[2] - 1) as f64) as isize,
        ]
    };
    let mut out: Vec<[usize; 3]> = Vec::new();
    let mut push = |v: [isize; 3]| {
        let v = [v[0] as usize, v[1] as usize, v[2] as usize];
        if out.last() != Some(&v) {
            out.push(v);
        }
    };
    let Some(&first) = points.first() else { return Vec::new() };
    push(clamp_round(first));
    for w in points.windows(2) {
        let (a, b) = (clamp_round(w[0]), clamp_round(w[1]));
        let n = (0..3).map(|k| (b[k] - a[k]).abs()).max().unwrap();
        for s in 1..=n {
            let t = s as f64 / n as f64;
            push([
                (a[0] as f64 + t * (b[0] - a[0]) as f64).round() as isize,
                (a[1] as f64 + t * (b[1] - a[1]) as f64).round() as isize,
                (a[2] as f64 + t * (b[2] - a[2]) as f64).round() as isize,
            ]);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
fn blur3(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let base = i * strides[a] + j * strides[b];
                line.clear();
                line.extend((0..n).map(|t| data[base + t * strides[axis]]));
                for t in 0..n {
                    let mut acc = 0.0;
                    for (o, w) in k.iter().enumerate() {
                        let q = (t as isize + o as isize - r).clamp(0, n as isize - 1) as usize;
                        acc += w * line[q];
                    }
                    data[base + t * strides[axis]] = acc;
                }
            }
        }
    }
}

/// Smooth random in-plane warp whose largest displacement is `amplitude`
/// (times a random factor in [0.5, 1]).
fn random_warp(nx: usize, ny: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> DeformationField {
    if amplitude <= 0.0 {
        return DeformationField::identity(nx, ny);
    }
    let mut comps = Vec::new();
    for _ in 0..2 {
        let c: [f64; 8] = std::array::from_fn(|k| match k {
            0 | 1 | 4 | 5 => rng.random_range(0.2..1.0),
            _ => rng.random_range(0.0..TAU),
        });
        comps.push(c);
    }
    let (tx, ty) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut field = DeformationField::from_fn(nx, ny, |x, y| {
        let (u, v) = (x as f64 / nx as f64, y as f64 / ny as f64);
        let wave = |c: &[f64; 8], off: usize| (TAU * (c[off] * u + c[off + 1] * v) + c[off + 2]).sin() * c[off + 3].cos();
        let dx = tx + comps.iter().map(|c| wave(c, 0)).sum::<f64>();
        let dy = ty + comps.iter().map(|c| wave(c, 4)).sum::<f64>();
        (dx, dy)
    });
    let m = field.max_magnitude();
    if m > 0.0 {
        let s = amplitude * rng.random_range(0.5..=1.0) / m;
        field.dx.iter_mut().chain(field.dy.iter_mut()).for_each(|v| *v *= s);
    }
    field
}

fn to_raw(v: f64) -> f32 {
    (v.max(0.0) * RAW_SCALE).round().min(65535.0) as f32
}

/// Generates a phantom; identical specs give bit-identical output.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = spec.dims;
    let spacing = [spec.spacing_um; 3];

    let mut tubes: Vec<TubeTruth> = Vec::new();
    while tubes.len() < spec.tubes {
        let mut placed = false;
        for _ in 0..spec.max_retries.max(1) {
            let radius = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
            let points = random_walk(spec, &mut rng);
            let length_vx = polyline_length(&points, 1.0);
            if length_vx < spec.min_length || points.len() < 2 {
                continue;
            }
            let clear = tubes.iter().all(|t| {
                let gap = t.radius + radius + spec.min_gap;
                points.iter().all(|p| t.points.iter().all(|q| norm(sub(*p, *q)) >= gap))
            });
            if !clear {
                continue;
            }
            let chord = norm(sub(*points.last().unwrap(), points[0])) * spec.spacing_um;
            let length_um = length_vx * spec.spacing_um;
            tubes.push(TubeTruth {
                radius,
                points,
                length_um,
                chord_um: chord,
                tortuosity: length_um / chord,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Phantom(format!(
                "could not place tube {} without overlap after {} attempts",
                tubes.len() + 1,
                spec.max_retries
            )));
        }
    }

    let mut gt = BinaryVolume::filled(dims, spacing, false)?;
    for t in &tubes {
        for_each_near(&t.points, t.radius, dims, |x, y, z, _| gt.set(x, y, z, true));
    }

    // background texture: a few low-frequency plane waves
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let d = random_unit(&mut rng);
            let f = rng.random_range(1.0..3.0);
            [d[0] * f, d[1] * f, d[2] * f, rng.random_range(0.0..TAU)]
        })
        .collect();
    let n = dims[0] * dims[1] * dims[2];
    let mut img = vec![0.0f64; n];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = x + dims[0] * (y + dims[1] * z);
                img[i] = if gt.voxels()[i] {
                    1.0
                } else {
                    let u = [x as f64 / dims[0] as f64, y as f64 / dims[1] as f64, z as f64 / dims[2] as f64];
                    let tex = waves.iter().map(|w| (TAU * (w[0] * u[0] + w[1] * u[1] + w[2] * u[2]) + w[3]).sin()).sum::<f64>()
                        / waves.len() as f64;
                    spec.background_level + spec.texture_amplitude * tex
                };
            }
        }
    }

    // red blood cells: dark ellipsoids inside the lumen
    for t in &tubes {
        let mean = spec.rbc_per_100um * t.length_um / 100.0;
        let count = if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
        } else {
            0
        };
        let seg_lengths: Vec<f64> = t.points.windows(2).map(|w| norm(sub(w[1], w[0]))).collect();
        let total: f64 = seg_lengths.iter().sum();
        for _ in 0..count {
            let mut s = rng.random_range(0.0..total);
            let mut k = 0;
            while k + 1 < seg_lengths.len() && s > seg_lengths[k] {
                s -= seg_lengths[k];
                k += 1;
            }
            let (a, b) = (t.points[k], t.points[k + 1]);
            let dir = unit(sub(b, a));
            let c = add(a, scale(dir, s.min(seg_lengths[k])));
            let along = t.radius * rng.random_range(0.4..0.8);
            let across = t.radius * rng.random_range(0.4..0.8);
            let factor = rng.random_range(0.1..=0.4);
            let reach = along.max(across);
            for_each_near(&[c, c], reach, dims, |x, y, z, _| {
                let i = x + dims[0] * (y + dims[1] * z);
                if !gt.voxels()[i] {
                    return;
                }
                let d = sub([x as f64, y as f64, z as f64], c);
                let l = dot(d, dir);
                let p2 = dot(d, d) - l * l;
                if (l / along).powi(2) + p2 / (across * across) <= 1.0 {
                    img[i] *= factor;
                }
            });
        }
    }

    blur3(&mut img, dims, spec.blur_sigma);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    for z in 0..dims[2] {
        let att = (-spec.attenuation * z as f64).exp();
        for i in z * dims[0] * dims[1]..(z + 1) * dims[0] * dims[1] {
            img[i] = img[i] * att + if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }

    let clean_grid = Volume::new(dims, spacing, img.iter().map(|&v| to_raw(v)).collect())?;
    let plane = dims[0] * dims[1];
    let mut motion = Vec::with_capacity(dims[2]);
    let mut warped = Vec::with_capacity(n);
    for z in 0..dims[2] {
        let field = if z == 0 {
            DeformationField::identity(dims[0], dims[1])
        } else {
            random_warp(dims[0], dims[1], spec.motion_amplitude, &mut rng)
        };
        let slice = Image2::new(dims[0], dims[1], img[z * plane..(z + 1) * plane].to_vec())?;
        let out = if field.max_magnitude() > 0.0 { warp_bilinear(&slice, &field)? } else { slice };
        warped.extend(out.data.iter().map(|&v| to_raw(v)));
        motion.push(field);
    }
    let image = ImageVolume::raw(Volume::new(dims, spacing, warped)?);

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for t in &tubes {
        let path = rasterize(&t.points, dims);
        let (a, b) = (path[0], *path.last().unwrap());
        let id = nodes.len();
        for (k, p) in [a, b].into_iter().enumerate() {
            nodes.push(Node {
                id: id + k,
                position: p,
                kind: NodeKind::Endpoint,
                voxels: vec![p],
            });
        }
        debug_assert!(path_length(&path, spacing) > 0.0);
        edges.push(Edge {
            n1: id,
            n2: id + 1,
            path,
            length_um: t.length_um,
        });
    }

    Ok(Phantom {
        spec: spec.clone(),
        image,
        clean: ImageVolume::raw(clean_grid),
        gt,
        graph: CenterlineGraph { nodes, edges },
        motion,
        tubes,
    })
}

/// Draws `n` training patches from a unit-normalized image. A fraction
/// `balance` of them (rounded) have at least one foreground label in the
/// ROI, the rest none; positions are found by rejection sampling.
pub fn sample_patches(
    img: &ImageVolume,
    gt: &BinaryVolume,
    fov: [usize; 3],
    roi: [usize; 3],
    n: usize,
    balance: f64,
    rng: &mut impl Rng,
) -> Result<PatchSet> {
    if img.domain() != IntensityDomain::UnitNormalized {
        return Err(Error::InvalidArgument("patch sampling expects a unit-normalized image".into()));
    }
    img.require_same_shape(gt)?;
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::InvalidArgument("balance must lie in [0, 1]".into()));
    }
    let dims = img.dims();
    if (0..3).any(|a| roi[a] > dims[a]) {
        return Err(Error::InvalidArgument(format!("roi {roi:?} exceeds volume {dims:?}")));
    }
    let want_fg = (n as f64 * balance).round() as usize;
    if want_fg > 0 && gt.count() == 0 {
        return Err(Error::InvalidArgument("foreground patches requested but the ground truth is empty".into()));
    }
    if want_fg < n && gt.voxels().iter().all(|&v| v) {
        return Err(Error::InvalidArgument("background patches requested but the ground truth is full".into()));
    }
    let mut set = PatchSet::new(fov, roi);
    let (mut fg, mut bg) = (0, 0);
    let budget = 1000 * n.max(1) + 100_000;
    let mut attempts = 0;
    while fg + bg < n {
        attempts += 1;
        if attempts > budget {
            return Err(Error::InvalidArgument(format!(
                "could not reach the requested balance {balance} within {budget} draws"
            )));
        }
        let origin = [
            rng.random_range(0..=dims[0] - roi[0]),
            rng.random_range(0..=dims[1] - roi[1]),
            rng.random_range(0..=dims[2] - roi[2]),
        ];
        let labels = extract_roi_labels(gt, origin, roi);
        let has_fg = labels.iter().any(|&l| l);
        if (has_fg && fg >= want_fg) || (!has_fg && bg >= n - want_fg) {
            continue;
        }
        set.push(&extract_fov_patch(img.grid(), origin, fov, roi), &labels)?;
        if has_fg {
            fg += 1;
        } else {
            bg += 1;
        }
    }
    Ok(set)
}

/// Saves a phantom as a directory: `image.tif`, `clean.tif` and `gt.tif`
/// (with their sidecars), `graph.json`, `tubes.json`, `spec.json` and
/// `motion.raw` (+ `motion.json`).
pub fn save_bundle(ph: &Phantom, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_stack(&ph.image, dir.join("image.tif"))?;
    save_stack(&ph.clean, dir.join("clean.tif"))?;
    save_binary(&ph.gt, dir.join("gt.tif"))?;
    write_json(&dir.join("graph.json"), &ph.graph)?;
    write_json(&dir.join("tubes.json"), &ph.tubes)?;
    write_json(&dir.join("spec.json"), &ph.spec)?;
    save_fields(&ph.motion, dir.join("motion.raw"))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a directory written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<Phantom> {
    let spec: PhantomSpec = read_json(&dir.join("spec.json"))?;
    let mut graph: CenterlineGraph = read_json(&dir.join("graph.json"))?;
    for node in &mut graph.nodes {
        node.voxels = vec![node.position];
    }
    Ok(Phantom {
        image: load_stack(dir.join("image.tif"))?,
        clean: load_stack(dir.join("clean.tif"))?,
        gt: load_binary(dir.join("gt.tif"))?,
        graph,
        tubes: read_json(&dir.join("tubes.json"))?,
        motion: load_fields(dir.join("motion.raw"))?,
        spec,
    })
}
