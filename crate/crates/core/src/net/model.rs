//! Parameters, forward pass and exact backpropagation.
//!
//! Activations use a channel-last layout: element `(x, y, z, c)` of a grid
//! of shape `[X, Y, Z, C]` lives at `((x * Y + y) * Z + z) * C + c`. Flatten
//! is therefore a no-op on the data. Convolution weights are stored as
//! `[kx, ky, kz, c_in, c_out]` and dense weights as `[inputs, outputs]`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{infer_shapes, Layer, NetSpec, Shape};
use crate::error::{Error, Result};

/// Floating-point element type of the engine.
pub trait Real: Float + AddAssign + Sum + Default + Debug + Send + Sync + 'static {
    /// Size in bytes; also the dtype tag in checkpoints.
    const BYTES: u8;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: u8 = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: u8 = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter arrays, a weight/bias pair per trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub arrays: Vec<ParamArray<T>>,
}

impl<T: Real> Params<T> {
    /// Zero-initialized arrays shaped for `spec`.
    pub fn zeros(spec: &NetSpec) -> Self {
        let mut arrays = Vec::new();
        let (mut conv, mut dense) = (0, 0);
        for layer in &spec.layers {
            let (prefix, wshape, bshape) = match layer {
                Layer::Conv { kernel, in_channels, out_channels } => {
                    conv += 1;
                    (
                        format!("conv{conv}"),
                        vec![kernel[0], kernel[1], kernel[2], *in_channels, *out_channels],
                        *out_channels,
                    )
                }
                Layer::Dense { inputs, width, .. } => {
                    dense += 1;
                    (format!("dense{dense}"), vec![*inputs, *width], *width)
                }
                Layer::Output { inputs, roi } => {
                    let n = roi.iter().product::<usize>() * 2;
                    ("output".to_string(), vec![*inputs, n], n)
                }
                _ => continue,
            };
            let n: usize = wshape.iter().product();
            arrays.push(ParamArray {
                name: format!("{prefix}.weight"),
                shape: wshape,
                data: vec![T::zero(); n],
            });
            arrays.push(ParamArray {
                name: format!("{prefix}.bias"),
                shape: vec![bshape],
                data: vec![T::zero(); bshape],
            });
        }
        Self { arrays }
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn he_init(spec: &NetSpec, seed: u64) -> Self {
        let mut params = Self::zeros(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for array in params.arrays.iter_mut().filter(|a| a.name.ends_with(".weight")) {
            let fan_in: usize = array.shape[..array.shape.len() - 1].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in array.data.iter_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: vec![T::zero(); a.data.len()],
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray<T>> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &Params<T>) -> bool {
        self.arrays.len() == other.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&other.arrays)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, activations cached for backprop.
    Train,
    /// Deterministic, dropout disabled.
    Eval,
    /// Dropout active at inference time, nothing cached.
    McDropout,
}

/// Intermediate values of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleCache<T> {
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits.
    acts: Vec<Vec<T>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    /// Inverted-dropout scale per unit (0 for dropped units).
    dropout_scale: Vec<Option<Vec<T>>>,
}

impl<T> SampleCache<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("cache holds at least the input")
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    /// `[background, foreground]` probability per ROI voxel.
    pub probs: Vec<[T; 2]>,
    pub cache: Option<SampleCache<T>>,
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], row: &[T], s: T) {
    for (a, &r) in acc.iter_mut().zip(row) {
        *a += s * r;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Two-class softmax of a `[background, foreground]` logit pair.
#[inline]
pub fn softmax_pair<T: Real>(l_bg: T, l_fg: T) -> [T; 2] {
    let p_fg = T::one() / (T::one() + (l_bg - l_fg).exp());
    [T::one() - p_fg, p_fg]
}

/// A spec with its parameters and precomputed shape trace.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: NetSpec,
    params: Params<T>,
    shapes: Vec<Shape>,
    /// Index of the weight array for each layer (bias follows it).
    slots: Vec<Option<usize>>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: NetSpec, params: Params<T>) -> Result<Self> {
        let shapes = infer_shapes(&spec)?;
        let expected = Params::<T>::zeros(&spec);
        if !expected.same_layout(&params) {
            return Err(Error::DimensionMismatch("parameter arrays do not match the architecture".into()));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("parameters contain non-finite values".into()));
        }
        let mut slots = Vec::with_capacity(spec.layers.len());
        let mut next = 0;
        for layer in &spec.layers {
            match layer {
                Layer::Conv { .. } | Layer::Dense { .. } | Layer::Output { .. } => {
                    slots.push(Some(next));
                    next += 2;
                }
                _ => slots.push(None),
            }
        }
        Ok(Self {
            spec,
            params,
            shapes,
            slots,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<T> {
        self.params
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    fn weights(&self, layer: usize) -> (&[T], &[T]) {
        let slot = self.slots[layer].expect("trainable layer");
        (&self.params.arrays[slot].data, &self.params.arrays[slot + 1].data)
    }

    /// Runs layers `range` starting from `input` (the activation entering
    /// `range.start`). Returns the final activation and, if requested, a cache.
    fn run<R: Rng + ?Sized>(
        &self,
        range: std::ops::Range<usize>,
        input: Vec<T>,
        mut dropout_rng: Option<&mut R>,
        record: bool,
    ) -> (Vec<T>, Option<SampleCache<T>>) {
        let mut cache = record.then(|| SampleCache {
            acts: Vec::with_capacity(range.len() + 1),
            pool_argmax: Vec::with_capacity(range.len()),
            dropout_scale: Vec::with_capacity(range.len()),
        });
        let mut act = input;
        for i in range {
            let in_shape = self.shapes[i];
            let mut argmax = None;
            let mut scale = None;
            let out = match (&self.spec.layers[i], in_shape) {
                (Layer::Conv { kernel, out_channels, .. }, Shape::Grid(dims)) => {
                    let (w, b) = self.weights(i);
                    conv_forward(&act, dims, w, b, *kernel, *out_channels)
                }
                (Layer::MaxPool, Shape::Grid(dims)) => {
                    let (out, idx) = pool_forward(&act, dims);
                    argmax = Some(idx);
                    out
                }
                (Layer::Flatten, _) => act.clone(),
                (Layer::Dense { width, dropout, .. }, _) => {
                    let (w, b) = self.weights(i);
                    let mut out = dense_forward(&act, w, b, *width);
                    out.iter_mut().for_each(|v| *v = v.max(T::zero()));
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        if *dropout > 0.0 {
                            let keep = T::from_f64(1.0 / (1.0 - dropout));
                            let s: Vec<T> = (0..*width)
                                .map(|_| if rng.random::<f64>() < *dropout { T::zero() } else { keep })
                                .collect();
                            for (o, &m) in out.iter_mut().zip(&s) {
                                *o = *o * m;
                            }
                            scale = Some(s);
                        }
                    }
                    out
                }
                (Layer::Output { roi, .. }, _) => {
                    let (w, b) = self.weights(i);
                    dense_forward(&act, w, b, roi.iter().product::<usize>() * 2)
                }
                (layer, shape) => unreachable!("validated spec: {layer:?} on {shape:?}"),
            };
            if let Some(c) = cache.as_mut() {
                c.acts.push(std::mem::replace(&mut act, out));
                c.pool_argmax.push(argmax);
                c.dropout_scale.push(scale);
            } else {
                act = out;
            }
        }
        if let Some(c) = cache.as_mut() {
            c.acts.push(act.clone());
        }
        (act, cache)
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.spec.fov_voxels() {
            return Err(Error::DimensionMismatch(format!(
                "input patch has {} values, fov {:?} needs {}",
                input.len(),
                self.spec.fov,
                self.spec.fov_voxels()
            )));
        }
        Ok(())
    }

    /// Forward pass of one FOV patch (channel-last layout, one channel).
    pub fn forward_sample<R: Rng + ?Sized>(&self, input: &[T], mode: Mode, rng: &mut R) -> Result<SampleOutput<T>> {
        self.check_input(input)?;
        let dropout = matches!(mode, Mode::Train | Mode::McDropout).then_some(rng);
        let (logits, cache) = self.run(0..self.spec.layers.len(), input.to_vec(), dropout, mode == Mode::Train);
        Ok(SampleOutput {
            probs: logits.chunks_exact(2).map(|l| softmax_pair(l[0], l[1])).collect(),
            cache,
        })
    }

    /// Forward pass of `inputs.len() / fov_voxels` patches stored back to back.
    /// Each sample draws its dropout mask from its own stream seeded by `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, inputs: &[T], mode: Mode, rng: &mut R) -> Result<Vec<SampleOutput<T>>> {
        let n = self.spec.fov_voxels();
        if inputs.is_empty() || !inputs.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch(format!(
                "batch of {} values is not a multiple of the fov size {n}",
                inputs.len()
            )));
        }
        inputs
            .chunks_exact(n)
            .map(|patch| {
                let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
                self.forward_sample(patch, mode, &mut sample_rng)
            })
            .collect()
    }

    /// Output of the convolution/pooling trunk, flattened.
    pub fn trunk_features(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let end = self.spec.trunk_len();
        Ok(self.run::<ChaCha8Rng>(0..end, input.to_vec(), None, false).0)
    }

    /// Foreground probability per ROI voxel from trunk features, with
    /// dropout drawn from `rng` when given.
    pub fn head_foreground<R: Rng + ?Sized>(&self, features: &[T], rng: Option<&mut R>) -> Vec<T> {
        let start = self.spec.trunk_len();
        let (logits, _) = self.run(start..self.spec.layers.len(), features.to_vec(), rng, false);
        logits.chunks_exact(2).map(|l| softmax_pair(l[0], l[1])[1]).collect()
    }

    /// Accumulates the gradient of a loss with logit gradient `grad_logits`
    /// into `grads`.
    pub fn backward_sample(&self, cache: &SampleCache<T>, grad_logits: &[T], grads: &mut Params<T>) -> Result<()> {
        let layers = self.spec.layers.len();
        if cache.acts.len() != layers + 1 {
            return Err(Error::InvalidArgument("cache does not come from a train-mode forward pass".into()));
        }
        if grad_logits.len() != cache.logits().len() {
            return Err(Error::DimensionMismatch("logit gradient size".into()));
        }
        let mut g = grad_logits.to_vec();
        for i in (0..layers).rev() {
            let input = &cache.acts[i];
            let output = &cache.acts[i + 1];
            let need_input_grad = i > 0;
            g = match (&self.spec.layers[i], self.shapes[i]) {
                (Layer::Conv { kernel, out_channels, .. }, Shape::Grid(dims)) => {
                    let slot = self.slots[i].expect("conv has params");
                    let w = &self.params.arrays[slot].data;
                    let (gw, gb) = split_pair(grads, slot);
                    conv_backward(input, dims, w, *kernel, *out_channels, output, &g, gw, gb, need_input_grad)
                }
                (Layer::MaxPool, Shape::Grid(_)) => {
                    let idx = cache.pool_argmax[i].as_ref().expect("pool argmax cached");
                    let mut gin = vec![T::zero(); input.len()];
                    for (&src, &gv) in idx.iter().zip(&g) {
                        gin[src as usize] += gv;
                    }
                    gin
                }
                (Layer::Flatten, _) => g,
                (Layer::Dense { width, .. }, _) => {
                    let slot = self.slots[i].expect("dense has params");
                    let w = &self.params.arrays[slot].data;
                    let mut gpre = g;
                    let scale = cache.dropout_scale[i].as_ref();
                    for (k, gv) in gpre.iter_mut().enumerate() {
                        if !(output[k] > T::zero()) {
                            *gv = T::zero();
                        } else if let Some(s) = scale {
                            *gv = *gv * s[k];
                        }
                    }
                    let (gw, gb) = split_pair(grads, slot);
                    dense_backward(input, w, *width, &gpre, gw, gb, need_input_grad)
                }
                (Layer::Output { roi, .. }, _) => {
                    let slot = self.slots[i].expect("output has params");
                    let w = &self.params.arrays[slot].data;
                    let (gw, gb) = split_pair(grads, slot);
                    dense_backward(input, w, roi.iter().product::<usize>() * 2, &g, gw, gb, need_input_grad)
                }
                (layer, shape) => unreachable!("validated spec: {layer:?} on {shape:?}"),
            };
        }
        Ok(())
    }
}

fn split_pair<T>(grads: &mut Params<T>, slot: usize) -> (&mut [T], &mut [T]) {
    let (head, tail) = grads.arrays.split_at_mut(slot + 1);
    (&mut head[slot].data, &mut tail[0].data)
}

fn conv_forward<T: Real>(x: &[T], dims: [usize; 4], w: &[T], b: &[T], k: [usize; 3], cout: usize) -> Vec<T> {
    let [nx, ny, nz, c] = dims;
    let (ox, oy, oz) = (nx - k[0] + 1, ny - k[1] + 1, nz - k[2] + 1);
    let run = k[2] * c;
    let mut out = vec![T::zero(); ox * oy * oz * cout];
    for px in 0..ox {
        for py in 0..oy {
            for pz in 0..oz {
                let o = &mut out[((px * oy + py) * oz + pz) * cout..][..cout];
                o.copy_from_slice(b);
                for dx in 0..k[0] {
                    for dy in 0..k[1] {
                        let ib = (((px + dx) * ny + (py + dy)) * nz + pz) * c;
                        let wb = (dx * k[1] + dy) * run * cout;
                        let xin = &x[ib..ib + run];
                        let wblk = &w[wb..wb + run * cout];
                        for (j, &s) in xin.iter().enumerate() {
                            if s != T::zero() {
                                axpy(o, &wblk[j * cout..(j + 1) * cout], s);
                            }
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    dims: [usize; 4],
    w: &[T],
    k: [usize; 3],
    cout: usize,
    out: &[T],
    g: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    let [nx, ny, nz, c] = dims;
    let (ox, oy, oz) = (nx - k[0] + 1, ny - k[1] + 1, nz - k[2] + 1);
    let run = k[2] * c;
    let mut gin = if need_input_grad { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gpre = vec![T::zero(); cout];
    for px in 0..ox {
        for py in 0..oy {
            for pz in 0..oz {
                let base = ((px * oy + py) * oz + pz) * cout;
                let mut any = false;
                for o in 0..cout {
                    gpre[o] = if out[base + o] > T::zero() { g[base + o] } else { T::zero() };
                    any |= gpre[o] != T::zero();
                }
                if !any {
                    continue;
                }
                for (b, &v) in gb.iter_mut().zip(&gpre) {
                    *b += v;
                }
                for dx in 0..k[0] {
                    for dy in 0..k[1] {
                        let ib = (((px + dx) * ny + (py + dy)) * nz + pz) * c;
                        let wb = (dx * k[1] + dy) * run * cout;
                        for j in 0..run {
                            let s = x[ib + j];
                            let wrow = wb + j * cout;
                            if s != T::zero() {
                                axpy(&mut gw[wrow..wrow + cout], &gpre, s);
                            }
                            if need_input_grad {
                                gin[ib + j] += dot(&w[wrow..wrow + cout], &gpre);
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// 2x2 in-plane max pooling, stride 2, windows clipped at odd edges.
fn pool_forward<T: Real>(x: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<u32>) {
    let [nx, ny, nz, c] = dims;
    let (ox, oy) = (nx.div_ceil(2), ny.div_ceil(2));
    let mut out = vec![T::neg_infinity(); ox * oy * nz * c];
    let mut idx = vec![0u32; out.len()];
    for px in 0..ox {
        for py in 0..oy {
            for z in 0..nz {
                for ch in 0..c {
                    let o = ((px * oy + py) * nz + z) * c + ch;
                    for sx in 2 * px..(2 * px + 2).min(nx) {
                        for sy in 2 * py..(2 * py + 2).min(ny) {
                            let i = ((sx * ny + sy) * nz + z) * c + ch;
                            if x[i] > out[o] {
                                out[o] = x[i];
                                idx[o] = i as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, idx)
}

fn dense_forward<T: Real>(x: &[T], w: &[T], b: &[T], width: usize) -> Vec<T> {
    let mut out = b.to_vec();
    for (i, &s) in x.iter().enumerate() {
        if s != T::zero() {
            axpy(&mut out, &w[i * width..(i + 1) * width], s);
        }
    }
    out
}

fn dense_backward<T: Real>(
    x: &[T],
    w: &[T],
    width: usize,
    gpre: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input_grad: bool,
) -> Vec<T> {
    for (b, &v) in gb.iter_mut().zip(gpre) {
        *b += v;
    }
    let mut gin = if need_input_grad { vec![T::zero(); x.len()] } else { Vec::new() };
    for (i, &s) in x.iter().enumerate() {
        let row = i * width..(i + 1) * width;
        if s != T::zero() {
            axpy(&mut gw[row.clone()], gpre, s);
        }
        if need_input_grad {
            gin[i] = dot(&w[row], gpre);
        }
    }
    gin
}
