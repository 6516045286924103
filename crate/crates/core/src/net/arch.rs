//! Architecture descriptors and shape inference.
//!
//! Grammar (whitespace around tokens is ignored):
//!
//! ```text
//! spec  := block (" - " block)*
//! block := [n "*"] "C" kx "x" ky ["x" kz]   n valid 3D convolutions + ReLU
//!        | "P"                              2x2 max pooling in x/y (ceil mode)
//!        | [n "*"] "NN"                     n dense hidden layers + dropout
//! ```
//!
//! A two-class output layer covering the ROI is always appended. FOV and ROI
//! are supplied separately through [`ArchOptions`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The reference architecture: three 3x3x3 convolutions, pooling, two
/// in-plane 3x3 convolutions, pooling, a dense head.
pub const REFERENCE_DESCRIPTOR: &str = "3*C 3x3x3 - P - 2*C 3x3 - P - NN";
pub const REFERENCE_FOV: [usize; 3] = [33, 33, 7];
pub const REFERENCE_ROI: [usize; 3] = [5, 5, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchOptions {
    pub fov: [usize; 3],
    pub roi: [usize; 3],
    /// Channels of convolutions before the first pooling layer.
    pub channels_early: usize,
    /// Channels of convolutions after the first pooling layer.
    pub channels_late: usize,
    pub hidden_width: usize,
    pub dropout: f64,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            fov: REFERENCE_FOV,
            roi: REFERENCE_ROI,
            channels_early: 32,
            channels_late: 64,
            hidden_width: 1024,
            dropout: 0.5,
        }
    }
}

impl ArchOptions {
    pub fn with_fov(mut self, fov: [usize; 3]) -> Self {
        self.fov = fov;
        self
    }

    pub fn with_roi(mut self, roi: [usize; 3]) -> Self {
        self.roi = roi;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Valid (unpadded) convolution followed by ReLU.
    Conv { kernel: [usize; 3], in_channels: usize, out_channels: usize },
    /// 2x2 in-plane max pooling with stride 2; odd sizes round up.
    MaxPool,
    Flatten,
    /// Fully connected layer with ReLU and inverted dropout.
    Dense { inputs: usize, width: usize, dropout: f64 },
    /// Two logits per ROI voxel, turned into probabilities by softmax.
    Output { inputs: usize, roi: [usize; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub descriptor: String,
    pub fov: [usize; 3],
    pub roi: [usize; 3],
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Grid([usize; 4]),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Grid(s) => s.iter().product(),
            Shape::Flat(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Grid([x, y, z, c]) => write!(f, "{x}x{y}x{z}x{c}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

impl NetSpec {
    pub fn roi_voxels(&self) -> usize {
        self.roi.iter().product()
    }

    pub fn fov_voxels(&self) -> usize {
        self.fov.iter().product()
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    /// Number of leading layers that operate on grids (convolutions and pools).
    pub fn trunk_len(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Flatten))
            .unwrap_or(self.layers.len())
    }

    /// Sets the dropout rate on every dense layer.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        for layer in &mut self.layers {
            if let Layer::Dense { dropout, .. } = layer {
                *dropout = rate;
            }
        }
        self
    }

    /// Reference architecture at its default FOV/ROI and widths.
    pub fn reference() -> Self {
        parse_arch(REFERENCE_DESCRIPTOR, &ArchOptions::default()).expect("reference descriptor is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Block {
    Conv { repeat: usize, kernel: [usize; 3] },
    Pool,
    Dense { repeat: usize },
}

fn parse_count(text: &str, block: &str) -> Result<usize> {
    let n: usize = text
        .trim()
        .parse()
        .map_err(|_| Error::ArchSyntax(format!("bad repeat count {text:?} in block {block:?}")))?;
    if n == 0 {
        return Err(Error::ArchSyntax(format!("repeat count must be >= 1 in block {block:?}")));
    }
    Ok(n)
}

fn parse_block(raw: &str) -> Result<Block> {
    let block = raw.trim();
    if block.is_empty() {
        return Err(Error::ArchSyntax("empty block".into()));
    }
    let (repeat, body) = match block.split_once('*') {
        Some((n, rest)) => (Some(parse_count(n, block)?), rest.trim()),
        None => (None, block),
    };
    if body == "P" {
        if repeat.is_some() {
            return Err(Error::ArchSyntax(format!("pooling cannot be repeated: {block:?}")));
        }
        return Ok(Block::Pool);
    }
    if body == "NN" {
        return Ok(Block::Dense {
            repeat: repeat.unwrap_or(1),
        });
    }
    if let Some(kernel) = body.strip_prefix('C') {
        let parts: Vec<&str> = kernel.trim().split('x').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(Error::ArchSyntax(format!("kernel must be kx x ky [x kz] in {block:?}")));
        }
        let mut k = [1usize; 3];
        for (slot, part) in k.iter_mut().zip(&parts) {
            *slot = parse_count(part, block)?;
        }
        return Ok(Block::Conv {
            repeat: repeat.unwrap_or(1),
            kernel: k,
        });
    }
    Err(Error::ArchSyntax(format!("unrecognized block {block:?}")))
}

/// Parses `descriptor` into a layer list and checks that shapes close.
pub fn parse_arch(descriptor: &str, opts: &ArchOptions) -> Result<NetSpec> {
    let blocks: Vec<Block> = descriptor.split('-').map(parse_block).collect::<Result<_>>()?;
    if opts.channels_early == 0 || opts.channels_late == 0 || opts.hidden_width == 0 {
        return Err(Error::InvalidArgument("channel counts and dense widths must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {}", opts.dropout)));
    }

    let mut layers = Vec::new();
    let mut seen_pool = false;
    let mut seen_dense = false;
    let mut channels = 1;
    for block in &blocks {
        match *block {
            Block::Conv { repeat, kernel } => {
                if seen_dense {
                    return Err(Error::ArchSyntax("convolution after dense layers".into()));
                }
                let out = if seen_pool { opts.channels_late } else { opts.channels_early };
                for _ in 0..repeat {
                    layers.push(Layer::Conv {
                        kernel,
                        in_channels: channels,
                        out_channels: out,
                    });
                    channels = out;
                }
            }
            Block::Pool => {
                if seen_dense {
                    return Err(Error::ArchSyntax("pooling after dense layers".into()));
                }
                seen_pool = true;
                layers.push(Layer::MaxPool);
            }
            Block::Dense { repeat } => {
                if !seen_dense {
                    layers.push(Layer::Flatten);
                }
                seen_dense = true;
                for _ in 0..repeat {
                    layers.push(Layer::Dense {
                        inputs: 0,
                        width: opts.hidden_width,
                        dropout: opts.dropout,
                    });
                }
            }
        }
    }
    if !seen_dense {
        layers.push(Layer::Flatten);
    }
    layers.push(Layer::Output { inputs: 0, roi: opts.roi });

    let mut spec = NetSpec {
        descriptor: descriptor.trim().to_string(),
        fov: opts.fov,
        roi: opts.roi,
        layers,
    };
    resolve_inputs(&mut spec)?;
    Ok(spec)
}

fn check_geometry(fov: [usize; 3], roi: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if fov[a] == 0 || roi[a] == 0 {
            return Err(Error::ShapeInference(format!("fov {fov:?} and roi {roi:?} must be positive")));
        }
        if roi[a] > fov[a] || !(fov[a] - roi[a]).is_multiple_of(2) {
            return Err(Error::ShapeInference(format!(
                "roi {roi:?} must fit centred inside fov {fov:?} (equal parity per axis)"
            )));
        }
    }
    Ok(())
}

/// Fills in dense/output input sizes from the shape trace.
fn resolve_inputs(spec: &mut NetSpec) -> Result<()> {
    let trace = infer_shapes(spec)?;
    for (layer, input) in spec.layers.iter_mut().zip(trace.iter()) {
        match layer {
            Layer::Dense { inputs, .. } | Layer::Output { inputs, .. } => *inputs = input.len(),
            _ => {}
        }
    }
    // second pass validates the now-consistent spec
    infer_shapes(spec).map(|_| ())
}

/// Shape before the first layer followed by the output shape of every layer.
pub fn infer_shapes(spec: &NetSpec) -> Result<Vec<Shape>> {
    check_geometry(spec.fov, spec.roi)?;
    let mut shape = Shape::Grid([spec.fov[0], spec.fov[1], spec.fov[2], 1]);
    let mut trace = vec![shape];
    for (i, layer) in spec.layers.iter().enumerate() {
        shape = match (layer, shape) {
            (Layer::Conv { kernel, in_channels, out_channels }, Shape::Grid([x, y, z, c])) => {
                if *in_channels != c {
                    return Err(Error::ShapeInference(format!(
                        "layer {i} expects {in_channels} channels, input has {c}"
                    )));
                }
                let dims = [x, y, z];
                let mut out = [0usize; 3];
                for a in 0..3 {
                    if kernel[a] > dims[a] {
                        return Err(Error::ShapeInference(format!(
                            "layer {i}: kernel {kernel:?} larger than input {x}x{y}x{z}"
                        )));
                    }
                    out[a] = dims[a] - kernel[a] + 1;
                }
                Shape::Grid([out[0], out[1], out[2], *out_channels])
            }
            (Layer::MaxPool, Shape::Grid([x, y, z, c])) => Shape::Grid([x.div_ceil(2), y.div_ceil(2), z, c]),
            (Layer::Flatten, s @ Shape::Grid(_)) => Shape::Flat(s.len()),
            (Layer::Dense { inputs, width, .. }, Shape::Flat(n)) => {
                if *inputs != 0 && *inputs != n {
                    return Err(Error::ShapeInference(format!("layer {i} expects {inputs} inputs, got {n}")));
                }
                if *width == 0 {
                    return Err(Error::ShapeInference(format!("layer {i} has zero width")));
                }
                Shape::Flat(*width)
            }
            (Layer::Output { inputs, roi }, Shape::Flat(n)) => {
                if *inputs != 0 && *inputs != n {
                    return Err(Error::ShapeInference(format!("output expects {inputs} inputs, got {n}")));
                }
                Shape::Flat(roi.iter().product::<usize>() * 2)
            }
            (layer, shape) => {
                return Err(Error::ShapeInference(format!(
                    "layer {i} ({layer:?}) cannot consume shape {shape}"
                )))
            }
        };
        if shape.is_empty() {
            return Err(Error::ShapeInference(format!("layer {i} produces an empty shape")));
        }
        trace.push(shape);
    }
    Ok(trace)
}
