//! Image-stack I/O.
//!
//! Two containers are supported:
//!
//! * multi-page grayscale TIFF (`.tif` / `.tiff`), one page per z slice, 8 or
//!   16 bit. Spacing and intensity domain live in a sidecar
//!   `<stem>.meta.json` next to the stack.
//! * raw little-endian scalars (`.raw`) with a JSON header `<stem>.json`
//!   holding `dims`, `spacing_um`, `dtype` (`u8`, `u16` or `f32`) and
//!   `intensity_domain`.
//!
//! Binary volumes are written as 8-bit {0, 255}. Unit-normalized image
//! volumes are quantized to 16 bit (`round(v * 65535)`) in TIFF and kept as
//! exact `f32` in the raw container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use super::{BinaryVolume, Dims, ImageVolume, IntensityDomain, Spacing, Volume};
use crate::error::{Error, Result};

const UNIT_SCALE: f64 = 65535.0;

/// Sidecar metadata written next to TIFF stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMeta {
    pub spacing_um: Spacing,
    #[serde(default = "default_domain")]
    pub intensity_domain: IntensityDomain,
}

fn default_domain() -> IntensityDomain {
    IntensityDomain::Raw
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawHeader {
    dims: Dims,
    spacing_um: Spacing,
    dtype: RawDtype,
    #[serde(default = "default_domain")]
    intensity_domain: IntensityDomain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawDtype {
    U8,
    U16,
    F32,
}

enum Pixels {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Pixels {
    fn to_f32(&self) -> Vec<f32> {
        match self {
            Pixels::U8(v) => v.iter().map(|&p| p as f32).collect(),
            Pixels::U16(v) => v.iter().map(|&p| p as f32).collect(),
            Pixels::F32(v) => v.clone(),
        }
    }
}

struct Stack {
    dims: Dims,
    spacing: Spacing,
    domain: IntensityDomain,
    pixels: Pixels,
}

/// Anything that can be written as an image stack.
pub trait StackSource {
    #[doc(hidden)]
    fn encode_stack(&self, container: Container) -> StackPayload;
}

#[doc(hidden)]
pub struct StackPayload(Stack);

#[doc(hidden)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Container {
    Tiff,
    Raw,
}

impl StackSource for ImageVolume {
    fn encode_stack(&self, container: Container) -> StackPayload {
        let pixels = match (self.domain(), container) {
            (_, Container::Raw) => Pixels::F32(self.voxels().to_vec()),
            (IntensityDomain::UnitNormalized, Container::Tiff) => Pixels::U16(
                self.voxels()
                    .iter()
                    .map(|&v| (v as f64 * UNIT_SCALE).round().clamp(0.0, UNIT_SCALE) as u16)
                    .collect(),
            ),
            (IntensityDomain::Raw, Container::Tiff) => Pixels::U16(
                self.voxels()
                    .iter()
                    .map(|&v| (v as f64).round().clamp(0.0, UNIT_SCALE) as u16)
                    .collect(),
            ),
        };
        StackPayload(Stack {
            dims: self.dims(),
            spacing: self.spacing(),
            domain: self.domain(),
            pixels,
        })
    }
}

impl StackSource for BinaryVolume {
    fn encode_stack(&self, _container: Container) -> StackPayload {
        StackPayload(Stack {
            dims: self.dims(),
            spacing: self.spacing(),
            domain: IntensityDomain::Raw,
            pixels: Pixels::U8(self.voxels().iter().map(|&b| if b { 255 } else { 0 }).collect()),
        })
    }
}

fn container_of(path: &Path) -> Result<Container> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "tif" || e == "tiff" => Ok(Container::Tiff),
        Some(e) if e == "raw" => Ok(Container::Raw),
        other => Err(Error::UnsupportedFormat(format!(
            "unknown stack extension {other:?} for {}",
            path.display()
        ))),
    }
}

/// `<dir>/<stem>.meta.json` for a TIFF stack at `<dir>/<stem>.tif`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    with_suffix(path, ".meta.json")
}

fn raw_header_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn read_stack(path: &Path) -> Result<Stack> {
    match container_of(path)? {
        Container::Tiff => read_tiff(path),
        Container::Raw => read_raw(path),
    }
}

fn read_tiff(path: &Path) -> Result<Stack> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = Decoder::new(BufReader::new(file))?.with_limits(Limits::unlimited());
    let (width, height) = decoder.dimensions()?;
    let mut pages_u8 = Vec::new();
    let mut pages_u16 = Vec::new();
    let mut depth = 0usize;
    let mut kind: Option<u8> = None;
    loop {
        let dims = decoder.dimensions()?;
        if dims != (width, height) {
            return Err(Error::InconsistentPages {
                page: depth,
                found: dims,
                expected: (width, height),
            });
        }
        let bits = match decoder.colortype()? {
            ColorType::Gray(b @ (8 | 16)) => b,
            other => {
                return Err(Error::UnsupportedFormat(format!(
                    "page {depth} has color type {other:?}; only 8/16-bit grayscale is supported"
                )))
            }
        };
        if *kind.get_or_insert(bits) != bits {
            return Err(Error::UnsupportedFormat("mixed bit depths across pages".into()));
        }
        match decoder.read_image()? {
            DecodingResult::U8(v) => pages_u8.extend(v),
            DecodingResult::U16(v) => pages_u16.extend(v),
            _ => return Err(Error::UnsupportedFormat("unexpected sample format".into())),
        }
        depth += 1;
        if !decoder.more_images() {
            break;
        }
        decoder.next_image()?;
    }
    let meta = read_sidecar(path)?;
    let pixels = if kind == Some(8) {
        Pixels::U8(pages_u8)
    } else {
        Pixels::U16(pages_u16)
    };
    Ok(Stack {
        dims: [width as usize, height as usize, depth],
        spacing: meta.as_ref().map(|m| m.spacing_um).unwrap_or([1.0; 3]),
        domain: meta.map(|m| m.intensity_domain).unwrap_or(IntensityDomain::Raw),
        pixels,
    })
}

fn read_sidecar(path: &Path) -> Result<Option<StackMeta>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn read_raw(path: &Path) -> Result<Stack> {
    let header_path = raw_header_path(path);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RawHeader = serde_json::from_str(&text)?;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let n = header.dims.iter().product::<usize>();
    let width = match header.dtype {
        RawDtype::U8 => 1,
        RawDtype::U16 => 2,
        RawDtype::F32 => 4,
    };
    if bytes.len() != n * width {
        return Err(Error::DimensionMismatch(format!(
            "raw payload has {} bytes, header implies {}",
            bytes.len(),
            n * width
        )));
    }
    let pixels = match header.dtype {
        RawDtype::U8 => Pixels::U8(bytes),
        RawDtype::U16 => Pixels::U16(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
        RawDtype::F32 => Pixels::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
    };
    Ok(Stack {
        dims: header.dims,
        spacing: header.spacing_um,
        domain: header.intensity_domain,
        pixels,
    })
}

/// Loads an intensity stack. Spacing comes from the sidecar/header, or
/// defaults to 1 µm when none is present.
pub fn load_stack(path: impl AsRef<Path>) -> Result<ImageVolume> {
    load_stack_with_spacing(path, None)
}

/// Like [`load_stack`], with `spacing` overriding any stored metadata.
pub fn load_stack_with_spacing(path: impl AsRef<Path>, spacing: Option<Spacing>) -> Result<ImageVolume> {
    let stack = read_stack(path.as_ref())?;
    let spacing = spacing.unwrap_or(stack.spacing);
    let values = stack.pixels.to_f32();
    match (stack.domain, &stack.pixels) {
        (IntensityDomain::UnitNormalized, Pixels::F32(_)) => ImageVolume::unit(Volume::new(stack.dims, spacing, values)?),
        (IntensityDomain::UnitNormalized, _) => {
            let scaled = values.iter().map(|&v| (v as f64 / UNIT_SCALE) as f32).collect();
            ImageVolume::unit(Volume::new(stack.dims, spacing, scaled)?)
        }
        (IntensityDomain::Raw, _) => Ok(ImageVolume::raw(Volume::new(stack.dims, spacing, values)?)),
    }
}

/// Loads a stack as a binary mask (any non-zero voxel is foreground).
pub fn load_binary(path: impl AsRef<Path>) -> Result<BinaryVolume> {
    let stack = read_stack(path.as_ref())?;
    let values = stack.pixels.to_f32();
    Volume::new(stack.dims, stack.spacing, values.into_iter().map(|v| v != 0.0).collect())
}

/// Writes `vol` to `path`; the container is picked from the file extension.
pub fn save_stack(vol: &impl StackSource, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let container = container_of(path)?;
    let StackPayload(stack) = vol.encode_stack(container);
    match container {
        Container::Tiff => write_tiff(&stack, path),
        Container::Raw => write_raw(&stack, path),
    }
}

/// Alias of [`save_stack`] kept for call sites that want to be explicit.
pub fn save_binary(vol: &BinaryVolume, path: impl AsRef<Path>) -> Result<()> {
    save_stack(vol, path)
}

fn write_tiff(stack: &Stack, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = TiffEncoder::new(BufWriter::new(file))?;
    let [nx, ny, nz] = stack.dims;
    let page = nx * ny;
    for z in 0..nz {
        match &stack.pixels {
            Pixels::U8(v) => encoder.write_image::<colortype::Gray8>(nx as u32, ny as u32, &v[z * page..(z + 1) * page])?,
            Pixels::U16(v) => {
                encoder.write_image::<colortype::Gray16>(nx as u32, ny as u32, &v[z * page..(z + 1) * page])?
            }
            Pixels::F32(_) => unreachable!("f32 pixels are only produced for raw containers"),
        }
    }
    drop(encoder);
    let meta = StackMeta {
        spacing_um: stack.spacing,
        intensity_domain: stack.domain,
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

fn write_raw(stack: &Stack, path: &Path) -> Result<()> {
    let (dtype, bytes): (RawDtype, Vec<u8>) = match &stack.pixels {
        Pixels::U8(v) => (RawDtype::U8, v.clone()),
        Pixels::U16(v) => (RawDtype::U16, v.iter().flat_map(|p| p.to_le_bytes()).collect()),
        Pixels::F32(v) => (RawDtype::F32, v.iter().flat_map(|p| p.to_le_bytes()).collect()),
    };
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    out.write_all(&bytes).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))?;
    let header = RawHeader {
        dims: stack.dims,
        spacing_um: stack.spacing,
        dtype,
        intensity_domain: stack.domain,
    };
    let hp = raw_header_path(path);
    std::fs::write(&hp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&hp, e))
}

/// Writes an `f32` array in the raw container (used for displacement fields).
pub(crate) fn write_raw_f32(path: &Path, dims: Dims, spacing: Spacing, values: &[f32]) -> Result<()> {
    write_raw(
        &Stack {
            dims,
            spacing,
            domain: IntensityDomain::Raw,
            pixels: Pixels::F32(values.to_vec()),
        },
        path,
    )
}
