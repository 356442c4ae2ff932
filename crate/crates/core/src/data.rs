//! Dataset ingestion, the procedural synthetic generator and image emission.
//!
//! Supported sources:
//! * `cifar_binary`: records of one label byte followed by 3072 bytes of
//!   planar RGB (1024 red, 1024 green, 1024 blue).
//! * `idx_ubyte`: IDX image file (magic `0x00000803`) with an optional label
//!   file (magic `0x00000801`); grayscale is replicated to three channels.
//! * `synthetic`: generated from [`SyntheticParams`].
//! * `raw_dump`: the `GIMG` image container written by [`write_images`].
//!
//! `GIMG` layout: magic, u32 version, u32 n, u32 height, u32 width, u8 label
//! flag, `n·h·w·3` little-endian f32 values, then `n` little-endian i32 labels
//! when the flag is 1.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::resize_window;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Purpose};

const GIMG_MAGIC: &[u8; 4] = b"GIMG";
const GIMG_VERSION: u32 = 1;

/// A loaded image collection. Labels, when present, lie in `[0, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::invalid(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        if let Some(first) = images.first() {
            if images
                .iter()
                .any(|im| im.height != first.height || im.width != first.width)
            {
                return Err(Error::invalid("images of mixed sizes"));
            }
        }
        let n_classes = labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1);
        Ok(Dataset {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Image size `(height, width)`; `None` when empty.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| (im.height, im.width))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {i} outside dataset of {}", self.len())));
        }
        Ok(Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            n_classes: self.n_classes,
        })
    }
}

/// Procedural image families for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    HorizontalStripes,
    VerticalStripes,
    DiagonalStripes,
    Checker,
    Blobs,
    Rings,
}

/// Parameters of the synthetic dataset. Generation is a pure function of
/// these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub n_per_class: usize,
    pub size: usize,
    /// One family per class, in label order.
    pub families: Vec<Family>,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    /// Stripe period range in pixels (inclusive).
    #[serde(default = "default_period")]
    pub period: (usize, usize),
    #[serde(default)]
    pub palette: Palette,
}

/// Colors of the two pattern phases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Palette {
    /// Independent uniform RGB colors per image.
    #[default]
    Random,
    /// Base colors shifted per image and channel by a uniform offset in
    /// `[-spread, spread]`.
    Fixed {
        foreground: [f32; 3],
        background: [f32; 3],
        #[serde(default)]
        spread: f32,
    },
}

fn default_period() -> (usize, usize) {
    (3, 6)
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_per_class: 64,
            size: 16,
            families: vec![Family::HorizontalStripes, Family::VerticalStripes],
            noise: 0.05,
            seed: 7,
            period: default_period(),
            palette: Palette::Random,
        }
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    CifarBinary {
        path: PathBuf,
        #[serde(default)]
        resize: Option<usize>,
        #[serde(default)]
        limit: Option<usize>,
    },
    IdxUbyte {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        resize: Option<usize>,
        #[serde(default)]
        limit: Option<usize>,
    },
    Synthetic(SyntheticParams),
    RawDump {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticParams::default())
    }
}

pub fn read_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let (mut ds, resize, limit) = match spec {
        DatasetSpec::CifarBinary { path, resize, limit } => (read_cifar_binary(path, *limit)?, *resize, None),
        DatasetSpec::IdxUbyte {
            images,
            labels,
            resize,
            limit,
        } => (read_idx(images, labels.as_deref())?, *resize, *limit),
        DatasetSpec::Synthetic(p) => (synthetic(p)?, None, None),
        DatasetSpec::RawDump { path, limit } => (read_images(path)?, None, *limit),
    };
    if let Some(n) = limit {
        let keep: Vec<usize> = (0..n.min(ds.len())).collect();
        ds = Dataset {
            n_classes: ds.n_classes,
            ..ds.subset(&keep)?
        };
    }
    if let Some(s) = resize {
        if s == 0 {
            return Err(Error::config("dataset.resize", "must be at least 1"));
        }
        for im in &mut ds.images {
            if im.height != s || im.width != s {
                *im = resize_window(im, (0, 0, im.height, im.width), s, s);
            }
        }
    }
    Ok(ds)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn what(path: &Path) -> String {
    path.display().to_string()
}

/// Parses CIFAR binary records, reading at most `limit` of them.
pub fn read_cifar_binary(path: &Path, limit: Option<usize>) -> Result<Dataset> {
    const SIDE: usize = 32;
    const RECORD: usize = 1 + 3 * SIDE * SIDE;
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        let offset = (bytes.len() / RECORD * RECORD) as u64;
        return Err(Error::format(
            what(path),
            offset,
            format!("truncated record: {} bytes is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = (bytes.len() / RECORD).min(limit.unwrap_or(usize::MAX));
    let plane = SIDE * SIDE;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(RECORD).take(n) {
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        let data = (0..plane)
            .flat_map(|i| [px[i], px[plane + i], px[2 * plane + i]])
            .map(|b| b as f32 / 255.0)
            .collect();
        images.push(Image::new(SIDE, SIDE, data)?);
    }
    Dataset::new(images, Some(labels))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(what(path), offset as u64, "unexpected end of file"))
}

fn read_idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let m = be_u32(bytes, 0, path)?;
    if m != magic {
        return Err(Error::format(
            what(path),
            0,
            format!("magic {m:#010x}, expected {magic:#010x}"),
        ));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * dims;
    let need = start + shape.iter().product::<usize>();
    if bytes.len() < need {
        return Err(Error::format(
            what(path),
            bytes.len() as u64,
            format!("truncated payload, expected {need} bytes"),
        ));
    }
    Ok(shape)
}

pub fn read_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let bytes = read_file(images)?;
    let shape = read_idx_header(&bytes, images, 0x0000_0803, 3)?;
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let body = &bytes[16..];
    let imgs = (0..n)
        .map(|i| {
            let data = body[i * h * w..(i + 1) * h * w]
                .iter()
                .flat_map(|&b| [b as f32 / 255.0; 3])
                .collect();
            Image::new(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = match labels {
        None => None,
        Some(p) => {
            let lb = read_file(p)?;
            let ls = read_idx_header(&lb, p, 0x0000_0801, 1)?;
            if ls[0] != n {
                return Err(Error::format(what(p), 4, format!("{} labels for {n} images", ls[0])));
            }
            Some(lb[8..8 + n].iter().map(|&b| b as usize).collect())
        }
    };
    Dataset::new(imgs, labels)
}

fn draw_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Generates `n_per_class` images for each family. Every image has its own
/// period, phase and noise (and colors, with [`Palette::Random`]), so the
/// class is carried by spatial structure only.
pub fn synthetic(p: &SyntheticParams) -> Result<Dataset> {
    if p.size == 0 || p.n_per_class == 0 || p.families.is_empty() {
        return Err(Error::config(
            "dataset",
            "synthetic size, n_per_class and families must be non-empty",
        ));
    }
    let (plo, phi) = p.period;
    if plo < 2 || plo > phi {
        return Err(Error::config("dataset.period", "need 2 <= lo <= hi"));
    }
    if !(p.noise >= 0.0) {
        return Err(Error::config("dataset.noise", "must be non-negative"));
    }
    if let Palette::Fixed { spread, .. } = p.palette {
        if !(spread >= 0.0) {
            return Err(Error::config("dataset.palette.spread", "must be non-negative"));
        }
    }
    let noise = Normal::new(0.0, p.noise.max(1e-12)).expect("finite std");
    let s = p.size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..p.n_per_class {
        for (class, &family) in p.families.iter().enumerate() {
            let index = (i * p.families.len() + class) as u32;
            let mut rng = rng::stream(p.seed, Purpose::Synthetic, 0, index);
            let (fg, bg) = match p.palette {
                Palette::Random => (draw_color(&mut rng), draw_color(&mut rng)),
                Palette::Fixed {
                    foreground,
                    background,
                    spread,
                } => {
                    let mut shift = |c: [f32; 3]| {
                        c.map(|v| {
                            if spread > 0.0 {
                                v + rng.gen_range(-spread..=spread)
                            } else {
                                v
                            }
                        })
                    };
                    (shift(foreground), shift(background))
                }
            };
            let period = rng.gen_range(plo..=phi) as f64;
            let phase = rng.gen_range(0.0..period);
            let (cy, cx) = (rng.gen_range(0.0..s as f64), rng.gen_range(0.0..s as f64));
            let mut im = Image::filled(s, s, bg);
            for y in 0..s {
                for x in 0..s {
                    let (fy, fx) = (y as f64, x as f64);
                    let on = match family {
                        Family::HorizontalStripes => ((fy + phase) / period).fract() < 0.5,
                        Family::VerticalStripes => ((fx + phase) / period).fract() < 0.5,
                        Family::DiagonalStripes => ((fx + fy + phase) / period).fract() < 0.5,
                        Family::Checker => {
                            let a = ((fy + phase) / period).fract() < 0.5;
                            let b = ((fx + phase) / period).fract() < 0.5;
                            a ^ b
                        }
                        Family::Blobs => {
                            let r = period * 0.9;
                            (fy - cy).powi(2) + (fx - cx).powi(2) < r * r
                        }
                        Family::Rings => {
                            let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                            ((d + phase) / period).fract() < 0.5
                        }
                    };
                    let base = if on { fg } else { bg };
                    let px = base.map(|c| {
                        c + if p.noise > 0.0 {
                            noise.sample(&mut rng) as f32
                        } else {
                            0.0
                        }
                    });
                    im.set_pixel(y, x, px);
                }
            }
            im.clamp01();
            images.push(im);
            labels.push(class);
        }
    }
    let mut ds = Dataset::new(images, Some(labels))?;
    ds.n_classes = p.families.len();
    Ok(ds)
}

/// Writes the `GIMG` container.
pub fn write_images(ds: &Dataset, path: &Path) -> Result<()> {
    let (h, w) = ds.image_size().unwrap_or((0, 0));
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    out.write_all(GIMG_MAGIC).map_err(io)?;
    for v in [GIMG_VERSION, ds.len() as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    out.write_all(&[ds.labels.is_some() as u8]).map_err(io)?;
    for im in &ds.images {
        for v in &im.data {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    if let Some(labels) = &ds.labels {
        for &l in labels {
            out.write_all(&(l as i32).to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Little-endian cursor used by the binary readers.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: impl Into<String>) -> Self {
        Cursor {
            bytes,
            pos: 0,
            what: what.into(),
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::format(self.what.clone(), self.pos as u64, message)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!("unexpected end of data, needed {n} more bytes"))),
        }
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let v = self.u32()?;
        if v != expected {
            self.pos -= 4;
            return Err(self.error(format!("unsupported version {v}, expected {expected}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn read_images(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let mut c = Cursor::new(&bytes, what(path));
    c.magic(GIMG_MAGIC)?;
    c.version(GIMG_VERSION)?;
    let (n, h, w) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let has_labels = match c.u8()? {
        0 => false,
        1 => true,
        f => return Err(c.error(format!("label flag {f} is neither 0 nor 1"))),
    };
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let start = c.offset();
        let data = c.f32s(h * w * 3)?;
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format(what(path), start, "pixel value outside [0, 1]"));
        }
        images.push(Image::new(h, w, data)?);
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            let v = c.i32()?;
            if v < 0 {
                return Err(c.error(format!("negative label {v}")));
            }
            l.push(v as usize);
        }
        Some(l)
    } else {
        None
    };
    c.finish()?;
    Dataset::new(images, labels)
}

/// Channel value to byte: `floor(255 v + 0.5)` after clamping to `[0, 1]`.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

pub fn ppm_bytes(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| to_byte(v)));
    out
}

/// Binary `P6` PPM with max value 255.
pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    write_bytes(path, &ppm_bytes(image))
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_bytes(path, contents.as_bytes())
}
