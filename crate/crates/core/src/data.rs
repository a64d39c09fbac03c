//! Deterministic synthetic glyph dataset and its binary file format.
//!
//! Each image holds one class glyph placed so that it lies entirely inside
//! at least one grid patch, a few fragments cropped from other glyphs, and
//! additive uniform noise.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic      8 bytes  "SACDATA\0"
//! version    u32      1
//! counts     3 x u32  train, dev, test
//! dims       4 x u32  height, width, channels, num_classes
//! images     f32 x (total * height * width * channels), pixels in [0, 1]
//! labels     u16 x total
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Geometry;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SACDATA\0";
pub const VERSION: u32 = 1;

/// Generator for an independent stream keyed by `(seed, a, b, c)`.
pub fn rng_stream(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, part) in [seed, a, b, c].iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&part.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub glyph_size: usize,
    pub rf: usize,
    pub stride: usize,
    pub distractors: usize,
    pub fragment_min: usize,
    pub fragment_max: usize,
    /// Glyph ink level, drawn uniformly per image.
    pub ink_min: f32,
    pub ink_max: f32,
    pub noise: f32,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            image_size: 63,
            channels: 1,
            glyph_size: 11,
            rf: 15,
            stride: 8,
            distractors: 6,
            fragment_min: 4,
            fragment_max: 7,
            ink_min: 1.0,
            ink_max: 1.0,
            noise: 0.1,
            train: 2000,
            dev: 300,
            test: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<Geometry> {
        if self.glyph_size > self.image_size {
            return Err(Error::InvalidArgument(format!(
                "glyph of size {} does not fit a {}x{} image",
                self.glyph_size, self.image_size, self.image_size
            )));
        }
        if self.glyph_size > self.rf {
            return Err(Error::InvalidArgument(format!(
                "glyph of size {} does not fit inside one {}x{} patch",
                self.glyph_size, self.rf, self.rf
            )));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize || self.channels == 0 {
            return Err(Error::InvalidArgument("bad class or channel count".into()));
        }
        if self.fragment_min == 0 || self.fragment_min > self.fragment_max || self.fragment_max > self.glyph_size {
            return Err(Error::InvalidArgument(format!(
                "fragment sizes {}..={} must lie within 1..={}",
                self.fragment_min, self.fragment_max, self.glyph_size
            )));
        }
        if !(0.0 < self.ink_min && self.ink_min <= self.ink_max && self.ink_max <= 1.0) {
            return Err(Error::InvalidArgument(format!("ink range {}..{} must lie within (0, 1]", self.ink_min, self.ink_max)));
        }
        Geometry::new(self.image_size, self.image_size, self.rf, self.stride)
    }

    /// Top-left offsets (per axis) at which a glyph lies fully inside some
    /// grid patch.
    pub fn placements(&self, geom: &Geometry) -> Vec<usize> {
        let mut out: Vec<usize> = (0..geom.grid_h)
            .flat_map(|i| {
                let top = i * geom.stride;
                top..=top + geom.rf - self.glyph_size
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// The fixed class glyphs: `num_classes` binary `size x size` bitmaps.
///
/// Each glyph is a union of filled bars on a coarse 3x3 lattice, drawn from
/// a generator keyed only by the class index, so glyphs do not depend on the
/// dataset seed.
pub fn glyphs(num_classes: usize, size: usize) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::with_capacity(num_classes);
    let mut attempt = 0u64;
    while out.len() < num_classes {
        let class = out.len() as u64;
        let mut rng = rng_stream(0x6c79_7068, class, attempt, 0);
        attempt += 1;
        let g = random_glyph(&mut rng, size);
        // keep glyphs mutually distinct by a wide Hamming margin
        let distinct = out
            .iter()
            .all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() >= size * size / 5);
        if distinct {
            out.push(g);
        }
    }
    out
}

fn random_glyph<R: Rng>(rng: &mut R, size: usize) -> Vec<u8> {
    let mut g = vec![0u8; size * size];
    let stroke = (size / 5).max(1);
    let lanes = [0, (size - stroke) / 2, size - stroke];
    // frame outline pieces plus one or two interior bars
    loop {
        g.iter_mut().for_each(|v| *v = 0);
        let mut bars = 0;
        for horizontal in [true, false] {
            for &lane in &lanes {
                if rng.random_bool(0.45) {
                    let (a, b) = {
                        let a = rng.random_range(0..size / 2);
                        let b = rng.random_range(size / 2 + 1..=size);
                        (a, b)
                    };
                    for s in 0..stroke {
                        for t in a..b {
                            let (y, x) = if horizontal { (lane + s, t) } else { (t, lane + s) };
                            g[y * size + x] = 1;
                        }
                    }
                    bars += 1;
                }
            }
        }
        let on = g.iter().filter(|&&v| v == 1).count();
        if (3..=5).contains(&bars) && on * 5 >= size * size && on * 5 <= size * size * 3 {
            return g;
        }
    }
}

/// Images `[N, H, W, C]` stored flat with `u16` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            num_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Image `i` as `[H, W, C]`.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        Tensor::new(&[self.height, self.width, self.channels], self.pixels(i).to_vec()).unwrap()
    }

    /// Stacked images `[B, H, W, C]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new(&[indices.len(), self.height, self.width, self.channels], data).unwrap()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn push(&mut self, pixels: &[f32], label: u16) {
        assert_eq!(pixels.len(), self.image_len());
        self.images.extend_from_slice(pixels);
        self.labels.push(label);
    }

    pub fn append(&mut self, other: &Dataset) {
        assert_eq!(self.image_len(), other.image_len());
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset::empty(self.height, self.width, self.channels, self.num_classes)
    }

    /// Pixel mean and standard deviation over the whole set.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let n = self.images.len() as f64;
        let mean = self.images.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

/// One rendered example and where its glyph landed.
#[derive(Clone, Debug)]
pub struct Example {
    pub pixels: Vec<f32>,
    pub label: u16,
    pub glyph_top: usize,
    pub glyph_left: usize,
}

pub fn render_example(
    spec: &SyntheticSpec,
    glyph_set: &[Vec<u8>],
    placements: &[usize],
    rng: &mut ChaCha8Rng,
) -> Example {
    let (s, c, g) = (spec.image_size, spec.channels, spec.glyph_size);
    let label = rng.random_range(0..spec.num_classes);
    let top = placements[rng.random_range(0..placements.len())];
    let left = placements[rng.random_range(0..placements.len())];
    let mut canvas = vec![0f32; s * s];
    // fragments first, kept off the glyph's bounding box so it stays intact
    let others: Vec<usize> = (0..spec.num_classes).filter(|&k| k != label).collect();
    for _ in 0..spec.distractors {
        let source = &glyph_set[others[rng.random_range(0..others.len().max(1))]];
        let fh = rng.random_range(spec.fragment_min..=spec.fragment_max);
        let fw = rng.random_range(spec.fragment_min..=spec.fragment_max);
        let sy = rng.random_range(0..=g - fh);
        let sx = rng.random_range(0..=g - fw);
        for _ in 0..20 {
            let y = rng.random_range(0..=s - fh);
            let x = rng.random_range(0..=s - fw);
            let overlaps = y < top + g + 1 && top < y + fh + 1 && x < left + g + 1 && left < x + fw + 1;
            if overlaps {
                continue;
            }
            for dy in 0..fh {
                for dx in 0..fw {
                    if source[(sy + dy) * g + sx + dx] == 1 {
                        canvas[(y + dy) * s + x + dx] = 1.0;
                    }
                }
            }
            break;
        }
    }
    let glyph = &glyph_set[label];
    let ink = if spec.ink_min < spec.ink_max {
        rng.random_range(spec.ink_min..spec.ink_max)
    } else {
        spec.ink_max
    };
    for dy in 0..g {
        for dx in 0..g {
            canvas[(top + dy) * s + left + dx] = glyph[dy * g + dx] as f32 * ink;
        }
    }
    let mut pixels = Vec::with_capacity(s * s * c);
    for &v in &canvas {
        for _ in 0..c {
            let noise = if spec.noise > 0.0 {
                rng.random_range(-spec.noise..spec.noise)
            } else {
                0.0
            };
            pixels.push((v + noise).clamp(0.0, 1.0));
        }
    }
    Example {
        pixels,
        label: label as u16,
        glyph_top: top,
        glyph_left: left,
    }
}

fn render_split(spec: &SyntheticSpec, tag: u64, count: usize) -> Result<Dataset> {
    let geom = spec.validate()?;
    let glyph_set = glyphs(spec.num_classes, spec.glyph_size);
    let placements = spec.placements(&geom);
    let mut ds = Dataset::empty(spec.image_size, spec.image_size, spec.channels, spec.num_classes);
    for i in 0..count {
        let mut rng = rng_stream(spec.seed, 0xDA7A, tag, i as u64);
        let ex = render_example(spec, &glyph_set, &placements, &mut rng);
        ds.push(&ex.pixels, ex.label);
    }
    Ok(ds)
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<DatasetFile> {
    Ok(DatasetFile {
        train: render_split(spec, 0, spec.train)?,
        dev: render_split(spec, 1, spec.dev)?,
        test: render_split(spec, 2, spec.test)?,
    })
}

/// `count` further examples from the same distribution, on a stream disjoint
/// from the train, dev and test splits.
pub fn generate_extra(spec: &SyntheticSpec, count: usize) -> Result<Dataset> {
    render_split(spec, 3, count)
}

impl DatasetFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.train;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.train.len() as u32,
            self.dev.len() as u32,
            self.test.len() as u32,
            t.height as u32,
            t.width as u32,
            t.channels as u32,
            t.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for split in [&self.train, &self.dev, &self.test] {
            for v in &split.images {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for split in [&self.train, &self.dev, &self.test] {
            for v in &split.labels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = 8 + 8 * 4;
        if bytes.len() < header || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {}", word(0))));
        }
        let counts = [word(1), word(2), word(3)];
        let (h, w, c, k) = (word(4), word(5), word(6), word(7));
        let total: usize = counts.iter().sum();
        let pix = h * w * c;
        let expected = header + 4 * total * pix + 2 * total;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "dataset file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut splits = Vec::with_capacity(3);
        let mut img_at = header;
        let mut lab_at = header + 4 * total * pix;
        for &n in &counts {
            let mut ds = Dataset::empty(h, w, c, k);
            ds.images = bytes[img_at..img_at + 4 * n * pix]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            ds.labels = bytes[lab_at..lab_at + 2 * n]
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
                .collect();
            img_at += 4 * n * pix;
            lab_at += 2 * n;
            splits.push(ds);
        }
        let test = splits.pop().unwrap();
        let dev = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self { train, dev, test })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
