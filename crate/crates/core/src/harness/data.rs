//! Dataset bundles: synthetic generation, the raw binary format and image
//! directories.
//!
//! Raw bundle layout, all little-endian:
//!
//! ```text
//! "PKDS" | u32 version | u32 N | u16 C | u16 H | u16 W | u16 classes
//! N × u16 labels | N·C·H·W × u8 pixels (sample-major, then C, H, W)
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"PKDS";
pub const BUNDLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 2 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Raw `u8` images with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bundle {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u16>,
    pub pixels: Vec<u8>,
}

impl Bundle {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        labels: Vec<u16>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || classes == 0 {
            return Err(Error::Data(
                "bundle dimensions and class count must be positive".into(),
            ));
        }
        for dim in [channels, height, width, classes] {
            if dim > u16::MAX as usize {
                return Err(Error::Data(format!("dimension {dim} does not fit in u16")));
            }
        }
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::Data(format!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!(
                "label {bad} is not below class count {classes}"
            )));
        }
        Ok(Bundle {
            channels,
            height,
            width,
            classes,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Class-dependent Gaussian blobs. Each class has its own hue and its own
    /// blob centre on a circle around the image centre; positions, widths and
    /// pixels carry seeded noise. Samples are interleaved by class.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        let SyntheticSpec {
            classes,
            per_class,
            height,
            width,
            seed,
        } = *spec;
        if classes == 0 || per_class == 0 || height == 0 || width == 0 {
            return Err(Error::config("synthetic spec fields must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = height.min(width) as f64;
        let mut labels = Vec::with_capacity(classes * per_class);
        let mut pixels = Vec::with_capacity(classes * per_class * 3 * height * width);
        for _ in 0..per_class {
            for c in 0..classes {
                let angle = 2.0 * PI * c as f64 / classes as f64;
                let cy = height as f64 / 2.0
                    + 0.25 * scale * angle.sin()
                    + 0.06 * scale * unit.sample(&mut rng);
                let cx = width as f64 / 2.0
                    + 0.25 * scale * angle.cos()
                    + 0.06 * scale * unit.sample(&mut rng);
                let sigma = scale * (0.12 + 0.02 * unit.sample(&mut rng)).max(0.05);
                let colour = hue(c as f64 / classes as f64);
                let brightness = 0.8 + 0.1 * unit.sample(&mut rng);
                for rgb in colour {
                    for y in 0..height {
                        for x in 0..width {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            let blob = brightness * rgb * (-d2 / (2.0 * sigma * sigma)).exp();
                            let v = 0.15 + blob + 0.05 * unit.sample(&mut rng);
                            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                        }
                    }
                }
                labels.push(c as u16);
            }
        }
        Bundle::new(3, height, width, classes, labels, pixels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.len() + self.pixels.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for dim in [self.channels, self.height, self.width, self.classes] {
            out.extend_from_slice(&(dim as u16).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(bytes.len() as u64, "truncated bundle header"));
        }
        if &bytes[..4] != BUNDLE_MAGIC {
            return Err(Error::format(0, "bad magic, expected PKDS"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported bundle version {version}"),
            ));
        }
        let n = r.u32()? as usize;
        let channels = r.u16()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let classes = r.u16()? as usize;
        let mut labels = Vec::with_capacity(n.min(bytes.len()));
        for _ in 0..n {
            let at = r.pos;
            let l = r.u16()?;
            if l as usize >= classes {
                return Err(Error::format(
                    at as u64,
                    format!("label {l} is not below class count {classes}"),
                ));
            }
            labels.push(l);
        }
        let pixels = r.take(n * channels * height * width)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::format(
                r.pos as u64,
                "trailing bytes after pixel data",
            ));
        }
        Bundle::new(channels, height, width, classes, labels, pixels)
            .map_err(|e| Error::format(HEADER_LEN as u64 - 8, e.to_string()))
    }

    pub fn read_raw(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// One sub-directory per class, sorted by name; every image is decoded to
    /// RGB and must share one size.
    pub fn from_image_dir(root: &Path) -> Result<Self> {
        let mut class_dirs: Vec<_> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Data(format!(
                "{}: no class sub-directories",
                root.display()
            )));
        }
        let mut size = None;
        let mut labels = Vec::new();
        let mut pixels = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            let mut files: Vec<_> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            for file in files {
                let img = image::open(&file)
                    .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?
                    .to_rgb8();
                let (w, h) = img.dimensions();
                match size {
                    None => size = Some((w, h)),
                    Some(s) if s != (w, h) => {
                        return Err(Error::Data(format!(
                            "{}: size {w}x{h} differs from {}x{}",
                            file.display(),
                            s.0,
                            s.1
                        )))
                    }
                    Some(_) => {}
                }
                for c in 0..3 {
                    pixels.extend(img.pixels().map(|p| p.0[c]));
                }
                labels.push(label as u16);
            }
        }
        let Some((w, h)) = size else {
            return Err(Error::Data(format!("{}: no images found", root.display())));
        };
        Bundle::new(3, h as usize, w as usize, class_dirs.len(), labels, pixels)
    }

    /// SHA-256 of the raw encoding, hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Per-channel mean of the `[0,1]`-scaled pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let area = self.height * self.width;
        let mut sums = vec![0.0; self.channels];
        for img in self.pixels.chunks(self.image_len()) {
            for (c, plane) in img.chunks(area).enumerate() {
                sums[c] += plane.iter().map(|&p| p as f64).sum::<f64>();
            }
        }
        let count = (self.len() * area) as f64 * 255.0;
        sums.into_iter().map(|s| s / count.max(1.0)).collect()
    }

    /// Normalised batch `[indices.len(), C, H, W]` with `means` subtracted.
    pub fn batch(&self, indices: &[usize], means: &[f64]) -> Result<(Tensor, Vec<usize>)> {
        if means.len() != self.channels {
            return Err(Error::config(format!(
                "{} channel means for {} channels",
                means.len(),
                self.channels
            )));
        }
        let len = self.image_len();
        let area = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = &self.pixels[i * len..(i + 1) * len];
            for (j, &p) in img.iter().enumerate() {
                data.push(p as f64 / 255.0 - means[j / area]);
            }
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }
}

/// Fully saturated colour at hue `h ∈ [0,1)`.
fn hue(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
