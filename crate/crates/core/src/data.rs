//! Images, synthetic noise, patch sampling, augmentation and manifests.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ExtendedColorType, ImageReader};
use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Planar (channel-major) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {channels}×{height}×{width} image",
                data.len()
            )));
        }
        Ok(ImageBuffer {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    /// `size×size` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageBuffer> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}×{width} at ({top}, {left}) leaves a {}×{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for i in top..top + height {
                let s = (c * self.height + i) * self.width + left;
                data.extend_from_slice(&self.data[s..s + width]);
            }
        }
        Self::new(self.channels, height, width, data)
    }

    /// Shape `1×C×H×W`.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| E::of(v as f64)).collect(),
        )
        .expect("extents match data")
    }

    /// Image `index` of an N×C×H×W tensor.
    pub fn from_tensor<E: Element>(t: &Tensor<E>, index: usize) -> Result<ImageBuffer> {
        let (n, c, h, w) = t.nchw()?;
        if index >= n {
            return Err(Error::InvalidArgument(format!("image {index} of a batch of {n}")));
        }
        let sz = c * h * w;
        let data = t.data()[index * sz..(index + 1) * sz]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Self::new(c, h, w, data)
    }
}

/// Stacks equally sized images into an N×C×H×W tensor.
pub fn stack<E: Element>(images: &[ImageBuffer]) -> Result<Tensor<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty list".into()))?;
    let dims = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        if (im.channels, im.height, im.width) != dims {
            return Err(Error::InvalidArgument(format!(
                "cannot stack a {}×{}×{} image with {}×{}×{}",
                im.channels, im.height, im.width, dims.0, dims.1, dims.2
            )));
        }
        data.extend(im.data.iter().map(|&v| E::of(v as f64)));
    }
    Tensor::from_vec(&[images.len(), dims.0, dims.1, dims.2], data)
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads an 8-bit gray or RGB PNG/PGM/PPM into `[0, 1]` floats. Alpha
/// channels are dropped; 16-bit and float images are refused.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img.color() {
        ColorType::L8 => (1, img.into_luma8().into_raw()),
        ColorType::La8 => (1, img.into_luma8().into_raw()),
        ColorType::Rgb8 | ColorType::Rgba8 => (3, img.into_rgb8().into_raw()),
        other => return Err(image_err(path, format!("unsupported pixel format {other:?}; only 8-bit gray or RGB"))),
    };
    // interleaved → planar
    let mut data = vec![0.0f32; raw.len()];
    let plane = h * w;
    for (p, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + p] = v as f32 / 255.0;
        }
    }
    ImageBuffer::new(channels, h, w, data)
}

/// Round-half-up 8-bit quantisation of a value clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Writes PNG, PGM or PPM depending on the extension.
pub fn save_image(buf: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let plane = buf.height * buf.width;
    let mut raw = vec![0u8; buf.data.len()];
    for c in 0..buf.channels {
        for p in 0..plane {
            raw[p * buf.channels + c] = quantize(buf.data[c * plane + p]);
        }
    }
    let color = if buf.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &raw, buf.width as u32, buf.height as u32, color).map_err(|e| image_err(path, e))
}

/// Converts to an 8-bit `DynamicImage` (used for previews).
pub fn to_dynamic(buf: &ImageBuffer) -> DynamicImage {
    let plane = buf.height * buf.width;
    let mut raw = vec![0u8; buf.data.len()];
    for c in 0..buf.channels {
        for p in 0..plane {
            raw[p * buf.channels + c] = quantize(buf.data[c * plane + p]);
        }
    }
    let (w, h) = (buf.width as u32, buf.height as u32);
    if buf.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("size matches"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("size matches"))
    }
}

/// BT.601 luma. Gray images are returned unchanged.
pub fn to_grayscale(buf: &ImageBuffer) -> ImageBuffer {
    if buf.channels == 1 {
        return buf.clone();
    }
    let plane = buf.height * buf.width;
    let (r, rest) = buf.data.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let data = (0..plane)
        .map(|p| (0.299 * r[p] as f64 + 0.587 * g[p] as f64 + 0.114 * b[p] as f64) as f32)
        .collect();
    ImageBuffer {
        channels: 1,
        height: buf.height,
        width: buf.width,
        data,
    }
}

/// Adds i.i.d. Gaussian noise of std `sigma_255 / 255`. The result is not
/// clamped.
pub fn add_awgn<R: Rng + ?Sized>(buf: &ImageBuffer, sigma_255: f64, rng: &mut R) -> Result<ImageBuffer> {
    if !(0.0..=100.0).contains(&sigma_255) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be within [0, 100], got {sigma_255}"
        )));
    }
    let mut out = buf.clone();
    if sigma_255 == 0.0 {
        return Ok(out);
    }
    let s = sigma_255 / 255.0;
    for v in &mut out.data {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + s * z) as f32;
    }
    Ok(out)
}

/// `count` random `size×size` crops. Images smaller than the patch are
/// skipped with a warning (empty result).
pub fn sample_patches<R: Rng + ?Sized>(buf: &ImageBuffer, size: usize, count: usize, rng: &mut R) -> Vec<ImageBuffer> {
    if size == 0 || size > buf.height || size > buf.width {
        warn!(
            "skipping {}×{} image: smaller than {size}×{size} patches",
            buf.height, buf.width
        );
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=buf.height - size);
            let left = rng.random_range(0..=buf.width - size);
            buf.crop(top, left, size, size).expect("corner is in bounds")
        })
        .collect()
}

/// One of the 8 symmetries of the square: `id ≥ 4` flips left-right, then
/// the image is rotated counter-clockwise by `90° · (id mod 4)`.
pub fn augment(buf: &ImageBuffer, id: u8) -> Result<ImageBuffer> {
    if id > 7 {
        return Err(Error::InvalidArgument(format!("transform id must be 0..7, got {id}")));
    }
    let rot = id % 4;
    if rot % 2 == 1 && buf.height != buf.width {
        return Err(Error::InvalidArgument(format!(
            "cannot rotate a non-square {}×{} image by 90°",
            buf.height, buf.width
        )));
    }
    let (h, w) = (buf.height, buf.width);
    let flip = id >= 4;
    let (oh, ow) = if rot % 2 == 1 { (w, h) } else { (h, w) };
    let mut data = vec![0.0f32; buf.data.len()];
    for c in 0..buf.channels {
        let src = &buf.data[c * h * w..(c + 1) * h * w];
        let dst = &mut data[c * oh * ow..(c + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                // source pixel in the flipped image
                let (si, sj) = match rot {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let sj = if flip { w - 1 - sj } else { sj };
                dst[i * ow + j] = src[si * w + sj];
            }
        }
    }
    ImageBuffer::new(buf.channels, oh, ow, data)
}

/// Index of the transform that undoes `id`.
pub fn augment_inverse(id: u8) -> u8 {
    if id >= 4 {
        id
    } else {
        (4 - id) % 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestMode {
    /// Clean images only; noise is synthesised.
    Synthetic,
    /// Noisy/clean pairs.
    Paired,
}

/// List of images with relative paths resolved against the manifest's
/// directory.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub mode: ManifestMode,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Manifest("manifest lists no images".into()));
        }
        let paired = entries.iter().filter(|e| e.noisy.is_some()).count();
        let mode = match paired {
            0 => ManifestMode::Synthetic,
            n if n == entries.len() => ManifestMode::Paired,
            n => {
                return Err(Error::Manifest(format!(
                    "{n} of {} entries have a noisy image; use all or none",
                    entries.len()
                )))
            }
        };
        Ok(DatasetManifest { mode, entries })
    }

    /// Parses a JSON array and checks every referenced file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = Self::parse(path)?;
        m.validate()?;
        Ok(m)
    }

    /// Parses and resolves paths without touching the images.
    pub fn parse(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut entries {
            e.clean = base.join(&e.clean);
            if let Some(n) = &mut e.noisy {
                *n = base.join(&*n);
            }
        }
        Self::from_entries(entries)
    }

    /// Every file exists and decodes its header; pairs share dimensions.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            let clean = image::image_dimensions(&e.clean).map_err(|err| image_err(&e.clean, err))?;
            if let Some(n) = &e.noisy {
                let noisy = image::image_dimensions(n).map_err(|err| image_err(n, err))?;
                if noisy != clean {
                    return Err(Error::Manifest(format!(
                        "{} is {}×{} but {} is {}×{}",
                        n.display(),
                        noisy.0,
                        noisy.1,
                        e.clean.display(),
                        clean.0,
                        clean.1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Deterministic piecewise-smooth test scene: a shaded background with
/// rectangles, discs and a stripe patch.
pub fn synthetic_image(channels: usize, height: usize, width: usize, seed: u64) -> Result<ImageBuffer> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f32, width as f32);
    let mut planes = vec![0.0f32; channels * height * width];
    let base: Vec<f32> = (0..channels).map(|_| rng.random_range(0.2..0.8)).collect();
    let (gx, gy): (f32, f32) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    for c in 0..channels {
        for i in 0..height {
            for j in 0..width {
                planes[(c * height + i) * width + j] = base[c] + gx * (j as f32 / wf - 0.5) + gy * (i as f32 / hf - 0.5);
            }
        }
    }
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let kind = rng.random_range(0..3u8);
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let r = rng.random_range(0.08..0.3) * hf.min(wf);
        let ry = rng.random_range(0.08..0.3) * hf.min(wf);
        let tone: Vec<f32> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let period = rng.random_range(3.0..8.0f32);
        for i in 0..height {
            for j in 0..width {
                let (dy, dx) = (i as f32 - cy, j as f32 - cx);
                let inside = match kind {
                    0 => dx.abs() < r && dy.abs() < ry,
                    1 => dx * dx + dy * dy < r * r,
                    _ => dx.abs() < r && dy.abs() < ry && ((j as f32 / period) as i32) % 2 == 0,
                };
                if inside {
                    for c in 0..channels {
                        planes[(c * height + i) * width + j] = tone[c];
                    }
                }
            }
        }
    }
    planes.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ImageBuffer::new(channels, height, width, planes)
}
