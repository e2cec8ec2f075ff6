//! Per-image preprocessing: retina crop and resize, histogram equalization,
//! channel standardization.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ByteImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidInput(format!(
                "{height}×{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(ByteImage { height, width, data })
    }

    pub fn black(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width * 3])
    }

    /// Reads a PPM or PGM file; grey images are expanded to RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::InvalidInput("image buffer size".into()))?;
        img.save_with_format(path, image::ImageFormat::Pnm)?;
        Ok(())
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Floating-point image, `height × width × channels`, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "{height}×{width}×{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FloatImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_bytes(img: &ByteImage) -> Self {
        FloatImage {
            height: img.height,
            width: img.width,
            channels: 3,
            data: img.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear sample at fractional coordinates; `None` outside the image.
    pub fn sample(&self, y: f64, x: f64, c: usize) -> Option<f64> {
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        if !(0.0..=max_y).contains(&y) || !(0.0..=max_x).contains(&x) {
            return None;
        }
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.at(y0, x0, c) * (1.0 - fx) + self.at(y0, x1, c) * fx;
        let bottom = self.at(y1, x0, c) * (1.0 - fx) + self.at(y1, x1, c) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }
}

/// Pixels at or below this Rec. 601 luminance count as background.
pub const BACKGROUND_THRESHOLD: f64 = 10.0;

fn luminance([r, g, b]: [u8; 3]) -> f64 {
    0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)
}

/// Inclusive bounding box `(y0, x0, y1, x1)` of pixels brighter than `threshold`.
pub fn foreground_box(img: &ByteImage, threshold: f64) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..img.height {
        for x in 0..img.width {
            if luminance(img.pixel(y, x)) > threshold {
                bbox = Some(match bbox {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
    }
    bbox
}

/// Crops to the foreground bounding box and resizes to `target × target`
/// with align-corners bilinear interpolation. Values stay in `[0, 255]`.
pub fn crop_resize(img: &ByteImage, target: usize, threshold: f64) -> Result<FloatImage> {
    if target == 0 {
        return Err(Error::InvalidInput("target size must be positive".into()));
    }
    let (y0, x0, y1, x1) = foreground_box(img, threshold).ok_or_else(|| {
        Error::InvalidInput(format!(
            "{}×{} image has no pixel above background threshold {threshold}",
            img.height, img.width
        ))
    })?;
    let crop_h = y1 - y0 + 1;
    let crop_w = x1 - x0 + 1;
    let full = FloatImage::from_bytes(img);
    let coord = |i: usize, len: usize| -> f64 {
        if target == 1 {
            (len - 1) as f64 / 2.0
        } else {
            i as f64 * (len - 1) as f64 / (target - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(target * target * 3);
    for i in 0..target {
        let sy = y0 as f64 + coord(i, crop_h);
        for j in 0..target {
            let sx = x0 as f64 + coord(j, crop_w);
            for c in 0..3 {
                data.push(full.sample(sy, sx, c).expect("inside crop"));
            }
        }
    }
    FloatImage::new(target, target, 3, data)
}

/// Classical per-channel histogram equalization on values quantized to
/// 0..=255: `v′ = round(255·(cdf(v) − cdf_min) / (N − cdf_min))`.
///
/// A constant channel has `N = cdf_min` and maps to 0.
pub fn hist_equalize(img: &FloatImage) -> FloatImage {
    let n = img.pixels();
    let mut out = img.clone();
    for c in 0..img.channels {
        let level = |v: f64| v.round().clamp(0.0, 255.0) as usize;
        let mut hist = [0usize; 256];
        for p in 0..n {
            hist[level(img.data[p * img.channels + c])] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut run = 0;
        for (k, &h) in hist.iter().enumerate() {
            run += h;
            cdf[k] = run;
        }
        let cdf_min = hist.iter().zip(&cdf).find(|(&h, _)| h > 0).map_or(0, |(_, &c)| c);
        let denom = n - cdf_min;
        let map: Vec<f64> = cdf
            .iter()
            .map(|&v| {
                if denom == 0 {
                    0.0
                } else {
                    (255.0 * v.saturating_sub(cdf_min) as f64 / denom as f64).round()
                }
            })
            .collect();
        for p in 0..n {
            let i = p * img.channels + c;
            out.data[i] = map[level(img.data[i])];
        }
    }
    out
}

/// Per-channel mean and population standard deviation of a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PreprocessStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a FloatImage>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut images_seen = Vec::new();
        for img in images {
            if sum.is_empty() {
                sum = vec![0.0; img.channels];
                sq = vec![0.0; img.channels];
            } else if img.channels != sum.len() {
                return Err(Error::InvalidInput("images with differing channel counts".into()));
            }
            for px in img.data.chunks_exact(img.channels) {
                for (s, &v) in sum.iter_mut().zip(px) {
                    *s += v;
                }
            }
            count += img.pixels();
            images_seen.push(img);
        }
        if count == 0 {
            return Err(Error::InvalidInput(
                "statistics need at least one training image".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        // second pass on centred values keeps the variance accurate
        for img in images_seen {
            for px in img.data.chunks_exact(img.channels) {
                for ((q, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *q += (v - m) * (v - m);
                }
            }
        }
        let std: Vec<f64> = sq.iter().map(|q| (q / count as f64).sqrt()).collect();
        if let Some(c) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "channel {c} is constant over the training split; cannot standardize"
            )));
        }
        Ok(PreprocessStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["channel", "mean", "std"])?;
        for (c, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            w.write_record([c.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("stats.csv", e))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in r.deserialize() {
            let (c, m, s): (usize, f64, f64) = row?;
            if c != mean.len() {
                return Err(Error::Format(format!("stats rows out of order at channel {c}")));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(PreprocessStats { mean, std })
    }
}

/// `(v − mean) / std` per channel.
pub fn standardize(img: &FloatImage, stats: &PreprocessStats) -> Result<FloatImage> {
    if img.channels != stats.channels() {
        return Err(Error::InvalidInput(format!(
            "image has {} channels, statistics cover {}",
            img.channels,
            stats.channels()
        )));
    }
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(img.channels) {
        for ((v, m), s) in px.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}
