//! Synthetic fundus-like images with a class-dependent lesion load.
//!
//! Each image is an orange-red disk on black with a bright optic disc and
//! dark round lesions. Class `k` gets about `3k` lesions (±1) of radius about
//! `(1 + 0.6k)·S/64`, so classes are separable by construction while
//! positions, illumination and noise vary per sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::ByteImage;
use crate::error::{Error, Result};

/// Geometry of one rendered disk, exposed for tests of the crop stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiskGeometry {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

pub fn disk_geometry(size: usize, seed: u64) -> DiskGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    DiskGeometry {
        cy: s / 2.0 + rng.gen_range(-0.04..0.04) * s,
        cx: s / 2.0 + rng.gen_range(-0.04..0.04) * s,
        radius: s * rng.gen_range(0.38..0.43),
    }
}

/// Renders one `size × size` image of class `class`.
pub fn synth_image(class: usize, size: usize, seed: u64) -> Result<ByteImage> {
    if size < 8 {
        return Err(Error::InvalidInput(format!(
            "synthetic images need size ≥ 8, got {size}"
        )));
    }
    let disk = disk_geometry(size, seed);
    // a separate stream for content so the geometry above stays reproducible on its own
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let s = size as f64;
    let scale = s / 64.0;

    let base = [
        rng.gen_range(170.0..210.0),
        rng.gen_range(70.0..100.0),
        rng.gen_range(25.0..45.0),
    ];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let od_dist = disk.radius * rng.gen_range(0.45..0.6);
    let od = (disk.cy + od_dist * angle.sin(), disk.cx + od_dist * angle.cos());
    let od_r = disk.radius * 0.16;

    let count = (3 * class) as i64 + rng.gen_range(-1..=1);
    let count = count.max(0) as usize;
    let lesion_r = (1.0 + 0.6 * class as f64) * scale;
    let mut lesions = Vec::with_capacity(count);
    while lesions.len() < count {
        let r = disk.radius * 0.8 * rng.gen::<f64>().sqrt();
        let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let p = (disk.cy + r * t.sin(), disk.cx + r * t.cos());
        let dy = p.0 - od.0;
        let dx = p.1 - od.1;
        if (dy * dy + dx * dx).sqrt() > od_r + lesion_r {
            lesions.push((p, lesion_r * rng.gen_range(0.85..1.15)));
        }
    }

    let mut data = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let py = y as f64 + 0.5;
            let px = x as f64 + 0.5;
            let dy = py - disk.cy;
            let dx = px - disk.cx;
            let rr = (dy * dy + dx * dx).sqrt() / disk.radius;
            if rr > 1.0 {
                continue;
            }
            // vignetting towards the rim
            let shade = 1.0 - 0.35 * rr * rr;
            let mut rgb = base.map(|c| c * shade);
            let od_d = ((py - od.0).powi(2) + (px - od.1).powi(2)).sqrt() / od_r;
            if od_d < 1.0 {
                let w = 1.0 - od_d * od_d;
                rgb[0] += (250.0 - rgb[0]) * w;
                rgb[1] += (220.0 - rgb[1]) * w;
                rgb[2] += (140.0 - rgb[2]) * w;
            }
            for &((ly, lx), lr) in &lesions {
                let d = ((py - ly).powi(2) + (px - lx).powi(2)).sqrt();
                if d < lr {
                    rgb = [95.0, 25.0, 15.0];
                }
            }
            let i = (y * size + x) * 3;
            for c in 0..3 {
                let noisy = rgb[c] + rng.gen_range(-6.0..6.0);
                // keep disk pixels clear of the background threshold
                data[i + c] = noisy.clamp(if c == 0 { 30.0 } else { 0.0 }, 255.0).round() as u8;
            }
        }
    }
    ByteImage::new(size, size, data)
}
