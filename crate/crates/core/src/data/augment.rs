//! Training-time augmentation: small rotations and random flips.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::FloatImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Rotation angle is drawn from `[−max, +max]` degrees.
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            max_rotation_deg: 10.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            max_rotation_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            errs.push(format!(
                "max_rotation_deg must lie in [0, 180], got {}",
                self.max_rotation_deg
            ));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

/// The random choices of one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AugmentDraw {
    /// Always consumes exactly three values from `rng`, whatever the policy.
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        let u: f64 = rng.gen();
        let h: f64 = rng.gen();
        let v: f64 = rng.gen();
        AugmentDraw {
            angle_deg: (2.0 * u - 1.0) * policy.max_rotation_deg,
            hflip: h < policy.hflip_prob,
            vflip: v < policy.vflip_prob,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(img: &FloatImage, policy: &AugmentPolicy, rng: &mut R) -> FloatImage {
    apply(img, AugmentDraw::sample(policy, rng))
}

pub fn apply(img: &FloatImage, draw: AugmentDraw) -> FloatImage {
    let mut out = rotate(img, draw.angle_deg);
    if draw.hflip {
        out = flip_horizontal(&out);
    }
    if draw.vflip {
        out = flip_vertical(&out);
    }
    out
}

/// Rotates counter-clockwise about the image centre with bilinear sampling;
/// samples falling outside the source are zero.
pub fn rotate(img: &FloatImage, angle_deg: f64) -> FloatImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (img.height - 1) as f64 / 2.0;
    let cx = (img.width - 1) as f64 / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // inverse map: rotate the output position back by −θ (y axis points down)
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            for c in 0..img.channels {
                out.data[(y * img.width + x) * img.channels + c] = img.sample(sy, sx, c).unwrap_or(0.0);
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &FloatImage) -> FloatImage {
    let mut out = img.clone();
    let ch = img.channels;
    for y in 0..img.height {
        for x in 0..img.width {
            let src = (y * img.width + (img.width - 1 - x)) * ch;
            let dst = (y * img.width + x) * ch;
            out.data[dst..dst + ch].copy_from_slice(&img.data[src..src + ch]);
        }
    }
    out
}

pub fn flip_vertical(img: &FloatImage) -> FloatImage {
    let mut out = img.clone();
    let row = img.width * img.channels;
    for y in 0..img.height {
        let src = (img.height - 1 - y) * row;
        out.data[y * row..(y + 1) * row].copy_from_slice(&img.data[src..src + row]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> FloatImage {
        FloatImage::new(h, w, 2, (0..h * w * 2).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let img = ramp(5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            assert_eq!(augment(&img, &AugmentPolicy::identity(), &mut rng), img);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(4, 6);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        let mut img = FloatImage::new(3, 3, 1, vec![0.0; 9]).unwrap();
        img.data[2] = 1.0; // top right
        let r = rotate(&img, 90.0);
        // counter-clockwise: top right goes to top left
        assert!((r.data[0] - 1.0).abs() < 1e-12, "{:?}", r.data);
    }

    #[test]
    fn draws_consume_fixed_randomness() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        AugmentDraw::sample(&AugmentPolicy::identity(), &mut a);
        AugmentDraw::sample(&AugmentPolicy::default(), &mut b);
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn angles_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AugmentPolicy::default();
        for _ in 0..1000 {
            let d = AugmentDraw::sample(&p, &mut rng);
            assert!(d.angle_deg.abs() <= 10.0);
        }
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            max_rotation_deg: -1.0,
            hflip_prob: 1.5,
            vflip_prob: -0.1,
        };
        match bad.validate() {
            Err(Error::InvalidConfig(e)) => assert_eq!(e.len(), 3),
            other => panic!("{other:?}"),
        }
    }
}
