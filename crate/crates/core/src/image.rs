//! Degradation generators and dihedral augmentation.
//!
//! Images are [`Tensor`]s of shape `H x W x channels` with values in `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Additive white Gaussian noise with standard deviation `sigma` (on the
/// `[0, 1]` scale), clamped back into range after adding.
pub fn degrade_awgn<R: Rng + ?Sized>(clean: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain("degrade_awgn", format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = clean.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v + sigma * n).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Bicubic convolution kernel with `a = -0.5`.
pub fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for one output sample along an axis of
/// length `len` downscaled by `scale`. The kernel is stretched by `scale`
/// for anti-aliasing, weights are normalised, and indices clamp to the edge.
fn resample_taps(out_index: usize, len: usize, scale: usize) -> Vec<(usize, f64)> {
    let s = scale as f64;
    let centre = (out_index as f64 + 0.5) * s - 0.5;
    let support = 2.0 * s;
    let lo = (centre - support).floor() as isize;
    let hi = (centre + support).ceil() as isize;
    let mut taps: Vec<(usize, f64)> = Vec::new();
    let mut total = 0.0;
    for i in lo..=hi {
        let w = cubic((i as f64 - centre) / s);
        if w == 0.0 {
            continue;
        }
        let idx = i.clamp(0, len as isize - 1) as usize;
        total += w;
        match taps.iter_mut().find(|(j, _)| *j == idx) {
            Some(t) => t.1 += w,
            None => taps.push((idx, w)),
        }
    }
    for t in &mut taps {
        t.1 /= total;
    }
    taps
}

/// Anti-aliased bicubic downsampling by an integer factor.
pub fn degrade_bicubic_down(clean: &Tensor, scale: usize) -> Result<Tensor> {
    if !(2..=4).contains(&scale) {
        return Err(Error::domain("degrade_bicubic_down", format!("scale must be 2, 3 or 4, got {scale}")));
    }
    let s = clean.shape();
    if s.h % scale != 0 || s.w % scale != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::dim("degrade_bicubic_down", format!("{s} not divisible by {scale}")));
    }
    let (oh, ow) = (s.h / scale, s.w / scale);
    let mut rows = Tensor::zeros(Shape::new(s.h, ow, s.c));
    for c in 0..ow {
        let taps = resample_taps(c, s.w, scale);
        for r in 0..s.h {
            for ch in 0..s.c {
                let v = taps.iter().map(|&(i, w)| w * clean.at(r, i, ch)).sum();
                rows.set(r, c, ch, v);
            }
        }
    }
    let mut out = Tensor::zeros(Shape::new(oh, ow, s.c));
    for r in 0..oh {
        let taps = resample_taps(r, s.h, scale);
        for c in 0..ow {
            for ch in 0..s.c {
                let v = taps.iter().map(|&(i, w)| w * rows.at(i, c, ch)).sum();
                out.set(r, c, ch, v);
            }
        }
    }
    Ok(out)
}

/// Channel kept at `(row, col)` under the RGGB Bayer pattern.
pub fn bayer_channel(row: usize, col: usize) -> usize {
    match (row % 2, col % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// RGGB mosaic as a zero-filled three-channel image.
pub fn degrade_mosaic(clean: &Tensor) -> Result<Tensor> {
    let s = clean.shape();
    if s.c != 3 {
        return Err(Error::dim("degrade_mosaic", format!("expected 3 channels, got {}", s.c)));
    }
    Ok(Tensor::from_fn(s, |r, c, ch| {
        if ch == bayer_channel(r, c) {
            clean.at(r, c, ch)
        } else {
            0.0
        }
    }))
}

/// One of the eight symmetries of the square: `t % 4` quarter turns
/// (counter-clockwise) followed by a horizontal flip when `t >= 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(t: u8) -> Result<Self> {
        if t >= 8 {
            return Err(Error::domain("dihedral", format!("transform index {t} outside 0..8")));
        }
        Ok(Dihedral(t))
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Dihedral(rng.gen_range(0..8))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn apply(self, img: &Tensor) -> Result<Tensor> {
        let s = img.shape();
        let turns = self.0 % 4;
        if turns % 2 == 1 && s.h != s.w {
            return Err(Error::dim("augment", format!("rotation needs a square patch, got {s}")));
        }
        let mut out = img.clone();
        for _ in 0..turns {
            out = rotate90(&out);
        }
        if self.0 >= 4 {
            out = flip_h(&out);
        }
        Ok(out)
    }
}

pub fn rotate90(img: &Tensor) -> Tensor {
    let s = img.shape();
    Tensor::from_fn(Shape::new(s.w, s.h, s.c), |r, c, ch| img.at(c, s.w - 1 - r, ch))
}

pub fn flip_h(img: &Tensor) -> Tensor {
    let s = img.shape();
    Tensor::from_fn(s, |r, c, ch| img.at(r, s.w - 1 - c, ch))
}

/// Applies one random dihedral transform to a degraded/target pair.
pub fn augment<R: Rng + ?Sized>(input: &Tensor, target: &Tensor, rng: &mut R) -> Result<(Tensor, Tensor)> {
    let t = Dihedral::random(rng);
    Ok((t.apply(input)?, t.apply(target)?))
}

/// Crops `size x size` at `(row, col)`.
pub fn crop(img: &Tensor, row: usize, col: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = img.shape();
    if row + h > s.h || col + w > s.w {
        return Err(Error::dim("crop", format!("{h}x{w} at ({row}, {col}) outside {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(h, w, s.c), |r, c, ch| img.at(row + r, col + c, ch)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(Shape::new(h, w, 1), |r, c, _| 0.01 * r as f64 + 0.02 * c as f64)
    }

    #[test]
    fn awgn_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ramp(8, 8);
        assert!(degrade_awgn(&img, 0.0, &mut rng).unwrap().bit_eq(&img));
        let ones = Tensor::filled(Shape::new(16, 16, 3), 1.0);
        let noisy = degrade_awgn(&ones, 0.5, &mut rng).unwrap();
        assert!(noisy.data().iter().all(|&v| v <= 1.0 && v >= 0.0));
        assert!(degrade_awgn(&img, -0.1, &mut rng).is_err());
    }

    #[test]
    fn awgn_std_on_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = 30.0 / 255.0;
        let img = Tensor::filled(Shape::new(250, 400, 1), 0.5);
        let noisy = degrade_awgn(&img, sigma, &mut rng).unwrap();
        let n = noisy.len() as f64;
        let mean = noisy.sum() / n;
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - sigma).abs() < 0.05 * sigma);
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for i in 0..20 {
            let f = i as f64 / 20.0;
            let s: f64 = (-2..=2).map(|k| cubic(k as f64 - f)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
    }

    #[test]
    fn bicubic_shape_and_constant() {
        let img = Tensor::filled(Shape::new(12, 12, 2), 0.37);
        for scale in [2, 3, 4] {
            let d = degrade_bicubic_down(&img, scale).unwrap();
            assert_eq!(d.shape(), Shape::new(12 / scale, 12 / scale, 2));
            assert!(d.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
        assert!(degrade_bicubic_down(&Tensor::zeros(Shape::new(7, 8, 1)), 2).is_err());
        assert!(degrade_bicubic_down(&img, 5).is_err());
    }

    #[test]
    fn bicubic_reproduces_linear_ramp_in_interior() {
        let img = ramp(24, 24);
        let d = degrade_bicubic_down(&img, 2).unwrap();
        for r in 2..10 {
            for c in 2..10 {
                let (y, x) = (2.0 * r as f64 + 0.5, 2.0 * c as f64 + 0.5);
                assert!((d.at(r, c, 0) - (0.01 * y + 0.02 * x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mosaic_pattern() {
        let img = Tensor::filled(Shape::new(4, 4, 3), 0.8);
        let m = degrade_mosaic(&img).unwrap();
        assert_eq!(m.pixel(0, 0), &[0.8, 0.0, 0.0]);
        assert_eq!(m.pixel(0, 1), &[0.0, 0.8, 0.0]);
        assert_eq!(m.pixel(1, 0), &[0.0, 0.8, 0.0]);
        assert_eq!(m.pixel(1, 1), &[0.0, 0.0, 0.8]);
        assert_eq!(m.data().iter().filter(|&&v| v != 0.0).count(), 16);
        assert!(degrade_mosaic(&Tensor::zeros(Shape::new(2, 2, 1))).is_err());
    }

    #[test]
    fn dihedral_group_properties() {
        let img = Tensor::from_fn(Shape::new(5, 5, 2), |r, c, ch| (r * 10 + c) as f64 + ch as f64 * 0.5);
        assert!(Dihedral::IDENTITY.apply(&img).unwrap().bit_eq(&img));
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate90(&x);
        }
        assert!(x.bit_eq(&img));
        assert!(flip_h(&flip_h(&img)).bit_eq(&img));
        let all: Vec<Tensor> = (0..8).map(|t| Dihedral::new(t).unwrap().apply(&img).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(!all[i].bit_eq(&all[j]), "{i} and {j} coincide");
            }
        }
        let rect = Tensor::zeros(Shape::new(2, 3, 1));
        assert!(Dihedral::new(1).unwrap().apply(&rect).is_err());
        assert!(Dihedral::new(8).is_err());
    }
}
