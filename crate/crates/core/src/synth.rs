//! Seeded synthetic images: oriented gratings, flat shapes and a smooth
//! background, so that similar structures recur across an image.

use std::f64::consts::PI;

use rand::Rng;

use crate::tensor::{Shape, Tensor};

pub fn image<R: Rng + ?Sized>(h: usize, w: usize, channels: usize, rng: &mut R) -> Tensor {
    let mut img = Tensor::zeros(Shape::new(h, w, channels));
    let base: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.25..0.75)).collect();
    let tilt: Vec<(f64, f64)> = (0..channels)
        .map(|_| (rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)))
        .collect();
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            for ch in 0..channels {
                img.set(r, c, ch, base[ch] + tilt[ch].0 * (y - 0.5) + tilt[ch].1 * (x - 0.5));
            }
        }
    }
    for _ in 0..rng.gen_range(2..=3) {
        let theta = rng.gen_range(0.0..PI);
        let period = rng.gen_range(3.0..9.0);
        let amp = rng.gen_range(0.08..0.2);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let colour: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.5..1.0)).collect();
        let (sy, sx) = (theta.sin(), theta.cos());
        for r in 0..h {
            for c in 0..w {
                let t = 2.0 * PI * (r as f64 * sy + c as f64 * sx) / period + phase;
                let v = amp * t.sin();
                for ch in 0..channels {
                    let p = img.pixel_mut(r, c);
                    p[ch] += colour[ch] * v;
                }
            }
        }
    }
    for _ in 0..rng.gen_range(3..=6) {
        let colour: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let ry = rng.gen_range(2.0..(h as f64 / 4.0).max(3.0));
        let rx = rng.gen_range(2.0..(w as f64 / 4.0).max(3.0));
        let disc = rng.gen_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    img.pixel_mut(r, c).copy_from_slice(&colour);
                }
            }
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

pub fn images<R: Rng + ?Sized>(count: usize, h: usize, w: usize, channels: usize, rng: &mut R) -> Vec<Tensor> {
    (0..count).map(|_| image(h, w, channels, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seeded_and_in_range() {
        let a = image(24, 20, 3, &mut ChaCha8Rng::seed_from_u64(5));
        let b = image(24, 20, 3, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), Shape::new(24, 20, 3));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = image(24, 20, 3, &mut ChaCha8Rng::seed_from_u64(6));
        assert!(!a.bit_eq(&c));
    }
}
