use acla_core::image::{self, Dihedral};
use acla_core::metrics;
use acla_core::model::{Model, ModelConfig, Task};
use acla_core::train::{self, Dataset};
use acla_core::{synth, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(Shape::new(h, w, c), |_, _, _| r.gen::<f64>())
}

/// Keys cubic with a = -0.5, written piecewise.
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 2-d anti-aliased bicubic, every output pixel summed over a
/// window of the input with replicated borders.
fn bicubic_oracle(img: &Tensor, s: usize) -> Tensor {
    let sh = img.shape();
    let sf = s as f64;
    Tensor::from_fn(Shape::new(sh.h / s, sh.w / s, sh.c), |i, j, ch| {
        let (ci, cj) = ((i as f64 + 0.5) * sf - 0.5, (j as f64 + 0.5) * sf - 0.5);
        let (mut acc, mut norm) = (0.0, 0.0);
        let reach = 2 * s as isize + 1;
        for y in (ci.floor() as isize - reach)..=(ci.ceil() as isize + reach) {
            for x in (cj.floor() as isize - reach)..=(cj.ceil() as isize + reach) {
                let w = keys((y as f64 - ci) / sf) * keys((x as f64 - cj) / sf);
                let yy = y.clamp(0, sh.h as isize - 1) as usize;
                let xx = x.clamp(0, sh.w as isize - 1) as usize;
                acc += w * img.at(yy, xx, ch);
                norm += w;
            }
        }
        acc / norm
    })
}

#[test]
fn bicubic_matches_direct_oracle() {
    let mut r = rng(1);
    for s in [2, 3, 4] {
        let img = random_image(6 * s, 4 * s, 2, &mut r);
        let fast = image::degrade_bicubic_down(&img, s).unwrap();
        let slow = bicubic_oracle(&img, s);
        assert!(fast.max_abs_diff(&slow) < 1e-12, "scale {s}: {}", fast.max_abs_diff(&slow));
    }
}

/// SSIM from its definition: 2-d Gaussian weights built directly, local
/// statistics as weighted sums, mean over windows fully inside the image.
fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let (n, sigma) = (11usize, 1.5f64);
    let half = (n / 2) as f64;
    let mut w = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f64 - half, x as f64 - half);
            w[y * n + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let s = a.shape();
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..=s.h - n {
        for c in 0..=s.w - n {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let k = w[y * n + x];
                    let (p, q) = (a.at(r + y, c + x, 0), b.at(r + y, c + x, 0));
                    ma += k * p;
                    mb += k * q;
                    aa += k * p * p;
                    bb += k * q * q;
                    ab += k * p * q;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_reference_on_random_pairs() {
    let mut r = rng(2);
    for _ in 0..10 {
        let (h, w) = (r.gen_range(11..20), r.gen_range(11..20));
        let a = random_image(h, w, 1, &mut r);
        let noise = r.gen_range(0.0..0.3);
        let b = Tensor::from_fn(a.shape(), |y, x, _| (a.at(y, x, 0) + noise * (r.gen::<f64>() - 0.5)).clamp(0.0, 1.0));
        let got = metrics::ssim(&a, &b).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn ssim_identity_and_psnr_closed_form() {
    let mut r = rng(3);
    let a = random_image(16, 16, 1, &mut r);
    assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let zero = Tensor::zeros(Shape::new(4, 4, 1));
    let tenth = Tensor::filled(Shape::new(4, 4, 1), 0.1);
    assert!((metrics::psnr(&zero, &tenth).unwrap() - 20.0).abs() < 1e-12);
    assert_eq!(metrics::psnr_from_mse(0.01), 20.0);
    assert_eq!(metrics::psnr_from_mse(1e-3), 30.0);
    assert_eq!(metrics::psnr_from_mse(1e-12), metrics::PSNR_CAP);
    assert_eq!(metrics::psnr(&a, &a).unwrap(), metrics::PSNR_CAP);
}

#[test]
fn mosaic_keeps_exactly_one_sample_per_pixel() {
    let mut r = rng(4);
    let img = random_image(6, 8, 3, &mut r);
    let m = image::degrade_mosaic(&img).unwrap();
    let mut rebuilt = Tensor::zeros(Shape::new(6, 8, 1));
    for y in 0..6 {
        for x in 0..8 {
            let keep = image::bayer_channel(y, x);
            for ch in 0..3 {
                let v = m.at(y, x, ch);
                if ch == keep {
                    assert_eq!(v, img.at(y, x, ch));
                    rebuilt.set(y, x, 0, v);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
    let counts = (0..3).map(|ch| (0..48).filter(|&i| image::bayer_channel(i / 8, i % 8) == ch).count()).collect::<Vec<_>>();
    assert_eq!(counts, vec![12, 24, 12]);
}

#[test]
fn noisy_psnr_matches_noise_level() {
    let mut r = rng(5);
    let clean = Tensor::filled(Shape::new(256, 256, 1), 0.5);
    let noisy = image::degrade_awgn(&clean, 30.0 / 255.0, &mut r).unwrap();
    let want = 10.0 * (255.0f64 * 255.0 / 900.0).log10();
    let got = metrics::psnr(&noisy, &clean).unwrap();
    assert!((got - want).abs() < 0.1, "{got} vs {want}");
}

proptest! {
    #[test]
    fn dihedral_inverse_exists(t in 0u8..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let img = random_image(5, 5, 2, &mut r);
        let d = Dihedral::new(t).unwrap();
        let out = d.apply(&img).unwrap();
        let back = (0..8u8).map(|u| Dihedral::new(u).unwrap()).find(|u| u.apply(&out).unwrap().bit_eq(&img));
        prop_assert!(back.is_some());
    }

    #[test]
    fn bicubic_preserves_constants(v in 0.0f64..1.0, s in 2usize..5) {
        let img = Tensor::filled(Shape::new(3 * s, 2 * s, 3), v);
        let out = image::degrade_bicubic_down(&img, s).unwrap();
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-12));
    }
}

#[test]
fn sampled_sr_pairs_are_aligned() {
    let mut r = rng(6);
    let imgs = synth::images(2, 36, 36, 3, &mut r);
    let data = Dataset { train: imgs, ..Dataset::default() };
    for _ in 0..5 {
        let p = data.sample_pair(Task::Sr(3), 8, true, &mut r).unwrap();
        assert_eq!(p.input.shape(), Shape::new(8, 8, 3));
        assert_eq!(p.target.shape(), Shape::new(24, 24, 3));
        let down = image::degrade_bicubic_down(&p.target, 3).unwrap();
        assert!(down.bit_eq(&p.input));
    }
}

#[test]
fn backbone_starts_near_identity_and_sr_output_has_target_shape() {
    let mut r = rng(7);
    let x = random_image(12, 12, 3, &mut r);
    let cfg = ModelConfig { in_channels: 3, channels: 4, blocks: 2, scale: 2, attention: None, supernet: false };
    let m = Model::new(cfg, &mut r).unwrap();
    let y = m.infer(&x, 1.0, &mut r).unwrap();
    assert_eq!(y.shape(), Shape::new(24, 24, 3));
    let pairs = vec![train::Pair { input: x.clone(), target: x }];
    let cfg = ModelConfig { in_channels: 3, channels: 4, blocks: 2, scale: 1, attention: None, supernet: false };
    let m = Model::new(cfg, &mut r).unwrap();
    let (psnr, _) = train::evaluate(&m, &pairs, 1.0).unwrap();
    assert!(psnr > 20.0, "{psnr}");
}
