//! Bilinear sampling at fractional positions.
//!
//! Positions are in pixel units with the origin at the centre of pixel
//! `(0, 0)`. Out-of-range coordinates are clamped to the border before
//! interpolation, and the clamped axis carries zero position gradient.
//! At exact lattice coordinates the position gradient is taken from the
//! cell to the right (`floor(row)..floor(row) + 1`).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub row: f64,
    pub col: f64,
}

impl Position {
    pub fn new(row: f64, col: f64) -> Self {
        Position { row, col }
    }
}

/// The four lattice neighbours of a sampling position with their
/// interpolation weights and the derivatives of those weights.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    /// Flat pixel indices (`r * w + c`), in order (r0,c0) (r0,c1) (r1,c0) (r1,c1).
    pub pixels: [usize; 4],
    pub weights: [f64; 4],
    pub d_row: [f64; 4],
    pub d_col: [f64; 4],
}

struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    clamped: bool,
}

fn axis(x: f64, extent: usize) -> Axis {
    let max = (extent - 1) as f64;
    let clamped = x < 0.0 || x > max;
    let xc = x.clamp(0.0, max);
    let lo = (xc.floor() as usize).min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    Axis { lo, hi, frac: xc - lo as f64, clamped }
}

impl Taps {
    pub fn new(h: usize, w: usize, pos: Position) -> Result<Self> {
        if !pos.row.is_finite() || !pos.col.is_finite() {
            return Err(Error::domain("sample_bilinear", format!("non-finite position {pos:?}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::domain("sample_bilinear", "empty map"));
        }
        Ok(Self::new_unchecked(h, w, pos))
    }

    #[inline]
    pub(crate) fn new_unchecked(h: usize, w: usize, pos: Position) -> Self {
        let r = axis(pos.row, h);
        let c = axis(pos.col, w);
        let (fr, fc) = (r.frac, c.frac);
        let pixels = [r.lo * w + c.lo, r.lo * w + c.hi, r.hi * w + c.lo, r.hi * w + c.hi];
        let weights = [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc];
        let d_row = if r.clamped {
            [0.0; 4]
        } else {
            [-(1.0 - fc), -fc, 1.0 - fc, fc]
        };
        let d_col = if c.clamped {
            [0.0; 4]
        } else {
            [-(1.0 - fr), 1.0 - fr, -fr, fr]
        };
        Taps { pixels, weights, d_row, d_col }
    }
}

/// Interpolated channel vector of `map` at `pos`.
pub fn sample_bilinear(map: &Tensor, pos: Position) -> Result<Vec<f64>> {
    let s = map.shape();
    if s.is_empty() {
        return Err(Error::domain("sample_bilinear", "empty map"));
    }
    let taps = Taps::new(s.h, s.w, pos)?;
    let mut out = vec![0.0; s.c];
    accumulate(map.data(), s.c, &taps, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn accumulate(data: &[f64], channels: usize, taps: &Taps, out: &mut [f64]) {
    for t in 0..4 {
        let wt = taps.weights[t];
        let src = &data[taps.pixels[t] * channels..(taps.pixels[t] + 1) * channels];
        for (o, v) in out.iter_mut().zip(src) {
            *o += wt * v;
        }
    }
}

/// Gradient of `<upstream, sample_bilinear(map, pos)>`.
///
/// Returns the position gradient `(d_row, d_col)` and adds the map
/// gradient into `grad_map`.
pub fn sample_bilinear_backward(
    map: &Tensor,
    pos: Position,
    upstream: &[f64],
    grad_map: &mut Tensor,
) -> Result<(f64, f64)> {
    let s = map.shape();
    if upstream.len() != s.c || grad_map.shape() != s {
        return Err(Error::dim("sample_bilinear_backward", "upstream or gradient buffer shape"));
    }
    let taps = Taps::new(s.h, s.w, pos)?;
    Ok(backward_taps(map.data(), s.c, &taps, upstream, grad_map.data_mut()))
}

#[inline]
pub(crate) fn backward_taps(
    data: &[f64],
    channels: usize,
    taps: &Taps,
    upstream: &[f64],
    grad: &mut [f64],
) -> (f64, f64) {
    let mut dr = 0.0;
    let mut dc = 0.0;
    for t in 0..4 {
        let base = taps.pixels[t] * channels;
        let src = &data[base..base + channels];
        let dst = &mut grad[base..base + channels];
        let wt = taps.weights[t];
        let mut dot = 0.0;
        for ((g, v), u) in dst.iter_mut().zip(src).zip(upstream) {
            *g += wt * u;
            dot += v * u;
        }
        dr += taps.d_row[t] * dot;
        dc += taps.d_col[t] * dot;
    }
    (dr, dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_by_two() -> Tensor {
        Tensor::from_vec(Shape::new(2, 2, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn lattice_point_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = Tensor::randn(Shape::new(4, 5, 3), 1.0, &mut rng);
        for r in 0..4 {
            for c in 0..5 {
                let v = sample_bilinear(&map, Position::new(r as f64, c as f64)).unwrap();
                assert_eq!(v.as_slice(), map.pixel(r, c));
            }
        }
    }

    #[test]
    fn cell_centre_is_mean() {
        let map = two_by_two();
        let v = sample_bilinear(&map, Position::new(0.5, 0.5)).unwrap();
        assert_eq!(v, vec![1.5]);
    }

    #[test]
    fn worked_value() {
        // (1-.25)(1-.75)*0 + (1-.25)(.75)*1 + .25(1-.75)*2 + .25*.75*3
        let v = sample_bilinear(&two_by_two(), Position::new(0.25, 0.75)).unwrap();
        assert!((v[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_is_clamped_with_flat_gradient() {
        let map = two_by_two();
        let v = sample_bilinear(&map, Position::new(-3.0, 0.5)).unwrap();
        assert_eq!(v, vec![0.5]);
        let mut g = Tensor::zeros(map.shape());
        let (dr, dc) = sample_bilinear_backward(&map, Position::new(-3.0, 0.5), &[1.0], &mut g).unwrap();
        assert_eq!(dr, 0.0);
        assert_eq!(dc, 1.0);
        let (dr, dc) = sample_bilinear_backward(&map, Position::new(0.5, 7.0), &[1.0], &mut g).unwrap();
        assert_eq!(dc, 0.0);
        assert_eq!(dr, 2.0);
    }

    #[test]
    fn non_finite_position_is_rejected() {
        let map = two_by_two();
        assert!(matches!(
            sample_bilinear(&map, Position::new(f64::NAN, 0.0)),
            Err(Error::Domain { .. })
        ));
        assert!(sample_bilinear(&map, Position::new(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = Tensor::randn(Shape::new(6, 6, 3), 1.0, &mut rng);
        let upstream = [0.3, -1.1, 0.7];
        let f = |p: Position| -> f64 {
            let v = sample_bilinear(&map, p).unwrap();
            v.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..20 {
            // cell interior, clear of lattice lines and the border
            let row = 1.0 + (i % 4) as f64 + 0.1 + 0.8 * rand::Rng::gen::<f64>(&mut rng);
            let col = 1.0 + (i % 3) as f64 + 0.1 + 0.8 * rand::Rng::gen::<f64>(&mut rng);
            let p = Position::new(row, col);
            let mut g = Tensor::zeros(map.shape());
            let (dr, dc) = sample_bilinear_backward(&map, p, &upstream, &mut g).unwrap();
            let fr = (f(Position::new(row + h, col)) - f(Position::new(row - h, col))) / (2.0 * h);
            let fc = (f(Position::new(row, col + h)) - f(Position::new(row, col - h))) / (2.0 * h);
            assert!((dr - fr).abs() <= 1e-4 * fr.abs().max(1e-3), "{dr} vs {fr}");
            assert!((dc - fc).abs() <= 1e-4 * fc.abs().max(1e-3), "{dc} vs {fc}");
        }
    }

    proptest! {
        #[test]
        fn output_is_convex_combination(row in -2.0f64..7.0, col in -2.0f64..7.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = Tensor::randn(Shape::new(5, 5, 1), 1.0, &mut rng);
            let taps = Taps::new(5, 5, Position::new(row, col)).unwrap();
            let v = sample_bilinear(&map, Position::new(row, col)).unwrap()[0];
            let vals: Vec<f64> = taps.pixels.iter().map(|&p| map.data()[p]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn piecewise_linear_along_columns(r in 0.0f64..4.0, c0 in 0usize..4, t in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = Tensor::randn(Shape::new(5, 5, 1), 1.0, &mut rng);
            let at = |c: f64| sample_bilinear(&map, Position::new(r, c)).unwrap()[0];
            let a = at(c0 as f64);
            let b = at(c0 as f64 + 1.0);
            let m = at(c0 as f64 + t);
            prop_assert!((m - (a + t * (b - a))).abs() < 1e-12);
        }
    }
}
