//! Independent reference implementations used by the integration tests.
//! Everything here is plain loops over `f64` slices; nothing goes through
//! the tape.
#![allow(dead_code)]

use acla_core::params::{Conv1, ParamStore};
use acla_core::{Shape, Tensor};
use rand::Rng;

/// Applies a 1x1 conv to one channel vector.
pub fn linear(store: &ParamStore, conv: Conv1, v: &[f64]) -> Vec<f64> {
    let w = store.get(conv.w);
    let b = store.get(conv.b);
    let (ci, co) = (w.shape().w, w.shape().c);
    assert_eq!(ci, v.len());
    (0..co)
        .map(|o| b.data()[o] + (0..ci).map(|i| v[i] * w.data()[i * co + o]).sum::<f64>())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax_naive(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Bilinear lookup with border clamping, written from the textbook formula.
pub fn bilinear(map: &Tensor, row: f64, col: f64) -> Vec<f64> {
    let s = map.shape();
    let r = row.clamp(0.0, (s.h - 1) as f64);
    let c = col.clamp(0.0, (s.w - 1) as f64);
    let (r0, c0) = (r.floor() as usize, c.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(s.h - 1), (c0 + 1).min(s.w - 1));
    let (a, b) = (r - r0 as f64, c - c0 as f64);
    (0..s.c)
        .map(|ch| {
            (1.0 - a) * (1.0 - b) * map.at(r0, c0, ch)
                + (1.0 - a) * b * map.at(r0, c1, ch)
                + a * (1.0 - b) * map.at(r1, c0, ch)
                + a * b * map.at(r1, c1, ch)
        })
        .collect()
}

/// Dense attention of every query of `x_query` over every position of every
/// map in `keys`, embedded-Gaussian affinity, joint normalisation.
pub fn dense_oracle(
    store: &ParamStore,
    theta: Conv1,
    phi: Conv1,
    g: Conv1,
    x_query: &Tensor,
    keys: &[&Tensor],
) -> Tensor {
    let s = x_query.shape();
    let mut out = Tensor::zeros(s);
    for qr in 0..s.h {
        for qc in 0..s.w {
            let q = linear(store, theta, x_query.pixel(qr, qc));
            let mut logits = Vec::new();
            let mut vals = Vec::new();
            for map in keys {
                for kr in 0..s.h {
                    for kc in 0..s.w {
                        let k = linear(store, phi, map.pixel(kr, kc));
                        logits.push(dot(&q, &k));
                        vals.push(linear(store, g, map.pixel(kr, kc)));
                    }
                }
            }
            let p = softmax_naive(&logits);
            for ch in 0..s.c {
                let v: f64 = p.iter().zip(&vals).map(|(pw, v)| pw * v[ch]).sum();
                out.set(qr, qc, ch, v);
            }
        }
    }
    out
}

/// Explicit sampled cross-layer attention: samples every key, applies `g`
/// and the optional mask rule to the sampled feature, and weight-sums.
/// `mask` is `(unit, tau)`; masks are hardened noise-free.
pub struct SampledOracle<'a> {
    pub store: &'a ParamStore,
    pub offset: Conv1,
    pub weight: Conv1,
    pub g: Conv1,
    pub mask: Option<(Conv1, f64)>,
    pub k: usize,
    pub gates: Vec<f64>,
}

impl SampledOracle<'_> {
    pub fn run(&self, query: &Tensor, refs: &[&Tensor]) -> Tensor {
        let s = query.shape();
        let k = self.k;
        let mut out = Tensor::zeros(s);
        for qr in 0..s.h {
            for qc in 0..s.w {
                let offs = linear(self.store, self.offset, query.pixel(qr, qc));
                let w = softmax_naive(&linear(self.store, self.weight, query.pixel(qr, qc)));
                let mut acc = vec![0.0; s.c];
                for (l, map) in refs.iter().enumerate() {
                    for key in 0..k {
                        let slot = l * k + key;
                        let row = qr as f64 + offs[2 * slot];
                        let col = qc as f64 + offs[2 * slot + 1];
                        let sampled = bilinear(map, row, col);
                        let m = match self.mask {
                            Some((unit, tau)) => {
                                let beta = linear(self.store, unit, &sampled)[0];
                                let soft = 1.0 / (1.0 + (-beta / tau).exp());
                                if soft > 0.5 { 1.0 } else { 0.0 }
                            }
                            None => 1.0,
                        };
                        let gv = linear(self.store, self.g, &sampled);
                        for ch in 0..s.c {
                            acc[ch] += self.gates[l] * m * w[slot] * gv[ch];
                        }
                    }
                }
                out.pixel_mut(qr, qc).copy_from_slice(&acc);
            }
        }
        out
    }
}

pub fn randomize(store: &mut ParamStore, conv: Conv1, std: f64, rng: &mut impl Rng) {
    let ws = store.get(conv.w).shape();
    let bs = store.get(conv.b).shape();
    *store.get_mut(conv.w) = Tensor::randn(ws, std, rng);
    *store.get_mut(conv.b) = Tensor::randn(bs, std, rng);
}

pub fn rand_map(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(Shape::new(h, w, c), 1.0, rng)
}
