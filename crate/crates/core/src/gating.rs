//! Binary Gumbel-Softmax gates.
//!
//! Two gate families share one functional form,
//! `sigma((logit + e1 - e2) / tau)` with standard Gumbel draws `e1`, `e2`:
//! per-key masks whose logit comes from the mask unit, and per-position
//! architecture gates whose logit is a free parameter `alpha`.
//! Key masks are hardened with a straight-through step; architecture
//! gates are used in their continuous form during search.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Standard Gumbel draw by inverse CDF, `-ln(-ln u)` with `u` in `(0, 1)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Noise pair for one gate; zeros in inference mode.
pub fn noise_pair<R: Rng + ?Sized>(mode: Mode, rng: &mut R) -> (f64, f64) {
    match mode {
        Mode::Train => (gumbel(rng), gumbel(rng)),
        Mode::Infer => (0.0, 0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateState {
    pub soft: f64,
    pub hard: f64,
    pub tau: f64,
    pub noise: (f64, f64),
}

impl GateState {
    pub fn evaluate(logit: f64, tau: f64, noise: (f64, f64)) -> Result<Self> {
        let soft = relaxed(logit, tau, noise)?;
        Ok(GateState { soft, hard: harden(soft), tau, noise })
    }
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::domain(op, format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn relaxed(logit: f64, tau: f64, noise: (f64, f64)) -> Result<f64> {
    check_tau("gate", tau)?;
    let s = sigmoid((logit + noise.0 - noise.1) / tau);
    // keep strictly inside (0, 1) even where the logistic saturates in f64
    Ok(s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Relaxed key mask `m_hat` for a mask logit `beta`.
pub fn soft_mask<R: Rng + ?Sized>(beta: f64, tau: f64, mode: Mode, rng: &mut R) -> Result<f64> {
    check_tau("soft_mask", tau)?;
    relaxed(beta, tau, noise_pair(mode, rng))
}

/// Relaxed architecture gate `s_hat` for a sampling parameter `alpha`.
pub fn arch_gate<R: Rng + ?Sized>(alpha: f64, tau: f64, mode: Mode, rng: &mut R) -> Result<f64> {
    check_tau("arch_gate", tau)?;
    relaxed(alpha, tau, noise_pair(mode, rng))
}

/// Forward value of the straight-through step; `0.5` maps to `0`.
pub fn harden(m_hat: f64) -> f64 {
    if m_hat > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Mask unit: a 1x1 convolution with a single output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskUnit {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl MaskUnit {
    pub fn apply(&self, value: &[f64]) -> Result<f64> {
        if value.len() != self.weight.len() {
            return Err(Error::dim(
                "mask_unit",
                format!("{} channels, unit expects {}", value.len(), self.weight.len()),
            ));
        }
        Ok(self.weight.iter().zip(value).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

/// Records `sigma((logits + noise) / tau)` on the tape, with `noise`
/// holding `e1 - e2` per element (or `None` in inference mode).
pub fn relaxed_on_tape(tape: &mut Tape, logits: Var, tau: f64, noise: Option<&Tensor>) -> Result<Var> {
    check_tau("gate", tau)?;
    let shifted = match noise {
        Some(n) => tape.add_const(logits, n)?,
        None => logits,
    };
    let scaled = tape.scale(shifted, 1.0 / tau);
    Ok(tape.sigmoid(scaled))
}

/// Tensor of `e1 - e2` differences for every element of `shape`.
pub fn noise_tensor(shape: crate::Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let (a, b) = (gumbel(rng), gumbel(rng));
        *v = a - b;
    }
    t
}

/// Temperature schedule: constant during stage 1, exponential decay from
/// `start` to `end` across the stage-2 epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { start: 1.0, end: 0.1, stage1_epochs: 20, stage2_epochs: 20 }
    }
}

impl TemperatureSchedule {
    pub fn temperature(&self, epoch: usize) -> f64 {
        if epoch < self.stage1_epochs || self.stage2_epochs <= 1 {
            return self.start;
        }
        let t = ((epoch - self.stage1_epochs) as f64 / (self.stage2_epochs - 1) as f64).min(1.0);
        self.start * (self.end / self.start).powf(t)
    }
}

/// Architecture parameters of the supernet, one per candidate position.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchState {
    pub alpha: Vec<f64>,
}

impl ArchState {
    pub fn new(positions: usize) -> Self {
        ArchState { alpha: vec![0.0; positions] }
    }

    /// Noise-free relaxed gates.
    pub fn gates(&self, tau: f64) -> Result<Vec<f64>> {
        self.alpha.iter().map(|&a| relaxed(a, tau, (0.0, 0.0))).collect()
    }

    /// Candidate positions (1-based) whose noise-free gate exceeds 0.5.
    pub fn derive(&self) -> Vec<usize> {
        self.alpha
            .iter()
            .enumerate()
            .filter(|(_, &a)| sigmoid(a) > 0.5)
            .map(|(j, _)| j + 1)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn soft_mask_cases() {
        let mut r = rng();
        for tau in [0.1, 1.0, 7.0] {
            assert_eq!(soft_mask(0.0, tau, Mode::Infer, &mut r).unwrap(), 0.5);
            let m = soft_mask(tau * 3f64.ln(), tau, Mode::Infer, &mut r).unwrap();
            assert!((m - 0.75).abs() < 1e-12);
        }
        assert!(soft_mask(1.0, 0.0, Mode::Infer, &mut r).is_err());
        assert!(soft_mask(1.0, -1.0, Mode::Train, &mut r).is_err());
    }

    #[test]
    fn equal_noise_cancels() {
        let g = GateState::evaluate(0.8, 0.5, (1.3, 1.3)).unwrap();
        assert!((g.soft - sigmoid(0.8 / 0.5)).abs() < 1e-15);
        assert_eq!(g.hard, 1.0);
    }

    #[test]
    fn harden_boundary() {
        assert_eq!(harden(0.6), 1.0);
        assert_eq!(harden(0.5), 0.0);
        assert_eq!(harden(0.5 + 1e-12), 1.0);
        assert_eq!(harden(0.3), 0.0);
    }

    #[test]
    fn mask_unit_cases() {
        let unit = MaskUnit { weight: vec![0.0; 3], bias: 1.7 };
        assert_eq!(unit.apply(&[4.0, -2.0, 9.0]).unwrap(), 1.7);
        let unit = MaskUnit { weight: vec![1.0, 0.0, 0.0], bias: 0.0 };
        assert_eq!(unit.apply(&[4.0, -2.0, 9.0]).unwrap(), 4.0);
        assert!(unit.apply(&[1.0]).is_err());
    }

    #[test]
    fn arch_gate_cases() {
        let mut r = rng();
        assert_eq!(arch_gate(0.0, 0.3, Mode::Infer, &mut r).unwrap(), 0.5);
        let hi = arch_gate(2.0, 0.1, Mode::Infer, &mut r).unwrap();
        assert!((hi - 0.999_999_997_938_846_4).abs() < 1e-15);
        let lo = arch_gate(-1.5, 0.1, Mode::Infer, &mut r).unwrap();
        assert!((lo - 3.059_022_269_256_247_6e-7).abs() < 1e-20);
    }

    #[test]
    fn gates_stay_open_interval() {
        let mut r = rng();
        for logit in [-1e4, -50.0, 0.0, 50.0, 1e4] {
            for tau in [1e-3, 1.0] {
                let m = soft_mask(logit, tau, Mode::Train, &mut r).unwrap();
                assert!(m > 0.0 && m < 1.0, "{logit} {tau} -> {m}");
            }
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = TemperatureSchedule { start: 1.0, end: 0.1, stage1_epochs: 5, stage2_epochs: 21 };
        assert_eq!(s.temperature(0), 1.0);
        assert_eq!(s.temperature(4), 1.0);
        assert_eq!(s.temperature(5), 1.0);
        assert!((s.temperature(25) - 0.1).abs() < 1e-15);
        assert!((s.temperature(15) - 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn derive_uses_strict_threshold() {
        let a = ArchState { alpha: vec![2.0, -1.5, 0.3] };
        assert_eq!(a.derive(), vec![1, 3]);
        assert!(ArchState::new(4).derive().is_empty());
        let a = ArchState { alpha: vec![0.1, 5.0] };
        assert_eq!(a.derive(), vec![1, 2]);
    }
}
