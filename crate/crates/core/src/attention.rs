//! Non-local, cross-layer non-local, cross-layer and adaptive cross-layer
//! attention.
//!
//! All four variants read keys from a bank of earlier feature maps and
//! produce a map `y` of the query's shape; [`AttentionParams::block`]
//! wraps it as `z = h(y) + x`.
//!
//! The sampled variants (CLA, ACLA) use one projection of the query for
//! `2K` offsets per referred layer and one for `K` logits per referred
//! layer, with the softmax taken jointly over all `K R` logits. The value
//! embedding `g` and the mask unit are 1x1 convolutions; both commute
//! with bilinear sampling (the interpolation weights sum to one), so they
//! are applied to the full map once and the result is sampled.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::{self, Mode};
use crate::params::{Bound, Conv1, Init, ParamStore};
use crate::sampler::{sample_bilinear, Position};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Nl,
    Clnl,
    Cla,
    Acla,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Nl => "nl",
            Variant::Clnl => "clnl",
            Variant::Cla => "cla",
            Variant::Acla => "acla",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nl" => Some(Variant::Nl),
            "clnl" => Some(Variant::Clnl),
            "cla" => Some(Variant::Cla),
            "acla" => Some(Variant::Acla),
            _ => None,
        }
    }

    pub fn is_sampled(self) -> bool {
        matches!(self, Variant::Cla | Variant::Acla)
    }

    pub fn is_cross_layer(self) -> bool {
        !matches!(self, Variant::Nl)
    }
}

/// Ordered feature maps at candidate positions, shallowest first.
#[derive(Clone, Debug, Default)]
pub struct LayerBank {
    maps: Vec<Tensor>,
    active: Vec<bool>,
}

impl LayerBank {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        let mut bank = LayerBank::default();
        for m in maps {
            bank.push(m)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, map: Tensor) -> Result<()> {
        if let Some(first) = self.maps.first() {
            if first.shape() != map.shape() {
                return Err(Error::dim("LayerBank::push", format!("{} vs {}", map.shape(), first.shape())));
            }
        }
        self.maps.push(map);
        self.active.push(true);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, l: usize) -> &Tensor {
        &self.maps[l]
    }

    pub fn shape(&self) -> Option<Shape> {
        self.maps.first().map(Tensor::shape)
    }

    pub fn set_active(&mut self, l: usize, active: bool) {
        self.active[l] = active;
    }

    pub fn is_active(&self, l: usize) -> bool {
        self.active[l]
    }

    /// 0-based indices of active entries among the first `j`, keeping the
    /// last `limit` of them.
    fn referred(&self, j: usize, limit: usize) -> Vec<usize> {
        let idx: Vec<usize> = (0..j.min(self.len())).filter(|&l| self.active[l]).collect();
        idx[idx.len().saturating_sub(limit)..].to_vec()
    }
}

/// One sampled key of one query, as produced by a CLA/ACLA forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySample {
    pub query: (usize, usize),
    /// 1-based index of the referred bank entry.
    pub layer: usize,
    pub key: usize,
    pub offset: (f64, f64),
    pub position: Position,
    pub value: Vec<f64>,
    pub weight: f64,
    /// Mask-unit logit; `None` for CLA.
    pub beta: Option<f64>,
    pub soft: f64,
    pub hard: f64,
    /// Layer gate applied to this key's layer.
    pub gate: f64,
}

impl KeySample {
    /// Weight this key contributes to the output.
    pub fn effective_weight(&self) -> f64 {
        self.gate * self.hard * self.weight
    }
}

/// Parameter handles of one attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub variant: Variant,
    pub channels: usize,
    pub k: usize,
    /// Number of referred layers the projections are sized for.
    pub referred: usize,
    pub g: Conv1,
    pub h: Conv1,
    pub theta: Option<Conv1>,
    pub phi: Option<Conv1>,
    pub offset: Option<Conv1>,
    pub weight: Option<Conv1>,
    pub mask: Option<Conv1>,
}

/// Key-mask sampling settings for one forward pass.
pub struct KeyGating<'a> {
    pub mode: Mode,
    pub tau: f64,
    pub rng: &'a mut ChaCha8Rng,
    /// Forces every hard mask to 1 (visualisation/debugging).
    pub force_on: bool,
}

/// Tape handles of one referred layer inside a sampled-attention pass.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub offsets: Var,
    pub beta: Option<Var>,
    pub soft: Option<Var>,
    pub hard: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Attended {
    pub y: Var,
    /// Joint softmax weights, `H x W x (K R)`; sampled variants only.
    pub weights: Option<Var>,
    pub layers: Vec<LayerVars>,
}

impl AttentionParams {
    /// Creates the parameters in `store`. Offsets and `h` start at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        variant: Variant,
        channels: usize,
        k: usize,
        referred: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("AttentionParams::new", "zero channels"));
        }
        if variant.is_sampled() && k == 0 {
            return Err(Error::contract("AttentionParams::new", "K must be at least 1"));
        }
        let referred = if variant == Variant::Nl { 1 } else { referred.max(1) };
        let c = channels;
        let g = Conv1::new(store, &format!("{prefix}.g"), c, c, Init::Scaled(1.0), rng);
        let h = Conv1::new(store, &format!("{prefix}.h"), c, c, Init::Zero, rng);
        let mut p = AttentionParams {
            variant,
            channels,
            k,
            referred,
            g,
            h,
            theta: None,
            phi: None,
            offset: None,
            weight: None,
            mask: None,
        };
        match variant {
            Variant::Nl | Variant::Clnl => {
                let inner = (c / 2).max(1);
                p.theta = Some(Conv1::new(store, &format!("{prefix}.theta"), c, inner, Init::Scaled(1.0), rng));
                p.phi = Some(Conv1::new(store, &format!("{prefix}.phi"), c, inner, Init::Scaled(1.0), rng));
            }
            Variant::Cla | Variant::Acla => {
                p.offset = Some(Conv1::new(store, &format!("{prefix}.offset"), c, 2 * k * referred, Init::Zero, rng));
                p.weight = Some(Conv1::new(store, &format!("{prefix}.weight"), c, k * referred, Init::Scaled(1.0), rng));
                if variant == Variant::Acla {
                    p.mask = Some(Conv1::new(store, &format!("{prefix}.mask"), c, 1, Init::Scaled(1.0), rng));
                }
            }
        }
        Ok(p)
    }

    /// Residual wrap `z = h(y) + x`.
    pub fn block(&self, tape: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(y) {
            return Err(Error::dim("block_wrap", format!("{} vs {}", tape.shape(x), tape.shape(y))));
        }
        let hy = self.h.apply(tape, p, y)?;
        tape.add(hy, x)
    }

    /// Attention output for `query` over the `referred` maps (shallowest
    /// first, the query's own map last).
    ///
    /// `layer_gates` multiplies each referred layer's contribution (the
    /// supernet's relaxed position gates); `keys` supplies the key-mask
    /// sampling for ACLA.
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        referred: &[Var],
        layer_gates: Option<&[Var]>,
        keys: Option<&mut KeyGating<'_>>,
    ) -> Result<Attended> {
        match self.variant {
            Variant::Nl => {
                let y = self.dense(tape, p, query, &[query])?;
                Ok(Attended { y, weights: None, layers: Vec::new() })
            }
            Variant::Clnl => {
                if referred.is_empty() {
                    return Err(Error::contract("clnl_forward", "empty bank"));
                }
                let y = self.dense(tape, p, query, referred)?;
                Ok(Attended { y, weights: None, layers: Vec::new() })
            }
            Variant::Cla | Variant::Acla => self.sampled(tape, p, query, referred, layer_gates, keys),
        }
    }

    fn dense(&self, tape: &mut Tape, p: &Bound, query: Var, referred: &[Var]) -> Result<Var> {
        let (theta, phi) = match (self.theta, self.phi) {
            (Some(t), Some(f)) => (t, f),
            _ => return Err(Error::contract("nl_forward", "module has no affinity projections")),
        };
        let q = theta.apply(tape, p, query)?;
        let mut keys = Vec::with_capacity(referred.len());
        let mut values = Vec::with_capacity(referred.len());
        for &x in referred {
            keys.push(phi.apply(tape, p, x)?);
            values.push(self.g.apply(tape, p, x)?);
        }
        tape.dense_attention(q, &keys, &values)
    }

    fn sampled(
        &self,
        tape: &mut Tape,
        p: &Bound,
        query: Var,
        referred: &[Var],
        layer_gates: Option<&[Var]>,
        mut keys: Option<&mut KeyGating<'_>>,
    ) -> Result<Attended> {
        let op = if self.variant == Variant::Acla { "acla_forward" } else { "cla_forward" };
        if self.k == 0 {
            return Err(Error::contract(op, "K must be at least 1"));
        }
        if referred.len() != self.referred {
            return Err(Error::contract(
                op,
                format!("module sized for {} referred layers, got {}", self.referred, referred.len()),
            ));
        }
        if let Some(g) = layer_gates {
            if g.len() != referred.len() {
                return Err(Error::contract(op, "one layer gate per referred layer required"));
            }
        }
        let qs = tape.shape(query);
        for &r in referred {
            if tape.shape(r) != qs {
                return Err(Error::dim(op, format!("referred map {} vs query {qs}", tape.shape(r))));
            }
        }
        let (offset, weight) = match (self.offset, self.weight) {
            (Some(o), Some(w)) => (o, w),
            _ => return Err(Error::contract(op, "module has no sampling projections")),
        };
        let k = self.k;
        let offsets_all = offset.apply(tape, p, query)?;
        let logits = weight.apply(tape, p, query)?;
        let weights = tape.softmax_channels(logits);

        let mut terms = Vec::with_capacity(referred.len());
        let mut layers = Vec::with_capacity(referred.len());
        for (idx, &x) in referred.iter().enumerate() {
            let offsets = tape.slice_channels(offsets_all, 2 * k * idx, 2 * k)?;
            let values = self.g.apply(tape, p, x)?;
            let samples = tape.deform_sample(values, offsets)?;
            let w_l = tape.slice_channels(weights, k * idx, k)?;
            let mut lv = LayerVars { offsets, beta: None, soft: None, hard: None };
            let coef = match (self.variant, self.mask) {
                (Variant::Acla, Some(mask)) => {
                    let gating = keys
                        .as_deref_mut()
                        .ok_or_else(|| Error::contract(op, "key gating settings required"))?;
                    let beta_map = mask.apply(tape, p, x)?;
                    let beta = tape.deform_sample(beta_map, offsets)?;
                    let noise = match gating.mode {
                        Mode::Train => Some(gating::noise_tensor(tape.shape(beta), gating.rng)),
                        Mode::Infer => None,
                    };
                    let soft = gating::relaxed_on_tape(tape, beta, gating.tau, noise.as_ref())?;
                    let hard = if gating.force_on {
                        tape.constant(Tensor::filled(tape.shape(soft), 1.0))
                    } else {
                        tape.harden_ste(soft)
                    };
                    lv.beta = Some(beta);
                    lv.soft = Some(soft);
                    lv.hard = Some(hard);
                    tape.mul(w_l, hard)?
                }
                _ => w_l,
            };
            let mut term = tape.weighted_sum_keys(coef, samples)?;
            if let Some(gates) = layer_gates {
                term = tape.mul_scalar(term, gates[idx])?;
            }
            terms.push(term);
            layers.push(lv);
        }
        let y = tape.add_n(&terms)?;
        Ok(Attended { y, weights: Some(weights), layers })
    }

    /// Key-sample records of a sampled-attention pass. `layer_ids` are the
    /// 1-based bank indices of the referred maps, `maps` their values.
    pub fn trace(
        &self,
        tape: &Tape,
        out: &Attended,
        layer_ids: &[usize],
        maps: &[&Tensor],
        gates: &[f64],
    ) -> Result<Vec<KeySample>> {
        let weights = out
            .weights
            .ok_or_else(|| Error::contract("trace", "only sampled attention has key samples"))?;
        let w = tape.value(weights);
        let s = w.shape();
        let k = self.k;
        let r = out.layers.len();
        let mut records = Vec::with_capacity(s.positions() * k * r);
        for row in 0..s.h {
            for col in 0..s.w {
                for (idx, lv) in out.layers.iter().enumerate() {
                    let offs = tape.value(lv.offsets);
                    for key in 0..k {
                        let dr = offs.at(row, col, 2 * key);
                        let dc = offs.at(row, col, 2 * key + 1);
                        let pos = Position::new(row as f64 + dr, col as f64 + dc);
                        let beta = lv.beta.map(|b| tape.value(b).at(row, col, key));
                        let soft = lv.soft.map_or(1.0, |v| tape.value(v).at(row, col, key));
                        let hard = lv.hard.map_or(1.0, |v| tape.value(v).at(row, col, key));
                        records.push(KeySample {
                            query: (row, col),
                            layer: layer_ids[idx],
                            key,
                            offset: (dr, dc),
                            position: pos,
                            value: sample_bilinear(maps[idx], pos)?,
                            weight: w.at(row, col, idx * k + key),
                            beta,
                            soft,
                            hard,
                            gate: gates.get(idx).copied().unwrap_or(1.0),
                        });
                    }
                }
            }
        }
        Ok(records)
    }
}

fn bind_constants(store: &ParamStore, tape: &mut Tape) -> Bound {
    store.bind(tape, |_| false)
}

/// Non-local attention of `x` over itself.
pub fn nl_forward(store: &ParamStore, params: &AttentionParams, x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::domain("nl_forward", "empty map"));
    }
    let mut tape = Tape::new();
    let p = bind_constants(store, &mut tape);
    let xv = tape.constant(x.clone());
    let y = params.dense(&mut tape, &p, xv, &[xv])?;
    Ok(tape.value(y).clone())
}

/// `z = h(y) + x`.
pub fn block_wrap(store: &ParamStore, params: &AttentionParams, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = bind_constants(store, &mut tape);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = params.block(&mut tape, &p, xv, yv)?;
    Ok(tape.value(z).clone())
}

fn check_j(op: &'static str, bank: &LayerBank, j: usize) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::contract(op, "empty bank"));
    }
    if j == 0 || j > bank.len() {
        return Err(Error::contract(op, format!("layer index {j} outside 1..={}", bank.len())));
    }
    Ok(())
}

/// Cross-layer non-local attention of entry `j` (1-based) over all
/// positions of the active entries `1..=j`.
pub fn clnl_forward(store: &ParamStore, params: &AttentionParams, bank: &LayerBank, j: usize) -> Result<Tensor> {
    check_j("clnl_forward", bank, j)?;
    let mut tape = Tape::new();
    let p = bind_constants(store, &mut tape);
    let query = tape.constant(bank.map(j - 1).clone());
    let refs: Vec<Var> = bank
        .referred(j, usize::MAX)
        .into_iter()
        .map(|l| tape.constant(bank.map(l).clone()))
        .collect();
    let y = params.dense(&mut tape, &p, query, &refs)?;
    Ok(tape.value(y).clone())
}

fn sampled_forward(
    op: &'static str,
    store: &ParamStore,
    params: &AttentionParams,
    bank: &LayerBank,
    j: usize,
    keys: Option<&mut KeyGating<'_>>,
    gates: Option<&[f64]>,
) -> Result<(Tensor, Vec<KeySample>)> {
    check_j(op, bank, j)?;
    if params.k == 0 {
        return Err(Error::contract(op, "K must be at least 1"));
    }
    let ids = bank.referred(j, params.referred);
    if ids.len() != params.referred {
        return Err(Error::contract(
            op,
            format!("need {} referred layers, bank has {} active up to {j}", params.referred, ids.len()),
        ));
    }
    let mut tape = Tape::new();
    let p = bind_constants(store, &mut tape);
    let query = tape.constant(bank.map(j - 1).clone());
    let refs: Vec<Var> = ids.iter().map(|&l| tape.constant(bank.map(l).clone())).collect();
    let gate_vals: Vec<f64> = match gates {
        Some(g) if g.len() != ids.len() => {
            return Err(Error::contract(op, "one layer gate per referred layer required"));
        }
        Some(g) => g.to_vec(),
        None => vec![1.0; ids.len()],
    };
    let gate_vars: Option<Vec<Var>> =
        gates.map(|g| g.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect());
    let out = params.attend(&mut tape, &p, query, &refs, gate_vars.as_deref(), keys)?;
    let maps: Vec<&Tensor> = ids.iter().map(|&l| bank.map(l)).collect();
    let layer_ids: Vec<usize> = ids.iter().map(|l| l + 1).collect();
    let trace = params.trace(&tape, &out, &layer_ids, &maps, &gate_vals)?;
    Ok((tape.value(out.y).clone(), trace))
}

/// Cross-layer attention with `K` sampled keys per referred layer.
pub fn cla_forward(
    store: &ParamStore,
    params: &AttentionParams,
    bank: &LayerBank,
    j: usize,
) -> Result<(Tensor, Vec<KeySample>)> {
    if params.variant != Variant::Cla {
        return Err(Error::contract("cla_forward", "parameters are not a CLA module"));
    }
    sampled_forward("cla_forward", store, params, bank, j, None, None)
}

/// Adaptive cross-layer attention: CLA with hard per-key masks and
/// per-layer gates `arch_gates` (one per referred layer).
pub fn acla_forward(
    store: &ParamStore,
    params: &AttentionParams,
    bank: &LayerBank,
    j: usize,
    keys: &mut KeyGating<'_>,
    arch_gates: &[f64],
) -> Result<(Tensor, Vec<KeySample>)> {
    if params.variant != Variant::Acla {
        return Err(Error::contract("acla_forward", "parameters are not an ACLA module"));
    }
    sampled_forward("acla_forward", store, params, bank, j, Some(keys), Some(arch_gates))
}
