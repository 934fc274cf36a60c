//! FLOPs accounting for inserted attention modules.
//!
//! The module at position `j` costs
//! `sum_{l<=j} s_l sum_{k=1..K} (2 m_{l,k} N C^2 + 2 N C^2 + 6 K N C)`,
//! with the mask unit's convolution counted per kept key and the weight
//! and offset projections counted inside the key sum. The inner placement
//! of the projection terms is kept as written; [`CostForm::Corrected`]
//! counts them once per referred layer instead. Query-dependent masks
//! enter as their mean occupancy per `(layer, key)`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostForm {
    #[default]
    Literal,
    Corrected,
}

impl CostForm {
    pub fn name(self) -> &'static str {
        match self {
            CostForm::Literal => "literal",
            CostForm::Corrected => "corrected",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(CostForm::Literal),
            "corrected" => Some(CostForm::Corrected),
            _ => None,
        }
    }
}

/// Problem size of one attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostDims {
    /// Spatial positions `N`.
    pub n: usize,
    /// Channels `C`.
    pub c: usize,
    /// Maximum keys per referred layer `K`.
    pub k: usize,
}

impl CostDims {
    pub fn new(n: usize, c: usize, k: usize) -> Result<Self> {
        if n == 0 || c == 0 || k == 0 {
            return Err(Error::domain("module_cost", format!("N, C, K must be positive, got {n}, {c}, {k}")));
        }
        Ok(CostDims { n, c, k })
    }

    /// `2 N C^2`: one 1x1 convolution over the map.
    pub fn mask_term(&self) -> f64 {
        2.0 * (self.n * self.c * self.c) as f64
    }

    /// `2 N C^2 + 6 K N C`: weight and offset projections.
    pub fn projection_term(&self) -> f64 {
        2.0 * (self.n * self.c * self.c) as f64 + 6.0 * (self.k * self.n * self.c) as f64
    }
}

/// Per-term breakdown of one module's cost.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModuleCost {
    pub mask_conv: f64,
    pub projections: f64,
}

impl ModuleCost {
    pub fn total(&self) -> f64 {
        self.mask_conv + self.projections
    }
}

/// Cost of the module at one position. `gates[l]` and `masks[l]` belong to
/// referred layer `l`; each `masks[l]` has `K` occupancies in `[0, 1]`.
pub fn module_cost_breakdown(gates: &[f64], masks: &[Vec<f64>], dims: CostDims, form: CostForm) -> Result<ModuleCost> {
    if gates.len() != masks.len() {
        return Err(Error::dim("module_cost", format!("{} gates, {} mask rows", gates.len(), masks.len())));
    }
    let mut out = ModuleCost::default();
    for (&s, m) in gates.iter().zip(masks) {
        if m.len() != dims.k {
            return Err(Error::dim("module_cost", format!("mask row of length {}, K = {}", m.len(), dims.k)));
        }
        let kept: f64 = m.iter().sum();
        out.mask_conv += s * dims.mask_term() * kept;
        out.projections += s * match form {
            CostForm::Literal => dims.k as f64 * dims.projection_term(),
            CostForm::Corrected => dims.projection_term(),
        };
    }
    Ok(out)
}

pub fn module_cost(gates: &[f64], masks: &[Vec<f64>], dims: CostDims, form: CostForm) -> Result<f64> {
    module_cost_breakdown(gates, masks, dims, form).map(|c| c.total())
}

/// `sum_j s_j cost_j`.
pub fn total_cost(gates: &[f64], costs: &[f64]) -> Result<f64> {
    if gates.len() != costs.len() {
        return Err(Error::dim("total_cost", format!("{} gates, {} costs", gates.len(), costs.len())));
    }
    Ok(gates.iter().zip(costs).map(|(s, c)| s * c).sum())
}

/// One convolution layer of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub positions: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

/// `sum 2 N C_in C_out k^2` over the layers.
pub fn backbone_flops(layers: &[ConvLayer]) -> f64 {
    layers
        .iter()
        .map(|l| 2.0 * (l.positions * l.c_in * l.c_out * l.kernel * l.kernel) as f64)
        .sum()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    /// `(position, cost_j)` for each module.
    pub per_position: Vec<(usize, f64)>,
    pub gates: Vec<f64>,
    pub total: f64,
    pub backbone: f64,
    pub mask_conv: f64,
    pub projections: f64,
}

/// Differentiable module cost; `gates` are scalar nodes and `masks` are
/// `1 x 1 x K` occupancy nodes, one per referred layer.
pub fn module_cost_tape(tape: &mut Tape, gates: &[Var], masks: &[Var], dims: CostDims, form: CostForm) -> Result<Var> {
    if gates.len() != masks.len() || gates.is_empty() {
        return Err(Error::dim("module_cost", format!("{} gates, {} mask rows", gates.len(), masks.len())));
    }
    let fixed = match form {
        CostForm::Literal => dims.k as f64 * dims.projection_term(),
        CostForm::Corrected => dims.projection_term(),
    };
    let mut terms = Vec::with_capacity(gates.len());
    for (&s, &m) in gates.iter().zip(masks) {
        if tape.value(m).len() != dims.k {
            return Err(Error::dim("module_cost", format!("mask row of length {}", tape.value(m).len())));
        }
        let kept = tape.sum(m);
        let inner = tape.affine(kept, dims.mask_term(), fixed);
        terms.push(tape.mul(inner, s)?);
    }
    tape.add_n(&terms)
}

pub fn total_cost_tape(tape: &mut Tape, gates: &[Var], costs: &[Var]) -> Result<Var> {
    if gates.len() != costs.len() || gates.is_empty() {
        return Err(Error::dim("total_cost", format!("{} gates, {} costs", gates.len(), costs.len())));
    }
    let terms: Vec<Var> = gates
        .iter()
        .zip(costs)
        .map(|(&s, &c)| tape.mul(s, c))
        .collect::<Result<_>>()?;
    tape.add_n(&terms)
}

/// Scalar constant on the tape, for feeding hard gates into the tape cost.
pub fn scalar(tape: &mut Tape, v: f64) -> Var {
    tape.constant(Tensor::scalar(v))
}
