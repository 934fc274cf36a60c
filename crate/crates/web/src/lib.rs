//! Browser demo bindings: a gate/temperature explorer, a key-sampling
//! visualiser and a module cost calculator. Every export returns a flat
//! `Vec<f64>` so the page needs no glue beyond `Float64Array`.

use acla_core::attention::{acla_forward, AttentionParams, KeyGating, LayerBank, Variant};
use acla_core::cost::{self, CostDims, CostForm};
use acla_core::gating::{self, GateState, Mode};
use acla_core::params::ParamStore;
use acla_core::{synth, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn msg(e: acla_core::Error) -> String {
    e.to_string()
}

fn js(r: Result<Vec<f64>>) -> std::result::Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Number of histogram bins returned by [`gate_explorer`].
pub const GATE_BINS: usize = 20;

/// Draws `draws` noisy gates for logit `alpha` at temperature `tau`.
///
/// Layout: `[noise-free soft, noise-free hard, mean soft, fraction hard on,
/// histogram of soft values (GATE_BINS bins on [0, 1])...]`.
pub fn gate_explorer(alpha: f64, tau: f64, draws: u32, seed: u64) -> Result<Vec<f64>> {
    let clean = GateState::evaluate(alpha, tau, (0.0, 0.0)).map_err(msg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0.0; GATE_BINS];
    let (mut soft_sum, mut on) = (0.0, 0.0);
    for _ in 0..draws {
        let g = GateState::evaluate(alpha, tau, gating::noise_pair(Mode::Train, &mut rng)).map_err(msg)?;
        soft_sum += g.soft;
        on += g.hard;
        hist[((g.soft * GATE_BINS as f64) as usize).min(GATE_BINS - 1)] += 1.0;
    }
    let n = f64::from(draws.max(1));
    let mut out = vec![clean.soft, clean.hard, soft_sum / n, on / n];
    out.extend(hist.iter().map(|h| h / n));
    Ok(out)
}

/// Fields per key in [`sample_keys`].
pub const KEY_FIELDS: usize = 6;

/// Runs one randomly initialised ACLA module over `layers` synthetic
/// `size x size` feature maps and reports the keys of query `(row, col)`.
///
/// `spread` scales the offset projection (zero keeps keys on the query).
/// Layout: `size * size` grey pixels of the deepest map, then per key
/// `[layer, key, row, col, weight, m]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_keys(
    size: usize,
    layers: usize,
    k: usize,
    row: usize,
    col: usize,
    spread: f64,
    tau: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if row >= size || col >= size {
        return Err("query outside the map".to_string());
    }
    let c = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = synth::images(layers.max(1), size, size, c, &mut rng);
    let mut store = ParamStore::new();
    let params =
        AttentionParams::new(&mut store, "demo", Variant::Acla, c, k, maps.len(), &mut rng).map_err(msg)?;
    if let Some(off) = params.offset {
        let w = store.get_mut(off.w);
        *w = Tensor::randn(w.shape(), spread, &mut rng);
    }
    let bank = LayerBank::new(maps).map_err(msg)?;
    let j = bank.len();
    let mut keys = KeyGating { mode: Mode::Infer, tau, rng: &mut rng, force_on: false };
    let gates = vec![1.0; j];
    let (_, trace) = acla_forward(&store, &params, &bank, j, &mut keys, &gates).map_err(msg)?;
    let deepest = bank.map(j - 1);
    let mut out: Vec<f64> = (0..size * size)
        .map(|i| (0..c).map(|ch| deepest.at(i / size, i % size, ch)).sum::<f64>() / c as f64)
        .collect();
    for s in trace.iter().filter(|s| s.query == (row, col)) {
        out.extend([s.layer as f64, s.key as f64, s.position.row, s.position.col, s.weight, s.hard]);
    }
    Ok(out)
}

/// Cost of one module over `masks` (row-major `layers x k` occupancies)
/// with one gate per layer. Returns `[mask conv, projections, total]`.
pub fn module_cost(n: usize, c: usize, k: usize, gates: Vec<f64>, masks: Vec<f64>, corrected: bool) -> Result<Vec<f64>> {
    if k == 0 || masks.len() != gates.len() * k {
        return Err("masks must hold layers x K values".to_string());
    }
    let dims = CostDims::new(n, c, k).map_err(msg)?;
    let rows: Vec<Vec<f64>> = masks.chunks(k).map(<[f64]>::to_vec).collect();
    let form = if corrected { CostForm::Corrected } else { CostForm::Literal };
    let b = cost::module_cost_breakdown(&gates, &rows, dims, form).map_err(msg)?;
    Ok(vec![b.mask_conv, b.projections, b.total()])
}

#[wasm_bindgen(js_name = gateExplorer)]
pub fn gate_explorer_js(alpha: f64, tau: f64, draws: u32, seed: u64) -> std::result::Result<Vec<f64>, JsError> {
    js(gate_explorer(alpha, tau, draws, seed))
}

#[wasm_bindgen(js_name = sampleKeys)]
#[allow(clippy::too_many_arguments)]
pub fn sample_keys_js(
    size: usize,
    layers: usize,
    k: usize,
    row: usize,
    col: usize,
    spread: f64,
    tau: f64,
    seed: u64,
) -> std::result::Result<Vec<f64>, JsError> {
    js(sample_keys(size, layers, k, row, col, spread, tau, seed))
}

#[wasm_bindgen(js_name = moduleCost)]
pub fn module_cost_js(
    n: usize,
    c: usize,
    k: usize,
    gates: Vec<f64>,
    masks: Vec<f64>,
    corrected: bool,
) -> std::result::Result<Vec<f64>, JsError> {
    js(module_cost(n, c, k, gates, masks, corrected))
}
