//! Patch sampling, the training loop and validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::KeyGating;
use crate::cost::{self, CostDims, CostForm};
use crate::error::{Error, Result};
use crate::gating::Mode;
use crate::image::{self, degrade_awgn, degrade_bicubic_down, degrade_mosaic};
use crate::metrics;
use crate::model::{ArchGates, ForwardRun, Model, Task};
use crate::optim::{Adam, LrSchedule};
use crate::params::{Bound, Group};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A degraded input with its clean target.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub input: Tensor,
    pub target: Tensor,
}

/// Clean training images (plus pre-degraded copies for tasks whose
/// degradation is not generated here) and fixed validation pairs.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Tensor>,
    pub train_degraded: Option<Vec<Tensor>>,
    pub val: Vec<Pair>,
}

/// Degrades a clean image for `task`.
pub fn degrade<R: Rng + ?Sized>(task: Task, clean: &Tensor, rng: &mut R) -> Result<Tensor> {
    match task {
        Task::Sr(s) => degrade_bicubic_down(clean, s),
        Task::Denoise(sigma) => degrade_awgn(clean, sigma / 255.0, rng),
        Task::Demosaic => degrade_mosaic(clean),
        Task::CarPrecompressed => Err(Error::contract("degrade", "compressed inputs must be supplied as images")),
    }
}

impl Dataset {
    /// Validation pairs made by degrading `clean` once with `rng`.
    pub fn with_generated_val<R: Rng + ?Sized>(
        task: Task,
        train: Vec<Tensor>,
        clean_val: &[Tensor],
        rng: &mut R,
    ) -> Result<Self> {
        let val = clean_val
            .iter()
            .map(|t| Ok(Pair { input: degrade(task, t, rng)?, target: t.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { train, train_degraded: None, val })
    }

    /// Training images at `idx`, with their degraded copies if present.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            train: idx.iter().map(|&i| self.train[i].clone()).collect(),
            train_degraded: self.train_degraded.as_ref().map(|d| idx.iter().map(|&i| d[i].clone()).collect()),
            val: Vec::new(),
        }
    }

    /// Whole-image pairs for the training images at `idx`.
    pub fn pairs<R: Rng + ?Sized>(&self, task: Task, idx: &[usize], rng: &mut R) -> Result<Vec<Pair>> {
        idx.iter()
            .map(|&i| {
                let target = self.train[i].clone();
                let input = match &self.train_degraded {
                    Some(d) => d[i].clone(),
                    None => degrade(task, &target, rng)?,
                };
                Ok(Pair { input, target })
            })
            .collect()
    }

    /// Random `patch x patch` input crop (target is `scale` times larger).
    pub fn sample_pair(&self, task: Task, patch: usize, augment: bool, rng: &mut ChaCha8Rng) -> Result<Pair> {
        if self.train.is_empty() {
            return Err(Error::contract("sample_pair", "no training images"));
        }
        let idx = rng.gen_range(0..self.train.len());
        let clean = &self.train[idx];
        let s = task.scale();
        let size = patch * s;
        let cs = clean.shape();
        if cs.h < size || cs.w < size {
            return Err(Error::dim("sample_pair", format!("image {cs} smaller than patch {size}")));
        }
        let row = rng.gen_range(0..=(cs.h - size) / s) * s;
        let col = rng.gen_range(0..=(cs.w - size) / s) * s;
        let t = if augment { image::Dihedral::random(rng) } else { image::Dihedral::IDENTITY };
        let target = t.apply(&image::crop(clean, row, col, size, size)?)?;
        let input = match (task, &self.train_degraded) {
            (Task::CarPrecompressed, Some(d)) => t.apply(&image::crop(&d[idx], row, col, size, size)?)?,
            _ => degrade(task, &target, rng)?,
        };
        Ok(Pair { input, target })
    }
}

/// Settings of the cost regulariser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTerm {
    pub lambda: f64,
    pub form: CostForm,
}

/// Cost floor inside the logarithm.
pub const COST_FLOOR: f64 = 1.0;

/// `L = mse + lambda ln(max(cost, 1))` on the tape.
pub fn search_loss(tape: &mut Tape, mse: Var, cost: Var, lambda: f64) -> Result<Var> {
    let lc = tape.ln_floor(cost, COST_FLOOR)?;
    let reg = tape.scale(lc, lambda);
    tape.add(mse, reg)
}

/// Plain-number version of [`search_loss`].
pub fn search_loss_value(mse: f64, cost: f64, lambda: f64) -> f64 {
    mse + lambda * cost.max(COST_FLOOR).ln()
}

/// Handles of one batch's loss.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    pub mse: Var,
    pub cost: Option<Var>,
    /// Mean hard-mask occupancy over every query, key and layer.
    pub occupancy: Option<f64>,
}

/// Mean hard occupancy `1 x 1 x K` per `(module, referred layer)` averaged
/// over the batch, as tape nodes.
fn mask_means(tape: &mut Tape, runs: &[ForwardRun]) -> Result<Vec<Vec<Var>>> {
    let Some(first) = runs.first() else { return Ok(Vec::new()) };
    let b = runs.len() as f64;
    let mut out = Vec::with_capacity(first.modules.len());
    for mi in 0..first.modules.len() {
        let mut per_layer = Vec::new();
        for li in 0..first.modules[mi].attended.layers.len() {
            let mut terms = Vec::with_capacity(runs.len());
            for run in runs {
                let hard = run.modules[mi].attended.layers[li]
                    .hard
                    .ok_or_else(|| Error::contract("cost", "module has no key masks"))?;
                terms.push(tape.mean_spatial(hard));
            }
            let s = tape.add_n(&terms)?;
            per_layer.push(tape.scale(s, 1.0 / b));
        }
        out.push(per_layer);
    }
    Ok(out)
}

/// Forward over a batch and the loss; `cost` adds the regulariser using
/// the supernet gates in `arch`.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    p: &Bound,
    batch: &[Pair],
    arch: Option<&ArchGates>,
    keys: &mut KeyGating<'_>,
    cost: Option<CostTerm>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::contract("batch_loss", "empty batch"));
    }
    let mut runs = Vec::with_capacity(batch.len());
    let mut errs = Vec::with_capacity(batch.len());
    for pair in batch {
        let x = tape.constant(pair.input.clone());
        let y = tape.constant(pair.target.clone());
        let run = model.forward(tape, p, x, arch, keys)?;
        errs.push(tape.mse(run.output, y)?);
        runs.push(run);
    }
    let total = tape.add_n(&errs)?;
    let mse = tape.scale(total, 1.0 / batch.len() as f64);
    let occupancy = hard_occupancy(tape, &runs);
    let (loss, cost_var) = match (cost, arch) {
        (Some(term), Some(arch)) => {
            let c = supernet_cost(model, tape, &runs, arch, term.form)?;
            (search_loss(tape, mse, c, term.lambda)?, Some(c))
        }
        (Some(_), None) => return Err(Error::contract("batch_loss", "cost term needs architecture gates")),
        _ => (mse, None),
    };
    Ok(BatchLoss { loss, mse, cost: cost_var, occupancy })
}

/// `sum_j s_j cost_j` over the supernet's modules.
fn supernet_cost(model: &Model, tape: &mut Tape, runs: &[ForwardRun], arch: &ArchGates, form: CostForm) -> Result<Var> {
    let masks = mask_means(tape, runs)?;
    let first = &runs[0];
    let mut costs = Vec::with_capacity(masks.len());
    let mut outer = Vec::with_capacity(masks.len());
    for (mi, layer_masks) in masks.iter().enumerate() {
        let m = &first.modules[mi];
        let shape = tape.shape(m.refs[0]);
        let k = model.modules[mi].params.k;
        let dims = CostDims::new(shape.positions(), shape.c, k)?;
        let gates: Vec<Var> = m.referred.iter().map(|&l| arch.gates[l - 1]).collect();
        costs.push(cost::module_cost_tape(tape, &gates, layer_masks, dims, form)?);
        outer.push(arch.gates[m.position - 1]);
    }
    cost::total_cost_tape(tape, &outer, &costs)
}

fn hard_occupancy(tape: &Tape, runs: &[ForwardRun]) -> Option<f64> {
    let mut kept = 0.0;
    let mut n = 0usize;
    for run in runs {
        for m in &run.modules {
            for l in &m.attended.layers {
                if let Some(h) = l.hard {
                    let t = tape.value(h);
                    kept += t.sum();
                    n += t.len();
                }
            }
        }
    }
    (n > 0).then(|| kept / n as f64)
}

/// Gradients of the bound parameters in `group`, in `ids` order.
pub fn collect_grads<'g>(
    grads: &'g crate::tape::Gradients,
    p: &Bound,
    ids: &[crate::params::ParamId],
) -> Vec<Option<&'g Tensor>> {
    ids.iter().map(|&id| grads.get(p[id])).collect()
}

pub fn check_finite(stage: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged { stage: stage.to_string(), detail: format!("loss is {value}") });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr: f64,
    /// Halving period of the learning rate, in epochs.
    pub halve_every: usize,
    pub augment: bool,
    /// Temperature of the key masks.
    pub key_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            steps_per_epoch: 2,
            batch: 8,
            patch: 32,
            lr: 1e-3,
            halve_every: 24,
            augment: true,
            key_tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::StepHalving { base: self.lr, every: self.halve_every }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub occupancy: Option<f64>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub data_rng: ChaCha8Rng,
    pub key_rng: ChaCha8Rng,
}

/// Separate seeded streams for data sampling and key-mask noise.
pub fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(1);
    let mut keys = ChaCha8Rng::seed_from_u64(seed);
    keys.set_stream(2);
    (data, keys)
}

impl Trainer {
    pub fn new(model: Model, seed: u64) -> Self {
        let ids: Vec<_> = model.store.ids().filter(|&id| model.store.group(id) == Group::Weights).collect();
        let adam = Adam::new(&model.store, ids);
        let (data_rng, key_rng) = streams(seed);
        Trainer { model, adam, epoch: 0, data_rng, key_rng }
    }

    /// One optimiser step on a fresh batch; returns the loss and the mask
    /// occupancy.
    pub fn step(&mut self, task: Task, data: &Dataset, cfg: &TrainConfig, lr: f64) -> Result<(f64, Option<f64>)> {
        let batch = (0..cfg.batch)
            .map(|_| data.sample_pair(task, cfg.patch, cfg.augment, &mut self.data_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, |g| g == Group::Weights);
        let mut keys = KeyGating { mode: Mode::Train, tau: cfg.key_tau, rng: &mut self.key_rng, force_on: false };
        let arch = self.model.arch_gates(&mut tape, &p, cfg.key_tau, None)?;
        let out = batch_loss(&self.model, &mut tape, &p, &batch, arch.as_ref(), &mut keys, None)?;
        let loss = tape.value(out.loss).item()?;
        check_finite(&format!("training epoch {}", self.epoch + 1), loss)?;
        let grads = tape.backward(out.loss)?;
        let g = collect_grads(&grads, &p, &self.adam.ids);
        self.adam.step(&mut self.model.store, &g, lr)?;
        Ok((loss, out.occupancy))
    }

    /// Trains until `cfg.epochs` are complete, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        task: Task,
        data: &Dataset,
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let schedule = cfg.schedule();
        let mut records = Vec::new();
        while self.epoch < cfg.epochs {
            let lr = schedule.lr(self.epoch);
            let mut loss = 0.0;
            let mut occ = Vec::new();
            for _ in 0..cfg.steps_per_epoch {
                let (l, o) = self.step(task, data, cfg, lr)?;
                loss += l;
                occ.extend(o);
            }
            self.epoch += 1;
            let (val_psnr, val_ssim) = evaluate(&self.model, &data.val, cfg.key_tau)?;
            let rec = EpochRecord {
                epoch: self.epoch,
                lr,
                train_loss: loss / cfg.steps_per_epoch.max(1) as f64,
                val_psnr,
                val_ssim,
                occupancy: (!occ.is_empty()).then(|| occ.iter().sum::<f64>() / occ.len() as f64),
            };
            on_epoch(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Mean luminance PSNR and SSIM over `pairs`, noise-free gates.
pub fn evaluate(model: &Model, pairs: &[Pair], tau: f64) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut ps, mut ss) = (0.0, 0.0);
    for pair in pairs {
        let out = model.infer(&pair.input, tau, &mut rng)?.map(|v| v.clamp(0.0, 1.0));
        let (p, s) = metrics::luma_metrics(&out, &pair.target)?;
        ps += p;
        ss += s;
    }
    let n = pairs.len() as f64;
    Ok((ps / n, ss / n))
}

/// Mean hard-mask occupancy of a model over `inputs`, noise-free gates.
pub fn mask_occupancy(model: &Model, inputs: &[Tensor], tau: f64) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| false);
    let arch = model.arch_gates(&mut tape, &p, tau, None)?;
    let mut runs = Vec::new();
    for x in inputs {
        let xv = tape.constant(x.clone());
        let mut keys = KeyGating { mode: Mode::Infer, tau, rng: &mut rng, force_on: false };
        runs.push(model.forward(&mut tape, &p, xv, arch.as_ref(), &mut keys)?);
    }
    Ok(hard_occupancy(&tape, &runs))
}
