//! Insert-position search over a supernet.
//!
//! Stage 1 trains the weights alone on MSE. Stage 2 alternates one weight
//! step on a training batch with one step on the architecture logits on a
//! validation batch, both on `MSE + lambda ln(cost)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{KeyGating, Variant};
use crate::cost::CostForm;
use crate::error::{Error, Result};
use crate::gating::{self, ArchState, Mode, TemperatureSchedule};
use crate::model::{AttentionSpec, Model, ModelConfig, Task};
use crate::optim::{Adam, LrSchedule};
use crate::params::Group;
use crate::tape::Tape;
use crate::tensor::Shape;
use crate::train::{self, batch_loss, check_finite, collect_grads, CostTerm, Dataset, Pair, TrainConfig, Trainer};

pub const LAMBDA_CANDIDATES: [f64; 7] = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4];

/// Published search settings for a 16- or 32-block EDSR backbone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub task: &'static str,
    pub backbone: &'static str,
    pub blocks: usize,
    pub lambda: f64,
    pub positions: &'static [usize],
}

pub const PRESETS: [Preset; 5] = [
    Preset { task: "sr", backbone: "edsr", blocks: 32, lambda: 0.15, positions: &[3, 12, 26, 31, 32] },
    Preset { task: "sr", backbone: "rcan", blocks: 10, lambda: 0.3, positions: &[1, 3, 5, 9] },
    Preset { task: "denoise", backbone: "edsr", blocks: 16, lambda: 0.35, positions: &[2, 7, 9, 13, 15] },
    Preset { task: "demosaic", backbone: "edsr", blocks: 16, lambda: 0.3, positions: &[2, 5, 11, 14, 16] },
    Preset { task: "car", backbone: "edsr", blocks: 16, lambda: 0.35, positions: &[2, 7, 10, 13, 14] },
];

pub fn preset(task: &str, backbone: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.task == task && p.backbone == backbone)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub patch: usize,
    /// Initial weight learning rate of the cosine schedule.
    pub lr: f64,
    pub arch_lr: f64,
    pub lambda: f64,
    pub cost_form: CostForm,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Gumbel noise on the architecture gates during stage-2 steps.
    pub arch_noise: bool,
    pub augment: bool,
    /// Fraction of the images used for weight steps.
    pub train_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            stage1_epochs: 20,
            stage2_epochs: 20,
            steps_per_epoch: 2,
            batch: 8,
            patch: 32,
            lr: 1e-3,
            arch_lr: 3e-3,
            lambda: 0.35,
            cost_form: CostForm::Literal,
            tau_start: 1.0,
            tau_end: 0.1,
            arch_noise: true,
            augment: true,
            train_fraction: 0.8,
        }
    }
}

impl SearchConfig {
    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn temperature(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            start: self.tau_start,
            end: self.tau_end,
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 {
            return Err(Error::config("search.steps_per_epoch", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("search.batch", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("search.lambda", "must be a finite value >= 0"));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::config("search.tau_start", "temperatures must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("search.train_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Supernet config: ACLA after every block.
pub fn supernet_config(in_channels: usize, channels: usize, blocks: usize, scale: usize, k: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        channels,
        blocks,
        scale,
        attention: Some(AttentionSpec {
            variant: Variant::Acla,
            k,
            positions: (1..=blocks).collect(),
            max_referred: blocks,
        }),
        supernet: true,
    }
}

pub fn build_supernet(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    if config.blocks == 0 {
        return Err(Error::config("backbone.blocks", "supernet needs at least one candidate position"));
    }
    Model::new(config, rng)
}

/// Seeded 80/20-style split of the image indices.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    idx.shuffle(&mut rng);
    let cut = if n < 2 { n } else { ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1) };
    let val = idx.split_off(cut);
    (idx, val)
}

/// Parameter checksums around one stage-2 step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepChecksums {
    pub weights_before: u64,
    pub arch_before: u64,
    pub weights_mid: u64,
    pub arch_mid: u64,
    pub weights_after: u64,
    pub arch_after: u64,
}

impl StepChecksums {
    /// The weight step left the logits alone and the logit step left the
    /// weights alone.
    pub fn isolated(&self) -> bool {
        self.arch_before == self.arch_mid && self.weights_mid == self.weights_after
    }
}

/// One record per stage-2 step.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchRecord {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    /// Noise-free `s_hat` at `tau` after the step.
    pub gates: Vec<f64>,
    pub cost: f64,
    pub weight_loss: f64,
    pub arch_loss: f64,
    pub checks: StepChecksums,
}

/// Resumable search state.
#[derive(Clone, Debug, PartialEq)]
pub struct Searcher {
    pub model: Model,
    pub weight_adam: Adam,
    pub arch_adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    pub data_rng: ChaCha8Rng,
    pub key_rng: ChaCha8Rng,
    pub arch_rng: ChaCha8Rng,
    pub trace: Vec<SearchRecord>,
    /// Logit checksum at the start and end of stage 1.
    pub stage1_arch: Option<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub arch: ArchState,
    pub derived: Vec<usize>,
    pub trace: Vec<SearchRecord>,
    pub stage1_arch: Option<(u64, u64)>,
}

impl Searcher {
    pub fn new(model: Model, seed: u64) -> Result<Self> {
        if model.alpha.is_none() {
            return Err(Error::contract("run_search", "model is not a supernet"));
        }
        let store = &model.store;
        let w: Vec<_> = store.ids().filter(|&i| store.group(i) == Group::Weights).collect();
        let a: Vec<_> = store.ids().filter(|&i| store.group(i) == Group::Arch).collect();
        let weight_adam = Adam::new(store, w);
        let arch_adam = Adam::new(store, a);
        let (data_rng, key_rng) = train::streams(seed);
        let mut arch_rng = ChaCha8Rng::seed_from_u64(seed);
        arch_rng.set_stream(3);
        Ok(Searcher {
            model,
            weight_adam,
            arch_adam,
            epoch: 0,
            data_rng,
            key_rng,
            arch_rng,
            trace: Vec::new(),
            stage1_arch: None,
        })
    }

    fn batch(&mut self, task: Task, data: &Dataset, cfg: &SearchConfig) -> Result<Vec<Pair>> {
        (0..cfg.batch)
            .map(|_| data.sample_pair(task, cfg.patch, cfg.augment, &mut self.data_rng))
            .collect()
    }

    /// One optimiser step on `group`; returns `(loss, cost)`.
    fn step(
        &mut self,
        group: Group,
        batch: &[Pair],
        tau: f64,
        lr: f64,
        cost: Option<CostTerm>,
        noise: bool,
    ) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, |g| g == group);
        let blocks = self.model.config.blocks;
        let n = noise.then(|| gating::noise_tensor(Shape::new(1, 1, blocks), &mut self.arch_rng));
        let arch = self.model.arch_gates(&mut tape, &p, tau, n.as_ref())?;
        let mut keys = KeyGating { mode: Mode::Train, tau, rng: &mut self.key_rng, force_on: false };
        let out = batch_loss(&self.model, &mut tape, &p, batch, arch.as_ref(), &mut keys, cost)?;
        let loss = tape.value(out.loss).item()?;
        let stage = if cost.is_some() { "search stage 2" } else { "search stage 1" };
        check_finite(&format!("{stage}, epoch {}", self.epoch + 1), loss)?;
        let c = match out.cost {
            Some(c) => tape.value(c).item()?,
            None => f64::NAN,
        };
        let grads = tape.backward(out.loss)?;
        let adam = match group {
            Group::Weights => &mut self.weight_adam,
            Group::Arch => &mut self.arch_adam,
        };
        let g = collect_grads(&grads, &p, &adam.ids);
        adam.step(&mut self.model.store, &g, lr)?;
        Ok((loss, c))
    }

    /// Runs epochs until the schedule is complete.
    pub fn run(
        &mut self,
        task: Task,
        train_split: &Dataset,
        val_split: &Dataset,
        cfg: &SearchConfig,
        mut on_epoch: impl FnMut(&Searcher) -> Result<()>,
    ) -> Result<SearchOutcome> {
        cfg.validate()?;
        if train_split.train.is_empty() || val_split.train.is_empty() {
            return Err(Error::contract("run_search", "train and validation splits must be non-empty"));
        }
        let total = cfg.total_epochs();
        let lr_schedule = LrSchedule::Cosine { base: cfg.lr, total };
        let temps = cfg.temperature();
        let cost = CostTerm { lambda: cfg.lambda, form: cfg.cost_form };
        while self.epoch < total {
            let e = self.epoch;
            let lr = lr_schedule.lr(e);
            let tau = temps.temperature(e);
            if e < cfg.stage1_epochs {
                let before = self.model.store.checksum(Group::Arch);
                for _ in 0..cfg.steps_per_epoch {
                    let b = self.batch(task, train_split, cfg)?;
                    self.step(Group::Weights, &b, tau, lr, None, cfg.arch_noise)?;
                }
                let after = self.model.store.checksum(Group::Arch);
                let start = self.stage1_arch.map_or(before, |s| s.0);
                self.stage1_arch = Some((start, after));
            } else {
                for _ in 0..cfg.steps_per_epoch {
                    let store = &self.model.store;
                    let (weights_before, arch_before) = (store.checksum(Group::Weights), store.checksum(Group::Arch));
                    let b = self.batch(task, train_split, cfg)?;
                    let (wl, _) = self.step(Group::Weights, &b, tau, lr, Some(cost), cfg.arch_noise)?;
                    let store = &self.model.store;
                    let (weights_mid, arch_mid) = (store.checksum(Group::Weights), store.checksum(Group::Arch));
                    let b = self.batch(task, val_split, cfg)?;
                    let (al, c) = self.step(Group::Arch, &b, tau, cfg.arch_lr, Some(cost), cfg.arch_noise)?;
                    let store = &self.model.store;
                    let checks = StepChecksums {
                        weights_before,
                        arch_before,
                        weights_mid,
                        arch_mid,
                        weights_after: store.checksum(Group::Weights),
                        arch_after: store.checksum(Group::Arch),
                    };
                    if !checks.isolated() {
                        return Err(Error::State("optimiser step touched the other parameter group".into()));
                    }
                    let arch = self.model.arch_state().expect("supernet");
                    self.trace.push(SearchRecord {
                        step: self.trace.len() + 1,
                        epoch: e + 1,
                        tau,
                        gates: arch.gates(tau)?,
                        cost: c,
                        weight_loss: wl,
                        arch_loss: al,
                        checks,
                    });
                }
            }
            self.epoch += 1;
            on_epoch(self)?;
        }
        Ok(self.outcome())
    }

    pub fn outcome(&self) -> SearchOutcome {
        let arch = self.model.arch_state().expect("supernet");
        SearchOutcome {
            derived: derive_arch(&arch),
            arch,
            trace: self.trace.clone(),
            stage1_arch: self.stage1_arch,
        }
    }
}

/// 1-based positions whose noise-free gate exceeds one half.
pub fn derive_arch(arch: &ArchState) -> Vec<usize> {
    arch.derive()
}

/// Seeded split of a dataset's training images into weight-step and
/// logit-step halves.
pub fn search_splits(data: &Dataset, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let (t, v) = split_indices(data.train.len(), train_fraction, seed);
    (data.subset(&t), data.subset(&v))
}

/// End-to-end search; returns the searched supernet and the outcome.
pub fn run_search(
    task: Task,
    supernet: Model,
    data: &Dataset,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<(Model, SearchOutcome)> {
    let (tr, va) = search_splits(data, cfg.train_fraction, seed);
    let mut s = Searcher::new(supernet, seed)?;
    let out = s.run(task, &tr, &va, cfg, |_| Ok(()))?;
    Ok((s.model, out))
}

/// Warm-started model with ACLA modules at `positions`.
pub fn derived_model(supernet: &Model, positions: &[usize], rng: &mut ChaCha8Rng) -> Result<Model> {
    let sc = &supernet.config;
    let k = sc.attention.as_ref().map_or(1, |a| a.k);
    let attention = (!positions.is_empty()).then(|| AttentionSpec {
        variant: Variant::Acla,
        k,
        positions: positions.to_vec(),
        max_referred: sc.blocks,
    });
    let config = ModelConfig { attention, supernet: false, ..sc.clone() };
    let mut model = Model::new(config, rng)?;
    model.store.warm_start_from(&supernet.store);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvConfig {
    pub candidates: Vec<f64>,
    /// Fraction of the images searched on.
    pub search_fraction: f64,
    /// Fraction held out for scoring.
    pub eval_fraction: f64,
    pub train: TrainConfig,
}

/// Picks the lambda whose searched-then-retrained model scores the best
/// held-out PSNR; ties go to the larger lambda.
pub fn cross_validate_lambda(
    task: Task,
    supernet_config: &ModelConfig,
    data: &Dataset,
    search: &SearchConfig,
    cv: &CvConfig,
    seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    match cv.candidates.as_slice() {
        [] => return Err(Error::config("search.lambda", "empty candidate set")),
        [only] => return Ok((*only, Vec::new())),
        _ => {}
    }
    let n = data.train.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    idx.shuffle(&mut rng);
    let n_search = ((n as f64 * cv.search_fraction).round() as usize).max(2);
    let n_eval = ((n as f64 * cv.eval_fraction).round() as usize).max(1);
    if n_search + n_eval > n {
        return Err(Error::config("data.train_dir", "too few images for cross-validation"));
    }
    let search_data = data.subset(&idx[..n_search]);
    let mut vrng = ChaCha8Rng::seed_from_u64(seed);
    vrng.set_stream(6);
    let eval = data.pairs(task, &idx[n_search..n_search + n_eval], &mut vrng)?;
    let mut scores = Vec::with_capacity(cv.candidates.len());
    for &lambda in &cv.candidates {
        let mut mrng = ChaCha8Rng::seed_from_u64(seed);
        let supernet = build_supernet(supernet_config.clone(), &mut mrng)?;
        let cfg = SearchConfig { lambda, ..search.clone() };
        let (searched, out) = run_search(task, supernet, &search_data, &cfg, seed)?;
        let model = derived_model(&searched, &out.derived, &mut mrng)?;
        let fit = Dataset { val: eval.clone(), ..search_data.clone() };
        let mut trainer = Trainer::new(model, seed);
        trainer.run(task, &fit, &cv.train, |_, _| Ok(()))?;
        let (psnr, _) = train::evaluate(&trainer.model, &fit.val, cv.train.key_tau)?;
        scores.push((lambda, psnr));
    }
    let best = scores
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (l, p)| match best {
            Some((bl, bp)) if p < bp || (p == bp && l < bl) => Some((bl, bp)),
            _ => Some((l, p)),
        })
        .map(|(l, _)| l)
        .expect("non-empty");
    Ok((best, scores))
}
