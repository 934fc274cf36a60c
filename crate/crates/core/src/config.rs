//! Experiment configuration in a line-oriented `section.key = value` format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Keys that are absent keep their defaults (the desk-scale
//! denoising preset).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::Variant;
use crate::cost::CostForm;
use crate::error::{Error, Result};
use crate::model::{AttentionSpec, ModelConfig, Task};
use crate::search::{CvConfig, SearchConfig, LAMBDA_CANDIDATES};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum Insert {
    Positions(Vec<usize>),
    Search,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Lambda {
    Value(f64),
    CrossValidate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub blocks: usize,
    pub channels: usize,
    /// `None` is the plain backbone.
    pub variant: Option<Variant>,
    pub k: usize,
    pub insert: Insert,
    pub max_referred: usize,
    pub lambda: Lambda,
    pub candidates: Vec<f64>,
    pub search: SearchConfig,
    pub cv_train_epochs: usize,
    pub train: TrainConfig,
    pub warm_start: Option<PathBuf>,
    pub image_channels: usize,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub degraded_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Denoise(30.0),
            seed: 0,
            blocks: 4,
            channels: 16,
            variant: Some(Variant::Acla),
            k: 4,
            insert: Insert::Positions(vec![2, 4]),
            max_referred: 16,
            lambda: Lambda::Value(0.35),
            candidates: LAMBDA_CANDIDATES.to_vec(),
            search: SearchConfig::default(),
            cv_train_epochs: 20,
            train: TrainConfig::default(),
            warm_start: None,
            image_channels: 3,
            train_dir: None,
            val_dir: None,
            degraded_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(field, format!("cannot parse `{v}`")))
}

fn parse_bool(field: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(field, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(field: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(field, s.trim())).collect()
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn task_parse(v: &str, sigma: f64) -> Result<Task> {
    Ok(match v {
        "sr2" => Task::Sr(2),
        "sr3" => Task::Sr(3),
        "sr4" => Task::Sr(4),
        "denoise" => Task::Denoise(sigma),
        "demosaic" => Task::Demosaic,
        "car-precompressed" => Task::CarPrecompressed,
        _ => return Err(Error::config("experiment.task", format!("unknown task `{v}`"))),
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let mut task_name: Option<String> = None;
        let mut sigma = 30.0;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", no + 1), "expected `section.key = value`"))?;
            let (key, v) = (key.trim(), value.trim());
            let f = key;
            match key {
                "experiment.task" => task_name = Some(v.to_string()),
                "experiment.seed" => c.seed = parse_num(f, v)?,
                "data.sigma" => sigma = parse_num(f, v)?,
                "data.channels" => c.image_channels = parse_num(f, v)?,
                "data.train_dir" => c.train_dir = parse_path(v),
                "data.val_dir" => c.val_dir = parse_path(v),
                "data.degraded_dir" => c.degraded_dir = parse_path(v),
                "backbone.blocks" => c.blocks = parse_num(f, v)?,
                "backbone.channels" => c.channels = parse_num(f, v)?,
                "attention.variant" => {
                    c.variant = match v {
                        "none" => None,
                        _ => Some(Variant::parse(v).ok_or_else(|| Error::config(f, format!("unknown variant `{v}`")))?),
                    }
                }
                "attention.k" => c.k = parse_num(f, v)?,
                "attention.positions" => {
                    c.insert = if v == "search" { Insert::Search } else { Insert::Positions(parse_list(f, v)?) }
                }
                "attention.max_referred" => c.max_referred = parse_num(f, v)?,
                "search.lambda" => {
                    c.lambda = if v == "cv" { Lambda::CrossValidate } else { Lambda::Value(parse_num(f, v)?) }
                }
                "search.candidates" => c.candidates = parse_list(f, v)?,
                "search.stage1_epochs" => c.search.stage1_epochs = parse_num(f, v)?,
                "search.stage2_epochs" => c.search.stage2_epochs = parse_num(f, v)?,
                "search.steps_per_epoch" => c.search.steps_per_epoch = parse_num(f, v)?,
                "search.batch" => c.search.batch = parse_num(f, v)?,
                "search.patch" => c.search.patch = parse_num(f, v)?,
                "search.lr" => c.search.lr = parse_num(f, v)?,
                "search.arch_lr" => c.search.arch_lr = parse_num(f, v)?,
                "search.tau_start" => c.search.tau_start = parse_num(f, v)?,
                "search.tau_end" => c.search.tau_end = parse_num(f, v)?,
                "search.arch_noise" => c.search.arch_noise = parse_bool(f, v)?,
                "search.augment" => c.search.augment = parse_bool(f, v)?,
                "search.train_fraction" => c.search.train_fraction = parse_num(f, v)?,
                "search.cost_form" => {
                    c.search.cost_form =
                        CostForm::parse(v).ok_or_else(|| Error::config(f, format!("unknown cost form `{v}`")))?
                }
                "search.cv_train_epochs" => c.cv_train_epochs = parse_num(f, v)?,
                "train.epochs" => c.train.epochs = parse_num(f, v)?,
                "train.steps_per_epoch" => c.train.steps_per_epoch = parse_num(f, v)?,
                "train.batch" => c.train.batch = parse_num(f, v)?,
                "train.patch" => c.train.patch = parse_num(f, v)?,
                "train.lr" => c.train.lr = parse_num(f, v)?,
                "train.halve_every" => c.train.halve_every = parse_num(f, v)?,
                "train.augment" => c.train.augment = parse_bool(f, v)?,
                "train.key_tau" => c.train.key_tau = parse_num(f, v)?,
                "train.warm_start" => c.warm_start = parse_path(v),
                _ => return Err(Error::config(key, "unknown key")),
            }
        }
        if let Some(t) = task_name {
            c.task = task_parse(&t, sigma)?;
        } else if let Task::Denoise(_) = c.task {
            c.task = Task::Denoise(sigma);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let sigma = match self.task {
            Task::Denoise(s) => s,
            _ => 30.0,
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let lines: Vec<(&str, String)> = vec![
            ("experiment.task", self.task.name()),
            ("experiment.seed", self.seed.to_string()),
            ("data.sigma", sigma.to_string()),
            ("data.channels", self.image_channels.to_string()),
            ("data.train_dir", path(&self.train_dir)),
            ("data.val_dir", path(&self.val_dir)),
            ("data.degraded_dir", path(&self.degraded_dir)),
            ("backbone.blocks", self.blocks.to_string()),
            ("backbone.channels", self.channels.to_string()),
            ("attention.variant", self.variant.map_or("none", Variant::name).to_string()),
            ("attention.k", self.k.to_string()),
            (
                "attention.positions",
                match &self.insert {
                    Insert::Search => "search".to_string(),
                    Insert::Positions(p) => join(p),
                },
            ),
            ("attention.max_referred", self.max_referred.to_string()),
            (
                "search.lambda",
                match self.lambda {
                    Lambda::CrossValidate => "cv".to_string(),
                    Lambda::Value(v) => v.to_string(),
                },
            ),
            ("search.candidates", join(&self.candidates)),
            ("search.stage1_epochs", self.search.stage1_epochs.to_string()),
            ("search.stage2_epochs", self.search.stage2_epochs.to_string()),
            ("search.steps_per_epoch", self.search.steps_per_epoch.to_string()),
            ("search.batch", self.search.batch.to_string()),
            ("search.patch", self.search.patch.to_string()),
            ("search.lr", self.search.lr.to_string()),
            ("search.arch_lr", self.search.arch_lr.to_string()),
            ("search.tau_start", self.search.tau_start.to_string()),
            ("search.tau_end", self.search.tau_end.to_string()),
            ("search.arch_noise", self.search.arch_noise.to_string()),
            ("search.augment", self.search.augment.to_string()),
            ("search.train_fraction", self.search.train_fraction.to_string()),
            ("search.cost_form", self.search.cost_form.name().to_string()),
            ("search.cv_train_epochs", self.cv_train_epochs.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.steps_per_epoch", self.train.steps_per_epoch.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.patch", self.train.patch.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.halve_every", self.train.halve_every.to_string()),
            ("train.augment", self.train.augment.to_string()),
            ("train.key_tau", self.train.key_tau.to_string()),
            ("train.warm_start", path(&self.warm_start)),
        ];
        let mut section = "";
        for (k, v) in lines {
            let sec = k.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = sec;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("backbone.blocks", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("backbone.channels", "must be at least 1"));
        }
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::config("data.channels", "must be 1 or 3"));
        }
        if self.task == Task::Demosaic && self.image_channels != 3 {
            return Err(Error::config("data.channels", "demosaicing needs 3 channels"));
        }
        if let Task::Denoise(s) = self.task {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::config("data.sigma", "must be >= 0"));
            }
        }
        if self.k == 0 {
            return Err(Error::config("attention.k", "must be at least 1"));
        }
        if self.max_referred == 0 {
            return Err(Error::config("attention.max_referred", "must be at least 1"));
        }
        match (&self.insert, self.variant) {
            (Insert::Search, Some(Variant::Acla)) => {}
            (Insert::Search, _) => {
                return Err(Error::config("attention.positions", "`search` is only valid for acla"));
            }
            (Insert::Positions(p), v) => {
                if v.is_some() && p.is_empty() {
                    return Err(Error::config("attention.positions", "no insert positions"));
                }
                if p.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("attention.positions", "must be strictly increasing"));
                }
                if p.iter().any(|&j| j == 0 || j > self.blocks) {
                    return Err(Error::config("attention.positions", format!("must lie in 1..={}", self.blocks)));
                }
            }
        }
        if let Lambda::Value(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::config("search.lambda", "must be >= 0 or `cv`"));
            }
        }
        if self.lambda == Lambda::CrossValidate && self.candidates.is_empty() {
            return Err(Error::config("search.candidates", "empty candidate set"));
        }
        self.search.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if t.steps_per_epoch == 0 {
            return Err(Error::config("train.steps_per_epoch", "must be at least 1"));
        }
        if t.patch == 0 {
            return Err(Error::config("train.patch", "must be at least 1"));
        }
        if !(t.lr >= 0.0) {
            return Err(Error::config("train.lr", "must be >= 0"));
        }
        if !(t.key_tau > 0.0) {
            return Err(Error::config("train.key_tau", "must be positive"));
        }
        if t.halve_every == 0 {
            return Err(Error::config("train.halve_every", "must be at least 1"));
        }
        Ok(())
    }

    /// Model config for training; fails while positions are still `search`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let attention = match (&self.insert, self.variant) {
            (_, None) => None,
            (Insert::Search, Some(_)) => {
                return Err(Error::config("attention.positions", "positions are `search`; run the search first"));
            }
            (Insert::Positions(p), Some(variant)) if !p.is_empty() => Some(AttentionSpec {
                variant,
                k: self.k,
                positions: p.clone(),
                max_referred: self.max_referred,
            }),
            (Insert::Positions(_), Some(_)) => None,
        };
        Ok(ModelConfig {
            in_channels: self.image_channels,
            channels: self.channels,
            blocks: self.blocks,
            scale: self.task.scale(),
            attention,
            supernet: false,
        })
    }

    pub fn supernet_config(&self) -> ModelConfig {
        crate::search::supernet_config(self.image_channels, self.channels, self.blocks, self.task.scale(), self.k)
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            candidates: self.candidates.clone(),
            search_fraction: 0.2,
            eval_fraction: 0.1,
            train: TrainConfig { epochs: self.cv_train_epochs, ..self.train.clone() },
        }
    }
}
