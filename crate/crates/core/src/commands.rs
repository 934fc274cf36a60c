//! The experiment commands behind the CLI: search, train, eval and key
//! visualisation. Every command writes into an output directory and is
//! bit-reproducible for a fixed seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{KeySample, KeyGating, Variant};
use crate::checkpoint::{Checkpoint, Payload};
use crate::config::{ExperimentConfig, Insert, Lambda};
use crate::error::{Error, Result};
use crate::gating::Mode;
use crate::metrics;
use crate::model::{Model, Task};
use crate::params::ParamStore;
use crate::pnm;
use crate::search::{self, Searcher};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use crate::train::{self, Dataset, EpochRecord, Pair, Trainer};

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_psnr,val_ssim";
pub const SEARCH_LOG_HEADER: &str = "step,epoch,tau,cost,weight_loss,arch_loss";
pub const EVAL_HEADER: &str = "image,psnr,ssim";
pub const KEYS_HEADER: &str = "module,layer,key,row,col,weight,beta,m";

const STREAM_VAL: u64 = 7;

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Converts between grey and colour by luminance or replication.
pub fn to_channels(img: Tensor, channels: usize) -> Result<Tensor> {
    let s = img.shape();
    match (s.c, channels) {
        (a, b) if a == b => Ok(img),
        (3, 1) => metrics::luminance(&img),
        (1, 3) => Ok(Tensor::from_fn(Shape::new(s.h, s.w, 3), |r, c, _| img.at(r, c, 0))),
        (a, b) => Err(Error::dim("to_channels", format!("{a} channels to {b}"))),
    }
}

fn required_dir<'a>(dir: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    let d = dir.as_deref().ok_or_else(|| Error::config(field, "not set"))?;
    if !d.is_dir() {
        return Err(Error::config(field, format!("{} is not a directory", d.display())));
    }
    Ok(d)
}

/// Reads every image of `dir` as `channels`-channel tensors, sorted by name.
pub fn load_dir(dir: &Path, channels: usize) -> Result<Vec<(String, Tensor)>> {
    pnm::list_dir(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, to_channels(pnm::read(&p)?, channels)?))
        })
        .collect()
}

fn degraded_copies(cfg: &ExperimentConfig, names: &[String]) -> Result<Option<Vec<Tensor>>> {
    if cfg.task != Task::CarPrecompressed {
        return Ok(None);
    }
    let dir = required_dir(&cfg.degraded_dir, "data.degraded_dir")?;
    names
        .iter()
        .map(|n| to_channels(pnm::read(&dir.join(n))?, cfg.image_channels))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Clean training images (and pre-degraded copies for compressed inputs).
pub fn training_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = required_dir(&cfg.train_dir, "data.train_dir")?;
    let (names, train): (Vec<String>, Vec<Tensor>) = load_dir(dir, cfg.image_channels)?.into_iter().unzip();
    if train.is_empty() {
        return Err(Error::config("data.train_dir", "no PGM/PPM images found"));
    }
    let train_degraded = degraded_copies(cfg, &names)?;
    Ok(Dataset { train, train_degraded, val: Vec::new() })
}

/// Training images plus fixed validation pairs: from `data.val_dir` when
/// set, otherwise a seeded fifth of the training images is held out.
pub fn train_val_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    let all = training_set(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_VAL);
    match &cfg.val_dir {
        Some(_) => {
            let dir = required_dir(&cfg.val_dir, "data.val_dir")?;
            let (names, clean): (Vec<String>, Vec<Tensor>) = load_dir(dir, cfg.image_channels)?.into_iter().unzip();
            let held = Dataset { train: clean, train_degraded: degraded_copies(cfg, &names)?, val: Vec::new() };
            let idx: Vec<usize> = (0..held.train.len()).collect();
            let val = held.pairs(cfg.task, &idx, &mut rng)?;
            Ok(Dataset { val, ..all })
        }
        None => {
            let (t, v) = search::split_indices(all.train.len(), 0.8, cfg.seed);
            let val = all.pairs(cfg.task, &v, &mut rng)?;
            Ok(Dataset { val, ..all.subset(&t) })
        }
    }
}

fn put_meta(ck: &mut Checkpoint, kind: &str, cfg: &ExperimentConfig, model: &Model, epoch: usize) {
    ck.put("kind", Payload::Text(kind.into()));
    ck.put("config", Payload::Text(cfg.serialize()));
    ck.put("model.positions", Payload::U64(model.module_positions().iter().map(|&p| p as u64).collect()));
    ck.put("epoch", Payload::U64(vec![epoch as u64]));
    ck.put_store(&model.store);
}

pub fn trainer_checkpoint(cfg: &ExperimentConfig, t: &Trainer) -> Checkpoint {
    let mut ck = Checkpoint::new();
    put_meta(&mut ck, "train", cfg, &t.model, t.epoch);
    ck.put_adam("adam", &t.adam, &t.model.store);
    ck.put_rng("data", &t.data_rng);
    ck.put_rng("keys", &t.key_rng);
    ck
}

pub fn searcher_checkpoint(cfg: &ExperimentConfig, s: &Searcher) -> Checkpoint {
    let mut ck = Checkpoint::new();
    put_meta(&mut ck, "search", cfg, &s.model, s.epoch);
    if let Some(a) = s.model.arch_state() {
        let n = a.alpha.len();
        ck.put("arch", Payload::F64(Tensor::from_vec(Shape::new(1, 1, n), a.alpha).expect("length matches")));
    }
    ck.put_adam("adam", &s.weight_adam, &s.model.store);
    ck.put_adam("adam.arch", &s.arch_adam, &s.model.store);
    ck.put_rng("data", &s.data_rng);
    ck.put_rng("keys", &s.key_rng);
    ck.put_rng("arch", &s.arch_rng);
    ck
}

fn epoch_of(ck: &Checkpoint) -> Result<usize> {
    let e = ck.u64s("epoch")?;
    e.first().map(|&v| v as usize).ok_or_else(|| Error::State("empty epoch section".into()))
}

/// Rebuilds the model stored in a train or search checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, Model)> {
    let cfg = ExperimentConfig::parse(ck.text("config")?)
        .map_err(|e| Error::State(format!("checkpoint config does not parse: {e}")))?;
    let mc = match ck.text("kind")? {
        "train" => cfg.model_config()?,
        "search" => cfg.supernet_config(),
        k => return Err(Error::State(format!("unknown checkpoint kind `{k}`"))),
    };
    let mut model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(0))?;
    let stored: Vec<usize> = ck.u64s("model.positions")?.iter().map(|&p| p as usize).collect();
    if stored != model.module_positions() {
        return Err(Error::State(format!("checkpoint modules at {stored:?}, config builds {:?}", model.module_positions())));
    }
    ck.restore_store(&mut model.store)?;
    Ok((cfg, model))
}

/// Parameters of a checkpoint as a plain store, for warm starts.
pub fn checkpoint_params(ck: &Checkpoint) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for name in ck.names().filter_map(|n| n.strip_prefix("param/")) {
        let t = ck.tensor(&format!("param/{name}"))?.clone();
        store.add(name, t, crate::params::Group::Weights);
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSummary {
    pub lambda: f64,
    pub cv_scores: Vec<(f64, f64)>,
    pub gates: Vec<f64>,
    pub derived: Vec<usize>,
}

/// Two-stage search. Writes `search_log.csv`, `search.ckpt`, `derived.cfg`
/// (positions filled in, warm start pointing at the checkpoint) and, when
/// lambda is cross-validated, `lambda_cv.csv`.
pub fn cmd_search(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SearchSummary> {
    if cfg.variant != Some(Variant::Acla) {
        return Err(Error::config("attention.variant", "search needs acla"));
    }
    let data = training_set(cfg)?;
    ensure_dir(out_dir)?;
    let mc = cfg.supernet_config();
    let (lambda, cv_scores) = match cfg.lambda {
        Lambda::Value(l) => (l, Vec::new()),
        Lambda::CrossValidate => {
            search::cross_validate_lambda(cfg.task, &mc, &data, &cfg.search, &cfg.cv_config(), cfg.seed)?
        }
    };
    if !cv_scores.is_empty() {
        let mut s = String::from("lambda,val_psnr\n");
        for (l, p) in &cv_scores {
            let _ = writeln!(s, "{l},{p}");
        }
        write_text(&out_dir.join("lambda_cv.csv"), &s)?;
    }
    let scfg = search::SearchConfig { lambda, ..cfg.search.clone() };
    let supernet = search::build_supernet(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let (tr, va) = search::search_splits(&data, scfg.train_fraction, cfg.seed);
    let mut searcher = Searcher::new(supernet, cfg.seed)?;
    let outcome = searcher.run(cfg.task, &tr, &va, &scfg, |_| Ok(()))?;

    let blocks = cfg.blocks;
    let mut log = String::from(SEARCH_LOG_HEADER);
    for j in 1..=blocks {
        let _ = write!(log, ",s{j}");
    }
    log.push('\n');
    for r in &outcome.trace {
        let _ = write!(log, "{},{},{},{},{},{}", r.step, r.epoch, r.tau, r.cost, r.weight_loss, r.arch_loss);
        for g in &r.gates {
            let _ = write!(log, ",{g}");
        }
        log.push('\n');
    }
    write_text(&out_dir.join("search_log.csv"), &log)?;

    let echo = ExperimentConfig { lambda: Lambda::Value(lambda), ..cfg.clone() };
    let ckpt_path = out_dir.join("search.ckpt");
    searcher_checkpoint(&echo, &searcher).save(&ckpt_path)?;

    let mut derived = echo.clone();
    if outcome.derived.is_empty() {
        derived.variant = None;
        derived.insert = Insert::Positions(Vec::new());
    } else {
        derived.insert = Insert::Positions(outcome.derived.clone());
        derived.max_referred = derived.max_referred.max(blocks);
    }
    derived.warm_start = Some(ckpt_path);
    write_text(&out_dir.join("derived.cfg"), &derived.serialize())?;

    let tau = scfg.tau_end;
    Ok(SearchSummary { lambda, cv_scores, gates: outcome.arch.gates(tau)?, derived: outcome.derived })
}

fn metrics_row(r: &EpochRecord) -> String {
    format!("{},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_psnr, r.val_ssim)
}

/// Existing metrics rows up to and including `epoch`.
fn metrics_prefix(path: &Path, epoch: usize) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    let Ok(text) = std::fs::read_to_string(path) else { return out };
    for line in text.lines().skip(1) {
        match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
            Some(e) if e <= epoch => {
                out.push_str(line);
                out.push('\n');
            }
            _ => {}
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
    /// Epoch the run started from (0 unless resumed).
    pub start_epoch: usize,
}

/// Trains (or resumes) a model, writing `metrics.csv` and `model.ckpt`
/// after every epoch.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let mc = cfg.model_config()?;
    let data = train_val_set(cfg)?;
    ensure_dir(out_dir)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.text("kind")? != "train" {
                return Err(Error::State(format!("{} is not a training checkpoint", path.display())));
            }
            let mut model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            ck.restore_store(&mut model.store)?;
            let mut t = Trainer::new(model, cfg.seed);
            ck.restore_adam("adam", &mut t.adam, &t.model.store)?;
            t.data_rng = ck.rng("data")?;
            t.key_rng = ck.rng("keys")?;
            t.epoch = epoch_of(&ck)?;
            t
        }
        None => {
            let mut model = Model::new(mc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            if let Some(ws) = &cfg.warm_start {
                let src = checkpoint_params(&Checkpoint::load(ws)?)?;
                model.store.warm_start_from(&src);
            }
            Trainer::new(model, cfg.seed)
        }
    };
    let start_epoch = trainer.epoch;
    let metrics_path = out_dir.join("metrics.csv");
    let ckpt_path = out_dir.join("model.ckpt");
    let mut metrics = metrics_prefix(&metrics_path, start_epoch);
    write_text(&metrics_path, &metrics)?;
    let records = trainer.run(cfg.task, &data, &cfg.train, |t, rec| {
        metrics.push_str(&metrics_row(rec));
        write_text(&metrics_path, &metrics)?;
        trainer_checkpoint(cfg, t).save(&ckpt_path)
    })?;
    trainer_checkpoint(cfg, &trainer).save(&ckpt_path)?;
    Ok(TrainSummary { records, checkpoint: ckpt_path, start_epoch })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub skipped: Vec<String>,
}

/// Mean luminance PSNR/SSIM over a directory of clean targets. Inputs come
/// from `input_dir` (same file names) or are generated by degrading the
/// targets. Without a checkpoint the inputs are scored directly.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data_dir: &Path,
    input_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalSummary> {
    let loaded = match checkpoint {
        Some(p) => Some(model_from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let (task, channels) = match &loaded {
        Some((c, _)) => (c.task, c.image_channels),
        None => (cfg.task, cfg.image_channels),
    };
    if !data_dir.is_dir() {
        return Err(Error::config("data_dir", format!("{} is not a directory", data_dir.display())));
    }
    if task == Task::CarPrecompressed && input_dir.is_none() {
        return Err(Error::config("input_dir", "compressed inputs must be supplied"));
    }
    let tau = cfg.search.tau_end;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_VAL);
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for path in pnm::list_dir(data_dir)? {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let scored = (|| -> Result<(f64, f64)> {
            let target = to_channels(pnm::read(&path)?, channels)?;
            let input = match input_dir {
                Some(d) => to_channels(pnm::read(&d.join(&name))?, channels)?,
                None => train::degrade(task, &target, &mut rng)?,
            };
            let output = match &loaded {
                Some((_, m)) => m.infer(&input, tau, &mut rng)?.map(|v| v.clamp(0.0, 1.0)),
                None => input,
            };
            metrics::luma_metrics(&output, &target)
        })();
        match scored {
            Ok((p, s)) => rows.push((name, p, s)),
            Err(e) => {
                eprintln!("warning: skipping {name}: {e}");
                skipped.push(name);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Format { path: data_dir.to_path_buf(), detail: "no image could be evaluated".into() });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.2).sum::<f64>() / n;
    ensure_dir(out_dir)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    for (name, p, s) in &rows {
        let _ = writeln!(csv, "{},{p},{s}", csv_field(name));
    }
    let _ = writeln!(csv, "mean,{mean_psnr},{mean_ssim}");
    write_text(&out_dir.join("eval.csv"), &csv)?;
    Ok(EvalSummary { rows, mean_psnr, mean_ssim, skipped })
}

/// Pixel scale of the visualisation images.
pub const ZOOM: usize = 8;

/// A drawn key circle.
#[derive(Clone, Debug, PartialEq)]
pub struct Marker {
    pub module: usize,
    pub layer: usize,
    pub key: usize,
    /// Centre in image pixels.
    pub center: (i64, i64),
    pub radius: i64,
    /// Red level, proportional to the weight.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyRow {
    pub module: usize,
    pub layer: usize,
    pub key: usize,
    pub row: f64,
    pub col: f64,
    pub weight: f64,
    pub beta: Option<f64>,
    pub m: f64,
}

#[derive(Clone, Debug)]
pub struct Visualization {
    pub rows: Vec<KeyRow>,
    pub markers: Vec<Marker>,
    /// One image per (module, layer), in row order.
    pub images: Vec<((usize, usize), PathBuf)>,
}

fn put(img: &mut Tensor, r: i64, c: i64, rgb: [f64; 3]) {
    let s = img.shape();
    if r >= 0 && c >= 0 && (r as usize) < s.h && (c as usize) < s.w {
        img.pixel_mut(r as usize, c as usize).copy_from_slice(&rgb);
    }
}

fn draw_circle(img: &mut Tensor, center: (i64, i64), radius: i64, rgb: [f64; 3]) {
    let steps = (radius * 8).max(16);
    for i in 0..steps {
        let a = std::f64::consts::TAU * i as f64 / steps as f64;
        let r = center.0 + (radius as f64 * a.sin()).round() as i64;
        let c = center.1 + (radius as f64 * a.cos()).round() as i64;
        put(img, r, c, rgb);
    }
}

fn draw_cross(img: &mut Tensor, center: (i64, i64), arm: i64) {
    for d in -arm..=arm {
        put(img, center.0 + d, center.1, [0.0, 1.0, 0.0]);
        put(img, center.0, center.1 + d, [0.0, 1.0, 0.0]);
    }
}

fn to_pixel(v: f64) -> i64 {
    (v * ZOOM as f64 + ZOOM as f64 / 2.0).round() as i64
}

/// Marks the keys that survive the mask for one query, per module and
/// referred layer, and writes `keys.csv` plus `keys_m{module}_l{layer}.ppm`.
pub fn cmd_visualize_keys(
    checkpoint: &Path,
    image: &Path,
    query: (usize, usize),
    force_on: bool,
    out_dir: &Path,
) -> Result<Visualization> {
    let (cfg, model) = model_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    if !model.modules.iter().any(|m| m.params.variant.is_sampled()) {
        return Err(Error::config("attention.variant", "model has no CLA or ACLA module"));
    }
    let input = to_channels(pnm::read(image)?, cfg.image_channels)?;
    let s = input.shape();
    if query.0 >= s.h || query.1 >= s.w {
        return Err(Error::config("query", format!("({}, {}) outside the {}x{} image", query.0, query.1, s.h, s.w)));
    }
    let tau = cfg.search.tau_end;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| false);
    let x = tape.constant(input.clone());
    let arch = model.arch_gates(&mut tape, &p, tau, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keys = KeyGating { mode: Mode::Infer, tau, rng: &mut rng, force_on };
    let run = model.forward(&mut tape, &p, x, arch.as_ref(), &mut keys)?;

    let mut rows = Vec::new();
    for (m, mr) in model.modules.iter().zip(&run.modules) {
        if !m.params.variant.is_sampled() {
            continue;
        }
        let maps: Vec<&Tensor> = mr.refs.iter().map(|&v| tape.value(v)).collect();
        let gates: Vec<f64> = match &arch {
            Some(a) => mr.referred.iter().map(|&l| tape.value(a.gates[l - 1]).data()[0]).collect(),
            None => vec![1.0; mr.referred.len()],
        };
        let samples = m.params.trace(&tape, &mr.attended, &mr.referred, &maps, &gates)?;
        rows.extend(samples.iter().filter(|k: &&KeySample| k.query == query && k.hard == 1.0).map(|k| KeyRow {
            module: mr.position,
            layer: k.layer,
            key: k.key,
            row: k.position.row,
            col: k.position.col,
            weight: k.weight,
            beta: k.beta,
            m: k.hard,
        }));
    }

    ensure_dir(out_dir)?;
    let mut csv = format!("{KEYS_HEADER}\n");
    for r in &rows {
        let beta = r.beta.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{},{},{},{}", r.module, r.layer, r.key, r.row, r.col, r.weight, beta, r.m);
    }
    write_text(&out_dir.join("keys.csv"), &csv)?;

    let grey = metrics::luminance(&input)?;
    let base = Tensor::from_fn(Shape::new(s.h * ZOOM, s.w * ZOOM, 3), |r, c, _| 0.5 * grey.at(r / ZOOM, c / ZOOM, 0));
    let max_w = rows.iter().map(|r| r.weight).fold(0.0, f64::max);
    let mut markers = Vec::with_capacity(rows.len());
    let mut images = Vec::new();
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for (mr, m) in run.modules.iter().zip(&model.modules) {
        if m.params.variant.is_sampled() {
            groups.extend(mr.referred.iter().map(|&l| (mr.position, l)));
        }
    }
    for (module, layer) in groups {
        let mut img = base.clone();
        for r in rows.iter().filter(|r| r.module == module && r.layer == layer) {
            let intensity = if max_w > 0.0 { r.weight / max_w } else { 0.0 };
            let marker = Marker {
                module,
                layer,
                key: r.key,
                center: (to_pixel(r.row), to_pixel(r.col)),
                radius: ZOOM as i64 / 2,
                intensity,
            };
            draw_circle(&mut img, marker.center, marker.radius, [intensity, 0.0, 0.0]);
            markers.push(marker);
        }
        draw_cross(&mut img, (to_pixel(query.0 as f64), to_pixel(query.1 as f64)), ZOOM as i64 / 2);
        let path = out_dir.join(format!("keys_m{module}_l{layer}.ppm"));
        pnm::write(&path, &img)?;
        images.push(((module, layer), path));
    }
    Ok(Visualization { rows, markers, images })
}

/// Writes `count` synthetic `size x size` images into `dir` as
/// `img_000.ppm` (or `.pgm` for grey).
pub fn make_synthetic(dir: &Path, count: usize, size: usize, channels: usize, seed: u64) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    crate::synth::images(count, size, size, channels, &mut rng)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("img_{i:03}.{ext}"));
            pnm::write(&p, img)?;
            Ok(p)
        })
        .collect()
}

/// Whole-image pairs for one directory of clean images.
pub fn pairs_from(task: Task, clean: &[Tensor], seed: u64) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_VAL);
    let d = Dataset { train: clean.to_vec(), ..Dataset::default() };
    let idx: Vec<usize> = (0..clean.len()).collect();
    d.pairs(task, &idx, &mut rng)
}
