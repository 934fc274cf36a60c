//! EDSR-style residual backbone with attention modules inserted after
//! chosen residual blocks.
//!
//! The module after block `p` sees the trunk feature at `p` as its query
//! and refers to the bank of trunk features at every module position up
//! to and including `p` (capped at `max_referred`, most recent first kept).
//! A supernet has a module after every block, one architecture logit per
//! position, and scales each referred layer's contribution by its gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, Attended, KeyGating, Variant};
use crate::error::{Error, Result};
use crate::gating::{self, ArchState};
use crate::params::{Bound, Conv3, Group, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Restoration task; decides the degradation and the tail.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Task {
    Sr(usize),
    /// AWGN with `sigma` on the 0..255 scale.
    Denoise(f64),
    Demosaic,
    /// Degraded inputs supplied as pre-decoded images.
    CarPrecompressed,
}

impl Task {
    pub fn name(&self) -> String {
        match self {
            Task::Sr(s) => format!("sr{s}"),
            Task::Denoise(_) => "denoise".into(),
            Task::Demosaic => "demosaic".into(),
            Task::CarPrecompressed => "car-precompressed".into(),
        }
    }

    pub fn scale(&self) -> usize {
        match self {
            Task::Sr(s) => *s,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub variant: Variant,
    pub k: usize,
    /// 1-based block indices, strictly increasing.
    pub positions: Vec<usize>,
    pub max_referred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub scale: usize,
    pub attention: Option<AttentionSpec>,
    /// Adds an architecture logit per position and gates referred layers.
    pub supernet: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("data.channels", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("backbone.channels", "must be at least 1"));
        }
        if self.blocks == 0 {
            return Err(Error::config("backbone.blocks", "must be at least 1"));
        }
        if !(1..=4).contains(&self.scale) {
            return Err(Error::config("task", format!("unsupported scale {}", self.scale)));
        }
        if let Some(a) = &self.attention {
            if a.variant.is_sampled() && a.k == 0 {
                return Err(Error::config("attention.k", "must be at least 1"));
            }
            if a.max_referred == 0 {
                return Err(Error::config("attention.max_referred", "must be at least 1"));
            }
            if a.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config("attention.positions", "must be strictly increasing"));
            }
            if a.positions.iter().any(|&p| p == 0 || p > self.blocks) {
                return Err(Error::config(
                    "attention.positions",
                    format!("positions must lie in 1..={}", self.blocks),
                ));
            }
        }
        if self.supernet {
            match &self.attention {
                Some(a) if a.variant == Variant::Acla && a.positions.len() == self.blocks => {}
                _ => return Err(Error::config("attention.positions", "supernet needs ACLA at every block")),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv3,
    pub conv2: Conv3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inserted {
    /// 1-based block index.
    pub position: usize,
    pub params: AttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub head: Conv3,
    pub blocks: Vec<ResBlock>,
    pub tail: Conv3,
    pub modules: Vec<Inserted>,
    /// Architecture logits `1 x 1 x L`, present in a supernet.
    pub alpha: Option<ParamId>,
}

/// Tape handles of one module's forward pass.
#[derive(Clone, Debug)]
pub struct ModuleRun {
    pub position: usize,
    /// 1-based block indices of the referred layers, shallowest first.
    pub referred: Vec<usize>,
    pub refs: Vec<Var>,
    pub attended: Attended,
}

#[derive(Clone, Debug)]
pub struct ForwardRun {
    pub output: Var,
    pub modules: Vec<ModuleRun>,
}

/// Per-module, per-referred-layer gate handles of a supernet step.
#[derive(Clone, Debug)]
pub struct ArchGates {
    /// `s_hat` per candidate position, scalar nodes.
    pub gates: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut attn_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut store = ParamStore::new();
        let (cin, c) = (config.in_channels, config.channels);
        let head = Conv3::new(&mut store, "head", cin, c, Init::Scaled(1.0), rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut modules = Vec::new();
        for b in 1..=config.blocks {
            let conv1 = Conv3::new(&mut store, &format!("block{b}.conv1"), c, c, Init::Scaled(2f64.sqrt()), rng);
            let conv2 = Conv3::new(&mut store, &format!("block{b}.conv2"), c, c, Init::Scaled(0.1), rng);
            blocks.push(ResBlock { conv1, conv2 });
            if let Some(a) = &config.attention {
                if let Some(idx) = a.positions.iter().position(|&p| p == b) {
                    let referred = match a.variant {
                        Variant::Nl => 1,
                        _ => (idx + 1).min(a.max_referred),
                    };
                    let params =
                        AttentionParams::new(&mut store, &format!("attn{b}"), a.variant, c, a.k, referred, &mut attn_rng)?;
                    modules.push(Inserted { position: b, params });
                }
            }
        }
        let tail = Conv3::new(&mut store, "tail", c, cin * config.scale * config.scale, Init::Scaled(0.1), rng);
        let alpha = config
            .supernet
            .then(|| store.add("arch.alpha", Tensor::zeros(Shape::new(1, 1, config.blocks)), Group::Arch));
        Ok(Model { config, store, head, blocks, tail, modules, alpha })
    }

    pub fn module_positions(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.position).collect()
    }

    pub fn arch_state(&self) -> Option<ArchState> {
        self.alpha.map(|id| ArchState { alpha: self.store.get(id).data().to_vec() })
    }

    pub fn set_arch_state(&mut self, arch: &ArchState) -> Result<()> {
        let id = self.alpha.ok_or_else(|| Error::State("model has no architecture parameters".into()))?;
        let t = self.store.get_mut(id);
        if t.len() != arch.alpha.len() {
            return Err(Error::State(format!("{} logits for {} positions", arch.alpha.len(), t.len())));
        }
        t.data_mut().copy_from_slice(&arch.alpha);
        Ok(())
    }

    /// Relaxed gates `s_hat` from the bound logits; `noise` holds `e1 - e2`
    /// per position or is `None` for noise-free gates.
    pub fn arch_gates(&self, tape: &mut Tape, p: &Bound, tau: f64, noise: Option<&Tensor>) -> Result<Option<ArchGates>> {
        let Some(id) = self.alpha else { return Ok(None) };
        let s = gating::relaxed_on_tape(tape, p[id], tau, noise)?;
        let gates = (0..self.config.blocks)
            .map(|j| tape.slice_channels(s, j, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(ArchGates { gates }))
    }

    /// Forward pass of one image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        arch: Option<&ArchGates>,
        keys: &mut KeyGating<'_>,
    ) -> Result<ForwardRun> {
        let xs = tape.shape(x);
        if xs.c != self.config.in_channels {
            return Err(Error::dim("forward", format!("input {xs}, model expects {} channels", self.config.in_channels)));
        }
        let head = self.head.apply(tape, p, x)?;
        let mut feat = head;
        let mut bank: Vec<(usize, Var)> = Vec::new();
        let mut runs = Vec::with_capacity(self.modules.len());
        let mut next = self.modules.iter().peekable();
        for (i, blk) in self.blocks.iter().enumerate() {
            let t = blk.conv1.apply(tape, p, feat)?;
            let t = tape.relu(t);
            let t = blk.conv2.apply(tape, p, t)?;
            feat = tape.add(feat, t)?;
            let pos = i + 1;
            let Some(m) = next.next_if(|m| m.position == pos) else { continue };
            bank.push((pos, feat));
            let take = m.params.referred;
            let start = bank.len().saturating_sub(take);
            let (referred, refs): (Vec<usize>, Vec<Var>) = bank[start..].iter().copied().unzip();
            let layer_gates: Option<Vec<Var>> = arch.map(|a| referred.iter().map(|&l| a.gates[l - 1]).collect());
            let attended = m.params.attend(tape, p, feat, &refs, layer_gates.as_deref(), Some(&mut *keys))?;
            feat = m.params.block(tape, p, feat, attended.y)?;
            runs.push(ModuleRun { position: pos, referred, refs, attended });
        }
        let out = self.tail.apply(tape, p, feat)?;
        let output = if self.config.scale > 1 {
            tape.pixel_shuffle(out, self.config.scale)?
        } else {
            tape.add(out, x)?
        };
        Ok(ForwardRun { output, modules: runs })
    }

    /// Inference on one image with noise-free masks.
    pub fn infer(&self, input: &Tensor, tau: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let x = tape.constant(input.clone());
        let arch = self.arch_gates(&mut tape, &p, tau, None)?;
        let mut keys = KeyGating { mode: gating::Mode::Infer, tau, rng, force_on: false };
        let run = self.forward(&mut tape, &p, x, arch.as_ref(), &mut keys)?;
        Ok(tape.value(run.output).clone())
    }

    /// Backbone convolution FLOPs on an `h x w` input.
    pub fn backbone_flops(&self, h: usize, w: usize) -> f64 {
        let n = h * w;
        let mut total = self.head.flops(&self.store, n) + self.tail.flops(&self.store, n);
        for b in &self.blocks {
            total += b.conv1.flops(&self.store, n) + b.conv2.flops(&self.store, n);
        }
        total
    }
}
