//! Named parameter storage and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ViTConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, AcrError, Result};
use crate::tensor::Tensor;

const EMBED_INIT_STD: f64 = 0.02;

/// All trainable tensors of a model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams {
    config: ViTConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Handles of one layer's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Handles of all parameters on a tape, plus the flat list in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Option<Var>,
    pub layers: Vec<LayerVars>,
    pub norm_g: Var,
    pub norm_b: Var,
    pub head_w: Var,
    pub head_b: Var,
    all: Vec<Var>,
}

impl ParamVars {
    /// Handles in the same order as [`ViTParams::tensors`].
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

enum Init {
    Xavier,
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d], Init::Xavier),
        ("patch_embed.bias".to_string(), vec![d], Init::Zeros),
        ("cls_token".to_string(), vec![1, d], Init::Normal),
    ];
    if cfg.use_positional_embedding {
        out.push(("pos_embed".to_string(), vec![cfg.tokens(), d], Init::Normal));
    }
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("norm1.gamma"), vec![d], Init::Ones),
            (p("norm1.beta"), vec![d], Init::Zeros),
            (p("attn.qkv.weight"), vec![d, 3 * d], Init::Xavier),
            (p("attn.qkv.bias"), vec![3 * d], Init::Zeros),
            (p("attn.proj.weight"), vec![d, d], Init::Xavier),
            (p("attn.proj.bias"), vec![d], Init::Zeros),
            (p("norm2.gamma"), vec![d], Init::Ones),
            (p("norm2.beta"), vec![d], Init::Zeros),
            (p("mlp.fc1.weight"), vec![d, hidden], Init::Xavier),
            (p("mlp.fc1.bias"), vec![hidden], Init::Zeros),
            (p("mlp.fc2.weight"), vec![hidden, d], Init::Xavier),
            (p("mlp.fc2.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("norm.gamma".to_string(), vec![d], Init::Ones),
        ("norm.beta".to_string(), vec![d], Init::Zeros),
        ("head.weight".to_string(), vec![d, cfg.num_classes], Init::Xavier),
        ("head.bias".to_string(), vec![cfg.num_classes], Init::Zeros),
    ]);
    out
}

impl ViTParams {
    /// Xavier-uniform linear weights, `N(0, 0.02²)` class token and positional
    /// embedding, identity layer norms, zero biases.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBED_INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::Normal => (0..numel).map(|_| normal.sample(&mut rng)).collect(),
                Init::Xavier => {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let u = Uniform::new_inclusive(-limit, limit).expect("valid range");
                    (0..numel).map(|_| u.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(config: ViTConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(AcrError::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, _), (got_name, t)) in expected.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(AcrError::Format(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| AcrError::Contract(format!("no parameter named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<ParamVars> {
        self.bind_with(tape, true)
    }

    /// Places every tensor on `tape` as a constant (inference only).
    pub fn bind_constants(&self, tape: &mut Tape) -> Result<ParamVars> {
        self.bind_with(tape, false)
    }

    /// Binds tensor `idx` as the existing handle `v` and everything else as
    /// constants; used to differentiate with respect to one tensor.
    pub fn bind_one(&self, tape: &mut Tape, idx: usize, v: Var) -> Result<ParamVars> {
        if idx >= self.tensors.len() {
            return Err(AcrError::Contract(format!("parameter index {idx} out of range")));
        }
        let mut all = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            all.push(if i == idx { v } else { tape.constant(t.clone())? });
        }
        ParamVars::from_handles(&self.config, all)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let mut all = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            all.push(tape.leaf(t.clone(), trainable)?);
        }
        ParamVars::from_handles(&self.config, all)
    }
}

impl ParamVars {
    /// Groups handles given in storage order (see [`ViTParams::names`]).
    pub fn from_handles(config: &ViTConfig, all: Vec<Var>) -> Result<Self> {
        let expected = layout(config).len();
        if all.len() != expected {
            return Err(AcrError::Contract(format!(
                "{} parameter handles for a model with {expected} tensors",
                all.len()
            )));
        }
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("count checked");
        let patch_w = next();
        let patch_b = next();
        let cls = next();
        let pos = config.use_positional_embedding.then(&mut next);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerVars {
                ln1_g: next(),
                ln1_b: next(),
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            });
        }
        let (norm_g, norm_b, head_w, head_b) = (next(), next(), next(), next());
        Ok(ParamVars {
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            norm_g,
            norm_b,
            head_w,
            head_b,
            all,
        })
    }
}
