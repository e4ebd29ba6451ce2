//! Mini vision transformer with a class token.
//!
//! Shapes: an image is `[C, H, W]`; the token sequence is `[(n+1) × d]` with
//! the class token in row 0 followed by the patches in row-major grid order.
//! Each patch is flattened channel-major, then row, then column.
//!
//! Every layer records its head-averaged post-softmax attention matrix. When
//! probes are requested, a zero-valued leaf is added to every head's attention
//! of a layer; its gradient after back-propagating a logit is the layer's
//! attention adjoint (the sum of the per-head adjoints).

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ParamVars, ViTParams};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, AcrError, Result};
use crate::grid::{grid_resize_matrix, GridShape};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub grid: GridShape,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub use_positional_embedding: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            grid: GridShape::new(8, 8).expect("static grid"),
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 2,
            num_classes: 5,
            use_positional_embedding: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AcrError::Config(m));
        if self.patch_size == 0 || self.channels == 0 || self.num_classes == 0 {
            return bad("patch_size, channels and num_classes must be positive".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid.n() + 1
    }

    /// Image height and width the configured grid expects.
    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.h() * self.patch_size, self.grid.w() * self.patch_size)
    }

    /// Patch grid of an image, if its size is a multiple of the patch size.
    pub fn grid_of(&self, image: &Tensor) -> Result<GridShape> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.channels {
            return Err(dim_err!(
                "expected an image of shape [{}, H, W], got {s:?}",
                self.channels
            ));
        }
        let p = self.patch_size;
        if !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
            return Err(dim_err!("image {}×{} is not divisible into {p}×{p} patches", s[1], s[2]));
        }
        GridShape::new(s[1] / p, s[2] / p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Add zero-valued probe leaves to every head's attention so
    /// [`attention_adjoints`] can read the attention gradients.
    pub attention_probes: bool,
    /// Accept images whose patch grid differs from the configured one by
    /// bilinearly interpolating the positional embedding. Without this such
    /// images are rejected.
    pub interpolate_positions: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    /// Head-averaged attention, `(n+1)×(n+1)`.
    pub matrix: Var,
    probe: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    /// `1 × num_classes` pre-sigmoid scores.
    pub logits: Var,
    pub attentions: Vec<AttentionRecord>,
    /// Patch grid of the input.
    pub grid: GridShape,
}

/// Rearranges `[C, H, W]` into `[n × C·p·p]` patch rows.
pub fn patchify(image: &Tensor, config: &ViTConfig) -> Result<Tensor> {
    let g = config.grid_of(image)?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let p = config.patch_size;
    let data = image.data();
    let mut out = Vec::with_capacity(g.n() * config.patch_dim());
    for gi in 0..g.h() {
        for gj in 0..g.w() {
            for ch in 0..c {
                for di in 0..p {
                    let row = ch * h * w + (gi * p + di) * w + gj * p;
                    out.extend_from_slice(&data[row..row + p]);
                }
            }
        }
    }
    Tensor::matrix(g.n(), config.patch_dim(), out)
}

impl ViTParams {
    /// Records the forward pass of one image on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        image: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ForwardResult> {
        let cfg = *self.config();
        let grid = cfg.grid_of(image)?;
        if grid != cfg.grid && !opts.interpolate_positions {
            return Err(dim_err!(
                "image grid {grid} differs from the configured grid {}",
                cfg.grid
            ));
        }
        let patches = tape.constant(patchify(image, &cfg)?)?;
        let embedded = tape.matmul(patches, vars.patch_w)?;
        let embedded = tape.add_bias(embedded, vars.patch_b)?;
        let mut x = tape.concat_rows(vars.cls, embedded)?;

        if let Some(pos) = vars.pos {
            let pos = if grid == cfg.grid {
                pos
            } else {
                let m = grid_resize_matrix(cfg.grid, grid)?;
                let mut e = Tensor::zeros(&[grid.n() + 1, cfg.grid.n() + 1]);
                e.set2(0, 0, 1.0);
                for r in 0..grid.n() {
                    for c in 0..cfg.grid.n() {
                        e.set2(r + 1, c + 1, m.get(r, c));
                    }
                }
                let e = tape.constant(e)?;
                tape.matmul(e, pos)?
            };
            x = tape.add(x, pos)?;
        }

        let tokens = grid.n() + 1;
        let (d, dh) = (cfg.embed_dim, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut attentions = Vec::with_capacity(cfg.num_layers);
        for (li, layer) in vars.layers.iter().enumerate() {
            let h = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)?;
            let qkv = tape.matmul(h, layer.qkv_w)?;
            let qkv = tape.add_bias(qkv, layer.qkv_b)?;
            let probe = if opts.attention_probes {
                Some(tape.param(Tensor::zeros(&[tokens, tokens]))?)
            } else {
                None
            };
            let mut heads = Vec::with_capacity(cfg.num_heads);
            let mut attn_sum: Option<Var> = None;
            for hi in 0..cfg.num_heads {
                let q = tape.slice2d(qkv, 0..tokens, hi * dh..(hi + 1) * dh)?;
                let k = tape.slice2d(qkv, 0..tokens, d + hi * dh..d + (hi + 1) * dh)?;
                let v = tape.slice2d(qkv, 0..tokens, 2 * d + hi * dh..2 * d + (hi + 1) * dh)?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let mut a = tape.softmax_rows(scores)?;
                if let Some(z) = probe {
                    a = tape.add(a, z)?;
                }
                attn_sum = Some(match attn_sum {
                    None => a,
                    Some(s) => tape.add(s, a)?,
                });
                heads.push(tape.matmul(a, v)?);
            }
            let attn_sum = attn_sum.expect("num_heads >= 1");
            let matrix = if cfg.num_heads == 1 {
                attn_sum
            } else {
                tape.scale(attn_sum, 1.0 / cfg.num_heads as f64)?
            };
            attentions.push(AttentionRecord {
                layer: li,
                matrix,
                probe,
            });

            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let proj = tape.matmul(merged, layer.proj_w)?;
            let proj = tape.add_bias(proj, layer.proj_b)?;
            x = tape.add(x, proj)?;

            let h = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)?;
            let h = tape.matmul(h, layer.fc1_w)?;
            let h = tape.add_bias(h, layer.fc1_b)?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, layer.fc2_w)?;
            let h = tape.add_bias(h, layer.fc2_b)?;
            x = tape.add(x, h)?;
        }

        let cls = tape.slice2d(x, 0..1, 0..d)?;
        let cls = tape.layer_norm(cls, vars.norm_g, vars.norm_b, LAYER_NORM_EPS)?;
        let logits = tape.matmul(cls, vars.head_w)?;
        let logits = tape.add_bias(logits, vars.head_b)?;
        Ok(ForwardResult {
            logits,
            attentions,
            grid,
        })
    }

    /// Forward pass on a scratch tape; returns logits and attention values.
    pub fn infer(&self, image: &Tensor, opts: ForwardOptions) -> Result<Inference> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape)?;
        let result = self.forward(&mut tape, &vars, image, opts)?;
        Ok(Inference {
            logits: tape.value(result.logits).data().to_vec(),
            attentions: attention_values(&tape, &result),
            grid: result.grid,
        })
    }

    /// Logits, attentions and per-class attention adjoints of one image.
    ///
    /// `classes` selects which logits to back-propagate; the adjoints are
    /// returned in the same order, one `Vec` (per layer) per class.
    pub fn localize(&self, image: &Tensor, classes: &[usize]) -> Result<Localized> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape)?;
        let opts = ForwardOptions {
            attention_probes: true,
            interpolate_positions: false,
        };
        let result = self.forward(&mut tape, &vars, image, opts)?;
        let k = self.config().num_classes;
        let mut scores = Vec::with_capacity(classes.len());
        for &c in classes {
            if c >= k {
                return Err(AcrError::Contract(format!("class {c} out of range for {k} classes")));
            }
            let s = tape.slice2d(result.logits, 0..1, c..c + 1)?;
            scores.push(tape.reshape(s, &[])?);
        }
        let mut adjoints = Vec::with_capacity(classes.len());
        for s in scores {
            tape.zero_grads();
            tape.backward(s)?;
            adjoints.push(attention_adjoints(&tape, &result)?);
        }
        Ok(Localized {
            inference: Inference {
                logits: tape.value(result.logits).data().to_vec(),
                attentions: attention_values(&tape, &result),
                grid: result.grid,
            },
            adjoints,
        })
    }
}

/// Values of a forward pass, detached from any tape.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Vec<f64>,
    /// Head-averaged attention per layer.
    pub attentions: Vec<Tensor>,
    pub grid: GridShape,
}

#[derive(Clone, Debug)]
pub struct Localized {
    pub inference: Inference,
    /// `adjoints[k][layer]`: gradient of the k-th requested logit with
    /// respect to that layer's attention.
    pub adjoints: Vec<Vec<Tensor>>,
}

pub fn attention_values(tape: &Tape, result: &ForwardResult) -> Vec<Tensor> {
    result
        .attentions
        .iter()
        .map(|r| tape.value(r.matrix).clone())
        .collect()
}

/// Gradient of the last back-propagated output with respect to every layer's
/// attention. Needs a forward pass run with probes and a completed backward.
pub fn attention_adjoints(tape: &Tape, result: &ForwardResult) -> Result<Vec<Tensor>> {
    if !tape.has_run_backward() {
        return Err(AcrError::State("attention adjoints need a completed backward".into()));
    }
    result
        .attentions
        .iter()
        .map(|r| match r.probe {
            Some(p) => tape.grad(p),
            None => Err(AcrError::State(
                "forward pass was recorded without attention probes".into(),
            )),
        })
        .collect()
}

#[cfg(test)]
mod tests;
