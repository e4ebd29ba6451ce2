use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check_coords;
use crate::grid::{invert_attention_fast, token_permutation, SpatialTransform};

fn tiny_config() -> ViTConfig {
    ViTConfig {
        patch_size: 2,
        grid: GridShape::new(2, 2).unwrap(),
        channels: 1,
        embed_dim: 4,
        num_layers: 1,
        num_heads: 1,
        mlp_ratio: 2,
        num_classes: 3,
        use_positional_embedding: true,
    }
}

fn random_image(cfg: &ViTConfig, g: GridShape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.patch_size;
    Tensor::rand_uniform(&[cfg.channels, g.h() * p, g.w() * p], 0.0, 1.0, &mut rng)
}

/// Image whose pixels are constant inside each patch, from per-patch colors
/// `colors[token][channel]`.
fn patch_constant_image(cfg: &ViTConfig, g: GridShape, colors: &[Vec<f64>]) -> Tensor {
    let p = cfg.patch_size;
    let (h, w) = (g.h() * p, g.w() * p);
    let mut data = vec![0.0; cfg.channels * h * w];
    for c in 0..cfg.channels {
        for y in 0..h {
            for x in 0..w {
                data[c * h * w + y * w + x] = colors[g.index(y / p, x / p)][c];
            }
        }
    }
    Tensor::new(vec![cfg.channels, h, w], data).unwrap()
}

fn rows_are_stochastic(a: &Tensor) -> bool {
    let n = a.dims2().unwrap().0;
    (0..n).all(|r| {
        let row = a.row(r);
        (row.iter().sum::<f64>() - 1.0).abs() < 1e-9 && row.iter().all(|&v| (0.0..=1.0).contains(&v))
    })
}

#[test]
fn single_layer_single_head_rows_sum_to_one() {
    let cfg = ViTConfig {
        embed_dim: 4,
        ..tiny_config()
    };
    let params = ViTParams::init(cfg, 3).unwrap();
    let out = params.infer(&random_image(&cfg, cfg.grid, 1), ForwardOptions::default()).unwrap();
    assert_eq!(out.attentions.len(), 1);
    assert_eq!(out.attentions[0].shape(), &[5, 5]);
    assert!(rows_are_stochastic(&out.attentions[0]));
    assert_eq!(out.logits.len(), 3);
}

#[test]
fn toy_config_attention_rows_sum_to_one() {
    let cfg = ViTConfig::default();
    let params = ViTParams::init(cfg, 11).unwrap();
    let out = params.infer(&random_image(&cfg, cfg.grid, 2), ForwardOptions::default()).unwrap();
    assert_eq!(out.attentions.len(), 4);
    for a in &out.attentions {
        assert_eq!(a.shape(), &[65, 65]);
        assert!(rows_are_stochastic(a));
    }
}

#[test]
fn patchify_orders_tokens_row_major() {
    let cfg = ViTConfig {
        grid: GridShape::new(2, 3).unwrap(),
        ..tiny_config()
    };
    let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
    let img = Tensor::new(vec![1, 4, 6], data).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.shape(), &[6, 4]);
    assert_eq!(p.row(0), &[0.0, 1.0, 6.0, 7.0]);
    assert_eq!(p.row(1), &[2.0, 3.0, 8.0, 9.0]);
    assert_eq!(p.row(3), &[12.0, 13.0, 18.0, 19.0]);
}

#[test]
fn rejects_bad_image_sizes() {
    let cfg = tiny_config();
    let params = ViTParams::init(cfg, 0).unwrap();
    let odd = Tensor::zeros(&[1, 5, 4]);
    assert!(matches!(
        params.infer(&odd, ForwardOptions::default()),
        Err(AcrError::Dimension(_))
    ));
    let other_grid = Tensor::zeros(&[1, 6, 4]);
    assert!(matches!(
        params.infer(&other_grid, ForwardOptions::default()),
        Err(AcrError::Dimension(_))
    ));
    let opts = ForwardOptions {
        interpolate_positions: true,
        ..Default::default()
    };
    let out = params.infer(&other_grid, opts).unwrap();
    assert_eq!(out.attentions[0].shape(), &[7, 7]);
}

#[test]
fn config_validation() {
    let mut cfg = ViTConfig::default();
    cfg.num_heads = 3;
    assert!(matches!(cfg.validate(), Err(AcrError::Config(_))));
    cfg.num_heads = 2;
    cfg.num_layers = 0;
    assert!(ViTParams::init(cfg, 0).is_err());
}

fn check_equivariance(cfg: ViTConfig, trials: u64) {
    let params = ViTParams::init(cfg, 5).unwrap();
    let opts = ForwardOptions {
        interpolate_positions: true,
        ..Default::default()
    };
    let g = cfg.grid;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let colors: Vec<Vec<f64>> = (0..g.n())
            .map(|_| (0..cfg.channels).map(|_| rng.random::<f64>()).collect())
            .collect();
        let base = params.infer(&patch_constant_image(&cfg, g, &colors), opts).unwrap();
        for t in SpatialTransform::PERMUTATIONS {
            let perm = token_permutation(t, g).unwrap();
            let view_colors: Vec<Vec<f64>> =
                perm.sigma().iter().map(|&s| colors[s].clone()).collect();
            let view_img = patch_constant_image(&cfg, perm.target_grid(), &view_colors);
            let view = params.infer(&view_img, opts).unwrap();
            for (a, a_prime) in base.attentions.iter().zip(&view.attentions) {
                let back = invert_attention_fast(a_prime, t, g).unwrap();
                let err = back.max_abs_diff(a).unwrap();
                assert!(err <= 1e-9, "{t} seed {seed}: {err}");
            }
            for (l, l2) in base.logits.iter().zip(&view.logits) {
                assert!((l - l2).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn equivariance_without_positions_on_toy_grid() {
    let cfg = ViTConfig {
        use_positional_embedding: false,
        ..ViTConfig::default()
    };
    check_equivariance(cfg, 2);
}

#[test]
fn equivariance_without_positions_on_rectangular_grid() {
    let cfg = ViTConfig {
        grid: GridShape::new(2, 3).unwrap(),
        channels: 2,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        use_positional_embedding: false,
        ..tiny_config()
    };
    check_equivariance(cfg, 3);
}

fn logit_sum_check(cfg: ViTConfig, name: &str, coords: Option<&[usize]>) -> f64 {
    let params = ViTParams::init(cfg, 21).unwrap();
    let img = random_image(&cfg, cfg.grid, 4);
    let idx = params.names().iter().position(|n| n == name).unwrap();
    let x = params.tensors()[idx].clone();
    let weights: Vec<f64> = (0..cfg.num_classes).map(|k| 1.0 + 0.5 * k as f64).collect();
    let report = grad_check_coords(
        |tape, xv| {
            let vars = params.bind_one(tape, idx, xv)?;
            let out = params.forward(tape, &vars, &img, ForwardOptions::default())?;
            let w = tape.constant(Tensor::matrix(1, weights.len(), weights.clone())?)?;
            let s = tape.mul(out.logits, w)?;
            tape.sum(s)
        },
        &x,
        1e-5,
        coords,
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn logits_grad_check_every_parameter_small_model() {
    let cfg = ViTConfig {
        channels: 2,
        embed_dim: 6,
        num_layers: 2,
        num_heads: 2,
        ..tiny_config()
    };
    let params = ViTParams::init(cfg, 0).unwrap();
    for name in params.names() {
        let err = logit_sum_check(cfg, name, None);
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn logits_grad_check_toy_patch_embedding() {
    let cfg = ViTConfig::default();
    let coords: Vec<usize> = (0..cfg.patch_dim() * cfg.embed_dim).step_by(37).collect();
    let err = logit_sum_check(cfg, "patch_embed.weight", Some(&coords));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_is_deterministic() {
    let cfg = ViTConfig::default();
    let img = random_image(&cfg, cfg.grid, 9);
    let a = ViTParams::init(cfg, 42).unwrap();
    let b = ViTParams::init(cfg, 42).unwrap();
    assert_eq!(a, b);
    let ra = a.localize(&img, &[0, 2]).unwrap();
    let rb = b.localize(&img, &[0, 2]).unwrap();
    assert_eq!(ra.inference.logits, rb.inference.logits);
    assert_eq!(ra.inference.attentions, rb.inference.attentions);
    assert_eq!(ra.adjoints, rb.adjoints);
    assert_ne!(ViTParams::init(cfg, 43).unwrap(), a);
}

#[test]
fn adjoints_need_backward_and_probes() {
    let cfg = tiny_config();
    let params = ViTParams::init(cfg, 1).unwrap();
    let img = random_image(&cfg, cfg.grid, 1);
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let out = params.forward(&mut tape, &vars, &img, ForwardOptions::default()).unwrap();
    assert!(matches!(attention_adjoints(&tape, &out), Err(AcrError::State(_))));
    let s = tape.sum(out.logits).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(attention_adjoints(&tape, &out), Err(AcrError::State(_))));
}

#[test]
fn single_head_adjoint_matches_finite_differences() {
    // With one head the adjoint is the plain derivative of the logit with
    // respect to the attention matrix.
    let cfg = ViTConfig {
        num_layers: 2,
        ..tiny_config()
    };
    let params = ViTParams::init(cfg, 8).unwrap();
    let img = random_image(&cfg, cfg.grid, 8);
    let class = 1;
    let adj = params.localize(&img, &[class]).unwrap().adjoints.remove(0);
    let h = 1e-6;
    for layer in 0..cfg.num_layers {
        for (r, c) in [(0, 1), (2, 3), (4, 0)] {
            let eval = |delta: f64| {
                let mut tape = Tape::new();
                let vars = params.bind_constants(&mut tape).unwrap();
                let out = forward_with_probe_shift(&params, &mut tape, &vars, &img, layer, r, c, delta);
                tape.value(out).data()[class]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = adj[layer].at2(r, c);
            assert!(
                (numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0),
                "layer {layer} ({r},{c}): {analytic} vs {numeric}"
            );
        }
    }
}

/// Forward pass where attention entry `(r, c)` of `layer` is shifted by
/// `delta` after the softmax. Mirrors `forward` for the single-head case.
#[allow(clippy::too_many_arguments)]
fn forward_with_probe_shift(
    params: &ViTParams,
    tape: &mut Tape,
    vars: &ParamVars,
    img: &Tensor,
    layer: usize,
    r: usize,
    c: usize,
    delta: f64,
) -> Var {
    let cfg = *params.config();
    let patches = tape.constant(patchify(img, &cfg).unwrap()).unwrap();
    let e = tape.matmul(patches, vars.patch_w).unwrap();
    let e = tape.add_bias(e, vars.patch_b).unwrap();
    let mut x = tape.concat_rows(vars.cls, e).unwrap();
    x = tape.add(x, vars.pos.unwrap()).unwrap();
    let n = cfg.tokens();
    let d = cfg.embed_dim;
    for (li, l) in vars.layers.iter().enumerate() {
        let h = tape.layer_norm(x, l.ln1_g, l.ln1_b, LAYER_NORM_EPS).unwrap();
        let qkv = tape.matmul(h, l.qkv_w).unwrap();
        let qkv = tape.add_bias(qkv, l.qkv_b).unwrap();
        let q = tape.slice2d(qkv, 0..n, 0..d).unwrap();
        let k = tape.slice2d(qkv, 0..n, d..2 * d).unwrap();
        let v = tape.slice2d(qkv, 0..n, 2 * d..3 * d).unwrap();
        let s = tape.matmul_nt(q, k).unwrap();
        let s = tape.scale(s, 1.0 / (d as f64).sqrt()).unwrap();
        let mut a = tape.softmax_rows(s).unwrap();
        if li == layer {
            let mut z = Tensor::zeros(&[n, n]);
            z.set2(r, c, delta);
            let z = tape.constant(z).unwrap();
            a = tape.add(a, z).unwrap();
        }
        let o = tape.matmul(a, v).unwrap();
        let o = tape.matmul(o, l.proj_w).unwrap();
        let o = tape.add_bias(o, l.proj_b).unwrap();
        x = tape.add(x, o).unwrap();
        let h = tape.layer_norm(x, l.ln2_g, l.ln2_b, LAYER_NORM_EPS).unwrap();
        let h = tape.matmul(h, l.fc1_w).unwrap();
        let h = tape.add_bias(h, l.fc1_b).unwrap();
        let h = tape.gelu(h).unwrap();
        let h = tape.matmul(h, l.fc2_w).unwrap();
        let h = tape.add_bias(h, l.fc2_b).unwrap();
        x = tape.add(x, h).unwrap();
    }
    let cls = tape.slice2d(x, 0..1, 0..d).unwrap();
    let cls = tape.layer_norm(cls, vars.norm_g, vars.norm_b, LAYER_NORM_EPS).unwrap();
    let lg = tape.matmul(cls, vars.head_w).unwrap();
    tape.add_bias(lg, vars.head_b).unwrap()
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ViTConfig {
        use_positional_embedding: false,
        ..tiny_config()
    };
    let params = ViTParams::init(cfg, 77).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&params, &mut buf).unwrap();
    assert_eq!(&buf[..8], &CHECKPOINT_MAGIC);
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), buf);
    assert_eq!(load_checkpoint(&path).unwrap(), params);
}

#[test]
fn checkpoint_rejects_corruption() {
    let params = ViTParams::init(tiny_config(), 1).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&params, &mut buf).unwrap();
    assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(AcrError::Format(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(bad.as_slice()), Err(AcrError::Format(_))));
    let mut extra = buf;
    extra.push(0);
    assert!(matches!(read_checkpoint(extra.as_slice()), Err(AcrError::Format(_))));
}
