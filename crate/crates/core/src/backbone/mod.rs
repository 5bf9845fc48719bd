//! DiT backbone: adaLN-zero blocks with per-patch-size norms, embeddings and adapters.

mod config;
mod forward;
pub mod params;

pub use config::{Conditioning, FlexMode, ModelConfig, PosMode};
pub use forward::{
    forward_packed, timestep_features, Binder, Cond, ExecLayout, ExecRow, ForwardItem, ForwardTrace, ModelOutput,
};
pub use params::{InitStyle, ModelParams, ParamReport, ADAPTED_LAYERS};

use crate::numerics::NumericsError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("patch size {0} is not supported by this model")]
    UnsupportedPatch(usize),
    #[error("timestep {t} outside [1, {steps}]")]
    BadStep { t: usize, steps: usize },
    #[error("invalid conditioning: {0}")]
    BadCond(String),
    #[error("adapters for patch size {0} are already merged")]
    DoubleMerge(usize),
    #[error("parameters were merged for patch size {merged}, cannot run patch size {requested}")]
    MergedFor { merged: usize, requested: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::params::names;
    use super::*;
    use crate::numerics::gradcheck::check_gradients_sampled;
    use crate::numerics::{FlopKind, SplitRng, Tape, Tensor, Var};

    fn item(rng: &mut SplitRng, cfg: &ModelConfig, p: usize, class: usize) -> ForwardItem {
        ForwardItem { x: rng.normal_tensor(&[cfg.c_in, cfg.height, cfg.width]), t: 1 + rng.below(cfg.steps), cond: Cond::Class(class), p }
    }

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
    }

    fn lin_ref(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let n = x.len() / din;
        let mut y = vec![0.0; n * dout];
        for r in 0..n {
            for j in 0..dout {
                let mut acc = b.data()[j];
                for k in 0..din {
                    acc += x[r * din + k] * w.data()[k * dout + j];
                }
                y[r * dout + j] = acc;
            }
        }
        y
    }

    fn norm_mod_ref(x: &[f64], d: usize, g: &Tensor, b: &Tensor, shift: &[f64], scale: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            for j in 0..d {
                let xn = (row[j] - mean) / (var + 1e-6).sqrt() * g.data()[j] + b.data()[j];
                out[r * d + j] = xn * (1.0 + scale[j]) + shift[j];
            }
        }
        out
    }

    /// Straight-line single-item block.
    fn block_ref(p: &ModelParams, l: usize, x: &[f64], c: &[f64], ps: usize) -> Vec<f64> {
        let cfg = &p.config;
        let (d, heads) = (cfg.d, cfg.heads);
        let dh = d / heads;
        let n = x.len() / d;
        let g = |s: &str| p.get(&names::block(l, s)).unwrap();
        let m = lin_ref(c, g("adaln.w"), g("adaln.b"));
        let part = |k: usize| &m[k * d..(k + 1) * d];
        let h = norm_mod_ref(x, d, g(&format!("norm1.p{ps}.gamma")), g(&format!("norm1.p{ps}.beta")), part(0), part(1));
        let q = lin_ref(&h, g("attn.q.w"), g("attn.q.b"));
        let k = lin_ref(&h, g("attn.k.w"), g("attn.k.b"));
        let v = lin_ref(&h, g("attn.v.w"), g("attn.v.b"));
        let mut a = vec![0.0; n * d];
        for hd in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|e| q[i * d + hd * dh + e] * k[j * d + hd * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..n {
                    let w = (logits[j] - mx).exp() / z;
                    for e in 0..dh {
                        a[i * d + hd * dh + e] += w * v[j * d + hd * dh + e];
                    }
                }
            }
        }
        let o = lin_ref(&a, g("attn.out.w"), g("attn.out.b"));
        let x1: Vec<f64> = (0..n * d).map(|i| x[i] + part(2)[i % d] * o[i]).collect();
        let h2 = norm_mod_ref(&x1, d, g(&format!("norm2.p{ps}.gamma")), g(&format!("norm2.p{ps}.beta")), part(3), part(4));
        let f: Vec<f64> = lin_ref(&h2, g("mlp.fc1.w"), g("mlp.fc1.b")).into_iter().map(gelu_ref).collect();
        let f = lin_ref(&f, g("mlp.fc2.w"), g("mlp.fc2.b"));
        (0..n * d).map(|i| x1[i] + part(5)[i % d] * f[i]).collect()
    }

    #[test]
    fn block_matches_reference_loop() {
        let cfg = ModelConfig { p_powerful: 4, p_weak: 8, patch_sizes: vec![4, 8], ..ModelConfig::tiny() };
        let params = ModelParams::init(&cfg, 5, InitStyle::Random).unwrap();
        let mut rng = SplitRng::new(6);
        let it = item(&mut rng, &cfg, 4, 1);
        let tape = Tape::no_grad();
        let b = Binder::frozen(&tape, &params);
        let trace = forward_packed(&b, &[it], &ExecLayout::independent(&[4])).unwrap();
        assert_eq!(trace.embedded.shape(), vec![4, cfg.d]);
        let mut x = trace.embedded.value().data().to_vec();
        let c = trace.cond.value().data().to_vec();
        for l in 0..cfg.depth {
            x = block_ref(&params, l, &x, &c, 4);
            let got = trace.blocks[l].value();
            let err = got.data().iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "block {l}: {err}");
        }
    }

    #[test]
    fn fresh_blocks_are_identity() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 1, InitStyle::Training).unwrap();
        let mut rng = SplitRng::new(2);
        let tape = Tape::no_grad();
        let b = Binder::frozen(&tape, &params);
        let trace = forward_packed(&b, &[item(&mut rng, &cfg, 2, 0)], &ExecLayout::independent(&[16])).unwrap();
        for blk in &trace.blocks {
            assert!(blk.value().bit_eq(&trace.embedded.value()));
        }
        // zero output layer
        assert_eq!(trace.outputs[0].value().sq_norm(), 0.0);
    }

    #[test]
    fn output_is_image_shaped_at_every_size() {
        let cfg = ModelConfig { c_out: 2, ..ModelConfig::tiny() };
        let base = ModelParams::init(&cfg, 3, InitStyle::Random).unwrap();
        let mut rng = SplitRng::new(4);
        for mode in [FlexMode::Shared, FlexMode::Lora] {
            let flex = base.flexify(mode, 9).unwrap();
            for p in [2, 4] {
                let it = item(&mut rng, &cfg, p, 2);
                let out = flex.predict(&it.x, it.t, &it.cond, p).unwrap();
                assert_eq!(out.eps.shape(), &[1, 8, 8]);
                assert_eq!(out.var_logits.unwrap().shape(), &[1, 8, 8]);
            }
        }
        assert!(matches!(base.predict(&Tensor::zeros(&[1, 8, 8]), 1, &Cond::Null, 4), Err(BackboneError::UnsupportedPatch(4))));
        assert!(matches!(base.predict(&Tensor::zeros(&[1, 8, 8]), 0, &Cond::Null, 2), Err(BackboneError::BadStep { .. })));
    }

    #[test]
    fn lora_mode_is_bit_exact_at_powerful_size() {
        for pos_mode in [PosMode::Sinusoidal, PosMode::Learned] {
            let cfg = ModelConfig { pos_mode, ..ModelConfig::tiny() };
            let base = ModelParams::init(&cfg, 11, InitStyle::Random).unwrap();
            let mut flex = base.flexify(FlexMode::Lora, 12).unwrap();
            flex.randomize_adapters(13, 0.3);
            let mut rng = SplitRng::new(14);
            for _ in 0..5 {
                let class = rng.below(3);
                let it = item(&mut rng, &cfg, 2, class);
                let a = base.predict(&it.x, it.t, &it.cond, 2).unwrap();
                let b = flex.predict(&it.x, it.t, &it.cond, 2).unwrap();
                assert!(a.eps.bit_eq(&b.eps));
            }
        }
    }

    #[test]
    fn shared_mode_preserves_function_at_powerful_size() {
        for pos_mode in [PosMode::Sinusoidal, PosMode::Learned] {
            let cfg = ModelConfig { pos_mode, c_out: 2, ..ModelConfig::tiny() };
            let base = ModelParams::init(&cfg, 21, InitStyle::Random).unwrap();
            let flex = base.flexify(FlexMode::Shared, 0).unwrap();
            let mut rng = SplitRng::new(22);
            for _ in 0..5 {
                let class = rng.below(3);
                let it = item(&mut rng, &cfg, 2, class);
                let a = base.predict(&it.x, it.t, &it.cond, 2).unwrap();
                let b = flex.predict(&it.x, it.t, &it.cond, 2).unwrap();
                assert!(a.eps.max_abs_diff(&b.eps) < 1e-9);
                assert!(a.var_logits.unwrap().max_abs_diff(&b.var_logits.unwrap()) < 1e-9);
            }
        }
    }

    #[test]
    fn fresh_adapters_are_a_no_op() {
        let cfg = ModelConfig::tiny();
        let base = ModelParams::init(&cfg, 31, InitStyle::Random).unwrap();
        let flex = base.flexify(FlexMode::Lora, 32).unwrap();
        let mut detached = flex.clone();
        detached.tensors.retain(|n, _| !n.starts_with("lora."));
        let mut rng = SplitRng::new(33);
        let it = item(&mut rng, &cfg, 4, 0);
        let a = flex.predict(&it.x, it.t, &it.cond, 4).unwrap();
        let b = detached.predict(&it.x, it.t, &it.cond, 4).unwrap();
        assert!(a.eps.bit_eq(&b.eps));
    }

    #[test]
    fn merged_adapters_match_unmerged() {
        let cfg = ModelConfig::tiny();
        let base = ModelParams::init(&cfg, 41, InitStyle::Random).unwrap();
        let flex = base.flexify(FlexMode::Lora, 42).unwrap();
        let merged0 = flex.merge_loras(4).unwrap();
        for l in 0..cfg.depth {
            for layer in ADAPTED_LAYERS {
                let n = format!("{}.w", names::block(l, layer));
                assert!(merged0.get(&n).unwrap().bit_eq(flex.get(&n).unwrap()));
            }
        }
        let mut flex = flex;
        flex.randomize_adapters(43, 0.2);
        let merged = flex.merge_loras(4).unwrap();
        assert!(matches!(merged.merge_loras(4), Err(BackboneError::DoubleMerge(4))));
        let mut rng = SplitRng::new(44);
        let items: Vec<_> = (0..3).map(|k| item(&mut rng, &cfg, 4, k)).collect();
        let lens = vec![4; 3];
        let (a, fa) = flex.predict_batch(&items, &ExecLayout::independent(&lens)).unwrap();
        let (b, fb) = merged.predict_batch(&items, &ExecLayout::independent(&lens)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.eps.max_abs_diff(&y.eps) < 1e-9);
        }
        let (n, d, r, hid) = (4u64, cfg.d as u64, cfg.d_lora as u64, cfg.hidden() as u64);
        let per_block = 4 * 2 * n * (d * r + r * d) + 2 * n * (d * r + r * hid) + 2 * n * (hid * r + r * d);
        assert_eq!(fa.get(FlopKind::Lora), 3 * cfg.depth as u64 * per_block);
        assert_eq!(fb.get(FlopKind::Lora), 0);
        assert_eq!(fa.model_total() - fb.model_total(), fa.get(FlopKind::Lora));
        assert!(matches!(
            merged.predict(&items[0].x, 1, &Cond::Null, 2),
            Err(BackboneError::MergedFor { merged: 4, requested: 2 })
        ));
    }

    #[test]
    fn packed_mixed_batch_matches_independent_forwards() {
        let cfg = ModelConfig::tiny();
        let base = ModelParams::init(&cfg, 51, InitStyle::Random).unwrap();
        for mode in [FlexMode::Shared, FlexMode::Lora] {
            let mut flex = base.flexify(mode, 52).unwrap();
            flex.randomize_adapters(53, 0.2);
            let mut rng = SplitRng::new(54);
            let items: Vec<_> = [2, 4, 4, 2, 4].iter().map(|&p| {
                let class = rng.below(3);
                item(&mut rng, &cfg, p, class)
            }).collect();
            let solo: Vec<_> = items.iter().map(|it| flex.predict(&it.x, it.t, &it.cond, it.p).unwrap()).collect();
            let layouts = [
                ExecLayout {
                    rows: vec![
                        ExecRow { items: vec![0], len: 16 },
                        ExecRow { items: vec![1], len: 16 },
                        ExecRow { items: vec![2, 4], len: 16 },
                        ExecRow { items: vec![3], len: 16 },
                    ],
                    pad_linears: true,
                    dense_attention: true,
                },
                ExecLayout {
                    rows: vec![ExecRow { items: vec![4, 0, 1], len: 30 }, ExecRow { items: vec![3, 2], len: 20 }],
                    pad_linears: false,
                    dense_attention: true,
                },
            ];
            for layout in &layouts {
                let (outs, _) = flex.predict_batch(&items, layout).unwrap();
                for (a, b) in outs.iter().zip(&solo) {
                    assert!(a.eps.max_abs_diff(&b.eps) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn layout_validation() {
        let l = ExecLayout { rows: vec![ExecRow { items: vec![0, 0], len: 8 }], pad_linears: false, dense_attention: false };
        assert!(l.validate(&[4]).is_err());
        let l = ExecLayout { rows: vec![ExecRow { items: vec![0], len: 3 }], pad_linears: false, dense_attention: false };
        assert!(l.validate(&[4]).is_err());
        assert!(ExecLayout::independent(&[4, 4]).validate(&[4]).is_err());
    }

    #[test]
    fn cross_attention_mode_runs_and_has_no_adapters() {
        let cfg = ModelConfig { conditioning: Conditioning::Cross, ..ModelConfig::tiny() };
        let base = ModelParams::init(&cfg, 61, InitStyle::Random).unwrap();
        let flex = base.flexify(FlexMode::Lora, 62).unwrap();
        assert!(flex.adapter_layers(4).iter().all(|n| !n.contains("xattn")));
        assert!(flex.frozen.iter().any(|n| n.contains("xattn")));
        let mut rng = SplitRng::new(63);
        let x = rng.normal_tensor(&[1, 8, 8]);
        let a = flex.predict(&x, 5, &Cond::Tokens(vec![1, 2, 3]), 4).unwrap();
        let b = flex.predict(&x, 5, &Cond::Tokens(vec![4]), 4).unwrap();
        assert!(a.eps.max_abs_diff(&b.eps) > 0.0);
        assert!(flex.predict(&x, 5, &Cond::Class(0), 4).is_err());
        let items = vec![
            ForwardItem { x: x.clone(), t: 3, cond: Cond::Tokens(vec![1, 2]), p: 2 },
            ForwardItem { x: x.clone(), t: 3, cond: Cond::Null, p: 4 },
        ];
        let layout = ExecLayout { rows: vec![ExecRow { items: vec![0], len: 16 }, ExecRow { items: vec![1], len: 16 }], pad_linears: true, dense_attention: true };
        let (packed, _) = flex.predict_batch(&items, &layout).unwrap();
        for (k, it) in items.iter().enumerate() {
            let solo = flex.predict(&it.x, it.t, &it.cond, it.p).unwrap();
            assert!(packed[k].eps.max_abs_diff(&solo.eps) < 1e-9);
        }
    }

    #[test]
    fn parameter_accounting() {
        let cfg = ModelConfig::default();
        let base = ModelParams::init(&cfg, 1, InitStyle::Training).unwrap();
        let shared = base.flexify(FlexMode::Shared, 0).unwrap();
        let r = shared.report_against(&base);
        assert_eq!(r.total, r.base + r.added);
        assert!(r.added > 0 && r.added_fraction() < 0.02, "{r:?}");
        let lora = base.flexify(FlexMode::Lora, 0).unwrap();
        let r = lora.report_against(&base);
        assert_eq!(r.trainable, r.added);
    }

    #[test]
    fn patch_size_embedding_rows_train_independently() {
        let cfg = ModelConfig::tiny();
        let flex = ModelParams::init(&cfg, 71, InitStyle::Random).unwrap().flexify(FlexMode::Lora, 0).unwrap();
        assert!(!flex.has(&names::pse(2)));
        let tape = Tape::new();
        let b = Binder::trainable(&tape, &flex);
        let mut rng = SplitRng::new(72);
        let items = vec![item(&mut rng, &cfg, 4, 0)];
        let out = forward_packed(&b, &items, &ExecLayout::independent(&[4])).unwrap();
        let loss = out.outputs[0].square().unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(b.get(&names::pse(4)).unwrap()).unwrap();
        assert!(g.sq_norm() > 0.0);
    }

    fn gradcheck_group(params: &ModelParams, group: &[String], p: usize) {
        let inputs: Vec<Tensor> = group.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let cfg = params.config.clone();
        let mut rng = SplitRng::new(81);
        let it = item(&mut rng, &cfg, p, 1);
        let weight = rng.normal_tensor(&[cfg.c_out, cfg.height, cfg.width]);
        let report = check_gradients_sampled(&inputs, |tape: &Tape, vars: &[Var]| {
            let mut b = Binder::frozen(tape, params);
            for (n, v) in group.iter().zip(vars) {
                b = b.with_override(n, *v);
            }
            let tr = forward_packed(&b, std::slice::from_ref(&it), &ExecLayout::independent(&[cfg.tokens(p)]))
                .map_err(|e| match e {
                    BackboneError::Numerics(n) => n,
                    other => panic!("{other}"),
                })?;
            tr.outputs[0].mul(&tape.constant(weight.clone()))?.sum()
        }, 6);
        assert!(report.is_ok(), "{group:?}: {report:?}");
    }

    #[test]
    fn lora_parameters_pass_gradient_check() {
        let cfg = ModelConfig::tiny();
        let mut flex = ModelParams::init(&cfg, 91, InitStyle::Random).unwrap().flexify(FlexMode::Lora, 92).unwrap();
        flex.randomize_adapters(93, 0.3);
        let group: Vec<String> = flex.trainable_names().into_iter().filter(|n| n.contains("blocks.1")).collect();
        assert!(!group.is_empty());
        gradcheck_group(&flex, &group, 4);
        let mut by_prefix: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for n in flex.trainable_names() {
            let key = if n.starts_with("lora") { "lora" } else { "other" };
            by_prefix.entry(key).or_default().push(n);
        }
        gradcheck_group(&flex, &by_prefix["other"], 4);
    }
}
