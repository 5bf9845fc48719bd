//! One test per acceptance criterion; each prints a single PASS/FAIL line.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use flexidit::analysis::{divergence_curve, filtered_step_generate, l2, BandFilter};
use flexidit::backbone::{
    forward_packed, Binder, Cond, ExecLayout, FlexMode, ForwardItem, InitStyle, ModelConfig, ModelParams, PosMode,
    ADAPTED_LAYERS,
};
use flexidit::cli_io::{execute, replay, resolve, Checkpoint, Job, MANIFEST_NAME};
use flexidit::compute_model::{
    flops_per_step, pack, pack_items, plan_flops_with, token_linear_cost, ItemCost, StepGeometry,
};
use flexidit::data::{generate, Example, SyntheticSpec};
use flexidit::diffusion::{sample_loop, GaussianOracle, NoiseSchedule, SampleOptions, Sampler};
use flexidit::flexify_training::{mmd2, mmd2_jackknife, Objective, RbfMixture, TrainConfig, Trainer, MEDIAN_MULTIPLIERS};
use flexidit::numerics::gradcheck::check_gradients_sampled;
use flexidit::numerics::{FlopCounter, FlopKind, SplitRng, Tape, Tensor, Var};
use flexidit::scheduler_guidance::{make_plan, InferencePlan, PlanStyle};

/// Written past the test harness capture so passing criteria are reported too.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
}

fn verdict(n: u32, ok: bool, detail: &str) {
    emit(&format!("criterion {n:>2} {}: {detail}", if ok { "PASS" } else { "FAIL" }));
    assert!(ok, "criterion {n}: {detail}");
}

fn random_item(rng: &mut SplitRng, cfg: &ModelConfig, p: usize) -> ForwardItem {
    let cond = match rng.below(4) {
        3 => Cond::Null,
        k => Cond::Class(k),
    };
    ForwardItem { x: rng.normal_tensor(&[cfg.c_in, cfg.height, cfg.width]), t: 1 + rng.below(cfg.steps), cond, p }
}

fn measured(params: &ModelParams, p: usize) -> FlopCounter {
    let cfg = &params.config;
    let mut rng = SplitRng::new(3);
    let it = random_item(&mut rng, cfg, p);
    params.predict_batch(&[it], &ExecLayout::independent(&[cfg.tokens(p)])).unwrap().1
}

#[test]
fn criterion_01_shared_mode_preserves_the_function() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut inputs = 0;
    for (pos_mode, seed) in [(PosMode::Sinusoidal, 1), (PosMode::Learned, 2)] {
        let cfg = ModelConfig { pos_mode, c_out: 2, ..ModelConfig::tiny() };
        let base = ModelParams::init(&cfg, seed, InitStyle::Random).unwrap();
        let flex = base.flexify(FlexMode::Shared, seed + 10).unwrap();
        let mut rng = SplitRng::new(seed + 20);
        for _ in 0..50 {
            let it = random_item(&mut rng, &cfg, cfg.p_powerful);
            let a = base.predict(&it.x, it.t, &it.cond, it.p).unwrap();
            let b = flex.predict(&it.x, it.t, &it.cond, it.p).unwrap();
            worst = worst.max(a.eps.max_abs_diff(&b.eps));
            worst = worst.max(a.var_logits.unwrap().max_abs_diff(&b.var_logits.unwrap()));
            inputs += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(1, inputs == 100 && worst <= 1e-9 && secs < 60.0, &format!("{inputs} inputs, max abs {worst:.3e} (tol 1e-9), {secs:.1}s"));
}

#[test]
fn criterion_02_lora_sampling_is_bit_exact() {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let base = ModelParams::init(&cfg, 5, InitStyle::Random).unwrap();
    let flex = base.flexify(FlexMode::Lora, 6).unwrap();
    let s = NoiseSchedule::linear(cfg.steps).unwrap();
    let plan = InferencePlan::baseline(cfg.steps, cfg.p_weak, cfg.p_powerful, None).unwrap();
    let seeds: Vec<u64> = (100..110).collect();
    let conds: Vec<Cond> = (0..10).map(|k| Cond::Class(k % 3)).collect();
    let opts = SampleOptions::default();
    let (a, _) = sample_loop(&base, &s, &plan, &conds, &seeds, &opts, None).unwrap();
    let (b, log) = sample_loop(&flex, &s, &plan, &conds, &seeds, &opts, None).unwrap();
    let same = a.iter().zip(&b).filter(|(x, y)| x.bit_eq(y)).count();
    let secs = start.elapsed().as_secs_f64();
    let ok = same == 10 && log.sizes.len() == cfg.steps && secs < 300.0;
    verdict(2, ok, &format!("{same}/10 seeds bit-identical over {} steps, {secs:.1}s", log.sizes.len()));
}

#[test]
fn criterion_03_merged_adapters_match() {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut flex = ModelParams::init(&cfg, 7, InitStyle::Random).unwrap().flexify(FlexMode::Lora, 8).unwrap();
    flex.randomize_adapters(9, 0.3);
    let p = cfg.p_weak;
    let merged = flex.merge_loras(p).unwrap();
    let mut rng = SplitRng::new(10);
    let items: Vec<ForwardItem> = (0..100).map(|_| random_item(&mut rng, &cfg, p)).collect();
    let lens = vec![cfg.tokens(p); items.len()];
    let (a, fa) = flex.predict_batch(&items, &ExecLayout::independent(&lens)).unwrap();
    let (b, fb) = merged.predict_batch(&items, &ExecLayout::independent(&lens)).unwrap();
    let worst = a.iter().zip(&b).map(|(x, y)| x.eps.max_abs_diff(&y.eps)).fold(0.0, f64::max);

    // each adapted d_in x d_out layer adds 2 n (d_in r + r d_out) per image
    let (n, d, r, hid) = (cfg.tokens(p) as u64, cfg.d as u64, cfg.d_lora as u64, cfg.hidden() as u64);
    let dims = |layer: &str| match layer {
        "mlp.fc1" => (d, hid),
        "mlp.fc2" => (hid, d),
        _ => (d, d),
    };
    let per_block: u64 = ADAPTED_LAYERS.iter().map(|l| dims(l)).map(|(i, o)| 2 * n * (i * r + r * o)).sum();
    let want = items.len() as u64 * cfg.depth as u64 * per_block;
    let delta = fa.model_total() - fb.model_total();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-9 && delta == want && fa.get(FlopKind::Lora) == want && secs < 60.0;
    verdict(3, ok, &format!("max abs {worst:.3e} (tol 1e-9), flops delta {delta} vs formula {want}, {secs:.1}s"));
}

#[test]
fn criterion_04_flops_model() {
    let start = Instant::now();
    let mut configs = 0;
    let mut mismatches = Vec::new();
    for (depth, d, heads) in [(1, 8, 2), (2, 12, 3), (3, 16, 4)] {
        for (h, w, c_out, pos_mode) in [(8, 8, 1, PosMode::Sinusoidal), (8, 16, 2, PosMode::Learned)] {
            let cfg = ModelConfig { depth, d, heads, height: h, width: w, c_out, pos_mode, d_lora: 2, freq_dim: 8, ..ModelConfig::default() };
            let base = ModelParams::init(&cfg, 11, InitStyle::Random).unwrap();
            let lora = base.flexify(FlexMode::Lora, 12).unwrap();
            let shared = base.flexify(FlexMode::Shared, 13).unwrap();
            let merged = lora.merge_loras(cfg.p_weak).unwrap();
            let cases = [
                (&base, cfg.p_powerful),
                (&lora, cfg.p_weak),
                (&shared, cfg.p_weak),
                (&shared, cfg.p_powerful),
                (&merged, cfg.p_weak),
            ];
            for (params, p) in cases {
                let got = measured(params, p);
                let want = flops_per_step(&StepGeometry::from_params(params, p, 0));
                if got.model_total() != want.model_total() {
                    mismatches.push(format!("{depth}/{d}/{h}x{w} {:?} p={p}", params.mode));
                }
                configs += 1;
            }
        }
    }

    // weak steps as deployed: adapters merged for the weak size, or shared weights
    let mut ratios = Vec::new();
    let cfg = ModelConfig { steps: 100, ..ModelConfig::default() };
    let base = ModelParams::init(&cfg, 14, InitStyle::Random).unwrap();
    let flex = base.flexify(FlexMode::Lora, 15).unwrap();
    let shared = base.flexify(FlexMode::Shared, 16).unwrap();
    let merged = flex.merge_loras(cfg.p_weak).unwrap();
    let strong = measured(&flex, cfg.p_powerful).model_total() as f64;
    ratios.push(measured(&merged, cfg.p_weak).model_total() as f64 / strong);
    ratios.push(measured(&shared, cfg.p_weak).model_total() as f64 / measured(&shared, cfg.p_powerful).model_total() as f64);
    for (n, d, l) in [(1024, 1152, 28), (256, 1152, 28), (4096, 2048, 24)] {
        let strong = flops_per_step(&StepGeometry::transformer(n, d, l)).model_total() as f64;
        ratios.push(flops_per_step(&StepGeometry::transformer(n / 4, d, l)).model_total() as f64 / strong);
    }
    let ratios_ok = ratios.iter().all(|r| (1.0 / 16.0..=0.25).contains(r));
    // unmerged adapters add 36 r d per token and block on top; reported only
    let unmerged_toy = measured(&flex, cfg.p_weak).model_total() as f64 / strong;
    let xl = |n: usize, r: Option<usize>| {
        let mut g = StepGeometry::transformer(n, 1152, 28);
        g.d_lora = r;
        flops_per_step(&g).model_total() as f64
    };
    let unmerged_xl = xl(64, Some(32)) / xl(256, None);

    // 180 weak steps at a quarter of the cost plus 70 powerful steps, over 250
    let plan = make_plan(250, 180, PlanStyle::WeakFirst, 4, 2, None).unwrap();
    let fraction = plan_flops_with(&plan, token_linear_cost(&ModelConfig::default())).compute_fraction;
    let want = (180.0 * 0.25 + 70.0) / 250.0;
    let secs = start.elapsed().as_secs_f64();
    let ok = configs >= 12 && mismatches.is_empty() && ratios_ok && (fraction - want).abs() < 1e-12 && (want - 0.46).abs() < 1e-12 && secs < 60.0;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    verdict(
        4,
        ok,
        &format!(
            "{configs} configs exact ({} mismatched), weak/powerful ratios [{}] (unmerged adapters: toy {unmerged_toy:.4}, 1152-wide {unmerged_xl:.4}), fraction {fraction:.6} (want 0.46), {secs:.1}s",
            mismatches.len(),
            shown.join(", ")
        ),
    );
}

#[test]
fn criterion_05_packing() {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut params = ModelParams::init(&cfg, 16, InitStyle::Random).unwrap().flexify(FlexMode::Lora, 17).unwrap();
    params.randomize_adapters(18, 0.3);
    let mut rng = SplitRng::new(19);
    let mut worst: f64 = 0.0;
    let mut counted_ok = true;
    let mut gate_ok = true;
    let mut executed = 0;
    for _ in 0..6 {
        let strong = 1 + rng.below(4);
        let weak = rng.below(10);
        let mut items: Vec<ForwardItem> = (0..strong).map(|_| random_item(&mut rng, &cfg, cfg.p_powerful)).collect();
        items.extend((0..weak).map(|_| random_item(&mut rng, &cfg, cfg.p_weak)));
        let reference: Vec<Tensor> = items.iter().map(|it| params.predict(&it.x, it.t, &it.cond, it.p).unwrap().eps).collect();
        let lens: Vec<usize> = items.iter().map(|it| cfg.tokens(it.p)).collect();
        let costs: Vec<ItemCost> = items.iter().map(|it| ItemCost::of(&params, it.p, 0)).collect();
        for k in 1..=4u8 {
            let s = match pack_items(&lens, k) {
                Ok(s) => s,
                Err(_) => {
                    gate_ok &= k == 4 && weak < 4;
                    continue;
                }
            };
            gate_ok &= !(k == 4 && weak > 0 && weak < 4);
            let (out, flops) = params.predict_batch(&items, &s.layout()).unwrap();
            for (o, r) in out.iter().zip(&reference) {
                worst = worst.max(o.eps.max_abs_diff(r));
            }
            counted_ok &= flops.model_total() == s.flops(&cfg, &costs).model_total();
            executed += 1;
        }
    }

    // strategy 2 against every other feasible strategy on random request sets
    let big = ModelConfig::default();
    let (n_strong, n_weak) = (big.tokens(big.p_powerful), big.tokens(big.p_weak));
    let mut min_ok = true;
    for _ in 0..300 {
        let lens: Vec<usize> = (0..1 + rng.below(16)).map(|_| if rng.below(3) == 0 { n_strong } else { n_weak }).collect();
        let costs: Vec<ItemCost> =
            lens.iter().map(|&n| ItemCost { p: if n == n_strong { big.p_powerful } else { big.p_weak }, d_lora: Some(big.d_lora), ctx_len: 0 }).collect();
        let s2 = pack_items(&lens, 2).unwrap().flops(&big, &costs).model_total();
        for k in [1, 3, 4] {
            if let Ok(s) = pack_items(&lens, k) {
                min_ok &= s.flops(&big, &costs).model_total() >= s2;
            }
        }
    }
    gate_ok &= pack(&[(64, 2), (16, 3)], 4).is_err() && pack(&[(64, 2), (16, 4)], 4).is_ok();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-9 && counted_ok && min_ok && gate_ok && secs < 120.0;
    verdict(
        5,
        ok,
        &format!("{executed} packed batches, max abs {worst:.3e} (tol 1e-9), strategy 2 minimal: {min_ok}, gate enforced: {gate_ok}, {secs:.1}s"),
    );
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn criterion_06_sampler_statistics() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for (steps, exact) in [(100, true), (1000, false)] {
        let o = GaussianOracle { schedule: NoiseSchedule::linear(steps).unwrap(), mean: -0.4, var: 0.5, shape: [1, 1, 1], exact_variance: exact };
        let plan = InferencePlan::baseline(steps, 2, 2, None).unwrap();
        let seeds: Vec<u64> = (0..10_000).collect();
        let conds = vec![Cond::Null; seeds.len()];
        let opts = SampleOptions { sampler: Sampler::Ddpm, ..SampleOptions::default() };
        let (xs, _) = sample_loop(&o, &o.schedule, &plan, &conds, &seeds, &opts, None).unwrap();
        let v: Vec<f64> = xs.iter().map(|x| x.data()[0]).collect();
        let (m, var) = mean_var(&v);
        let z = (m - o.mean) / (var / v.len() as f64).sqrt();
        let rel = var / o.var - 1.0;
        ok &= z.abs() < 3.0 && rel.abs() < 0.03;
        lines.push(format!("T={steps}: mean off by {z:+.2} SE, variance {:+.2}%", 100.0 * rel));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(6, ok && secs < 300.0, &format!("{} (tol 3 SE, 3%), {secs:.1}s", lines.join("; ")));
}

fn brute_mmd2(xs: &Tensor, ys: &Tensor, h: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        h.iter().map(|h| (-d2 / h).exp()).sum::<f64>() / h.len() as f64
    };
    let (n, m) = (xs.shape()[0], ys.shape()[0]);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += k(xs.row(i), xs.row(j)) / (n * (n - 1)) as f64;
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += k(ys.row(i), ys.row(j)) / (m * (m - 1)) as f64;
            }
        }
    }
    for i in 0..n {
        for j in 0..m {
            total -= 2.0 * k(xs.row(i), ys.row(j)) / (n * m) as f64;
        }
    }
    total
}

#[test]
fn criterion_07_mmd_estimator() {
    let start = Instant::now();
    let mut rng = SplitRng::new(20);
    let mut worst: f64 = 0.0;
    for (n, m, dim) in [(2, 3, 1), (16, 16, 2), (64, 64, 3), (64, 33, 5)] {
        let xs = rng.normal_tensor(&[n, dim]);
        let ys = rng.normal_tensor(&[m, dim]).map(|v| 0.7 * v + 0.2);
        let k = RbfMixture::median_heuristic(&xs, &ys, &MEDIAN_MULTIPLIERS).unwrap();
        worst = worst.max((mmd2(&xs, &ys, &k, false).unwrap() - brute_mmd2(&xs, &ys, &k.bandwidths)).abs());
    }
    let xs = rng.normal_tensor(&[500, 1]);
    let shifted = rng.normal_tensor(&[500, 1]).map(|v| v + 1.0);
    let same = rng.normal_tensor(&[500, 1]);
    let k = RbfMixture::median_heuristic(&xs, &shifted, &MEDIAN_MULTIPLIERS).unwrap();
    let (diff, diff_se) = mmd2_jackknife(&xs, &shifted, &k).unwrap();
    let k = RbfMixture::median_heuristic(&xs, &same, &MEDIAN_MULTIPLIERS).unwrap();
    let (null, null_se) = mmd2_jackknife(&xs, &same, &k).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst <= 1e-12 && diff > 5.0 * diff_se && null.abs() < 3.0 * null_se && secs < 120.0;
    verdict(
        7,
        ok,
        &format!(
            "double-sum gap {worst:.2e} (tol 1e-12), shifted {:.1} SE (need > 5), same {:+.2} SE (need |.| < 3), {secs:.1}s",
            diff / diff_se,
            null / null_se
        ),
    );
}

fn group_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0] == "blocks" { parts[..2].join(".") } else { parts[0].to_string() }
}

fn gradcheck(params: &ModelParams, group: &[String], p: usize, seed: u64) -> Result<usize, String> {
    let cfg = params.config.clone();
    let inputs: Vec<Tensor> = group.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let mut rng = SplitRng::new(seed);
    let items = [
        ForwardItem { x: rng.normal_tensor(&[cfg.c_in, cfg.height, cfg.width]), t: 1 + rng.below(cfg.steps), cond: Cond::Class(1), p },
        ForwardItem { x: rng.normal_tensor(&[cfg.c_in, cfg.height, cfg.width]), t: 1 + rng.below(cfg.steps), cond: Cond::Null, p },
    ];
    let weights: Vec<Tensor> = (0..2).map(|_| rng.normal_tensor(&[cfg.c_out, cfg.height, cfg.width])).collect();
    let lens = [cfg.tokens(p); 2];
    let report = check_gradients_sampled(
        &inputs,
        |tape: &Tape, vars: &[Var]| {
            let mut b = Binder::frozen(tape, params);
            for (n, v) in group.iter().zip(vars) {
                b = b.with_override(n, *v);
            }
            let tr = forward_packed(&b, &items, &ExecLayout::independent(&lens)).expect("forward");
            let a = tr.outputs[0].mul(&tape.constant(weights[0].clone()))?.sum()?;
            let c = tr.outputs[1].mul(&tape.constant(weights[1].clone()))?.sum()?;
            a.add(&c)
        },
        8,
    );
    report.map(|r| r.checked).map_err(|e| e.to_string())
}

#[test]
fn criterion_08_gradient_suite() {
    let start = Instant::now();
    let mut groups = 0;
    let mut entries = 0;
    let mut failures = Vec::new();
    for pos_mode in [PosMode::Sinusoidal, PosMode::Learned] {
        let cfg = ModelConfig { pos_mode, c_out: 2, ..ModelConfig::tiny() };
        let base = ModelParams::init(&cfg, 21, InitStyle::Random).unwrap();
        let shared = base.flexify(FlexMode::Shared, 22).unwrap();
        let mut lora = base.flexify(FlexMode::Lora, 23).unwrap();
        lora.randomize_adapters(24, 0.3);
        let runs = [(&base, cfg.p_powerful), (&shared, cfg.p_weak), (&shared, cfg.p_powerful), (&lora, cfg.p_weak)];
        for (params, p) in runs {
            let mut by_group: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for n in params.trainable_names() {
                by_group.entry(group_key(&n)).or_default().push(n);
            }
            assert!(!by_group.is_empty());
            for (key, names) in &by_group {
                match gradcheck(params, names, p, 25 + groups as u64) {
                    Ok(k) => entries += k,
                    Err(e) => failures.push(format!("{pos_mode:?}/{:?}/p{p}/{key}: {e}", params.mode)),
                }
                groups += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = failures.is_empty() && secs < 600.0;
    verdict(
        8,
        ok,
        &format!("{groups} parameter groups, {entries} entries at rtol 1e-3, failures {failures:?}, {secs:.1}s"),
    );
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Mean paired difference and its t statistic.
fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, var) = mean_var(&d);
    (m, m / (var / d.len() as f64).sqrt())
}

#[test]
fn criterion_09_end_to_end_trends() {
    let start = Instant::now();
    let cfg = ModelConfig { steps: 100, ..ModelConfig::default() };
    let spec = SyntheticSpec { count: 3000, seed: 1, ..SyntheticSpec::default() };
    let data: Vec<Example> = generate(&spec).unwrap().examples();
    let base = ModelParams::init(&cfg, 30, InitStyle::Training).unwrap();

    let pre = TrainConfig { steps: 2500, batch: 16, lr: 1e-3, ema_rate: 0.995, seed: 31, ..TrainConfig::default() };
    let mut tr = Trainer::new(base, &pre).unwrap();
    let log = tr.run(&data, &pre, |_| {}).unwrap();
    let losses: Vec<f64> = log.iter().map(|m| m.loss).collect();
    // per-step losses are very noisy (t is random), so stability is "no detectable trend"
    let (w1, w2) = (&losses[1900..2200], &losses[2200..]);
    let (early, v1) = mean_var(w1);
    let (late, v2) = mean_var(w2);
    let trend_se = (v1 / w1.len() as f64 + v2 / w2.len() as f64).sqrt();
    let stable = (late - early).abs() < 3.0 * trend_se && late < 0.5 * mean(&losses[..50]);
    let teacher = tr.ema_params();

    let ft = TrainConfig { objective: Objective::Distill, steps: 600, batch: 16, lr: 3e-3, ema_rate: 0.99, seed: 32, ..TrainConfig::default() };
    let mut st = Trainer::new(teacher.flexify(FlexMode::Lora, 33).unwrap(), &ft).unwrap();
    let dlog = st.run(&data, &ft, |_| {}).unwrap();
    let distill: Vec<f64> = dlog.iter().map(|m| m.distill).collect();
    let model = st.ema_params();
    let s = NoiseSchedule::linear(cfg.steps).unwrap();
    let opts = SampleOptions::default();
    emit(&format!(
        "criterion  9 setup: {} params, pretrain loss {:.4} -> {:.4}, distill {:.4} -> {:.4}, fine-tune flops {:.2}% of pretraining",
        teacher.num_params(),
        mean(&losses[..50]),
        late,
        mean(&distill[..30]),
        mean(&distill[570..]),
        100.0 * st.flops as f64 / tr.flops as f64
    ));

    // (a) weak/powerful divergence shrinks as noise grows
    let probes: Vec<Tensor> = data[..32].iter().map(|e| e.x.clone()).collect();
    let pconds: Vec<Cond> = data[..32].iter().map(|e| Cond::Class(e.label)).collect();
    let ts: Vec<usize> = vec![1, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
    let curve = divergence_curve(&model, &s, &probes, &pconds, &ts, cfg.p_weak, cfg.p_powerful, 34).unwrap();
    let rho = curve.spearman();
    let a_ok = rho <= -0.5;

    // (b) weak-first vs weak-last against the all-powerful run of the same seed
    let seeds: Vec<u64> = (1000..1024).collect();
    let conds: Vec<Cond> = (0..seeds.len()).map(|k| Cond::Class(k % 3)).collect();
    let run = |text: &str| {
        let plan = InferencePlan::parse(text, cfg.p_weak, cfg.p_powerful).unwrap();
        sample_loop(&model, &s, &plan, &conds, &seeds, &opts, None).unwrap().0
    };
    let baseline = run("weak:0,powerful:100");
    let mut spread = Vec::new();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            if i % 3 == j % 3 {
                spread.push(l2(&baseline[i], &baseline[j]).unwrap());
            }
        }
    }
    let threshold = median(spread);
    let dist = |imgs: &[Tensor]| median(imgs.iter().zip(&baseline).map(|(a, b)| l2(a, b).unwrap()).collect());
    let mut b_ok = true;
    let mut b_lines = Vec::new();
    for t_weak in [10, 20, 30, 40] {
        let m = dist(&run(&format!("weak:{t_weak},powerful:{}", 100 - t_weak)));
        b_ok &= m < threshold;
        b_lines.push(format!("first{t_weak}={m:.3}"));
    }
    let last = dist(&run("weak:40,powerful:60;style=weak_last"));
    b_ok &= last > threshold;
    b_lines.push(format!("last40={last:.3}"));

    // (c) single-step filtering of the pretrained model's prediction
    let fseeds: Vec<u64> = (2000..2032).collect();
    let fconds: Vec<Cond> = (0..fseeds.len()).map(|k| Cond::Class(k % 3)).collect();
    let plan = InferencePlan::baseline(cfg.steps, cfg.p_weak, cfg.p_powerful, None).unwrap();
    let fbase = sample_loop(&teacher, &s, &plan, &fconds, &fseeds, &opts, None).unwrap().0;
    let hurt = |t: usize, f: BandFilter| {
        filtered_step_generate(&teacher, &s, &plan, &fconds, &fseeds, t, &f, Some(&fbase), &opts).unwrap().l2
    };
    let (t_large, t_small) = (90, 10);
    let (low, high) = (BandFilter::low(0.5).unwrap(), BandFilter::high(0.5).unwrap());
    let (high_large, high_small) = (hurt(t_large, high), hurt(t_small, high));
    let (low_large, low_small) = (hurt(t_large, low), hurt(t_small, low));
    let (hd, ht) = paired(&high_large, &high_small);
    let (ld, lt) = paired(&low_small, &low_large);
    let c_means = format!(
        "mean L2 high t{t_large} {:.3}, t{t_small} {:.3}, low t{t_large} {:.3}, t{t_small} {:.3}",
        mean(&high_large),
        mean(&high_small),
        mean(&low_large),
        mean(&low_small)
    );
    let c_ok = hd > 0.0 && ht > 2.0 && ld > 0.0 && lt > 2.0;

    let secs = start.elapsed().as_secs_f64();
    let ok = stable && a_ok && b_ok && c_ok && secs < 7200.0;
    verdict(
        9,
        ok,
        &format!(
            "stable loss {stable} ({early:.3} -> {late:.3}, se {trend_se:.3}); (a) spearman {rho:.3} (need <= -0.5); (b) median L2 {} vs same-class spread median {threshold:.3}; \
             (c) high-pass t{t_large}-t{t_small} {hd:+.4} (t={ht:.1}), low-pass t{t_small}-t{t_large} {ld:+.4} (t={lt:.1}), {c_means}; {secs:.0}s",
            b_lines.join(" ")
        ),
    );
}

const TINY: &str = "
[model]
depth = 2
d = 16
heads = 2
height = 8
width = 8
d_lora = 4
freq_dim = 8
steps = 40

[data]
height = 8
width = 8
count = 48
sigma = 1.0

[train]
steps = 4
batch = 3

[finetune]
steps = 2
batch = 3

[sample]
count = 3
";

#[test]
fn criterion_10_reproducibility() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let layered = resolve(Some(TINY), &[]).unwrap();
    let ck = |run: &str| d(run).join("checkpoint.fxck");
    let jobs = [
        ("data", Job::DatasetGenerate),
        ("base", Job::Train { data: Some(d("data/dataset.fxdt")), resume: None }),
        ("lora", Job::Flexify { from: ck("base") }),
        ("sample", Job::Sample { checkpoint: ck("lora") }),
        ("filter", Job::FilterStep { checkpoint: ck("base"), step: 20, filter: "high:0.5".into(), seeds: 2 }),
        ("divergence", Job::Divergence { checkpoint: ck("lora"), ts: vec![1, 20, 40], probes: 3 }),
        ("activations", Job::ActivationDistance { checkpoint: ck("lora"), taps: vec![0, 1] }),
    ];
    let mut identical = 0;
    for (name, job) in &jobs {
        execute(job, &layered, &d(name), &mut Vec::new()).unwrap();
        let r = replay(&d(name).join(MANIFEST_NAME), &d(&format!("replay_{name}")), &mut Vec::new()).unwrap();
        if r.identical() {
            identical += 1;
        }
    }

    // split training through a checkpoint file against an uninterrupted run
    let data: Vec<Example> = generate(&layered.config.data).unwrap().examples();
    let mut worst: f64 = 0.0;
    let mut steps_ok = true;
    let base = ModelParams::init(&layered.config.model, 40, InitStyle::Training).unwrap();
    for (params, objective) in [
        (base.clone(), Objective::Pretrain),
        (base.flexify(FlexMode::Shared, 41).unwrap(), Objective::Shared),
        (base.flexify(FlexMode::Lora, 42).unwrap(), Objective::Distill),
    ] {
        let mut cfg = TrainConfig { objective, steps: 8, batch: 3, seed: 43, ..TrainConfig::default() };
        if objective == Objective::Shared {
            cfg.mmd_weight = 0.3;
            cfg.mmd_every = 2;
            cfg.mmd_batch = 3;
        }
        let mut full = Trainer::new(params.clone(), &cfg).unwrap();
        let straight = full.run(&data, &cfg, |_| {}).unwrap();
        let half = TrainConfig { steps: 4, ..cfg.clone() };
        let mut first = Trainer::new(params, &half).unwrap();
        let mut trace = first.run(&data, &half, |_| {}).unwrap();
        let path = d(&format!("resume_{objective:?}.fxck"));
        Checkpoint::from_trainer(&first, Some(&half)).save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
        trace.extend(resumed.run(&data, &cfg, |_| {}).unwrap());
        steps_ok &= trace.len() == straight.len();
        for (a, b) in trace.iter().zip(&straight) {
            worst = worst.max((a.loss - b.loss).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = identical == jobs.len() && steps_ok && worst <= 1e-12 && secs < 600.0;
    verdict(
        10,
        ok,
        &format!("{identical}/{} manifests replay identically, resume loss gap {worst:.1e} (tol 1e-12), {secs:.1}s", jobs.len()),
    );
}
