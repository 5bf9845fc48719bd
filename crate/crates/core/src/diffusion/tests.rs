use super::*;
use crate::backbone::{Cond, FlexMode, InitStyle, ModelConfig};
use crate::numerics::gradcheck::check_gradients_sampled;
use crate::numerics::SplitRng;
use crate::scheduler_guidance::InferencePlan;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

#[test]
fn constant_schedule_product() {
    let s = NoiseSchedule::new(BetaSchedule::Constant(0.02), 3).unwrap();
    assert!((s.alpha_bar(3) - 0.941192).abs() < 1e-15);
    assert_eq!(s.posterior_var(1), 0.0);
}

#[test]
fn linear_schedule_shape() {
    let s = NoiseSchedule::linear(1000).unwrap();
    assert!((s.beta(1) - 1e-4).abs() < 1e-15);
    assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    let short = NoiseSchedule::linear(100).unwrap();
    assert!((short.beta(1) - 1e-3).abs() < 1e-15 && (short.beta(100) - 0.2).abs() < 1e-12);
    for s in [&s, &short] {
        for t in 2..=s.steps {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(s.steps) < 1e-3);
    }
    assert!(NoiseSchedule::new(BetaSchedule::Constant(1.0), 4).is_err());
    assert!(NoiseSchedule::linear(0).is_err());
}

#[test]
fn q_sample_cases() {
    let s = NoiseSchedule::linear(100).unwrap();
    let x0 = SplitRng::new(1).normal_tensor(&[1, 4, 4]);
    let clean = q_sample(&s, &x0, 30, &Tensor::zeros(&[1, 4, 4])).unwrap();
    let a = s.alpha_bar(30).sqrt();
    for (c, x) in clean.data().iter().zip(x0.data()) {
        assert_eq!(*c, a * x);
    }
    assert!(matches!(q_sample(&s, &x0, 0, &x0), Err(DiffusionError::BadStep { .. })));
    assert!(q_sample(&s, &x0, 101, &x0).is_err());
    let mut rng = SplitRng::new(2);
    let t = 40;
    let noise = rng.normal_tensor(&[100_000]);
    let xt = q_sample(&s, &Tensor::zeros(&[100_000]), t, &noise).unwrap();
    let (_, var) = mean_var(xt.data());
    assert!((var / (1.0 - s.alpha_bar(t)) - 1.0).abs() < 0.02);
}

#[test]
fn iterated_corruption_matches_closed_form() {
    let s = NoiseSchedule::linear(50).unwrap();
    let mut rng = SplitRng::new(3);
    let n = 100_000;
    for t in [1, 7, 33] {
        let mut x = vec![0.7; n];
        for k in 1..=t {
            let (a, b) = (s.alpha(k).sqrt(), s.beta(k).sqrt());
            for v in x.iter_mut() {
                *v = a * *v + b * rng.normal();
            }
        }
        let (m, var) = mean_var(&x);
        let ab = s.alpha_bar(t);
        assert!((m / (ab.sqrt() * 0.7) - 1.0).abs() < 0.02, "t={t} mean {m}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.02, "t={t} var {var}");
    }
}

#[test]
fn step_closed_forms() {
    let s = NoiseSchedule::linear(50).unwrap();
    let x = SplitRng::new(4).normal_tensor(&[1, 2, 2]);
    let zero = ModelOutput { eps: Tensor::zeros(&[1, 2, 2]), var_logits: None };
    let z = Tensor::zeros(&[1, 2, 2]);
    for t in [1, 5] {
        let y = p_sample_step(&s, &x, t, &zero, &z).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b * (1.0 / s.alpha(t).sqrt()));
        }
    }
    // t = 1 never injects noise
    let big = Tensor::full(&[1, 2, 2], 100.0);
    assert!(p_sample_step(&s, &x, 1, &zero, &big).unwrap().bit_eq(&p_sample_step(&s, &x, 1, &zero, &z).unwrap()));
}

#[test]
fn learned_variance_interpolates_between_endpoints() {
    let s = NoiseSchedule::linear(50).unwrap();
    let hi = step_variance(&s, 5, Some(&Tensor::full(&[2], 1.0)), &[2]);
    let lo = step_variance(&s, 5, Some(&Tensor::full(&[2], -1.0)), &[2]);
    assert!((hi.data()[0] - s.beta(5)).abs() < 1e-15);
    assert!((lo.data()[0] - s.posterior_var(5)).abs() < 1e-15);
    let first = step_variance(&s, 1, Some(&Tensor::full(&[1], -1.0)), &[1]);
    assert!((first.data()[0] - s.posterior_var(2)).abs() < 1e-15);
    let mid = step_variance(&s, 5, Some(&Tensor::full(&[1], 0.0)), &[1]).data()[0];
    assert!((mid - (s.beta(5) * s.posterior_var(5)).sqrt()).abs() < 1e-15);
}

fn oracle(steps: usize, exact_variance: bool) -> GaussianOracle {
    GaussianOracle { schedule: NoiseSchedule::linear(steps).unwrap(), mean: 0.6, var: 0.25, shape: [1, 1, 1], exact_variance }
}

fn oracle_samples(o: &GaussianOracle, sampler: Sampler, n: usize) -> Vec<f64> {
    let plan = InferencePlan::baseline(o.schedule.steps, 2, 2, None).unwrap();
    let seeds: Vec<u64> = (0..n as u64).collect();
    let conds = vec![Cond::Class(0); n];
    let opts = SampleOptions { sampler, ..SampleOptions::default() };
    let (xs, _) = sample_loop(o, &o.schedule, &plan, &conds, &seeds, &opts, None).unwrap();
    xs.iter().map(|x| x.data()[0]).collect()
}

#[test]
fn ddpm_with_exact_denoiser_recovers_the_data_distribution() {
    for (steps, exact) in [(100, true), (1000, false)] {
        let o = oracle(steps, exact);
        let v = oracle_samples(&o, Sampler::Ddpm, 10_000);
        let (m, var) = mean_var(&v);
        let se = (var / v.len() as f64).sqrt();
        assert!((m - o.mean).abs() < 3.0 * se, "T={steps} mean {m}");
        assert!((var / o.var - 1.0).abs() < 0.03, "T={steps} var {var}");
    }
}

#[test]
fn fixed_variance_chain_matches_its_linear_recursion() {
    // with the posterior variance fixed, the chain is a scalar affine recursion
    let o = oracle(100, false);
    let s = &o.schedule;
    let (mut m, mut v) = (0.0, 1.0);
    for t in (1..=s.steps).rev() {
        let ab = s.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * o.var + 1.0 - ab);
        let c = s.beta(t) / (1.0 - ab).sqrt();
        let a = (1.0 - c * k) / s.alpha(t).sqrt();
        m = a * m + c * k * ab.sqrt() * o.mean / s.alpha(t).sqrt();
        v = a * a * v + if t > 1 { s.posterior_var(t) } else { 0.0 };
    }
    let samples = oracle_samples(&o, Sampler::Ddpm, 10_000);
    let (em, ev) = mean_var(&samples);
    assert!((em - m).abs() < 3.0 * (ev / 10_000.0).sqrt());
    assert!((ev / v - 1.0).abs() < 0.03, "{ev} vs {v}");
}

#[test]
fn ddim_is_deterministic_and_agrees_in_distribution() {
    let o = oracle(100, false);
    let a = oracle_samples(&o, Sampler::Ddim, 4000);
    let b = oracle_samples(&o, Sampler::Ddim, 4000);
    assert_eq!(a, b);
    let (m, var) = mean_var(&a);
    assert!((m - o.mean).abs() < 3.0 * (var / a.len() as f64).sqrt());
    assert!((var / o.var - 1.0).abs() < 0.1);
}

#[test]
fn eps_loss_stubs() {
    let mut rng = SplitRng::new(5);
    let noise: Vec<Tensor> = (0..10_000).map(|_| rng.normal_tensor(&[1, 4, 4])).collect();
    assert_eq!(eps_mse(&noise, &noise).unwrap(), 0.0);
    let zeros = vec![Tensor::zeros(&[1, 4, 4]); noise.len()];
    let l = eps_mse(&zeros, &noise).unwrap();
    assert!((l / 16.0 - 1.0).abs() < 0.02, "{l}");
}

#[test]
fn eps_loss_gradients() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, 6, InitStyle::Random).unwrap().flexify(FlexMode::Shared, 7).unwrap();
    let mut rng = SplitRng::new(8);
    let items: Vec<ForwardItem> = [2, 4]
        .iter()
        .enumerate()
        .map(|(k, &p)| ForwardItem { x: rng.normal_tensor(&[1, 8, 8]), t: 3 + k, cond: Cond::Class(k), p })
        .collect();
    let noises: Vec<Tensor> = items.iter().map(|_| rng.normal_tensor(&[1, 8, 8])).collect();
    let lens: Vec<usize> = items.iter().map(|it| cfg.tokens(it.p)).collect();
    let layout = ExecLayout::independent(&lens);
    let names = ["flex.embed.w", "blocks.1.mlp.fc2.w", "pse.p4"];
    let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    check_gradients_sampled(
        &inputs,
        |tape, vars| {
            let mut b = Binder::frozen(tape, &params);
            for (n, v) in names.iter().zip(vars) {
                b = b.with_override(n, *v);
            }
            eps_mse_loss(&b, &items, &noises, &layout).map_err(|e| match e {
                DiffusionError::Numerics(n) => n,
                other => panic!("{other}"),
            })
        },
        6,
    )
    .unwrap();
}

#[test]
fn sampling_is_deterministic_and_lora_baseline_is_exact() {
    let cfg = ModelConfig::tiny();
    let base = ModelParams::init(&cfg, 9, InitStyle::Random).unwrap();
    let flex = base.flexify(FlexMode::Lora, 10).unwrap();
    let s = NoiseSchedule::linear(cfg.steps).unwrap();
    let plan = InferencePlan::parse("weak:0,powerful:100", 4, 2).unwrap();
    let conds = vec![Cond::Class(0), Cond::Class(2)];
    let seeds = [11, 12];
    let opts = SampleOptions::default();
    let (a, _) = sample_loop(&base, &s, &plan, &conds, &seeds, &opts, None).unwrap();
    let (b, log) = sample_loop(&flex, &s, &plan, &conds, &seeds, &opts, None).unwrap();
    let (c, _) = sample_loop(&flex, &s, &plan, &conds, &seeds, &opts, None).unwrap();
    for ((x, y), z) in a.iter().zip(&b).zip(&c) {
        assert!(x.bit_eq(y) && y.bit_eq(z));
    }
    assert_eq!(log.sizes.len(), 100);
    assert_eq!(log.stats.forwards[&2], 200);
    let short = InferencePlan::parse("weak:0,powerful:50", 4, 2).unwrap();
    assert!(matches!(
        sample_loop(&base, &s, &short, &conds, &seeds, &opts, None),
        Err(DiffusionError::IncompletePlan(_))
    ));
}
