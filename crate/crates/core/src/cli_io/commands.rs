//! Command bodies shared by the binary, the bindings and manifest replay.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::config::{Layered, RunConfig, SampleConfig};
use super::image;
use super::lock::DirLock;
use super::manifest::{input_artifact, Artifact, FlopsSummary, Job, RunManifest, MANIFEST_NAME};
use crate::analysis::{
    activation_distance, activation_trace, divergence_curve, diversity, filtered_step_generate, matrix_csv, AnalysisError,
    BandFilter,
};
use crate::backbone::{BackboneError, Cond, Conditioning, FlexMode, InitStyle, ModelConfig, ModelParams};
use crate::compute_model::{
    flops_per_step, layout_flops, plan_flops, plan_flops_with, token_linear_cost, ComputeError, FlopsReport, ItemCost,
    LatencyModel, Packing, StepGeometry,
};
use crate::data::{generate, nearest_mean_accuracy, DataError, DatasetReader, Example, RawDataset, SyntheticSpec};
use crate::diffusion::{sample_loop, DiffusionError, NoiseSchedule, SampleOptions, Sampler};
use crate::flexify_training::{Metrics, TrainError, Trainer};
use crate::scheduler_guidance::{InferencePlan, SchedulerError};

/// Failure classes with distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Run(_) => 1,
        }
    }
}

impl From<super::config::ConfigError> for CliError {
    fn from(e: super::config::ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) | DataError::NotSeparable(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::Config(_) | BackboneError::UnsupportedPatch(_) | BackboneError::Tokenizer(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<SchedulerError> for CliError {
    fn from(e: SchedulerError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ComputeError> for CliError {
    fn from(e: ComputeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Backbone(b) => b.into(),
            DiffusionError::Scheduler(s) => s.into(),
            DiffusionError::IncompletePlan(_) | DiffusionError::BadStep { .. } | DiffusionError::Schedule(_) => CliError::Config(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::NoData => CliError::Config(e.to_string()),
            TrainError::Backbone(b) => b.into(),
            TrainError::Diffusion(d) => d.into(),
            _ => CliError::Run(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Diffusion(d) => d.into(),
            AnalysisError::Backbone(b) => b.into(),
            AnalysisError::Numerics(_) => CliError::Run(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_out(e: std::io::Error) -> CliError {
    CliError::Run(e.to_string())
}

fn io_in(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Collects artifacts written into the output directory.
struct Out<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Out<'_> {
    fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(rel), data).map_err(io_out)?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn image(&mut self, rel_stem: &str, x: &crate::numerics::Tensor) -> Result<(), CliError> {
        let bytes = image::encode(x).map_err(CliError::Config)?;
        self.bytes(&format!("{rel_stem}.{}", image::extension(x)), &bytes)
    }

    fn checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<(), CliError> {
        let bytes = ck.to_bytes()?;
        self.bytes(rel, &bytes)
    }
}

/// Run `job` into `out`, write `manifest.toml` there and return the manifest.
pub fn execute(job: &Job, layered: &Layered, out: &Path, log: &mut dyn Write) -> Result<RunManifest, CliError> {
    let _lock = DirLock::acquire(out).map_err(io_out)?;
    let mut manifest = RunManifest::new(job.clone(), layered.config.clone(), layered.sources.clone());
    for p in job.inputs() {
        manifest.inputs.push(input_artifact(p).map_err(io_in(p))?);
    }
    let mut o = Out { dir: out, written: Vec::new() };
    let cfg = &layered.config;
    match job {
        Job::Train { data, resume } => train(cfg, data.as_deref(), resume.as_deref(), &mut o, &mut manifest, log)?,
        Job::Flexify { from } => flexify(cfg, from, &mut o, &mut manifest, log)?,
        Job::Sample { checkpoint } => sample(cfg, checkpoint, &mut o, &mut manifest, log)?,
        Job::Flops { checkpoint, cost } => flops(cfg, checkpoint.as_deref(), cost, &mut o, &mut manifest, log)?,
        Job::PackPlan { sizes } => pack_plan(cfg, sizes, &mut o, &mut manifest, log)?,
        Job::FilterStep { checkpoint, step, filter, seeds } => {
            filter_step(cfg, checkpoint, *step, filter, *seeds, &mut o, &mut manifest, log)?
        }
        Job::Divergence { checkpoint, ts, probes } => divergence(cfg, checkpoint, ts, *probes, &mut o, &mut manifest, log)?,
        Job::ActivationDistance { checkpoint, taps } => activations(cfg, checkpoint, taps, &mut o, &mut manifest, log)?,
        Job::Diversity { checkpoint } => sample_diversity(cfg, checkpoint, &mut o, &mut manifest, log)?,
        Job::DatasetGenerate => dataset_generate(cfg, &mut o, &mut manifest, log)?,
        Job::DatasetInspect { path } => dataset_inspect(path, &mut o, &mut manifest, log)?,
    }
    for rel in &o.written {
        manifest.artifacts.push(Artifact::of(out, rel).map_err(io_out)?);
    }
    std::fs::write(out.join(MANIFEST_NAME), manifest.to_toml()).map_err(io_out)?;
    Ok(manifest)
}

/// Outcome of re-running a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub original: RunManifest,
    pub replayed: RunManifest,
    /// Artifact paths whose hash differs or which exist on one side only.
    pub mismatched: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-run the job recorded in `manifest` into `out` and compare artifact hashes.
pub fn replay(manifest: &Path, out: &Path, log: &mut dyn Write) -> Result<ReplayReport, CliError> {
    let original = RunManifest::load(manifest).map_err(io_in(manifest))?;
    if original.config.hash() != original.config_hash {
        return Err(CliError::Data(format!("{}: config does not match its recorded hash", manifest.display())));
    }
    for a in &original.inputs {
        let now = input_artifact(Path::new(&a.path)).map_err(io_in(Path::new(&a.path)))?;
        if now.sha256 != a.sha256 {
            return Err(CliError::Data(format!("input {} changed since the run", a.path)));
        }
    }
    let layered = Layered { config: original.config.clone(), sources: original.sources.clone() };
    let replayed = execute(&original.job, &layered, out, log)?;
    let index = |m: &RunManifest| m.artifacts.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect::<BTreeMap<_, _>>();
    let (a, b) = (index(&original), index(&replayed));
    let mut mismatched: Vec<String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
    mismatched.dedup();
    Ok(ReplayReport { original, replayed, mismatched })
}

fn load_examples(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Example>, CliError> {
    let examples = match data {
        Some(path) => RawDataset::from_bytes(&std::fs::read(path).map_err(io_in(path))?)?.examples(),
        None => generate(&cfg.data)?.examples(),
    };
    let m = &cfg.model;
    for (i, e) in examples.iter().enumerate() {
        if e.x.shape() != [m.c_in, m.height, m.width] {
            return Err(CliError::Config(format!(
                "example {i} has shape {:?}, model expects [{}, {}, {}]",
                e.x.shape(),
                m.c_in,
                m.height,
                m.width
            )));
        }
        if m.conditioning == Conditioning::Class && e.label >= m.num_classes {
            return Err(CliError::Config(format!("example {i} has label {} but the model has {} classes", e.label, m.num_classes)));
        }
    }
    Ok(examples)
}

fn run_trainer(
    trainer: &mut Trainer,
    examples: &[Example],
    tc: &crate::flexify_training::TrainConfig,
    o: &mut Out<'_>,
    manifest: &mut RunManifest,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let every = (tc.steps / 20).max(1);
    let lines = trainer.run(examples, tc, |m: &Metrics| {
        if m.step % every == 0 || m.step == tc.steps {
            let _ = writeln!(log, "{m}");
        }
    })?;
    let mut csv = format!("{}\n", Metrics::CSV_HEADER);
    for m in &lines {
        csv.push_str(&m.csv());
        csv.push('\n');
    }
    o.bytes("metrics.csv", csv.as_bytes())?;
    o.checkpoint("checkpoint.fxck", &Checkpoint::from_trainer(trainer, Some(tc)))?;
    if let Some(last) = lines.last() {
        manifest.metrics.insert("final_loss".into(), last.loss);
        let tail = &lines[lines.len() - (lines.len() / 10).max(1)..];
        manifest.metrics.insert("tail_mean_loss".into(), tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64);
    }
    manifest.metrics.insert("steps".into(), trainer.step as f64);
    manifest.metrics.insert("train_flops".into(), trainer.flops as f64);
    manifest.seed = tc.seed;
    Ok(())
}

fn train(
    cfg: &RunConfig,
    data: Option<&Path>,
    resume: Option<&Path>,
    o: &mut Out<'_>,
    manifest: &mut RunManifest,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let mut trainer = match resume {
        Some(path) => Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.into_trainer()?,
        None => {
            let params = ModelParams::init(&cfg.model, cfg.train.seed, InitStyle::Training)?;
            Trainer::new(params, &cfg.train)?
        }
    };
    let mut check = cfg.clone();
    check.model = trainer.params.config.clone();
    let examples = load_examples(&check, data)?;
    run_trainer(&mut trainer, &examples, &cfg.train, o, manifest, log)
}

fn flexify(cfg: &RunConfig, from: &Path, o: &mut Out<'_>, manifest: &mut RunManifest, log: &mut dyn Write) -> Result<(), CliError> {
    if cfg.flexify.mode == FlexMode::Base {
        return Err(CliError::Config("flexify.mode must be shared or lora".into()));
    }
    let ck = Checkpoint::load(from).map_err(|e| CliError::Data(format!("{}: {e}", from.display())))?;
    if ck.params.mode != FlexMode::Base {
        return Err(CliError::Data(format!("{} is already flexified ({})", from.display(), ck.params.mode.name())));
    }
    let flex = ck.ema_params().flexify(cfg.flexify.mode, cfg.flexify.seed)?;
    let report = flex.report_against(&ck.params);
    manifest.metrics.insert("added_params".into(), report.added as f64);
    manifest.metrics.insert("trainable_params".into(), report.trainable as f64);
    let mut trainer = Trainer::new(flex, &cfg.finetune)?;
    let mut check = cfg.clone();
    check.model = trainer.params.config.clone();
    let examples = load_examples(&check, None)?;
    run_trainer(&mut trainer, &examples, &cfg.finetune, o, manifest, log)
}

/// The plan for `steps`, with `--cfg-scale` folded in.
pub fn build_plan(sc: &SampleConfig, steps: usize, p_weak: usize, p_powerful: usize) -> Result<InferencePlan, CliError> {
    let mut text = sc.plan.clone().unwrap_or_else(|| format!("weak:0,powerful:{steps}"));
    if let Some(s) = sc.cfg_scale {
        if text.contains("cfg=") {
            return Err(CliError::Config("guidance scale given both in the plan and as cfg_scale".into()));
        }
        write!(text, ";cfg={s:?};ratio={:?}", sc.cfg_ratio).expect("string write");
    }
    Ok(InferencePlan::parse(&text, p_weak, p_powerful)?)
}

fn sample_options(sc: &SampleConfig) -> Result<SampleOptions, CliError> {
    let packing: Packing = sc.packing.parse().map_err(CliError::Config)?;
    let sampler = match sc.sampler.as_str() {
        "ddpm" => Sampler::Ddpm,
        "ddim" => Sampler::Ddim,
        s => return Err(CliError::Config(format!("sampler must be ddpm or ddim, got {s:?}"))),
    };
    Ok(SampleOptions { sampler, packing, record: false })
}

fn class_cond(m: &ModelConfig, class: usize) -> Cond {
    match m.conditioning {
        Conditioning::Class => Cond::Class(class % m.num_classes),
        Conditioning::Cross => Cond::Tokens(vec![class % m.vocab]),
    }
}

/// Model, schedule and plan for a sampling-style job.
fn sampling_setup(cfg: &RunConfig, path: &Path) -> Result<(ModelParams, NoiseSchedule, InferencePlan), CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let model = if cfg.sample.ema { ck.ema_params() } else { ck.params };
    let m = &model.config;
    if let Some(s) = cfg.sample.steps {
        if s != m.steps {
            return Err(CliError::Config(format!("--steps {s} but the checkpoint was trained with {} steps", m.steps)));
        }
    }
    let plan = build_plan(&cfg.sample, m.steps, m.p_weak, m.p_powerful)?;
    if plan.steps != m.steps {
        return Err(CliError::Config(format!("plan covers {} steps, the checkpoint uses {}", plan.steps, m.steps)));
    }
    let schedule = NoiseSchedule::linear(m.steps)?;
    Ok((model, schedule, plan))
}

fn conds_and_seeds(cfg: &RunConfig, m: &ModelConfig, n: usize) -> (Vec<Cond>, Vec<u64>) {
    let conds = (0..n).map(|i| class_cond(m, cfg.sample.class.unwrap_or(i))).collect();
    let seeds = (0..n as u64).map(|i| cfg.sample.seed + i).collect();
    (conds, seeds)
}

fn record_flops(manifest: &mut RunManifest, r: &FlopsReport) {
    manifest.flops = Some(FlopsSummary { total: r.total, baseline: r.baseline, compute_fraction: r.compute_fraction });
}

fn record_plan(manifest: &mut RunManifest, plan: &InferencePlan) {
    manifest.plan = Some(plan.to_string());
    manifest.step_sizes = plan.cond_sizes();
}

fn sample(cfg: &RunConfig, path: &Path, o: &mut Out<'_>, manifest: &mut RunManifest, log: &mut dyn Write) -> Result<(), CliError> {
    let (model, schedule, plan) = sampling_setup(cfg, path)?;
    let opts = sample_options(&cfg.sample)?;
    let (conds, seeds) = conds_and_seeds(cfg, &model.config, cfg.sample.count);
    let (images, trace) = sample_loop(&model, &schedule, &plan, &conds, &seeds, &opts, None)?;
    for (i, x) in images.iter().enumerate() {
        o.image(&format!("sample_{i:03}"), x)?;
    }
    let report = plan_flops(&plan, &model, 0);
    let mut text = report.to_kv();
    writeln!(text, "forwards={}", trace.stats.total_forwards()).expect("string write");
    o.bytes("flops.txt", text.as_bytes())?;
    writeln!(log, "wrote {} images; compute_fraction={:.6}", images.len(), report.compute_fraction).map_err(io_out)?;
    record_flops(manifest, &report);
    record_plan(manifest, &plan);
    manifest.seed = cfg.sample.seed;
    manifest.metrics.insert("forwards".into(), trace.stats.total_forwards() as f64);
    Ok(())
}

fn flops(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    cost: &str,
    o: &mut Out<'_>,
    manifest: &mut RunManifest,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let params = match checkpoint {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?.params),
        None => None,
    };
    let m = params.as_ref().map_or(&cfg.model, |p| &p.config);
    m.validate()?;
    let plan = build_plan(&cfg.sample, m.steps, m.p_weak, m.p_powerful)?;
    let report = match (cost, &params) {
        ("ffn", _) => plan_flops_with(&plan, token_linear_cost(m)),
        ("model", Some(p)) => plan_flops(&plan, p, 0),
        ("model", None) => plan_flops_with(&plan, |p| flops_per_step(&StepGeometry::from_config(m, p))),
        (c, _) => return Err(CliError::Config(format!("cost must be model or ffn, got {c:?}"))),
    };
    let text = report.to_kv();
    log.write_all(text.as_bytes()).map_err(io_out)?;
    o.bytes("flops.txt", text.as_bytes())?;
    record_flops(manifest, &report);
    record_plan(manifest, &plan);
    Ok(())
}

fn pack_plan(cfg: &RunConfig, sizes: &[usize], o: &mut Out<'_>, manifest: &mut RunManifest, log: &mut dyn Write) -> Result<(), CliError> {
    let m = &cfg.model;
    m.validate()?;
    let spec = m.patch_spec()?;
    for &p in sizes {
        if !spec.supported.contains(&p) {
            return Err(CliError::Config(format!("patch size {p} not in {:?}", spec.supported)));
        }
    }
    let packing: Packing = cfg.sample.packing.parse().map_err(CliError::Config)?;
    let lens: Vec<usize> = sizes.iter().map(|&p| m.tokens(p)).collect();
    let latency = LatencyModel::default();
    let s = packing.realize(&lens, m.d, m.depth, &latency)?;
    let items: Vec<ItemCost> = sizes.iter().map(|&p| ItemCost { p, d_lora: None, ctx_len: 0 }).collect();
    let f = layout_flops(m, &items, &s.layout());
    let mut text = format!("strategy={}\ndescription={}\nlaunches={}\npadding={}\n", s.id, s.description, s.launches, s.padding());
    for (k, r) in s.rows.iter().enumerate() {
        writeln!(text, "row.{k}=len {} items {:?}", r.len, r.items).expect("string write");
    }
    writeln!(text, "flops={}\nlatency_proxy={:e}", f.model_total(), s.latency_proxy(m.d, m.depth, &latency)).expect("string write");
    log.write_all(text.as_bytes()).map_err(io_out)?;
    o.bytes("pack_plan.txt", text.as_bytes())?;
    manifest.metrics.insert("strategy".into(), s.id as f64);
    manifest.metrics.insert("flops".into(), f.model_total() as f64);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn filter_step(
    cfg: &RunConfig,
    path: &Path,
    step: usize,
    filter: &str,
    n: usize,
    o: &mut Out<'_>,
    manifest: &mut RunManifest,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let filter: BandFilter = filter.parse()?;
    let (model, schedule, plan) = sampling_setup(cfg, path)?;
    let opts = sample_options(&cfg.sample)?;
    let (conds, seeds) = conds_and_seeds(cfg, &model.config, n);
    let r = filtered_step_generate(&model, &schedule, &plan, &conds, &seeds, step, &filter, None, &opts)?;
    let mut csv = String::from("seed,l2,ssim\n");
    for (i, seed) in seeds.iter().enumerate() {
        writeln!(csv, "{seed},{:e},{:e}", r.l2[i], r.ssim[i]).expect("string write");
        o.image(&format!("filtered_{i:03}"), &r.images[i])?;
        if let Some(d) = image::difference(&r.images[i], &r.baseline[i]) {
            o.image(&format!("diff_{i:03}"), &d)?;
        }
    }
    o.bytes("filter_step.csv", csv.as_bytes())?;
    let mean_ssim = r.ssim.iter().sum::<f64>() / r.ssim.len().max(1) as f64;
    writeln!(log, "step={step} filter={filter:?} mean_l2={:.6} mean_ssim={mean_ssim:.6}", r.mean_l2()).map_err(io_out)?;
    manifest.metrics.insert("mean_l2".into(), r.mean_l2());
    manifest.metrics.insert("mean_ssim".into(), mean_ssim);
    record_plan(manifest, &plan);
    manifest.seed = cfg.sample.seed;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn divergence(
    cfg: &RunConfig,
    path: &Path,
    ts: &[usize],
    probes: usize,
    o: &mut Out<'_>,
    manifest: &mut RunManifest,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let (model, schedule, _) = sampling_setup(cfg, path)?;
    let m = &model.config;
    let mut check = cfg.clone();
    check.model = m.clone();
    let examples = load_examples(&check, None)?;
    if examples.len() < probes || probes == 0 {
        return Err(CliError::Config(format!("{probes} probes requested, dataset has {}", examples.len())));
    }
    let xs: Vec<_> = examples[..probes].iter().map(|e| e.x.clone()).collect();
    let conds: Vec<_> = examples[..probes].iter().map(|e| class_cond(m, e.label)).collect();
    let ts: Vec<usize> = if ts.is_empty() { (1..=10).map(|k| (k * m.steps / 10).max(1)).collect() } else { ts.to_vec() };
    let curve = divergence_curve(&model, &schedule, &xs, &conds, &ts, m.p_weak, m.p_powerful, cfg.sample.seed)?;
    o.bytes("divergence.csv", curve.to_csv().as_bytes())?;
    let rho = curve.spearman();
    writeln!(log, "spearman(t, divergence)={rho:.4}").map_err(io_out)?;
    manifest.metrics.insert("spearman".into(), rho);
    manifest.seed = cfg.sample.seed;
    Ok(())
}

fn activations(
    cfg: &RunConfig,
    path: &Path,
    taps: &[usize],
    o: &mut Out<'_>,
    manifest: &mut RunManifest,
    log: &mut dyn Write,
) -> Result<(), CliError> {
    let (model, schedule, plan) = sampling_setup(cfg, path)?;
    let taps: Vec<usize> = if taps.is_empty() { (0..model.config.depth).collect() } else { taps.to_vec() };
    let cond = class_cond(&model.config, cfg.sample.class.unwrap_or(0));
    let trace = activation_trace(&model, &schedule, &plan, &cond, cfg.sample.seed, &taps)?;
    let d = activation_distance(&trace);
    let labels: Vec<String> = taps.iter().map(|j| format!("block{j}")).collect();
    o.bytes("activation_distance.csv", matrix_csv(&d, &labels).as_bytes())?;
    for (label, row) in labels.iter().zip(&d) {
        let finite: Vec<f64> = row.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
        writeln!(log, "{label} mean_distance={mean:.6}").map_err(io_out)?;
        manifest.metrics.insert(format!("{label}.mean"), mean);
    }
    record_plan(manifest, &plan);
    manifest.seed = cfg.sample.seed;
    Ok(())
}

fn sample_diversity(cfg: &RunConfig, path: &Path, o: &mut Out<'_>, manifest: &mut RunManifest, log: &mut dyn Write) -> Result<(), CliError> {
    let (model, schedule, plan) = sampling_setup(cfg, path)?;
    let opts = sample_options(&cfg.sample)?;
    let n = cfg.sample.count;
    let cond = class_cond(&model.config, cfg.sample.class.unwrap_or(0));
    let conds = vec![cond; n];
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.sample.seed + i).collect();
    let (images, _) = sample_loop(&model, &schedule, &plan, &conds, &seeds, &opts, None)?;
    for (i, x) in images.iter().enumerate() {
        o.image(&format!("sample_{i:03}"), x)?;
    }
    let d = diversity(&images)?;
    let text = format!("pairs={}\nmean_l2={:e}\nmean_ssim={:e}\n", d.pairs, d.mean_l2, d.mean_ssim);
    log.write_all(text.as_bytes()).map_err(io_out)?;
    o.bytes("diversity.txt", text.as_bytes())?;
    manifest.metrics.insert("mean_l2".into(), d.mean_l2);
    manifest.metrics.insert("mean_ssim".into(), d.mean_ssim);
    record_plan(manifest, &plan);
    manifest.seed = cfg.sample.seed;
    Ok(())
}

fn dataset_generate(cfg: &RunConfig, o: &mut Out<'_>, manifest: &mut RunManifest, log: &mut dyn Write) -> Result<(), CliError> {
    let spec: &SyntheticSpec = &cfg.data;
    let raw = generate(spec)?;
    o.bytes("dataset.fxdt", &raw.to_bytes())?;
    let acc = nearest_mean_accuracy(&raw.examples(), spec.num_classes);
    writeln!(log, "wrote {} examples, nearest-mean accuracy {acc:.4}", raw.len()).map_err(io_out)?;
    manifest.metrics.insert("count".into(), raw.len() as f64);
    manifest.metrics.insert("nearest_mean_accuracy".into(), acc);
    manifest.seed = spec.seed;
    Ok(())
}

fn dataset_inspect(path: &Path, o: &mut Out<'_>, manifest: &mut RunManifest, log: &mut dyn Write) -> Result<(), CliError> {
    let reader = DatasetReader::open(path)?;
    let h = reader.header();
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    let (mut n, mut sum) = (0u64, 0.0);
    for e in reader {
        let e = e?;
        *counts.entry(e.label).or_default() += 1;
        sum += e.x.mean();
        n += 1;
    }
    let mut text = format!("{h:?}\ncount={n}\nmean_pixel={:e}\n", sum / n.max(1) as f64);
    for (label, c) in &counts {
        writeln!(text, "label.{label}={c}").expect("string write");
    }
    log.write_all(text.as_bytes()).map_err(io_out)?;
    o.bytes("inspect.txt", text.as_bytes())?;
    manifest.metrics.insert("count".into(), n as f64);
    Ok(())
}
