//! Argument parsing for the `flexidit` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::commands::{execute, replay, CliError};
use super::config::{parse_value, resolve};
use super::manifest::Job;

#[derive(Parser, Debug)]
#[command(name = "flexidit", version, about = "Flexible-patch diffusion transformers: train, flexify, sample, plan compute")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (artifacts and manifest.toml).
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps T (built-in default 250).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// e.g. `weak:180,powerful:70`.
    #[arg(long)]
    plan: Option<String>,
    #[arg(long = "cfg-scale")]
    cfg_scale: Option<f64>,
    /// `(1 - s1) / (1 - s2)`, default 2.5.
    #[arg(long = "cfg-ratio")]
    cfg_ratio: Option<f64>,
    /// 1..4 or auto.
    #[arg(long)]
    packing: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Pretrain a base model, or continue any run with --resume.
    Train {
        #[command(flatten)]
        common: Common,
        /// FXDT dataset; the [data] section is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Add flexible patch sizes to a base checkpoint and fine-tune.
    Flexify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
        /// shared or lora.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Generate images under an inference plan.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Report plan compute.
    Flops {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// model (full transformer) or ffn (cost proportional to tokens).
        #[arg(long, default_value = "model")]
        cost: String,
    },
    /// Show how one step's forwards are batched.
    PackPlan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        /// Patch size of every item, e.g. 2,2,4,4.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    Analyze {
        #[command(subcommand)]
        cmd: AnalyzeCmd,
    },
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Re-run a manifest and compare artifact hashes.
    Replay {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Filter the prediction of one step and compare final images.
    FilterStep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        step: usize,
        /// all, low:C or high:C with C in (0, 1].
        #[arg(long, default_value = "high:0.5")]
        filter: String,
        #[arg(long, default_value_t = 32)]
        seeds: usize,
    },
    /// Weak vs powerful prediction distance per timestep.
    Divergence {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ts: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        probes: usize,
    },
    /// Distance between block activations of successive steps.
    ActivationDistance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        taps: Vec<usize>,
    },
    /// Mean pairwise L2 and SSIM of same-class samples.
    Diversity {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        class: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Write the [data] section's synthetic set as FXDT.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize an FXDT file.
    Inspect {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Section whose seed `--seed` sets, and whether `--steps` checks a checkpoint instead of setting T.
#[derive(Clone, Copy)]
enum Scope {
    Train,
    Finetune,
    Sample,
    Data,
    Model,
}

struct Flags(Vec<(String, toml::Value)>);

impl Flags {
    fn put(&mut self, key: &str, v: Option<toml::Value>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v));
        }
    }
}

fn int(v: Option<impl Into<i64>>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x.into()))
}

fn uint(v: Option<usize>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x as i64))
}

fn float(v: Option<f64>) -> Option<toml::Value> {
    v.map(toml::Value::Float)
}

fn string(v: Option<&String>) -> Option<toml::Value> {
    v.map(|s| toml::Value::String(s.clone()))
}

fn common_flags(c: &Common, scope: Scope) -> Result<Flags, CliError> {
    let mut f = Flags(Vec::new());
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        f.put(k.trim(), Some(parse_value(v.trim())));
    }
    let seed = int(c.seed.map(|s| s as i64));
    let steps = uint(c.steps);
    match scope {
        Scope::Train => f.put("train.seed", seed),
        Scope::Finetune => f.put("finetune.seed", seed),
        Scope::Sample => f.put("sample.seed", seed),
        Scope::Data => f.put("data.seed", seed),
        Scope::Model => f.put("sample.seed", seed),
    }
    match scope {
        Scope::Sample => f.put("sample.steps", steps),
        _ => f.put("model.steps", steps),
    }
    Ok(f)
}

fn plan_flags(f: &mut Flags, p: &PlanArgs) {
    f.put("sample.plan", string(p.plan.as_ref()));
    f.put("sample.cfg_scale", float(p.cfg_scale));
    f.put("sample.cfg_ratio", float(p.cfg_ratio));
    f.put("sample.packing", string(p.packing.as_ref()));
}

fn read_config(path: Option<&Path>) -> Result<Option<String>, CliError> {
    path.map(|p| std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))).transpose()
}

fn dispatch(cmd: Cmd, log: &mut dyn Write) -> Result<(), CliError> {
    let (common, flags, job) = match cmd {
        Cmd::Replay { manifest, out } => {
            let r = replay(&manifest, &out, log)?;
            if r.identical() {
                writeln!(log, "replay identical: {} artifacts", r.replayed.artifacts.len()).ok();
                return Ok(());
            }
            return Err(CliError::Run(format!("replay differs in {:?}", r.mismatched)));
        }
        Cmd::Train { common, data, resume } => {
            let f = common_flags(&common, Scope::Train)?;
            (common, f, Job::Train { data, resume })
        }
        Cmd::Flexify { common, from, mode } => {
            let mut f = common_flags(&common, Scope::Finetune)?;
            f.put("flexify.mode", string(mode.as_ref()));
            (common, f, Job::Flexify { from })
        }
        Cmd::Sample { common, plan, checkpoint, count, class } => {
            let mut f = common_flags(&common, Scope::Sample)?;
            plan_flags(&mut f, &plan);
            f.put("sample.count", uint(count));
            f.put("sample.class", uint(class));
            (common, f, Job::Sample { checkpoint })
        }
        Cmd::Flops { common, plan, checkpoint, cost } => {
            let mut f = common_flags(&common, Scope::Model)?;
            plan_flags(&mut f, &plan);
            (common, f, Job::Flops { checkpoint, cost })
        }
        Cmd::PackPlan { common, plan, sizes } => {
            let mut f = common_flags(&common, Scope::Model)?;
            plan_flags(&mut f, &plan);
            (common, f, Job::PackPlan { sizes })
        }
        Cmd::Analyze { cmd } => match cmd {
            AnalyzeCmd::FilterStep { common, plan, checkpoint, step, filter, seeds } => {
                let mut f = common_flags(&common, Scope::Sample)?;
                plan_flags(&mut f, &plan);
                (common, f, Job::FilterStep { checkpoint, step, filter, seeds })
            }
            AnalyzeCmd::Divergence { common, checkpoint, ts, probes } => {
                let f = common_flags(&common, Scope::Sample)?;
                (common, f, Job::Divergence { checkpoint, ts, probes })
            }
            AnalyzeCmd::ActivationDistance { common, plan, checkpoint, taps } => {
                let mut f = common_flags(&common, Scope::Sample)?;
                plan_flags(&mut f, &plan);
                (common, f, Job::ActivationDistance { checkpoint, taps })
            }
            AnalyzeCmd::Diversity { common, plan, checkpoint, count, class } => {
                let mut f = common_flags(&common, Scope::Sample)?;
                plan_flags(&mut f, &plan);
                f.put("sample.count", uint(count));
                f.put("sample.class", uint(class));
                (common, f, Job::Diversity { checkpoint })
            }
        },
        Cmd::Dataset { cmd } => match cmd {
            DatasetCmd::Generate { common } => {
                let f = common_flags(&common, Scope::Data)?;
                (common, f, Job::DatasetGenerate)
            }
            DatasetCmd::Inspect { path, common } => {
                let f = common_flags(&common, Scope::Data)?;
                (common, f, Job::DatasetInspect { path })
            }
        },
    };
    let text = read_config(common.config.as_deref())?;
    let layered = resolve(text.as_deref(), &flags.0)?;
    let manifest = execute(&job, &layered, &common.out, log)?;
    writeln!(log, "manifest {} (config {})", common.out.join(super::manifest::MANIFEST_NAME).display(), &manifest.config_hash[..12])
        .ok();
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match dispatch(cli.cmd, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn main_exit() -> i32 {
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    run_with(std::env::args_os(), &mut out, &mut err)
}
