use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use abbie::analysis::{
    fixed_point_probe, flops_estimate, iteration_sweep, load_task, mc_eval, write_flops_csv, write_mc_csv,
    write_probe_csv, write_sweep_csv, ModelScorer,
};
use abbie::config::{ConfigError, RunConfig};
use abbie::data::{eval_windows, ByteTokenizer, DataError};
use abbie::generate::{generate, SampleOptions};
use abbie::model::{count_params, ModelConfig, ModelContext, Variant};
use abbie::trainer::{eval_perplexity, load_split, train, Checkpoint, EvalSettings, TrainError, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(
    name = "abbie",
    version,
    about = "Train and analyse recursive Head/Body/Tail decoders"
)]
#[command(after_help = "Config overrides are given anywhere as section.key=value, e.g. train.peak_lr=1e-3")]
struct Cli {
    /// TOML run config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $ABBIE_OUT_DIR or runs/default).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing metrics and a checkpoint to the output directory.
    Train {
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out perplexity, plus multiple-choice accuracy if a task is set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Iteration count (default: the training count).
        #[arg(long)]
        r: Option<usize>,
        /// Multiple-choice task (JSON lines); overrides eval.task.
        #[arg(long)]
        task: Option<PathBuf>,
    },
    /// Held-out perplexity at several iteration counts.
    SweepIters {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        r: Option<Vec<usize>>,
        /// Loop a Std model past r = 1.
        #[arg(long)]
        force: bool,
    },
    /// Distances between consecutive Body states on held-out windows.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        r_max: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Closed-form compute estimate.
    Flops {
        /// Preset to count; `config` uses the loaded [model] section.
        #[arg(long, value_enum, default_value_t = Preset::Config)]
        preset: Preset,
        /// Variant (default: the config's).
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        r: Vec<usize>,
        /// Training tokens D; accepts 4e9.
        #[arg(long, default_value = "4e9")]
        tokens: String,
    },
    /// Continue a prompt.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        r: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Config,
    Desk,
    #[value(name = "reference-200m")]
    Reference200m,
    #[value(name = "reference-350m")]
    Reference350m,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Train(e.into())
    }
}

impl CliError {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            CliError::Config(ConfigError::UnknownKey(_)) => ("unknown_key", 3),
            CliError::Config(ConfigError::InvalidOverride(_)) => ("invalid_override", 4),
            CliError::Train(TrainError::Data(DataError::MissingCorpus(_))) => ("missing_corpus", 5),
            CliError::Config(_) | CliError::Train(TrainError::Config(_)) => ("config", 6),
            CliError::Train(TrainError::Checkpoint(_)) => ("checkpoint", 7),
            CliError::Train(TrainError::NonFinite { .. }) => ("non_finite", 8),
            CliError::Usage(_) => ("usage", 2),
            CliError::Train(TrainError::Data(_)) => ("data", 9),
            CliError::Train(_) | CliError::Write { .. } => ("io", 1),
        }
    }
}

/// Splits `section.key=value` overrides out of the raw arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    args.into_iter().partition(|a| {
        let Some((key, _)) = a.split_once('=') else {
            return false;
        };
        !key.starts_with('-')
            && key.contains('.')
            && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
    })
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("ABBIE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    let f = File::create(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufWriter::new(f))
}

fn csv<F>(path: &Path, write: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    write(&mut w).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    ctx: ModelContext<f32>,
}

fn load_model(path: Option<PathBuf>, out: &Path) -> Result<Loaded, CliError> {
    let path = path.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&path).map_err(TrainError::from)?;
    let ctx = ModelContext::new(&ckpt.model).map_err(TrainError::from)?;
    Ok(Loaded { ckpt, ctx })
}

fn eval_settings(run: &RunConfig, iters: usize) -> EvalSettings {
    EvalSettings {
        depth_seed: run.eval.depth_seed,
        batch_size: run.eval.batch_size,
        max_windows: run.eval.max_windows,
        ..EvalSettings::new(iters)
    }
}

fn run(cli: Cli, run: RunConfig) -> Result<(), CliError> {
    let out = out_dir(&cli);
    fs::create_dir_all(&out).map_err(|source| CliError::Write {
        path: out.clone(),
        source,
    })?;
    match cli.cmd {
        Cmd::Train { resume } => {
            let s = train(&run, &out, resume.as_deref())?;
            println!(
                "steps={} tokens={} last_loss={:.4} seconds={:.1} checkpoint={}",
                s.steps,
                s.tokens,
                s.last_loss,
                s.seconds,
                s.checkpoint.display()
            );
            if let Some(e) = s.final_eval {
                println!("val r={} loss={:.4} ppl={:.4}", e.iters, e.nll, e.ppl);
            }
        }
        Cmd::Eval { checkpoint, r, task } => {
            let m = load_model(checkpoint, &out)?;
            let settings = eval_settings(&run, r.unwrap_or_else(|| m.ckpt.model.train_iters()));
            let (_, val) = load_split(&run)?;
            let rep = eval_perplexity(&m.ctx, &m.ckpt.params, &val, run.train.seq_len, &settings)?;
            println!(
                "r={} nll={:.6} ppl={:.4} tokens={} windows={}",
                rep.iters, rep.nll, rep.ppl, rep.tokens, rep.windows
            );
            if let Some(path) = task.or(run.eval.task.clone()) {
                let task = load_task(&path)?;
                let mut scorer = ModelScorer {
                    ctx: &m.ctx,
                    params: &m.ckpt.params,
                    settings,
                };
                let report = mc_eval(&mut scorer, &task)?;
                println!(
                    "mc items={} skipped={} accuracy={:.4}",
                    report.scored(),
                    report.skipped.len(),
                    report.accuracy()
                );
                csv(&out.join("mc.csv"), |w| write_mc_csv(w, &report))?;
            }
        }
        Cmd::SweepIters { checkpoint, r, force } => {
            let m = load_model(checkpoint, &out)?;
            let iters = r.unwrap_or_else(|| run.eval.iters.clone());
            let (_, val) = load_split(&run)?;
            let settings = eval_settings(&run, 1);
            let rows = iteration_sweep(
                &m.ctx,
                &m.ckpt.params,
                &val,
                run.train.seq_len,
                &iters,
                &settings,
                force,
            )?;
            for row in &rows {
                println!("r={} nll={:.6} ppl={:.4}", row.iters, row.nll, row.ppl);
            }
            csv(&out.join("sweep.csv"), |w| write_sweep_csv(w, &rows))?;
        }
        Cmd::Probe {
            checkpoint,
            r_max,
            samples,
        } => {
            let m = load_model(checkpoint, &out)?;
            let (_, val) = load_split(&run)?;
            let seq = run.train.seq_len.min(m.ckpt.model.max_seq_len);
            let windows: Vec<&[u32]> = eval_windows(&val, seq)
                .into_iter()
                .take(samples)
                .map(|w| &w[..w.len().min(seq)])
                .collect();
            let rows = fixed_point_probe(&m.ctx, &m.ckpt.params, &windows, r_max, run.eval.depth_seed)?;
            for row in rows.iter().filter(|row| row.sample_id == 0) {
                println!("sample 0 k={} abs={:.6e} rel={:.6e}", row.k, row.abs_dist, row.rel_dist);
            }
            csv(&out.join("probe.csv"), |w| write_probe_csv(w, &rows))?;
        }
        Cmd::Flops {
            preset,
            variant,
            r,
            tokens,
        } => {
            let variant = variant.unwrap_or(run.model.variant);
            let model = match preset {
                Preset::Config => run.model.clone().with_variant(variant),
                Preset::Desk => ModelConfig::desk(variant),
                Preset::Reference200m => ModelConfig::reference_200m(variant),
                Preset::Reference350m => ModelConfig::reference_350m(variant),
            };
            let d: f64 = tokens
                .parse()
                .map_err(|_| CliError::Usage(format!("--tokens expects a number, got {tokens:?}")))?;
            if !(d.is_finite() && d >= 0.0 && d.fract() == 0.0) {
                return Err(CliError::Usage(format!(
                    "--tokens must be a non-negative integer, got {tokens}"
                )));
            }
            let counts = count_params(&model);
            let reports: Vec<_> = r
                .iter()
                .map(|&r| flops_estimate(&counts, variant, r, d as u64))
                .collect();
            for rep in &reports {
                println!(
                    "variant={} r={} D={} n_eff={} fwd_flops={:.4e} train_flops={:.4e} efficiency={:.4}",
                    rep.variant, rep.iters, rep.tokens, rep.n_eff, rep.fwd_flops, rep.train_flops, rep.efficiency
                );
            }
            csv(&out.join("flops.csv"), |w| write_flops_csv(w, &reports))?;
        }
        Cmd::Sample {
            checkpoint,
            prompt,
            max_new,
            temperature,
            seed,
            r,
        } => {
            let m = load_model(checkpoint, &out)?;
            let tok = ByteTokenizer;
            let opts = SampleOptions {
                iters: r.unwrap_or_else(|| m.ckpt.model.train_iters()),
                max_new,
                temperature,
                seed,
                depth_seed: run.eval.depth_seed,
            };
            let ids = generate(&m.ctx, &m.ckpt.params, &tok.encode(&prompt), &opts)?;
            println!("{}{}", prompt, tok.decode_lossy(&ids)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (overrides, args) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let result = RunConfig::load(cli.config.as_deref(), &overrides)
        .map_err(CliError::from)
        .and_then(|cfg| {
            println!("# resolved config\n{}", cfg.to_toml());
            println!(
                "# seeds init={} data={} depth={}",
                cfg.model.seed, cfg.train.data_seed, cfg.train.depth_seed
            );
            run(cli, cfg)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind_and_code();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={kind} msg={msg}");
            ExitCode::from(code)
        }
    }
}
