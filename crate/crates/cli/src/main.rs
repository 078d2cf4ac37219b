use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffpo::config::{parse_gammas, RunConfig};
use diffpo::denoiser::{load_checkpoint, save_checkpoint, DenoiserParams};
use diffpo::eval::{evaluate_instances, frontier, frontier_csv, frontier_svg};
use diffpo::likelihood::{kl_by_timestep, kl_rows_csv, LikelihoodMode};
use diffpo::pipeline::{pretrain_log_csv, run_pretrain, run_rl, task_sets};
use diffpo::rl::{Variant, METRICS_HEADER};
use diffpo::rng::derive_seed;
use diffpo::samplers::Strategy;
use diffpo::{Error, Result};

/// Environment variable overriding the output root.
const OUT_ENV: &str = "DIFFPO_OUT";

#[derive(Parser)]
#[command(name = "diffpo", about = "Masked diffusion policy optimization on toy verifiable tasks")]
struct Cli {
    /// Worker threads for rollouts and evaluation (1 = bit-exact determinism).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Root seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides DIFFPO_OUT and `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the denoiser; writes pretrain.ckpt and pretrain_log.csv.
    Pretrain,
    /// Policy-gradient post-training from a checkpoint.
    RlTrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        /// Continue from an RL checkpoint with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy evaluation on held-out instances.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Let the threshold head choose gamma (EB sampler).
        #[arg(long)]
        adaptive: bool,
    },
    /// Accuracy vs NFE over fixed EB thresholds.
    Frontier {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated thresholds; defaults to `eval.gammas`.
        #[arg(long)]
        gammas: Option<String>,
        /// Append the threshold head's adaptive point.
        #[arg(long)]
        adaptive: bool,
    },
    /// Per-step KL between true and approximate likelihoods.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = DiagMode::MeanField)]
        mode: DiagMode,
        /// Split step for `two_mf`.
        #[arg(long, default_value_t = 1)]
        tau: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagMode {
    #[value(name = "mean_field")]
    MeanField,
    #[value(name = "two_mf")]
    TwoMf,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_text(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.display().to_string();
    } else if let Ok(o) = std::env::var(OUT_ENV) {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_params(path: &Path, cfg: &RunConfig) -> Result<DenoiserParams> {
    let ck = load_checkpoint(path)?;
    if ck.params.config.vocab != cfg.denoiser_config().vocab {
        return Err(Error::Checkpoint(format!("{}: vocabulary does not match the task", path.display())));
    }
    Ok(ck.params)
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (params, log) = run_pretrain(cfg)?;
    save_checkpoint(&dir.join("pretrain.ckpt"), &params, None)?;
    write(&dir.join("pretrain_log.csv"), &pretrain_log_csv(&log))?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    println!("pretrain: held-out CE {:.4} -> {:.4}", log.initial_heldout_ce, log.final_heldout_ce);
    Ok(())
}

fn cmd_rl_train(cfg: &mut RunConfig, checkpoint: Option<&Path>, variant: Option<&str>, resume: Option<&Path>) -> Result<()> {
    if let Some(v) = variant {
        cfg.rl.variant = v.parse()?;
    }
    if cfg.rl.variant == Variant::Joint && cfg.sampler.strategy != Strategy::Eb {
        return Err(Error::Config(format!("variant joint needs sampler.strategy = eb, got {}", cfg.sampler.strategy)));
    }
    let dir = out_dir(cfg)?;
    let (params, state) = match (resume, checkpoint) {
        (Some(r), _) => {
            let ck = load_checkpoint(r)?;
            let st = ck.optimizer.ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state to resume", r.display())))?;
            (ck.params, Some(st))
        }
        (None, Some(c)) => (load_params(c, cfg)?, None),
        (None, None) => return Err(Error::InvalidArgument("rl-train needs --checkpoint or --resume".into())),
    };
    let name = cfg.rl.variant.name();
    let metrics_path = dir.join(format!("rl_{name}_metrics.csv"));
    let mut lines = match resume {
        Some(_) if metrics_path.exists() => fs::read_to_string(&metrics_path)?,
        _ => format!("{METRICS_HEADER}\n"),
    };
    let every = cfg.rl_checkpoint_every;
    let mut on_iter = |row: &diffpo::rl::MetricsRow, p: &DenoiserParams, st: &diffpo::denoiser::AdamState| -> Result<()> {
        lines.push_str(&row.to_csv_line());
        lines.push('\n');
        if every > 0 && (row.iter + 1) % every == 0 {
            save_checkpoint(&dir.join(format!("rl_{name}_iter{}.ckpt", row.iter + 1)), p, Some(st))?;
        }
        Ok(())
    };
    let (trained, state, rows) = run_rl(cfg, &params, state, &mut on_iter)?;
    write(&metrics_path, &lines)?;
    save_checkpoint(&dir.join(format!("rl_{name}.ckpt")), &trained, Some(&state))?;
    if let Some(last) = rows.last() {
        println!("rl-train {name}: {} iterations, final accuracy {:.4}", rows.len(), last.accuracy);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, adaptive: bool) -> Result<()> {
    let params = load_params(checkpoint, cfg)?;
    let dir = out_dir(cfg)?;
    let (_, eval_set) = task_sets(cfg)?;
    let n = cfg.eval.n.min(eval_set.len());
    let rl = cfg.rl_config();
    let mut rep = evaluate_instances(&params, &eval_set[..n], &cfg.sampler, adaptive.then_some(&rl))?;
    rep.task = cfg.task.spec.kind.name().into();
    write(&dir.join("eval.csv"), &rep.to_csv())?;
    write(&dir.join("eval.json"), &rep.to_json()?)?;
    println!("eval: accuracy {:.4} nfe {:.3} ets {:.3}", rep.accuracy, rep.nfe_mean, rep.ets_mean);
    Ok(())
}

fn cmd_frontier(cfg: &RunConfig, checkpoint: &Path, gammas: Option<&str>, adaptive: bool) -> Result<()> {
    let params = load_params(checkpoint, cfg)?;
    let dir = out_dir(cfg)?;
    let gammas = match gammas {
        Some(g) => parse_gammas("--gammas", g)?,
        None => cfg.eval.gammas.clone(),
    };
    let (_, eval_set) = task_sets(cfg)?;
    let n = cfg.eval.n.min(eval_set.len());
    let rl = cfg.rl_config();
    let pts = frontier(&params, &eval_set[..n], &cfg.sampler, &gammas, adaptive.then_some(&rl))?;
    write(&dir.join("frontier.csv"), &frontier_csv(&pts))?;
    write(&dir.join("frontier.json"), &serde_json_pretty(&pts)?)?;
    write(&dir.join("frontier.svg"), &frontier_svg(&[("model", &pts)]))?;
    println!("frontier: {} points", pts.len());
    Ok(())
}

fn serde_json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn cmd_diag(cfg: &RunConfig, checkpoint: &Path, mode: DiagMode, tau: usize) -> Result<()> {
    let params = load_params(checkpoint, cfg)?;
    let dir = out_dir(cfg)?;
    let (_, eval_set) = task_sets(cfg)?;
    let n = cfg.eval.n.min(eval_set.len());
    let prompts: Vec<_> = eval_set[..n].iter().map(|i| i.prompt.clone()).collect();
    let (lm, name) = match mode {
        DiagMode::MeanField => (LikelihoodMode::MeanField, "mean_field".to_string()),
        DiagMode::TwoMf => (LikelihoodMode::TwoMf { tau }, format!("two_mf_tau{tau}")),
    };
    let rows = kl_by_timestep(&params, &prompts, &cfg.sampler, lm, derive_seed(cfg.seed, "diag", 0))?;
    write(&dir.join(format!("diag_{name}.csv")), &kl_rows_csv(&rows))?;
    println!("diag {name}: {} steps", rows.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::RlTrain { checkpoint, variant, resume } => {
            cmd_rl_train(&mut cfg, checkpoint.as_deref(), variant.as_deref(), resume.as_deref())
        }
        Command::Eval { checkpoint, adaptive } => cmd_eval(&cfg, checkpoint, *adaptive),
        Command::Frontier { checkpoint, gammas, adaptive } => cmd_frontier(&cfg, checkpoint, gammas.as_deref(), *adaptive),
        Command::Diag { checkpoint, mode, tau } => cmd_diag(&cfg, checkpoint, *mode, *tau),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
