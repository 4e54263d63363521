use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use emergent_comm::agents::DecodeMode;
use emergent_comm::config::{parse_decode, GroundingMode, RunConfig};
use emergent_comm::estimators::EstimatorKind;
use emergent_comm::gradcheck::{format_table, run_suite};
use emergent_comm::train::{
    convergence_update, metrics_csv, sweep_dir, sweep_grid, Checkpoint, Experiment, RunKind,
};
use emergent_comm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "emcomm",
    version,
    about = "Referential games with discrete learned protocols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train sender and receiver on the referential game.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint instead of a fresh start.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out rounds under both decode modes.
    Eval(CheckpointArgs),
    /// Protocol analysis of a checkpoint: message log, purity, omission.
    Analyze(CheckpointArgs),
    /// Finite-difference check of every op and layer.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sign of the true-gradient projection on the ST-GS direction.
    ProbePseudograd {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        /// Probe the fully relaxed objective instead (control).
        #[arg(long)]
        relaxed: bool,
    },
    /// Train the reference language model on captions only.
    LmTrain(RunArgs),
    /// Train with language grounding (KL penalty or direct captions).
    GroundTrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["kl", "direct"])]
        grounding: Option<String>,
    },
    /// Learning-rate grid 1e-5 .. 1e-1 with one run per point.
    LrSweep(RunArgs),
}

#[derive(Args, Clone, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["reinforce", "gs", "st-gs"])]
    estimator: Option<String>,
    #[arg(long, value_parser = ["sample", "greedy"])]
    decode: Option<String>,
    #[arg(long)]
    kl_weight: Option<f64>,
    #[arg(long)]
    caption_weight: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    learn_temperature: bool,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    max_updates: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Run on a single thread.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.estimator {
            cfg.estimator = EstimatorKind::parse(v)?;
        }
        if let Some(v) = &self.decode {
            cfg.decode = parse_decode(v)?;
        }
        if let Some(v) = self.kl_weight {
            cfg.kl_weight = v;
        }
        if let Some(v) = self.caption_weight {
            cfg.caption_weight = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if let Some(v) = self.distractors {
            cfg.distractors = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if self.learn_temperature {
            cfg.learn_temperature = true;
        }
        if let Some(v) = self.tau0 {
            cfg.tau0 = v;
        }
        if let Some(v) = &self.features {
            cfg.features = Some(v.clone());
        }
        if let Some(v) = &self.captions {
            cfg.captions = Some(v.clone());
        }
        if let Some(v) = self.max_updates {
            cfg.max_updates = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if self.sequential {
            cfg.parallel = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug)]
struct CheckpointArgs {
    /// Defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for reports; defaults to the checkpoint's run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["sample", "greedy"])]
    decode: Option<String>,
    #[arg(long)]
    sequential: bool,
}

impl CheckpointArgs {
    fn load(&self) -> Result<(Experiment, PathBuf)> {
        let path = match (&self.checkpoint, &self.out) {
            (Some(p), _) => p.clone(),
            (None, Some(o)) => o.join("checkpoint.json"),
            (None, None) => RunConfig::default().out.join("checkpoint.json"),
        };
        let mut ck = Checkpoint::load(&path)?;
        if let Some(d) = &self.decode {
            ck.config.decode = parse_decode(d)?;
        }
        if self.sequential {
            ck.config.parallel = false;
        }
        let out = match &self.out {
            Some(o) => o.clone(),
            None => path
                .parent()
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        };
        fs::create_dir_all(&out)?;
        Ok((Experiment::from_checkpoint(ck)?, out))
    }
}

fn print_summary(exp: &Experiment) {
    if let Some(row) = exp.history.last() {
        println!(
            "updates {} stopped {:?} success greedy {:.4} sample {:.4} perplexity {:.3} mean length {:.2}",
            exp.update,
            exp.stopped,
            row.success_greedy,
            row.success_sample,
            row.perplexity,
            row.mean_length
        );
        if let Some(c) = convergence_update(&exp.history, exp.cfg.decode) {
            println!("convergence (80% of final success) at update {c}");
        }
    }
}

fn train(run: &RunArgs, resume: Option<&Path>, kind: RunKind) -> Result<()> {
    let cfg = run.config()?;
    let mut exp = match resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p)?;
            ck.config.max_updates = cfg.max_updates;
            ck.config.out = cfg.out.clone();
            if ck.update < ck.config.max_updates {
                ck.stopped = None;
            }
            Experiment::from_checkpoint(ck)?
        }
        None => Experiment::new(cfg.clone(), kind)?,
    };
    let out = exp.cfg.out.clone();
    exp.run(Some(&out))?;
    print_summary(&exp);
    info!("artifacts in {}", out.display());
    Ok(())
}

fn eval(args: &CheckpointArgs) -> Result<()> {
    let (exp, out) = args.load()?;
    let report = exp.report(10)?;
    report.validate()?;
    fs::write(out.join("eval_report.txt"), report.to_key_value())?;
    fs::write(out.join("eval_report.csv"), report.to_csv())?;
    print!("{}", report.to_key_value());
    Ok(())
}

fn analyze(args: &CheckpointArgs) -> Result<()> {
    let (exp, out) = args.load()?;
    let report = exp.report(10)?;
    fs::write(out.join("analysis_report.txt"), report.to_key_value())?;
    let mode = exp.cfg.decode;
    let messages = exp.heldout_messages(mode)?;
    emergent_comm::analysis::write_message_log(&out.join("heldout_messages.txt"), &messages)?;
    let mut purity = String::from("prefix_len,attribute,purity\n");
    for (len, attr, p) in exp.purity_table(mode, exp.cfg.max_len)? {
        let _ = writeln!(purity, "{len},{attr},{p}");
    }
    fs::write(out.join("purity.csv"), &purity)?;
    print!("{}", report.to_key_value());
    Ok(())
}

fn probe(
    args: &CheckpointArgs,
    probes: Option<usize>,
    eps: Option<f64>,
    relaxed: bool,
) -> Result<()> {
    let (exp, out) = args.load()?;
    let n = probes.unwrap_or(exp.cfg.probe_count);
    let eps = eps.unwrap_or(exp.cfg.probe_eps);
    let mode = if relaxed {
        DecodeMode::Relaxed
    } else {
        DecodeMode::StraightThrough
    };
    let report = exp.probe(n, eps, mode)?;
    let mut csv = String::from("update,probe,dot,sign,crossed\n");
    for r in &report.rows {
        let sign = if r.dot > 0.0 {
            1
        } else if r.dot < 0.0 {
            -1
        } else {
            0
        };
        let _ = writeln!(
            csv,
            "{},{},{},{sign},{}",
            exp.update, r.probe, r.dot, r.crossed as u8
        );
    }
    fs::write(out.join("probes.csv"), csv)?;
    println!(
        "acute-angle fraction {:.4} over {} probes at update {} ({} with zero direction); {:.4} excluding {} that crossed a message change",
        report.fraction,
        n - report.degenerate,
        exp.update,
        report.degenerate,
        report.smooth_fraction,
        report.rows.iter().filter(|r| r.crossed).count()
    );
    Ok(())
}

fn lm_train(run: &RunArgs) -> Result<()> {
    let mut cfg = run.config()?;
    cfg.max_updates = 0;
    cfg.kl_weight = 0.0;
    let exp = Experiment::new(cfg.clone(), RunKind::Grounded(GroundingMode::Kl))?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let report = exp.lm_report.as_ref().expect("language model report");
    let mut s = String::from("epoch,perplexity\n");
    for (i, p) in report.epoch_perplexity.iter().enumerate() {
        let _ = writeln!(s, "{},{p}", i + 1);
    }
    fs::write(cfg.out.join("lm_metrics.csv"), s)?;
    exp.checkpoint().save(&cfg.out.join("checkpoint.json"))?;
    println!(
        "language model trained on {} captions; per-token perplexity {:.4}",
        exp.data.lm_corpus.len(),
        report.final_perplexity()
    );
    Ok(())
}

fn ground_train(run: &RunArgs, grounding: Option<&str>) -> Result<()> {
    let cfg = run.config()?;
    let mode = match grounding {
        Some("direct") => GroundingMode::Direct,
        Some(_) => GroundingMode::Kl,
        None => cfg.grounding,
    };
    train(run, None, RunKind::Grounded(mode))
}

fn lr_sweep(run: &RunArgs) -> Result<()> {
    let base = run.config()?;
    let mut table = String::from("lr,updates,success_greedy,success_sample,convergence_update\n");
    for lr in sweep_grid() {
        let mut cfg = base.clone();
        cfg.lr = lr;
        cfg.out = sweep_dir(&base.out, lr);
        let mut exp = Experiment::new(cfg.clone(), RunKind::Plain)?;
        let s = match exp.run(Some(&cfg.out)) {
            Ok(s) => s,
            Err(e @ (Error::NonFinite(_) | Error::NonFiniteGradient(_))) => {
                error!("lr {lr:e} diverged: {e}");
                let _ = writeln!(table, "{lr:e},{},nan,nan,", exp.update);
                continue;
            }
            Err(e) => return Err(e),
        };
        let conv =
            convergence_update(&exp.history, cfg.decode).map_or(String::new(), |u| u.to_string());
        let _ = writeln!(
            table,
            "{lr:e},{},{},{},{conv}",
            s.updates, s.final_row.success_greedy, s.final_row.success_sample
        );
        println!(
            "lr {lr:e}: success {:.4} after {} updates",
            s.final_row.success(cfg.decode),
            s.updates
        );
        fs::write(cfg.out.join("metrics.csv"), metrics_csv(&exp.history))?;
    }
    fs::create_dir_all(&base.out)?;
    fs::write(base.out.join("sweep.csv"), table)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train { run, resume } => train(run, resume.as_deref(), RunKind::Plain),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck { trials, seed } => {
            match run_suite(*trials, *seed, emergent_comm::par::Exec::Parallel) {
                Ok(rows) => {
                    print!("{}", format_table(&rows));
                    if rows.iter().all(|r| r.passed) {
                        Ok(())
                    } else {
                        eprintln!("gradient check failed");
                        return ExitCode::FAILURE;
                    }
                }
                Err(e) => Err(e),
            }
        }
        Command::ProbePseudograd {
            ck,
            probes,
            eps,
            relaxed,
        } => probe(ck, *probes, *eps, *relaxed),
        Command::LmTrain(run) => lm_train(run),
        Command::GroundTrain { run, grounding } => ground_train(run, grounding.as_deref()),
        Command::LrSweep(run) => lr_sweep(run),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
