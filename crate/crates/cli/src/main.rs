use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use feddag::bench::{export_benchmark, BenchSpec, DomainDataset};
use feddag::config::RunConfig;
use feddag::error::{Error, Result};
use feddag::protocol::{run_lodo, Mode, RunReport};
use feddag::report::{self, Checkpoint, ModeRuns};

#[derive(Parser)]
#[command(name = "feddag", version, about = "Federated domain generalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// feddag, no_ndag, no_sha or fedavg.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Leave-one-domain-out run of one mode.
    Run(Common),
    /// All four modes over the configured seeds.
    Ablate(Common),
    /// One leave-one-domain-out run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, beta, k, rho, m, eval_clients_per_round or n_clients.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Writes the synthetic benchmark as CSV.
    ExportBench {
        /// Benchmark spec JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

const SWEEP_PARAMS: [&str; 7] = ["alpha", "beta", "k", "rho", "m", "eval_clients_per_round", "n_clients"];

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_divergence() => 3,
        Error::Io(_) | Error::Csv(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Ablate(c) => cmd_ablate(&c),
        Command::Sweep { common, param, values } => cmd_sweep(&common, &param, &values),
        Command::ExportBench { config, out } => cmd_export_bench(config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                3 => "training diverged",
                4 => "i/o error",
                _ => "configuration error",
            };
            eprintln!("error ({kind}): {e}");
            ExitCode::from(code)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FEDDAG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("FEDDAG_THREADS must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(mode) = &c.mode {
        cfg.mode = mode.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The resolved config as echoed into reports. The output directory is left
/// out so that identical runs written to different places stay identical.
fn config_echo(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("output_dir");
    }
    Ok(v)
}

fn lodo(cfg: &RunConfig, data: &[DomainDataset], seed: u64) -> Result<RunReport> {
    let fed = cfg.federation(seed)?;
    let mut report = run_lodo(data, &fed, &cfg.model_spec())?;
    let mut echo = cfg.clone();
    echo.seed = seed;
    report.config = config_echo(&echo)?;
    Ok(report)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// report.json, the three CSV tables, plots and final checkpoints.
fn write_run_artifacts(dir: &Path, cfg: &RunConfig, report: &RunReport) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
    let metrics = report::metrics_csv(report);
    write(&dir.join("metrics.csv"), &metrics)?;
    write(&dir.join("sha_log.csv"), &report::sha_log_csv(report))?;
    write(&dir.join("train_trace.csv"), &report::train_trace_csv(report))?;
    write(
        &dir.join("loss.svg"),
        &report::plot_csv(
            &metrics,
            "round",
            "source_val_loss",
            Some("held_out"),
            "Source validation loss by held-out domain",
        )?,
    )?;
    write(
        &dir.join("accuracy.svg"),
        &report::plot_csv(
            &metrics,
            "round",
            "source_val_acc",
            Some("held_out"),
            "Source validation accuracy by held-out domain",
        )?,
    )?;
    if cfg.probe_every_round {
        write(
            &dir.join("target_accuracy.svg"),
            &report::plot_csv(
                &metrics,
                "round",
                "target_acc",
                Some("held_out"),
                "Held-out domain accuracy",
            )?,
        )?;
    }
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    for fold in &report.folds {
        let round = fold.rounds.last().map_or(0, |r| r.round);
        for (role, values) in [("task", &fold.global_task), ("generator", &fold.global_gen)] {
            let ckpt = Checkpoint {
                arch: cfg.model_spec(),
                role: role.to_string(),
                round,
                values: values.clone(),
            };
            write(
                &ckpt_dir.join(format!("heldout{}_{role}.json", fold.held_out)),
                &ckpt.to_json()?,
            )?;
        }
    }
    Ok(())
}

fn cmd_run(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.load_benchmark()?;
    let report = lodo(&cfg, &data, cfg.seed)?;
    write_run_artifacts(&cfg.output_dir, &cfg, &report)?;
    println!(
        "{}: average acc {:.4}, f1 {:.4}, auc {} -> {}",
        cfg.mode.label(),
        report.average.acc,
        report.average.f1,
        report.average.auc.map_or("n/a".into(), |a| format!("{a:.4}")),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.load_benchmark()?;
    if cfg.seeds.len() < 3 {
        warn!(
            "{} seed(s): paired statistics across seeds need at least 3 and are omitted",
            cfg.seeds.len()
        );
    }
    let mut table = Vec::new();
    for mode in Mode::ALL {
        let mode_cfg = RunConfig { mode, ..cfg.clone() };
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let report = lodo(&mode_cfg, &data, seed)?;
            info!("{} seed {seed}: acc {:.4}", mode.label(), report.average.acc);
            let dir = cfg.output_dir.join("runs").join(format!("{mode}_seed{seed}"));
            create_dir(&dir)?;
            write(&dir.join("report.json"), &(report.to_json()? + "\n"))?;
            runs.push(report);
        }
        let avg = runs.iter().map(|r| r.average.acc).sum::<f64>() / runs.len() as f64;
        println!("{:<9} mean acc {avg:.4}", mode.label());
        table.push(ModeRuns { mode, runs });
    }
    write(&cfg.output_dir.join("ablation.csv"), &report::ablation_csv(&table)?)?;
    Ok(())
}

fn apply_param(cfg: &mut RunConfig, param: &str, value: &str) -> Result<()> {
    let bad = || Error::Config(format!("invalid value `{value}` for {param}"));
    let float = || value.parse::<f64>().map_err(|_| bad());
    let int = || value.parse::<usize>().map_err(|_| bad());
    match param {
        "alpha" => cfg.alpha = float()?,
        "beta" => cfg.beta = float()?,
        "rho" => cfg.rho = float()?,
        "m" => cfg.m = float()?,
        "k" => cfg.k = int()?,
        "eval_clients_per_round" => cfg.eval_clients_per_round = int()?,
        "n_clients" => cfg.n_clients = Some(int()?),
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected one of {})",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    cfg.validate()
}

fn cmd_sweep(c: &Common, param: &str, values: &[String]) -> Result<()> {
    let base = load_config(c)?;
    // validate every value before spending time on training
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            apply_param(&mut cfg, param, v)?;
            Ok((v.clone(), cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in configs {
        let data = cfg.load_benchmark()?;
        let report = lodo(&cfg, &data, cfg.seed)?;
        let dir = base.output_dir.join("runs").join(format!("{param}_{value}"));
        write_run_artifacts(&dir, &cfg, &report)?;
        println!("{param} = {value}: acc {:.4}", report.average.acc);
        rows.push((value, report));
    }
    let csv = report::sweep_csv(param, &rows);
    create_dir(&base.output_dir)?;
    write(&base.output_dir.join("sweep.csv"), &csv)?;
    write(
        &base.output_dir.join("sweep.svg"),
        &report::plot_csv(
            &csv,
            "value",
            "acc",
            Some("param"),
            &format!("Average held-out accuracy vs {param}"),
        )?,
    )?;
    Ok(())
}

fn cmd_export_bench(config: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read bench spec {}: {e}", path.display())))?;
            serde_json::from_str::<BenchSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => BenchSpec::default(),
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    export_benchmark(&spec, out)?;
    println!(
        "wrote {} domains x {} samples to {}",
        spec.n_domains,
        spec.samples_per_domain,
        out.display()
    );
    Ok(())
}
