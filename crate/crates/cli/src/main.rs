use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use jefp::experiments::{
    evaluate_grid, footprint, generate_splits, load_split, scenario_shift, train_target, write_csv, ExperimentConfig,
    Models, Split, Target,
};
use jefp::precoder::PrecoderConfig;
use jefp::training::load_checkpoint;

#[derive(Parser)]
#[command(name = "jefp", version, about = "Joint pilot, feedback and precoding experiments for multi-user MIMO-OFDM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the data, training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test channel datasets.
    GenData(Common),
    /// Train the networks the configured pipelines need.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of jefpnet, dft-pilot, ce, feedback, jfp.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Evaluate every pipeline over the SNR grid on the test split.
    Eval(Common),
    /// Cross-scenario evaluation of two experiments' JEFPNet checkpoints.
    Shift {
        #[command(flatten)]
        common: Common,
        /// The second experiment.
        #[arg(long)]
        other: PathBuf,
    },
    /// Trainable parameter report.
    Summary(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("reading config {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} already exists (use --force to overwrite)", path.display());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let manifest = generate_splits(&cfg, common.force)?;
    for s in &manifest.splits {
        println!("{:>5}: {} samples, seeds {}..{}", s.split.name(), s.n_samples, s.seed_start, s.seed_end);
    }
    println!("wrote {}", cfg.manifest_path().display());
    Ok(())
}

fn train(common: &Common, only: &[String]) -> Result<()> {
    let cfg = load(common)?;
    let targets: Vec<Target> = if only.is_empty() {
        cfg.targets()
    } else {
        only.iter()
            .map(|n| Target::ALL.into_iter().find(|t| t.name() == n).with_context(|| format!("unknown target {n:?}")))
            .collect::<Result<_>>()?
    };
    if targets.is_empty() {
        println!("no learned pipelines configured; nothing to train");
        return Ok(());
    }
    let train_set = load_split(&cfg, Split::Train)?;
    let val_set = load_split(&cfg, Split::Val)?;
    let model_cfg = cfg.model_config()?;
    let scenario = cfg.scenario_config()?.name;
    for target in targets {
        let path = cfg.checkpoint_path(target);
        if path.exists() {
            if common.force {
                std::fs::remove_file(&path)?;
            } else {
                let meta = load_checkpoint(&path)?.meta;
                if meta.next_epoch >= cfg.train.epochs {
                    bail!("{} is already trained (use --force to retrain)", path.display());
                }
                println!("{}: resuming at epoch {}", target.name(), meta.next_epoch);
            }
        }
        let (_, state) =
            train_target(target, &model_cfg, &cfg.train, &train_set, &val_set, Some(&path), Some(&scenario))?;
        write_csv(&cfg.history_path(target), &state.history)?;
        if let Some((val, epoch, _)) = &state.best {
            println!("{}: best validation objective {val:.4} at epoch {epoch}", target.name());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    config: &'a ExperimentConfig,
    checkpoints: Vec<String>,
    rows: usize,
}

fn eval(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let out = cfg.output_dir.join("eval").join("results.csv");
    guard(&out, common.force)?;
    let targets = cfg.targets();
    let models = Models::load(&cfg, &targets)?;
    let test = load_split(&cfg, Split::Test)?;
    let rows = evaluate_grid(&cfg, &models, &test)?;
    write_csv(&out, &rows)?;
    write_json(
        &cfg.output_dir.join("eval").join("manifest.json"),
        &RunManifest {
            command: "eval",
            config_hash: cfg.hash(),
            config: &cfg,
            checkpoints: targets.iter().map(|t| cfg.checkpoint_path(*t).display().to_string()).collect(),
            rows: rows.len(),
        },
    )?;
    println!("{:<16} {:>2} {:>7} {:>7} {:>7} {:>10} {:>9}", "pipeline", "K", "ce_dB", "u_dB", "d_dB", "R/subc", "nmse_dB");
    for r in &rows {
        println!(
            "{:<16} {:>2} {:>7.1} {:>7.1} {:>7.1} {:>10.4} {:>9}",
            r.pipeline,
            r.k,
            r.snr_ce_db,
            r.snr_u_db,
            r.snr_d_db,
            r.r_per_subcarrier,
            r.nmse_db.map_or(String::from("-"), |v| format!("{v:.2}"))
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn shift(common: &Common, other: &Path) -> Result<()> {
    let a = load(common)?;
    let b = load(&Common { config: other.to_path_buf(), out: None, ..common.clone() })?;
    let out = a.output_dir.join("shift").join("shift.csv");
    guard(&out, common.force)?;
    let rows = scenario_shift(&a, &b)?;
    write_csv(&out, &rows)?;
    for r in &rows {
        println!(
            "train {:<10} test {:<10} K={} snr_u={:>5.1}  R/subc {:.4}",
            r.train_scenario, r.test_scenario, r.k, r.snr_u_db, r.r_per_subcarrier
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    config_hash: String,
    footprint: jefp::experiments::Footprint,
    jefpnet_total: usize,
    separate_total: usize,
    ue_ratio: f64,
    /// BS precoder parameters for K_max = 2, 4, 6 with all else fixed.
    precoder_by_k_max: Vec<(usize, usize)>,
}

fn summary(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let model_cfg = cfg.model_config()?;
    let f = footprint(&model_cfg)?;
    let precoder_by_k_max = [2, 4, 6]
        .into_iter()
        .map(|k| {
            let pc = PrecoderConfig { k_max: k, ..model_cfg.precoder() };
            jefp::precoder::BsNet::parameter_count(&pc).map(|n| (k, n))
        })
        .collect::<jefp::Result<Vec<_>>>()?;
    let s = Summary {
        config_hash: cfg.hash(),
        jefpnet_total: f.jefpnet_ue + f.jefpnet_bs,
        separate_total: f.separate_ue + f.separate_bs,
        ue_ratio: f.jefpnet_ue as f64 / f.separate_ue as f64,
        footprint: f,
        precoder_by_k_max,
    };
    println!("module parameters:");
    for (m, n) in &s.footprint.modules {
        println!("  {m:<12} {n:>10}");
    }
    println!("{:<24} {:>10} {:>10}", "", "UE side", "BS side");
    println!("{:<24} {:>10} {:>10}", "jefpnet", s.footprint.jefpnet_ue, s.footprint.jefpnet_bs);
    println!("{:<24} {:>10} {:>10}", "separate chain", s.footprint.separate_ue, s.footprint.separate_bs);
    println!(
        "UE side: jefpnet uses {} parameters, {:.2}% of the separate chain's {}",
        s.footprint.jefpnet_ue,
        100.0 * s.ue_ratio,
        s.footprint.separate_ue
    );
    for (k, n) in &s.precoder_by_k_max {
        println!("precoder parameters at K_max = {k}: {n}");
    }
    let out = cfg.output_dir.join("summary.json");
    guard(&out, common.force)?;
    write_json(&out, &s)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData(c) => gen_data(&c),
        Command::Train { common, only } => train(&common, &only),
        Command::Eval(c) => eval(&c),
        Command::Shift { common, other } => shift(&common, &other),
        Command::Summary(c) => summary(&c),
    }
}
