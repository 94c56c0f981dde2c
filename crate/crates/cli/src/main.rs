use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bsmamba::error::{Error, Result};
use bsmamba::hierarchy::Scorer;
use bsmamba::model::Model;
use bsmamba::pipeline::checkpoint;
use bsmamba::pipeline::config::TrainConfig;
use bsmamba::pipeline::dataset::load_dataset;
use bsmamba::pipeline::enhance::enhance_path;
use bsmamba::pipeline::eval::evaluate;
use bsmamba::pipeline::score::{score_image, write_score};
use bsmamba::pipeline::train::train_dataset;
use bsmamba::selftest;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "bsmamba",
    version,
    about = "Low-light image enhancement with hierarchy-sorted selective scans"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a paired dataset.
    Train {
        /// `key = value` config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set iterations=100`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Enhance one image or a directory of PNGs.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write the hierarchy maps and scan orders.
        #[arg(long)]
        dump_maps: bool,
    },
    /// PSNR/SSIM over a paired dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-image results as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a brightness score map as a 16-bit PGM.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "luma")]
        scorer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle and gradient checks.
    Selftest {
        /// Include the overfit and ablation runs (several minutes).
        #[arg(long)]
        full: bool,
    },
}

fn train_config(config: Option<PathBuf>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(&p)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(ckpt: &Path) -> Result<(Model, bsmamba::nn::ParamStore<f64>)> {
    let (cfg, params) = checkpoint::load::<f64>(ckpt)?;
    let model = Model::new(cfg)?;
    model.check_params(&params)?;
    Ok((model, params))
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Train {
            config,
            data,
            out,
            overrides,
        } => {
            let cfg = train_config(config, &overrides)?;
            let ds = load_dataset(&data)?;
            log::info!("training on {} pairs for {} iterations", ds.len(), cfg.iterations);
            let r = train_dataset(&cfg, &ds, Some(&out))?;
            println!("baseline_psnr={:.4}", r.baseline_psnr);
            println!("final_psnr={:.4}", r.final_psnr);
            println!("checkpoint={}", out.display());
        }
        Cmd::Enhance {
            ckpt,
            input,
            out,
            dump_maps,
        } => {
            let (model, params) = load_model(&ckpt)?;
            for p in enhance_path(&model, &params, &input, &out, dump_maps)? {
                println!("{}", p.display());
            }
        }
        Cmd::Eval { ckpt, data, csv } => {
            let (model, params) = load_model(&ckpt)?;
            let samples = load_dataset(&data)?.load_samples::<f64>()?;
            let report = evaluate(&model, &params, &samples)?;
            if let Some(p) = csv {
                report.write_csv(&p)?;
            }
            print!("{}", report.summary());
        }
        Cmd::Score { input, scorer, out } => {
            let map = score_image(&input, Scorer::parse(&scorer)?)?;
            write_score(&out, &map)?;
            println!("{}", out.display());
        }
        Cmd::Selftest { full } => {
            let mut checks = selftest::quick();
            if full {
                checks.push(selftest::overfit(true));
                checks.push(selftest::ablations(50));
            }
            let mut failed = 0;
            for c in &checks {
                println!("{}", c.line());
                failed += usize::from(!c.ok());
            }
            if failed > 0 {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
