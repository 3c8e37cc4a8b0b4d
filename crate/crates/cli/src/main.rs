use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use pdm_core::apply::{export_gallery, super_resolve_folder, synthesize_folder};
use pdm_core::bench::run_bench;
use pdm_core::checkpoint::load_checkpoint;
use pdm_core::config::Config;
use pdm_core::data::UnpairedDataset;
use pdm_core::eval::{evaluate_folders, evaluate_images};
use pdm_core::image::{list_images, load_image};
use pdm_core::trainer::{train, PdmState, TrainConfig, CONFIG_SNAPSHOT_NAME};
use pdm_core::PdmError;

/// Learn blur/noise degradation distributions from unpaired HR and LR images
/// and train an SR model on the synthesized pairs.
///
/// Every configuration key can be overridden as `--key value` (or
/// `--key=value`); run `pdm keys` for the full list.
#[derive(Parser, Debug)]
#[command(name = "pdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the degradation model and SR model jointly.
    Train {
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint (its config is the base layer).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score SR images against ground truth.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ground-truth HR folder.
        #[arg(long)]
        gt: PathBuf,
        /// Folder of SR outputs to score.
        #[arg(long, conflicts_with = "checkpoint")]
        sr: Option<PathBuf>,
        /// Run this checkpoint's SR model over `--input` first.
        #[arg(long, requires = "input")]
        checkpoint: Option<PathBuf>,
        /// LR folder for `--checkpoint`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Where to save SR outputs produced from `--checkpoint`.
        #[arg(long)]
        save_sr: Option<PathBuf>,
        /// Per-image CSV (default `<out_dir>/eval.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// CSV of externally computed scores (`filename,<metric>,...`).
        #[arg(long)]
        external: Option<PathBuf>,
    },
    /// Degrade an HR folder with a trained degradation model.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Export learned kernels and noise maps.
    Gallery {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Optional conditioning images.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Synthetic benchmark: oracle corpus, training, recovery report.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List configuration keys with defaults.
    Keys,
}

/// Splits `--key value` / `--key=value` pairs naming configuration keys off
/// the argument list; everything else goes to clap.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut missing = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !Config::KEYS.contains(&name.as_str()) {
            rest.push(a);
            continue;
        }
        match inline.or_else(|| it.next_if(|v| !v.starts_with("--"))) {
            Some(v) => overrides.push((name, v)),
            None => missing.push(name),
        }
    }
    (rest, overrides, missing)
}

fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Config, PdmError> {
    Config::resolve(file, overrides)
}

fn out_dir(cfg: &Config) -> Result<PathBuf, PdmError> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| PdmError::io(&dir, e))?;
    Ok(dir)
}

fn run(cmd: Command, overrides: &[(String, String)]) -> Result<(), PdmError> {
    match cmd {
        Command::Train { config, resume } => {
            let (cfg, state) = match resume {
                Some(ckpt) => {
                    let (mut cfg, state) = load_checkpoint(&ckpt)?;
                    if let Some(f) = config.as_deref() {
                        cfg.apply_file(f)?;
                    }
                    for (k, v) in overrides {
                        cfg.set(k, v)?;
                    }
                    let mut state = state;
                    // Only schedule-level settings may change on resume.
                    state.cfg.total_steps = cfg.total_steps;
                    state.cfg.checkpoint_interval = cfg.checkpoint_interval;
                    state.cfg.log_interval = cfg.log_interval;
                    (cfg, state)
                }
                None => {
                    let cfg = resolve(config.as_deref(), overrides)?;
                    let state = PdmState::new(TrainConfig::from_config(&cfg))?;
                    (cfg, state)
                }
            };
            if cfg.hr_dir.is_empty() || cfg.lr_dir.is_empty() {
                return Err(PdmError::Config("train needs `hr_dir` and `lr_dir`".into()));
            }
            let ds = UnpairedDataset::from_dirs(Path::new(&cfg.hr_dir), Path::new(&cfg.lr_dir), cfg.dataset_config())?;
            let dir = out_dir(&cfg)?;
            let (_, summary) = train(&cfg, state, Arc::new(ds), &dir)?;
            println!(
                "trained {} steps; losses in {}; {} checkpoint(s), last {}",
                summary.steps,
                summary.loss_log.display(),
                summary.checkpoints.len(),
                summary
                    .checkpoints
                    .last()
                    .map_or("-".into(), |p| p.display().to_string())
            );
        }
        Command::Eval {
            config,
            gt,
            sr,
            checkpoint,
            input,
            save_sr,
            output,
            external,
        } => {
            let cfg = resolve(config.as_deref(), overrides)?;
            let border = cfg.border_crop();
            let mut report = match (sr, checkpoint) {
                (Some(sr_dir), None) => evaluate_folders(&sr_dir, &gt, cfg.max_shift, border)?,
                (None, Some(ckpt)) => {
                    let (ckpt_cfg, state) = load_checkpoint(&ckpt)?;
                    let border = cfg.border_crop.or(4 * ckpt_cfg.scale);
                    let input = input.expect("clap enforces --input");
                    let images = super_resolve_folder(&state, &input, save_sr.as_deref())?;
                    evaluate_images(images, &gt, cfg.max_shift, border)?
                }
                _ => return Err(PdmError::Config("eval needs either --sr or --checkpoint".into())),
            };
            if let Some(ext) = external {
                report.merge_external(&ext)?;
            }
            let dir = out_dir(&cfg)?;
            let csv = output.unwrap_or_else(|| dir.join("eval.csv"));
            std::fs::write(&csv, report.to_csv()).map_err(|e| PdmError::io(&csv, e))?;
            let summary = csv.with_extension("json");
            let json = serde_json::json!({
                "max_shift": report.max_shift,
                "border_crop": report.border_crop,
                "images": report.rows.len(),
                "mean": report.mean,
            });
            std::fs::write(&summary, serde_json::to_string_pretty(&json).expect("plain json"))
                .map_err(|e| PdmError::io(&summary, e))?;
            cfg.write_snapshot(&dir.join(CONFIG_SNAPSHOT_NAME))?;
            println!(
                "{} images: PSNR {:.3} dB, SSIM {:.4}, shifted PSNR {:.3} dB, shifted SSIM {:.4} -> {}",
                report.rows.len(),
                report.mean.psnr,
                report.mean.ssim,
                report.mean.shifted_psnr,
                report.mean.shifted_ssim,
                csv.display()
            );
        }
        Command::Synthesize {
            checkpoint,
            input,
            output,
        } => {
            let (cfg, state) = load_checkpoint(&checkpoint)?;
            let records = synthesize_folder(&state, &input, &output)?;
            cfg.write_snapshot(&output.join(CONFIG_SNAPSHOT_NAME))?;
            println!("wrote {} LR images to {}", records.len(), output.display());
        }
        Command::Gallery {
            checkpoint,
            output,
            input,
        } => {
            let (mut cfg, state) = load_checkpoint(&checkpoint)?;
            for (k, v) in overrides {
                cfg.set(k, v)?;
            }
            let images = match input {
                Some(dir) => list_images(&dir)?
                    .iter()
                    .map(|p| load_image(p))
                    .collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
            };
            let files = export_gallery(&state, cfg.gallery_count, &images, &output)?;
            cfg.write_snapshot(&output.join(CONFIG_SNAPSHOT_NAME))?;
            println!(
                "kernels: {}; noise maps: {}",
                files.kernel_grid.display(),
                files.noise_maps.len()
            );
        }
        Command::Bench { config } => {
            let cfg = resolve(config.as_deref(), overrides)?;
            let dir = out_dir(&cfg)?;
            cfg.write_snapshot(&dir.join(CONFIG_SNAPSHOT_NAME))?;
            let r = run_bench(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("plain json"));
        }
        Command::Keys => {
            for (k, default, doc) in Config::describe() {
                if doc.is_empty() {
                    println!("{k} = {default}");
                } else {
                    println!("{k} = {default}    # {doc}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (rest, overrides, missing) = split_overrides(std::env::args().collect());
    if let Some(k) = missing.first() {
        eprintln!("error: configuration error: `--{k}` needs a value");
        return ExitCode::from(2);
    }
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            if e.kind() == clap::error::ErrorKind::UnknownArgument {
                eprintln!("{e}");
                eprintln!("valid configuration keys: {}", Config::KEYS.join(", "));
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
