use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use polypdiff::data::{load_paired_dataset, Provenance};
use polypdiff::denoiser::DenoiserCheckpoint;
use polypdiff::experiment::toy::{toy_dataset, write_toy_dataset, ToyCorpus};
use polypdiff::experiment::{
    emit_gallery, emit_report, generate_masks_detailed, load_report, open_run, read_masks, run_pipeline, run_stage,
    select_best_checkpoint, stage_eval_images, stage_eval_masks, write_masks, CheckpointTable, ExperimentConfig,
    GalleryCell, MaskManifest, MetricReport, Stage,
};
use polypdiff::metrics::CheckpointRecord;
use polypdiff::seg::{evaluate_segmenter, train_segmenter, write_audit_csv, SegArch, SegTrainConfig, DEFAULT_THRESHOLD};

#[derive(Parser)]
#[command(name = "polypdiff", version, about = "Synthetic polyp data: mask and image diffusion, evaluation, segmentation sweeps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Mask,
    Image,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the unconditional mask model.
    TrainMask(ConfigArg),
    /// Train the mask-conditioned image model (in latent space when `latent_mode` is set).
    TrainImage(ConfigArg),
    /// Train the autoencoder used in latent mode.
    TrainAe(ConfigArg),
    /// Generate masks, from the selected run checkpoint or an explicit one.
    GenMasks {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, requires = "out")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate images for the run's generated masks.
    GenImages(ConfigArg),
    /// Score every generator checkpoint by FID (and SIM for masks) and select the best.
    EvalGen {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum)]
        kind: GenKind,
    },
    /// Pick the lowest-FID record from a report JSON or a JSON list of records.
    Select {
        #[arg(long)]
        records: PathBuf,
    },
    /// Train one segmenter and evaluate it.
    TrainSeg {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Segmentation settings (TOML); flags below override it.
        #[arg(long)]
        seg_config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        model: Option<SegArch>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fixed real count plus growing synthetic subsets.
    Sweep(ConfigArg),
    /// Real only, synthetic only, combined.
    ThreeWay(ConfigArg),
    /// PNG grids of the run's masks and pairs, or of a mask directory.
    Gallery {
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Directory written by gen-masks.
        #[arg(long, conflicts_with = "config", requires = "out")]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        rows: usize,
        #[arg(long, default_value_t = 5)]
        cols: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit CSV and JSON from a report JSON.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "report")]
        stem: String,
    },
    /// Every stage in order.
    Pipeline(ConfigArg),
    /// Write a seeded blob-mask corpus with shaded images.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default experiment config.
    DefaultConfig,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn stage(path: &Path, s: Stage) -> Result<()> {
    let rd = run_stage(&load_config(path)?, s)?;
    println!("{}", rd.root().display());
    Ok(())
}

fn print_table(t: &CheckpointTable) {
    println!("id,fid,sim");
    for r in &t.records {
        println!("{},{},{}", r.id, r.fid, r.sim.map(|s| s.to_string()).unwrap_or_default());
    }
    println!("selected: {}", t.selected);
}

fn read_records(path: &Path) -> Result<Vec<CheckpointRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(list) = serde_json::from_str::<Vec<CheckpointRecord>>(&text) {
        return Ok(list);
    }
    let report = MetricReport::from_json(&text)?;
    Ok(report.checkpoints.into_iter().flat_map(|t| t.records).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainMask(c) => stage(&c.config, Stage::TrainMask),
        Cmd::TrainImage(c) => stage(&c.config, Stage::TrainImage),
        Cmd::TrainAe(c) => stage(&c.config, Stage::TrainAutoencoder),
        Cmd::GenImages(c) => stage(&c.config, Stage::GenImages),
        Cmd::Sweep(c) => stage(&c.config, Stage::Sweep),
        Cmd::ThreeWay(c) => stage(&c.config, Stage::ThreeWay),
        Cmd::Pipeline(c) => {
            let rd = run_pipeline(&load_config(&c.config)?)?;
            println!("{}", rd.root().display());
            Ok(())
        }
        Cmd::GenMasks {
            config,
            checkpoint,
            count,
            seed,
            out,
        } => match (config, checkpoint, out) {
            (Some(c), None, _) => stage(&c, Stage::GenMasks),
            (None, Some(ckpt), Some(out)) => {
                let ckpt = DenoiserCheckpoint::load(&ckpt)?;
                let gen = generate_masks_detailed(&ckpt, count, seed)?;
                let manifest = MaskManifest {
                    ids: (0..gen.masks.len()).map(|i| format!("mask_{i:05}")).collect(),
                    generator_digest: ckpt.digest(),
                    seed,
                    rejected: gen.rejected,
                    unresolved: gen.unresolved,
                };
                write_masks(&gen.masks, &out, &manifest)?;
                println!("{}", out.display());
                Ok(())
            }
            _ => bail!("gen-masks needs either --config or --checkpoint with --out"),
        },
        Cmd::EvalGen { cfg, kind } => {
            let cfg = load_config(&cfg.config)?;
            let rd = open_run(&cfg)?;
            let _lock = rd.lock("eval-gen")?;
            let table = match kind {
                GenKind::Mask => stage_eval_masks(&cfg, &rd)?,
                GenKind::Image => stage_eval_images(&cfg, &rd)?,
            };
            print_table(&table);
            Ok(())
        }
        Cmd::Select { records } => {
            let recs = read_records(&records)?;
            let best = select_best_checkpoint(&recs)?;
            println!("{}", serde_json::to_string(&best)?);
            Ok(())
        }
        Cmd::TrainSeg {
            train,
            test,
            out,
            seg_config,
            resolution,
            model,
            epochs,
            seed,
        } => {
            let mut scfg = match seg_config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str::<SegTrainConfig>(&text).map_err(|e| polypdiff::Error::Malformed {
                        path: p.clone(),
                        reason: e.to_string(),
                    })?
                }
                None => SegTrainConfig::default(),
            };
            scfg.model = model.unwrap_or(scfg.model);
            scfg.epochs = epochs.unwrap_or(scfg.epochs);
            scfg.seed = seed.unwrap_or(scfg.seed);
            let train = load_paired_dataset(&train, resolution, 0.5)?;
            let test = load_paired_dataset(&test, resolution, 0.5)?;
            let trained = train_segmenter(&train, &scfg)?;
            let eval = evaluate_segmenter(&trained.best, &test, DEFAULT_THRESHOLD)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            trained.best.save(&out.join("segmenter.ckpt"))?;
            write_audit_csv(&eval.per_image, &out.join("audit.csv"))?;
            let summary = serde_json::json!({
                "model": scfg.model.name(),
                "best_epoch": trained.best.epoch,
                "micro": eval.micro,
                "imagewise": eval.imagewise,
            });
            let text = serde_json::to_string_pretty(&summary)?;
            std::fs::write(out.join("metrics.json"), &text)?;
            println!("{text}");
            Ok(())
        }
        Cmd::Gallery {
            config,
            masks,
            rows,
            cols,
            out,
        } => match (config, masks, out) {
            (Some(c), None, _) => stage(&c, Stage::Gallery),
            (None, Some(dir), Some(out)) => {
                let (masks, _) = read_masks(&dir)?;
                let cells: Vec<_> = masks.iter().take(rows * cols).map(GalleryCell::mask).collect();
                println!("{}", emit_gallery(&cells, rows, cols, &out)?.display());
                Ok(())
            }
            _ => bail!("gallery needs either --config or --masks with --out"),
        },
        Cmd::Report { input, out, stem } => {
            let report = load_report(&input)?;
            for p in emit_report(&report, &out, &stem)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Cmd::ToyData { out, count, side, seed } => {
            let spec = ToyCorpus {
                side,
                ..Default::default()
            };
            let ds = toy_dataset(&spec, count, seed, "toy", Provenance::Real)?;
            write_toy_dataset(&ds, &out)?;
            println!("{}", out.display());
            Ok(())
        }
        Cmd::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml_string());
            Ok(())
        }
    }
}

/// One JSON line on stderr: `{"error": <code>, "message": ...}`.
fn report_error(e: &anyhow::Error) {
    let code = e
        .downcast_ref::<polypdiff::Error>()
        .map(polypdiff::Error::code)
        .unwrap_or("cli_error");
    let line = serde_json::json!({ "error": code, "message": format!("{e:#}") });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(2)
        }
    }
}
