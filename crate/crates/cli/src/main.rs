//! `salad`: end-to-end driver for the three-branch logical anomaly
//! detection pipeline.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use salad_core::compmap::{load_composition_map, save_composition_map, save_mask};
use salad_core::pipeline::{run_stage, RunConfig, Stage};
use salad_core::simulate::{self, AnomalyKind};
use salad_core::toy::{generate_toy_dataset, ToySpec};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "salad", version, about = "Three-branch logical anomaly detection over composition maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key-value config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Category name (overrides the config file).
    #[arg(long)]
    category: Option<String>,
    /// Dataset root directory (overrides the config file).
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Working directory for artifacts (overrides SALAD_WORKDIR).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(c) = &self.category {
            config.category = c.clone();
        }
        if let Some(r) = &self.dataset_root {
            config.dataset_root = r.clone();
        }
        if let Some(w) = &self.workdir {
            config.workdir = w.clone();
        }
        if let Some(s) = self.seed {
            config.set("seed", &s.to_string())?;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic toy dataset in the benchmark layout.
    GenToy {
        /// Toy spec JSON; omitted = built-in default spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset root (the category directory).
        #[arg(long)]
        out: PathBuf,
        /// Write the effective spec JSON here and exit.
        #[arg(long)]
        write_default_spec: Option<PathBuf>,
    },
    /// Generate composition maps: pseudo-labels, segmenter training and the
    /// per-split map cache.
    GenMaps {
        #[command(flatten)]
        config: ConfigArgs,
        /// Feature/mask backend id (stub | precomputed).
        #[arg(long)]
        backend: Option<String>,
        /// Number of part clusters.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train one branch.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// appearance | composition | global
        #[arg(long)]
        branch: String,
    },
    /// Compute validation score statistics for fusion.
    Calibrate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate the test split and write the JSON report + score CSV.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Copy the JSON report here as well.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Exclude a branch from fusion (repeatable).
        #[arg(long = "disable-branch")]
        disable_branch: Vec<String>,
    },
    /// Score a single image and write its maps.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one synthetic-anomaly strategy to a composition map.
    Simulate {
        /// Input composition map (indexed PNG with meta.json sidecar).
        #[arg(long = "in")]
        input: PathBuf,
        /// perlin_paste | component_removal | component_inpaint | mix
        #[arg(long)]
        kind: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Donor map for component_inpaint.
        #[arg(long)]
        source: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenToy {
            spec,
            out,
            write_default_spec,
        } => {
            let spec = match spec {
                Some(path) => ToySpec::load(&path)?,
                None => ToySpec::default(),
            };
            if let Some(path) = write_default_spec {
                spec.save(&path)?;
                println!("wrote spec to {}", path.display());
                return Ok(());
            }
            let index = generate_toy_dataset(&spec, &out)?;
            println!(
                "generated {}: {} train / {} validation / {} test",
                out.display(),
                index.train.len(),
                index.validation.len(),
                index.test.len()
            );
        }
        Command::GenMaps { config, backend, k } => {
            let mut run = config.build()?;
            if let Some(b) = backend {
                run.set("feature_backend", &b)?;
                run.set("mask_backend", &b)?;
            }
            if let Some(k) = k {
                run.set("k", &k.to_string())?;
            }
            let report = run_stage(&run, Stage::GenMaps)?;
            print_report(&report);
        }
        Command::Train { config, branch } => {
            let run = config.build()?;
            let stage = match branch.as_str() {
                "appearance" => Stage::TrainAppearance,
                "composition" => Stage::TrainComposition,
                "global" => Stage::TrainGlobal,
                other => bail!("unknown branch `{other}` (expected appearance | composition | global)"),
            };
            let report = run_stage(&run, stage)?;
            print_report(&report);
        }
        Command::Calibrate { config } => {
            let run = config.build()?;
            let report = run_stage(&run, Stage::Calibrate)?;
            print_report(&report);
        }
        Command::Eval {
            config,
            report,
            disable_branch,
        } => {
            let mut run = config.build()?;
            if !disable_branch.is_empty() {
                run.disabled_branches = disable_branch;
            }
            let stage_report = run_stage(&run, Stage::Eval)?;
            print_report(&stage_report);
            let report_path = salad_core::pipeline::stages::eval_report_path(&run);
            let text = std::fs::read_to_string(&report_path)
                .with_context(|| format!("reading {}", report_path.display()))?;
            println!("{text}");
            if let Some(dest) = report {
                std::fs::write(&dest, &text).with_context(|| format!("writing {}", dest.display()))?;
            }
        }
        Command::Infer { config, image, out } => {
            let run = config.build()?;
            let fusion = salad_core::pipeline::stages::infer_image(&run, &image, &out)?;
            println!(
                "total={:.4} (appearance z={:.4} composition z={:.4} global z={:.4})",
                fusion.total, fusion.z_a, fusion.z_c, fusion.z_g
            );
            println!("maps written to {}", out.display());
        }
        Command::Simulate {
            input,
            kind,
            seed,
            out,
            source,
        } => {
            let map = load_composition_map(&input)?;
            let sample = match kind.as_str() {
                "perlin_paste" => simulate::simulate_structural(&map, seed)?,
                "component_removal" => simulate::simulate_removal(&map, seed)?,
                "component_inpaint" => {
                    let Some(source) = source else {
                        bail!("component_inpaint needs --source <map>");
                    };
                    let donor = load_composition_map(&source)?;
                    simulate::simulate_inpaint(&map, &donor, seed)?
                }
                "mix" => {
                    let donors = match source {
                        Some(s) => vec![load_composition_map(&s)?],
                        None => vec![map.clone()],
                    };
                    simulate::sample_training_example(&map, &donors, None, seed)?
                }
                other => bail!("unknown kind `{other}`"),
            };
            std::fs::create_dir_all(&out)?;
            save_composition_map(&sample.augmented, &out.join("augmented.png"), Some(seed))?;
            save_mask(
                &sample.gt_mask,
                sample.augmented.height,
                sample.augmented.width,
                &out.join("gt_mask.png"),
            )?;
            let kind_name = match sample.kind {
                AnomalyKind::PerlinPaste => "perlin_paste",
                AnomalyKind::ComponentInpaint => "component_inpaint",
                AnomalyKind::ComponentRemoval => "component_removal",
                AnomalyKind::None => "none",
            };
            println!("kind={kind_name} changed_pixels={}", sample.gt_area());
        }
    }
    Ok(())
}

fn print_report(report: &salad_core::pipeline::StageReport) {
    if report.skipped {
        println!("{}: up-to-date, skipped", report.stage);
    } else {
        println!("{}: done in {:.1}s", report.stage, report.wall_seconds);
    }
}
