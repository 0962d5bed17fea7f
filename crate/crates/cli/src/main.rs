//! `dcr`: train, run and evaluate the cascaded landmark aligner.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 checkpoint error, 4 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dcr_core::checkpoint::Checkpoint;
use dcr_core::config::{Profile, RunConfig, TrainingMode};
use dcr_core::data::{
    augment_dataset, crop_and_resize, load_manifest, write_manifest, write_pts, BBox, GrayImage, ManifestEntry,
    Sample,
};
use dcr_core::metrics::{default_thresholds, write_report, EvalReport};
use dcr_core::pipeline;
use dcr_core::shape_space::kmeans_shapes;
use dcr_core::{Error, LandmarkShape};

#[derive(Parser, Debug)]
#[command(name = "dcr", version, about = "Deep cascaded regression for facial landmark alignment")]
struct Cli {
    /// JSON run configuration layered over the profile preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Sequential,
    Joint,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train network, shape space and cascade; write one checkpoint.
    Train {
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Print the predicted landmarks (`x y` per line) for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Face box as `left top width height`.
        #[arg(long, num_args = 4, value_names = ["LEFT", "TOP", "WIDTH", "HEIGHT"], allow_negative_numbers = true)]
        bbox: Vec<f64>,
    },
    /// Evaluate on a manifest (or the configured test set) and write a CED report.
    Evaluate {
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
        /// Also write the key=value summary here.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model.
        #[arg(long)]
        identity: bool,
    },
    /// Write the augmented dataset (images, pts, manifest) to a directory.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cluster working-frame training shapes into the shape space.
    ClusterShapes {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "shapes.txt")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
}

enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Checkpoint(_) => 3,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Contract(_) | Error::Shape { .. } => 2,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, profile)?,
        None => RunConfig::for_profile(profile),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_shape(shape: &LandmarkShape) {
    for p in shape.points() {
        println!("{} {}", p.x, p.y);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Train { out, mode } => {
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Sequential => TrainingMode::Sequential,
                    ModeArg::Joint => TrainingMode::Joint,
                };
            }
            cfg.validate()?;
            let (train, test) = pipeline::load_datasets(&cfg)?;
            let outcome = pipeline::train(&cfg, &train, &mut |line: &str| println!("{line}"))?;
            outcome
                .checkpoint
                .save(&out)
                .map_err(|e| Error::Data(format!("cannot write checkpoint: {e}")))?;
            println!("checkpoint={}", out.display());
            if !test.is_empty() {
                let report = pipeline::evaluate(&outcome.checkpoint, &test, &cfg.eye_indices(), &default_thresholds())?;
                println!("test_mean_error_percent={:.6}", report.mean_error_percent());
            }
        }
        Command::Predict {
            checkpoint,
            image,
            bbox,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let image = GrayImage::load(&image)?;
            let bbox = BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]);
            let p = ck.cascade.landmarks();
            let sample = Sample {
                image,
                shape: LandmarkShape::zeros(p),
                bbox,
            };
            let pred = pipeline::predict_sample(&ck, &sample)?;
            print_shape(pred.final_shape());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            summary,
            identity,
        } => {
            let samples = match &manifest {
                Some(m) => load_manifest(m)?,
                None => {
                    cfg.validate()?;
                    pipeline::load_datasets(&cfg)?.1
                }
            };
            if samples.is_empty() {
                return Err(Error::Data("evaluation set is empty".into()).into());
            }
            let truths: Vec<LandmarkShape> = samples.iter().map(|s| s.shape.clone()).collect();
            let eyes = cfg
                .eyes
                .clone()
                .unwrap_or_else(|| dcr_core::metrics::EyeIndices::for_landmarks(truths[0].len()));
            let preds = if identity {
                truths.clone()
            } else {
                let ck = Checkpoint::load(checkpoint.as_deref().expect("clap enforces --checkpoint"))?;
                pipeline::predict_all(&ck, &samples)?
                    .iter()
                    .map(|p| p.final_shape().clone())
                    .collect()
            };
            let report = EvalReport::compute(&preds, &truths, &eyes, &default_thresholds())?;
            write_report(&report, &out)?;
            if let Some(path) = summary {
                write_file(&path, report.to_summary())?;
            }
            println!("images={}", report.images);
            println!("mean_error_percent={:.6}", report.mean_error_percent());
            println!("report={}", out.display());
        }
        Command::Augment { manifest, out_dir } => {
            let samples = load_manifest(&manifest)?;
            let p = samples.first().map_or(cfg.landmarks, |s| s.shape.len());
            let aug = cfg.augment_or_default(p)?;
            let expanded = augment_dataset(&samples, &aug, cfg.seed)?;
            fs::create_dir_all(&out_dir)
                .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
            let per = aug.multiplicity();
            let mut entries = Vec::with_capacity(expanded.len());
            for (k, s) in expanded.iter().enumerate() {
                let stem = format!("s{:05}_v{:03}", k / per, k % per);
                let (img, pts) = (format!("{stem}.pgm"), format!("{stem}.pts"));
                s.image.save_pgm(&out_dir.join(&img))?;
                write_file(&out_dir.join(&pts), write_pts(&s.shape))?;
                entries.push(ManifestEntry {
                    image: img.into(),
                    pts: pts.into(),
                    bbox: s.bbox,
                });
            }
            write_file(&out_dir.join("manifest.txt"), write_manifest(&entries))?;
            println!("inputs={} multiplicity={per} outputs={}", samples.len(), expanded.len());
        }
        Command::ClusterShapes { manifest, out } => {
            let samples = match &manifest {
                Some(m) => load_manifest(m)?,
                None => {
                    cfg.validate()?;
                    pipeline::load_datasets(&cfg)?.0
                }
            };
            let shapes = samples
                .iter()
                .map(|s| Ok(crop_and_resize(s, cfg.input_size, cfg.pad_fraction)?.sample.shape))
                .collect::<Result<Vec<_>, Error>>()?;
            let space = kmeans_shapes(&shapes, cfg.candidates, cfg.seed, cfg.kmeans_iters)?;
            let mut text = format!("# seed={} candidates={} landmarks={}\n", space.seed(), space.len(), space.landmarks());
            for c in space.candidates() {
                let flat: Vec<String> = c.to_flat().iter().map(f64::to_string).collect();
                let _ = writeln!(text, "{}", flat.join(" "));
            }
            write_file(&out, text)?;
            println!("candidates={} out={}", space.len(), out.display());
        }
        Command::Gradcheck { corrupt } => {
            let rows = pipeline::gradcheck_suite(corrupt)?;
            let mut failed = Vec::new();
            for r in &rows {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "op={} max_rel_error={:.3e} tolerance={:.0e} status={status}",
                    r.op, r.max_rel_error, r.tolerance
                );
                if !r.passed() {
                    failed.push(r.op);
                }
            }
            if !failed.is_empty() {
                println!("gradcheck=fail");
                return Err(Failure::Verification(format!("gradient check failed for {}", failed.join(", "))));
            }
            println!("gradcheck=pass");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(4)
        }
    }
}
