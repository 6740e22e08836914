use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtswin::config::{dims3, list};
use mtswin::data::{load_samples, write_synthetic_split, Sample};
use mtswin::error::{Error, Result};
use mtswin::model::{load_checkpoint, save_checkpoint, ModelParams};
use mtswin::train::{self, checkpoint_path, EpochLog, Evaluation, TrainConfig};

#[derive(Parser)]
#[command(name = "mtswin", version, about = "Cardiac MR segmentation and motion-artifact grading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source volume size, XxYxZ.
        #[arg(long, default_value = "64x64x12")]
        dims: String,
        /// Relative class weights for motion classes 1,2,3.
        #[arg(long, default_value = "70,69,21")]
        class_mix: String,
        /// Subdirectory of --out receiving the volumes and manifest.csv.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train one fold (or, without --fold, one model on all samples).
    Train {
        #[arg(long)]
        config: PathBuf,
        /// 1-based fold index.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Cross-validate, save one checkpoint per fold and write the report.
    Cv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score an ensemble on a labelled manifest.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Segment and grade volumes: a .nii file, or every image volume in a
    /// directory (names ending in _gt.nii or _seg.nii are skipped).
    Predict {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every primitive and the model.
    Gradcheck {
        /// Coordinates probed per model parameter tensor.
        #[arg(long, default_value_t = 2)]
        model_coords: usize,
    },
    /// Shifted-window attention time for a grid and its double.
    Bench {
        #[arg(long, default_value = "16x16x16")]
        dims: String,
        #[arg(long, default_value_t = 4)]
        window: usize,
        #[arg(long, default_value_t = 24)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_epoch(e: &EpochLog) {
    println!("{}", e.line());
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::parse(&text)
}

fn manifest(key: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
    value.clone().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn load(cfg: &TrainConfig, path: &Path) -> Result<Vec<Sample>> {
    load_samples(path, cfg.model.input_shape)
}

fn output_dir(cfg: &TrainConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    Ok(dir)
}

fn print_evaluation(title: &str, ev: &Evaluation) {
    let m = &ev.metrics;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let kappa_note = if ev.kappa_degenerate { " (undefined, reported as 0)" } else { "" };
    println!(
        "{title}: accuracy {:.4}  kappa {:.4}{kappa_note}  dice {}  hd95 {}",
        m.accuracy,
        m.kappa,
        opt(m.dice),
        opt(m.hd95)
    );
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<ModelParams>> {
    paths.iter().map(|p| load_checkpoint(p)).collect()
}

fn nifti_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::Io { path: path.display().to_string(), source: e })?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        // Reference masks and earlier outputs are not inputs.
        if name.ends_with(".nii") && !name.ends_with("_gt.nii") && !name.ends_with("_seg.nii") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, seed, dims, class_mix, split } => {
            let dims = dims3("--dims", &dims)?;
            let mix: Vec<f64> = list("--class-mix", &class_mix)?;
            let weights: [f64; 3] = mix
                .try_into()
                .map_err(|_| Error::Config("--class-mix needs three weights".into()))?;
            let records = write_synthetic_split(&out, &split, n, weights, dims, seed)?;
            let counts = [1, 2, 3].map(|c| records.iter().filter(|r| r.motion_class == c).count());
            println!(
                "wrote {} volumes to {} (classes 1/2/3: {}/{}/{})",
                records.len(),
                out.join(&split).display(),
                counts[0],
                counts[1],
                counts[2]
            );
        }
        Command::Train { config, fold } => {
            let cfg = read_config(&config)?;
            let samples = load(&cfg, &manifest("train_manifest", &cfg.train_manifest)?)?;
            let dir = output_dir(&cfg)?;
            match fold {
                Some(f) => {
                    if f == 0 || f > cfg.folds {
                        return Err(Error::Usage(format!("--fold must lie in 1..={}", cfg.folds)));
                    }
                    let split = train::split_samples(&samples, cfg.folds, cfg.seed)?;
                    let (outcome, _) = train::train_fold(&cfg, &samples, &split, f - 1, &mut print_epoch)?;
                    let path = checkpoint_path(&dir, f - 1);
                    save_checkpoint(&outcome.params, &path)?;
                    if let Some(ev) = &outcome.final_eval {
                        print_evaluation(&format!("fold {f} held-out"), ev);
                    }
                    println!("saved {}", path.display());
                }
                None => {
                    let refs: Vec<&Sample> = samples.iter().collect();
                    let outcome = train::train_model(&cfg, &refs, &[], cfg.seed, None, &mut print_epoch)?;
                    let path = dir.join("model.ckpt");
                    save_checkpoint(&outcome.params, &path)?;
                    println!("saved {}", path.display());
                }
            }
        }
        Command::Cv { config } => {
            let mut cfg = read_config(&config)?;
            cfg.output_dir = Some(output_dir(&cfg)?);
            let samples = load(&cfg, &manifest("train_manifest", &cfg.train_manifest)?)?;
            let validation = cfg.val_manifest.as_ref().map(|p| load(&cfg, p)).transpose()?;
            let out = train::run_cv(&cfg, &samples, validation.as_deref(), &mut print_epoch)?;
            print!("{}", out.report.to_text());
        }
        Command::Eval { checkpoints, manifest } => {
            let models = load_models(&checkpoints)?;
            let samples = load_samples(&manifest, models[0].config.input_shape)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let ev = train::evaluate(&models, &refs)?;
            for p in &ev.predictions {
                let dice = p.seg.as_ref().map_or("n/a".to_string(), |s| format!("{:.4}", s.mean_dice()));
                println!("{:<28} label {} predicted {} dice {dice}", p.id, p.label, p.predicted);
            }
            print_evaluation(&format!("{} samples", refs.len()), &ev);
        }
        Command::Predict { checkpoints, input, out } => {
            let models = load_models(&checkpoints)?;
            let inputs = nifti_inputs(&input)?;
            let written = train::predict_files(&models, &inputs, &out)?;
            println!("wrote {} masks and {}", written.len(), out.join("predictions.csv").display());
        }
        Command::Gradcheck { model_coords } => {
            let results = mtswin::gradcheck::run_suite(model_coords)?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAILED" };
                failed += usize::from(!r.passed());
                println!(
                    "{status:<6} {:<32} rel {:.2e} ({}, {} coords, {:.2}s)",
                    r.name, r.rel_error, r.worst, r.coords, r.seconds
                );
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks failed")));
            }
        }
        Command::Bench { dims, window, channels, heads, reps } => {
            let [x, y, z] = dims3("--dims", &dims)?;
            let b = mtswin::bench::attention_scaling([z, y, x], window, channels, heads, reps)?;
            print!("{}", b.to_text());
        }
    }
    Ok(())
}
