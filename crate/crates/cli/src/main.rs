//! `mmcnn`: synthetic data generation, training, evaluation and CAM rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmcnn_core::cam::{render, sample_cams};
use mmcnn_core::data::synth::MANIFEST_NAME;
use mmcnn_core::data::{synth_generate, Dataset, PairPool, Sample, Split, SynthConfig};
use mmcnn_core::metrics::{F1Variant, Report};
use mmcnn_core::net::{load_checkpoint, BranchConfig, Modality, TwoStreamModel};
use mmcnn_core::train::{evaluate_split, train, TrainConfig};
use mmcnn_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "mmcnn",
    version,
    about = "Two-stream fundus/OCT AMD classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Render class activation maps for selected samples.
    Cam(CamArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eyes_per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    oct_missing_frac: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

/// Layout of the `train --config` file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    model: BranchConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON file with `train` and `model` sections; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    modality: Option<Modality>,
    /// Pair pool of the two-stream model: loose or strict.
    #[arg(long)]
    pairing: Option<PairPool>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated epochs at which the learning rate drops; empty for none.
    #[arg(long, value_parser = parse_epochs)]
    lr_decay_epochs: Option<Epochs>,
    /// Backbone stem width.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Per-class F1 variant: pr (precision/recall) or hm (sensitivity/specificity).
    #[arg(long, default_value = "pr", value_parser = parse_f1)]
    f1: F1Variant,
    /// Writes `metrics.json` here when given.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated eye ids; `eye#k` selects the eye's k-th OCT image.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<String>,
    /// Class name to explain; defaults to the predicted class.
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_f1(s: &str) -> std::result::Result<F1Variant, String> {
    match s {
        "pr" => Ok(F1Variant::PrecisionRecall),
        "hm" => Ok(F1Variant::SensSpec),
        other => Err(format!("unknown F1 variant {other:?}, expected pr or hm")),
    }
}

#[derive(Clone, Debug)]
struct Epochs(Vec<usize>);

fn parse_epochs(s: &str) -> std::result::Result<Epochs, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| format!("bad epoch {p:?}")))
        .collect::<std::result::Result<_, _>>()
        .map(Epochs)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(v) = args.eyes_per_class {
        cfg.eyes_per_class = v;
    }
    if let Some(v) = args.val_per_class {
        cfg.val_per_class = v;
    }
    if let Some(v) = args.test_per_class {
        cfg.test_per_class = v;
    }
    if let Some(v) = args.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = args.oct_missing_frac {
        cfg.oct_missing_frac = v;
    }
    if let Some(v) = args.noise_sigma {
        cfg.noise_sigma = v;
    }
    let records = synth_generate(&cfg, &args.out_dir)?;
    let strict = mmcnn_core::data::strict_pairs(&records, Split::Train).len()
        + mmcnn_core::data::strict_pairs(&records, Split::Val).len()
        + mmcnn_core::data::strict_pairs(&records, Split::Test).len();
    if strict == 0 {
        log::warn!("generated data has no strict fundus/OCT pairs");
    }
    println!(
        "wrote {} eyes ({} strict pairs) to {}",
        records.len(),
        strict,
        args.out_dir.join(MANIFEST_NAME).display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let t = &mut file.train;
    t.seed = args.seed;
    if let Some(v) = args.modality {
        t.modality = v;
    }
    if let Some(v) = args.pairing {
        t.pairing = Some(v);
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.momentum {
        t.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr_decay_epochs {
        t.lr_decay_epochs = v.0;
    }
    if args.no_augment {
        t.augment = false;
    }
    if let Some(w) = args.width {
        file.model = BranchConfig::with_width(w, file.model.input_size);
    }
    // Reject bad flag combinations before touching the data.
    file.train.validate()?;
    let data = Dataset::load(&args.manifest)?;
    if args.config.is_none() {
        file.model.input_size = data.image_size();
    }
    create_dir(&args.out_dir)?;
    write_json(&args.out_dir.join("config.json"), &file)?;
    let out = train::<f32>(&data, &file.model, &file.train, Some(&args.out_dir))?;
    let r = &out.report;
    println!(
        "best epoch {} of {}: val macro F1 {:.3}, accuracy {:.3}",
        r.best_epoch,
        r.epochs.len(),
        r.best_val_macro_f1,
        r.best_val_accuracy
    );
    if let Some(p) = &r.checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let model: TwoStreamModel<f32> = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::load(&args.manifest)?;
    let cm = evaluate_split(&model, &data, args.split, 64)?;
    let report = Report::new(cm, &model.spec().class_names, args.f1)?;
    print!("{}", report.table());
    if let Some(dir) = &args.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
    }
    Ok(())
}

/// Resolves `eye` or `eye#k` to a sample matching the model's inputs.
fn resolve_sample(data: &Dataset, id: &str, modality: Modality) -> Result<Sample> {
    let (eye, k) = match id.split_once('#') {
        Some((eye, k)) => (
            eye,
            k.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad OCT index in {id:?}")))?,
        ),
        None => (id, 0),
    };
    let rec = data
        .record(eye)
        .ok_or_else(|| Error::Config(format!("unknown eye {eye:?}")))?;
    let fundus = modality.uses_fundus().then(|| rec.fundus.first().cloned());
    let oct = modality.uses_oct().then(|| rec.oct.get(k).cloned());
    let missing =
        |what: &str| Error::Config(format!("eye {eye} has no {what} image for this model"));
    Ok(Sample {
        eye_id: rec.eye_id.clone(),
        class: rec.class,
        fundus: fundus
            .map(|f| f.ok_or_else(|| missing("fundus")))
            .transpose()?,
        oct: oct.map(|o| o.ok_or_else(|| missing("OCT"))).transpose()?,
    })
}

fn run_cam(args: CamArgs) -> Result<()> {
    let model: TwoStreamModel<f32> = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::load(&args.manifest)?;
    let names = &model.spec().class_names;
    let class = match &args.class {
        Some(name) => Some(names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Config(format!("unknown class {name:?}, expected one of {names:?}"))
        })?),
        None => None,
    };
    for id in &args.samples {
        let sample = resolve_sample(&data, id, model.modality())?;
        let batch = data.batch::<f32>(std::slice::from_ref(&sample), None)?;
        let f = batch.fundus.map(|t| t.select(0)).transpose()?;
        let o = batch.oct.map(|t| t.select(0)).transpose()?;
        let cams = sample_cams(&model, f.as_ref(), o.as_ref(), class)?;
        let class_name = &names[cams.class];
        let safe_id = id.replace('#', "_");
        let sources = [(&cams.fundus, &sample.fundus), (&cams.oct, &sample.oct)];
        for (cam, image) in sources {
            if let (Some(cam), Some(image)) = (cam, image) {
                let base = data.image(&image.path)?;
                let out = render(cam, base, &safe_id, class_name, &args.out_dir)?;
                println!("{}", out.overlay.display());
            }
        }
        println!(
            "{id}: true {} predicted {} explained {class_name} score {:.4} residual {:.2e}",
            sample.class,
            names[cams.predicted],
            cams.scores[cams.class],
            cams.residual()
        );
    }
    Ok(())
}

/// Training frees and reallocates multi-megabyte buffers every step; keeping
/// them on the heap avoids constant page faults from glibc's mmap threshold.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
    }
}

fn main() -> ExitCode {
    tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Cam(a) => run_cam(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
