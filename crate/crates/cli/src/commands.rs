use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use fagg::classifiers::{is_standard_mixture_count, PredictionSet};
use fagg::data::{
    generate_synthetic, load_dataset, load_predictions, write_dataset, write_predictions,
    SyntheticSpec,
};
use fagg::fusion::{fuse_linear, grid_search_weights, intra_template, regress_weights};
use fagg::metrics::{gap_at, truth_from_samples, GapMMode, TruthSet};
use fagg::training::{load_checkpoint, save_checkpoint, train, Checkpoint};
use fagg::{Error, Result};

use crate::config::{FusionPlan, FusionStrategy, RunConfig};

#[derive(Args)]
pub struct GenArgs {
    /// Number of classes (>= 2).
    #[arg(long)]
    classes: usize,
    /// Number of videos.
    #[arg(long)]
    videos: usize,
    /// Frames per video (>= 4).
    #[arg(long)]
    frames: usize,
    /// Feature dimension per frame (>= 2).
    #[arg(long)]
    dim: usize,
    /// Gaussian noise scale added to every frame value.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Probability of each extra label beyond the primary class.
    #[arg(long, default_value_t = 0.1)]
    multilabel: f64,
    /// Columns treated as the audio stream (default: dim/4, 0 if dim < 8).
    #[arg(long)]
    audio_dim: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run_gen(args: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        videos: args.videos,
        frames: args.frames,
        dim: args.dim,
        audio_dim: args.audio_dim,
        noise: args.noise,
        multilabel_rate: args.multilabel,
        seed: args.seed,
    };
    let (meta, samples) = generate_synthetic(&spec)?;
    write_dataset(&meta, &samples, &args.out)?;
    println!(
        "wrote {} videos (dim {}, vocab {}) to {}",
        samples.len(),
        meta.dim,
        meta.vocab,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config (model, transforms, train hyperparameters).
    #[arg(long)]
    config: PathBuf,
    /// Dataset file (.jsonl).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the run manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    seed: u64,
    initial_loss: f64,
    final_loss: f64,
    epoch_losses: &'a [f64],
    checkpoints: Vec<String>,
    kept_labels: Option<Vec<usize>>,
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let run = RunConfig::load(&args.config)?;
    if !is_standard_mixture_count(run.mixtures) {
        eprintln!(
            "warning: {} mixtures is unusual (common counts are 1, 2, 4, 8, 16)",
            run.mixtures
        );
    }
    let (meta, samples) = load_dataset(&args.data)?;
    let spec = run.model_spec();
    let train_config = run.train_config();
    let outcome = train(&spec, &meta, &samples, &train_config)?;

    fs::create_dir_all(&args.out_dir)?;
    let mut checkpoint_files = Vec::with_capacity(outcome.checkpoints.len());
    for cp in &outcome.checkpoints {
        let name = format!("ckpt-{}.fagg", cp.step);
        save_checkpoint(cp, args.out_dir.join(&name))?;
        checkpoint_files.push(name);
    }
    let manifest = Manifest {
        config: &run,
        seed: train_config.seed,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        epoch_losses: &outcome.epoch_losses,
        checkpoints: checkpoint_files,
        kept_labels: outcome
            .model
            .filter
            .as_ref()
            .map(|f| f.kept().to_vec()),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest: {e}")))?;
    fs::write(args.out_dir.join("manifest.json"), manifest_json + "\n")?;
    println!(
        "trained {} checkpoints, loss {:.6} -> {:.6}",
        outcome.checkpoints.len(),
        outcome.initial_loss,
        outcome.final_loss
    );
    Ok(())
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predictions kept per video.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

pub fn run_predict(args: PredictArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (meta, samples) = load_dataset(&args.data)?;
    check_dims(&checkpoint, &meta)?;
    let model = checkpoint.to_model()?;
    let mut preds = PredictionSet::new();
    for sample in &samples {
        preds.insert(&sample.id, model.predict(sample, args.top)?)?;
    }
    write_predictions(&preds, &args.out, args.top)?;
    println!("wrote predictions for {} videos to {}", preds.len(), args.out.display());
    Ok(())
}

fn check_dims(cp: &Checkpoint, meta: &fagg::data::DatasetMeta) -> Result<()> {
    if cp.dims.dim != meta.dim
        || cp.dims.visual_dim != meta.visual_dim
        || cp.dims.audio_dim != meta.audio_dim
        || cp.dims.vocab != meta.vocab
    {
        return Err(Error::data(format!(
            "checkpoint was trained on dim {}/{}+{} vocab {}, dataset has {}/{}+{} vocab {}",
            cp.dims.dim,
            cp.dims.visual_dim,
            cp.dims.audio_dim,
            cp.dims.vocab,
            meta.dim,
            meta.visual_dim,
            meta.audio_dim,
            meta.vocab
        )));
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    /// Dataset file providing the ground-truth labels.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// in_predictions counts correct entries in the pooled top-k list;
    /// ground_truth counts ground-truth positives (capped at k per video).
    #[arg(long, default_value = "in_predictions")]
    m_mode: String,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let mode = GapMMode::parse(&args.m_mode)?;
    let preds = load_predictions(&args.preds)?;
    let (_, samples) = load_dataset(&args.data)?;
    let truth = truth_from_samples(&samples);
    let gap = gap_at(&preds, &truth, args.k, mode)?;
    let report = serde_json::json!({
        "gap": gap,
        "k": args.k,
        "m_mode": mode.as_str(),
    });
    println!("{report}");
    Ok(())
}

#[derive(Args)]
pub struct FuseArgs {
    /// Fusion plan JSON.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predictions kept per video in the fused output.
    #[arg(long, default_value_t = 20)]
    top: usize,
}

pub fn run_fuse(args: FuseArgs) -> Result<()> {
    let plan = FusionPlan::load(&args.plan)?;

    let mut stage1_outputs = Vec::with_capacity(plan.stage1.len());
    for entry in &plan.stage1 {
        let mut sets = Vec::with_capacity(entry.sets.len());
        for path in &entry.sets {
            sets.push(load_predictions(path)?);
        }
        let refs: Vec<&PredictionSet> = sets.iter().collect();
        let weights = match &entry.weights {
            Some(w) => w.clone(),
            None => match intra_template(refs.len()) {
                Some(t) => t.to_vec(),
                None => vec![1.0 / refs.len() as f64; refs.len()],
            },
        };
        stage1_outputs.push(fuse_linear(&refs, &weights)?);
    }
    let stage1_refs: Vec<&PredictionSet> = stage1_outputs.iter().collect();

    let truth: Option<TruthSet> = match &plan.truth {
        Some(path) => {
            let (_, samples) = load_dataset(path)?;
            Some(truth_from_samples(&samples))
        }
        None => None,
    };
    let stage2_weights = match plan.strategy {
        FusionStrategy::Empirical => match &plan.stage2.weights {
            Some(w) => w.clone(),
            None if stage1_refs.len() == 1 => vec![1.0],
            None => {
                return Err(Error::config(
                    "empirical strategy needs stage2 weights for more than one model",
                ))
            }
        },
        FusionStrategy::Grid => {
            let truth = truth
                .as_ref()
                .ok_or_else(|| Error::config("grid strategy needs a truth dataset"))?;
            let search = grid_search_weights(&stage1_refs, truth, plan.step, plan.k)?;
            eprintln!(
                "grid search picked weights {:?} (gap {:.6})",
                search.weights, search.gap
            );
            search.weights
        }
        FusionStrategy::Regress => {
            let truth = truth
                .as_ref()
                .ok_or_else(|| Error::config("regress strategy needs a truth dataset"))?;
            let weights = regress_weights(&stage1_refs, truth)?;
            eprintln!("regression picked weights {weights:?}");
            weights
        }
    };
    if stage2_weights.len() != stage1_refs.len() {
        return Err(Error::config(format!(
            "{} stage2 weights for {} stage1 outputs",
            stage2_weights.len(),
            stage1_refs.len()
        )));
    }
    let fused = fuse_linear(&stage1_refs, &stage2_weights)?;
    write_predictions(&fused, &args.out, args.top)?;
    println!("wrote fused predictions to {}", args.out.display());
    Ok(())
}
