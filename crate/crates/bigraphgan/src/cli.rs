//! Command implementations behind the `bigraphgan` binary: dataset
//! generation, training with checkpoints, evaluation, single-pair inference,
//! and the ablation ladder.
//!
//! Exit-code table: 0 ok, 2 usage/config, 3 I/O or malformed files,
//! 4 numeric failure, 5 checkpoint/corpus/config mismatch.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::Rng;

use crate::checkpoint::{load_checkpoint, load_perceptual, read_container, save_checkpoint, CheckpointMeta};
use crate::config::{deterministic_mode_forced, RunConfig, ValidatedRun};
use crate::data::{
    from_model_range, heatmap_to_gray, hcat_images, joints_to_heatmap, load_dataset, make_dataset,
    read_ppm, read_skeleton, write_ppm, Dataset, SamplePair, Split,
};
use crate::error::{Error, Result};
use crate::metrics::{masked_ssim, pose_mask, psnr, ssim, MetricReport};
use crate::net::{
    prepare_sample, run_generator, train_step, GeneratorParams, LossWeights, ModelConfig,
    OptimHyper, StepRecord, TrainState, Variant,
};
use crate::nn::ParamStore;
use crate::tensor::{Dtype, Scalar, Tensor};

/// Map an error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite { .. } => 4,
        Error::Mismatch(_) | Error::Shape(_) | Error::Contract(_) => 5,
    }
}

/// Foreground-mask dilation margin used by evaluation, in pixels.
pub const EVAL_MASK_MARGIN: f64 = 3.0;

// ---- generate-data ----------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Total number of sample pairs.
    #[arg(long, default_value_t = 512)]
    pub pairs: usize,
    /// How many of the pairs are tagged as the test split.
    #[arg(long, default_value_t = 0)]
    pub test_pairs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_generate_data(args: &GenerateArgs) -> Result<()> {
    let summary = make_dataset(
        args.pairs,
        args.test_pairs,
        args.seed,
        args.size,
        args.size,
        &args.out,
    )?;
    println!(
        "corpus written to {}: {} pairs ({} train, {} test), {}x{} px, seed {}",
        args.out.display(),
        summary.pairs,
        summary.train,
        summary.test,
        args.size,
        args.size,
        args.seed
    );
    Ok(())
}

// ---- train --------------------------------------------------------------------

fn perceptual_note(source: &str) -> String {
    format!(
        "perceptual features: {} (fixed random extractor replaces a pretrained backbone)",
        source
    )
}

pub fn cmd_train(config_path: &Path) -> Result<()> {
    let run = RunConfig::from_file(config_path)?.validate()?;
    match run.dtype {
        Dtype::F32 => train_with::<f32>(&run),
        Dtype::F64 => train_with::<f64>(&run),
    }
}

fn train_with<S: Scalar>(run: &ValidatedRun) -> Result<()> {
    let dataset = load_dataset(&run.dataset)?;
    if dataset.height != run.model.image_h || dataset.width != run.model.image_w {
        return Err(Error::Mismatch(format!(
            "corpus is {}x{} but the config asks for {}x{}",
            dataset.height, dataset.width, run.model.image_h, run.model.image_w
        )));
    }
    let train_pairs = dataset.split(Split::Train);
    if train_pairs.is_empty() {
        return Err(Error::Mismatch("corpus has no train pairs".into()));
    }

    let (mut state, perceptual_source, resuming) = match &run.resume {
        Some(path) => {
            let (state, meta) = load_checkpoint::<S>(path)?;
            if meta.model != run.model {
                return Err(Error::Mismatch(format!(
                    "checkpoint model config differs from the run config ({} vs requested)",
                    path.display()
                )));
            }
            (state, meta.perceptual_source, true)
        }
        None => {
            let state = TrainState::<S>::new(run.model.clone(), run.hyper, run.seed)?;
            (state, "seeded".to_string(), false)
        }
    };
    if let Some(path) = &run.perceptual_weights {
        let tensors = load_perceptual::<S>(path)?;
        state.per.load_weights(&tensors)?;
    }
    let perceptual_source = match &run.perceptual_weights {
        Some(p) => format!("file {}", p.display()),
        None => perceptual_source,
    };

    fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(run.out_dir.display().to_string(), e))?;
    let log_path = run.out_dir.join("train_log.tsv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .truncate(!resuming)
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    println!(
        "training variant {} for {} steps ({} mode, {} train pairs, batch {})",
        state.cfg.variant.name(),
        run.steps,
        S::DTYPE,
        train_pairs.len(),
        run.batch_size
    );
    println!("{}", perceptual_note(&perceptual_source));

    while state.step < run.steps {
        let mut batch = Vec::with_capacity(run.batch_size);
        for _ in 0..run.batch_size {
            let idx = state.rng.gen_range(0..train_pairs.len());
            batch.push(prepare_sample::<S>(&state.cfg, train_pairs[idx]));
        }
        let rec = train_step(&mut state, &batch, &run.weights).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                what,
                step: Some(state.step + 1),
            },
            other => other,
        })?;
        writeln!(log, "{}", rec.log_line())
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;

        let at_cadence = |every: u64| every > 0 && rec.step % every == 0;
        if at_cadence(run.checkpoint_every) && rec.step < run.steps {
            let path = run.out_dir.join(format!("ckpt_{:06}.bgg", rec.step));
            save_checkpoint(&path, &state, &run.weights, &perceptual_source)?;
        }
        if at_cadence(run.sample_every) {
            let path = run.out_dir.join(format!("sample_{:06}.ppm", rec.step));
            write_sample_grid(&path, &state, train_pairs[0])?;
        }
        if rec.step % 100 == 0 || rec.step == run.steps {
            println!(
                "step {}\ttotal {:.4}\tl1 {:.4}\td {:.4}",
                rec.step, rec.total, rec.l1, rec.d_loss
            );
        }
    }
    let final_path = run.out_dir.join("ckpt_final.bgg");
    save_checkpoint(&final_path, &state, &run.weights, &perceptual_source)?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

/// source | target pose render | output | target, side by side.
fn write_sample_grid<S: Scalar>(
    path: &Path,
    state: &TrainState<S>,
    pair: &SamplePair,
) -> Result<()> {
    let s = prepare_sample::<S>(&state.cfg, pair);
    let (result, _, _) = run_generator(
        &state.cfg,
        &state.gen,
        &state.gen_params,
        &s.i_a,
        &s.p_a,
        &s.p_b,
    )?;
    let pose_vis = heatmap_to_gray(&s.p_b)?;
    let grid = hcat_images(
        &[
            pair.image_a.clone(),
            pose_vis,
            from_model_range(&result),
            pair.image_b.clone(),
        ],
        2,
    )?;
    write_ppm(path, &grid)
}

// ---- eval ---------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Instead of a checkpoint, score a baseline: `source` (copy the source
    /// image) or `target` (ground truth against itself).
    #[arg(long)]
    pub baseline: Option<String>,
    /// Corpus directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("split must be train or test, got {other:?}"))),
    };
    let dataset = load_dataset(&args.data)?;
    let pairs = dataset.split(split);
    if pairs.is_empty() {
        return Err(Error::Mismatch(format!(
            "corpus has no {} pairs",
            args.split
        )));
    }

    let (report, note) = match (&args.checkpoint, &args.baseline) {
        (Some(ckpt), None) => {
            let (meta_toml, _) = read_container(ckpt)?;
            let meta: CheckpointMeta = toml::from_str(&meta_toml).map_err(|e| Error::Format {
                path: ckpt.display().to_string(),
                reason: format!("bad checkpoint metadata: {e}"),
            })?;
            let report = match meta.dtype {
                Dtype::F32 => eval_checkpoint::<f32>(ckpt, &dataset, &pairs)?,
                Dtype::F64 => eval_checkpoint::<f64>(ckpt, &dataset, &pairs)?,
            };
            (report, perceptual_note(&meta.perceptual_source))
        }
        (None, Some(baseline)) => {
            let report = eval_baseline(baseline, &pairs)?;
            (report, format!("baseline: {baseline}"))
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --checkpoint or --baseline".into(),
            ))
        }
    };

    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        let p = args.out.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(p.display().to_string(), e))
    };
    write("report.txt", report.summary_lines())?;
    write("per_image.tsv", report.per_image_lines())?;
    write("summary.cfg", format!("{}note = \"{note}\"\n", report.summary_kv()))?;

    println!("{}", note);
    print!("{}", report.summary_lines());
    Ok(())
}

fn eval_checkpoint<S: Scalar>(
    ckpt: &Path,
    dataset: &Dataset,
    pairs: &[&SamplePair],
) -> Result<MetricReport> {
    let (state, _) = load_checkpoint::<S>(ckpt)?;
    if state.cfg.image_h != dataset.height || state.cfg.image_w != dataset.width {
        return Err(Error::Mismatch(format!(
            "checkpoint expects {}x{} images but the corpus is {}x{}",
            state.cfg.image_h, state.cfg.image_w, dataset.height, dataset.width
        )));
    }
    evaluate_pairs(&state.cfg, &state.gen, &state.gen_params, pairs)
}

/// Generator metrics over a list of pairs (used by eval and ablate).
pub fn evaluate_pairs<S: Scalar>(
    cfg: &ModelConfig,
    gen: &ParamStore<S>,
    params: &GeneratorParams,
    pairs: &[&SamplePair],
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for pair in pairs {
        let s = prepare_sample::<S>(cfg, pair);
        let (result, _, _) = run_generator(cfg, gen, params, &s.i_a, &s.p_a, &s.p_b)?;
        let pred = from_model_range(&result);
        push_metrics(&mut report, pair, &pred)?;
    }
    Ok(report)
}

fn eval_baseline(baseline: &str, pairs: &[&SamplePair]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for pair in pairs {
        let pred = match baseline {
            "source" => pair.image_a.clone(),
            "target" => pair.image_b.clone(),
            other => {
                return Err(Error::Config(format!(
                    "baseline must be source or target, got {other:?}"
                )))
            }
        };
        push_metrics(&mut report, pair, &pred)?;
    }
    Ok(report)
}

fn push_metrics(report: &mut MetricReport, pair: &SamplePair, pred: &Tensor<f64>) -> Result<()> {
    let (h, w) = (pair.image_b.shape()[1], pair.image_b.shape()[2]);
    let mask = pose_mask(&pair.skel_b, h, w, EVAL_MASK_MARGIN);
    report.push(
        pair.stem.clone(),
        ssim(pred, &pair.image_b)?,
        masked_ssim(pred, &pair.image_b, &mask)?,
        psnr(pred, &pair.image_b)?,
    );
    Ok(())
}

// ---- infer --------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    /// Source skeleton file.
    #[arg(long)]
    pub skel_a: PathBuf,
    /// Target skeleton file.
    #[arg(long)]
    pub skel_b: PathBuf,
    /// Output directory for result.ppm, intermediate.ppm, attention.ppm.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let (meta_toml, _) = read_container(&args.checkpoint)?;
    let meta: CheckpointMeta = toml::from_str(&meta_toml).map_err(|e| Error::Format {
        path: args.checkpoint.display().to_string(),
        reason: format!("bad checkpoint metadata: {e}"),
    })?;
    match meta.dtype {
        Dtype::F32 => infer_with::<f32>(args),
        Dtype::F64 => infer_with::<f64>(args),
    }
}

fn infer_with<S: Scalar>(args: &InferArgs) -> Result<()> {
    let (state, meta) = load_checkpoint::<S>(&args.checkpoint)?;
    let image = read_ppm(&args.image)?;
    let skel_a = read_skeleton(&args.skel_a)?;
    let skel_b = read_skeleton(&args.skel_b)?;
    let cfg = &state.cfg;
    if image.shape() != [3, cfg.image_h, cfg.image_w] {
        return Err(Error::Mismatch(format!(
            "input image is {:?} but the checkpoint expects [3,{},{}]",
            image.shape(),
            cfg.image_h,
            cfg.image_w
        )));
    }
    let i_a = crate::data::to_model_range::<S>(&image);
    let p_a = joints_to_heatmap::<S>(&skel_a, cfg.image_h, cfg.image_w, cfg.heatmap_radius);
    let p_b = joints_to_heatmap::<S>(&skel_b, cfg.image_h, cfg.image_w, cfg.heatmap_radius);
    let (result, intermediate, attention) =
        run_generator(cfg, &state.gen, &state.gen_params, &i_a, &p_a, &p_b)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    write_ppm(&args.out.join("result.ppm"), &from_model_range(&result))?;
    write_ppm(
        &args.out.join("intermediate.ppm"),
        &from_model_range(&intermediate),
    )?;
    match attention {
        Some(mask) => {
            // one-channel mask in (0,1), rendered as grayscale
            let m = mask.to_f64();
            let plane = cfg.image_h * cfg.image_w;
            let mut data = Vec::with_capacity(3 * plane);
            for _ in 0..3 {
                data.extend_from_slice(m.data());
            }
            let gray = Tensor::from_vec(vec![3, cfg.image_h, cfg.image_w], data)?;
            write_ppm(&args.out.join("attention.ppm"), &gray)?;
        }
        None => {
            println!(
                "variant {} decodes no attention mask; attention.ppm not written",
                meta.model.variant.name()
            );
        }
    }
    println!("{}", perceptual_note(&meta.perceptual_source));
    println!("inference outputs written to {}", args.out.display());
    Ok(())
}

// ---- ablate -------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Corpus directory (train and test splits).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the ablation table.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub t_blocks: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    /// "f32" or "f64".
    #[arg(long, default_value = "f32")]
    pub dtype: String,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let dtype = match args.dtype.as_str() {
        _ if deterministic_mode_forced() => Dtype::F64,
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(Error::Config(format!("dtype must be f32 or f64, got {other:?}"))),
    };
    match dtype {
        Dtype::F32 => ablate_with::<f32>(args),
        Dtype::F64 => ablate_with::<f64>(args),
    }
}

fn ablate_with<S: Scalar>(args: &AblateArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let train_pairs = dataset.split(Split::Train);
    let test_pairs = dataset.split(Split::Test);
    if train_pairs.is_empty() || test_pairs.is_empty() {
        return Err(Error::Mismatch(
            "ablation needs both train and test splits in the corpus".into(),
        ));
    }

    let ladder = [
        Variant::B1,
        Variant::B2,
        Variant::B3,
        Variant::B4,
        Variant::B5,
        Variant::B6,
    ];
    let mut rows = Vec::new();
    println!(
        "ablation ladder: {} steps per variant, seed {}, {} train / {} test pairs",
        args.steps,
        args.seed,
        train_pairs.len(),
        test_pairs.len()
    );
    for variant in ladder {
        let cfg = ModelConfig {
            variant,
            image_h: dataset.height,
            image_w: dataset.width,
            t_blocks: args.t_blocks,
            channels: args.channels,
            graph_nodes: 32,
            graph_cprime: (args.channels / 2).max(1),
            part_cprime: (args.channels / 4).max(1),
            part_mid: (args.channels / 4).max(1),
            ..ModelConfig::default()
        };
        let mut state = TrainState::<S>::new(cfg.clone(), OptimHyper::default(), args.seed)?;
        let weights = LossWeights::default();
        run_training_steps(&mut state, &train_pairs, args.steps, args.batch_size, &weights)?;
        let report = evaluate_pairs(&cfg, &state.gen, &state.gen_params, &test_pairs)?;
        println!(
            "{}\tssim {:.4}\tmask_ssim {:.4}\tpsnr {:.2}",
            variant.name(),
            report.mean_ssim(),
            report.mean_mask_ssim(),
            report.mean_psnr()
        );
        rows.push((variant, report));
    }

    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut table = String::from("variant\tssim\tmask_ssim\tpsnr\n");
    for (v, r) in &rows {
        table.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            v.name(),
            r.mean_ssim(),
            r.mean_mask_ssim(),
            r.mean_psnr()
        ));
    }
    let path = args.out.join("ablate.tsv");
    fs::write(&path, table).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("table written to {}", path.display());
    Ok(())
}

/// Run `steps` training steps with batches drawn from the state's RNG.
pub fn run_training_steps<S: Scalar>(
    state: &mut TrainState<S>,
    train_pairs: &[&SamplePair],
    steps: u64,
    batch_size: usize,
    weights: &LossWeights,
) -> Result<Vec<StepRecord>> {
    let mut records = Vec::new();
    while state.step < steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let idx = state.rng.gen_range(0..train_pairs.len());
            batch.push(prepare_sample::<S>(&state.cfg, train_pairs[idx]));
        }
        records.push(train_step(state, &batch, weights)?);
    }
    Ok(records)
}
