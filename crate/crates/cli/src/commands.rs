//! Subcommand definitions and handlers.

use crate::errors::CliError;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::{Path, PathBuf};
use stn_core::episodic::{
    evaluate, gen_synthetic, load_checkpoint, load_dataset, load_tensor_map, meta_train,
    save_checkpoint, save_dataset, train_adaptive_fusion, DatasetBundle, EvalOptions, EvalReport,
    GenSpec, RunConfig, Split, TensorData, TensorMap,
};
use stn_core::fusion::{FusionConfig, FusionMode};
use stn_core::metrics::MetricKind;

#[derive(Parser)]
#[command(
    name = "stn",
    version,
    about = "Dual-branch few-shot image classifier: global prototypes fused with local Gaussian statistics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic confusable-pairs dataset.
    GenSynthetic(GenSyntheticArgs),
    /// Meta-train both encoder branches on a dataset.
    Train(TrainArgs),
    /// Evaluate checkpoints over sampled tasks with fused metrics.
    Eval(EvalArgs),
    /// Evaluate across a grid of fusion weights.
    SweepAlpha(SweepAlphaArgs),
    /// Cross-evaluate combinations of global and local metric kinds.
    AblateMetrics(AblateMetricsArgs),
    /// Compare fusion strategies (manual/adaptive, normalization on/off).
    AblateFusion(AblateFusionArgs),
    /// Export raw attention weights of one image to a tensor container.
    ExportAttention(ExportAttentionArgs),
}

#[derive(Args)]
pub struct GenSyntheticArgs {
    /// Output directory for the manifest and image blobs.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes across all splits (minimum 10).
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    /// Images per class.
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional run-config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Classes per episode.
    #[arg(long)]
    pub n: Option<usize>,
    /// Support shots per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// Query images per class.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    /// Fixed validation episodes per epoch.
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Covariance shrinkage scale.
    #[arg(long)]
    pub epsilon_scale: Option<f64>,
    /// Fusion weight used for validation-based model selection
    /// (default: 0.7 for K=1, 0.6 otherwise).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Train a single shared encoder for both branches (ablation).
    #[arg(long)]
    pub share_params: bool,
}

/// Flags shared by every evaluation-style subcommand.
#[derive(Args, Clone)]
pub struct EvalCommonArgs {
    /// Dataset manifest path.
    #[arg(long)]
    pub data: PathBuf,
    /// Global-branch checkpoint.
    #[arg(long)]
    pub ckpt_global: PathBuf,
    /// Local-branch checkpoint.
    #[arg(long)]
    pub ckpt_local: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of evaluation tasks.
    #[arg(long, default_value_t = 200)]
    pub tasks: usize,
    /// Classes per task.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Support shots per class.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Query images per class.
    #[arg(long, default_value_t = 15)]
    pub t: usize,
    /// Task-sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Covariance shrinkage scale.
    #[arg(long, default_value_t = 1e-2)]
    pub epsilon_scale: f64,
    /// Split to evaluate on.
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: EvalCommonArgs,
    /// Fusion weight on the local branch
    /// (default: 0.7 for K=1, 0.6 otherwise).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// L2-normalize branch distances before fusing.
    #[arg(long, default_value = "on")]
    pub normalize: OnOff,
    /// Global-branch distance function.
    #[arg(long, default_value = "sqr")]
    pub global_kind: MetricKindArg,
    /// Local-branch distance function.
    #[arg(long, default_value = "kl")]
    pub local_kind: MetricKindArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum MetricKindArg {
    Dot,
    Abs,
    Cos,
    Sqr,
    Wass,
    Covar,
    Kl,
}

impl From<MetricKindArg> for MetricKind {
    fn from(k: MetricKindArg) -> MetricKind {
        match k {
            MetricKindArg::Dot => MetricKind::Dot,
            MetricKindArg::Abs => MetricKind::Abs,
            MetricKindArg::Cos => MetricKind::Cos,
            MetricKindArg::Sqr => MetricKind::Sqr,
            MetricKindArg::Wass => MetricKind::Wass,
            MetricKindArg::Covar => MetricKind::Covar,
            MetricKindArg::Kl => MetricKind::Kl,
        }
    }
}

#[derive(Args)]
pub struct SweepAlphaArgs {
    #[command(flatten)]
    pub common: EvalCommonArgs,
    /// Grid as start:end:step, e.g. 0.1:0.9:0.1.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    pub grid: String,
    /// L2-normalize branch distances before fusing.
    #[arg(long, default_value = "on")]
    pub normalize: OnOff,
}

#[derive(Args)]
pub struct AblateMetricsArgs {
    #[command(flatten)]
    pub common: EvalCommonArgs,
    /// Comma-separated global kinds to evaluate.
    #[arg(long, default_value = "dot,abs,cos,sqr", value_delimiter = ',')]
    pub global_kinds: Vec<MetricKindArg>,
    /// Comma-separated local kinds to evaluate.
    #[arg(long, default_value = "wass,covar,kl", value_delimiter = ',')]
    pub local_kinds: Vec<MetricKindArg>,
    /// Fusion weight for the cross table
    /// (default: 0.7 for K=1, 0.6 otherwise).
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args)]
pub struct AblateFusionArgs {
    #[command(flatten)]
    pub common: EvalCommonArgs,
    /// Fusion strategy.
    #[arg(long, default_value = "manual")]
    pub mode: FusionModeArg,
    /// L2 normalization of branch distances (manual mode).
    #[arg(long, default_value = "on")]
    pub normalize: OnOff,
    /// Fusion weight in manual mode
    /// (default: 0.7 for K=1, 0.6 otherwise).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Episodes used to fit the adaptive weights on the train split.
    #[arg(long, default_value_t = 100)]
    pub adapt_episodes: usize,
    /// Gradient step size for the adaptive weights.
    #[arg(long, default_value_t = 0.05)]
    pub adapt_lr: f64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum FusionModeArg {
    Manual,
    Adaptive,
}

#[derive(Args)]
pub struct ExportAttentionArgs {
    /// Encoder checkpoint to run.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image blob (tensor container with one `image` tensor).
    #[arg(long)]
    pub image: PathBuf,
    /// Output tensor-container path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenSynthetic(args) => gen_synthetic_cmd(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::SweepAlpha(args) => sweep_alpha_cmd(args),
        Command::AblateMetrics(args) => ablate_metrics_cmd(args),
        Command::AblateFusion(args) => ablate_fusion_cmd(args),
        Command::ExportAttention(args) => export_attention_cmd(args),
    }
}

fn default_alpha(k_shot: usize) -> f64 {
    if k_shot == 1 {
        0.7
    } else {
        0.6
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value)?;
    stn_core::episodic::atomic_write(path, &bytes)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    stn_core::episodic::atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn gen_synthetic_cmd(args: GenSyntheticArgs) -> Result<(), CliError> {
    let spec = GenSpec {
        classes: args.classes,
        per_class: args.per_class,
        seed: args.seed,
    };
    let bundle = gen_synthetic(&spec)?;
    let manifest = save_dataset(&args.out, &bundle)?;
    write_json(
        &args.out.join("gen.json"),
        &json!({
            "command": "gen-synthetic",
            "config": spec,
            "manifest": manifest,
            "splits": {
                "train": bundle.train.num_classes(),
                "val": bundle.val.num_classes(),
                "test": bundle.test.num_classes(),
            },
        }),
    )?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut run = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Data(format!("cannot read '{}': {e}", path.display())))?;
            serde_json::from_slice(&bytes)?
        }
        None => RunConfig::default(),
    };
    if let Some(v) = args.n {
        run.n_way = v;
    }
    if let Some(v) = args.k {
        run.k_shot = v;
    }
    if let Some(v) = args.t {
        run.t_query = v;
    }
    if let Some(v) = args.epochs {
        run.epochs = v;
    }
    if let Some(v) = args.episodes_per_epoch {
        run.episodes_per_epoch = v;
    }
    if let Some(v) = args.val_episodes {
        run.val_episodes = v;
    }
    if let Some(v) = args.seed {
        run.seed = v;
    }
    if let Some(v) = args.lr_init {
        run.lr_init = v;
    }
    if let Some(v) = args.lr_final {
        run.lr_final = v;
    }
    if let Some(v) = args.weight_decay {
        run.adam.weight_decay = v;
    }
    if let Some(v) = args.epsilon_scale {
        run.epsilon_scale = v;
    }
    run.fusion.alpha = args.alpha.unwrap_or_else(|| default_alpha(run.k_shot));
    if args.share_params {
        run.share_params = true;
    }
    Ok(run)
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let run = load_run_config(&args)?;
    let bundle = load_dataset(&args.data)?;
    let result = meta_train(&run, &bundle.train, &bundle.val);
    if let Err(stn_core::episodic::EpisodicError::NonFiniteLoss {
        epoch,
        episode_index,
        episode,
    }) = &result
    {
        let dump = args.out.join("failed_episode.json");
        let _ = write_json(
            &dump,
            &json!({
                "epoch": epoch,
                "episode_index": episode_index,
                "episode": episode,
            }),
        );
        eprintln!("offending episode written to {}", dump.display());
    }
    let out = result?;
    save_checkpoint(&args.out.join("global.stnt"), &out.global, &run)?;
    save_checkpoint(&args.out.join("local.stnt"), &out.local, &run)?;
    write_text(&args.out.join("train_log.csv"), &out.log.to_csv())?;
    write_json(
        &args.out.join("run.json"),
        &json!({
            "command": "train",
            "config": run,
            "data": args.data,
            "episodes_trained": out.log.episodes.len(),
            "final_val_accuracy": out.log.epochs.last().map(|e| e.val_accuracy),
            "best_val_accuracy": out.log.epochs.iter().rfind(|e| e.is_best).map(|e| e.val_accuracy),
        }),
    )?;
    println!(
        "trained {} episodes; checkpoints in {}",
        out.log.episodes.len(),
        args.out.display()
    );
    Ok(())
}

struct LoadedEval {
    bundle: DatasetBundle,
    global: stn_core::encoder::EncoderParams,
    local: stn_core::encoder::EncoderParams,
}

fn load_eval_inputs(common: &EvalCommonArgs) -> Result<LoadedEval, CliError> {
    let bundle = load_dataset(&common.data)?;
    let (global, _) = load_checkpoint(&common.ckpt_global)?;
    let (local, _) = load_checkpoint(&common.ckpt_local)?;
    Ok(LoadedEval {
        bundle,
        global,
        local,
    })
}

fn base_options(common: &EvalCommonArgs) -> EvalOptions {
    EvalOptions {
        n_way: common.n,
        k_shot: common.k,
        t_query: common.t,
        tasks: common.tasks,
        seed: common.seed,
        epsilon_scale: common.epsilon_scale,
        ..EvalOptions::default()
    }
}

fn common_echo(common: &EvalCommonArgs) -> serde_json::Value {
    json!({
        "data": common.data,
        "ckpt_global": common.ckpt_global,
        "ckpt_local": common.ckpt_local,
        "tasks": common.tasks,
        "n": common.n,
        "k": common.k,
        "t": common.t,
        "seed": common.seed,
        "epsilon_scale": common.epsilon_scale,
        "split": match common.split { SplitArg::Train => "train", SplitArg::Val => "val", SplitArg::Test => "test" },
    })
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    let inputs = load_eval_inputs(&args.common)?;
    let alpha = args.alpha.unwrap_or_else(|| default_alpha(args.common.k));
    let mut opts = base_options(&args.common);
    opts.global_kind = args.global_kind.into();
    opts.local_kind = args.local_kind.into();
    opts.fusion = FusionConfig {
        alpha,
        normalize: args.normalize.as_bool(),
        mode: FusionMode::Manual,
    };
    let dataset = inputs.bundle.split(args.common.split.into());
    let report = evaluate(&inputs.global, &inputs.local, dataset, &opts)?;
    write_text(
        &args.common.out.join("eval.csv"),
        &report.to_csv(opts.n_way, opts.k_shot),
    )?;
    let summary = json!({
        "command": "eval",
        "mean": report.mean,
        "ci95": report.ci95,
        "config": { "options": opts, "common": common_echo(&args.common) },
    });
    write_json(&args.common.out.join("eval.json"), &summary)?;
    println!("mean {:.4} ci95 {:.4}", report.mean, report.ci95);
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = grid.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!(
            "grid '{grid}' must be start:end:step"
        )));
    }
    let parse = |s: &str| -> Result<f64, CliError> {
        s.parse()
            .map_err(|_| CliError::Usage(format!("grid component '{s}' is not a number")))
    };
    let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if step <= 0.0 || end < start {
        return Err(CliError::Usage(format!(
            "grid '{grid}' must have positive step and end >= start"
        )));
    }
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let v = start + step * i as f64;
        if v > end + 1e-9 {
            break;
        }
        out.push((v * 1e9).round() / 1e9);
        i += 1;
    }
    for &v in &out {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Usage(format!("grid value {v} outside [0, 1]")));
        }
    }
    Ok(out)
}

fn sweep_alpha_cmd(args: SweepAlphaArgs) -> Result<(), CliError> {
    let grid = parse_grid(&args.grid)?;
    let inputs = load_eval_inputs(&args.common)?;
    let dataset = inputs.bundle.split(args.common.split.into());
    let mut rows = Vec::new();
    let mut csv = String::from("alpha,mean,ci95\n");
    for &alpha in &grid {
        let mut opts = base_options(&args.common);
        opts.fusion = FusionConfig {
            alpha,
            normalize: args.normalize.as_bool(),
            mode: FusionMode::Manual,
        };
        let report = evaluate(&inputs.global, &inputs.local, dataset, &opts)?;
        csv.push_str(&format!("{alpha},{},{}\n", report.mean, report.ci95));
        println!(
            "alpha {alpha}: mean {:.4} ci95 {:.4}",
            report.mean, report.ci95
        );
        rows.push(json!({ "alpha": alpha, "mean": report.mean, "ci95": report.ci95 }));
    }
    write_text(&args.common.out.join("sweep.csv"), &csv)?;
    write_json(
        &args.common.out.join("sweep.json"),
        &json!({
            "command": "sweep-alpha",
            "grid": grid,
            "normalize": args.normalize.as_bool(),
            "rows": rows,
            "config": common_echo(&args.common),
        }),
    )?;
    Ok(())
}

fn ablate_metrics_cmd(args: AblateMetricsArgs) -> Result<(), CliError> {
    let inputs = load_eval_inputs(&args.common)?;
    let dataset = inputs.bundle.split(args.common.split.into());
    let alpha = args.alpha.unwrap_or_else(|| default_alpha(args.common.k));
    let mut rows = Vec::new();
    let mut csv = String::from("global_kind,local_kind,alpha,mean,ci95\n");
    let eval_one = |gk: Option<MetricKind>,
                    lk: Option<MetricKind>,
                    alpha: f64|
     -> Result<EvalReport, CliError> {
        let mut opts = base_options(&args.common);
        opts.fusion = FusionConfig {
            alpha,
            ..FusionConfig::default()
        };
        if let Some(k) = gk {
            opts.global_kind = k;
        }
        if let Some(k) = lk {
            opts.local_kind = k;
        }
        Ok(evaluate(&inputs.global, &inputs.local, dataset, &opts)?)
    };
    // Single-branch rows: alpha 0 isolates the global metric, alpha 1 the
    // local metric.
    for &gk in &args.global_kinds {
        let kind: MetricKind = gk.into();
        let report = eval_one(Some(kind), None, 0.0)?;
        csv.push_str(&format!("{kind},,0,{},{}\n", report.mean, report.ci95));
        println!(
            "{kind} only: mean {:.4} ci95 {:.4}",
            report.mean, report.ci95
        );
        rows.push(
            json!({ "global_kind": kind, "local_kind": null, "alpha": 0.0,
                          "mean": report.mean, "ci95": report.ci95 }),
        );
    }
    for &lk in &args.local_kinds {
        let kind: MetricKind = lk.into();
        let report = eval_one(None, Some(kind), 1.0)?;
        csv.push_str(&format!(",{kind},1,{},{}\n", report.mean, report.ci95));
        println!(
            "{kind} only: mean {:.4} ci95 {:.4}",
            report.mean, report.ci95
        );
        rows.push(
            json!({ "global_kind": null, "local_kind": kind, "alpha": 1.0,
                          "mean": report.mean, "ci95": report.ci95 }),
        );
    }
    for &gk in &args.global_kinds {
        for &lk in &args.local_kinds {
            let g: MetricKind = gk.into();
            let l: MetricKind = lk.into();
            let report = eval_one(Some(g), Some(l), alpha)?;
            csv.push_str(&format!(
                "{g},{l},{alpha},{},{}\n",
                report.mean, report.ci95
            ));
            println!("{g}+{l}: mean {:.4} ci95 {:.4}", report.mean, report.ci95);
            rows.push(json!({ "global_kind": g, "local_kind": l, "alpha": alpha,
                              "mean": report.mean, "ci95": report.ci95 }));
        }
    }
    write_text(&args.common.out.join("metrics.csv"), &csv)?;
    write_json(
        &args.common.out.join("metrics.json"),
        &json!({
            "command": "ablate-metrics",
            "alpha": alpha,
            "rows": rows,
            "config": common_echo(&args.common),
        }),
    )?;
    Ok(())
}

fn ablate_fusion_cmd(args: AblateFusionArgs) -> Result<(), CliError> {
    let inputs = load_eval_inputs(&args.common)?;
    let dataset = inputs.bundle.split(args.common.split.into());
    let alpha = args.alpha.unwrap_or_else(|| default_alpha(args.common.k));
    let mut opts = base_options(&args.common);
    let mut adaptive_json = serde_json::Value::Null;
    match args.mode {
        FusionModeArg::Manual => {
            opts.fusion = FusionConfig {
                alpha,
                normalize: args.normalize.as_bool(),
                mode: FusionMode::Manual,
            };
        }
        FusionModeArg::Adaptive => {
            // Fit the two fusion weights on the train split, encoders frozen.
            let run = RunConfig {
                n_way: args.common.n,
                k_shot: args.common.k,
                t_query: args.common.t,
                seed: args.common.seed,
                epsilon_scale: args.common.epsilon_scale,
                ..RunConfig::default()
            };
            let fitted = train_adaptive_fusion(
                &inputs.global,
                &inputs.local,
                &inputs.bundle.train,
                &run,
                args.adapt_episodes,
                args.adapt_lr,
            )?;
            adaptive_json = serde_json::to_value(&fitted)?;
            opts.fusion = FusionConfig {
                alpha,
                normalize: args.normalize.as_bool(),
                mode: FusionMode::Adaptive,
            };
            opts.adaptive = Some(fitted);
        }
    }
    let report = evaluate(&inputs.global, &inputs.local, dataset, &opts)?;
    let mode_name = match args.mode {
        FusionModeArg::Manual => "manual",
        FusionModeArg::Adaptive => "adaptive",
    };
    write_text(
        &args.common.out.join("fusion.csv"),
        &format!(
            "mode,normalize,alpha,mean,ci95\n{mode_name},{},{alpha},{},{}\n",
            args.normalize.as_bool(),
            report.mean,
            report.ci95
        ),
    )?;
    write_json(
        &args.common.out.join("fusion.json"),
        &json!({
            "command": "ablate-fusion",
            "mode": mode_name,
            "normalize": args.normalize.as_bool(),
            "alpha": alpha,
            "adaptive_params": adaptive_json,
            "adapt_episodes": args.adapt_episodes,
            "adapt_lr": args.adapt_lr,
            "mean": report.mean,
            "ci95": report.ci95,
            "config": common_echo(&args.common),
        }),
    )?;
    println!(
        "{mode_name} (normalize {}): mean {:.4} ci95 {:.4}",
        args.normalize.as_bool(),
        report.mean,
        report.ci95
    );
    Ok(())
}

fn export_attention_cmd(args: ExportAttentionArgs) -> Result<(), CliError> {
    let (params, _run) = load_checkpoint(&args.ckpt)?;
    let blob = load_tensor_map(&args.image)?;
    let tensor = blob.get("image").ok_or_else(|| {
        CliError::Data(format!(
            "blob '{}' has no 'image' tensor",
            args.image.display()
        ))
    })?;
    if tensor.dims.len() != 3 {
        return Err(CliError::Data(format!(
            "image tensor has {} dims, expected 3",
            tensor.dims.len()
        )));
    }
    let data = match &tensor.payload {
        stn_core::episodic::TensorPayload::F32(v) => v.clone(),
        stn_core::episodic::TensorPayload::F64(v) => v.iter().map(|&x| x as f32).collect(),
    };
    let image = stn_core::encoder::Image {
        height: tensor.dims[0],
        width: tensor.dims[1],
        channels: tensor.dims[2],
        data,
    };
    let (_, attention) = stn_core::encoder::encode(&params, &image)?;
    let mut map = TensorMap::new();
    for (layer, heads) in attention.layers.iter().enumerate() {
        for (head, m) in heads.iter().enumerate() {
            map.insert(
                format!("layer{layer}.head{head}"),
                TensorData::f64(vec![m.rows(), m.cols()], m.data().to_vec()),
            );
        }
    }
    stn_core::episodic::save_tensor_map(&args.out, &map)?;
    let mut echo = args.out.as_os_str().to_os_string();
    echo.push(".json");
    write_json(
        &PathBuf::from(echo),
        &json!({
            "command": "export-attention",
            "ckpt": args.ckpt,
            "image": args.image,
            "out": args.out,
            "layers": attention.layers.len(),
            "heads": attention.layers.first().map(|h| h.len()).unwrap_or(0),
        }),
    )?;
    println!("wrote {} attention tensors", map.len());
    Ok(())
}
