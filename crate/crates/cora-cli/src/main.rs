//! `cora` command line: dataset generation, instruction synthesis, the
//! query database, pseudo-labeling, consistency weighting, training, and
//! evaluation.
//!
//! Conventions: every subcommand honors the global `--seed`; repeated
//! invocations with equal inputs and flags produce byte-identical primary
//! outputs in single-thread mode. stdout carries human-readable progress,
//! stderr carries one JSON error object (`{"code", "message"}`) on
//! failure. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use cora::consistency::pseudo::{pseudo_labeler_by_name, NoiseSpec, PseudoError};
use cora::consistency::{
    export_weight_map, pixel_variance, variance_to_weight, weight_transform_by_name,
    ConsistencyError, PredictionStack, DEFAULT_V0,
};
use cora::data::{
    generate_instruction_files, generate_shapes_world, make_split, DataError, LoadedDataset,
    ShapesWorldConfig, SplitManifest,
};
use cora::instructgen::{read_instructions, ClassLexicon, InstructError};
use cora::losses::LossError;
use cora::maskgeo::LabelMap;
use cora::model::{load_checkpoint, ModelError, SoftMask};
use cora::pnm;
use cora::train::{evaluate_ciou, load_eval_pairs, Trainer, TrainConfig, TrainError};

// ---------------------------------------------------------------------------
// error handling and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    /// Bad flags, unknown strategy names, malformed config: exit 1.
    Usage(String),
    /// Missing or malformed inputs: exit 2.
    Data(String),
    /// Non-finite loss: exit 3.
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::ConfigError(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InstructError> for CliError {
    fn from(e: InstructError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PseudoError> for CliError {
    fn from(e: PseudoError) -> Self {
        match e {
            PseudoError::UnknownLabeler(_) | PseudoError::MissingDir | PseudoError::BadRates { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ConsistencyError> for CliError {
    fn from(e: ConsistencyError) -> Self {
        match e {
            ConsistencyError::UnknownMode(_) | ConsistencyError::BadScale { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<pnm::PnmError> for CliError {
    fn from(e: pnm::PnmError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigError(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Loss(LossError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            TrainError::Consistency(inner) => CliError::from(inner),
            TrainError::Pseudo(inner) => CliError::from(inner),
            TrainError::Data(inner) => CliError::from(inner),
            _ => CliError::Data(e.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// config file: one optional section per subcommand, flags win over file
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(default)]
struct GenDataSection {
    width: usize,
    height: usize,
    n: usize,
    classes: Vec<u8>,
    objects_min: usize,
    objects_max: usize,
    patch_multiple: usize,
    split_ratio: Option<f64>,
}

impl Default for GenDataSection {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            n: 64,
            classes: vec![1, 2, 3, 4],
            objects_min: 2,
            objects_max: 4,
            patch_multiple: 4,
            split_ratio: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct GenInstructionsSection {
    pairs: usize,
    subset: String,
}

impl Default for GenInstructionsSection {
    fn default() -> Self {
        Self {
            pairs: 2,
            subset: "all".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct BuildQuerydbSection {
    k: usize,
}

impl Default for BuildQuerydbSection {
    fn default() -> Self {
        Self { k: 7 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct PseudoLabelSection {
    labeler: String,
    flip_rate: f64,
    boundary_erode_dilate: usize,
    subset: String,
}

impl Default for PseudoLabelSection {
    fn default() -> Self {
        Self {
            labeler: "noisy-oracle".into(),
            flip_rate: 0.15,
            boundary_erode_dilate: 1,
            subset: "unlabeled".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct FilterWeightsSection {
    mode: String,
    v0: f64,
}

impl Default for FilterWeightsSection {
    fn default() -> Self {
        Self {
            mode: "inverse-exp".into(),
            v0: DEFAULT_V0,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    gen_data: GenDataSection,
    gen_instructions: GenInstructionsSection,
    build_querydb: BuildQuerydbSection,
    pseudo_label: PseudoLabelSection,
    filter_weights: FilterWeightsSection,
    train: TrainConfig,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", p.display())))
        }
    }
}

// ---------------------------------------------------------------------------
// command line
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "cora",
    version,
    about = "Semi-supervised reasoning-segmentation pipeline: data, instructions, training, evaluation"
)]
struct Cli {
    /// Master seed; every subcommand derives its randomness from it [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON config file; explicit flags override its values [default: none]
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; determinism is only guaranteed with 1 [default: 1]
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output dataset directory (required)
    #[arg(long)]
    out: PathBuf,
    /// Number of images [default: 64]
    #[arg(long)]
    n: Option<usize>,
    /// Image width in pixels [default: 32]
    #[arg(long)]
    width: Option<usize>,
    /// Image height in pixels [default: 32]
    #[arg(long)]
    height: Option<usize>,
    /// Comma-separated class ids: 1=circle 2=square 3=triangle 4=bar [default: 1,2,3,4]
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u8>>,
    /// Minimum objects per image [default: 2]
    #[arg(long)]
    objects_min: Option<usize>,
    /// Maximum objects per image [default: 4]
    #[arg(long)]
    objects_max: Option<usize>,
    /// Dims must divide by this patch size [default: 4]
    #[arg(long)]
    patch_multiple: Option<usize>,
    /// When set, also write split.json at this labeled ratio [default: off]
    #[arg(long)]
    split_ratio: Option<f64>,
}

#[derive(Args, Debug)]
struct GenInstructionsArgs {
    /// Dataset directory from gen-data (required)
    #[arg(long)]
    data: PathBuf,
    /// Output instruction directory (required)
    #[arg(long)]
    out: PathBuf,
    /// Split manifest restricting the image set [default: none, use all]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Which manifest subset to use: labeled, unlabeled, or all [default: all]
    #[arg(long)]
    subset: Option<String>,
    /// Conditional instruction pairs per image [default: 2]
    #[arg(long)]
    pairs: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildQuerydbArgs {
    /// Class lexicon JSON (required)
    #[arg(long)]
    lexicon: PathBuf,
    /// Output query database path (required)
    #[arg(long)]
    out: PathBuf,
    /// Queries per class [default: 7]
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct PseudoLabelArgs {
    /// Dataset directory (required)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for pseudo label maps (required)
    #[arg(long)]
    out: PathBuf,
    /// Split manifest restricting the image set [default: none, use all]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Subset of the manifest to label: labeled, unlabeled, or all [default: unlabeled]
    #[arg(long)]
    subset: Option<String>,
    /// Labeler strategy: noisy-oracle or precomputed [default: noisy-oracle]
    #[arg(long)]
    labeler: Option<String>,
    /// Component class-flip probability (noisy-oracle) [default: 0.15]
    #[arg(long)]
    flip_rate: Option<f64>,
    /// Max boundary erode/dilate radius in px (noisy-oracle) [default: 1]
    #[arg(long)]
    boundary_px: Option<usize>,
    /// Source directory of precomputed maps (precomputed labeler) [default: none]
    #[arg(long)]
    src: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FilterWeightsArgs {
    /// Directory of soft-mask PGMs (one prediction stack) (required)
    #[arg(long)]
    stack: PathBuf,
    /// Output directory for weights.pgm + weights.json (required)
    #[arg(long)]
    out: PathBuf,
    /// Weight mode: literal, inverse-exp, or inverse-linear [default: inverse-exp]
    #[arg(long)]
    mode: Option<String>,
    /// Scale of the inverse-exp transform [default: 0.05]
    #[arg(long)]
    v0: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (required)
    #[arg(long)]
    data: PathBuf,
    /// Split manifest path, or a labeled ratio in (0,1] to split on the fly (required)
    #[arg(long)]
    split: String,
    /// Instruction directory from gen-instructions (required)
    #[arg(long)]
    instr: PathBuf,
    /// Query database path (required)
    #[arg(long)]
    querydb: PathBuf,
    /// Run directory (required)
    #[arg(long)]
    out: PathBuf,
    /// Stage to run: all, 1, 2, or 3 [default: all]
    #[arg(long)]
    stage: Option<String>,
    /// Checkpoint to resume from [default: fresh init]
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Iterations per stage [default: 300]
    #[arg(long)]
    iters: Option<u64>,
    /// Batch size [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate [default: 0.00002]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Language-loss weight alpha [default: 1.0]
    #[arg(long)]
    alpha: Option<f64>,
    /// Unlabeled-branch weight sigma [default: 0.001]
    #[arg(long)]
    sigma: Option<f64>,
    /// Contrastive temperature tau [default: 0.07]
    #[arg(long)]
    tau: Option<f64>,
    /// Queries per class K [default: 7]
    #[arg(long)]
    k: Option<usize>,
    /// Weight mode: literal, inverse-exp, or inverse-linear [default: inverse-exp]
    #[arg(long)]
    weight_mode: Option<String>,
    /// Scale of the inverse-exp transform [default: 0.05]
    #[arg(long)]
    v0: Option<f64>,
    /// Token bank capacity per class [default: 64]
    #[arg(long)]
    bank_capacity: Option<usize>,
    /// Negatives per contrastive anchor [default: 32]
    #[arg(long)]
    n_neg: Option<usize>,
    /// Frozen snapshot refresh interval [default: 50]
    #[arg(long)]
    snapshot_refresh: Option<u64>,
    /// Periodic checkpoint interval; 0 disables [default: 500]
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Pseudo-labeler strategy: noisy-oracle or precomputed [default: noisy-oracle]
    #[arg(long)]
    labeler: Option<String>,
    /// Component class-flip probability [default: 0.15]
    #[arg(long)]
    flip_rate: Option<f64>,
    /// Max boundary erode/dilate radius in px [default: 1]
    #[arg(long)]
    boundary_px: Option<usize>,
    /// Directory of precomputed pseudo label maps [default: none]
    #[arg(long)]
    pseudo_dir: Option<PathBuf>,
    /// Disable the conditional instruction stage (ablation) [default: enabled]
    #[arg(long)]
    no_cvi: bool,
    /// Disable consistency weighting, using unit weights (ablation) [default: enabled]
    #[arg(long)]
    no_ocpl: bool,
    /// Disable token-level contrastive alignment (ablation) [default: enabled]
    #[arg(long)]
    no_tfca: bool,
    /// Instruction JSONL to evaluate after training [default: none]
    #[arg(long)]
    eval_set: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to evaluate (required)
    #[arg(long)]
    ckpt: PathBuf,
    /// Instruction JSONL with target masks (required)
    #[arg(long)]
    set: PathBuf,
    /// Dataset directory holding the images (required)
    #[arg(long)]
    data: PathBuf,
    /// Where to write metrics.json [default: ./metrics.json]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectCkptArgs {
    /// Checkpoint to describe (required)
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a shapes-world dataset (images, labels, lexicon, manifest)
    GenData(GenDataArgs),
    /// Synthesize semantic/attribute/conditional instruction sets
    GenInstructions(GenInstructionsArgs),
    /// Build the per-class query paraphrase database
    BuildQuerydb(BuildQuerydbArgs),
    /// Produce pseudo label maps with a registered labeler strategy
    PseudoLabel(PseudoLabelArgs),
    /// Turn a directory of soft masks into consistency weights
    FilterWeights(FilterWeightsArgs),
    /// Run the three-stage training loop
    Train(TrainArgs),
    /// Evaluate cumulative IoU of a checkpoint on an instruction set
    Eval(EvalArgs),
    /// Print a checkpoint's header and parameter summary
    InspectCkpt(InspectCkptArgs),
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn subset_refs(
    dataset: &LoadedDataset,
    manifest: Option<&Path>,
    subset: &str,
) -> Result<Vec<String>, CliError> {
    match manifest {
        None => Ok(dataset.manifest.image_files.clone()),
        Some(path) => {
            let split = SplitManifest::load(path)?;
            match subset {
                "labeled" => Ok(split.labeled),
                "unlabeled" => Ok(split.unlabeled),
                "all" => {
                    let mut refs = split.labeled;
                    refs.extend(split.unlabeled);
                    Ok(refs)
                }
                other => Err(CliError::Usage(format!(
                    "unknown subset {other:?}; expected labeled, unlabeled, or all"
                ))),
            }
        }
    }
}

fn merge<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

// ---------------------------------------------------------------------------
// subcommand handlers
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs, file: FileConfig, seed: u64) -> Result<(), CliError> {
    let mut s = file.gen_data;
    merge(&mut s.n, args.n);
    merge(&mut s.width, args.width);
    merge(&mut s.height, args.height);
    merge(&mut s.classes, args.classes);
    merge(&mut s.objects_min, args.objects_min);
    merge(&mut s.objects_max, args.objects_max);
    merge(&mut s.patch_multiple, args.patch_multiple);
    if args.split_ratio.is_some() {
        s.split_ratio = args.split_ratio;
    }

    let cfg = ShapesWorldConfig {
        width: s.width,
        height: s.height,
        n_images: s.n,
        classes: s.classes,
        objects_min: s.objects_min,
        objects_max: s.objects_max,
        patch_multiple: s.patch_multiple,
        seed,
    };
    let manifest = generate_shapes_world(&cfg, &args.out)?;
    println!(
        "wrote {} images ({}x{}) to {}",
        manifest.image_files.len(),
        cfg.width,
        cfg.height,
        args.out.display()
    );
    if let Some(ratio) = s.split_ratio {
        let split = make_split(&manifest.image_files, ratio, seed)?;
        let path = args.out.join("split.json");
        split.save(&path)?;
        println!(
            "split: {} labeled / {} unlabeled -> {}",
            split.labeled.len(),
            split.unlabeled.len(),
            path.display()
        );
    }
    Ok(())
}

fn cmd_gen_instructions(
    args: GenInstructionsArgs,
    file: FileConfig,
    seed: u64,
) -> Result<(), CliError> {
    let mut s = file.gen_instructions;
    merge(&mut s.pairs, args.pairs);
    merge(&mut s.subset, args.subset);
    if s.pairs < 1 {
        return Err(CliError::Usage("pairs must be >= 1".into()));
    }

    let dataset = LoadedDataset::open(&args.data)?;
    let refs = subset_refs(&dataset, args.manifest.as_deref(), &s.subset)?;
    let summary = generate_instruction_files(&dataset, &refs, s.pairs, seed, &args.out)?;
    println!(
        "wrote {} semantic, {} attribute, {} conditional instructions to {}",
        summary.semantic,
        summary.attribute,
        summary.conditional,
        args.out.display()
    );
    Ok(())
}

fn cmd_build_querydb(args: BuildQuerydbArgs, file: FileConfig, seed: u64) -> Result<(), CliError> {
    let mut s = file.build_querydb;
    merge(&mut s.k, args.k);
    let lexicon = ClassLexicon::load(&args.lexicon, 1)?;
    let db = cora::instructgen::build_query_db(&lexicon, s.k, seed).map_err(|e| match e {
        InstructError::InsufficientAttributes { .. } => CliError::Usage(e.to_string()),
        other => CliError::from(other),
    })?;
    db.save(&args.out)?;
    println!(
        "wrote {} queries for {} classes to {}",
        s.k,
        db.queries.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_pseudo_label(args: PseudoLabelArgs, file: FileConfig, seed: u64) -> Result<(), CliError> {
    let mut s = file.pseudo_label;
    merge(&mut s.labeler, args.labeler);
    merge(&mut s.flip_rate, args.flip_rate);
    merge(&mut s.boundary_erode_dilate, args.boundary_px);
    merge(&mut s.subset, args.subset);

    let dataset = LoadedDataset::open(&args.data)?;
    let labeler = pseudo_labeler_by_name(
        &s.labeler,
        NoiseSpec {
            flip_rate: s.flip_rate,
            boundary_erode_dilate: s.boundary_erode_dilate,
            seed,
        },
        dataset.lexicon.class_ids(),
        args.src.as_deref(),
    )?;
    let refs = subset_refs(&dataset, args.manifest.as_deref(), &s.subset)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    for image_ref in &refs {
        let stem = LoadedDataset::stem_of(image_ref);
        let gt = dataset.load_labels_for(image_ref)?;
        let pseudo: LabelMap = labeler.pseudo_label(stem, &gt)?;
        pseudo.write_pgm(&args.out.join(format!("{stem}.pgm")))?;
    }
    println!(
        "wrote {} pseudo label maps ({}) to {}",
        refs.len(),
        labeler.name(),
        args.out.display()
    );
    Ok(())
}

fn cmd_filter_weights(args: FilterWeightsArgs, file: FileConfig) -> Result<(), CliError> {
    let mut s = file.filter_weights;
    merge(&mut s.mode, args.mode);
    merge(&mut s.v0, args.v0);
    let transform = weight_transform_by_name(&s.mode, s.v0)?;

    let mut entries: Vec<PathBuf> = fs::read_dir(&args.stack)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.stack.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("pgm"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(CliError::Data(format!(
            "no .pgm soft masks in {}",
            args.stack.display()
        )));
    }
    let mut preds = Vec::with_capacity(entries.len());
    for path in &entries {
        let img = pnm::read_pgm(path)?;
        preds.push(SoftMask {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&b| b as f64 / 255.0).collect(),
        });
    }
    let (w, h) = (preds[0].width, preds[0].height);
    let stack = PredictionStack::new(preds, 0, (0..entries.len()).collect())?;
    let variance = pixel_variance(&stack);
    let weights = variance_to_weight(&variance, w, h, transform.as_ref());

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    export_weight_map(
        &weights,
        transform.as_ref(),
        &args.out.join("weights.pgm"),
        &args.out.join("weights.json"),
    )?;
    println!(
        "stack of {} masks -> mean weight {:.4} ({}) in {}",
        entries.len(),
        weights.mean_weight(),
        transform.name(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, file: FileConfig, seed: u64, threads: usize) -> Result<(), CliError> {
    let mut cfg: TrainConfig = file.train;
    cfg.seed = seed;
    cfg.threads = threads;
    merge(&mut cfg.iterations_per_stage, args.iters);
    merge(&mut cfg.batch_size, args.batch_size);
    merge(&mut cfg.learning_rate, args.learning_rate);
    merge(&mut cfg.loss.alpha, args.alpha);
    merge(&mut cfg.loss.sigma, args.sigma);
    merge(&mut cfg.loss.tau, args.tau);
    merge(&mut cfg.k, args.k);
    merge(&mut cfg.weight_mode, args.weight_mode);
    merge(&mut cfg.v0, args.v0);
    merge(&mut cfg.bank_capacity, args.bank_capacity);
    merge(&mut cfg.n_neg, args.n_neg);
    merge(&mut cfg.snapshot_refresh, args.snapshot_refresh);
    merge(&mut cfg.checkpoint_every, args.checkpoint_every);
    merge(&mut cfg.pseudo.labeler, args.labeler);
    merge(&mut cfg.pseudo.flip_rate, args.flip_rate);
    merge(&mut cfg.pseudo.boundary_erode_dilate, args.boundary_px);
    if args.pseudo_dir.is_some() {
        cfg.pseudo.precomputed_dir = args.pseudo_dir;
    }
    if args.no_cvi {
        cfg.use_cvi = false;
    }
    if args.no_ocpl {
        cfg.use_ocpl = false;
    }
    if args.no_tfca {
        cfg.use_tfca = false;
    }

    // --split takes a manifest path, or a ratio to split on the fly
    let split_path = match args.split.parse::<f64>() {
        Ok(ratio) if ratio > 0.0 && ratio <= 1.0 => {
            let dataset = LoadedDataset::open(&args.data)?;
            let split = make_split(&dataset.manifest.image_files, ratio, seed)?;
            fs::create_dir_all(&args.out)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
            let path = args.out.join("split.json");
            split.save(&path)?;
            path
        }
        Ok(ratio) => {
            return Err(CliError::Usage(format!("split ratio {ratio} not in (0, 1]")));
        }
        Err(_) => PathBuf::from(&args.split),
    };

    let stage = args.stage.as_deref().unwrap_or("all");
    let mut trainer = Trainer::new(
        cfg,
        &args.data,
        &split_path,
        &args.instr,
        &args.querydb,
        &args.out,
    )?;

    let mut params = match &args.ckpt {
        Some(path) => load_checkpoint(path)?.0,
        None => trainer.init_params(),
    };
    let (final_stage, final_iter) = match stage {
        "all" => {
            let (p, outcomes) = trainer.run_all()?;
            params = p;
            for o in &outcomes {
                println!(
                    "stage {}: {} iterations, final loss {:.6} -> {}",
                    o.stage,
                    o.iterations,
                    o.final_loss,
                    o.checkpoint.display()
                );
            }
            (3, outcomes[2].iterations)
        }
        "1" | "2" | "3" => {
            let o = match stage {
                "1" => trainer.run_stage1(&mut params)?,
                "2" => trainer.run_stage2(&mut params)?,
                _ => trainer.run_stage3(&mut params)?,
            };
            println!(
                "stage {}: {} iterations, final loss {:.6} -> {}",
                o.stage,
                o.iterations,
                o.final_loss,
                o.checkpoint.display()
            );
            (o.stage, o.iterations)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown stage {other:?}; expected all, 1, 2, or 3"
            )))
        }
    };

    if let Some(set) = &args.eval_set {
        let dataset = LoadedDataset::open(&args.data)?;
        let instrs = read_instructions(set)?;
        let base = set.parent().unwrap_or(Path::new("."));
        let pairs = load_eval_pairs(&dataset, base, &instrs)?;
        let report = trainer.write_metrics(&params, &pairs, final_stage, final_iter)?;
        println!("held-out cIoU: {:.4} over {} pairs", report.ciou, report.n_pairs);
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (params, meta) = load_checkpoint(&args.ckpt)?;
    let dataset = LoadedDataset::open(&args.data)?;
    let instrs = read_instructions(&args.set)?;
    let base = args.set.parent().unwrap_or(Path::new("."));
    let pairs = load_eval_pairs(&dataset, base, &instrs)?;
    let report = evaluate_ciou(&params, &pairs, meta.stage, meta.iteration)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("metrics.json"));
    fs::write(
        &out,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "cIoU {:.4} over {} pairs -> {}",
        report.ciou,
        report.n_pairs,
        out.display()
    );
    Ok(())
}

fn cmd_inspect_ckpt(args: InspectCkptArgs) -> Result<(), CliError> {
    let (params, meta) = load_checkpoint(&args.ckpt)?;
    let describe = params.describe();
    let mut shapes = BTreeMap::new();
    for (name, rows, cols) in &describe.tensor_shapes {
        shapes.insert(name.clone(), vec![*rows, *cols]);
    }
    let report = serde_json::json!({
        "seed": meta.seed,
        "stage": meta.stage,
        "iteration": meta.iteration,
        "dims": describe.dims,
        "param_count": describe.param_count,
        "tensor_shapes": shapes,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let threads = cli.threads.or(file.threads).unwrap_or(1);
    if threads > 1 {
        println!("note: threads = {threads}; byte-level determinism is only guaranteed with --threads 1");
    }
    match cli.cmd {
        Command::GenData(args) => cmd_gen_data(args, file, seed),
        Command::GenInstructions(args) => cmd_gen_instructions(args, file, seed),
        Command::BuildQuerydb(args) => cmd_build_querydb(args, file, seed),
        Command::PseudoLabel(args) => cmd_pseudo_label(args, file, seed),
        Command::FilterWeights(args) => cmd_filter_weights(args, file),
        Command::Train(args) => cmd_train(args, file, seed, threads),
        Command::Eval(args) => cmd_eval(args),
        Command::InspectCkpt(args) => cmd_inspect_ckpt(args),
    }
}

fn main() -> ExitCode {
    // behave like a normal unix tool when stdout is piped into `head`
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", serde_json::json!({ "code": 1, "message": msg }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({ "code": err.code(), "message": err.message() })
            );
            ExitCode::from(err.code())
        }
    }
}
