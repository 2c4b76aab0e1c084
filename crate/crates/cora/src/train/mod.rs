//! Three-stage training harness and cumulative-IoU evaluation.
//!
//! Stage 1 trains on semantic + attribute instructions, stage 2 on
//! conditional instructions (anchor mask channel and bbox features
//! active), stage 3 mixes one labeled batch with one unlabeled batch per
//! step: pseudo-labels are weighted by rephrasing-consistency and tokens
//! are aligned against the labeled token bank. Single-thread runs are
//! bitwise reproducible per seed.

pub mod adamw;

pub use adamw::{adamw_step, AdamWState, OptimizerConfig};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::pseudo::{pseudo_labeler_by_name, NoiseSpec, PseudoError};
use crate::consistency::{
    build_weighted_pseudo, weight_transform_by_name, ConsistencyError, UnlabeledSample, WeightMap,
    WeightTransform, DEFAULT_V0,
};
use crate::data::{DataError, LoadedDataset, SplitManifest};
use crate::instructgen::{read_instructions, InstructError, Instruction, QueryDatabase};
use crate::losses::{
    contrastive_loss, labeled_loss, total_loss, unlabeled_seg_loss, LossConfig, LossError,
};
use crate::maskgeo::BinaryMask;
use crate::model::{
    backward, forward, load_checkpoint, save_checkpoint, CheckpointMeta, Image, ModelDims,
    ModelError, ModelParams, ParamTensors, TokenSource,
};
use crate::rng::{subseed, subseed_n};
use crate::tokenbank::{BankError, TokenBank};

const TAG_INIT: u64 = 0x01;
const TAG_LABELED: u64 = 0x02;
const TAG_UNLABELED: u64 = 0x03;
const TAG_CONTRAST: u64 = 0x04;
const TAG_PSEUDO: u64 = 0x05;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("eval set is empty")]
    EmptyEvalSet,
    #[error("no usable samples: {0}")]
    DataEmpty(String),
    #[error("non-finite loss at stage {stage} iteration {iteration}")]
    NonFinite { stage: u32, iteration: u64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Instr(#[from] InstructError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Consistency(#[from] ConsistencyError),
    #[error(transparent)]
    Pseudo(#[from] PseudoError),
    #[error(transparent)]
    Bank(#[from] BankError),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Architecture knobs (the data-dependent channel and class counts are
/// filled in from the dataset).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d: usize,
    pub d_q: usize,
    pub hidden: usize,
    pub patch: usize,
    pub vocab_hash: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d: 16,
            d_q: 8,
            hidden: 32,
            patch: 4,
            vocab_hash: 64,
        }
    }
}

/// Pseudo-labeler selection; `labeler` is a registered strategy name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub labeler: String,
    pub flip_rate: f64,
    pub boundary_erode_dilate: usize,
    pub precomputed_dir: Option<PathBuf>,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            labeler: "noisy-oracle".into(),
            flip_rate: 0.15,
            boundary_erode_dilate: 1,
            precomputed_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations_per_stage: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// Queries per class in the rephrasing database.
    pub k: usize,
    /// Variance-to-weight strategy name.
    pub weight_mode: String,
    pub v0: f64,
    pub bank_capacity: usize,
    pub n_neg: usize,
    /// Refresh interval (iterations) of the frozen consistency snapshot.
    pub snapshot_refresh: u64,
    pub checkpoint_every: u64,
    pub model: ModelShape,
    pub pseudo: PseudoConfig,
    /// Ablation toggles: conditional stage, consistency weighting,
    /// token alignment.
    pub use_cvi: bool,
    pub use_ocpl: bool,
    pub use_tfca: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations_per_stage: 300,
            batch_size: 8,
            learning_rate: 2e-5,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            k: 7,
            weight_mode: "inverse-exp".into(),
            v0: DEFAULT_V0,
            bank_capacity: 64,
            n_neg: 32,
            snapshot_refresh: 50,
            checkpoint_every: 500,
            model: ModelShape::default(),
            pseudo: PseudoConfig::default(),
            use_cvi: true,
            use_ocpl: true,
            use_tfca: true,
            threads: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations_per_stage < 1 {
            return Err(TrainError::ConfigError(
                "iterations_per_stage must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(TrainError::ConfigError("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::ConfigError(
                "learning_rate must be positive".into(),
            ));
        }
        if self.k < 2 {
            return Err(TrainError::ConfigError("k must be >= 2".into()));
        }
        if self.snapshot_refresh < 1 {
            return Err(TrainError::ConfigError(
                "snapshot_refresh must be >= 1".into(),
            ));
        }
        if self.threads < 1 {
            return Err(TrainError::ConfigError("threads must be >= 1".into()));
        }
        if self.n_neg < 1 || self.bank_capacity < 1 {
            return Err(TrainError::ConfigError(
                "bank sizes must be >= 1".into(),
            ));
        }
        weight_transform_by_name(&self.weight_mode, self.v0)?;
        Ok(())
    }
}

/// Cumulative IoU over (intersection, union) pixel counts. Pairs with an
/// empty union (empty prediction and empty ground truth) are skipped from
/// both sums; an all-skipped set scores 1.0. Returns the score and the
/// number of contributing pairs.
pub fn ciou_from_counts<I: IntoIterator<Item = (u64, u64)>>(counts: I) -> (f64, usize) {
    let mut inter = 0u64;
    let mut union = 0u64;
    let mut contributing = 0usize;
    for (i, u) in counts {
        if u == 0 {
            continue;
        }
        inter += i;
        union += u;
        contributing += 1;
    }
    if union == 0 {
        (1.0, contributing)
    } else {
        (inter as f64 / union as f64, contributing)
    }
}

fn mask_counts(pred: &BinaryMask, gt: &BinaryMask) -> (u64, u64) {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    (inter, union)
}

/// One evaluation item: an image, a query (with optional anchor
/// conditioning), and the ground-truth mask.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub image: Image,
    pub query: String,
    pub anchor_mask: Option<BinaryMask>,
    pub anchor_bbox: Option<[f64; 4]>,
    pub gt: BinaryMask,
    pub class_id: u8,
}

/// Dataset-level cumulative IoU report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub ciou: f64,
    pub per_class_iou: BTreeMap<u8, f64>,
    /// Pairs that contributed a non-empty union.
    pub n_pairs: usize,
    pub stage: u32,
    pub iteration: u64,
}

/// Binarize predictions at 0.5 and accumulate intersections and unions
/// over the whole set (cumulative, not mean-of-IoUs).
pub fn evaluate_ciou(
    params: &ModelParams,
    pairs: &[EvalPair],
    stage: u32,
    iteration: u64,
) -> Result<MetricReport, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let mut counts = Vec::with_capacity(pairs.len());
    let mut per_class: BTreeMap<u8, (u64, u64)> = BTreeMap::new();
    for pair in pairs {
        let trace = forward(
            params,
            &pair.image,
            &pair.query,
            pair.anchor_mask.as_ref(),
            pair.anchor_bbox,
        )?;
        let pred = trace.soft_mask.binarize(0.5);
        let (i, u) = mask_counts(&pred, &pair.gt);
        counts.push((i, u));
        if u > 0 {
            let entry = per_class.entry(pair.class_id).or_insert((0, 0));
            entry.0 += i;
            entry.1 += u;
        }
    }
    let (ciou, contributing) = ciou_from_counts(counts);
    Ok(MetricReport {
        ciou,
        per_class_iou: per_class
            .into_iter()
            .map(|(c, (i, u))| (c, i as f64 / u as f64))
            .collect(),
        n_pairs: contributing,
        stage,
        iteration,
    })
}

/// Resolve instructions (as written by the instruction generator) into
/// in-memory evaluation pairs; mask refs are relative to `instr_dir`.
pub fn load_eval_pairs(
    dataset: &LoadedDataset,
    instr_dir: &Path,
    instrs: &[Instruction],
) -> Result<Vec<EvalPair>, TrainError> {
    let mut pairs = Vec::with_capacity(instrs.len());
    for instr in instrs {
        let image = dataset.load_image(&instr.image_ref)?;
        let gt = BinaryMask::read_pgm(&instr_dir.join(&instr.target_mask_ref))
            .map_err(DataError::from)?;
        let anchor_mask = match &instr.anchor_mask_ref {
            Some(r) => Some(BinaryMask::read_pgm(&instr_dir.join(r)).map_err(DataError::from)?),
            None => None,
        };
        pairs.push(EvalPair {
            image,
            query: instr.query_text.clone(),
            anchor_mask,
            anchor_bbox: instr.anchor_bbox,
            gt,
            class_id: instr.target_class,
        });
    }
    Ok(pairs)
}

/// A fully resolved training sample.
#[derive(Debug, Clone)]
struct Sample {
    image: Image,
    query: String,
    gt_mask: BinaryMask,
    gt_class_index: usize,
    class_id: u8,
    anchor_mask: Option<BinaryMask>,
    anchor_bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
struct UnlabeledEntry {
    image: Image,
    pseudo: crate::maskgeo::LabelMap,
    /// Classes present in the pseudo labels that the query database covers.
    eligible: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Serialize)]
struct LambdaStats {
    mean: f64,
    min: f64,
    max: f64,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    stage: u32,
    it: u64,
    loss: f64,
    parts: &'a BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<LambdaStats>,
}

/// Per-stage result.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: u32,
    pub iterations: u64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    /// Frozen auxiliary forward passes run for consistency weighting.
    pub aux_passes: u64,
}

struct LabeledPassOut {
    total: f64,
    parts: BTreeMap<String, f64>,
    grads: ParamTensors,
    token_vec: Vec<f64>,
    class_id: u8,
}

struct UnlabeledPassOut {
    seg_loss: f64,
    tok_loss: f64,
    grads: Option<ParamTensors>,
    lambda: LambdaStats,
    aux_passes: u64,
}

/// The training session: resolved config, data, instruction sets, and the
/// run directory.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub dims: ModelDims,
    dataset: LoadedDataset,
    stage1_samples: Vec<Sample>,
    stage2_samples: Vec<Sample>,
    unlabeled: Vec<UnlabeledEntry>,
    querydb: QueryDatabase,
    transform: Box<dyn WeightTransform>,
    bank: TokenBank,
    out_dir: PathBuf,
    log: std::io::BufWriter<fs::File>,
    pool: Option<rayon::ThreadPool>,
}

pub use crate::instructgen::{ALL_FILE, ATTRIBUTE_FILE, CONDITIONAL_FILE, SEMANTIC_FILE};

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        dataset_dir: &Path,
        split_path: &Path,
        instr_dir: &Path,
        querydb_path: &Path,
        out_dir: &Path,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let dataset = LoadedDataset::open(dataset_dir)?;
        let split = SplitManifest::load(split_path)?;
        let querydb = QueryDatabase::load(querydb_path)?;
        if querydb.k != cfg.k {
            return Err(TrainError::ConfigError(format!(
                "query database has k = {}, config expects k = {}",
                querydb.k, cfg.k
            )));
        }
        let transform = weight_transform_by_name(&cfg.weight_mode, cfg.v0)?;

        let dims = ModelDims {
            d: cfg.model.d,
            d_q: cfg.model.d_q,
            hidden: cfg.model.hidden,
            patch: cfg.model.patch,
            vocab_hash: cfg.model.vocab_hash,
            channels: 3,
            n_classes: dataset.lexicon.len(),
        };

        let labeled_set: std::collections::BTreeSet<&str> =
            split.labeled.iter().map(String::as_str).collect();
        let load_samples = |file: &str| -> Result<Vec<Sample>, TrainError> {
            let instrs = read_instructions(&instr_dir.join(file))?;
            let mut out = Vec::new();
            for instr in &instrs {
                if !labeled_set.contains(instr.image_ref.as_str()) {
                    continue;
                }
                let image = dataset.load_image(&instr.image_ref)?;
                let gt_mask = BinaryMask::read_pgm(&instr_dir.join(&instr.target_mask_ref))
                    .map_err(DataError::from)?;
                let anchor_mask = match &instr.anchor_mask_ref {
                    Some(r) => Some(
                        BinaryMask::read_pgm(&instr_dir.join(r)).map_err(DataError::from)?,
                    ),
                    None => None,
                };
                out.push(Sample {
                    image,
                    query: instr.query_text.clone(),
                    gt_mask,
                    gt_class_index: dataset.lexicon.class_index(instr.target_class)?,
                    class_id: instr.target_class,
                    anchor_mask,
                    anchor_bbox: instr.anchor_bbox,
                });
            }
            Ok(out)
        };
        let mut stage1_samples = load_samples(SEMANTIC_FILE)?;
        stage1_samples.extend(load_samples(ATTRIBUTE_FILE)?);
        let stage2_samples = load_samples(CONDITIONAL_FILE)?;
        if stage1_samples.is_empty() {
            return Err(TrainError::DataEmpty(
                "no semantic/attribute instructions cover the labeled split".into(),
            ));
        }
        if cfg.use_cvi && stage2_samples.is_empty() {
            return Err(TrainError::DataEmpty(
                "no conditional instructions cover the labeled split".into(),
            ));
        }

        // pseudo-label every unlabeled image once, up front
        let labeler = pseudo_labeler_by_name(
            &cfg.pseudo.labeler,
            NoiseSpec {
                flip_rate: cfg.pseudo.flip_rate,
                boundary_erode_dilate: cfg.pseudo.boundary_erode_dilate,
                seed: subseed(cfg.seed, TAG_PSEUDO),
            },
            dataset.lexicon.class_ids(),
            cfg.pseudo.precomputed_dir.as_deref(),
        )?;
        let mut unlabeled = Vec::new();
        for image_ref in &split.unlabeled {
            let stem = LoadedDataset::stem_of(image_ref).to_string();
            let gt = dataset.load_labels_for(image_ref)?;
            let pseudo = labeler.pseudo_label(&stem, &gt)?;
            let eligible: Vec<u8> = pseudo
                .classes()
                .into_iter()
                .filter(|&c| querydb.class_queries(c).is_some())
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let image = dataset.load_image(image_ref)?;
            unlabeled.push(UnlabeledEntry {
                image,
                pseudo,
                eligible,
            });
        }

        fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
        let config_path = out_dir.join("config.json");
        fs::write(
            &config_path,
            serde_json::to_string_pretty(&cfg).expect("config serializes"),
        )
        .map_err(|e| io_err(&config_path, e))?;
        let log_path = out_dir.join("log.jsonl");
        let log = std::io::BufWriter::new(
            fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?,
        );

        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| TrainError::ConfigError(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        let bank = TokenBank::new(cfg.bank_capacity);
        Ok(Self {
            cfg,
            dims,
            dataset,
            stage1_samples,
            stage2_samples,
            unlabeled,
            querydb,
            transform,
            bank,
            out_dir: out_dir.to_path_buf(),
            log,
            pool,
        })
    }

    pub fn init_params(&self) -> ModelParams {
        ModelParams::init(self.dims, subseed(self.cfg.seed, TAG_INIT))
    }

    pub fn lexicon(&self) -> &crate::instructgen::ClassLexicon {
        &self.dataset.lexicon
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    fn run_map<I, O, F>(&self, items: Vec<I>, f: F) -> Result<Vec<O>, TrainError>
    where
        I: Send,
        O: Send,
        F: Fn(I) -> Result<O, TrainError> + Sync + Send,
    {
        match &self.pool {
            None => items.into_iter().map(f).collect(),
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                items.into_par_iter().map(f).collect()
            }),
        }
    }

    fn labeled_pass(
        &self,
        params: &ModelParams,
        sample: &Sample,
        upstream_scale: f64,
    ) -> Result<LabeledPassOut, TrainError> {
        let trace = forward(
            params,
            &sample.image,
            &sample.query,
            sample.anchor_mask.as_ref(),
            sample.anchor_bbox,
        )?;
        let lv = labeled_loss(&trace, &sample.gt_mask, sample.gt_class_index, &self.cfg.loss)?;
        let d_mask: Vec<f64> = lv.d_mask_logits.iter().map(|g| g * upstream_scale).collect();
        let d_resp: Vec<f64> = lv
            .d_response_logits
            .iter()
            .map(|g| g * upstream_scale)
            .collect();
        let grads = backward(params, &trace, &d_mask, &d_resp, &vec![0.0; self.dims.d])?;
        Ok(LabeledPassOut {
            total: lv.total,
            parts: lv.parts,
            grads,
            token_vec: trace.sseg,
            class_id: sample.class_id,
        })
    }

    fn unlabeled_pass(
        &self,
        params: &ModelParams,
        frozen: &ModelParams,
        entry: &UnlabeledEntry,
        class_id: u8,
        live_idx: usize,
        contrast_seed: u64,
        upstream_scale: f64,
    ) -> Result<UnlabeledPassOut, TrainError> {
        let (live_query, pseudo_mask, weights, aux_passes) = if self.cfg.use_ocpl {
            let sample = UnlabeledSample {
                image: entry.image.clone(),
                pseudo_labels: entry.pseudo.clone(),
                class_id,
            };
            let wp = build_weighted_pseudo(
                &sample,
                &self.querydb,
                frozen,
                live_idx,
                self.transform.as_ref(),
            )?;
            let aux = wp.aux_query_indices.len() as u64;
            (wp.live_query, wp.pseudo_mask, wp.weights, aux)
        } else {
            let queries = self.querydb.class_queries(class_id).ok_or(
                ConsistencyError::MissingClassQueries { class: class_id },
            )?;
            (
                queries[live_idx].clone(),
                entry.pseudo.class_mask(class_id),
                WeightMap::uniform(entry.image.width, entry.image.height, 1.0),
                0,
            )
        };

        let trace = forward(params, &entry.image, &live_query, None, None)?;
        let seg = unlabeled_seg_loss(&trace.soft_mask, &pseudo_mask, &weights, &self.cfg.loss)?;

        let (tok_loss, d_sseg) = if self.cfg.use_tfca {
            let token = trace.token(class_id, TokenSource::Unlabeled);
            let c = contrastive_loss(
                &[token],
                &self.bank,
                self.cfg.n_neg,
                contrast_seed,
                &self.cfg.loss,
            );
            (c.total, c.d_anchor_vecs.into_iter().next().flatten())
        } else {
            (0.0, None)
        };

        let lambda = LambdaStats {
            mean: weights.mean_weight(),
            min: weights.weights.iter().copied().fold(f64::INFINITY, f64::min),
            max: weights
                .weights
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        };

        let grads = if upstream_scale != 0.0 {
            let d_mask: Vec<f64> = seg
                .d_mask_logits
                .iter()
                .map(|g| g * upstream_scale)
                .collect();
            let d_sseg_v: Vec<f64> = match &d_sseg {
                Some(g) => g.iter().map(|v| v * upstream_scale).collect(),
                None => vec![0.0; self.dims.d],
            };
            Some(backward(
                params,
                &trace,
                &d_mask,
                &vec![0.0; self.dims.n_classes],
                &d_sseg_v,
            )?)
        } else {
            None
        };

        Ok(UnlabeledPassOut {
            seg_loss: seg.total,
            tok_loss,
            grads,
            lambda,
            aux_passes,
        })
    }

    fn write_log(
        &mut self,
        stage: u32,
        it: u64,
        loss: f64,
        parts: &BTreeMap<String, f64>,
        lambda: Option<LambdaStats>,
    ) -> Result<(), TrainError> {
        let record = LogRecord {
            stage,
            it,
            loss,
            parts,
            lambda,
        };
        let line = serde_json::to_string(&record).expect("log record serializes");
        writeln!(self.log, "{line}").map_err(|e| io_err(&self.out_dir.join("log.jsonl"), e))
    }

    fn stage_checkpoint(
        &self,
        params: &ModelParams,
        stage: u32,
        iteration: u64,
        name: &str,
    ) -> Result<PathBuf, TrainError> {
        let path = self.out_dir.join(name);
        save_checkpoint(
            params,
            &CheckpointMeta {
                seed: self.cfg.seed,
                stage,
                iteration,
            },
            &path,
        )?;
        Ok(path)
    }

    /// One stage of labeled-only training over `set`.
    fn run_labeled_stage(
        &mut self,
        params: &mut ModelParams,
        stage: u32,
    ) -> Result<StageOutcome, TrainError> {
        let set: Vec<Sample> = match stage {
            1 => self.stage1_samples.clone(),
            2 => {
                if self.cfg.use_cvi {
                    self.stage2_samples.clone()
                } else {
                    // ablation: conditional stage replaced by more
                    // semantic/attribute training at equal compute
                    self.stage1_samples.clone()
                }
            }
            _ => unreachable!(),
        };
        let inv_b = 1.0 / self.cfg.batch_size as f64;
        let mut state = AdamWState::new(&self.dims);
        let mut final_loss = 0.0;

        for it in 0..self.cfg.iterations_per_stage {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed_n(
                self.cfg.seed,
                &[TAG_LABELED, stage as u64, it],
            ));
            let idxs: Vec<usize> = (0..self.cfg.batch_size)
                .map(|_| rng.gen_range(0..set.len()))
                .collect();
            let outs = self.run_map(idxs, |i| self.labeled_pass(params, &set[i], inv_b))?;

            let mut grads = ParamTensors::zeros(&self.dims);
            let mut loss = 0.0;
            let mut parts: BTreeMap<String, f64> = BTreeMap::new();
            for out in &outs {
                grads.add_scaled(&out.grads, 1.0);
                loss += out.total * inv_b;
                for (k, v) in &out.parts {
                    *parts.entry(k.clone()).or_insert(0.0) += v * inv_b;
                }
            }
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    stage,
                    iteration: it,
                });
            }
            adamw_step(
                &mut params.tensors,
                &grads,
                &mut state,
                self.cfg.learning_rate,
                &self.cfg.optimizer,
            )?;
            self.write_log(stage, it, loss, &parts, None)?;
            final_loss = loss;

            if self.cfg.checkpoint_every > 0 && it > 0 && it % self.cfg.checkpoint_every == 0 {
                self.stage_checkpoint(params, stage, it, &format!("ckpt_s{stage}_it{it}.bin"))?;
            }
        }

        let checkpoint = self.stage_checkpoint(
            params,
            stage,
            self.cfg.iterations_per_stage,
            &format!("ckpt_stage{stage}.bin"),
        )?;
        // continue from the serialized weights so an in-process run matches
        // a stop-and-resume run exactly
        let (reloaded, _) = load_checkpoint(&checkpoint)?;
        *params = reloaded;
        self.log.flush().map_err(|e| io_err(&self.out_dir, e))?;
        Ok(StageOutcome {
            stage,
            iterations: self.cfg.iterations_per_stage,
            final_loss,
            checkpoint,
            aux_passes: 0,
        })
    }

    pub fn run_stage1(&mut self, params: &mut ModelParams) -> Result<StageOutcome, TrainError> {
        self.run_labeled_stage(params, 1)
    }

    pub fn run_stage2(&mut self, params: &mut ModelParams) -> Result<StageOutcome, TrainError> {
        self.run_labeled_stage(params, 2)
    }

    /// Semi-supervised stage: per step, one labeled batch plus one
    /// unlabeled batch combined as `L = L_labeled + sigma (L_seg + L_tok)`.
    /// With `sigma == 0` the unlabeled branch is skipped entirely and the
    /// run equals a labeled-only stage parameter-for-parameter.
    pub fn run_stage3(&mut self, params: &mut ModelParams) -> Result<StageOutcome, TrainError> {
        let stage = 3u32;
        let mut labeled_all = self.stage1_samples.clone();
        if self.cfg.use_cvi {
            labeled_all.extend(self.stage2_samples.iter().cloned());
        }
        let use_unlabeled = self.cfg.loss.sigma != 0.0;
        if use_unlabeled && self.unlabeled.is_empty() {
            return Err(TrainError::DataEmpty(
                "stage 3 needs unlabeled images when sigma > 0".into(),
            ));
        }

        // fresh bank, warmed by one pass over the labeled set so positives
        // exist before the first contrastive term
        self.bank.clear();
        if self.cfg.use_tfca && use_unlabeled {
            let warm: Vec<(Vec<f64>, u8)> = {
                let samples = &self.stage1_samples;
                let mut warm = Vec::with_capacity(samples.len());
                for sample in samples {
                    let trace = forward(
                        params,
                        &sample.image,
                        &sample.query,
                        sample.anchor_mask.as_ref(),
                        sample.anchor_bbox,
                    )?;
                    warm.push((trace.sseg, sample.class_id));
                }
                warm
            };
            for (vec, class_id) in warm {
                self.bank.push(&crate::model::SsegToken {
                    vec,
                    class_id,
                    source: TokenSource::Labeled,
                })?;
            }
        }

        let inv_b = 1.0 / self.cfg.batch_size as f64;
        let sigma_scale = self.cfg.loss.sigma * inv_b;
        let mut state = AdamWState::new(&self.dims);
        let mut frozen = params.clone();
        let mut final_loss = 0.0;
        let mut aux_total = 0u64;

        for it in 0..self.cfg.iterations_per_stage {
            if it % self.cfg.snapshot_refresh == 0 {
                frozen = params.clone();
            }

            // labeled batch
            let mut rng_l = ChaCha8Rng::seed_from_u64(subseed_n(
                self.cfg.seed,
                &[TAG_LABELED, stage as u64, it],
            ));
            let idxs: Vec<usize> = (0..self.cfg.batch_size)
                .map(|_| rng_l.gen_range(0..labeled_all.len()))
                .collect();
            let labeled_outs =
                self.run_map(idxs, |i| self.labeled_pass(params, &labeled_all[i], inv_b))?;

            let mut grads = ParamTensors::zeros(&self.dims);
            let mut labeled_loss_mean = 0.0;
            let mut parts: BTreeMap<String, f64> = BTreeMap::new();
            for out in &labeled_outs {
                grads.add_scaled(&out.grads, 1.0);
                labeled_loss_mean += out.total * inv_b;
                for (k, v) in &out.parts {
                    *parts.entry(k.clone()).or_insert(0.0) += v * inv_b;
                }
            }

            // unlabeled batch
            let mut seg_mean = 0.0;
            let mut tok_mean = 0.0;
            let mut lambda_agg = None;
            if use_unlabeled {
                let mut rng_u = ChaCha8Rng::seed_from_u64(subseed_n(
                    self.cfg.seed,
                    &[TAG_UNLABELED, it],
                ));
                let draws: Vec<(usize, u8, usize, u64)> = (0..self.cfg.batch_size)
                    .map(|j| {
                        let entry_idx = rng_u.gen_range(0..self.unlabeled.len());
                        let eligible = &self.unlabeled[entry_idx].eligible;
                        let class_id = eligible[rng_u.gen_range(0..eligible.len())];
                        let live_idx = rng_u.gen_range(0..self.cfg.k);
                        let contrast_seed =
                            subseed_n(self.cfg.seed, &[TAG_CONTRAST, it, j as u64]);
                        (entry_idx, class_id, live_idx, contrast_seed)
                    })
                    .collect();
                let unlabeled_outs = self.run_map(draws, |(ei, class_id, live, cseed)| {
                    self.unlabeled_pass(
                        params,
                        &frozen,
                        &self.unlabeled[ei],
                        class_id,
                        live,
                        cseed,
                        sigma_scale,
                    )
                })?;

                let (mut lmean, mut lmin, mut lmax) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                for out in &unlabeled_outs {
                    if let Some(g) = &out.grads {
                        grads.add_scaled(g, 1.0);
                    }
                    seg_mean += out.seg_loss * inv_b;
                    tok_mean += out.tok_loss * inv_b;
                    lmean += out.lambda.mean * inv_b;
                    lmin = lmin.min(out.lambda.min);
                    lmax = lmax.max(out.lambda.max);
                    aux_total += out.aux_passes;
                }
                lambda_agg = Some(LambdaStats {
                    mean: lmean,
                    min: lmin,
                    max: lmax,
                });
                parts.insert("unlab_seg".to_string(), seg_mean);
                parts.insert("unlab_tok".to_string(), tok_mean);
            }

            let loss = total_loss(labeled_loss_mean, seg_mean, tok_mean, &self.cfg.loss)
                .map_err(|_| TrainError::NonFinite {
                    stage,
                    iteration: it,
                })?;
            adamw_step(
                &mut params.tensors,
                &grads,
                &mut state,
                self.cfg.learning_rate,
                &self.cfg.optimizer,
            )?;

            // labeled tokens enter the bank after the step
            if self.cfg.use_tfca && use_unlabeled {
                for out in &labeled_outs {
                    self.bank.push(&crate::model::SsegToken {
                        vec: out.token_vec.clone(),
                        class_id: out.class_id,
                        source: TokenSource::Labeled,
                    })?;
                }
            }

            self.write_log(stage, it, loss, &parts, lambda_agg)?;
            final_loss = loss;

            if self.cfg.checkpoint_every > 0 && it > 0 && it % self.cfg.checkpoint_every == 0 {
                self.stage_checkpoint(params, stage, it, &format!("ckpt_s{stage}_it{it}.bin"))?;
            }
        }

        let checkpoint = self.stage_checkpoint(
            params,
            stage,
            self.cfg.iterations_per_stage,
            "ckpt_stage3.bin",
        )?;
        let (reloaded, _) = load_checkpoint(&checkpoint)?;
        *params = reloaded;
        self.log.flush().map_err(|e| io_err(&self.out_dir, e))?;
        Ok(StageOutcome {
            stage,
            iterations: self.cfg.iterations_per_stage,
            final_loss,
            checkpoint,
            aux_passes: aux_total,
        })
    }

    /// Run stages 1-3 from a fresh seeded init.
    pub fn run_all(&mut self) -> Result<(ModelParams, Vec<StageOutcome>), TrainError> {
        let mut params = self.init_params();
        let s1 = self.run_stage1(&mut params)?;
        let s2 = self.run_stage2(&mut params)?;
        let s3 = self.run_stage3(&mut params)?;
        Ok((params, vec![s1, s2, s3]))
    }

    /// Evaluate and write `metrics.json` into the run directory.
    pub fn write_metrics(
        &self,
        params: &ModelParams,
        pairs: &[EvalPair],
        stage: u32,
        iteration: u64,
    ) -> Result<MetricReport, TrainError> {
        let report = evaluate_ciou(params, pairs, stage, iteration)?;
        let path = self.out_dir.join("metrics.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| io_err(&path, e))?;
        Ok(report)
    }
}
