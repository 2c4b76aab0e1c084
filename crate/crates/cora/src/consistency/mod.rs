//! Output-consistency pseudo-label weighting.
//!
//! Several frozen forward passes under rephrased queries give a per-pixel
//! prediction variance; a weight transform maps that variance to a
//! reliability weight for the unlabeled segmentation loss.
//!
//! The variance-to-weight transforms are interchangeable strategies
//! behind [`WeightTransform`], registered by name and selected via
//! config/CLI (`literal`, `inverse-exp`, `inverse-linear`).

pub mod pseudo;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instructgen::QueryDatabase;
use crate::maskgeo::{BinaryMask, LabelMap};
use crate::model::{forward, Image, ModelError, ModelParams, SoftMask};
use crate::pnm;

/// Default scale of the exponential inverse transform.
pub const DEFAULT_V0: f64 = 0.05;

#[derive(Debug, Error)]
pub enum ConsistencyError {
    #[error("prediction stack is empty")]
    EmptyStack,
    #[error("prediction {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("inverse-exp weight transform needs v0 > 0, got {v0}")]
    BadScale { v0: f64 },
    #[error("unknown weight mode {0:?}; known modes: literal, inverse-exp, inverse-linear")]
    UnknownMode(String),
    #[error("query database has no entries for class {class}")]
    MissingClassQueries { class: u8 },
    #[error("live query index {index} out of range for k = {k}")]
    BadLiveIndex { index: usize, k: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pnm(#[from] pnm::PnmError),
}

/// Auxiliary predictions for one unlabeled sample: `k - 1` soft masks
/// from rephrased queries, all the same size.
#[derive(Debug, Clone)]
pub struct PredictionStack {
    pub preds: Vec<SoftMask>,
    pub class_id: u8,
    pub query_indices: Vec<usize>,
}

impl PredictionStack {
    pub fn new(
        preds: Vec<SoftMask>,
        class_id: u8,
        query_indices: Vec<usize>,
    ) -> Result<Self, ConsistencyError> {
        if preds.is_empty() {
            return Err(ConsistencyError::EmptyStack);
        }
        let (w, h) = (preds[0].width, preds[0].height);
        for (i, p) in preds.iter().enumerate() {
            if p.width != w || p.height != h {
                return Err(ConsistencyError::DimensionMismatch {
                    index: i,
                    got_w: p.width,
                    got_h: p.height,
                    want_w: w,
                    want_h: h,
                });
            }
        }
        Ok(Self {
            preds,
            class_id,
            query_indices,
        })
    }
}

/// Per-pixel reliability weights plus the raw variance they came from.
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
    pub raw_variance: Vec<f64>,
}

impl WeightMap {
    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            weights: vec![value; width * height],
            raw_variance: vec![0.0; width * height],
        }
    }

    pub fn mean_weight(&self) -> f64 {
        if self.weights.is_empty() {
            return 0.0;
        }
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

/// Population variance over the stack, per pixel: with predictions bounded
/// in `[0, 1]` the result is bounded by `0.25`. A single prediction gives
/// all zeros.
pub fn pixel_variance(stack: &PredictionStack) -> Vec<f64> {
    let n = stack.preds.len();
    let len = stack.preds[0].data.len();
    let inv = 1.0 / n as f64;
    let mut out = vec![0.0; len];
    for (i, v) in out.iter_mut().enumerate() {
        let mean: f64 = stack.preds.iter().map(|p| p.data[i]).sum::<f64>() * inv;
        *v = stack
            .preds
            .iter()
            .map(|p| {
                let d = p.data[i] - mean;
                d * d
            })
            .sum::<f64>()
            * inv;
    }
    out
}

/// Maps a per-pixel variance to a reliability weight in `[0, 1]`.
pub trait WeightTransform: Send + Sync {
    fn name(&self) -> &'static str;
    fn weight(&self, variance: f64) -> f64;
    /// Scale parameter, when the strategy has one (sidecar metadata).
    fn v0(&self) -> Option<f64> {
        None
    }
}

/// `w = var`: the up-weighting reading of the variance-as-weight formula,
/// kept for fidelity experiments.
pub struct Literal;

impl WeightTransform for Literal {
    fn name(&self) -> &'static str {
        "literal"
    }
    fn weight(&self, variance: f64) -> f64 {
        variance
    }
}

/// `w = exp(-var / v0)`: unstable pixels get exponentially lower weights.
/// This is the default.
pub struct InverseExp {
    pub v0: f64,
}

impl WeightTransform for InverseExp {
    fn name(&self) -> &'static str {
        "inverse-exp"
    }
    fn weight(&self, variance: f64) -> f64 {
        (-variance / self.v0).exp()
    }
    fn v0(&self) -> Option<f64> {
        Some(self.v0)
    }
}

/// `w = 1 - 4 var`, clamped to `[0, 1]`: linear down-weighting that hits
/// zero at the maximum possible variance.
pub struct InverseLinear;

impl WeightTransform for InverseLinear {
    fn name(&self) -> &'static str {
        "inverse-linear"
    }
    fn weight(&self, variance: f64) -> f64 {
        (1.0 - 4.0 * variance).clamp(0.0, 1.0)
    }
}

/// Registered strategy names, in lookup order.
pub const WEIGHT_MODE_NAMES: [&str; 3] = ["literal", "inverse-exp", "inverse-linear"];

/// Look up a weight transform by its registered name. `v0` only applies
/// to `inverse-exp` and must be positive there.
pub fn weight_transform_by_name(
    name: &str,
    v0: f64,
) -> Result<Box<dyn WeightTransform>, ConsistencyError> {
    match name {
        "literal" => Ok(Box::new(Literal)),
        "inverse-exp" => {
            if v0 <= 0.0 {
                return Err(ConsistencyError::BadScale { v0 });
            }
            Ok(Box::new(InverseExp { v0 }))
        }
        "inverse-linear" => Ok(Box::new(InverseLinear)),
        other => Err(ConsistencyError::UnknownMode(other.to_string())),
    }
}

/// Apply a transform to a variance grid.
pub fn variance_to_weight(
    variance: &[f64],
    width: usize,
    height: usize,
    transform: &dyn WeightTransform,
) -> WeightMap {
    assert_eq!(variance.len(), width * height);
    WeightMap {
        width,
        height,
        weights: variance.iter().map(|&v| transform.weight(v)).collect(),
        raw_variance: variance.to_vec(),
    }
}

/// One unlabeled training sample: the image, the pseudo label map an
/// external labeler produced for it, and the class drawn for this pass.
#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub image: Image,
    pub pseudo_labels: LabelMap,
    pub class_id: u8,
}

/// Output of [`build_weighted_pseudo`].
#[derive(Debug, Clone)]
pub struct WeightedPseudo {
    pub live_query: String,
    pub live_query_index: usize,
    pub aux_query_indices: Vec<usize>,
    pub pseudo_mask: BinaryMask,
    pub weights: WeightMap,
}

/// Reserve one query for the live training pass; run the remaining
/// `k - 1` rephrasings through frozen forward passes, convert their
/// per-pixel variance into weights, and extract the class pseudo mask.
pub fn build_weighted_pseudo(
    sample: &UnlabeledSample,
    db: &QueryDatabase,
    frozen: &ModelParams,
    live_query_index: usize,
    transform: &dyn WeightTransform,
) -> Result<WeightedPseudo, ConsistencyError> {
    let queries = db
        .class_queries(sample.class_id)
        .ok_or(ConsistencyError::MissingClassQueries {
            class: sample.class_id,
        })?;
    if live_query_index >= queries.len() {
        return Err(ConsistencyError::BadLiveIndex {
            index: live_query_index,
            k: queries.len(),
        });
    }

    let mut preds = Vec::with_capacity(queries.len() - 1);
    let mut aux_query_indices = Vec::with_capacity(queries.len() - 1);
    for (j, query) in queries.iter().enumerate() {
        if j == live_query_index {
            continue;
        }
        let trace = forward(frozen, &sample.image, query, None, None)?;
        preds.push(trace.soft_mask);
        aux_query_indices.push(j);
    }
    let stack = PredictionStack::new(preds, sample.class_id, aux_query_indices.clone())?;
    let variance = pixel_variance(&stack);
    let weights = variance_to_weight(
        &variance,
        sample.image.width,
        sample.image.height,
        transform,
    );

    Ok(WeightedPseudo {
        live_query: queries[live_query_index].clone(),
        live_query_index,
        aux_query_indices,
        pseudo_mask: sample.pseudo_labels.class_mask(sample.class_id),
        weights,
    })
}

/// Sidecar metadata written next to an exported weight map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightMapSidecar {
    pub min: f64,
    pub max: f64,
    pub mode: String,
    pub v0: Option<f64>,
}

/// Export weights as a PGM quantized to 0-255 plus a JSON sidecar.
pub fn export_weight_map(
    map: &WeightMap,
    transform: &dyn WeightTransform,
    pgm_path: &Path,
    sidecar_path: &Path,
) -> Result<(), ConsistencyError> {
    let bytes: Vec<u8> = map
        .weights
        .iter()
        .map(|&w| (w.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pnm::write_pgm(pgm_path, map.width, map.height, &bytes)?;
    let sidecar = WeightMapSidecar {
        min: map.weights.iter().copied().fold(f64::INFINITY, f64::min),
        max: map.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mode: transform.name().to_string(),
        v0: transform.v0(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(sidecar_path, text).map_err(|e| {
        ConsistencyError::Pnm(pnm::PnmError::Io {
            path: sidecar_path.display().to_string(),
            source: e,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instructgen::{build_query_db, ClassLexicon, LexiconEntry};
    use crate::model::{ModelDims, ModelParams};
    use rand::Rng;
    use std::collections::BTreeMap;

    fn soft(width: usize, height: usize, values: &[f64]) -> SoftMask {
        assert_eq!(values.len(), width * height);
        SoftMask {
            width,
            height,
            data: values.to_vec(),
        }
    }

    #[test]
    fn identical_predictions_have_zero_variance() {
        let p = soft(2, 2, &[0.3, 0.5, 0.7, 0.9]);
        let stack = PredictionStack::new(vec![p.clone(), p.clone(), p], 1, vec![0, 1, 2]).unwrap();
        // zero up to the rounding of mean(p, p, p) back to p
        assert!(pixel_variance(&stack).iter().all(|&v| v < 1e-30));
    }

    #[test]
    fn bernoulli_extremes_hit_quarter() {
        let stack = PredictionStack::new(
            vec![soft(1, 1, &[0.0]), soft(1, 1, &[1.0])],
            1,
            vec![0, 1],
        )
        .unwrap();
        assert!((pixel_variance(&stack)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hand_value_for_three_predictions() {
        let stack = PredictionStack::new(
            vec![soft(1, 1, &[0.2]), soft(1, 1, &[0.4]), soft(1, 1, &[0.6])],
            1,
            vec![0, 1, 2],
        )
        .unwrap();
        let var = pixel_variance(&stack)[0];
        assert!((var - 0.08 / 3.0).abs() < 1e-15);
        assert_eq!(format!("{var:.6}"), "0.026667");
    }

    /// Scalar re-implementation of the variance, double loop, no reuse.
    fn variance_oracle(preds: &[SoftMask]) -> Vec<f64> {
        let len = preds[0].data.len();
        let k = preds.len() as f64;
        let mut out = vec![0.0; len];
        for i in 0..len {
            let mut mean = 0.0;
            for p in preds {
                mean += p.data[i];
            }
            mean /= k;
            let mut acc = 0.0;
            for p in preds {
                acc += (p.data[i] - mean) * (p.data[i] - mean);
            }
            out[i] = acc / k;
        }
        out
    }

    #[test]
    fn variance_matches_scalar_oracle() {
        let mut rng = crate::rng::rng_for(313, 0);
        for _ in 0..100 {
            let w = rng.gen_range(1..6);
            let h = rng.gen_range(1..6);
            let k = rng.gen_range(2..=6);
            let preds: Vec<SoftMask> = (0..k)
                .map(|_| {
                    let data: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
                    soft(w, h, &data)
                })
                .collect();
            let stack =
                PredictionStack::new(preds.clone(), 1, (0..k).collect()).unwrap();
            let got = pixel_variance(&stack);
            let want = variance_oracle(&preds);
            for (g, w_) in got.iter().zip(&want) {
                assert!((g - w_).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_is_permutation_invariant_and_bounded() {
        let mut rng = crate::rng::rng_for(314, 0);
        let preds: Vec<SoftMask> = (0..5)
            .map(|_| {
                let data: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..=1.0)).collect();
                soft(3, 3, &data)
            })
            .collect();
        let fwd = PredictionStack::new(preds.clone(), 1, (0..5).collect()).unwrap();
        let mut rev_preds = preds;
        rev_preds.reverse();
        let rev = PredictionStack::new(rev_preds, 1, (0..5).collect()).unwrap();
        let (a, b) = (pixel_variance(&fwd), pixel_variance(&rev));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(a.iter().all(|&v| (0.0..=0.25 + 1e-15).contains(&v)));
    }

    #[test]
    fn mismatched_stack_is_rejected() {
        let err = PredictionStack::new(
            vec![soft(2, 2, &[0.0; 4]), soft(3, 2, &[0.0; 6])],
            1,
            vec![0, 1],
        );
        assert!(matches!(
            err,
            Err(ConsistencyError::DimensionMismatch { index: 1, .. })
        ));
        assert!(matches!(
            PredictionStack::new(vec![], 1, vec![]),
            Err(ConsistencyError::EmptyStack)
        ));
    }

    #[test]
    fn weight_transforms_at_zero_variance() {
        assert_eq!(Literal.weight(0.0), 0.0);
        assert_eq!(InverseExp { v0: 0.05 }.weight(0.0), 1.0);
        assert_eq!(InverseLinear.weight(0.0), 1.0);
    }

    #[test]
    fn weight_transforms_at_max_variance() {
        assert_eq!(InverseLinear.weight(0.25), 0.0);
        let w = InverseExp { v0: 0.05 }.weight(0.25);
        assert!((w - (-5.0f64).exp()).abs() < 1e-12);
        assert!((w - 0.006738).abs() < 1e-6);
        assert_eq!(Literal.weight(0.25), 0.25);
    }

    #[test]
    fn transforms_are_monotone() {
        let grid: Vec<f64> = (0..=25).map(|i| i as f64 * 0.01).collect();
        for name in WEIGHT_MODE_NAMES {
            let t = weight_transform_by_name(name, DEFAULT_V0).unwrap();
            for w in grid.windows(2) {
                let (a, b) = (t.weight(w[0]), t.weight(w[1]));
                if name == "literal" {
                    assert!(b >= a);
                } else {
                    assert!(b <= a);
                }
            }
        }
    }

    #[test]
    fn registry_rejects_unknown_names_and_bad_scale() {
        assert!(matches!(
            weight_transform_by_name("softmax", 0.05),
            Err(ConsistencyError::UnknownMode(_))
        ));
        assert!(matches!(
            weight_transform_by_name("inverse-exp", 0.0),
            Err(ConsistencyError::BadScale { .. })
        ));
    }

    fn tiny_db(k: usize) -> QueryDatabase {
        let mut entries = BTreeMap::new();
        entries.insert(
            1,
            LexiconEntry {
                name: "circle".into(),
                attributes: (0..7).map(|i| format!("round thing {i}")).collect(),
            },
        );
        let lex = ClassLexicon::new(entries, 7).unwrap();
        build_query_db(&lex, k, 5).unwrap()
    }

    fn tiny_sample(dims: &ModelDims) -> UnlabeledSample {
        let mut labels = LabelMap::filled(16, 16, crate::maskgeo::VOID);
        for y in 4..10 {
            for x in 4..10 {
                labels.set(x, y, 1);
            }
        }
        UnlabeledSample {
            image: crate::model::Image::zeros(16, 16, dims.channels),
            pseudo_labels: labels,
            class_id: 1,
        }
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d: 8,
            d_q: 6,
            hidden: 10,
            patch: 4,
            vocab_hash: 32,
            channels: 3,
            n_classes: 2,
        }
    }

    #[test]
    fn k7_means_six_auxiliary_passes() {
        let dims = tiny_dims();
        let frozen = ModelParams::init(dims, 3);
        let db = tiny_db(7);
        let sample = tiny_sample(&dims);
        let t = InverseExp { v0: DEFAULT_V0 };
        let wp = build_weighted_pseudo(&sample, &db, &frozen, 2, &t).unwrap();
        assert_eq!(wp.aux_query_indices.len(), 6);
        assert_eq!(wp.pseudo_mask.area(), 36);
    }

    #[test]
    fn zero_params_give_uniform_unit_weights() {
        let dims = tiny_dims();
        let frozen = ModelParams::zeros(dims);
        let db = tiny_db(7);
        let sample = tiny_sample(&dims);
        let t = InverseExp { v0: DEFAULT_V0 };
        let wp = build_weighted_pseudo(&sample, &db, &frozen, 0, &t).unwrap();
        assert!(wp.weights.raw_variance.iter().all(|&v| v == 0.0));
        assert!(wp.weights.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn live_query_is_always_excluded() {
        let dims = tiny_dims();
        let frozen = ModelParams::init(dims, 4);
        let db = tiny_db(7);
        let sample = tiny_sample(&dims);
        let t = InverseLinear;
        for live in 0..7 {
            let wp = build_weighted_pseudo(&sample, &db, &frozen, live, &t).unwrap();
            assert_eq!(wp.live_query_index, live);
            assert!(!wp.aux_query_indices.contains(&live));
            let mut all: Vec<usize> = wp.aux_query_indices.clone();
            all.push(live);
            all.sort_unstable();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
            assert_eq!(wp.live_query, db.class_queries(1).unwrap()[live]);
        }
    }

    #[test]
    fn missing_class_and_bad_live_index_error() {
        let dims = tiny_dims();
        let frozen = ModelParams::zeros(dims);
        let db = tiny_db(3);
        let mut sample = tiny_sample(&dims);
        sample.class_id = 9;
        let t = Literal;
        assert!(matches!(
            build_weighted_pseudo(&sample, &db, &frozen, 0, &t),
            Err(ConsistencyError::MissingClassQueries { class: 9 })
        ));
        sample.class_id = 1;
        assert!(matches!(
            build_weighted_pseudo(&sample, &db, &frozen, 3, &t),
            Err(ConsistencyError::BadLiveIndex { index: 3, k: 3 })
        ));
    }

    #[test]
    fn export_writes_pgm_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let t = InverseExp { v0: 0.05 };
        let map = variance_to_weight(&[0.0, 0.25, 0.1, 0.05], 2, 2, &t);
        let pgm = dir.path().join("w.pgm");
        let json = dir.path().join("w.json");
        export_weight_map(&map, &t, &pgm, &json).unwrap();
        let img = pnm::read_pgm(&pgm).unwrap();
        assert_eq!(img.data[0], 255);
        let sidecar: WeightMapSidecar =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(sidecar.mode, "inverse-exp");
        assert_eq!(sidecar.v0, Some(0.05));
        assert!(sidecar.max <= 1.0 && sidecar.min > 0.0);
    }
}
