//! A small query-conditioned segmentation network.
//!
//! The pipeline mirrors the reasoning-segmentation information flow:
//! a text query (plus optional anchor conditioning) is encoded into a
//! single segmentation token, the image is patch-encoded into a feature
//! grid, and the mask is decoded as the per-cell dot product between the
//! token and the grid, upsampled to pixel resolution. A linear response
//! head over the token stands in for the language output.
//!
//! Everything is `f64` and the backward pass is hand-derived, so analytic
//! gradients can be verified against central finite differences.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgeo::BinaryMask;
use crate::rng::{fnv1a, subseed};

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CORA";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Soft-mask probabilities are kept strictly inside (0, 1).
const SIGMOID_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("query contains no word tokens")]
    EmptyQuery,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("trace was not produced by these parameters")]
    TraceMismatch,
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Numerically stable logistic function, clamped away from 0 and 1.
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

/// Inverse of [`sigmoid`] away from the clamp bounds.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Row-major float image, channel-last; values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_rgb(img: &crate::pnm::RgbImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            channels: 3,
            data: img.data.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Model prediction as per-pixel probabilities in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SoftMask {
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| p > threshold).collect(),
        }
    }
}

/// Where a segmentation token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Labeled,
    Unlabeled,
}

/// The embedding emitted for one segmentation request.
#[derive(Debug, Clone, PartialEq)]
pub struct SsegToken {
    pub vec: Vec<f64>,
    pub class_id: u8,
    pub source: TokenSource,
}

/// Dense row-major matrix; vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// `out[j] = sum_i x[i] * W[i, j]` (transposed application).
    pub fn apply_t(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    /// `out[i] = sum_j W[i, j] * g[j]` (forward application; the backward
    /// counterpart of [`Tensor::apply_t`]).
    pub fn apply(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(g).map(|(&w, &gj)| w * gj).sum();
        }
    }

    /// Rank-one accumulation `W[i, j] += x[i] * g[j]`.
    pub fn add_outer(&mut self, x: &[f64], g: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(g.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (w, &gj) in row.iter_mut().zip(g) {
                *w += xi * gj;
            }
        }
    }
}

/// Architecture hyperparameters. `patch_dim` is always
/// `patch * patch * (channels + 1)`: the anchor mask rides along as one
/// extra input channel (zeros when absent) so shapes never change between
/// stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub d_q: usize,
    pub hidden: usize,
    pub patch: usize,
    pub vocab_hash: usize,
    pub channels: usize,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * (self.channels + 1)
    }
}

/// Order in which parameter tensors are serialized into checkpoints.
pub const TENSOR_FIELDS: [&str; 9] = [
    "patch_proj",
    "query_embed",
    "query_proj",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
    "decode_bias",
    "response_head",
];

/// All learnable tensors; also reused as a gradient / moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub patch_proj: Tensor,
    pub query_embed: Tensor,
    pub query_proj: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub decode_bias: Tensor,
    pub response_head: Tensor,
}

impl ParamTensors {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            patch_proj: Tensor::zeros(dims.patch_dim(), dims.d),
            query_embed: Tensor::zeros(dims.vocab_hash, dims.d_q),
            query_proj: Tensor::zeros(dims.d_q + 4, dims.d),
            mlp_w1: Tensor::zeros(2 * dims.d, dims.hidden),
            mlp_b1: Tensor::zeros(dims.hidden, 1),
            mlp_w2: Tensor::zeros(dims.hidden, dims.d),
            mlp_b2: Tensor::zeros(dims.d, 1),
            decode_bias: Tensor::zeros(1, 1),
            response_head: Tensor::zeros(dims.d, dims.n_classes),
        }
    }

    pub fn fields(&self) -> [&Tensor; 9] {
        [
            &self.patch_proj,
            &self.query_embed,
            &self.query_proj,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.decode_bias,
            &self.response_head,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.patch_proj,
            &mut self.query_embed,
            &mut self.query_proj,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.decode_bias,
            &mut self.response_head,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.fields().iter().map(|t| t.data.len()).sum()
    }

    /// `self += other * scale`, field by field.
    pub fn add_scaled(&mut self, other: &ParamTensors, scale: f64) {
        for (dst, src) in self.fields_mut().into_iter().zip(other.fields()) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d += s * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.fields_mut() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.fields()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0_f64, |m, &v| m.max(v.abs()))
    }
}

/// Learnable parameters plus the dims that shape them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub tensors: ParamTensors,
}

/// Shape/size summary reported by `describe`.
#[derive(Debug, Clone, Serialize)]
pub struct ModelDescription {
    pub dims: ModelDims,
    pub param_count: usize,
    pub tensor_shapes: Vec<(String, usize, usize)>,
}

impl ModelParams {
    /// Seeded init: weights uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`,
    /// biases zero.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut tensors = ParamTensors::zeros(&dims);
        let fill = |t: &mut Tensor, fan_in: usize, tag: u64| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(subseed(seed, 0x1417), tag));
            for v in &mut t.data {
                *v = rng.gen_range(-s..=s);
            }
        };
        fill(&mut tensors.patch_proj, dims.patch_dim(), 0);
        fill(&mut tensors.query_embed, dims.d_q, 1);
        fill(&mut tensors.query_proj, dims.d_q + 4, 2);
        fill(&mut tensors.mlp_w1, 2 * dims.d, 3);
        fill(&mut tensors.mlp_w2, dims.hidden, 4);
        fill(&mut tensors.response_head, dims.d, 5);
        Self { dims, tensors }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            tensors: ParamTensors::zeros(&dims),
        }
    }

    pub fn describe(&self) -> ModelDescription {
        ModelDescription {
            dims: self.dims,
            param_count: self.tensors.param_count(),
            tensor_shapes: TENSOR_FIELDS
                .iter()
                .zip(self.tensors.fields())
                .map(|(name, t)| (name.to_string(), t.rows, t.cols))
                .collect(),
        }
    }

    /// Fingerprint over dims and every parameter bit; ties traces to the
    /// exact parameters that produced them.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(64);
        bytes.extend_from_slice(&(self.dims.d as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.d_q as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.hidden as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.patch as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.vocab_hash as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.channels as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.n_classes as u64).to_le_bytes());
        let mut h = fnv1a(&bytes);
        for t in self.tensors.fields() {
            for &v in &t.data {
                h ^= fnv1a(&v.to_bits().to_le_bytes());
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Lowercase word tokens hashed into embedding buckets.
fn query_buckets(text: &str, vocab_hash: usize) -> Vec<usize> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a(w.as_bytes()) % vocab_hash as u64) as usize)
        .collect()
}

/// Bag-of-buckets query embedding concatenated with the (normalized)
/// anchor bbox, zeros when no anchor is given.
pub fn encode_query(
    params: &ModelParams,
    query_text: &str,
    anchor_bbox: Option<[f64; 4]>,
) -> Result<Vec<f64>, ModelError> {
    let buckets = query_buckets(query_text, params.dims.vocab_hash);
    if buckets.is_empty() {
        return Err(ModelError::EmptyQuery);
    }
    let d_q = params.dims.d_q;
    let mut enc = vec![0.0; d_q + 4];
    for &b in &buckets {
        for j in 0..d_q {
            enc[j] += params.tensors.query_embed.at(b, j);
        }
    }
    let inv = 1.0 / buckets.len() as f64;
    for v in enc[..d_q].iter_mut() {
        *v *= inv;
    }
    if let Some(bbox) = anchor_bbox {
        enc[d_q..].copy_from_slice(&bbox);
    }
    Ok(enc)
}

/// Everything the backward pass needs, cached from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub width: usize,
    pub height: usize,
    pub cells_x: usize,
    pub cells_y: usize,
    /// Flattened input patch per cell (with anchor channel).
    patches: Vec<Vec<f64>>,
    /// Per-cell feature vectors (tanh of the patch projection).
    pub feature_grid: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    query_enc: Vec<f64>,
    query_buckets: Vec<usize>,
    query_vec: Vec<f64>,
    hidden: Vec<f64>,
    /// The segmentation token vector.
    pub sseg: Vec<f64>,
    pub cell_logits: Vec<f64>,
    pub mask_logits: Vec<f64>,
    pub soft_mask: SoftMask,
    pub response_logits: Vec<f64>,
    params_fingerprint: u64,
}

impl ForwardTrace {
    pub fn token(&self, class_id: u8, source: TokenSource) -> SsegToken {
        SsegToken {
            vec: self.sseg.clone(),
            class_id,
            source,
        }
    }
}

fn tanh_vec(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.tanh();
    }
}

/// Full forward pass; see the module docs for the pipeline.
pub fn forward(
    params: &ModelParams,
    image: &Image,
    query_text: &str,
    anchor_mask: Option<&BinaryMask>,
    anchor_bbox: Option<[f64; 4]>,
) -> Result<ForwardTrace, ModelError> {
    let dims = &params.dims;
    let (w, h, p) = (image.width, image.height, dims.patch);
    if w % p != 0 || h % p != 0 {
        return Err(ModelError::Shape(format!(
            "image {w}x{h} not divisible by patch size {p}"
        )));
    }
    if image.channels != dims.channels {
        return Err(ModelError::Shape(format!(
            "image has {} channels, model expects {}",
            image.channels, dims.channels
        )));
    }
    if let Some(mask) = anchor_mask {
        if mask.width != w || mask.height != h {
            return Err(ModelError::Shape(format!(
                "anchor mask {}x{} does not match image {w}x{h}",
                mask.width, mask.height
            )));
        }
    }

    let (cells_x, cells_y) = (w / p, h / p);
    let n_cells = cells_x * cells_y;
    let in_ch = dims.channels + 1;
    let patch_dim = dims.patch_dim();

    // 1. patchify + project + tanh -> feature grid
    let mut patches = Vec::with_capacity(n_cells);
    let mut feature_grid = Vec::with_capacity(n_cells);
    let mut pooled = vec![0.0; dims.d];
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let mut patch = vec![0.0; patch_dim];
            let mut k = 0;
            for py in 0..p {
                for px in 0..p {
                    let (x, y) = (cx * p + px, cy * p + py);
                    for c in 0..dims.channels {
                        patch[k] = image.get(x, y, c);
                        k += 1;
                    }
                    patch[k] = match anchor_mask {
                        Some(m) if m.get(x, y) => 1.0,
                        _ => 0.0,
                    };
                    k += 1;
                }
            }
            debug_assert_eq!(k, p * p * in_ch);
            let mut feat = vec![0.0; dims.d];
            params.tensors.patch_proj.apply_t(&patch, &mut feat);
            tanh_vec(&mut feat);
            for (acc, &f) in pooled.iter_mut().zip(&feat) {
                *acc += f;
            }
            patches.push(patch);
            feature_grid.push(feat);
        }
    }
    for v in &mut pooled {
        *v /= n_cells as f64;
    }

    // 2. query -> token input
    let query_enc = encode_query(params, query_text, anchor_bbox)?;
    let buckets = query_buckets(query_text, dims.vocab_hash);
    let mut query_vec = vec![0.0; dims.d];
    params.tensors.query_proj.apply_t(&query_enc, &mut query_vec);
    tanh_vec(&mut query_vec);

    // 3. token MLP over [query ; pooled features]
    let mut z = Vec::with_capacity(2 * dims.d);
    z.extend_from_slice(&query_vec);
    z.extend_from_slice(&pooled);
    let mut hidden = vec![0.0; dims.hidden];
    params.tensors.mlp_w1.apply_t(&z, &mut hidden);
    for (v, b) in hidden.iter_mut().zip(&params.tensors.mlp_b1.data) {
        *v += b;
    }
    tanh_vec(&mut hidden);
    let mut sseg = vec![0.0; dims.d];
    params.tensors.mlp_w2.apply_t(&hidden, &mut sseg);
    for (v, b) in sseg.iter_mut().zip(&params.tensors.mlp_b2.data) {
        *v += b;
    }
    tanh_vec(&mut sseg);

    // 4. decode: per-cell dot with the token, nearest-upsample, sigmoid
    let bias = params.tensors.decode_bias.data[0];
    let cell_logits: Vec<f64> = feature_grid
        .iter()
        .map(|f| f.iter().zip(&sseg).map(|(&a, &b)| a * b).sum::<f64>() + bias)
        .collect();
    let mut mask_logits = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            mask_logits[y * w + x] = cell_logits[(y / p) * cells_x + (x / p)];
        }
    }
    let soft_mask = SoftMask {
        width: w,
        height: h,
        data: mask_logits.iter().map(|&z| sigmoid(z)).collect(),
    };

    // 5. response head
    let mut response_logits = vec![0.0; dims.n_classes];
    params
        .tensors
        .response_head
        .apply_t(&sseg, &mut response_logits);

    Ok(ForwardTrace {
        width: w,
        height: h,
        cells_x,
        cells_y,
        patches,
        feature_grid,
        pooled,
        query_enc,
        query_buckets: buckets,
        query_vec,
        hidden,
        sseg,
        cell_logits,
        mask_logits,
        soft_mask,
        response_logits,
        params_fingerprint: params.fingerprint(),
    })
}

/// Exact analytic gradients for every parameter tensor, given upstream
/// gradients with respect to the mask logits, the response logits, and the
/// token itself (`d_sseg_external` carries the contrastive-loss gradient).
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_mask_logits: &[f64],
    d_response_logits: &[f64],
    d_sseg_external: &[f64],
) -> Result<ParamTensors, ModelError> {
    let dims = &params.dims;
    if trace.params_fingerprint != params.fingerprint() {
        return Err(ModelError::TraceMismatch);
    }
    if d_mask_logits.len() != trace.width * trace.height {
        return Err(ModelError::Shape(format!(
            "d_mask_logits has {} entries, expected {}",
            d_mask_logits.len(),
            trace.width * trace.height
        )));
    }
    if d_response_logits.len() != dims.n_classes {
        return Err(ModelError::Shape(format!(
            "d_response_logits has {} entries, expected {}",
            d_response_logits.len(),
            dims.n_classes
        )));
    }
    if d_sseg_external.len() != dims.d {
        return Err(ModelError::Shape(format!(
            "d_sseg_external has {} entries, expected {}",
            d_sseg_external.len(),
            dims.d
        )));
    }

    let mut grads = ParamTensors::zeros(dims);
    let (w, p) = (trace.width, dims.patch);
    let n_cells = trace.cells_x * trace.cells_y;

    // upsampled mask logits -> per-cell logits
    let mut d_cell = vec![0.0; n_cells];
    for y in 0..trace.height {
        for x in 0..w {
            d_cell[(y / p) * trace.cells_x + (x / p)] += d_mask_logits[y * w + x];
        }
    }

    // decode: cell_logit = feat . sseg + bias
    let mut d_sseg = d_sseg_external.to_vec();
    let mut d_feature: Vec<Vec<f64>> = vec![vec![0.0; dims.d]; n_cells];
    for (ci, &dc) in d_cell.iter().enumerate() {
        grads.decode_bias.data[0] += dc;
        if dc != 0.0 {
            for j in 0..dims.d {
                d_sseg[j] += dc * trace.feature_grid[ci][j];
                d_feature[ci][j] += dc * trace.sseg[j];
            }
        }
    }

    // response head: logits = head^T sseg
    grads
        .response_head
        .add_outer(&trace.sseg, d_response_logits);
    let mut head_back = vec![0.0; dims.d];
    params
        .tensors
        .response_head
        .apply(d_response_logits, &mut head_back);
    for (a, b) in d_sseg.iter_mut().zip(&head_back) {
        *a += b;
    }

    // token MLP backward
    let d_u2: Vec<f64> = d_sseg
        .iter()
        .zip(&trace.sseg)
        .map(|(&g, &s)| g * (1.0 - s * s))
        .collect();
    grads.mlp_w2.add_outer(&trace.hidden, &d_u2);
    for (b, &g) in grads.mlp_b2.data.iter_mut().zip(&d_u2) {
        *b += g;
    }
    let mut d_hidden = vec![0.0; dims.hidden];
    params.tensors.mlp_w2.apply(&d_u2, &mut d_hidden);
    let d_u1: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.hidden)
        .map(|(&g, &h)| g * (1.0 - h * h))
        .collect();
    let mut z = Vec::with_capacity(2 * dims.d);
    z.extend_from_slice(&trace.query_vec);
    z.extend_from_slice(&trace.pooled);
    grads.mlp_w1.add_outer(&z, &d_u1);
    for (b, &g) in grads.mlp_b1.data.iter_mut().zip(&d_u1) {
        *b += g;
    }
    let mut d_z = vec![0.0; 2 * dims.d];
    params.tensors.mlp_w1.apply(&d_u1, &mut d_z);
    let (d_query_vec, d_pooled_from_mlp) = d_z.split_at(dims.d);

    // pooled features: mean over cells
    let inv_cells = 1.0 / n_cells as f64;
    for feat in d_feature.iter_mut() {
        for (f, &g) in feat.iter_mut().zip(d_pooled_from_mlp) {
            *f += g * inv_cells;
        }
    }

    // query projection backward
    let d_uq: Vec<f64> = d_query_vec
        .iter()
        .zip(&trace.query_vec)
        .map(|(&g, &q)| g * (1.0 - q * q))
        .collect();
    grads.query_proj.add_outer(&trace.query_enc, &d_uq);
    let mut d_enc = vec![0.0; dims.d_q + 4];
    params.tensors.query_proj.apply(&d_uq, &mut d_enc);

    // bag-of-buckets mean: each token occurrence shares d_enc / n_tokens
    let inv_tokens = 1.0 / trace.query_buckets.len() as f64;
    for &b in &trace.query_buckets {
        for j in 0..dims.d_q {
            *grads.query_embed.at_mut(b, j) += d_enc[j] * inv_tokens;
        }
    }

    // patch projection backward
    for (ci, patch) in trace.patches.iter().enumerate() {
        let feat = &trace.feature_grid[ci];
        let d_up: Vec<f64> = d_feature[ci]
            .iter()
            .zip(feat)
            .map(|(&g, &f)| g * (1.0 - f * f))
            .collect();
        if d_up.iter().any(|&v| v != 0.0) {
            grads.patch_proj.add_outer(patch, &d_up);
        }
    }

    Ok(grads)
}

/// Metadata carried in the checkpoint header alongside the dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub stage: u32,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: ModelDims,
    seed: u64,
    stage: u32,
    iteration: u64,
}

/// Serialize params: magic, version (u32 LE), header length (u32 LE),
/// JSON header, then every tensor from [`TENSOR_FIELDS`] as f32 LE.
pub fn save_checkpoint(
    params: &ModelParams,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        dims: params.dims,
        seed: meta.seed,
        stage: meta.stage,
        iteration: meta.iteration,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for t in params.tensors.fields() {
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta), ModelError> {
    let bad = |reason: String| ModelError::BadCheckpoint {
        path: path.display().to_string(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing CORA magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| bad(format!("malformed header: {e}")))?;

    let mut params = ModelParams::zeros(header.dims);
    let expected: usize = params.tensors.param_count() * 4;
    let payload = &bytes[12 + header_len..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes but header dims require {expected}",
            payload.len()
        )));
    }
    let mut off = 0;
    for t in params.tensors.fields_mut() {
        for v in &mut t.data {
            *v = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
        }
    }
    Ok((
        params,
        CheckpointMeta {
            seed: header.seed,
            stage: header.stage,
            iteration: header.iteration,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_dims() -> ModelDims {
        ModelDims {
            d: 8,
            d_q: 6,
            hidden: 10,
            patch: 4,
            vocab_hash: 32,
            channels: 3,
            n_classes: 4,
        }
    }

    pub(crate) fn random_image(dims: &ModelDims, w: usize, h: usize, seed: u64) -> Image {
        let mut rng = crate::rng::rng_for(seed, 0x11a6);
        let mut img = Image::zeros(w, h, dims.channels);
        for v in &mut img.data {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn repeated_token_equals_single_token() {
        let params = ModelParams::init(small_dims(), 3);
        let a = encode_query(&params, "a a", None).unwrap();
        let b = encode_query(&params, "a", None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn word_order_does_not_matter() {
        let params = ModelParams::init(small_dims(), 3);
        let a = encode_query(&params, "segment the circle", None).unwrap();
        let b = encode_query(&params, "circle the segment", None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_bbox_encodes_zeros() {
        let params = ModelParams::init(small_dims(), 3);
        let enc = encode_query(&params, "circle", None).unwrap();
        assert_eq!(&enc[6..], &[0.0; 4]);
        let enc2 = encode_query(&params, "circle", Some([0.1, 0.2, 0.3, 0.4])).unwrap();
        assert_eq!(&enc2[6..], &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn empty_query_is_rejected() {
        let params = ModelParams::init(small_dims(), 3);
        assert!(matches!(
            encode_query(&params, " .,! ", None),
            Err(ModelError::EmptyQuery)
        ));
    }

    #[test]
    fn zero_params_give_half_probability() {
        let dims = small_dims();
        let params = ModelParams::zeros(dims);
        let img = random_image(&dims, 16, 16, 5);
        let trace = forward(&params, &img, "segment the circle", None, None).unwrap();
        for &p in &trace.soft_mask.data {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn decode_bias_shifts_every_logit() {
        let dims = small_dims();
        let mut params = ModelParams::init(dims, 9);
        let img = random_image(&dims, 16, 16, 6);
        let base = forward(&params, &img, "find the square", None, None).unwrap();
        let delta = 0.37;
        params.tensors.decode_bias.data[0] += delta;
        let shifted = forward(&params, &img, "find the square", None, None).unwrap();
        for (a, b) in base.mask_logits.iter().zip(&shifted.mask_logits) {
            assert!((b - a - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 42);
        let img = random_image(&dims, 16, 16, 7);
        let a = forward(&params, &img, "segment the striped thing", None, None).unwrap();
        let b = forward(&params, &img, "segment the striped thing", None, None).unwrap();
        assert_eq!(a.mask_logits, b.mask_logits);
        assert_eq!(a.response_logits, b.response_logits);
        assert!(a.mask_logits.iter().all(|v| v.is_finite()));
        assert!(a.sseg.iter().all(|v| v.is_finite()));
        assert!(a.soft_mask.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 1);
        let img = Image::zeros(15, 16, dims.channels);
        assert!(matches!(
            forward(&params, &img, "q", None, None),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 4);
        let img = random_image(&dims, 16, 16, 8);
        let trace = forward(&params, &img, "the round one", None, None).unwrap();
        let grads = backward(
            &params,
            &trace,
            &vec![0.0; 256],
            &vec![0.0; dims.n_classes],
            &vec![0.0; dims.d],
        )
        .unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 4);
        let img = random_image(&dims, 16, 16, 8);
        let trace = forward(&params, &img, "the round one", None, None).unwrap();
        let mut rng = crate::rng::rng_for(31, 0);
        let dm: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dr: Vec<f64> = (0..dims.n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ds: Vec<f64> = (0..dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g1 = backward(&params, &trace, &dm, &dr, &ds).unwrap();
        let dm2: Vec<f64> = dm.iter().map(|v| v * 2.0).collect();
        let dr2: Vec<f64> = dr.iter().map(|v| v * 2.0).collect();
        let ds2: Vec<f64> = ds.iter().map(|v| v * 2.0).collect();
        let g2 = backward(&params, &trace, &dm2, &dr2, &ds2).unwrap();
        for (t1, t2) in g1.fields().iter().zip(g2.fields().iter()) {
            for (&a, &b) in t1.data.iter().zip(&t2.data) {
                assert!((b - 2.0 * a).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let dims = small_dims();
        let mut params = ModelParams::init(dims, 4);
        let img = random_image(&dims, 16, 16, 8);
        let trace = forward(&params, &img, "the round one", None, None).unwrap();
        params.tensors.decode_bias.data[0] += 1.0;
        assert!(matches!(
            backward(
                &params,
                &trace,
                &vec![0.0; 256],
                &vec![0.0; dims.n_classes],
                &vec![0.0; dims.d]
            ),
            Err(ModelError::TraceMismatch)
        ));
    }

    /// Finite-difference check of the full backward pass through a fixed
    /// random linear functional of (mask logits, response logits, token).
    #[test]
    fn gradients_match_finite_differences() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 12);
        let img = random_image(&dims, 16, 16, 13);
        let mut rng = crate::rng::rng_for(14, 0);
        let a: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dims.n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let query = "segment the checkered patch";

        let value = |p: &ModelParams| -> f64 {
            let t = forward(p, &img, query, None, None).unwrap();
            let s1: f64 = t.mask_logits.iter().zip(&a).map(|(&x, &w)| x * w).sum();
            let s2: f64 = t.response_logits.iter().zip(&b).map(|(&x, &w)| x * w).sum();
            let s3: f64 = t.sseg.iter().zip(&c).map(|(&x, &w)| x * w).sum();
            s1 + s2 + s3
        };

        let trace = forward(&params, &img, query, None, None).unwrap();
        let analytic = backward(&params, &trace, &a, &b, &c).unwrap();

        let eps = 1e-3;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut probe = params.clone();
        for f in 0..9 {
            for i in 0..probe.tensors.fields()[f].data.len() {
                let orig = probe.tensors.fields()[f].data[i];
                probe.tensors.fields_mut()[f].data[i] = orig + eps;
                let up = value(&probe);
                probe.tensors.fields_mut()[f].data[i] = orig - eps;
                let down = value(&probe);
                probe.tensors.fields_mut()[f].data[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic.fields()[f].data[i];
                num += (fd - an) * (fd - an);
                den += an * an;
            }
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-4, "relative FD error {rel}");
    }

    #[test]
    fn param_count_is_function_of_dims() {
        let dims = small_dims();
        let a = ModelParams::init(dims, 1).describe();
        let b = ModelParams::init(dims, 999).describe();
        assert_eq!(a.param_count, b.param_count);
        // patch_proj 64*8 + query_embed 32*6 + query_proj 10*8 + w1 16*10
        // + b1 10 + w2 10*8 + b2 8 + bias 1 + head 8*4
        let expected = 64 * 8 + 32 * 6 + 10 * 8 + 16 * 10 + 10 + 10 * 8 + 8 + 1 + 8 * 4;
        assert_eq!(a.param_count, expected);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_stable() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 77);
        let meta = CheckpointMeta {
            seed: 77,
            stage: 2,
            iteration: 123,
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_checkpoint(&params, &meta, &p1).unwrap();
        let (loaded, meta2) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta, meta2);
        save_checkpoint(&loaded, &meta2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatched_dims_header_is_rejected() {
        let dims = small_dims();
        let params = ModelParams::init(dims, 7);
        let meta = CheckpointMeta {
            seed: 7,
            stage: 1,
            iteration: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&params, &meta, &path).unwrap();

        // swap the header for one claiming a different width
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_text = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let hacked = header_text.replace("\"d\":8", "\"d\":16");
        assert_ne!(header_text, hacked);
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..8]);
        out.extend_from_slice(&(hacked.len() as u32).to_le_bytes());
        out.extend_from_slice(hacked.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        std::fs::write(&path, out).unwrap();

        match load_checkpoint(&path) {
            Err(ModelError::BadCheckpoint { reason, .. }) => {
                assert!(reason.contains("payload"), "reason: {reason}")
            }
            other => panic!("expected BadCheckpoint, got {other:?}"),
        }
    }

    #[test]
    fn sigmoid_logit_round_trip() {
        for &x in &[-8.0, -3.4, -0.5, 0.0, 0.2, 4.9, 7.5] {
            assert!((logit(sigmoid(x)) - x).abs() < 1e-12, "x = {x}");
        }
    }
}
