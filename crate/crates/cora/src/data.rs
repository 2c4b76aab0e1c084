//! Synthetic "shapes-world" dataset: seeded images of textured geometric
//! shapes with pixel-exact label maps, plus labeled/unlabeled split
//! manifests.
//!
//! Class identity is carried by texture (solid fill, checkerboard,
//! horizontal stripes, vertical stripes) while color and intensity vary
//! per instance, so queries must be grounded in local appearance rather
//! than a trivial color cue.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instructgen::{ClassLexicon, InstructError, LexiconEntry};
use crate::maskgeo::{BinaryMask, LabelMap, VOID};
use crate::model::Image;
use crate::pnm;
use crate::rng::subseed;

pub const CLASS_CIRCLE: u8 = 1;
pub const CLASS_SQUARE: u8 = 2;
pub const CLASS_TRIANGLE: u8 = 3;
pub const CLASS_BAR: u8 = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {message}")]
    Json { path: String, message: String },
    #[error(transparent)]
    Pnm(#[from] pnm::PnmError),
    #[error(transparent)]
    Lexicon(#[from] InstructError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Built-in lexicon for the four shape classes; names and seven
/// descriptive phrases each, phrases globally distinct and never naming
/// the class itself.
pub fn default_lexicon(classes: &[u8]) -> Result<ClassLexicon, DataError> {
    let full: &[(u8, &str, [&str; 7])] = &[
        (
            CLASS_CIRCLE,
            "circle",
            [
                "round object with no corners",
                "smooth curved disc",
                "perfectly round filled shape",
                "shape with constant curvature",
                "solid disc with a curved outline",
                "curved figure without any edges",
                "round blob with a smooth rim",
            ],
        ),
        (
            CLASS_SQUARE,
            "square",
            [
                "boxy shape with four equal sides",
                "checkered four cornered patch",
                "quadrilateral with right angles",
                "block as wide as it is tall",
                "four sided figure with a checker texture",
                "box shaped region with sharp corners",
                "equal sided block with a checkered fill",
            ],
        ),
        (
            CLASS_TRIANGLE,
            "triangle",
            [
                "three cornered shape",
                "figure with three straight sides",
                "striped shape with a pointed top",
                "wedge with three corners",
                "pointed shape that widens toward its base",
                "three sided figure with horizontal stripes",
                "wedge shaped region with a sharp apex",
            ],
        ),
        (
            CLASS_BAR,
            "bar",
            [
                "long narrow rectangle",
                "elongated strip",
                "thin stretched block",
                "narrow band much longer than it is wide",
                "slender rectangular stick",
                "stripe shaped slab",
                "long thin plank shape",
            ],
        ),
    ];
    let mut entries = std::collections::BTreeMap::new();
    for &(class, name, ref attrs) in full {
        if classes.contains(&class) {
            entries.insert(
                class,
                LexiconEntry {
                    name: name.to_string(),
                    attributes: attrs.iter().map(|s| s.to_string()).collect(),
                },
            );
        }
    }
    if entries.len() != classes.len() {
        return Err(DataError::ConfigError(format!(
            "unknown class ids in {classes:?}; known: 1=circle 2=square 3=triangle 4=bar"
        )));
    }
    Ok(ClassLexicon::new(entries, 7)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesWorldConfig {
    pub width: usize,
    pub height: usize,
    pub n_images: usize,
    pub classes: Vec<u8>,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Image dims must divide by this (the model patch size).
    pub patch_multiple: usize,
    pub seed: u64,
}

impl Default for ShapesWorldConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            n_images: 64,
            classes: vec![CLASS_CIRCLE, CLASS_SQUARE, CLASS_TRIANGLE, CLASS_BAR],
            objects_min: 2,
            objects_max: 4,
            patch_multiple: 4,
            seed: 0,
        }
    }
}

impl ShapesWorldConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.patch_multiple == 0
            || self.width % self.patch_multiple != 0
            || self.height % self.patch_multiple != 0
        {
            return Err(DataError::ConfigError(format!(
                "dims {}x{} must divide by the patch multiple {}",
                self.width, self.height, self.patch_multiple
            )));
        }
        if self.width < 24 || self.height < 24 {
            return Err(DataError::ConfigError(
                "images must be at least 24x24 to fit shapes".into(),
            ));
        }
        if self.classes.is_empty() || self.classes.len() < 2 {
            return Err(DataError::ConfigError(
                "need at least 2 classes for conditional instructions".into(),
            ));
        }
        if self.objects_min < 1 || self.objects_max < self.objects_min {
            return Err(DataError::ConfigError(format!(
                "bad object count range {}..{}",
                self.objects_min, self.objects_max
            )));
        }
        Ok(())
    }
}

/// Analytic region of one placed shape.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum ShapeSpec {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Square {
        cx: i64,
        cy: i64,
        half: i64,
    },
    /// Apex on top, widening downward.
    Triangle {
        apex_x: i64,
        apex_y: i64,
        height: i64,
        half_base: i64,
    },
    Bar {
        x0: i64,
        y0: i64,
        w: i64,
        h: i64,
    },
}

impl ShapeSpec {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (xf, yf) = (x as f64, y as f64);
        let (xi, yi) = (x as i64, y as i64);
        match *self {
            ShapeSpec::Circle { cx, cy, r } => {
                (xf - cx) * (xf - cx) + (yf - cy) * (yf - cy) <= r * r
            }
            ShapeSpec::Square { cx, cy, half } => {
                (xi - cx).abs() <= half && (yi - cy).abs() <= half
            }
            ShapeSpec::Triangle {
                apex_x,
                apex_y,
                height,
                half_base,
            } => {
                if yi < apex_y || yi > apex_y + height {
                    return false;
                }
                let t = (yi - apex_y) as f64 / height as f64;
                (xi - apex_x).abs() as f64 <= t * half_base as f64
            }
            ShapeSpec::Bar { x0, y0, w, h } => {
                xi >= x0 && xi < x0 + w && yi >= y0 && yi < y0 + h
            }
        }
    }

    fn bbox_hint(&self) -> (i64, i64, i64, i64) {
        match *self {
            ShapeSpec::Circle { cx, cy, r } => (
                (cx - r).floor() as i64,
                (cy - r).floor() as i64,
                (cx + r).ceil() as i64,
                (cy + r).ceil() as i64,
            ),
            ShapeSpec::Square { cx, cy, half } => (cx - half, cy - half, cx + half, cy + half),
            ShapeSpec::Triangle {
                apex_x,
                apex_y,
                height,
                half_base,
            } => (
                apex_x - half_base,
                apex_y,
                apex_x + half_base,
                apex_y + height,
            ),
            ShapeSpec::Bar { x0, y0, w, h } => (x0, y0, x0 + w - 1, y0 + h - 1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacedShape {
    pub class_id: u8,
    pub spec: ShapeSpec,
}

/// One rendered sample: pixels, exact labels, and the shape records the
/// pixels were rasterized from.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: pnm::RgbImage,
    pub labels: LabelMap,
    pub shapes: Vec<PlacedShape>,
}

fn rasterize(spec: &ShapeSpec, width: usize, height: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height);
    let (x0, y0, x1, y1) = spec.bbox_hint();
    for y in y0.max(0)..=y1.min(height as i64 - 1) {
        for x in x0.max(0)..=x1.min(width as i64 - 1) {
            if spec.contains(x as usize, y as usize) {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
    mask
}

/// True when `mask` (dilated by one pixel, 8-connected) stays clear of
/// `occupied`; keeps placed shapes from touching so components stay apart.
fn separated(mask: &BinaryMask, occupied: &BinaryMask) -> bool {
    let (w, h) = (mask.width, mask.height);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0
                        && ny >= 0
                        && (nx as usize) < w
                        && (ny as usize) < h
                        && occupied.get(nx as usize, ny as usize)
                    {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Per-class texture multiplier at a pixel; `phase` shifts the pattern
/// per instance.
fn texture_at(class_id: u8, x: usize, y: usize, phase: usize) -> f64 {
    match class_id {
        CLASS_CIRCLE => 1.0,
        CLASS_SQUARE => {
            if (x / 2 + y / 2 + phase) % 2 == 0 {
                1.0
            } else {
                0.45
            }
        }
        CLASS_TRIANGLE => {
            if (y + phase) % 4 < 2 {
                1.0
            } else {
                0.45
            }
        }
        CLASS_BAR => {
            if (x + phase) % 4 < 2 {
                1.0
            } else {
                0.45
            }
        }
        _ => 1.0,
    }
}

/// Render image `index` of the dataset; pure function of (cfg, index).
pub fn render_image(cfg: &ShapesWorldConfig, index: usize) -> RenderedImage {
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(subseed(cfg.seed, 0xda7a), index as u64));

    // background: dark with per-pixel noise
    let mut pixels = vec![0u8; w * h * 3];
    for i in 0..w * h {
        let base = [28u8, 30, 36];
        for c in 0..3 {
            pixels[i * 3 + c] = base[c] + rng.gen_range(0..18);
        }
    }

    let mut labels = LabelMap::filled(w, h, VOID);
    let mut occupied = BinaryMask::empty(w, h);
    let mut shapes = Vec::new();
    let n_objects = rng.gen_range(cfg.objects_min..=cfg.objects_max);

    for _ in 0..n_objects {
        let mut placed = false;
        for _attempt in 0..40 {
            let class_id = cfg.classes[rng.gen_range(0..cfg.classes.len())];
            let spec = match class_id {
                CLASS_CIRCLE => {
                    let r = rng.gen_range(3..=6) as f64;
                    let ri = r.ceil() as usize + 1;
                    if w <= 2 * ri || h <= 2 * ri {
                        continue;
                    }
                    ShapeSpec::Circle {
                        cx: rng.gen_range(ri..w - ri) as f64,
                        cy: rng.gen_range(ri..h - ri) as f64,
                        r,
                    }
                }
                CLASS_SQUARE => {
                    let half = rng.gen_range(3..=5);
                    let m = half as usize + 1;
                    if w <= 2 * m || h <= 2 * m {
                        continue;
                    }
                    ShapeSpec::Square {
                        cx: rng.gen_range(m..w - m) as i64,
                        cy: rng.gen_range(m..h - m) as i64,
                        half,
                    }
                }
                CLASS_TRIANGLE => {
                    let height = rng.gen_range(7..=11);
                    let half_base = rng.gen_range(4..=6);
                    let (mh, mb) = (height as usize, half_base as usize + 1);
                    if w <= 2 * mb || h <= mh + 2 {
                        continue;
                    }
                    ShapeSpec::Triangle {
                        apex_x: rng.gen_range(mb..w - mb) as i64,
                        apex_y: rng.gen_range(1..h - mh - 1) as i64,
                        height,
                        half_base,
                    }
                }
                CLASS_BAR => {
                    let long = rng.gen_range(10..=16);
                    let thick = rng.gen_range(3..=4);
                    let horizontal = rng.gen_range(0..2) == 0;
                    let (bw, bh) = if horizontal {
                        (long, thick)
                    } else {
                        (thick, long)
                    };
                    if w <= bw as usize + 2 || h <= bh as usize + 2 {
                        continue;
                    }
                    ShapeSpec::Bar {
                        x0: rng.gen_range(1..w - bw as usize - 1) as i64,
                        y0: rng.gen_range(1..h - bh as usize - 1) as i64,
                        w: bw,
                        h: bh,
                    }
                }
                _ => unreachable!("validated classes"),
            };
            let mask = rasterize(&spec, w, h);
            if mask.area() < 4 || !separated(&mask, &occupied) {
                continue;
            }

            // paint: per-instance color, texture, small per-pixel jitter
            let color = [
                rng.gen_range(90..=230) as i64,
                rng.gen_range(90..=230) as i64,
                rng.gen_range(90..=230) as i64,
            ];
            let phase = rng.gen_range(0..4);
            for y in 0..h {
                for x in 0..w {
                    if !mask.get(x, y) {
                        continue;
                    }
                    let tex = texture_at(class_id, x, y, phase);
                    let jitter = rng.gen_range(-10..=10);
                    for c in 0..3 {
                        let v = (color[c] as f64 * tex) as i64 + jitter;
                        pixels[(y * w + x) * 3 + c] = v.clamp(0, 255) as u8;
                    }
                    labels.set(x, y, class_id);
                    occupied.set(x, y, true);
                }
            }
            shapes.push(PlacedShape { class_id, spec });
            placed = true;
            break;
        }
        let _ = placed; // best effort: crowded canvases may hold fewer objects
    }

    RenderedImage {
        image: pnm::RgbImage {
            width: w,
            height: h,
            data: pixels,
        },
        labels,
        shapes,
    }
}

/// Dataset-level record written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: ShapesWorldConfig,
    pub image_files: Vec<String>,
    pub label_files: Vec<String>,
}

pub fn image_stem(index: usize) -> String {
    format!("{index:06}")
}

/// Render the whole dataset to `images/NNNNNN.ppm` + `labels/NNNNNN.pgm`,
/// with `manifest.json` and `lexicon.json` at the root. Byte-identical
/// across runs with an equal config.
pub fn generate_shapes_world(
    cfg: &ShapesWorldConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    fs::create_dir_all(&labels_dir).map_err(|e| io_err(&labels_dir, e))?;

    let mut image_files = Vec::with_capacity(cfg.n_images);
    let mut label_files = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let rendered = render_image(cfg, i);
        let stem = image_stem(i);
        let image_rel = format!("images/{stem}.ppm");
        let label_rel = format!("labels/{stem}.pgm");
        pnm::write_ppm(
            &out_dir.join(&image_rel),
            cfg.width,
            cfg.height,
            &rendered.image.data,
        )?;
        rendered.labels.write_pgm(&out_dir.join(&label_rel))?;
        image_files.push(image_rel);
        label_files.push(label_rel);
    }

    default_lexicon(&cfg.classes)?.save(&out_dir.join("lexicon.json"))?;
    let manifest = DatasetManifest {
        config: cfg.clone(),
        image_files,
        label_files,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

/// Labeled/unlabeled partition of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// Seeded shuffle then prefix split at `round(ratio * n)`.
pub fn make_split(
    image_files: &[String],
    ratio: f64,
    seed: u64,
) -> Result<SplitManifest, DataError> {
    if image_files.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(DataError::ConfigError(format!(
            "split ratio {ratio} not in (0, 1]"
        )));
    }
    let mut refs: Vec<String> = image_files.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x5b17));
    use rand::seq::SliceRandom;
    refs.shuffle(&mut rng);
    let n_labeled = ((ratio * refs.len() as f64).round() as usize).clamp(1, refs.len());
    let unlabeled = refs.split_off(n_labeled);
    Ok(SplitManifest {
        labeled: refs,
        unlabeled,
        ratio,
        seed,
    })
}

/// Per-kind instruction counts produced by [`generate_instruction_files`].
#[derive(Debug, Clone, Serialize)]
pub struct InstructionGenSummary {
    pub semantic: usize,
    pub attribute: usize,
    pub conditional: usize,
}

/// Generate all three instruction sets for the given image refs, persist
/// their masks, and write the four standard JSONL files under `out_dir`.
/// Images without enough objects simply contribute no conditional
/// instructions. Deterministic per (refs, seed).
pub fn generate_instruction_files(
    dataset: &LoadedDataset,
    image_refs: &[String],
    pairs_per_image: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<InstructionGenSummary, DataError> {
    use crate::instructgen::{
        gen_attribute, gen_conditional, gen_semantic, persist_instructions, write_instructions,
        GeneratedInstruction, ALL_FILE, ATTRIBUTE_FILE, CONDITIONAL_FILE, SEMANTIC_FILE,
    };
    use crate::rng::{fnv1a, subseed};

    let mut semantic: Vec<GeneratedInstruction> = Vec::new();
    let mut attribute: Vec<GeneratedInstruction> = Vec::new();
    let mut conditional: Vec<GeneratedInstruction> = Vec::new();
    for image_ref in image_refs {
        let stem = LoadedDataset::stem_of(image_ref);
        let labels = dataset.load_labels_for(image_ref)?;
        let image_seed = subseed(seed, fnv1a(stem.as_bytes()));
        semantic.extend(gen_semantic(
            &labels,
            &dataset.lexicon,
            stem,
            image_ref,
            image_seed,
        )?);
        attribute.extend(gen_attribute(
            &labels,
            &dataset.lexicon,
            stem,
            image_ref,
            image_seed,
        )?);
        match gen_conditional(
            &labels,
            &dataset.lexicon,
            stem,
            image_ref,
            image_seed,
            pairs_per_image,
        ) {
            Ok(instrs) => conditional.extend(instrs),
            Err(InstructError::InsufficientObjects { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }

    let sem = persist_instructions(&semantic, out_dir, SEMANTIC_FILE)?;
    let att = persist_instructions(&attribute, out_dir, ATTRIBUTE_FILE)?;
    let con = persist_instructions(&conditional, out_dir, CONDITIONAL_FILE)?;
    let mut all = sem;
    all.extend(att);
    all.extend(con);
    write_instructions(&all, &out_dir.join(ALL_FILE))?;
    Ok(InstructionGenSummary {
        semantic: semantic.len(),
        attribute: attribute.len(),
        conditional: conditional.len(),
    })
}

/// A dataset directory opened for reading.
#[derive(Debug)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub lexicon: ClassLexicon,
}

impl LoadedDataset {
    pub fn open(dir: &Path) -> Result<Self, DataError> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Json {
                path: manifest_path.display().to_string(),
                message: e.to_string(),
            })?;
        let lexicon = ClassLexicon::load(&dir.join("lexicon.json"), 7)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            lexicon,
        })
    }

    /// Image stem ("000042") of a relative ref ("images/000042.ppm").
    pub fn stem_of(image_ref: &str) -> &str {
        Path::new(image_ref)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(image_ref)
    }

    pub fn load_image(&self, image_ref: &str) -> Result<Image, DataError> {
        let rgb = pnm::read_ppm(&self.dir.join(image_ref))?;
        Ok(Image::from_rgb(&rgb))
    }

    pub fn load_labels_for(&self, image_ref: &str) -> Result<LabelMap, DataError> {
        let stem = Self::stem_of(image_ref);
        Ok(LabelMap::read_pgm(
            &self.dir.join("labels").join(format!("{stem}.pgm")),
        )?)
    }
}
