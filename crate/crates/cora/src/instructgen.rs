//! Instruction synthesis from labeled masks.
//!
//! Three instruction sets are generated per labeled image with a
//! deterministic template engine over a class lexicon:
//!
//! - semantic: "segment the <class name>"
//! - attribute: the class is named only by a descriptive phrase
//! - conditional: the target is grounded by its spatial relation to an
//!   anchor object
//!
//! A per-class query database of K paraphrases backs the consistency
//! weighting on unlabeled images.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgeo::{
    extract_instances, relation_of, BinaryMask, LabelMap, SpatialRelation, DEFAULT_MIN_AREA,
    DEFAULT_NEXT_TO_DIST,
};
use crate::rng::subseed;

/// Placeholder that marks where the mask token sits in an answer.
pub const SSEG_PLACEHOLDER: &str = "<SSEG>";

/// Standard instruction file names inside an instruction directory.
pub const SEMANTIC_FILE: &str = "instructions_semantic.jsonl";
pub const ATTRIBUTE_FILE: &str = "instructions_attribute.jsonl";
pub const CONDITIONAL_FILE: &str = "instructions_conditional.jsonl";
/// All three sets concatenated, handy as an evaluation set.
pub const ALL_FILE: &str = "instructions_all.jsonl";

pub const SEMANTIC_TEMPLATES: &[&str] = &[
    "Segment the {name} in this image.",
    "Can you segment the {name}?",
    "Please produce a mask for the {name}.",
    "Find and segment every {name} in the scene.",
    "Highlight all pixels that belong to the {name}.",
    "Where is the {name}? Please segment it.",
];

pub const ATTRIBUTE_TEMPLATES: &[&str] = &[
    "Segment the {attr} in this image.",
    "Can you segment the {attr}?",
    "Please produce a mask for the {attr}.",
    "Find and segment the {attr}.",
    "Highlight all pixels that belong to the {attr}.",
    "Where is the {attr}? Please segment it.",
];

pub const CONDITIONAL_TEMPLATE: &str =
    "Can you segment the {target} that is {relation} the {anchor}?";

pub const ANSWER_TEMPLATE: &str = "Sure, it is the {name}: <SSEG>.";

#[derive(Debug, Error)]
pub enum InstructError {
    #[error("class {0} is not in the lexicon")]
    UnknownClass(u8),
    #[error("lexicon construction error: {0}")]
    ConstructionError(String),
    #[error("conditional instructions need at least 2 instances, found {found}")]
    InsufficientObjects { found: usize },
    #[error("class {class}: only {available} distinct queries available, needed {needed}")]
    InsufficientAttributes {
        class: u8,
        available: usize,
        needed: usize,
    },
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pnm(#[from] crate::pnm::PnmError),
}

fn io_err(path: &Path, source: std::io::Error) -> InstructError {
    InstructError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Per-class name and descriptive phrases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub name: String,
    pub attributes: Vec<String>,
}

/// Class vocabulary shared by instruction generation and the query database.
#[derive(Debug, Clone)]
pub struct ClassLexicon {
    entries: BTreeMap<u8, LexiconEntry>,
}

impl ClassLexicon {
    /// Validates name/attribute distinctness. `min_attributes` is the
    /// per-class floor (7 covers the default query-database K).
    pub fn new(
        entries: BTreeMap<u8, LexiconEntry>,
        min_attributes: usize,
    ) -> Result<Self, InstructError> {
        let mut seen_phrases: BTreeMap<&str, u8> = BTreeMap::new();
        for (&class, entry) in &entries {
            if entry.name.trim().is_empty() {
                return Err(InstructError::ConstructionError(format!(
                    "class {class} has an empty name"
                )));
            }
            if entry.attributes.len() < min_attributes {
                return Err(InstructError::ConstructionError(format!(
                    "class {class} has {} attributes, need at least {min_attributes}",
                    entry.attributes.len()
                )));
            }
            for attr in &entry.attributes {
                if let Some(&other) = seen_phrases.get(attr.as_str()) {
                    return Err(InstructError::ConstructionError(format!(
                        "attribute phrase {attr:?} is shared by classes {other} and {class}"
                    )));
                }
                seen_phrases.insert(attr, class);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, class_id: u8) -> Result<&LexiconEntry, InstructError> {
        self.entries
            .get(&class_id)
            .ok_or(InstructError::UnknownClass(class_id))
    }

    pub fn class_ids(&self) -> Vec<u8> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense index of a class id among the sorted lexicon classes; this is
    /// the response-head target used by the language loss.
    pub fn class_index(&self, class_id: u8) -> Result<usize, InstructError> {
        self.entries
            .keys()
            .position(|&c| c == class_id)
            .ok_or(InstructError::UnknownClass(class_id))
    }

    /// JSON file: `{ "<class id>": { "name": ..., "attributes": [...] } }`.
    pub fn load(path: &Path, min_attributes: usize) -> Result<Self, InstructError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text, min_attributes)
    }

    pub fn from_json(text: &str, min_attributes: usize) -> Result<Self, InstructError> {
        let raw: BTreeMap<String, LexiconEntry> =
            serde_json::from_str(text).map_err(|e| InstructError::ParseError {
                line: e.line(),
                message: e.to_string(),
            })?;
        let mut entries = BTreeMap::new();
        for (key, entry) in raw {
            let class: u8 = key.parse().map_err(|_| {
                InstructError::ConstructionError(format!("class key {key:?} is not a u8"))
            })?;
            entries.insert(class, entry);
        }
        Self::new(entries, min_attributes)
    }

    pub fn save(&self, path: &Path) -> Result<(), InstructError> {
        let raw: BTreeMap<String, &LexiconEntry> = self
            .entries
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let text = serde_json::to_string_pretty(&raw).expect("lexicon serializes");
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Semantic,
    Attribute,
    Conditional,
}

/// One query/answer pair with target (and optional anchor) grounding.
///
/// Mask refs are paths relative to the directory holding the instruction
/// file; `anchor_bbox` is normalized to `[0, 1]` by the image dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub image_ref: String,
    pub kind: InstructionKind,
    pub target_class: u8,
    pub target_mask_ref: String,
    pub query_text: String,
    pub answer_text: String,
    pub anchor_class: Option<u8>,
    pub anchor_mask_ref: Option<String>,
    pub anchor_bbox: Option<[f64; 4]>,
    pub relation: Option<SpatialRelation>,
}

impl Instruction {
    fn check(&self) -> Result<(), InstructError> {
        let conditional = self.kind == InstructionKind::Conditional;
        let anchored =
            self.anchor_class.is_some() && self.anchor_mask_ref.is_some() && self.relation.is_some();
        if conditional != anchored {
            return Err(InstructError::ConstructionError(format!(
                "instruction {}: anchor fields must be present iff kind is conditional",
                self.id
            )));
        }
        if self.answer_text.matches(SSEG_PLACEHOLDER).count() != 1 {
            return Err(InstructError::ConstructionError(format!(
                "instruction {}: answer must contain exactly one {SSEG_PLACEHOLDER}",
                self.id
            )));
        }
        Ok(())
    }
}

/// An instruction together with the masks its refs point at, before they
/// are persisted to disk.
#[derive(Debug, Clone)]
pub struct GeneratedInstruction {
    pub instruction: Instruction,
    pub target_mask: BinaryMask,
    pub anchor_mask: Option<BinaryMask>,
}

fn fill(template: &str, slot: &str, value: &str) -> String {
    template.replace(slot, value)
}

fn answer_for(name: &str) -> String {
    fill(ANSWER_TEMPLATE, "{name}", name)
}

/// One semantic instruction per class present in the map; the target mask
/// is the class union.
pub fn gen_semantic(
    map: &LabelMap,
    lexicon: &ClassLexicon,
    image_stem: &str,
    image_ref: &str,
    rng_seed: u64,
) -> Result<Vec<GeneratedInstruction>, InstructError> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(rng_seed, 0x5e3a));
    let mut out = Vec::new();
    for class in map.classes() {
        let entry = lexicon.get(class)?;
        let template = SEMANTIC_TEMPLATES[rng.gen_range(0..SEMANTIC_TEMPLATES.len())];
        let id = format!("{image_stem}_sem_c{class}");
        let instruction = Instruction {
            id: id.clone(),
            image_ref: image_ref.to_string(),
            kind: InstructionKind::Semantic,
            target_class: class,
            target_mask_ref: format!("masks/{id}_target.pgm"),
            query_text: fill(template, "{name}", &entry.name),
            answer_text: answer_for(&entry.name),
            anchor_class: None,
            anchor_mask_ref: None,
            anchor_bbox: None,
            relation: None,
        };
        instruction.check()?;
        out.push(GeneratedInstruction {
            instruction,
            target_mask: map.class_mask(class),
            anchor_mask: None,
        });
    }
    Ok(out)
}

/// One attribute instruction per class present in the map; the query names
/// the class only by a descriptive phrase, the answer names it explicitly.
pub fn gen_attribute(
    map: &LabelMap,
    lexicon: &ClassLexicon,
    image_stem: &str,
    image_ref: &str,
    rng_seed: u64,
) -> Result<Vec<GeneratedInstruction>, InstructError> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(rng_seed, 0xa77b));
    let mut out = Vec::new();
    for class in map.classes() {
        let entry = lexicon.get(class)?;
        let template = ATTRIBUTE_TEMPLATES[rng.gen_range(0..ATTRIBUTE_TEMPLATES.len())];
        let attr = &entry.attributes[rng.gen_range(0..entry.attributes.len())];
        let id = format!("{image_stem}_attr_c{class}");
        let instruction = Instruction {
            id: id.clone(),
            image_ref: image_ref.to_string(),
            kind: InstructionKind::Attribute,
            target_class: class,
            target_mask_ref: format!("masks/{id}_target.pgm"),
            query_text: fill(template, "{attr}", attr),
            answer_text: answer_for(&entry.name),
            anchor_class: None,
            anchor_mask_ref: None,
            anchor_bbox: None,
            relation: None,
        };
        instruction.check()?;
        out.push(GeneratedInstruction {
            instruction,
            target_mask: map.class_mask(class),
            anchor_mask: None,
        });
    }
    Ok(out)
}

/// Up to `pairs` conditional instructions from seeded (target, anchor)
/// instance pairs, sampled without replacement over ordered pairs.
pub fn gen_conditional(
    map: &LabelMap,
    lexicon: &ClassLexicon,
    image_stem: &str,
    image_ref: &str,
    rng_seed: u64,
    pairs: usize,
) -> Result<Vec<GeneratedInstruction>, InstructError> {
    assert!(pairs >= 1, "pairs must be >= 1");
    let instances = extract_instances(map, DEFAULT_MIN_AREA);
    if instances.len() < 2 {
        return Err(InstructError::InsufficientObjects {
            found: instances.len(),
        });
    }
    let mut ordered_pairs: Vec<(usize, usize)> = Vec::new();
    for t in 0..instances.len() {
        for a in 0..instances.len() {
            if t != a {
                ordered_pairs.push((t, a));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(rng_seed, 0xc0ed));
    ordered_pairs.shuffle(&mut rng);

    let mut out = Vec::new();
    for &(ti, ai) in ordered_pairs.iter() {
        if out.len() == pairs {
            break;
        }
        let (target, anchor) = (&instances[ti], &instances[ai]);
        let relation = match relation_of(target, anchor, DEFAULT_NEXT_TO_DIST) {
            Ok(r) => r,
            Err(_) => continue, // coincident centroids: skip this pair
        };
        let target_entry = lexicon.get(target.class_id)?;
        let anchor_entry = lexicon.get(anchor.class_id)?;
        let id = format!("{image_stem}_cond_p{}", out.len());
        let query_text = CONDITIONAL_TEMPLATE
            .replace("{target}", &target_entry.name)
            .replace("{relation}", relation.phrase())
            .replace("{anchor}", &anchor_entry.name);
        let instruction = Instruction {
            id: id.clone(),
            image_ref: image_ref.to_string(),
            kind: InstructionKind::Conditional,
            target_class: target.class_id,
            target_mask_ref: format!("masks/{id}_target.pgm"),
            query_text,
            answer_text: answer_for(&target_entry.name),
            anchor_class: Some(anchor.class_id),
            anchor_mask_ref: Some(format!("masks/{id}_anchor.pgm")),
            anchor_bbox: Some(anchor.bbox.normalized(map.width, map.height)),
            relation: Some(relation),
        };
        instruction.check()?;
        out.push(GeneratedInstruction {
            instruction,
            target_mask: target.mask.clone(),
            anchor_mask: Some(anchor.mask.clone()),
        });
    }
    Ok(out)
}

/// Per-class paraphrase bank: exactly `k` distinct queries per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryDatabase {
    pub k: usize,
    pub queries: BTreeMap<u8, Vec<String>>,
}

impl QueryDatabase {
    pub fn class_queries(&self, class_id: u8) -> Option<&[String]> {
        self.queries.get(&class_id).map(|v| v.as_slice())
    }

    pub fn load(path: &Path) -> Result<Self, InstructError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        #[derive(Deserialize)]
        struct Raw {
            k: usize,
            queries: BTreeMap<String, Vec<String>>,
        }
        let raw: Raw = serde_json::from_str(&text).map_err(|e| InstructError::ParseError {
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut queries = BTreeMap::new();
        for (key, qs) in raw.queries {
            let class: u8 = key.parse().map_err(|_| {
                InstructError::ConstructionError(format!("class key {key:?} is not a u8"))
            })?;
            queries.insert(class, qs);
        }
        let db = Self { k: raw.k, queries };
        db.check()?;
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<(), InstructError> {
        #[derive(Serialize)]
        struct Raw<'a> {
            k: usize,
            queries: BTreeMap<String, &'a Vec<String>>,
        }
        let raw = Raw {
            k: self.k,
            queries: self
                .queries
                .iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&raw).expect("query db serializes");
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    fn check(&self) -> Result<(), InstructError> {
        if self.k < 2 {
            return Err(InstructError::ConstructionError(format!(
                "query database needs k >= 2, got {}",
                self.k
            )));
        }
        for (&class, qs) in &self.queries {
            let distinct: BTreeSet<&str> = qs.iter().map(String::as_str).collect();
            if qs.len() != self.k || distinct.len() != self.k {
                return Err(InstructError::ConstructionError(format!(
                    "class {class}: expected {} distinct queries, found {}",
                    self.k,
                    distinct.len()
                )));
            }
        }
        Ok(())
    }
}

/// Cross attribute templates with attribute phrases and draw `k` distinct
/// queries per class, deterministically per seed.
pub fn build_query_db(
    lexicon: &ClassLexicon,
    k: usize,
    rng_seed: u64,
) -> Result<QueryDatabase, InstructError> {
    build_query_db_with_templates(lexicon, k, rng_seed, ATTRIBUTE_TEMPLATES)
}

pub fn build_query_db_with_templates(
    lexicon: &ClassLexicon,
    k: usize,
    rng_seed: u64,
    templates: &[&str],
) -> Result<QueryDatabase, InstructError> {
    let mut queries = BTreeMap::new();
    for class in lexicon.class_ids() {
        let entry = lexicon.get(class)?;
        let mut candidates: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for template in templates {
            for attr in &entry.attributes {
                let q = fill(template, "{attr}", attr);
                if seen.insert(q.clone()) {
                    candidates.push(q);
                }
            }
        }
        if candidates.len() < k {
            return Err(InstructError::InsufficientAttributes {
                class,
                available: candidates.len(),
                needed: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(subseed(rng_seed, 0xdb), class as u64));
        candidates.shuffle(&mut rng);
        candidates.truncate(k);
        queries.insert(class, candidates);
    }
    let db = QueryDatabase { k, queries };
    db.check()?;
    Ok(db)
}

/// One JSON object per line, field names as in [`Instruction`].
pub fn write_instructions(instrs: &[Instruction], path: &Path) -> Result<(), InstructError> {
    let mut buf = Vec::new();
    for instr in instrs {
        serde_json::to_writer(&mut buf, instr).expect("instruction serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_instructions(path: &Path) -> Result<Vec<Instruction>, InstructError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let instr: Instruction =
            serde_json::from_str(&line).map_err(|e| InstructError::ParseError {
                line: i + 1,
                message: e.to_string(),
            })?;
        instr.check().map_err(|e| InstructError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(instr);
    }
    Ok(out)
}

/// Write mask payloads under `out_dir` and the instruction list as
/// `<out_dir>/<file_name>`; returns the persisted instructions.
pub fn persist_instructions(
    generated: &[GeneratedInstruction],
    out_dir: &Path,
    file_name: &str,
) -> Result<Vec<Instruction>, InstructError> {
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| io_err(&mask_dir, e))?;
    let mut instrs = Vec::with_capacity(generated.len());
    for gen in generated {
        gen.target_mask
            .write_pgm(&out_dir.join(&gen.instruction.target_mask_ref))?;
        if let (Some(mask), Some(mask_ref)) = (&gen.anchor_mask, &gen.instruction.anchor_mask_ref)
        {
            mask.write_pgm(&out_dir.join(mask_ref))?;
        }
        instrs.push(gen.instruction.clone());
    }
    write_instructions(&instrs, &out_dir.join(file_name))?;
    Ok(instrs)
}

/// True when `word` appears in `text` delimited by non-alphanumeric
/// characters; the attribute-query contract forbids this for class names.
pub fn contains_whole_word(text: &str, word: &str) -> bool {
    let lower = text.to_lowercase();
    let word = word.to_lowercase();
    let bytes = lower.as_bytes();
    let mut start = 0;
    while let Some(pos) = lower[start..].find(&word) {
        let abs = start + pos;
        let before_ok = abs == 0 || !bytes[abs - 1].is_ascii_alphanumeric();
        let after = abs + word.len();
        let after_ok = after >= bytes.len() || !bytes[after].is_ascii_alphanumeric();
        if before_ok && after_ok {
            return true;
        }
        start = abs + 1;
    }
    false
}
