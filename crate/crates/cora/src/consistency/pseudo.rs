//! Pluggable pseudo-labelers for unlabeled images.
//!
//! Strategies implement [`PseudoLabeler`] and are selected by name:
//!
//! - `noisy-oracle`: corrupts the ground-truth label map with seeded
//!   per-component class flips and morphological boundary noise; stands in
//!   for an off-the-shelf semi-supervised segmentation model.
//! - `precomputed`: ingests label maps produced elsewhere, one PGM per
//!   image stem.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgeo::{extract_instances, BinaryMask, LabelMap, VOID};
use crate::rng::{fnv1a, subseed};

#[derive(Debug, Error)]
pub enum PseudoError {
    #[error("unknown pseudo-labeler {0:?}; known: noisy-oracle, precomputed")]
    UnknownLabeler(String),
    #[error("precomputed labeler needs a source directory")]
    MissingDir,
    #[error("noise rates invalid: flip_rate {flip_rate} not in [0, 1]")]
    BadRates { flip_rate: f64 },
    #[error("pseudo map for {stem} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        stem: String,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error(transparent)]
    Pnm(#[from] crate::pnm::PnmError),
}

/// Corruption knobs for the noisy oracle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Probability of reassigning a component to a different class.
    pub flip_rate: f64,
    /// Maximum radius (px) of the per-component erode/dilate perturbation.
    pub boundary_erode_dilate: usize,
    pub seed: u64,
}

/// Produces a pseudo label map for one unlabeled image.
pub trait PseudoLabeler: Send + Sync {
    fn name(&self) -> &'static str;
    /// `image_stem` identifies the image (e.g. `000042`); `gt` is the
    /// ground-truth label map the caller holds for it.
    fn pseudo_label(&self, image_stem: &str, gt: &LabelMap) -> Result<LabelMap, PseudoError>;
}

fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinaryMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        if mask.get(nx as usize, ny as usize) {
                            any = true;
                            break 'scan;
                        }
                    }
                }
            }
            out.set(x, y, any);
        }
    }
    out
}

fn erode(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = BinaryMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut all = true;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                        all = false;
                        break 'scan;
                    }
                    if !mask.get(nx as usize, ny as usize) {
                        all = false;
                        break 'scan;
                    }
                }
            }
            out.set(x, y, all);
        }
    }
    out
}

/// Corrupt a ground-truth label map: every 4-connected component gets a
/// seeded class-flip draw at `flip_rate` (new class uniform over `classes`
/// minus the original) and, when `boundary_erode_dilate > 0`, a seeded
/// erode-or-dilate of random radius. Components are repainted in
/// deterministic order; later components overwrite earlier on overlap.
pub fn noisy_oracle_pseudo_labeler(
    gt: &LabelMap,
    noise: &NoiseSpec,
    classes: &[u8],
) -> Result<LabelMap, PseudoError> {
    if !(0.0..=1.0).contains(&noise.flip_rate) {
        return Err(PseudoError::BadRates {
            flip_rate: noise.flip_rate,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(noise.seed, 0x9ab3));
    let mut out = LabelMap::filled(gt.width, gt.height, VOID);
    for inst in extract_instances(gt, 1) {
        // always consume the flip draw so the stream does not depend on
        // whether a flip target exists
        let flip = rng.gen_range(0.0..1.0) < noise.flip_rate;
        let others: Vec<u8> = classes
            .iter()
            .copied()
            .filter(|&c| c != inst.class_id)
            .collect();
        let class = if flip && !others.is_empty() {
            others[rng.gen_range(0..others.len())]
        } else {
            inst.class_id
        };

        let mut mask = inst.mask;
        if noise.boundary_erode_dilate > 0 {
            let grow = rng.gen_range(0..2) == 0;
            let radius = rng.gen_range(1..=noise.boundary_erode_dilate);
            for _ in 0..radius {
                mask = if grow { dilate(&mask) } else { erode(&mask) };
            }
        }
        for (i, &m) in mask.data.iter().enumerate() {
            if m {
                out.data[i] = class;
            }
        }
    }
    Ok(out)
}

/// `noisy-oracle` strategy: wraps [`noisy_oracle_pseudo_labeler`] with a
/// per-image seed derived from the image stem, so labeling one image never
/// depends on how many others were labeled before it.
pub struct NoisyOracle {
    pub noise: NoiseSpec,
    pub classes: Vec<u8>,
}

impl PseudoLabeler for NoisyOracle {
    fn name(&self) -> &'static str {
        "noisy-oracle"
    }

    fn pseudo_label(&self, image_stem: &str, gt: &LabelMap) -> Result<LabelMap, PseudoError> {
        let per_image = NoiseSpec {
            seed: subseed(self.noise.seed, fnv1a(image_stem.as_bytes())),
            ..self.noise
        };
        noisy_oracle_pseudo_labeler(gt, &per_image, &self.classes)
    }
}

/// `precomputed` strategy: reads `<dir>/<image_stem>.pgm`.
pub struct PrecomputedMasks {
    pub dir: PathBuf,
}

impl PseudoLabeler for PrecomputedMasks {
    fn name(&self) -> &'static str {
        "precomputed"
    }

    fn pseudo_label(&self, image_stem: &str, gt: &LabelMap) -> Result<LabelMap, PseudoError> {
        let path = self.dir.join(format!("{image_stem}.pgm"));
        let map = LabelMap::read_pgm(&path)?;
        if map.width != gt.width || map.height != gt.height {
            return Err(PseudoError::DimensionMismatch {
                stem: image_stem.to_string(),
                got_w: map.width,
                got_h: map.height,
                want_w: gt.width,
                want_h: gt.height,
            });
        }
        Ok(map)
    }
}

/// Registered strategy names, in lookup order.
pub const PSEUDO_LABELER_NAMES: [&str; 2] = ["noisy-oracle", "precomputed"];

/// Build a pseudo-labeler by registered name.
pub fn pseudo_labeler_by_name(
    name: &str,
    noise: NoiseSpec,
    classes: Vec<u8>,
    precomputed_dir: Option<&Path>,
) -> Result<Box<dyn PseudoLabeler>, PseudoError> {
    match name {
        "noisy-oracle" => Ok(Box::new(NoisyOracle { noise, classes })),
        "precomputed" => {
            let dir = precomputed_dir.ok_or(PseudoError::MissingDir)?;
            Ok(Box::new(PrecomputedMasks {
                dir: dir.to_path_buf(),
            }))
        }
        other => Err(PseudoError::UnknownLabeler(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks_map(n_blocks: usize, class_of: impl Fn(usize) -> u8) -> LabelMap {
        // n 2x2 blocks spaced out on a wide strip
        let w = n_blocks * 4 + 2;
        let mut map = LabelMap::filled(w, 6, VOID);
        for b in 0..n_blocks {
            let x0 = b * 4 + 1;
            for y in 2..4 {
                for x in x0..x0 + 2 {
                    map.set(x, y, class_of(b));
                }
            }
        }
        map
    }

    #[test]
    fn zero_noise_is_identity() {
        let map = blocks_map(5, |b| (b % 3) as u8 + 1);
        let noise = NoiseSpec {
            flip_rate: 0.0,
            boundary_erode_dilate: 0,
            seed: 1,
        };
        let out = noisy_oracle_pseudo_labeler(&map, &noise, &[1, 2, 3]).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn full_flip_changes_every_component() {
        let map = blocks_map(8, |b| (b % 2) as u8 + 1);
        let noise = NoiseSpec {
            flip_rate: 1.0,
            boundary_erode_dilate: 0,
            seed: 2,
        };
        let out = noisy_oracle_pseudo_labeler(&map, &noise, &[1, 2]).unwrap();
        // match components by position: every one changed class in place
        use std::collections::BTreeMap;
        let by_pos = |m: &LabelMap| -> BTreeMap<(usize, usize), u8> {
            extract_instances(m, 1)
                .into_iter()
                .map(|i| ((i.bbox.y_min, i.bbox.x_min), i.class_id))
                .collect()
        };
        let (before, after) = (by_pos(&map), by_pos(&out));
        assert_eq!(before.len(), 8);
        assert_eq!(
            before.keys().collect::<Vec<_>>(),
            after.keys().collect::<Vec<_>>()
        );
        for (pos, class) in &before {
            assert_ne!(after[pos], *class);
        }
    }

    #[test]
    fn flip_fraction_concentrates() {
        let map = blocks_map(1000, |_| 1);
        let noise = NoiseSpec {
            flip_rate: 0.3,
            boundary_erode_dilate: 0,
            seed: 3,
        };
        let out = noisy_oracle_pseudo_labeler(&map, &noise, &[1, 2, 3, 4]).unwrap();
        let flipped = extract_instances(&out, 1)
            .iter()
            .filter(|i| i.class_id != 1)
            .count();
        let frac = flipped as f64 / 1000.0;
        assert!((0.25..=0.35).contains(&frac), "flipped fraction {frac}");
    }

    #[test]
    fn labeler_is_deterministic_per_seed() {
        let map = blocks_map(10, |b| (b % 3) as u8 + 1);
        let noise = NoiseSpec {
            flip_rate: 0.5,
            boundary_erode_dilate: 2,
            seed: 9,
        };
        let a = noisy_oracle_pseudo_labeler(&map, &noise, &[1, 2, 3]).unwrap();
        let b = noisy_oracle_pseudo_labeler(&map, &noise, &[1, 2, 3]).unwrap();
        assert_eq!(a, b);
        let other = NoiseSpec { seed: 10, ..noise };
        let c = noisy_oracle_pseudo_labeler(&map, &other, &[1, 2, 3]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boundary_noise_changes_areas_only() {
        let map = blocks_map(6, |_| 1);
        let noise = NoiseSpec {
            flip_rate: 0.0,
            boundary_erode_dilate: 1,
            seed: 4,
        };
        let out = noisy_oracle_pseudo_labeler(&map, &noise, &[1, 2]).unwrap();
        assert_ne!(out, map);
        // classes survive even if areas moved
        assert!(out.classes() == vec![1] || out.classes().is_empty());
    }

    #[test]
    fn noisy_oracle_strategy_is_per_image_stable() {
        let map = blocks_map(4, |b| (b % 2) as u8 + 1);
        let labeler = NoisyOracle {
            noise: NoiseSpec {
                flip_rate: 0.4,
                boundary_erode_dilate: 1,
                seed: 11,
            },
            classes: vec![1, 2],
        };
        let a = labeler.pseudo_label("000007", &map).unwrap();
        let b = labeler.pseudo_label("000007", &map).unwrap();
        let c = labeler.pseudo_label("000008", &map).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn precomputed_reads_and_validates_dims() {
        let dir = tempfile::tempdir().unwrap();
        let map = blocks_map(2, |_| 1);
        map.write_pgm(&dir.path().join("000001.pgm")).unwrap();
        let labeler = PrecomputedMasks {
            dir: dir.path().to_path_buf(),
        };
        let got = labeler.pseudo_label("000001", &map).unwrap();
        assert_eq!(got, map);

        let small = LabelMap::filled(4, 4, VOID);
        assert!(matches!(
            labeler.pseudo_label("000001", &small),
            Err(PseudoError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn registry_resolves_names() {
        let noise = NoiseSpec {
            flip_rate: 0.1,
            boundary_erode_dilate: 0,
            seed: 0,
        };
        assert_eq!(
            pseudo_labeler_by_name("noisy-oracle", noise, vec![1], None)
                .unwrap()
                .name(),
            "noisy-oracle"
        );
        assert!(matches!(
            pseudo_labeler_by_name("precomputed", noise, vec![], None),
            Err(PseudoError::MissingDir)
        ));
        assert!(matches!(
            pseudo_labeler_by_name("wishful", noise, vec![], None),
            Err(PseudoError::UnknownLabeler(_))
        ));
    }
}
