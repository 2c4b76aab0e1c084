//! Object geometry extracted from label maps: connected components,
//! centroids, bounding boxes, and pairwise spatial relations.
//!
//! Coordinates are image coordinates: `x` grows rightward, `y` grows
//! downward, so "above" means smaller `y`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pnm;

/// Class id reserved for void / ignore pixels.
pub const VOID: u8 = 255;

/// Default minimum component area; smaller speckles are dropped.
pub const DEFAULT_MIN_AREA: usize = 4;

/// Default bbox-gap threshold (px) under which a pair reads as `NextTo`.
pub const DEFAULT_NEXT_TO_DIST: f64 = 3.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("dimension mismatch: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("degenerate geometry: coincident centroids with overlapping boxes")]
    DegenerateGeometry,
    #[error("label map payload is {got} bytes, expected {expected}")]
    BadPayload { got: usize, expected: usize },
}

/// Integer class-id grid; the ground-truth semantic annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, GeoError> {
        if data.len() != width * height {
            return Err(GeoError::BadPayload {
                got: data.len(),
                expected: width * height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class_id: u8) -> Self {
        Self {
            width,
            height,
            data: vec![class_id; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Sorted list of distinct non-void class ids present in the map.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Binary mask of all pixels belonging to `class_id`.
    pub fn class_mask(&self, class_id: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v == class_id).collect(),
        }
    }

    pub fn read_pgm(path: &Path) -> Result<Self, pnm::PnmError> {
        let img = pnm::read_pgm(path)?;
        Ok(Self {
            width: img.width,
            height: img.height,
            data: img.data,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), pnm::PnmError> {
        pnm::write_pgm(path, self.width, self.height, &self.data)
    }
}

/// Boolean pixel grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Foreground = 255, background = 0.
    pub fn write_pgm(&self, path: &Path) -> Result<(), pnm::PnmError> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pnm::write_pgm(path, self.width, self.height, &bytes)
    }

    /// Any nonzero byte counts as foreground.
    pub fn read_pgm(path: &Path) -> Result<Self, pnm::PnmError> {
        let img = pnm::read_pgm(path)?;
        Ok(Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| v != 0).collect(),
        })
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    /// Normalized corners in `[0, 1]`: max edges use the half-open pixel
    /// convention `(max + 1) / dim`.
    pub fn normalized(&self, width: usize, height: usize) -> [f64; 4] {
        [
            self.x_min as f64 / width as f64,
            self.y_min as f64 / height as f64,
            (self.x_max + 1) as f64 / width as f64,
            (self.y_max + 1) as f64 / height as f64,
        ]
    }

    /// Euclidean gap between two boxes; 0 when they touch or overlap.
    pub fn gap(&self, other: &BBox) -> f64 {
        let dx = gap_1d(self.x_min, self.x_max, other.x_min, other.x_max);
        let dy = gap_1d(self.y_min, self.y_max, other.y_min, other.y_max);
        ((dx * dx + dy * dy) as f64).sqrt()
    }

    fn overlaps(&self, other: &BBox) -> bool {
        self.x_min <= other.x_max
            && other.x_min <= self.x_max
            && self.y_min <= other.y_max
            && other.y_min <= self.y_max
    }
}

fn gap_1d(a_min: usize, a_max: usize, b_min: usize, b_max: usize) -> usize {
    if a_max < b_min {
        b_min - a_max - 1
    } else if b_max < a_min {
        a_min - b_max - 1
    } else {
        0
    }
}

/// One 4-connected component of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectInstance {
    pub class_id: u8,
    pub mask: BinaryMask,
    pub centroid: (f64, f64),
    pub bbox: BBox,
    pub area: usize,
}

/// Spatial relation of a target relative to an anchor, camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRelation {
    LeftOf,
    RightOf,
    Above,
    Below,
    NextTo,
}

impl SpatialRelation {
    /// Phrase that completes "the target that is {phrase} the anchor".
    pub fn phrase(&self) -> &'static str {
        match self {
            SpatialRelation::LeftOf => "to the left of",
            SpatialRelation::RightOf => "to the right of",
            SpatialRelation::Above => "above",
            SpatialRelation::Below => "below",
            SpatialRelation::NextTo => "next to",
        }
    }
}

/// One instance per 4-connected component of each non-void class,
/// ordered by `(class_id, y_min, x_min)`. Components smaller than
/// `min_area` are dropped.
pub fn extract_instances(map: &LabelMap, min_area: usize) -> Vec<ObjectInstance> {
    assert!(min_area >= 1, "min_area must be >= 1");
    let (w, h) = (map.width, map.height);
    let mut visited = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = Vec::new();

    for start in 0..w * h {
        if visited[start] || map.data[start] == VOID {
            continue;
        }
        let class_id = map.data[start];
        let mut mask = BinaryMask::empty(w, h);
        let (mut sum_x, mut sum_y, mut area) = (0u64, 0u64, 0usize);
        let (mut x_min, mut y_min, mut x_max, mut y_max) = (w, h, 0usize, 0usize);

        visited[start] = true;
        queue.clear();
        queue.push(start);
        while let Some(idx) = queue.pop() {
            let (x, y) = (idx % w, idx / w);
            mask.data[idx] = true;
            area += 1;
            sum_x += x as u64;
            sum_y += y as u64;
            x_min = x_min.min(x);
            y_min = y_min.min(y);
            x_max = x_max.max(x);
            y_max = y_max.max(y);

            let mut push = |nx: usize, ny: usize| {
                let nidx = ny * w + nx;
                if !visited[nidx] && map.data[nidx] == class_id {
                    visited[nidx] = true;
                    queue.push(nidx);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }

        if area >= min_area {
            out.push(ObjectInstance {
                class_id,
                mask,
                centroid: (sum_x as f64 / area as f64, sum_y as f64 / area as f64),
                bbox: BBox {
                    x_min,
                    y_min,
                    x_max,
                    y_max,
                },
                area,
            });
        }
    }

    out.sort_by_key(|inst| (inst.class_id, inst.bbox.y_min, inst.bbox.x_min));
    out
}

/// Decide how `target` sits relative to `anchor`.
///
/// `NextTo` wins when the bbox gap is below `next_to_dist`; otherwise the
/// dominant centroid offset decides, with horizontal winning ties.
pub fn relation_of(
    target: &ObjectInstance,
    anchor: &ObjectInstance,
    next_to_dist: f64,
) -> Result<SpatialRelation, GeoError> {
    let dx = target.centroid.0 - anchor.centroid.0;
    let dy = target.centroid.1 - anchor.centroid.1;
    if dx == 0.0 && dy == 0.0 && target.bbox.overlaps(&anchor.bbox) {
        return Err(GeoError::DegenerateGeometry);
    }
    if target.bbox.gap(&anchor.bbox) < next_to_dist {
        return Ok(SpatialRelation::NextTo);
    }
    if dx.abs() >= dy.abs() {
        Ok(if dx > 0.0 {
            SpatialRelation::RightOf
        } else {
            SpatialRelation::LeftOf
        })
    } else {
        Ok(if dy > 0.0 {
            SpatialRelation::Below
        } else {
            SpatialRelation::Above
        })
    }
}

/// Intersection over union of two same-sized masks; 1.0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, GeoError> {
    if !a.same_dims(b) {
        return Err(GeoError::DimensionMismatch {
            a_w: a.width,
            a_h: a.height,
            b_w: b.width,
            b_h: b.height,
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn map_from_rows(rows: &[&[u8]]) -> LabelMap {
        let height = rows.len();
        let width = rows[0].len();
        let mut data = Vec::with_capacity(width * height);
        for r in rows {
            assert_eq!(r.len(), width);
            data.extend_from_slice(r);
        }
        LabelMap::new(width, height, data).unwrap()
    }

    /// Independent component oracle: two-pass labeling with union-find,
    /// structurally different from the BFS in `extract_instances`.
    fn flood_oracle(map: &LabelMap, min_area: usize) -> Vec<(u8, usize, usize, usize)> {
        let (w, h) = (map.width, map.height);
        let mut labels = vec![0usize; w * h];
        let mut parent: Vec<usize> = vec![0];

        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }

        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if map.data[idx] == VOID {
                    continue;
                }
                let left = if x > 0 && map.data[idx - 1] == map.data[idx] {
                    labels[idx - 1]
                } else {
                    0
                };
                let up = if y > 0 && map.data[idx - w] == map.data[idx] {
                    labels[idx - w]
                } else {
                    0
                };
                labels[idx] = match (left, up) {
                    (0, 0) => {
                        parent.push(parent.len());
                        parent.len() - 1
                    }
                    (l, 0) => l,
                    (0, u) => u,
                    (l, u) => {
                        let (rl, ru) = (find(&mut parent, l), find(&mut parent, u));
                        let root = rl.min(ru);
                        parent[rl] = root;
                        parent[ru] = root;
                        root
                    }
                };
            }
        }

        use std::collections::HashMap;
        let mut comps: HashMap<usize, (u8, usize, usize, usize)> = HashMap::new();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if labels[idx] == 0 {
                    continue;
                }
                let root = find(&mut parent, labels[idx]);
                let entry = comps
                    .entry(root)
                    .or_insert((map.data[idx], 0, y, x));
                entry.1 += 1;
                if y < entry.2 || (y == entry.2 && x < entry.3) {
                    entry.2 = y;
                    entry.3 = x;
                }
            }
        }
        // recompute bbox mins per surviving component; sort like the
        // implementation does: (class, y_min, x_min)
        let mut out: Vec<(u8, usize, usize, usize)> = Vec::new();
        for (root, (class, area, _, _)) in &comps {
            if *area < min_area {
                continue;
            }
            let mut y_min = h;
            let mut x_min = w;
            for y in 0..h {
                for x in 0..w {
                    let idx = y * w + x;
                    if labels[idx] != 0 && find(&mut parent, labels[idx]) == *root {
                        y_min = y_min.min(y);
                        x_min = x_min.min(x);
                    }
                }
            }
            out.push((*class, *area, y_min, x_min));
        }
        out.sort_by_key(|&(class, _, y_min, x_min)| (class, y_min, x_min));
        out
    }

    #[test]
    fn all_void_yields_no_instances() {
        let map = LabelMap::filled(4, 4, VOID);
        assert!(extract_instances(&map, 1).is_empty());
    }

    #[test]
    fn full_grid_is_one_instance() {
        let map = LabelMap::filled(4, 4, 1);
        let insts = extract_instances(&map, 1);
        assert_eq!(insts.len(), 1);
        let inst = &insts[0];
        assert_eq!(inst.area, 16);
        assert_eq!(inst.centroid, (1.5, 1.5));
        assert_eq!(
            inst.bbox,
            BBox {
                x_min: 0,
                y_min: 0,
                x_max: 3,
                y_max: 3
            }
        );
    }

    #[test]
    fn two_corner_blocks_are_two_instances() {
        let mut map = LabelMap::filled(6, 6, VOID);
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            map.set(x, y, 2);
        }
        for (x, y) in [(4, 4), (5, 4), (4, 5), (5, 5)] {
            map.set(x, y, 2);
        }
        let insts = extract_instances(&map, 1);
        assert_eq!(insts.len(), 2);
        assert!(insts.iter().all(|i| i.class_id == 2 && i.area == 4));
        // cross-check against the union-find oracle
        let oracle = flood_oracle(&map, 1);
        let got: Vec<_> = insts
            .iter()
            .map(|i| (i.class_id, i.area, i.bbox.y_min, i.bbox.x_min))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn random_maps_match_union_find_oracle() {
        let mut rng = crate::rng::rng_for(901, 0);
        for _ in 0..50 {
            let w = rng.gen_range(3..14);
            let h = rng.gen_range(3..14);
            let data: Vec<u8> = (0..w * h)
                .map(|_| *[VOID, VOID, 1, 2, 3].get(rng.gen_range(0..5)).unwrap())
                .collect();
            let map = LabelMap::new(w, h, data).unwrap();
            let min_area = rng.gen_range(1..4);
            let got: Vec<_> = extract_instances(&map, min_area)
                .iter()
                .map(|i| (i.class_id, i.area, i.bbox.y_min, i.bbox.x_min))
                .collect();
            assert_eq!(got, flood_oracle(&map, min_area));
        }
    }

    #[test]
    fn instance_masks_partition_class_pixels() {
        let map = map_from_rows(&[
            &[1, 1, VOID, 2, 2],
            &[1, VOID, VOID, 2, 2],
            &[VOID, VOID, 1, VOID, VOID],
            &[2, VOID, 1, 1, VOID],
        ]);
        let insts = extract_instances(&map, 1);
        // pairwise disjoint
        for i in 0..insts.len() {
            for j in i + 1..insts.len() {
                let overlap = insts[i]
                    .mask
                    .data
                    .iter()
                    .zip(&insts[j].mask.data)
                    .any(|(&a, &b)| a && b);
                assert!(!overlap);
            }
        }
        // union over a class equals the class pixel set (min_area 1: nothing dropped)
        for class in map.classes() {
            let mut union = BinaryMask::empty(map.width, map.height);
            for inst in insts.iter().filter(|i| i.class_id == class) {
                for (u, &m) in union.data.iter_mut().zip(&inst.mask.data) {
                    *u |= m;
                }
            }
            assert_eq!(union, map.class_mask(class));
        }
    }

    #[test]
    fn min_area_drops_speckles() {
        let map = map_from_rows(&[&[1, VOID, VOID], &[VOID, VOID, VOID], &[VOID, 1, 1]]);
        assert_eq!(extract_instances(&map, 2).len(), 1);
        assert_eq!(extract_instances(&map, 1).len(), 2);
    }

    fn point_instance(class_id: u8, cx: f64, cy: f64) -> ObjectInstance {
        // 1x1 instance placed far from everything: bbox at rounded centroid
        let mut mask = BinaryMask::empty(64, 64);
        let (x, y) = (cx.round() as usize, cy.round() as usize);
        mask.set(x, y, true);
        ObjectInstance {
            class_id,
            mask,
            centroid: (cx, cy),
            bbox: BBox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            area: 1,
        }
    }

    #[test]
    fn pure_x_offset_is_right_of() {
        let t = point_instance(1, 20.0, 10.0);
        let a = point_instance(2, 10.0, 10.0);
        assert_eq!(relation_of(&t, &a, 3.0).unwrap(), SpatialRelation::RightOf);
    }

    #[test]
    fn smaller_y_is_above() {
        let t = point_instance(1, 10.0, 2.0);
        let a = point_instance(2, 10.0, 10.0);
        assert_eq!(relation_of(&t, &a, 3.0).unwrap(), SpatialRelation::Above);
    }

    #[test]
    fn close_boxes_are_next_to() {
        let t = point_instance(1, 12.0, 10.0);
        let a = point_instance(2, 10.0, 10.0);
        assert_eq!(relation_of(&t, &a, 3.0).unwrap(), SpatialRelation::NextTo);
    }

    #[test]
    fn coincident_centroids_are_degenerate() {
        let t = point_instance(1, 10.0, 10.0);
        let a = point_instance(2, 10.0, 10.0);
        assert!(matches!(
            relation_of(&t, &a, 0.0),
            Err(GeoError::DegenerateGeometry)
        ));
    }

    /// Re-derivation of the decision rule, written independently of the
    /// implementation: NextTo on close boxes, else dominant axis.
    fn relation_oracle(
        t: &ObjectInstance,
        a: &ObjectInstance,
        next_to_dist: f64,
    ) -> SpatialRelation {
        let (tc, ac) = (t.centroid, a.centroid);
        let hgap = if t.bbox.x_max < a.bbox.x_min {
            (a.bbox.x_min - t.bbox.x_max - 1) as f64
        } else if a.bbox.x_max < t.bbox.x_min {
            (t.bbox.x_min - a.bbox.x_max - 1) as f64
        } else {
            0.0
        };
        let vgap = if t.bbox.y_max < a.bbox.y_min {
            (a.bbox.y_min - t.bbox.y_max - 1) as f64
        } else if a.bbox.y_max < t.bbox.y_min {
            (t.bbox.y_min - a.bbox.y_max - 1) as f64
        } else {
            0.0
        };
        if (hgap * hgap + vgap * vgap).sqrt() < next_to_dist {
            return SpatialRelation::NextTo;
        }
        let (dx, dy) = (tc.0 - ac.0, tc.1 - ac.1);
        if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                SpatialRelation::RightOf
            } else {
                SpatialRelation::LeftOf
            }
        } else if dy > 0.0 {
            SpatialRelation::Below
        } else {
            SpatialRelation::Above
        }
    }

    #[test]
    fn relation_matches_independent_oracle_on_random_pairs() {
        let mut rng = crate::rng::rng_for(77, 1);
        let mut checked = 0;
        while checked < 100 {
            let t = point_instance(1, rng.gen_range(0..50) as f64, rng.gen_range(0..50) as f64);
            let a = point_instance(2, rng.gen_range(0..50) as f64, rng.gen_range(0..50) as f64);
            if t.centroid == a.centroid {
                continue;
            }
            let dist = rng.gen_range(0.0..6.0);
            assert_eq!(relation_of(&t, &a, dist).unwrap(), relation_oracle(&t, &a, dist));
            checked += 1;
        }
    }

    #[test]
    fn relation_is_antisymmetric_away_from_next_to() {
        let mut rng = crate::rng::rng_for(78, 2);
        let mut checked = 0;
        while checked < 100 {
            let t = point_instance(1, rng.gen_range(0..60) as f64, rng.gen_range(0..60) as f64);
            let a = point_instance(2, rng.gen_range(0..60) as f64, rng.gen_range(0..60) as f64);
            if t.centroid == a.centroid {
                continue;
            }
            let fwd = relation_of(&t, &a, 3.0).unwrap();
            let rev = relation_of(&a, &t, 3.0).unwrap();
            match fwd {
                SpatialRelation::NextTo => assert_eq!(rev, SpatialRelation::NextTo),
                SpatialRelation::LeftOf => assert_eq!(rev, SpatialRelation::RightOf),
                SpatialRelation::RightOf => assert_eq!(rev, SpatialRelation::LeftOf),
                // |dx| == |dy| ties break horizontal in both directions
                SpatialRelation::Above => {
                    if (t.centroid.0 - a.centroid.0).abs()
                        != (t.centroid.1 - a.centroid.1).abs()
                    {
                        assert_eq!(rev, SpatialRelation::Below)
                    }
                }
                SpatialRelation::Below => {
                    if (t.centroid.0 - a.centroid.0).abs()
                        != (t.centroid.1 - a.centroid.1).abs()
                    {
                        assert_eq!(rev, SpatialRelation::Above)
                    }
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn extract_is_deterministic() {
        let mut rng = crate::rng::rng_for(5, 5);
        let data: Vec<u8> = (0..100)
            .map(|_| *[VOID, 1, 2].get(rng.gen_range(0..3)).unwrap())
            .collect();
        let map = LabelMap::new(10, 10, data).unwrap();
        let a = extract_instances(&map, 2);
        let b = extract_instances(&map, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let mut a = BinaryMask::empty(4, 4);
        a.set(1, 1, true);
        a.set(2, 1, true);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);

        let mut b = BinaryMask::empty(4, 4);
        b.set(0, 3, true);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_of_shifted_block_is_one_third() {
        // 2x2 block vs the same block shifted right by one: overlap 2, union 6
        let mut a = BinaryMask::empty(5, 5);
        let mut b = BinaryMask::empty(5, 5);
        for (x, y) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            a.set(x, y, true);
            b.set(x + 1, y, true);
        }
        let iou = mask_iou(&a, &b).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_both_empty_is_one() {
        let a = BinaryMask::empty(3, 3);
        assert_eq!(mask_iou(&a, &a.clone()).unwrap(), 1.0);
    }

    #[test]
    fn iou_rejects_dim_mismatch() {
        let a = BinaryMask::empty(3, 3);
        let b = BinaryMask::empty(4, 3);
        assert!(matches!(
            mask_iou(&a, &b),
            Err(GeoError::DimensionMismatch { .. })
        ));
    }
}
