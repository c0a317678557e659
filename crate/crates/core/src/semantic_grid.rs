//! Priority-ranked pooling of dense semantic maps into a coarse latent grid.
//!
//! Each grid cell keeps the `K` highest-priority *distinct* classes present in
//! its patch, so a single pixel of a high-priority class survives pooling no
//! matter how much background surrounds it. Cells with fewer than `K` distinct
//! classes are PAD-filled to keep the flattened token stream constant-length.

use std::cmp::Ordering;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u8;

/// Class ids of the default tactical hierarchy.
pub mod class {
    use super::ClassId;

    pub const PERSON: ClassId = 0;
    pub const VEHICLE: ClassId = 1;
    pub const COVER: ClassId = 2;
    pub const ITEM: ClassId = 3;
    pub const OTHER: ClassId = 4;
    pub const PAD: ClassId = 5;

    pub const COUNT: usize = 5;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub id: ClassId,
    pub name: String,
    /// Larger is higher priority.
    pub rank: i32,
}

/// Ordered class set with a priority rank per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "HierarchyRecord", into = "HierarchyRecord")]
pub struct ClassHierarchy {
    classes: Vec<SemanticClass>,
    pad_token_id: ClassId,
    other_class_id: ClassId,
    rank_of: Vec<Option<i32>>,
}

#[derive(Serialize, Deserialize)]
struct HierarchyRecord {
    classes: Vec<SemanticClass>,
    pad_token_id: ClassId,
    other_class_id: ClassId,
}

impl TryFrom<HierarchyRecord> for ClassHierarchy {
    type Error = Error;

    fn try_from(r: HierarchyRecord) -> Result<Self> {
        ClassHierarchy::new(r.classes, r.pad_token_id, r.other_class_id)
    }
}

impl From<ClassHierarchy> for HierarchyRecord {
    fn from(h: ClassHierarchy) -> Self {
        HierarchyRecord {
            classes: h.classes,
            pad_token_id: h.pad_token_id,
            other_class_id: h.other_class_id,
        }
    }
}

impl ClassHierarchy {
    pub fn new(classes: Vec<SemanticClass>, pad_token_id: ClassId, other_class_id: ClassId) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::config("class hierarchy has no classes"));
        }
        let mut rank_of = vec![None; 256];
        for c in &classes {
            if rank_of[c.id as usize].is_some() {
                return Err(Error::config(format!("duplicate class id {}", c.id)));
            }
            rank_of[c.id as usize] = Some(c.rank);
        }
        if rank_of[other_class_id as usize].is_none() {
            return Err(Error::config(format!("other class id {other_class_id} is not a class")));
        }
        if rank_of[pad_token_id as usize].is_some() {
            return Err(Error::config(format!("pad id {pad_token_id} collides with a class id")));
        }
        Ok(ClassHierarchy {
            classes,
            pad_token_id,
            other_class_id,
            rank_of,
        })
    }

    /// Person > Vehicle > Cover > Item > Other.
    pub fn tactical() -> Self {
        let named = [
            (class::PERSON, "Person", 4),
            (class::VEHICLE, "Vehicle", 3),
            (class::COVER, "Cover", 2),
            (class::ITEM, "Item", 1),
            (class::OTHER, "Other", 0),
        ];
        let classes = named
            .iter()
            .map(|&(id, name, rank)| SemanticClass {
                id,
                name: name.to_string(),
                rank,
            })
            .collect();
        ClassHierarchy::new(classes, class::PAD, class::OTHER).expect("default hierarchy is well-formed")
    }

    pub fn classes(&self) -> &[SemanticClass] {
        &self.classes
    }

    pub fn pad_token_id(&self) -> ClassId {
        self.pad_token_id
    }

    pub fn other_class_id(&self) -> ClassId {
        self.other_class_id
    }

    pub fn rank(&self, id: ClassId) -> Option<i32> {
        self.rank_of.get(id as usize).copied().flatten()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.rank(id).is_some()
    }

    pub fn max_rank_class(&self) -> ClassId {
        self.classes
            .iter()
            .max_by(|a, b| a.rank.cmp(&b.rank).then(b.id.cmp(&a.id)))
            .map(|c| c.id)
            .expect("non-empty")
    }
}

/// Dense per-pixel class raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    width: usize,
    height: usize,
    cells: Vec<ClassId>,
}

const SMAP_MAGIC: &[u8; 4] = b"SMAP";

impl SemanticMap {
    pub fn new(width: usize, height: usize, cells: Vec<ClassId>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::data(format!("semantic map must be non-empty, got {width}x{height}")));
        }
        if cells.len() != width * height {
            return Err(Error::data(format!(
                "semantic map has {} cells, expected {}x{}={}",
                cells.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(SemanticMap { width, height, cells })
    }

    pub fn filled(width: usize, height: usize, id: ClassId) -> Result<Self> {
        SemanticMap::new(width, height, vec![id; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[ClassId] {
        &self.cells
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: ClassId) {
        self.cells[y * self.width + x] = id;
    }

    pub fn validate(&self, hierarchy: &ClassHierarchy) -> Result<()> {
        for (i, &c) in self.cells.iter().enumerate() {
            if !hierarchy.contains(c) {
                return Err(Error::data(format!(
                    "unknown class id {c} at pixel (x={}, y={})",
                    i % self.width,
                    i / self.width
                )));
            }
        }
        Ok(())
    }

    /// `SMAP` magic, u32 width, u32 height (little endian), then one byte per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.cells.len());
        out.extend_from_slice(SMAP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.cells);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = bytes;
        let map = SemanticMap::read_from(&mut rd)?;
        if !rd.is_empty() {
            return Err(Error::data(format!("{} trailing bytes after SMAP record", rd.len())));
        }
        Ok(map)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|e| Error::data(format!("truncated SMAP header: {e}")))?;
        if &header[..4] != SMAP_MAGIC {
            return Err(Error::data("bad SMAP magic"));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut cells = vec![0u8; width * height];
        r.read_exact(&mut cells)
            .map_err(|e| Error::data(format!("truncated SMAP body: {e}")))?;
        SemanticMap::new(width, height, cells)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub k_per_cell: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            grid_rows: 8,
            grid_cols: 8,
            k_per_cell: 2,
        }
    }
}

impl PoolConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid_rows * self.grid_cols * self.k_per_cell
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.k_per_cell == 0 {
            return Err(Error::config("k_per_cell must be at least 1"));
        }
        if self.grid_rows == 0 || !height.is_multiple_of(self.grid_rows) {
            return Err(Error::config(format!(
                "grid_rows={} does not divide map height={height}",
                self.grid_rows
            )));
        }
        if self.grid_cols == 0 || !width.is_multiple_of(self.grid_cols) {
            return Err(Error::config(format!(
                "grid_cols={} does not divide map width={width}",
                self.grid_cols
            )));
        }
        Ok(())
    }
}

/// Pooled grid: `rows * cols` cells of exactly `k_per_cell` slots each, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGrid {
    rows: usize,
    cols: usize,
    k_per_cell: usize,
    slots: Vec<ClassId>,
}

impl LatentGrid {
    pub fn from_cells(rows: usize, cols: usize, k_per_cell: usize, cells: &[Vec<ClassId>]) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::data(format!("expected {} cells, got {}", rows * cols, cells.len())));
        }
        let mut slots = Vec::with_capacity(rows * cols * k_per_cell);
        for (i, c) in cells.iter().enumerate() {
            if c.len() != k_per_cell {
                return Err(Error::data(format!("cell {i} has {} slots, expected {k_per_cell}", c.len())));
            }
            slots.extend_from_slice(c);
        }
        Ok(LatentGrid {
            rows,
            cols,
            k_per_cell,
            slots,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k_per_cell(&self) -> usize {
        self.k_per_cell
    }

    pub fn cell(&self, row: usize, col: usize) -> &[ClassId] {
        let start = (row * self.cols + col) * self.k_per_cell;
        &self.slots[start..start + self.k_per_cell]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[ClassId]> {
        self.slots.chunks_exact(self.k_per_cell)
    }

    /// Checks slot ordering and PAD placement against `hierarchy`.
    pub fn validate(&self, hierarchy: &ClassHierarchy) -> Result<()> {
        let pad = hierarchy.pad_token_id();
        for (i, cell) in self.cells().enumerate() {
            let n_real = cell.iter().take_while(|&&c| c != pad).count();
            if cell[n_real..].iter().any(|&c| c != pad) {
                return Err(Error::data(format!("cell {i}: PAD precedes a class slot")));
            }
            for (j, &c) in cell[..n_real].iter().enumerate() {
                let r = hierarchy
                    .rank(c)
                    .ok_or_else(|| Error::data(format!("cell {i}: unknown class {c}")))?;
                if cell[..j].contains(&c) {
                    return Err(Error::data(format!("cell {i}: class {c} repeated")));
                }
                if j > 0 && hierarchy.rank(cell[j - 1]).unwrap() < r {
                    return Err(Error::data(format!("cell {i}: slots not in descending priority")));
                }
            }
        }
        Ok(())
    }
}

/// Flattened `y_env` token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTokenSequence {
    pub tokens: Vec<ClassId>,
}

/// Top-K priority pooling of `map` onto the grid described by `cfg`.
///
/// Classes in a patch are ordered by rank (desc), then pixel count (desc),
/// then class id (asc); the first `k_per_cell` survive.
pub fn pool_semantic_map(map: &SemanticMap, hierarchy: &ClassHierarchy, cfg: &PoolConfig) -> Result<LatentGrid> {
    cfg.check(map.width(), map.height())?;
    let ph = map.height() / cfg.grid_rows;
    let pw = map.width() / cfg.grid_cols;
    let pad = hierarchy.pad_token_id();

    let mut counts = [0u32; 256];
    let mut present: Vec<ClassId> = Vec::with_capacity(8);
    let mut slots = Vec::with_capacity(cfg.n_tokens());

    for u in 0..cfg.grid_rows {
        for v in 0..cfg.grid_cols {
            present.clear();
            for y in u * ph..(u + 1) * ph {
                let row = &map.cells()[y * map.width()..(y + 1) * map.width()];
                for (x, &c) in row.iter().enumerate().skip(v * pw).take(pw) {
                    if !hierarchy.contains(c) {
                        return Err(Error::data(format!("unknown class id {c} at pixel (x={x}, y={y})")));
                    }
                    if counts[c as usize] == 0 {
                        present.push(c);
                    }
                    counts[c as usize] += 1;
                }
            }
            present.sort_by(|&a, &b| priority_order(hierarchy, &counts, a, b));
            for slot in 0..cfg.k_per_cell {
                slots.push(present.get(slot).copied().unwrap_or(pad));
            }
            for &c in &present {
                counts[c as usize] = 0;
            }
        }
    }

    Ok(LatentGrid {
        rows: cfg.grid_rows,
        cols: cfg.grid_cols,
        k_per_cell: cfg.k_per_cell,
        slots,
    })
}

fn priority_order(h: &ClassHierarchy, counts: &[u32; 256], a: ClassId, b: ClassId) -> Ordering {
    let ra = h.rank(a).unwrap();
    let rb = h.rank(b).unwrap();
    rb.cmp(&ra)
        .then(counts[b as usize].cmp(&counts[a as usize]))
        .then(a.cmp(&b))
}

/// Row-major cells, slot order preserved.
pub fn flatten_grid(grid: &LatentGrid) -> GridTokenSequence {
    GridTokenSequence {
        tokens: grid.slots.clone(),
    }
}

pub fn unflatten_grid(seq: &GridTokenSequence, rows: usize, cols: usize, k_per_cell: usize) -> Result<LatentGrid> {
    let expected = rows * cols * k_per_cell;
    if seq.tokens.len() != expected {
        return Err(Error::data(format!(
            "token sequence has length {}, expected {rows}x{cols}x{k_per_cell}={expected}",
            seq.tokens.len()
        )));
    }
    Ok(LatentGrid {
        rows,
        cols,
        k_per_cell,
        slots: seq.tokens.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use class::*;

    fn patch_map(pixels: &[ClassId], side: usize) -> SemanticMap {
        SemanticMap::new(side, side, pixels.to_vec()).unwrap()
    }

    fn one_cell(k: usize) -> PoolConfig {
        PoolConfig {
            grid_rows: 1,
            grid_cols: 1,
            k_per_cell: k,
        }
    }

    #[test]
    fn lone_person_masks_background() {
        // Sky and Grass are both folded into Other before pooling.
        let mut px = vec![OTHER; 16];
        px[5] = PERSON;
        let g = pool_semantic_map(&patch_map(&px, 4), &ClassHierarchy::tactical(), &one_cell(2)).unwrap();
        assert_eq!(g.cell(0, 0), &[PERSON, OTHER]);
    }

    #[test]
    fn rider_and_vehicle_both_kept() {
        let mut px = vec![OTHER; 16];
        px[0] = PERSON;
        px[1..5].fill(VEHICLE);
        let g = pool_semantic_map(&patch_map(&px, 4), &ClassHierarchy::tactical(), &one_cell(2)).unwrap();
        assert_eq!(g.cell(0, 0), &[PERSON, VEHICLE]);
    }

    #[test]
    fn uniform_other_is_single_token() {
        let g = pool_semantic_map(&patch_map(&[OTHER; 16], 4), &ClassHierarchy::tactical(), &one_cell(2)).unwrap();
        assert_eq!(g.cell(0, 0), &[OTHER, PAD]);
    }

    #[test]
    fn equal_rank_prefers_count_then_id() {
        let classes = vec![
            SemanticClass { id: 0, name: "a".into(), rank: 1 },
            SemanticClass { id: 1, name: "b".into(), rank: 1 },
            SemanticClass { id: 2, name: "c".into(), rank: 1 },
            SemanticClass { id: 3, name: "bg".into(), rank: 0 },
        ];
        let h = ClassHierarchy::new(classes, 9, 3).unwrap();
        // one pixel of 0, two of 2, one of 1
        let px = [0, 2, 2, 1];
        let g = pool_semantic_map(&patch_map(&px, 2), &h, &one_cell(3)).unwrap();
        assert_eq!(g.cell(0, 0), &[2, 0, 1]);
    }

    #[test]
    fn non_divisible_dimensions_rejected() {
        let map = SemanticMap::filled(10, 8, OTHER).unwrap();
        let cfg = PoolConfig { grid_rows: 4, grid_cols: 4, k_per_cell: 2 };
        let err = pool_semantic_map(&map, &ClassHierarchy::tactical(), &cfg).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("grid_cols")), "{err}");

        let map = SemanticMap::filled(8, 10, OTHER).unwrap();
        let err = pool_semantic_map(&map, &ClassHierarchy::tactical(), &cfg).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("grid_rows")), "{err}");
    }

    #[test]
    fn unknown_class_reports_pixel() {
        let mut map = SemanticMap::filled(4, 4, OTHER).unwrap();
        map.set(3, 2, 42);
        let err = pool_semantic_map(&map, &ClassHierarchy::tactical(), &one_cell(2)).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("x=3, y=2")), "{err}");
    }

    #[test]
    fn zero_k_rejected() {
        let map = SemanticMap::filled(4, 4, OTHER).unwrap();
        assert!(pool_semantic_map(&map, &ClassHierarchy::tactical(), &one_cell(0)).is_err());
    }

    #[test]
    fn hierarchy_validation() {
        let dup = vec![
            SemanticClass { id: 0, name: "a".into(), rank: 1 },
            SemanticClass { id: 0, name: "b".into(), rank: 0 },
        ];
        assert!(ClassHierarchy::new(dup, 5, 0).is_err());
        let ok = vec![SemanticClass { id: 0, name: "a".into(), rank: 1 }];
        assert!(ClassHierarchy::new(ok.clone(), 0, 0).is_err(), "pad collides");
        assert!(ClassHierarchy::new(ok, 1, 7).is_err(), "other missing");
        assert_eq!(ClassHierarchy::tactical().max_rank_class(), PERSON);
    }

    #[test]
    fn flatten_single_cell() {
        let g = LatentGrid::from_cells(1, 1, 2, &[vec![PERSON, PAD]]).unwrap();
        assert_eq!(flatten_grid(&g).tokens, vec![PERSON, PAD]);
        let back = unflatten_grid(&GridTokenSequence { tokens: vec![PERSON, PAD] }, 1, 1, 2).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn flatten_is_row_major() {
        let cells = vec![vec![PERSON, PAD], vec![VEHICLE, OTHER], vec![COVER, PAD], vec![ITEM, OTHER]];
        let g = LatentGrid::from_cells(2, 2, 2, &cells).unwrap();
        assert_eq!(
            flatten_grid(&g).tokens,
            vec![PERSON, PAD, VEHICLE, OTHER, COVER, PAD, ITEM, OTHER]
        );
        assert_eq!(g.cell(1, 0), &[COVER, PAD]);
    }

    #[test]
    fn unflatten_wrong_length() {
        let seq = GridTokenSequence { tokens: vec![OTHER; 5] };
        assert!(matches!(unflatten_grid(&seq, 1, 2, 2), Err(Error::Data(_))));
    }

    #[test]
    fn smap_roundtrip_and_errors() {
        let mut map = SemanticMap::filled(3, 2, OTHER).unwrap();
        map.set(2, 1, PERSON);
        let bytes = map.to_bytes();
        assert_eq!(&bytes[..4], b"SMAP");
        assert_eq!(bytes.len(), 12 + 6);
        assert_eq!(SemanticMap::from_bytes(&bytes).unwrap(), map);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SemanticMap::from_bytes(&bad).is_err());
        assert!(SemanticMap::from_bytes(&bytes[..15]).is_err());
        assert!(SemanticMap::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn grid_validate_flags_bad_order() {
        let h = ClassHierarchy::tactical();
        let good = LatentGrid::from_cells(1, 2, 2, &[vec![PERSON, OTHER], vec![OTHER, PAD]]).unwrap();
        assert!(good.validate(&h).is_ok());
        let bad = LatentGrid::from_cells(1, 1, 2, &[vec![OTHER, PERSON]]).unwrap();
        assert!(bad.validate(&h).is_err());
        let bad = LatentGrid::from_cells(1, 1, 2, &[vec![PAD, PERSON]]).unwrap();
        assert!(bad.validate(&h).is_err());
    }
}
