use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Entity, WorldState};
use crate::error::{Error, Result};
use crate::semantic_grid::{class, ClassId, SemanticMap};

/// Pixels per board cell along each axis.
pub const CELL_PX: usize = 4;

/// Mean and standard deviation of the pixel intensity for one kind of surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub mean: f32,
    pub std: f32,
}

const fn tex(mean: f32, std: f32) -> Texture {
    Texture { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub floor: Texture,
    pub wall: Texture,
    pub enemy: Texture,
    pub agent: Texture,
    pub item: Texture,
    pub vehicle: Texture,
    pub safezone: Texture,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            floor: tex(0.0, 0.5),
            wall: tex(0.4, 0.1),
            enemy: tex(-1.2, 0.1),
            agent: tex(1.2, 0.1),
            item: tex(0.8, 0.1),
            vehicle: tex(-0.8, 0.1),
            safezone: tex(-0.4, 0.1),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Surface {
    Floor,
    Wall,
    Enemy,
    Agent,
    Item,
    Vehicle,
    Safezone,
}

impl Surface {
    fn class(self) -> ClassId {
        match self {
            Surface::Floor => class::OTHER,
            Surface::Wall => class::COVER,
            Surface::Enemy | Surface::Agent => class::PERSON,
            Surface::Item | Surface::Safezone => class::ITEM,
            Surface::Vehicle => class::VEHICLE,
        }
    }

    /// Half-open (row0, row1, col0, col1) inside a cell.
    fn footprint(self) -> (usize, usize, usize, usize) {
        match self {
            Surface::Floor | Surface::Wall | Surface::Safezone => (0, 4, 0, 4),
            Surface::Vehicle => (1, 4, 0, 4),
            Surface::Enemy | Surface::Agent | Surface::Item => (1, 3, 1, 3),
        }
    }

    fn texture(self, cfg: &RenderConfig) -> Texture {
        match self {
            Surface::Floor => cfg.floor,
            Surface::Wall => cfg.wall,
            Surface::Enemy => cfg.enemy,
            Surface::Agent => cfg.agent,
            Surface::Item => cfg.item,
            Surface::Vehicle => cfg.vehicle,
            Surface::Safezone => cfg.safezone,
        }
    }

    fn of(e: Entity) -> Surface {
        match e {
            Entity::Empty => Surface::Floor,
            Entity::Wall => Surface::Wall,
            Entity::Enemy => Surface::Enemy,
            Entity::Item => Surface::Item,
            Entity::Vehicle => Surface::Vehicle,
            Entity::Safezone => Surface::Safezone,
        }
    }
}

/// Noisy single-channel image of the board; pixels are drawn per surface kind.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

const RASTER_MAGIC: &[u8; 4] = b"RAST";

impl TexturedRaster {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Pixels of the `patch x patch` block at block coordinates (row, col), row-major.
    pub fn patch(&self, row: usize, col: usize, patch: usize, out: &mut [f64]) {
        for dy in 0..patch {
            let y = row * patch + dy;
            for dx in 0..patch {
                out[dy * patch + dx] = self.pixels[y * self.width + col * patch + dx] as f64;
            }
        }
    }

    /// All patches, row-major, flattened to `n_patches * patch^2`.
    pub fn patches(&self, patch: usize) -> Result<Vec<f64>> {
        if patch == 0 || !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "patch size {patch} does not tile a {}x{} raster",
                self.width, self.height
            )));
        }
        let per = patch * patch;
        let (rows, cols) = (self.height / patch, self.width / patch);
        let mut out = vec![0.0; rows * cols * per];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                self.patch(r, c, patch, &mut out[i * per..(i + 1) * per]);
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(RASTER_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for p in &self.pixels {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|e| Error::data(format!("truncated raster header: {e}")))?;
        if &header[..4] != RASTER_MAGIC {
            return Err(Error::data("bad raster magic"));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; width * height * 4];
        r.read_exact(&mut buf)
            .map_err(|e| Error::data(format!("truncated raster body: {e}")))?;
        let pixels = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(TexturedRaster { width, height, pixels })
    }
}

/// Semantic labels and a textured raster of `state`.
///
/// The semantic map depends on the state only; `noise_seed` only changes the raster.
pub fn render(state: &WorldState, noise_seed: u64, cfg: &RenderConfig) -> (SemanticMap, TexturedRaster) {
    let n = state.size();
    let side = n * CELL_PX;
    let mut labels = vec![class::OTHER; side * side];
    let mut surfaces = vec![Surface::Floor; side * side];

    let mut paint = |r: usize, c: usize, s: Surface| {
        let (y0, y1, x0, x1) = s.footprint();
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (r * CELL_PX + y) * side + c * CELL_PX + x;
                labels[i] = s.class();
                surfaces[i] = s;
            }
        }
    };
    for r in 0..n {
        for c in 0..n {
            let s = Surface::of(state.at((r, c)));
            if s != Surface::Floor {
                paint(r, c, s);
            }
        }
    }
    let (ar, ac) = state.agent();
    paint(ar, ac, Surface::Agent);

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    let pixels = surfaces
        .iter()
        .map(|s| {
            let t = s.texture(cfg);
            t.mean + t.std * unit.sample(&mut rng)
        })
        .collect();

    let map = SemanticMap::new(side, side, labels).expect("dimensions are consistent");
    (
        map,
        TexturedRaster {
            width: side,
            height: side,
            pixels,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic_grid::{pool_semantic_map, ClassHierarchy, PoolConfig};

    fn three_entities() -> WorldState {
        let mut cells = vec![Entity::Empty; 16 * 16];
        cells[2 * 16 + 3] = Entity::Wall;
        cells[3 * 16 + 3] = Entity::Enemy;
        cells[9 * 16 + 14] = Entity::Vehicle;
        WorldState::new(16, cells, (0, 0), 1).unwrap()
    }

    #[test]
    fn footprints_match_positions() {
        let s = three_entities();
        let (map, raster) = render(&s, 5, &RenderConfig::default());
        assert_eq!((map.width(), map.height()), (64, 64));
        assert_eq!((raster.width, raster.height), (64, 64));
        // wall cell (2,3) fully Cover
        for y in 8..12 {
            for x in 12..16 {
                assert_eq!(map.get(x, y), class::COVER);
            }
        }
        // enemy centre 2x2 at cell (3,3)
        assert_eq!(map.get(13, 13), class::PERSON);
        assert_eq!(map.get(12, 12), class::OTHER);
        // agent at (0,0)
        assert_eq!(map.get(1, 1), class::PERSON);
        // vehicle rows 1..4 of cell (9,14)
        assert_eq!(map.get(56, 36), class::OTHER);
        assert_eq!(map.get(56, 38), class::VEHICLE);
        let counts = |c| map.cells().iter().filter(|&&x| x == c).count();
        assert_eq!(counts(class::COVER), 16);
        assert_eq!(counts(class::PERSON), 8);
        assert_eq!(counts(class::VEHICLE), 12);
    }

    #[test]
    fn noise_changes_raster_not_labels() {
        let s = three_entities();
        let cfg = RenderConfig::default();
        let (m1, r1) = render(&s, 1, &cfg);
        let (m2, r2) = render(&s, 2, &cfg);
        assert_eq!(m1, m2);
        assert_ne!(r1, r2);
        assert_eq!(render(&s, 1, &cfg).1, r1);
    }

    #[test]
    fn pooled_known_layout() {
        // Latent cell (u,v) covers board cells rows 2u..2u+2, cols 2v..2v+2.
        let s = three_entities();
        let (map, _) = render(&s, 0, &RenderConfig::default());
        let g = pool_semantic_map(&map, &ClassHierarchy::tactical(), &PoolConfig::default()).unwrap();
        // board (2,3) wall and (3,3) enemy share latent cell (1,1); both pixels-minority vs floor
        assert_eq!(g.cell(1, 1), &[class::PERSON, class::COVER]);
        // agent at (0,0) -> latent (0,0)
        assert_eq!(g.cell(0, 0), &[class::PERSON, class::OTHER]);
        // vehicle (9,14) -> latent (4,7)
        assert_eq!(g.cell(4, 7), &[class::VEHICLE, class::OTHER]);
        assert_eq!(g.cell(7, 7), &[class::OTHER, class::PAD]);
    }

    #[test]
    fn raster_roundtrip_and_patches() {
        let s = three_entities();
        let (_, r) = render(&s, 3, &RenderConfig::default());
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        assert_eq!(TexturedRaster::read_from(&mut buf.as_slice()).unwrap(), r);
        let p = r.patches(8).unwrap();
        assert_eq!(p.len(), 64 * 64);
        // patch 8 is block (1, 0); its element 8 is pixel (x=0, y=9)
        assert_eq!(p[8 * 64 + 8], r.get(0, 9) as f64);
        assert!(r.patches(7).is_err());
    }
}
