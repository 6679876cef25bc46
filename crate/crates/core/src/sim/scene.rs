//! Procedural room scenes on the global voxel lattice.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec3, VoxelCoord};

/// Class palette. Id 0 is empty space.
pub mod classes {
    pub const EMPTY: u8 = 0;
    pub const CEILING: u8 = 1;
    pub const FLOOR: u8 = 2;
    pub const WALL: u8 = 3;
    pub const WINDOW: u8 = 4;
    pub const CHAIR: u8 = 5;
    pub const BED: u8 = 6;
    pub const SOFA: u8 = 7;
    pub const TABLE: u8 = 8;
    pub const TVS: u8 = 9;
    pub const FURNITURE: u8 = 10;
    pub const OBJECTS: u8 = 11;

    pub const NAMES: [&str; 12] = [
        "empty", "ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tvs",
        "furniture", "objects",
    ];

    pub const MOVABLE: [u8; 6] = [CHAIR, BED, SOFA, TABLE, FURNITURE, OBJECTS];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomConfig {
    /// Outer size of one room in meters, shell included.
    pub room_size: [f64; 3],
    /// Rooms are chained along +x, sharing a wall with a doorway.
    pub num_rooms: usize,
    pub furniture_per_room: usize,
    pub num_classes: usize,
    pub voxel_size: f64,
    pub door_width: f64,
    pub door_height: f64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            room_size: [4.8, 4.8, 2.88],
            num_rooms: 1,
            furniture_per_room: 5,
            num_classes: 12,
            voxel_size: 0.16,
            door_width: 1.12,
            door_height: 2.08,
        }
    }
}

impl RoomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid("voxel_size must be positive"));
        }
        if self.room_size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("room dimensions must be positive"));
        }
        if self.num_rooms == 0 {
            return Err(Error::invalid("num_rooms must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if (self.num_classes as u8 as usize) != self.num_classes {
            return Err(Error::invalid("num_classes must fit in a byte"));
        }
        Ok(())
    }

    /// Room grid shape in voxels, shell included.
    pub fn room_cells(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (a, size) in self.room_size.iter().enumerate() {
            let n = size / self.voxel_size;
            if (n - n.round()).abs() > 1e-6 * n.max(1.0) {
                return Err(Error::invalid(format!(
                    "room size {size} is not a multiple of voxel_size {}",
                    self.voxel_size
                )));
            }
            out[a] = n.round() as usize;
        }
        Ok(out)
    }
}

/// Ground-truth label volume anchored at lattice index `min`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    labels: Array3<u8>,
    num_classes: usize,
    voxel_size: Vec3,
    min: VoxelCoord,
}

impl Scene {
    pub fn from_parts(
        labels: Array3<u8>,
        num_classes: usize,
        voxel_size: Vec3,
        min: VoxelCoord,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if labels.iter().any(|&l| l as usize >= num_classes) {
            return Err(Error::invalid("scene label outside [0, num_classes)"));
        }
        if voxel_size.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("voxel_size must be positive"));
        }
        Ok(Self {
            labels,
            num_classes,
            voxel_size,
            min,
        })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.voxel_size
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Inclusive lower and exclusive upper lattice corners.
    pub fn bbox(&self) -> (VoxelCoord, VoxelCoord) {
        let [nx, ny, nz] = self.shape();
        let m = self.min;
        (
            m,
            VoxelCoord::new(m.ix + nx as i64, m.iy + ny as i64, m.iz + nz as i64),
        )
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        self.local(c).is_some()
    }

    fn local(&self, c: &VoxelCoord) -> Option<[usize; 3]> {
        let shape = self.shape();
        let rel = [c.ix - self.min.ix, c.iy - self.min.iy, c.iz - self.min.iz];
        let mut out = [0usize; 3];
        for a in 0..3 {
            if rel[a] < 0 || rel[a] >= shape[a] as i64 {
                return None;
            }
            out[a] = rel[a] as usize;
        }
        Some(out)
    }

    /// Ground-truth class; anything outside the bbox is empty.
    pub fn label_at(&self, c: &VoxelCoord) -> u8 {
        self.local(c).map_or(classes::EMPTY, |i| self.labels[i])
    }

    pub fn label_at_point(&self, p: &Vec3) -> u8 {
        self.label_at(&VoxelCoord::containing(p, &self.voxel_size))
    }

    /// Lattice coordinate of array cell `(i, j, k)`.
    pub fn coord_of(&self, i: usize, j: usize, k: usize) -> VoxelCoord {
        VoxelCoord::new(self.min.ix + i as i64, self.min.iy + j as i64, self.min.iz + k as i64)
    }

    /// Distinct class ids present, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = vec![false; self.num_classes];
        for &l in self.labels.iter() {
            seen[l as usize] = true;
        }
        (0..self.num_classes as u8).filter(|&c| seen[c as usize]).collect()
    }
}

/// Nominal furniture footprint and height in meters.
fn nominal_size(class: u8) -> [f64; 3] {
    match class {
        classes::CHAIR => [0.5, 0.5, 0.9],
        classes::BED => [2.0, 1.5, 0.6],
        classes::SOFA => [1.8, 0.9, 0.8],
        classes::TABLE => [1.2, 0.8, 0.75],
        classes::FURNITURE => [1.0, 0.5, 1.1],
        _ => [0.4, 0.3, 0.35],
    }
}

const PLACEMENT_ATTEMPTS: usize = 256;
/// Depth in voxels of the furniture-free zone in front of a doorway.
const DOOR_APPROACH: usize = 5;

/// Builds rooms chained along +x with a floor, ceiling, walls, doorways in
/// the shared walls and `furniture_per_room` axis-aligned cuboids per room.
pub fn generate_scene(cfg: &RoomConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let [rx, ny, nz] = cfg.room_cells()?;
    if rx < 3 || ny < 3 || nz < 3 {
        return Err(Error::Scene("room must be at least 3 voxels along each axis".into()));
    }
    let nx = cfg.num_rooms * (rx - 1) + 1;
    let mut labels = Array3::<u8>::zeros((nx, ny, nz));
    let vs = cfg.voxel_size;

    for ((i, j, k), l) in labels.indexed_iter_mut() {
        let shared_wall = i % (rx - 1) == 0;
        *l = if k == 0 {
            classes::FLOOR
        } else if k == nz - 1 {
            classes::CEILING
        } else if shared_wall || j == 0 || j == ny - 1 {
            classes::WALL
        } else {
            classes::EMPTY
        };
    }

    // Doorways through interior walls, centered in y.
    let door_half = ((cfg.door_width / vs) / 2.0).round().max(1.0) as usize;
    let door_top = ((cfg.door_height / vs).round() as usize).clamp(1, nz - 2);
    for r in 1..cfg.num_rooms {
        let i = r * (rx - 1);
        let jc = ny / 2;
        for j in jc.saturating_sub(door_half).max(1)..(jc + door_half).min(ny - 1) {
            for k in 1..=door_top {
                labels[[i, j, k]] = classes::EMPTY;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let furniture_classes: Vec<u8> = classes::MOVABLE
        .iter()
        .copied()
        .filter(|&c| (c as usize) < cfg.num_classes)
        .collect();
    if cfg.furniture_per_room > 0 && furniture_classes.is_empty() {
        return Err(Error::Scene("num_classes leaves no furniture classes".into()));
    }

    for r in 0..cfg.num_rooms {
        let x0 = r * (rx - 1) + 1;
        let x1 = (r + 1) * (rx - 1); // exclusive interior bound
        let mut placed: Vec<([usize; 2], [usize; 2])> = Vec::new();
        // Keep the approach to each doorway clear so the room stays connected.
        let jc = ny / 2;
        let approach = [jc.saturating_sub(door_half + 2), jc + door_half + 2];
        if r > 0 {
            placed.push(([x0, approach[0]], [(x0 + DOOR_APPROACH).min(x1), approach[1]]));
        }
        if r + 1 < cfg.num_rooms {
            placed.push(([x1.saturating_sub(DOOR_APPROACH).max(x0), approach[0]], [x1, approach[1]]));
        }
        for _ in 0..cfg.furniture_per_room {
            let mut spot = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let class = furniture_classes[rng.gen_range(0..furniture_classes.len())];
                let nominal = nominal_size(class);
                let scale: f64 = rng.gen_range(0.8..1.2);
                let (sx, sy) = if rng.gen_bool(0.5) {
                    (nominal[1], nominal[0])
                } else {
                    (nominal[0], nominal[1])
                };
                let cells = |m: f64| ((m * scale / vs).round() as usize).max(1);
                let h = ((nominal[2] / vs).round() as usize).clamp(1, nz - 2);
                let (wx, wy) = (cells(sx), cells(sy));

                // Keep one free voxel between items and around the walls.
                let (Some(span_x), Some(span_y)) = ((x1 - x0).checked_sub(wx + 2), (ny - 2).checked_sub(wy + 2)) else {
                    continue;
                };
                let px = x0 + 1 + rng.gen_range(0..=span_x);
                let py = 1 + 1 + rng.gen_range(0..=span_y);
                let lo = [px, py];
                let hi = [px + wx, py + wy];
                let clear = placed.iter().all(|(plo, phi)| {
                    hi[0] < plo[0] || phi[0] < lo[0] || hi[1] < plo[1] || phi[1] < lo[1]
                });
                if clear {
                    spot = Some((class, h, lo, hi));
                    break;
                }
            }
            let (class, h, lo, hi) = spot.ok_or_else(|| {
                Error::Scene(format!(
                    "room {r} is too small to place {} furniture items",
                    cfg.furniture_per_room
                ))
            })?;
            for i in lo[0]..hi[0] {
                for j in lo[1]..hi[1] {
                    for k in 1..=h {
                        labels[[i, j, k]] = class;
                    }
                }
            }
            placed.push((lo, hi));
        }
    }

    Scene::from_parts(labels, cfg.num_classes, Vec3::repeat(vs), VoxelCoord::new(0, 0, 0))
}
