//! Exploration trajectories through the free space of a scene.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose, GeometricPrior, Vec3, VoxelCoord};
use crate::sim::scene::{classes, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub n_frames: usize,
    /// Maximum camera displacement between consecutive frames, meters.
    pub step: f64,
    pub seed: u64,
    pub camera_height: f64,
    /// Downward tilt is negative, radians.
    pub pitch: f64,
    /// Maximum change of the travel heading per frame, radians.
    pub max_turn: f64,
    /// Look-around sweep superimposed on the heading.
    pub sweep_amplitude: f64,
    pub sweep_period: f64,
    /// Minimum clearance between the camera and any occupied voxel, meters.
    pub clearance: f64,
    /// Local volume size in meters (x, y, z).
    pub volume_extent: [f64; 3],
    pub intrinsics: CameraIntrinsics,
    /// Replay poses from a trajectory JSON written by `import-poses`
    /// instead of generating a walk.
    pub pose_file: Option<PathBuf>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            n_frames: 60,
            step: 0.2,
            seed: 0,
            camera_height: 1.4,
            pitch: -0.35,
            max_turn: 0.15,
            sweep_amplitude: 0.8,
            sweep_period: 12.0,
            clearance: 0.48,
            volume_extent: [4.8, 4.8, 2.88],
            intrinsics: CameraIntrinsics::default(),
            pose_file: None,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 {
            return Err(Error::invalid("n_frames must be at least 1"));
        }
        if !(self.step > 0.0) || !(self.sweep_period > 0.0) || self.clearance < 0.0 {
            return Err(Error::invalid("step and sweep_period must be positive, clearance non-negative"));
        }
        if self.volume_extent.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::invalid("volume_extent must be positive"));
        }
        self.intrinsics.validate()
    }
}

/// Lattice-aligned origin of the world-axis-aligned local volume placed in
/// front of the camera: the box center sits half an extent ahead along the
/// horizontal heading, at camera height.
pub fn local_volume_origin(pose: &CameraPose, extent: &Vec3, voxel_size: &Vec3) -> Vec3 {
    let f = pose.forward();
    let horiz = Vec3::new(f.x, f.y, 0.0);
    let n = horiz.norm();
    let offset = if n > 1e-9 {
        horiz / n * (0.5 * extent.x.max(extent.y))
    } else {
        Vec3::zeros()
    };
    let corner = pose.translation() + offset - 0.5 * extent;
    corner
        .component_div(voxel_size)
        .map(f64::round)
        .component_mul(voxel_size)
}

/// Wraps poses into priors with the configured local volume.
pub fn priors_from_poses(
    poses: &[CameraPose],
    cfg: &TrajectoryConfig,
    voxel_size: &Vec3,
) -> Result<Vec<GeometricPrior>> {
    let extent = Vec3::from(cfg.volume_extent);
    poses
        .iter()
        .map(|pose| {
            let origin = local_volume_origin(pose, &extent, voxel_size);
            GeometricPrior::new(cfg.intrinsics, *pose, origin, extent, *voxel_size)
        })
        .collect()
}

/// 2-D free-space grid at camera height.
struct FreeGrid {
    min: [i64; 2],
    dims: [usize; 2],
    free: Vec<bool>,
}

impl FreeGrid {
    fn build(scene: &Scene, height: f64, clearance: f64) -> Self {
        let vs = scene.voxel_size();
        let (lo, hi) = scene.bbox();
        let kz = (height / vs.z).floor() as i64;
        let dims = [(hi.ix - lo.ix) as usize, (hi.iy - lo.iy) as usize];
        let r = (clearance / vs.x.min(vs.y)).ceil() as i64;
        let occupied = |ix: i64, iy: i64| {
            let c = VoxelCoord::new(ix, iy, kz);
            !scene.contains(&c) || scene.label_at(&c) != classes::EMPTY
        };
        let mut free = vec![false; dims[0] * dims[1]];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let (ix, iy) = (lo.ix + i as i64, lo.iy + j as i64);
                let mut ok = true;
                'scan: for dx in -r..=r {
                    for dy in -r..=r {
                        let (mx, my) = (dx as f64 * vs.x, dy as f64 * vs.y);
                        if (mx * mx + my * my).sqrt() > clearance + 1e-9 {
                            continue;
                        }
                        if occupied(ix + dx, iy + dy) {
                            ok = false;
                            break 'scan;
                        }
                    }
                }
                free[i * dims[1] + j] = ok;
            }
        }
        Self {
            min: [lo.ix, lo.iy],
            dims,
            free,
        }
    }

    fn index(&self, cell: [usize; 2]) -> usize {
        cell[0] * self.dims[1] + cell[1]
    }

    fn is_free(&self, cell: [usize; 2]) -> bool {
        self.free[self.index(cell)]
    }

    fn cell_of(&self, p: &Vec3, vs: &Vec3) -> [usize; 2] {
        let ix = (p.x / vs.x).floor() as i64 - self.min[0];
        let iy = (p.y / vs.y).floor() as i64 - self.min[1];
        [ix.max(0) as usize, iy.max(0) as usize]
    }

    fn center(&self, cell: [usize; 2], vs: &Vec3, z: f64) -> Vec3 {
        Vec3::new(
            (self.min[0] + cell[0] as i64) as f64 * vs.x + 0.5 * vs.x,
            (self.min[1] + cell[1] as i64) as f64 * vs.y + 0.5 * vs.y,
            z,
        )
    }

    fn neighbors(&self, c: [usize; 2]) -> impl Iterator<Item = [usize; 2]> + '_ {
        const OFFS: [(i64, i64); 8] = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];
        OFFS.iter().filter_map(move |&(dx, dy)| {
            let x = c[0] as i64 + dx;
            let y = c[1] as i64 + dy;
            if x < 0 || y < 0 || x >= self.dims[0] as i64 || y >= self.dims[1] as i64 {
                return None;
            }
            let n = [x as usize, y as usize];
            // No corner cutting past occupied cells.
            let side_a = [x as usize, c[1]];
            let side_b = [c[0], y as usize];
            (self.is_free(n) && self.is_free(side_a) && self.is_free(side_b)).then_some(n)
        })
    }

    /// Breadth-first distances from `start`; `None` for unreachable cells.
    fn bfs(&self, start: [usize; 2]) -> Vec<Option<(u32, usize)>> {
        let mut seen: Vec<Option<(u32, usize)>> = vec![None; self.free.len()];
        let si = self.index(start);
        seen[si] = Some((0, si));
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            let (d, _) = seen[self.index(c)].unwrap();
            for n in self.neighbors(c) {
                let ni = self.index(n);
                if seen[ni].is_none() {
                    seen[ni] = Some((d + 1, self.index(c)));
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    fn path(&self, from: [usize; 2], to: [usize; 2]) -> Vec<[usize; 2]> {
        let tree = self.bfs(from);
        let mut out = Vec::new();
        let mut cur = self.index(to);
        if tree[cur].is_none() {
            return out;
        }
        let start = self.index(from);
        while cur != start {
            out.push([cur / self.dims[1], cur % self.dims[1]]);
            cur = tree[cur].unwrap().1;
        }
        out.reverse();
        out
    }
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

/// Deterministic exploration walk at camera height. Waypoints alternate
/// between the low-x and high-x halves of the reachable free space, so
/// chained rooms are traversed; legs follow shortest grid paths.
pub fn generate_trajectory(scene: &Scene, cfg: &TrajectoryConfig) -> Result<Vec<GeometricPrior>> {
    cfg.validate()?;
    let vs = scene.voxel_size();
    let grid = FreeGrid::build(scene, cfg.camera_height, cfg.clearance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_616a_6563_746f);

    let all_free: Vec<[usize; 2]> = (0..grid.dims[0])
        .flat_map(|i| (0..grid.dims[1]).map(move |j| [i, j]))
        .filter(|&c| grid.is_free(c))
        .collect();
    if all_free.is_empty() {
        return Err(Error::Scene(format!(
            "no free space at camera height {} m with clearance {} m",
            cfg.camera_height, cfg.clearance
        )));
    }
    let split = {
        let mut xs: Vec<usize> = all_free.iter().map(|c| c[0]).collect();
        xs.sort_unstable();
        xs[xs.len() / 2]
    };
    let low: Vec<[usize; 2]> = all_free.iter().copied().filter(|c| c[0] < split).collect();
    let start = if low.is_empty() {
        all_free[rng.gen_range(0..all_free.len())]
    } else {
        low[rng.gen_range(0..low.len())]
    };
    let reach = grid.bfs(start);
    let reachable = |c: &[usize; 2]| reach[grid.index(*c)].is_some();
    let halves: [Vec<[usize; 2]>; 2] = [
        all_free.iter().copied().filter(|c| c[0] < split && reachable(c)).collect(),
        all_free.iter().copied().filter(|c| c[0] >= split && reachable(c)).collect(),
    ];

    let mut pos = grid.center(start, &vs, cfg.camera_height);
    let mut base_yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut path: VecDeque<Vec3> = VecDeque::new();
    let mut leg = 1usize;
    let mut poses = Vec::with_capacity(cfg.n_frames);

    for frame in 0..cfg.n_frames {
        if path.is_empty() {
            for _ in 0..8 {
                let pool = if halves[leg % 2].is_empty() {
                    &halves[(leg + 1) % 2]
                } else {
                    &halves[leg % 2]
                };
                if pool.is_empty() {
                    break;
                }
                let target = pool[rng.gen_range(0..pool.len())];
                let here = grid.cell_of(&pos, &vs);
                let cells = grid.path(here, target);
                if !cells.is_empty() {
                    path.extend(cells.into_iter().map(|c| grid.center(c, &vs, cfg.camera_height)));
                    leg += 1;
                    break;
                }
            }
        }

        if frame > 0 {
            let before = pos;
            let mut budget = cfg.step;
            while budget > 1e-12 {
                let Some(next) = path.front().copied() else { break };
                let d = (next - pos).norm();
                if d <= budget {
                    pos = next;
                    budget -= d;
                    path.pop_front();
                } else {
                    pos += (next - pos) / d * budget;
                    budget = 0.0;
                }
            }
            let moved = pos - before;
            if moved.norm() > 1e-9 {
                let heading = moved.y.atan2(moved.x);
                base_yaw += wrap_angle(heading - base_yaw).clamp(-cfg.max_turn, cfg.max_turn);
            }
        }

        let sweep = cfg.sweep_amplitude
            * (std::f64::consts::TAU * frame as f64 / cfg.sweep_period).sin();
        poses.push(CameraPose::look(pos, base_yaw + sweep, cfg.pitch));
    }

    priors_from_poses(&poses, cfg, &vs)
}
