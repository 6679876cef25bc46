//! Pinhole projection, frustum visibility, local-volume indexing and the
//! sampling/encoding helpers shared by every fusion stage.
//!
//! Conventions: the world frame is right-handed with `z` up. Camera frames
//! follow the usual computer-vision layout (`x` right, `y` down, `z` along the
//! optical axis). Poses map camera coordinates into the world.

use std::ops::Range;

use nalgebra::{Matrix3, Vector3};
use ndarray::ArrayView4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;
const GRID_SHAPE_TOL: f64 = 1e-9;
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGeometry("image size must be at least 1x1".into()));
        }
        Ok(())
    }

    /// Centered principal point with the given horizontal field of view.
    pub fn from_hfov(width: u32, height: u32, hfov_rad: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_rad).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        // 160x120 sensor, ~67 degree horizontal field of view.
        Self {
            fx: 120.0,
            fy: 120.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// Row-major on-disk form of a [`CameraPose`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        CameraPose::new(rot, Vec3::from(r.translation))
    }
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        let r = p.rotation;
        PoseRecord {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("pose contains non-finite values".into()));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidGeometry(format!(
                "rotation is not orthonormal (max deviation {err:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidGeometry(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `position` looking along heading `yaw` (radians from +x,
    /// counter-clockwise) tilted by `pitch` (positive looks up).
    pub fn look(position: Vec3, yaw: f64, pitch: f64) -> Self {
        let forward = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
        let right = Vec3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self {
            rotation,
            translation: position,
        }
    }

    /// Builds a pose from a unit quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4], translation: Vec3) -> Result<Self> {
        let [w, x, y, z] = q;
        let rotation = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Per-frame camera and local-volume description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricPrior {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub origin: Vec3,
    pub extent: Vec3,
    pub voxel_size: Vec3,
}

impl GeometricPrior {
    pub fn new(
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        origin: Vec3,
        extent: Vec3,
        voxel_size: Vec3,
    ) -> Result<Self> {
        let prior = Self {
            intrinsics,
            pose,
            origin,
            extent,
            voxel_size,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("origin must be finite".into()));
        }
        for a in 0..3 {
            if !(self.extent[a] > 0.0 && self.voxel_size[a] > 0.0)
                || !self.extent[a].is_finite()
            {
                return Err(Error::InvalidGeometry(
                    "extent and voxel size must be positive and finite".into(),
                ));
            }
            let n = self.extent[a] / self.voxel_size[a];
            if (n - n.round()).abs() > GRID_SHAPE_TOL * n.max(1.0) {
                return Err(Error::InvalidGeometry(format!(
                    "extent/voxel_size along axis {a} is {n}, not an integer"
                )));
            }
        }
        Ok(())
    }

    /// Local grid shape `(X_l, Y_l, Z_l)`.
    pub fn grid_shape(&self) -> [usize; 3] {
        let n = self.extent.component_div(&self.voxel_size);
        [n.x.round() as usize, n.y.round() as usize, n.z.round() as usize]
    }

    /// World-space center of local voxel `(i, j, k)`.
    pub fn local_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5).component_mul(&self.voxel_size)
    }

    /// Global lattice index ranges whose voxel centers fall inside the local box.
    pub fn lattice_ranges(&self) -> [Range<i64>; 3] {
        std::array::from_fn(|a| {
            let vs = self.voxel_size[a];
            let lo = (self.origin[a] / vs - 0.5 - GRID_SHAPE_TOL).ceil() as i64;
            let hi = ((self.origin[a] + self.extent[a]) / vs - 0.5 - GRID_SHAPE_TOL).ceil() as i64;
            lo..hi
        })
    }

    /// Normalizing length for camera-frame coordinates fed to the positional
    /// encoding: the largest local-volume side.
    pub fn encoding_scale(&self) -> f64 {
        self.extent.max()
    }
}

/// Integer index on the run-wide global voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelCoord {
    pub const fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    pub fn center(&self, voxel_size: &Vec3) -> Vec3 {
        Vec3::new(
            (self.ix as f64 + 0.5) * voxel_size.x,
            (self.iy as f64 + 0.5) * voxel_size.y,
            (self.iz as f64 + 0.5) * voxel_size.z,
        )
    }

    /// Lattice voxel containing world point `p`.
    pub fn containing(p: &Vec3, voxel_size: &Vec3) -> Self {
        Self::new(
            (p.x / voxel_size.x).floor() as i64,
            (p.y / voxel_size.y).floor() as i64,
            (p.z / voxel_size.z).floor() as i64,
        )
    }

    pub fn as_array(&self) -> [i64; 3] {
        [self.ix, self.iy, self.iz]
    }
}

/// Pinhole projection of a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth along the optical axis, meters.
    pub depth: f64,
}

impl ImagePoint {
    pub fn in_image(&self, k: &CameraIntrinsics) -> bool {
        self.u >= 0.0 && self.u < k.width as f64 && self.v >= 0.0 && self.v < k.height as f64
    }
}

/// Projects `p_world` into the image. `None` marks a point behind the camera.
pub fn project_to_image(p_world: &Vec3, prior: &GeometricPrior) -> Option<ImagePoint> {
    project_camera(&prior.pose.world_to_camera(p_world), &prior.intrinsics)
}

fn project_camera(pc: &Vec3, k: &CameraIntrinsics) -> Option<ImagePoint> {
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(ImagePoint {
        u: k.fx * pc.x / pc.z + k.cx,
        v: k.fy * pc.y / pc.z + k.cy,
        depth: pc.z,
    })
}

/// Inverse of [`project_to_image`].
pub fn unproject(pt: &ImagePoint, prior: &GeometricPrior) -> Vec3 {
    let k = &prior.intrinsics;
    let pc = Vec3::new(
        (pt.u - k.cx) / k.fx * pt.depth,
        (pt.v - k.cy) / k.fy * pt.depth,
        pt.depth,
    );
    prior.pose.camera_to_world(&pc)
}

/// Global lattice voxels inside the local volume whose centers project into
/// the image with positive depth, sorted by `(ix, iy, iz)`.
pub fn visible_voxels(prior: &GeometricPrior) -> Vec<VoxelCoord> {
    let [rx, ry, rz] = prior.lattice_ranges();
    let mut out = Vec::new();
    for ix in rx {
        for iy in ry.clone() {
            for iz in rz.clone() {
                let c = VoxelCoord::new(ix, iy, iz);
                let p = c.center(&prior.voxel_size);
                if let Some(pt) = project_to_image(&p, prior) {
                    if pt.in_image(&prior.intrinsics) {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// Continuous local-grid index of a world point; integer values land on
/// local voxel centers.
pub fn world_to_local_index(p_world: &Vec3, prior: &GeometricPrior) -> Vec3 {
    (p_world - prior.origin).component_div(&prior.voxel_size) - Vec3::repeat(0.5)
}

/// Trilinear interpolation of a `[X, Y, Z, C]` grid at a continuous index.
/// Corners outside the grid contribute zero.
pub fn trilinear_sample(grid: ArrayView4<'_, f64>, idx: &Vec3) -> Vec<f64> {
    let mut out = vec![0.0; grid.shape()[3]];
    trilinear_sample_into(grid, idx, &mut out);
    out
}

/// Allocation-free form of [`trilinear_sample`]; `out` must have `C` slots.
pub fn trilinear_sample_into(grid: ArrayView4<'_, f64>, idx: &Vec3, out: &mut [f64]) {
    let shape = grid.shape();
    debug_assert_eq!(out.len(), shape[3]);
    out.fill(0.0);
    let base = idx.map(f64::floor);
    let frac = idx - base;
    for corner in 0..8usize {
        let mut w = 1.0;
        let mut pos = [0i64; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            pos[a] = base[a] as i64 + hi as i64;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).any(|a| pos[a] < 0 || pos[a] >= shape[a] as i64) {
            continue;
        }
        let lane = grid.slice(ndarray::s![pos[0] as usize, pos[1] as usize, pos[2] as usize, ..]);
        for (o, v) in out.iter_mut().zip(lane.iter()) {
            *o += w * v;
        }
    }
}

/// Proximity of pixel `(u, v)` to the image border: 0 at the center, 1 on
/// (or beyond) the border.
pub fn boundary_proximity(u: f64, v: f64, k: &CameraIntrinsics) -> f64 {
    let nu = u / k.width as f64;
    let nv = v / k.height as f64;
    let margin = nu.min(1.0 - nu).min(nv).min(1.0 - nv);
    (1.0 - 2.0 * margin).clamp(0.0, 1.0)
}

/// Sinusoidal encoding: for each coordinate and band `j`, emits
/// `sin(2^j pi x), cos(2^j pi x)`.
pub fn sinusoidal_encode(coords: &[f64], num_bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * coords.len() * num_bands);
    for &x in coords {
        let mut freq = std::f64::consts::PI;
        for _ in 0..num_bands {
            let (s, c) = (freq * x).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
    out
}

/// Number of raw coordinates fed to the positional encoding: camera-frame
/// xyz plus normalized image uv.
pub const POSITION_INPUTS: usize = 5;

/// Positional encoding of a world point under `prior`. Camera-frame
/// coordinates are divided by [`GeometricPrior::encoding_scale`] and image
/// coordinates by the image size. Returns `None` behind the camera.
pub fn positional_encoding(p_world: &Vec3, prior: &GeometricPrior, num_bands: usize) -> Option<Vec<f64>> {
    let pc = prior.pose.world_to_camera(p_world);
    let pt = project_camera(&pc, &prior.intrinsics)?;
    let s = prior.encoding_scale();
    let k = &prior.intrinsics;
    let raw = [
        pc.x / s,
        pc.y / s,
        pc.z / s,
        pt.u / k.width as f64,
        pt.v / k.height as f64,
    ];
    Some(sinusoidal_encode(&raw, num_bands))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;

    fn prior_identity(origin: Vec3, extent: Vec3, vs: f64) -> GeometricPrior {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        GeometricPrior::new(k, CameraPose::identity(), origin, extent, Vec3::repeat(vs)).unwrap()
    }

    #[test]
    fn principal_axis_projects_to_principal_point() {
        let k = CameraIntrinsics::new(321.0, 123.0, 40.5, 77.25, 90, 160).unwrap();
        let prior = GeometricPrior::new(
            k,
            CameraPose::identity(),
            Vec3::zeros(),
            Vec3::repeat(1.0),
            Vec3::repeat(0.5),
        )
        .unwrap();
        let pt = project_to_image(&Vec3::new(0.0, 0.0, 2.0), &prior).unwrap();
        assert_eq!((pt.u, pt.v, pt.depth), (40.5, 77.25, 2.0));
    }

    #[test]
    fn pinhole_arithmetic() {
        let prior = prior_identity(Vec3::zeros(), Vec3::repeat(1.0), 0.5);
        let pt = project_to_image(&Vec3::new(0.1, 0.0, 1.0), &prior).unwrap();
        assert_abs_diff_eq!(pt.u, 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pt.v, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pt.depth, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_none() {
        let prior = prior_identity(Vec3::zeros(), Vec3::repeat(1.0), 0.5);
        assert!(project_to_image(&Vec3::new(0.0, 0.0, -1.0), &prior).is_none());
        assert!(project_to_image(&Vec3::new(0.0, 0.0, 0.0), &prior).is_none());
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(skew, Vec3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraPose::new(reflect, Vec3::zeros()).is_err());
        let k = CameraIntrinsics::default();
        let bad = GeometricPrior::new(
            k,
            CameraPose::identity(),
            Vec3::zeros(),
            Vec3::new(1.0, 1.0, 1.05),
            Vec3::repeat(0.1),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn volume_inside_frustum_is_fully_visible() {
        // 1m cube at depth 2..3 in front of a 90 degree camera.
        let prior = prior_identity(Vec3::new(-0.5, -0.5, 2.0), Vec3::repeat(1.0), 0.25);
        let vis = visible_voxels(&prior);
        assert_eq!(vis.len(), 4 * 4 * 4);
        assert_eq!(vis, visible_voxels(&prior));
        assert!(vis.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn voxel_projecting_past_right_edge_is_dropped() {
        // fx=100, cx=50, W=100: the single voxel centered at (0.53, -0.01, 0.99)
        // lands at u = 100 * 0.53 / 0.99 + 50 > W + 3.
        let prior = prior_identity(Vec3::new(0.52, -0.02, 0.98), Vec3::repeat(0.02), 0.02);
        let c = VoxelCoord::new(26, -1, 49);
        assert_eq!(prior.lattice_ranges(), [26..27, -1..0, 49..50]);
        let pt = project_to_image(&c.center(&prior.voxel_size), &prior).unwrap();
        assert!(pt.u > 103.0 && pt.v < 100.0);
        assert!(visible_voxels(&prior).is_empty());
    }

    #[test]
    fn local_index_offsets() {
        let vs = Vec3::new(0.1, 0.2, 0.3);
        let origin = Vec3::new(1.0, -2.0, 0.5);
        let k = CameraIntrinsics::default();
        let prior =
            GeometricPrior::new(k, CameraPose::identity(), origin, Vec3::new(1.0, 2.0, 3.0), vs).unwrap();
        let at = |p: Vec3| world_to_local_index(&p, &prior);
        assert_abs_diff_eq!(at(origin + 0.5 * vs), Vec3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(at(origin), Vec3::repeat(-0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(at(origin + 1.5 * vs), Vec3::repeat(1.0), epsilon = 1e-12);
    }

    #[test]
    fn trilinear_lattice_and_midpoint() {
        let grid = Array4::from_shape_fn((3, 2, 2, 2), |(x, y, z, c)| {
            (x * 7 + y * 3 + z * 5) as f64 + 10.0 * c as f64 + 0.25 * (x * y) as f64
        });
        let at = trilinear_sample(grid.view(), &Vec3::new(2.0, 1.0, 0.0));
        assert_eq!(at, vec![grid[[2, 1, 0, 0]], grid[[2, 1, 0, 1]]]);
        let mid = trilinear_sample(grid.view(), &Vec3::new(0.5, 1.0, 1.0));
        for c in 0..2 {
            assert_abs_diff_eq!(mid[c], 0.5 * (grid[[0, 1, 1, c]] + grid[[1, 1, 1, c]]), epsilon = 1e-12);
        }
    }

    #[test]
    fn trilinear_zero_pads_outside() {
        let grid = Array4::from_elem((2, 2, 2, 1), 1.0);
        let v = trilinear_sample(grid.view(), &Vec3::new(-0.5, 0.0, 0.0));
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
        let far = trilinear_sample(grid.view(), &Vec3::new(5.0, 5.0, 5.0));
        assert_eq!(far[0], 0.0);
    }

    #[test]
    fn boundary_values() {
        let k = CameraIntrinsics::new(10.0, 10.0, 0.0, 0.0, 200, 100).unwrap();
        assert_abs_diff_eq!(boundary_proximity(100.0, 50.0, &k), 0.0);
        assert_abs_diff_eq!(boundary_proximity(0.0, 50.0, &k), 1.0);
        assert_abs_diff_eq!(boundary_proximity(50.0, 50.0, &k), 0.5, epsilon = 1e-12);
        assert_eq!(boundary_proximity(-20.0, 50.0, &k), 1.0);
        assert_eq!(boundary_proximity(100.0, 130.0, &k), 1.0);
    }

    #[test]
    fn sinusoidal_shapes_and_values() {
        let z = sinusoidal_encode(&[0.0, 0.0, 0.0], 4);
        assert_eq!(z.len(), 24);
        for pair in z.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(sinusoidal_encode(&[0.1; 5], 4).len(), 40);
        let h = sinusoidal_encode(&[0.5], 1);
        assert_abs_diff_eq!(h[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn quaternion_rotation_about_z() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let p = CameraPose::from_quaternion([s, 0.0, 0.0, s], Vec3::zeros()).unwrap();
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(*p.rotation(), expect, epsilon = 1e-12);
    }

    #[test]
    fn look_pose_is_valid_rotation() {
        for i in 0..16 {
            let yaw = i as f64 * 0.7;
            let p = CameraPose::look(Vec3::new(1.0, 2.0, 1.4), yaw, -0.3);
            assert!(CameraPose::new(*p.rotation(), *p.translation()).is_ok());
            assert_abs_diff_eq!(p.forward().z, (-0.3f64).sin(), epsilon = 1e-12);
        }
    }
}
