//! Pinhole cameras on a sphere around the origin, the fixed target-view ring,
//! frustum sampling and two-view epipolar geometry.
//!
//! Conventions: right-handed world with +z up. Cameras look at the origin with
//! +z as the up hint, and use the x-right / y-down / z-forward camera frame.
//! Pixel `(row, col)` has its center at `(u, v) = (col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-diagonal of the unit cube, padded; bounds the depth range of any
/// frustum that must cover the object volume.
pub const CUBE_HALF_DIAGONAL: f64 = 0.87;

/// Focal length as a fraction of image width. With the default radius this
/// makes the unit cube span about 80% of the image from the ring's worst-case
/// azimuth.
pub const FOCAL_PER_WIDTH: f64 = 0.58;

pub const DEFAULT_RADIUS: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("a view ring needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("camera radius {0} does not clear the unit cube")]
    InsideVolume(f64),
    #[error("elevation {0} rad is outside the open interval (-90°, 90°)")]
    DegenerateElevation(f64),
    #[error("invalid frustum bounds: near {near}, far {far}, {planes} planes")]
    InvalidBounds { near: f64, far: f64, planes: usize },
    #[error("cameras share a center; the fundamental matrix is undefined")]
    IdenticalCenters,
    #[error("a vertex grid needs at least 2 vertices per side, got {0}")]
    TooFewVertices(usize),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Camera position on a sphere centered at the world origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
}

impl SphericalPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Result<Self> {
        if radius <= 3f64.sqrt() / 2.0 {
            return Err(GeometryError::InsideVolume(radius));
        }
        if elevation.abs() >= std::f64::consts::FRAC_PI_2 - 1e-6 {
            return Err(GeometryError::DegenerateElevation(elevation));
        }
        Ok(Self {
            azimuth,
            elevation,
            radius,
        })
    }

    pub fn center(&self) -> Point3<f64> {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        Point3::new(self.radius * ce * ca, self.radius * ce * sa, self.radius * se)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Default intrinsics for a `width × height` image: square pixels,
    /// principal point at the image center.
    pub fn for_image(width: usize, height: usize) -> Self {
        let f = FOCAL_PER_WIDTH * width as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Distance along the optical axis.
    pub depth: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        self.depth <= 0.0
    }

    /// True if in front of the camera and inside the `width × height` image.
    pub fn in_image(&self, width: usize, height: usize) -> bool {
        !self.behind_camera() && self.u >= 0.0 && self.v >= 0.0 && self.u <= width as f64 && self.v <= height as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub pose: SphericalPose,
    pub intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(pose: SphericalPose, intrinsics: Intrinsics) -> Self {
        let center = pose.center().coords;
        let forward = -center.normalize();
        let right = forward.cross(&Vector3::z()).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Self {
            pose,
            intrinsics,
            rotation,
            translation,
        }
    }

    /// World-to-camera rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World-to-camera `[R | t]`.
    pub fn extrinsics(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn center(&self) -> Point3<f64> {
        self.pose.center()
    }

    pub fn project(&self, p: &Point3<f64>) -> Projection {
        let c = self.rotation * p.coords + self.translation;
        let k = &self.intrinsics;
        Projection {
            u: k.fx * c.x / c.z + k.cx,
            v: k.fy * c.y / c.z + k.cy,
            depth: c.z,
        }
    }

    /// World point at optical-axis `depth` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        let k = &self.intrinsics;
        let c = Vector3::new((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
        Point3::from(self.rotation.transpose() * (c - self.translation))
    }

    /// Unit direction (world frame) of the ray through `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let c = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.rotation.transpose() * c).normalize()
    }
}

/// Image-plane center of cell `(row, col)` when the image is divided into a
/// `rows × cols` grid (the full-resolution pixel grid when it matches the image).
pub fn cell_center(intr: &Intrinsics, rows: usize, cols: usize, row: usize, col: usize) -> (f64, f64) {
    let su = intr.width as f64 / cols as f64;
    let sv = intr.height as f64 / rows as f64;
    ((col as f64 + 0.5) * su, (row as f64 + 0.5) * sv)
}

/// Parameters that fully determine a [`ViewRing`]; persisted in dataset and
/// checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingSpec {
    pub views: usize,
    /// Target elevation in degrees.
    pub elevation_deg: f64,
    pub radius: f64,
    pub image_size: usize,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl RingSpec {
    /// 16 views at 30° elevation.
    pub fn full_scale(image_size: usize) -> Self {
        Self {
            views: 16,
            elevation_deg: 30.0,
            radius: DEFAULT_RADIUS,
            image_size,
        }
    }

    /// 8 views at 30° elevation, 32×32 images.
    pub fn desk() -> Self {
        Self {
            views: 8,
            elevation_deg: 30.0,
            radius: DEFAULT_RADIUS,
            image_size: 32,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::for_image(self.image_size, self.image_size)
    }

    /// Build the ring with its input camera at azimuth 0 and `input_elevation` (radians).
    pub fn build(&self, input_elevation: f64) -> Result<ViewRing> {
        make_view_ring(self.views, self.elevation_deg.to_radians(), self.radius, self.intrinsics())?.with_input_elevation(input_elevation)
    }
}

/// The `N` fixed target cameras plus the conditioning (input) camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRing {
    pub targets: Vec<Camera>,
    pub input: Camera,
}

impl ViewRing {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Replace the input camera with one at azimuth 0 and the given elevation.
    pub fn with_input_elevation(mut self, elevation: f64) -> Result<Self> {
        let pose = SphericalPose::new(0.0, elevation, self.input.pose.radius)?;
        self.input = Camera::new(pose, self.input.intrinsics);
        Ok(self)
    }

    /// Viewpoint difference from the input camera to every target, in ring order.
    pub fn deltas(&self) -> Vec<ViewDelta> {
        self.targets
            .iter()
            .map(|t| viewpoint_difference(&self.input.pose, &t.pose))
            .collect()
    }

    /// The same ring with targets cyclically shifted so that slot `n` holds
    /// the camera previously at slot `n + shift`.
    pub fn rotated(&self, shift: usize) -> Self {
        let n = self.targets.len();
        self.permuted(&(0..n).map(|i| (i + shift) % n).collect::<Vec<_>>())
    }

    /// Targets reordered so that slot `n` holds the camera at `order[n]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.targets.len());
        Self {
            targets: order.iter().map(|&i| self.targets[i].clone()).collect(),
            input: self.input.clone(),
        }
    }

    /// Target indices sorted by azimuth offset from the input camera, wrapped
    /// to `[0, 2π)`, then by elevation. The result depends only on the set of
    /// cameras, not on the order they are listed in.
    pub fn canonical_order(&self) -> Vec<usize> {
        let key = |c: &Camera| {
            let d = (c.pose.azimuth - self.input.pose.azimuth).rem_euclid(std::f64::consts::TAU);
            (d, c.pose.elevation)
        };
        let mut order: Vec<usize> = (0..self.targets.len()).collect();
        order.sort_by(|&a, &b| {
            let (ka, kb) = (key(&self.targets[a]), key(&self.targets[b]));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        });
        order
    }
}

/// `N` cameras with azimuth `n · 2π/N` at a shared elevation; the input camera
/// starts at azimuth 0 and the same elevation.
pub fn make_view_ring(views: usize, elevation: f64, radius: f64, intrinsics: Intrinsics) -> Result<ViewRing> {
    if views < 2 {
        return Err(GeometryError::TooFewViews(views));
    }
    let step = std::f64::consts::TAU / views as f64;
    let targets = (0..views)
        .map(|n| SphericalPose::new(n as f64 * step, elevation, radius).map(|p| Camera::new(p, intrinsics)))
        .collect::<Result<Vec<_>>>()?;
    let input = targets[0].clone();
    Ok(ViewRing { targets, input })
}

/// Elevation / azimuth offset of a target camera relative to the input camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDelta {
    pub d_elevation: f64,
    pub sin_d_azimuth: f64,
    pub cos_d_azimuth: f64,
}

impl ViewDelta {
    pub fn as_array(&self) -> [f64; 3] {
        [self.d_elevation, self.sin_d_azimuth, self.cos_d_azimuth]
    }
}

pub fn viewpoint_difference(input: &SphericalPose, target: &SphericalPose) -> ViewDelta {
    let (s, c) = (target.azimuth - input.azimuth).sin_cos();
    ViewDelta {
        d_elevation: target.elevation - input.elevation,
        sin_d_azimuth: s,
        cos_d_azimuth: c,
    }
}

/// Near and far depth planes that bracket the unit cube for a camera at `radius`.
pub fn depth_range(radius: f64) -> (f64, f64) {
    (radius - CUBE_HALF_DIAGONAL, radius + CUBE_HALF_DIAGONAL)
}

/// `rows × cols × planes` world points, ordered row-major over
/// `(row, col, plane)`. Plane `d` sits at metric depth
/// `near + d · (far − near)/(planes − 1)` along the ray through the cell center.
pub fn frustum_points(
    camera: &Camera,
    rows: usize,
    cols: usize,
    planes: usize,
    near: f64,
    far: f64,
) -> Result<Vec<Point3<f64>>> {
    if near.partial_cmp(&far) != Some(std::cmp::Ordering::Less) || planes < 2 || near <= 0.0 {
        return Err(GeometryError::InvalidBounds { near, far, planes });
    }
    let step = (far - near) / (planes - 1) as f64;
    let mut out = Vec::with_capacity(rows * cols * planes);
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = cell_center(&camera.intrinsics, rows, cols, r, c);
            for d in 0..planes {
                out.push(camera.unproject(u, v, near + d as f64 * step));
            }
        }
    }
    Ok(out)
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Fundamental matrix `F` with `x_jᵀ F x_i = 0` for homogeneous pixel
/// coordinates of corresponding points, normalized to unit Frobenius norm.
pub fn fundamental_matrix(camera_i: &Camera, camera_j: &Camera) -> Result<Matrix3<f64>> {
    if (camera_i.center() - camera_j.center()).norm() < 1e-12 {
        return Err(GeometryError::IdenticalCenters);
    }
    let r = camera_j.rotation * camera_i.rotation.transpose();
    let t = camera_j.translation - r * camera_i.translation;
    let essential = skew(&t) * r;
    let ki = camera_i.intrinsics.matrix().try_inverse().expect("intrinsics are invertible");
    let kj = camera_j.intrinsics.matrix().try_inverse().expect("intrinsics are invertible");
    let f = kj.transpose() * essential * ki;
    Ok(f / f.norm())
}

/// `x_jᵀ F x_i` for pixel coordinates `(u, v)`.
pub fn epipolar_residual(f: &Matrix3<f64>, xi: (f64, f64), xj: (f64, f64)) -> f64 {
    let a = Vector3::new(xi.0, xi.1, 1.0);
    let b = Vector3::new(xj.0, xj.1, 1.0);
    b.dot(&(f * a))
}

/// `V³` points spanning `[−0.5, 0.5]³`, index `(i, j, k) ↦ (x_i, y_j, z_k)`
/// with `k` varying fastest.
pub fn cube_vertices(per_side: usize) -> Result<Vec<Point3<f64>>> {
    if per_side < 2 {
        return Err(GeometryError::TooFewVertices(per_side));
    }
    let coord = |i: usize| -0.5 + i as f64 / (per_side - 1) as f64;
    let mut out = Vec::with_capacity(per_side.pow(3));
    for i in 0..per_side {
        for j in 0..per_side {
            for k in 0..per_side {
                out.push(Point3::new(coord(i), coord(j), coord(k)));
            }
        }
    }
    Ok(out)
}

/// Continuous vertex-index coordinates of a world point in a `per_side³` cube grid.
pub fn cube_index_coords(p: &Point3<f64>, per_side: usize) -> [f64; 3] {
    let s = (per_side - 1) as f64;
    [(p.x + 0.5) * s, (p.y + 0.5) * s, (p.z + 0.5) * s]
}
