//! Cameras, rays, the spherical UV chart and hemisphere sampling.
//!
//! Camera space follows the pinhole convention x right, y down, z forward;
//! pixel `(px, py)` covers `[px, px+1) × [py, py+1)` so its centre sits at
//! `(px + 0.5, py + 0.5)`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("focal lengths must be positive")]
    BadFocal,
    #[error("image size must be non-zero")]
    BadSize,
    #[error("point lies behind the chart (x' = {0:.3e})")]
    OutOfChart(f64),
    #[error("point coincides with the chart centre")]
    Degenerate,
    #[error("invalid ray: {0}")]
    BadRay(&'static str),
}

/// Tolerance on ‖RᵀR − I‖ (Frobenius) for a [`Camera`] rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square-pixel intrinsics with the principal point at the image centre.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Intrinsics for the image downsampled by an integer `factor`.
    pub fn downsampled(&self, factor: u32) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Pinhole camera; `rotation` maps camera axes to world axes and `center`
/// is the camera position in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    intrinsics: Intrinsics,
    rotation: Mat3,
    center: Vec3,
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Mat3, center: Vec3) -> Result<Self, GeometryError> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(GeometryError::BadFocal);
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(GeometryError::BadSize);
        }
        let dev = orthonormality_error(&rotation);
        if !(dev < ORTHONORMAL_TOL) {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        Ok(Self {
            intrinsics,
            rotation,
            center,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` as the approximate
    /// world up direction.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Self::new(intrinsics, rotation, eye)
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self { intrinsics, ..*self }
    }

    /// Ray through the centre of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        self.ray_through(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// Ray through continuous image coordinates `(x, y)`.
    pub fn ray_through(&self, x: f64, y: f64) -> Ray {
        let k = &self.intrinsics;
        let d_cam = Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        Ray::new(self.center, self.rotation * d_cam, 0.0, f64::INFINITY)
            .expect("camera rays are well formed")
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.center)
    }

    /// Continuous image coordinates of `p`, or `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let q = self.world_to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Normalizes `direction`; rejects zero directions and empty ranges.
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self, GeometryError> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::BadRay("zero or non-finite direction"));
        }
        if !(t_near < t_far) {
            return Err(GeometryError::BadRay("t_near must be below t_far"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Axis-aligned box, used as the scene volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Parametric overlap of the ray's `[t_near, t_far]` with the box.
    pub fn clip(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut lo = ray.t_near;
        let mut hi = ray.t_far;
        for i in 0..3 {
            let o = ray.origin[i];
            let d = ray.direction[i];
            if d.abs() < 1e-300 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[i] - o) * inv, (self.max[i] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            lo = lo.max(a);
            hi = hi.min(b);
        }
        (lo < hi).then_some((lo, hi))
    }
}

/// Spherical UV chart about a fixed centre `c`:
/// `u = (2/π)·asin(z')`, `v = (2/π)·atan(y'/x')` with `p' = (p − c)/‖p − c‖`.
/// Only the frontal half-space `x' > 0` is charted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UvMapper {
    pub center: [f64; 3],
}

impl UvMapper {
    pub fn new(center: Vec3) -> Self {
        Self {
            center: [center.x, center.y, center.z],
        }
    }

    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn project(&self, p: &Vec3) -> Result<[f64; 2], GeometryError> {
        let d = p - self.center();
        let n = d.norm();
        if n < 1e-9 {
            return Err(GeometryError::Degenerate);
        }
        let q = d / n;
        if q.x * q.x + q.y * q.y < 1e-24 {
            // pole: v is defined as 0
            return Ok([q.z.signum(), 0.0]);
        }
        if q.x <= 0.0 {
            return Err(GeometryError::OutOfChart(q.x));
        }
        let u = q.z.clamp(-1.0, 1.0).asin() / FRAC_PI_2;
        let v = q.y.atan2(q.x) / FRAC_PI_2;
        Ok([u, v])
    }

    /// UV and its 2×3 Jacobian with respect to `p` (row-major).
    pub fn project_with_jacobian(&self, p: &Vec3) -> Result<([f64; 2], [f64; 6]), GeometryError> {
        let uv = self.project(p)?;
        let d = p - self.center();
        let n2 = d.norm_squared();
        let (x, y, z) = (d.x, d.y, d.z);
        // u = asin(z/n)·2/π ; du/dp = (2/π) · (e_z·n² − z·d) / (n² · sqrt(x² + y²))
        let rho2 = x * x + y * y;
        let rho = rho2.sqrt();
        let ku = 1.0 / (FRAC_PI_2 * n2 * rho.max(1e-300));
        let du = [-z * x * ku, -z * y * ku, (n2 - z * z) * ku];
        // v = atan2(y, x)·2/π ; dv/dp = (2/π) · (−y, x, 0)/(x² + y²)
        let kv = 1.0 / (FRAC_PI_2 * rho2.max(1e-300));
        let dv = [-y * kv, x * kv, 0.0];
        Ok((uv, [du[0], du[1], du[2], dv[0], dv[1], dv[2]]))
    }

    /// Unit direction from the centre for chart coordinates `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        let (st, ct) = (u * FRAC_PI_2).sin_cos();
        let (sp, cp) = (v * FRAC_PI_2).sin_cos();
        Vec3::new(ct * cp, ct * sp, st)
    }
}

/// Corner-aligned uniform lattice coordinate `k` of `n` samples on [−1, 1].
pub fn lattice(k: usize, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    -1.0 + 2.0 * k as f64 / (n - 1) as f64
}

/// Rays from the unit sphere about the chart centre towards the centre.
/// Row `i` carries `u = 1 − 2i/(R−1)` (elevation `u·π/2`, top row first);
/// column `j` carries `v = −1 + 2j/(R−1)` (azimuth `v·π/2`).
#[derive(Clone, Debug)]
pub struct HemisphereGrid {
    pub resolution: usize,
    pub rays: Vec<Ray>,
    pub uvs: Vec<[f64; 2]>,
}

impl HemisphereGrid {
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.resolution + j
    }
}

pub fn hemisphere_rays(resolution: usize, mapper: &UvMapper) -> HemisphereGrid {
    hemisphere_rays_within(resolution, mapper, 1.0)
}

/// As [`hemisphere_rays`] with the lattice scaled into `|u|, |v| ≤ limit`.
/// Scaling rather than clamping keeps every row and column distinct.
pub fn hemisphere_rays_within(resolution: usize, mapper: &UvMapper, limit: f64) -> HemisphereGrid {
    assert!(resolution >= 2, "hemisphere grid needs R >= 2");
    let c = mapper.center();
    let mut rays = Vec::with_capacity(resolution * resolution);
    let mut uvs = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let u = -limit * lattice(i, resolution);
        for j in 0..resolution {
            let v = limit * lattice(j, resolution);
            let dir = mapper.unproject(u, v);
            rays.push(Ray::new(c + dir, -dir, 0.0, 1.0).expect("unit direction"));
            uvs.push([u, v]);
        }
    }
    HemisphereGrid {
        resolution,
        rays,
        uvs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn origin_mapper() -> UvMapper {
        UvMapper::new(Vec3::zeros())
    }

    #[test]
    fn chart_reference_points() {
        let m = origin_mapper();
        let uv = m.project(&Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(uv, [0.0, 0.0]);
        let uv = m.project(&Vec3::new(FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2)).unwrap();
        assert!((uv[0] - 0.5).abs() < 1e-15 && uv[1].abs() < 1e-15);
        let uv = m.project(&Vec3::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0)).unwrap();
        assert!(uv[0].abs() < 1e-15 && (uv[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn chart_errors() {
        let m = UvMapper::new(Vec3::new(0.1, 0.2, 0.3));
        assert_eq!(m.project(&Vec3::new(0.1, 0.2, 0.3)), Err(GeometryError::Degenerate));
        assert!(matches!(
            m.project(&Vec3::new(-0.5, 0.2, 0.3)),
            Err(GeometryError::OutOfChart(_))
        ));
    }

    #[test]
    fn unproject_reference_points() {
        let m = origin_mapper();
        assert!((m.unproject(0.0, 0.0) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        for v in [-1.0, -0.3, 0.0, 0.8] {
            let p = m.unproject(1.0, v);
            assert!((p - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
            assert_eq!(m.project(&p).unwrap(), [1.0, 0.0]);
        }
    }

    #[test]
    fn chart_jacobian_matches_finite_differences() {
        let m = UvMapper::new(Vec3::new(-0.25, 0.0, 0.0));
        let p = Vec3::new(0.2, 0.13, -0.21);
        let (_, jac) = m.project_with_jacobian(&p).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut pp = p;
            pp[k] += h;
            let mut pm = p;
            pm[k] -= h;
            let a = m.project(&pp).unwrap();
            let b = m.project(&pm).unwrap();
            for o in 0..2 {
                let num = (a[o] - b[o]) / (2.0 * h);
                assert!((num - jac[o * 3 + k]).abs() < 1e-8, "d{o}/d{k}");
            }
        }
    }

    #[test]
    fn principal_pixel_looks_down_axis_and_symmetry() {
        let k = Intrinsics::centered(50.0, 64, 64);
        let cam = Camera::look_at(k, Vec3::new(2.0, 0.0, 0.0), Vec3::zeros(), Vec3::z()).unwrap();
        let axis = cam.rotation().column(2).into_owned();
        let r = cam.ray_through(32.0, 32.0);
        assert!((r.direction - axis).norm() < 1e-15);
        let a = cam.ray_through(32.0 - 7.0, 32.0 + 3.0).direction;
        let b = cam.ray_through(32.0 + 7.0, 32.0 - 3.0).direction;
        assert!((a + b - 2.0 * a.dot(&axis) * axis).norm() < 1e-14);
        assert!((a.dot(&axis) - b.dot(&axis)).abs() < 1e-15);
    }

    #[test]
    fn hemisphere_center_ray_and_small_grid() {
        let m = UvMapper::new(Vec3::new(-0.25, 0.0, 0.0));
        let g = hemisphere_rays(3, &m);
        assert_eq!(g.rays.len(), 9);
        let mid = g.rays[g.index(1, 1)];
        assert!((mid.origin - Vec3::new(0.75, 0.0, 0.0)).norm() < 1e-15);
        assert!((mid.direction - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        let us: Vec<f64> = (0..3).map(|i| g.uvs[g.index(i, 0)][0]).collect();
        let vs: Vec<f64> = (0..3).map(|j| g.uvs[g.index(0, j)][1]).collect();
        assert_eq!(us, vec![1.0, 0.0, -1.0]);
        assert_eq!(vs, vec![-1.0, 0.0, 1.0]);
        assert_eq!(hemisphere_rays(2, &m).rays.len(), 4);
    }

    #[test]
    fn hemisphere_lattice_is_uniform() {
        let m = origin_mapper();
        let g = hemisphere_rays(9, &m);
        for i in 0..9 {
            for j in 0..9 {
                let uv = g.uvs[g.index(i, j)];
                assert_eq!(uv, [-lattice(i, 9), lattice(j, 9)]);
                assert_eq!(lattice(j, 9), -1.0 + j as f64 * 0.25);
            }
        }
    }

    #[test]
    fn limited_lattice_is_scaled_not_clamped() {
        let g = hemisphere_rays_within(128, &origin_mapper(), 0.98);
        let us: Vec<f64> = (0..128).map(|i| g.uvs[g.index(i, 0)][0]).collect();
        assert_eq!((us[0], us[127]), (0.98, -0.98));
        let step = 0.98 * 2.0 / 127.0;
        for w in us.windows(2) {
            assert!((w[0] - w[1] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn box_clip() {
        let b = Aabb::new([-1.0; 3], [1.0; 3]);
        let r = Ray::new(Vec3::new(3.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), 0.0, 10.0).unwrap();
        assert_eq!(b.clip(&r), Some((2.0, 4.0)));
        let miss = Ray::new(Vec3::new(3.0, 2.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), 0.0, 10.0).unwrap();
        assert_eq!(b.clip(&miss), None);
    }

    proptest! {
        #[test]
        fn backproject_then_project_returns_pixel(
            px in 0u32..64, py in 0u32..48, az in -0.8f64..0.8, el in -0.5f64..0.5, dist in 1.0f64..3.0
        ) {
            let k = Intrinsics { fx: 61.0, fy: 58.5, cx: 31.2, cy: 24.7, width: 64, height: 48 };
            let eye = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * dist;
            let cam = Camera::look_at(k, eye, Vec3::zeros(), Vec3::z()).unwrap();
            let ray = cam.pixel_ray(px, py);
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
            let q = cam.project(&ray.at(1.7)).unwrap();
            prop_assert!((q[0] - (px as f64 + 0.5)).abs() < 1e-6);
            prop_assert!((q[1] - (py as f64 + 0.5)).abs() < 1e-6);
        }

        #[test]
        fn chart_round_trips(u in -0.99f64..0.99, v in -0.99f64..0.99) {
            let m = UvMapper::new(Vec3::new(0.3, -0.1, 0.2));
            let p = m.center() + m.unproject(u, v) * 0.7;
            let uv = m.project(&p).unwrap();
            prop_assert!((uv[0] - u).abs() < 1e-9 && (uv[1] - v).abs() < 1e-9);
        }

        #[test]
        fn hemisphere_hits_project_to_grid_uv(
            r in 3usize..24, t in 0.0f64..0.999, pick in 0usize..10_000
        ) {
            let m = UvMapper::new(Vec3::new(-0.25, 0.05, 0.0));
            let g = hemisphere_rays(r, &m);
            // pole rows and the v = ±1 rim columns (x' = 0) are excluded
            let i = 1 + pick % (r - 2);
            let j = 1 + (pick / r) % (r - 2);
            let ray = g.rays[g.index(i, j)];
            let uv = m.project(&ray.at(t)).unwrap();
            let want = g.uvs[g.index(i, j)];
            prop_assert!((uv[0] - want[0]).abs() < 1e-9 && (uv[1] - want[1]).abs() < 1e-9);
        }
    }
}
