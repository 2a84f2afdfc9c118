//! Ray/box geometry: vectors, pinhole cameras, slab intersection.
//!
//! Everything here is pure and double precision. Grid traversal lives in
//! [`crate::grid`] next to the sparse structure it walks.

use crate::error::{Error, Result};

/// 3-component vector in world units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix, used for camera and instance rotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3 {
    pub rows: [[f64; 3]; 3],
}

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3 {
        rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3 { rows: [r0, r1, r2] }
    }

    pub fn from_cols(c0: Vec3, c1: Vec3, c2: Vec3) -> Self {
        Mat3 {
            rows: [
                [c0.x, c1.x, c2.x],
                [c0.y, c1.y, c2.y],
                [c0.z, c1.z, c2.z],
            ],
        }
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        Vec3::new(
            self.rows[0][0] * v.x + self.rows[0][1] * v.y + self.rows[0][2] * v.z,
            self.rows[1][0] * v.x + self.rows[1][1] * v.y + self.rows[1][2] * v.z,
            self.rows[2][0] * v.x + self.rows[2][1] * v.y + self.rows[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let r = &self.rows;
        Mat3::from_rows(
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rows[i][k] * o.rows[k][j]).sum();
            }
        }
        Mat3 { rows: out }
    }

    /// Rotation by `angle_rad` about a coordinate axis (0 = x, 1 = y, 2 = z).
    pub fn rotation_axis(axis: usize, angle_rad: f64) -> Mat3 {
        let (s, c) = angle_rad.sin_cos();
        match axis {
            0 => Mat3::from_rows([1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]),
            1 => Mat3::from_rows([c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]),
            _ => Mat3::from_rows([c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]),
        }
    }

    /// Max absolute deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.transpose().mul_mat(self);
        let mut err = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((rtr.rows[i][j] - want).abs());
            }
        }
        err
    }
}

/// Half-infinite line with unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing the direction.
    pub fn new(origin: Vec3, direction: Vec3) -> Ray {
        Ray {
            origin,
            direction: direction.normalized(),
        }
    }

    pub fn at(&self, z: f64) -> Vec3 {
        self.origin + self.direction * z
    }
}

/// Axis-aligned box, `min <= max` componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn half_diagonal(&self) -> f64 {
        (self.extent() * 0.5).norm()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

/// One ray/voxel overlap, distances along the ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelHit {
    pub voxel_id: u32,
    pub z_in: f64,
    pub z_out: f64,
}

/// Pinhole camera with a camera-to-world pose.
///
/// Camera frame: +x right, +y down, +z forward (the optical axis). Pixel
/// `(px, py)` in continuous image coordinates maps to the camera-frame
/// direction `((px - cx)/f, (py - cy)/f, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub focal: f64,
    pub principal: (f64, f64),
    pub width: u32,
    pub height: u32,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        focal: f64,
        principal: (f64, f64),
        width: u32,
        height: u32,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Camera> {
        if !focal.is_finite() || focal <= 0.0 {
            return Err(Error::InvalidCamera(format!("focal {focal} must be > 0")));
        }
        let err = rotation.orthonormality_error();
        if err > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (deviation {err:.2e})"
            )));
        }
        if !translation.is_finite() {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(Camera {
            focal,
            principal,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// The optical axis (camera +z) in world coordinates.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.mul_vec(Vec3::new(0.0, 0.0, 1.0))
    }

    /// Camera looking from `eye` toward `target`, with `up` fixing the roll.
    pub fn look_at(
        focal: f64,
        width: u32,
        height: u32,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
    ) -> Result<Camera> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidCamera(
                "view direction parallel to up vector".into(),
            ));
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_cols(right, down, forward);
        Camera::new(
            focal,
            (width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            rotation,
            eye,
        )
    }

    /// Projects a world-space direction back to pixel coordinates.
    ///
    /// Inverse of [`pixel_ray`]; returns `None` when the direction points
    /// behind the image plane.
    pub fn project_direction(&self, dir_world: Vec3) -> Option<(f64, f64)> {
        let d = self.rotation.transpose().mul_vec(dir_world);
        if d.z <= 0.0 {
            return None;
        }
        Some((
            self.principal.0 + self.focal * d.x / d.z,
            self.principal.1 + self.focal * d.y / d.z,
        ))
    }
}

/// Ray through continuous pixel coordinates `(px, py)`.
pub fn pixel_ray(camera: &Camera, px: f64, py: f64) -> Result<Ray> {
    if !(0.0..camera.width as f64).contains(&px) || !(0.0..camera.height as f64).contains(&py) {
        return Err(Error::PixelOutOfBounds {
            px,
            py,
            width: camera.width,
            height: camera.height,
        });
    }
    let dir_cam = Vec3::new(
        (px - camera.principal.0) / camera.focal,
        (py - camera.principal.1) / camera.focal,
        1.0,
    );
    Ok(Ray::new(camera.center(), camera.rotation.mul_vec(dir_cam)))
}

/// Slab test against an axis-aligned box.
///
/// Returns entry/exit distances clipped to `z >= 0`. Misses, boxes entirely
/// behind the origin, and grazing contacts (`z_in == z_out`) all yield
/// `None`. An origin inside the box yields `z_in == 0`.
pub fn intersect_aabb(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin.get(axis);
        let d = ray.direction.get(axis);
        let lo = b.min.get(axis);
        let hi = b.max.get(axis);
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let inv = 1.0 / d;
            let (ta, tb) = ((lo - o) * inv, (hi - o) * inv);
            let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    let z_in = t0.max(0.0);
    if t1 > z_in {
        Some((z_in, t1))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera::new(
            100.0,
            (64.0, 48.0),
            128,
            96,
            Mat3::rotation_axis(1, 0.4).mul_mat(&Mat3::rotation_axis(0, -0.2)),
            Vec3::new(0.3, -1.0, 2.0),
        )
        .unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = test_camera();
        let ray = pixel_ray(&cam, 64.0, 48.0).unwrap();
        let axis = cam.optical_axis();
        assert!((ray.direction - axis).norm() < 1e-12);
        assert_eq!(ray.origin, cam.center());
    }

    #[test]
    fn focal_offset_pixel_is_45_degrees() {
        let cam = Camera::new(
            50.0,
            (64.0, 48.0),
            128,
            96,
            Mat3::rotation_axis(1, 0.4),
            Vec3::ZERO,
        )
        .unwrap();
        // px = cx + focal puts the ray at 45 degrees in the image x-plane.
        let ray = pixel_ray(&cam, 64.0 + 50.0, 48.0).unwrap();
        let cosang = ray.direction.dot(cam.optical_axis());
        assert!((cosang - (0.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pixel_ray_round_trips_through_projection() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let px = rng.gen_range(0.0..cam.width as f64);
            let py = rng.gen_range(0.0..cam.height as f64);
            let ray = pixel_ray(&cam, px, py).unwrap();
            let (qx, qy) = cam.project_direction(ray.direction).unwrap();
            assert!((qx - px).abs() < 1e-9 && (qy - py).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let cam = test_camera();
        assert!(pixel_ray(&cam, 128.0, 10.0).is_err());
        assert!(pixel_ray(&cam, -0.1, 10.0).is_err());
        assert!(pixel_ray(&cam, 10.0, 96.0).is_err());
    }

    #[test]
    fn slab_axis_aligned_case() {
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let cube = Aabb::new(Vec3::splat(-0.5), Vec3::splat(0.5));
        assert_eq!(intersect_aabb(&ray, &cube), Some((1.5, 2.5)));
    }

    #[test]
    fn slab_disjoint_misses() {
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let cube = Aabb::new(Vec3::new(-0.5, 9.5, -0.5), Vec3::new(0.5, 10.5, 0.5));
        assert_eq!(intersect_aabb(&ray, &cube), None);
    }

    #[test]
    fn slab_origin_inside_clips_to_zero() {
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0));
        let cube = Aabb::new(Vec3::splat(-0.5), Vec3::splat(0.5));
        assert_eq!(intersect_aabb(&ray, &cube), Some((0.0, 0.5)));
    }

    #[test]
    fn slab_box_behind_origin_misses() {
        let ray = Ray::new(Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let cube = Aabb::new(Vec3::splat(-0.5), Vec3::splat(0.5));
        assert_eq!(intersect_aabb(&ray, &cube), None);
    }

    #[test]
    fn slab_zero_extent_box_is_a_miss() {
        let ray = Ray::new(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let flat = Aabb::new(Vec3::splat(0.0), Vec3::new(0.0, 1.0, 1.0));
        assert_eq!(intersect_aabb(&ray, &flat), None);
    }

    /// Independent oracle: clip the parametric interval against each of
    /// the six bounding planes one at a time.
    fn six_plane_clip(ray: &Ray, b: &Aabb) -> Option<(f64, f64)> {
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        for axis in 0..3 {
            for (plane, keep_below) in [(b.min.get(axis), false), (b.max.get(axis), true)] {
                let o = ray.origin.get(axis);
                let d = ray.direction.get(axis);
                if d == 0.0 {
                    let inside = if keep_below { o <= plane } else { o >= plane };
                    if !inside {
                        return None;
                    }
                } else {
                    let t = (plane - o) / d;
                    let entering = (d > 0.0) != keep_below;
                    if entering {
                        lo = lo.max(t);
                    } else {
                        hi = hi.min(t);
                    }
                }
            }
        }
        if hi > lo {
            Some((lo, hi))
        } else {
            None
        }
    }

    #[test]
    fn slab_matches_six_plane_oracle_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let origin = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if dir.norm() < 1e-6 {
                continue;
            }
            let ray = Ray::new(origin, dir);
            let a = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let e = Vec3::new(
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
                rng.gen_range(0.0..2.0),
            );
            let b = Aabb::new(a, a + e);
            match (intersect_aabb(&ray, &b), six_plane_clip(&ray, &b)) {
                (None, None) => {}
                (Some((i0, o0)), Some((i1, o1))) => {
                    assert!((i0 - i1).abs() < 1e-9 && (o0 - o1).abs() < 1e-9);
                }
                (got, want) => panic!("mismatch: impl {got:?}, oracle {want:?}"),
            }
        }
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let cam = Camera::look_at(
            80.0,
            64,
            64,
            Vec3::new(3.0, -2.0, 1.5),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let to_target = (Vec3::ZERO - cam.center()).normalized();
        assert!((cam.optical_axis() - to_target).norm() < 1e-12);
        assert!(cam.rotation.orthonormality_error() < 1e-12);
    }
}
