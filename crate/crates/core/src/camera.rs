//! Pinhole camera poses in the NeRF-Blender convention (camera looks down −z, y up).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraPose {
    /// Rows of the 3×4 camera-to-world transform `[R | t]`.
    cam_to_world: [[f64; 4]; 3],
    /// Horizontal field of view in radians.
    fov_x: f64,
}

const ORTHO_TOL: f64 = 1e-4;

impl CameraPose {
    pub fn new(cam_to_world: [[f64; 4]; 3], fov_x: f64) -> Result<Self> {
        if !(fov_x > 0.0 && fov_x < std::f64::consts::PI) {
            return Err(Error::Contract(format!("field of view {fov_x} outside (0, π)")));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| cam_to_world[i][k] * cam_to_world[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL || !dot.is_finite() {
                    return Err(Error::Contract(format!(
                        "rotation block is not orthonormal (R·Rᵀ[{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        if cam_to_world.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("pose contains non-finite values".into()));
        }
        Ok(Self { cam_to_world, fov_x })
    }

    /// From a row-major 4×4 matrix. The bottom row is ignored.
    pub fn from_matrix4(m: &[[f64; 4]; 4], fov_x: f64) -> Result<Self> {
        Self::new([m[0], m[1], m[2]], fov_x)
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.cam_to_world;
        [r[0], r[1], r[2], [0.0, 0.0, 0.0, 1.0]]
    }

    /// Camera at `eye` looking at `target`; `up` only needs to be non-parallel to the view direction.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_x: f64) -> Result<Self> {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(forward, up));
        let true_up = cross(right, forward);
        let back = [-forward[0], -forward[1], -forward[2]];
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            m[i] = [right[i], true_up[i], back[i], eye[i]];
        }
        Self::new(m, fov_x)
    }

    pub fn cam_to_world(&self) -> &[[f64; 4]; 3] {
        &self.cam_to_world
    }

    pub fn fov_x(&self) -> f64 {
        self.fov_x
    }

    pub fn position(&self) -> [f64; 3] {
        [self.cam_to_world[0][3], self.cam_to_world[1][3], self.cam_to_world[2][3]]
    }

    /// Row-major flattening of the 3×4 transform: the camera encoder's input.
    pub fn flattened(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (i, row) in self.cam_to_world.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(row);
        }
        out
    }

    /// World-space direction of the ray through pixel center `(px, py)` of a `width×height` image.
    pub fn ray_direction(&self, px: f64, py: f64, width: usize, height: usize) -> [f64; 3] {
        let focal = 0.5 * width as f64 / (0.5 * self.fov_x).tan();
        let d_cam = [(px - 0.5 * width as f64) / focal, -(py - 0.5 * height as f64) / focal, -1.0];
        let r = &self.cam_to_world;
        let mut d = [0.0; 3];
        for i in 0..3 {
            d[i] = r[i][0] * d_cam[0] + r[i][1] * d_cam[1] + r[i][2] * d_cam[2];
        }
        d
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: [[f64; 4]; 4] =
        [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

    #[test]
    fn identity_matrix() {
        let p = CameraPose::from_matrix4(&IDENTITY, 0.6911).unwrap();
        assert_eq!(p.position(), [0.0; 3]);
        assert_eq!(p.to_matrix4(), IDENTITY);
        assert_eq!(p.fov_x(), 0.6911);
        // principal ray looks down −z
        assert_eq!(p.ray_direction(50.0, 50.0, 100, 100), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn rejects_bad_poses() {
        let mut m = IDENTITY;
        m[0][0] = 2.0;
        assert!(CameraPose::from_matrix4(&m, 0.5).is_err());
        assert!(CameraPose::from_matrix4(&IDENTITY, 0.0).is_err());
        assert!(CameraPose::from_matrix4(&IDENTITY, 3.2).is_err());
    }

    #[test]
    fn look_at_is_orthonormal_and_points_at_target() {
        let p = CameraPose::look_at([0.5, 0.2, 2.0], [0.0; 3], [0.0, 1.0, 0.0], 0.7).unwrap();
        let d = p.ray_direction(32.0, 32.0, 64, 64);
        let e = p.position();
        // the optical axis passes through the origin
        let t = -e[2] / d[2];
        assert!((e[0] + t * d[0]).abs() < 1e-12 && (e[1] + t * d[1]).abs() < 1e-12);
    }
}
