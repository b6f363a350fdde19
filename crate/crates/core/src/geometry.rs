//! Pinhole cameras, ground-plane homographies, and the sampling grids that
//! project image-plane feature maps onto the common height plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::GridSpec;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Sentinel source coordinate for ground cells behind the camera; far enough
/// outside any feature map that sampling yields zero.
pub const OUT_OF_VIEW: f64 = -1.0e6;

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn adjugate_inverse(m: &Mat3) -> Option<Mat3> {
    let det = determinant(m);
    if det.abs() <= 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            // cofactor of (j, i), transposed into (i, j)
            let r0 = (j + 1) % 3;
            let r1 = (j + 2) % 3;
            let c0 = (i + 1) % 3;
            let c1 = (i + 2) % 3;
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) * inv_det;
        }
    }
    Some(inv)
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: &Vec3) -> Vec3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// A calibrated pinhole camera. `rotation` maps world to camera
/// coordinates; the camera looks along its +z axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: Vec3,
    pub rotation: Mat3,
    pub focal: f64,
    pub principal: (f64, f64),
    /// (width, height) in pixels.
    pub image_size: (usize, usize),
}

/// A projected world point: pixel coordinates plus camera-space depth.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(
        position: Vec3,
        rotation: Mat3,
        focal: f64,
        principal: (f64, f64),
        image_size: (usize, usize),
    ) -> Result<Self> {
        let cam = CameraModel { position, rotation, focal, principal, image_size };
        cam.check_orthonormal()?;
        Ok(cam)
    }

    /// Rotation looking from `position` toward `target`, world up = +z.
    pub fn look_at(position: Vec3, target: Vec3, focal: f64, image_size: (usize, usize)) -> Result<Self> {
        let forward = normalize(&sub3(&target, &position));
        let up = [0.0, 0.0, 1.0];
        let right = cross(&forward, &up);
        let norm = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
        if norm < 1e-9 {
            return Err(Error::Config(
                "camera view direction is parallel to the world up axis".into(),
            ));
        }
        let right = [right[0] / norm, right[1] / norm, right[2] / norm];
        // +v axis in image space; right x down = forward keeps det(R) = +1
        let down = cross(&forward, &right);
        let rotation = [right, down, forward];
        let principal = ((image_size.0 as f64 - 1.0) / 2.0, (image_size.1 as f64 - 1.0) / 2.0);
        CameraModel::new(position, rotation, focal, principal, image_size)
    }

    fn check_orthonormal(&self) -> Result<()> {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let prod = mat_mul(&rt, r);
        for (i, row) in prod.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "camera rotation is not orthonormal (RtR[{i}][{j}] = {v})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Full 3x4 pinhole projection of a world point.
    pub fn project(&self, point: Vec3) -> Projected {
        let rel = sub3(&point, &self.position);
        let cam = mat_vec(&self.rotation, &rel);
        let depth = cam[2];
        Projected {
            u: self.focal * cam[0] / depth + self.principal.0,
            v: self.focal * cam[1] / depth + self.principal.1,
            depth,
        }
    }

    /// True when the projection lands inside `[0, W-1] x [0, H-1]` with
    /// positive depth; the same rectangle the bilinear sampler treats as
    /// in-bounds.
    pub fn sees(&self, point: Vec3) -> bool {
        let p = self.project(point);
        p.depth > 0.0
            && p.u >= 0.0
            && p.u <= (self.image_size.0 - 1) as f64
            && p.v >= 0.0
            && p.v <= (self.image_size.1 - 1) as f64
    }

    /// Validates that the scene center projects in front of the camera.
    pub fn check_faces_scene(&self, grid: &GridSpec) -> Result<()> {
        let (ex, ey) = grid.extent();
        let center = [ex / 2.0, ey / 2.0, grid.plane_height];
        if self.project(center).depth <= 0.0 {
            return Err(Error::Config("camera faces away from the scene".into()));
        }
        Ok(())
    }
}

/// 3x3 map from ground-plane world coordinates `(x, y, 1)` at the common
/// height plane to homogeneous image pixels.
#[derive(Clone, Debug)]
pub struct Homography {
    m: Mat3,
}

impl Homography {
    pub fn matrix(&self) -> &Mat3 {
        &self.m
    }

    pub fn det(&self) -> f64 {
        determinant(&self.m)
    }

    /// Applies the homography; returns `(u, v, w)` where `w` is the
    /// homogeneous scale (camera depth).
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let p = mat_vec(&self.m, &[x, y, 1.0]);
        (p[0], p[1], p[2])
    }

    pub fn inverse(&self) -> Result<Homography> {
        adjugate_inverse(&self.m)
            .map(|m| Homography { m })
            .ok_or_else(|| Error::Numeric("homography is singular".into()))
    }
}

/// Homography from the plane `z = grid.plane_height` into image pixels:
/// `H * (x, y, 1)` equals the full pinhole projection of `(x, y, H_avg)` up
/// to scale.
pub fn ground_to_image_homography(camera: &CameraModel, grid: &GridSpec) -> Result<Homography> {
    let r = &camera.rotation;
    let h_avg = grid.plane_height;
    // columns: r1, r2, H_avg * r3 - R * C
    let rc = mat_vec(r, &camera.position);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i][0] = r[i][0];
        m[i][1] = r[i][1];
        m[i][2] = h_avg * r[i][2] - rc[i];
    }
    // K = [[f, 0, cx], [0, f, cy], [0, 0, 1]]
    let k = [
        [camera.focal, 0.0, camera.principal.0],
        [0.0, camera.focal, camera.principal.1],
        [0.0, 0.0, 1.0],
    ];
    let m = mat_mul(&k, &m);
    if determinant(&m).abs() <= 1e-12 {
        return Err(Error::Numeric(
            "degenerate camera: height plane passes through the optical center".into(),
        ));
    }
    Ok(Homography { m })
}

/// Builds the `[h, w, 2]` grid of `(row, col)` feature-map coordinates to
/// sample for each ground cell. `stride` is image pixels per feature pixel.
/// Cells projecting behind the camera get out-of-bounds sentinels.
pub fn build_sampling_grid(homography: &Homography, grid: &GridSpec, stride: f64) -> Tensor {
    let mut data = Vec::with_capacity(grid.h * grid.w * 2);
    for r in 0..grid.h {
        for c in 0..grid.w {
            let (x, y) = grid.cell_center(r, c);
            let (pu, pv, pw) = homography.apply(x, y);
            if pw <= 1e-9 {
                data.push(OUT_OF_VIEW);
                data.push(OUT_OF_VIEW);
            } else {
                data.push(pv / pw / stride); // row
                data.push(pu / pw / stride); // col
            }
        }
    }
    Tensor::new(vec![grid.h, grid.w, 2], data).expect("grid shape")
}

/// Projects a `[C, Hf, Wf]` feature map onto the ground grid by bilinear
/// sampling; differentiable w.r.t. the feature values.
pub fn project_feature(tape: &Tape, feature: &Tensor, sampling_grid: &Tensor) -> Result<Tensor> {
    tape.grid_sample(feature, sampling_grid)
}
