//! Procedurally generated linear blendshape head with a pinhole camera and
//! fixed landmark vertices.
//!
//! The head is a sphere-like sheet built over the full UV unit square with a
//! front-centered parameterization: the square's center maps to the face
//! direction (+z), radial distance maps to polar angle with an equal-area
//! front cap, and the square boundary becomes a small ring around a back
//! aperture. Every texel of a UV-space grid therefore corresponds to exactly
//! one surface point, and roughly the front three quarters of the square is
//! seen by the canonical camera.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// UV square radius where the equal-area front cap ends.
const FRONT_CAP_UV_RADIUS: f64 = 0.9;
/// Polar angle at the front-cap boundary (radians from the face axis).
const FRONT_CAP_ANGLE: f64 = 1.36;
/// The square boundary maps to a ring this far short of the back pole,
/// leaving a small aperture instead of a degenerate pinch.
const BACK_APERTURE: f64 = 0.15;

pub const LANDMARK_COUNT: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
}

impl FaceParams {
    pub fn zeros(k_shape: usize, k_expr: usize) -> Self {
        FaceParams {
            shape: vec![0.0; k_shape],
            expression: vec![0.0; k_expr],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &c in self.shape.iter().chain(&self.expression) {
            if !c.is_finite() {
                return Err(Error::InvalidParameter("non-finite coefficient".into()));
            }
            if !(-3.0..=3.0).contains(&c) {
                return Err(Error::InvalidParameter(format!(
                    "coefficient {c} outside [-3, 3]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Perspective,
    /// Pixels per world unit; used for front-plane texture rasterization.
    Orthographic { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub yaw: f64,
    pub pitch: f64,
    pub radius: f64,
    pub focal: f64,
    pub principal: [f64; 2],
    pub resolution: usize,
    pub projection: Projection,
}

impl Camera {
    pub fn position(&self) -> [f64; 3] {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        [
            self.radius * sy * cp,
            self.radius * sp,
            self.radius * cy * cp,
        ]
    }

    /// Right/up/forward orthonormal basis, looking at the world origin.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let pos = self.position();
        let forward = normalize([-pos[0], -pos[1], -pos[2]]);
        let right = normalize(cross(forward, [0.0, 1.0, 0.0]));
        let up = cross(right, forward);
        (right, up, forward)
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let pos = self.position();
        let (right, up, forward) = self.basis();
        let d = [p[0] - pos[0], p[1] - pos[1], p[2] - pos[2]];
        [dot(d, right), dot(d, up), dot(d, forward)]
    }

    /// Projects a world point; returns pixel coordinates, view depth, and
    /// whether the point is in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> ([f64; 2], f64, bool) {
        let c = self.to_camera(p);
        match self.projection {
            Projection::Perspective => {
                let valid = c[2] > 1e-6;
                let z = if valid { c[2] } else { 1.0 };
                (
                    [
                        self.principal[0] + self.focal * c[0] / z,
                        self.principal[1] - self.focal * c[1] / z,
                    ],
                    c[2],
                    valid,
                )
            }
            Projection::Orthographic { scale } => (
                [
                    self.principal[0] + scale * c[0],
                    self.principal[1] - scale * c[1],
                ],
                c[2],
                true,
            ),
        }
    }
}

pub fn camera_from_pose(
    yaw: f64,
    pitch: f64,
    radius: f64,
    focal: f64,
    resolution: usize,
) -> Result<Camera> {
    if radius <= 0.0 {
        return Err(Error::InvalidParameter("camera radius must be > 0".into()));
    }
    if pitch.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::InvalidParameter(format!(
            "|pitch| = {} must be < pi/2",
            pitch.abs()
        )));
    }
    let half = resolution as f64 * 0.5;
    Ok(Camera {
        yaw,
        pitch,
        radius,
        focal,
        principal: [half, half],
        resolution,
        projection: Projection::Perspective,
    })
}

/// Orthographic camera on the face axis, framing the volume cube; used to
/// rasterize neural textures onto the frontal tri-plane.
pub fn frontal_ortho_camera(resolution: usize, half_extent: f64) -> Camera {
    let half = resolution as f64 * 0.5;
    Camera {
        yaw: 0.0,
        pitch: 0.0,
        radius: 4.0 * half_extent,
        focal: 0.0,
        principal: [half, half],
        resolution,
        projection: Projection::Orthographic {
            scale: half / half_extent,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub landmark_indices: Vec<u32>,
}

impl Mesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }
}

#[derive(Clone, Debug)]
pub struct HeadModel {
    pub base: Mesh,
    /// One displacement field per shape coefficient, V x 3 each.
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    pub expr_basis: Vec<Vec<[f64; 3]>>,
    pub head_radius: f64,
    pub grid: usize,
}

impl HeadModel {
    pub fn k_shape(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn k_expr(&self) -> usize {
        self.expr_basis.len()
    }

    pub fn deform(&self, params: &FaceParams) -> Result<Mesh> {
        params.validate()?;
        if params.shape.len() != self.k_shape() || params.expression.len() != self.k_expr() {
            return Err(Error::DimensionMismatch(format!(
                "params ({}, {}) vs model ({}, {})",
                params.shape.len(),
                params.expression.len(),
                self.k_shape(),
                self.k_expr()
            )));
        }
        let mut mesh = self.base.clone();
        for (basis, &c) in self
            .shape_basis
            .iter()
            .zip(&params.shape)
            .chain(self.expr_basis.iter().zip(&params.expression))
        {
            if c == 0.0 {
                continue;
            }
            for (v, d) in mesh.vertices.iter_mut().zip(basis) {
                v[0] += c * d[0];
                v[1] += c * d[1];
                v[2] += c * d[2];
            }
        }
        Ok(mesh)
    }

    /// Pixel positions of the landmark vertices under `params` and `camera`.
    /// Points behind the camera are flagged invalid rather than erroring.
    pub fn landmarks2d(&self, params: &FaceParams, camera: &Camera) -> Result<Vec<([f64; 2], bool)>> {
        let mesh = self.deform(params)?;
        Ok(mesh
            .landmark_indices
            .iter()
            .map(|&i| {
                let (px, _z, valid) = camera.project(mesh.vertices[i as usize]);
                (px, valid)
            })
            .collect())
    }

    /// Single-channel map with a Gaussian blob per visible landmark; the
    /// conditioning signal handed to the pose-aware discriminator.
    pub fn landmark_map(&self, params: &FaceParams, camera: &Camera, res: usize) -> Result<crate::Tensor> {
        let pts = self.landmarks2d(params, camera)?;
        let sigma = res as f64 / 24.0;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut data = vec![0.0; res * res];
        for (p, valid) in pts {
            if !valid {
                continue;
            }
            for y in 0..res {
                for x in 0..res {
                    let dx = x as f64 + 0.5 - p[0];
                    let dy = y as f64 + 0.5 - p[1];
                    data[y * res + x] += (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        for v in &mut data {
            *v = v.min(1.0);
        }
        Ok(crate::Tensor::new(&[1, res, res], data))
    }
}

/// Maps a UV-square point to a unit direction. Front cap (r <= cap radius)
/// is equal-area so texel footprints stay uniform where the camera looks.
pub fn uv_to_direction(u: f64, v: f64) -> [f64; 3] {
    let a = 2.0 * u - 1.0;
    let b = 2.0 * v - 1.0;
    let r = a.abs().max(b.abs());
    if r <= 1e-12 {
        return [0.0, 0.0, 1.0];
    }
    let mu_max = std::f64::consts::PI - BACK_APERTURE;
    let mu = if r <= FRONT_CAP_UV_RADIUS {
        let frac = (r / FRONT_CAP_UV_RADIUS).powi(2);
        (1.0 - (1.0 - FRONT_CAP_ANGLE.cos()) * frac).acos()
    } else {
        let t = (r - FRONT_CAP_UV_RADIUS) / (1.0 - FRONT_CAP_UV_RADIUS);
        FRONT_CAP_ANGLE + (mu_max - FRONT_CAP_ANGLE) * t
    };
    let psi = b.atan2(a);
    let (smu, cmu) = mu.sin_cos();
    let (spsi, cpsi) = psi.sin_cos();
    [smu * cpsi, smu * spsi, cmu]
}

/// Canonical feature directions used to pin the 16 landmark vertices.
fn landmark_directions() -> [[f64; 3]; LANDMARK_COUNT] {
    [
        [0.0, 0.0, 1.0],      // nose tip
        [0.0, 0.18, 0.98],    // nose bridge
        [-0.32, 0.30, 0.90],  // left eye
        [0.32, 0.30, 0.90],   // right eye
        [-0.30, 0.48, 0.82],  // left brow
        [0.30, 0.48, 0.82],   // right brow
        [-0.38, -0.34, 0.86], // left mouth corner
        [0.38, -0.34, 0.86],  // right mouth corner
        [0.0, -0.28, 0.96],   // upper lip
        [0.0, -0.44, 0.90],   // lower lip
        [-0.55, -0.05, 0.83], // left cheek
        [0.55, -0.05, 0.83],  // right cheek
        [0.0, -0.62, 0.78],   // chin
        [0.0, 0.55, 0.84],    // forehead
        [-0.72, -0.15, 0.68], // left jaw
        [0.72, -0.15, 0.68],  // right jaw
    ]
}

/// Deterministic toy head: base mesh plus smooth low-frequency blendshape
/// bases whose worst-case combined displacement stays within 15% of the
/// head radius for coefficients in [-1, 1].
pub fn build_toy_model(
    seed: u64,
    k_shape: usize,
    k_expr: usize,
    grid: usize,
    head_radius: f64,
) -> HeadModel {
    assert!(k_shape >= 1 && k_expr >= 1, "need at least one basis each");
    assert!(grid >= 8, "grid too coarse for a head");
    let n = grid + 1;
    let mut vertices = Vec::with_capacity(n * n);
    let mut uv = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let u = i as f64 / grid as f64;
            let v = j as f64 / grid as f64;
            let d = uv_to_direction(u, v);
            vertices.push([
                head_radius * d[0],
                head_radius * d[1],
                head_radius * d[2],
            ]);
            uv.push([u, v]);
        }
    }
    let mut faces = Vec::with_capacity(grid * grid * 2);
    for j in 0..grid {
        for i in 0..grid {
            let v00 = (j * n + i) as u32;
            let v10 = v00 + 1;
            let v01 = v00 + n as u32;
            let v11 = v01 + 1;
            faces.push([v00, v10, v11]);
            faces.push([v00, v11, v01]);
        }
    }

    let landmark_indices = landmark_directions()
        .iter()
        .map(|dir| {
            let mut best = 0u32;
            let mut best_dot = f64::MIN;
            for (idx, p) in vertices.iter().enumerate() {
                let d = (p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]) / head_radius;
                if d > best_dot {
                    best_dot = d;
                    best = idx as u32;
                }
            }
            best
        })
        .collect();

    let base = Mesh {
        vertices,
        faces,
        uv,
        landmark_indices,
    };

    let per_basis_amp = 0.15 * head_radius / (k_shape + k_expr) as f64;
    let mut rng = seeded_rng(seed, "facemodel.bases");
    let shape_basis = (0..k_shape)
        .map(|_| smooth_field(&base.vertices, per_basis_amp, &mut rng))
        .collect();
    let expr_basis = (0..k_expr)
        .map(|_| smooth_field(&base.vertices, per_basis_amp, &mut rng))
        .collect();

    HeadModel {
        base,
        shape_basis,
        expr_basis,
        head_radius,
        grid,
    }
}

/// Sum of a few low-frequency sinusoids per coordinate, rescaled so the
/// largest per-vertex displacement equals `amp`.
fn smooth_field(vertices: &[[f64; 3]], amp: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    const WAVES: usize = 3;
    let mut waves = Vec::with_capacity(3 * WAVES);
    for _ in 0..3 * WAVES {
        let dir = normalize([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]);
        let freq = rng.gen_range(0.6..2.2);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let ampl: f64 = rng.gen_range(-1.0..1.0);
        waves.push(([dir[0] * freq, dir[1] * freq, dir[2] * freq], phase, ampl));
    }
    let mut field: Vec<[f64; 3]> = vertices
        .iter()
        .map(|p| {
            let mut d = [0.0; 3];
            for c in 0..3 {
                for (k, phase, ampl) in &waves[c * WAVES..(c + 1) * WAVES] {
                    d[c] += ampl * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin();
                }
            }
            d
        })
        .collect();
    let max_norm = field
        .iter()
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let s = amp / max_norm;
    for d in &mut field {
        d[0] *= s;
        d[1] *= s;
        d[2] *= s;
    }
    field
}

pub fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
