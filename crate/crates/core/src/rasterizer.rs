//! Geometry transport between texture (UV) space and screen/plane space.
//!
//! Rasterization is split into a non-differentiable geometry pass that
//! resolves coverage and occlusion into a [`LinearPlan`] (per covered pixel:
//! four texel taps with bilinear weights), and a linear application of that
//! plan to texture values. Gradients therefore flow to texture values and
//! never to geometry.

use std::sync::Arc;

use crate::facemodel::{cross, dot, sub3, Camera, Mesh};
use crate::graph::{Graph, LinearPlan, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FeatureImage {
    /// [C, H, W]; zero wherever mask is zero.
    pub data: Tensor,
    /// [H, W] triangle coverage in {0, 1}.
    pub mask: Tensor,
}

#[derive(Clone, Debug)]
pub struct UVImage {
    /// [C, Hu, Wu]; zero wherever visibility is zero.
    pub data: Tensor,
    /// [Hu, Wu] in {0, 1}.
    pub visibility: Tensor,
}

/// Output of the geometry pass for one (mesh, camera, resolution) triple.
pub struct RasterPlan {
    pub plan: Arc<LinearPlan>,
    pub mask: Tensor,
    /// View-space depth per pixel, `INFINITY` where uncovered.
    pub depth: Vec<f64>,
    pub out_res: usize,
    pub tex_res: (usize, usize),
}

pub fn default_eps_z(camera: &Camera) -> f64 {
    1e-3 * camera.radius
}

/// Clamped bilinear taps for a continuous position on an H x W grid whose
/// cell centers sit at integer + 0.5.
pub(crate) fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    [
        (y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
        (y0 * w + x1, ax * (1.0 - ay)),
        (y1 * w + x0, (1.0 - ax) * ay),
        (y1 * w + x1, ax * ay),
    ]
}

/// Rasterizes the mesh, producing the texture-to-pixel sampling plan plus
/// coverage and a z-buffer. Triangles are scanned in index order; depth ties
/// keep the first writer.
pub fn plan_rasterize(
    mesh: &Mesh,
    camera: &Camera,
    tex_h: usize,
    tex_w: usize,
    out_res: usize,
) -> RasterPlan {
    let n_px = out_res * out_res;
    let mut zbuf = vec![f64::INFINITY; n_px];
    let mut winner_uv: Vec<[f64; 2]> = vec![[0.0, 0.0]; n_px];
    let mut covered = vec![false; n_px];

    let projected: Vec<([f64; 2], f64, bool)> =
        mesh.vertices.iter().map(|&v| camera.project(v)).collect();

    for face in &mesh.faces {
        let (pa, za, va) = projected[face[0] as usize];
        let (pb, zb, vb) = projected[face[1] as usize];
        let (pc, zc, vc) = projected[face[2] as usize];
        if !(va && vb && vc) {
            continue;
        }
        let denom = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        if denom.abs() < 1e-12 {
            continue;
        }
        let min_x = pa[0].min(pb[0]).min(pc[0]).floor().max(0.0) as usize;
        let max_x = (pa[0].max(pb[0]).max(pc[0]).ceil() as usize).min(out_res);
        let min_y = pa[1].min(pb[1]).min(pc[1]).floor().max(0.0) as usize;
        let max_y = (pa[1].max(pb[1]).max(pc[1]).ceil() as usize).min(out_res);
        let uva = mesh.uv[face[0] as usize];
        let uvb = mesh.uv[face[1] as usize];
        let uvc = mesh.uv[face[2] as usize];
        for y in min_y..max_y {
            let py = y as f64 + 0.5;
            for x in min_x..max_x {
                let px = x as f64 + 0.5;
                let l0 = ((pb[0] - px) * (pc[1] - py) - (pc[0] - px) * (pb[1] - py)) / denom;
                let l1 = ((pc[0] - px) * (pa[1] - py) - (pa[0] - px) * (pc[1] - py)) / denom;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = l0 * za + l1 * zb + l2 * zc;
                let idx = y * out_res + x;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    covered[idx] = true;
                    winner_uv[idx] = [
                        l0 * uva[0] + l1 * uvb[0] + l2 * uvc[0],
                        l0 * uva[1] + l1 * uvb[1] + l2 * uvc[1],
                    ];
                }
            }
        }
    }

    let mut entries = Vec::new();
    let mut mask = vec![0.0; n_px];
    for idx in 0..n_px {
        if !covered[idx] {
            continue;
        }
        mask[idx] = 1.0;
        let [u, v] = winner_uv[idx];
        for (tap, w) in bilinear_taps(u * tex_w as f64, v * tex_h as f64, tex_w, tex_h) {
            if w != 0.0 {
                entries.push((idx as u32, tap as u32, w));
            }
        }
    }

    RasterPlan {
        plan: Arc::new(LinearPlan::new(tex_h * tex_w, n_px, entries)),
        mask: Tensor::new(&[out_res, out_res], mask),
        depth: zbuf,
        out_res,
        tex_res: (tex_h, tex_w),
    }
}

impl RasterPlan {
    /// Differentiable application: texture node [C, Hu, Wu] -> [C, H, W].
    pub fn apply_node(&self, g: &mut Graph, texture: NodeId) -> NodeId {
        let c = g.value(texture).channels();
        let gathered = g.gather(texture, self.plan.clone());
        g.reshape(gathered, &[c, self.out_res, self.out_res])
    }

    pub fn apply(&self, texture: &Tensor) -> FeatureImage {
        let mut g = Graph::new();
        let t = g.leaf(texture.clone());
        let out = self.apply_node(&mut g, t);
        FeatureImage {
            data: g.value(out).clone(),
            mask: self.mask.clone(),
        }
    }
}

/// One-call rasterization: barycentric UV interpolation, bilinear texture
/// sampling, z-buffered occlusion.
pub fn rasterize(mesh: &Mesh, texture: &Tensor, camera: &Camera, out_res: usize) -> FeatureImage {
    assert_eq!(texture.shape().len(), 3, "texture must be [C, Hu, Wu]");
    let plan = plan_rasterize(mesh, camera, texture.shape()[1], texture.shape()[2], out_res);
    plan.apply(texture)
}

/// Per-texel provenance of a UV back-projection, for oracle tests.
#[derive(Clone, Debug, Default)]
pub struct TexelTrace {
    /// (source pixel index, weight) pairs of the image-stage bilinear read.
    pub pixel_taps: Vec<(usize, f64)>,
}

/// Back-projects an image into UV space: each texel is mapped to its surface
/// point, projected, z-tested against the rasterized depth (tolerance
/// `eps_z`), and bilinearly sampled if front-facing and fully covered.
pub fn project_to_uv(
    image: &FeatureImage,
    mesh: &Mesh,
    camera: &Camera,
    uv_res: usize,
    eps_z: f64,
) -> UVImage {
    project_to_uv_traced(image, mesh, camera, uv_res, eps_z).0
}

pub fn project_to_uv_traced(
    image: &FeatureImage,
    mesh: &Mesh,
    camera: &Camera,
    uv_res: usize,
    eps_z: f64,
) -> (UVImage, Vec<TexelTrace>) {
    let (c, h, w) = (
        image.data.shape()[0],
        image.data.shape()[1],
        image.data.shape()[2],
    );
    let cam_pos = camera.position();

    // Depth buffer of the same mesh from the same camera, for the z-test.
    let geo = plan_rasterize(mesh, camera, 1, 1, w.max(h));
    debug_assert_eq!(w, h, "project_to_uv expects square images");

    // Locate each texel's triangle in UV space (first triangle wins).
    let n_tx = uv_res * uv_res;
    let mut tex_face: Vec<i64> = vec![-1; n_tx];
    let mut tex_bary: Vec<[f64; 3]> = vec![[0.0; 3]; n_tx];
    for (fi, face) in mesh.faces.iter().enumerate() {
        let a = mesh.uv[face[0] as usize];
        let b = mesh.uv[face[1] as usize];
        let cc = mesh.uv[face[2] as usize];
        let denom = (b[0] - a[0]) * (cc[1] - a[1]) - (cc[0] - a[0]) * (b[1] - a[1]);
        if denom.abs() < 1e-15 {
            continue;
        }
        let to_grid = |t: f64| t * uv_res as f64;
        let min_x = to_grid(a[0].min(b[0]).min(cc[0])).floor().max(0.0) as usize;
        let max_x = (to_grid(a[0].max(b[0]).max(cc[0])).ceil() as usize).min(uv_res);
        let min_y = to_grid(a[1].min(b[1]).min(cc[1])).floor().max(0.0) as usize;
        let max_y = (to_grid(a[1].max(b[1]).max(cc[1])).ceil() as usize).min(uv_res);
        for ty in min_y..max_y {
            let v = (ty as f64 + 0.5) / uv_res as f64;
            for tx in min_x..max_x {
                let idx = ty * uv_res + tx;
                if tex_face[idx] >= 0 {
                    continue;
                }
                let u = (tx as f64 + 0.5) / uv_res as f64;
                let l0 = ((b[0] - u) * (cc[1] - v) - (cc[0] - u) * (b[1] - v)) / denom;
                let l1 = ((cc[0] - u) * (a[1] - v) - (a[0] - u) * (cc[1] - v)) / denom;
                let l2 = 1.0 - l0 - l1;
                if l0 < -1e-9 || l1 < -1e-9 || l2 < -1e-9 {
                    continue;
                }
                tex_face[idx] = fi as i64;
                tex_bary[idx] = [l0, l1, l2];
            }
        }
    }

    let mut data = Tensor::zeros(&[c, uv_res, uv_res]);
    let mut vis = Tensor::zeros(&[uv_res, uv_res]);
    let mut traces = vec![TexelTrace::default(); n_tx];
    let img = image.data.data();
    let msk = image.mask.data();

    for idx in 0..n_tx {
        let fi = tex_face[idx];
        if fi < 0 {
            continue;
        }
        let face = mesh.faces[fi as usize];
        let [l0, l1, l2] = tex_bary[idx];
        let pa = mesh.vertices[face[0] as usize];
        let pb = mesh.vertices[face[1] as usize];
        let pc = mesh.vertices[face[2] as usize];
        let p = [
            l0 * pa[0] + l1 * pb[0] + l2 * pc[0],
            l0 * pa[1] + l1 * pb[1] + l2 * pc[1],
            l0 * pa[2] + l1 * pb[2] + l2 * pc[2],
        ];
        let normal = cross(sub3(pb, pa), sub3(pc, pa));
        let view = sub3(cam_pos, p);
        if dot(normal, view) <= 0.0 {
            continue; // back-facing
        }
        let (px, z, in_front) = camera.project(p);
        if !in_front {
            continue;
        }
        if px[0] < 0.0 || px[0] >= w as f64 || px[1] < 0.0 || px[1] >= h as f64 {
            continue;
        }
        let taps = bilinear_taps(px[0], px[1], w, h);
        // z-test against the bilinearly interpolated depth buffer
        let mut zs = 0.0;
        let mut fully_covered = true;
        for &(tap, wt) in &taps {
            if wt == 0.0 {
                continue;
            }
            if msk[tap] < 1.0 {
                fully_covered = false;
                break;
            }
            zs += wt * geo.depth[tap];
        }
        if !fully_covered || z > zs + eps_z {
            continue;
        }
        vis.data_mut()[idx] = 1.0;
        for &(tap, wt) in &taps {
            if wt == 0.0 {
                continue;
            }
            traces[idx].pixel_taps.push((tap, wt));
            for ci in 0..c {
                data.data_mut()[ci * n_tx + idx] += wt * img[ci * w * h + tap];
            }
        }
    }

    (
        UVImage {
            data,
            visibility: vis,
        },
        traces,
    )
}
