//! The animatable 3D prior: a neural texture branch, a static tri-plane
//! branch, a face synthesis stack conditioned on multi-scale rasterized
//! textures via alpha blending, and EG3D-style volumetric rendering.
//!
//! Plane layout: `planes` tensors are [3 * C_p, R, R]; plane 0 is the frontal
//! xy plane that receives dynamic face features, planes 1 (xz) and 2 (yz)
//! stay static. Plane grids use image orientation (row 0 is +y / +z up),
//! matching the frontal orthographic rasterization of textures.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::facemodel::{frontal_ortho_camera, Camera, FaceParams, HeadModel};
use crate::graph::{Graph, LinearPlan, NodeId};
use crate::nn::{seeded_rng, Conv2d, Linear, ModConv2d, ParamTape};
use crate::rasterizer::{bilinear_taps, plan_rasterize, RasterPlan};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    /// W+ code: one style vector per generator layer, [rows, dim].
    pub wplus: Vec<Vec<f64>>,
}

impl LatentCode {
    pub fn from_tensor(t: &Tensor) -> Self {
        let rows = t.shape()[0];
        let dim = t.shape()[1];
        LatentCode {
            wplus: (0..rows)
                .map(|r| t.data()[r * dim..(r + 1) * dim].to_vec())
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let rows = self.wplus.len();
        let dim = self.wplus[0].len();
        let mut data = Vec::with_capacity(rows * dim);
        for r in &self.wplus {
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows, dim], data)
    }

    pub fn rows(&self) -> usize {
        self.wplus.len()
    }

    pub fn dim(&self) -> usize {
        self.wplus.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralTexture {
    /// UV feature grids at strictly increasing resolutions.
    pub scales: Vec<Tensor>,
}

impl NeuralTexture {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0;
        for s in &self.scales {
            let r = s.shape()[2];
            if r <= last {
                return Err(Error::ShapeMismatch(
                    "texture scales must be strictly increasing".into(),
                ));
            }
            if !s.all_finite() {
                return Err(Error::InvalidParameter("non-finite texture".into()));
            }
            last = r;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    /// [3 * C_p, R, R].
    pub planes: Tensor,
    pub channels: usize,
}

impl TriPlane {
    pub fn resolution(&self) -> usize {
        self.planes.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// Neural feature image [C_r, H, W]; first 3 channels are color.
    pub raw: Tensor,
    /// [3, H, W] in [0, 1]; color over white background.
    pub rgb: Tensor,
    /// [H, W] accumulated opacity.
    pub alpha: Tensor,
    /// [H, W] expected ray depth (world units).
    pub depth: Tensor,
}

/// How the static branch is conditioned, as graph nodes.
#[derive(Clone, Debug)]
pub enum StaticConditioningNodes {
    None,
    Sft(Vec<(NodeId, NodeId)>),
    Offsets(Vec<NodeId>),
}

/// Graph handles of one rendering pass.
#[derive(Clone, Copy, Debug)]
pub struct RenderNodes {
    pub raw: NodeId,
    pub rgb: NodeId,
    pub alpha: NodeId,
    pub depth: NodeId,
}

impl RenderNodes {
    pub fn materialize(&self, g: &Graph) -> RenderOutput {
        RenderOutput {
            raw: g.value(self.raw).clone(),
            rgb: g.value(self.rgb).clone(),
            alpha: g.value(self.alpha).clone(),
            depth: g.value(self.depth).clone(),
        }
    }
}

/// Graph handles of a full synthesis pass, kept for intermediate supervision.
#[derive(Clone, Debug)]
pub struct SynthNodes {
    pub tex_scales: Vec<NodeId>,
    pub planes: NodeId,
    pub render: RenderNodes,
}

/// Ray sampling geometry for one (camera, resolution, spp) triple.
pub struct RenderPlan {
    plane_plans: [Arc<LinearPlan>; 3],
    deltas: Tensor,
    ts: Tensor,
    pub res: usize,
    pub spp: usize,
}

/// Midpoint-of-stratum samples inside the volume cube. Deterministic by
/// construction so renders are pure functions of their inputs.
pub fn build_render_plan(
    camera: &Camera,
    res: usize,
    spp: usize,
    half_extent: f64,
    plane_res: usize,
) -> RenderPlan {
    assert!(spp >= 2, "samples_per_ray must be >= 2");
    let n_rays = res * res;
    let m = n_rays * spp;
    let origin = camera.position();
    let (right, up, forward) = camera.basis();
    let mut deltas = vec![0.0; m];
    let mut ts = vec![0.0; m];
    let mut entries: [Vec<(u32, u32, f64)>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for py in 0..res {
        for px in 0..res {
            let ray = py * res + px;
            let dir = match camera.projection {
                crate::facemodel::Projection::Perspective => {
                    let dx = (px as f64 + 0.5 - camera.principal[0]) / camera.focal;
                    let dy = -(py as f64 + 0.5 - camera.principal[1]) / camera.focal;
                    crate::facemodel::normalize([
                        right[0] * dx + up[0] * dy + forward[0],
                        right[1] * dx + up[1] * dy + forward[1],
                        right[2] * dx + up[2] * dy + forward[2],
                    ])
                }
                crate::facemodel::Projection::Orthographic { .. } => forward,
            };
            // slab intersection with the cube [-he, he]^3
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut hit = true;
            for a in 0..3 {
                if dir[a].abs() < 1e-12 {
                    if origin[a].abs() > half_extent {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let inv = 1.0 / dir[a];
                let ta = (-half_extent - origin[a]) * inv;
                let tb = (half_extent - origin[a]) * inv;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            if !hit || t1 <= t0.max(0.0) {
                continue;
            }
            let t0 = t0.max(0.0);
            let delta = (t1 - t0) / spp as f64;
            for s in 0..spp {
                let t = t0 + (s as f64 + 0.5) * delta;
                let idx = ray * spp + s;
                deltas[idx] = delta;
                ts[idx] = t;
                let p = [
                    origin[0] + t * dir[0],
                    origin[1] + t * dir[1],
                    origin[2] + t * dir[2],
                ];
                // plane coordinate pairs: xy, xz, yz; rows run top-down
                let pairs = [(p[0], p[1]), (p[0], p[2]), (p[1], p[2])];
                for (k, (a, b)) in pairs.iter().enumerate() {
                    let gx = (a / half_extent * 0.5 + 0.5) * plane_res as f64;
                    let gy = (0.5 - b / half_extent * 0.5) * plane_res as f64;
                    for (tap, w) in bilinear_taps(gx, gy, plane_res, plane_res) {
                        if w != 0.0 {
                            entries[k].push((idx as u32, tap as u32, w));
                        }
                    }
                }
            }
        }
    }

    let [e0, e1, e2] = entries;
    RenderPlan {
        plane_plans: [
            Arc::new(LinearPlan::new(plane_res * plane_res, m, e0)),
            Arc::new(LinearPlan::new(plane_res * plane_res, m, e1)),
            Arc::new(LinearPlan::new(plane_res * plane_res, m, e2)),
        ],
        deltas: Tensor::new(&[m], deltas),
        ts: Tensor::new(&[m], ts),
        res,
        spp,
    }
}

pub struct Generator {
    pub dims: ModelConfig,
    pub mapping: Vec<Linear>,
    tex_const: Tensor,
    tex_blocks: Vec<ModConv2d>,
    tex_heads: Vec<Conv2d>,
    static_const: Tensor,
    static_blocks: Vec<ModConv2d>,
    static_head: Conv2d,
    face_const: Tensor,
    face_blocks: Vec<ModConv2d>,
    face_head: Conv2d,
    pub decoder: RayDecoder,
}

#[derive(Clone, Debug)]
pub struct RayDecoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl RayDecoder {
    fn new(plane_ch: usize, feats: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut out = Linear::new(32, 1 + feats, rng);
        // mild density prior so the frozen world is not born transparent
        out.bias.data_mut()[0] = 0.5;
        RayDecoder {
            hidden: Linear::new(plane_ch, 32, rng),
            out,
        }
    }

    /// Test helper: constant density and color regardless of features.
    pub fn constant(plane_ch: usize, feats: usize, sigma: f64, color01: f64) -> Self {
        let mut dec = RayDecoder {
            hidden: Linear::zeros(plane_ch, 32),
            out: Linear::zeros(32, 1 + feats),
        };
        // softplus^-1 and logit of the requested outputs
        let raw_sigma = if sigma <= 0.0 {
            -800.0
        } else {
            (sigma.exp() - 1.0).ln()
        };
        let logit = (color01.clamp(1e-9, 1.0 - 1e-9) / (1.0 - color01.clamp(1e-9, 1.0 - 1e-9))).ln();
        dec.out.bias.data_mut()[0] = raw_sigma;
        for c in 1..=feats {
            dec.out.bias.data_mut()[c] = logit;
        }
        dec
    }
}

/// Static-plane channel count; modulation and face compositing assume the
/// front plane carries the first `plane_channels` of this.
fn static_width(dims: &ModelConfig) -> usize {
    3 * dims.plane_channels
}

impl Generator {
    pub fn new(dims: &ModelConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "generator");
        let ld = dims.latent_dim;
        let tex_ch = &dims.tex_channels;
        let n_scales = tex_ch.len();
        let base_res = dims.tex_resolutions[0];
        let sw = static_width(dims);

        let mut tex_blocks = Vec::new();
        let mut tex_heads = Vec::new();
        for s in 0..n_scales {
            let cin = if s == 0 { tex_ch[0] } else { tex_ch[s - 1] };
            tex_blocks.push(ModConv2d::new(cin, tex_ch[s], 3, ld, &mut rng));
            tex_heads.push(Conv2d::new(tex_ch[s], tex_ch[s], 1, &mut rng));
        }

        let mut static_blocks = Vec::new();
        for s in 0..n_scales {
            let row = n_scales + s; // static branch consumes the later W+ rows
            let _ = row;
            static_blocks.push(ModConv2d::new(sw, sw, 3, ld, &mut rng));
        }

        let mut face_blocks = Vec::new();
        for s in 0..n_scales {
            let cin = if s == 0 { tex_ch[0] } else { tex_ch[s - 1] };
            face_blocks.push(ModConv2d::new(cin, tex_ch[s], 3, ld, &mut rng));
        }

        Generator {
            mapping: vec![Linear::new(ld, ld, &mut rng), Linear::new(ld, ld, &mut rng)],
            tex_const: Tensor::randn(&[tex_ch[0], base_res, base_res], 1.0, &mut rng),
            tex_blocks,
            tex_heads,
            static_const: Tensor::randn(&[sw, base_res, base_res], 1.0, &mut rng),
            static_blocks,
            static_head: Conv2d::new(sw, sw, 1, &mut rng),
            face_const: Tensor::randn(&[tex_ch[0], base_res, base_res], 1.0, &mut rng),
            face_blocks,
            face_head: Conv2d::new(*tex_ch.last().unwrap(), dims.plane_channels, 1, &mut rng),
            decoder: RayDecoder::new(dims.plane_channels, dims.render_features, &mut rng),
            dims: dims.clone(),
        }
    }

    pub fn n_scales(&self) -> usize {
        self.dims.tex_resolutions.len()
    }

    /// Mean W+ over mapped unit-Gaussian samples; the coarse baseline code.
    pub fn mean_latent(&self, samples: usize, seed: u64) -> LatentCode {
        let mut rng = seeded_rng(seed, "generator.mean_latent");
        let mut mean = Tensor::zeros(&[self.dims.wplus_rows, self.dims.latent_dim]);
        for _ in 0..samples {
            let z = crate::nn::randn_vec(self.dims.latent_dim, &mut rng);
            mean = mean.add(&self.map_latent(&z).to_tensor());
        }
        LatentCode::from_tensor(&mean.scale(1.0 / samples as f64))
    }

    /// Maps a Gaussian z to a W+ code (all rows equal; encoders predict
    /// genuinely per-row codes).
    pub fn map_latent(&self, z: &[f64]) -> LatentCode {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let zt = g.leaf(Tensor::new(&[z.len(), 1], z.to_vec()));
        let h = self.mapping[0].fwd(&mut g, &mut tape, "gen.map.0", zt);
        let h = g.leaky_relu(h, LRELU);
        let w = self.mapping[1].fwd(&mut g, &mut tape, "gen.map.1", h);
        let row = g.value(w).data().to_vec();
        LatentCode {
            wplus: vec![row; self.dims.wplus_rows],
        }
    }

    /// One W+ row, RMS-normalized so style scales stay bounded even for
    /// out-of-distribution encoder outputs.
    fn style_row(&self, g: &mut Graph, wplus: NodeId, row: usize) -> NodeId {
        let r = g.slice0(wplus, row, row + 1);
        let r = g.reshape(r, &[self.dims.latent_dim, 1]);
        let sq = g.mul(r, r);
        let ms = g.mean_all(sq);
        let ms = g.add_const(ms, 1e-8);
        let rms = g.sqrt(ms);
        let inv = g.recip(rms);
        let inv = g.broadcast_all(inv, &[self.dims.latent_dim, 1]);
        g.mul(r, inv)
    }

    /// Multi-scale neural texture from a bound W+ node.
    pub fn g_tex(&self, g: &mut Graph, tape: &mut ParamTape, wplus: NodeId) -> Vec<NodeId> {
        let mut feats = tape.bind(g, "gen.tex.const", &self.tex_const);
        let mut out = Vec::new();
        for (s, block) in self.tex_blocks.iter().enumerate() {
            if s > 0 {
                feats = g.upsample_nearest2(feats);
            }
            let style = self.style_row(g, wplus, s);
            feats = block.fwd(g, tape, &format!("gen.tex.block{s}"), feats, style);
            feats = g.leaky_relu(feats, LRELU);
            out.push(self.tex_heads[s].fwd(g, tape, &format!("gen.tex.head{s}"), feats));
        }
        out
    }

    /// Static tri-plane features, optionally spatially modulated per scale
    /// with channel-split (alpha, beta) maps.
    pub fn g_static(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        wplus: NodeId,
        sft: Option<&[(NodeId, NodeId)]>,
    ) -> Result<NodeId> {
        let modulation = match sft {
            Some(maps) => StaticConditioningNodes::Sft(maps.to_vec()),
            None => StaticConditioningNodes::None,
        };
        self.g_static_with(g, tape, wplus, &modulation)
    }

    /// Like `g_static`, but also supporting the direct-offset ablation where
    /// the encoder adds feature offsets at each modulation point.
    pub fn g_static_with(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        wplus: NodeId,
        modulation: &StaticConditioningNodes,
    ) -> Result<NodeId> {
        let n = self.n_scales();
        let count = match modulation {
            StaticConditioningNodes::Sft(maps) => maps.len(),
            StaticConditioningNodes::Offsets(offs) => offs.len(),
            StaticConditioningNodes::None => n,
        };
        if count != n {
            return Err(Error::ShapeMismatch(format!(
                "{count} modulation maps for {n} scales"
            )));
        }
        let mut feats = tape.bind(g, "gen.static.const", &self.static_const);
        for (s, block) in self.static_blocks.iter().enumerate() {
            if s > 0 {
                feats = g.upsample_nearest2(feats);
            }
            let style = self.style_row(g, wplus, n + s);
            feats = block.fwd(g, tape, &format!("gen.static.block{s}"), feats, style);
            feats = g.leaky_relu(feats, LRELU);
            match modulation {
                StaticConditioningNodes::Sft(maps) => {
                    let (alpha, beta) = maps[s];
                    feats = crate::encoders::apply_cs_sft(g, feats, alpha, beta)?;
                }
                StaticConditioningNodes::Offsets(offs) => {
                    if g.shape(offs[s]) != g.shape(feats) {
                        return Err(Error::ShapeMismatch(format!(
                            "offset map {:?} vs features {:?}",
                            g.shape(offs[s]),
                            g.shape(feats)
                        )));
                    }
                    feats = g.add(feats, offs[s]);
                }
                StaticConditioningNodes::None => {}
            }
        }
        Ok(self.static_head.fwd(g, tape, "gen.static.head", feats))
    }

    /// Face synthesis conditioned on rasterized textures: at every scale the
    /// block output is replaced by `mask * T + (1 - mask) * features`, so
    /// uncovered regions are inpainted from global context. Returns final
    /// front-plane features plus the finest coverage mask.
    pub fn g_face(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        wplus: NodeId,
        rasterized: &[(NodeId, Tensor)],
    ) -> Result<(NodeId, Tensor)> {
        if rasterized.len() != self.n_scales() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} rasterized scales, got {}",
                self.n_scales(),
                rasterized.len()
            )));
        }
        let mut feats = tape.bind(g, "gen.face.const", &self.face_const);
        for (s, block) in self.face_blocks.iter().enumerate() {
            if s > 0 {
                feats = g.upsample_nearest2(feats);
            }
            let style = self.style_row(g, wplus, s);
            feats = block.fwd(g, tape, &format!("gen.face.block{s}"), feats, style);
            feats = g.leaky_relu(feats, LRELU);
            let (tex, mask) = &rasterized[s];
            let shape = g.shape(feats).to_vec();
            if g.shape(*tex) != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "rasterized scale {s}: {:?} vs features {:?}",
                    g.shape(*tex),
                    shape
                )));
            }
            let m = g.leaf(repeat_mask(mask, shape[0]));
            let inv = g.leaf(repeat_mask(&mask.map(|v| 1.0 - v), shape[0]));
            let covered = g.mul(*tex, m);
            let inpaint = g.mul(feats, inv);
            feats = g.add(covered, inpaint);
        }
        let out = self.face_head.fwd(g, tape, "gen.face.head", feats);
        Ok((out, rasterized.last().unwrap().1.clone()))
    }

    /// Blends dynamic face features over the static front plane; side planes
    /// pass through.
    pub fn compose(
        &self,
        g: &mut Graph,
        face: NodeId,
        coverage: &Tensor,
        static_planes: NodeId,
    ) -> Result<NodeId> {
        let cp = self.dims.plane_channels;
        let face_shape = g.shape(face).to_vec();
        if face_shape[1] != g.shape(static_planes)[1] {
            return Err(Error::ShapeMismatch(
                "face grid resolution must equal static front plane".into(),
            ));
        }
        let front = g.slice0(static_planes, 0, cp);
        let sides = g.slice0(static_planes, cp, static_width(&self.dims));
        let m = g.leaf(repeat_mask(coverage, cp));
        let inv = g.leaf(repeat_mask(&coverage.map(|v| 1.0 - v), cp));
        let covered = g.mul(face, m);
        let kept = g.mul(front, inv);
        let blended = g.add(covered, kept);
        Ok(g.concat0(&[blended, sides]))
    }

    /// Volumetric rendering: for each ray, features are the sum of bilinear
    /// plane reads, a small decoder yields softplus density plus sigmoid
    /// feature colors, and alpha compositing accumulates raw/alpha/depth.
    /// rgb is the first three raw channels over a white background, clamped.
    pub fn render(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        planes: NodeId,
        plan: &RenderPlan,
    ) -> RenderNodes {
        let cp = self.dims.plane_channels;
        let cr = self.dims.render_features;
        let res = plan.res;
        let spp = plan.spp;
        let m = res * res * spp;

        let mut feats = None;
        for k in 0..3 {
            let plane = g.slice0(planes, k * cp, (k + 1) * cp);
            let flat = g.reshape(plane, &[cp, g.shape(plane)[1] * g.shape(plane)[2]]);
            let sampled = g.gather(flat, plan.plane_plans[k].clone());
            feats = Some(match feats {
                None => sampled,
                Some(acc) => g.add(acc, sampled),
            });
        }
        let feats = feats.unwrap(); // [cp, m]

        let hid = self.decoder.hidden.fwd(g, tape, "gen.decoder.hidden", feats);
        let hid = g.leaky_relu(hid, LRELU);
        let out = self.decoder.out.fwd(g, tape, "gen.decoder.out", hid); // [1+cr, m]
        let sigma_raw = g.slice0(out, 0, 1);
        let sigma = g.softplus(sigma_raw);
        let sigma = g.reshape(sigma, &[m]);
        let colors_raw = g.slice0(out, 1, 1 + cr);
        let colors = g.sigmoid(colors_raw); // [cr, m]

        let delta = g.leaf(plan.deltas.clone());
        let s = g.mul(sigma, delta); // sigma_i * delta_i
        let s_rows = g.reshape(s, &[res * res, spp]);
        let before = g.cumsum_excl_last(s_rows, spp);
        let neg_before = g.neg(before);
        let transmittance = g.exp(neg_before);
        let neg_s = g.neg(s_rows);
        let exp_s = g.exp(neg_s);
        let neg_exp = g.neg(exp_s);
        let alpha_i = g.add_const(neg_exp, 1.0); // 1 - exp(-sigma delta)
        let weights = g.mul(transmittance, alpha_i); // [rays, spp]
        let w_flat = g.reshape(weights, &[m]);

        let weighted = g.mul_bcast0(colors, w_flat); // [cr, m]
        let weighted = g.reshape(weighted, &[cr * res * res, spp]);
        let raw = g.sum_last(weighted, spp);
        let raw = g.reshape(raw, &[cr, res, res]);

        let alpha = g.sum_last(weights, spp); // [rays]
        let alpha = g.clamp01(alpha); // guard float dust above 1 on saturated rays
        let t_leaf = g.leaf(plan.ts.clone());
        let t_rows = g.reshape(t_leaf, &[res * res, spp]);
        let wt = g.mul(weights, t_rows);
        let depth = g.sum_last(wt, spp);

        // white background enters the color channels only
        let rgb_fg = g.slice0(raw, 0, 3);
        let rgb_fg = g.reshape(rgb_fg, &[3, res * res]);
        let neg_alpha = g.neg(alpha);
        let bg_w = g.add_const(neg_alpha, 1.0); // [rays]
        let ones = g.leaf(Tensor::full(&[3, res * res], 1.0));
        let bg = g.mul_bcast0(ones, bg_w);
        let rgb = g.add(rgb_fg, bg);
        let rgb = g.clamp01(rgb);
        let rgb = g.reshape(rgb, &[3, res, res]);

        let alpha = g.reshape(alpha, &[res, res]);
        let depth = g.reshape(depth, &[res, res]);
        RenderNodes {
            raw,
            rgb,
            alpha,
            depth,
        }
    }

    /// Frontal orthographic rasterization plans of the deformed mesh onto the
    /// texture scale grids; shared by synthesis and training supervision.
    pub fn face_raster_plans(&self, head: &HeadModel, params: &FaceParams) -> Result<Vec<RasterPlan>> {
        let mesh = head.deform(params)?;
        Ok(self
            .dims
            .tex_resolutions
            .iter()
            .map(|&r| {
                let cam = frontal_ortho_camera(r, self.dims.volume_half_extent);
                plan_rasterize(&mesh, &cam, r, r, r)
            })
            .collect())
    }

    /// Dynamic-branch assembly over explicit texture and static-plane nodes:
    /// deform -> rasterize -> g_face -> compose -> render.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble_and_render(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        head: &HeadModel,
        wplus: NodeId,
        params: &FaceParams,
        camera: &Camera,
        tex_scales: Vec<NodeId>,
        static_planes: NodeId,
        spp: usize,
    ) -> Result<SynthNodes> {
        let plans = self.face_raster_plans(head, params)?;
        let mut rasterized = Vec::new();
        for (tex, plan) in tex_scales.iter().zip(&plans) {
            let img = plan.apply_node(g, *tex);
            rasterized.push((img, plan.mask.clone()));
        }
        let (face, coverage) = self.g_face(g, tape, wplus, &rasterized)?;
        let planes = self.compose(g, face, &coverage, static_planes)?;
        let plan = build_render_plan(
            camera,
            camera.resolution,
            spp,
            self.dims.volume_half_extent,
            self.dims.plane_resolution,
        );
        let render = self.render(g, tape, planes, &plan);
        Ok(SynthNodes {
            tex_scales,
            planes,
            render,
        })
    }

    /// The definitional full forward pass:
    /// g_tex (+ offsets) -> deform -> rasterize -> g_face -> compose with
    /// g_static(w, sft) -> render.
    #[allow(clippy::too_many_arguments)]
    pub fn synthesize(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        head: &HeadModel,
        wplus: NodeId,
        params: &FaceParams,
        camera: &Camera,
        tex_offsets: Option<&[NodeId]>,
        sft: Option<&[(NodeId, NodeId)]>,
        spp: usize,
    ) -> Result<SynthNodes> {
        let mut tex_scales = self.g_tex(g, tape, wplus);
        if let Some(offsets) = tex_offsets {
            if offsets.len() != tex_scales.len() {
                return Err(Error::ShapeMismatch("offset scale count".into()));
            }
            for (t, &o) in tex_scales.iter_mut().zip(offsets) {
                if g.shape(*t) != g.shape(o) {
                    return Err(Error::ShapeMismatch(format!(
                        "texture offset {:?} vs {:?}",
                        g.shape(o),
                        g.shape(*t)
                    )));
                }
                *t = g.add(*t, o);
            }
        }
        let static_planes = self.g_static(g, tape, wplus, sft)?;
        self.assemble_and_render(
            g,
            tape,
            head,
            wplus,
            params,
            camera,
            tex_scales,
            static_planes,
            spp,
        )
    }

    /// Convenience non-graph synthesis.
    #[allow(clippy::too_many_arguments)]
    pub fn synthesize_t(
        &self,
        head: &HeadModel,
        w: &LatentCode,
        params: &FaceParams,
        camera: &Camera,
        tex_offsets: Option<&NeuralTexture>,
        sft: Option<&crate::encoders::SftParams>,
        spp: usize,
    ) -> Result<RenderOutput> {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let wn = g.leaf(w.to_tensor());
        let off_nodes: Option<Vec<NodeId>> =
            tex_offsets.map(|o| o.scales.iter().map(|t| g.leaf(t.clone())).collect());
        let sft_nodes: Option<Vec<(NodeId, NodeId)>> = sft.map(|s| {
            s.scales
                .iter()
                .map(|(a, b)| (g.leaf(a.clone()), g.leaf(b.clone())))
                .collect()
        });
        let parts = self.synthesize(
            &mut g,
            &mut tape,
            head,
            wn,
            params,
            camera,
            off_nodes.as_deref(),
            sft_nodes.as_deref(),
            spp,
        )?;
        Ok(parts.render.materialize(&g))
    }

    pub fn g_tex_t(&self, w: &LatentCode) -> NeuralTexture {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let wn = g.leaf(w.to_tensor());
        let scales = self.g_tex(&mut g, &mut tape, wn);
        NeuralTexture {
            scales: scales.iter().map(|&s| g.value(s).clone()).collect(),
        }
    }

    pub fn g_static_t(&self, w: &LatentCode, sft: Option<&crate::encoders::SftParams>) -> TriPlane {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let wn = g.leaf(w.to_tensor());
        let sft_nodes: Option<Vec<(NodeId, NodeId)>> = sft.map(|s| {
            s.scales
                .iter()
                .map(|(a, b)| (g.leaf(a.clone()), g.leaf(b.clone())))
                .collect()
        });
        let planes = self
            .g_static(&mut g, &mut tape, wn, sft_nodes.as_deref())
            .expect("consistent generator configuration");
        TriPlane {
            planes: g.value(planes).clone(),
            channels: self.dims.plane_channels,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gen.map.0.w", &mut self.mapping[0].weight);
        f("gen.map.0.b", &mut self.mapping[0].bias);
        f("gen.map.1.w", &mut self.mapping[1].weight);
        f("gen.map.1.b", &mut self.mapping[1].bias);
        f("gen.tex.const", &mut self.tex_const);
        for (s, b) in self.tex_blocks.iter_mut().enumerate() {
            b.visit(&format!("gen.tex.block{s}"), f);
        }
        for (s, h) in self.tex_heads.iter_mut().enumerate() {
            h.visit(&format!("gen.tex.head{s}"), f);
        }
        f("gen.static.const", &mut self.static_const);
        for (s, b) in self.static_blocks.iter_mut().enumerate() {
            b.visit(&format!("gen.static.block{s}"), f);
        }
        self.static_head.visit("gen.static.head", f);
        f("gen.face.const", &mut self.face_const);
        for (s, b) in self.face_blocks.iter_mut().enumerate() {
            b.visit(&format!("gen.face.block{s}"), f);
        }
        self.face_head.visit("gen.face.head", f);
        self.decoder.hidden.visit("gen.decoder.hidden", f);
        self.decoder.out.visit("gen.decoder.out", f);
    }
}

fn repeat_mask(mask: &Tensor, channels: usize) -> Tensor {
    let sp = mask.len();
    let mut data = Vec::with_capacity(channels * sp);
    for _ in 0..channels {
        data.extend_from_slice(mask.data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(mask.shape());
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::{build_toy_model, camera_from_pose};

    fn small_dims() -> ModelConfig {
        ModelConfig {
            render_resolution: 16,
            samples_per_ray: 16,
            mesh_grid: 24,
            ..ModelConfig::default()
        }
    }

    fn setup() -> (Generator, HeadModel, Camera) {
        let dims = small_dims();
        let gen = Generator::new(&dims, 7);
        let head = build_toy_model(7, 4, 4, dims.mesh_grid, dims.head_radius);
        let cam = camera_from_pose(0.0, 0.0, 4.0, 1.2 * 16.0, 16).unwrap();
        (gen, head, cam)
    }

    fn wcode(gen: &Generator, seed: u64) -> LatentCode {
        let mut rng = seeded_rng(seed, "test.latent");
        gen.map_latent(&crate::nn::randn_vec(gen.dims.latent_dim, &mut rng))
    }

    #[test]
    fn g_tex_deterministic_with_configured_scales() {
        let (gen, _, _) = setup();
        let w = wcode(&gen, 1);
        let a = gen.g_tex_t(&w);
        let b = gen.g_tex_t(&w);
        assert_eq!(a.scales, b.scales);
        a.validate().unwrap();
        for (t, (&r, &c)) in a.scales.iter().zip(
            gen.dims
                .tex_resolutions
                .iter()
                .zip(&gen.dims.tex_channels),
        ) {
            assert_eq!(t.shape(), &[c, r, r]);
        }
    }

    #[test]
    fn distinct_w_rows_change_textures() {
        let (gen, _, _) = setup();
        let w = wcode(&gen, 2);
        let mut w2 = w.clone();
        for v in &mut w2.wplus[1] {
            *v += 0.5;
        }
        let a = gen.g_tex_t(&w);
        let b = gen.g_tex_t(&w2);
        let differs = a
            .scales
            .iter()
            .zip(&b.scales)
            .any(|(x, y)| x.data().iter().zip(y.data()).any(|(u, v)| u != v));
        assert!(differs);
    }

    #[test]
    fn g_static_identity_modulation_matches_no_modulation() {
        let (gen, _, _) = setup();
        let w = wcode(&gen, 3);
        let plain = gen.g_static_t(&w, None);
        let half = gen.dims.plane_channels * 3 / 2;
        let ident = crate::encoders::SftParams {
            scales: gen
                .dims
                .tex_resolutions
                .iter()
                .map(|&r| {
                    (
                        Tensor::full(&[half, r, r], 1.0),
                        Tensor::zeros(&[half, r, r]),
                    )
                })
                .collect(),
        };
        let modded = gen.g_static_t(&w, Some(&ident));
        assert_eq!(plain.planes.shape(), modded.planes.shape());
        for (a, b) in plain.planes.data().iter().zip(modded.planes.data()) {
            assert_eq!(a, b);
        }
        assert_eq!(
            plain.planes.shape(),
            &[3 * gen.dims.plane_channels, 32, 32]
        );
    }

    #[test]
    fn face_blend_endpoints() {
        let (gen, _, _) = setup();
        let w = wcode(&gen, 4);
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let wn = g.leaf(w.to_tensor());

        // full coverage: post-blend features equal the rasterized texture,
        // so the head output depends only on the final blended scale
        let full: Vec<(NodeId, Tensor)> = gen
            .dims
            .tex_resolutions
            .iter()
            .zip(&gen.dims.tex_channels)
            .map(|(&r, &c)| {
                let t = g.leaf(Tensor::full(&[c, r, r], 0.37));
                (t, Tensor::full(&[r, r], 1.0))
            })
            .collect();
        let (out_full, cov) = gen.g_face(&mut g, &mut tape, wn, &full).unwrap();
        assert!(cov.data().iter().all(|&m| m == 1.0));

        // zero coverage: output must ignore rasterized values entirely
        let zero_a: Vec<(NodeId, Tensor)> = gen
            .dims
            .tex_resolutions
            .iter()
            .zip(&gen.dims.tex_channels)
            .map(|(&r, &c)| {
                let t = g.leaf(Tensor::full(&[c, r, r], 123.0));
                (t, Tensor::zeros(&[r, r]))
            })
            .collect();
        let zero_b: Vec<(NodeId, Tensor)> = gen
            .dims
            .tex_resolutions
            .iter()
            .zip(&gen.dims.tex_channels)
            .map(|(&r, &c)| {
                let t = g.leaf(Tensor::full(&[c, r, r], -55.0));
                (t, Tensor::zeros(&[r, r]))
            })
            .collect();
        let (oa, _) = gen.g_face(&mut g, &mut tape, wn, &zero_a).unwrap();
        let (ob, _) = gen.g_face(&mut g, &mut tape, wn, &zero_b).unwrap();
        assert_eq!(g.value(oa).data(), g.value(ob).data());

        // the full-coverage path saw constant texture 0.37 at the last
        // scale; its head input is exactly that constant
        let lastc = *gen.dims.tex_channels.last().unwrap();
        let lastr = *gen.dims.tex_resolutions.last().unwrap();
        let mut g2 = Graph::new();
        let mut tape2 = ParamTape::new();
        let direct = g2.leaf(Tensor::full(&[lastc, lastr, lastr], 0.37));
        let head_out = gen.face_head.fwd(&mut g2, &mut tape2, "gen.face.head", direct);
        assert_eq!(g.value(out_full).data(), g2.value(head_out).data());
    }

    #[test]
    fn face_blend_linear_in_mask() {
        // at a single pixel the post-blend feature interpolates linearly
        // between the two endpoint features
        let (gen, _, _) = setup();
        let w = wcode(&gen, 5);
        let value_at = |mask_v: f64| -> f64 {
            let mut g = Graph::new();
            let mut tape = ParamTape::new();
            let wn = g.leaf(w.to_tensor());
            let scales: Vec<(NodeId, Tensor)> = gen
                .dims
                .tex_resolutions
                .iter()
                .zip(&gen.dims.tex_channels)
                .enumerate()
                .map(|(s, (&r, &c))| {
                    let t = g.leaf(Tensor::full(&[c, r, r], 0.8));
                    let mut m = Tensor::zeros(&[r, r]);
                    if s == 0 {
                        m.data_mut()[3 * r + 3] = mask_v;
                    }
                    (t, m)
                })
                .collect();
            let (out, _) = gen.g_face(&mut g, &mut tape, wn, &scales).unwrap();
            g.value(out).data()[0]
        };
        let v0 = value_at(0.0);
        let v1 = value_at(1.0);
        let vh = value_at(0.5);
        assert!((vh - 0.5 * (v0 + v1)).abs() < 1e-9);
    }

    #[test]
    fn compose_endpoints_and_convexity() {
        let (gen, _, _) = setup();
        let w = wcode(&gen, 6);
        let cp = gen.dims.plane_channels;
        let r = gen.dims.plane_resolution;
        let mut rng = seeded_rng(9, "test.compose");
        let face = Tensor::randn(&[cp, r, r], 1.0, &mut rng);
        let stat = gen.g_static_t(&w, None);

        let run = |cov: &Tensor| {
            let mut g = Graph::new();
            let f = g.leaf(face.clone());
            let s = g.leaf(stat.planes.clone());
            let out = gen.compose(&mut g, f, cov, s).unwrap();
            g.value(out).clone()
        };
        let zero = run(&Tensor::zeros(&[r, r]));
        assert_eq!(zero.data(), stat.planes.data());
        let one = run(&Tensor::full(&[r, r], 1.0));
        assert_eq!(&one.data()[..cp * r * r], face.data());
        assert_eq!(&one.data()[cp * r * r..], &stat.planes.data()[cp * r * r..]);

        let cov = Tensor::randn(&[r, r], 1.0, &mut rng).map(|v| crate::graph::sigmoid(v));
        let mixed = run(&cov);
        for c in 0..cp {
            for i in 0..r * r {
                let m = cov.data()[i];
                let expect = m * face.data()[c * r * r + i]
                    + (1.0 - m) * stat.planes.data()[c * r * r + i];
                let got = mixed.data()[c * r * r + i];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_zero_density_is_empty() {
        let (mut gen, _, cam) = setup();
        gen.decoder = RayDecoder::constant(gen.dims.plane_channels, gen.dims.render_features, 0.0, 0.5);
        let w = wcode(&gen, 7);
        let planes = gen.g_static_t(&w, None);
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let p = g.leaf(planes.planes.clone());
        let plan = build_render_plan(&cam, 16, 32, gen.dims.volume_half_extent, 32);
        let out = gen.render(&mut g, &mut tape, p, &plan).materialize(&g);
        assert!(out.alpha.data().iter().all(|&a| a == 0.0));
        assert!(out.raw.data().iter().all(|&v| v == 0.0));
        assert!(out.rgb.data().iter().all(|&v| v == 1.0)); // white background
    }

    #[test]
    fn render_uniform_density_matches_transmittance_integral() {
        let (mut gen, _, _) = setup();
        let sigma = 0.8;
        let color = 0.3;
        gen.decoder =
            RayDecoder::constant(gen.dims.plane_channels, gen.dims.render_features, sigma, color);
        let w = wcode(&gen, 8);
        let planes = gen.g_static_t(&w, None);
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let p = g.leaf(planes.planes.clone());
        // odd resolution puts the middle pixel's center exactly on-axis,
        // so that ray's chord is the full cube: L = 2 * half_extent
        let res = 17;
        let cam = camera_from_pose(0.0, 0.0, 4.0, 1.2 * res as f64, res).unwrap();
        let plan = build_render_plan(&cam, res, 256, gen.dims.volume_half_extent, 32);
        let out = gen.render(&mut g, &mut tape, p, &plan).materialize(&g);

        let c = 8;
        let l = 2.0 * gen.dims.volume_half_extent;
        let expect = 1.0 - (-sigma * l).exp();
        let got = out.alpha.at3_2(c, c);
        assert!(
            (got - expect).abs() < 1e-4,
            "alpha {got} vs closed form {expect}"
        );
        let raw0 = out.raw.at3(0, c, c);
        assert!((raw0 - color * got).abs() < 1e-9, "color accumulates to c * alpha");
    }

    #[test]
    fn render_sampling_refines_monotonically() {
        let (gen, _, cam) = setup();
        let w = wcode(&gen, 9);
        let planes = gen.g_static_t(&w, None);
        let render_at = |spp: usize| {
            let mut g = Graph::new();
            let mut tape = ParamTape::new();
            let p = g.leaf(planes.planes.clone());
            let plan = build_render_plan(&cam, 16, spp, gen.dims.volume_half_extent, 32);
            gen.render(&mut g, &mut tape, p, &plan).materialize(&g).raw
        };
        let r32 = render_at(32);
        let r64 = render_at(64);
        let r128 = render_at(128);
        let diff = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let coarse = diff(&r32, &r64);
        let fine = diff(&r64, &r128);
        assert!(fine < coarse, "refinement: {fine} vs {coarse}");
    }

    #[test]
    fn synthesize_equals_manual_chain_and_is_deterministic() {
        let (gen, head, cam) = setup();
        let w = wcode(&gen, 10);
        let params = FaceParams {
            shape: vec![0.3, -0.2, 0.1, 0.4],
            expression: vec![0.2, -0.5, 0.3, -0.1],
        };
        let direct = gen
            .synthesize_t(&head, &w, &params, &cam, None, None, 16)
            .unwrap();
        let direct2 = gen
            .synthesize_t(&head, &w, &params, &cam, None, None, 16)
            .unwrap();
        assert_eq!(direct.raw.data(), direct2.raw.data());

        // manual chain
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let wn = g.leaf(w.to_tensor());
        let tex = gen.g_tex(&mut g, &mut tape, wn);
        let plans = gen.face_raster_plans(&head, &params).unwrap();
        let rasterized: Vec<(NodeId, Tensor)> = tex
            .iter()
            .zip(&plans)
            .map(|(t, p)| (p.apply_node(&mut g, *t), p.mask.clone()))
            .collect();
        let (face, cov) = gen.g_face(&mut g, &mut tape, wn, &rasterized).unwrap();
        let stat = gen.g_static(&mut g, &mut tape, wn, None).unwrap();
        let composed = gen.compose(&mut g, face, &cov, stat).unwrap();
        let plan = build_render_plan(&cam, 16, 16, gen.dims.volume_half_extent, 32);
        let render = gen.render(&mut g, &mut tape, composed, &plan).materialize(&g);
        assert_eq!(direct.raw.data(), render.raw.data());
        assert_eq!(direct.rgb.data(), render.rgb.data());
    }

    #[test]
    fn expression_change_leaves_static_branch_unchanged() {
        let (gen, _, _) = setup();
        let w = wcode(&gen, 11);
        let a = gen.g_static_t(&w, None);
        let b = gen.g_static_t(&w, None);
        assert_eq!(a.planes.data(), b.planes.data());
    }

    #[test]
    fn full_pipeline_gradient_wrt_coarsest_texture() {
        // d(mean rgb)/d(texture scale-1 values), analytic vs central
        // finite differences, on a 16x16 render
        let (gen, head, cam) = setup();
        let w = wcode(&gen, 20);
        let params = FaceParams {
            shape: vec![0.2, -0.3, 0.1, 0.0],
            expression: vec![-0.1, 0.4, 0.0, 0.2],
        };
        let base_tex = gen.g_tex_t(&w);
        let spp = 8;

        let eval = |tex0: &Tensor| -> f64 {
            let mut g = Graph::new();
            let mut tape = ParamTape::new();
            let wn = g.leaf(w.to_tensor());
            let mut scales: Vec<NodeId> =
                base_tex.scales.iter().map(|t| g.leaf(t.clone())).collect();
            scales[0] = g.leaf(tex0.clone());
            let stat = gen.g_static(&mut g, &mut tape, wn, None).unwrap();
            let parts = gen
                .assemble_and_render(&mut g, &mut tape, &head, wn, &params, &cam, scales, stat, spp)
                .unwrap();
            let m = g.mean_all(parts.render.rgb);
            g.value(m).item()
        };

        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let wn = g.leaf(w.to_tensor());
        let mut scales: Vec<NodeId> = base_tex.scales.iter().map(|t| g.leaf(t.clone())).collect();
        let tex0 = g.leaf(base_tex.scales[0].clone());
        scales[0] = tex0;
        let stat = gen.g_static(&mut g, &mut tape, wn, None).unwrap();
        let parts = gen
            .assemble_and_render(&mut g, &mut tape, &head, wn, &params, &cam, scales, stat, spp)
            .unwrap();
        let m = g.mean_all(parts.render.rgb);
        let grads = g.backward(m);
        let analytic = g.value(grads.get(tex0).unwrap()).clone();

        let h = 1e-4;
        let mut checked = 0;
        for idx in (0..base_tex.scales[0].len()).step_by(37) {
            let mut plus = base_tex.scales[0].clone();
            plus.data_mut()[idx] += h;
            let mut minus = base_tex.scales[0].clone();
            minus.data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            assert!(
                ((a - numeric) / denom).abs() < 1e-2,
                "texel {idx}: analytic {a} vs fd {numeric}"
            );
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn expression_changes_stay_local_to_their_patch() {
        // a hand-built model whose only expression basis displaces a small
        // front patch; renders must agree exactly outside the patch's
        // influence region (conv receptive spread plus ray footprint)
        let dims = small_dims();
        let gen = Generator::new(&dims, 7);
        let mut head = build_toy_model(7, 1, 1, dims.mesh_grid, dims.head_radius);
        let patch_r = 0.22;
        for basis in head.shape_basis.iter_mut().chain(head.expr_basis.iter_mut()) {
            for (v, d) in head.base.vertices.iter().zip(basis.iter_mut()) {
                let lateral = (v[0] * v[0] + v[1] * v[1]).sqrt();
                if v[2] > 0.0 && lateral < patch_r {
                    *d = [0.0, 0.0, 0.08];
                } else {
                    *d = [0.0; 3];
                }
            }
        }
        let w = wcode(&gen, 21);
        let res = 16usize;
        let cam = camera_from_pose(0.0, 0.0, 4.0, 1.2 * res as f64, res).unwrap();
        let render = |e: f64| {
            gen.synthesize_t(
                &head,
                &w,
                &FaceParams {
                    shape: vec![0.0],
                    expression: vec![e],
                },
                &cam,
                None,
                None,
                8,
            )
            .unwrap()
            .rgb
        };
        let a = render(0.5);
        let b = render(-0.5);

        // changed-texel radius at the finest plane scale: the patch inserted
        // at every blend, spread by one texel per conv and doubled per
        // upsample, plus one texel of bilinear sampling on each side
        let he = dims.volume_half_extent;
        let world_patch = patch_r + 0.08 + 0.1; // patch + displacement + raster slack
        let mut diff_r = 0.0f64;
        for (s, &r) in dims.tex_resolutions.iter().enumerate() {
            let texel = 2.0 * he / r as f64;
            let mut radius = world_patch / texel + 1.0; // insertion + bilinear raster
            for _ in s + 1..dims.tex_resolutions.len() {
                radius = radius * 2.0 + 1.0; // upsample then 3x3 conv
            }
            diff_r = diff_r.max(radius);
        }
        let finest = *dims.tex_resolutions.last().unwrap() as f64;
        let plane_texel = 2.0 * he / finest;
        let influence_world = diff_r * plane_texel + 2.0 * plane_texel;

        // a pixel is safe when its ray's in-cube segment stays clear of the
        // patch column in both lateral axes
        let (right, up, forward) = cam.basis();
        let origin = cam.position();
        let mut unsafe_px = vec![false; res * res];
        for py in 0..res {
            for px in 0..res {
                let dx = (px as f64 + 0.5 - cam.principal[0]) / cam.focal;
                let dy = -(py as f64 + 0.5 - cam.principal[1]) / cam.focal;
                let dir = crate::facemodel::normalize([
                    right[0] * dx + up[0] * dy + forward[0],
                    right[1] * dx + up[1] * dy + forward[1],
                    right[2] * dx + up[2] * dy + forward[2],
                ]);
                let mut min_lat = f64::MAX;
                for i in 0..=16 {
                    let t = (4.0 - he) + (2.0 * he) * i as f64 / 16.0;
                    let x = origin[0] + t * dir[0];
                    let y = origin[1] + t * dir[1];
                    min_lat = min_lat.min((x * x + y * y).sqrt());
                }
                if min_lat <= influence_world {
                    unsafe_px[py * res + px] = true;
                }
            }
        }
        let mut safe_count = 0;
        let mut changed_safe = 0;
        for idx in 0..res * res {
            if unsafe_px[idx] {
                continue;
            }
            safe_count += 1;
            for c in 0..3 {
                if a.data()[c * res * res + idx] != b.data()[c * res * res + idx] {
                    changed_safe += 1;
                }
            }
        }
        assert!(safe_count > 0, "construction must leave unaffected pixels");
        assert_eq!(
            changed_safe, 0,
            "{changed_safe} channel values changed outside the dilated patch"
        );
    }

    #[test]
    fn rendered_rgb_in_unit_range() {
        let (gen, head, _) = setup();
        let w = wcode(&gen, 12);
        for seed in 0..3u64 {
            let mut rng = seeded_rng(seed, "test.range");
            let params = FaceParams {
                shape: (0..4).map(|_| rng.gen_range(-0.9..0.9)).collect(),
                expression: (0..4).map(|_| rng.gen_range(-0.9..0.9)).collect(),
            };
            let cam = camera_from_pose(
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.3..0.3),
                4.0,
                1.2 * 16.0,
                16,
            )
            .unwrap();
            let out = gen
                .synthesize_t(&head, &w, &params, &cam, None, None, 12)
                .unwrap();
            assert!(out.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.alpha.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.raw.all_finite());
        }
    }

    use rand::Rng;

    impl Tensor {
        fn at3_2(&self, y: usize, x: usize) -> f64 {
            self.data()[y * self.shape()[1] + x]
        }
    }
}
