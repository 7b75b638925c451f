//! One-shot inversion encoders: image to W+ latent, UV-domain texture
//! feature offsets, and image-to-plane CS-SFT modulation parameters.
//!
//! Refinement heads start at zero (offsets) and identity (modulation), so an
//! untrained fine stage reproduces the coarse stage exactly.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{seeded_rng, Conv2d, Linear, ParamTape};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

/// Per-scale UV grids matching the neural texture shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct TexOffsets {
    pub scales: Vec<Tensor>,
}

impl TexOffsets {
    pub fn zeros(dims: &ModelConfig) -> Self {
        TexOffsets {
            scales: dims
                .tex_resolutions
                .iter()
                .zip(&dims.tex_channels)
                .map(|(&r, &c)| Tensor::zeros(&[c, r, r]))
                .collect(),
        }
    }
}

/// Per-scale (alpha, beta) map pairs at the static-branch modulation points.
#[derive(Clone, Debug, PartialEq)]
pub struct SftParams {
    pub scales: Vec<(Tensor, Tensor)>,
}

impl SftParams {
    pub fn identity(dims: &ModelConfig) -> Self {
        let half = 3 * dims.plane_channels / 2;
        SftParams {
            scales: dims
                .tex_resolutions
                .iter()
                .map(|&r| {
                    (
                        Tensor::full(&[half, r, r], 1.0),
                        Tensor::zeros(&[half, r, r]),
                    )
                })
                .collect(),
        }
    }
}

/// Channel-split spatial feature transform: the first half of the channels
/// is mapped to `alpha * F + beta`, the second half passes through.
pub fn apply_cs_sft(g: &mut Graph, features: NodeId, alpha: NodeId, beta: NodeId) -> Result<NodeId> {
    let shape = g.shape(features).to_vec();
    let c = shape[0];
    let half = c / 2;
    let expected: Vec<usize> = std::iter::once(half).chain(shape[1..].iter().copied()).collect();
    if g.shape(alpha) != expected.as_slice() || g.shape(beta) != expected.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "cs-sft maps {:?}/{:?} vs modulated split {:?}",
            g.shape(alpha),
            g.shape(beta),
            expected
        )));
    }
    let modulated = g.slice0(features, 0, half);
    let rest = g.slice0(features, half, c);
    let scaled = g.mul(modulated, alpha);
    let shifted = g.add(scaled, beta);
    Ok(g.concat0(&[shifted, rest]))
}

pub struct LatentEncoder {
    convs: Vec<Conv2d>,
    fc: Linear,
    pub input_res: usize,
    pub rows: usize,
    pub dim: usize,
}

impl LatentEncoder {
    pub fn new(dims: &ModelConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "e_latent");
        let res = dims.render_resolution;
        let convs = vec![
            Conv2d::new(3, 32, 3, &mut rng),
            Conv2d::new(32, 48, 3, &mut rng),
            Conv2d::new(48, 64, 3, &mut rng),
        ];
        let bottleneck = res / 8;
        LatentEncoder {
            convs,
            fc: Linear::new(64 * bottleneck * bottleneck, dims.wplus_rows * dims.latent_dim, &mut rng),
            input_res: res,
            rows: dims.wplus_rows,
            dim: dims.latent_dim,
        }
    }

    /// image [3, R, R] -> W+ node [rows, dim].
    pub fn encode(&self, g: &mut Graph, tape: &mut ParamTape, image: NodeId) -> Result<NodeId> {
        let shape = g.shape(image);
        if shape != [3, self.input_res, self.input_res] {
            return Err(Error::ShapeMismatch(format!(
                "latent encoder expects [3, {0}, {0}], got {shape:?}",
                self.input_res
            )));
        }
        let mut x = image;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.fwd(g, tape, &format!("e_latent.conv{i}"), x);
            x = g.leaky_relu(x, LRELU);
            x = g.avg_pool2(x);
        }
        let n = g.value(x).len();
        let flat = g.reshape(x, &[n, 1]);
        let w = self.fc.fwd(g, tape, "e_latent.fc", flat);
        Ok(g.reshape(w, &[self.rows, self.dim]))
    }

    /// Re-centers the encoder output at `latent` and damps the fresh head
    /// weights, so an untrained encoder emits the given baseline code.
    pub fn init_output_at(&mut self, latent: &crate::generator::LatentCode, damp: f64) {
        self.fc.weight = self.fc.weight.scale(damp);
        self.fc.bias = latent.to_tensor().reshaped(&[self.rows * self.dim]);
    }

    pub fn encode_t(&self, image: &Tensor) -> Result<crate::generator::LatentCode> {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let im = g.leaf(image.clone());
        let w = self.encode(&mut g, &mut tape, im)?;
        Ok(crate::generator::LatentCode::from_tensor(g.value(w)))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("e_latent.conv{i}"), f);
        }
        self.fc.visit("e_latent.fc", f);
    }
}

/// Shared U-Net skeleton: three encoder levels, three decoder levels with
/// skips. Decoder features surface at the texture scale resolutions.
#[derive(Clone, Debug)]
pub struct UNet {
    pub enc: Vec<Conv2d>,
    pub dec: Vec<Conv2d>,
    pub cin: usize,
}

pub const UNET_ENC_CH: [usize; 3] = [32, 48, 64];
/// Decoder feature channels per scale, coarse to fine.
pub const UNET_DEC_CH: [usize; 3] = [64, 48, 32];

impl UNet {
    pub fn new(cin: usize, rng: &mut ChaCha8Rng) -> Self {
        UNet {
            enc: vec![
                Conv2d::new(cin, UNET_ENC_CH[0], 3, rng),
                Conv2d::new(UNET_ENC_CH[0], UNET_ENC_CH[1], 3, rng),
                Conv2d::new(UNET_ENC_CH[1], UNET_ENC_CH[2], 3, rng),
            ],
            dec: vec![
                Conv2d::new(UNET_ENC_CH[2], UNET_DEC_CH[0], 3, rng),
                Conv2d::new(UNET_DEC_CH[0] + UNET_ENC_CH[1], UNET_DEC_CH[1], 3, rng),
                Conv2d::new(UNET_DEC_CH[1] + UNET_ENC_CH[0], UNET_DEC_CH[2], 3, rng),
            ],
            cin,
        }
    }

    /// Down path only; returns per-level features finest-first.
    pub fn encode(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        prefix: &str,
        x: NodeId,
    ) -> [NodeId; 3] {
        let e1 = self.enc[0].fwd(g, tape, &format!("{prefix}.enc0"), x);
        let e1 = g.leaky_relu(e1, LRELU);
        let d1 = g.avg_pool2(e1);
        let e2 = self.enc[1].fwd(g, tape, &format!("{prefix}.enc1"), d1);
        let e2 = g.leaky_relu(e2, LRELU);
        let d2 = g.avg_pool2(e2);
        let e3 = self.enc[2].fwd(g, tape, &format!("{prefix}.enc2"), d2);
        let e3 = g.leaky_relu(e3, LRELU);
        [e1, e2, e3]
    }

    /// Full pass; returns decoder features coarse-first (8, 16, 32).
    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        prefix: &str,
        x: NodeId,
    ) -> [NodeId; 3] {
        let [e1, e2, e3] = self.encode(g, tape, prefix, x);
        self.decode(g, tape, prefix, [e1, e2, e3])
    }

    /// Decoder path over given backbone features.
    pub fn decode(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        prefix: &str,
        enc: [NodeId; 3],
    ) -> [NodeId; 3] {
        let [e1, e2, e3] = enc;
        let d3 = self.dec[0].fwd(g, tape, &format!("{prefix}.dec0"), e3);
        let d3 = g.leaky_relu(d3, LRELU);
        let u2 = g.upsample_nearest2(d3);
        let cat2 = g.concat0(&[u2, e2]);
        let d2 = self.dec[1].fwd(g, tape, &format!("{prefix}.dec1"), cat2);
        let d2 = g.leaky_relu(d2, LRELU);
        let u1 = g.upsample_nearest2(d2);
        let cat1 = g.concat0(&[u1, e1]);
        let d1 = self.dec[2].fwd(g, tape, &format!("{prefix}.dec2"), cat1);
        let d1 = g.leaky_relu(d1, LRELU);
        [d3, d2, d1]
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.enc.iter_mut().enumerate() {
            c.visit(&format!("{prefix}.enc{i}"), f);
        }
        for (i, c) in self.dec.iter_mut().enumerate() {
            c.visit(&format!("{prefix}.dec{i}"), f);
        }
    }
}

/// Which observation domain feeds the texture encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TexEncoderInput {
    /// Observation and residual projected to the UV plane plus visibility.
    UvAligned,
    /// Ablation baseline: posed image and residual in screen space.
    PosedImage,
}

pub struct TextureEncoder {
    pub unet: UNet,
    heads: Vec<Conv2d>,
    pub input: TexEncoderInput,
    dims: ModelConfig,
}

impl TextureEncoder {
    pub fn new(dims: &ModelConfig, input: TexEncoderInput, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "e_tex");
        let cin = match input {
            TexEncoderInput::UvAligned => 7,  // uv obs + uv residual + visibility
            TexEncoderInput::PosedImage => 6, // image + residual
        };
        let heads = dims
            .tex_channels
            .iter()
            .enumerate()
            .map(|(s, &c)| Conv2d::zeros(UNET_DEC_CH[s], c, 1))
            .collect();
        TextureEncoder {
            unet: UNet::new(cin, &mut rng),
            heads,
            input,
            dims: dims.clone(),
        }
    }

    /// Inputs stacked channel-wise on the UV grid (or image grid for the
    /// posed-image baseline) -> per-scale feature offsets.
    pub fn encode(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        stacked: NodeId,
    ) -> Result<Vec<NodeId>> {
        let res = *self.dims.tex_resolutions.last().unwrap();
        let expect_c = self.unet.cin;
        if g.shape(stacked) != [expect_c, res, res] {
            return Err(Error::ShapeMismatch(format!(
                "texture encoder expects [{expect_c}, {res}, {res}], got {:?}",
                g.shape(stacked)
            )));
        }
        let feats = self.unet.forward(g, tape, "e_tex.unet", stacked);
        Ok(self
            .heads
            .iter()
            .enumerate()
            .map(|(s, h)| h.fwd(g, tape, &format!("e_tex.head{s}"), feats[s]))
            .collect())
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.unet.visit("e_tex.unet", f);
        for (s, h) in self.heads.iter_mut().enumerate() {
            h.visit(&format!("e_tex.head{s}"), f);
        }
    }
}

/// How the plane encoder conditions the static branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PlaneEncoderMode {
    /// CS-SFT modulation (alpha around 1, beta around 0).
    SftModulation,
    /// Ablation baseline: direct additive feature offsets.
    DirectOffsets,
}

pub struct PlaneEncoder {
    pub unet: UNet,
    heads: Vec<Conv2d>,
    pub mode: PlaneEncoderMode,
    dims: ModelConfig,
}

impl PlaneEncoder {
    pub fn new(dims: &ModelConfig, mode: PlaneEncoderMode, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "e_tri");
        let sw = 3 * dims.plane_channels;
        let heads = (0..dims.tex_resolutions.len())
            .map(|s| {
                let cout = match mode {
                    PlaneEncoderMode::SftModulation => sw, // alpha half + beta half
                    PlaneEncoderMode::DirectOffsets => sw,
                };
                Conv2d::zeros(UNET_DEC_CH[s], cout, 1)
            })
            .collect();
        PlaneEncoder {
            unet: UNet::new(6, &mut rng),
            heads,
            mode,
            dims: dims.clone(),
        }
    }

    /// image ++ residual [6, R, R] -> per-scale modulation. For SFT mode the
    /// raw alpha head is shifted by +1 so zero-initialized heads give the
    /// identity transform.
    pub fn encode(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        stacked: NodeId,
    ) -> Result<PlaneModulationNodes> {
        let res = self.dims.render_resolution;
        if g.shape(stacked) != [6, res, res] {
            return Err(Error::ShapeMismatch(format!(
                "plane encoder expects [6, {res}, {res}], got {:?}",
                g.shape(stacked)
            )));
        }
        let feats = self.unet.forward(g, tape, "e_tri.unet", stacked);
        let half = 3 * self.dims.plane_channels / 2;
        match self.mode {
            PlaneEncoderMode::SftModulation => {
                let mut out = Vec::new();
                for (s, h) in self.heads.iter().enumerate() {
                    let raw = h.fwd(g, tape, &format!("e_tri.head{s}"), feats[s]);
                    let alpha_raw = g.slice0(raw, 0, half);
                    let alpha = g.add_const(alpha_raw, 1.0);
                    let beta = g.slice0(raw, half, 2 * half);
                    out.push((alpha, beta));
                }
                Ok(PlaneModulationNodes::Sft(out))
            }
            PlaneEncoderMode::DirectOffsets => {
                let mut out = Vec::new();
                for (s, h) in self.heads.iter().enumerate() {
                    out.push(h.fwd(g, tape, &format!("e_tri.head{s}"), feats[s]));
                }
                Ok(PlaneModulationNodes::Offsets(out))
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.unet.visit("e_tri.unet", f);
        for (s, h) in self.heads.iter_mut().enumerate() {
            h.visit(&format!("e_tri.head{s}"), f);
        }
    }
}

/// Graph-side static-branch conditioning produced by the plane encoder.
#[derive(Clone, Debug)]
pub enum PlaneModulationNodes {
    Sft(Vec<(NodeId, NodeId)>),
    Offsets(Vec<NodeId>),
}
