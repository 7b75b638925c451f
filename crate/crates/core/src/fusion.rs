//! Multi-frame fusion strategies behind a common trait, registered by name
//! and selected at runtime via config or CLI: the recurrent seq2one
//! aggregator, the per-frame feature-averaging baseline, and the
//! fixed-window convolutional fusion baseline.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{UNET_DEC_CH, UNET_ENC_CH};
use crate::error::{Error, Result};
use crate::generator::{NeuralTexture, TriPlane};
use crate::graph::{Graph, NodeId};
use crate::nn::{seeded_rng, Conv2d, ParamTape};
use crate::pipeline::{
    invert_one_shot, materialized_static, session_avatar, start_session, update_session, Avatar,
    AvatarSystem, FrameObservation, StaticConditioning,
};
use crate::recurrent::RecurrentHeads;
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

/// A multi-frame inversion algorithm: frames in, avatar out.
pub trait FusionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn invert(&self, sys: &AvatarSystem, frames: &[FrameObservation]) -> Result<Avatar>;
}

pub struct FusionRegistry {
    strategies: BTreeMap<&'static str, Arc<dyn FusionStrategy>>,
}

impl FusionRegistry {
    pub fn new() -> Self {
        FusionRegistry {
            strategies: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(RecurrentFusion));
        reg.register(Arc::new(FeatureAverageFusion));
        reg.register(Arc::new(ConvFusion));
        reg
    }

    pub fn register(&mut self, strategy: Arc<dyn FusionStrategy>) {
        self.strategies.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FusionStrategy>> {
        self.strategies
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

impl Default for FusionRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// Streaming ConvGRU aggregation: one session, one update per frame.
pub struct RecurrentFusion;

impl FusionStrategy for RecurrentFusion {
    fn name(&self) -> &'static str {
        "recurrent"
    }

    fn invert(&self, sys: &AvatarSystem, frames: &[FrameObservation]) -> Result<Avatar> {
        let first = frames
            .first()
            .ok_or_else(|| Error::EmptyInput("recurrent fusion needs frames".into()))?;
        let mut session = start_session(sys, first)?;
        for frame in frames {
            update_session(sys, &mut session, frame)?;
        }
        session_avatar(sys, &session)
    }
}

/// Adapted one-shot baseline: every frame is inverted independently and the
/// canonical features (textures, materialized static planes) are averaged.
pub struct FeatureAverageFusion;

impl FusionStrategy for FeatureAverageFusion {
    fn name(&self) -> &'static str {
        "feature-average"
    }

    fn invert(&self, sys: &AvatarSystem, frames: &[FrameObservation]) -> Result<Avatar> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("feature averaging needs frames".into()));
        }
        let mut avatars = Vec::with_capacity(frames.len());
        for frame in frames {
            avatars.push(invert_one_shot(sys, frame)?.0);
        }
        Ok(average_avatars(sys, &avatars))
    }
}

/// Mean of per-avatar textures and materialized static planes; the first
/// avatar's latent keeps styling the dynamic branch.
pub fn average_avatars(sys: &AvatarSystem, avatars: &[Avatar]) -> Avatar {
    assert!(!avatars.is_empty());
    let inv = 1.0 / avatars.len() as f64;
    let mut texture: Vec<Tensor> = avatars[0]
        .texture
        .scales
        .iter()
        .map(|t| t.scale(inv))
        .collect();
    let mut planes = materialized_static(sys, &avatars[0]).planes.scale(inv);
    for avatar in &avatars[1..] {
        for (acc, t) in texture.iter_mut().zip(&avatar.texture.scales) {
            *acc = acc.add(&t.scale(inv));
        }
        planes = planes.add(&materialized_static(sys, avatar).planes.scale(inv));
    }
    Avatar {
        latent: avatars[0].latent.clone(),
        texture: NeuralTexture { scales: texture },
        conditioning: StaticConditioning::Materialized(TriPlane {
            planes,
            channels: sys.config.model.plane_channels,
        }),
    }
}

/// Fixed-window baseline: every recurrent block is replaced by a
/// convolutional block that compresses the window's temporal features.
/// Longer sequences are split into window chunks whose inverted canonical
/// features are averaged.
pub struct ConvFusion;

impl FusionStrategy for ConvFusion {
    fn name(&self) -> &'static str {
        "conv-fusion"
    }

    fn invert(&self, sys: &AvatarSystem, frames: &[FrameObservation]) -> Result<Avatar> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("conv fusion needs frames".into()));
        }
        let w = sys.convfusion.window;
        let mut chunk_avatars = Vec::new();
        for chunk in frames.chunks(w) {
            chunk_avatars.push(convfusion_invert_window(sys, frames, chunk)?);
        }
        Ok(average_avatars(sys, &chunk_avatars))
    }
}

/// Inverts one window (padded by repeating its last frame); the session
/// latent always comes from the sequence's first frame.
fn convfusion_invert_window(
    sys: &AvatarSystem,
    all: &[FrameObservation],
    chunk: &[FrameObservation],
) -> Result<Avatar> {
    let session = start_session(sys, &all[0])?;
    let w = sys.convfusion.window;
    let mut tex_feats = Vec::with_capacity(w);
    let mut plane_feats = Vec::with_capacity(w);
    for i in 0..w {
        let frame = chunk.get(i).unwrap_or_else(|| chunk.last().unwrap());
        let (tf, pf) = crate::pipeline::session_frame_features(sys, &session, frame)?;
        tex_feats.push(tf);
        plane_feats.push(pf);
    }
    let mut g = Graph::new();
    let mut tape = ParamTape::new();
    let tex_out = sys
        .convfusion
        .tex
        .forward(&mut g, &mut tape, &tex_feats);
    let plane_out = sys
        .convfusion
        .plane
        .forward(&mut g, &mut tape, &plane_feats);

    let offsets = match sys.convfusion.tex.decode(&mut g, &mut tape, &tex_out) {
        FusedHeads::TexOffsets(o) => o,
        _ => unreachable!("texture decoder emits offsets"),
    };
    let sft = match sys.convfusion.plane.decode(&mut g, &mut tape, &plane_out) {
        FusedHeads::Sft(m) => m,
        _ => unreachable!("plane decoder emits sft"),
    };

    Ok(Avatar {
        latent: session.latent.clone(),
        texture: NeuralTexture {
            scales: session
                .coarse_tex
                .scales
                .iter()
                .zip(&offsets)
                .map(|(t, &o)| t.add(g.value(o)))
                .collect(),
        },
        conditioning: StaticConditioning::Sft(crate::encoders::SftParams {
            scales: sft
                .iter()
                .map(|&(a, b)| (g.value(a).clone(), g.value(b).clone()))
                .collect(),
        }),
    })
}

pub enum FusedHeads {
    TexOffsets(Vec<NodeId>),
    Sft(Vec<(NodeId, NodeId)>),
}

/// Decoder with per-scale convolutional temporal compression instead of
/// recurrence; consumes exactly `window` frames.
pub struct ConvFusionDecoder {
    pub dec: Vec<Conv2d>,
    pub fuse: Vec<Conv2d>,
    pub heads: Vec<Conv2d>,
    pub kind: RecurrentHeads,
    pub window: usize,
    prefix: String,
    dims: ModelConfig,
}

impl ConvFusionDecoder {
    fn new(
        dims: &ModelConfig,
        kind: RecurrentHeads,
        window: usize,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dec = vec![
            Conv2d::new(UNET_ENC_CH[2], UNET_DEC_CH[0], 3, rng),
            Conv2d::new(UNET_DEC_CH[0] + UNET_ENC_CH[1], UNET_DEC_CH[1], 3, rng),
            Conv2d::new(UNET_DEC_CH[1] + UNET_ENC_CH[0], UNET_DEC_CH[2], 3, rng),
        ];
        let fuse = UNET_DEC_CH
            .iter()
            .map(|&c| Conv2d::new(window * c, c, 3, rng))
            .collect();
        let sw = 3 * dims.plane_channels;
        let heads = match kind {
            RecurrentHeads::TexOffsets => dims
                .tex_channels
                .iter()
                .enumerate()
                .map(|(s, &c)| Conv2d::zeros(UNET_DEC_CH[s], c, 1))
                .collect(),
            _ => (0..3).map(|s| Conv2d::zeros(UNET_DEC_CH[s], sw, 1)).collect(),
        };
        ConvFusionDecoder {
            dec,
            fuse,
            heads,
            kind,
            window,
            prefix: prefix.to_string(),
            dims: dims.clone(),
        }
    }

    /// Per-scale fused features over exactly `window` frames of backbone
    /// taps; coarse-to-fine with the fused map feeding the next scale.
    pub fn forward(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        frames: &[[Tensor; 3]],
    ) -> Vec<NodeId> {
        assert_eq!(frames.len(), self.window, "conv fusion is fixed-window");
        let p = &self.prefix;

        let d3: Vec<NodeId> = frames
            .iter()
            .map(|enc| {
                let e3 = g.leaf(enc[2].clone());
                let d = self.dec[0].fwd(g, tape, &format!("{p}.dec0"), e3);
                g.leaky_relu(d, LRELU)
            })
            .collect();
        let cat3 = g.concat0(&d3);
        let f3 = self.fuse[0].fwd(g, tape, &format!("{p}.fuse0"), cat3);
        let f3 = g.leaky_relu(f3, LRELU);

        let u2 = g.upsample_nearest2(f3);
        let d2: Vec<NodeId> = frames
            .iter()
            .map(|enc| {
                let e2 = g.leaf(enc[1].clone());
                let cat = g.concat0(&[u2, e2]);
                let d = self.dec[1].fwd(g, tape, &format!("{p}.dec1"), cat);
                g.leaky_relu(d, LRELU)
            })
            .collect();
        let cat2 = g.concat0(&d2);
        let f2 = self.fuse[1].fwd(g, tape, &format!("{p}.fuse1"), cat2);
        let f2 = g.leaky_relu(f2, LRELU);

        let u1 = g.upsample_nearest2(f2);
        let d1: Vec<NodeId> = frames
            .iter()
            .map(|enc| {
                let e1 = g.leaf(enc[0].clone());
                let cat = g.concat0(&[u1, e1]);
                let d = self.dec[2].fwd(g, tape, &format!("{p}.dec2"), cat);
                g.leaky_relu(d, LRELU)
            })
            .collect();
        let cat1 = g.concat0(&d1);
        let f1 = self.fuse[2].fwd(g, tape, &format!("{p}.fuse2"), cat1);
        let f1 = g.leaky_relu(f1, LRELU);

        vec![f3, f2, f1]
    }

    pub fn decode(&self, g: &mut Graph, tape: &mut ParamTape, fused: &[NodeId]) -> FusedHeads {
        let p = &self.prefix;
        match self.kind {
            RecurrentHeads::TexOffsets => FusedHeads::TexOffsets(
                self.heads
                    .iter()
                    .enumerate()
                    .map(|(s, h)| h.fwd(g, tape, &format!("{p}.head{s}"), fused[s]))
                    .collect(),
            ),
            _ => {
                let half = 3 * self.dims.plane_channels / 2;
                FusedHeads::Sft(
                    self.heads
                        .iter()
                        .enumerate()
                        .map(|(s, h)| {
                            let raw = h.fwd(g, tape, &format!("{p}.head{s}"), fused[s]);
                            let a_raw = g.slice0(raw, 0, half);
                            let alpha = g.add_const(a_raw, 1.0);
                            let beta = g.slice0(raw, half, 2 * half);
                            (alpha, beta)
                        })
                        .collect(),
                )
            }
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        for (i, c) in self.dec.iter_mut().enumerate() {
            c.visit(&format!("{p}.dec{i}"), f);
        }
        for (i, c) in self.fuse.iter_mut().enumerate() {
            c.visit(&format!("{p}.fuse{i}"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit(&format!("{p}.head{i}"), f);
        }
    }
}

pub struct ConvFusionDecoders {
    pub tex: ConvFusionDecoder,
    pub plane: ConvFusionDecoder,
    pub window: usize,
}

impl ConvFusionDecoders {
    pub fn new(dims: &ModelConfig, window: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "convfusion");
        ConvFusionDecoders {
            tex: ConvFusionDecoder::new(dims, RecurrentHeads::TexOffsets, window, "cf_tex", &mut rng),
            plane: ConvFusionDecoder::new(dims, RecurrentHeads::PlaneSft, window, "cf_plane", &mut rng),
            window,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.tex.visit_params(f);
        self.plane.visit_params(f);
    }
}
