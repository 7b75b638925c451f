//! ConvGRU-based seq2one temporal aggregation: recurrent decoders that turn
//! the one-shot encoders into streaming incremental encoders.
//!
//! A decoder step runs the (frozen) one-shot down path's features through
//! fresh decoder convolutions, advancing one ConvGRU per scale; the fully
//! updated hidden states are the seq2one output and feed zero-initialized
//! heads. State size is fixed, so memory is independent of frames consumed.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::{UNET_DEC_CH, UNET_ENC_CH};
use crate::error::{Error, Result};
use crate::encoders::{SftParams, TexOffsets};
use crate::generator::{LatentCode, NeuralTexture, TriPlane};
use crate::graph::{Graph, NodeId};
use crate::pipeline::{session_frame_features, Avatar, AvatarSystem, FrameObservation, StaticConditioning};
use crate::nn::{seeded_rng, Conv2d, ParamTape};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

/// Gate and candidate convolution weights of one ConvGRU block. The gate
/// convolution consumes concatenated (f_t, h) channels and emits 2x state
/// channels (update, reset); the candidate consumes (f_t, reset * h).
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub gate: Conv2d,
    pub cand: Conv2d,
    pub feat_ch: usize,
    pub state_ch: usize,
}

impl ConvGru {
    pub fn new(feat_ch: usize, state_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvGru {
            gate: Conv2d::new(feat_ch + state_ch, 2 * state_ch, kernel, rng),
            cand: Conv2d::new(feat_ch + state_ch, state_ch, kernel, rng),
            feat_ch,
            state_ch,
        }
    }

    pub fn zeros(feat_ch: usize, state_ch: usize, kernel: usize) -> Self {
        ConvGru {
            gate: Conv2d::zeros(feat_ch + state_ch, 2 * state_ch, kernel),
            cand: Conv2d::zeros(feat_ch + state_ch, state_ch, kernel),
            feat_ch,
            state_ch,
        }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        prefix: &str,
        f_t: NodeId,
        h_prev: NodeId,
    ) -> NodeId {
        let cat = g.concat0(&[f_t, h_prev]);
        let zr = self.gate.fwd(g, tape, &format!("{prefix}.gate"), cat);
        let zr = g.sigmoid(zr);
        let z = g.slice0(zr, 0, self.state_ch);
        let r = g.slice0(zr, self.state_ch, 2 * self.state_ch);
        let rh = g.mul(r, h_prev);
        let cat2 = g.concat0(&[f_t, rh]);
        let o = self.cand.fwd(g, tape, &format!("{prefix}.cand"), cat2);
        let o = g.tanh(o);
        // h_t = z * h_prev + (1 - z) * o
        let keep = g.mul(z, h_prev);
        let nz = g.neg(z);
        let one_minus = g.add_const(nz, 1.0);
        let take = g.mul(one_minus, o);
        g.add(keep, take)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.gate.visit(&format!("{prefix}.gate"), f);
        self.cand.visit(&format!("{prefix}.cand"), f);
    }
}

/// One recurrent update h_t = z*h + (1-z)*o with convolutional gates.
pub fn conv_gru_step(f_t: &Tensor, h_prev: &Tensor, weights: &ConvGru) -> Result<Tensor> {
    if f_t.shape().len() != 3 || h_prev.shape().len() != 3 {
        return Err(Error::ShapeMismatch("conv_gru_step expects [C, H, W]".into()));
    }
    if f_t.shape()[1..] != h_prev.shape()[1..] {
        return Err(Error::ShapeMismatch(format!(
            "spatial extents differ: {:?} vs {:?}",
            f_t.shape(),
            h_prev.shape()
        )));
    }
    if f_t.shape()[0] != weights.feat_ch || h_prev.shape()[0] != weights.state_ch {
        return Err(Error::ShapeMismatch(format!(
            "channels ({}, {}) vs weights ({}, {})",
            f_t.shape()[0],
            h_prev.shape()[0],
            weights.feat_ch,
            weights.state_ch
        )));
    }
    let mut g = Graph::new();
    let mut tape = ParamTape::new();
    let f = g.leaf(f_t.clone());
    let h = g.leaf(h_prev.clone());
    let out = weights.step(&mut g, &mut tape, "gru", f, h);
    Ok(g.value(out).clone())
}

/// Left fold of `conv_gru_step`; the empty sequence returns `h0` untouched.
pub fn fold_sequence(features: &[Tensor], h0: &Tensor, weights: &ConvGru) -> Result<Tensor> {
    let mut h = h0.clone();
    for f in features {
        h = conv_gru_step(f, &h, weights)?;
    }
    Ok(h)
}

/// What the recurrent heads emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecurrentHeads {
    TexOffsets,
    PlaneSft,
    PlaneOffsets,
}

/// Recurrent decoder: per-scale decoder convolutions, a ConvGRU at every
/// scale, and zero-initialized output heads.
pub struct RecurrentDecoder {
    pub dec: Vec<Conv2d>,
    pub gru: Vec<ConvGru>,
    pub heads: Vec<Conv2d>,
    pub kind: RecurrentHeads,
    pub prefix: String,
    dims: ModelConfig,
}

impl RecurrentDecoder {
    pub fn new(dims: &ModelConfig, kind: RecurrentHeads, prefix: &str, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, &format!("{prefix}.recurrent"));
        let k = dims.gru_kernel;
        let dec = vec![
            Conv2d::new(UNET_ENC_CH[2], UNET_DEC_CH[0], 3, &mut rng),
            Conv2d::new(UNET_DEC_CH[0] + UNET_ENC_CH[1], UNET_DEC_CH[1], 3, &mut rng),
            Conv2d::new(UNET_DEC_CH[1] + UNET_ENC_CH[0], UNET_DEC_CH[2], 3, &mut rng),
        ];
        let gru = UNET_DEC_CH
            .iter()
            .map(|&c| ConvGru::new(c, c, k, &mut rng))
            .collect();
        let sw = 3 * dims.plane_channels;
        let heads = match kind {
            RecurrentHeads::TexOffsets => dims
                .tex_channels
                .iter()
                .enumerate()
                .map(|(s, &c)| Conv2d::zeros(UNET_DEC_CH[s], c, 1))
                .collect(),
            RecurrentHeads::PlaneSft | RecurrentHeads::PlaneOffsets => (0..3)
                .map(|s| Conv2d::zeros(UNET_DEC_CH[s], sw, 1))
                .collect(),
        };
        RecurrentDecoder {
            dec,
            gru,
            heads,
            kind,
            prefix: prefix.to_string(),
            dims: dims.clone(),
        }
    }

    /// All-zero hidden grids at the decoder scale resolutions.
    pub fn zero_state(&self) -> Vec<Tensor> {
        self.dims
            .tex_resolutions
            .iter()
            .enumerate()
            .map(|(s, &r)| Tensor::zeros(&[UNET_DEC_CH[s], r, r]))
            .collect()
    }

    /// One frame: decoder features from the frozen backbone taps, each GRU
    /// advanced once. Coarse-to-fine, with upsampled hidden state feeding
    /// the next scale.
    pub fn step(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        enc: [NodeId; 3],
        state: &[NodeId],
    ) -> Vec<NodeId> {
        let p = &self.prefix;
        let [e1, e2, e3] = enc;
        let d3 = self.dec[0].fwd(g, tape, &format!("{p}.dec0"), e3);
        let d3 = g.leaky_relu(d3, LRELU);
        let h0 = self.gru[0].step(g, tape, &format!("{p}.gru0"), d3, state[0]);

        let u2 = g.upsample_nearest2(h0);
        let cat2 = g.concat0(&[u2, e2]);
        let d2 = self.dec[1].fwd(g, tape, &format!("{p}.dec1"), cat2);
        let d2 = g.leaky_relu(d2, LRELU);
        let h1 = self.gru[1].step(g, tape, &format!("{p}.gru1"), d2, state[1]);

        let u1 = g.upsample_nearest2(h1);
        let cat1 = g.concat0(&[u1, e1]);
        let d1 = self.dec[2].fwd(g, tape, &format!("{p}.dec2"), cat1);
        let d1 = g.leaky_relu(d1, LRELU);
        let h2 = self.gru[2].step(g, tape, &format!("{p}.gru2"), d1, state[2]);

        vec![h0, h1, h2]
    }

    pub fn step_t(&self, enc: &[Tensor; 3], state: &[Tensor]) -> Vec<Tensor> {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let e = [
            g.leaf(enc[0].clone()),
            g.leaf(enc[1].clone()),
            g.leaf(enc[2].clone()),
        ];
        let h: Vec<NodeId> = state.iter().map(|t| g.leaf(t.clone())).collect();
        let out = self.step(&mut g, &mut tape, e, &h);
        out.into_iter().map(|n| g.value(n).clone()).collect()
    }

    /// Heads read the hidden states; pure in the state.
    pub fn decode(&self, g: &mut Graph, tape: &mut ParamTape, state: &[NodeId]) -> DecodedHeads {
        let p = &self.prefix;
        match self.kind {
            RecurrentHeads::TexOffsets => DecodedHeads::TexOffsets(
                self.heads
                    .iter()
                    .enumerate()
                    .map(|(s, h)| h.fwd(g, tape, &format!("{p}.head{s}"), state[s]))
                    .collect(),
            ),
            RecurrentHeads::PlaneSft => {
                let half = 3 * self.dims.plane_channels / 2;
                DecodedHeads::Sft(
                    self.heads
                        .iter()
                        .enumerate()
                        .map(|(s, h)| {
                            let raw = h.fwd(g, tape, &format!("{p}.head{s}"), state[s]);
                            let a_raw = g.slice0(raw, 0, half);
                            let alpha = g.add_const(a_raw, 1.0);
                            let beta = g.slice0(raw, half, 2 * half);
                            (alpha, beta)
                        })
                        .collect(),
                )
            }
            RecurrentHeads::PlaneOffsets => DecodedHeads::Offsets(
                self.heads
                    .iter()
                    .enumerate()
                    .map(|(s, h)| h.fwd(g, tape, &format!("{p}.head{s}"), state[s]))
                    .collect(),
            ),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        for (i, c) in self.dec.iter_mut().enumerate() {
            c.visit(&format!("{p}.dec{i}"), f);
        }
        for (i, gru) in self.gru.iter_mut().enumerate() {
            gru.visit(&format!("{p}.gru{i}"), f);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit(&format!("{p}.head{i}"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub enum DecodedHeads {
    TexOffsets(Vec<NodeId>),
    Sft(Vec<(NodeId, NodeId)>),
    Offsets(Vec<NodeId>),
}

/// Folds per-frame backbone features through the recurrent decoder `cycles`
/// times with no gradient recording; the result seeds h0 for a supervised
/// pass so update gates see long-sequence statistics.
pub fn warm_start(
    decoder: &RecurrentDecoder,
    frames_enc: &[[Tensor; 3]],
    cycles: usize,
) -> Vec<Tensor> {
    let mut state = decoder.zero_state();
    for _ in 0..cycles {
        for enc in frames_enc {
            state = decoder.step_t(enc, &state);
        }
    }
    state
}

/// Streaming inversion state: the first-frame latent, cached coarse
/// features, and per-scale hidden grids for both recurrent encoders.
pub struct AvatarSession {
    pub latent: LatentCode,
    pub coarse_tex: NeuralTexture,
    pub coarse_static: TriPlane,
    pub tex_state: Vec<Tensor>,
    pub plane_state: Vec<Tensor>,
    pub frames_seen: usize,
}

impl AvatarSession {
    pub fn state_bytes(&self) -> usize {
        self.tex_state
            .iter()
            .chain(&self.plane_state)
            .map(|t| t.len() * std::mem::size_of::<f64>())
            .sum()
    }
}

/// Consumes one frame: synthesizes the coarse estimate, forms the residual,
/// runs the frozen backbones, and advances every ConvGRU one step. State
/// shape and memory are independent of how many frames were consumed.
pub fn update_session(
    sys: &AvatarSystem,
    session: &mut AvatarSession,
    frame: &FrameObservation,
) -> Result<()> {
    let (tex_feats, plane_feats) = session_frame_features(sys, session, frame)?;
    session.tex_state = sys.tex_rec.step_t(&tex_feats, &session.tex_state);
    session.plane_state = sys.plane_rec.step_t(&plane_feats, &session.plane_state);
    session.frames_seen += 1;
    Ok(())
}

/// Reads the recurrent heads; pure in the session state.
pub fn decode_session(
    sys: &AvatarSystem,
    session: &AvatarSession,
) -> Result<(TexOffsets, SftParams)> {
    if session.frames_seen == 0 {
        return Err(Error::Session(
            "decode_session needs at least one consumed frame".into(),
        ));
    }
    let mut g = Graph::new();
    let mut tape = ParamTape::new();
    let tex_nodes: Vec<NodeId> = session.tex_state.iter().map(|t| g.leaf(t.clone())).collect();
    let DecodedHeads::TexOffsets(offs) = sys.tex_rec.decode(&mut g, &mut tape, &tex_nodes) else {
        return Err(Error::Session("texture decoder kind mismatch".into()));
    };
    let plane_nodes: Vec<NodeId> = session
        .plane_state
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect();
    let DecodedHeads::Sft(maps) = sys.plane_rec.decode(&mut g, &mut tape, &plane_nodes) else {
        return Err(Error::Session("plane decoder kind mismatch".into()));
    };
    Ok((
        TexOffsets {
            scales: offs.iter().map(|&o| g.value(o).clone()).collect(),
        },
        SftParams {
            scales: maps
                .iter()
                .map(|&(a, b)| (g.value(a).clone(), g.value(b).clone()))
                .collect(),
        },
    ))
}

/// Assembles the avatar the session currently describes.
pub fn session_avatar(sys: &AvatarSystem, session: &AvatarSession) -> Result<Avatar> {
    let (offsets, sft) = decode_session(sys, session)?;
    Ok(Avatar {
        latent: session.latent.clone(),
        texture: NeuralTexture {
            scales: session
                .coarse_tex
                .scales
                .iter()
                .zip(&offsets.scales)
                .map(|(t, o)| t.add(o))
                .collect(),
        },
        conditioning: StaticConditioning::Sft(sft),
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_halve_previous_state() {
        let w = ConvGru::zeros(2, 2, 3);
        let mut r = rng(1);
        let f = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let h = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let out = conv_gru_step(&f, &h, &w).unwrap();
        for (o, hp) in out.data().iter().zip(h.data()) {
            assert_eq!(*o, 0.5 * hp);
        }
    }

    #[test]
    fn gate_convolution_emits_two_gates() {
        let w = ConvGru::new(3, 5, 3, &mut rng(2));
        assert_eq!(w.gate.weight.shape(), &[10, 8, 3, 3]);
        assert_eq!(w.cand.weight.shape(), &[5, 8, 3, 3]);
    }

    #[test]
    fn scalar_reference_oracle_1x1() {
        // 1x1 kernels act per pixel, so a scalar GRU is an exact reference
        let mut r = rng(3);
        for _ in 0..100 {
            let wz_f: f64 = r.gen_range(-1.0..1.0);
            let wz_h: f64 = r.gen_range(-1.0..1.0);
            let wr_f: f64 = r.gen_range(-1.0..1.0);
            let wr_h: f64 = r.gen_range(-1.0..1.0);
            let wo_f: f64 = r.gen_range(-1.0..1.0);
            let wo_h: f64 = r.gen_range(-1.0..1.0);
            let (bz, br, bo) = (
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
            );
            let mut w = ConvGru::zeros(1, 1, 1);
            w.gate.weight = Tensor::new(&[2, 2, 1, 1], vec![wz_f, wz_h, wr_f, wr_h]);
            w.gate.bias = Tensor::new(&[2], vec![bz, br]);
            w.cand.weight = Tensor::new(&[1, 2, 1, 1], vec![wo_f, wo_h]);
            w.cand.bias = Tensor::new(&[1], vec![bo]);

            let f = Tensor::randn(&[1, 2, 2], 1.0, &mut r);
            let h = Tensor::randn(&[1, 2, 2], 1.0, &mut r);
            let out = conv_gru_step(&f, &h, &w).unwrap();
            for i in 0..4 {
                let (fv, hv) = (f.data()[i], h.data()[i]);
                let z = crate::graph::sigmoid(wz_f * fv + wz_h * hv + bz);
                let rr = crate::graph::sigmoid(wr_f * fv + wr_h * hv + br);
                let o = (wo_f * fv + wo_h * (rr * hv) + bo).tanh();
                let expect = z * hv + (1.0 - z) * o;
                assert!(
                    (out.data()[i] - expect).abs() < 1e-6,
                    "{} vs {expect}",
                    out.data()[i]
                );
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = ConvGru::new(2, 2, 3, &mut rng(4));
        let f = Tensor::zeros(&[2, 4, 4]);
        let h = Tensor::zeros(&[2, 3, 3]);
        assert!(conv_gru_step(&f, &h, &w).is_err());
        let h = Tensor::zeros(&[3, 4, 4]);
        assert!(conv_gru_step(&f, &h, &w).is_err());
    }

    #[test]
    fn fold_identities() {
        let w = ConvGru::new(2, 2, 3, &mut rng(5));
        let mut r = rng(6);
        let h0 = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let empty: Vec<Tensor> = vec![];
        assert_eq!(fold_sequence(&empty, &h0, &w).unwrap(), h0);

        let f = Tensor::randn(&[2, 4, 4], 1.0, &mut r);
        let one = fold_sequence(std::slice::from_ref(&f), &h0, &w).unwrap();
        assert_eq!(one, conv_gru_step(&f, &h0, &w).unwrap());
    }

    #[test]
    fn order_sensitivity_witness() {
        let w = ConvGru::new(1, 1, 3, &mut rng(7));
        let mut r = rng(8);
        let h0 = Tensor::zeros(&[1, 4, 4]);
        let a = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
        let b = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
        let ab = fold_sequence(&[a.clone(), b.clone()], &h0, &w).unwrap();
        let ba = fold_sequence(&[b, a], &h0, &w).unwrap();
        let differs = ab.data().iter().zip(ba.data()).any(|(x, y)| x != y);
        assert!(differs, "swapped order should change the output");
    }

    #[test]
    fn state_is_bounded_convex_combination() {
        // |h_t| <= max(|h_prev|, 1) elementwise since z in (0,1), |o| < 1
        let w = ConvGru::new(2, 2, 3, &mut rng(9));
        let mut r = rng(10);
        for _ in 0..20 {
            let f = Tensor::randn(&[2, 5, 5], 2.0, &mut r);
            let h = Tensor::randn(&[2, 5, 5], 2.0, &mut r);
            let out = conv_gru_step(&f, &h, &w).unwrap();
            for (o, hp) in out.data().iter().zip(h.data()) {
                assert!(o.abs() <= hp.abs().max(1.0) + 1e-12);
            }
        }
    }

    #[test]
    fn warm_start_cycle_identities() {
        let dims = ModelConfig::default();
        let dec = RecurrentDecoder::new(&dims, RecurrentHeads::TexOffsets, "tex_rec", 11);
        let mut r = rng(12);
        let mk = |r: &mut ChaCha8Rng| {
            [
                Tensor::randn(&[UNET_ENC_CH[0], 32, 32], 0.5, r),
                Tensor::randn(&[UNET_ENC_CH[1], 16, 16], 0.5, r),
                Tensor::randn(&[UNET_ENC_CH[2], 8, 8], 0.5, r),
            ]
        };
        let frames: Vec<[Tensor; 3]> = (0..3).map(|_| mk(&mut r)).collect();

        let zero = warm_start(&dec, &frames, 0);
        for (z, ref_s) in zero.iter().zip(dec.zero_state()) {
            assert_eq!(z, &ref_s);
        }

        let one = warm_start(&dec, &frames, 1);
        let mut manual = dec.zero_state();
        for f in &frames {
            manual = dec.step_t(f, &manual);
        }
        assert_eq!(one, manual);

        let two = warm_start(&dec, &frames, 2);
        let mut doubled = frames.clone();
        doubled.extend(frames.iter().cloned());
        let mut manual2 = dec.zero_state();
        for f in &doubled {
            manual2 = dec.step_t(f, &manual2);
        }
        assert_eq!(two, manual2);
    }

    #[test]
    fn zero_heads_decode_to_zero_offsets_and_identity_sft() {
        let dims = ModelConfig::default();
        let tex = RecurrentDecoder::new(&dims, RecurrentHeads::TexOffsets, "tex_rec", 13);
        let tri = RecurrentDecoder::new(&dims, RecurrentHeads::PlaneSft, "plane_rec", 14);
        let mut r = rng(15);
        let state: Vec<Tensor> = tex
            .zero_state()
            .iter()
            .map(|t| Tensor::randn(t.shape(), 1.0, &mut r))
            .collect();
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let nodes: Vec<NodeId> = state.iter().map(|t| g.leaf(t.clone())).collect();
        let DecodedHeads::TexOffsets(offs) = tex.decode(&mut g, &mut tape, &nodes) else {
            panic!()
        };
        for o in offs {
            assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        }
        let DecodedHeads::Sft(maps) = tri.decode(&mut g, &mut tape, &nodes) else {
            panic!()
        };
        for (a, b) in maps {
            assert!(g.value(a).data().iter().all(|&v| v == 1.0));
            assert!(g.value(b).data().iter().all(|&v| v == 0.0));
        }
    }
}
