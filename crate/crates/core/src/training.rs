//! Loss functions, discriminators, synthetic data sampling, and the staged
//! training schedule: GAN-prior smoke loop, latent encoder (s1), refinement
//! encoders (s2), recurrent decoders (s3), and the fixed-window baseline.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoders::PlaneModulationNodes;
use crate::error::{Error, Result};
use crate::facemodel::{Camera, FaceParams};
use crate::generator::{
    Generator, LatentCode, NeuralTexture, StaticConditioningNodes, TriPlane,
};
use crate::graph::{Graph, NodeId};
use crate::nn::{randn_vec, seeded_rng, Adam, Conv2d, Linear, ParamTape};
use crate::pipeline::{coarse_avatar, derive_frame, AvatarSystem, FrameObservation};
use crate::recurrent::{warm_start, DecodedHeads};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

/// Named loss terms with their weights; `total` is the weighted sum.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
    pub lambdas: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn from_terms(terms: &[(&str, f64, f64)]) -> Self {
        let mut t = BTreeMap::new();
        let mut l = BTreeMap::new();
        let mut total = 0.0;
        for &(name, lambda, value) in terms {
            t.insert(name.to_string(), value);
            l.insert(name.to_string(), lambda);
            total += lambda * value;
        }
        LossReport {
            total,
            terms: t,
            lambdas: l,
        }
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms
            .iter()
            .map(|(k, v)| self.lambdas[k] * v)
            .sum()
    }

    pub fn log(&self, sink: &mut dyn Write, step: usize, stage: &str) -> std::io::Result<()> {
        for (name, value) in &self.terms {
            writeln!(sink, "step={step} stage={stage} term={name} value={value:.9}")?;
        }
        writeln!(sink, "step={step} stage={stage} term=total value={:.9}", self.total)
    }
}

/// Training-only critics.
pub struct Discriminators {
    pub latent_d: LatentDiscriminator,
    pub dual_d: ImageDiscriminator,
    pub prior_d: ImageDiscriminator,
}

impl Discriminators {
    pub fn new(dims: &ModelConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "discriminators");
        Discriminators {
            latent_d: LatentDiscriminator::new(dims, &mut rng),
            // raw-rgb ++ final-rgb pair; no pose conditioning input
            dual_d: ImageDiscriminator::new(6, dims.render_resolution, "dual_d", &mut rng),
            // rgb ++ landmark contour map
            prior_d: ImageDiscriminator::new(4, dims.render_resolution, "prior_d", &mut rng),
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.latent_d.visit_params(f);
        self.dual_d.visit_params(f);
        self.prior_d.visit_params(f);
    }
}

/// MLP critic on flattened W+ codes.
pub struct LatentDiscriminator {
    l1: Linear,
    l2: Linear,
    rows: usize,
    dim: usize,
}

impl LatentDiscriminator {
    fn new(dims: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        LatentDiscriminator {
            l1: Linear::new(dims.wplus_rows * dims.latent_dim, 64, rng),
            l2: Linear::new(64, 1, rng),
            rows: dims.wplus_rows,
            dim: dims.latent_dim,
        }
    }

    /// Saturating logit head: the code-distribution game is trivially
    /// separable early on, and an unbounded critic explodes it.
    pub fn logit(&self, g: &mut Graph, tape: &mut ParamTape, wplus: NodeId) -> NodeId {
        let flat = g.reshape(wplus, &[self.rows * self.dim, 1]);
        let h = self.l1.fwd(g, tape, "latent_d.l1", flat);
        let h = g.leaky_relu(h, LRELU);
        let out = self.l2.fwd(g, tape, "latent_d.l2", h);
        let out = g.scale(out, 0.2);
        let out = g.tanh(out);
        let out = g.scale(out, 5.0);
        g.reshape(out, &[1])
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit("latent_d.l1", f);
        self.l2.visit("latent_d.l2", f);
    }
}

/// Small conv critic on channel-stacked images.
pub struct ImageDiscriminator {
    convs: Vec<Conv2d>,
    fc: Linear,
    pub cin: usize,
    pub res: usize,
    prefix: String,
}

impl ImageDiscriminator {
    fn new(cin: usize, res: usize, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let convs = vec![
            Conv2d::new(cin, 16, 3, rng),
            Conv2d::new(16, 32, 3, rng),
            Conv2d::new(32, 32, 3, rng),
        ];
        let bottleneck = res / 8;
        ImageDiscriminator {
            convs,
            fc: Linear::new(32 * bottleneck * bottleneck, 1, rng),
            cin,
            res,
            prefix: prefix.to_string(),
        }
    }

    pub fn logit(&self, g: &mut Graph, tape: &mut ParamTape, x: NodeId) -> NodeId {
        assert_eq!(
            g.shape(x),
            &[self.cin, self.res, self.res],
            "discriminator input shape"
        );
        let p = &self.prefix;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.fwd(g, tape, &format!("{p}.conv{i}"), h);
            h = g.leaky_relu(h, LRELU);
            h = g.avg_pool2(h);
        }
        let n = g.value(h).len();
        let flat = g.reshape(h, &[n, 1]);
        let out = self.fc.fwd(g, tape, &format!("{p}.fc"), flat);
        g.reshape(out, &[1])
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = self.prefix.clone();
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("{p}.conv{i}"), f);
        }
        self.fc.visit(&format!("{p}.fc"), f);
    }
}

/// Non-saturating logistic pair over pooled real/fake logits:
/// d = mean(softplus(-real) + softplus(fake)) / 2, g = mean(softplus(-fake)).
pub fn nonsat_losses(
    g: &mut Graph,
    real_logits: &[NodeId],
    fake_logits: &[NodeId],
) -> (NodeId, NodeId) {
    let mut d_acc = None;
    let mut g_acc = None;
    for (&r, &f) in real_logits.iter().zip(fake_logits) {
        let nr = g.neg(r);
        let dr = g.softplus(nr);
        let df = g.softplus(f);
        let d = g.add(dr, df);
        d_acc = Some(match d_acc {
            None => d,
            Some(a) => g.add(a, d),
        });
        let nf = g.neg(f);
        let gf = g.softplus(nf);
        g_acc = Some(match g_acc {
            None => gf,
            Some(a) => g.add(a, gf),
        });
    }
    let n = real_logits.len() as f64;
    let d = g.scale(d_acc.unwrap(), 0.5 / n);
    let gl = g.scale(g_acc.unwrap(), 1.0 / n);
    (d, gl)
}

/// Adversarial pair for the latent critic (real W samples vs encoder
/// codes), with an R1 penalty on the real side to keep the critic's
/// gradients bounded.
pub struct LatentAdv {
    pub d_loss: NodeId,
    pub g_loss: NodeId,
    pub d_r1: NodeId,
}

pub fn latent_adv(
    sys: &AvatarSystem,
    g: &mut Graph,
    tape: &mut ParamTape,
    real_w: &[Tensor],
    fake_w: &[NodeId],
) -> LatentAdv {
    let gamma = sys.config.training.r1_gamma;
    let mut real_logits = Vec::new();
    let mut r1_terms = Vec::new();
    for w in real_w {
        let n = g.leaf(w.clone());
        let logit = sys.disc.latent_d.logit(g, tape, n);
        real_logits.push(logit);
        r1_terms.push(r1_penalty(g, logit, n, gamma));
    }
    let fake_logits: Vec<NodeId> = fake_w
        .iter()
        .map(|&w| sys.disc.latent_d.logit(g, tape, w))
        .collect();
    let (d_loss, g_loss) = nonsat_losses(g, &real_logits, &fake_logits);
    let mut r1 = r1_terms[0];
    for &t in &r1_terms[1..] {
        r1 = g.add(r1, t);
    }
    let d_r1 = g.scale(r1, 1.0 / real_w.len() as f64);
    LatentAdv {
        d_loss,
        g_loss,
        d_r1,
    }
}

/// Adversarial pair for the dual critic over (raw-rgb, final-rgb) stacks;
/// at this scale the two coincide, so each side is the image duplicated.
pub fn dual_disc_loss(
    sys: &AvatarSystem,
    g: &mut Graph,
    tape: &mut ParamTape,
    real: &[Tensor],
    fake: &[NodeId],
) -> (NodeId, NodeId) {
    let real_logits: Vec<NodeId> = real
        .iter()
        .map(|img| {
            let n = g.leaf(img.clone());
            let pair = g.concat0(&[n, n]);
            sys.disc.dual_d.logit(g, tape, pair)
        })
        .collect();
    let fake_logits: Vec<NodeId> = fake
        .iter()
        .map(|&img| {
            let pair = g.concat0(&[img, img]);
            sys.disc.dual_d.logit(g, tape, pair)
        })
        .collect();
    nonsat_losses(g, &real_logits, &fake_logits)
}

/// (gamma / 2) * ||d logit / d x||^2, with the gradient built as graph nodes
/// so the penalty's own weight gradient is exact.
pub fn r1_penalty(g: &mut Graph, logit: NodeId, x: NodeId, gamma: f64) -> NodeId {
    let grads = g.backward(logit);
    match grads.get(x) {
        Some(gx) => {
            let sq = g.mul(gx, gx);
            let s = g.sum_all(sq);
            g.scale(s, 0.5 * gamma)
        }
        None => g.scalar(0.0),
    }
}

/// Stage-1 losses: L1 + lambda_lpips * perceptual + lambda_id * identity +
/// both adversarial terms from the latent critic.
pub struct Stage1Nodes {
    pub total_encoder: NodeId,
    pub d_loss: NodeId,
    pub report: LossReport,
}

pub fn loss_stage1(
    sys: &AvatarSystem,
    g: &mut Graph,
    tape: &mut ParamTape,
    pred: &[NodeId],
    target: &[Tensor],
    fake_w: &[NodeId],
    real_w: &[Tensor],
) -> Result<Stage1Nodes> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch("stage-1 batch lengths".into()));
    }
    let t = &sys.config.training;
    let inv = 1.0 / pred.len() as f64;
    let mut l1_acc = None;
    let mut lp_acc = None;
    let mut id_acc = None;
    for (&p, tgt) in pred.iter().zip(target) {
        let tn = g.leaf(tgt.clone());
        let l1 = g.l1(p, tn);
        let lp = sys.proxy.perceptual(g, tape, p, tn);
        let idd = sys.proxy.identity_distance(g, tape, p, tn);
        l1_acc = Some(accum(g, l1_acc, l1));
        lp_acc = Some(accum(g, lp_acc, lp));
        id_acc = Some(accum(g, id_acc, idd));
    }
    let l1 = g.scale(l1_acc.unwrap(), inv);
    let lp = g.scale(lp_acc.unwrap(), inv);
    let idd = g.scale(id_acc.unwrap(), inv);
    let adv = latent_adv(sys, g, tape, real_w, fake_w);

    let lp_w = g.scale(lp, t.lambda_lpips_s1);
    let id_w = g.scale(idd, t.lambda_id_s1);
    let s = g.add(l1, lp_w);
    let s = g.add(s, id_w);
    let adv_w = g.scale(adv.g_loss, t.lambda_adv_s1);
    let total_encoder = g.add(s, adv_w);
    let d_train = g.add(adv.d_loss, adv.d_r1);

    let report = LossReport::from_terms(&[
        ("l1", 1.0, g.value(l1).item()),
        ("lpips", t.lambda_lpips_s1, g.value(lp).item()),
        ("id", t.lambda_id_s1, g.value(idd).item()),
        ("adv_e", t.lambda_adv_s1, g.value(adv.g_loss).item()),
        ("adv_d", 1.0, g.value(adv.d_loss).item()),
    ]);
    Ok(Stage1Nodes {
        total_encoder,
        d_loss: d_train,
        report,
    })
}

fn accum(g: &mut Graph, acc: Option<NodeId>, x: NodeId) -> NodeId {
    match acc {
        None => x,
        Some(a) => g.add(a, x),
    }
}

/// Prediction bundle of one synthesized sample, as graph nodes.
pub struct PredBundle {
    pub rgb: NodeId,
    pub tex_scales: Vec<NodeId>,
    pub planes: NodeId,
    pub raw: NodeId,
}

/// Ground-truth bundle; intermediate supervision is optional (image-only
/// batches deactivate the feature terms).
pub struct TargetBundle<'a> {
    pub image: &'a Tensor,
    pub tex: Option<&'a NeuralTexture>,
    pub planes: Option<&'a TriPlane>,
    pub raw: Option<&'a Tensor>,
}

pub struct Stage2Nodes {
    pub total_encoder: NodeId,
    pub d_loss: Option<NodeId>,
    pub report: LossReport,
}

/// Stage-2 losses over a batch: L1 + lpips + 0.001 (L_tri + L_tex) + L_raw
/// (+ 0.1 adversarial when active), following the configured weights.
pub fn loss_stage2(
    sys: &AvatarSystem,
    g: &mut Graph,
    tape: &mut ParamTape,
    preds: &[PredBundle],
    targets: &[TargetBundle],
    with_adv: bool,
) -> Result<Stage2Nodes> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch("stage-2 batch lengths".into()));
    }
    let t = &sys.config.training;
    let inv = 1.0 / preds.len() as f64;
    let (mut l1a, mut lpa, mut tria, mut texa, mut rawa) = (None, None, None, None, None);
    for (p, tgt) in preds.iter().zip(targets) {
        let tn = g.leaf(tgt.image.clone());
        let l1 = g.l1(p.rgb, tn);
        let lp = sys.proxy.perceptual(g, tape, p.rgb, tn);
        l1a = Some(accum(g, l1a, l1));
        lpa = Some(accum(g, lpa, lp));
        if let Some(gt_tex) = tgt.tex {
            let mut s_acc = None;
            for (&pt, gt) in p.tex_scales.iter().zip(&gt_tex.scales) {
                let gtn = g.leaf(gt.clone());
                let d = g.l1(pt, gtn);
                s_acc = Some(accum(g, s_acc, d));
            }
            let l_tex = g.scale(s_acc.unwrap(), 1.0 / p.tex_scales.len() as f64);
            texa = Some(accum(g, texa, l_tex));
        }
        if let Some(gt_planes) = tgt.planes {
            let gtn = g.leaf(gt_planes.planes.clone());
            let l_tri = g.l1(p.planes, gtn);
            tria = Some(accum(g, tria, l_tri));
        }
        if let Some(gt_raw) = tgt.raw {
            let gtn = g.leaf(gt_raw.clone());
            let l_raw = g.l1(p.raw, gtn);
            rawa = Some(accum(g, rawa, l_raw));
        }
    }
    let l1 = g.scale(l1a.unwrap(), inv);
    let lp = g.scale(lpa.unwrap(), inv);
    let zero = g.scalar(0.0);
    let l_tri = tria.map(|n| g.scale(n, inv)).unwrap_or(zero);
    let l_tex = texa.map(|n| g.scale(n, inv)).unwrap_or(zero);
    let l_raw = rawa.map(|n| g.scale(n, inv)).unwrap_or(zero);

    let (d_loss, g_loss) = if with_adv {
        let real: Vec<Tensor> = targets.iter().map(|t| t.image.clone()).collect();
        let fake: Vec<NodeId> = preds.iter().map(|p| p.rgb).collect();
        let (d, gl) = dual_disc_loss(sys, g, tape, &real, &fake);
        (Some(d), Some(gl))
    } else {
        (None, None)
    };

    let lp_w = g.scale(lp, t.lambda_lpips_s2);
    let tri_w = g.scale(l_tri, t.lambda_tri);
    let tex_w = g.scale(l_tex, t.lambda_tex);
    let raw_w = g.scale(l_raw, t.lambda_raw);
    let mut total = g.add(l1, lp_w);
    total = g.add(total, tri_w);
    total = g.add(total, tex_w);
    total = g.add(total, raw_w);
    if let Some(gl) = g_loss {
        let gl_w = g.scale(gl, t.lambda_adv);
        total = g.add(total, gl_w);
    }

    let report = LossReport::from_terms(&[
        ("l1", 1.0, g.value(l1).item()),
        ("lpips", t.lambda_lpips_s2, g.value(lp).item()),
        ("l_tri", t.lambda_tri, g.value(l_tri).item()),
        ("l_tex", t.lambda_tex, g.value(l_tex).item()),
        ("l_raw", t.lambda_raw, g.value(l_raw).item()),
        (
            "adv_e",
            t.lambda_adv,
            g_loss.map(|n| g.value(n).item()).unwrap_or(0.0),
        ),
        (
            "adv_d",
            0.0,
            d_loss.map(|n| g.value(n).item()).unwrap_or(0.0),
        ),
    ]);
    Ok(Stage2Nodes {
        total_encoder: total,
        d_loss,
        report,
    })
}

/// One frame of a synthetic identity with its generator-provided ground
/// truths for intermediate supervision.
#[derive(Clone, Debug)]
pub struct FrameBundle {
    pub params: FaceParams,
    pub camera: Camera,
    pub image: Tensor,
    pub tex: NeuralTexture,
    pub planes: TriPlane,
    pub raw: Tensor,
}

impl FrameBundle {
    pub fn observation(&self) -> FrameObservation {
        FrameObservation {
            image: self.image.clone(),
            params: self.params.clone(),
            camera: self.camera.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub latent: LatentCode,
    pub frames: Vec<FrameBundle>,
}

pub fn sample_face_params(sys: &AvatarSystem, rng: &mut ChaCha8Rng) -> FaceParams {
    let m = &sys.config.model;
    let r = sys.config.sampling.coeff_range;
    FaceParams {
        shape: (0..m.shape_coeffs).map(|_| rng.gen_range(-r..r)).collect(),
        expression: (0..m.expression_coeffs)
            .map(|_| rng.gen_range(-r..r))
            .collect(),
    }
}

pub fn sample_camera(sys: &AvatarSystem, rng: &mut ChaCha8Rng) -> Camera {
    let s = &sys.config.sampling;
    sys.camera(
        rng.gen_range(-s.yaw_range..s.yaw_range),
        rng.gen_range(-s.pitch_range..s.pitch_range),
    )
    .expect("sampled pose in range")
}

/// Identity sampled from the prior's latent space with per-frame poses and
/// cached generator ground truths. Deterministic in the seed.
pub fn sample_synthetic_identity(
    sys: &AvatarSystem,
    seed: u64,
    n_frames: usize,
) -> SyntheticSample {
    let mut rng = seeded_rng(sys.config.seed ^ seed, "synth.identity");
    let z = randn_vec(sys.config.model.latent_dim, &mut rng);
    let latent = sys.generator.map_latent(&z);
    let frames = (0..n_frames)
        .map(|_| {
            let params = sample_face_params(sys, &mut rng);
            let camera = sample_camera(sys, &mut rng);
            synthesize_bundle(sys, &latent, &params, &camera)
        })
        .collect();
    SyntheticSample { latent, frames }
}

fn synthesize_bundle(
    sys: &AvatarSystem,
    latent: &LatentCode,
    params: &FaceParams,
    camera: &Camera,
) -> FrameBundle {
    let mut g = Graph::new();
    let mut tape = ParamTape::new();
    let w = g.leaf(latent.to_tensor());
    let parts = sys
        .generator
        .synthesize(
            &mut g,
            &mut tape,
            &sys.head,
            w,
            params,
            camera,
            None,
            None,
            sys.spp(),
        )
        .expect("synthesis of a sampled frame");
    FrameBundle {
        params: params.clone(),
        camera: camera.clone(),
        image: g.value(parts.render.rgb).clone(),
        tex: NeuralTexture {
            scales: parts.tex_scales.iter().map(|&t| g.value(t).clone()).collect(),
        },
        planes: TriPlane {
            planes: g.value(parts.planes).clone(),
            channels: sys.config.model.plane_channels,
        },
        raw: g.value(parts.render.raw).clone(),
    }
}

/// Cached training corpus: one synthetic sample per identity.
pub struct TrainSet {
    pub samples: Vec<SyntheticSample>,
}

pub fn build_train_set(sys: &AvatarSystem, n_identities: usize, frames_each: usize) -> TrainSet {
    TrainSet {
        samples: (0..n_identities)
            .map(|i| sample_synthetic_identity(sys, i as u64, frames_each))
            .collect(),
    }
}

/// Held-out identity sequence for evaluation protocols.
pub fn sample_eval_sequence(sys: &AvatarSystem, index: usize, len: usize) -> SyntheticSample {
    sample_synthetic_identity(sys, 10_000 + index as u64, len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prior,
    S1,
    S2,
    S3,
    ConvFusion,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Prior => "prior",
            Stage::S1 => "s1",
            Stage::S2 => "s2",
            Stage::S3 => "s3",
            Stage::ConvFusion => "convfusion",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "prior" => Ok(Stage::Prior),
            "s1" => Ok(Stage::S1),
            "s2" => Ok(Stage::S2),
            "s3" => Ok(Stage::S3),
            "convfusion" => Ok(Stage::ConvFusion),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    fn prerequisite(&self) -> Option<Stage> {
        match self {
            Stage::Prior | Stage::S1 => None,
            Stage::S2 => Some(Stage::S1),
            Stage::S3 | Stage::ConvFusion => Some(Stage::S2),
        }
    }

    /// Parameter-name prefixes trained by this stage's generator-side step.
    pub fn trainable(&self) -> &'static [&'static str] {
        match self {
            Stage::Prior => &["gen."],
            Stage::S1 => &["e_latent."],
            Stage::S2 => &["e_tex.", "e_tri."],
            Stage::S3 => &["tex_rec.", "plane_rec."],
            Stage::ConvFusion => &["cf_tex.", "cf_plane."],
        }
    }

    fn critic(&self) -> &'static [&'static str] {
        match self {
            Stage::Prior => &["prior_d."],
            Stage::S1 => &["latent_d."],
            Stage::S2 | Stage::S3 | Stage::ConvFusion => &["dual_d."],
        }
    }
}

fn apply_updates(
    sys: &mut AvatarSystem,
    adam: &mut Adam,
    grads: &BTreeMap<String, Tensor>,
    prefixes: &[&str],
) {
    adam.begin_step();
    sys.visit_params(&mut |name, t| {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            if let Some(gr) = grads.get(name) {
                adam.update(name, t, gr);
            }
        }
    });
}

pub struct StageOutcome {
    pub reports: Vec<LossReport>,
}

/// Runs one training stage over the cached synthetic corpus, enforcing the
/// stage prerequisites and freezing everything outside the stage's
/// trainable set. Loss-curve lines are appended to `sink`.
pub fn run_stage(
    sys: &mut AvatarSystem,
    stage: Stage,
    data: Option<&TrainSet>,
    sink: &mut dyn Write,
) -> Result<StageOutcome> {
    if let Some(pre) = stage.prerequisite() {
        if !sys.completed_stages.contains(pre.name()) {
            return Err(Error::MissingPrerequisite(format!(
                "stage `{}` requires completed stage `{}`",
                stage.name(),
                pre.name()
            )));
        }
    }
    let outcome = match stage {
        Stage::Prior => run_prior(sys, sink)?,
        Stage::S1 => run_s1(sys, require_data(data)?, sink)?,
        Stage::S2 => run_s2(sys, require_data(data)?, sink)?,
        Stage::S3 => run_s3(sys, sink)?,
        Stage::ConvFusion => run_convfusion(sys, sink)?,
    };
    sys.completed_stages.insert(stage.name().to_string());
    Ok(outcome)
}

fn require_data(data: Option<&TrainSet>) -> Result<&TrainSet> {
    data.ok_or_else(|| Error::MissingPrerequisite("stage needs a training set".into()))
}

fn pick<'a>(
    train: &'a TrainSet,
    rng: &mut ChaCha8Rng,
) -> (&'a SyntheticSample, &'a FrameBundle) {
    let s = &train.samples[rng.gen_range(0..train.samples.len())];
    let f = &s.frames[rng.gen_range(0..s.frames.len())];
    (s, f)
}

fn run_s1(sys: &mut AvatarSystem, train: &TrainSet, sink: &mut dyn Write) -> Result<StageOutcome> {
    let steps = sys.config.training.s1_steps;
    let batch = sys.config.training.batch_s1;
    let mut adam_e = Adam::new(sys.config.training.lr_encoder);
    // slow latent critic: it only needs to shape the code distribution
    let mut adam_d = Adam::new(1e-4);
    let mut reports = Vec::new();

    for step in 0..steps {
        let mut rng = seeded_rng(sys.config.seed, &format!("s1.step{step}"));
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let mut pred = Vec::new();
        let mut target = Vec::new();
        let mut fake_w = Vec::new();
        let mut real_w = Vec::new();
        for _ in 0..batch {
            let (_, frame) = pick(train, &mut rng);
            let img = g.leaf(frame.image.clone());
            let w_hat = sys.latent_enc.encode(&mut g, &mut tape, img)?;
            let parts = sys.generator.synthesize(
                &mut g,
                &mut tape,
                &sys.head,
                w_hat,
                &frame.params,
                &frame.camera,
                None,
                None,
                sys.spp(),
            )?;
            pred.push(parts.render.rgb);
            target.push(frame.image.clone());
            fake_w.push(w_hat);
            let z = randn_vec(sys.config.model.latent_dim, &mut rng);
            real_w.push(sys.generator.map_latent(&z).to_tensor());
        }
        let nodes = loss_stage1(sys, &mut g, &mut tape, &pred, &target, &fake_w, &real_w)?;
        let grads_d = g.backward(nodes.d_loss);
        let named_d = tape.collect(&g, &grads_d);
        let grads_e = g.backward(nodes.total_encoder);
        let named_e = tape.collect(&g, &grads_e);
        apply_updates(sys, &mut adam_d, &named_d, Stage::S1.critic());
        apply_updates(sys, &mut adam_e, &named_e, Stage::S1.trainable());
        nodes.report.log(sink, step, "s1")?;
        reports.push(nodes.report);
    }

    // coarse baseline: mean W+ of the prior's latent distribution
    sys.mean_latent = Some(sys.generator.mean_latent(256, sys.config.seed));

    Ok(StageOutcome { reports })
}

/// Builds the refinement-encoder prediction graph for one frame against the
/// (frozen) coarse stage of its own latent-encoder estimate.
fn refine_pred(
    sys: &AvatarSystem,
    g: &mut Graph,
    tape: &mut ParamTape,
    frame: &FrameBundle,
) -> Result<PredBundle> {
    let latent = sys.latent_enc.encode_t(&frame.image)?;
    let coarse = coarse_avatar(sys, &latent);
    let derived = derive_frame(sys, &coarse, &frame.observation())?;

    let tex_in = g.leaf(derived.tex_stack.clone());
    let offsets = sys.tex_enc.encode(g, tape, tex_in)?;
    let plane_in = g.leaf(derived.plane_stack.clone());
    let modulation = sys.plane_enc.encode(g, tape, plane_in)?;

    let w = g.leaf(latent.to_tensor());
    let tex_scales: Vec<NodeId> = coarse
        .texture
        .scales
        .iter()
        .zip(&offsets)
        .map(|(t, &o)| {
            let base = g.leaf(t.clone());
            g.add(base, o)
        })
        .collect();
    let static_nodes = match modulation {
        PlaneModulationNodes::Sft(maps) => StaticConditioningNodes::Sft(maps),
        PlaneModulationNodes::Offsets(offs) => StaticConditioningNodes::Offsets(offs),
    };
    let static_planes = sys.generator.g_static_with(g, tape, w, &static_nodes)?;
    let parts = sys.generator.assemble_and_render(
        g,
        tape,
        &sys.head,
        w,
        &frame.params,
        &frame.camera,
        tex_scales,
        static_planes,
        sys.spp(),
    )?;
    Ok(PredBundle {
        rgb: parts.render.rgb,
        tex_scales: parts.tex_scales,
        planes: parts.planes,
        raw: parts.render.raw,
    })
}

fn run_s2(sys: &mut AvatarSystem, train: &TrainSet, sink: &mut dyn Write) -> Result<StageOutcome> {
    let steps = sys.config.training.s2_steps;
    let batch = sys.config.training.batch_s2;
    let adv_start = (steps as f64 * sys.config.training.adv_start_frac) as usize;
    let mut adam_e = Adam::new(sys.config.training.lr_encoder);
    let mut adam_d = Adam::new(sys.config.training.lr_discriminator);
    let mut reports = Vec::new();

    for step in 0..steps {
        let mut rng = seeded_rng(sys.config.seed, &format!("s2.step{step}"));
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let mut preds = Vec::new();
        let mut frames = Vec::new();
        for _ in 0..batch {
            let (_, frame) = pick(train, &mut rng);
            preds.push(refine_pred(sys, &mut g, &mut tape, frame)?);
            frames.push(frame.clone());
        }
        let targets: Vec<TargetBundle> = frames
            .iter()
            .map(|f| TargetBundle {
                image: &f.image,
                tex: Some(&f.tex),
                planes: Some(&f.planes),
                raw: Some(&f.raw),
            })
            .collect();
        let with_adv = step >= adv_start;
        let nodes = loss_stage2(sys, &mut g, &mut tape, &preds, &targets, with_adv)?;
        if let Some(d_loss) = nodes.d_loss {
            let grads_d = g.backward(d_loss);
            let named_d = tape.collect(&g, &grads_d);
            apply_updates(sys, &mut adam_d, &named_d, Stage::S2.critic());
        }
        let grads_e = g.backward(nodes.total_encoder);
        let named_e = tape.collect(&g, &grads_e);
        apply_updates(sys, &mut adam_e, &named_e, Stage::S2.trainable());
        nodes.report.log(sink, step, "s2")?;
        reports.push(nodes.report);
    }
    Ok(StageOutcome { reports })
}

/// Per-frame inputs of a sequence step: backbone taps for both encoders.
struct SequenceFeatures {
    tex: Vec<[Tensor; 3]>,
    plane: Vec<[Tensor; 3]>,
}

fn sequence_features(
    sys: &AvatarSystem,
    session_latent: &LatentCode,
    frames: &[FrameBundle],
) -> Result<SequenceFeatures> {
    let coarse = coarse_avatar(sys, session_latent);
    let mut tex = Vec::with_capacity(frames.len());
    let mut plane = Vec::with_capacity(frames.len());
    for f in frames {
        let derived = derive_frame(sys, &coarse, &f.observation())?;
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let ti = g.leaf(derived.tex_stack);
        let te = sys.tex_enc.unet.encode(&mut g, &mut tape, "e_tex.unet", ti);
        let pi = g.leaf(derived.plane_stack);
        let pe = sys.plane_enc.unet.encode(&mut g, &mut tape, "e_tri.unet", pi);
        let v = |n: NodeId, g: &Graph| g.value(n).clone();
        tex.push([v(te[0], &g), v(te[1], &g), v(te[2], &g)]);
        plane.push([v(pe[0], &g), v(pe[1], &g), v(pe[2], &g)]);
    }
    Ok(SequenceFeatures { tex, plane })
}

fn run_s3(sys: &mut AvatarSystem, sink: &mut dyn Write) -> Result<StageOutcome> {
    let t = sys.config.training.clone();
    let mut adam_e = Adam::new(t.lr_encoder);
    let mut adam_d = Adam::new(t.lr_discriminator);
    let mut reports = Vec::new();
    let adv_start = (t.s3_steps as f64 * t.adv_start_frac) as usize;

    for step in 0..t.s3_steps {
        let mut rng = seeded_rng(sys.config.seed, &format!("s3.step{step}"));
        // fresh synthetic sequence; length varies so every stream length is
        // a training configuration
        let seq_len = rng.gen_range(1..=t.seq_len).min(t.max_seq_len);
        let identity = rng.gen_range(0..t.train_identities) as u64;
        let sample = sample_synthetic_identity(sys, identity, seq_len);
        // the stream's latent comes from the first frame, as at inference
        let session_latent = sys.latent_enc.encode_t(&sample.frames[0].image)?;
        let feats = sequence_features(sys, &session_latent, &sample.frames)?;

        // h0 from gradient-free cycling over the same inputs
        let tex_h0 = warm_start(&sys.tex_rec, &feats.tex, t.warm_cycles);
        let plane_h0 = warm_start(&sys.plane_rec, &feats.plane, t.warm_cycles);

        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let mut tex_state: Vec<NodeId> =
            tex_h0.iter().map(|h| g.leaf(h.clone())).collect();
        let mut plane_state: Vec<NodeId> =
            plane_h0.iter().map(|h| g.leaf(h.clone())).collect();
        for i in 0..seq_len {
            let te = [
                g.leaf(feats.tex[i][0].clone()),
                g.leaf(feats.tex[i][1].clone()),
                g.leaf(feats.tex[i][2].clone()),
            ];
            tex_state = sys.tex_rec.step(&mut g, &mut tape, te, &tex_state);
            let pe = [
                g.leaf(feats.plane[i][0].clone()),
                g.leaf(feats.plane[i][1].clone()),
                g.leaf(feats.plane[i][2].clone()),
            ];
            plane_state = sys.plane_rec.step(&mut g, &mut tape, pe, &plane_state);
        }
        let DecodedHeads::TexOffsets(offsets) = sys.tex_rec.decode(&mut g, &mut tape, &tex_state)
        else {
            unreachable!()
        };
        let DecodedHeads::Sft(sft) = sys.plane_rec.decode(&mut g, &mut tape, &plane_state) else {
            unreachable!()
        };

        let coarse = coarse_avatar(sys, &session_latent);
        let w = g.leaf(session_latent.to_tensor());
        let tex_scales: Vec<NodeId> = coarse
            .texture
            .scales
            .iter()
            .zip(&offsets)
            .map(|(t, &o)| {
                let base = g.leaf(t.clone());
                g.add(base, o)
            })
            .collect();
        let static_planes =
            sys.generator
                .g_static_with(&mut g, &mut tape, w, &StaticConditioningNodes::Sft(sft))?;

        // render a few frames of the sequence for the loss
        let n_render = t.rendered_frames.min(seq_len);
        let mut render_idx: Vec<usize> = (0..seq_len).collect();
        for i in (1..render_idx.len()).rev() {
            render_idx.swap(i, rng.gen_range(0..=i));
        }
        render_idx.truncate(n_render);

        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for &i in &render_idx {
            let f = &sample.frames[i];
            let parts = sys.generator.assemble_and_render(
                &mut g,
                &mut tape,
                &sys.head,
                w,
                &f.params,
                &f.camera,
                tex_scales.clone(),
                static_planes,
                sys.spp(),
            )?;
            preds.push(PredBundle {
                rgb: parts.render.rgb,
                tex_scales: parts.tex_scales,
                planes: parts.planes,
                raw: parts.render.raw,
            });
            targets.push(TargetBundle {
                image: &f.image,
                tex: Some(&f.tex),
                planes: Some(&f.planes),
                raw: Some(&f.raw),
            });
        }
        let with_adv = step >= adv_start;
        let nodes = loss_stage2(sys, &mut g, &mut tape, &preds, &targets, with_adv)?;
        if let Some(d_loss) = nodes.d_loss {
            let grads_d = g.backward(d_loss);
            let named_d = tape.collect(&g, &grads_d);
            apply_updates(sys, &mut adam_d, &named_d, Stage::S3.critic());
        }
        let grads_e = g.backward(nodes.total_encoder);
        let named_e = tape.collect(&g, &grads_e);
        apply_updates(sys, &mut adam_e, &named_e, Stage::S3.trainable());
        nodes.report.log(sink, step, "s3")?;
        reports.push(nodes.report);
    }
    Ok(StageOutcome { reports })
}

fn run_convfusion(sys: &mut AvatarSystem, sink: &mut dyn Write) -> Result<StageOutcome> {
    let t = sys.config.training.clone();
    let w_len = sys.convfusion.window;
    let mut adam_e = Adam::new(t.lr_encoder);
    let mut reports = Vec::new();

    for step in 0..t.convfusion_steps {
        let mut rng = seeded_rng(sys.config.seed, &format!("convfusion.step{step}"));
        let identity = rng.gen_range(0..t.train_identities) as u64;
        let sample = sample_synthetic_identity(sys, identity, w_len);
        let session_latent = sys.latent_enc.encode_t(&sample.frames[0].image)?;
        let feats = sequence_features(sys, &session_latent, &sample.frames)?;

        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let tex_fused = sys.convfusion.tex.forward(&mut g, &mut tape, &feats.tex);
        let plane_fused = sys.convfusion.plane.forward(&mut g, &mut tape, &feats.plane);
        let crate::fusion::FusedHeads::TexOffsets(offsets) =
            sys.convfusion.tex.decode(&mut g, &mut tape, &tex_fused)
        else {
            unreachable!()
        };
        let crate::fusion::FusedHeads::Sft(sft) =
            sys.convfusion.plane.decode(&mut g, &mut tape, &plane_fused)
        else {
            unreachable!()
        };

        let coarse = coarse_avatar(sys, &session_latent);
        let w = g.leaf(session_latent.to_tensor());
        let tex_scales: Vec<NodeId> = coarse
            .texture
            .scales
            .iter()
            .zip(&offsets)
            .map(|(t, &o)| {
                let base = g.leaf(t.clone());
                g.add(base, o)
            })
            .collect();
        let static_planes =
            sys.generator
                .g_static_with(&mut g, &mut tape, w, &StaticConditioningNodes::Sft(sft))?;

        let n_render = 2.min(w_len);
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n_render {
            let f = &sample.frames[rng.gen_range(0..w_len.max(1))];
            let _ = i;
            let parts = sys.generator.assemble_and_render(
                &mut g,
                &mut tape,
                &sys.head,
                w,
                &f.params,
                &f.camera,
                tex_scales.clone(),
                static_planes,
                sys.spp(),
            )?;
            preds.push(PredBundle {
                rgb: parts.render.rgb,
                tex_scales: parts.tex_scales,
                planes: parts.planes,
                raw: parts.render.raw,
            });
            targets.push(TargetBundle {
                image: &f.image,
                tex: Some(&f.tex),
                planes: Some(&f.planes),
                raw: Some(&f.raw),
            });
        }
        let nodes = loss_stage2(sys, &mut g, &mut tape, &preds, &targets, false)?;
        let grads_e = g.backward(nodes.total_encoder);
        let named_e = tape.collect(&g, &grads_e);
        apply_updates(sys, &mut adam_e, &named_e, Stage::ConvFusion.trainable());
        nodes.report.log(sink, step, "convfusion")?;
        reports.push(nodes.report);
    }
    Ok(StageOutcome { reports })
}

/// One sample of the GAN-prior's adversarial data distribution: an image
/// rendered by a reference world plus its landmark conditioning map.
#[derive(Clone, Debug)]
pub struct RealSample {
    pub image: Tensor,
    pub landmark_map: Tensor,
    pub params: FaceParams,
    pub camera: Camera,
}

/// Builds a reference world (an independently seeded frozen generator) that
/// stands in for the paper's photo corpus at desk scale.
pub fn reference_world(sys: &AvatarSystem) -> Generator {
    Generator::new(&sys.config.model, sys.config.seed.wrapping_add(0x5afe))
}

pub fn sample_real_batch(
    sys: &AvatarSystem,
    data_gen: &Generator,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<Vec<RealSample>> {
    let res = sys.render_resolution();
    (0..n)
        .map(|_| {
            let z = randn_vec(sys.config.model.latent_dim, rng);
            let w = data_gen.map_latent(&z);
            let params = sample_face_params(sys, rng);
            let camera = sample_camera(sys, rng);
            let image = data_gen
                .synthesize_t(&sys.head, &w, &params, &camera, None, None, sys.spp())?
                .rgb;
            let landmark_map = sys.head.landmark_map(&params, &camera, res)?;
            Ok(RealSample {
                image,
                landmark_map,
                params,
                camera,
            })
        })
        .collect()
}

/// Gaussian blur as an in-graph convolution with a constant diagonal kernel;
/// identity when sigma is zero.
fn blur_node(g: &mut Graph, x: NodeId, channels: usize, sigma: f64) -> NodeId {
    if sigma <= 0.0 {
        return x;
    }
    let k = 5usize;
    let half = (k / 2) as f64;
    let mut kernel1d = [0.0; 5];
    let mut sum = 0.0;
    for (i, v) in kernel1d.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut kernel1d {
        *v /= sum;
    }
    let mut w = Tensor::zeros(&[channels, channels, k, k]);
    for c in 0..channels {
        for dy in 0..k {
            for dx in 0..k {
                let idx = ((c * channels + c) * k + dy) * k + dx;
                w.data_mut()[idx] = kernel1d[dy] * kernel1d[dx];
            }
        }
    }
    let wn = g.leaf(w);
    g.conv2d(x, wn, k / 2)
}

/// One adversarial step of the GAN prior: non-saturating loss with R1 on
/// real images, density regularization on the generator, landmark-map
/// conditioning, and the blur/resolution schedule driven by `step_frac`.
pub fn gan_prior_step(
    sys: &mut AvatarSystem,
    real: &[RealSample],
    step_frac: f64,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let t = sys.config.training.clone();
    let res = sys.render_resolution();
    let low_res = step_frac < t.prior_low_res_frac;
    let render_res = if low_res { res / 2 } else { res };
    let blur_sigma = if t.blur_frac > 0.0 {
        t.blur_sigma_max * (1.0 - step_frac / t.blur_frac).max(0.0)
    } else {
        0.0
    };

    let mut g = Graph::new();
    let mut tape = ParamTape::new();

    // fake branch
    let mut fake_logits = Vec::new();
    let mut fake_gen_logits = Vec::new();
    let mut density_terms = Vec::new();
    for _ in 0..real.len() {
        let z = randn_vec(sys.config.model.latent_dim, rng);
        let w_code = sys.generator.map_latent(&z);
        let params = sample_face_params(sys, rng);
        let mut camera = sample_camera(sys, rng);
        camera.resolution = render_res;
        camera.principal = [render_res as f64 * 0.5, render_res as f64 * 0.5];
        camera.focal = sys.config.model.focal_factor * render_res as f64;

        let wn = g.leaf(w_code.to_tensor());
        let parts = sys.generator.synthesize(
            &mut g,
            &mut tape,
            &sys.head,
            wn,
            &params,
            &camera,
            None,
            None,
            sys.spp(),
        )?;
        let mut rgb = parts.render.rgb;
        if low_res {
            rgb = g.upsample_nearest2(rgb);
        }
        let rgb = blur_node(&mut g, rgb, 3, blur_sigma);
        let lm = sys.head.landmark_map(&params, &camera_at_resolution(&camera, res), res)?;
        let lm_leaf = g.leaf(lm);
        let stacked = g.concat0(&[rgb, lm_leaf]);
        let logit = sys.disc.prior_d.logit(&mut g, &mut tape, stacked);
        fake_logits.push(logit);
        fake_gen_logits.push(logit);

        density_terms.push(density_regularization(
            sys,
            &mut g,
            parts.planes,
            &t,
            rng,
        ));
    }

    // real branch with R1
    let mut real_logits = Vec::new();
    let mut r1_terms = Vec::new();
    for sample in real {
        let x = g.leaf(sample.image.clone());
        let blurred = blur_node(&mut g, x, 3, blur_sigma);
        let lm = g.leaf(sample.landmark_map.clone());
        let stacked = g.concat0(&[blurred, lm]);
        let logit = sys.disc.prior_d.logit(&mut g, &mut tape, stacked);
        real_logits.push(logit);
        r1_terms.push(r1_penalty(&mut g, logit, x, t.r1_gamma));
    }

    let (d_adv, g_adv) = nonsat_losses(&mut g, &real_logits, &fake_logits);
    let inv = 1.0 / real.len() as f64;
    let mut r1 = r1_terms[0];
    for &term in &r1_terms[1..] {
        r1 = g.add(r1, term);
    }
    let r1 = g.scale(r1, inv);
    let mut density = density_terms[0];
    for &term in &density_terms[1..] {
        density = g.add(density, term);
    }
    let density = g.scale(density, inv);

    let d_total = g.add(d_adv, r1);
    let g_total = g.add(g_adv, density);

    let grads_d = g.backward(d_total);
    let named_d = tape.collect(&g, &grads_d);
    let grads_g = g.backward(g_total);
    let named_g = tape.collect(&g, &grads_g);
    apply_updates(sys, adam_d, &named_d, Stage::Prior.critic());
    apply_updates(sys, adam_g, &named_g, Stage::Prior.trainable());

    Ok(LossReport::from_terms(&[
        ("adv_d", 1.0, g.value(d_adv).item()),
        ("r1", 1.0, g.value(r1).item()),
        ("adv_e", 1.0, g.value(g_adv).item()),
        ("density", 1.0, g.value(density).item()),
    ]))
}

/// Same pose, rescaled to a different image resolution.
fn camera_at_resolution(camera: &Camera, res: usize) -> Camera {
    let mut c = camera.clone();
    c.resolution = res;
    c.principal = [res as f64 * 0.5, res as f64 * 0.5];
    c.focal = c.focal / camera.resolution as f64 * res as f64;
    c
}

/// mean |sigma(x) - sigma(x + delta)| over random volume points, with
/// Gaussian perturbations scaled to the volume extent.
fn density_regularization(
    sys: &AvatarSystem,
    g: &mut Graph,
    planes: NodeId,
    t: &crate::config::TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> NodeId {
    let he = sys.config.model.volume_half_extent;
    let pr = sys.config.model.plane_resolution;
    let n = t.density_reg_points;
    let std = t.density_reg_std_frac * 2.0 * he;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let p = [
            rng.gen_range(-he..he),
            rng.gen_range(-he..he),
            rng.gen_range(-he..he),
        ];
        let d = Tensor::randn(&[3], std, rng);
        let q = [
            (p[0] + d.data()[0]).clamp(-he, he),
            (p[1] + d.data()[1]).clamp(-he, he),
            (p[2] + d.data()[2]).clamp(-he, he),
        ];
        pts.push((p, q));
    }
    let sig_a = density_at(sys, g, planes, &pts.iter().map(|x| x.0).collect::<Vec<_>>(), pr, he);
    let sig_b = density_at(sys, g, planes, &pts.iter().map(|x| x.1).collect::<Vec<_>>(), pr, he);
    g.l1(sig_a, sig_b)
}

fn density_at(
    sys: &AvatarSystem,
    g: &mut Graph,
    planes: NodeId,
    points: &[[f64; 3]],
    plane_res: usize,
    he: f64,
) -> NodeId {
    use crate::graph::LinearPlan;
    use std::sync::Arc;
    let cp = sys.config.model.plane_channels;
    let m = points.len();
    let mut feats = None;
    for k in 0..3 {
        let mut entries = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let (a, b) = match k {
                0 => (p[0], p[1]),
                1 => (p[0], p[2]),
                _ => (p[1], p[2]),
            };
            let gx = (a / he * 0.5 + 0.5) * plane_res as f64;
            let gy = (0.5 - b / he * 0.5) * plane_res as f64;
            for (tap, w) in crate::rasterizer::bilinear_taps(gx, gy, plane_res, plane_res) {
                if w != 0.0 {
                    entries.push((i as u32, tap as u32, w));
                }
            }
        }
        let plan = Arc::new(LinearPlan::new(plane_res * plane_res, m, entries));
        let plane = g.slice0(planes, k * cp, (k + 1) * cp);
        let flat = g.reshape(plane, &[cp, plane_res * plane_res]);
        let sampled = g.gather(flat, plan);
        feats = Some(match feats {
            None => sampled,
            Some(acc) => g.add(acc, sampled),
        });
    }
    let feats = feats.unwrap();
    let mut tape = ParamTape::new();
    let hid = sys
        .generator
        .decoder
        .hidden
        .fwd(g, &mut tape, "gen.decoder.hidden", feats);
    let hid = g.leaky_relu(hid, LRELU);
    let out = sys
        .generator
        .decoder
        .out
        .fwd(g, &mut tape, "gen.decoder.out", hid);
    let sigma_raw = g.slice0(out, 0, 1);
    g.softplus(sigma_raw)
}

fn run_prior(sys: &mut AvatarSystem, sink: &mut dyn Write) -> Result<StageOutcome> {
    let steps = sys.config.training.prior_steps;
    let data_gen = reference_world(sys);
    let mut adam_g = Adam::new(sys.config.training.lr_encoder);
    let mut adam_d = Adam::new(sys.config.training.lr_discriminator);
    let mut reports = Vec::new();
    for step in 0..steps {
        let mut rng = seeded_rng(sys.config.seed, &format!("prior.step{step}"));
        let real = sample_real_batch(sys, &data_gen, &mut rng, 2)?;
        let frac = step as f64 / steps.max(1) as f64;
        let report = gan_prior_step(sys, &real, frac, &mut adam_g, &mut adam_d, &mut rng)?;
        report.log(sink, step, "prior")?;
        reports.push(report);
    }
    Ok(StageOutcome { reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::encoders::TexOffsets;

    fn small_system() -> AvatarSystem {
        let mut cfg = Config::default();
        cfg.model.render_resolution = 16;
        cfg.model.samples_per_ray = 8;
        cfg.model.tex_resolutions = vec![4, 8, 16];
        cfg.model.tex_channels = vec![32, 32, 16];
        cfg.model.plane_resolution = 16;
        cfg.model.mesh_grid = 24;
        cfg.training.train_identities = 2;
        cfg.training.frames_per_identity = 2;
        AvatarSystem::new(cfg)
    }

    #[test]
    fn stage1_zero_distance_leaves_adversarial_terms() {
        let sys = small_system();
        let sample = sample_synthetic_identity(&sys, 0, 1);
        let img = &sample.frames[0].image;
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let p = g.leaf(img.clone());
        let w = g.leaf(sample.latent.to_tensor());
        let real = vec![sample.latent.to_tensor()];
        let nodes = loss_stage1(
            &sys,
            &mut g,
            &mut tape,
            &[p],
            std::slice::from_ref(img),
            &[w],
            &real,
        )
        .unwrap();
        assert_eq!(nodes.report.terms["l1"], 0.0);
        assert_eq!(nodes.report.terms["lpips"], 0.0);
        assert!(nodes.report.terms["id"].abs() < 1e-12);
        let adv_only = nodes.report.lambdas["adv_e"] * nodes.report.terms["adv_e"]
            + nodes.report.terms["adv_d"];
        assert!((nodes.report.total - adv_only).abs() < 1e-12);
        // configured stage-1 weights
        assert_eq!(nodes.report.lambdas["lpips"], 0.5);
        assert_eq!(nodes.report.lambdas["id"], 0.25);
    }

    #[test]
    fn stage1_hand_l1_case() {
        // mean |pred - target| of 0.25 shows up as the l1 term exactly
        let sys = small_system();
        let target = Tensor::zeros(&[3, 16, 16]);
        let pred_t = Tensor::full(&[3, 16, 16], 0.25);
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let p = g.leaf(pred_t);
        let w = g.leaf(Tensor::zeros(&[6, 64]));
        let real = vec![Tensor::zeros(&[6, 64])];
        let nodes =
            loss_stage1(&sys, &mut g, &mut tape, &[p], &[target], &[w], &real).unwrap();
        assert!((nodes.report.terms["l1"] - 0.25).abs() < 1e-12);
        assert!((nodes.report.total - nodes.report.weighted_sum()).abs() < 1e-9);
    }

    #[test]
    fn latent_adv_logit_limits() {
        // zeroed critic: logits are exactly 0, both losses are ln 2
        let mut zsys = small_system();
        zsys.visit_params(&mut |name, t| {
            if name.starts_with("latent_d.") {
                *t = Tensor::zeros(t.shape());
            }
        });
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let fake = g.leaf(Tensor::zeros(&[6, 64]));
        let adv = latent_adv(
            &zsys,
            &mut g,
            &mut tape,
            &[Tensor::zeros(&[6, 64])],
            &[fake],
        );
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(adv.d_loss).item() - ln2).abs() < 1e-12);
        assert!((g.value(adv.g_loss).item() - ln2).abs() < 1e-12);
        assert_eq!(g.value(adv.d_r1).item(), 0.0); // zeroed critic: flat

        // a confident critic drives d_loss toward 0 and g_loss up; the
        // generator-side gradient pushes the fake logit positive
        let mut g2 = Graph::new();
        let fake_logit = g2.leaf(Tensor::scalar(-12.0));
        let real_logit = g2.leaf(Tensor::scalar(12.0));
        let (d2, g2l) = nonsat_losses(&mut g2, &[real_logit], &[fake_logit]);
        assert!(g2.value(d2).item() < 1e-4);
        assert!(g2.value(g2l).item() > 10.0);
        let grads = g2.backward(g2l);
        let gfl = g2.value(grads.get(fake_logit).unwrap()).item();
        assert!(gfl < 0.0, "generator pushed toward real");
    }

    #[test]
    fn stage2_bookkeeping_and_hand_case() {
        let sys = small_system();
        let sample = sample_synthetic_identity(&sys, 1, 1);
        let f = &sample.frames[0];
        let mut g = Graph::new();
        let mut tape = ParamTape::new();

        // identical bundles: every distance term is zero
        let pred = PredBundle {
            rgb: g.leaf(f.image.clone()),
            tex_scales: f.tex.scales.iter().map(|t| g.leaf(t.clone())).collect(),
            planes: g.leaf(f.planes.planes.clone()),
            raw: g.leaf(f.raw.clone()),
        };
        let tgt = TargetBundle {
            image: &f.image,
            tex: Some(&f.tex),
            planes: Some(&f.planes),
            raw: Some(&f.raw),
        };
        let nodes = loss_stage2(&sys, &mut g, &mut tape, &[pred], &[tgt], false).unwrap();
        for term in ["l1", "lpips", "l_tri", "l_tex", "l_raw"] {
            assert_eq!(nodes.report.terms[term], 0.0, "{term}");
        }
        // configured stage-2 weight vector
        assert_eq!(nodes.report.lambdas["lpips"], 1.0);
        assert_eq!(nodes.report.lambdas["l_tri"], 0.001);
        assert_eq!(nodes.report.lambdas["l_tex"], 0.001);
        assert_eq!(nodes.report.lambdas["l_raw"], 1.0);
        assert_eq!(nodes.report.lambdas["adv_e"], 0.1);

        // texture features off by a constant 1 contribute lambda_tex * 1
        let mut g2 = Graph::new();
        let mut tape2 = ParamTape::new();
        let shifted: Vec<NodeId> = f
            .tex
            .scales
            .iter()
            .map(|t| g2.leaf(t.map(|v| v + 1.0)))
            .collect();
        let pred2 = PredBundle {
            rgb: g2.leaf(f.image.clone()),
            tex_scales: shifted,
            planes: g2.leaf(f.planes.planes.clone()),
            raw: g2.leaf(f.raw.clone()),
        };
        let tgt2 = TargetBundle {
            image: &f.image,
            tex: Some(&f.tex),
            planes: Some(&f.planes),
            raw: Some(&f.raw),
        };
        let nodes2 = loss_stage2(&sys, &mut g2, &mut tape2, &[pred2], &[tgt2], false).unwrap();
        assert!((nodes2.report.terms["l_tex"] - 1.0).abs() < 1e-12);
        let contribution = nodes2.report.lambdas["l_tex"] * nodes2.report.terms["l_tex"];
        assert!((contribution - 0.001).abs() < 1e-15);
        assert!((nodes2.report.total - nodes2.report.weighted_sum()).abs() < 1e-9);
    }

    #[test]
    fn dual_disc_excludes_pose_and_r1_closed_forms() {
        let sys = small_system();
        // six channels: two stacked rgb images, nothing else
        assert_eq!(sys.disc.dual_d.cin, 6);

        // constant critic: zero R1 exactly
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 4, 4], 0.3));
        let logit = g.scalar(1.7);
        let r1 = r1_penalty(&mut g, logit, x, 1.0);
        assert_eq!(g.value(r1).item(), 0.0);

        // linear critic <a, x>: R1 = gamma/2 * ||a||^2
        let mut g2 = Graph::new();
        let mut rng = seeded_rng(3, "r1.linear");
        let a = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let x = g2.leaf(Tensor::randn(&[3, 4, 4], 1.0, &mut rng));
        let an = g2.leaf(a.clone());
        let prod = g2.mul(an, x);
        let logit = g2.sum_all(prod);
        let gamma = 0.7;
        let r1 = r1_penalty(&mut g2, logit, x, gamma);
        let expect = 0.5 * gamma * a.data().iter().map(|v| v * v).sum::<f64>();
        assert!((g2.value(r1).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn density_regularization_zero_for_constant_field() {
        let mut sys = small_system();
        // constant density regardless of position
        sys.generator.decoder = crate::generator::RayDecoder::constant(
            sys.config.model.plane_channels,
            sys.config.model.render_features,
            0.5,
            0.5,
        );
        let w = sys.generator.map_latent(&vec![0.1; 64]);
        let planes_t = sys.generator.g_static_t(&w, None);
        let mut g = Graph::new();
        let planes = g.leaf(planes_t.planes.clone());
        let mut rng = seeded_rng(5, "density.test");
        let t = sys.config.training.clone();
        let reg = density_regularization(&sys, &mut g, planes, &t, &mut rng);
        assert!(g.value(reg).item().abs() < 1e-12);
    }

    #[test]
    fn synthetic_sampling_is_deterministic_and_cached_features_match() {
        let sys = small_system();
        let a = sample_synthetic_identity(&sys, 3, 2);
        let b = sample_synthetic_identity(&sys, 3, 2);
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.frames.len(), 2);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.image.data(), fb.image.data());
        }
        // cached F_tex equals re-running the texture branch
        let regenerated = sys.generator.g_tex_t(&a.latent);
        for (c, r) in a.frames[0].tex.scales.iter().zip(&regenerated.scales) {
            assert_eq!(c.data(), r.data());
        }
    }

    #[test]
    fn stage_prerequisites_enforced() {
        let mut sys = small_system();
        let train = build_train_set(&sys, 1, 1);
        let mut sink = Vec::new();
        let err = run_stage(&mut sys, Stage::S2, Some(&train), &mut sink);
        assert!(matches!(err, Err(Error::MissingPrerequisite(_))));
        let err = run_stage(&mut sys, Stage::S3, Some(&train), &mut sink);
        assert!(matches!(err, Err(Error::MissingPrerequisite(_))));
    }

    #[test]
    fn stage_freezing_contracts_hold() {
        let mut sys = small_system();
        sys.config.training.s1_steps = 2;
        sys.config.training.s2_steps = 2;
        sys.config.training.s3_steps = 2;
        sys.config.training.batch_s1 = 1;
        sys.config.training.batch_s2 = 1;
        sys.config.training.seq_len = 2;
        sys.config.training.rendered_frames = 1;
        sys.config.training.convfusion_steps = 2;
        let train = build_train_set(&sys, 2, 2);
        let mut sink = Vec::new();

        let snapshot = |sys: &mut AvatarSystem| -> BTreeMap<String, Tensor> {
            let mut map = BTreeMap::new();
            sys.visit_params(&mut |name, t| {
                map.insert(name.to_string(), t.clone());
            });
            map
        };

        let before = snapshot(&mut sys);
        run_stage(&mut sys, Stage::S1, Some(&train), &mut sink).unwrap();
        let after = snapshot(&mut sys);
        let mut changed = Vec::new();
        for (name, t) in &after {
            if before[name] != *t {
                changed.push(name.clone());
            }
        }
        assert!(!changed.is_empty());
        for name in &changed {
            assert!(
                name.starts_with("e_latent.") || name.starts_with("latent_d."),
                "stage-1 mutated {name}"
            );
        }

        // s2 trains the refinement encoders but not the latent encoder or
        // the generator; s3 then leaves every backbone bit-identical
        run_stage(&mut sys, Stage::S2, Some(&train), &mut sink).unwrap();
        let before = snapshot(&mut sys);
        run_stage(&mut sys, Stage::S3, Some(&train), &mut sink).unwrap();
        let after = snapshot(&mut sys);
        for (name, t) in &after {
            if name.starts_with("e_tex.")
                || name.starts_with("e_tri.")
                || name.starts_with("e_latent.")
                || name.starts_with("gen.")
            {
                assert_eq!(&before[name], t, "frozen weight {name} changed");
            }
        }
        assert!(!sink.is_empty());
        let text = String::from_utf8(sink).unwrap();
        assert!(text.lines().any(|l| l.contains("stage=s1 term=l1")));
        assert!(text.lines().any(|l| l.contains("stage=s3 term=total")));
    }

    #[test]
    fn gan_prior_smoke_step_runs_and_reports() {
        let mut sys = small_system();
        let data_gen = reference_world(&sys);
        let mut rng = seeded_rng(9, "prior.smoke");
        let real = sample_real_batch(&sys, &data_gen, &mut rng, 1).unwrap();
        let mut adam_g = Adam::new(1e-4);
        let mut adam_d = Adam::new(1e-3);
        let before_gen: Vec<f64> = {
            let mut v = Vec::new();
            sys.visit_params(&mut |name, t| {
                if name.starts_with("gen.") {
                    v.extend_from_slice(t.data());
                }
            });
            v
        };
        let report =
            gan_prior_step(&mut sys, &real, 0.9, &mut adam_g, &mut adam_d, &mut rng).unwrap();
        assert!(report.total.is_finite());
        assert!(report.terms["r1"] >= 0.0);
        assert!(report.terms["density"] >= 0.0);
        let after_gen: Vec<f64> = {
            let mut v = Vec::new();
            sys.visit_params(&mut |name, t| {
                if name.starts_with("gen.") {
                    v.extend_from_slice(t.data());
                }
            });
            v
        };
        assert_ne!(before_gen, after_gen, "generator received updates");
    }

    #[test]
    fn loss_stage2_gradient_matches_finite_differences() {
        // gradient w.r.t. texture offsets through the full synthesis
        let sys = small_system();
        let sample = sample_synthetic_identity(&sys, 7, 1);
        let f = &sample.frames[0];
        let mut offsets = TexOffsets::zeros(&sys.config.model);
        let mut rng = seeded_rng(11, "fd.offsets");
        for s in &mut offsets.scales {
            *s = Tensor::randn(s.shape(), 0.05, &mut rng);
        }

        let eval = |off: &TexOffsets| -> f64 {
            let mut g = Graph::new();
            let mut tape = ParamTape::new();
            let w = g.leaf(sample.latent.to_tensor());
            let off_nodes: Vec<NodeId> =
                off.scales.iter().map(|t| g.leaf(t.clone())).collect();
            let parts = sys
                .generator
                .synthesize(
                    &mut g,
                    &mut tape,
                    &sys.head,
                    w,
                    &f.params,
                    &f.camera,
                    Some(&off_nodes),
                    None,
                    sys.spp(),
                )
                .unwrap();
            let pred = PredBundle {
                rgb: parts.render.rgb,
                tex_scales: parts.tex_scales,
                planes: parts.planes,
                raw: parts.render.raw,
            };
            let tgt = TargetBundle {
                image: &f.image,
                tex: Some(&f.tex),
                planes: Some(&f.planes),
                raw: Some(&f.raw),
            };
            let nodes = loss_stage2(&sys, &mut g, &mut tape, &[pred], &[tgt], false).unwrap();
            g.value(nodes.total_encoder).item()
        };

        // analytic gradient
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let w = g.leaf(sample.latent.to_tensor());
        let off_nodes: Vec<NodeId> =
            offsets.scales.iter().map(|t| g.leaf(t.clone())).collect();
        let parts = sys
            .generator
            .synthesize(
                &mut g,
                &mut tape,
                &sys.head,
                w,
                &f.params,
                &f.camera,
                Some(&off_nodes),
                None,
                sys.spp(),
            )
            .unwrap();
        let pred = PredBundle {
            rgb: parts.render.rgb,
            tex_scales: parts.tex_scales,
            planes: parts.planes,
            raw: parts.render.raw,
        };
        let tgt = TargetBundle {
            image: &f.image,
            tex: Some(&f.tex),
            planes: Some(&f.planes),
            raw: Some(&f.raw),
        };
        let nodes = loss_stage2(&sys, &mut g, &mut tape, &[pred], &[tgt], false).unwrap();
        let grads = g.backward(nodes.total_encoder);

        // probe a handful of coordinates per scale
        let h = 1e-4;
        for (si, off_node) in off_nodes.iter().enumerate() {
            let gt = g.value(grads.get(*off_node).unwrap()).clone();
            for &idx in &[0usize, 7, 23] {
                if idx >= offsets.scales[si].len() {
                    continue;
                }
                let mut plus = offsets.clone();
                plus.scales[si].data_mut()[idx] += h;
                let mut minus = offsets.clone();
                minus.scales[si].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = gt.data()[idx];
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    ((numeric - analytic) / denom).abs() < 1e-2,
                    "scale {si} idx {idx}: fd {numeric} vs {analytic}"
                );
            }
        }
    }
}
