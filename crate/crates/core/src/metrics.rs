//! Reconstruction and reenactment metrics over frame sequences, with the
//! frozen proxy pyramid standing in for pretrained perceptual/identity
//! networks, and a feature-statistics Fréchet distance.

use crate::error::{Error, Result};
use crate::facemodel::{Camera, FaceParams, HeadModel};
use crate::graph::Graph;
use crate::nn::ParamTape;
use crate::proxy::{cosine, ProxyNets};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;

/// Pixel positions with validity flags, one entry per landmark.
pub type LandmarkFrame = Vec<([f64; 2], bool)>;

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct SeriesStat {
    pub series: Vec<f64>,
    pub mean: f64,
}

impl SeriesStat {
    fn from_series(series: Vec<f64>) -> Self {
        let mean = if series.is_empty() {
            0.0
        } else {
            series.iter().sum::<f64>() / series.len() as f64
        };
        SeriesStat { series, mean }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct MetricsReport {
    pub psnr: SeriesStat,
    pub l1: SeriesStat,
    pub lpips_proxy: SeriesStat,
    pub csim_proxy: SeriesStat,
    /// Mean landmark distance normalized by the image diagonal.
    pub akd: SeriesStat,
    /// Raw pixel-space landmark distance, before normalization.
    pub akd_px: SeriesStat,
    pub fid_proxy: f64,
}

impl MetricsReport {
    pub fn summary(&self) -> String {
        format!(
            "psnr={:.3} l1={:.5} lpips={:.5} csim={:.4} akd={:.5} fid={:.5}",
            self.psnr.mean,
            self.l1.mean,
            self.lpips_proxy.mean,
            self.csim_proxy.mean,
            self.akd.mean,
            self.fid_proxy
        )
    }
}

pub fn psnr(pred: &Tensor, target: &Tensor) -> f64 {
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn l1(pred: &Tensor, target: &Tensor) -> f64 {
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Full per-frame metric sweep plus the feature-distribution distance.
/// Landmarks are pixel positions with validity flags; only pairs valid on
/// both sides count toward AKD.
pub fn compute_metrics(
    proxy: &ProxyNets,
    pred: &[Tensor],
    target: &[Tensor],
    pred_landmarks: &[LandmarkFrame],
    target_landmarks: &[LandmarkFrame],
    image_diag: f64,
) -> Result<MetricsReport> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!(
            "sequence lengths differ: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred_landmarks.len() != pred.len() || target_landmarks.len() != pred.len() {
        return Err(Error::Metric("landmark sequence length mismatch".into()));
    }

    let mut psnr_s = Vec::new();
    let mut l1_s = Vec::new();
    let mut lp_s = Vec::new();
    let mut cs_s = Vec::new();
    let mut akd_px_s = Vec::new();
    let mut pred_emb = Vec::new();
    let mut target_emb = Vec::new();

    for i in 0..pred.len() {
        pred[i].check_same_shape(&target[i], "metric frame")?;
        psnr_s.push(psnr(&pred[i], &target[i]));
        l1_s.push(l1(&pred[i], &target[i]));
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let a = g.leaf(pred[i].clone());
        let b = g.leaf(target[i].clone());
        let lp = proxy.perceptual(&mut g, &mut tape, a, b);
        lp_s.push(g.value(lp).item());
        let ea = proxy.embed_t(&pred[i]);
        let eb = proxy.embed_t(&target[i]);
        cs_s.push(cosine(&ea, &eb));
        pred_emb.push(ea);
        target_emb.push(eb);

        let mut dist = 0.0;
        let mut n = 0usize;
        for ((pp, pv), (tp, tv)) in pred_landmarks[i].iter().zip(&target_landmarks[i]) {
            if *pv && *tv {
                dist += ((pp[0] - tp[0]).powi(2) + (pp[1] - tp[1]).powi(2)).sqrt();
                n += 1;
            }
        }
        akd_px_s.push(if n > 0 { dist / n as f64 } else { 0.0 });
    }

    let fid = frechet_distance(
        &FeatureStats::from_embeddings(&pred_emb),
        &FeatureStats::from_embeddings(&target_emb),
    )?;

    let akd_norm: Vec<f64> = akd_px_s.iter().map(|v| v / image_diag).collect();
    Ok(MetricsReport {
        psnr: SeriesStat::from_series(psnr_s),
        l1: SeriesStat::from_series(l1_s),
        lpips_proxy: SeriesStat::from_series(lp_s),
        csim_proxy: SeriesStat::from_series(cs_s),
        akd: SeriesStat::from_series(akd_norm),
        akd_px: SeriesStat::from_series(akd_px_s),
        fid_proxy: fid,
    })
}

/// Landmark positions for a sequence driven by (params, camera) pairs.
pub fn landmark_series(
    head: &HeadModel,
    poses: &[(FaceParams, Camera)],
) -> Result<Vec<LandmarkFrame>> {
    poses
        .iter()
        .map(|(p, c)| head.landmarks2d(p, c))
        .collect()
}

/// Mean and covariance of a set of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

impl FeatureStats {
    pub fn from_embeddings(embeddings: &[Vec<f64>]) -> Self {
        assert!(!embeddings.is_empty(), "need at least one embedding");
        let d = embeddings[0].len();
        let n = embeddings.len() as f64;
        let mut mean = vec![0.0; d];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for e in embeddings {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (e[i] - mean[i]) * (e[j] - mean[j]) / n;
                }
            }
        }
        FeatureStats { mean, cov, dim: d }
    }
}

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), computed through
/// tr sqrtm(S_a^(1/2) S_b S_a^(1/2)).
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Metric("feature stats dims differ".into()));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let sa = symmetrize(&a.cov, d);
    let sb = symmetrize(&b.cov, d);
    let sa_half = sqrtm_psd(&sa, d, "first covariance")?;
    // m = Sa^(1/2) Sb Sa^(1/2)
    let tmp = matmul(&sa_half, &sb, d);
    let m = matmul(&tmp, &sa_half, d);
    let m = symmetrize(&m, d);
    let (eig, _) = jacobi_eigen(&m, d);
    let mut tr_sqrt = 0.0;
    for &l in &eig {
        if l < -1e-8 {
            return Err(Error::Metric(format!(
                "covariance product not PSD after symmetrization (eigenvalue {l})"
            )));
        }
        tr_sqrt += l.max(0.0).sqrt();
    }
    let tr_a: f64 = (0..d).map(|i| sa[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| sb[i * d + i]).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_sqrt)
}

fn symmetrize(m: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix via its eigensystem.
fn sqrtm_psd(m: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    let (eig, q) = jacobi_eigen(m, d);
    for &l in &eig {
        if l < -1e-8 {
            return Err(Error::Metric(format!(
                "{what} not PSD after symmetrization (eigenvalue {l})"
            )));
        }
    }
    // Q sqrt(L) Q^T
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for (k, &l) in eig.iter().enumerate() {
                acc += q[i * d + k] * l.max(0.0).sqrt() * q[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    Ok(out)
}

/// Eigenvalues plus row-major column-eigenvector matrix.
type EigenPair = (Vec<f64>, Vec<f64>);

/// Cyclic Jacobi rotations.
fn jacobi_eigen(m: &[f64], d: usize) -> EigenPair {
    let mut a = m.to_vec();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apr = a[p * d + r];
                if apr.abs() < 1e-18 {
                    continue;
                }
                let app = a[p * d + p];
                let arr = a[r * d + r];
                let theta = 0.5 * (arr - app) / apr;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akr = a[k * d + r];
                    a[k * d + p] = c * akp - s * akr;
                    a[k * d + r] = s * akp + c * akr;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let ark = a[r * d + k];
                    a[p * d + k] = c * apk - s * ark;
                    a[r * d + k] = s * apk + c * ark;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkr = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkr;
                    q[k * d + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    let eig = (0..d).map(|i| a[i * d + i]).collect();
    (eig, q)
}
