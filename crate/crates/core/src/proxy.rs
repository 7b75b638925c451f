//! Frozen, seed-pinned stand-ins for pretrained perceptual and identity
//! networks: a small random conv pyramid whose feature taps drive the
//! perceptual loss, and whose deepest stage (pooled) is the embedding used
//! for identity similarity and feature-distribution statistics.

use crate::graph::{Graph, NodeId};
use crate::nn::{seeded_rng, Conv2d, ParamTape};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 16;

#[derive(Clone, Debug)]
pub struct ProxyNets {
    convs: Vec<Conv2d>,
}

impl ProxyNets {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "proxy.pyramid");
        ProxyNets {
            convs: vec![
                Conv2d::new(3, 8, 3, &mut rng),
                Conv2d::new(8, 16, 3, &mut rng),
                Conv2d::new(16, EMBED_DIM, 3, &mut rng),
            ],
        }
    }

    /// Feature taps after each stage; stages are separated by 2x pooling.
    pub fn features(&self, g: &mut Graph, tape: &mut ParamTape, image: NodeId) -> Vec<NodeId> {
        let mut taps = Vec::new();
        let mut x = image;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.fwd(g, tape, &format!("proxy.conv{i}"), x);
            x = g.tanh(x);
            taps.push(x);
            if i + 1 < self.convs.len() {
                x = g.avg_pool2(x);
            }
        }
        taps
    }

    /// Perceptual distance: mean absolute feature difference, averaged over
    /// taps. Zero exactly when the images match.
    pub fn perceptual(&self, g: &mut Graph, tape: &mut ParamTape, a: NodeId, b: NodeId) -> NodeId {
        let fa = self.features(g, tape, a);
        let fb = self.features(g, tape, b);
        let mut acc = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.l1(x, y);
            acc = Some(match acc {
                None => d,
                Some(s) => g.add(s, d),
            });
        }
        let sum = acc.expect("at least one tap");
        g.scale(sum, 1.0 / self.convs.len() as f64)
    }

    /// Deepest tap pooled to a fixed-size embedding vector.
    pub fn embed(&self, g: &mut Graph, tape: &mut ParamTape, image: NodeId) -> NodeId {
        let taps = self.features(g, tape, image);
        let deepest = *taps.last().unwrap();
        let sp = g.value(deepest).spatial();
        let pooled = g.sum_channels(deepest);
        g.scale(pooled, 1.0 / sp as f64)
    }

    pub fn embed_t(&self, image: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let im = g.leaf(image.clone());
        let e = self.embed(&mut g, &mut tape, im);
        g.value(e).data().to_vec()
    }

    /// Identity term: 1 - cosine(embed(a), embed(b)); zero at identity.
    pub fn identity_distance(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        a: NodeId,
        b: NodeId,
    ) -> NodeId {
        let ea = self.embed(g, tape, a);
        let eb = self.embed(g, tape, b);
        let cos = cosine_node(g, ea, eb);
        let neg = g.neg(cos);
        g.add_const(neg, 1.0)
    }

    pub fn cosine_t(&self, a: &Tensor, b: &Tensor) -> f64 {
        let ea = self.embed_t(a);
        let eb = self.embed_t(b);
        cosine(&ea, &eb)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("proxy.conv{i}"), f);
        }
    }
}

pub fn cosine_node(g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
    let dotp = g.mul(a, b);
    let dot = g.sum_all(dotp);
    let aa = g.mul(a, a);
    let na = g.sum_all(aa);
    let na = g.sqrt(na);
    let bb = g.mul(b, b);
    let nb = g.sum_all(bb);
    let nb = g.sqrt(nb);
    let denom = g.mul(na, nb);
    let denom = g.add_const(denom, 1e-12);
    let inv = g.recip(denom);
    g.mul(dot, inv)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_at_identity_and_seed_pinned() {
        let p1 = ProxyNets::new(7);
        let p2 = ProxyNets::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::randn(&[3, 32, 32], 0.3, &mut rng).map(|v| 0.5 + v);

        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let a = g.leaf(img.clone());
        let b = g.leaf(img.clone());
        let lp = p1.perceptual(&mut g, &mut tape, a, b);
        assert_eq!(g.value(lp).item(), 0.0);
        let idd = p1.identity_distance(&mut g, &mut tape, a, b);
        assert!(g.value(idd).item().abs() < 1e-12);

        assert_eq!(p1.embed_t(&img), p2.embed_t(&img));
        assert_eq!(p1.embed_t(&img).len(), EMBED_DIM);
    }

    #[test]
    fn perceptual_distance_grows_with_noise() {
        let p = ProxyNets::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::randn(&[3, 32, 32], 0.3, &mut rng).map(|v| 0.5 + v);
        let dist_at = |std: f64| {
            let noisy = {
                let noise = Tensor::randn(&[3, 32, 32], std, &mut ChaCha8Rng::seed_from_u64(3));
                img.add(&noise)
            };
            let mut g = Graph::new();
            let mut tape = ParamTape::new();
            let a = g.leaf(img.clone());
            let b = g.leaf(noisy);
            let lp = p.perceptual(&mut g, &mut tape, a, b);
            g.value(lp).item()
        };
        let d1 = dist_at(0.01);
        let d2 = dist_at(0.1);
        assert!(d2 > d1 && d1 > 0.0);
    }
}
