//! Layers, parameter naming, and the Adam optimizer.
//!
//! Networks own plain [`Tensor`] weights. Each forward pass binds weights
//! into the graph through a [`ParamTape`], which records `(name, node)`
//! pairs; after `backward`, gradients are pooled by name so an optimizer
//! can update exactly the tensors in a stage's trainable set and nothing
//! else.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Grads, NodeId};
use crate::tensor::Tensor;

/// Records which graph leaf each named parameter was bound to.
#[derive(Default)]
pub struct ParamTape {
    bound: Vec<(String, NodeId)>,
}

impl ParamTape {
    pub fn new() -> Self {
        ParamTape::default()
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str, t: &Tensor) -> NodeId {
        let id = g.leaf(t.clone());
        self.bound.push((name.to_string(), id));
        id
    }

    /// Sum gradients per parameter name (a parameter may be bound more than
    /// once, e.g. a generator applied to several frames).
    pub fn collect(&self, g: &Graph, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.bound {
            let Some(gid) = grads.get(*id) else { continue };
            let gt = g.value(gid);
            match out.get_mut(name) {
                Some(acc) => *acc = acc.add(gt),
                None => {
                    out.insert(name.clone(), gt.clone());
                }
            }
        }
        out
    }
}

/// Anything holding named trainable tensors.
pub trait ParamSource {
    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named_tensors(&mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |name, t| {
            out.insert(name.to_string(), t.clone());
        });
        out
    }

    fn load_named(&mut self, blocks: &BTreeMap<String, Tensor>) -> crate::error::Result<()> {
        let mut err = None;
        self.visit(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match blocks.get(name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(crate::error::Error::Checkpoint(format!(
                        "shape table mismatch for `{name}`: stored {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => {
                    err = Some(crate::error::Error::Checkpoint(format!(
                        "missing weight block `{name}`"
                    )))
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor, // [Co, Ci, k, k]
    pub bias: Tensor,   // [Co]
    pub pad: usize,
}

impl Conv2d {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = he_std(cin * k * k);
        Conv2d {
            weight: Tensor::randn(&[cout, cin, k, k], std, rng),
            bias: Tensor::zeros(&[cout]),
            pad: k / 2,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
            pad: k / 2,
        }
    }

    pub fn fwd(&self, g: &mut Graph, tape: &mut ParamTape, name: &str, x: NodeId) -> NodeId {
        let w = tape.bind(g, &format!("{name}.w"), &self.weight);
        let b = tape.bind(g, &format!("{name}.b"), &self.bias);
        let y = g.conv2d(x, w, self.pad);
        g.add_bias(y, b)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.weight);
        f(&format!("{prefix}.b"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor, // [Out, In]
    pub bias: Tensor,   // [Out]
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[output, input], he_std(input), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// x: [In, N] column-batch -> [Out, N].
    pub fn fwd(&self, g: &mut Graph, tape: &mut ParamTape, name: &str, x: NodeId) -> NodeId {
        let w = tape.bind(g, &format!("{name}.w"), &self.weight);
        let b = tape.bind(g, &format!("{name}.b"), &self.bias);
        let y = g.matmul(w, x);
        g.add_bias(y, b)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.weight);
        f(&format!("{prefix}.b"), &mut self.bias);
    }
}

/// Style-modulated 3x3 convolution: a style vector is mapped to per-input-
/// channel scales applied to the kernel before convolving.
#[derive(Clone, Debug)]
pub struct ModConv2d {
    pub conv: Conv2d,
    pub style: Linear, // latent -> Ci scales (around 1)
}

impl ModConv2d {
    pub fn new(cin: usize, cout: usize, k: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut style = Linear::new(latent, cin, rng);
        // gentle modulation around identity keeps feature scales bounded
        // through stacked styled blocks
        style.weight = style.weight.scale(0.2);
        style.bias = Tensor::full(&[cin], 1.0);
        ModConv2d {
            conv: Conv2d::new(cin, cout, k, rng),
            style,
        }
    }

    /// x: [Ci, H, W], style latent w: [L] (bound as column [L, 1]).
    pub fn fwd(
        &self,
        g: &mut Graph,
        tape: &mut ParamTape,
        name: &str,
        x: NodeId,
        w_latent: NodeId,
    ) -> NodeId {
        let scales = self.style.fwd(g, tape, &format!("{name}.style"), w_latent); // [Ci, 1]
        let xv_shape = g.shape(x).to_vec();
        let spatial = xv_shape[1] * xv_shape[2];
        let scales = g.reshape(scales, &[xv_shape[0]]);
        let scales = g.broadcast_chan(scales, spatial);
        let scales = g.reshape(scales, &xv_shape);
        let xs = g.mul(x, scales);
        self.conv.fwd(g, tape, &format!("{name}.conv"), xs)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.style.visit(&format!("{prefix}.style"), f);
    }
}

/// First-order adaptive optimizer (Adam) with per-name moment state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "adam shape for {name}");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let pd = param.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = grad.data()[i];
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            let mhat = md[i] / bias1;
            let vhat = vd[i] / bias2;
            pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Derive a fresh deterministic rng for a named subsystem.
pub fn seeded_rng(seed: u64, scope: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a over the scope name, mixed with the global seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in scope.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Standard-normal vector helper for latent sampling.
pub fn randn_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    Tensor::randn(&[n], 1.0, rng).into_data()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn conv_layer_binds_and_trains() {
        let mut rng = seeded_rng(1, "test.conv");
        let mut conv = Conv2d::new(2, 3, 3, &mut rng);
        let x = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let target = Tensor::zeros(&[3, 4, 4]);

        let mut adam = Adam::new(1e-2);
        let mut first_loss = 0.0;
        let mut last_loss = 0.0;
        for it in 0..50 {
            let mut g = Graph::new();
            let mut tape = ParamTape::new();
            let xid = g.leaf(x.clone());
            let y = conv.fwd(&mut g, &mut tape, "c", xid);
            let t = g.leaf(target.clone());
            let loss = g.mse(y, t);
            let lv = g.value(loss).item();
            if it == 0 {
                first_loss = lv;
            }
            last_loss = lv;
            let grads = g.backward(loss);
            let named = tape.collect(&g, &grads);
            adam.begin_step();
            for (name, grad) in &named {
                match name.as_str() {
                    "c.w" => adam.update(name, &mut conv.weight, grad),
                    "c.b" => adam.update(name, &mut conv.bias, grad),
                    _ => unreachable!(),
                }
            }
        }
        assert!(last_loss < 0.2 * first_loss, "{first_loss} -> {last_loss}");
    }

    #[test]
    fn duplicate_bindings_pool_gradients() {
        let mut rng = seeded_rng(2, "test.dup");
        let lin = Linear::new(3, 1, &mut rng);
        let x = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut tape = ParamTape::new();
        let xid = g.leaf(x.clone());
        let y1 = lin.fwd(&mut g, &mut tape, "l", xid);
        let y2 = lin.fwd(&mut g, &mut tape, "l", xid);
        let s = g.add(y1, y2);
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        let named = tape.collect(&g, &grads);

        // single binding for comparison
        let mut g2 = Graph::new();
        let mut tape2 = ParamTape::new();
        let xid2 = g2.leaf(x.clone());
        let y = lin.fwd(&mut g2, &mut tape2, "l", xid2);
        let loss2 = g2.sum_all(y);
        let grads2 = g2.backward(loss2);
        let named2 = tape2.collect(&g2, &grads2);

        let a = &named["l.w"];
        let b = named2["l.w"].scale(2.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
