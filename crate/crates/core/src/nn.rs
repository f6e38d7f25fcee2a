//! Trainable parameter storage, the layer building blocks shared by every
//! network in the crate, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Graph, Tensor, Var};

/// Slope of the negative half of every leaky rectifier in the networks.
pub const LEAKY_SLOPE: f64 = 0.3;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named trainable tensors. Names are dotted paths such as
/// `bs.front.weight`; the first path segment identifies the owning module.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Scalar parameter counts keyed by name prefix (everything before the
    /// first `.`).
    pub fn count_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, v) in self.iter() {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(module).or_insert(0) += v.len();
        }
        out
    }

    /// Registers every tensor in `g`. Trainable tensors become variables,
    /// otherwise constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { g.variable(v.clone()) } else { g.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Copies values from another store with the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other.names.iter().position(|n| n == name).ok_or_else(|| format!("missing parameter {name}"))?;
            if other.values[j].shape() != self.values[i].shape() {
                return Err(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    other.values[j].shape(),
                    self.values[i].shape()
                ));
            }
            self.values[i] = other.values[j].clone();
        }
        Ok(())
    }

    /// Flattened view of all parameters in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            for (dst, src) in v.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, zero-filled where the output did not
    /// depend on it.
    pub fn collect(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.raw_dim())))
            .collect()
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-limit..limit)).collect()).unwrap()
}

pub fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_shape_vec(
        IxDyn(shape),
        (0..n).map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect(),
    )
    .unwrap()
}

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, &[inputs, outputs], inputs, outputs));
        let bias = store.add(format!("{name}.bias"), zeros(&[outputs]));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.weight));
        g.add_bias(y, p.var(self.bias))
    }
}

/// Channels-last 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * in_c;
        let fan_out = kernel.0 * kernel.1 * out_c;
        let weight = store.add(
            format!("{name}.weight"),
            glorot(rng, &[kernel.0, kernel.1, in_c, out_c], fan_in, fan_out),
        );
        let bias = store.add(format!("{name}.bias"), zeros(&[out_c]));
        Self { weight, bias, stride, pad }
    }

    /// Stride-1 convolution with "same" padding for odd kernels.
    pub fn same(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, in_c, out_c, (k, k), (1, 1), (k / 2, k / 2), rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.pad)
    }
}

/// Transposed convolution that upsamples the first spatial axis by
/// `factor` and keeps the second one.
#[derive(Clone, Copy, Debug)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor: usize,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, factor: usize, rng: &mut impl Rng) -> Self {
        // kernel factor + 2 with padding 1 gives an output of exactly h * factor
        let kh = factor + 2;
        let fan = kh * 3;
        let weight = store.add(format!("{name}.weight"), glorot(rng, &[kh, 3, out_c, in_c], fan * in_c, fan * out_c));
        let bias = store.add(format!("{name}.bias"), zeros(&[out_c]));
        Self { weight, bias, factor }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, p.var(self.weight), p.var(self.bias), (self.factor, 1), (1, 1))
    }
}

/// Per-sample normalization with a per-channel affine map.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[channels])));
        let beta = store.add(format!("{name}.beta"), zeros(&[channels]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), NORM_EPS)
    }
}

/// Convolution, normalization, leaky rectifier.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, conv: impl FnOnce(&mut ParamStore, &str) -> Conv2d, out_c: usize) -> Self {
        let conv = conv(store, &format!("{name}.conv"));
        let norm = Norm::new(store, &format!("{name}.norm"), out_c);
        Self { conv, norm }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = self.conv.forward(g, p, x);
        let y = self.norm.forward(g, p, y);
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Adam optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m: Vec<Tensor> = store.values.iter().map(|t| Tensor::zeros(t.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, v: m.clone(), m }
    }

    /// One descent step on `grads` (gradients of the loss to minimize).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in store.values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut store, "fc", 7, 5, &mut rng);
        assert_eq!(store.count(), 7 * 5 + 5);
        assert_eq!(store.count_by_module()["fc"], 40);
    }

    #[test]
    fn upsample_scales_first_axis() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for factor in 1..=4 {
            let up = Upsample::new(&mut store, &format!("up{factor}"), 3, 2, factor, &mut rng);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(Tensor::ones(IxDyn(&[1, 5, 4, 3])));
            let y = up.forward(&mut g, &p, x);
            assert_eq!(g.shape(y), &[1, 5 * factor, 4, 2]);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let sq = g.square(p.var(id));
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            let gs = p.collect(&grads, &store);
            opt.update(&mut store, &gs);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }
}
