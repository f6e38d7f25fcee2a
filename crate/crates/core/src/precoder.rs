//! BS-side network: per-user recovery of the feedback into a frequency map,
//! masked multi-head attention across users on every subcarrier, and
//! per-subcarrier precoding power normalization.

use ndarray::{Array3, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::codec::DetectedCode;
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, Conv2d, Linear, Norm, ParamStore, Upsample, LEAKY_SLOPE};
use crate::nn::gaussian;

/// Binary user activation vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserMask(pub Vec<bool>);

impl UserMask {
    pub fn all(k_max: usize) -> Self {
        Self(vec![true; k_max])
    }

    /// First `k` users active.
    pub fn first(k: usize, k_max: usize) -> Self {
        Self((0..k_max).map(|i| i < k).collect())
    }

    pub fn k_max(&self) -> usize {
        self.0.len()
    }

    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }
}

/// Per-user, per-subcarrier precoders `[K_max, Nc, Nt]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecodingSet {
    pub v: Array3<Complex64>,
}

impl PrecodingSet {
    /// `sum_k |v_n(k)|^2` for every subcarrier.
    pub fn subcarrier_powers(&self) -> Vec<f64> {
        let (k, nc, _) = self.v.dim();
        (0..nc)
            .map(|n| (0..k).map(|u| self.v.slice(ndarray::s![u, n, ..]).iter().map(|c| c.norm_sqr()).sum::<f64>()).sum())
            .collect()
    }
}

/// Per subcarrier: zero inactive rows, then scale active rows jointly to
/// total power `power`.
pub fn normalize_precoding(v_raw: &Array3<Complex64>, mask: &UserMask, power: f64) -> Result<PrecodingSet> {
    let (k, nc, _) = v_raw.dim();
    if mask.active() == 0 {
        return Err(Error::NoActiveUsers);
    }
    let mut v = v_raw.clone();
    for u in 0..k {
        if !mask.is_active(u) {
            v.slice_mut(ndarray::s![u, .., ..]).fill(Complex64::new(0.0, 0.0));
        }
    }
    for n in 0..nc {
        let e: f64 = v.slice(ndarray::s![.., n, ..]).iter().map(|c| c.norm_sqr()).sum();
        if e == 0.0 {
            return Err(Error::DegeneratePrecoder(n));
        }
        let c = (power / e).sqrt();
        v.slice_mut(ndarray::s![.., n, ..]).mapv_inplace(|x| x * c);
    }
    Ok(PrecodingSet { v })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Inactive users are excluded from the softmax.
    Additive,
    /// Logits are multiplied element-wise by the mask outer product.
    Multiplicative,
}

/// Number of stride-`s1` upsampling layers with `s1^I = nc / m`.
pub fn upsampling_layers(m: usize, nc: usize, s1: usize) -> Result<usize> {
    if m == 0 || nc % m != 0 {
        return Err(Error::Config(format!("Nc = {nc} is not a multiple of M = {m}")));
    }
    let ratio = nc / m;
    if ratio == 1 {
        return Ok(0);
    }
    if s1 < 2 {
        return Err(Error::Config(format!("stride {s1} cannot upsample by {ratio}")));
    }
    let mut layers = 0;
    let mut f = 1;
    while f < ratio {
        f *= s1;
        layers += 1;
    }
    if f != ratio {
        return Err(Error::Config(format!("Nc / M = {ratio} is not a power of the stride {s1}")));
    }
    Ok(layers)
}

/// `x + norm(conv(block(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, maps: usize, rng: &mut impl Rng) -> Self {
        let first = ConvBlock::new(store, &format!("{name}.a"), |s, n| Conv2d::same(s, n, maps, maps, 3, rng), maps);
        let conv = Conv2d::same(store, &format!("{name}.b.conv"), maps, maps, 3, rng);
        let norm = Norm::new(store, &format!("{name}.b.norm"), maps);
        Self { first, conv, norm }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = self.first.forward(g, p, x);
        let y = self.conv.forward(g, p, y);
        let y = self.norm.forward(g, p, y);
        g.add(x, y)
    }
}

/// Feedback recovery: fully-connected `2Z -> 2 M Nt`, residual feature
/// extraction on the `[M, Nt]` map and frequency upsampling to `[Nc, Nt, 2]`.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub fc: Linear,
    pub lift: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub ups: Vec<Upsample>,
    pub out: Conv2d,
    pub m: usize,
    pub nt: usize,
    pub nc: usize,
}

impl FrontEnd {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        (m, nt, nc): (usize, usize, usize),
        res_blocks: usize,
        maps: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = upsampling_layers(m, nc, stride)?;
        let fc = Linear::new(store, &format!("{name}.fc"), in_features, 2 * m * nt, rng);
        let lift = Conv2d::same(store, &format!("{name}.lift"), 2, maps, 1, rng);
        let blocks = (0..res_blocks).map(|i| ResBlock::new(store, &format!("{name}.res{i}"), maps, rng)).collect();
        let ups = (0..layers).map(|i| Upsample::new(store, &format!("{name}.up{i}"), maps, maps, stride, rng)).collect();
        let out = Conv2d::same(store, &format!("{name}.out"), maps, 2, 3, rng);
        Ok(Self { fc, lift, blocks, ups, out, m, nt, nc })
    }

    /// `[N, in]` -> `[N, M, Nt, 2]`.
    pub fn decode_front(&self, g: &mut Graph, p: &Bound, s: Var) -> Var {
        let n = g.shape(s)[0];
        let x = self.fc.forward(g, p, s);
        g.reshape(x, &[n, self.m, self.nt, 2])
    }

    /// `[N, M, Nt, 2]` -> `[N, M, Nt, maps]`.
    pub fn extract_features(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut x = self.lift.forward(g, p, x);
        for b in &self.blocks {
            x = b.forward(g, p, x);
        }
        x
    }

    /// `[N, M, Nt, maps]` -> `[N, Nc, Nt, 2]`.
    pub fn reconstruct_dimension(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut x = x;
        for u in &self.ups {
            x = u.forward(g, p, x);
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
        self.out.forward(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, s: Var) -> Var {
        let x = self.decode_front(g, p, s);
        let x = self.extract_features(g, p, x);
        self.reconstruct_dimension(g, p, x)
    }
}

/// Two-layer map from `log10(sigma_d^2)` to `R^E`.
#[derive(Clone, Copy, Debug)]
pub struct NoiseEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl NoiseEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, embed: usize, rng: &mut impl Rng) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), 1, embed, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), embed, embed, rng);
        Self { fc1, fc2 }
    }

    /// Returns `[1, E]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, sigma_d_sq: f64) -> Result<Var> {
        if !(sigma_d_sq > 0.0) {
            return Err(Error::NonPositiveNoise(sigma_d_sq));
        }
        let x = g.constant(Tensor::from_elem(IxDyn(&[1, 1]), sigma_d_sq.log10()));
        let x = self.fc1.forward(g, p, x);
        let x = g.leaky_relu(x, LEAKY_SLOPE);
        Ok(self.fc2.forward(g, p, x))
    }

    pub fn embed(&self, store: &ParamStore, sigma_d_sq: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let e = self.forward(&mut g, &p, sigma_d_sq)?;
        Ok(g.value(e).iter().copied().collect())
    }
}

/// Masked multi-head attention across users followed by a per-user
/// fully-connected stack back to `2 Nt` real outputs.
#[derive(Clone, Debug)]
pub struct AttentionPrecoder {
    pub wq: crate::nn::ParamId,
    pub wk: crate::nn::ParamId,
    pub wv: crate::nn::ParamId,
    pub out_proj: Linear,
    pub in_proj: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub nt: usize,
    pub embed: usize,
    pub heads: usize,
    pub k_max: usize,
    pub mode: MaskMode,
}

impl AttentionPrecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        nt: usize,
        embed: usize,
        heads: usize,
        k_max: usize,
        mode: MaskMode,
        rng: &mut impl Rng,
    ) -> Self {
        let d = 2 * nt;
        let std = (1.0 / d as f64).sqrt();
        let wq = store.add(format!("{name}.wq"), gaussian(rng, &[d, heads * embed], std));
        let wk = store.add(format!("{name}.wk"), gaussian(rng, &[d, heads * embed], std));
        let wv = store.add(format!("{name}.wv"), gaussian(rng, &[d, heads * embed], std));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), heads * embed, embed, rng);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, embed, rng);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), embed, embed, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), embed, d, rng);
        Self { wq, wk, wv, out_proj, in_proj, fc1, fc2, nt, embed, heads, k_max, mode }
    }

    fn heads_view(&self, g: &mut Graph, x: Var, groups: usize, k: usize) -> Var {
        let x = g.reshape(x, &[groups, k, self.heads, self.embed]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[groups * self.heads, k, self.embed])
    }

    /// `x`: `[G, K, 2Nt]`; `masks[g]` is the mask of group `g`; `e`: `[1, E]`.
    /// Returns `[G, K, 2Nt]` with inactive rows zero.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, masks: &[&UserMask], e: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (groups, k, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, 2 * self.nt, "attention input width");
        assert_eq!(masks.len(), groups, "one mask per group");
        let xf = g.reshape(x, &[groups * k, d]);
        let q = g.matmul(xf, p.var(self.wq));
        let kk = g.matmul(xf, p.var(self.wk));
        let v = g.matmul(xf, p.var(self.wv));
        let q = self.heads_view(g, q, groups, k);
        let kk = self.heads_view(g, kk, groups, k);
        let v = self.heads_view(g, v, groups, k);
        let logits = g.bmm(q, kk, true);
        let logits = g.scale(logits, 1.0 / (self.k_max as f64).sqrt());
        let gh = groups * self.heads;
        let pair = |gi: usize, i: usize, j: usize| masks[gi / self.heads].0[i] && masks[gi / self.heads].0[j];
        let attn = match self.mode {
            MaskMode::Additive => {
                let allow = ArrayD::from_shape_fn(IxDyn(&[gh, k, k]), |ix| pair(ix[0], ix[1], ix[2]));
                g.masked_softmax(logits, &allow)
            }
            MaskMode::Multiplicative => {
                let prod = Tensor::from_shape_fn(IxDyn(&[gh, k, k]), |ix| if pair(ix[0], ix[1], ix[2]) { 1.0 } else { 0.0 });
                let prod = g.constant(prod);
                let masked = g.mul(logits, prod);
                g.masked_softmax(masked, &ArrayD::from_elem(IxDyn(&[gh, k, k]), true))
            }
        };
        let heads = g.bmm(attn, v, false);
        let heads = g.reshape(heads, &[groups, self.heads, k, self.embed]);
        let heads = g.permute(heads, &[0, 2, 1, 3]);
        let heads = g.reshape(heads, &[groups * k, self.heads * self.embed]);
        let a = self.out_proj.forward(g, p, heads);
        let skip = self.in_proj.forward(g, p, xf);
        let h = g.add(a, skip);
        let e = g.reshape(e, &[self.embed]);
        let h = g.add_bias(h, e);
        let h = self.fc1.forward(g, p, h);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let out = self.fc2.forward(g, p, h);
        let keep = Tensor::from_shape_fn(IxDyn(&[groups * k, d]), |ix| {
            if masks[ix[0] / k].0[ix[0] % k] {
                1.0
            } else {
                0.0
            }
        });
        let keep = g.constant(keep);
        let out = g.mul(out, keep);
        g.reshape(out, &[groups, k, d])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecoderConfig {
    pub nt: usize,
    pub nc: usize,
    pub m: usize,
    pub z: usize,
    pub k_max: usize,
    pub embed: usize,
    pub heads: usize,
    pub res_blocks: usize,
    pub res_maps: usize,
    pub upsample_stride: usize,
    pub mask_mode: MaskMode,
    pub power: f64,
}

/// Complete BS network mapping detected codes to a precoding set.
#[derive(Clone, Debug)]
pub struct BsNet {
    pub front: FrontEnd,
    pub noise: NoiseEmbedding,
    pub attention: AttentionPrecoder,
    pub cfg: PrecoderConfig,
}

impl BsNet {
    /// Trainable parameters of a BS network built from `cfg`.
    pub fn parameter_count(cfg: &PrecoderConfig) -> Result<usize> {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Self::new(&mut store, "bs", cfg, &mut rng)?;
        Ok(store.count())
    }

    pub fn new(store: &mut ParamStore, name: &str, cfg: &PrecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let front = FrontEnd::new(
            store,
            &format!("{name}.front"),
            2 * cfg.z,
            (cfg.m, cfg.nt, cfg.nc),
            cfg.res_blocks,
            cfg.res_maps,
            cfg.upsample_stride,
            rng,
        )?;
        let noise = NoiseEmbedding::new(store, &format!("{name}.noise"), cfg.embed, rng);
        let attention =
            AttentionPrecoder::new(store, &format!("{name}.attn"), cfg.nt, cfg.embed, cfg.heads, cfg.k_max, cfg.mask_mode, rng);
        Ok(Self { front, noise, attention, cfg: cfg.clone() })
    }

    /// Per-user frequency maps `[B K, Nc, Nt, 2]` reorganized to attention
    /// inputs `[B Nc, K, 2Nt]` (real parts then imaginary parts).
    pub fn to_attention_input(&self, g: &mut Graph, maps: Var, batch: usize) -> Var {
        let (k, nc, nt) = (self.cfg.k_max, self.cfg.nc, self.cfg.nt);
        let x = g.reshape(maps, &[batch, k, nc, nt, 2]);
        let x = g.permute(x, &[0, 2, 1, 4, 3]);
        g.reshape(x, &[batch * nc, k, 2 * nt])
    }

    /// Attention precoding and per-subcarrier normalization of attention
    /// inputs `[B Nc, K, 2Nt]`; returns `[B, Nc, K, 2, Nt]`.
    pub fn precode_features(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        masks: &[UserMask],
        sigma_d_sq: f64,
    ) -> Result<Var> {
        let (k, nc, nt) = (self.cfg.k_max, self.cfg.nc, self.cfg.nt);
        let batch = masks.len();
        if masks.iter().any(|m| m.active() == 0) {
            return Err(Error::NoActiveUsers);
        }
        let e = self.noise.forward(g, p, sigma_d_sq)?;
        let per_group: Vec<&UserMask> = masks.iter().flat_map(|m| std::iter::repeat_n(m, nc)).collect();
        let v = self.attention.forward(g, p, x, &per_group, e);
        let v = g.reshape(v, &[batch * nc, k * 2 * nt]);
        let v = g.power_normalize(v, k * 2 * nt, self.cfg.power);
        Ok(g.reshape(v, &[batch, nc, k, 2, nt]))
    }

    /// `s_hat`: `[B K, 2Z]` grouped by sample; returns `[B, Nc, K, 2, Nt]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, s_hat: Var, masks: &[UserMask], sigma_d_sq: f64) -> Result<Var> {
        let maps = self.front.forward(g, p, s_hat);
        let x = self.to_attention_input(g, maps, masks.len());
        self.precode_features(g, p, x, masks, sigma_d_sq)
    }

    /// Plain forward for one sample.
    pub fn precode(
        &self,
        store: &ParamStore,
        detected: &[DetectedCode],
        mask: &UserMask,
        sigma_d_sq: f64,
    ) -> Result<PrecodingSet> {
        let (k, z) = (self.cfg.k_max, self.cfg.z);
        if detected.len() != k || mask.k_max() != k {
            return Err(Error::ShapeMismatch(format!("{} codes / mask {} for K_max = {k}", detected.len(), mask.k_max())));
        }
        if detected.iter().any(|d| d.s_hat.len() != z) {
            return Err(Error::ShapeMismatch(format!("detected codes must have {z} entries")));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let flat: Vec<f64> = detected.iter().flat_map(|d| d.to_real()).collect();
        let s = g.constant(Tensor::from_shape_vec(IxDyn(&[k, 2 * z]), flat).expect("code layout"));
        let v = self.forward(&mut g, &p, s, std::slice::from_ref(mask), sigma_d_sq)?;
        let set = precoding_sets(g.value(v)).remove(0);
        if let Some(n) = set.subcarrier_powers().iter().position(|&e| e == 0.0) {
            return Err(Error::DegeneratePrecoder(n));
        }
        Ok(set)
    }
}

/// Converts a `[B, Nc, K, 2, Nt]` tensor into per-sample precoding sets.
pub fn precoding_sets(v: &Tensor) -> Vec<PrecodingSet> {
    let s = v.shape();
    let (b, nc, k, nt) = (s[0], s[1], s[2], s[4]);
    (0..b)
        .map(|bi| PrecodingSet {
            v: Array3::from_shape_fn((k, nc, nt), |(u, n, a)| Complex64::new(v[[bi, n, u, 0, a]], v[[bi, n, u, 1, a]])),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::complex_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(k_max: usize, mode: MaskMode) -> PrecoderConfig {
        PrecoderConfig {
            nt: 2,
            nc: 4,
            m: 2,
            z: 2,
            k_max,
            embed: 8,
            heads: 2,
            res_blocks: 1,
            res_maps: 4,
            upsample_stride: 2,
            mask_mode: mode,
            power: 1.0,
        }
    }

    #[test]
    fn upsampling_layer_counts() {
        assert_eq!(upsampling_layers(24, 96, 2).unwrap(), 2);
        assert_eq!(upsampling_layers(12, 96, 2).unwrap(), 3);
        assert_eq!(upsampling_layers(96, 96, 1).unwrap(), 0);
        assert_eq!(upsampling_layers(6, 24, 4).unwrap(), 1);
        assert!(matches!(upsampling_layers(7, 24, 2), Err(Error::Config(_))));
        assert!(matches!(upsampling_layers(8, 24, 2), Err(Error::Config(_))));
        assert!(matches!(upsampling_layers(6, 24, 1), Err(Error::Config(_))));
    }

    #[test]
    fn front_layer_width_and_sharing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let front = FrontEnd::new(&mut store, "f", 64, (24, 32, 96), 2, 4, 2, &mut rng).unwrap();
        assert_eq!(store.get(front.fc.bias).len(), 1536);

        let s: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::from_shape_vec(IxDyn(&[2, 64]), [s.clone(), s].concat()).unwrap());
        let y = front.decode_front(&mut g, &p, x);
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 24, 32, 2]);
        let half = v.len() / 2;
        let flat: Vec<f64> = v.iter().copied().collect();
        assert_eq!(flat[..half], flat[half..]);

        store.get_mut(front.fc.weight).fill(0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::ones(IxDyn(&[1, 64])));
        let y = front.decode_front(&mut g, &p, x);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = ResBlock::new(&mut store, "r", 3, &mut rng);
        store.get_mut(block.first.conv.weight).fill(0.0);
        store.get_mut(block.conv.weight).fill(0.0);
        let x = gaussian(&mut rng, &[2, 4, 5, 3], 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &p, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn reconstruct_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, nc, s1, layers) in [(6, 24, 2, 2), (24, 24, 1, 0), (3, 24, 2, 3)] {
            let mut store = ParamStore::new();
            let front = FrontEnd::new(&mut store, "f", 4, (m, 4, nc), 1, 3, s1, &mut rng).unwrap();
            assert_eq!(front.ups.len(), layers);
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(gaussian(&mut rng, &[2, 4], 1.0));
            let d = front.decode_front(&mut g, &p, x);
            let f = front.extract_features(&mut g, &p, d);
            assert_eq!(g.shape(f), &[2, m, 4, 3]);
            let y = front.reconstruct_dimension(&mut g, &p, f);
            assert_eq!(g.shape(y), &[2, nc, 4, 2]);
        }
    }

    #[test]
    fn noise_embedding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let ne = NoiseEmbedding::new(&mut store, "n", 256, &mut rng);
        let e1 = ne.embed(&store, 1.0).unwrap();
        assert_eq!(e1.len(), 256);
        // log10(1) = 0: only the biases pass through the first layer
        let b1 = store.get(ne.fc1.bias);
        let w2 = store.get(ne.fc2.weight);
        let b2 = store.get(ne.fc2.bias);
        for j in 0..256 {
            let expected: f64 =
                b2[j] + (0..256).map(|i| { let h = b1[i]; if h > 0.0 { h } else { LEAKY_SLOPE * h } } * w2[[i, j]]).sum::<f64>();
            assert!((e1[j] - expected).abs() < 1e-12);
        }
        assert_eq!(ne.embed(&store, 0.1).unwrap(), ne.embed(&store, 0.1).unwrap());
        assert!(matches!(ne.embed(&store, 0.0), Err(Error::NonPositiveNoise(_))));
        assert!(matches!(ne.embed(&store, -1.0), Err(Error::NonPositiveNoise(_))));
    }

    fn run_attention(att: &AttentionPrecoder, store: &ParamStore, x: &Tensor, masks: &[UserMask]) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = g.constant(Tensor::from_elem(IxDyn(&[1, att.embed]), 0.1));
        let refs: Vec<&UserMask> = masks.iter().collect();
        let y = att.forward(&mut g, &p, xv, &refs, e);
        g.value(y).clone()
    }

    #[test]
    fn mask_isolation_and_zero_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let att = AttentionPrecoder::new(&mut store, "a", 3, 8, 2, 4, MaskMode::Additive, &mut rng);
        let mask = UserMask(vec![true, false, true, false]);
        let x = gaussian(&mut rng, &[3, 4, 6], 1.0);
        let base = run_attention(&att, &store, &x, &vec![mask.clone(); 3]);
        let mut x2 = x.clone();
        for gi in 0..3 {
            for d in 0..6 {
                x2[[gi, 1, d]] += 5.0 * crate::rng::standard_normal(&mut rng);
                x2[[gi, 3, d]] -= 3.0;
            }
        }
        let moved = run_attention(&att, &store, &x2, &vec![mask.clone(); 3]);
        for gi in 0..3 {
            for u in 0..4 {
                for d in 0..6 {
                    if mask.0[u] {
                        assert!((base[[gi, u, d]] - moved[[gi, u, d]]).abs() <= 1e-6);
                    } else {
                        assert_eq!(base[[gi, u, d]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_active_user_depends_only_on_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let att = AttentionPrecoder::new(&mut store, "a", 2, 8, 2, 3, MaskMode::Additive, &mut rng);
        let x = gaussian(&mut rng, &[1, 3, 4], 1.0);
        let mask = UserMask(vec![false, true, false]);
        let y = run_attention(&att, &store, &x, std::slice::from_ref(&mask));
        // the same user alone in a one-slot problem
        let mut store1 = ParamStore::new();
        let mut att1 = AttentionPrecoder::new(&mut store1, "a", 2, 8, 2, 3, MaskMode::Additive, &mut rng);
        store1.load_from(&store).unwrap();
        att1.k_max = 3;
        let x1 = x.slice_axis(ndarray::Axis(1), ndarray::Slice::from(1..2)).to_owned();
        let y1 = run_attention(&att1, &store1, &x1, &[UserMask(vec![true])]);
        for d in 0..4 {
            assert!((y[[0, 1, d]] - y1[[0, 0, d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn all_ones_mask_matches_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mut att = AttentionPrecoder::new(&mut store, "a", 2, 8, 2, 3, MaskMode::Additive, &mut rng);
        let x = gaussian(&mut rng, &[2, 3, 4], 1.0);
        let masks = vec![UserMask::all(3); 2];
        let a = run_attention(&att, &store, &x, &masks);
        att.mode = MaskMode::Multiplicative;
        let m = run_attention(&att, &store, &x, &masks);
        assert!(a.iter().zip(m.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn multiplicative_mode_still_weights_inactive_users() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let att = AttentionPrecoder::new(&mut store, "a", 2, 8, 2, 2, MaskMode::Multiplicative, &mut rng);
        let mask = UserMask(vec![true, false]);
        let x = gaussian(&mut rng, &[1, 2, 4], 1.0);
        let mut x2 = x.clone();
        x2[[0, 1, 0]] += 3.0;
        let a = run_attention(&att, &store, &x, std::slice::from_ref(&mask));
        let b = run_attention(&att, &store, &x2, std::slice::from_ref(&mask));
        assert!((0..4).any(|d| (a[[0, 0, d]] - b[[0, 0, d]]).abs() > 1e-9));
    }

    #[test]
    fn normalize_precoding_examples() {
        let mut v = Array3::zeros((3, 1, 2));
        v[[0, 0, 0]] = Complex64::new(1.0, 0.0);
        v[[1, 0, 1]] = Complex64::new(0.0, 1.0);
        v[[2, 0, 0]] = Complex64::new(7.0, 1.0);
        let mask = UserMask(vec![true, true, false]);
        let set = normalize_precoding(&v, &mask, 1.0).unwrap();
        let r = 0.5f64.sqrt();
        assert!((set.v[[0, 0, 0]] - Complex64::new(r, 0.0)).norm() < 1e-15);
        assert!((set.v[[1, 0, 1]] - Complex64::new(0.0, r)).norm() < 1e-15);
        assert!(set.v.slice(ndarray::s![2, .., ..]).iter().all(|c| *c == Complex64::new(0.0, 0.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Array3::from_shape_fn((4, 6, 3), |_| complex_gaussian(&mut rng, 1.0));
        let set = normalize_precoding(&v, &UserMask(vec![true, false, true, true]), 2.5).unwrap();
        for n in 0..6 {
            let e: f64 = (0..4).map(|u| (0..3).map(|a| set.v[[u, n, a]].norm_sqr()).sum::<f64>()).sum();
            assert!((e - 2.5).abs() < 1e-9);
        }

        let mut z = v.clone();
        z.slice_mut(ndarray::s![.., 2, ..]).fill(Complex64::new(0.0, 0.0));
        assert!(matches!(normalize_precoding(&z, &UserMask::all(4), 1.0), Err(Error::DegeneratePrecoder(2))));
        assert!(matches!(normalize_precoding(&v, &UserMask(vec![false; 4]), 1.0), Err(Error::NoActiveUsers)));
    }

    fn codes(rng: &mut ChaCha8Rng, k: usize, z: usize) -> Vec<DetectedCode> {
        (0..k).map(|_| DetectedCode { s_hat: (0..z).map(|_| complex_gaussian(rng, 1.0)).collect() }).collect()
    }

    #[test]
    fn bs_forward_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = tiny_cfg(3, MaskMode::Additive);
        let mut store = ParamStore::new();
        let bs = BsNet::new(&mut store, "bs", &cfg, &mut rng).unwrap();
        let mask = UserMask(vec![true, false, true]);
        let set = bs.precode(&store, &codes(&mut rng, 3, 2), &mask, 0.1).unwrap();
        assert_eq!(set.v.dim(), (3, 4, 2));
        assert!(set.subcarrier_powers().iter().all(|e| (e - 1.0).abs() < 1e-6));
        assert!(set.v.slice(ndarray::s![1, .., ..]).iter().all(|c| c.norm() == 0.0));
        assert!(matches!(
            bs.precode(&store, &codes(&mut rng, 3, 2), &UserMask(vec![false; 3]), 0.1),
            Err(Error::NoActiveUsers)
        ));
        assert!(matches!(bs.precode(&store, &codes(&mut rng, 2, 2), &mask, 0.1), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny_cfg(3, MaskMode::Additive);
        let mut store = ParamStore::new();
        let bs = BsNet::new(&mut store, "bs", &cfg, &mut rng).unwrap();
        let c = codes(&mut rng, 3, 2);
        let mask = UserMask(vec![true, true, false]);
        let base = bs.precode(&store, &c, &mask, 0.3).unwrap();
        let perm = [2, 0, 1];
        let pc: Vec<_> = perm.iter().map(|&i| c[i].clone()).collect();
        let pm = UserMask(perm.iter().map(|&i| mask.0[i]).collect());
        let moved = bs.precode(&store, &pc, &pm, 0.3).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for n in 0..4 {
                for a in 0..2 {
                    assert!((moved.v[[new, n, a]] - base.v[[old, n, a]]).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn parameter_count_constant_in_k_max() {
        let counts: Vec<usize> = [2, 4, 6]
            .iter()
            .map(|&k| {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let mut store = ParamStore::new();
                BsNet::new(&mut store, "bs", &tiny_cfg(k, MaskMode::Additive), &mut rng).unwrap();
                store.count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let att = AttentionPrecoder::new(&mut store, "a", 32, 256, 4, 6, MaskMode::Additive, &mut rng);
        let qkv: usize = [att.wq, att.wk, att.wv].iter().map(|&id| store.get(id).len()).sum();
        assert_eq!(qkv, 3 * 4 * 64 * 256);
    }
}
