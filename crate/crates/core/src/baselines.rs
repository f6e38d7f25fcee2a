//! Separate-architecture baselines: a learned channel estimator, an
//! MSE-trained CSI feedback autoencoder, a precoder trained from ideal CSI,
//! and the classical SVD/water-filling and MMSE precoders.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, IxDyn};
use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::codec::{Encoder, UplinkDraw};
use crate::error::{Error, Result};
use crate::metrics::{channel_tensors, spectral_efficiency_graph, SnrConfig};
use crate::model::{downlink_views, uplink_views, ModelConfig, Sample};
use crate::nn::{gaussian, Bound, ConvBlock, Conv2d, ParamId, ParamStore, Upsample};
use crate::pilot::{dft_pilotbook, pilot_noise, pilot_pass_graph, pilot_rows, PilotBook};
use crate::precoder::{normalize_precoding, precoding_sets, BsNet, FrontEnd, PrecodingSet, UserMask};
use crate::rng::seeded;

/// Smallest regularization used by the MMSE precoder.
pub const MMSE_FLOOR: f64 = 1e-12;

/// Real layout `[N, Nc, Nt, 2]` of complex channels.
pub fn csi_tensor(h: &[ArrayView2<Complex64>]) -> Tensor {
    let (nc, nt) = h[0].dim();
    Tensor::from_shape_fn(IxDyn(&[h.len(), nc, nt, 2]), |ix| {
        let v = h[ix[0]][[ix[1], ix[2]]];
        if ix[3] == 0 { v.re } else { v.im }
    })
}

/// Inverse of [`csi_tensor`] for one entry of the batch.
pub fn csi_from_tensor(t: &Tensor, n: usize) -> Array2<Complex64> {
    let s = t.shape();
    Array2::from_shape_fn((s[1], s[2]), |(c, a)| Complex64::new(t[[n, c, a, 0]], t[[n, c, a, 1]]))
}

/// Mean over complex entries of `|h - h_hat|^2`, for real-stacked tensors.
pub fn mse_graph(g: &mut Graph, h: Var, h_hat: Var) -> Var {
    let d = g.sub(h_hat, h);
    let sq = g.square(d);
    let s = g.sum_all(sq);
    let complex_entries = g.value(h).len() / 2;
    g.scale(s, 1.0 / complex_entries as f64)
}

/// Channel estimation loss: mean over complex entries of `|h - h_hat|^2`.
pub fn ce_loss(h: &Array3<Complex64>, h_hat: &Array3<Complex64>) -> f64 {
    assert_eq!(h.dim(), h_hat.dim(), "ce_loss shapes");
    h.iter().zip(h_hat.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / h.len() as f64
}

/// Feedback reconstruction loss; same form as [`ce_loss`].
pub fn fb_loss(h: &Array3<Complex64>, h_dot: &Array3<Complex64>) -> f64 {
    ce_loss(h, h_dot)
}

/// Learned channel estimator: per-pilot complex affine map
/// `Y_m O_m + b_m`, transposed-convolution frequency upsampling and
/// rectified refinement convolutions.
#[derive(Clone, Debug)]
pub struct CeNet {
    pub o_re: ParamId,
    pub o_im: ParamId,
    pub b_re: ParamId,
    pub b_im: ParamId,
    pub up: Upsample,
    pub refine: Conv2d,
    pub out: Conv2d,
    pub m: usize,
    pub l: usize,
    pub nt: usize,
    pub nc: usize,
}

impl CeNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (m, l, nt, nc) = (cfg.m(), cfg.l, cfg.nt, cfg.nc);
        if nc % m != 0 {
            return Err(Error::Config(format!("Nc = {nc} is not a multiple of M = {m}")));
        }
        let std = (0.5 / l as f64).sqrt();
        let o_re = store.add(format!("{name}.o_re"), gaussian(rng, &[m, l, nt], std));
        let o_im = store.add(format!("{name}.o_im"), gaussian(rng, &[m, l, nt], std));
        let b_re = store.add(format!("{name}.b_re"), Tensor::zeros(IxDyn(&[m * nt])));
        let b_im = store.add(format!("{name}.b_im"), Tensor::zeros(IxDyn(&[m * nt])));
        let up = Upsample::new(store, &format!("{name}.up"), 2, cfg.ce_maps, nc / m, rng);
        let refine = Conv2d::same(store, &format!("{name}.refine"), cfg.ce_maps, cfg.ce_maps, 3, rng);
        let out = Conv2d::same(store, &format!("{name}.out"), cfg.ce_maps, 2, 3, rng);
        Ok(Self { o_re, o_im, b_re, b_im, up, refine, out, m, l, nt, nc })
    }

    /// Initial per-pilot estimate `[N, M, Nt, 2]` from `y` (`[N, M, L, 2]`).
    /// `Re = Re(Y)Re(O) - Im(Y)Im(O) + Re(b)`,
    /// `Im = Re(Y)Im(O) + Im(Y)Re(O) + Im(b)`.
    pub fn initial_estimate(&self, g: &mut Graph, p: &Bound, y: Var) -> Var {
        let n = g.shape(y)[0];
        let (m, l, nt) = (self.m, self.l, self.nt);
        let part = |g: &mut Graph, c: usize| {
            let v = g.slice_axis(y, 3, c, 1);
            let v = g.reshape(v, &[n, m, l]);
            g.permute(v, &[1, 0, 2])
        };
        let yr = part(g, 0);
        let yi = part(g, 1);
        let (or, oi) = (p.var(self.o_re), p.var(self.o_im));
        let rr = g.bmm(yr, or, false);
        let ii = g.bmm(yi, oi, false);
        let ri = g.bmm(yr, oi, false);
        let ir = g.bmm(yi, or, false);
        let re = g.sub(rr, ii);
        let im = g.add(ri, ir);
        let finish = |g: &mut Graph, v: Var, b: ParamId| {
            let v = g.permute(v, &[1, 0, 2]);
            let v = g.reshape(v, &[n, m * nt]);
            let v = g.add_bias(v, p.var(b));
            g.reshape(v, &[n, m, nt, 1])
        };
        let re = finish(g, re, self.b_re);
        let im = finish(g, im, self.b_im);
        g.concat(3, &[re, im])
    }

    /// `[N, M, L, 2]` -> `[N, Nc, Nt, 2]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Var {
        let x = self.initial_estimate(g, p, y);
        let x = self.up.forward(g, p, x);
        let x = g.relu(x);
        let x = self.refine.forward(g, p, x);
        let x = g.relu(x);
        self.out.forward(g, p, x)
    }
}

/// UE-side compression of full CSI: a convolution, a stride-`g` convolution
/// reducing `Nc` to `M`, then the shared encoder design.
#[derive(Clone, Debug)]
pub struct CsiEncoder {
    pub conv: ConvBlock,
    pub down: ConvBlock,
    pub encoder: Encoder,
}

impl CsiEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let (g, maps) = (cfg.spacing, cfg.enc_maps);
        if cfg.nc % g != 0 {
            return Err(Error::Config(format!("Nc = {} is not a multiple of g = {g}", cfg.nc)));
        }
        let conv = ConvBlock::new(store, &format!("{name}.conv"), |s, n| Conv2d::same(s, n, 2, maps, 3, rng), maps);
        let down = ConvBlock::new(
            store,
            &format!("{name}.down"),
            |s, n| Conv2d::new(s, n, maps, 2, (g, 3), (g, 1), (0, 1), rng),
            2,
        );
        let encoder = Encoder::new(store, &format!("{name}.enc"), [cfg.m(), cfg.nt, 2], cfg.z, maps, rng);
        Ok(Self { conv, down, encoder })
    }

    /// `[N, Nc, Nt, 2]` -> `[N, 2Z]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var) -> Var {
        let x = self.conv.forward(g, p, h);
        let x = self.down.forward(g, p, x);
        self.encoder.forward(g, p, x)
    }
}

fn network_seed_rng(seed: u64, tag: u64) -> rand_chacha::ChaCha8Rng {
    seeded(seed, tag)
}

/// Learned CE network driven by fixed DFT pilots.
#[derive(Clone, Debug)]
pub struct CeModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub net: CeNet,
    pub pilots: PilotBook,
}

impl CeModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = network_seed_rng(seed, 0xCE);
        let mut store = ParamStore::new();
        let net = CeNet::new(&mut store, "ce", cfg, &mut rng)?;
        let pilots = dft_pilotbook(cfg.m(), cfg.nt, cfg.l, cfg.spacing);
        Ok(Self { cfg: cfg.clone(), store, net, pilots })
    }

    /// Estimates `[B K, Nc, Nt, 2]` for every user of the batch.
    pub fn estimate(&self, g: &mut Graph, p: &Bound, batch: &[&Sample], sigma_ce_sq: f64, rng: &mut impl Rng) -> Var {
        let views = downlink_views(batch);
        let (hr, hi) = pilot_rows(&views, &self.pilots.indices);
        let noise = pilot_noise(rng, self.cfg.m(), views.len(), self.cfg.l, sigma_ce_sq);
        let hr = g.constant(hr);
        let hi = g.constant(hi);
        let pr = g.constant(self.pilots.symbols.mapv(|v| v.re).into_dyn());
        let pi = g.constant(self.pilots.symbols.mapv(|v| v.im).into_dyn());
        let y = pilot_pass_graph(g, hr, hi, (pr, pi), Some(noise));
        self.net.forward(g, p, y)
    }

    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &[&Sample], snr: &SnrConfig, rng: &mut impl Rng) -> Var {
        let est = self.estimate(g, p, batch, snr.sigma_ce_sq(), rng);
        let truth = g.constant(csi_tensor(&downlink_views(batch)));
        mse_graph(g, truth, est)
    }

    /// Estimates for every sample, `[K_max, Nc, Nt]` each.
    pub fn estimate_plain(&self, batch: &[&Sample], sigma_ce_sq: f64, rng: &mut impl Rng) -> Vec<Array3<Complex64>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let est = self.estimate(&mut g, &p, batch, sigma_ce_sq, rng);
        split_users(g.value(est), self.cfg.k_max)
    }
}

/// Splits `[B K, Nc, Nt, 2]` into per-sample `[K, Nc, Nt]` complex tensors.
pub fn split_users(t: &Tensor, k: usize) -> Vec<Array3<Complex64>> {
    let s = t.shape();
    let b = s[0] / k;
    (0..b)
        .map(|bi| Array3::from_shape_fn((k, s[1], s[2]), |(u, c, a)| {
            let n = bi * k + u;
            Complex64::new(t[[n, c, a, 0]], t[[n, c, a, 1]])
        }))
        .collect()
}

fn users_tensor(h: &[&Array3<Complex64>]) -> Tensor {
    let views: Vec<ArrayView2<Complex64>> =
        h.iter().flat_map(|x| (0..x.dim().0).map(move |k| x.index_axis(ndarray::Axis(0), k))).collect();
    csi_tensor(&views)
}

/// CSI feedback autoencoder trained for reconstruction through the uplink.
#[derive(Clone, Debug)]
pub struct CsiAutoencoder {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: CsiEncoder,
    pub decoder: FrontEnd,
}

impl CsiAutoencoder {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = network_seed_rng(seed, 0xFB);
        let mut store = ParamStore::new();
        let encoder = CsiEncoder::new(&mut store, "fb_encoder", cfg, &mut rng)?;
        let decoder = FrontEnd::new(
            &mut store,
            "fb_decoder",
            2 * cfg.z,
            (cfg.m(), cfg.nt, cfg.nc),
            cfg.res_blocks,
            cfg.res_maps,
            cfg.upsample_stride,
            &mut rng,
        )?;
        Ok(Self { cfg: cfg.clone(), store, encoder, decoder })
    }

    /// `input`: CSI `[N, Nc, Nt, 2]` per user, `ul`: matching uplink
    /// channels. Returns the reconstruction and the latent.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, uplink: &UplinkDraw) -> (Var, Var) {
        let s = self.encoder.forward(g, p, input);
        let s_hat = uplink.apply(g, s, self.cfg.equalize_uplink);
        (self.decoder.forward(g, p, s_hat), s)
    }

    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &[&Sample], snr: &SnrConfig, rng: &mut impl Rng) -> Result<Var> {
        let truth = g.constant(csi_tensor(&downlink_views(batch)));
        let uplink = UplinkDraw::sample(&uplink_views(batch), self.cfg.z, snr.sigma_u_sq(), rng)?;
        let (rec, _) = self.forward(g, p, truth, &uplink);
        Ok(mse_graph(g, truth, rec))
    }

    /// Reconstructs per-sample CSI from `input` estimates.
    pub fn reconstruct(
        &self,
        batch: &[&Sample],
        input: &[&Array3<Complex64>],
        sigma_u_sq: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Array3<Complex64>>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(users_tensor(input));
        let uplink = UplinkDraw::sample(&uplink_views(batch), self.cfg.z, sigma_u_sq, rng)?;
        let (rec, _) = self.forward(&mut g, &p, x, &uplink);
        Ok(split_users(g.value(rec), self.cfg.k_max))
    }
}

/// CSI compression and precoding trained for spectral efficiency from
/// ideal CSI.
#[derive(Clone, Debug)]
pub struct JfpNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: CsiEncoder,
    pub bs: BsNet,
}

impl JfpNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = network_seed_rng(seed, 0x1F9);
        let mut store = ParamStore::new();
        let encoder = CsiEncoder::new(&mut store, "jfp_encoder", cfg, &mut rng)?;
        let bs = BsNet::new(&mut store, "bs", &cfg.precoder(), &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, encoder, bs })
    }

    /// Per-sample sum-rate `[B]` and precoders, with CSI `input` per user.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Sample],
        input: Var,
        masks: &[UserMask],
        snr: &SnrConfig,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let s = self.encoder.forward(g, p, input);
        let uplink = UplinkDraw::sample(&uplink_views(batch), self.cfg.z, snr.sigma_u_sq(), rng)?;
        let s_hat = uplink.apply(g, s, self.cfg.equalize_uplink);
        let v = self.bs.forward(g, p, s_hat, masks, snr.sigma_d_sq())?;
        let refs: Vec<&Array3<Complex64>> = batch.iter().map(|s| &s.h_dl).collect();
        let (hr, hi) = channel_tensors(&refs);
        Ok((spectral_efficiency_graph(g, (&hr, &hi), v, masks, snr.sigma_d_sq()), v))
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Sample],
        masks: &[UserMask],
        snr: &SnrConfig,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let input = g.constant(csi_tensor(&downlink_views(batch)));
        let (r, _) = self.forward(g, p, batch, input, masks, snr, rng)?;
        let mean = g.mean_all(r);
        Ok(g.scale(mean, -1.0 / self.cfg.nc as f64))
    }

    /// Sum-rates and precoders from per-sample CSI `input` (ideal or
    /// estimated).
    pub fn evaluate(
        &self,
        batch: &[&Sample],
        input: &[&Array3<Complex64>],
        masks: &[UserMask],
        snr: &SnrConfig,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, Vec<PrecodingSet>)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(users_tensor(input));
        let (r, v) = self.forward(&mut g, &p, batch, x, masks, snr, rng)?;
        Ok((g.value(r).iter().copied().collect(), precoding_sets(g.value(v))))
    }
}

/// Water-filling `p_i = max(mu - sigma^2 / lambda_i, 0)` with `sum p = P`.
pub fn waterfill(gains: &[f64], sigma_sq: f64, power: f64) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..gains.len()).filter(|&i| gains[i] > 0.0).collect();
    if order.is_empty() {
        return Err(Error::NoUsableEigenmodes);
    }
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let floors: Vec<f64> = order.iter().map(|&i| sigma_sq / gains[i]).collect();
    // the active set is a prefix of the modes sorted by decreasing gain
    let mut active = 1;
    let mut mu = power + floors[0];
    let mut sum = floors[0];
    for n in 2..=order.len() {
        sum += floors[n - 1];
        let candidate = (power + sum) / n as f64;
        if candidate > floors[n - 1] {
            active = n;
            mu = candidate;
        } else {
            break;
        }
    }
    let mut p = vec![0.0; gains.len()];
    for &i in &order[..active] {
        p[i] = (mu - sigma_sq / gains[i]).max(0.0);
    }
    Ok(p)
}

/// Matched-filter directions `conj(h)/|h|` for the active users of every
/// subcarrier, scaled by per-subcarrier water-filling powers.
pub fn svd_precode(h: &Array3<Complex64>, mask: &UserMask, sigma_d_sq: f64, power: f64) -> Result<PrecodingSet> {
    let (k, nc, nt) = h.dim();
    if mask.active() == 0 {
        return Err(Error::NoActiveUsers);
    }
    let mut v = Array3::zeros((k, nc, nt));
    for n in 0..nc {
        let gains: Vec<f64> = (0..k)
            .map(|u| if mask.is_active(u) { (0..nt).map(|a| h[[u, n, a]].norm_sqr()).sum() } else { 0.0 })
            .collect();
        let p = waterfill(&gains, sigma_d_sq, power)?;
        for u in 0..k {
            if p[u] > 0.0 {
                let scale = p[u].sqrt() / gains[u].sqrt();
                for a in 0..nt {
                    v[[u, n, a]] = h[[u, n, a]].conj() * scale;
                }
            }
        }
    }
    Ok(PrecodingSet { v })
}

/// Regularized zero-forcing directions for the rows `h` (`[K, Nt]`, row
/// `k` is user `k`'s channel with `y_k = h_k^T x`):
/// `W = H^H (H H^H + alpha I)^-1`, column `k` for user `k`.
/// Returned as `[K, Nt]` with row `k` the precoder of user `k`.
pub fn mmse_directions(h: &Array2<Complex64>, alpha: f64) -> Array2<Complex64> {
    let (k, nt) = h.dim();
    let hm = DMatrix::from_fn(k, nt, |i, j| h[[i, j]]);
    let gram = &hm * hm.adjoint() + DMatrix::from_diagonal_element(k, k, Complex64::new(alpha, 0.0));
    // W^H = (H H^H + alpha I)^-1 H since the Gram matrix is Hermitian
    let wh = match gram.clone().cholesky() {
        Some(c) => c.solve(&hm),
        None => gram.lu().solve(&hm).unwrap_or_else(|| DMatrix::zeros(k, nt)),
    };
    Array2::from_shape_fn((k, nt), |(i, j)| wh[(i, j)].conj())
}

/// MMSE precoding on estimated channels, normalized per subcarrier.
pub fn mmse_precode(h: &Array3<Complex64>, mask: &UserMask, sigma_d_sq: f64, power: f64) -> Result<PrecodingSet> {
    let (k, nc, nt) = h.dim();
    let active: Vec<usize> = (0..k).filter(|&u| mask.is_active(u)).collect();
    if active.is_empty() {
        return Err(Error::NoActiveUsers);
    }
    let mut alpha = active.len() as f64 * sigma_d_sq / power;
    if alpha < MMSE_FLOOR {
        log::warn!("MMSE regularization {alpha:e} raised to {MMSE_FLOOR:e}");
        alpha = MMSE_FLOOR;
    }
    let mut raw = Array3::zeros((k, nc, nt));
    for n in 0..nc {
        let rows = Array2::from_shape_fn((active.len(), nt), |(i, a)| h[[active[i], n, a]]);
        let w = mmse_directions(&rows, alpha);
        for (i, &u) in active.iter().enumerate() {
            for a in 0..nt {
                raw[[u, n, a]] = w[[i, a]];
            }
        }
    }
    normalize_precoding(&raw, mask, power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::complex_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Array3::from_shape_fn((2, 3, 4), |_| complex_gaussian(&mut rng, 1.0));
        assert_eq!(ce_loss(&h, &h), 0.0);
        assert!((ce_loss(&h, &h.mapv(|v| v + 1.0)) - 1.0).abs() < 1e-12);
        let hh = Array3::from_shape_fn((2, 3, 4), |_| complex_gaussian(&mut rng, 1.0));
        let mut acc = 0.0;
        for (a, b) in h.iter().zip(hh.iter()) {
            acc += (a.re - b.re).powi(2) + (a.im - b.im).powi(2);
        }
        assert!((fb_loss(&h, &hh) - acc / 24.0).abs() < 1e-12);

        let views: Vec<_> = (0..2).map(|k| h.index_axis(ndarray::Axis(0), k)).collect();
        let views2: Vec<_> = (0..2).map(|k| hh.index_axis(ndarray::Axis(0), k)).collect();
        let mut g = Graph::new();
        let a = g.constant(csi_tensor(&views));
        let b = g.constant(csi_tensor(&views2));
        let l = mse_graph(&mut g, a, b);
        assert!((g.scalar(l) - acc / 24.0).abs() < 1e-12);
    }

    #[test]
    fn ce_affine_matches_complex_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let net = CeNet::new(&mut store, "ce", &cfg, &mut rng).unwrap();
        store.get_mut(net.b_re).mapv_inplace(|_| 0.3);
        store.get_mut(net.b_im).mapv_inplace(|_| -0.2);
        let (m, l, nt) = (cfg.m(), cfg.l, cfg.nt);
        let y = gaussian(&mut rng, &[3, m, l, 2], 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let est = net.initial_estimate(&mut g, &p, yv);
        let out = g.value(est);
        let (or, oi) = (store.get(net.o_re), store.get(net.o_im));
        for n in 0..3 {
            for mi in 0..m {
                for a in 0..nt {
                    let mut acc = c(0.3, -0.2);
                    for li in 0..l {
                        acc += c(y[[n, mi, li, 0]], y[[n, mi, li, 1]]) * c(or[[mi, li, a]], oi[[mi, li, a]]);
                    }
                    assert!((out[[n, mi, a, 0]] - acc.re).abs() < 1e-12);
                    assert!((out[[n, mi, a, 1]] - acc.im).abs() < 1e-12);
                }
            }
        }
        let full = net.forward(&mut g, &p, yv);
        assert_eq!(g.shape(full), &[3, cfg.nc, cfg.nt, 2]);
    }

    #[test]
    fn waterfill_examples() {
        assert_eq!(waterfill(&[1.0, 1.0], 1.0, 2.0).unwrap(), vec![1.0, 1.0]);
        let p = waterfill(&[1.0, 0.01], 1.0, 0.1).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-15 && p[1] == 0.0);
        assert_eq!(waterfill(&[0.3], 0.5, 2.0).unwrap(), vec![2.0]);
        let p = waterfill(&[0.0, 2.0], 1.0, 1.0).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
        assert!(matches!(waterfill(&[0.0, 0.0], 1.0, 1.0), Err(Error::NoUsableEigenmodes)));
    }

    #[test]
    fn svd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Array3::from_shape_fn((1, 2, 3), |_| complex_gaussian(&mut rng, 1.0));
        let v = svd_precode(&h, &UserMask::all(1), 0.1, 1.0).unwrap();
        for n in 0..2 {
            let norm: f64 = (0..3).map(|a| h[[0, n, a]].norm_sqr()).sum::<f64>().sqrt();
            for a in 0..3 {
                assert!((v.v[[0, n, a]] - h[[0, n, a]].conj() / norm).norm() < 1e-12);
            }
        }
        let mut h = Array3::zeros((2, 1, 2));
        h[[0, 0, 0]] = c(1.0, 0.0);
        h[[1, 0, 1]] = c(0.0, 1.0);
        let v = svd_precode(&h, &UserMask::all(2), 0.1, 1.0).unwrap();
        assert!((v.v[[0, 0, 0]].norm_sqr() - 0.5).abs() < 1e-12);
        assert!((v.v[[1, 0, 1]].norm_sqr() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mmse_examples() {
        let eye = Array2::from_shape_fn((2, 2), |(i, j)| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) });
        let w = mmse_directions(&eye, 1.0);
        assert!(w.iter().zip(eye.iter()).all(|(a, b)| (a - b * 0.5).norm() < 1e-15));
        let mut h = Array3::zeros((2, 1, 2));
        h[[0, 0, 0]] = c(1.0, 0.0);
        h[[1, 0, 1]] = c(1.0, 0.0);
        // K sigma^2 / P = 1
        let set = mmse_precode(&h, &UserMask::all(2), 0.5, 1.0).unwrap();
        for u in 0..2 {
            let n: f64 = (0..2).map(|a| set.v[[u, 0, a]].norm_sqr()).sum();
            assert!((n - 0.5).abs() < 1e-12);
        }

        // vanishing noise gives zero-forcing directions
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Array2::from_shape_fn((3, 5), |_| complex_gaussian(&mut rng, 1.0));
        let w = mmse_directions(&h, 1e-13);
        for k in 0..3 {
            for m in 0..3 {
                let e: Complex64 = (0..5).map(|a| h[[k, a]] * w[[m, a]]).sum();
                let target = if k == m { 1.0 } else { 0.0 };
                assert!((e - target).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn mmse_orthogonal_rows_give_matched_filters() {
        let mut h = Array3::zeros((2, 1, 3));
        h[[0, 0, 0]] = c(0.6, 0.8);
        h[[1, 0, 1]] = c(0.0, -2.0);
        h[[1, 0, 2]] = c(1.0, 0.0);
        let set = mmse_precode(&h, &UserMask::all(2), 1e-15, 1.0).unwrap();
        for u in 0..2 {
            let hn: f64 = (0..3).map(|a| h[[u, 0, a]].norm_sqr()).sum::<f64>().sqrt();
            let vn: f64 = (0..3).map(|a| set.v[[u, 0, a]].norm_sqr()).sum::<f64>().sqrt();
            for a in 0..3 {
                assert!((set.v[[u, 0, a]] / vn - h[[u, 0, a]].conj() / hn).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn inactive_users_get_no_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Array3::from_shape_fn((3, 4, 4), |_| complex_gaussian(&mut rng, 1.0));
        let mask = UserMask(vec![true, false, true]);
        for set in [svd_precode(&h, &mask, 0.1, 1.0).unwrap(), mmse_precode(&h, &mask, 0.1, 1.0).unwrap()] {
            assert!(set.subcarrier_powers().iter().all(|e| (e - 1.0).abs() < 1e-9));
            assert!(set.v.index_axis(ndarray::Axis(0), 1).iter().all(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn csi_encoder_reduces_to_pilot_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig::desk();
        let ae = CsiAutoencoder::new(&cfg, 1).unwrap();
        let sc = crate::channel::ScenarioConfig::umi_like(cfg.nc, cfg.nt, cfg.k_max);
        let data: Vec<Sample> = (0..2).map(|i| Sample::from(&crate::channel::generate_realization(&sc, i).unwrap())).collect();
        let batch: Vec<&Sample> = data.iter().collect();
        let input: Vec<&Array3<Complex64>> = data.iter().map(|s| &s.h_dl).collect();
        let rec = ae.reconstruct(&batch, &input, 0.1, &mut rng).unwrap();
        assert_eq!(rec[0].dim(), data[0].h_dl.dim());
        let mut g = Graph::new();
        let p = ae.store.bind(&mut g, false);
        let x = g.constant(users_tensor(&input));
        let s = ae.encoder.forward(&mut g, &p, x);
        for row in g.value(s).rows() {
            let e: f64 = row.iter().map(|v| v * v).sum::<f64>() / cfg.z as f64;
            assert!((e - 1.0).abs() < 1e-9);
        }
    }
}
