//! Spectral efficiency, NMSE and parameter accounting.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayBase, Data, Dimension, IxDyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::precoder::{PrecodingSet, UserMask};

pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrConfig {
    pub snr_ce_db: f64,
    pub snr_u_db: f64,
    pub snr_d_db: f64,
    pub power: f64,
}

impl Default for SnrConfig {
    fn default() -> Self {
        Self { snr_ce_db: 10.0, snr_u_db: 10.0, snr_d_db: 10.0, power: 1.0 }
    }
}

pub fn db_to_noise(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

impl SnrConfig {
    pub fn sigma_ce_sq(&self) -> f64 {
        db_to_noise(self.snr_ce_db)
    }

    pub fn sigma_u_sq(&self) -> f64 {
        db_to_noise(self.snr_u_db)
    }

    pub fn sigma_d_sq(&self) -> f64 {
        self.power * db_to_noise(self.snr_d_db)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralEfficiency {
    /// Sum over users and subcarriers.
    pub total: f64,
    /// `total / Nc`.
    pub per_subcarrier: f64,
}

/// Masked sum-rate of `v` on channels `h_dl` (`[K_max, Nc, Nt]`).
pub fn spectral_efficiency(
    h_dl: &Array3<Complex64>,
    v: &PrecodingSet,
    mask: &UserMask,
    sigma_d_sq: f64,
) -> SpectralEfficiency {
    let (k_max, nc, nt) = h_dl.dim();
    assert_eq!(v.v.dim(), (k_max, nc, nt), "precoder shape");
    let mut total = 0.0;
    for n in 0..nc {
        let mut gains = vec![vec![0.0; k_max]; k_max];
        for k in 0..k_max {
            for m in 0..k_max {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..nt {
                    acc += h_dl[[k, n, a]] * v.v[[m, n, a]];
                }
                gains[k][m] = acc.norm_sqr();
            }
        }
        for k in (0..k_max).filter(|&k| mask.is_active(k)) {
            let interference: f64 = (0..k_max).filter(|&m| m != k && mask.is_active(m)).map(|m| gains[k][m]).sum();
            total += (gains[k][k] / (interference + sigma_d_sq)).ln_1p() / std::f64::consts::LN_2;
        }
    }
    SpectralEfficiency { total, per_subcarrier: total / nc as f64 }
}

/// Downlink channels of a batch laid out for the graph: `(re, im)`,
/// each `[B Nc, K, Nt]`.
pub fn channel_tensors(h_dl: &[&Array3<Complex64>]) -> (Tensor, Tensor) {
    let (k, nc, nt) = h_dl[0].dim();
    let b = h_dl.len();
    let shape = IxDyn(&[b * nc, k, nt]);
    let re = Tensor::from_shape_fn(shape.clone(), |ix| h_dl[ix[0] / nc][[ix[1], ix[0] % nc, ix[2]]].re);
    let im = Tensor::from_shape_fn(shape, |ix| h_dl[ix[0] / nc][[ix[1], ix[0] % nc, ix[2]]].im);
    (re, im)
}

/// Per-sample masked sum-rate `[B]` for precoders `v` (`[B, Nc, K, 2, Nt]`).
pub fn spectral_efficiency_graph(
    g: &mut Graph,
    (h_re, h_im): (&Tensor, &Tensor),
    v: Var,
    masks: &[UserMask],
    sigma_d_sq: f64,
) -> Var {
    let s = g.shape(v).to_vec();
    let (b, nc, k, nt) = (s[0], s[1], s[2], s[4]);
    let groups = b * nc;
    let v = g.reshape(v, &[groups, k, 2, nt]);
    let vr = g.slice_axis(v, 2, 0, 1);
    let vi = g.slice_axis(v, 2, 1, 1);
    let vr = g.reshape(vr, &[groups, k, nt]);
    let vi = g.reshape(vi, &[groups, k, nt]);
    let hr = g.constant(h_re.clone());
    let hi = g.constant(h_im.clone());
    // G[k, m] = h_k^T v_m
    let rr = g.bmm(hr, vr, true);
    let ii = g.bmm(hi, vi, true);
    let ri = g.bmm(hr, vi, true);
    let ir = g.bmm(hi, vr, true);
    let gr = g.sub(rr, ii);
    let gi = g.add(ri, ir);
    let gr2 = g.square(gr);
    let gi2 = g.square(gi);
    let power = g.add(gr2, gi2);
    let active = |gi: usize, u: usize| masks[gi / nc].is_active(u);
    let col = g.constant(Tensor::from_shape_fn(IxDyn(&[groups, k, k]), |ix| if active(ix[0], ix[2]) { 1.0 } else { 0.0 }));
    let eye = g.constant(Tensor::from_shape_fn(IxDyn(&[groups, k, k]), |ix| if ix[1] == ix[2] { 1.0 } else { 0.0 }));
    let power = g.mul(power, col);
    let total = g.sum_last(power);
    let diag = g.mul(power, eye);
    let signal = g.sum_last(diag);
    let interference = g.sub(total, signal);
    let denom = g.offset(interference, sigma_d_sq);
    let sinr = g.div(signal, denom);
    let rate = g.log2_1p(sinr);
    let row = g.constant(Tensor::from_shape_fn(IxDyn(&[groups, k]), |ix| if active(ix[0], ix[1]) { 1.0 } else { 0.0 }));
    let rate = g.mul(rate, row);
    let rate = g.reshape(rate, &[b, nc * k]);
    g.sum_last(rate)
}

/// `10 log10(|H - H_hat|^2 / |H|^2)`, floored at -300 dB.
pub fn nmse_db<S1, S2, D>(h: &ArrayBase<S1, D>, h_hat: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = Complex64>,
    S2: Data<Elem = Complex64>,
    D: Dimension,
{
    if h.shape() != h_hat.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", h.shape(), h_hat.shape())));
    }
    let reference: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if reference == 0.0 {
        return Err(Error::ZeroReference);
    }
    let err: f64 = h.iter().zip(h_hat.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
    if err == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (err / reference).log10()).max(NMSE_FLOOR_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}

/// Trainable scalars, total and per top-level module name.
pub fn count_parameters(store: &ParamStore) -> ParamReport {
    ParamReport { total: store.count(), by_module: store.count_by_module() }
}
