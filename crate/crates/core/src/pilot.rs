//! Pilot book, pilot power projection and the downlink pilot pass.
//!
//! Pilots occupy `M = floor(Nc / g)` subcarriers at indices `m * g` over
//! `L` OFDM symbols and are shared by every user. Each OFDM symbol carries
//! average per-subcarrier pilot power one.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, IxDyn};
use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, ParamId, ParamStore};
use crate::rng::complex_gaussian;

/// Pilot subcarrier indices `m * g` for `m < floor(nc / g)`.
pub fn pilot_indices(nc: usize, spacing: usize) -> Vec<usize> {
    (0..nc / spacing).map(|m| m * spacing).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotBook {
    /// `[M, Nt, L]`
    pub symbols: Array3<Complex64>,
    pub indices: Vec<usize>,
    pub spacing: usize,
}

impl PilotBook {
    pub fn m(&self) -> usize {
        self.symbols.shape()[0]
    }

    pub fn nt(&self) -> usize {
        self.symbols.shape()[1]
    }

    pub fn l(&self) -> usize {
        self.symbols.shape()[2]
    }

    /// `(1/M) * sum_m |p_m^(l)|^2` for every symbol `l`.
    pub fn symbol_powers(&self) -> Vec<f64> {
        symbol_powers(&self.symbols)
    }
}

fn symbol_powers(p: &Array3<Complex64>) -> Vec<f64> {
    let (m, _, l) = p.dim();
    (0..l)
        .map(|li| p.slice(ndarray::s![.., .., li]).iter().map(|v| v.norm_sqr()).sum::<f64>() / m as f64)
        .collect()
}

/// Scales every OFDM-symbol slice of `raw` (`[M, Nt, L]`) to unit average
/// per-subcarrier power. Pilot indices default to spacing `spacing`.
pub fn project_pilot_power(raw: &Array3<Complex64>, spacing: usize) -> Result<PilotBook> {
    let powers = symbol_powers(raw);
    let mut symbols = raw.clone();
    for (l, p) in powers.iter().enumerate() {
        if *p == 0.0 {
            return Err(Error::DegeneratePilot(l));
        }
        let scale = 1.0 / p.sqrt();
        symbols.slice_mut(ndarray::s![.., .., l]).mapv_inplace(|v| v * scale);
    }
    let m = raw.shape()[0];
    Ok(PilotBook { symbols, indices: (0..m).map(|i| i * spacing).collect(), spacing })
}

/// Fixed orthogonal pilots: symbol `l` transmits DFT column `l mod Nt` on
/// every pilot subcarrier.
pub fn dft_pilotbook(m: usize, nt: usize, l: usize, spacing: usize) -> PilotBook {
    let raw = Array3::from_shape_fn((m, nt, l), |(_, a, li)| {
        Complex64::from_polar(1.0, -2.0 * PI * (a * (li % nt)) as f64 / nt as f64)
    });
    project_pilot_power(&raw, spacing).expect("DFT columns are never zero")
}

/// Received pilots `[M, L]` of one user: `Y[m, l] = h_{M_m}^T p_m^(l) + n`.
pub fn downlink_pilot_pass(
    h_dl_user: ArrayView2<Complex64>,
    pilots: &PilotBook,
    sigma_ce_sq: f64,
    rng: &mut impl Rng,
) -> Array2<Complex64> {
    let (m, nt, l) = pilots.symbols.dim();
    let mut y = Array2::zeros((m, l));
    for mi in 0..m {
        let row = h_dl_user.row(pilots.indices[mi]);
        for li in 0..l {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..nt {
                acc += row[a] * pilots.symbols[[mi, a, li]];
            }
            y[[mi, li]] = acc;
        }
    }
    if sigma_ce_sq > 0.0 {
        y.mapv_inplace(|v| v + complex_gaussian(rng, sigma_ce_sq));
    }
    y
}

/// Minimum-norm least-squares estimate `[M, Nt]` of the pilot-subcarrier
/// channel rows from `y` (`[M, L]`).
pub fn ls_oracle_estimate(y: ArrayView2<Complex64>, pilots: &PilotBook) -> Array2<Complex64> {
    let (m, nt, l) = pilots.symbols.dim();
    let mut h = Array2::zeros((m, nt));
    for mi in 0..m {
        // h^T P = y  <=>  P^T h = y^T
        let pt = DMatrix::from_fn(l, nt, |li, a| pilots.symbols[[mi, a, li]]);
        let rhs = DMatrix::from_fn(l, 1, |li, _| y[[mi, li]]);
        let pinv = pt.pseudo_inverse(1e-12).expect("pseudo-inverse");
        let sol = pinv * rhs;
        for a in 0..nt {
            h[[mi, a]] = sol[(a, 0)];
        }
    }
    h
}

/// Trainable pilots inside a network parameter store. The raw parameter
/// has layout `[L, M, Nt, 2]` (real, imaginary) and is projected onto the
/// power constraint on every forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PilotParam {
    pub raw: ParamId,
    pub m: usize,
    pub nt: usize,
    pub l: usize,
}

impl PilotParam {
    pub fn new(store: &mut ParamStore, name: &str, m: usize, nt: usize, l: usize, rng: &mut impl Rng) -> Self {
        let raw = store.add(format!("{name}.raw"), gaussian(rng, &[l, m, nt, 2], std::f64::consts::FRAC_1_SQRT_2));
        Self { raw, m, nt, l }
    }

    /// Overwrites the raw parameter with a fixed pilot book.
    pub fn set(&self, store: &mut ParamStore, book: &PilotBook) {
        let t = store.get_mut(self.raw);
        for (ix, v) in t.indexed_iter_mut() {
            let s = book.symbols[[ix[1], ix[2], ix[0]]];
            *v = if ix[3] == 0 { s.re } else { s.im };
        }
    }

    /// Current projected pilot book.
    pub fn book(&self, store: &ParamStore, spacing: usize) -> Result<PilotBook> {
        let t = store.get(self.raw);
        let raw = Array3::from_shape_fn((self.m, self.nt, self.l), |(m, a, l)| {
            Complex64::new(t[[l, m, a, 0]], t[[l, m, a, 1]])
        });
        project_pilot_power(&raw, spacing)
    }

    /// Projected pilots as `(re, im)`, each `[M, Nt, L]`.
    pub fn project(&self, g: &mut Graph, raw: Var) -> (Var, Var) {
        let group = self.m * self.nt * 2;
        let p = g.power_normalize(raw, group, self.m as f64);
        let p = g.permute(p, &[3, 1, 2, 0]);
        let re = g.slice_axis(p, 0, 0, 1);
        let im = g.slice_axis(p, 0, 1, 1);
        let re = g.reshape(re, &[self.m, self.nt, self.l]);
        let im = g.reshape(im, &[self.m, self.nt, self.l]);
        (re, im)
    }
}

/// Channel rows at the pilot subcarriers grouped by subcarrier:
/// `(re, im)`, each `[M, N, Nt]` for `N` users.
pub fn pilot_rows(h_dl: &[ArrayView2<Complex64>], indices: &[usize]) -> (Tensor, Tensor) {
    let n = h_dl.len();
    let nt = h_dl.first().map(|h| h.ncols()).unwrap_or(0);
    let m = indices.len();
    let re = Tensor::from_shape_fn(IxDyn(&[m, n, nt]), |ix| h_dl[ix[1]][[indices[ix[0]], ix[2]]].re);
    let im = Tensor::from_shape_fn(IxDyn(&[m, n, nt]), |ix| h_dl[ix[1]][[indices[ix[0]], ix[2]]].im);
    (re, im)
}

/// Pilot pass for `N` users in real/imaginary form:
/// `Re(Y) = Re(h)Re(P) - Im(h)Im(P)`, `Im(Y) = Re(h)Im(P) + Im(h)Re(P)`,
/// plus the supplied noise. Returns the network input `[N, M, L, 2]`.
pub fn pilot_pass_graph(
    g: &mut Graph,
    h_re: Var,
    h_im: Var,
    (p_re, p_im): (Var, Var),
    noise: Option<(Tensor, Tensor)>,
) -> Var {
    let rr = g.bmm(h_re, p_re, false);
    let ii = g.bmm(h_im, p_im, false);
    let ri = g.bmm(h_re, p_im, false);
    let ir = g.bmm(h_im, p_re, false);
    let mut y_re = g.sub(rr, ii);
    let mut y_im = g.add(ri, ir);
    if let Some((nr, ni)) = noise {
        let nr = g.constant(nr);
        let ni = g.constant(ni);
        y_re = g.add(y_re, nr);
        y_im = g.add(y_im, ni);
    }
    let s = g.shape(y_re).to_vec();
    let (m, n, l) = (s[0], s[1], s[2]);
    let y_re = g.reshape(y_re, &[m, n, l, 1]);
    let y_im = g.reshape(y_im, &[m, n, l, 1]);
    let y = g.concat(3, &[y_re, y_im]);
    g.permute(y, &[1, 0, 2, 3])
}

/// Noise tensors `[M, N, L]` (real and imaginary parts) of variance
/// `sigma_sq / 2` each.
pub fn pilot_noise(rng: &mut impl Rng, m: usize, n: usize, l: usize, sigma_sq: f64) -> (Tensor, Tensor) {
    let mut re = Tensor::zeros(IxDyn(&[m, n, l]));
    let mut im = Tensor::zeros(IxDyn(&[m, n, l]));
    for (r, i) in re.iter_mut().zip(im.iter_mut()) {
        let z = complex_gaussian(rng, sigma_sq);
        *r = z.re;
        *i = z.im;
    }
    (re, im)
}
