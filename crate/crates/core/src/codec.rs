//! UE-side encoder, latent power normalization, uplink feedback with MRC
//! detection, and QAM quantization of the latent.

use ndarray::{Array1, ArrayView2, IxDyn};
use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, Conv2d, Linear, ParamStore};
use crate::rng::complex_gaussian;

/// Complex latent of `Z` entries with `(1/Z) |s|^2 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub s: Vec<Complex64>,
}

impl LatentCode {
    pub fn z(&self) -> usize {
        self.s.len()
    }

    pub fn avg_power(&self) -> f64 {
        self.s.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.s.len() as f64
    }

    /// Real layout `[re_1..re_Z, im_1..im_Z]`.
    pub fn to_real(&self) -> Vec<f64> {
        self.s.iter().map(|v| v.re).chain(self.s.iter().map(|v| v.im)).collect()
    }

    pub fn from_real(v: &[f64]) -> Self {
        let z = v.len() / 2;
        Self { s: (0..z).map(|i| Complex64::new(v[i], v[z + i])).collect() }
    }
}

/// Latent after the uplink and MRC combining.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectedCode {
    pub s_hat: Vec<Complex64>,
}

impl DetectedCode {
    pub fn to_real(&self) -> Vec<f64> {
        self.s_hat.iter().map(|v| v.re).chain(self.s_hat.iter().map(|v| v.im)).collect()
    }
}

/// `s = v * sqrt(Z / |v|^2)` with `v` in the `[re, im]` layout.
pub fn power_normalize(v: &[f64]) -> Result<LatentCode> {
    let e: f64 = v.iter().map(|x| x * x).sum();
    if e == 0.0 {
        return Err(Error::DegenerateLatent);
    }
    let z = v.len() / 2;
    let c = (z as f64 / e).sqrt();
    let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
    Ok(LatentCode::from_real(&scaled))
}

/// Convolutional feature extraction followed by a fully-connected
/// compression to `2Z` outputs and latent power normalization.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub fc: Linear,
    pub input_shape: [usize; 3],
    pub z: usize,
}

impl Encoder {
    /// Input is `[N, h, w, c]`; `maps` feature maps in the first layer.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_shape: [usize; 3],
        z: usize,
        maps: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let [h, w, c] = input_shape;
        let conv1 = ConvBlock::new(store, &format!("{name}.conv1"), |s, n| Conv2d::same(s, n, c, maps, 3, rng), maps);
        let conv2 = ConvBlock::new(store, &format!("{name}.conv2"), |s, n| Conv2d::same(s, n, maps, 2, 3, rng), 2);
        let fc = Linear::new(store, &format!("{name}.fc"), h * w * 2, 2 * z, rng);
        Self { conv1, conv2, fc, input_shape, z }
    }

    /// `[N, h, w, c]` -> power-normalized `[N, 2Z]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Var {
        let shape = g.shape(y).to_vec();
        assert_eq!(&shape[1..], &self.input_shape, "encoder input shape");
        let n = shape[0];
        let x = self.conv1.forward(g, p, y);
        let x = self.conv2.forward(g, p, x);
        let x = g.reshape(x, &[n, self.input_shape[0] * self.input_shape[1] * 2]);
        let x = self.fc.forward(g, p, x);
        g.power_normalize(x, 2 * self.z, self.z as f64)
    }

    /// Encodes a single input `[h, w, c]`.
    pub fn encode(&self, store: &ParamStore, y: &Tensor) -> Result<LatentCode> {
        if y.shape() != self.input_shape {
            return Err(Error::ShapeMismatch(format!("encoder input {:?}, expected {:?}", y.shape(), self.input_shape)));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let [h, w, c] = self.input_shape;
        let x = g.constant(y.clone().into_shape_with_order(IxDyn(&[1, h, w, c])).expect("input reshape"));
        let s = self.forward(&mut g, &p, x);
        let v: Vec<f64> = g.value(s).iter().copied().collect();
        power_normalize(&v)
    }
}

/// Unit-norm MRC combiner `h / |h|`.
pub fn mrc_combiner(h: &[Complex64]) -> Array1<Complex64> {
    let n = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    h.iter().map(|v| v / n).collect()
}

/// Sends latent element `z` on uplink subcarrier `z` and combines with
/// `W_z = h_z / |h_z|`: `s_hat_z = W_z^H (h_z s_z + n_z)`.
pub fn uplink_feedback_pass(
    s: &LatentCode,
    h_ul_user: ArrayView2<Complex64>,
    sigma_u_sq: f64,
    rng: &mut impl Rng,
) -> Result<DetectedCode> {
    let (nc, nt) = h_ul_user.dim();
    if s.z() > nc {
        return Err(Error::FeedbackExceedsSubcarriers { z: s.z(), nc });
    }
    let s_hat = s
        .s
        .iter()
        .enumerate()
        .map(|(z, &sz)| {
            let h: Vec<Complex64> = h_ul_user.row(z).to_vec();
            let w = mrc_combiner(&h);
            (0..nt)
                .map(|a| {
                    let noise = if sigma_u_sq > 0.0 { complex_gaussian(rng, sigma_u_sq) } else { Complex64::new(0.0, 0.0) };
                    w[a].conj() * (h[a] * sz + noise)
                })
                .sum()
        })
        .collect();
    Ok(DetectedCode { s_hat })
}

/// Effective uplink for a batch of `N` latents in the graph: per-element
/// real gains `|h_z|` and post-combining noise, both `[N, 2Z]`.
#[derive(Clone, Debug)]
pub struct UplinkDraw {
    pub gain: Tensor,
    pub noise: Tensor,
}

impl UplinkDraw {
    /// `h_ul[i]` is user `i`'s uplink `[Nc, Nt]`.
    pub fn sample(h_ul: &[ArrayView2<Complex64>], z: usize, sigma_u_sq: f64, rng: &mut impl Rng) -> Result<Self> {
        let n = h_ul.len();
        let mut gain = Tensor::zeros(IxDyn(&[n, 2 * z]));
        let mut noise = Tensor::zeros(IxDyn(&[n, 2 * z]));
        for (i, h) in h_ul.iter().enumerate() {
            if z > h.nrows() {
                return Err(Error::FeedbackExceedsSubcarriers { z, nc: h.nrows() });
            }
            for zi in 0..z {
                let norm = h.row(zi).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
                gain[[i, zi]] = norm;
                gain[[i, z + zi]] = norm;
                let w = if sigma_u_sq > 0.0 { complex_gaussian(rng, sigma_u_sq) } else { Complex64::new(0.0, 0.0) };
                noise[[i, zi]] = w.re;
                noise[[i, z + zi]] = w.im;
            }
        }
        Ok(Self { gain, noise })
    }

    /// `s_hat = |h| s + n`, optionally divided by `|h|`.
    pub fn apply(&self, g: &mut Graph, s: Var, equalize: bool) -> Var {
        let gain = g.constant(self.gain.clone());
        let noise = g.constant(self.noise.clone());
        let y = g.mul(s, gain);
        let y = g.add(y, noise);
        if equalize {
            let inv = g.constant(self.gain.mapv(|v| if v > 0.0 { 1.0 / v } else { 0.0 }));
            g.mul(y, inv)
        } else {
            y
        }
    }
}

/// Points per axis of the unit-average-power square QAM with `bits` bits.
pub fn qam_levels(bits: u32) -> Result<Vec<f64>> {
    if bits == 0 || bits % 2 != 0 || bits > 16 {
        return Err(Error::UnsupportedModulation(bits));
    }
    let n = 1usize << (bits / 2);
    let order = (n * n) as f64;
    let d = (3.0 / (2.0 * (order - 1.0))).sqrt();
    Ok((0..n).map(|i| (2.0 * i as f64 - (n as f64 - 1.0)) * d).collect())
}

fn nearest_level(levels: &[f64], x: f64) -> f64 {
    // levels are uniformly spaced, so the nearest point is a rounded index
    let n = levels.len();
    let step = levels[1] - levels[0];
    let idx = ((x - levels[0]) / step).round().clamp(0.0, (n - 1) as f64) as usize;
    levels[idx]
}

/// Maps every entry to the nearest constellation point, without the final
/// renormalization.
pub fn qam_map(s: &LatentCode, bits: u32) -> Result<Vec<Complex64>> {
    let levels = qam_levels(bits)?;
    Ok(s.s.iter().map(|v| Complex64::new(nearest_level(&levels, v.re), nearest_level(&levels, v.im))).collect())
}

/// Nearest-point QAM quantization followed by latent renormalization.
pub fn qam_quantize(s: &LatentCode, bits: u32) -> Result<LatentCode> {
    let q = qam_map(s, bits)?;
    power_normalize(&LatentCode { s: q }.to_real())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn power_normalize_examples() {
        let s = power_normalize(&[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((s.s[0] - Complex64::new(2f64.sqrt(), 0.0)).norm() < 1e-15);
        assert_eq!(s.s[1], Complex64::new(0.0, 0.0));

        let v = vec![0.5f64.sqrt(); 6];
        let s = power_normalize(&v).unwrap();
        assert!(s.to_real().iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..20).map(|_| rng.random::<f64>() - 0.5).collect();
        let s = power_normalize(&v).unwrap();
        let recomputed = s.to_real().iter().map(|x| x * x).sum::<f64>() / 10.0;
        assert!((recomputed - 1.0).abs() < 1e-12);

        assert!(matches!(power_normalize(&[0.0; 4]), Err(Error::DegenerateLatent)));
    }

    #[test]
    fn encoder_output_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", [24, 6, 2], 32, 16, &mut rng);
        let y = crate::nn::gaussian(&mut rng, &[24, 6, 2], 1.0);
        let s = enc.encode(&store, &y).unwrap();
        assert_eq!(s.z(), 32);
        assert!((s.avg_power() - 1.0).abs() < 1e-6);
        assert_eq!(enc.encode(&store, &y).unwrap(), s);
        let bad = crate::nn::gaussian(&mut rng, &[24, 5, 2], 1.0);
        assert!(matches!(enc.encode(&store, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mrc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Array2::from_shape_vec((1, 2), vec![Complex64::new(3.0, 0.0), Complex64::new(4.0, 0.0)]).unwrap();
        let s = LatentCode { s: vec![Complex64::new(1.0, 0.0)] };
        let d = uplink_feedback_pass(&s, h.view(), 0.0, &mut rng).unwrap();
        assert!((d.s_hat[0] - Complex64::new(5.0, 0.0)).norm() < 1e-12);

        let h = Array2::from_shape_vec((1, 3), vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        let s = LatentCode { s: vec![Complex64::new(0.3, -0.7)] };
        let d = uplink_feedback_pass(&s, h.view(), 0.0, &mut rng).unwrap();
        assert!((d.s_hat[0] - s.s[0]).norm() < 1e-15);

        let s = LatentCode { s: vec![Complex64::new(1.0, 0.0); 3] };
        assert!(matches!(
            uplink_feedback_pass(&s, h.view(), 0.0, &mut rng),
            Err(Error::FeedbackExceedsSubcarriers { z: 3, nc: 1 })
        ));
    }

    #[test]
    fn combiner_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let h: Vec<Complex64> = (0..8).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
            let n: f64 = mrc_combiner(&h).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detected_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Array2::from_shape_fn((1, 4), |_| complex_gaussian(&mut rng, 1.0));
        let gain = h.row(0).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let s = LatentCode { s: vec![Complex64::new(0.6, 0.8)] };
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let d = uplink_feedback_pass(&s, h.view(), 0.2, &mut rng).unwrap();
            acc += (d.s_hat[0] - s.s[0] * gain).norm_sqr();
        }
        let var = acc / n as f64;
        assert!((var - 0.2).abs() < 0.2 * 0.03, "{var}");
    }

    #[test]
    fn graph_uplink_matches_plain_at_zero_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Array2::from_shape_fn((6, 3), |_| complex_gaussian(&mut rng, 1.0));
        let s = power_normalize(&(0..8).map(|i| i as f64 - 3.5).collect::<Vec<_>>()).unwrap();
        let plain = uplink_feedback_pass(&s, h.view(), 0.0, &mut rng).unwrap();
        let draw = UplinkDraw::sample(&[h.view()], 4, 0.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let sv = g.constant(Tensor::from_shape_vec(IxDyn(&[1, 8]), s.to_real()).unwrap());
        let out = draw.apply(&mut g, sv, false);
        let got: Vec<f64> = g.value(out).iter().copied().collect();
        assert!(got.iter().zip(plain.to_real()).all(|(a, b)| (a - b).abs() < 1e-12));
        let eq = draw.apply(&mut g, sv, true);
        assert!(g.value(eq).iter().zip(s.to_real()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn qam_examples() {
        let s = LatentCode { s: vec![Complex64::new(0.9, 0.8)] };
        let q = qam_map(&s, 2).unwrap();
        let h = 0.5f64.sqrt();
        assert!((q[0] - Complex64::new(h, h)).norm() < 1e-15);

        let levels = qam_levels(4).unwrap();
        let on_grid = LatentCode { s: vec![Complex64::new(levels[1], levels[3]), Complex64::new(levels[0], levels[2])] };
        assert_eq!(qam_map(&on_grid, 4).unwrap(), on_grid.s);

        assert!(matches!(qam_quantize(&s, 3), Err(Error::UnsupportedModulation(3))));
        assert!((qam_quantize(&s, 6).unwrap().avg_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constellations_have_unit_average_power() {
        for bits in [2, 4, 6, 8, 10] {
            let l = qam_levels(bits).unwrap();
            let mut p = 0.0;
            for a in &l {
                for b in &l {
                    p += a * a + b * b;
                }
            }
            p /= (l.len() * l.len()) as f64;
            assert!((p - 1.0).abs() < 1e-12, "bits {bits}: {p}");
        }
    }

    /// Exhaustive search over every constellation point.
    fn brute_nearest(levels: &[f64], v: Complex64) -> Complex64 {
        let mut best = Complex64::new(f64::NAN, f64::NAN);
        let mut best_d = f64::INFINITY;
        for &a in levels {
            for &b in levels {
                let p = Complex64::new(a, b);
                let d = (p - v).norm_sqr();
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
        }
        best
    }

    #[test]
    fn quantizer_matches_exhaustive_search_and_finer_is_better() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw: Vec<f64> = (0..400).map(|_| crate::rng::standard_normal(&mut rng)).collect();
        let s = power_normalize(&raw).unwrap();
        let mut mse = Vec::new();
        for bits in [2, 10] {
            let levels = qam_levels(bits).unwrap();
            let q = qam_map(&s, bits).unwrap();
            for (v, qv) in s.s.iter().zip(&q) {
                assert!((brute_nearest(&levels, *v) - qv).norm() < 1e-12);
            }
            mse.push(s.s.iter().zip(&q).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / s.z() as f64);
        }
        assert!(mse[1] < mse[0], "{mse:?}");
    }
}
