//! System configuration and the end-to-end network (pilots, UE encoder,
//! uplink, BS precoder).

use ndarray::{Array3, ArrayView2, Axis, IxDyn};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::channel::ChannelRealization;
use crate::codec::{power_normalize, qam_quantize, Encoder, LatentCode, UplinkDraw};
use crate::error::{Error, Result};
use crate::metrics::{channel_tensors, spectral_efficiency_graph, SnrConfig};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::pilot::{dft_pilotbook, pilot_noise, pilot_pass_graph, pilot_rows, PilotBook, PilotParam};
use crate::precoder::{precoding_sets, BsNet, MaskMode, PrecoderConfig, PrecodingSet, UserMask};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotKind {
    Learned,
    Dft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub nc: usize,
    pub nt: usize,
    /// Pilot subcarrier spacing `g`.
    pub spacing: usize,
    pub l: usize,
    pub z: usize,
    pub k_max: usize,
    pub power: f64,
    pub embed: usize,
    pub heads: usize,
    pub res_blocks: usize,
    pub res_maps: usize,
    pub enc_maps: usize,
    pub ce_maps: usize,
    pub upsample_stride: usize,
    pub mask_mode: MaskMode,
    pub equalize_uplink: bool,
    pub pilots: PilotKind,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            nc: 24,
            nt: 8,
            spacing: 4,
            l: 4,
            z: 8,
            k_max: 2,
            power: 1.0,
            embed: 64,
            heads: 2,
            res_blocks: 2,
            res_maps: 16,
            enc_maps: 16,
            ce_maps: 16,
            upsample_stride: 2,
            mask_mode: MaskMode::Additive,
            equalize_uplink: false,
            pilots: PilotKind::Learned,
        }
    }

    pub fn full() -> Self {
        Self { nc: 96, nt: 32, l: 6, z: 32, k_max: 6, embed: 256, heads: 4, ..Self::desk() }
    }

    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            nc: 4,
            nt: 2,
            spacing: 2,
            l: 2,
            z: 2,
            k_max: 2,
            embed: 8,
            heads: 2,
            res_blocks: 1,
            res_maps: 3,
            enc_maps: 3,
            ce_maps: 3,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    /// Number of pilot subcarriers `floor(Nc / g)`.
    pub fn m(&self) -> usize {
        self.nc / self.spacing
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nc", self.nc),
            ("nt", self.nt),
            ("spacing", self.spacing),
            ("l", self.l),
            ("z", self.z),
            ("k_max", self.k_max),
            ("embed", self.embed),
            ("heads", self.heads),
            ("res_maps", self.res_maps),
            ("enc_maps", self.enc_maps),
            ("ce_maps", self.ce_maps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.m() == 0 {
            return Err(Error::Config(format!("spacing {} leaves no pilot subcarrier in Nc = {}", self.spacing, self.nc)));
        }
        if self.z > self.nc {
            return Err(Error::FeedbackExceedsSubcarriers { z: self.z, nc: self.nc });
        }
        if !(self.power > 0.0) {
            return Err(Error::Config("power must be positive".into()));
        }
        crate::precoder::upsampling_layers(self.m(), self.nc, self.upsample_stride)?;
        Ok(())
    }

    pub fn precoder(&self) -> PrecoderConfig {
        PrecoderConfig {
            nt: self.nt,
            nc: self.nc,
            m: self.m(),
            z: self.z,
            k_max: self.k_max,
            embed: self.embed,
            heads: self.heads,
            res_blocks: self.res_blocks,
            res_maps: self.res_maps,
            upsample_stride: self.upsample_stride,
            mask_mode: self.mask_mode,
            power: self.power,
        }
    }
}

/// One channel realization in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[K_max, Nc, Nt]`
    pub h_dl: Array3<Complex64>,
    pub h_ul: Array3<Complex64>,
    pub seed: u64,
}

impl Sample {
    pub fn user_dl(&self, k: usize) -> ArrayView2<'_, Complex64> {
        self.h_dl.index_axis(Axis(0), k)
    }

    pub fn user_ul(&self, k: usize) -> ArrayView2<'_, Complex64> {
        self.h_ul.index_axis(Axis(0), k)
    }
}

impl From<&ChannelRealization> for Sample {
    fn from(r: &ChannelRealization) -> Self {
        let up = |c: &num_complex::Complex32| Complex64::new(c.re as f64, c.im as f64);
        Self { h_dl: r.h_dl.map(up), h_ul: r.h_ul.map(up), seed: r.seed }
    }
}

/// Everything random in one forward pass: pilot noise, uplink noise.
/// Drawn from a single generator in a fixed order.
pub struct Draws {
    pub pilot: (Tensor, Tensor),
    pub uplink: UplinkDraw,
}

pub fn downlink_views<'a>(batch: &[&'a Sample]) -> Vec<ArrayView2<'a, Complex64>> {
    batch.iter().flat_map(|s| (0..s.h_dl.dim().0).map(move |k| s.user_dl(k))).collect()
}

pub fn uplink_views<'a>(batch: &[&'a Sample]) -> Vec<ArrayView2<'a, Complex64>> {
    batch.iter().flat_map(|s| (0..s.h_ul.dim().0).map(move |k| s.user_ul(k))).collect()
}

/// Pilots, encoder and BS network trained end to end.
#[derive(Clone, Debug)]
pub struct JefpNet {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pilots: PilotParam,
    pub encoder: Encoder,
    pub bs: BsNet,
}

/// Output of a forward pass for evaluation.
pub struct Forward {
    /// Per-sample masked sum-rate over subcarriers.
    pub rates: Vec<f64>,
    pub precoders: Vec<PrecodingSet>,
}

impl JefpNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed, 0x1417);
        let mut store = ParamStore::new();
        let m = cfg.m();
        let pilots = PilotParam::new(&mut store, "pilots", m, cfg.nt, cfg.l, &mut rng);
        let encoder = Encoder::new(&mut store, "encoder", [m, cfg.l, 2], cfg.z, cfg.enc_maps, &mut rng);
        let bs = BsNet::new(&mut store, "bs", &cfg.precoder(), &mut rng)?;
        if cfg.pilots == PilotKind::Dft {
            pilots.set(&mut store, &dft_pilotbook(m, cfg.nt, cfg.l, cfg.spacing));
        }
        Ok(Self { cfg: cfg.clone(), store, pilots, encoder, bs })
    }

    /// Parameters excluded from optimization.
    pub fn frozen(&self) -> Vec<ParamId> {
        match self.cfg.pilots {
            PilotKind::Dft => vec![self.pilots.raw],
            PilotKind::Learned => Vec::new(),
        }
    }

    pub fn pilot_book(&self) -> Result<PilotBook> {
        self.pilots.book(&self.store, self.cfg.spacing)
    }

    /// Draws pilot and uplink noise for a batch.
    pub fn draw(&self, batch: &[&Sample], snr: &SnrConfig, rng: &mut impl Rng) -> Result<Draws> {
        let n = batch.len() * self.cfg.k_max;
        let pilot = pilot_noise(rng, self.cfg.m(), n, self.cfg.l, snr.sigma_ce_sq());
        let uplink = UplinkDraw::sample(&uplink_views(batch), self.cfg.z, snr.sigma_u_sq(), rng)?;
        Ok(Draws { pilot, uplink })
    }

    /// Latents `[B K, 2Z]` from the received pilots.
    pub fn encode(&self, g: &mut Graph, p: &Bound, batch: &[&Sample], draws: &Draws) -> Var {
        let book = self.pilots.project(g, p.var(self.pilots.raw));
        let indices: Vec<usize> = (0..self.cfg.m()).map(|i| i * self.cfg.spacing).collect();
        let (hr, hi) = pilot_rows(&downlink_views(batch), &indices);
        let hr = g.constant(hr);
        let hi = g.constant(hi);
        let y = pilot_pass_graph(g, hr, hi, book, Some(draws.pilot.clone()));
        self.encoder.forward(g, p, y)
    }

    /// Per-sample sum-rate `[B]` through the whole pipeline. With `qam`,
    /// latents are quantized (outside the graph) before the uplink.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Sample],
        masks: &[UserMask],
        snr: &SnrConfig,
        draws: &Draws,
        qam: Option<u32>,
    ) -> Result<(Var, Var)> {
        let mut s = self.encode(g, p, batch, draws);
        if let Some(bits) = qam {
            s = g.constant(quantize_rows(g.value(s), bits)?);
        }
        let s_hat = draws.uplink.apply(g, s, self.cfg.equalize_uplink);
        let v = self.bs.forward(g, p, s_hat, masks, snr.sigma_d_sq())?;
        let refs: Vec<&Array3<Complex64>> = batch.iter().map(|s| &s.h_dl).collect();
        let (hr, hi) = channel_tensors(&refs);
        let r = spectral_efficiency_graph(g, (&hr, &hi), v, masks, snr.sigma_d_sq());
        Ok((r, v))
    }

    /// Negative mean per-subcarrier sum-rate.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Sample],
        masks: &[UserMask],
        snr: &SnrConfig,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let draws = self.draw(batch, snr, rng)?;
        let (r, _) = self.forward(g, p, batch, masks, snr, &draws, None)?;
        let mean = g.mean_all(r);
        Ok(g.scale(mean, -1.0 / self.cfg.nc as f64))
    }

    pub fn evaluate(
        &self,
        batch: &[&Sample],
        masks: &[UserMask],
        snr: &SnrConfig,
        rng: &mut impl Rng,
        qam: Option<u32>,
    ) -> Result<Forward> {
        let draws = self.draw(batch, snr, rng)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let (r, v) = self.forward(&mut g, &p, batch, masks, snr, &draws, qam)?;
        Ok(Forward { rates: g.value(r).iter().copied().collect(), precoders: precoding_sets(g.value(v)) })
    }
}

/// Quantizes every row of a `[N, 2Z]` latent tensor.
pub fn quantize_rows(s: &Tensor, bits: u32) -> Result<Tensor> {
    let shape = s.shape().to_vec();
    let mut out = Vec::with_capacity(s.len());
    for row in s.rows() {
        let code: LatentCode = power_normalize(row.as_slice().expect("contiguous latent"))?;
        out.extend(qam_quantize(&code, bits)?.to_real());
    }
    Ok(Tensor::from_shape_vec(IxDyn(&shape), out).expect("latent shape"))
}
