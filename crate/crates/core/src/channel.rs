//! Clustered Rician MIMO-OFDM channel generator.
//!
//! Every user sees `n_clusters` scattering clusters with an exponential
//! power-delay profile plus a line-of-sight path. The base station is a
//! uniform linear array with half-wavelength element spacing at the
//! downlink carrier. Uplink and downlink of a user share the cluster
//! geometry (delays, powers, departure angles) but draw per-cluster phases
//! independently, which models the weak reciprocity of FDD links.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::{Complex32, Complex64};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// User mean departure angles are drawn uniformly within +/- this sector.
const SECTOR_HALF_WIDTH_RAD: f64 = PI / 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_clusters: usize,
    pub rician_k: f64,
    pub delay_spread_s: f64,
    pub angle_spread_deg: f64,
    pub carrier_dl_hz: f64,
    pub carrier_ul_hz: f64,
    pub bandwidth_hz: f64,
    pub n_subcarriers: usize,
    pub n_tx_antennas: usize,
    pub k_max: usize,
}

impl ScenarioConfig {
    /// Macro-cell-like preset: weak line of sight, large delay and angle
    /// spread.
    pub fn uma_like(n_subcarriers: usize, n_tx_antennas: usize, k_max: usize) -> Self {
        Self {
            name: "uma-like".into(),
            n_clusters: 17,
            rician_k: 1.0,
            delay_spread_s: 250e-9,
            angle_spread_deg: 25.0,
            carrier_dl_hz: 1.9e9,
            carrier_ul_hz: 2.1e9,
            // keeps the full-scale subcarrier spacing of 10 MHz / 96
            bandwidth_hz: 1e7 * n_subcarriers as f64 / 96.0,
            n_subcarriers,
            n_tx_antennas,
            k_max,
        }
    }

    /// Micro-cell-like preset: stronger line of sight, smaller spreads.
    pub fn umi_like(n_subcarriers: usize, n_tx_antennas: usize, k_max: usize) -> Self {
        Self {
            name: "umi-like".into(),
            rician_k: 3.0,
            delay_spread_s: 100e-9,
            angle_spread_deg: 15.0,
            ..Self::uma_like(n_subcarriers, n_tx_antennas, k_max)
        }
    }

    pub fn preset(name: &str, n_subcarriers: usize, n_tx_antennas: usize, k_max: usize) -> Option<Self> {
        match name {
            "uma-like" => Some(Self::uma_like(n_subcarriers, n_tx_antennas, k_max)),
            "umi-like" => Some(Self::umi_like(n_subcarriers, n_tx_antennas, k_max)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScenario(m.to_string()));
        if self.n_clusters < 1 {
            return bad("n_clusters must be >= 1");
        }
        if !(self.rician_k >= 0.0) {
            return bad("rician_k must be >= 0");
        }
        if self.n_subcarriers < 1 || self.n_tx_antennas < 1 || self.k_max < 1 {
            return bad("Nc, Nt and K_max must be >= 1");
        }
        if self.carrier_dl_hz == self.carrier_ul_hz {
            return bad("uplink and downlink carriers must differ");
        }
        if !(self.delay_spread_s >= 0.0) || !(self.bandwidth_hz > 0.0) || !(self.angle_spread_deg >= 0.0) {
            return bad("delay spread, angle spread and bandwidth must be non-negative");
        }
        Ok(())
    }

    pub fn array(&self) -> Ula {
        Ula {
            n_antennas: self.n_tx_antennas,
            spacing_m: SPEED_OF_LIGHT / self.carrier_dl_hz / 2.0,
        }
    }

    pub fn grid(&self) -> OfdmGrid {
        OfdmGrid { n_subcarriers: self.n_subcarriers, bandwidth_hz: self.bandwidth_hz }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ula {
    pub n_antennas: usize,
    pub spacing_m: f64,
}

impl Ula {
    /// Array response towards departure angle `theta` at `carrier_hz`.
    pub fn steer(&self, theta: f64, antenna: usize, carrier_hz: f64) -> Complex64 {
        let phase = 2.0 * PI * carrier_hz * self.spacing_m * antenna as f64 * theta.sin() / SPEED_OF_LIGHT;
        Complex64::from_polar(1.0, phase)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OfdmGrid {
    pub n_subcarriers: usize,
    pub bandwidth_hz: f64,
}

impl OfdmGrid {
    /// Baseband frequency of subcarrier `n`.
    pub fn frequency(&self, n: usize) -> f64 {
        n as f64 * self.bandwidth_hz / self.n_subcarriers as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    Downlink,
    Uplink,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet {
    /// Ascending; the first entry is the line-of-sight delay.
    pub delays_s: Vec<f64>,
    /// Non-line-of-sight cluster powers, summing to one.
    pub powers: Vec<f64>,
    pub aods_rad: Vec<f64>,
    pub los_aod_rad: f64,
    pub phases_dl: Vec<f64>,
    pub phases_ul: Vec<f64>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }

    pub fn los_delay(&self) -> f64 {
        self.delays_s[0]
    }

    fn phases(&self, link: Link) -> &[f64] {
        match link {
            Link::Downlink => &self.phases_dl,
            Link::Uplink => &self.phases_ul,
        }
    }
}

/// Draws the cluster geometry and the per-link phases of one user.
pub fn sample_clusters(scenario: &ScenarioConfig, user_index: usize, seed: u64) -> ClusterSet {
    let mut r = rng::seeded(seed, 0x1000 + user_index as u64);
    let n = scenario.n_clusters;
    let ds = scenario.delay_spread_s;
    let mut delays: Vec<f64> = (0..n).map(|_| -ds * (1.0 - r.random::<f64>()).ln()).collect();
    delays.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let first = delays[0];
    for d in &mut delays {
        *d -= first;
    }
    let mut powers: Vec<f64> = delays
        .iter()
        .map(|&d| if ds > 0.0 { (-d / ds).exp() } else { 1.0 })
        .collect();
    let total: f64 = powers.iter().sum();
    for p in &mut powers {
        *p /= total;
    }
    let mean = r.random_range(-SECTOR_HALF_WIDTH_RAD..=SECTOR_HALF_WIDTH_RAD);
    let half_spread = scenario.angle_spread_deg.to_radians() / 2.0;
    let aods: Vec<f64> = (0..n)
        .map(|_| if half_spread > 0.0 { mean + r.random_range(-half_spread..half_spread) } else { mean })
        .collect();
    let phases_dl = (0..n).map(|_| r.random_range(0.0..2.0 * PI)).collect();
    let phases_ul = (0..n).map(|_| r.random_range(0.0..2.0 * PI)).collect();
    ClusterSet { delays_s: delays, powers, aods_rad: aods, los_aod_rad: mean, phases_dl, phases_ul }
}

/// Frequency response `[Nc, Nt]` of one user on one link.
pub fn frequency_response(
    clusters: &ClusterSet,
    link: Link,
    carrier_hz: f64,
    grid: &OfdmGrid,
    array: &Ula,
    rician_k: f64,
) -> Array2<Complex64> {
    let nlos_amp = (1.0 / (rician_k + 1.0)).sqrt();
    let los_amp = (rician_k / (rician_k + 1.0)).sqrt();
    let phases = clusters.phases(link);
    Array2::from_shape_fn((grid.n_subcarriers, array.n_antennas), |(n, a)| {
        let f = grid.frequency(n);
        let mut nlos = Complex64::new(0.0, 0.0);
        for c in 0..clusters.len() {
            let path = Complex64::from_polar(clusters.powers[c].sqrt(), phases[c] - 2.0 * PI * f * clusters.delays_s[c]);
            nlos += path * array.steer(clusters.aods_rad[c], a, carrier_hz);
        }
        let los = array.steer(clusters.los_aod_rad, a, carrier_hz)
            * Complex64::from_polar(1.0, -2.0 * PI * f * clusters.los_delay());
        nlos * nlos_amp + los * los_amp
    })
}

/// Scales `h` so that the mean squared entry magnitude is one.
pub fn normalize_unit_power(h: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let energy: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    if energy == 0.0 || !energy.is_finite() {
        return Err(Error::DegenerateChannel);
    }
    let scale = (h.len() as f64 / energy).sqrt();
    Ok(h.mapv(|v| v * scale))
}

/// Downlink and uplink channels of every user slot for one sample, stored
/// at single precision (the dataset file precision).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    /// `[K_max, Nc, Nt]`
    pub h_dl: Array3<Complex32>,
    /// `[K_max, Nc, Nt]`
    pub h_ul: Array3<Complex32>,
    pub seed: u64,
    pub scenario: String,
}

impl ChannelRealization {
    pub fn k_max(&self) -> usize {
        self.h_dl.shape()[0]
    }

    pub fn user_dl(&self, k: usize) -> Array2<Complex64> {
        self.h_dl.index_axis(ndarray::Axis(0), k).mapv(|v| Complex64::new(v.re as f64, v.im as f64))
    }

    pub fn user_ul(&self, k: usize) -> Array2<Complex64> {
        self.h_ul.index_axis(ndarray::Axis(0), k).mapv(|v| Complex64::new(v.re as f64, v.im as f64))
    }
}

pub fn generate_realization(scenario: &ScenarioConfig, seed: u64) -> Result<ChannelRealization> {
    scenario.validate()?;
    let (k, nc, nt) = (scenario.k_max, scenario.n_subcarriers, scenario.n_tx_antennas);
    let grid = scenario.grid();
    let array = scenario.array();
    let mut h_dl = Array3::zeros((k, nc, nt));
    let mut h_ul = Array3::zeros((k, nc, nt));
    for user in 0..k {
        let clusters = sample_clusters(scenario, user, seed);
        for (link, carrier, out) in [
            (Link::Downlink, scenario.carrier_dl_hz, &mut h_dl),
            (Link::Uplink, scenario.carrier_ul_hz, &mut h_ul),
        ] {
            let h = normalize_unit_power(&frequency_response(&clusters, link, carrier, &grid, &array, scenario.rician_k))?;
            out.index_axis_mut(ndarray::Axis(0), user)
                .assign(&h.mapv(|v| Complex32::new(v.re as f32, v.im as f32)));
        }
    }
    Ok(ChannelRealization { h_dl, h_ul, seed, scenario: scenario.name.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig::uma_like(24, 8, 2)
    }

    #[test]
    fn single_cluster_has_unit_power() {
        let s = ScenarioConfig { n_clusters: 1, ..small() };
        let c = sample_clusters(&s, 0, 9);
        assert_eq!(c.powers, vec![1.0]);
        assert_eq!(c.los_delay(), c.delays_s[0]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = small();
        assert_eq!(sample_clusters(&s, 1, 42), sample_clusters(&s, 1, 42));
        assert_ne!(sample_clusters(&s, 0, 42), sample_clusters(&s, 1, 42));
        assert_eq!(generate_realization(&s, 3).unwrap(), generate_realization(&s, 3).unwrap());
    }

    #[test]
    fn cluster_powers_sum_to_one_over_many_draws() {
        let s = small();
        for seed in 0..10_000u64 {
            let c = sample_clusters(&s, (seed % 3) as usize, seed);
            let total: f64 = c.powers.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "seed {seed}: {total}");
            assert!(c.delays_s.iter().all(|&d| d >= 0.0));
            assert!(c.delays_s.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn huge_k_factor_leaves_pure_los() {
        let s = small();
        let c = sample_clusters(&s, 0, 5);
        let h = frequency_response(&c, Link::Downlink, s.carrier_dl_hz, &s.grid(), &s.array(), 1e12);
        let array = s.array();
        for ((n, a), v) in h.indexed_iter() {
            let los = array.steer(c.los_aod_rad, a, s.carrier_dl_hz)
                * Complex64::from_polar(1.0, -2.0 * PI * s.grid().frequency(n) * c.los_delay());
            assert!((v - los).norm() / los.norm() < 1e-5);
        }
    }

    #[test]
    fn zero_k_factor_has_no_los() {
        let s = ScenarioConfig { n_clusters: 1, ..small() };
        let mut c = sample_clusters(&s, 0, 5);
        c.powers = vec![1.0];
        let h = frequency_response(&c, Link::Downlink, s.carrier_dl_hz, &s.grid(), &s.array(), 0.0);
        // a single NLOS cluster at the LOS angle with zero delay: |H| = 1 everywhere
        for v in h.iter() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_delay_single_antenna_is_flat() {
        let s = ScenarioConfig { n_clusters: 1, n_tx_antennas: 1, ..small() };
        let c = sample_clusters(&s, 0, 11);
        let h = frequency_response(&c, Link::Downlink, s.carrier_dl_hz, &s.grid(), &s.array(), 2.0);
        let m0 = h[[0, 0]].norm();
        assert!(h.iter().all(|v| (v.norm() - m0).abs() < 1e-12));
    }

    #[test]
    fn two_cluster_ripple_matches_direct_sum() {
        let s = ScenarioConfig { n_clusters: 2, n_tx_antennas: 1, ..small() };
        let nc = s.n_subcarriers;
        let c = ClusterSet {
            delays_s: vec![0.0, 1.0 / s.bandwidth_hz],
            powers: vec![0.5, 0.5],
            aods_rad: vec![0.3, -0.2],
            los_aod_rad: 0.0,
            phases_dl: vec![0.4, 1.1],
            phases_ul: vec![0.0, 0.0],
        };
        let h = frequency_response(&c, Link::Downlink, s.carrier_dl_hz, &s.grid(), &s.array(), 0.0);
        for n in 0..nc {
            // direct two-term sum; antenna 0 has unit steering
            let f = n as f64 * s.bandwidth_hz / nc as f64;
            let t0 = Complex64::from_polar(0.5f64.sqrt(), 0.4);
            let t1 = Complex64::from_polar(0.5f64.sqrt(), 1.1 - 2.0 * PI * f / s.bandwidth_hz);
            let direct = (t0 + t1).norm_sqr();
            assert!((h[[n, 0]].norm_sqr() - direct).abs() < 1e-12);
            // and the closed form 1 + cos(phase difference) has period Nc
            let closed = 1.0 + (0.4 - 1.1 + 2.0 * PI * n as f64 / nc as f64).cos();
            assert!((direct - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_examples() {
        let ones = Array2::from_elem((2, 2), Complex64::new(1.0, 0.0));
        assert_eq!(normalize_unit_power(&ones).unwrap(), ones);
        let twos = ones.mapv(|v| v * 2.0);
        let out = normalize_unit_power(&twos).unwrap();
        assert!(out.iter().zip(twos.iter()).all(|(o, t)| (o - t * 0.5).norm() < 1e-15));
        let zero = Array2::<Complex64>::zeros((2, 2));
        assert!(matches!(normalize_unit_power(&zero), Err(Error::DegenerateChannel)));
    }

    #[test]
    fn realizations_have_unit_mean_power() {
        let s = small();
        for seed in 0..1000u64 {
            let r = generate_realization(&s, seed).unwrap();
            for k in 0..s.k_max {
                for h in [r.user_dl(k), r.user_ul(k)] {
                    let p = h.iter().map(|v| v.norm_sqr()).sum::<f64>() / h.len() as f64;
                    assert!((p - 1.0).abs() < 0.02, "seed {seed}: {p}");
                }
            }
        }
    }

    /// Magnitudes of the 2-D DFT over (subcarrier, antenna): the
    /// angle-delay power map, which depends on the cluster geometry but
    /// not on the per-cluster phases.
    fn angle_delay_magnitudes(h: &Array2<Complex64>) -> Vec<f64> {
        let (nc, nt) = h.dim();
        let mut out = Vec::with_capacity(nc * nt);
        for d in 0..nc {
            for b in 0..nt {
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..nc {
                    for a in 0..nt {
                        let ph = 2.0 * PI * ((d * n) as f64 / nc as f64 - (b * a) as f64 / nt as f64);
                        acc += h[[n, a]] * Complex64::from_polar(1.0, ph);
                    }
                }
                out.push(acc.norm());
            }
        }
        out
    }

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn shared_geometry_correlates_links_more_than_users() {
        let s = small();
        let (mut same, mut other) = (0.0, 0.0);
        let n = 200;
        for seed in 0..n {
            let r = generate_realization(&s, seed).unwrap();
            let dl0 = angle_delay_magnitudes(&r.user_dl(0));
            same += corr(&dl0, &angle_delay_magnitudes(&r.user_ul(0)));
            other += corr(&dl0, &angle_delay_magnitudes(&r.user_dl(1)));
        }
        let (same, other) = (same / n as f64, other / n as f64);
        assert!(same > other + 0.1, "{same} vs {other}");
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let fdd = ScenarioConfig { carrier_ul_hz: 1.9e9, ..small() };
        assert!(fdd.validate().is_err());
        let k = ScenarioConfig { rician_k: -1.0, ..small() };
        assert!(k.validate().is_err());
        let c = ScenarioConfig { n_clusters: 0, ..small() };
        assert!(generate_realization(&c, 0).is_err());
    }

    proptest! {
        #[test]
        fn normalized_power_is_exact(vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 12)) {
            let h = Array2::from_shape_vec((3, 4), vals.iter().map(|&(r, i)| Complex64::new(r, i)).collect()).unwrap();
            prop_assume!(h.iter().any(|v| v.norm() > 1e-3));
            let out = normalize_unit_power(&h).unwrap();
            let p = out.iter().map(|v| v.norm_sqr()).sum::<f64>() / 12.0;
            prop_assert!((p - 1.0).abs() < 1e-12);
        }
    }
}
