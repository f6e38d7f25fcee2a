//! Browser demo: channel maps, water-filling and the classical precoders'
//! sum-rate versus downlink SNR. Each export has a plain Rust counterpart
//! so the logic is testable off the browser.

use jefp::baselines::{mmse_precode, svd_precode, waterfill};
use jefp::channel::{generate_realization, ScenarioConfig};
use jefp::metrics::{db_to_noise, spectral_efficiency};
use jefp::model::Sample;
use jefp::precoder::UserMask;
use num_complex::Complex64;
use wasm_bindgen::prelude::*;

fn scenario(name: &str, nc: usize, nt: usize, k: usize) -> Result<ScenarioConfig, String> {
    if nc == 0 || nt == 0 || k == 0 || nc > 256 || nt > 64 || k > 8 {
        return Err("Nc must be 1..=256, Nt 1..=64, K 1..=8".into());
    }
    ScenarioConfig::preset(name, nc, nt, k).ok_or_else(|| format!("unknown scenario {name:?}"))
}

/// `|H|` of user 0 (`[Nc, Nt]`, row-major) followed by the magnitude of its
/// 2-D DFT (angle-delay domain, same shape).
pub fn channel_maps(name: &str, nc: usize, nt: usize, seed: u64) -> Result<Vec<f64>, String> {
    let sc = scenario(name, nc, nt, 1)?;
    let h = generate_realization(&sc, seed).map_err(|e| e.to_string())?.user_dl(0);
    let mut out: Vec<f64> = h.iter().map(|c| c.norm()).collect();
    for d in 0..nc {
        for a in 0..nt {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..nc {
                for t in 0..nt {
                    let phase = -2.0 * std::f64::consts::PI * ((d * n) as f64 / nc as f64 + (a * t) as f64 / nt as f64);
                    acc += h[[n, t]] * Complex64::from_polar(1.0, phase);
                }
            }
            out.push(acc.norm() / ((nc * nt) as f64).sqrt());
        }
    }
    Ok(out)
}

/// Water-filling powers for `gains`.
pub fn water_fill(gains: &[f64], sigma_sq: f64, power: f64) -> Result<Vec<f64>, String> {
    if gains.iter().any(|g| !(*g >= 0.0)) || !(sigma_sq > 0.0) || !(power > 0.0) {
        return Err("gains must be non-negative; noise and power positive".into());
    }
    waterfill(gains, sigma_sq, power).map_err(|e| e.to_string())
}

/// Mean per-subcarrier sum-rate of SVD with water-filling and of MMSE
/// precoding (ideal CSI, all `k` users active) at every SNR in `snr_db`.
/// Returns `[svd..., mmse...]`.
pub fn precoder_sweep(name: &str, nc: usize, nt: usize, k: usize, samples: usize, snr_db: &[f64]) -> Result<Vec<f64>, String> {
    let sc = scenario(name, nc, nt, k)?;
    if samples == 0 || samples > 200 {
        return Err("samples must be 1..=200".into());
    }
    let data: Vec<Sample> = (0..samples as u64)
        .map(|s| generate_realization(&sc, s).map(|r| Sample::from(&r)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mask = UserMask::all(k);
    let mut svd = Vec::with_capacity(snr_db.len());
    let mut mmse = Vec::with_capacity(snr_db.len());
    for &snr in snr_db {
        let sigma = db_to_noise(snr);
        let (mut a, mut b) = (0.0, 0.0);
        for s in &data {
            let v = svd_precode(&s.h_dl, &mask, sigma, 1.0).map_err(|e| e.to_string())?;
            a += spectral_efficiency(&s.h_dl, &v, &mask, sigma).per_subcarrier;
            let v = mmse_precode(&s.h_dl, &mask, sigma, 1.0).map_err(|e| e.to_string())?;
            b += spectral_efficiency(&s.h_dl, &v, &mask, sigma).per_subcarrier;
        }
        svd.push(a / samples as f64);
        mmse.push(b / samples as f64);
    }
    svd.extend(mmse);
    Ok(svd)
}

#[wasm_bindgen(js_name = channelMaps)]
pub fn channel_maps_js(scenario: &str, nc: usize, nt: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    channel_maps(scenario, nc, nt, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = waterFill)]
pub fn water_fill_js(gains: &[f64], sigma_sq: f64, power: f64) -> Result<Vec<f64>, JsError> {
    water_fill(gains, sigma_sq, power).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = precoderSweep)]
pub fn precoder_sweep_js(
    scenario: &str,
    nc: usize,
    nt: usize,
    k: usize,
    samples: usize,
    snr_db: &[f64],
) -> Result<Vec<f64>, JsError> {
    precoder_sweep(scenario, nc, nt, k, samples, snr_db).map_err(|e| JsError::new(&e))
}
