//! Binary dataset container for channel realizations.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "JEFP"            magic, 4 bytes
//! version           u16
//! meta_len          u32
//! metadata          meta_len bytes of JSON (DatasetMeta)
//! samples           for each sample: downlink block, then uplink block;
//!                   each block is [user][subcarrier][antenna] complex
//!                   entries written as interleaved re, im f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_realization, ChannelRealization, ScenarioConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JEFP";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u16,
    pub scenario: ScenarioConfig,
    pub n_subcarriers: usize,
    pub n_tx_antennas: usize,
    pub k_max: usize,
    pub n_samples: usize,
    pub base_seed: u64,
    /// Per-sample generation seeds, in file order.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub split: Option<String>,
}

impl DatasetMeta {
    pub fn new(scenario: &ScenarioConfig, base_seed: u64, seeds: Vec<u64>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            scenario: scenario.clone(),
            n_subcarriers: scenario.n_subcarriers,
            n_tx_antennas: scenario.n_tx_antennas,
            k_max: scenario.k_max,
            n_samples: seeds.len(),
            base_seed,
            seeds,
            split: None,
        }
    }

    fn block_len(&self) -> usize {
        self.k_max * self.n_subcarriers * self.n_tx_antennas
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<ChannelRealization>,
}

impl Dataset {
    /// Generates one realization per seed.
    pub fn generate(scenario: &ScenarioConfig, base_seed: u64, seeds: Vec<u64>) -> Result<Self> {
        let samples = seeds
            .iter()
            .map(|&s| generate_realization(scenario, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta: DatasetMeta::new(scenario, base_seed, seeds), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn write_block(out: &mut impl Write, block: &Array3<Complex32>) -> std::io::Result<()> {
    for v in block.iter() {
        out.write_all(&v.re.to_le_bytes())?;
        out.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dataset(path: &Path, samples: &[ChannelRealization], meta: &DatasetMeta) -> Result<()> {
    let shape = [meta.k_max, meta.n_subcarriers, meta.n_tx_antennas];
    if meta.n_samples != samples.len() || meta.seeds.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "metadata declares {} samples ({} seeds) but {} were given",
            meta.n_samples,
            meta.seeds.len(),
            samples.len()
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.h_dl.shape() != shape || s.h_ul.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "sample {i}: {:?}/{:?} vs declared {:?}",
                s.h_dl.shape(),
                s.h_ul.shape(),
                shape
            )));
        }
    }
    let json = serde_json::to_vec(meta).map_err(|e| Error::Metadata(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for s in samples {
        write_block(&mut out, &s.h_dl)?;
        write_block(&mut out, &s.h_ul)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotDataset);
    }
    let header = |range: std::ops::Range<usize>| {
        bytes.get(range).ok_or(Error::Truncated { expected: 10, found: bytes.len() })
    };
    let version = u16::from_le_bytes(header(4..6)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u32::from_le_bytes(header(6..10)?.try_into().unwrap()) as usize;
    let meta_bytes = bytes
        .get(10..10 + meta_len)
        .ok_or(Error::Truncated { expected: 10 + meta_len, found: bytes.len() })?;
    let meta: DatasetMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Metadata(e.to_string()))?;
    if meta.format_version != version {
        return Err(Error::UnsupportedVersion(meta.format_version));
    }
    if meta.seeds.len() != meta.n_samples {
        return Err(Error::ShapeMismatch(format!(
            "{} seeds for {} samples",
            meta.seeds.len(),
            meta.n_samples
        )));
    }
    let data = &bytes[10 + meta_len..];
    let block = meta.block_len();
    let expected = meta.n_samples * 2 * block * 8;
    if data.len() < expected {
        return Err(Error::Truncated { expected, found: data.len() });
    }
    if data.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} bytes of sample data for declared shape needing {expected}",
            data.len()
        )));
    }
    let shape = (meta.k_max, meta.n_subcarriers, meta.n_tx_antennas);
    let read_block = |offset: usize| {
        let v: Vec<Complex32> = data[offset..offset + block * 8]
            .chunks_exact(8)
            .map(|c| {
                Complex32::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect();
        Array3::from_shape_vec(shape, v).expect("block shape")
    };
    let samples = (0..meta.n_samples)
        .map(|i| {
            let base = i * 2 * block * 8;
            ChannelRealization {
                h_dl: read_block(base),
                h_ul: read_block(base + block * 8),
                seed: meta.seeds[i],
                scenario: meta.scenario.name.clone(),
            }
        })
        .collect();
    Ok(Dataset { meta, samples })
}
