//! Model checkpoints: config echo plus named parameter tensors.
//!
//! Layout: `MELDCKPT | version | config | count | (name rows cols f32...)*`
//! with the standard trailing checksum. Weights are stored as 32-bit floats
//! (an inference artifact); the trainer keeps its own full-precision state
//! format for bit-exact resume, this file is what samplers and evaluators
//! load. Parameter order and shapes are verified against the embedded
//! config on load, so a checkpoint cannot silently drive the wrong
//! architecture.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;
use crate::numerics::Tensor2;
use crate::score::binio::{
    expect_header, open_checksummed, read_file, write_file, ByteReader, ByteWriter,
};

const MAGIC: &[u8; 8] = b"MELDCKPT";
const VERSION: u32 = 1;

/// Caps for count fields when reading untrusted files.
const MAX_PARAMS: usize = 4096;
const MAX_DIM: usize = 1 << 24;

pub(crate) fn write_config(w: &mut ByteWriter, cfg: &ModelConfig) {
    w.u32(cfg.depth as u32);
    w.u32(cfg.width as u32);
    w.u32(cfg.heads as u32);
    w.f64(cfg.ffn_multiplier);
    w.u32(cfg.downsample_factor as u32);
    w.u32(cfg.phoneme_vocab as u32);
    w.u32(cfg.pitch_vocab as u32);
    w.u32(cfg.duration_buckets as u32);
    w.u32(cfg.speaker_count as u32);
    w.u32(cfg.mel_bins as u32);
    w.u32(cfg.hop);
    w.u32(cfg.sample_rate);
}

pub(crate) fn read_config(r: &mut ByteReader) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        depth: r.u32()? as usize,
        width: r.u32()? as usize,
        heads: r.u32()? as usize,
        ffn_multiplier: r.f64()?,
        downsample_factor: r.u32()? as usize,
        phoneme_vocab: r.u32()? as usize,
        pitch_vocab: r.u32()? as usize,
        duration_buckets: r.u32()? as usize,
        speaker_count: r.u32()? as usize,
        mel_bins: r.u32()? as usize,
        hop: r.u32()?,
        sample_rate: r.u32()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_config(&mut w, cfg);
    w.u32(params.len() as u32);
    for (name, tensor) in params.entries() {
        w.str(name);
        w.u32(tensor.rows() as u32);
        w.u32(tensor.cols() as u32);
        for &v in tensor.data() {
            w.f32(v as f32);
        }
    }
    write_file(path, &w.into_checksummed())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet)> {
    let bytes = read_file(path)?;
    let what = format!("checkpoint {}", path.display());
    let payload = open_checksummed(&bytes, &what)?;
    let mut r = ByteReader::new(payload, &what);
    expect_header(&mut r, MAGIC, VERSION, &what)?;
    let cfg = read_config(&mut r)?;
    let count = r.count(MAX_PARAMS, "parameters")?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str()?;
        let rows = r.count(MAX_DIM, "rows")?;
        let cols = r.count(MAX_DIM, "cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()? as f64);
        }
        let tensor = Tensor2::new(rows, cols, data).map_err(|e| Error::Malformed {
            what: what.clone(),
            detail: format!("{name}: {e}"),
        })?;
        entries.push((name, tensor));
    }
    r.finish()?;
    let params = ParamSet::from_entries(&cfg, entries)?;
    Ok((cfg, params))
}
