//! Model hyperparameters, named presets, and analytic cost accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assumed phoneme rate when estimating condition length from clip
/// duration; only used for FLOP accounting.
pub const PHONEMES_PER_SECOND: f64 = 6.0;

/// Architecture and vocabulary sizes for the denoiser.
///
/// `downsample_factor` sets the tokenizer's temporal stride: latents run at
/// `hop * downsample_factor / sample_rate` seconds per position. Presets
/// with a `_2` / `_4` suffix halve or quarter the latent resolution of
/// their base preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_multiplier: f64,
    pub downsample_factor: usize,
    pub phoneme_vocab: usize,
    pub pitch_vocab: usize,
    pub duration_buckets: usize,
    pub speaker_count: usize,
    pub mel_bins: usize,
    pub hop: u32,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    /// The `tiny` preset: the only one sized for tests and laptops.
    fn default() -> Self {
        Self::preset("tiny").expect("tiny preset always exists")
    }
}

impl ModelConfig {
    /// Named presets. Architecture families: `tiny` (CI scale),
    /// `small` (4 blocks, width 384), `base` (8, 576), `large` (16, 768).
    /// A `_2` or `_4` suffix selects a reduced-resolution variant.
    /// Vocabulary fields default to the toy corpus for `tiny` and to
    /// paper-scale values otherwise; callers adjust them to their data.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let (family, factor) = match name.rsplit_once('_') {
            Some((fam, "2")) => (fam, 2),
            Some((fam, "4")) => (fam, 4),
            _ => (name, 1),
        };
        let mut cfg = match family {
            "tiny" => ModelConfig {
                depth: 2,
                width: 32,
                heads: 4,
                ffn_multiplier: 4.0,
                downsample_factor: 2,
                phoneme_vocab: 8,
                pitch_vocab: 128,
                duration_buckets: 32,
                speaker_count: 8,
                mel_bins: 16,
                hop: 64,
                sample_rate: 8000,
            },
            "small" | "base" | "large" => {
                let (depth, width, heads) = match family {
                    "small" => (4, 384, 6),
                    "base" => (8, 576, 8),
                    _ => (16, 768, 12),
                };
                ModelConfig {
                    depth,
                    width,
                    heads,
                    ffn_multiplier: 4.0,
                    downsample_factor: 1,
                    phoneme_vocab: 64,
                    pitch_vocab: 128,
                    duration_buckets: 32,
                    speaker_count: 64,
                    mel_bins: 80,
                    hop: 128,
                    sample_rate: 24000,
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected tiny/small/base/large with optional _2/_4"
                )))
            }
        };
        if name != family {
            cfg.downsample_factor = factor;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config("depth, width, heads must be positive".to_string()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if (self.width / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.width / self.heads
            )));
        }
        if !matches!(self.downsample_factor, 1 | 2 | 4) {
            return Err(Error::Config(format!(
                "downsample_factor must be 1, 2, or 4, got {}",
                self.downsample_factor
            )));
        }
        if !(self.ffn_multiplier > 0.0) {
            return Err(Error::Config("ffn_multiplier must be positive".to_string()));
        }
        if self.phoneme_vocab < 2 || self.pitch_vocab < 2 || self.speaker_count == 0 {
            return Err(Error::Config("vocabularies too small".to_string()));
        }
        if self.duration_buckets == 0 || self.mel_bins == 0 {
            return Err(Error::Config("duration_buckets and mel_bins must be positive".to_string()));
        }
        if self.hop == 0 || self.sample_rate == 0 {
            return Err(Error::Config("hop and sample_rate must be positive".to_string()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        (self.width as f64 * self.ffn_multiplier).round() as usize
    }

    /// Latent positions for a mel of `frames` rows (ceil division).
    pub fn latent_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.downsample_factor)
    }

    /// Seconds per latent position.
    pub fn latent_clock(&self) -> f64 {
        self.hop as f64 * self.downsample_factor as f64 / self.sample_rate as f64
    }

    pub fn mel_frames(&self, duration: f64) -> usize {
        (duration * self.sample_rate as f64 / self.hop as f64).ceil() as usize
    }

    /// Total learnable scalars, by construction order of the parameter set.
    /// The parameter tests assert this formula against the real allocation.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let f = self.ffn_dim();
        let h = self.heads;
        let fb = self.downsample_factor * self.mel_bins;
        let tokenizer = fb * d + d + d * fb + fb;
        let tables =
            (self.phoneme_vocab + self.pitch_vocab + self.duration_buckets + 2 + self.speaker_count
                + 2)
                * d;
        let tmlp = 2 * (d * d + d);
        let enc_layer = 4 * (d * d + d) + d * f + f + f * d + d;
        let in_proj = d * d + d;
        let block = d * 9 * d + 9 * d          // modulation
            + 4 * (d * d + d) + h              // self-attention + temps
            + 4 * (d * d + d) + h              // cross-attention + temps
            + d * f + f + f * d + d; // ffn
        let finale = d * 2 * d + 2 * d + d * d + d;
        tokenizer + tables + tmlp + 2 * enc_layer + in_proj + self.depth * block + finale
    }

    /// Analytic FLOPs of one full forward pass on a clip of `duration`
    /// seconds (one denoising step, conditions encoded once).
    pub fn count_flops(&self, duration: f64) -> FlopsBreakdown {
        assert!(duration > 0.0, "duration must be positive");
        let d = self.width as f64;
        let f = self.ffn_dim() as f64;
        let fb = (self.downsample_factor * self.mel_bins) as f64;
        let n = self.depth as f64;
        let l = self.latent_frames(self.mel_frames(duration)) as f64;
        let l_ph = (duration * PHONEMES_PER_SECOND).round().max(2.0) + 1.0;

        let self_attention = n * 4.0 * l * l * d;
        let cross_attention = n * 4.0 * l * l_ph * d;
        // Per block: 4 self-attn projections, q/out on latents + k/v on
        // phonemes for cross, and the 9d modulation row.
        let projections = n * (4.0 * 2.0 * l * d * d
            + 2.0 * (2.0 * l * d * d + 2.0 * l_ph * d * d)
            + 2.0 * d * 9.0 * d);
        let ffn = n * 4.0 * l * d * f;
        let conditioning = 2.0 * (8.0 * l_ph * d * d + 4.0 * l_ph * l_ph * d + 4.0 * l_ph * d * f)
            + 2.0 * 2.0 * d * d;
        let tokenizer = 2.0 * l * fb * d * 2.0   // tokenize + detokenize
            + 2.0 * l * d * d * 2.0; // input projection + output head
        FlopsBreakdown {
            self_attention,
            cross_attention,
            projections,
            ffn,
            conditioning,
            tokenizer,
        }
    }
}

/// FLOP totals per architectural component; block terms scale with depth,
/// `conditioning` and `tokenizer` do not.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsBreakdown {
    pub self_attention: f64,
    pub cross_attention: f64,
    pub projections: f64,
    pub ffn: f64,
    pub conditioning: f64,
    pub tokenizer: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.self_attention
            + self.cross_attention
            + self.projections
            + self.ffn
            + self.conditioning
            + self.tokenizer
    }

    /// The depth-scaled portion.
    pub fn block_flops(&self) -> f64 {
        self.self_attention + self.cross_attention + self.projections + self.ffn
    }

    pub fn gflops(&self) -> f64 {
        self.total() / 1e9
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["tiny", "small", "small_2", "base", "base_2", "base_4", "large", "large_2"] {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
        assert!(ModelConfig::preset("small_3").is_err());
    }

    #[test]
    fn preset_shapes_match_families() {
        let s = ModelConfig::preset("small").unwrap();
        assert_eq!((s.depth, s.width), (4, 384));
        assert_eq!(s.downsample_factor, 1);
        let s2 = ModelConfig::preset("small_2").unwrap();
        assert_eq!((s2.depth, s2.width), (4, 384));
        assert_eq!(s2.downsample_factor, 2);
        let b = ModelConfig::preset("base").unwrap();
        assert_eq!((b.depth, b.width), (8, 576));
        let l = ModelConfig::preset("large").unwrap();
        assert_eq!((l.depth, l.width), (16, 768));
        let t = ModelConfig::preset("tiny").unwrap();
        assert_eq!((t.depth, t.width, t.heads), (2, 32, 4));
        assert_eq!((t.mel_bins, t.hop, t.sample_rate), (16, 64, 8000));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.width = 30; // not divisible by 4 heads
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.downsample_factor = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn latent_arithmetic() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        assert_eq!(cfg.latent_frames(10), 5);
        assert_eq!(cfg.latent_frames(11), 6);
        assert!((cfg.latent_clock() - 0.016).abs() < 1e-12);
    }

    #[test]
    fn doubling_depth_doubles_block_flops() {
        let cfg = ModelConfig::preset("small").unwrap();
        let mut deep = cfg.clone();
        deep.depth *= 2;
        let a = cfg.count_flops(5.0);
        let b = deep.count_flops(5.0);
        assert!((b.block_flops() / a.block_flops() - 2.0).abs() < 1e-12);
        assert_eq!(a.conditioning, b.conditioning);
    }

    #[test]
    fn halving_resolution_quarters_self_attention() {
        // 5.12 s at hop 128 / 24 kHz gives exactly 960 mel frames, so both
        // factors divide evenly and the quadratic term is exact.
        let f1 = ModelConfig::preset("small").unwrap();
        let f2 = ModelConfig::preset("small_2").unwrap();
        let a = f1.count_flops(5.12);
        let b = f2.count_flops(5.12);
        assert!((a.self_attention / b.self_attention - 4.0).abs() < 1e-12);
    }

    #[test]
    fn half_resolution_small_is_cheaper_than_quarter_resolution_base() {
        let s2 = ModelConfig::preset("small_2").unwrap();
        let b4 = ModelConfig::preset("base_4").unwrap();
        let s = s2.count_flops(5.0);
        let b = b4.count_flops(5.0);
        assert!(
            s.total() < b.total(),
            "S_2 {:.2} GF vs B_4 {:.2} GF",
            s.gflops(),
            b.gflops()
        );
    }

    #[test]
    fn param_count_grows_with_width_and_depth() {
        let t = ModelConfig::preset("tiny").unwrap().param_count();
        let s = ModelConfig::preset("small").unwrap().param_count();
        let b = ModelConfig::preset("base").unwrap().param_count();
        assert!(t < s && s < b);
    }
}
