//! Corpus assembly, train/test splitting, and on-disk persistence.
//!
//! A corpus directory holds `manifest.bin` plus `samples/<id>.mel`, one
//! flat tensor file per sample. The manifest records every generation
//! parameter and per-sample seed, so any corpus can be regenerated or
//! audited; all files carry magic bytes, a format version, and a trailing
//! checksum.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2};
use crate::score::binio::{
    expect_header, open_checksummed, read_file, sha8, write_file, ByteReader, ByteWriter,
    CHECKSUM_LEN,
};
use crate::score::synth::{
    generate_lyric_variant, generate_melody_bank, oracle_synthesize, CharTemplate, MelodyTemplate,
    ORACLE_VERSION,
};
use crate::score::types::{CharSpan, MelTensor, PhonemeToken, ScoreSequence};

const MANIFEST_MAGIC: &[u8; 8] = b"MELDCORP";
const MANIFEST_VERSION: u32 = 1;
const MEL_MAGIC: &[u8; 8] = b"MELDMEL\0";
const MEL_VERSION: u32 = 1;

/// Mel geometry shared by every sample in a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorpusGeometry {
    pub bins: usize,
    pub hop: u32,
    pub sample_rate: u32,
}

/// Desk-scale default: 16 bins at 8 kHz, 8 ms frames.
pub const TOY_GEOMETRY: CorpusGeometry = CorpusGeometry {
    bins: 16,
    hop: 64,
    sample_rate: 8000,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    /// Seen melody, held-out lyric variants.
    LyricHoldout,
    /// Every variant of a held-out melody.
    MelodyHoldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::LyricHoldout => "lyric_holdout",
            Split::MelodyHoldout => "melody_holdout",
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::LyricHoldout => 1,
            Split::MelodyHoldout => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::LyricHoldout),
            2 => Ok(Split::MelodyHoldout),
            _ => Err(Error::Malformed {
                what: "corpus manifest".to_string(),
                detail: format!("unknown split tag {v}"),
            }),
        }
    }
}

/// Everything needed to rebuild a corpus from scratch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusParams {
    pub seed: u64,
    pub n_groups: usize,
    pub melodies_per_group: usize,
    pub variants_per_melody: usize,
    /// Fraction held out, both of melodies and of variants; in (0, 0.5].
    pub holdout_fraction: f64,
    pub max_chars: usize,
    pub phoneme_vocab: usize,
    pub geometry: CorpusGeometry,
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.melodies_per_group == 0 || self.variants_per_melody == 0 {
            return Err(Error::Config(
                "groups, melodies, and variants must all be positive".to_string(),
            ));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "holdout_fraction must be in (0, 0.5], got {}",
                self.holdout_fraction
            )));
        }
        if self.max_chars < 2 {
            return Err(Error::Config("max_chars must be at least 2".to_string()));
        }
        if self.phoneme_vocab < 4 {
            return Err(Error::Config("phoneme_vocab must be at least 4".to_string()));
        }
        if self.geometry.bins < 4 || self.geometry.bins % 2 != 0 {
            return Err(Error::Geometry(format!(
                "bins must be even and >= 4, got {}",
                self.geometry.bins
            )));
        }
        if self.geometry.hop == 0 || self.geometry.sample_rate == 0 {
            return Err(Error::Geometry("hop and sample_rate must be positive".to_string()));
        }
        Ok(())
    }

    pub fn n_melodies(&self) -> usize {
        self.n_groups * self.melodies_per_group
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub id: String,
    /// Index into the melody bank.
    pub melody_index: usize,
    pub variant_index: usize,
    pub split: Split,
    /// Derived RNG seed this sample's lyrics were drawn from.
    pub lyric_seed: [u8; 32],
    pub score: ScoreSequence,
    pub mel: MelTensor,
}

/// A set of (score, mel) pairs over a shared melody bank.
///
/// Both halves of a train/test split carry the full bank and identical
/// params; they differ only in which samples they hold.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub params: CorpusParams,
    pub oracle_version: u32,
    pub melody_bank: Vec<MelodyTemplate>,
    pub samples: Vec<CorpusSample>,
}

impl SyntheticCorpus {
    pub fn group_count(&self) -> usize {
        self.params.n_groups
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &CorpusSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Samples restricted to the first `n_groups` pseudo-singer groups.
    pub fn samples_in_groups(&self, n_groups: usize) -> Vec<&CorpusSample> {
        let cutoff = n_groups * self.params.melodies_per_group;
        self.samples
            .iter()
            .filter(|s| s.melody_index < cutoff)
            .collect()
    }
}

/// How many melodies are fully held out: a floor, so tiny banks keep all
/// melodies seen (2 melodies at 0.25 hold none back).
pub fn melody_holdout_count(n_melodies: usize, holdout_fraction: f64) -> usize {
    (n_melodies as f64 * holdout_fraction).floor() as usize
}

/// How many variants of each seen melody are held out: rounded, but always
/// leaving at least one variant in training.
pub fn variant_holdout_count(variants: usize, holdout_fraction: f64) -> usize {
    ((variants as f64 * holdout_fraction).round() as usize).min(variants - 1)
}

/// Generates the full two-stage corpus and splits it.
///
/// The test half holds unseen lyric variants of seen melodies plus every
/// variant of fully held-out melodies; the train half holds the rest.
/// No (melody, variant) pair appears in both. Each sample's RNG is derived
/// from the master seed and its global sample index, so generation order
/// (or parallelism) cannot change the output.
pub fn build_corpus(params: &CorpusParams) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
    params.validate()?;
    let master = Rng::new(params.seed);
    let n_melodies = params.n_melodies();
    let bank = generate_melody_bank(&master, n_melodies, params.max_chars);

    let held_melodies = melody_holdout_count(n_melodies, params.holdout_fraction);
    let held_variants = variant_holdout_count(params.variants_per_melody, params.holdout_fraction);
    let first_held_melody = n_melodies - held_melodies;
    let first_held_variant = params.variants_per_melody - held_variants;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (m, template) in bank.iter().enumerate() {
        let group = m / params.melodies_per_group;
        for v in 0..params.variants_per_melody {
            let sample_index = (m * params.variants_per_melody + v) as u64;
            let mut rng = master.derive("sample", sample_index);
            let lyric_seed = rng.seed_bytes();
            let mut score = generate_lyric_variant(&mut rng, template, params.phoneme_vocab);
            score.speaker_id = group;
            let mel = oracle_synthesize(
                &score,
                params.geometry.bins,
                params.geometry.hop,
                params.geometry.sample_rate,
            )?;
            let split = if m >= first_held_melody {
                Split::MelodyHoldout
            } else if v >= first_held_variant {
                Split::LyricHoldout
            } else {
                Split::Train
            };
            let sample = CorpusSample {
                id: format!("g{group:02}_m{m:03}_v{v:03}"),
                melody_index: m,
                variant_index: v,
                split,
                lyric_seed,
                score,
                mel,
            };
            match split {
                Split::Train => train.push(sample),
                _ => test.push(sample),
            }
        }
    }

    let make = |samples: Vec<CorpusSample>| SyntheticCorpus {
        params: params.clone(),
        oracle_version: ORACLE_VERSION,
        melody_bank: bank.clone(),
        samples,
    };
    Ok((make(train), make(test)))
}

fn write_mel_payload(w: &mut ByteWriter, mel: &MelTensor) {
    w.bytes(MEL_MAGIC);
    w.u32(MEL_VERSION);
    w.u32(mel.frames() as u32);
    w.u32(mel.bins() as u32);
    w.u32(mel.hop);
    w.u32(mel.sample_rate);
    for &v in mel.values.data() {
        w.f32(v as f32);
    }
}

fn encode_mel(mel: &MelTensor) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_mel_payload(&mut w, mel);
    w.into_checksummed()
}

fn decode_mel(bytes: &[u8], what: &str) -> Result<MelTensor> {
    let payload = open_checksummed(bytes, what)?;
    let mut r = ByteReader::new(payload, what);
    expect_header(&mut r, MEL_MAGIC, MEL_VERSION, what)?;
    let frames = r.count(1 << 24, "frame")?;
    let bins = r.count(1 << 12, "bin")?;
    let hop = r.u32()?;
    let sample_rate = r.u32()?;
    let mut data = Vec::with_capacity(frames * bins);
    for _ in 0..frames * bins {
        data.push(r.f32()? as f64);
    }
    r.finish()?;
    Ok(MelTensor {
        values: Tensor2::new(frames, bins, data)?,
        hop,
        sample_rate,
    })
}

/// Writes one mel tensor as a standalone checksummed file.
pub fn save_mel(path: &Path, mel: &MelTensor) -> Result<()> {
    write_file(path, &encode_mel(mel))
}

pub fn load_mel(path: &Path) -> Result<MelTensor> {
    decode_mel(&read_file(path)?, &format!("mel file {}", path.display()))
}

fn write_score(w: &mut ByteWriter, score: &ScoreSequence) {
    w.u32(score.speaker_id as u32);
    w.f64(score.total_duration);
    w.u32(score.tokens.len() as u32);
    for t in &score.tokens {
        w.u32(t.phoneme_id as u32);
        w.u8(t.pitch);
        w.u8(t.word_duration_bucket as u8);
        w.u8(t.slur as u8);
    }
    w.u32(score.spans.len() as u32);
    for s in &score.spans {
        w.f64(s.start_time);
        w.f64(s.duration);
        w.u32(s.phoneme_range.start as u32);
        w.u32(s.phoneme_range.end as u32);
    }
}

fn read_score(r: &mut ByteReader) -> Result<ScoreSequence> {
    let speaker_id = r.u32()? as usize;
    let total_duration = r.f64()?;
    let n_tokens = r.count(1 << 20, "token")?;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(PhonemeToken {
            phoneme_id: r.u32()? as usize,
            pitch: r.u8()?,
            word_duration_bucket: r.u8()? as usize,
            slur: r.u8()? != 0,
        });
    }
    let n_spans = r.count(1 << 20, "span")?;
    let mut spans = Vec::with_capacity(n_spans);
    for _ in 0..n_spans {
        let start_time = r.f64()?;
        let duration = r.f64()?;
        let start = r.u32()? as usize;
        let end = r.u32()? as usize;
        spans.push(CharSpan {
            start_time,
            duration,
            phoneme_range: start..end,
        });
    }
    Ok(ScoreSequence {
        tokens,
        spans,
        speaker_id,
        total_duration,
    })
}

fn write_template(w: &mut ByteWriter, t: &MelodyTemplate) {
    w.f64(t.lead_in);
    w.f64(t.tail);
    w.u32(t.chars.len() as u32);
    for c in &t.chars {
        w.f64(c.duration);
        w.u8(c.pitches.len() as u8);
        for &p in &c.pitches {
            w.u8(p);
        }
    }
}

fn read_template(r: &mut ByteReader) -> Result<MelodyTemplate> {
    let lead_in = r.f64()?;
    let tail = r.f64()?;
    let n_chars = r.count(1 << 16, "char")?;
    let mut chars = Vec::with_capacity(n_chars);
    for _ in 0..n_chars {
        let duration = r.f64()?;
        let n_pitches = r.u8()? as usize;
        let mut pitches = Vec::with_capacity(n_pitches);
        for _ in 0..n_pitches {
            pitches.push(r.u8()?);
        }
        chars.push(CharTemplate { pitches, duration });
    }
    Ok(MelodyTemplate {
        lead_in,
        tail,
        chars,
    })
}

/// Saves a corpus as `manifest.bin` + `samples/<id>.mel` under `dir`.
pub fn save_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(MANIFEST_MAGIC);
    w.u32(MANIFEST_VERSION);
    w.u32(corpus.oracle_version);
    let p = &corpus.params;
    w.u64(p.seed);
    w.u32(p.n_groups as u32);
    w.u32(p.melodies_per_group as u32);
    w.u32(p.variants_per_melody as u32);
    w.f64(p.holdout_fraction);
    w.u32(p.max_chars as u32);
    w.u32(p.phoneme_vocab as u32);
    w.u32(p.geometry.bins as u32);
    w.u32(p.geometry.hop);
    w.u32(p.geometry.sample_rate);
    w.u32(corpus.melody_bank.len() as u32);
    for t in &corpus.melody_bank {
        write_template(&mut w, t);
    }
    w.u32(corpus.samples.len() as u32);
    for s in &corpus.samples {
        let mel_bytes = encode_mel(&s.mel);
        save_mel_bytes(dir, &s.id, &mel_bytes)?;
        w.str(&s.id);
        w.u32(s.melody_index as u32);
        w.u32(s.variant_index as u32);
        w.u8(s.split.to_u8());
        w.bytes(&s.lyric_seed);
        write_score(&mut w, &s.score);
        w.bytes(&sha8(&mel_bytes));
    }
    write_file(&dir.join("manifest.bin"), &w.into_checksummed())
}

fn save_mel_bytes(dir: &Path, id: &str, bytes: &[u8]) -> Result<()> {
    write_file(&dir.join("samples").join(format!("{id}.mel")), bytes)
}

/// Loads a corpus directory, verifying the manifest checksum, each mel
/// file's own checksum, and the manifest's record of each mel file.
pub fn load_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    let manifest_path = dir.join("manifest.bin");
    let what = format!("corpus manifest {}", manifest_path.display());
    let bytes = read_file(&manifest_path)?;
    let payload = open_checksummed(&bytes, &what)?;
    let mut r = ByteReader::new(payload, &what);
    expect_header(&mut r, MANIFEST_MAGIC, MANIFEST_VERSION, &what)?;
    let oracle_version = r.u32()?;
    let params = CorpusParams {
        seed: r.u64()?,
        n_groups: r.u32()? as usize,
        melodies_per_group: r.u32()? as usize,
        variants_per_melody: r.u32()? as usize,
        holdout_fraction: r.f64()?,
        max_chars: r.u32()? as usize,
        phoneme_vocab: r.u32()? as usize,
        geometry: CorpusGeometry {
            bins: r.u32()? as usize,
            hop: r.u32()?,
            sample_rate: r.u32()?,
        },
    };
    let n_templates = r.count(1 << 20, "melody")?;
    let mut melody_bank = Vec::with_capacity(n_templates);
    for _ in 0..n_templates {
        melody_bank.push(read_template(&mut r)?);
    }
    let n_samples = r.count(1 << 24, "sample")?;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let id = r.str()?;
        let melody_index = r.u32()? as usize;
        let variant_index = r.u32()? as usize;
        let split = Split::from_u8(r.u8()?)?;
        let mut lyric_seed = [0u8; 32];
        lyric_seed.copy_from_slice(r.bytes(32)?);
        let score = read_score(&mut r)?;
        let mut expected_sum = [0u8; CHECKSUM_LEN];
        expected_sum.copy_from_slice(r.bytes(CHECKSUM_LEN)?);

        let mel_path = dir.join("samples").join(format!("{id}.mel"));
        let mel_bytes = read_file(&mel_path)?;
        if sha8(&mel_bytes) != expected_sum {
            return Err(Error::Checksum(format!(
                "mel file {} does not match its manifest entry",
                mel_path.display()
            )));
        }
        let mel = decode_mel(&mel_bytes, &format!("mel file {}", mel_path.display()))?;
        samples.push(CorpusSample {
            id,
            melody_index,
            variant_index,
            split,
            lyric_seed,
            score,
            mel,
        });
    }
    r.finish()?;
    Ok(SyntheticCorpus {
        params,
        oracle_version,
        melody_bank,
        samples,
    })
}
