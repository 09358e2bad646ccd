//! Scores, synthetic data generation, and corpus persistence.
//!
//! The data pipeline is two-staged: [`synth::generate_melody_bank`] fixes
//! reusable pitch/duration templates, [`synth::generate_lyric_variant`]
//! re-samples phonemes over them, and [`synth::oracle_synthesize`] renders
//! each score to a mel tensor with known ground-truth alignment. Because the
//! oracle is a pure function, every corpus sample carries exact supervision
//! for free, which is what makes alignment quality measurable downstream.

pub(crate) mod binio;
pub mod corpus;
pub mod synth;
pub mod types;

pub use corpus::{
    build_corpus, load_corpus, load_mel, save_corpus, save_mel, CorpusGeometry, CorpusParams,
    CorpusSample, Split, SyntheticCorpus, TOY_GEOMETRY,
};
pub use synth::{
    generate_lyric_variant, generate_melody_bank, oracle_f0, oracle_phoneme_bins,
    oracle_synthesize, phoneme_bin, pitch_bin, CharTemplate, MelodyTemplate, MEL_FLOOR,
    ORACLE_VERSION,
};
pub use types::{
    duration_bucket, midi_to_hz, CharSpan, MelTensor, PhonemeToken, ScoreSequence,
    DURATION_BUCKETS, REST_PHONEME, REST_PITCH,
};
