//! Score-side data types: phoneme tokens, character spans, and mel tensors.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Reserved phoneme id for rests/silence.
pub const REST_PHONEME: usize = 0;
/// MIDI pitch value meaning "no pitch" (rest).
pub const REST_PITCH: u8 = 0;

/// Number of log-spaced word-duration buckets.
pub const DURATION_BUCKETS: usize = 32;
/// Bucketized duration range in seconds.
pub const DURATION_BUCKET_MIN: f64 = 0.05;
pub const DURATION_BUCKET_MAX: f64 = 4.0;

/// One score token: a phoneme with its note attributes.
///
/// A slurred token continues the previous token's phoneme on a new note
/// (melisma); `word_duration_bucket` is the log-spaced bucket of the owning
/// character's duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhonemeToken {
    pub phoneme_id: usize,
    /// MIDI pitch in [0, 127]; 0 encodes a rest.
    pub pitch: u8,
    pub word_duration_bucket: usize,
    pub slur: bool,
}

/// Time span of one lyric character, owning a contiguous run of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CharSpan {
    /// Seconds from clip start; non-negative.
    pub start_time: f64,
    /// Seconds; strictly positive.
    pub duration: f64,
    /// Token indices covered by this character.
    pub phoneme_range: Range<usize>,
}

impl CharSpan {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }
}

/// A full musical score for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence {
    pub tokens: Vec<PhonemeToken>,
    pub spans: Vec<CharSpan>,
    pub speaker_id: usize,
    /// Clip length in seconds (at least the last span's end).
    pub total_duration: f64,
}

impl ScoreSequence {
    /// Checks the structural invariants: spans are sorted, non-overlapping,
    /// and their phoneme ranges tile the token list exactly; token fields
    /// are in range for `phoneme_vocab`.
    pub fn validate(&self, phoneme_vocab: usize) -> Result<()> {
        if !(self.total_duration.is_finite() && self.total_duration > 0.0) {
            return Err(Error::Contract(format!(
                "total_duration must be positive, got {}",
                self.total_duration
            )));
        }
        let mut next_token = 0usize;
        let mut prev_end = 0.0f64;
        for (i, span) in self.spans.iter().enumerate() {
            if !(span.start_time.is_finite() && span.start_time >= 0.0) {
                return Err(Error::Contract(format!(
                    "span {i}: start_time {} must be >= 0",
                    span.start_time
                )));
            }
            if !(span.duration.is_finite() && span.duration > 0.0) {
                return Err(Error::Contract(format!(
                    "span {i}: duration {} must be > 0",
                    span.duration
                )));
            }
            if span.start_time + 1e-12 < prev_end {
                return Err(Error::Contract(format!(
                    "span {i} starts at {} before previous span end {prev_end}",
                    span.start_time
                )));
            }
            if span.phoneme_range.start != next_token || span.phoneme_range.is_empty() {
                return Err(Error::Contract(format!(
                    "span {i}: phoneme_range {:?} must be non-empty and start at token {next_token}",
                    span.phoneme_range
                )));
            }
            next_token = span.phoneme_range.end;
            prev_end = span.end_time();
        }
        if next_token != self.tokens.len() {
            return Err(Error::Contract(format!(
                "spans cover tokens 0..{next_token} but the score has {} tokens",
                self.tokens.len()
            )));
        }
        if prev_end > self.total_duration + 1e-9 {
            return Err(Error::Contract(format!(
                "last span ends at {prev_end} beyond total_duration {}",
                self.total_duration
            )));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.phoneme_id >= phoneme_vocab {
                return Err(Error::Contract(format!(
                    "token {i}: phoneme_id {} >= vocab {phoneme_vocab}",
                    tok.phoneme_id
                )));
            }
            if tok.pitch > 127 {
                return Err(Error::Contract(format!(
                    "token {i}: pitch {} outside MIDI range",
                    tok.pitch
                )));
            }
            if tok.word_duration_bucket >= DURATION_BUCKETS {
                return Err(Error::Contract(format!(
                    "token {i}: duration bucket {} >= {DURATION_BUCKETS}",
                    tok.word_duration_bucket
                )));
            }
        }
        Ok(())
    }

    /// The span containing time `t` (seconds), if any. Spans are treated as
    /// half-open `[start, end)` so adjacent characters do not both claim
    /// their shared boundary.
    pub fn span_at(&self, t: f64) -> Option<(usize, &CharSpan)> {
        self.spans
            .iter()
            .enumerate()
            .find(|(_, s)| t >= s.start_time && t < s.end_time())
    }

    /// The token sounding at time `t`: characters subdivide equally among
    /// their tokens.
    pub fn token_at(&self, t: f64) -> Option<usize> {
        let (_, span) = self.span_at(t)?;
        let k = span.phoneme_range.len();
        let frac = ((t - span.start_time) / span.duration).clamp(0.0, 1.0);
        let slot = ((frac * k as f64) as usize).min(k - 1);
        Some(span.phoneme_range.start + slot)
    }
}

/// Log-mel spectrogram with its frame clock.
///
/// Frame `i` starts at `i * hop / sample_rate` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct MelTensor {
    pub values: Tensor2,
    pub hop: u32,
    pub sample_rate: u32,
}

impl MelTensor {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }

    /// Seconds per frame.
    pub fn frame_clock(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 * self.frame_clock()
    }

    /// Frame count covering `duration` seconds at this clock.
    pub fn frames_for(duration: f64, hop: u32, sample_rate: u32) -> usize {
        (duration * sample_rate as f64 / hop as f64).ceil() as usize
    }
}

/// Log-spaced duration bucket index in `[0, DURATION_BUCKETS)`.
pub fn duration_bucket(duration: f64) -> usize {
    let d = duration.clamp(DURATION_BUCKET_MIN, DURATION_BUCKET_MAX);
    let frac = (d / DURATION_BUCKET_MIN).ln() / (DURATION_BUCKET_MAX / DURATION_BUCKET_MIN).ln();
    ((frac * DURATION_BUCKETS as f64) as usize).min(DURATION_BUCKETS - 1)
}

pub fn midi_to_hz(midi: u8) -> f64 {
    440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0)
}
