//! Implicit alignment between latent mel frames and phoneme tokens.
//!
//! Instead of predicting per-phoneme durations, each character's time span
//! is extended backward by a tunable offset and turned into an additive
//! attention bias: a frame may only attend phonemes whose (extended) span
//! contains the frame's midpoint. Within that window the attention itself
//! learns the fine-grained alignment. The same mask is applied at training
//! and inference, so the model never sees an unconstrained alignment.
//!
//! Frames covered by no span (leading/trailing silence, gaps) attend a
//! reserved silence column appended after the real phonemes, which keeps
//! every softmax row well-defined.

use crate::error::{Error, Result};
use crate::numerics::{softmax_with_bias, Tensor2};
use crate::score::ScoreSequence;

/// One phoneme's attendable time window, in seconds.
///
/// All phonemes of a character share the character's window; only the
/// window start is extended backward, never the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedSpan {
    pub t_start_ext: f64,
    pub t_end: f64,
    pub phoneme_index: usize,
}

/// Computes each phoneme's extended window.
///
/// A character starting at `t` with duration `d` and preceded by a
/// character of duration `d_prev` gets the window
/// `[t - min(delta, d, d_prev), t + d]`; the first character uses
/// `d_prev = 0` so nothing extends before the clip. Rest tokens are spanned
/// like any other phoneme.
pub fn extend_spans(score: &ScoreSequence, delta: f64) -> Vec<ExtendedSpan> {
    assert!(delta >= 0.0, "backward extension cannot be negative");
    let mut out = Vec::with_capacity(score.tokens.len());
    let mut d_prev = 0.0f64;
    for span in &score.spans {
        let ext = delta.min(span.duration).min(d_prev);
        for j in span.phoneme_range.clone() {
            out.push(ExtendedSpan {
                t_start_ext: span.start_time - ext,
                t_end: span.start_time + span.duration,
                phoneme_index: j,
            });
        }
        d_prev = span.duration;
    }
    out
}

/// Additive attention bias over (latent frame, phoneme) pairs.
///
/// `bias` has `phonemes + 1` columns; the last is the reserved silence
/// column, zero exactly on frames no phoneme window covers. Entries are 0
/// (attendable) or negative infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMask {
    pub latent_frames: usize,
    /// Real phoneme count; `bias` has one extra silence column.
    pub phonemes: usize,
    /// Seconds per latent frame (mel hop times the tokenizer's downsampling
    /// factor over the sample rate).
    pub frame_clock: f64,
    pub bias: Tensor2,
}

impl AlignmentMask {
    pub fn silence_column(&self) -> usize {
        self.phonemes
    }

    pub fn is_allowed(&self, frame: usize, column: usize) -> bool {
        self.bias.get(frame, column) == 0.0
    }

    /// Checks that every frame row and every real phoneme column has at
    /// least one attendable position. Rows hold by construction; a column
    /// can fail if the clip is shorter than its score claims.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.latent_frames {
            if !(0..=self.phonemes).any(|j| self.is_allowed(i, j)) {
                return Err(Error::Contract(format!(
                    "frame {i} can attend nothing, not even silence"
                )));
            }
        }
        for j in 0..self.phonemes {
            if !(0..self.latent_frames).any(|i| self.is_allowed(i, j)) {
                return Err(Error::Contract(format!(
                    "phoneme {j} is attendable from no frame"
                )));
            }
        }
        Ok(())
    }

    /// Portable text form: one line per frame, comma-separated `0`/`-inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.bias.rows() {
            for j in 0..self.bias.cols() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(if self.is_allowed(i, j) { "0" } else { "-inf" });
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the bias matrix for a window list at a given latent clock.
///
/// A frame may attend phoneme `j` iff its midpoint `(i + 0.5) * frame_clock`
/// lies in the closed window `[t_start_ext(j), t_end(j)]`. The phoneme axis
/// is sized by the largest index present; listing an index twice is a
/// contract violation.
pub fn build_mask(
    spans: &[ExtendedSpan],
    latent_frames: usize,
    frame_clock: f64,
) -> Result<AlignmentMask> {
    if latent_frames == 0 {
        return Err(Error::Contract("need at least one latent frame".to_string()));
    }
    if !(frame_clock > 0.0 && frame_clock.is_finite()) {
        return Err(Error::Contract(format!(
            "frame_clock must be positive, got {frame_clock}"
        )));
    }
    let phonemes = spans
        .iter()
        .map(|s| s.phoneme_index + 1)
        .max()
        .unwrap_or(0);
    let mut seen = vec![false; phonemes];
    for s in spans {
        if seen[s.phoneme_index] {
            return Err(Error::Contract(format!(
                "phoneme {} appears in two windows",
                s.phoneme_index
            )));
        }
        seen[s.phoneme_index] = true;
    }
    let mut bias = Tensor2::zeros(latent_frames, phonemes + 1);
    for i in 0..latent_frames {
        for j in 0..=phonemes {
            bias.set(i, j, f64::NEG_INFINITY);
        }
    }
    for s in spans {
        for i in 0..latent_frames {
            let t = (i as f64 + 0.5) * frame_clock;
            if t >= s.t_start_ext && t <= s.t_end {
                bias.set(i, s.phoneme_index, 0.0);
            }
        }
    }
    for i in 0..latent_frames {
        if (0..phonemes).all(|j| bias.get(i, j) != 0.0) {
            bias.set(i, phonemes, 0.0);
        }
    }
    let mask = AlignmentMask {
        latent_frames,
        phonemes,
        frame_clock,
        bias,
    };
    for j in 0..phonemes {
        if (0..latent_frames).all(|i| !mask.is_allowed(i, j)) {
            log::warn!("phoneme column {j} has no attendable frame");
        }
    }
    Ok(mask)
}

/// Convenience: extended windows and mask for a full score in one call.
pub fn score_mask(
    score: &ScoreSequence,
    delta: f64,
    latent_frames: usize,
    frame_clock: f64,
) -> Result<AlignmentMask> {
    build_mask(&extend_spans(score, delta), latent_frames, frame_clock)
}

/// All-permissive mask of the same shape `score_mask` would produce: every
/// frame may attend to every token and to silence. This is the alignment
/// ablation; the model must infer timing from content alone.
pub fn permissive_mask(phonemes: usize, latent_frames: usize, frame_clock: f64) -> AlignmentMask {
    AlignmentMask {
        latent_frames,
        phonemes,
        frame_clock,
        bias: Tensor2::zeros(latent_frames, phonemes + 1),
    }
}

/// Attention weights under a mask: `softmax(Q Kᵀ / sqrt(d) + bias)`.
///
/// `K` must already carry the silence row, so its row count is
/// `mask.phonemes + 1`.
pub fn masked_attention_weights(
    q: &Tensor2,
    k: &Tensor2,
    mask: &AlignmentMask,
) -> Result<Tensor2> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "masked_attention_weights",
            format!("Q and K width to match, Q is {:?}", q.shape()),
            format!("K is {:?}", k.shape()),
        ));
    }
    if q.rows() != mask.latent_frames || k.rows() != mask.bias.cols() {
        return Err(Error::shape(
            "masked_attention_weights",
            format!("{}x{} per mask", mask.latent_frames, mask.bias.cols()),
            format!("Q {:?}, K {:?}", q.shape(), k.shape()),
        ));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut logits = q.matmul_nt(k)?;
    logits.scale_in_place(scale);
    softmax_with_bias(&logits, &mask.bias)
}

/// Masked cross-attention: each frame's output is a convex combination of
/// `V` rows its mask row allows.
pub fn masked_cross_attention(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    mask: &AlignmentMask,
) -> Result<Tensor2> {
    if v.rows() != k.rows() {
        return Err(Error::shape(
            "masked_cross_attention",
            format!("V to have {} rows like K", k.rows()),
            format!("{:?}", v.shape()),
        ));
    }
    masked_attention_weights(q, k, mask)?.matmul(v)
}

/// Mean over frames of the attention mass sitting inside attendable
/// positions. Masked attention scores 1.0 by construction; unmasked
/// baselines land strictly below when they leak.
pub fn attention_concentration(weights: &Tensor2, mask: &AlignmentMask) -> Result<f64> {
    if weights.rows() != mask.latent_frames || weights.cols() != mask.bias.cols() {
        return Err(Error::shape(
            "attention_concentration",
            format!("{}x{}", mask.latent_frames, mask.bias.cols()),
            format!("{:?}", weights.shape()),
        ));
    }
    let mut total = 0.0;
    for i in 0..weights.rows() {
        let row_sum: f64 = weights.row(i).iter().sum();
        if (row_sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "weights row {i} sums to {row_sum}, not 1"
            )));
        }
        let inside: f64 = (0..weights.cols())
            .filter(|&j| mask.is_allowed(i, j))
            .map(|j| weights.get(i, j))
            .sum();
        total += inside;
    }
    Ok(total / weights.rows() as f64)
}
