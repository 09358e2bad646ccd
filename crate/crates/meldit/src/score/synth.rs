//! Synthetic score generation and the oracle mel synthesizer.
//!
//! The pipeline is two-staged: a melody bank fixes pitch/duration templates,
//! then lyric variants re-sample phonemes over each template. The oracle
//! renders any score to a mel-like tensor with known ground-truth
//! phoneme/pitch placement, so alignment quality can be judged objectively.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2};
use crate::score::types::{
    duration_bucket, CharSpan, MelTensor, PhonemeToken, ScoreSequence, REST_PHONEME, REST_PITCH,
};

/// Singable MIDI range for generated melodies.
pub const MIDI_LO: u8 = 48;
pub const MIDI_HI: u8 = 84;

/// Per-character duration bounds for generated melodies, seconds.
pub const CHAR_DUR_MIN: f64 = 0.1;
pub const CHAR_DUR_MAX: f64 = 0.6;

/// Silence padding bounds at clip edges, seconds.
pub const EDGE_PAD_MIN: f64 = 0.05;
pub const EDGE_PAD_MAX: f64 = 0.15;

const REST_PROB: f64 = 0.1;
const MELISMA_PROB: f64 = 0.15;
/// Phoneme-count distribution per character: P(1), P(2), P(3).
const PHONEME_COUNT_P: [f64; 3] = [0.6, 0.3, 0.1];

/// Mel floor (silence) value on the oracle's normalized log-mel scale.
pub const MEL_FLOOR: f64 = -1.0;
/// Contribution of a phoneme band above the floor (peak value 1.0).
pub const PHONEME_BAND_AMP: f64 = 2.0;
/// Contribution of a pitch band above the floor (peak value 0.5).
pub const PITCH_BAND_AMP: f64 = 1.5;
/// Linear crossfade width at token boundaries, seconds.
pub const CROSSFADE: f64 = 0.010;
/// Bump when the oracle's rendering rules change; recorded in manifests.
pub const ORACLE_VERSION: u32 = 1;

/// One character slot in a melody template: its note events and duration.
///
/// `pitches` holds one MIDI pitch for a plain character, two for a melisma
/// character (the voice carries one phoneme across both notes), and a single
/// 0 for a rest.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTemplate {
    pub pitches: Vec<u8>,
    pub duration: f64,
}

impl CharTemplate {
    pub fn is_rest(&self) -> bool {
        self.pitches == [REST_PITCH]
    }
}

/// Fixed melody skeleton: lyric variants change phonemes, never timing or
/// pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct MelodyTemplate {
    pub lead_in: f64,
    pub tail: f64,
    pub chars: Vec<CharTemplate>,
}

impl MelodyTemplate {
    pub fn total_duration(&self) -> f64 {
        self.lead_in + self.chars.iter().map(|c| c.duration).sum::<f64>() + self.tail
    }
}

/// Samples `n_melodies` fixed pitch/duration templates. Each template's RNG
/// is derived from the passed generator's seed and the melody index, so the
/// bank is independent of generation order.
pub fn generate_melody_bank(rng: &Rng, n_melodies: usize, max_chars: usize) -> Vec<MelodyTemplate> {
    assert!(n_melodies >= 1, "need at least one melody");
    assert!(max_chars >= 2, "need room for at least two characters");
    (0..n_melodies)
        .map(|i| generate_melody(&mut rng.derive("melody", i as u64), max_chars))
        .collect()
}

fn generate_melody(rng: &mut Rng, max_chars: usize) -> MelodyTemplate {
    let n_chars = 2 + rng.uniform_usize(max_chars - 1);
    let lead_in = EDGE_PAD_MIN + rng.uniform() * (EDGE_PAD_MAX - EDGE_PAD_MIN);
    let tail = EDGE_PAD_MIN + rng.uniform() * (EDGE_PAD_MAX - EDGE_PAD_MIN);
    let mut pitch = (MIDI_LO + rng.uniform_usize((MIDI_HI - MIDI_LO + 1) as usize) as u8) as i32;
    let mut chars = Vec::with_capacity(n_chars);
    for _ in 0..n_chars {
        let duration = CHAR_DUR_MIN + rng.uniform() * (CHAR_DUR_MAX - CHAR_DUR_MIN);
        if rng.coin(REST_PROB) {
            chars.push(CharTemplate {
                pitches: vec![REST_PITCH],
                duration,
            });
            continue;
        }
        pitch = (pitch + rng.uniform_usize(11) as i32 - 5).clamp(MIDI_LO as i32, MIDI_HI as i32);
        let mut pitches = vec![pitch as u8];
        if rng.coin(MELISMA_PROB) {
            let step = if rng.coin(0.5) { 2 } else { -2 };
            let second = (pitch + step).clamp(MIDI_LO as i32, MIDI_HI as i32);
            pitches.push(second as u8);
        }
        chars.push(CharTemplate { pitches, duration });
    }
    MelodyTemplate {
        lead_in,
        tail,
        chars,
    }
}

/// Samples phonemes over a fixed melody template.
///
/// Each sung character gets 1 to 3 tokens; a melisma character additionally
/// carries its last phoneme onto the second note as a slurred token (within
/// the same 3-token budget). Rest characters get exactly one rest token.
/// `speaker_id` starts at 0; corpus assembly reassigns it.
pub fn generate_lyric_variant(
    rng: &mut Rng,
    template: &MelodyTemplate,
    vocab: usize,
) -> ScoreSequence {
    assert!(vocab >= 4, "vocab must reserve id 0 and leave real choices");
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut t = template.lead_in;
    for ch in &template.chars {
        let bucket = duration_bucket(ch.duration);
        let start = tokens.len();
        if ch.is_rest() {
            tokens.push(PhonemeToken {
                phoneme_id: REST_PHONEME,
                pitch: REST_PITCH,
                word_duration_bucket: bucket,
                slur: false,
            });
        } else {
            let u = rng.uniform();
            let mut k = if u < PHONEME_COUNT_P[0] {
                1
            } else if u < PHONEME_COUNT_P[0] + PHONEME_COUNT_P[1] {
                2
            } else {
                3
            };
            let melisma = ch.pitches.len() > 1;
            if melisma && k == 1 {
                k = 2;
            }
            let fresh = if melisma { k - 1 } else { k };
            let mut last_id = REST_PHONEME;
            for _ in 0..fresh {
                last_id = 1 + rng.uniform_usize(vocab - 1);
                tokens.push(PhonemeToken {
                    phoneme_id: last_id,
                    pitch: ch.pitches[0],
                    word_duration_bucket: bucket,
                    slur: false,
                });
            }
            if melisma {
                tokens.push(PhonemeToken {
                    phoneme_id: last_id,
                    pitch: ch.pitches[1],
                    word_duration_bucket: bucket,
                    slur: true,
                });
            }
        }
        spans.push(CharSpan {
            start_time: t,
            duration: ch.duration,
            phoneme_range: start..tokens.len(),
        });
        t += ch.duration;
    }
    ScoreSequence {
        tokens,
        spans,
        speaker_id: 0,
        total_duration: t + template.tail,
    }
}

/// Mel bin lit by a phoneme: the upper half of the spectrum, cycled by id.
pub fn phoneme_bin(phoneme_id: usize, bins: usize) -> usize {
    bins / 2 + phoneme_id % (bins / 2)
}

/// Mel bin lit by a pitch: the lower half, spread over the singable range.
pub fn pitch_bin(pitch: u8, bins: usize) -> usize {
    let m = pitch.clamp(MIDI_LO, MIDI_HI) as usize - MIDI_LO as usize;
    let span = (MIDI_HI - MIDI_LO + 1) as usize;
    (m * (bins / 2) / span).min(bins / 2 - 1)
}

/// Per-speaker spectral tilt factor for one bin, in (0.9, 1.0]. Deterministic
/// in `speaker_id`; speaker 0 is untilted.
pub fn speaker_gain(speaker_id: usize, bin: usize, bins: usize) -> f64 {
    let mixed = (speaker_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let u = (mixed >> 11) as f64 / (1u64 << 53) as f64;
    let frac = if bins > 1 {
        bin as f64 / (bins - 1) as f64
    } else {
        0.0
    };
    1.0 - 0.1 * u * frac
}

/// Trapezoid weight of a token active on `[a, b]`, evaluated at time `t`:
/// full weight inside, linear 10 ms ramps centered on each boundary, so
/// adjacent tokens crossfade with weights summing to one.
fn token_weight(t: f64, a: f64, b: f64) -> f64 {
    let rise = ((t - a) / CROSSFADE + 0.5).clamp(0.0, 1.0);
    let fall = ((b - t) / CROSSFADE + 0.5).clamp(0.0, 1.0);
    rise * fall
}

/// Renders a score to a deterministic mel-like tensor.
///
/// Within each token's sub-span (characters divide equally among their
/// tokens) energy sits in one phoneme bin in the upper half of the spectrum
/// and one pitch bin in the lower half; everything else is at the floor.
/// Values are quantized through f32 so serialized corpora round-trip
/// bit-exactly.
pub fn oracle_synthesize(
    score: &ScoreSequence,
    bins: usize,
    hop: u32,
    sample_rate: u32,
) -> Result<MelTensor> {
    if bins < 4 || bins % 2 != 0 {
        return Err(Error::Geometry(format!(
            "oracle needs an even bin count >= 4, got {bins}"
        )));
    }
    // Structural validation only: band formulas wrap any phoneme id.
    score.validate(usize::MAX)?;
    let frames = MelTensor::frames_for(score.total_duration, hop, sample_rate);
    let clock = hop as f64 / sample_rate as f64;
    let mut values = Tensor2::full(frames, bins, MEL_FLOOR);
    for span in &score.spans {
        let k = span.phoneme_range.len();
        let sub = span.duration / k as f64;
        for (slot, idx) in span.phoneme_range.clone().enumerate() {
            let tok = &score.tokens[idx];
            if tok.phoneme_id == REST_PHONEME || tok.pitch == REST_PITCH {
                continue;
            }
            let a = span.start_time + slot as f64 * sub;
            let b = a + sub;
            let pb = phoneme_bin(tok.phoneme_id, bins);
            let fb = pitch_bin(tok.pitch, bins);
            // Frames whose midpoint can see this token, crossfade included.
            let lo = (((a - CROSSFADE) / clock - 0.5).floor().max(0.0)) as usize;
            let hi = ((((b + CROSSFADE) / clock) - 0.5).ceil() as usize + 1).min(frames);
            for i in lo..hi {
                let t = (i as f64 + 0.5) * clock;
                let w = token_weight(t, a, b);
                if w <= 0.0 {
                    continue;
                }
                let vp = values.get(i, pb)
                    + w * PHONEME_BAND_AMP * speaker_gain(score.speaker_id, pb, bins);
                values.set(i, pb, vp);
                let vf = values.get(i, fb)
                    + w * PITCH_BAND_AMP * speaker_gain(score.speaker_id, fb, bins);
                values.set(i, fb, vf);
            }
        }
    }
    let values = values.map(|v| v as f32 as f64);
    Ok(MelTensor {
        values,
        hop,
        sample_rate,
    })
}

/// Ground-truth F0 track in Hz at frame midpoints; 0.0 marks unvoiced.
pub fn oracle_f0(score: &ScoreSequence, frames: usize, hop: u32, sample_rate: u32) -> Vec<f64> {
    let clock = hop as f64 / sample_rate as f64;
    (0..frames)
        .map(|i| {
            let t = (i as f64 + 0.5) * clock;
            match score.token_at(t) {
                Some(idx) if score.tokens[idx].pitch != REST_PITCH => {
                    crate::score::types::midi_to_hz(score.tokens[idx].pitch)
                }
                _ => 0.0,
            }
        })
        .collect()
}

/// Expected phoneme band per frame midpoint; None for silence/rests.
pub fn oracle_phoneme_bins(
    score: &ScoreSequence,
    frames: usize,
    bins: usize,
    hop: u32,
    sample_rate: u32,
) -> Vec<Option<usize>> {
    let clock = hop as f64 / sample_rate as f64;
    (0..frames)
        .map(|i| {
            let t = (i as f64 + 0.5) * clock;
            match score.token_at(t) {
                Some(idx)
                    if score.tokens[idx].phoneme_id != REST_PHONEME
                        && score.tokens[idx].pitch != REST_PITCH =>
                {
                    Some(phoneme_bin(score.tokens[idx].phoneme_id, bins))
                }
                _ => None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::types::midi_to_hz;

    const BINS: usize = 16;
    const HOP: u32 = 64;
    const SR: u32 = 8000;

    fn one_phoneme_score() -> ScoreSequence {
        ScoreSequence {
            tokens: vec![PhonemeToken {
                phoneme_id: 3,
                pitch: 60,
                word_duration_bucket: duration_bucket(0.6),
                slur: false,
            }],
            spans: vec![CharSpan {
                start_time: 0.2,
                duration: 0.6,
                phoneme_range: 0..1,
            }],
            speaker_id: 0,
            total_duration: 1.0,
        }
    }

    #[test]
    fn melody_bank_is_deterministic_and_in_range() {
        let rng = Rng::new(7);
        let bank = generate_melody_bank(&rng, 20, 5);
        let again = generate_melody_bank(&Rng::new(7), 20, 5);
        assert_eq!(bank, again);
        for t in &bank {
            assert!(t.chars.len() >= 2 && t.chars.len() <= 5);
            assert!(t.lead_in >= EDGE_PAD_MIN && t.lead_in <= EDGE_PAD_MAX);
            for c in &t.chars {
                assert!(c.duration >= 0.1 && c.duration <= 1.0);
                assert!(!c.pitches.is_empty() && c.pitches.len() <= 2);
                for &p in &c.pitches {
                    assert!(p == REST_PITCH || (MIDI_LO..=MIDI_HI).contains(&p));
                }
            }
        }
    }

    #[test]
    fn smallest_bank_case() {
        let bank = generate_melody_bank(&Rng::new(0), 1, 2);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank[0].chars.len(), 2);
    }

    #[test]
    fn lyric_variants_satisfy_score_invariants() {
        let rng = Rng::new(11);
        let bank = generate_melody_bank(&rng, 10, 6);
        for (i, template) in bank.iter().enumerate() {
            for v in 0..5u64 {
                let mut r = rng.derive("lyric", (i as u64) << 32 | v);
                let score = generate_lyric_variant(&mut r, template, 8);
                score.validate(8).unwrap();
                assert_eq!(score.spans.len(), template.chars.len());
                for (span, ch) in score.spans.iter().zip(&template.chars) {
                    let n = span.phoneme_range.len();
                    assert!((1..=3).contains(&n));
                    if ch.is_rest() {
                        assert_eq!(n, 1);
                        assert_eq!(score.tokens[span.phoneme_range.start].phoneme_id, 0);
                    } else if ch.pitches.len() > 1 {
                        // Melisma: last token slurs the previous phoneme onto
                        // the second note.
                        let last = &score.tokens[span.phoneme_range.end - 1];
                        let prev = &score.tokens[span.phoneme_range.end - 2];
                        assert!(last.slur);
                        assert_eq!(last.phoneme_id, prev.phoneme_id);
                        assert_eq!(last.pitch, ch.pitches[1]);
                        assert_eq!(prev.pitch, ch.pitches[0]);
                    } else {
                        for t in &score.tokens[span.phoneme_range.clone()] {
                            assert!(!t.slur);
                            assert_eq!(t.pitch, ch.pitches[0]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn two_char_variant_token_budget() {
        let bank = generate_melody_bank(&Rng::new(0), 1, 2);
        for v in 0..20u64 {
            let mut r = Rng::new(0).derive("lyric", v);
            let score = generate_lyric_variant(&mut r, &bank[0], 4);
            assert_eq!(score.spans.len(), 2);
            assert!(score.tokens.len() >= 2 && score.tokens.len() <= 6);
            score.validate(4).unwrap();
        }
    }

    #[test]
    fn same_seed_same_variant() {
        let bank = generate_melody_bank(&Rng::new(3), 1, 4);
        let a = generate_lyric_variant(&mut Rng::new(42), &bank[0], 8);
        let b = generate_lyric_variant(&mut Rng::new(42), &bank[0], 8);
        assert_eq!(a, b);
    }

    #[test]
    fn all_rest_score_renders_floor() {
        let score = ScoreSequence {
            tokens: vec![PhonemeToken {
                phoneme_id: REST_PHONEME,
                pitch: REST_PITCH,
                word_duration_bucket: 0,
                slur: false,
            }],
            spans: vec![CharSpan {
                start_time: 0.1,
                duration: 0.3,
                phoneme_range: 0..1,
            }],
            speaker_id: 2,
            total_duration: 0.5,
        };
        let mel = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        assert!(mel.values.data().iter().all(|&v| v == MEL_FLOOR));
    }

    #[test]
    fn single_phoneme_band_matches_formula() {
        let score = one_phoneme_score();
        let mel = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        assert_eq!(mel.frames(), 125);
        let pb = phoneme_bin(3, BINS);
        let fb = pitch_bin(60, BINS);
        assert_eq!(pb, 11);
        assert_eq!(fb, 2);
        let clock = HOP as f64 / SR as f64;
        for i in 0..mel.frames() {
            let t = (i as f64 + 0.5) * clock;
            let inside = t > 0.2 + CROSSFADE && t < 0.8 - CROSSFADE;
            let outside = t < 0.2 - CROSSFADE || t > 0.8 + CROSSFADE;
            for b in 0..BINS {
                let v = mel.values.get(i, b);
                if inside && b == pb {
                    assert!((v - 1.0).abs() < 1e-6, "frame {i} bin {b}: {v}");
                } else if inside && b == fb {
                    assert!((v - 0.5).abs() < 1e-6, "frame {i} bin {b}: {v}");
                } else if outside || (b != pb && b != fb) {
                    assert_eq!(v, MEL_FLOOR, "frame {i} bin {b}");
                }
            }
        }
    }

    #[test]
    fn oracle_is_pure() {
        let score = one_phoneme_score();
        let a = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        let b = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        assert!(a.values.bit_eq(&b.values));
    }

    #[test]
    fn frame_count_is_ceil_of_clock() {
        let mut score = one_phoneme_score();
        score.total_duration = 0.995;
        let mel = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        assert_eq!(mel.frames(), (0.995f64 * 8000.0 / 64.0).ceil() as usize);
    }

    #[test]
    fn crossfade_blends_adjacent_tokens() {
        // Two phonemes splitting one 0.4 s character: boundary at t=0.4.
        let score = ScoreSequence {
            tokens: vec![
                PhonemeToken {
                    phoneme_id: 1,
                    pitch: 60,
                    word_duration_bucket: 0,
                    slur: false,
                },
                PhonemeToken {
                    phoneme_id: 2,
                    pitch: 60,
                    word_duration_bucket: 0,
                    slur: false,
                },
            ],
            spans: vec![CharSpan {
                start_time: 0.2,
                duration: 0.4,
                phoneme_range: 0..2,
            }],
            speaker_id: 0,
            total_duration: 0.8,
        };
        let mel = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        let clock = HOP as f64 / SR as f64;
        let mid = ((0.4 / clock) - 0.5).round() as usize;
        let t = (mid as f64 + 0.5) * clock;
        assert!((t - 0.4).abs() < clock, "picked a frame near the boundary");
        let w1 = ((0.4 - t) / CROSSFADE + 0.5).clamp(0.0, 1.0);
        let w2 = ((t - 0.4) / CROSSFADE + 0.5).clamp(0.0, 1.0);
        let v1 = mel.values.get(mid, phoneme_bin(1, BINS));
        let v2 = mel.values.get(mid, phoneme_bin(2, BINS));
        assert!((v1 - (MEL_FLOOR + w1 * PHONEME_BAND_AMP)).abs() < 1e-6);
        assert!((v2 - (MEL_FLOOR + w2 * PHONEME_BAND_AMP)).abs() < 1e-6);
        // Shared pitch bin: the two fades sum to full amplitude.
        let vf = mel.values.get(mid, pitch_bin(60, BINS));
        assert!((vf - (MEL_FLOOR + PITCH_BAND_AMP)).abs() < 1e-5);
    }

    #[test]
    fn locality_outside_subspan() {
        // Phoneme 1 owns [0.2, 0.5), phoneme 2 owns [0.5, 0.8). Outside its
        // sub-span plus one crossfade window, each band sits at the floor.
        let score = ScoreSequence {
            tokens: vec![
                PhonemeToken {
                    phoneme_id: 1,
                    pitch: 60,
                    word_duration_bucket: 0,
                    slur: false,
                },
                PhonemeToken {
                    phoneme_id: 2,
                    pitch: 64,
                    word_duration_bucket: 0,
                    slur: false,
                },
            ],
            spans: vec![CharSpan {
                start_time: 0.2,
                duration: 0.6,
                phoneme_range: 0..2,
            }],
            speaker_id: 0,
            total_duration: 1.0,
        };
        let mel = oracle_synthesize(&score, BINS, HOP, SR).unwrap();
        let clock = HOP as f64 / SR as f64;
        let band = phoneme_bin(2, BINS);
        for i in 0..mel.frames() {
            let t = (i as f64 + 0.5) * clock;
            if t < 0.5 - CROSSFADE {
                assert_eq!(mel.values.get(i, band), MEL_FLOOR, "frame {i}");
            }
        }
    }

    #[test]
    fn speaker_tilt_is_deterministic_and_bounded() {
        for spk in [0usize, 1, 5, 17] {
            for b in 0..BINS {
                let g = speaker_gain(spk, b, BINS);
                assert!(g > 0.89 && g <= 1.0);
                assert_eq!(g, speaker_gain(spk, b, BINS));
            }
        }
        assert_eq!(speaker_gain(0, BINS - 1, BINS), 1.0);
        assert!(speaker_gain(1, BINS - 1, BINS) < 1.0);
    }

    #[test]
    fn distinct_speakers_render_distinct_mels() {
        let mut a = one_phoneme_score();
        let mut b = one_phoneme_score();
        a.speaker_id = 1;
        b.speaker_id = 2;
        let ma = oracle_synthesize(&a, BINS, HOP, SR).unwrap();
        let mb = oracle_synthesize(&b, BINS, HOP, SR).unwrap();
        assert!(!ma.values.bit_eq(&mb.values));
    }

    #[test]
    fn f0_track_follows_tokens() {
        let score = one_phoneme_score();
        let f0 = oracle_f0(&score, 125, HOP, SR);
        let clock = HOP as f64 / SR as f64;
        for (i, &hz) in f0.iter().enumerate() {
            let t = (i as f64 + 0.5) * clock;
            if t >= 0.2 && t < 0.8 {
                assert!((hz - midi_to_hz(60)).abs() < 1e-9);
            } else {
                assert_eq!(hz, 0.0);
            }
        }
    }

    #[test]
    fn pitch_bin_covers_lower_half() {
        assert_eq!(pitch_bin(MIDI_LO, BINS), 0);
        assert_eq!(pitch_bin(MIDI_HI, BINS), 7);
        let mut prev = 0;
        for m in MIDI_LO..=MIDI_HI {
            let b = pitch_bin(m, BINS);
            assert!(b < BINS / 2);
            assert!(b >= prev);
            prev = b;
        }
    }
}
