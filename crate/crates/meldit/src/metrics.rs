//! Objective metrics for synthesized mel tensors: loudness normalization,
//! DTW-aligned mel-cepstral distortion, F0 frame error at 50 cents, and F0
//! RMSE over voiced frames, plus band decoders that read pitch and phoneme
//! content back out of the synthetic spectrogram layout.
//!
//! Everything here is a pure function of feature tracks. No audio exists in
//! this pipeline, so F0 never comes from a pitch extractor: reference tracks
//! come from the score oracle or from the reference mel's pitch band, and
//! hypothesis tracks from the hypothesis mel's pitch band. Decoding both
//! sides with the same band reader makes the bin quantization cancel, so the
//! frame-error rate measures generation mistakes rather than decoder
//! resolution.

use std::f64::consts::{LN_10, SQRT_2};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::score::synth::{PHONEME_BAND_AMP, PITCH_BAND_AMP};
use crate::score::{oracle_phoneme_bins, MelTensor, ScoreSequence, MEL_FLOOR};

/// Log-mel level every clip is shifted to before comparison.
pub const LOUDNESS_REF: f64 = 0.0;

/// Cepstral coefficients kept for distortion: c1 through c13.
pub const MCD_ORDER: usize = 13;

/// Pitch deviation beyond which a voiced frame counts as an F0 error.
/// The comparison is strict: a deviation of exactly 50 cents is not an
/// error.
pub const CENTS_THRESHOLD: f64 = 50.0;

/// A band must rise at least half its full oracle amplitude above the
/// layout floor before a frame decodes as active.
const PITCH_DECODE_MARGIN: f64 = 0.5 * PITCH_BAND_AMP;
const PHONEME_DECODE_MARGIN: f64 = 0.5 * PHONEME_BAND_AMP;

/// Per-frame fundamental frequency with explicit voicing flags.
///
/// Shares the mel frame clock; `f0 > 0` exactly on voiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    /// Hz per frame; 0.0 marks unvoiced frames.
    pub f0: Vec<f64>,
    pub voicing: Vec<bool>,
}

impl F0Track {
    /// Builds a track from Hz values, deriving voicing from `f0 > 0`.
    pub fn from_hz(f0: Vec<f64>) -> F0Track {
        let voicing = f0.iter().map(|&h| h > 0.0).collect();
        F0Track { f0, voicing }
    }

    pub fn frames(&self) -> usize {
        self.f0.len()
    }
}

/// One evaluated hypothesis/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Mel-cepstral distortion in dB over the DTW path.
    pub mcd: f64,
    /// Fraction of aligned frames with a voicing mismatch or an
    /// over-threshold pitch deviation.
    pub ffe: f64,
    /// RMSE in Hz over jointly voiced frames; absent when the pair shares
    /// none, which is distinct from a perfect 0.
    pub f0rmse: Option<f64>,
    /// Aligned frame pairs on the DTW path.
    pub frames_compared: usize,
}

/// A loudness-normalized mel plus a record of what was done to it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoudnessNormalized {
    pub mel: MelTensor,
    /// Additive shift applied to every log-mel value.
    pub shift: f64,
    /// True for clips with no energy above their own floor; such clips are
    /// returned unshifted since re-leveling silence is meaningless.
    pub silent: bool,
}

/// Shifts log-mel values so the clip's mean level sits at [`LOUDNESS_REF`].
///
/// Purely additive, hence idempotent and insensitive to any constant offset
/// already present in the input.
pub fn loudness_normalize(mel: &MelTensor) -> LoudnessNormalized {
    let data = mel.values.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if data.is_empty() || max == min {
        return LoudnessNormalized {
            mel: mel.clone(),
            shift: 0.0,
            silent: true,
        };
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let shift = LOUDNESS_REF - mean;
    LoudnessNormalized {
        mel: MelTensor {
            values: mel.values.map(|v| v + shift),
            hop: mel.hop,
            sample_rate: mel.sample_rate,
        },
        shift,
        silent: false,
    }
}

/// Per-frame orthonormal type-II DCT of the log-mel vector, keeping
/// coefficients `1..=order`.
///
/// Dropping the energy coefficient c0 is what makes downstream distances
/// invariant to uniform log-mel shifts. With `order = bins - 1` the kept
/// coefficients determine each frame up to that missing constant.
pub fn mel_cepstrum(mel: &MelTensor, order: usize) -> Result<Tensor2> {
    let bins = mel.bins();
    if order == 0 || order >= bins {
        return Err(Error::Contract(format!(
            "cepstral order must be in [1, bins), got {order} for {bins} bins"
        )));
    }
    // basis[k - 1][n] = sqrt(2/N) * cos(pi * k * (2n + 1) / (2N))
    let n_f = bins as f64;
    let scale = (2.0 / n_f).sqrt();
    let basis: Vec<Vec<f64>> = (1..=order)
        .map(|k| {
            (0..bins)
                .map(|n| {
                    scale
                        * (std::f64::consts::PI * k as f64 * (2 * n + 1) as f64 / (2.0 * n_f))
                            .cos()
                })
                .collect()
        })
        .collect();
    Ok(Tensor2::from_fn(mel.frames(), order, |i, k| {
        (0..bins).map(|n| mel.values.get(i, n) * basis[k][n]).sum()
    }))
}

fn row_distance(a: &Tensor2, i: usize, b: &Tensor2, j: usize) -> f64 {
    (0..a.cols())
        .map(|c| {
            let d = a.get(i, c) - b.get(j, c);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Minimum-cost monotone warping path between two frame sequences.
///
/// Dynamic programming over steps {(1,0), (0,1), (1,1)} with Euclidean
/// frame distance; the path runs from (0,0) to (rows_a-1, rows_b-1)
/// inclusive. Backtracking prefers the diagonal on ties so identical inputs
/// produce the identity alignment.
pub fn dtw_align(a: &Tensor2, b: &Tensor2) -> Result<Vec<(usize, usize)>> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Contract(
            "dtw needs at least one frame per side".to_string(),
        ));
    }
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "dtw_align",
            expected: format!("{} cols", a.cols()),
            got: format!("{} cols", b.cols()),
        });
    }
    let (n, m) = (a.rows(), b.rows());
    let mut cum = Tensor2::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let d = row_distance(a, i, b, j);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cum.get(0, j - 1),
                (_, 0) => cum.get(i - 1, 0),
                _ => cum
                    .get(i - 1, j - 1)
                    .min(cum.get(i - 1, j))
                    .min(cum.get(i, j - 1)),
            };
            cum.set(i, j, d + best);
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let (pi, pj) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = cum.get(i - 1, j - 1);
                let up = cum.get(i - 1, j);
                let left = cum.get(i, j - 1);
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        path.push((pi, pj));
        i = pi;
        j = pj;
    }
    path.reverse();
    Ok(path)
}

/// Mel-cepstral distortion in dB: `(10 / ln 10) * sqrt(2)` times the mean
/// Euclidean distance between kept cepstral vectors along the DTW path.
pub fn mcd(a: &MelTensor, b: &MelTensor, order: usize) -> Result<f64> {
    if a.bins() != b.bins() {
        return Err(Error::ShapeMismatch {
            op: "mcd",
            expected: format!("{} bins", a.bins()),
            got: format!("{} bins", b.bins()),
        });
    }
    let ca = mel_cepstrum(a, order)?;
    let cb = mel_cepstrum(b, order)?;
    let path = dtw_align(&ca, &cb)?;
    let mean = path
        .iter()
        .map(|&(i, j)| row_distance(&ca, i, &cb, j))
        .sum::<f64>()
        / path.len() as f64;
    Ok(10.0 / LN_10 * SQRT_2 * mean)
}

/// True when two voiced frequencies differ by strictly more than
/// [`CENTS_THRESHOLD`] cents.
///
/// The comparison runs in frequency-ratio space: `2^(50/1200)` is a
/// representable number, so the exclusive boundary is actually observable,
/// which a `1200 * log2(ratio) > 50` formulation cannot guarantee.
fn pitch_error(ref_hz: f64, hyp_hz: f64) -> bool {
    let limit = 2f64.powf(CENTS_THRESHOLD / 1200.0);
    let ratio = hyp_hz / ref_hz;
    ratio > limit || ratio.recip() > limit
}

fn check_paired(op: &'static str, reference: &F0Track, hypothesis: &F0Track) -> Result<()> {
    if reference.frames() == 0 {
        return Err(Error::Contract(format!(
            "{op} needs at least one frame"
        )));
    }
    if reference.frames() != hypothesis.frames() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{} frames", reference.frames()),
            got: format!("{} frames", hypothesis.frames()),
        });
    }
    Ok(())
}

/// F0 frame error: the fraction of frames whose voicing decisions differ or
/// which are voiced on both sides with an over-threshold pitch deviation.
///
/// Framewise, so the tracks must already be aligned (equal frame counts);
/// [`evaluate_pair`] aligns them with the same DTW path used for MCD.
pub fn ffe(reference: &F0Track, hypothesis: &F0Track) -> Result<f64> {
    check_paired("ffe", reference, hypothesis)?;
    let errors = (0..reference.frames())
        .filter(|&i| {
            let (rv, hv) = (reference.voicing[i], hypothesis.voicing[i]);
            rv != hv || (rv && pitch_error(reference.f0[i], hypothesis.f0[i]))
        })
        .count();
    Ok(errors as f64 / reference.frames() as f64)
}

/// Root mean squared Hz difference over frames voiced in both tracks.
///
/// `None` when no frame is jointly voiced: an empty comparison is reported
/// as absent, never as a perfect 0.
pub fn f0_rmse(reference: &F0Track, hypothesis: &F0Track) -> Result<Option<f64>> {
    check_paired("f0_rmse", reference, hypothesis)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..reference.frames() {
        if reference.voicing[i] && hypothesis.voicing[i] {
            let d = hypothesis.f0[i] - reference.f0[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some((sum / count as f64).sqrt()))
}

fn midi_to_hz_f(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

/// Centre frequency of one pitch bin: the midpoint of the real-valued MIDI
/// range that [`crate::score::pitch_bin`] maps into the bin.
fn pitch_bin_center_hz(bin: usize, bins: usize) -> f64 {
    use crate::score::synth::{MIDI_HI, MIDI_LO};
    let span = (MIDI_HI - MIDI_LO + 1) as f64;
    let per_bin = span / (bins / 2) as f64;
    let midi = (MIDI_LO as f64 + (bin as f64 + 0.5) * per_bin).min(MIDI_HI as f64);
    midi_to_hz_f(midi)
}

/// Reads the pitch band back out of a mel in the synthetic layout.
///
/// Per frame the strongest lower-half bin wins; the frame is voiced when
/// that bin rises more than half a full band amplitude above the layout
/// floor. Decoded Hz is the winning bin's centre frequency, so it is
/// quantized to bin resolution; compare two decoded tracks rather than a
/// decoded track against exact oracle Hz.
pub fn band_f0(mel: &MelTensor) -> F0Track {
    let half = mel.bins() / 2;
    let f0 = (0..mel.frames())
        .map(|i| {
            let (bin, peak) = (0..half)
                .map(|b| (b, mel.values.get(i, b)))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("mel has at least one bin");
            if peak - MEL_FLOOR > PITCH_DECODE_MARGIN {
                pitch_bin_center_hz(bin, mel.bins())
            } else {
                0.0
            }
        })
        .collect();
    F0Track::from_hz(f0)
}

/// Phoneme-band counterpart of [`band_f0`]: per-frame argmax over the upper
/// half of the spectrum, `None` where the band stays near the floor.
pub fn band_phoneme_bins(mel: &MelTensor) -> Vec<Option<usize>> {
    let half = mel.bins() / 2;
    (0..mel.frames())
        .map(|i| {
            let (bin, peak) = (half..mel.bins())
                .map(|b| (b, mel.values.get(i, b)))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .expect("mel has at least one bin");
            if peak - MEL_FLOOR > PHONEME_DECODE_MARGIN {
                Some(bin)
            } else {
                None
            }
        })
        .collect()
}

/// Fraction of score-voiced frames whose decoded phoneme band matches the
/// oracle's band for that frame.
///
/// Silence and rest frames are excluded from the denominator; a score with
/// no voiced frames scores 1.0 since there is nothing to get wrong. Frames
/// that decode to silence where the score is voiced count as misses.
pub fn phoneme_band_accuracy(mel: &MelTensor, score: &ScoreSequence) -> f64 {
    let expected = oracle_phoneme_bins(score, mel.frames(), mel.bins(), mel.hop, mel.sample_rate);
    let decoded = band_phoneme_bins(mel);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (want, got) in expected.iter().zip(&decoded) {
        if let Some(bin) = want {
            total += 1;
            if got == &Some(*bin) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return 1.0;
    }
    correct as f64 / total as f64
}

/// Scores one hypothesis mel against its reference.
///
/// Both mels are loudness-normalized and converted to cepstra of order
/// [`MCD_ORDER`] (clamped to `bins - 1` for narrow toy geometries); MCD,
/// FFE, and F0 RMSE all reuse the one DTW path computed on the cepstra, so
/// clips of unequal length stay comparable. F0 defaults to the pitch band
/// decoded from each mel; pass explicit tracks to override a side.
pub fn evaluate_pair(
    reference: &MelTensor,
    hypothesis: &MelTensor,
    ref_f0: Option<&F0Track>,
    hyp_f0: Option<&F0Track>,
) -> Result<MetricReport> {
    if reference.bins() != hypothesis.bins()
        || reference.hop != hypothesis.hop
        || reference.sample_rate != hypothesis.sample_rate
    {
        return Err(Error::Geometry(format!(
            "evaluate_pair needs matching geometry, got {}x{}@{}/{} vs {}x{}@{}/{}",
            reference.frames(),
            reference.bins(),
            reference.hop,
            reference.sample_rate,
            hypothesis.frames(),
            hypothesis.bins(),
            hypothesis.hop,
            hypothesis.sample_rate,
        )));
    }
    let order = MCD_ORDER.min(reference.bins() - 1);
    let ca = mel_cepstrum(&loudness_normalize(reference).mel, order)?;
    let cb = mel_cepstrum(&loudness_normalize(hypothesis).mel, order)?;
    let path = dtw_align(&ca, &cb)?;
    let mean = path
        .iter()
        .map(|&(i, j)| row_distance(&ca, i, &cb, j))
        .sum::<f64>()
        / path.len() as f64;
    let mcd = 10.0 / LN_10 * SQRT_2 * mean;

    let rf = match ref_f0 {
        Some(t) => t.clone(),
        None => band_f0(reference),
    };
    let hf = match hyp_f0 {
        Some(t) => t.clone(),
        None => band_f0(hypothesis),
    };
    for (track, mel, side) in [(&rf, reference, "reference"), (&hf, hypothesis, "hypothesis")] {
        if track.frames() != mel.frames() {
            return Err(Error::Geometry(format!(
                "{side} f0 track has {} frames for a {}-frame mel",
                track.frames(),
                mel.frames()
            )));
        }
    }
    // The cepstral DTW path doubles as the F0 frame pairing.
    let aligned = |track: &F0Track, pick: fn(&(usize, usize)) -> usize| F0Track {
        f0: path.iter().map(|p| track.f0[pick(p)]).collect(),
        voicing: path.iter().map(|p| track.voicing[pick(p)]).collect(),
    };
    let rf_aligned = aligned(&rf, |p| p.0);
    let hf_aligned = aligned(&hf, |p| p.1);
    Ok(MetricReport {
        mcd,
        ffe: ffe(&rf_aligned, &hf_aligned)?,
        f0rmse: f0_rmse(&rf_aligned, &hf_aligned)?,
        frames_compared: path.len(),
    })
}

/// Column means over a set of reports: (mcd, ffe, f0rmse over the pairs
/// that have one, frames_compared).
pub fn aggregate(rows: &[(String, MetricReport)]) -> Option<(f64, f64, Option<f64>, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mcd = rows.iter().map(|(_, r)| r.mcd).sum::<f64>() / n;
    let ffe = rows.iter().map(|(_, r)| r.ffe).sum::<f64>() / n;
    let voiced: Vec<f64> = rows.iter().filter_map(|(_, r)| r.f0rmse).collect();
    let f0rmse = if voiced.is_empty() {
        None
    } else {
        Some(voiced.iter().sum::<f64>() / voiced.len() as f64)
    };
    let frames = rows.iter().map(|(_, r)| r.frames_compared as f64).sum::<f64>() / n;
    Some((mcd, ffe, f0rmse, frames))
}

/// Renders per-pair metric rows plus a final `mean` row as CSV.
///
/// Schema: `id,mcd,ffe,f0rmse,frames_compared`. The `f0rmse` cell is empty
/// for pairs with no jointly voiced frames, and the mean averages it over
/// the pairs that have one.
pub fn metric_csv(rows: &[(String, MetricReport)]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("id,mcd,ffe,f0rmse,frames_compared\n");
    for (id, r) in rows {
        out.push_str(&format!(
            "{id},{},{},{},{}\n",
            r.mcd,
            r.ffe,
            opt(r.f0rmse),
            r.frames_compared
        ));
    }
    if let Some((mcd, ffe, f0rmse, frames)) = aggregate(rows) {
        out.push_str(&format!("mean,{mcd},{ffe},{},{frames}\n", opt(f0rmse)));
    }
    out
}

/// JSON summary carrying the same aggregates as the CSV `mean` row.
pub fn metric_json(rows: &[(String, MetricReport)]) -> String {
    let (mcd, ffe, f0rmse, frames) = match aggregate(rows) {
        Some(a) => a,
        None => (0.0, 0.0, None, 0.0),
    };
    let summary = serde_json::json!({
        "pairs": rows.len(),
        "mcd_mean": mcd,
        "ffe_mean": ffe,
        "f0rmse_mean": f0rmse,
        "frames_compared_mean": frames,
    });
    serde_json::to_string_pretty(&summary).expect("flat summary always serializes")
}

/// Writes [`metric_csv`] output to disk, creating parent directories.
pub fn write_metric_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    crate::score::binio::write_file(path, metric_csv(rows).as_bytes())
}

const F0_MAGIC: &[u8; 8] = b"MELDF0\0\0";
const F0_VERSION: u32 = 1;

/// Writes an F0 track as a standalone checksummed file (`.f0`); voicing is
/// carried implicitly by the `f0 > 0` convention.
pub fn save_f0(path: &Path, track: &F0Track) -> Result<()> {
    use crate::score::binio::{write_file, ByteWriter};
    let mut w = ByteWriter::new();
    w.bytes(F0_MAGIC);
    w.u32(F0_VERSION);
    w.u32(track.frames() as u32);
    for &v in &track.f0 {
        w.f64(v);
    }
    write_file(path, &w.into_checksummed())
}

pub fn load_f0(path: &Path) -> Result<F0Track> {
    use crate::score::binio::{expect_header, open_checksummed, read_file, ByteReader};
    let what = format!("f0 file {}", path.display());
    let bytes = read_file(path)?;
    let payload = open_checksummed(&bytes, &what)?;
    let mut r = ByteReader::new(payload, &what);
    expect_header(&mut r, F0_MAGIC, F0_VERSION, &what)?;
    let frames = r.count(1 << 24, "f0 frame")?;
    let mut f0 = Vec::with_capacity(frames);
    for _ in 0..frames {
        f0.push(r.f64()?);
    }
    r.finish()?;
    Ok(F0Track::from_hz(f0))
}
