//! Forward pass of the denoiser.
//!
//! Everything is expressed as tape operations so one code path serves
//! training (trainable leaves, backward pass) and inference (frozen
//! constants). [`Forward`] threads the tape, parameter handles, and config
//! through the layers; the free functions at the bottom are value-level
//! wrappers that run a forward pass on a throwaway tape.
//!
//! Conditioning is split by grain: per-token score features go through a
//! small self-attention encoder and feed cross-attention, while speaker and
//! timestep embeddings are summed into one vector that drives every
//! adaptive-norm modulation. The unconditional branch used for guidance
//! swaps the encoded score for a single learned null row under an all-zero
//! attention bias (attending to one unmasked row is a row broadcast) and
//! keeps speaker and timestep.

use crate::alignment::{score_mask, AlignmentMask};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ParamSet, VarMap};
use crate::numerics::{Tape, Tensor2, Var};
use crate::score::{MelTensor, ScoreSequence};

/// Rotary embedding wavelength base.
pub const ROPE_BASE: f64 = 10_000.0;

/// Tokenizer padding fills partial windows with the mel floor (silence).
const PAD_VALUE: f64 = -1.0;

/// Conditioning handles for one forward pass on one tape.
pub struct CondVars {
    /// Encoded local conditions, `L_cond x d` (token count + 1, or 1 when
    /// unconditional).
    pub h_local: Var,
    /// Speaker plus timestep embedding, `1 x d`; drives all modulations.
    pub cond_vec: Var,
    /// Cross-attention bias, `L_lat x L_cond`, entries in {0, -inf}.
    pub bias: Tensor2,
}

/// One model forward pass: tape + registered parameters + sizes.
pub struct Forward<'t> {
    pub tape: &'t mut Tape,
    vars: &'t VarMap,
    cfg: &'t ModelConfig,
}

impl<'t> Forward<'t> {
    pub fn new(tape: &'t mut Tape, vars: &'t VarMap, cfg: &'t ModelConfig) -> Self {
        Forward { tape, vars, cfg }
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Var {
        let w = self.vars.var(&format!("{prefix}.w"));
        let b = self.vars.var(&format!("{prefix}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    /// Positionwise sum of the four token embedding tables, plus the
    /// trailing silence row. Rejects out-of-vocabulary ids.
    pub fn embed_score(&mut self, score: &ScoreSequence) -> Result<Var> {
        let cfg = self.cfg;
        let mut phonemes = Vec::with_capacity(score.tokens.len());
        let mut pitches = Vec::with_capacity(score.tokens.len());
        let mut buckets = Vec::with_capacity(score.tokens.len());
        let mut slurs = Vec::with_capacity(score.tokens.len());
        for (i, tok) in score.tokens.iter().enumerate() {
            if tok.phoneme_id >= cfg.phoneme_vocab {
                return Err(Error::Contract(format!(
                    "token {i}: phoneme id {} outside vocab {}",
                    tok.phoneme_id, cfg.phoneme_vocab
                )));
            }
            if (tok.pitch as usize) >= cfg.pitch_vocab {
                return Err(Error::Contract(format!(
                    "token {i}: pitch {} outside vocab {}",
                    tok.pitch, cfg.pitch_vocab
                )));
            }
            if tok.word_duration_bucket >= cfg.duration_buckets {
                return Err(Error::Contract(format!(
                    "token {i}: duration bucket {} outside {}",
                    tok.word_duration_bucket, cfg.duration_buckets
                )));
            }
            phonemes.push(tok.phoneme_id);
            pitches.push(tok.pitch as usize);
            buckets.push(tok.word_duration_bucket);
            slurs.push(tok.slur as usize);
        }
        let silence = self.vars.var("embed.silence");
        if score.tokens.is_empty() {
            return Ok(silence);
        }
        let p = self.vars.var("embed.phoneme");
        let p = self.tape.gather_rows(p, &phonemes);
        let pi = self.vars.var("embed.pitch");
        let pi = self.tape.gather_rows(pi, &pitches);
        let w = self.vars.var("embed.duration");
        let w = self.tape.gather_rows(w, &buckets);
        let sl = self.vars.var("embed.slur");
        let sl = self.tape.gather_rows(sl, &slurs);
        let mut sum = self.tape.add(p, pi);
        sum = self.tape.add(sum, w);
        sum = self.tape.add(sum, sl);
        Ok(self.tape.concat_rows(sum, silence))
    }

    /// Token embeddings through the 2-layer rotary self-attention encoder.
    /// Output has `tokens + 1` rows (trailing silence position).
    pub fn encode_conditions(&mut self, score: &ScoreSequence) -> Result<Var> {
        let mut h = self.embed_score(score)?;
        for l in 0..2 {
            h = self.encoder_layer(l, h);
        }
        Ok(self.tape.layer_norm_rows(h))
    }

    /// Pre-norm residual layer: rotary self-attention, then feed-forward.
    fn encoder_layer(&mut self, l: usize, x: Var) -> Var {
        let rows = self.tape.value(x).rows();
        let zero_bias = Tensor2::zeros(rows, rows);
        let h = self.tape.layer_norm_rows(x);
        let attn = self.attention(
            &format!("encoder.{l}.attn"),
            h,
            h,
            &zero_bias,
            true,
            false,
        );
        let x = self.tape.add(x, attn);
        let h = self.tape.layer_norm_rows(x);
        let f = self.ffn(&format!("encoder.{l}.ffn"), h);
        self.tape.add(x, f)
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Var {
        let h = self.linear(&format!("{prefix}.w1"), x);
        let h = self.tape.gelu(h);
        self.linear(&format!("{prefix}.w2"), h)
    }

    /// Multi-head attention. `bias` is added to every head's logits.
    /// `rope` rotates Q and K by row position; `qk_norm` normalizes Q and K
    /// per head and replaces the 1/sqrt(head_dim) scale with a learned
    /// per-head temperature from `{prefix}.tau`.
    fn attention(
        &mut self,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        bias: &Tensor2,
        rope: bool,
        qk_norm: bool,
    ) -> Var {
        let hd = self.cfg.head_dim();
        let heads = self.cfg.heads;
        let mut q = self.linear(&format!("{prefix}.wq"), q_in);
        let mut k = self.linear(&format!("{prefix}.wk"), kv_in);
        let v = self.linear(&format!("{prefix}.wv"), kv_in);
        if qk_norm {
            q = self.tape.l2_normalize_segments(q, hd);
            k = self.tape.l2_normalize_segments(k, hd);
        }
        if rope {
            q = self.tape.rope_segments(q, hd, ROPE_BASE, 0);
            k = self.tape.rope_segments(k, hd, ROPE_BASE, 0);
        }
        let tau = qk_norm.then(|| self.vars.var(&format!("{prefix}.tau")));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * hd, hd);
            let kh = self.tape.slice_cols(k, h * hd, hd);
            let vh = self.tape.slice_cols(v, h * hd, hd);
            let mut logits = self.tape.matmul_nt(qh, kh);
            logits = match tau {
                Some(tau) => {
                    let th = self.tape.slice_cols(tau, h, 1);
                    self.tape.scale_by(logits, th)
                }
                None => self.tape.scale(logits, 1.0 / (hd as f64).sqrt()),
            };
            let attn = self.tape.softmax_rows_biased(logits, bias);
            outs.push(self.tape.matmul(attn, vh));
        }
        let merged = self.tape.concat_cols(&outs);
        self.linear(&format!("{prefix}.wo"), merged)
    }

    /// Sinusoidal features of the integer timestep through a 2-layer MLP.
    pub fn timestep_embedding(&mut self, t: usize) -> Var {
        let d = self.cfg.width;
        let half = d / 2;
        let mut feats = Tensor2::zeros(1, d);
        for i in 0..half {
            let omega = ROPE_BASE.powf(-(i as f64) / half as f64);
            let phase = t as f64 * omega;
            feats.set(0, i, phase.sin());
            feats.set(0, half + i, phase.cos());
        }
        let f = self.tape.constant(feats);
        let h = self.linear("time_mlp.l1", f);
        let h = self.tape.silu(h);
        self.linear("time_mlp.l2", h)
    }

    pub fn speaker_embedding(&mut self, speaker_id: usize) -> Result<Var> {
        if speaker_id >= self.cfg.speaker_count {
            return Err(Error::Contract(format!(
                "speaker id {speaker_id} outside vocab {}",
                self.cfg.speaker_count
            )));
        }
        let table = self.vars.var("embed.speaker");
        Ok(self.tape.gather_rows(table, &[speaker_id]))
    }

    /// Conditioning for the score-conditional branch. The mask must have
    /// been built from the same score (token count + 1 columns).
    pub fn conditioned(
        &mut self,
        score: &ScoreSequence,
        t: usize,
        mask: &AlignmentMask,
    ) -> Result<CondVars> {
        let h_local = self.encode_conditions(score)?;
        let width = self.tape.value(h_local).rows();
        if mask.bias.cols() != width {
            return Err(Error::shape(
                "conditioned",
                &format!("mask with {width} columns"),
                &format!("{} columns", mask.bias.cols()),
            ));
        }
        let cond_vec = self.coarse_vector(score.speaker_id, t)?;
        Ok(CondVars {
            h_local,
            cond_vec,
            bias: mask.bias.clone(),
        })
    }

    /// Conditioning for the unconditional branch: learned null row, no mask.
    pub fn unconditioned(
        &mut self,
        speaker_id: usize,
        t: usize,
        latent_frames: usize,
    ) -> Result<CondVars> {
        let h_local = self.vars.var("embed.null_condition");
        let cond_vec = self.coarse_vector(speaker_id, t)?;
        Ok(CondVars {
            h_local,
            cond_vec,
            bias: Tensor2::zeros(latent_frames, 1),
        })
    }

    fn coarse_vector(&mut self, speaker_id: usize, t: usize) -> Result<Var> {
        let spk = self.speaker_embedding(speaker_id)?;
        let te = self.timestep_embedding(t);
        Ok(self.tape.add(spk, te))
    }

    /// Mel frames to latent rows: pad to a whole number of windows with the
    /// silence floor, fold each window into one row, project to width d.
    pub fn tokenize(&mut self, mel: Var) -> Result<Var> {
        let cfg = self.cfg;
        let (frames, bins) = self.tape.value(mel).shape();
        if bins != cfg.mel_bins {
            return Err(Error::shape(
                "tokenize",
                &format!("{} mel bins", cfg.mel_bins),
                &format!("{bins}"),
            ));
        }
        if frames < cfg.downsample_factor {
            return Err(Error::Contract(format!(
                "tokenize needs at least {} frames, got {frames}",
                cfg.downsample_factor
            )));
        }
        let l_lat = cfg.latent_frames(frames);
        let padded = self.tape.pad_rows(mel, l_lat * cfg.downsample_factor, PAD_VALUE);
        let folded = self
            .tape
            .reshape(padded, l_lat, cfg.downsample_factor * cfg.mel_bins);
        Ok(self.linear("tokenizer", folded))
    }

    /// Latent rows back to `frames` mel rows (crops the padded tail).
    pub fn detokenize(&mut self, latents: Var, frames: usize) -> Result<Var> {
        let cfg = self.cfg;
        let l_lat = self.tape.value(latents).rows();
        if cfg.latent_frames(frames) != l_lat {
            return Err(Error::shape(
                "detokenize",
                &format!("{} latent rows for {frames} frames", cfg.latent_frames(frames)),
                &format!("{l_lat}"),
            ));
        }
        let unfolded = self.linear("detokenizer", latents);
        let mel = self
            .tape
            .reshape(unfolded, l_lat * cfg.downsample_factor, cfg.mel_bins);
        Ok(self.tape.crop_rows(mel, frames))
    }

    /// Adaptive layer norm: normalize, then scale by `1 + gamma` and shift
    /// by `beta` (both `1 x d` modulation rows).
    fn ada_ln(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let ones = self.tape.constant(Tensor2::full(1, self.cfg.width, 1.0));
        let scale = self.tape.add(ones, gamma);
        let h = self.tape.layer_norm_rows(x);
        let h = self.tape.mul_row(h, scale);
        self.tape.add_row(h, beta)
    }

    /// One denoiser block: self-attention, masked cross-attention, and
    /// feed-forward, each behind adaptive layer norm and a residual gate.
    /// All nine modulation rows come from one zero-init MLP on `cond_vec`,
    /// so a freshly initialized block is the identity map.
    pub fn dit_block(&mut self, i: usize, x: Var, cond: &CondVars) -> Var {
        let d = self.cfg.width;
        let c = self.tape.silu(cond.cond_vec);
        let m = self.linear(&format!("block.{i}.mod"), c);
        let slice = |fw: &mut Self, j: usize| fw.tape.slice_cols(m, j * d, d);
        let (g1, b1, a1) = (slice(self, 0), slice(self, 1), slice(self, 2));
        let (g2, b2, a2) = (slice(self, 3), slice(self, 4), slice(self, 5));
        let (g3, b3, a3) = (slice(self, 6), slice(self, 7), slice(self, 8));

        let rows = self.tape.value(x).rows();
        let zero_bias = Tensor2::zeros(rows, rows);
        let h = self.ada_ln(x, g1, b1);
        let sa = self.attention(&format!("block.{i}.self_attn"), h, h, &zero_bias, true, true);
        let sa = self.tape.mul_row(sa, a1);
        let x = self.tape.add(x, sa);

        let h = self.ada_ln(x, g2, b2);
        let ca = self.attention(
            &format!("block.{i}.cross_attn"),
            h,
            cond.h_local,
            &cond.bias,
            false,
            true,
        );
        let ca = self.tape.mul_row(ca, a2);
        let x = self.tape.add(x, ca);

        let h = self.ada_ln(x, g3, b3);
        let f = self.ffn(&format!("block.{i}.ffn"), h);
        let f = self.tape.mul_row(f, a3);
        self.tape.add(x, f)
    }

    /// Noise prediction in latent space: input projection, the block stack,
    /// final adaptive norm, zero-init linear head.
    pub fn predict_noise(&mut self, x_t: Var, cond: &CondVars) -> Result<Var> {
        let (rows, cols) = self.tape.value(x_t).shape();
        if cols != self.cfg.width {
            return Err(Error::shape(
                "predict_noise",
                &format!("latents of width {}", self.cfg.width),
                &format!("{cols}"),
            ));
        }
        if cond.bias.rows() != rows {
            return Err(Error::shape(
                "predict_noise",
                &format!("bias with {rows} rows"),
                &format!("{}", cond.bias.rows()),
            ));
        }
        let cond_rows = self.tape.value(cond.h_local).rows();
        if cond.bias.cols() != cond_rows {
            return Err(Error::shape(
                "predict_noise",
                &format!("bias with {cond_rows} columns"),
                &format!("{}", cond.bias.cols()),
            ));
        }
        let mut x = self.linear("in_proj", x_t);
        for i in 0..self.cfg.depth {
            x = self.dit_block(i, x, cond);
        }
        let d = self.cfg.width;
        let c = self.tape.silu(cond.cond_vec);
        let m = self.linear("final.mod", c);
        let g = self.tape.slice_cols(m, 0, d);
        let b = self.tape.slice_cols(m, d, d);
        let h = self.ada_ln(x, g, b);
        Ok(self.linear("final.head", h))
    }
}

/// Precomputed conditioning reused across sampler steps (the condition
/// encoder runs once per clip, not once per timestep).
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// Encoded local conditions, `L_cond x d`.
    pub h_local: Tensor2,
    /// `1 x d` speaker row.
    pub speaker_embedding: Tensor2,
    pub speaker_id: usize,
    pub mask: AlignmentMask,
    pub is_unconditional: bool,
}

impl ConditionBundle {
    pub fn latent_frames(&self) -> usize {
        self.mask.latent_frames
    }
}

/// Builds the score-conditional bundle: span mask extended by
/// `mask_delta` seconds plus the encoded conditions, sized for
/// `latent_frames` rows of latents. `None` selects the all-permissive
/// bias (the alignment ablation).
pub fn condition_bundle(
    params: &ParamSet,
    cfg: &ModelConfig,
    score: &ScoreSequence,
    mask_delta: Option<f64>,
    latent_frames: usize,
) -> Result<ConditionBundle> {
    let mask = match mask_delta {
        Some(delta) => score_mask(score, delta, latent_frames, cfg.latent_clock())?,
        None => {
            crate::alignment::permissive_mask(score.tokens.len(), latent_frames, cfg.latent_clock())
        }
    };
    let h_local = encode_conditions(params, cfg, score)?;
    if mask.bias.cols() != h_local.rows() {
        return Err(Error::shape(
            "condition_bundle",
            &format!("{} mask columns", h_local.rows()),
            &format!("{}", mask.bias.cols()),
        ));
    }
    Ok(ConditionBundle {
        h_local,
        speaker_embedding: speaker_row(params, cfg, score.speaker_id)?,
        speaker_id: score.speaker_id,
        mask,
        is_unconditional: false,
    })
}

/// Builds the null-condition bundle for guidance: one learned row, all-zero
/// bias (every latent frame may attend to it).
pub fn unconditional_bundle(
    params: &ParamSet,
    cfg: &ModelConfig,
    speaker_id: usize,
    latent_frames: usize,
) -> Result<ConditionBundle> {
    let mask = AlignmentMask {
        latent_frames,
        phonemes: 0,
        frame_clock: cfg.latent_clock(),
        bias: Tensor2::zeros(latent_frames, 1),
    };
    Ok(ConditionBundle {
        h_local: params.get("embed.null_condition").clone(),
        speaker_embedding: speaker_row(params, cfg, speaker_id)?,
        speaker_id,
        mask,
        is_unconditional: true,
    })
}

fn speaker_row(params: &ParamSet, cfg: &ModelConfig, speaker_id: usize) -> Result<Tensor2> {
    if speaker_id >= cfg.speaker_count {
        return Err(Error::Contract(format!(
            "speaker id {speaker_id} outside vocab {}",
            cfg.speaker_count
        )));
    }
    let table = params.get("embed.speaker");
    Ok(Tensor2::from_fn(1, table.cols(), |_, c| {
        table.get(speaker_id, c)
    }))
}

/// Value-level condition encoding on a throwaway tape.
pub fn encode_conditions(
    params: &ParamSet,
    cfg: &ModelConfig,
    score: &ScoreSequence,
) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let mut fw = Forward::new(&mut tape, &vars, cfg);
    let h = fw.encode_conditions(score)?;
    Ok(tape.value(h).clone())
}

/// Value-level tokenizer; checks the mel geometry against the config.
pub fn tokenize(params: &ParamSet, cfg: &ModelConfig, mel: &MelTensor) -> Result<Tensor2> {
    check_geometry(cfg, mel)?;
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let mel_var = tape.constant(mel.values.clone());
    let mut fw = Forward::new(&mut tape, &vars, cfg);
    let z = fw.tokenize(mel_var)?;
    Ok(tape.value(z).clone())
}

/// Value-level detokenizer: latents back to a mel of `frames` rows.
pub fn detokenize(
    params: &ParamSet,
    cfg: &ModelConfig,
    latents: &Tensor2,
    frames: usize,
) -> Result<MelTensor> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let z = tape.constant(latents.clone());
    let mut fw = Forward::new(&mut tape, &vars, cfg);
    let mel = fw.detokenize(z, frames)?;
    Ok(MelTensor {
        values: tape.value(mel).clone(),
        hop: cfg.hop,
        sample_rate: cfg.sample_rate,
    })
}

pub(crate) fn check_geometry(cfg: &ModelConfig, mel: &MelTensor) -> Result<()> {
    if mel.bins() != cfg.mel_bins || mel.hop != cfg.hop || mel.sample_rate != cfg.sample_rate {
        return Err(Error::Geometry(format!(
            "mel {} bins hop {} rate {} vs config {} bins hop {} rate {}",
            mel.bins(),
            mel.hop,
            mel.sample_rate,
            cfg.mel_bins,
            cfg.hop,
            cfg.sample_rate
        )));
    }
    Ok(())
}

/// Value-level noise prediction for sampling: deterministic in
/// (weights, inputs), no gradient bookkeeping.
pub fn predict_noise(
    params: &ParamSet,
    cfg: &ModelConfig,
    x_t: &Tensor2,
    t: usize,
    bundle: &ConditionBundle,
) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(x_t.clone());
    let h_local = tape.constant(bundle.h_local.clone());
    let spk = tape.constant(bundle.speaker_embedding.clone());
    let mut fw = Forward::new(&mut tape, &vars, cfg);
    let te = fw.timestep_embedding(t);
    let cond_vec = fw.tape.add(spk, te);
    let cond = CondVars {
        h_local,
        cond_vec,
        bias: bundle.mask.bias.clone(),
    };
    let eps = fw.predict_noise(x, &cond)?;
    Ok(tape.value(eps).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check_tape, Rng};
    use crate::score::{CharSpan, PhonemeToken, ScoreSequence};

    /// Small enough that finite differences over whole tensors stay fast.
    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_multiplier: 2.0,
            downsample_factor: 2,
            phoneme_vocab: 8,
            pitch_vocab: 128,
            duration_buckets: 32,
            speaker_count: 4,
            mel_bins: 4,
            hop: 64,
            sample_rate: 8000,
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    /// Two characters, three tokens, 0.4 s total.
    fn demo_score() -> ScoreSequence {
        ScoreSequence {
            tokens: vec![
                PhonemeToken { phoneme_id: 3, pitch: 60, word_duration_bucket: 5, slur: false },
                PhonemeToken { phoneme_id: 5, pitch: 60, word_duration_bucket: 5, slur: false },
                PhonemeToken { phoneme_id: 2, pitch: 64, word_duration_bucket: 7, slur: false },
            ],
            spans: vec![
                CharSpan { start_time: 0.0, duration: 0.2, phoneme_range: 0..2 },
                CharSpan { start_time: 0.2, duration: 0.2, phoneme_range: 2..3 },
            ],
            speaker_id: 1,
            total_duration: 0.4,
        }
    }

    /// Zero-init tensors get small random values so gradients flow
    /// everywhere during checks.
    fn randomized_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::init(cfg, &mut rng);
        for i in 0..params.len() {
            let t = params.tensor(i);
            let noise = rng.normal_tensor(t.rows(), t.cols()).map(|v| 0.2 * v);
            let mixed = t.zip(&noise, |a, b| a + b, "randomize").unwrap();
            *params.tensor_mut(i) = mixed;
        }
        params
    }

    #[test]
    fn encoded_length_is_tokens_plus_one() {
        let cfg = tiny_cfg();
        let params = ParamSet::init(&cfg, &mut Rng::new(0));
        let h = encode_conditions(&params, &cfg, &demo_score()).unwrap();
        assert_eq!(h.shape(), (4, cfg.width));
        assert!(h.all_finite());

        let empty = ScoreSequence {
            tokens: vec![],
            spans: vec![],
            speaker_id: 0,
            total_duration: 0.1,
        };
        let h = encode_conditions(&params, &cfg, &empty).unwrap();
        assert_eq!(h.shape(), (1, cfg.width));
    }

    #[test]
    fn out_of_vocab_ids_are_contract_errors() {
        let cfg = tiny_cfg();
        let params = ParamSet::init(&cfg, &mut Rng::new(0));
        let mut bad = demo_score();
        bad.tokens[1].phoneme_id = cfg.phoneme_vocab;
        assert!(matches!(
            encode_conditions(&params, &cfg, &bad),
            Err(Error::Contract(_))
        ));
        let mut bad = demo_score();
        bad.speaker_id = cfg.speaker_count;
        assert!(matches!(
            condition_bundle(&params, &cfg, &bad, Some(0.0), 10),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn permuting_tokens_permutes_embedding_rows() {
        let cfg = tiny_cfg();
        let params = ParamSet::init(&cfg, &mut Rng::new(1));
        let score = demo_score();
        let mut swapped = score.clone();
        swapped.tokens.swap(0, 2);

        let embed = |s: &ScoreSequence| -> Tensor2 {
            let mut tape = Tape::new();
            let vars = params.register_frozen(&mut tape);
            let mut fw = Forward::new(&mut tape, &vars, &cfg);
            let e = fw.embed_score(s).unwrap();
            tape.value(e).clone()
        };
        let a = embed(&score);
        let b = embed(&swapped);
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(3), b.row(3));
    }

    #[test]
    fn tokenize_shapes_round_trip() {
        let cfg = micro_cfg();
        let params = ParamSet::init(&cfg, &mut Rng::new(2));
        let mut rng = Rng::new(3);
        let mel = MelTensor {
            values: rng.normal_tensor(10, cfg.mel_bins),
            hop: cfg.hop,
            sample_rate: cfg.sample_rate,
        };
        let z = tokenize(&params, &cfg, &mel).unwrap();
        assert_eq!(z.shape(), (5, cfg.width));
        let back = detokenize(&params, &cfg, &z, 10).unwrap();
        assert_eq!(back.frames(), 10);

        // Odd frame count exercises the padded window.
        let mel9 = MelTensor {
            values: rng.normal_tensor(9, cfg.mel_bins),
            hop: cfg.hop,
            sample_rate: cfg.sample_rate,
        };
        let z9 = tokenize(&params, &cfg, &mel9).unwrap();
        assert_eq!(z9.shape(), (5, cfg.width));
        assert_eq!(detokenize(&params, &cfg, &z9, 9).unwrap().frames(), 9);

        let mut unit = cfg.clone();
        unit.downsample_factor = 1;
        let params1 = ParamSet::init(&unit, &mut Rng::new(4));
        let z1 = tokenize(&params1, &unit, &mel).unwrap();
        assert_eq!(z1.rows(), mel.frames());
    }

    #[test]
    fn tokenize_rejects_mismatched_geometry() {
        let cfg = micro_cfg();
        let params = ParamSet::init(&cfg, &mut Rng::new(2));
        let mel = MelTensor {
            values: Tensor2::zeros(10, cfg.mel_bins),
            hop: cfg.hop + 1,
            sample_rate: cfg.sample_rate,
        };
        assert!(matches!(
            tokenize(&params, &cfg, &mel),
            Err(Error::Geometry(_))
        ));
        let thin = MelTensor {
            values: Tensor2::zeros(1, cfg.mel_bins),
            hop: cfg.hop,
            sample_rate: cfg.sample_rate,
        };
        assert!(tokenize(&params, &cfg, &thin).is_err());
    }

    #[test]
    fn tokenizer_jacobian_passes_gradient_check() {
        let cfg = micro_cfg();
        let params = randomized_params(&cfg, 5);
        let mut rng = Rng::new(6);
        let mel = rng.normal_tensor(6, cfg.mel_bins);
        let target = rng.normal_tensor(3, cfg.width);
        let err = gradient_check_tape(
            &|tape, leaf| {
                let vars = params.register_frozen(tape);
                let mut fw = Forward::new(tape, &vars, &cfg);
                let z = fw.tokenize(leaf).unwrap();
                let tgt = fw.tape.constant(target.clone());
                fw.tape.mse(z, tgt)
            },
            &mel,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "tokenize gradient error {err:e}");
    }

    #[test]
    fn embedding_sum_gradient_passes_for_each_table() {
        let cfg = micro_cfg();
        let score = demo_score();
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let params = randomized_params(&cfg, 100 + seed);
            let mut rng = Rng::new(200 + seed);
            let target = rng.normal_tensor(score.tokens.len() + 1, cfg.width);
            for table in ["embed.phoneme", "embed.pitch", "embed.duration", "embed.slur"] {
                let err = gradient_check_tape(
                    &|tape, leaf| {
                        let vars = params.register_frozen(tape);
                        let mut patched = vars;
                        patched.replace(table, leaf);
                        let mut fw = Forward::new(tape, &patched, &cfg);
                        let e = fw.embed_score(&score).unwrap();
                        let tgt = fw.tape.constant(target.clone());
                        fw.tape.mse(e, tgt)
                    },
                    params.get(table),
                    1e-5,
                )
                .unwrap();
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "embedding gradient error {worst:e}");
    }

    #[test]
    fn condition_encoder_gradient_passes() {
        let cfg = micro_cfg();
        let score = demo_score();
        let params = randomized_params(&cfg, 7);
        let mut rng = Rng::new(8);
        let target = rng.normal_tensor(score.tokens.len() + 1, cfg.width);
        for table in ["embed.phoneme", "encoder.0.attn.wq.w", "encoder.1.ffn.w1.b"] {
            let err = gradient_check_tape(
                &|tape, leaf| {
                    let vars = params.register_frozen(tape);
                    let mut patched = vars;
                    patched.replace(table, leaf);
                    let mut fw = Forward::new(tape, &patched, &cfg);
                    let h = fw.encode_conditions(&score).unwrap();
                    let tgt = fw.tape.constant(target.clone());
                    fw.tape.mse(h, tgt)
                },
                params.get(table),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{table} gradient error {err:e}");
        }
    }

    #[test]
    fn adaln_zero_block_stack_is_identity() {
        let cfg = tiny_cfg();
        // Fresh init: modulation MLPs are all zero.
        let params = ParamSet::init(&cfg, &mut Rng::new(9));
        let score = demo_score();
        let l_lat = 12;
        let mask = score_mask(&score, 0.05, l_lat, cfg.latent_clock()).unwrap();
        let mut rng = Rng::new(10);
        let x0 = rng.normal_tensor(l_lat, cfg.width);

        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let x = tape.constant(x0.clone());
        let mut fw = Forward::new(&mut tape, &vars, &cfg);
        let cond = fw.conditioned(&score, 500, &mask).unwrap();
        let mut y = x;
        for i in 0..cfg.depth {
            y = fw.dit_block(i, y, &cond);
        }
        assert!(tape.value(y).bit_eq(&x0), "block stack must be identity at init");
    }

    #[test]
    fn initial_prediction_is_zero_with_input_shape() {
        // Forward runs on the two presets small enough for test budgets;
        // the larger presets' shape arithmetic is covered by param_count
        // tests against the same layer inventory.
        for preset in ["tiny", "small"] {
            let cfg = ModelConfig::preset(preset).unwrap();
            let params = ParamSet::init(&cfg, &mut Rng::new(11));
            let score = demo_score();
            let l_lat = 6;
            let bundle = condition_bundle(&params, &cfg, &score, Some(0.05), l_lat).unwrap();
            let mut rng = Rng::new(12);
            let x_t = rng.normal_tensor(l_lat, cfg.width);
            let eps = predict_noise(&params, &cfg, &x_t, 1000, &bundle).unwrap();
            assert_eq!(eps.shape(), x_t.shape());
            assert_eq!(eps.max_abs(), 0.0, "zero-init head must predict zero");
        }
        for preset in ["base", "base_2", "large", "large_4"] {
            let cfg = ModelConfig::preset(preset).unwrap();
            assert!(cfg.validate().is_ok());
            assert_eq!(cfg.head_dim() % 2, 0);
        }
    }

    #[test]
    fn rope_dot_products_depend_only_on_relative_offset() {
        // Q.K after rotation is invariant to joint position shifts.
        let mut rng = Rng::new(13);
        for case in 0..100 {
            let d = 2 * (1 + (rng.next_u64() as usize) % 32); // even, <= 64
            let shift = (rng.next_u64() as usize) % 33;
            let m = (rng.next_u64() as usize) % 20;
            let n = (rng.next_u64() as usize) % 20;
            let q = rng.normal_tensor(1, d);
            let k = rng.normal_tensor(1, d);

            let dot_at = |pq: usize, pk: usize| -> f64 {
                let mut tape = Tape::new();
                let qv = tape.constant(q.clone());
                let kv = tape.constant(k.clone());
                let qr = tape.rope_segments(qv, d, ROPE_BASE, pq);
                let kr = tape.rope_segments(kv, d, ROPE_BASE, pk);
                let prod = tape.matmul_nt(qr, kr);
                tape.value(prod).get(0, 0)
            };
            let base = dot_at(m, n);
            let shifted = dot_at(m + shift, n + shift);
            assert!(
                (base - shifted).abs() < 1e-6,
                "case {case}: d={d} shift={shift} |{base} - {shifted}|"
            );
        }
    }

    #[test]
    fn qk_rows_are_unit_norm_after_normalization() {
        let cfg = tiny_cfg();
        let params = randomized_params(&cfg, 14);
        let mut rng = Rng::new(15);
        let x = rng.normal_tensor(7, cfg.width);
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        let xv = tape.constant(x);
        let wq = vars.var("block.0.self_attn.wq.w");
        let bq = vars.var("block.0.self_attn.wq.b");
        let q = tape.matmul(xv, wq);
        let q = tape.add_row(q, bq);
        let qn = tape.l2_normalize_segments(q, cfg.head_dim());
        let qr = tape.rope_segments(qn, cfg.head_dim(), ROPE_BASE, 0);
        for name in [qn, qr] {
            let v = tape.value(name);
            for r in 0..v.rows() {
                for h in 0..cfg.heads {
                    let seg = &v.row(r)[h * cfg.head_dim()..(h + 1) * cfg.head_dim()];
                    let norm: f64 = seg.iter().map(|a| a * a).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-6, "row {r} head {h} norm {norm}");
                }
            }
        }
    }

    #[test]
    fn full_denoiser_gradient_passes() {
        let cfg = micro_cfg();
        let score = demo_score();
        let params = randomized_params(&cfg, 16);
        let l_lat = 5;
        let mask = score_mask(&score, 0.05, l_lat, cfg.latent_clock()).unwrap();
        let mut rng = Rng::new(17);
        let x_t = rng.normal_tensor(l_lat, cfg.width);
        let target = rng.normal_tensor(l_lat, cfg.width);

        // Check the loss gradient w.r.t. the noisy input and a selection of
        // parameters spanning every submodule.
        let loss_wrt_input = gradient_check_tape(
            &|tape, leaf| {
                let vars = params.register_frozen(tape);
                let mut fw = Forward::new(tape, &vars, &cfg);
                let cond = fw.conditioned(&score, 37, &mask).unwrap();
                let eps = fw.predict_noise(leaf, &cond).unwrap();
                let tgt = fw.tape.constant(target.clone());
                fw.tape.mse(eps, tgt)
            },
            &x_t,
            1e-5,
        )
        .unwrap();
        assert!(loss_wrt_input < 1e-4, "input gradient error {loss_wrt_input:e}");

        for name in [
            "block.0.mod.b",
            "block.0.self_attn.tau",
            "block.1.cross_attn.wk.w",
            "final.head.b",
            "time_mlp.l1.b",
            "embed.speaker",
        ] {
            let err = gradient_check_tape(
                &|tape, leaf| {
                    let vars = params.register_frozen(tape);
                    let mut patched = vars;
                    patched.replace(name, leaf);
                    let x = tape.constant(x_t.clone());
                    let mut fw = Forward::new(tape, &patched, &cfg);
                    let cond = fw.conditioned(&score, 37, &mask).unwrap();
                    let eps = fw.predict_noise(x, &cond).unwrap();
                    let tgt = fw.tape.constant(target.clone());
                    fw.tape.mse(eps, tgt)
                },
                params.get(name),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} gradient error {err:e}");
        }
    }

    #[test]
    fn fully_masked_condition_rows_cannot_leak() {
        let cfg = tiny_cfg();
        let params = randomized_params(&cfg, 18);
        // Latent coverage stops before the second character: its tokens'
        // mask columns are fully blocked for every frame in range.
        let score = demo_score();
        let l_lat = 2; // covers [0, 0.032) and [0.032, 0.064) midpoints only
        let bundle = condition_bundle(&params, &cfg, &score, Some(0.0), l_lat).unwrap();
        let blocked = 2; // token index fully outside covered frames
        for i in 0..l_lat {
            assert!(!bundle.mask.is_allowed(i, blocked), "setup: column must be blocked");
        }
        let mut rng = Rng::new(19);
        let x_t = rng.normal_tensor(l_lat, cfg.width);
        let base = predict_noise(&params, &cfg, &x_t, 250, &bundle).unwrap();

        let mut poked = bundle.clone();
        for c in 0..poked.h_local.cols() {
            let v = poked.h_local.get(blocked, c);
            poked.h_local.set(blocked, c, v + 3.5);
        }
        let after = predict_noise(&params, &cfg, &x_t, 250, &poked).unwrap();
        assert!(base.bit_eq(&after), "masked condition row leaked into output");
    }

    #[test]
    fn latent_permutation_equivariance() {
        // Permuting latent rows and carrying their rotary positions along
        // permutes the output rows identically: no hidden position use.
        let cfg = tiny_cfg();
        let params = randomized_params(&cfg, 20);
        let l_lat = 6;
        let perm = [3usize, 0, 4, 1, 5, 2];
        let mut rng = Rng::new(21);
        let x0 = rng.normal_tensor(l_lat, cfg.width);

        // Self-attention with explicit rotary positions, mirroring the
        // block's wiring (cross-attention has no positional use at all).
        let run = |x_in: &Tensor2, positions: &[usize]| -> Tensor2 {
            let mut tape = Tape::new();
            let vars = params.register_frozen(&mut tape);
            let x = tape.constant(x_in.clone());
            let mut fw = Forward::new(&mut tape, &vars, &cfg);
            let hd = cfg.head_dim();
            let h = fw.tape.layer_norm_rows(x);
            let mut q = fw.linear("block.0.self_attn.wq", h);
            let mut k = fw.linear("block.0.self_attn.wk", h);
            let v = fw.linear("block.0.self_attn.wv", h);
            q = fw.tape.l2_normalize_segments(q, hd);
            k = fw.tape.l2_normalize_segments(k, hd);
            q = fw.tape.rope_segments_at(q, hd, ROPE_BASE, positions);
            k = fw.tape.rope_segments_at(k, hd, ROPE_BASE, positions);
            let tau = vars.var("block.0.self_attn.tau");
            let zero_bias = Tensor2::zeros(x_in.rows(), x_in.rows());
            let mut outs = Vec::new();
            for hh in 0..cfg.heads {
                let qh = fw.tape.slice_cols(q, hh * hd, hd);
                let kh = fw.tape.slice_cols(k, hh * hd, hd);
                let vh = fw.tape.slice_cols(v, hh * hd, hd);
                let mut logits = fw.tape.matmul_nt(qh, kh);
                let th = fw.tape.slice_cols(tau, hh, 1);
                logits = fw.tape.scale_by(logits, th);
                let attn = fw.tape.softmax_rows_biased(logits, &zero_bias);
                outs.push(fw.tape.matmul(attn, vh));
            }
            let merged = fw.tape.concat_cols(&outs);
            let out = fw.linear("block.0.self_attn.wo", merged);
            tape.value(out).clone()
        };

        let identity: Vec<usize> = (0..l_lat).collect();
        let base = run(&x0, &identity);

        let xp = Tensor2::from_fn(l_lat, cfg.width, |r, c| x0.get(perm[r], c));
        let positions: Vec<usize> = perm.to_vec();
        let permuted = run(&xp, &positions);

        for r in 0..l_lat {
            for c in 0..cfg.width {
                let diff = (permuted.get(r, c) - base.get(perm[r], c)).abs();
                assert!(diff < 1e-6, "row {r} col {c} diff {diff:e}");
            }
        }
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = tiny_cfg();
        let params = randomized_params(&cfg, 22);
        let score = demo_score();
        let bundle = condition_bundle(&params, &cfg, &score, Some(0.05), 8).unwrap();
        let mut rng = Rng::new(23);
        let x_t = rng.normal_tensor(8, cfg.width);
        let a = predict_noise(&params, &cfg, &x_t, 77, &bundle).unwrap();
        let b = predict_noise(&params, &cfg, &x_t, 77, &bundle).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn unconditional_bundle_shapes() {
        let cfg = tiny_cfg();
        let params = ParamSet::init(&cfg, &mut Rng::new(24));
        let bundle = unconditional_bundle(&params, &cfg, 2, 9).unwrap();
        assert!(bundle.is_unconditional);
        assert_eq!(bundle.h_local.shape(), (1, cfg.width));
        assert_eq!(bundle.mask.bias.shape(), (9, 1));
        assert_eq!(bundle.mask.bias.max_abs(), 0.0);
        let mut rng = Rng::new(25);
        let x_t = rng.normal_tensor(9, cfg.width);
        let eps = predict_noise(&params, &cfg, &x_t, 5, &bundle).unwrap();
        assert_eq!(eps.shape(), (9, cfg.width));
    }
}
