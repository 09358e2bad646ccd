//! Deterministic training loop: adaptive-moment optimization with decoupled
//! weight decay, gradient accumulation, condition dropout, checkpointing,
//! and loss-curve logging.
//!
//! Every source of randomness derives from `TrainConfig::seed`: parameter
//! initialization uses the `("init", 0)` child stream, and optimizer step
//! `k` draws its whole batch (sample indices, timesteps, dropout coins,
//! noise) from the `("train_step", k)` child stream. Step randomness is
//! therefore a pure function of `(seed, k)`, which is what makes resuming
//! from a checkpoint bit-exact: the continuation replays exactly the
//! streams the uninterrupted run would have used.
//!
//! Per-sample draw order within a step is fixed and documented: corpus
//! index, then timestep, then the dropout coin, then the noise tensor.
//! Micro-batch boundaries never consume randomness, so accumulating
//! `k` micro-batches of size `b` replays the same draws as one batch of
//! `k*b`, and the two parameterizations produce the same update.

use std::path::Path;

use crate::diffusion::{loss_forward, sample_ode, GuidanceConfig, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_config, write_config};
use crate::model::net::Forward;
use crate::model::{save_checkpoint, ModelConfig, ParamSet};
use crate::numerics::{Rng, RngState, Tape, Tensor2};
use crate::score::{CorpusGeometry, CorpusParams};
use crate::score::binio::{
    expect_header, open_checksummed, read_file, write_file, ByteReader, ByteWriter,
};
use crate::score::{CorpusSample, Split, SyntheticCorpus};

/// First-moment decay constant.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay constant.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator floor in the parameter update.
pub const ADAM_EPS: f64 = 1e-8;

const STATE_MAGIC: &[u8; 8] = b"MELDSTAT";
const STATE_VERSION: u32 = 1;
/// Caps for length fields read from state files; rejects absurd headers
/// before any allocation.
const MAX_PARAMS: usize = 4096;
const MAX_DIM: usize = 1 << 24;
const MAX_HISTORY: usize = 1 << 24;

/// Everything the training loop needs beyond the model and the data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer steps to run in total (not per call: resuming continues
    /// toward this same count).
    pub iterations: usize,
    /// Samples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    /// Decoupled decay coefficient; applied to weights directly, never
    /// through the gradient.
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability of replacing a sample's score conditions with the
    /// unconditional bundle.
    pub cond_dropout_p: f64,
    /// Write a model checkpoint and a resumable state file every this many
    /// steps; 0 writes only the final pair.
    pub checkpoint_every: usize,
    /// Span extension (seconds) for the alignment mask.
    pub span_delta: f64,
    /// Weight of the mel reconstruction term that keeps the detokenizer
    /// trained alongside the noise prediction.
    pub recon_weight: f64,
    /// Diffusion steps in the training schedule.
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    /// When false, training uses an all-permissive cross-attention bias
    /// instead of the span mask (the alignment ablation).
    pub use_alignment_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            grad_accum_steps: 1,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            cond_dropout_p: 0.1,
            checkpoint_every: 0,
            span_delta: 1.0,
            recon_weight: 1.0,
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            use_alignment_mask: true,
        }
    }
}

impl TrainConfig {
    /// The cited training recipe: batch 8 with 6-step accumulation.
    /// Iteration counts stay a caller decision.
    pub fn paper_profile() -> TrainConfig {
        TrainConfig {
            grad_accum_steps: 6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config(
                "batch_size and grad_accum_steps must be positive".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Config(format!(
                "cond_dropout_p must lie in [0, 1], got {}",
                self.cond_dropout_p
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".to_string()));
        }
        if !(self.span_delta >= 0.0 && self.span_delta.is_finite()) {
            return Err(Error::Config(format!(
                "span_delta must be non-negative, got {}",
                self.span_delta
            )));
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config(format!(
                "recon_weight must be non-negative, got {}",
                self.recon_weight
            )));
        }
        Ok(())
    }

    /// Samples consumed by one optimizer step.
    pub fn samples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

/// One logged optimizer step. `loss` is the batch mean of the total
/// objective; the two terms are logged alongside for diagnosis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub eps_mse: f64,
    pub recon_mse: f64,
}

/// Complete optimization state: serializing and restoring this reproduces
/// the exact loss sequence of an uninterrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParamSet,
    /// First moments, same inventory as `params`.
    pub m: ParamSet,
    /// Second moments, same inventory as `params`.
    pub v: ParamSet,
    /// Master generator snapshot (children are derived per step, so this
    /// never advances; stored for completeness and format stability).
    pub rng: RngState,
    pub loss_history: Vec<LossPoint>,
}

impl TrainState {
    /// Deterministic fresh state: weights drawn from the seed's
    /// `("init", 0)` child stream, zero moments, empty history.
    pub fn init(cfg: &ModelConfig, tcfg: &TrainConfig) -> TrainState {
        let master = Rng::new(tcfg.seed);
        let mut init_rng = master.derive("init", 0);
        let params = ParamSet::init(cfg, &mut init_rng);
        let m = params.zeros_like();
        let v = params.zeros_like();
        TrainState {
            step: 0,
            params,
            m,
            v,
            rng: master.state(),
            loss_history: Vec::new(),
        }
    }
}

fn check_corpus(cfg: &ModelConfig, corpus: &SyntheticCorpus) -> Result<()> {
    let g = corpus.params.geometry;
    if g.bins != cfg.mel_bins || g.hop != cfg.hop || g.sample_rate != cfg.sample_rate {
        return Err(Error::Geometry(format!(
            "corpus geometry {} bins / hop {} / {} Hz does not match model {} / {} / {}",
            g.bins, g.hop, g.sample_rate, cfg.mel_bins, cfg.hop, cfg.sample_rate
        )));
    }
    if corpus.params.phoneme_vocab > cfg.phoneme_vocab {
        return Err(Error::Config(format!(
            "corpus phoneme vocab {} exceeds model vocab {}",
            corpus.params.phoneme_vocab, cfg.phoneme_vocab
        )));
    }
    if corpus.params.n_groups > cfg.speaker_count {
        return Err(Error::Config(format!(
            "corpus has {} speaker groups, model supports {}",
            corpus.params.n_groups, cfg.speaker_count
        )));
    }
    Ok(())
}

/// Trains from a fresh deterministic initialization. See [`continue_train`]
/// for the loop contract.
pub fn train(
    cfg: &ModelConfig,
    corpus: &SyntheticCorpus,
    tcfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainState> {
    continue_train(cfg, corpus, tcfg, TrainState::init(cfg, tcfg), ckpt_dir)
}

/// Runs optimizer steps `state.step + 1 ..= tcfg.iterations`.
///
/// Each step accumulates gradients over `grad_accum_steps` micro-batches of
/// `batch_size` samples drawn with replacement from the train split, then
/// applies one adaptive-moment update with decoupled weight decay. The
/// batch-mean loss is logged every step. A non-finite batch loss aborts
/// with the step, learning rate, and gradient norm in the error.
///
/// When `ckpt_dir` is given, a float32 model checkpoint and a full-precision
/// state file are written every `checkpoint_every` steps and always at the
/// end (`model-final.ckpt`, `train-final.state`).
pub fn continue_train(
    cfg: &ModelConfig,
    corpus: &SyntheticCorpus,
    tcfg: &TrainConfig,
    mut state: TrainState,
    ckpt_dir: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    tcfg.validate()?;
    check_corpus(cfg, corpus)?;
    let train_samples: Vec<&CorpusSample> = corpus.samples_in(Split::Train).collect();
    if train_samples.is_empty() {
        return Err(Error::Config("corpus has no training samples".to_string()));
    }
    let schedule = NoiseSchedule::new(tcfg.schedule, tcfg.timesteps)?;
    let master = Rng::restore(&state.rng);
    let n_per_step = tcfg.samples_per_step() as f64;

    while state.step < tcfg.iterations as u64 {
        let step = state.step + 1;
        let mut rng = master.derive("train_step", step);
        let mut grad_sum: Vec<Tensor2> = (0..state.params.len())
            .map(|i| {
                let t = state.params.tensor(i);
                Tensor2::zeros(t.rows(), t.cols())
            })
            .collect();
        let mut eps_sum = 0.0;
        let mut recon_sum = 0.0;

        for _ in 0..tcfg.grad_accum_steps {
            for _ in 0..tcfg.batch_size {
                let sample = train_samples[rng.uniform_usize(train_samples.len())];
                let t = 1 + rng.uniform_usize(schedule.len());
                let drop = rng.coin(tcfg.cond_dropout_p);
                let l_lat = cfg.latent_frames(sample.mel.frames());
                let eps = rng.normal_tensor(l_lat, cfg.width);

                let mut tape = Tape::new();
                let vars = state.params.register(&mut tape);
                let mut fw = Forward::new(&mut tape, &vars, cfg);
                let parts = loss_forward(
                    &mut fw,
                    cfg,
                    &schedule,
                    &sample.score,
                    &sample.mel,
                    t,
                    &eps,
                    drop,
                    if tcfg.use_alignment_mask {
                        Some(tcfg.span_delta)
                    } else {
                        None
                    },
                    tcfg.recon_weight,
                )?;
                eps_sum += tape.value(parts.eps_mse).get(0, 0);
                recon_sum += tape.value(parts.recon_mse).get(0, 0);
                let mut grads = tape.backward(parts.total);
                for (i, var) in vars.ordered().iter().enumerate() {
                    if let Some(g) = grads.take(*var) {
                        grad_sum[i].add_scaled(&g, 1.0)?;
                    }
                }
            }
        }

        let eps_mse = eps_sum / n_per_step;
        let recon_mse = recon_sum / n_per_step;
        let loss = eps_mse + tcfg.recon_weight * recon_mse;
        if !loss.is_finite() {
            let sq: f64 = grad_sum.iter().map(|g| g.frob_norm().powi(2)).sum();
            return Err(Error::NonFiniteLoss {
                step,
                lr: tcfg.learning_rate,
                grad_norm: sq.sqrt() / n_per_step,
            });
        }

        adamw_step(&mut state, tcfg, &grad_sum, n_per_step, step);
        state.step = step;
        state.loss_history.push(LossPoint {
            step,
            loss,
            eps_mse,
            recon_mse,
        });

        if let Some(dir) = ckpt_dir {
            if tcfg.checkpoint_every > 0 && step % tcfg.checkpoint_every as u64 == 0 {
                write_checkpoint_pair(dir, &format!("{step:06}"), cfg, &state)?;
            }
        }
    }

    if let Some(dir) = ckpt_dir {
        write_checkpoint_pair(dir, "final", cfg, &state)?;
    }
    Ok(state)
}

/// One decoupled-decay adaptive-moment update. `grad_sum` holds per-sample
/// gradient sums; dividing by the sample count here (single place) keeps
/// accumulated and concatenated batches numerically identical.
fn adamw_step(
    state: &mut TrainState,
    tcfg: &TrainConfig,
    grad_sum: &[Tensor2],
    n_samples: f64,
    step: u64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..grad_sum.len() {
        let g_sum = grad_sum[i].data();
        let m = state.m.tensor_mut(i);
        let v = state.v.tensor_mut(i);
        let w = state.params.tensor_mut(i);
        debug_assert_eq!(w.shape(), grad_sum[i].shape());
        let (m, v, w) = (m.data_mut(), v.data_mut(), w.data_mut());
        for j in 0..w.len() {
            let g = g_sum[j] / n_samples;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= tcfg.learning_rate * (m_hat / (v_hat.sqrt() + ADAM_EPS))
                + tcfg.learning_rate * tcfg.weight_decay * w[j];
        }
    }
}

fn write_checkpoint_pair(
    dir: &Path,
    label: &str,
    cfg: &ModelConfig,
    state: &TrainState,
) -> Result<()> {
    save_checkpoint(&dir.join(format!("model-{label}.ckpt")), cfg, &state.params)?;
    save_train_state(&dir.join(format!("train-{label}.state")), cfg, state)
}

/// Writes the loss history as CSV with a fixed header. Float fields use the
/// shortest round-trip decimal form, so files are byte-stable across runs.
pub fn write_loss_csv(path: &Path, history: &[LossPoint]) -> Result<()> {
    let mut out = String::from("step,loss,eps_mse,recon_mse\n");
    for p in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.step, p.loss, p.eps_mse, p.recon_mse
        ));
    }
    write_file(path, out.as_bytes())
}

/// Mean loss over the last `n` logged steps (or all of them if fewer).
pub fn tail_mean_loss(history: &[LossPoint], n: usize) -> f64 {
    let tail = &history[history.len().saturating_sub(n)..];
    tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64
}

/// Shared resources for the pseudo-singer grouping sweep: the melody bank
/// size stays fixed while its partition into groups varies, so every
/// setting sees the same amount of music.
#[derive(Debug, Clone)]
pub struct GroupSweepBudget {
    /// Total melodies across all groups; every entry of the sweep list must
    /// divide it.
    pub total_melodies: usize,
    pub variants_per_melody: usize,
    pub holdout_fraction: f64,
    pub max_chars: usize,
    /// Deterministic ODE steps for the held-out-lyric sampling pass.
    pub sample_steps: usize,
    pub guidance_w: f64,
    /// Cap on evaluated pairs per setting; 0 evaluates every held-out lyric.
    pub max_eval_pairs: usize,
}

impl Default for GroupSweepBudget {
    fn default() -> Self {
        GroupSweepBudget {
            total_melodies: 40,
            variants_per_melody: 10,
            holdout_fraction: 0.2,
            max_chars: 3,
            sample_steps: 25,
            guidance_w: 4.0,
            max_eval_pairs: 8,
        }
    }
}

/// One grouping-sweep setting's outcome: objective metrics on freshly
/// sampled mels for held-out lyrics over in-set melodies, scored against
/// the oracle rendering of the same scores.
#[derive(Debug, Clone)]
pub struct GroupSweepRow {
    pub n_groups: usize,
    pub melodies_per_group: usize,
    pub train_samples: usize,
    pub eval_pairs: usize,
    /// Mean training loss over the final 100 steps.
    pub final_loss: f64,
    pub mcd: f64,
    pub ffe: f64,
    pub f0rmse: Option<f64>,
}

/// Sweeps the number of pseudo-singer groups under a fixed melody budget.
///
/// For each entry of `n_groups_list` the same melody bank (fixed by `seed`
/// and the budget) is partitioned into that many speaker groups, a model is
/// trained from scratch with `tcfg`, and unseen lyric variants of training
/// melodies are sampled and scored against their oracle mels. Rows report
/// the trend; no shape is asserted here since the toy corpus need not place
/// its optimum where a full-scale corpus would. Training is from scratch
/// per setting rather than base-then-finetune, which keeps settings
/// comparable without inventing a transfer recipe.
///
/// The speaker embedding is sized once for the largest setting so every row
/// trains the same architecture.
pub fn grouped_pseudosinger_experiment(
    cfg: &ModelConfig,
    n_groups_list: &[usize],
    budget: &GroupSweepBudget,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<GroupSweepRow>> {
    if n_groups_list.is_empty() {
        return Err(Error::Contract("need at least one group count".to_string()));
    }
    let mut cfg = cfg.clone();
    cfg.speaker_count = cfg
        .speaker_count
        .max(*n_groups_list.iter().max().expect("non-empty list"));
    let master = Rng::new(seed);
    let mut rows = Vec::with_capacity(n_groups_list.len());
    for (setting, &n_groups) in n_groups_list.iter().enumerate() {
        if n_groups == 0 || budget.total_melodies % n_groups != 0 {
            return Err(Error::Contract(format!(
                "group count {n_groups} must divide the melody budget {}",
                budget.total_melodies
            )));
        }
        let params = CorpusParams {
            seed,
            n_groups,
            melodies_per_group: budget.total_melodies / n_groups,
            variants_per_melody: budget.variants_per_melody,
            holdout_fraction: budget.holdout_fraction,
            max_chars: budget.max_chars,
            phoneme_vocab: cfg.phoneme_vocab,
            geometry: CorpusGeometry {
                bins: cfg.mel_bins,
                hop: cfg.hop,
                sample_rate: cfg.sample_rate,
            },
        };
        let (train_corpus, test_corpus) = crate::score::build_corpus(&params)?;
        let state = train(&cfg, &train_corpus, tcfg, None)?;

        let schedule = NoiseSchedule::new(tcfg.schedule, tcfg.timesteps)?;
        let guidance = GuidanceConfig {
            w: budget.guidance_w,
            cond_dropout_p: tcfg.cond_dropout_p,
        };
        let mask_delta = tcfg.use_alignment_mask.then_some(tcfg.span_delta);
        let held_out: Vec<&CorpusSample> = test_corpus
            .samples_in(Split::LyricHoldout)
            .take(if budget.max_eval_pairs == 0 {
                usize::MAX
            } else {
                budget.max_eval_pairs
            })
            .collect();
        let mut reports = Vec::with_capacity(held_out.len());
        for (i, sample) in held_out.iter().enumerate() {
            let mut rng = master.derive("sweep_sample", ((setting as u64) << 32) | i as u64);
            let hyp = sample_ode(
                &state.params,
                &cfg,
                &sample.score,
                &schedule,
                &guidance,
                &mut rng,
                budget.sample_steps,
                mask_delta,
            )?;
            let report = crate::metrics::evaluate_pair(&sample.mel, &hyp, None, None)?;
            reports.push((sample.id.clone(), report));
        }
        let (mcd, ffe, f0rmse, _) = crate::metrics::aggregate(&reports)
            .ok_or_else(|| Error::Contract("sweep setting produced no eval pairs".to_string()))?;
        rows.push(GroupSweepRow {
            n_groups,
            melodies_per_group: params.melodies_per_group,
            train_samples: train_corpus.samples_in(Split::Train).count(),
            eval_pairs: reports.len(),
            final_loss: tail_mean_loss(&state.loss_history, 100),
            mcd,
            ffe,
            f0rmse,
        });
    }
    Ok(rows)
}

/// Renders sweep rows as CSV; `f0rmse` is empty when a row has none.
pub fn group_sweep_csv(rows: &[GroupSweepRow]) -> String {
    let mut out = String::from(
        "n_groups,melodies_per_group,train_samples,eval_pairs,final_loss,mcd,ffe,f0rmse\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.n_groups,
            r.melodies_per_group,
            r.train_samples,
            r.eval_pairs,
            r.final_loss,
            r.mcd,
            r.ffe,
            r.f0rmse.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    out
}

fn write_tensor(w: &mut ByteWriter, t: &Tensor2) {
    w.u32(t.rows() as u32);
    w.u32(t.cols() as u32);
    for &v in t.data() {
        w.f64(v);
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor2> {
    let rows = r.count(MAX_DIM, "state tensor rows")?;
    let cols = r.count(MAX_DIM, "state tensor cols")?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    Tensor2::new(rows, cols, data)
}

/// Serializes the full optimization state at 64-bit precision (the model
/// checkpoint format is float32 and is not enough for bit-exact resume).
pub fn save_train_state(path: &Path, cfg: &ModelConfig, state: &TrainState) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(STATE_MAGIC);
    w.u32(STATE_VERSION);
    write_config(&mut w, cfg);
    w.u64(state.step);
    w.bytes(&state.rng.seed);
    w.u64(state.rng.word_pos as u64);
    w.u64((state.rng.word_pos >> 64) as u64);
    w.u32(state.params.len() as u32);
    for (name, t) in state.params.entries() {
        w.str(name);
        write_tensor(&mut w, t);
    }
    for moments in [&state.m, &state.v] {
        for (_, t) in moments.entries() {
            write_tensor(&mut w, t);
        }
    }
    w.u32(state.loss_history.len() as u32);
    for p in &state.loss_history {
        w.u64(p.step);
        w.f64(p.loss);
        w.f64(p.eps_mse);
        w.f64(p.recon_mse);
    }
    write_file(path, &w.into_checksummed())
}

/// Reads back a state file, verifying the checksum before parsing and the
/// parameter inventory against the embedded model config.
pub fn load_train_state(path: &Path) -> Result<(ModelConfig, TrainState)> {
    let bytes = read_file(path)?;
    let what = "train state";
    let payload = open_checksummed(&bytes, what)?;
    let mut r = ByteReader::new(payload, what);
    expect_header(&mut r, STATE_MAGIC, STATE_VERSION, what)?;
    let cfg = read_config(&mut r)?;
    let step = r.u64()?;
    let mut seed = [0u8; 32];
    for b in seed.iter_mut() {
        *b = r.u8()?;
    }
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let rng = RngState {
        seed,
        word_pos: (hi << 64) | lo,
    };
    let n_params = r.count(MAX_PARAMS, "parameter")?;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str()?;
        entries.push((name, read_tensor(&mut r)?));
    }
    let params = ParamSet::from_entries(&cfg, entries)?;
    let mut moments = Vec::new();
    for _ in 0..2 {
        let mut ts = Vec::with_capacity(n_params);
        for name in params.names() {
            ts.push((name.clone(), read_tensor(&mut r)?));
        }
        moments.push(ParamSet::from_entries(&cfg, ts)?);
    }
    let v = moments.pop().expect("two moment sets were just read");
    let m = moments.pop().expect("two moment sets were just read");
    let n_hist = r.count(MAX_HISTORY, "loss history entry")?;
    let mut loss_history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        loss_history.push(LossPoint {
            step: r.u64()?,
            loss: r.f64()?,
            eps_mse: r.f64()?,
            recon_mse: r.f64()?,
        });
    }
    r.finish()?;
    Ok((
        cfg,
        TrainState {
            step,
            params,
            m,
            v,
            rng,
            loss_history,
        },
    ))
}
