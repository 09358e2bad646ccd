//! Denoising diffusion over mel latents.
//!
//! The forward process corrupts tokenized mels with Gaussian noise under a
//! fixed variance schedule; the model learns to predict that noise. Two
//! samplers invert the process: a stochastic ancestral chain and a
//! deterministic first-order exponential integrator over the probability
//! flow, stepped uniformly in log signal-to-noise ratio. Guided prediction
//! blends the conditional and unconditional branches with strength `w`;
//! `w = 0` and `w = 1` short-circuit to a single branch so those identities
//! hold bitwise.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::net::{self, condition_bundle, unconditional_bundle, ConditionBundle, Forward};
use crate::model::params::ParamSet;
use crate::numerics::{Rng, Tape, Tensor2, Var};
use crate::score::{MelTensor, ScoreSequence};

/// Default diffusion chain length.
pub const DEFAULT_TIMESTEPS: usize = 1000;
/// Linear schedule endpoints.
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Offset of the squared-cosine signal curve.
const COSINE_S: f64 = 0.008;
/// Per-step variance cap for the cosine schedule's tail.
const BETA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Guidance strength and the training-time condition dropout rate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub w: f64,
    pub cond_dropout_p: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w: 4.0,
            cond_dropout_p: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) {
            return Err(Error::Config(format!("guidance w {} must be >= 0", self.w)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Config(format!(
                "cond_dropout_p {} outside [0, 1]",
                self.cond_dropout_p
            )));
        }
        Ok(())
    }
}

/// Variance schedule tables, 1-indexed by timestep.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, timesteps: usize) -> Result<NoiseSchedule> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one step".to_string()));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..timesteps)
                .map(|i| {
                    if timesteps == 1 {
                        BETA_START
                    } else {
                        BETA_START + (BETA_END - BETA_START) * i as f64 / (timesteps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                // Squared-cosine signal curve; betas are its per-step decay.
                let f = |t: f64| {
                    let arg = (t / timesteps as f64 + COSINE_S) / (1.0 + COSINE_S)
                        * std::f64::consts::FRAC_PI_2;
                    arg.cos().powi(2)
                };
                (1..=timesteps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(BETA_MAX))
                    .collect()
            }
        };
        NoiseSchedule::from_betas(kind, betas)
    }

    /// Builds the cumulative-product tables for an explicit beta sequence
    /// and validates the schedule invariants.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".to_string()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        let schedule = NoiseSchedule {
            kind,
            betas,
            alpha_bars,
        };
        schedule.check_invariants()?;
        Ok(schedule)
    }

    pub fn linear(timesteps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::new(ScheduleKind::Linear, timesteps)
    }

    pub fn cosine(timesteps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::new(ScheduleKind::Cosine, timesteps)
    }

    fn check_invariants(&self) -> Result<()> {
        let mut prev_beta = 0.0;
        let mut prev_bar = 1.0;
        for (i, (&b, &bar)) in self.betas.iter().zip(&self.alpha_bars).enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("beta_{} = {b} outside (0, 1)", i + 1)));
            }
            if self.kind == ScheduleKind::Linear && b < prev_beta {
                return Err(Error::Config(format!("beta_{} decreases", i + 1)));
            }
            if !(bar < prev_bar) {
                return Err(Error::Config(format!(
                    "alpha_bar_{} fails to decrease",
                    i + 1
                )));
            }
            prev_beta = b;
            prev_bar = bar;
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.len() {
            return Err(Error::Contract(format!(
                "timestep {t} outside [{lo}, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// `beta_t`, `t` in `[1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal fraction; `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise scale `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Log signal-to-noise ratio `ln(signal/sigma)`, `t` in `[1, T]`.
    pub fn log_snr(&self, t: usize) -> f64 {
        (self.signal(t) / self.sigma(t)).ln()
    }
}

/// Closed-form corruption: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
/// `t = 0` is the identity by the `alpha_bar(0) = 1` convention.
pub fn q_sample(
    x0: &Tensor2,
    t: usize,
    eps: &Tensor2,
    schedule: &NoiseSchedule,
) -> Result<Tensor2> {
    schedule.check_t(t, 0)?;
    x0.same_shape(eps, "q_sample")?;
    let (a, s) = (schedule.signal(t), schedule.sigma(t));
    x0.zip(eps, |x, e| a * x + s * e, "q_sample")
}

/// Training-loss terms; the noise term is the primary objective, the
/// round-trip term keeps the detokenizer trained (it is otherwise outside
/// the noise-prediction path).
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub eps_mse: f64,
    pub recon_mse: f64,
    pub recon_weight: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.eps_mse + self.recon_weight * self.recon_mse
    }
}

/// Tape handles for the loss pieces of one sample.
pub struct LossVars {
    pub eps_mse: Var,
    pub recon_mse: Var,
    pub total: Var,
}

/// Builds the loss graph for one (score, mel) pair on an existing tape.
/// The caller supplies the randomness (timestep, noise, dropout decision),
/// which keeps this function deterministic and testable.
#[allow(clippy::too_many_arguments)]
pub fn loss_forward(
    fw: &mut Forward,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    score: &ScoreSequence,
    mel: &MelTensor,
    t: usize,
    eps: &Tensor2,
    drop_conditions: bool,
    mask_delta: Option<f64>,
    recon_weight: f64,
) -> Result<LossVars> {
    schedule.check_t(t, 1)?;
    net::check_geometry(cfg, mel)?;
    let frames = mel.frames();
    let l_lat = cfg.latent_frames(frames);
    if eps.shape() != (l_lat, cfg.width) {
        return Err(Error::shape(
            "loss_forward",
            &format!("noise of shape {l_lat} x {}", cfg.width),
            &format!("{} x {}", eps.rows(), eps.cols()),
        ));
    }
    let mel_var = fw.tape.constant(mel.values.clone());
    let z0 = fw.tokenize(mel_var)?;
    let eps_var = fw.tape.constant(eps.clone());
    let (a, s) = (schedule.signal(t), schedule.sigma(t));
    let x_t = fw.tape.add_weighted(z0, a, eps_var, s);

    let cond = if drop_conditions {
        fw.unconditioned(score.speaker_id, t, l_lat)?
    } else {
        let mask = match mask_delta {
            Some(delta) => crate::alignment::score_mask(score, delta, l_lat, cfg.latent_clock())?,
            None => crate::alignment::permissive_mask(score.tokens.len(), l_lat, cfg.latent_clock()),
        };
        fw.conditioned(score, t, &mask)?
    };
    let eps_hat = fw.predict_noise(x_t, &cond)?;
    let eps_mse = fw.tape.mse(eps_hat, eps_var);

    let recon = fw.detokenize(z0, frames)?;
    let recon_mse = fw.tape.mse(recon, mel_var);
    let total = fw.tape.add_weighted(eps_mse, 1.0, recon_mse, recon_weight);
    Ok(LossVars {
        eps_mse,
        recon_mse,
        total,
    })
}

/// Value-level training loss: draws the timestep, the dropout decision, and
/// the noise from `rng` (in that order), then evaluates the loss graph.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    score: &ScoreSequence,
    mel: &MelTensor,
    rng: &mut Rng,
    guidance: &GuidanceConfig,
    mask_delta: Option<f64>,
    recon_weight: f64,
) -> Result<LossTerms> {
    net::check_geometry(cfg, mel)?;
    let l_lat = cfg.latent_frames(mel.frames());
    let t = 1 + rng.uniform_usize(schedule.len());
    let drop = rng.coin(guidance.cond_dropout_p);
    let eps = rng.normal_tensor(l_lat, cfg.width);

    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let mut fw = Forward::new(&mut tape, &vars, cfg);
    let parts = loss_forward(
        &mut fw, cfg, schedule, score, mel, t, &eps, drop, mask_delta, recon_weight,
    )?;
    let eps_mse = tape.value(parts.eps_mse).get(0, 0);
    let recon_mse = tape.value(parts.recon_mse).get(0, 0);
    if !eps_mse.is_finite() || !recon_mse.is_finite() {
        return Err(Error::NonFinite("training loss".to_string()));
    }
    Ok(LossTerms {
        eps_mse,
        recon_mse,
        recon_weight,
    })
}

/// Anything that maps `(x_t, t)` to predicted noise. Samplers depend on
/// this rather than the network so tests can plug in analytic stubs.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor2, t: usize) -> Result<Tensor2>;
}

/// Guided affine blend: `eps_u + w (eps_c - eps_u)`. The `w = 0` and
/// `w = 1` cases run a single branch, so they match that branch bitwise.
pub fn cfg_epsilon(
    params: &ParamSet,
    cfg: &ModelConfig,
    x_t: &Tensor2,
    t: usize,
    cond: &ConditionBundle,
    uncond: &ConditionBundle,
    w: f64,
) -> Result<Tensor2> {
    if !(w >= 0.0) {
        return Err(Error::Contract(format!("guidance w {w} must be >= 0")));
    }
    if w == 0.0 {
        return net::predict_noise(params, cfg, x_t, t, uncond);
    }
    if w == 1.0 {
        return net::predict_noise(params, cfg, x_t, t, cond);
    }
    let eps_c = net::predict_noise(params, cfg, x_t, t, cond)?;
    let eps_u = net::predict_noise(params, cfg, x_t, t, uncond)?;
    eps_u.zip(&eps_c, |u, c| u + w * (c - u), "cfg_epsilon")
}

/// The network plus both condition branches, ready for a sampler.
pub struct GuidedModel<'a> {
    pub params: &'a ParamSet,
    pub cfg: &'a ModelConfig,
    pub cond: ConditionBundle,
    pub uncond: ConditionBundle,
    pub w: f64,
}

impl<'a> GuidedModel<'a> {
    pub fn for_score(
        params: &'a ParamSet,
        cfg: &'a ModelConfig,
        score: &ScoreSequence,
        guidance: &GuidanceConfig,
        mask_delta: Option<f64>,
        latent_frames: usize,
    ) -> Result<GuidedModel<'a>> {
        guidance.validate()?;
        Ok(GuidedModel {
            params,
            cfg,
            cond: condition_bundle(params, cfg, score, mask_delta, latent_frames)?,
            uncond: unconditional_bundle(params, cfg, score.speaker_id, latent_frames)?,
            w: guidance.w,
        })
    }
}

impl NoisePredictor for GuidedModel<'_> {
    fn predict(&self, x_t: &Tensor2, t: usize) -> Result<Tensor2> {
        cfg_epsilon(
            self.params, self.cfg, x_t, t, &self.cond, &self.uncond, self.w,
        )
    }
}

/// Decreasing timestep grid for the ancestral sampler: `steps` segments
/// evenly spaced in t, always ending at 0.
fn ancestral_grid(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Contract(format!(
            "ancestral steps {steps} outside [1, {timesteps}]"
        )));
    }
    let mut taus: Vec<usize> = (0..=steps)
        .rev()
        .map(|k| ((k as f64 / steps as f64) * timesteps as f64).round() as usize)
        .collect();
    taus.dedup();
    debug_assert_eq!(taus[0], timesteps);
    debug_assert_eq!(*taus.last().unwrap(), 0);
    Ok(taus)
}

/// Stochastic reversal: posterior mean plus per-step Gaussian noise, with
/// the final step (to t = 0) noise-free. Returns latents.
pub fn sample_latents_ancestral(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_init: &Tensor2,
    rng: &mut Rng,
    steps: usize,
) -> Result<Tensor2> {
    let taus = ancestral_grid(schedule.len(), steps)?;
    let mut x = x_init.clone();
    for pair in taus.windows(2) {
        let (t_cur, t_prev) = (pair[0], pair[1]);
        let eps_hat = model.predict(&x, t_cur)?;
        eps_hat.same_shape(&x, "sample_ancestral prediction")?;
        let ab_cur = schedule.alpha_bar(t_cur);
        let ab_prev = schedule.alpha_bar(t_prev);
        // Posterior variance of the sub-chain jump; zero when ab_prev = 1.
        let var = (1.0 - ab_prev) / (1.0 - ab_cur) * (1.0 - ab_cur / ab_prev);
        let x0_coef = ab_prev.sqrt();
        let eps_coef = (1.0 - ab_prev - var).max(0.0).sqrt();
        let sig_cur = (1.0 - ab_cur).sqrt();
        let mut next = Tensor2::zeros(x.rows(), x.cols());
        let noise = if t_prev > 0 {
            Some(rng.normal_tensor(x.rows(), x.cols()))
        } else {
            None
        };
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let e = eps_hat.get(r, c);
                let x0_hat = (x.get(r, c) - sig_cur * e) / ab_cur.sqrt();
                let mut v = x0_coef * x0_hat + eps_coef * e;
                if let Some(z) = &noise {
                    v += var.sqrt() * z.get(r, c);
                }
                next.set(r, c, v);
            }
        }
        if !next.all_finite() {
            return Err(Error::NonFinite(format!(
                "ancestral sampler at t = {t_cur}"
            )));
        }
        x = next;
    }
    Ok(x)
}

/// Timestep grid for the exponential integrator: `steps` segments evenly
/// spaced in log-SNR between t = T and t = 1, snapped to the nearest
/// discrete timestep (the network embeds integer timesteps only).
fn ode_grid(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Contract("ode sampler needs steps >= 1".to_string()));
    }
    let t_max = schedule.len();
    let (l_start, l_end) = (schedule.log_snr(t_max), schedule.log_snr(1));
    let mut grid = vec![t_max];
    let mut t_cursor = t_max;
    for k in 1..=steps {
        let target = l_start + (l_end - l_start) * k as f64 / steps as f64;
        // log-SNR decreases with t: walk t downward to the closest value.
        while t_cursor > 1
            && (schedule.log_snr(t_cursor - 1) - target).abs()
                <= (schedule.log_snr(t_cursor) - target).abs()
        {
            t_cursor -= 1;
        }
        if *grid.last().unwrap() != t_cursor {
            grid.push(t_cursor);
        }
    }
    if *grid.last().unwrap() != 1 {
        grid.push(1);
    }
    Ok(grid)
}

/// Deterministic probability-flow integration (first-order exponential
/// integrator in log-SNR), followed by the exact projection to the clean
/// state at t = 1. Consumes no randomness.
pub fn sample_latents_ode(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    x_init: &Tensor2,
    steps: usize,
) -> Result<Tensor2> {
    let grid = ode_grid(schedule, steps)?;
    let mut x = x_init.clone();
    for pair in grid.windows(2) {
        let (t_a, t_b) = (pair[0], pair[1]);
        let eps_hat = model.predict(&x, t_a)?;
        eps_hat.same_shape(&x, "sample_ode prediction")?;
        let h = schedule.log_snr(t_b) - schedule.log_snr(t_a);
        let ratio = schedule.signal(t_b) / schedule.signal(t_a);
        let coef = schedule.sigma(t_b) * (h.exp() - 1.0);
        x = x.zip(&eps_hat, |xv, e| ratio * xv - coef * e, "ode step")?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("ode sampler at t = {t_a}")));
        }
    }
    // x is at t = 1; project out the remaining noise.
    let eps_hat = model.predict(&x, 1)?;
    let (a1, s1) = (schedule.signal(1), schedule.sigma(1));
    x.zip(&eps_hat, |xv, e| (xv - s1 * e) / a1, "ode projection")
}

fn initial_latents(cfg: &ModelConfig, score: &ScoreSequence, rng: &mut Rng) -> (usize, Tensor2) {
    let frames = cfg.mel_frames(score.total_duration);
    let l_lat = cfg.latent_frames(frames);
    let x = rng.normal_tensor(l_lat, cfg.width);
    (frames, x)
}

/// Full ancestral pipeline: noise in, mel out.
#[allow(clippy::too_many_arguments)]
pub fn sample_ancestral(
    params: &ParamSet,
    cfg: &ModelConfig,
    score: &ScoreSequence,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut Rng,
    steps: usize,
    mask_delta: Option<f64>,
) -> Result<MelTensor> {
    let (frames, x_init) = initial_latents(cfg, score, rng);
    let model = GuidedModel::for_score(params, cfg, score, guidance, mask_delta, x_init.rows())?;
    let x0 = sample_latents_ancestral(&model, schedule, &x_init, rng, steps)?;
    net::detokenize(params, cfg, &x0, frames)
}

/// Full deterministic pipeline: the only randomness is the initial latent.
#[allow(clippy::too_many_arguments)]
pub fn sample_ode(
    params: &ParamSet,
    cfg: &ModelConfig,
    score: &ScoreSequence,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut Rng,
    steps: usize,
    mask_delta: Option<f64>,
) -> Result<MelTensor> {
    let (frames, x_init) = initial_latents(cfg, score, rng);
    let model = GuidedModel::for_score(params, cfg, score, guidance, mask_delta, x_init.rows())?;
    let x0 = sample_latents_ode(&model, schedule, &x_init, steps)?;
    net::detokenize(params, cfg, &x0, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{CharSpan, PhonemeToken};

    fn tiny() -> (ModelConfig, ParamSet) {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let params = ParamSet::init(&cfg, &mut Rng::new(0));
        (cfg, params)
    }

    fn demo_score() -> ScoreSequence {
        ScoreSequence {
            tokens: vec![
                PhonemeToken { phoneme_id: 3, pitch: 62, word_duration_bucket: 6, slur: false },
                PhonemeToken { phoneme_id: 1, pitch: 65, word_duration_bucket: 4, slur: false },
            ],
            spans: vec![
                CharSpan { start_time: 0.0, duration: 0.15, phoneme_range: 0..1 },
                CharSpan { start_time: 0.15, duration: 0.15, phoneme_range: 1..2 },
            ],
            speaker_id: 2,
            total_duration: 0.3,
        }
    }

    fn demo_mel(cfg: &ModelConfig, score: &ScoreSequence, seed: u64) -> MelTensor {
        let mut rng = Rng::new(seed);
        MelTensor {
            values: rng
                .normal_tensor(cfg.mel_frames(score.total_duration), cfg.mel_bins)
                .map(|v| v * 0.3),
            hop: cfg.hop,
            sample_rate: cfg.sample_rate,
        }
    }

    /// Analytic stub: predicted noise equals the state.
    struct IdentityModel;
    impl NoisePredictor for IdentityModel {
        fn predict(&self, x_t: &Tensor2, _t: usize) -> Result<Tensor2> {
            Ok(x_t.clone())
        }
    }

    #[test]
    fn linear_schedule_tables() {
        let s = NoiseSchedule::linear(DEFAULT_TIMESTEPS).unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s.beta(1) - BETA_START).abs() < 1e-15);
        assert!((s.beta(1000) - BETA_END).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        // Terminal state is essentially pure noise.
        assert!(
            s.alpha_bar(1000) < 0.01,
            "alpha_bar(T) = {}",
            s.alpha_bar(1000)
        );
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn cosine_schedule_tables() {
        let s = NoiseSchedule::cosine(100).unwrap();
        assert_eq!(s.len(), 100);
        for t in 1..=100 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(100) < 0.01);
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::linear(10).unwrap();
        let mut rng = Rng::new(1);
        let x0 = rng.normal_tensor(3, 4);
        let eps = rng.normal_tensor(3, 4);
        // t = 0: identity.
        assert!(q_sample(&x0, 0, &eps, &s).unwrap().bit_eq(&x0));
        // eps = 0: pure shrinkage by the signal scale.
        let zero = Tensor2::zeros(3, 4);
        let shrunk = q_sample(&x0, 7, &zero, &s).unwrap();
        let a = s.signal(7);
        for (v, o) in shrunk.data().iter().zip(x0.data()) {
            assert!((v - a * o).abs() < 1e-15);
        }
        assert!(q_sample(&x0, 11, &eps, &s).is_err());
        let bad = Tensor2::zeros(2, 4);
        assert!(q_sample(&x0, 3, &bad, &s).is_err());
    }

    /// Iterating the one-step corruption must match the closed-form
    /// marginal: mean within 3 sigma of Monte-Carlo error, variance within
    /// 3 percent.
    #[test]
    fn iterated_corruption_matches_closed_form() {
        const T: usize = 10;
        const N: usize = 10_000;
        let s = NoiseSchedule::linear(T).unwrap();
        let mut rng = Rng::new(42);
        let x0 = rng.normal_tensor(2, 3);

        let mut sums = Tensor2::zeros(2, 3);
        let mut sq_sums = Tensor2::zeros(2, 3);
        for _ in 0..N {
            let mut x = x0.clone();
            for t in 1..=T {
                let z = rng.normal_tensor(2, 3);
                let b = s.beta(t);
                x = x
                    .zip(&z, |xv, zv| (1.0 - b).sqrt() * xv + b.sqrt() * zv, "step")
                    .unwrap();
            }
            for r in 0..2 {
                for c in 0..3 {
                    sums.set(r, c, sums.get(r, c) + x.get(r, c));
                    sq_sums.set(r, c, sq_sums.get(r, c) + x.get(r, c) * x.get(r, c));
                }
            }
        }
        let (a, var_target) = (s.signal(T), 1.0 - s.alpha_bar(T));
        let sigma = var_target.sqrt();
        let mc_sigma = sigma / (N as f64).sqrt();
        for r in 0..2 {
            for c in 0..3 {
                let mean = sums.get(r, c) / N as f64;
                let var = sq_sums.get(r, c) / N as f64 - mean * mean;
                let mean_err = (mean - a * x0.get(r, c)).abs();
                assert!(
                    mean_err < 3.0 * mc_sigma,
                    "mean err {mean_err} vs 3 sigma {}",
                    3.0 * mc_sigma
                );
                let var_err = (var - var_target).abs() / var_target;
                assert!(var_err < 0.03, "variance off by {var_err}");
            }
        }
    }

    #[test]
    fn guided_identities_are_bitwise() {
        let (cfg, params) = tiny();
        let score = demo_score();
        let schedule = NoiseSchedule::linear(50).unwrap();
        let l_lat = cfg.latent_frames(cfg.mel_frames(score.total_duration));
        let cond = condition_bundle(&params, &cfg, &score, Some(1.0), l_lat).unwrap();
        let uncond = unconditional_bundle(&params, &cfg, score.speaker_id, l_lat).unwrap();
        let mut rng = Rng::new(3);
        let x_t = rng.normal_tensor(l_lat, cfg.width);
        let t = schedule.len() / 2;

        let eps_c = net::predict_noise(&params, &cfg, &x_t, t, &cond).unwrap();
        let eps_u = net::predict_noise(&params, &cfg, &x_t, t, &uncond).unwrap();
        let w0 = cfg_epsilon(&params, &cfg, &x_t, t, &cond, &uncond, 0.0).unwrap();
        let w1 = cfg_epsilon(&params, &cfg, &x_t, t, &cond, &uncond, 1.0).unwrap();
        assert!(w0.bit_eq(&eps_u), "w = 0 must equal the unconditional branch");
        assert!(w1.bit_eq(&eps_c), "w = 1 must equal the conditional branch");

        let w4 = cfg_epsilon(&params, &cfg, &x_t, t, &cond, &uncond, 4.0).unwrap();
        for ((g, u), c) in w4.data().iter().zip(eps_u.data()).zip(eps_c.data()) {
            assert!((g - (u + 4.0 * (c - u))).abs() < 1e-12);
        }
        assert!(cfg_epsilon(&params, &cfg, &x_t, t, &cond, &uncond, -1.0).is_err());
    }

    #[test]
    fn zero_init_loss_near_one() {
        let (cfg, params) = tiny();
        let score = demo_score();
        let mel = demo_mel(&cfg, &score, 5);
        let schedule = NoiseSchedule::linear(DEFAULT_TIMESTEPS).unwrap();
        let guidance = GuidanceConfig::default();
        let mut total = 0.0;
        for seed in 0..100 {
            let mut rng = Rng::new(1000 + seed);
            let terms = training_loss(
                &params, &cfg, &schedule, &score, &mel, &mut rng, &guidance, Some(1.0), 1.0,
            )
            .unwrap();
            total += terms.eps_mse;
        }
        let mean = total / 100.0;
        // Zero-init head predicts zero, so the noise term is E[eps^2] = 1.
        assert!(
            (mean - 1.0).abs() < 0.05,
            "mean zero-init noise loss {mean}"
        );
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        // The objective's zero point: plugging the true noise into the MSE.
        let s = NoiseSchedule::linear(100).unwrap();
        let mut rng = Rng::new(6);
        let x0 = rng.normal_tensor(4, 8);
        let eps = rng.normal_tensor(4, 8);
        let x_t = q_sample(&x0, 60, &eps, &s).unwrap();
        let stub = |x: &Tensor2, _t: usize| -> Tensor2 {
            // Oracle stub recovers exactly the noise that built x_t.
            x.zip(&x0, |xv, ov| (xv - s.signal(60) * ov) / s.sigma(60), "stub")
                .unwrap()
        };
        let eps_hat = stub(&x_t, 60);
        let mse: f64 = eps_hat
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / eps.len() as f64;
        assert!(mse < 1e-22, "oracle stub loss {mse}");
    }

    #[test]
    fn dropped_conditions_ignore_the_score() {
        let (cfg, params) = tiny();
        let score_a = demo_score();
        let mut score_b = demo_score();
        score_b.tokens[0].phoneme_id = 7;
        score_b.tokens[1].pitch = 80;
        let mel = demo_mel(&cfg, &score_a, 7);
        let schedule = NoiseSchedule::linear(100).unwrap();
        let mut rng = Rng::new(8);
        let t = 31;
        let eps = rng.normal_tensor(cfg.latent_frames(mel.frames()), cfg.width);

        let run = |score: &ScoreSequence| -> f64 {
            let mut tape = Tape::new();
            let vars = params.register_frozen(&mut tape);
            let mut fw = Forward::new(&mut tape, &vars, &cfg);
            let parts = loss_forward(
                &mut fw, &cfg, &schedule, score, &mel, t, &eps, true, Some(1.0), 1.0,
            )
            .unwrap();
            tape.value(parts.total).get(0, 0)
        };
        let a = run(&score_a);
        let b = run(&score_b);
        assert_eq!(a.to_bits(), b.to_bits(), "unconditional loss saw the score");
    }

    #[test]
    fn ancestral_grid_properties() {
        let taus = ancestral_grid(1000, 1000).unwrap();
        assert_eq!(taus.len(), 1001);
        assert_eq!(taus[0], 1000);
        assert_eq!(taus[1000], 0);
        let taus = ancestral_grid(1000, 7).unwrap();
        assert_eq!(*taus.first().unwrap(), 1000);
        assert_eq!(*taus.last().unwrap(), 0);
        assert!(taus.windows(2).all(|p| p[0] > p[1]));
        assert!(ancestral_grid(100, 0).is_err());
        assert!(ancestral_grid(100, 101).is_err());
    }

    #[test]
    fn single_full_step_matches_textbook_posterior() {
        // One step of the generalized jump at the full grid equals the
        // classic posterior mean 1/sqrt(alpha) (x - beta/sigma eps).
        let s = NoiseSchedule::linear(10).unwrap();
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor(2, 3);
        for t in [2usize, 5, 10] {
            let eps = rng.normal_tensor(2, 3);
            let ab_cur = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            let var = (1.0 - ab_prev) / (1.0 - ab_cur) * (1.0 - ab_cur / ab_prev);
            let sig_cur = (1.0 - ab_cur).sqrt();
            for r in 0..2 {
                for c in 0..3 {
                    let e = eps.get(r, c);
                    let x0_hat = (x.get(r, c) - sig_cur * e) / ab_cur.sqrt();
                    let mine =
                        ab_prev.sqrt() * x0_hat + (1.0 - ab_prev - var).max(0.0).sqrt() * e;
                    let alpha_t = 1.0 - s.beta(t);
                    let textbook = (x.get(r, c) - s.beta(t) / sig_cur * e) / alpha_t.sqrt();
                    assert!(
                        (mine - textbook).abs() < 1e-12,
                        "t={t}: {mine} vs {textbook}"
                    );
                }
            }
        }
    }

    #[test]
    fn ancestral_sampler_is_seed_deterministic() {
        let (cfg, params) = tiny();
        let score = demo_score();
        let schedule = NoiseSchedule::linear(20).unwrap();
        let guidance = GuidanceConfig { w: 1.0, cond_dropout_p: 0.1 };
        let run = |seed: u64, steps: usize| {
            let mut rng = Rng::new(seed);
            sample_ancestral(
                &params, &cfg, &score, &schedule, &guidance, &mut rng, steps, Some(1.0),
            )
            .unwrap()
        };
        let a = run(11, 20);
        let b = run(11, 20);
        assert!(a.values.bit_eq(&b.values));
        assert_eq!(a.frames(), cfg.mel_frames(score.total_duration));
        // A single-step jump still produces a finite, correctly sized mel.
        let one = run(12, 1);
        assert!(one.values.all_finite());
        assert_eq!(one.frames(), a.frames());
    }

    #[test]
    fn ode_sampler_consumes_no_rng_after_init() {
        let (cfg, params) = tiny();
        let score = demo_score();
        let schedule = NoiseSchedule::linear(20).unwrap();
        let guidance = GuidanceConfig { w: 1.0, cond_dropout_p: 0.1 };
        let mut rng_a = Rng::new(13);
        let a = sample_ode(
            &params, &cfg, &score, &schedule, &guidance, &mut rng_a, 10, Some(1.0),
        )
        .unwrap();
        let mut rng_b = Rng::new(13);
        let b = sample_ode(
            &params, &cfg, &score, &schedule, &guidance, &mut rng_b, 10, Some(1.0),
        )
        .unwrap();
        assert!(a.values.bit_eq(&b.values));
        // Both rngs must sit at the same position: draws after sampling agree.
        assert_eq!(rng_a.next_u64(), rng_b.next_u64());

        // And the post-init stream is untouched: drawing the initial latent
        // by hand leaves the rng exactly where the sampler left it.
        let mut rng_c = Rng::new(13);
        let l_lat = cfg.latent_frames(cfg.mel_frames(score.total_duration));
        let _ = rng_c.normal_tensor(l_lat, cfg.width);
        assert_eq!(rng_c.next_u64(), {
            let mut rng_d = Rng::new(13);
            let _ = sample_ode(
                &params, &cfg, &score, &schedule, &guidance, &mut rng_d, 5, Some(1.0),
            )
            .unwrap();
            rng_d.next_u64()
        });
    }

    /// With the identity stub, the probability-flow solution is
    /// x(t) proportional to 1 + sigma(t); the dense-grid solver must land
    /// within 1e-3 relative error of it.
    #[test]
    fn ode_solver_matches_linear_model_closed_form() {
        // Constant small beta keeps the log-SNR range narrow, so the
        // snapped grid stays dense everywhere the integrand matters.
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![1e-3; 8000]).unwrap();
        let mut rng = Rng::new(14);
        let x_init = rng.normal_tensor(3, 5);
        let out = sample_latents_ode(&IdentityModel, &s, &x_init, s.len() - 1).unwrap();

        let (sig_t, sig_1) = (s.sigma(s.len()), s.sigma(1));
        let factor = (1.0 + sig_1) / (1.0 + sig_t) * (1.0 - sig_1) / s.signal(1);
        let mut worst = 0.0f64;
        for (o, i) in out.data().iter().zip(x_init.data()) {
            let expect = factor * i;
            let rel = (o - expect).abs() / expect.abs().max(1e-12);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative error {worst:e}");
    }

    #[test]
    fn ode_self_convergence_ordering() {
        let s = NoiseSchedule::linear(DEFAULT_TIMESTEPS).unwrap();
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let x_init = rng.normal_tensor(4, 6);
            let run = |steps: usize| {
                sample_latents_ode(&IdentityModel, &s, &x_init, steps).unwrap()
            };
            let (r5, r25, r50) = (run(5), run(25), run(50));
            let gap = |a: &Tensor2, b: &Tensor2| -> f64 {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / a.len() as f64
            };
            let coarse = gap(&r5, &r50);
            let fine = gap(&r25, &r50);
            assert!(
                fine < coarse,
                "seed {seed}: 25-step gap {fine} not below 5-step gap {coarse}"
            );
        }
    }

    #[test]
    fn samplers_stay_finite_across_seeds_and_steps() {
        let (cfg, params) = tiny();
        let score = demo_score();
        let schedule = NoiseSchedule::linear(30).unwrap();
        let guidance = GuidanceConfig { w: 4.0, cond_dropout_p: 0.1 };
        for seed in 0..3 {
            for steps in [1usize, 7, 30] {
                let mut rng = Rng::new(200 + seed);
                let mel = sample_ancestral(
                    &params, &cfg, &score, &schedule, &guidance, &mut rng, steps, Some(1.0),
                )
                .unwrap();
                assert!(mel.values.all_finite());
                let mut rng = Rng::new(300 + seed);
                let mel = sample_ode(
                    &params, &cfg, &score, &schedule, &guidance, &mut rng, steps, Some(1.0),
                )
                .unwrap();
                assert!(mel.values.all_finite());
            }
        }
    }
}
