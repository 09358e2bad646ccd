//! The `meldit` command line: corpus generation, training, sampling,
//! evaluation, mask inspection, and the scaling and grouping experiment
//! drivers, all off one binary.
//!
//! Every run resolves its settings in three layers (defaults, then an
//! optional `--config` file, then flags; flags win), echoes the resolved
//! [`RunConfig`] into its output directory, and writes a `provenance.json`
//! sidecar with the config hash and code version, so any artifact can be
//! traced to the exact settings that produced it.
//!
//! Exit codes are stable: 2 for invalid flags or configuration, 3 for
//! unreadable or unwritable artifacts, 4 for a non-finite loss abort, 5 for
//! geometry mismatches, 6 for unpaired evaluation files.

pub mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diffusion::{sample_ancestral, sample_ode, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, load_f0, metric_csv, metric_json, F0Track, MetricReport};
use crate::model::{load_checkpoint, ModelConfig};
use crate::score::binio::{read_file, sha8, write_file};
use crate::score::{
    build_corpus, load_corpus, oracle_f0, save_corpus, save_mel, CorpusGeometry, CorpusParams,
    CorpusSample, Split, SyntheticCorpus,
};
use crate::trainer::{
    continue_train, grouped_pseudosinger_experiment, group_sweep_csv, load_train_state,
    tail_mean_loss, train, write_loss_csv, GroupSweepBudget, TrainConfig,
};
use config::{hex8, RunConfig, SamplerKind};

#[derive(Parser)]
#[command(
    name = "meldit",
    version,
    about = "Score-conditioned mel diffusion: data, training, sampling, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (train/ and test/ splits) from a seed.
    GenData(GenDataArgs),
    /// Train a denoiser on a corpus; writes checkpoints and a loss curve.
    Train(TrainArgs),
    /// Sample mels for corpus scores from a trained checkpoint.
    Sample(SampleArgs),
    /// Score paired hypothesis/reference mel files.
    Eval(EvalArgs),
    /// Print the cross-attention alignment mask for one corpus score.
    DumpMask(DumpMaskArgs),
    /// Train presets across corpus sizes and tabulate loss versus FLOPs.
    Scaling(ScalingArgs),
    /// Sweep pseudo-singer group counts under a fixed melody budget.
    Groups(GroupsArgs),
}

/// Maps every error to its documented exit code.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Malformed { .. } | Error::Checksum(_)
        | Error::VersionMismatch { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) => 4,
        Error::Geometry(_) | Error::ShapeMismatch { .. } => 5,
        Error::Unpaired(_) => 6,
    }
}

/// Parses arguments, runs the selected command, and converts errors into
/// exit codes. Clap usage errors exit with code 2 on their own.
pub fn run() -> std::process::ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::DumpMask(a) => cmd_dump_mask(a),
        Cmd::Scaling(a) => cmd_scaling(a),
        Cmd::Groups(a) => cmd_groups(a),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Writes the provenance sidecar every output directory carries.
fn write_provenance(
    dir: &Path,
    command: &str,
    config_hash: Option<&str>,
    extra: serde_json::Value,
) -> Result<()> {
    let mut obj = serde_json::json!({
        "command": command,
        "code_version": env!("CARGO_PKG_VERSION"),
    });
    if let Some(h) = config_hash {
        obj["config_hash"] = h.into();
    }
    if let serde_json::Value::Object(fields) = extra {
        for (k, v) in fields {
            obj[k] = v;
        }
    }
    let text = serde_json::to_string_pretty(&obj).expect("provenance is a flat object");
    write_file(&dir.join("provenance.json"), text.as_bytes())
}

// ---- gen-data ----

#[derive(Args)]
struct GenDataArgs {
    /// Pseudo-singer group count.
    #[arg(long)]
    groups: usize,
    /// Melodies per group.
    #[arg(long)]
    melodies: usize,
    /// Lyric variants per melody.
    #[arg(long)]
    variants: usize,
    /// Generation seed; mandatory so every corpus is reproducible.
    #[arg(long)]
    seed: u64,
    /// Output directory; receives train/ and test/ corpus subdirectories.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of melodies and of variants held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Longest lyric in characters.
    #[arg(long, default_value_t = 3)]
    max_chars: usize,
    #[arg(long, default_value_t = 8)]
    phoneme_vocab: usize,
    #[arg(long, default_value_t = 16)]
    bins: usize,
    #[arg(long, default_value_t = 64)]
    hop: u32,
    #[arg(long, default_value_t = 8000)]
    sample_rate: u32,
    /// Also write the oracle F0 track next to each mel file.
    #[arg(long)]
    emit_f0: bool,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let params = CorpusParams {
        seed: a.seed,
        n_groups: a.groups,
        melodies_per_group: a.melodies,
        variants_per_melody: a.variants,
        holdout_fraction: a.holdout,
        max_chars: a.max_chars,
        phoneme_vocab: a.phoneme_vocab,
        geometry: CorpusGeometry {
            bins: a.bins,
            hop: a.hop,
            sample_rate: a.sample_rate,
        },
    };
    let (train_corpus, test_corpus) = build_corpus(&params)?;
    save_corpus(&train_corpus, &a.out.join("train"))?;
    save_corpus(&test_corpus, &a.out.join("test"))?;
    if a.emit_f0 {
        for (corpus, part) in [(&train_corpus, "train"), (&test_corpus, "test")] {
            for s in &corpus.samples {
                let track = F0Track::from_hz(oracle_f0(
                    &s.score,
                    s.mel.frames(),
                    s.mel.hop,
                    s.mel.sample_rate,
                ));
                crate::metrics::save_f0(
                    &a.out.join(part).join("samples").join(format!("{}.f0", s.id)),
                    &track,
                )?;
            }
        }
    }
    let params_toml =
        toml::to_string_pretty(&params).expect("corpus params have no unserializable values");
    write_file(&a.out.join("corpus-params.toml"), params_toml.as_bytes())?;
    write_provenance(
        &a.out,
        "gen-data",
        Some(&hex8(&sha8(params_toml.as_bytes()))),
        serde_json::json!({}),
    )?;
    let train_n = train_corpus.samples.len();
    let lyric_n = test_corpus.samples_in(Split::LyricHoldout).count();
    let melody_n = test_corpus.samples_in(Split::MelodyHoldout).count();
    println!("train {train_n}");
    println!("lyric_holdout {lyric_n}");
    println!("melody_holdout {melody_n}");
    println!("total {}", train_n + lyric_n + melody_n);
    Ok(())
}

// ---- shared config resolution ----

/// Flags shared by every config-consuming subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Run config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset name (tiny, small, base, large; _2/_4 suffix halves or
    /// quarters the latent resolution).
    #[arg(long)]
    preset: Option<String>,
    /// Corpus root directory (holding train/ and test/).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            rc.model = ModelConfig::preset(p)?;
        }
        if let Some(c) = &self.corpus {
            rc.corpus = c.clone();
        }
        if let Some(o) = &self.out {
            rc.out_dir = o.clone();
        }
        Ok(rc)
    }
}

// ---- train ----

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: ConfigArgs,
    /// Total optimizer steps (a resumed run continues toward this count).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Steps between checkpoints; 0 writes only the final pair.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from a train-*.state file; the model config stored in the
    /// state takes over so the continuation is bit-exact.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train without the alignment mask (ablation): cross-attention sees
    /// every token for every frame.
    #[arg(long)]
    no_mask: bool,
    /// "paper" selects batch 8 with 6-step gradient accumulation.
    #[arg(long)]
    profile: Option<String>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut rc = a.shared.resolve()?;
    if let Some(profile) = &a.profile {
        if profile != "paper" {
            return Err(Error::Config(format!("unknown profile {profile:?}")));
        }
        let pp = TrainConfig::paper_profile();
        rc.train.batch_size = pp.batch_size;
        rc.train.grad_accum_steps = pp.grad_accum_steps;
    }
    if let Some(v) = a.iters {
        rc.train.iterations = v;
    }
    if let Some(v) = a.batch {
        rc.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        rc.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        rc.train.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        rc.train.checkpoint_every = v;
    }
    if a.no_mask {
        rc.train.use_alignment_mask = false;
    }
    let corpus = load_corpus(&rc.corpus.join("train"))?;
    let ckpt_dir = rc.out_dir.join("checkpoints");
    std::fs::create_dir_all(&rc.out_dir).map_err(|e| Error::io(&rc.out_dir, e))?;

    let state = match &a.resume {
        Some(path) => {
            let (cfg, state) = load_train_state(path)?;
            rc.model = cfg;
            rc.write(&rc.out_dir)?;
            print!("{}", rc.to_toml());
            continue_train(&rc.model, &corpus, &rc.train, state, Some(&ckpt_dir))?
        }
        None => {
            rc.write(&rc.out_dir)?;
            print!("{}", rc.to_toml());
            train(&rc.model, &corpus, &rc.train, Some(&ckpt_dir))?
        }
    };
    write_loss_csv(&rc.out_dir.join("loss.csv"), &state.loss_history)?;
    write_provenance(
        &rc.out_dir,
        "train",
        Some(&rc.hash()),
        serde_json::json!({ "steps": state.step }),
    )?;
    println!("steps {}", state.step);
    if !state.loss_history.is_empty() {
        println!("final_loss {}", tail_mean_loss(&state.loss_history, 100));
    }
    Ok(())
}

// ---- sample ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitArg {
    Train,
    LyricHoldout,
    MelodyHoldout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::LyricHoldout => Split::LyricHoldout,
            SplitArg::MelodyHoldout => Split::MelodyHoldout,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    shared: ConfigArgs,
    /// Model checkpoint (model-*.ckpt) to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus split providing the scores.
    #[arg(long, value_enum, default_value_t = SplitArg::LyricHoldout)]
    split: SplitArg,
    /// Sample only these corpus ids (default: the first `--limit` of the
    /// split).
    #[arg(long)]
    ids: Vec<String>,
    /// Cap on sampled clips; 0 samples the whole split.
    #[arg(long, default_value_t = 4)]
    limit: usize,
    #[arg(long, value_enum)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance strength; 0 produces unconditional output (flagged in the
    /// provenance sidecar).
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample without the alignment mask (ablation).
    #[arg(long)]
    no_mask: bool,
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let mut rc = a.shared.resolve()?;
    if let Some(s) = a.sampler {
        rc.sampler.sampler = s;
    }
    if let Some(s) = a.steps {
        rc.sampler.steps = s;
    }
    if let Some(w) = a.w {
        rc.guidance.w = w;
    }
    if let Some(s) = a.seed {
        rc.sampler.seed = s;
    }
    if a.no_mask {
        rc.train.use_alignment_mask = false;
    }

    let ckpt_bytes = read_file(&a.checkpoint)?;
    let (cfg, params) = load_checkpoint(&a.checkpoint)?;
    rc.model = cfg;
    let split: Split = a.split.into();
    let part = if split == Split::Train { "train" } else { "test" };
    let corpus = load_corpus(&rc.corpus.join(part))?;
    check_sampling_geometry(&rc.model, &corpus)?;

    let selected = select_samples(&corpus, split, &a.ids, a.limit)?;
    let schedule = NoiseSchedule::new(rc.train.schedule, rc.train.timesteps)?;
    let mask_delta = rc
        .train
        .use_alignment_mask
        .then_some(rc.train.span_delta);
    let out_samples = rc.out_dir.join("samples");
    rc.write(&rc.out_dir)?;
    for sample in &selected {
        // Noise is keyed by (seed, id), not list position, so a clip's
        // output does not depend on which other clips were requested.
        let mut rng = Rng_for_sample(rc.sampler.seed, &sample.id);
        let mel = match rc.sampler.sampler {
            SamplerKind::Ode => sample_ode(
                &params,
                &rc.model,
                &sample.score,
                &schedule,
                &rc.guidance,
                &mut rng,
                rc.sampler.steps,
                mask_delta,
            )?,
            SamplerKind::Ancestral => sample_ancestral(
                &params,
                &rc.model,
                &sample.score,
                &schedule,
                &rc.guidance,
                &mut rng,
                rc.sampler.steps,
                mask_delta,
            )?,
        };
        save_mel(&out_samples.join(format!("{}.mel", sample.id)), &mel)?;
        println!("sampled {}", sample.id);
    }
    write_provenance(
        &rc.out_dir,
        "sample",
        Some(&rc.hash()),
        serde_json::json!({
            "checkpoint_sha": hex8(&sha8(&ckpt_bytes)),
            "sampler": rc.sampler.sampler.to_string(),
            "steps": rc.sampler.steps,
            "w": rc.guidance.w,
            "seed": rc.sampler.seed,
            "unconditional": rc.guidance.w == 0.0,
            "masked": rc.train.use_alignment_mask,
            "clips": selected.len(),
        }),
    )?;
    println!("total {}", selected.len());
    Ok(())
}

/// Deterministic per-clip noise stream: a child of the sampling seed keyed
/// by the sample id.
#[allow(non_snake_case)]
fn Rng_for_sample(seed: u64, id: &str) -> crate::numerics::Rng {
    let digest = sha8(id.as_bytes());
    crate::numerics::Rng::new(seed).derive("sample_clip", u64::from_le_bytes(digest))
}

fn check_sampling_geometry(cfg: &ModelConfig, corpus: &SyntheticCorpus) -> Result<()> {
    let g = corpus.params.geometry;
    if cfg.mel_bins != g.bins || cfg.hop != g.hop || cfg.sample_rate != g.sample_rate {
        return Err(Error::Geometry(format!(
            "checkpoint expects {} bins at {}/{}, corpus has {} bins at {}/{}",
            cfg.mel_bins, cfg.hop, cfg.sample_rate, g.bins, g.hop, g.sample_rate
        )));
    }
    Ok(())
}

fn select_samples<'c>(
    corpus: &'c SyntheticCorpus,
    split: Split,
    ids: &[String],
    limit: usize,
) -> Result<Vec<&'c CorpusSample>> {
    let pool: Vec<&CorpusSample> = corpus.samples_in(split).collect();
    if ids.is_empty() {
        let cap = if limit == 0 { pool.len() } else { limit };
        return Ok(pool.into_iter().take(cap).collect());
    }
    ids.iter()
        .map(|id| {
            pool.iter()
                .copied()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Config(format!("no sample {id:?} in the {split:?} split")))
        })
        .collect()
}

// ---- eval ----

#[derive(Args)]
struct EvalArgs {
    /// Directory of reference .mel files (a corpus samples/ dir works).
    #[arg(long)]
    reference: PathBuf,
    /// Directory of hypothesis .mel files, paired with references by stem.
    #[arg(long)]
    hypothesis: PathBuf,
    /// Output directory for report.csv and report.json.
    #[arg(long)]
    out: PathBuf,
}

fn mel_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "mel") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

/// Loads the `.f0` sidecar next to `samples/<stem>.mel` when present.
fn sidecar_f0(dir: &Path, stem: &str) -> Result<Option<F0Track>> {
    let path = dir.join(format!("{stem}.f0"));
    if path.exists() {
        return Ok(Some(load_f0(&path)?));
    }
    Ok(None)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ref_stems = mel_stems(&a.reference)?;
    let hyp_stems = mel_stems(&a.hypothesis)?;
    if ref_stems != hyp_stems {
        let only_ref: Vec<_> = ref_stems.difference(&hyp_stems).cloned().collect();
        let only_hyp: Vec<_> = hyp_stems.difference(&ref_stems).cloned().collect();
        return Err(Error::Unpaired(format!(
            "reference-only [{}], hypothesis-only [{}]",
            only_ref.join(", "),
            only_hyp.join(", ")
        )));
    }
    if ref_stems.is_empty() {
        return Err(Error::Config("no .mel files to evaluate".to_string()));
    }
    let mut rows: Vec<(String, MetricReport)> = Vec::with_capacity(ref_stems.len());
    for stem in &ref_stems {
        let reference = crate::score::load_mel(&a.reference.join(format!("{stem}.mel")))?;
        let hypothesis = crate::score::load_mel(&a.hypothesis.join(format!("{stem}.mel")))?;
        let rf = sidecar_f0(&a.reference, stem)?;
        let hf = sidecar_f0(&a.hypothesis, stem)?;
        let report = evaluate_pair(&reference, &hypothesis, rf.as_ref(), hf.as_ref())?;
        rows.push((stem.clone(), report));
    }
    let csv = metric_csv(&rows);
    write_file(&a.out.join("report.csv"), csv.as_bytes())?;
    write_file(&a.out.join("report.json"), metric_json(&rows).as_bytes())?;
    write_provenance(
        &a.out,
        "eval",
        None,
        serde_json::json!({
            "reference": a.reference.display().to_string(),
            "hypothesis": a.hypothesis.display().to_string(),
            "pairs": rows.len(),
        }),
    )?;
    print!("{csv}");
    Ok(())
}

// ---- dump-mask ----

#[derive(Args)]
struct DumpMaskArgs {
    #[command(flatten)]
    shared: ConfigArgs,
    /// Corpus sample id whose score is masked.
    #[arg(long)]
    id: String,
    /// Backward span extension in seconds.
    #[arg(long)]
    delta: Option<f64>,
    /// Write the grid here instead of stdout.
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

/// Renders an alignment mask as a CSV grid of `0` / `-inf`: one row per
/// latent frame, one column per phoneme plus the trailing silence column.
fn mask_grid(mask: &crate::alignment::AlignmentMask) -> String {
    let mut out = String::new();
    for i in 0..mask.latent_frames {
        for j in 0..=mask.phonemes {
            if j > 0 {
                out.push(',');
            }
            out.push_str(if mask.bias.get(i, j) == 0.0 { "0" } else { "-inf" });
        }
        out.push('\n');
    }
    out
}

fn cmd_dump_mask(a: DumpMaskArgs) -> Result<()> {
    let rc = a.shared.resolve()?;
    let delta = a.delta.unwrap_or(rc.train.span_delta);
    let sample = find_sample(&rc.corpus, &a.id)?;
    let frames = rc.model.mel_frames(sample.score.total_duration);
    let mask = crate::alignment::score_mask(
        &sample.score,
        delta,
        rc.model.latent_frames(frames),
        rc.model.latent_clock(),
    )?;
    let grid = mask_grid(&mask);
    match &a.grid_out {
        Some(path) => write_file(path, grid.as_bytes())?,
        None => print!("{grid}"),
    }
    Ok(())
}

/// Looks a sample id up across both split directories.
fn find_sample(corpus_root: &Path, id: &str) -> Result<CorpusSample> {
    for part in ["train", "test"] {
        let dir = corpus_root.join(part);
        if !dir.join("manifest.bin").exists() {
            continue;
        }
        let corpus = load_corpus(&dir)?;
        if let Some(s) = corpus.samples.iter().find(|s| s.id == id) {
            return Ok(s.clone());
        }
    }
    Err(Error::Config(format!(
        "no sample {id:?} in {}",
        corpus_root.display()
    )))
}

// ---- scaling ----

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    shared: ConfigArgs,
    /// Comma-separated preset names to train.
    #[arg(long, value_delimiter = ',', default_value = "tiny,tiny_2")]
    presets: Vec<String>,
    /// Comma-separated corpus sizes in melodies.
    #[arg(long, value_delimiter = ',', default_value = "8,24")]
    sizes: Vec<usize>,
    /// Fixed step budget shared by every configuration.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 6)]
    variants: usize,
    /// Held-out lyric clips scored per configuration.
    #[arg(long, default_value_t = 4)]
    eval_pairs: usize,
    #[arg(long, default_value_t = 25)]
    sample_steps: usize,
    /// Seeds for the data-scaling trend check (0 skips it): per seed, the
    /// largest corpus is trained against the smallest and wins ties.
    #[arg(long, default_value_t = 0)]
    trend_seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Clip length used for the analytic FLOP column.
const FLOP_CLIP_SECONDS: f64 = 5.0;

/// Adapts an architecture preset to the toy corpus geometry so different
/// model sizes can train on the same data.
fn adapt_to_corpus(mut cfg: ModelConfig, params: &CorpusParams) -> ModelConfig {
    cfg.mel_bins = params.geometry.bins;
    cfg.hop = params.geometry.hop;
    cfg.sample_rate = params.geometry.sample_rate;
    cfg.phoneme_vocab = cfg.phoneme_vocab.max(params.phoneme_vocab);
    cfg.speaker_count = cfg.speaker_count.max(params.n_groups);
    cfg
}

fn scaling_corpus_params(rc: &RunConfig, a: &ScalingArgs, melodies: usize, seed: u64) -> CorpusParams {
    CorpusParams {
        seed,
        n_groups: 1,
        melodies_per_group: melodies,
        variants_per_melody: a.variants,
        holdout_fraction: 0.25,
        max_chars: 3,
        phoneme_vocab: rc.model.phoneme_vocab,
        geometry: CorpusGeometry {
            bins: rc.model.mel_bins,
            hop: rc.model.hop,
            sample_rate: rc.model.sample_rate,
        },
    }
}

/// Trains one (preset, corpus) cell and scores held-out lyrics against the
/// oracle. Returns (final loss, proxy MCD, train sample count, seconds).
fn scaling_cell(
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    params: &CorpusParams,
    sampler_steps: usize,
    guidance: &GuidanceConfig,
    eval_pairs: usize,
) -> Result<(f64, f64, usize, f64)> {
    let (train_corpus, test_corpus) = build_corpus(params)?;
    let state = train(cfg, &train_corpus, tcfg, None)?;
    let schedule = NoiseSchedule::new(tcfg.schedule, tcfg.timesteps)?;
    let mask_delta = tcfg.use_alignment_mask.then_some(tcfg.span_delta);
    let mut reports = Vec::new();
    for (i, sample) in test_corpus
        .samples_in(Split::LyricHoldout)
        .take(eval_pairs.max(1))
        .enumerate()
    {
        let mut rng = crate::numerics::Rng::new(tcfg.seed).derive("scaling_eval", i as u64);
        let mel = sample_ode(
            &state.params,
            cfg,
            &sample.score,
            &schedule,
            guidance,
            &mut rng,
            sampler_steps,
            mask_delta,
        )?;
        reports.push((sample.id.clone(), evaluate_pair(&sample.mel, &mel, None, None)?));
    }
    let (mcd, _, _, _) = crate::metrics::aggregate(&reports)
        .ok_or_else(|| Error::Contract("scaling cell had no eval pairs".to_string()))?;
    let train_n = train_corpus.samples.len();
    let seconds: f64 = train_corpus
        .samples
        .iter()
        .map(|s| s.score.total_duration)
        .sum();
    Ok((tail_mean_loss(&state.loss_history, 100), mcd, train_n, seconds))
}

fn cmd_scaling(a: ScalingArgs) -> Result<()> {
    let rc = a.shared.resolve()?;
    std::fs::create_dir_all(&rc.out_dir).map_err(|e| Error::io(&rc.out_dir, e))?;
    let mut csv = String::from(
        "preset,gflops_5s,melodies,train_samples,data_seconds,final_loss,proxy_mcd\n",
    );
    for preset in &a.presets {
        for &melodies in &a.sizes {
            let params = scaling_corpus_params(&rc, &a, melodies, a.seed);
            let cfg = adapt_to_corpus(ModelConfig::preset(preset)?, &params);
            let tcfg = TrainConfig {
                iterations: a.iters,
                seed: a.seed,
                ..rc.train.clone()
            };
            let (loss, mcd, train_n, seconds) = scaling_cell(
                &cfg,
                &tcfg,
                &params,
                a.sample_steps,
                &rc.guidance,
                a.eval_pairs,
            )?;
            let gflops = cfg.count_flops(FLOP_CLIP_SECONDS).gflops();
            csv.push_str(&format!(
                "{preset},{gflops},{melodies},{train_n},{seconds},{loss},{mcd}\n"
            ));
        }
    }
    print!("{csv}");
    write_file(&rc.out_dir.join("scaling.csv"), csv.as_bytes())?;

    if a.trend_seeds > 0 {
        let (&small, &large) = (
            a.sizes.iter().min().expect("sizes is non-empty"),
            a.sizes.iter().max().expect("sizes is non-empty"),
        );
        let preset = &a.presets[0];
        let mut trend = String::from("seed,small_loss,large_loss,larger_wins\n");
        let mut wins = 0usize;
        for k in 0..a.trend_seeds {
            let seed = a.seed + k as u64;
            let mut losses = Vec::new();
            for melodies in [small, large] {
                let params = scaling_corpus_params(&rc, &a, melodies, seed);
                let cfg = adapt_to_corpus(ModelConfig::preset(preset)?, &params);
                let tcfg = TrainConfig {
                    iterations: a.iters,
                    seed,
                    ..rc.train.clone()
                };
                let (loss, _, _, _) = scaling_cell(
                    &cfg,
                    &tcfg,
                    &params,
                    a.sample_steps,
                    &rc.guidance,
                    1,
                )?;
                losses.push(loss);
            }
            let larger_wins = losses[1] <= losses[0];
            wins += larger_wins as usize;
            trend.push_str(&format!("{seed},{},{},{}\n", losses[0], losses[1], larger_wins));
        }
        trend.push_str(&format!("# larger-data wins {wins}/{}\n", a.trend_seeds));
        print!("{trend}");
        write_file(&rc.out_dir.join("trend.csv"), trend.as_bytes())?;
    }
    rc.write(&rc.out_dir)?;
    write_provenance(&rc.out_dir, "scaling", Some(&rc.hash()), serde_json::json!({}))?;
    Ok(())
}

// ---- groups ----

#[derive(Args)]
struct GroupsArgs {
    #[command(flatten)]
    shared: ConfigArgs,
    /// Comma-separated group counts; each must divide --melodies. The
    /// paper-scale grid is 1,10,20,30,40,50 over 600 melodies.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    groups_list: Vec<usize>,
    /// Total melody budget shared by every setting.
    #[arg(long, default_value_t = 40)]
    melodies: usize,
    #[arg(long, default_value_t = 10)]
    variants: usize,
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 25)]
    sample_steps: usize,
    #[arg(long, default_value_t = 8)]
    eval_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_groups(a: GroupsArgs) -> Result<()> {
    let rc = a.shared.resolve()?;
    let budget = GroupSweepBudget {
        total_melodies: a.melodies,
        variants_per_melody: a.variants,
        holdout_fraction: a.holdout,
        max_chars: 3,
        sample_steps: a.sample_steps,
        guidance_w: rc.guidance.w,
        max_eval_pairs: a.eval_pairs,
    };
    let mut tcfg = rc.train.clone();
    if let Some(iters) = a.iters {
        tcfg.iterations = iters;
    }
    tcfg.seed = a.seed;
    let rows = grouped_pseudosinger_experiment(&rc.model, &a.groups_list, &budget, &tcfg, a.seed)?;
    let csv = group_sweep_csv(&rows);
    print!("{csv}");
    write_file(&rc.out_dir.join("sweep.csv"), csv.as_bytes())?;
    rc.write(&rc.out_dir)?;
    write_provenance(&rc.out_dir, "groups", Some(&rc.hash()), serde_json::json!({}))?;
    Ok(())
}
