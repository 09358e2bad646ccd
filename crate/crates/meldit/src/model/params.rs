//! Named parameter storage shared by init, training, and checkpoints.
//!
//! Every learnable tensor has a stable dotted name and a fixed construction
//! order given by [`param_specs`]. Optimizer state, checkpoint layout, and
//! tape registration all follow that one ordering, which is what makes
//! run-to-run and resume-from-checkpoint behavior bit-exact.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{Rng, Tape, Tensor2, Var};

/// How a parameter starts life.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, sqrt(2 / (rows + cols))): dense projection weights.
    Xavier,
    /// Normal(0, 0.1): embedding tables.
    Embedding,
    Zero,
    /// Constant fill: per-head attention temperatures.
    Const(f64),
}

/// One parameter's name, shape, and initializer.
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

fn spec(name: String, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name,
        rows,
        cols,
        init,
    }
}

/// Linear layer: Xavier weight plus zero bias row.
fn linear(out: &mut Vec<ParamSpec>, prefix: &str, rows: usize, cols: usize) {
    out.push(spec(format!("{prefix}.w"), rows, cols, Init::Xavier));
    out.push(spec(format!("{prefix}.b"), 1, cols, Init::Zero));
}

fn attention(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, heads: usize, temps: bool) {
    for proj in ["wq", "wk", "wv", "wo"] {
        linear(out, &format!("{prefix}.{proj}"), d, d);
    }
    if temps {
        let tau0 = ((d / heads) as f64).sqrt();
        out.push(spec(format!("{prefix}.tau"), 1, heads, Init::Const(tau0)));
    }
}

fn ffn(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, f: usize) {
    linear(out, &format!("{prefix}.w1"), d, f);
    linear(out, &format!("{prefix}.w2"), f, d);
}

/// The full parameter inventory for a config, in construction order.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.width;
    let f = config.ffn_dim();
    let fb = config.downsample_factor * config.mel_bins;
    let mut out = Vec::new();

    linear(&mut out, "tokenizer", fb, d);
    linear(&mut out, "detokenizer", d, fb);

    out.push(spec("embed.phoneme".into(), config.phoneme_vocab, d, Init::Embedding));
    out.push(spec("embed.pitch".into(), config.pitch_vocab, d, Init::Embedding));
    out.push(spec("embed.duration".into(), config.duration_buckets, d, Init::Embedding));
    out.push(spec("embed.slur".into(), 2, d, Init::Embedding));
    out.push(spec("embed.speaker".into(), config.speaker_count, d, Init::Embedding));
    out.push(spec("embed.silence".into(), 1, d, Init::Embedding));
    out.push(spec("embed.null_condition".into(), 1, d, Init::Embedding));

    linear(&mut out, "time_mlp.l1", d, d);
    linear(&mut out, "time_mlp.l2", d, d);

    for l in 0..2 {
        attention(&mut out, &format!("encoder.{l}.attn"), d, config.heads, false);
        ffn(&mut out, &format!("encoder.{l}.ffn"), d, f);
    }

    linear(&mut out, "in_proj", d, d);

    for i in 0..config.depth {
        // Zero-init modulation: gamma/beta/alpha all start at zero, so each
        // block is the identity map at initialization.
        out.push(spec(format!("block.{i}.mod.w"), d, 9 * d, Init::Zero));
        out.push(spec(format!("block.{i}.mod.b"), 1, 9 * d, Init::Zero));
        attention(&mut out, &format!("block.{i}.self_attn"), d, config.heads, true);
        attention(&mut out, &format!("block.{i}.cross_attn"), d, config.heads, true);
        ffn(&mut out, &format!("block.{i}.ffn"), d, f);
    }

    out.push(spec("final.mod.w".into(), d, 2 * d, Init::Zero));
    out.push(spec("final.mod.b".into(), 1, 2 * d, Init::Zero));
    // Zero-init head: the initial noise prediction is exactly zero.
    out.push(spec("final.head.w".into(), d, d, Init::Zero));
    out.push(spec("final.head.b".into(), 1, d, Init::Zero));
    out
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    /// Deterministic initialization: one RNG stream consumed in spec order.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> ParamSet {
        let mut set = ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for s in param_specs(config) {
            let t = match s.init {
                Init::Xavier => {
                    let std = (2.0 / (s.rows + s.cols) as f64).sqrt();
                    rng.normal_tensor(s.rows, s.cols).map(|v| v * std)
                }
                Init::Embedding => rng.normal_tensor(s.rows, s.cols).map(|v| v * 0.1),
                Init::Zero => Tensor2::zeros(s.rows, s.cols),
                Init::Const(c) => Tensor2::full(s.rows, s.cols, c),
            };
            set.push(s.name, t);
        }
        set
    }

    fn push(&mut self, name: String, tensor: Tensor2) {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    /// Rebuilds a set from (name, tensor) pairs, verifying the inventory
    /// matches what `config` demands.
    pub fn from_entries(
        config: &ModelConfig,
        entries: Vec<(String, Tensor2)>,
    ) -> Result<ParamSet> {
        let specs = param_specs(config);
        if entries.len() != specs.len() {
            return Err(Error::Malformed {
                what: "parameter set".to_string(),
                detail: format!("{} tensors, config needs {}", entries.len(), specs.len()),
            });
        }
        let mut set = ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for (s, (name, tensor)) in specs.iter().zip(entries) {
            if s.name != name || (s.rows, s.cols) != tensor.shape() {
                return Err(Error::Malformed {
                    what: "parameter set".to_string(),
                    detail: format!(
                        "expected {} [{} x {}], found {} [{} x {}]",
                        s.name,
                        s.rows,
                        s.cols,
                        name,
                        tensor.rows(),
                        tensor.cols()
                    ),
                });
            }
            set.push(name, tensor);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> &Tensor2 {
        &self.tensors[self.index[name]]
    }

    pub fn tensor(&self, i: usize) -> &Tensor2 {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor2 {
        &mut self.tensors[i]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Same shapes, all zeros: optimizer moment buffers.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a trainable tape leaf.
    pub fn register(&self, tape: &mut Tape) -> VarMap {
        self.register_with(tape, true)
    }

    /// Registers every tensor as a constant: forward passes that never need
    /// gradients skip all backward bookkeeping.
    pub fn register_frozen(&self, tape: &mut Tape) -> VarMap {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> VarMap {
        let mut vars = Vec::with_capacity(self.len());
        for t in &self.tensors {
            vars.push(if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            });
        }
        VarMap {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Tape handles for one registration of a [`ParamSet`], in set order.
pub struct VarMap {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl VarMap {
    /// Panics on unknown names: a misspelled parameter is a programming
    /// error, not an input error.
    pub fn var(&self, name: &str) -> Var {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Swaps in a different tape node for one name. Gradient checks use this
    /// to make a single parameter the perturbed leaf.
    pub fn replace(&mut self, name: &str, var: Var) {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i] = var;
    }

    /// Vars in the same order as the owning `ParamSet`.
    pub fn ordered(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig::preset("tiny").unwrap()
    }

    #[test]
    fn scalar_count_matches_analytic_formula() {
        for name in ["tiny", "small", "base_2"] {
            let cfg = ModelConfig::preset(name).unwrap();
            let mut rng = Rng::new(0);
            let params = ParamSet::init(&cfg, &mut rng);
            assert_eq!(
                params.total_scalars(),
                cfg.param_count(),
                "preset {name}"
            );
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny();
        let a = ParamSet::init(&cfg, &mut Rng::new(5));
        let b = ParamSet::init(&cfg, &mut Rng::new(5));
        assert_eq!(a.names(), b.names());
        for (x, y) in a.entries().zip(b.entries()) {
            assert!(x.1.bit_eq(y.1), "{} differs", x.0);
        }
    }

    #[test]
    fn zero_init_parameters_are_zero() {
        let params = ParamSet::init(&tiny(), &mut Rng::new(1));
        for name in ["block.0.mod.w", "block.1.mod.b", "final.head.w", "final.mod.w"] {
            assert_eq!(params.get(name).max_abs(), 0.0, "{name}");
        }
        let tau = params.get("block.0.self_attn.tau");
        assert_eq!(tau.shape(), (1, 4));
        assert!((tau.get(0, 0) - (8f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn round_trip_through_entries() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, &mut Rng::new(2));
        let entries: Vec<_> = params
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let back = ParamSet::from_entries(&cfg, entries).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn from_entries_rejects_wrong_inventory() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, &mut Rng::new(3));
        let mut entries: Vec<_> = params
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        entries.swap(0, 1);
        assert!(ParamSet::from_entries(&cfg, entries).is_err());

        let mut entries: Vec<_> = params
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        entries.pop();
        assert!(ParamSet::from_entries(&cfg, entries).is_err());
    }

    #[test]
    fn registration_preserves_order_and_values() {
        let cfg = tiny();
        let params = ParamSet::init(&cfg, &mut Rng::new(4));
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        assert_eq!(vars.ordered().len(), params.len());
        let wq = vars.var("block.0.self_attn.wq.w");
        assert!(tape.value(wq).bit_eq(params.get("block.0.self_attn.wq.w")));
    }
}
