//! Run configuration: flat `key=value` files with `#` comments, plus token
//! file readers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::analysis::{SparsitySource, DEFAULT_DECAY_ALPHA, DEFAULT_DECAY_SIGMA, DEFAULT_SPARSITY_EPSILON};
use crate::error::{Error, Result};
use crate::eviction::{EvictionMode, EvictionPolicy, LayerSchedule, DEFAULT_LAMBDA_MULT};
use crate::local::DEFAULT_Q_OBS;
use crate::model::{read_weights, Model, ModelConfig, ModelWeights, TokenId};
use crate::pipeline::PipelineSettings;
use crate::queue::DEFAULT_QUEUE_CAPACITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFormat {
    /// Whitespace- or comma-separated decimal ids.
    Text,
    /// Little-endian `u32` ids.
    Binary,
}

impl FromStr for TokenFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "binary" => Ok(Self::Binary),
            _ => Err(Error::config(format!("token_format must be text or binary, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityMode {
    ToyModel,
    SyntheticDecay,
}

impl FromStr for SparsityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-model" => Ok(Self::ToyModel),
            "synthetic-decay" => Ok(Self::SyntheticDecay),
            _ => Err(Error::config(format!(
                "sparsity_mode must be toy-model or synthetic-decay, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Weight file; its header overrides the model dimension keys.
    pub weights: Option<PathBuf>,
    /// Multiplier on W_Q and W_K of seeded models.
    pub attn_gain: f64,

    pub chunk_width: usize,
    pub context: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub token_format: TokenFormat,
    /// Lengths of the seeded random inputs used when no files are given.
    pub context_len: usize,
    pub query_len: usize,

    pub q_obs: usize,
    /// `None` means half the chunk width, rounded up.
    pub kv_budget: Option<usize>,
    pub queue_capacity: usize,
    pub epsilon: f64,
    pub lambda_mult: f64,
    pub mode: EvictionMode,
    /// `None` means the thirds schedule for the model's depth.
    pub layer_schedule: Option<LayerSchedule>,
    pub sink_len: Option<usize>,
    pub recency_len: Option<usize>,

    pub max_new: usize,
    pub out: PathBuf,
    pub workers: usize,

    pub memory_budget: usize,
    /// `kv_budget` values compared by `bench`; empty means full and half.
    pub budgets: Vec<usize>,

    pub widths: Vec<usize>,
    pub trials: usize,
    pub sparsity_mode: SparsityMode,
    pub sparsity_epsilon: f64,
    pub decay_alpha: f64,
    pub decay_sigma: f64,

    pub head_frac: f64,
    pub tail_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights: None,
            attn_gain: 1.0,
            chunk_width: 80,
            context: None,
            query: None,
            token_format: TokenFormat::Text,
            context_len: 1000,
            query_len: 16,
            q_obs: DEFAULT_Q_OBS,
            kv_budget: None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            epsilon: f64::INFINITY,
            lambda_mult: DEFAULT_LAMBDA_MULT,
            mode: EvictionMode::None,
            layer_schedule: None,
            sink_len: None,
            recency_len: None,
            max_new: 16,
            out: PathBuf::from("out"),
            workers: 1,
            memory_budget: 64 << 20,
            budgets: Vec::new(),
            widths: vec![64, 128, 256, 512],
            trials: 20,
            sparsity_mode: SparsityMode::SyntheticDecay,
            sparsity_epsilon: DEFAULT_SPARSITY_EPSILON,
            decay_alpha: DEFAULT_DECAY_ALPHA,
            decay_sigma: DEFAULT_DECAY_SIGMA,
            head_frac: 0.1,
            tail_frac: 0.1,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    match v {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => num(key, v),
    }
}

fn auto<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "n_layers",
        "n_heads",
        "d_head",
        "vocab_size",
        "max_train_positions",
        "ff_mult",
        "weights",
        "attn_gain",
        "chunk_width",
        "context",
        "query",
        "token_format",
        "context_len",
        "query_len",
        "q_obs",
        "kv_budget",
        "queue_capacity",
        "epsilon",
        "lambda_mult",
        "mode",
        "layer_schedule",
        "sink_len",
        "recency_len",
        "max_new",
        "out",
        "workers",
        "memory_budget",
        "budgets",
        "widths",
        "trials",
        "sparsity_mode",
        "sparsity_epsilon",
        "decay_alpha",
        "decay_sigma",
        "head_frac",
        "tail_frac",
    ];

    /// Sets one field from its text form. Paths are taken as given.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "n_layers" => self.model.n_layers = num(key, v)?,
            "n_heads" => {
                self.model.n_heads = num(key, v)?;
                self.model.d_model = self.model.n_heads * self.model.d_head;
            }
            "d_head" => {
                self.model.d_head = num(key, v)?;
                self.model.d_model = self.model.n_heads * self.model.d_head;
            }
            "vocab_size" => self.model.vocab_size = num(key, v)?,
            "max_train_positions" => self.model.max_train_positions = num(key, v)?,
            "ff_mult" => self.model.ff_mult = num(key, v)?,
            "weights" => self.weights = Some(PathBuf::from(v)),
            "attn_gain" => self.attn_gain = real(key, v)?,
            "chunk_width" => self.chunk_width = num(key, v)?,
            "context" => self.context = Some(PathBuf::from(v)),
            "query" => self.query = Some(PathBuf::from(v)),
            "token_format" => self.token_format = v.parse()?,
            "context_len" => self.context_len = num(key, v)?,
            "query_len" => self.query_len = num(key, v)?,
            "q_obs" => self.q_obs = num(key, v)?,
            "kv_budget" => self.kv_budget = auto(key, v)?,
            "queue_capacity" => self.queue_capacity = num(key, v)?,
            "epsilon" => self.epsilon = real(key, v)?,
            "lambda_mult" => self.lambda_mult = real(key, v)?,
            "mode" => self.mode = v.parse()?,
            "layer_schedule" => {
                self.layer_schedule = if v == "auto" { None } else { Some(v.parse()?) }
            }
            "sink_len" => self.sink_len = auto(key, v)?,
            "recency_len" => self.recency_len = auto(key, v)?,
            "max_new" => self.max_new = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "workers" => self.workers = num(key, v)?,
            "memory_budget" => self.memory_budget = num(key, v)?,
            "budgets" => self.budgets = list(key, v)?,
            "widths" => self.widths = list(key, v)?,
            "trials" => self.trials = num(key, v)?,
            "sparsity_mode" => self.sparsity_mode = v.parse()?,
            "sparsity_epsilon" => self.sparsity_epsilon = real(key, v)?,
            "decay_alpha" => self.decay_alpha = real(key, v)?,
            "decay_sigma" => self.decay_sigma = real(key, v)?,
            "head_frac" => self.head_frac = real(key, v)?,
            "tail_frac" => self.tail_frac = real(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines onto `self`. Relative paths resolve against
    /// `base` when given.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            seen.push(k);
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
            if let Some(base) = base {
                let field = match k {
                    "weights" => self.weights.as_mut(),
                    "context" => self.context.as_mut(),
                    "query" => self.query.as_mut(),
                    "out" => Some(&mut self.out),
                    _ => None,
                };
                if let Some(p) = field.filter(|p| p.is_relative()) {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, None)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, path.parent())?;
        Ok(c)
    }

    pub fn kv_budget_or_default(&self) -> usize {
        self.kv_budget.unwrap_or(self.chunk_width.div_ceil(2))
    }

    /// Checks every constraint that does not need input files.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_none() {
            self.model.validate()?;
        }
        if !(self.attn_gain > 0.0 && self.attn_gain.is_finite()) {
            return Err(Error::config("attn_gain must be a finite value > 0"));
        }
        if self.chunk_width == 0 {
            return Err(Error::config("chunk_width must be >= 1"));
        }
        if self.context.is_none() && self.context_len == 0 {
            return Err(Error::config("context_len must be >= 1"));
        }
        if self.query.is_none() {
            if self.query_len == 0 {
                return Err(Error::config("query_len must be >= 1"));
            }
            if self.weights.is_none() && self.chunk_width + self.query_len > self.model.max_train_positions {
                return Err(Error::config(format!(
                    "chunk_width + query_len = {} exceeds max_train_positions = {}",
                    self.chunk_width + self.query_len,
                    self.model.max_train_positions
                )));
            }
        }
        if self.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if self.memory_budget == 0 {
            return Err(Error::config("memory_budget must be > 0"));
        }
        if self.budgets.contains(&0) {
            return Err(Error::config("budgets entries must be >= 1"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::config("widths must be positive and strictly ascending"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        if self.sparsity_epsilon.is_nan() {
            return Err(Error::config("sparsity_epsilon must not be NaN"));
        }
        if !(self.decay_alpha > 0.0 && self.decay_alpha.is_finite()) || !(self.decay_sigma >= 0.0 && self.decay_sigma.is_finite()) {
            return Err(Error::config("decay_alpha must be > 0 and decay_sigma >= 0"));
        }
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if !frac_ok(self.head_frac) || !frac_ok(self.tail_frac) || self.head_frac + self.tail_frac >= 1.0 {
            return Err(Error::config("head_frac and tail_frac must be in (0,1) with sum < 1"));
        }
        if self.weights.is_none() {
            self.pipeline_settings(&self.model)?.validate(&self.model)?;
        }
        Ok(())
    }

    pub fn pipeline_settings(&self, cfg: &ModelConfig) -> Result<PipelineSettings> {
        let mut policy = EvictionPolicy::new(cfg.n_layers, self.kv_budget_or_default());
        policy.lambda_mult = self.lambda_mult;
        if let Some(s) = &self.layer_schedule {
            policy.schedule = s.clone();
        }
        policy.sink_len = self.sink_len;
        policy.recency_len = self.recency_len;
        let s = PipelineSettings {
            chunk_width: self.chunk_width,
            q_obs: self.q_obs,
            policy,
            mode: self.mode,
            queue_capacity: self.queue_capacity,
            epsilon: self.epsilon,
            max_new: self.max_new,
            workers: self.workers,
            capture: false,
        };
        s.validate(cfg)?;
        Ok(s)
    }

    /// Reads the weight file, or seeds a model from the configured
    /// dimensions.
    pub fn build_model(&self) -> Result<Model> {
        let w = match &self.weights {
            Some(p) => read_weights(p)?,
            None => ModelWeights::init_from_seed(self.model, self.seed)?,
        };
        Model::new(w.with_attention_gain(self.attn_gain))
    }

    /// Context and query token ids: read from files when given, otherwise
    /// drawn from the seed.
    pub fn load_inputs(&self, vocab_size: usize) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7075_7473);
        let dist = Uniform::new(0, vocab_size as TokenId).map_err(|e| Error::config(e.to_string()))?;
        let mut draw = |n: usize| -> Vec<TokenId> { (0..n).map(|_| dist.sample(&mut rng)).collect() };
        let context = match &self.context {
            Some(p) => read_tokens(p, self.token_format)?,
            None => draw(self.context_len),
        };
        let query = match &self.query {
            Some(p) => read_tokens(p, self.token_format)?,
            None => draw(self.query_len),
        };
        for (what, ids) in [("context", &context), ("query", &query)] {
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::config(format!("{what} token {bad} is outside vocab_size {vocab_size}")));
            }
        }
        Ok((context, query))
    }

    pub fn sparsity_source<'a>(&self, model: &'a Model) -> SparsitySource<'a> {
        match self.sparsity_mode {
            SparsityMode::ToyModel => SparsitySource::ToyModel(model),
            SparsityMode::SyntheticDecay => SparsitySource::SyntheticDecay {
                alpha: self.decay_alpha,
                sigma: self.decay_sigma,
            },
        }
    }

    /// Round-trippable text form of the effective configuration.
    pub fn to_text(&self) -> String {
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "n_layers={}\nn_heads={}\nd_head={}", m.n_layers, m.n_heads, m.d_head);
        let _ = writeln!(s, "vocab_size={}\nmax_train_positions={}\nff_mult={}", m.vocab_size, m.max_train_positions, m.ff_mult);
        if let Some(p) = path(&self.weights) {
            let _ = writeln!(s, "weights={p}");
        }
        let _ = writeln!(s, "attn_gain={}\nchunk_width={}", self.attn_gain, self.chunk_width);
        if let Some(p) = path(&self.context) {
            let _ = writeln!(s, "context={p}");
        }
        if let Some(p) = path(&self.query) {
            let _ = writeln!(s, "query={p}");
        }
        let fmt = match self.token_format {
            TokenFormat::Text => "text",
            TokenFormat::Binary => "binary",
        };
        let _ = writeln!(s, "token_format={fmt}\ncontext_len={}\nquery_len={}", self.context_len, self.query_len);
        let _ = writeln!(s, "q_obs={}\nkv_budget={}\nqueue_capacity={}", self.q_obs, opt(self.kv_budget), self.queue_capacity);
        let _ = writeln!(s, "epsilon={}\nlambda_mult={}\nmode={}", self.epsilon, self.lambda_mult, self.mode);
        let sched = self.layer_schedule.as_ref().map_or("auto".to_string(), ToString::to_string);
        let _ = writeln!(s, "layer_schedule={sched}\nsink_len={}\nrecency_len={}", opt(self.sink_len), opt(self.recency_len));
        let _ = writeln!(s, "max_new={}\nout={}\nworkers={}", self.max_new, self.out.display(), self.workers);
        let _ = writeln!(s, "memory_budget={}\nbudgets={}", self.memory_budget, join(&self.budgets));
        let mode = match self.sparsity_mode {
            SparsityMode::ToyModel => "toy-model",
            SparsityMode::SyntheticDecay => "synthetic-decay",
        };
        let _ = writeln!(s, "widths={}\ntrials={}\nsparsity_mode={mode}", join(&self.widths), self.trials);
        let _ = writeln!(s, "sparsity_epsilon={}\ndecay_alpha={}\ndecay_sigma={}", self.sparsity_epsilon, self.decay_alpha, self.decay_sigma);
        let _ = writeln!(s, "head_frac={}\ntail_frac={}", self.head_frac, self.tail_frac);
        s
    }
}

pub fn parse_tokens_text(text: &str, path: &Path) -> Result<Vec<TokenId>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<TokenId>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("`{s}` is not a token id"),
            })
        })
        .collect()
}

pub fn parse_tokens_binary(bytes: &[u8], path: &Path) -> Result<Vec<TokenId>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn read_tokens(path: &Path, format: TokenFormat) -> Result<Vec<TokenId>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        TokenFormat::Binary => parse_tokens_binary(&bytes, path),
        TokenFormat::Text => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: "not UTF-8 text".into(),
            })?;
            parse_tokens_text(&text, path)
        }
    }
}

pub fn write_tokens_binary(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().flat_map(|t| t.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let c = RunConfig::parse("# demo\nseed = 7\nmode=both # trailing\nepsilon=inf\nbudgets=96,48\n\nkv_budget=auto\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.mode, EvictionMode::Both);
        assert!(c.epsilon.is_infinite());
        assert_eq!(c.budgets, vec![96, 48]);
        assert_eq!(c.kv_budget_or_default(), 40);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nope=1").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed=1\nseed=2").is_err());
        assert!(RunConfig::parse("mode=fast").is_err());
        let c = RunConfig::parse("chunk_width=120\nquery_len=32").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse("lambda_mult=0.5").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse("widths=128,64").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::parse("seed=3\nmode=calibration\nlayer_schedule=0-3:sink,middle\nsink_len=2").unwrap();
        c.budgets = vec![10, 5];
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn token_formats() {
        let p = Path::new("x");
        assert_eq!(parse_tokens_text("1 2,3\n4", p).unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_tokens_text("1 a", p).is_err());
        let b = write_tokens_binary(&[5, 70000]);
        assert_eq!(parse_tokens_binary(&b, p).unwrap(), vec![5, 70000]);
        assert!(parse_tokens_binary(&b[..5], p).is_err());
    }

    #[test]
    fn synthetic_inputs_are_seeded() {
        let c = RunConfig::default();
        let a = c.load_inputs(256).unwrap();
        assert_eq!(a, c.load_inputs(256).unwrap());
        assert_eq!((a.0.len(), a.1.len()), (1000, 16));
        assert!(c.load_inputs(0).is_err());
    }
}
