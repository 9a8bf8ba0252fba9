use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Shape of the decoder. `max_train_positions` is the position budget every
/// forward pass must stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_train_positions: usize,
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            vocab_size: 256,
            max_train_positions: 128,
            ff_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_train_positions", self.max_train_positions),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model ({}) must equal n_heads ({}) x d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::config("d_head must be even for rotary embedding"));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// d_model x d_ff
    pub ff_up: Matrix,
    /// d_ff x d_model
    pub ff_down: Matrix,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ff_up: Matrix::zeros(d, cfg.d_ff()),
            ff_down: Matrix::zeros(cfg.d_ff(), d),
        }
    }

    pub(crate) fn matrices(&self) -> [&Matrix; 6] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ff_up,
            &self.ff_down,
        ]
    }

    pub(crate) fn matrices_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ff_up,
            &mut self.ff_down,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// vocab_size x d_model
    pub token_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// d_model x vocab_size
    pub lm_head: Matrix,
}

impl ModelWeights {
    /// All-zero weights: every attention row is uniform over its causal
    /// prefix and every logit row is uniform over the vocabulary.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg,
            token_embedding: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerWeights::zeros(&cfg)).collect(),
            lm_head: Matrix::zeros(cfg.d_model, cfg.vocab_size),
        })
    }

    /// Deterministic initialization: ChaCha8 seeded with `seed`, standard
    /// normal entries scaled by 1/sqrt(d_model), filled in declaration order
    /// (embedding, then per layer q/k/v/o/up/down, then the LM head).
    pub fn init_from_seed(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        for m in w.matrices_mut() {
            for x in m.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = z * scale;
            }
        }
        Ok(w)
    }

    /// Multiplies every W_Q and W_K by `gain`, sharpening (gain > 1) or
    /// flattening attention without touching the value path.
    pub fn with_attention_gain(mut self, gain: f64) -> Self {
        for l in &mut self.layers {
            l.w_q.scale(gain);
            l.w_k.scale(gain);
        }
        self
    }

    pub(crate) fn matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embedding];
        for l in &self.layers {
            out.extend(l.matrices());
        }
        out.push(&self.lm_head);
        out
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend(l.matrices_mut());
        }
        out.push(&mut self.lm_head);
        out
    }

    /// Checks every shape against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::config(format!(
                "expected {} layers, found {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        let d = cfg.d_model;
        let expect = |m: &Matrix, shape: (usize, usize), name: &str| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite("model weights"));
            }
            Ok(())
        };
        expect(&self.token_embedding, (cfg.vocab_size, d), "token_embedding")?;
        for l in &self.layers {
            expect(&l.w_q, (d, d), "w_q")?;
            expect(&l.w_k, (d, d), "w_k")?;
            expect(&l.w_v, (d, d), "w_v")?;
            expect(&l.w_o, (d, d), "w_o")?;
            expect(&l.ff_up, (d, cfg.d_ff()), "ff_up")?;
            expect(&l.ff_down, (cfg.d_ff(), d), "ff_down")?;
        }
        expect(&self.lm_head, (d, cfg.vocab_size), "lm_head")
    }
}
