use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fnv1a64, OptimizerConfig, Param, SimpleTokenizer, TokenSpan, Tokenizer};

/// Row-major `tokens × dim` hidden states.
pub type Matrix = Vec<Vec<f64>>;

/// Text after tokenization and truncation, with vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub tokens: Vec<TokenSpan>,
    pub ids: Vec<usize>,
}

impl EncodedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encoder exposing per-token hidden states and a gradient-step contract.
///
/// `backward` accumulates the gradient of some loss with respect to the
/// hidden states returned by `forward`; `step` applies and clears it.
pub trait TokenEncoder: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_length(&self) -> usize;
    fn encode_text(&self, text: &str) -> EncodedText;
    fn forward(&self, enc: &EncodedText) -> Matrix;
    fn backward(&mut self, enc: &EncodedText, grad_hidden: &[Vec<f64>]);
    fn step(&mut self, opt: &OptimizerConfig, t: u64);
    fn zero_grad(&mut self);
}

/// Low-rank adapter settings for large backends that fine-tune through the
/// encoder training contract. The in-tree encoders ignore them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub lr: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, dropout: 0.05, lr: 3e-4 }
    }
}

/// Desk-scale trainable encoder: every lowercased token hashes into one of
/// `vocab` buckets whose embedding row is its hidden state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyEncoder {
    model_id: String,
    vocab: usize,
    dim: usize,
    max_length: usize,
    table: Param,
    #[serde(skip)]
    tokenizer: SimpleTokenizer,
}

impl ToyEncoder {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        assert!(vocab > 0 && dim > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / dim as f64).sqrt();
        let table = (0..vocab * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            model_id: format!("toy-encoder-v1-v{vocab}-d{dim}-s{seed}"),
            vocab,
            dim,
            max_length: 256,
            table: Param::new(table),
            tokenizer: SimpleTokenizer,
        }
    }

    pub fn with_max_length(mut self, max_length: usize) -> Self {
        self.max_length = max_length;
        self
    }

    pub fn token_id(&self, token: &str) -> usize {
        (fnv1a64(&token.to_lowercase()) % self.vocab as u64) as usize
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.table.value[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.table.value[id * self.dim..(id + 1) * self.dim]
    }

    /// Accumulated gradient of one row; empty before any backward pass.
    pub fn grad_row(&self, id: usize) -> &[f64] {
        self.table.grad.get(id * self.dim..(id + 1) * self.dim).unwrap_or(&[])
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        let mut enc: Self = serde_json::from_str(s)?;
        enc.table.zero_grad();
        Ok(enc)
    }
}

impl TokenEncoder for ToyEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_length(&self) -> usize {
        self.max_length
    }

    fn encode_text(&self, text: &str) -> EncodedText {
        let mut tokens = self.tokenizer.tokenize(text);
        tokens.truncate(self.max_length);
        let ids = tokens.iter().map(|t| self.token_id(&text[t.start..t.end])).collect();
        EncodedText { tokens, ids }
    }

    fn forward(&self, enc: &EncodedText) -> Matrix {
        enc.ids.iter().map(|&id| self.row(id).to_vec()).collect()
    }

    fn backward(&mut self, enc: &EncodedText, grad_hidden: &[Vec<f64>]) {
        if self.table.grad.len() != self.table.len() {
            self.table.zero_grad();
        }
        let d = self.dim;
        for (&id, g) in enc.ids.iter().zip(grad_hidden) {
            let row = &mut self.table.grad[id * d..(id + 1) * d];
            for (acc, gi) in row.iter_mut().zip(g) {
                *acc += gi;
            }
        }
    }

    fn step(&mut self, opt: &OptimizerConfig, t: u64) {
        self.table.step(opt, t);
    }

    fn zero_grad(&mut self) {
        self.table.zero_grad();
    }
}
