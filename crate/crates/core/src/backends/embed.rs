use super::{BackendError, SimpleTokenizer, Tokenizer};

/// Sentence-level text encoder producing fixed-size vectors.
pub trait EmbeddingBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_length(&self) -> usize;
    fn embed_one(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

/// Encodes a batch; row `i` embeds `texts[i]`.
pub fn encode<S: AsRef<str>>(backend: &dyn EmbeddingBackend, texts: &[S]) -> Result<Vec<Vec<f64>>, BackendError> {
    if texts.is_empty() {
        return Err(BackendError::EmptyInput);
    }
    texts.iter().map(|t| backend.embed_one(t.as_ref())).collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Deterministic hashed bag-of-words encoder. Each lowercased word token adds
/// 1.0 at bucket `fnv1a64(token) % dim`; punctuation is ignored.
#[derive(Debug, Clone)]
pub struct HashBagEmbedder {
    model_id: String,
    dim: usize,
    max_length: usize,
    truncate: bool,
    tokenizer: SimpleTokenizer,
}

impl HashBagEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self {
            model_id: format!("hashbag-v1-d{dim}"),
            dim,
            max_length: 4096,
            truncate: true,
            tokenizer: SimpleTokenizer,
        }
    }

    pub fn with_max_length(mut self, max_length: usize, truncate: bool) -> Self {
        self.max_length = max_length;
        self.truncate = truncate;
        self
    }
}

impl EmbeddingBackend for HashBagEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_length(&self) -> usize {
        self.max_length
    }

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let tokens = self.tokenizer.tokenize(text);
        if tokens.len() > self.max_length && !self.truncate {
            return Err(BackendError::InputTooLong { tokens: tokens.len(), max: self.max_length });
        }
        let mut v = vec![0.0; self.dim];
        for t in tokens.iter().take(self.max_length) {
            let word = &text[t.start..t.end];
            if !word.chars().any(char::is_alphanumeric) {
                continue;
            }
            let bucket = (fnv1a64(&word.to_lowercase()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        Ok(v)
    }
}
