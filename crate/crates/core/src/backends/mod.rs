//! Model-facing contracts: text encoders, trainable token encoders,
//! tokenizers, segmenters, name recognizers and hosted completion clients.
//!
//! Every pipeline stage talks to models only through these traits, so the
//! in-tree deterministic stubs and real backends are interchangeable.

mod embed;
mod encoder;
mod llm;
mod nlp;
mod param;

pub use embed::{cosine, encode, fnv1a64, EmbeddingBackend, HashBagEmbedder};
pub use encoder::{AdapterConfig, EncodedText, Matrix, TokenEncoder, ToyEncoder};
pub use llm::{
    CacheEntry, ClientStats, CompletionBackend, LlmClient, LlmError, OpenAiChatBackend, PromptCache,
    ReplayBackend, RequestPolicy, ScriptedBackend, API_KEY_ENV, BASE_URL_ENV,
};
pub use nlp::{
    CapitalizedNer, GazetteerNer, NerBackend, RuleSegmenter, Segmenter, SimpleTokenizer, TokenSpan, Tokenizer,
};
pub use param::{OptimizerConfig, OptimizerKind, Param};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("empty input")]
    EmptyInput,
    #[error("input of {tokens} tokens exceeds max length {max}")]
    InputTooLong { tokens: usize, max: usize },
    #[error("backend failure: {0}")]
    Failure(String),
}
