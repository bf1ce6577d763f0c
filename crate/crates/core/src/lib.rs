//! Recap snippet identification.
//!
//! Given a target passage of a long narrative, find the earlier passages
//! (among 60 nearby candidate windows) that it directly continues. The
//! crate covers corpus ingestion, snippet construction, gold labels,
//! rankers, Line2Note training, supervised pair classifiers, LLM reranking
//! and the evaluation protocol. The `recap` binary drives it all.

pub mod backends;
pub mod corpus;
pub mod evaluation;
pub mod experiment;
pub mod labeling;
pub mod line2note;
pub mod llm_rerank;
pub mod ranking;
pub mod snippet;
pub mod supervised;
pub mod synth;
