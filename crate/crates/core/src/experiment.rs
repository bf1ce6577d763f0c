//! Experiment orchestration behind the `recap` binary.
//!
//! A single TOML file declares subsets, the method and its backends. Relative
//! paths resolve against the config file's directory. The config hash is the
//! sha256 of the parsed config re-serialized as JSON, so formatting and
//! comments do not change it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{
    CapitalizedNer, EmbeddingBackend, GazetteerNer, HashBagEmbedder, LlmClient, NerBackend, OpenAiChatBackend, PromptCache,
    ReplayBackend, RequestPolicy, RuleSegmenter, SimpleTokenizer, Tokenizer, ToyEncoder,
};
use crate::corpus::{ingest_book, load_synopses, AliasTable, CorpusError, IngestOptions, Language, DEFAULT_MAIN_CHARACTER_MIN_COUNT};
use crate::evaluation::{f1, select_all_f1, EvalError, EvalReport, DEFAULT_BANDS};
use crate::labeling::{aggregate_annotations, align_events, derive_tv_labels, load_annotations, retain_with_recaps, LabelError};
use crate::line2note::{load_notes, mine_pairs, split_books, L2nConfig, L2nError, Line2NoteModel, NoteBatch};
use crate::llm_rerank::{
    keyword_fake_backend, run_listwise, run_pairwise, run_pipeline, write_verdicts, MediaKind, PromptMode, PromptSpec, RerankError,
    TemplateSet, VerdictRecord, DEFAULT_K_FILTER,
};
use crate::ranking::{
    all_candidates, char_filter, closest_k, predict, rank_by_embedding, read_predictions, write_predictions, RankOptions,
    RankedPrediction, RankingError, SelectionPolicy,
};
use crate::snippet::{
    build_book_instances, build_tv_instances, read_instances, select_central_sentences, write_instances, InstanceIoError,
    SnippetError, TargetInstance, DEFAULT_CANDIDATE_LEN, DEFAULT_TARGET_LEN,
};
use crate::supervised::{build_splits, default_alpha, LabeledSubset, PairClassifier, Sampler, SupervisedConfig, SupervisedError};
use crate::synth;

/// Exit statuses of the binary.
pub const EXIT_OK: u8 = 0;
pub const EXIT_VIOLATION: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: path does not exist", .0.display())]
    MissingPath(PathBuf),
    #[error("{context}: {source}")]
    Toml { context: String, source: toml::de::Error },
    #[error("subset {subset}: {message}")]
    Stage { subset: String, message: String },
    #[error("{0}")]
    Run(String),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Config(_) | ExperimentError::MissingPath(_) | ExperimentError::Toml { .. } => EXIT_CONFIG,
            _ => EXIT_VIOLATION,
        }
    }
}

fn stage<E: std::fmt::Display>(subset: &str) -> impl Fn(E) -> ExperimentError + '_ {
    move |e| ExperimentError::Stage { subset: subset.to_string(), message: e.to_string() }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

// Per-module error conversions keep `?` usable inside a subset stage.
macro_rules! stage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for ExperimentError {
            fn from(e: $t) -> Self {
                ExperimentError::Run(e.to_string())
            }
        }
    )*};
}
stage_from!(CorpusError, SnippetError, LabelError, RankingError, L2nError, SupervisedError, RerankError, EvalError, InstanceIoError);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    /// Raw book text, segmented and sampled here.
    Book,
    /// Synopsis dump with event pages.
    Tv,
    /// Prebuilt instance JSONL.
    Instances,
    /// Generated planted-recap benchmark.
    Planted,
}

fn default_min_count() -> usize {
    DEFAULT_MAIN_CHARACTER_MIN_COUNT
}
fn default_budget() -> usize {
    300
}
fn default_target_len() -> usize {
    DEFAULT_TARGET_LEN
}
fn default_cand_len() -> usize {
    DEFAULT_CANDIDATE_LEN
}
fn default_planted() -> usize {
    50
}
fn default_true() -> bool {
    true
}
fn default_lang() -> Language {
    Language::En
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    pub id: String,
    pub kind: SubsetKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_lang")]
    pub language: Language,
    #[serde(default)]
    pub alias: Option<PathBuf>,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// For TV subsets, e.g. "TV shows" or "Animes".
    #[serde(default)]
    pub production_type: Option<String>,
    #[serde(default = "default_min_count")]
    pub main_character_min_count: usize,
    #[serde(default = "default_budget")]
    pub sample_budget: usize,
    #[serde(default = "default_target_len")]
    pub target_len: usize,
    #[serde(default = "default_cand_len")]
    pub candidate_len: usize,
    #[serde(default = "default_planted")]
    pub planted_targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Closest5,
    EmbedZero,
    EmbedCharfilter,
    L2n,
    SupervisedPw,
    LlmListwise,
    LlmPairwise,
    Pipeline,
}

impl MethodId {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Closest5 => "closest5",
            MethodId::EmbedZero => "embed_zero",
            MethodId::EmbedCharfilter => "embed_charfilter",
            MethodId::L2n => "l2n",
            MethodId::SupervisedPw => "supervised_pw",
            MethodId::LlmListwise => "llm_listwise",
            MethodId::LlmPairwise => "llm_pairwise",
            MethodId::Pipeline => "pipeline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L2nSection {
    /// Load a saved model instead of training.
    pub model_dir: Option<PathBuf>,
    pub notes: Option<PathBuf>,
    /// Directory of `{book_id}.txt` files the notes point into.
    pub books_dir: Option<PathBuf>,
    pub vocab: usize,
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for L2nSection {
    fn default() -> Self {
        Self { model_dir: None, notes: None, books_dir: None, vocab: 4096, dim: 32, lr: 0.05, epochs: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedSection {
    pub alpha: Option<f64>,
    pub similarity_pretrained: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sampler: Sampler,
    pub vocab: usize,
    pub dim: usize,
}

impl Default for SupervisedSection {
    fn default() -> Self {
        Self {
            alpha: None,
            similarity_pretrained: false,
            lr: 0.05,
            epochs: 10,
            batch_size: 32,
            sampler: Sampler::Standard,
            vocab: 4096,
            dim: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmBackendId {
    Openai,
    Replay,
    KeywordFake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListwiseMode {
    Top5,
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub backend: LlmBackendId,
    pub model: String,
    pub max_context_tokens: usize,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub mode: ListwiseMode,
    pub k_filter: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

impl Default for LlmSection {
    fn default() -> Self {
        let p = RequestPolicy::default();
        Self {
            backend: LlmBackendId::KeywordFake,
            model: "gpt-3.5-turbo-16k".into(),
            max_context_tokens: 16_384,
            cache_dir: None,
            templates_dir: None,
            mode: ListwiseMode::Top5,
            k_filter: DEFAULT_K_FILTER,
            timeout_secs: p.timeout_secs,
            max_retries: p.max_retries,
            max_in_flight: p.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub id: MethodId,
    /// Free-mode threshold for embedding and classifier scores.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_true")]
    pub with_event: bool,
    #[serde(default)]
    pub char_filter: bool,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub l2n: L2nSection,
    #[serde(default)]
    pub supervised: SupervisedSection,
    #[serde(default)]
    pub llm: LlmSection,
}

fn default_embed_dim() -> usize {
    256
}

fn default_bands() -> Vec<usize> {
    DEFAULT_BANDS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_bands")]
    pub bands: Vec<usize>,
    pub subsets: Vec<SubsetConfig>,
    pub method: MethodConfig,
}

/// A config plus where its relative paths resolve.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|_| ExperimentError::MissingPath(path.to_path_buf()))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ExperimentError::Toml { context: path.display().to_string(), source })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn from_str(text: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let config = toml::from_str(text).map_err(|source| ExperimentError::Toml { context: "config".into(), source })?;
        Ok(Self { config, base_dir: base_dir.to_path_buf() })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.config)
    }

    /// Checks ids, numeric ranges and that every referenced input exists.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let c = &self.config;
        if c.subsets.is_empty() {
            return Err(ExperimentError::Config("no subsets".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &c.subsets {
            if !ids.insert(s.id.as_str()) {
                return Err(ExperimentError::Config(format!("duplicate subset id {:?}", s.id)));
            }
            if s.id.is_empty() || s.id.contains(['/', '\\']) {
                return Err(ExperimentError::Config(format!("bad subset id {:?}", s.id)));
            }
            match s.kind {
                SubsetKind::Planted => {}
                _ => {
                    let p = s.path.as_ref().ok_or_else(|| ExperimentError::Config(format!("subset {} needs a path", s.id)))?;
                    self.must_exist(p)?;
                }
            }
            for p in [&s.alias, &s.annotations].into_iter().flatten() {
                self.must_exist(p)?;
            }
            if s.target_len == 0 || s.candidate_len == 0 {
                return Err(ExperimentError::Config(format!("subset {}: window lengths must be positive", s.id)));
            }
        }
        if c.bands.iter().any(|&b| b == 0 || b > 60) {
            return Err(ExperimentError::Config("bands must lie in 1..=60".into()));
        }
        let m = &c.method;
        for p in [&m.l2n.model_dir, &m.l2n.notes, &m.l2n.books_dir, &m.llm.templates_dir].into_iter().flatten() {
            self.must_exist(p)?;
        }
        if m.id == MethodId::L2n && m.l2n.model_dir.is_none() && (m.l2n.notes.is_none() || m.l2n.books_dir.is_none()) {
            return Err(ExperimentError::Config("l2n needs model_dir or notes + books_dir".into()));
        }
        if m.id == MethodId::SupervisedPw && c.subsets.len() < 2 {
            return Err(ExperimentError::Config("supervised_pw needs at least two subsets".into()));
        }
        if m.llm.backend == LlmBackendId::Replay && m.llm.cache_dir.is_none() {
            return Err(ExperimentError::Config("replay backend needs llm.cache_dir".into()));
        }
        if m.llm.k_filter == 0 {
            return Err(ExperimentError::Config("k_filter must be positive".into()));
        }
        Ok(())
    }

    fn must_exist(&self, p: &Path) -> Result<(), ExperimentError> {
        let r = self.resolve(p);
        if r.exists() {
            Ok(())
        } else {
            Err(ExperimentError::MissingPath(r))
        }
    }
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Named substream of the root seed.
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Dataset statistics in the usual summary schema. Lengths are mean token
/// counts under the reference tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub subset: String,
    pub tgt_num: usize,
    pub tgt_len: f64,
    pub cand_len: f64,
    pub hist_len: f64,
    pub recap_num: Option<f64>,
}

pub fn subset_stats(subset: &str, instances: &[TargetInstance], tokenizer: &dyn Tokenizer) -> SubsetStats {
    let n = instances.len().max(1) as f64;
    let tgt: usize = instances.iter().map(|i| tokenizer.count(&i.target.text)).sum();
    let (mut cand, mut cands) = (0usize, 0usize);
    for i in instances {
        for c in &i.candidates {
            cand += tokenizer.count(&c.text);
            cands += 1;
        }
    }
    let golds: Vec<usize> = instances.iter().filter_map(|i| i.gold()).map(|g| g.len()).collect();
    SubsetStats {
        subset: subset.to_string(),
        tgt_num: instances.len(),
        tgt_len: tgt as f64 / n,
        cand_len: cand as f64 / cands.max(1) as f64,
        hist_len: cand as f64 / n,
        recap_num: (!golds.is_empty()).then(|| golds.iter().sum::<usize>() as f64 / golds.len() as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub config_hash: String,
    pub command: String,
    pub subset: String,
    pub method: Option<String>,
    pub backends: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub cache: Option<crate::backends::ClientStats>,
    pub timestamp: u64,
}

fn now_secs() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest(path: &Path, m: &ArtifactManifest) -> Result<(), ExperimentError> {
    fs::write(path, serde_json::to_string_pretty(m)?).map_err(io_at(path))
}

fn subset_dir(cfg: &LoadedConfig, subset: &str) -> PathBuf {
    cfg.output_dir().join(subset)
}

fn load_alias(cfg: &LoadedConfig, s: &SubsetConfig) -> Result<AliasTable, ExperimentError> {
    match &s.alias {
        Some(p) => Ok(AliasTable::load(&cfg.resolve(p)).map_err(stage(&s.id))?),
        None => Ok(AliasTable::default()),
    }
}

fn ner_for(alias: &AliasTable) -> Box<dyn NerBackend> {
    if alias.is_empty() {
        Box::new(CapitalizedNer)
    } else {
        Box::new(GazetteerNer::new(alias.all_surfaces()))
    }
}

/// Builds, labels and writes one subset's instances.
fn build_subset(cfg: &LoadedConfig, s: &SubsetConfig, hash: &str) -> Result<SubsetStats, ExperimentError> {
    let dir = subset_dir(cfg, &s.id);
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let seed = substream(cfg.config.seed, &format!("snippeting/{}", s.id));
    let tokenizer = SimpleTokenizer;
    let mut backends = BTreeMap::new();
    backends.insert("tokenizer".to_string(), SimpleTokenizer::ID.to_string());
    let mut instances = match s.kind {
        SubsetKind::Book => {
            let path = cfg.resolve(s.path.as_ref().expect("validated"));
            let raw = fs::read_to_string(&path).map_err(io_at(&path))?;
            let alias = load_alias(cfg, s)?;
            let ner = ner_for(&alias);
            let opts = IngestOptions { tokenizer: &tokenizer, main_character_min_count: s.main_character_min_count };
            let alias_ref = (!alias.is_empty()).then_some(&alias);
            let corpus = ingest_book(&raw, &s.id, s.language, &RuleSegmenter, ner.as_ref(), alias_ref, &opts).map_err(stage(&s.id))?;
            corpus.write(&dir, "corpus").map_err(stage(&s.id))?;
            backends.insert("segmenter".into(), corpus.manifest.segmenter_version.clone());
            backends.insert("ner".into(), corpus.manifest.ner_version.clone());
            let sel = select_central_sentences(&corpus, s.target_len, s.sample_budget, seed).map_err(stage(&s.id))?;
            if sel.budget_exceeded {
                log::warn!("subset {}: only {} central sentences for a budget of {}", s.id, sel.supply, s.sample_budget);
            }
            let out = build_book_instances(&corpus, &sel.ids, s.target_len, s.candidate_len, seed);
            log::info!("subset {}: {} instances, {} centrals skipped", s.id, out.instances.len(), out.skipped.len());
            out.instances
        }
        SubsetKind::Tv => {
            let path = cfg.resolve(s.path.as_ref().expect("validated"));
            let synopsis = load_synopses(&path, &s.id).map_err(stage(&s.id))?;
            let embedder = HashBagEmbedder::new(cfg.config.method.embed_dim);
            backends.insert("aligner".into(), embedder.model_id().to_string());
            let alignment = align_events(&synopsis, &embedder, None).map_err(stage(&s.id))?;
            fs::write(dir.join("alignment.json"), serde_json::to_string_pretty(&alignment.report())?).map_err(io_at(&dir))?;
            let mut out = build_tv_instances(&synopsis, &alignment).instances;
            derive_tv_labels(&alignment, &mut out).map_err(stage(&s.id))?;
            let removed = retain_with_recaps(&mut out);
            log::info!("subset {}: {} instances, {} without recaps removed", s.id, out.len(), removed.len());
            out
        }
        SubsetKind::Instances => read_instances(&cfg.resolve(s.path.as_ref().expect("validated"))).map_err(stage(&s.id))?,
        SubsetKind::Planted => {
            synth::planted_benchmark(&synth::PlantedConfig { targets: s.planted_targets, ..Default::default() }, seed)
        }
    };
    if let Some(a) = &s.annotations {
        let records = load_annotations(&cfg.resolve(a)).map_err(stage(&s.id))?;
        let agg = aggregate_annotations(&records).map_err(stage(&s.id))?;
        for inst in instances.iter_mut() {
            inst.labels = agg.labels.get(&inst.uid).cloned();
        }
        let before = instances.len();
        instances.retain(|i| i.labels.is_some());
        log::info!("subset {}: {} of {} targets kept after aggregation", s.id, instances.len(), before);
    }
    let inst_path = dir.join("instances.jsonl");
    write_instances(&inst_path, &instances).map_err(stage(&s.id))?;
    let stats = subset_stats(&s.id, &instances, &tokenizer);
    let stats_path = dir.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats)?).map_err(io_at(&stats_path))?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("instances.jsonl".into(), sha256_file(&inst_path)?);
    artifacts.insert("stats.json".into(), sha256_file(&stats_path)?);
    let manifest = ArtifactManifest {
        config_hash: hash.to_string(),
        command: "build".into(),
        subset: s.id.clone(),
        method: None,
        backends,
        artifacts,
        cache: None,
        timestamp: now_secs(),
    };
    write_manifest(&dir.join("build.manifest.json"), &manifest)?;
    Ok(stats)
}

/// Builds every subset concurrently. Returns the stats table rows.
pub fn cmd_build(cfg: &LoadedConfig) -> Result<Vec<SubsetStats>, ExperimentError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let results: Vec<Result<SubsetStats, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg.config.subsets.iter().map(|s| scope.spawn(|| build_subset(cfg, s, &hash))).collect();
        handles.into_iter().map(|h| h.join().expect("build thread panicked")).collect()
    });
    results.into_iter().collect()
}

pub fn stats_table(rows: &[SubsetStats]) -> String {
    let mut s = String::from("subset\ttgt_num\ttgt_len\tcand_len\thist_len\trecap_num\n");
    for r in rows {
        let recap = r.recap_num.map_or("-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}", r.subset, r.tgt_num, r.tgt_len, r.cand_len, r.hist_len, recap);
    }
    s
}

fn read_built(cfg: &LoadedConfig, subset: &str) -> Result<Vec<TargetInstance>, ExperimentError> {
    let path = subset_dir(cfg, subset).join("instances.jsonl");
    if !path.exists() {
        return Err(ExperimentError::Config(format!("{} missing; run build first", path.display())));
    }
    let all = read_instances(&path).map_err(stage(subset))?;
    let labeled: Vec<TargetInstance> = all.into_iter().filter(|i| i.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(ExperimentError::Stage { subset: subset.into(), message: "no labeled instances".into() });
    }
    Ok(labeled)
}

fn llm_client(cfg: &LoadedConfig) -> Result<LlmClient, ExperimentError> {
    let l = &cfg.config.method.llm;
    let backend: Box<dyn crate::backends::CompletionBackend> = match l.backend {
        LlmBackendId::Openai => Box::new(
            OpenAiChatBackend::from_env(l.model.clone(), l.max_context_tokens, Duration::from_secs(l.timeout_secs))
                .map_err(|e| ExperimentError::Config(e.to_string()))?,
        ),
        LlmBackendId::Replay => Box::new(ReplayBackend::new(l.model.clone(), l.max_context_tokens)),
        LlmBackendId::KeywordFake => Box::new(keyword_fake_backend(l.max_context_tokens)),
    };
    let cache_dir = l.cache_dir.as_ref().map(|p| cfg.resolve(p)).unwrap_or_else(|| cfg.output_dir().join("llm_cache"));
    let cache = PromptCache::open(&cache_dir).map_err(io_at(&cache_dir))?;
    let policy = RequestPolicy { timeout_secs: l.timeout_secs, max_retries: l.max_retries, max_in_flight: l.max_in_flight, ..Default::default() };
    Ok(LlmClient::new(backend).with_cache(cache).with_policy(policy))
}

fn templates(cfg: &LoadedConfig) -> Result<TemplateSet, ExperimentError> {
    match &cfg.config.method.llm.templates_dir {
        Some(d) => TemplateSet::from_dir(&cfg.resolve(d)).map_err(|e| ExperimentError::Config(e.to_string())),
        None => Ok(TemplateSet::builtin()),
    }
}

fn media_of(s: &SubsetConfig) -> MediaKind {
    match s.kind {
        SubsetKind::Tv => MediaKind::Tv(s.production_type.clone().unwrap_or_else(|| "TV shows".into())),
        _ => MediaKind::Book,
    }
}

/// Trains or loads the Line2Note model.
fn l2n_model(cfg: &LoadedConfig) -> Result<Line2NoteModel<ToyEncoder>, ExperimentError> {
    let l = &cfg.config.method.l2n;
    if let Some(dir) = &l.model_dir {
        return Ok(Line2NoteModel::load(&cfg.resolve(dir))?);
    }
    let notes = load_notes(&cfg.resolve(l.notes.as_ref().expect("validated")))?;
    let books_dir = cfg.resolve(l.books_dir.as_ref().expect("validated"));
    let mut books = BTreeMap::new();
    for book in notes.iter().map(|n| n.book_id.clone()).collect::<BTreeSet<_>>() {
        let p = books_dir.join(format!("{book}.txt"));
        let text = fs::read_to_string(&p).map_err(io_at(&p))?;
        books.insert(book, text.split_whitespace().map(str::to_string).collect::<Vec<_>>());
    }
    let config = L2nConfig { lr: l.lr, epochs: l.epochs, seed: substream(cfg.config.seed, "training/l2n"), ..Default::default() };
    let pairs = mine_pairs(&notes, &books, config.min_line_len)?;
    let (train, dev) = split_books(&pairs, 10);
    let dev_batches: Vec<NoteBatch> = dev.chunks(config.eval_batch_size).filter(|c| c.len() > 1).map(|c| NoteBatch::new(c.to_vec())).collect();
    let encoder = ToyEncoder::new(l.vocab, l.dim, substream(cfg.config.seed, "training/l2n-init"));
    let outcome = Line2NoteModel::new(encoder, config).train(&train, &dev_batches)?;
    let out = cfg.output_dir().join("l2n_model");
    outcome.model.save(&out)?;
    log::info!("l2n trained: best epoch {}, model saved to {}", outcome.best_epoch, out.display());
    Ok(outcome.model)
}

struct MethodOutput {
    at5: Vec<RankedPrediction>,
    free: Option<Vec<RankedPrediction>>,
    verdicts: Vec<VerdictRecord>,
    backends: BTreeMap<String, String>,
    cache: Option<crate::backends::ClientStats>,
}

fn admissible_for(
    cfg: &LoadedConfig,
    s: &SubsetConfig,
    inst: &TargetInstance,
    use_filter: bool,
) -> Result<(BTreeSet<usize>, bool), ExperimentError> {
    if !use_filter {
        return Ok((all_candidates(), false));
    }
    let alias = load_alias(cfg, s)?;
    let ner = ner_for(&alias);
    let r = char_filter(inst, ner.as_ref(), &alias);
    Ok((r.admissible, r.fallback))
}

fn embed_method(
    cfg: &LoadedConfig,
    s: &SubsetConfig,
    instances: &[TargetInstance],
    embedder: &dyn EmbeddingBackend,
    use_filter: bool,
) -> Result<MethodOutput, ExperimentError> {
    let m = &cfg.config.method;
    let (mut at5, mut free) = (Vec::new(), Vec::new());
    for inst in instances {
        let (adm, fallback) = admissible_for(cfg, s, inst, use_filter)?;
        let opts = RankOptions { policy: SelectionPolicy::Top5, threshold: None, with_event: m.with_event };
        let mut p = rank_by_embedding(inst, embedder, &adm, &opts)?;
        p.flags.filter_fallback = fallback;
        if let Some(t) = m.threshold {
            let mut f = predict(&inst.uid, p.scores.clone(), SelectionPolicy::FreeThreshold, Some(t))?;
            f.flags.filter_fallback = fallback;
            free.push(f);
        }
        at5.push(p);
    }
    let mut backends = BTreeMap::new();
    backends.insert("embedder".into(), embedder.model_id().to_string());
    Ok(MethodOutput { at5, free: m.threshold.map(|_| free), verdicts: Vec::new(), backends, cache: None })
}

fn supervised_method(cfg: &LoadedConfig, held_out: &SubsetConfig, instances: &[TargetInstance]) -> Result<MethodOutput, ExperimentError> {
    let m = &cfg.config.method;
    let sup = &m.supervised;
    let mut subsets = Vec::new();
    for s in &cfg.config.subsets {
        let insts = if s.id == held_out.id { instances.to_vec() } else { read_built(cfg, &s.id)? };
        subsets.push(LabeledSubset { id: s.id.clone(), instances: insts });
    }
    let (train, eval) = build_splits(&subsets, &held_out.id, m.with_event)?;
    let seed = substream(cfg.config.seed, &format!("training/supervised/{}", held_out.id));
    let config = SupervisedConfig {
        alpha: sup.alpha.unwrap_or_else(|| default_alpha(sup.similarity_pretrained)),
        lr: sup.lr,
        epochs: sup.epochs,
        batch_size: sup.batch_size,
        sampler: sup.sampler,
        seed,
        ..Default::default()
    };
    let encoder = ToyEncoder::new(sup.vocab, sup.dim, seed);
    let mut backends = BTreeMap::new();
    backends.insert("encoder".into(), crate::backends::TokenEncoder::model_id(&encoder).to_string());
    let mut model = PairClassifier::new(encoder, config);
    model.train(&train)?;
    let (mut at5, mut free) = (Vec::new(), Vec::new());
    for inst in &eval {
        at5.push(model.score_pairs(inst, m.with_event, SelectionPolicy::Top5, None)?);
        free.push(predict(&inst.uid, at5.last().expect("pushed").scores.clone(), SelectionPolicy::FreeThreshold, Some(m.threshold.unwrap_or(0.5)))?);
    }
    Ok(MethodOutput { at5, free: Some(free), verdicts: Vec::new(), backends, cache: None })
}

fn llm_method(
    cfg: &LoadedConfig,
    s: &SubsetConfig,
    instances: &[TargetInstance],
    embedder: Option<&dyn EmbeddingBackend>,
) -> Result<MethodOutput, ExperimentError> {
    let m = &cfg.config.method;
    let client = llm_client(cfg)?;
    let templates = templates(cfg)?;
    let mode = match (m.id, m.llm.mode) {
        (MethodId::LlmListwise, ListwiseMode::Top5) => PromptMode::ListwiseTop5,
        (MethodId::LlmListwise, ListwiseMode::Free) => PromptMode::ListwiseFree,
        _ => PromptMode::Pairwise,
    };
    let mut spec = PromptSpec::new(mode, media_of(s));
    spec.with_event = m.with_event;
    let (mut at5, mut verdicts) = (Vec::new(), Vec::new());
    let mut failure = None;
    for inst in instances {
        let (adm, fallback) = admissible_for(cfg, s, inst, m.char_filter)?;
        let r = match (m.id, embedder) {
            (MethodId::Pipeline, Some(e)) => run_pipeline(inst, e, &client, &spec, &templates, &adm, m.llm.k_filter),
            (MethodId::LlmListwise, _) => run_listwise(inst, &client, &spec, &templates, &adm),
            _ => run_pairwise(inst, &client, &spec, &templates, &adm),
        };
        match r {
            Ok(mut out) => {
                out.prediction.flags.filter_fallback = fallback;
                if mode == PromptMode::ListwiseFree {
                    out.prediction.selected.truncate(crate::ranking::AT_K);
                }
                at5.push(out.prediction);
                verdicts.extend(out.verdicts);
            }
            Err(e @ RerankError::ContextOverflow { .. }) => {
                log::warn!("{}: {e}; scored as empty", inst.uid);
                let mut p = predict(&inst.uid, vec![f64::NEG_INFINITY; inst.candidates.len()], SelectionPolicy::Top5, None)?;
                p.flags.unparseable = true;
                at5.push(p);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let mut backends = BTreeMap::new();
    backends.insert("llm".into(), client.model_id().to_string());
    if let Some(e) = embedder {
        backends.insert("filter".into(), e.model_id().to_string());
    }
    let stats = client.stats();
    let out = MethodOutput { free: Some(at5.clone()), at5, verdicts, backends, cache: Some(stats) };
    if let Some(e) = failure {
        // Keep what finished; the prompt cache makes the rerun cheap.
        let dir = subset_dir(cfg, &s.id);
        let stem = m.id.as_str();
        write_predictions(&dir.join(format!("{stem}.partial.predictions.jsonl")), &out.at5)?;
        write_verdicts(&dir.join(format!("{stem}.partial.verdicts.jsonl")), &out.verdicts)?;
        return Err(ExperimentError::Stage { subset: s.id.clone(), message: format!("{e}; partial results written, rerun to resume") });
    }
    Ok(out)
}

fn run_subset(
    cfg: &LoadedConfig,
    s: &SubsetConfig,
    hash: &str,
    l2n: Option<&Line2NoteModel<ToyEncoder>>,
) -> Result<EvalReport, ExperimentError> {
    let m = &cfg.config.method;
    let instances = read_built(cfg, &s.id)?;
    let hashbag = HashBagEmbedder::new(m.embed_dim);
    let out = match m.id {
        MethodId::Closest5 => {
            let at5: Vec<RankedPrediction> = instances.iter().map(|i| closest_k(i, crate::ranking::AT_K)).collect();
            MethodOutput { free: Some(at5.clone()), at5, verdicts: Vec::new(), backends: BTreeMap::new(), cache: None }
        }
        MethodId::EmbedZero => embed_method(cfg, s, &instances, &hashbag, m.char_filter)?,
        MethodId::EmbedCharfilter => embed_method(cfg, s, &instances, &hashbag, true)?,
        MethodId::L2n => embed_method(cfg, s, &instances, l2n.expect("l2n model loaded"), m.char_filter)?,
        MethodId::SupervisedPw => supervised_method(cfg, s, &instances)?,
        MethodId::LlmListwise | MethodId::LlmPairwise => llm_method(cfg, s, &instances, None)?,
        MethodId::Pipeline => {
            let e: &dyn EmbeddingBackend = match l2n {
                Some(model) => model,
                None => &hashbag,
            };
            llm_method(cfg, s, &instances, Some(e))?
        }
    };
    let dir = subset_dir(cfg, &s.id);
    let stem = m.id.as_str();
    let report = EvalReport::build(&s.id, stem, hash, &out.at5, out.free.as_deref(), &instances, &cfg.config.bands).map_err(stage(&s.id))?;
    let pred_path = dir.join(format!("{stem}.predictions.jsonl"));
    write_predictions(&pred_path, &out.at5)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert(format!("{stem}.predictions.jsonl"), sha256_file(&pred_path)?);
    if let Some(free) = &out.free {
        let p = dir.join(format!("{stem}.free.predictions.jsonl"));
        write_predictions(&p, free)?;
        artifacts.insert(format!("{stem}.free.predictions.jsonl"), sha256_file(&p)?);
    }
    if !out.verdicts.is_empty() {
        let p = dir.join(format!("{stem}.verdicts.jsonl"));
        write_verdicts(&p, &out.verdicts)?;
        artifacts.insert(format!("{stem}.verdicts.jsonl"), sha256_file(&p)?);
    }
    report.write(&dir, stem).map_err(stage(&s.id))?;
    artifacts.insert(format!("{stem}.report.json"), sha256_file(&dir.join(format!("{stem}.report.json")))?);
    let manifest = ArtifactManifest {
        config_hash: hash.to_string(),
        command: "run".into(),
        subset: s.id.clone(),
        method: Some(stem.to_string()),
        backends: out.backends,
        artifacts,
        cache: out.cache,
        timestamp: now_secs(),
    };
    write_manifest(&dir.join(format!("{stem}.manifest.json")), &manifest)?;
    Ok(report)
}

/// Runs the configured method on every built subset.
pub fn cmd_run(cfg: &LoadedConfig) -> Result<Vec<EvalReport>, ExperimentError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let m = &cfg.config.method;
    let needs_l2n = m.id == MethodId::L2n || (m.id == MethodId::Pipeline && (m.l2n.model_dir.is_some() || m.l2n.notes.is_some()));
    let l2n = if needs_l2n { Some(l2n_model(cfg)?) } else { None };
    cfg.config.subsets.iter().map(|s| run_subset(cfg, s, &hash, l2n.as_ref())).collect()
}

/// Collects written reports into a tab-separated table.
pub fn cmd_report(cfg: &LoadedConfig) -> Result<String, ExperimentError> {
    let mut s = String::from("subset\tmethod\tR@5\tP@5\tF1@5\tfree_R\tfree_P\tfree_F1\ttargets\tconfig_hash\n");
    let mut found = 0;
    for sub in &cfg.config.subsets {
        let dir = subset_dir(cfg, &sub.id);
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.to_string_lossy().ends_with(".report.json")).collect();
        paths.sort();
        for p in paths {
            let r: EvalReport = serde_json::from_str(&fs::read_to_string(&p).map_err(io_at(&p))?)?;
            let free = r.free.as_ref().map_or("-\t-\t-".to_string(), |f| format!("{:.2}\t{:.2}\t{:.2}", f.recall, f.precision, f.f1));
            let _ = writeln!(
                s,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}\t{}",
                r.subset, r.method, r.at5.recall, r.at5.precision, r.at5.f1, free, r.targets, &r.config_hash[..12.min(r.config_hash.len())]
            );
            found += 1;
        }
    }
    if found == 0 {
        log::warn!("no reports under {}", cfg.output_dir().display());
    }
    Ok(s)
}

/// A reference (R, P, F1) triple in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub label: String,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

pub const F1_TOLERANCE: f64 = 0.05;
pub const SELECT_ALL_TOLERANCE: f64 = 0.02;

/// Reference @5 triples (language/method/subset).
pub const REFERENCE_TRIPLES: &[(&str, f64, f64, f64)] = &[
    ("zh/closest5/NDDP", 20.82, 19.64, 20.21),
    ("zh/closest5/DGSD", 25.34, 31.59, 28.12),
    ("zh/closest5/TCOMC", 33.36, 67.49, 44.66),
    ("zh/roberta/NDDP", 21.03, 21.18, 21.10),
    ("zh/sbert/NDDP", 21.90, 23.67, 22.75),
    ("zh/sbert/DGSD", 23.38, 33.25, 27.45),
    ("zh/sbert/TCOMC", 20.70, 44.56, 28.27),
    ("zh/sbert-charfilter/NDDP", 26.06, 27.51, 26.77),
    ("zh/roberta-l2n/NDDP", 30.24, 29.35, 29.79),
    ("zh/roberta-l2n/DGSD", 29.18, 38.99, 33.38),
    ("zh/sbert-l2n/TCOMC", 28.89, 58.44, 38.67),
    ("zh/full/NDDP", 30.42, 32.93, 31.63),
    ("zh/full/DGSD", 29.55, 40.47, 34.16),
    ("zh/human/NDDP", 43.65, 54.00, 48.28),
    ("zh/human/DGSD", 52.94, 69.55, 60.12),
    ("zh/human/TCOMC", 44.32, 82.95, 57.77),
    ("zh/internlm/TCOMC", 32.62, 71.94, 44.89),
    ("zh/pairwise-all/NDDP", 29.53, 28.39, 28.95),
    ("zh/pairwise-all/DGSD", 28.06, 36.17, 31.60),
    ("en/sbert/GOT", 47.56, 36.08, 41.03),
    ("en/sbert/AOT", 25.41, 42.99, 31.94),
    ("en/sbert/NDDP", 25.26, 25.80, 25.53),
    ("en/closest5/GOT", 35.45, 30.98, 33.06),
    ("en/llama/NDDP", 26.05, 32.50, 28.92),
    ("en/full/TCOMC", 29.13, 63.98, 40.03),
    ("zh/internlm-free/NDDP", 66.83, 22.61, 33.79),
];

/// Reference Select-All (precision, F1) pairs; recall is 100.
pub const REFERENCE_SELECT_ALL: &[(f64, f64)] = &[(9.39, 17.17), (12.75, 22.62), (20.44, 33.94), (8.18, 15.12), (18.47, 31.18)];

pub fn reference_triples() -> Vec<Triple> {
    REFERENCE_TRIPLES.iter().map(|&(l, r, p, f)| Triple { label: l.into(), recall: r, precision: p, f1: f }).collect()
}

/// Reads `label,recall,precision,f1` rows; a header row is allowed.
pub fn read_triples(path: &Path) -> Result<Vec<Triple>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        if row.len() == 4 && row.get(1).is_some_and(|v| v.trim().parse::<f64>().is_err()) && n == 0 {
            continue;
        }
        let num = |i: usize| -> Result<f64, ExperimentError> {
            row.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| ExperimentError::Config(format!("{} line {}: bad number in column {}", path.display(), n + 1, i + 1)))
        };
        if row.len() != 4 {
            return Err(ExperimentError::Config(format!("{} line {}: expected 4 columns", path.display(), n + 1)));
        }
        out.push(Triple { label: row[0].trim().to_string(), recall: num(1)?, precision: num(2)?, f1: num(3)? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub label: String,
    pub expected: f64,
    pub computed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{} {}: expected {:.2}, computed {:.4} (tolerance {})",
                if l.pass { "PASS" } else { "FAIL" },
                l.label,
                l.expected,
                l.computed,
                l.tolerance
            );
        }
        s
    }
}

/// Harmonic-mean recomputation of each triple plus the Select-All identity.
pub fn cmd_check(triples: &[Triple], select_all: &[(f64, f64)]) -> CheckReport {
    let mut lines = Vec::new();
    for t in triples {
        let computed = f1(t.recall, t.precision);
        lines.push(CheckLine {
            label: format!("f1 {}", t.label),
            expected: t.f1,
            computed,
            tolerance: F1_TOLERANCE,
            pass: (computed - t.f1).abs() <= F1_TOLERANCE,
        });
    }
    for &(p, want) in select_all {
        let computed = select_all_f1(p);
        let identity = (computed - f1(100.0, p)).abs() <= 1e-9;
        lines.push(CheckLine {
            label: format!("select-all P={p}"),
            expected: want,
            computed,
            tolerance: SELECT_ALL_TOLERANCE,
            pass: identity && (computed - want).abs() <= SELECT_ALL_TOLERANCE,
        });
    }
    CheckReport { lines }
}

/// Warm-cache rerun check used by tests and the manifest: number of
/// predictions already present for a method.
pub fn existing_predictions(cfg: &LoadedConfig, subset: &str, method: MethodId) -> Result<Option<Vec<RankedPrediction>>, ExperimentError> {
    let p = subset_dir(cfg, subset).join(format!("{}.predictions.jsonl", method.as_str()));
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(read_predictions(&p)?))
}
