//! Listwise and pairwise prompting of a completion model, verdict parsing,
//! and the Line2Note → pairwise cascade.
//!
//! Candidates appear in prompts as `Snippet {k}` where `k` is the original
//! candidate index (0 = nearest to the target), so labels stay stable when
//! only a subset is shown.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend, LlmClient, LlmError, ScriptedBackend, Tokenizer};
use crate::ranking::{embedding_scores, rank_order, PredictionFlags, RankedPrediction, RankingError, SelectionPolicy, AT_K};
use crate::snippet::{TargetInstance, NUM_CANDIDATES};

pub const DEFAULT_TRIGGER_TOKENS: usize = 15_000;
pub const DEFAULT_CANDIDATE_CAP: usize = 220;
pub const DEFAULT_K_FILTER: usize = 15;

/// Score given to pairwise positives; admissible non-positives get 1.0 so
/// a top-5 re-selection reproduces the nearest-positives-then-pads rule.
pub const PAIRWISE_POSITIVE: f64 = 2.0;
pub const PAIRWISE_ADMISSIBLE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("prompt has {tokens} tokens after truncation, limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("template {id:?} lacks placeholder {placeholder}")]
    Template { id: String, placeholder: &'static str },
    #[error("no admissible candidates")]
    EmptyAdmissible,
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<LlmError> for RerankError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::ContextOverflow { tokens, limit } => RerankError::ContextOverflow { tokens, limit },
            LlmError::BackendUnavailable { .. } => RerankError::BackendUnavailable(e.to_string()),
        }
    }
}

impl From<BackendError> for RerankError {
    fn from(e: BackendError) -> Self {
        RerankError::BackendUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ListwiseTop5,
    ListwiseFree,
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "production_type")]
pub enum MediaKind {
    Book,
    /// Carries the production type, e.g. "TV shows" or "Animes".
    Tv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub trigger_tokens: usize,
    pub per_candidate_cap: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Self { trigger_tokens: DEFAULT_TRIGGER_TOKENS, per_candidate_cap: DEFAULT_CANDIDATE_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub media: MediaKind,
    pub truncation: Truncation,
    pub with_event: bool,
}

impl PromptSpec {
    pub fn new(mode: PromptMode, media: MediaKind) -> Self {
        Self { mode, media, truncation: Truncation::default(), with_event: true }
    }

    pub fn template_id(&self) -> &'static str {
        match (self.mode, &self.media) {
            (PromptMode::ListwiseTop5, MediaKind::Book) => "listwise-top5-book",
            (PromptMode::ListwiseTop5, MediaKind::Tv(_)) => "listwise-top5-tv",
            (PromptMode::ListwiseFree, MediaKind::Book) => "listwise-free-book",
            (PromptMode::ListwiseFree, MediaKind::Tv(_)) => "listwise-free-tv",
            (PromptMode::Pairwise, _) => "pairwise",
        }
    }
}

const BUILTIN: [(&str, &str); 5] = [
    ("listwise-top5-book", include_str!("../templates/listwise-top5-book.txt")),
    ("listwise-free-book", include_str!("../templates/listwise-free-book.txt")),
    ("listwise-top5-tv", include_str!("../templates/listwise-top5-tv.txt")),
    ("listwise-free-tv", include_str!("../templates/listwise-free-tv.txt")),
    ("pairwise", include_str!("../templates/pairwise.txt")),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self { templates: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// Builtins overridden by any `{id}.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, RerankError> {
        let mut set = Self::builtin();
        for (id, _) in BUILTIN {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                set.templates.insert(id.to_string(), fs::read_to_string(path)?);
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        for (id, text) in &self.templates {
            let needed: &[&'static str] = if id == "pairwise" { &["{{TARGET}}", "{{CANDIDATE}}"] } else { &["{{TARGET}}", "{{CANDIDATES}}"] };
            for &placeholder in needed {
                if !text.contains(placeholder) {
                    return Err(RerankError::Template { id: id.clone(), placeholder });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> &str {
        &self.templates[id]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub text: String,
    pub tokens: usize,
    pub truncated: bool,
    /// Candidate indices in the order listed.
    pub listed: Vec<usize>,
}

fn fill(template: &str, spec: &PromptSpec, instance: &TargetInstance) -> String {
    let production = match &spec.media {
        MediaKind::Tv(p) => p.as_str(),
        MediaKind::Book => "",
    };
    template
        .replace("{{TV_PRODUCTION_TYPE}}", production)
        .replace("{{EVENT}}", instance.event_name.as_deref().unwrap_or(""))
        .replace("{{TARGET}}", instance.target_text(spec.with_event).trim())
}

fn candidate_block(instance: &TargetInstance, listed: &[usize], cap: Option<(usize, &dyn Tokenizer)>) -> String {
    listed
        .iter()
        .map(|&k| {
            let text = instance.candidates[k].text.trim();
            let text = match cap {
                Some((n, tok)) => tok.truncate(text, n),
                None => text,
            };
            format!("Snippet {k}: {text}")
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Renders a listwise prompt over the admissible candidates, nearest first.
/// Candidates are capped only when the full render exceeds the trigger.
pub fn render_listwise(
    instance: &TargetInstance,
    spec: &PromptSpec,
    templates: &TemplateSet,
    tokenizer: &dyn Tokenizer,
    admissible: &BTreeSet<usize>,
    context_limit: usize,
) -> Result<RenderedPrompt, RerankError> {
    let listed: Vec<usize> = admissible.iter().copied().filter(|&k| k < instance.candidates.len()).collect();
    if listed.is_empty() {
        return Err(RerankError::EmptyAdmissible);
    }
    let head = fill(templates.get(spec.template_id()), spec, instance);
    let full = head.replace("{{CANDIDATES}}", &candidate_block(instance, &listed, None));
    let tokens = tokenizer.count(&full);
    let (text, tokens, truncated) = if tokens > spec.truncation.trigger_tokens {
        let capped = head.replace("{{CANDIDATES}}", &candidate_block(instance, &listed, Some((spec.truncation.per_candidate_cap, tokenizer))));
        let t = tokenizer.count(&capped);
        (capped, t, true)
    } else {
        (full, tokens, false)
    };
    if tokens > context_limit {
        return Err(RerankError::ContextOverflow { tokens, limit: context_limit });
    }
    Ok(RenderedPrompt { text, tokens, truncated, listed })
}

pub fn render_pairwise(instance: &TargetInstance, k: usize, spec: &PromptSpec, templates: &TemplateSet) -> String {
    fill(templates.get("pairwise"), spec, instance).replace("{{CANDIDATE}}", instance.candidates[k].text.trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ListwiseVerdict {
    pub indices: Vec<usize>,
    /// Labels dropped as out of range or inadmissible.
    pub dropped: Vec<usize>,
    pub reasons: String,
    pub unparseable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairwiseVerdict {
    pub is_recap: bool,
    pub reason: String,
    pub unparseable: bool,
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)(?:snippets?|片段|候选)\s*(?:#|no\.?)?\s*(\d+(?:\s*(?:,|，|、|;|/|&|\band\b|\bor\b|和|与)\s*(?:(?:snippet|片段)\s*)?#?\s*\d+)*)")
            .expect("label pattern")
    })
}

fn digits_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").expect("digits"))
}

fn answer_line(response: &str) -> Option<&str> {
    response.lines().map(str::trim).find(|l| {
        let lower = l.to_lowercase();
        lower.starts_with("answer") || l.starts_with("答案") || l.starts_with("回答")
    })
}

fn says_none(s: &str) -> bool {
    let lower = s.to_lowercase();
    ["none", "no snippet", "no passage", "no scene", "无", "没有"].iter().any(|w| lower.contains(w))
}

/// Extracts candidate labels. An `Answer:` line, when present, is the only
/// place looked at; otherwise the whole response is scanned. Out-of-range
/// and inadmissible labels are dropped, duplicates keep their first
/// position, and `max` truncates the list.
pub fn parse_listwise(response: &str, admissible: &BTreeSet<usize>, max: Option<usize>) -> ListwiseVerdict {
    let labels = |s: &str| -> Vec<usize> {
        label_re()
            .captures_iter(s)
            .flat_map(|cap| digits_re().find_iter(cap.get(1).map_or("", |m| m.as_str())).filter_map(|d| d.as_str().parse().ok()).collect::<Vec<usize>>())
            .collect()
    };
    let mut scope = answer_line(response).unwrap_or(response);
    let mut raw = labels(scope);
    if raw.is_empty() && !says_none(scope) {
        scope = response;
        raw = labels(scope);
    }
    let mut seen = BTreeSet::new();
    let (mut indices, mut dropped) = (Vec::new(), Vec::new());
    for k in raw {
        if k >= NUM_CANDIDATES || !admissible.contains(&k) {
            log::warn!("dropping candidate label {k}");
            dropped.push(k);
        } else if seen.insert(k) {
            indices.push(k);
        }
    }
    if let Some(m) = max {
        indices.truncate(m);
    }
    let unparseable = indices.is_empty() && dropped.is_empty() && !says_none(scope);
    if unparseable {
        log::warn!("unparseable listwise response");
    }
    ListwiseVerdict { indices, dropped, reasons: response.trim().to_string(), unparseable }
}

pub fn parse_pairwise(response: &str) -> PairwiseVerdict {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b|(不是|是|否)").expect("verdict pattern"));
    let scope = answer_line(response).unwrap_or(response);
    let hit = re.captures(scope).or_else(|| re.captures(response));
    let reason = response.trim().to_string();
    match hit {
        Some(c) => {
            let word = c.get(1).or_else(|| c.get(2)).map(|m| m.as_str().to_lowercase()).unwrap_or_default();
            PairwiseVerdict { is_recap: word == "yes" || word == "是", reason, unparseable: false }
        }
        None => {
            log::warn!("unparseable pairwise response");
            PairwiseVerdict { is_recap: false, reason, unparseable: true }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub target_uid: String,
    pub mode: PromptMode,
    pub cand_index: Option<usize>,
    pub response: String,
    pub indices: Vec<usize>,
    pub is_recap: Option<bool>,
    pub unparseable: bool,
}

pub fn write_verdicts(path: &Path, records: &[VerdictRecord]) -> Result<(), RerankError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("verdict serializes"))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub prediction: RankedPrediction,
    pub verdicts: Vec<VerdictRecord>,
    pub requests: usize,
}

/// One listwise request. Picks score by rank; everything else is `-inf`.
pub fn run_listwise(
    instance: &TargetInstance,
    client: &LlmClient,
    spec: &PromptSpec,
    templates: &TemplateSet,
    admissible: &BTreeSet<usize>,
) -> Result<RerankOutcome, RerankError> {
    let prompt = render_listwise(instance, spec, templates, client.tokenizer(), admissible, client.max_context_tokens())?;
    let response = client.complete(&prompt.text)?;
    let max = (spec.mode == PromptMode::ListwiseTop5).then_some(AT_K);
    let v = parse_listwise(&response, admissible, max);
    let mut scores = vec![f64::NEG_INFINITY; instance.candidates.len()];
    for (r, &k) in v.indices.iter().enumerate() {
        scores[k] = (NUM_CANDIDATES - r) as f64;
    }
    let policy = if spec.mode == PromptMode::ListwiseTop5 { SelectionPolicy::Top5 } else { SelectionPolicy::FreeThreshold };
    let flags = PredictionFlags {
        shortfall: spec.mode == PromptMode::ListwiseTop5 && v.indices.len() < AT_K,
        unparseable: v.unparseable,
        ..Default::default()
    };
    let prediction = RankedPrediction { target_uid: instance.uid.clone(), scores, selected: v.indices.clone(), policy, flags };
    let verdicts = vec![VerdictRecord {
        target_uid: instance.uid.clone(),
        mode: spec.mode,
        cand_index: None,
        response,
        indices: v.indices,
        is_recap: None,
        unparseable: v.unparseable,
    }];
    Ok(RerankOutcome { prediction, verdicts, requests: 1 })
}

/// Nearest positives first, then pads from the nearest admissible non-positives.
pub fn pairwise_selection(positives: &BTreeSet<usize>, admissible: &BTreeSet<usize>) -> (Vec<usize>, Vec<usize>) {
    let mut selected: Vec<usize> = positives.iter().copied().take(AT_K).collect();
    let pads: Vec<usize> = admissible.iter().copied().filter(|k| !positives.contains(k)).take(AT_K - selected.len()).collect();
    selected.extend(&pads);
    (selected, pads)
}

/// One request per admissible candidate.
pub fn run_pairwise(
    instance: &TargetInstance,
    client: &LlmClient,
    spec: &PromptSpec,
    templates: &TemplateSet,
    admissible: &BTreeSet<usize>,
) -> Result<RerankOutcome, RerankError> {
    let ks: Vec<usize> = admissible.iter().copied().filter(|&k| k < instance.candidates.len()).collect();
    if ks.is_empty() {
        return Err(RerankError::EmptyAdmissible);
    }
    let prompts: Vec<String> = ks.iter().map(|&k| render_pairwise(instance, k, spec, templates)).collect();
    let responses = client.complete_many(&prompts);
    let mut positives = BTreeSet::new();
    let mut verdicts = Vec::with_capacity(ks.len());
    let mut any_unparseable = false;
    for (&k, r) in ks.iter().zip(responses) {
        let response = r?;
        let v = parse_pairwise(&response);
        if v.is_recap {
            positives.insert(k);
        }
        any_unparseable |= v.unparseable;
        verdicts.push(VerdictRecord {
            target_uid: instance.uid.clone(),
            mode: PromptMode::Pairwise,
            cand_index: Some(k),
            response,
            indices: Vec::new(),
            is_recap: Some(v.is_recap),
            unparseable: v.unparseable,
        });
    }
    let kept: BTreeSet<usize> = ks.iter().copied().collect();
    let (selected, pads) = pairwise_selection(&positives, &kept);
    let mut scores = vec![f64::NEG_INFINITY; instance.candidates.len()];
    for &k in &ks {
        scores[k] = if positives.contains(&k) { PAIRWISE_POSITIVE } else { PAIRWISE_ADMISSIBLE };
    }
    let flags = PredictionFlags { pads, unparseable: any_unparseable, shortfall: selected.len() < AT_K, ..Default::default() };
    let prediction = RankedPrediction { target_uid: instance.uid.clone(), scores, selected, policy: SelectionPolicy::Top5, flags };
    Ok(RerankOutcome { prediction, verdicts, requests: ks.len() })
}

/// Top `k_filter` candidates by embedding cosine.
pub fn l2n_filter(
    instance: &TargetInstance,
    embedder: &dyn EmbeddingBackend,
    admissible: &BTreeSet<usize>,
    k_filter: usize,
    with_event: bool,
) -> Result<BTreeSet<usize>, RerankError> {
    let scores = embedding_scores(instance, embedder, admissible, with_event)?;
    Ok(rank_order(&scores).into_iter().filter(|&k| scores[k] > f64::NEG_INFINITY).take(k_filter).collect())
}

/// Embedding filter, then pairwise prompting on the survivors. Pads come
/// from the surviving set, nearest first.
pub fn run_pipeline(
    instance: &TargetInstance,
    embedder: &dyn EmbeddingBackend,
    client: &LlmClient,
    spec: &PromptSpec,
    templates: &TemplateSet,
    admissible: &BTreeSet<usize>,
    k_filter: usize,
) -> Result<RerankOutcome, RerankError> {
    let kept = l2n_filter(instance, embedder, admissible, k_filter, spec.with_event)?;
    run_pairwise(instance, client, spec, templates, &kept)
}

fn section<'a>(prompt: &'a str, header: &str) -> &'a str {
    match prompt.find(header) {
        Some(i) => {
            let rest = &prompt[i + header.len()..];
            rest.split("\n\n").next().unwrap_or("")
        }
        None => "",
    }
}

fn clue_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().any(|c| c.is_ascii_digit()) && w.chars().any(|c| c.is_alphabetic()))
        .map(str::to_lowercase)
        .collect()
}

/// Offline stand-in for a hosted model over the builtin templates: a
/// candidate counts as a recap when it shares a mixed letter-digit word
/// with the target.
pub fn keyword_fake_backend(max_context_tokens: usize) -> ScriptedBackend {
    ScriptedBackend::new("keyword-fake-v1", max_context_tokens, |prompt: &str| {
        let target = clue_words(section(prompt, "Target passage:\n").trim()).into_iter().chain(clue_words(section(prompt, "Target scene:\n"))).collect::<BTreeSet<_>>();
        if prompt.contains("Earlier passage:\n") {
            let cand = clue_words(section(prompt, "Earlier passage:\n"));
            let yes = !target.is_disjoint(&cand);
            return Ok(format!("Answer: {}\nShared clue words: {:?}", if yes { "Yes" } else { "No" }, target.intersection(&cand).collect::<Vec<_>>()));
        }
        let top5 = prompt.contains("at most 5");
        let mut picks = Vec::new();
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("Snippet ") {
                if let Some((k, text)) = rest.split_once(": ") {
                    if !target.is_disjoint(&clue_words(text)) {
                        picks.push(format!("Snippet {k}"));
                    }
                }
            }
        }
        if top5 {
            picks.truncate(AT_K);
        }
        Ok(if picks.is_empty() { "Answer: none".to_string() } else { format!("Answer: {}", picks.join(", ")) })
    })
}
