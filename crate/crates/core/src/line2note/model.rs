use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_batches, group_by_book, L2nError, NoteBatch, NoteLinePair};
use crate::backends::{BackendError, EmbeddingBackend, EncodedText, Matrix, OptimizerConfig, OptimizerKind, Param, TokenEncoder, ToyEncoder};

/// Score clamp used inside the logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolerMode {
    /// One projection for lines and notes.
    Shared,
    /// Separate projections for lines and notes.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2nConfig {
    pub pooler_mode: PoolerMode,
    /// Include `-log(1 - s)` for non-positive pairs.
    pub negatives: bool,
    pub min_line_len: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for L2nConfig {
    fn default() -> Self {
        Self {
            pooler_mode: PoolerMode::Shared,
            negatives: true,
            min_line_len: super::DEFAULT_MIN_LINE_LEN,
            batch_size: super::DEFAULT_BATCH_SIZE,
            eval_batch_size: super::DEFAULT_EVAL_BATCH_SIZE,
            epochs: 2,
            lr: 2e-5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl L2nConfig {
    fn optimizer(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
        }
    }
}

/// Attention projection `P`: weights are `softmax(X·P)` over the unmasked
/// token range and exactly zero elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPooler {
    pub p: Param,
}

impl AttentionPooler {
    pub fn new(dim: usize) -> Self {
        Self { p: Param::zeros(dim) }
    }

    pub fn weights(&self, x: &[Vec<f64>], range: (usize, usize)) -> Vec<f64> {
        let (lo, hi) = range;
        let mut w = vec![0.0; x.len()];
        let logits: Vec<f64> = x[lo..hi].iter().map(|row| dot(row, &self.p.value)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (t, ex) in exps.into_iter().enumerate() {
            w[lo + t] = ex / sum;
        }
        w
    }

    /// Weighted sum of hidden states.
    pub fn pool(x: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
        let d = x.first().map_or(0, Vec::len);
        let mut e = vec![0.0; d];
        for (row, &wt) in x.iter().zip(w) {
            if wt != 0.0 {
                for (acc, v) in e.iter_mut().zip(row) {
                    *acc += wt * v;
                }
            }
        }
        e
    }

    /// Accumulates `dL/dP` and returns `dL/dX` given `g = dL/de`.
    fn backward(&mut self, x: &[Vec<f64>], w: &[f64], e: &[f64], g: &[f64]) -> Matrix {
        if self.p.grad.len() != self.p.len() {
            self.p.zero_grad();
        }
        let ge = dot(g, e);
        x.iter()
            .zip(w)
            .map(|(row, &wt)| {
                if wt == 0.0 {
                    return vec![0.0; row.len()];
                }
                let da = wt * (dot(g, row) - ge);
                for (acc, v) in self.p.grad.iter_mut().zip(row) {
                    *acc += da * v;
                }
                row.iter().zip(g).zip(&self.p.value).map(|((_, gi), pi)| wt * gi + da * pi).collect()
            })
            .collect()
    }
}

/// Linear map from `[ew; em; ew - em; ew * em]` to one logit, then sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScorer {
    pub dim: usize,
    pub u: Param,
    pub b: Param,
}

impl PairScorer {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, u: Param::zeros(4 * dim), b: Param::zeros(1) }
    }

    pub fn random(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { dim, u: Param::new((0..4 * dim).map(|_| rng.gen_range(-scale..scale)).collect()), b: Param::zeros(1) }
    }

    pub fn features(ew: &[f64], em: &[f64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(4 * ew.len());
        f.extend_from_slice(ew);
        f.extend_from_slice(em);
        f.extend(ew.iter().zip(em).map(|(a, b)| a - b));
        f.extend(ew.iter().zip(em).map(|(a, b)| a * b));
        f
    }

    pub fn logit(&self, ew: &[f64], em: &[f64]) -> Result<f64, L2nError> {
        if ew.len() != self.dim || em.len() != self.dim {
            return Err(L2nError::DimensionMismatch(ew.len(), em.len()));
        }
        Ok(dot(&self.u.value, &Self::features(ew, em)) + self.b.value[0])
    }

    pub fn score(&self, ew: &[f64], em: &[f64]) -> Result<f64, L2nError> {
        self.logit(ew, em).map(sigmoid)
    }

    /// Accumulates head gradients for `dz = dL/dlogit`; returns `(dL/dew, dL/dem)`.
    fn backward(&mut self, ew: &[f64], em: &[f64], dz: f64) -> (Vec<f64>, Vec<f64>) {
        if self.u.grad.len() != self.u.len() {
            self.u.zero_grad();
            self.b.zero_grad();
        }
        let d = self.dim;
        for (acc, f) in self.u.grad.iter_mut().zip(Self::features(ew, em)) {
            *acc += dz * f;
        }
        self.b.grad[0] += dz;
        let u = &self.u.value;
        let dew = (0..d).map(|k| dz * (u[k] + u[2 * d + k] + u[3 * d + k] * em[k])).collect();
        let dem = (0..d).map(|k| dz * (u[d + k] - u[2 * d + k] + u[3 * d + k] * ew[k])).collect();
        (dew, dem)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Batch loss from a score matrix and its gradient with respect to the
/// logits. Rows are lines, columns notes.
pub fn loss_from_scores(scores: &[Vec<f64>], positives: &[Vec<bool>], negatives: bool) -> (f64, Matrix) {
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .zip(positives)
        .map(|(row, pos)| {
            row.iter()
                .zip(pos)
                .map(|(&s, &is_pos)| {
                    let c = s.clamp(EPS, 1.0 - EPS);
                    let inside = s > EPS && s < 1.0 - EPS;
                    if is_pos {
                        loss -= c.ln();
                        if inside { s - 1.0 } else { 0.0 }
                    } else if negatives {
                        loss -= (1.0 - c).ln();
                        if inside { s } else { 0.0 }
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (loss, grad)
}

struct Pooled {
    enc: EncodedText,
    x: Matrix,
    w: Vec<f64>,
    e: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub acc: f64,
    pub hit1: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev: Option<EvalScores>,
}

pub struct TrainOutcome<E> {
    pub model: Line2NoteModel<E>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub lr: f64,
}

/// Encoder, pooler(s) and pair head.
#[derive(Debug, Clone)]
pub struct Line2NoteModel<E> {
    pub encoder: E,
    pub line_pooler: AttentionPooler,
    /// Present only in [`PoolerMode::Separate`].
    pub note_pooler: Option<AttentionPooler>,
    pub scorer: PairScorer,
    pub config: L2nConfig,
    step: u64,
}

impl<E: TokenEncoder + Clone> Line2NoteModel<E> {
    pub fn new(encoder: E, config: L2nConfig) -> Self {
        let d = encoder.dim();
        let note_pooler = (config.pooler_mode == PoolerMode::Separate).then(|| AttentionPooler::new(d));
        let scorer = PairScorer::random(d, 0.01, config.seed ^ 0x5c0e);
        Self { encoder, line_pooler: AttentionPooler::new(d), note_pooler, scorer, config, step: 0 }
    }

    fn note_pooler(&self) -> &AttentionPooler {
        self.note_pooler.as_ref().unwrap_or(&self.line_pooler)
    }

    /// Token range covering the span; a span edge inside a token widens to
    /// the whole token.
    pub fn span_tokens(enc: &EncodedText, span_bytes: (usize, usize)) -> Result<(usize, usize), L2nError> {
        let (cs, ce) = span_bytes;
        let lo = enc.tokens.iter().position(|t| t.end > cs);
        let hi = enc.tokens.iter().rposition(|t| t.start < ce);
        match (lo, hi) {
            (Some(lo), Some(hi)) if lo <= hi => {
                if enc.tokens[lo].start < cs || enc.tokens[hi].end > ce {
                    log::debug!("span edge splits a token; widened to covering tokens");
                }
                Ok((lo, hi + 1))
            }
            _ => Err(L2nError::EmptySpan),
        }
    }

    fn pool_line(&self, pair: &NoteLinePair) -> Result<Pooled, L2nError> {
        let enc = self.encoder.encode_text(&pair.line_text);
        let range = Self::span_tokens(&enc, pair.span_bytes)?;
        let x = self.encoder.forward(&enc);
        let w = self.line_pooler.weights(&x, range);
        let e = AttentionPooler::pool(&x, &w);
        Ok(Pooled { enc, x, w, e })
    }

    fn pool_note(&self, text: &str) -> Result<Pooled, L2nError> {
        let enc = self.encoder.encode_text(text);
        if enc.is_empty() {
            return Err(L2nError::EmptyNote);
        }
        let x = self.encoder.forward(&enc);
        let w = self.note_pooler().weights(&x, (0, x.len()));
        let e = AttentionPooler::pool(&x, &w);
        Ok(Pooled { enc, x, w, e })
    }

    pub fn embed_note(&self, note: &str) -> Result<Vec<f64>, L2nError> {
        self.pool_note(note).map(|p| p.e)
    }

    /// Note embedding with its attention weights.
    pub fn note_attention(&self, note: &str) -> Result<(Vec<f64>, Vec<f64>), L2nError> {
        self.pool_note(note).map(|p| (p.e, p.w))
    }

    pub fn embed_line(&self, pair: &NoteLinePair) -> Result<Vec<f64>, L2nError> {
        self.pool_line(pair).map(|p| p.e)
    }

    /// Line embedding with its attention weights over the line's tokens.
    pub fn line_attention(&self, pair: &NoteLinePair) -> Result<(Vec<f64>, Vec<f64>), L2nError> {
        self.pool_line(pair).map(|p| (p.e, p.w))
    }

    /// Embedding of a whole snippet treated as a line spanning all of it.
    pub fn snippet_embed(&self, text: &str) -> Result<Vec<f64>, L2nError> {
        let enc = self.encoder.encode_text(text);
        if enc.is_empty() {
            return Err(L2nError::EmptyNote);
        }
        let x = self.encoder.forward(&enc);
        let w = self.line_pooler.weights(&x, (0, x.len()));
        Ok(AttentionPooler::pool(&x, &w))
    }

    fn pool_batch(&self, batch: &NoteBatch) -> Result<(Vec<Pooled>, Vec<Pooled>), L2nError> {
        let lines = batch.pairs.iter().map(|p| self.pool_line(p)).collect::<Result<Vec<_>, _>>()?;
        let notes = batch.pairs.iter().map(|p| self.pool_note(&p.note_text)).collect::<Result<Vec<_>, _>>()?;
        Ok((lines, notes))
    }

    fn score_matrix(&self, lines: &[Pooled], notes: &[Pooled]) -> Result<Matrix, L2nError> {
        lines.iter().map(|l| notes.iter().map(|n| self.scorer.score(&l.e, &n.e)).collect()).collect()
    }

    /// `scores[i][j]`: line i against note j.
    pub fn batch_scores(&self, batch: &NoteBatch) -> Result<Matrix, L2nError> {
        let (lines, notes) = self.pool_batch(batch)?;
        self.score_matrix(&lines, &notes)
    }

    pub fn batch_loss(&self, batch: &NoteBatch) -> Result<f64, L2nError> {
        let scores = self.batch_scores(batch)?;
        Ok(loss_from_scores(&scores, &batch.positives, self.config.negatives).0)
    }

    /// Accumulates gradients of the batch loss into every parameter and
    /// returns the loss. Nothing is updated.
    pub fn accumulate_gradients(&mut self, batch: &NoteBatch) -> Result<f64, L2nError> {
        let (lines, notes) = self.pool_batch(batch)?;
        let scores = self.score_matrix(&lines, &notes)?;
        let (loss, dz) = loss_from_scores(&scores, &batch.positives, self.config.negatives);
        let d = self.scorer.dim;
        let mut dew = vec![vec![0.0; d]; lines.len()];
        let mut dem = vec![vec![0.0; d]; notes.len()];
        for (i, l) in lines.iter().enumerate() {
            for (j, n) in notes.iter().enumerate() {
                if dz[i][j] == 0.0 {
                    continue;
                }
                let (gw, gm) = self.scorer.backward(&l.e, &n.e, dz[i][j]);
                add_into(&mut dew[i], &gw);
                add_into(&mut dem[j], &gm);
            }
        }
        for (l, g) in lines.iter().zip(&dew) {
            let dx = self.line_pooler.backward(&l.x, &l.w, &l.e, g);
            self.encoder.backward(&l.enc, &dx);
        }
        for (n, g) in notes.iter().zip(&dem) {
            let pooler = self.note_pooler.as_mut().unwrap_or(&mut self.line_pooler);
            let dx = pooler.backward(&n.x, &n.w, &n.e, g);
            self.encoder.backward(&n.enc, &dx);
        }
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.line_pooler.p.zero_grad();
        if let Some(p) = self.note_pooler.as_mut() {
            p.p.zero_grad();
        }
        self.scorer.u.zero_grad();
        self.scorer.b.zero_grad();
    }

    /// One optimizer step on a batch; returns the loss before the update.
    pub fn train_step(&mut self, batch: &NoteBatch) -> Result<f64, L2nError> {
        self.zero_grad();
        let loss = self.accumulate_gradients(batch)?;
        self.step += 1;
        let opt = self.config.optimizer();
        self.encoder.step(&opt, self.step);
        self.line_pooler.p.step(&opt, self.step);
        if let Some(p) = self.note_pooler.as_mut() {
            p.p.step(&opt, self.step);
        }
        self.scorer.u.step(&opt, self.step);
        self.scorer.b.step(&opt, self.step);
        Ok(loss)
    }

    /// ACC over all line-note decisions and HIT@1 over lines, averaged over
    /// batches. Ties for the top note are broken uniformly with `seed`.
    pub fn evaluate(&self, batches: &[NoteBatch], seed: u64) -> Result<EvalScores, L2nError> {
        let scores = batches.iter().map(|b| self.batch_scores(b)).collect::<Result<Vec<_>, _>>()?;
        let positives: Vec<&[Vec<bool>]> = batches.iter().map(|b| b.positives.as_slice()).collect();
        Ok(acc_hit1_from_scores(&scores, &positives, seed))
    }

    /// Trains for `config.epochs` over same-book batches and keeps the
    /// parameters of the epoch with the best dev ACC (last epoch without dev).
    pub fn train(mut self, train: &[NoteLinePair], dev: &[NoteBatch]) -> Result<TrainOutcome<E>, L2nError> {
        let pools = group_by_book(train);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, Self)> = None;
        for epoch in 0..self.config.epochs {
            let batches = epoch_batches(&pools, self.config.batch_size, &mut rng);
            let mut total = 0.0;
            for b in &batches {
                total += self.train_step(b)?;
            }
            let mean_loss = if batches.is_empty() { 0.0 } else { total / batches.len() as f64 };
            let dev_scores = if dev.is_empty() { None } else { Some(self.evaluate(dev, self.config.seed)?) };
            log::info!("l2n epoch {epoch}: loss {mean_loss:.4} dev {dev_scores:?}");
            history.push(EpochLog { epoch, mean_loss, dev: dev_scores });
            let acc = dev_scores.map_or(f64::INFINITY, |s| s.acc);
            if best.as_ref().map_or(true, |(b, _, _)| acc >= *b) {
                best = Some((acc, epoch, self.clone()));
            }
        }
        let (_, best_epoch, model) = best.unwrap_or((0.0, 0, self));
        let lr = model.config.lr;
        Ok(TrainOutcome { model, history, best_epoch, lr })
    }

    /// Trains one model per learning rate and keeps the best by dev ACC.
    pub fn train_grid(encoder: E, config: L2nConfig, lrs: &[f64], train: &[NoteLinePair], dev: &[NoteBatch]) -> Result<TrainOutcome<E>, L2nError> {
        let mut best: Option<(f64, TrainOutcome<E>)> = None;
        for &lr in lrs {
            let cfg = L2nConfig { lr, ..config.clone() };
            let out = Self::new(encoder.clone(), cfg).train(train, dev)?;
            let acc = out.history.iter().filter_map(|h| h.dev.map(|d| d.acc)).fold(f64::NEG_INFINITY, f64::max);
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, out));
            }
        }
        best.map(|(_, o)| o).ok_or(L2nError::PoolTooSmall { have: 0, need: 1 })
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// ACC, HIT@1 and mean positive/negative scores from precomputed matrices.
pub fn acc_hit1_from_scores(scores: &[Matrix], positives: &[&[Vec<bool>]], seed: u64) -> EvalScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc_sum, mut hit_sum) = (0.0, 0.0);
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for (s, p) in scores.iter().zip(positives) {
        let mut correct = 0usize;
        let mut cells = 0usize;
        let mut hits = 0usize;
        for (row, prow) in s.iter().zip(p.iter()) {
            for (&v, &is_pos) in row.iter().zip(prow) {
                cells += 1;
                correct += ((v >= 0.5) == is_pos) as usize;
                if is_pos {
                    pos_sum += v;
                    pos_n += 1;
                } else {
                    neg_sum += v;
                    neg_n += 1;
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let top: Vec<usize> = (0..row.len()).filter(|&j| row[j] == max).collect();
            if let Some(&j) = top.choose(&mut rng) {
                hits += prow[j] as usize;
            }
        }
        acc_sum += correct as f64 / cells.max(1) as f64;
        hit_sum += hits as f64 / s.len().max(1) as f64;
    }
    let n = scores.len().max(1) as f64;
    EvalScores {
        acc: acc_sum / n,
        hit1: hit_sum / n,
        mean_positive: if pos_n == 0 { 0.0 } else { pos_sum / pos_n as f64 },
        mean_negative: if neg_n == 0 { 0.0 } else { neg_sum / neg_n as f64 },
    }
}

impl<E: TokenEncoder + Clone> EmbeddingBackend for Line2NoteModel<E> {
    fn model_id(&self) -> &str {
        self.encoder.model_id()
    }

    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn max_length(&self) -> usize {
        self.encoder.max_length()
    }

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.snippet_embed(text).map_err(|e| match e {
            L2nError::EmptyNote => BackendError::EmptyInput,
            other => BackendError::Failure(other.to_string()),
        })
    }
}

impl Line2NoteModel<ToyEncoder> {
    /// Writes `pooler.json`, `scorer.json`, `encoder.json` and `config.json`.
    pub fn save(&self, dir: &Path) -> Result<(), L2nError> {
        fs::create_dir_all(dir)?;
        let pooler = serde_json::json!({"line_pooler": self.line_pooler, "note_pooler": self.note_pooler});
        fs::write(dir.join("pooler.json"), serde_json::to_string(&pooler)?)?;
        fs::write(dir.join("scorer.json"), serde_json::to_string(&self.scorer)?)?;
        fs::write(dir.join("encoder.json"), self.encoder.to_json()?)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, L2nError> {
        #[derive(Deserialize)]
        struct Poolers {
            line_pooler: AttentionPooler,
            note_pooler: Option<AttentionPooler>,
        }
        let poolers: Poolers = serde_json::from_str(&fs::read_to_string(dir.join("pooler.json"))?)?;
        let mut scorer: PairScorer = serde_json::from_str(&fs::read_to_string(dir.join("scorer.json"))?)?;
        scorer.u.zero_grad();
        scorer.b.zero_grad();
        let encoder = ToyEncoder::from_json(&fs::read_to_string(dir.join("encoder.json"))?)?;
        let config: L2nConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        Ok(Self { encoder, line_pooler: poolers.line_pooler, note_pooler: poolers.note_pooler, scorer, config, step: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_line, NoteRecord};
    use super::*;

    fn toy(d: usize) -> ToyEncoder {
        ToyEncoder::new(97, d, 5)
    }

    #[test]
    fn single_token_note_is_its_hidden_state() {
        let m = Line2NoteModel::new(toy(4), L2nConfig::default());
        let enc = m.encoder.encode_text("sword");
        assert_eq!(m.embed_note("sword").unwrap(), m.encoder.forward(&enc)[0]);
    }

    #[test]
    fn three_token_note_matches_hand_softmax() {
        let mut m = Line2NoteModel::new(toy(3), L2nConfig::default());
        m.line_pooler.p.value = vec![0.5, -1.0, 2.0];
        let x = m.encoder.forward(&m.encoder.encode_text("red blue green"));
        let z: Vec<f64> = x.iter().map(|r| 0.5 * r[0] - 1.0 * r[1] + 2.0 * r[2]).collect();
        let sum: f64 = z.iter().map(|v| v.exp()).sum();
        let want: Vec<f64> = (0..3).map(|k| (0..3).map(|t| z[t].exp() / sum * x[t][k]).sum()).collect();
        let got = m.embed_note("red blue green").unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_on_five_token_line() {
        let mut m = Line2NoteModel::new(toy(2), L2nConfig::default());
        m.line_pooler.p.value = vec![1.0, -0.5];
        let words: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let pair = build_line(&NoteRecord { book_id: "b".into(), note: "n".into(), s: 2, e: 3 }, &words, 5).unwrap();
        let (_, w) = m.line_attention(&pair).unwrap();
        let x = m.encoder.forward(&m.encoder.encode_text(&pair.line_text));
        let z: Vec<f64> = x.iter().map(|r| r[0] - 0.5 * r[1]).collect();
        let denom = z[2].exp() + z[3].exp();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[4], 0.0);
        assert!((w[2] - z[2].exp() / denom).abs() < 1e-12);
        assert!((w[3] - z[3].exp() / denom).abs() < 1e-12);
    }

    #[test]
    fn full_span_line_equals_note_embedding() {
        let m = Line2NoteModel::new(toy(4), L2nConfig::default());
        let words: Vec<String> = "the old tower fell".split(' ').map(String::from).collect();
        let pair = build_line(&NoteRecord { book_id: "b".into(), note: "n".into(), s: 0, e: 3 }, &words, 1).unwrap();
        assert_eq!(m.embed_line(&pair).unwrap(), m.embed_note("the old tower fell").unwrap());
        assert_eq!(m.snippet_embed("the old tower fell").unwrap(), m.embed_note("the old tower fell").unwrap());
    }

    #[test]
    fn zero_head_scores_one_half() {
        let s = PairScorer::zeros(3);
        assert_eq!(s.score(&[1.0, 2.0, 3.0], &[-4.0, 0.5, 9.0]).unwrap(), 0.5);
    }

    #[test]
    fn tiny_head_hand_computed() {
        // d=2: u = [0.1,0.2 | 0.3,0.4 | 0.5,0.6 | 0.7,0.8], b = 0.05
        let mut s = PairScorer::zeros(2);
        s.u.value = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        s.b.value = vec![0.05];
        let (ew, em) = ([1.0, -1.0], [0.5, 2.0]);
        // 0.1 - 0.2 + 0.15 + 0.8 + 0.25 - 1.8 + 0.35 - 1.6 + 0.05 = -1.9
        let z = s.logit(&ew, &em).unwrap();
        assert!((z - (-1.9)).abs() < 1e-12);
        assert!((s.score(&ew, &em).unwrap() - 1.0 / (1.0 + 1.9f64.exp())).abs() < 1e-12);
        // swapping flips the difference block
        assert!((s.logit(&em, &ew).unwrap() - z).abs() > 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(PairScorer::zeros(2).logit(&[1.0], &[1.0, 2.0]), Err(L2nError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn loss_closed_forms() {
        let pos: Vec<Vec<bool>> = (0..20).map(|i| (0..20).map(|j| i == j).collect()).collect();
        let half = vec![vec![0.5; 20]; 20];
        let (l, _) = loss_from_scores(&half, &pos, true);
        assert!((l - 400.0 * std::f64::consts::LN_2).abs() < 1e-9);
        let perfect: Vec<Vec<f64>> = pos.iter().map(|r| r.iter().map(|&p| if p { 1.0 - EPS } else { EPS }).collect()).collect();
        assert!(loss_from_scores(&perfect, &pos, true).0 < 1e-4);
        // positives only
        let (l, g) = loss_from_scores(&half, &pos, false);
        assert!((l - 20.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g[0][1], 0.0);
    }
}
