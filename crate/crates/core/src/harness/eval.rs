use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    forward_chunked, forward_pruned, ForwardRecord, Model, PruneConfig, PruneRequest,
};
use crate::pruning::linear_schedule;

use super::corpus::{byte_tokenize, sample_documents, Document};

/// Log-probabilities of one logit row, computed in f64.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max
        + logits
            .iter()
            .map(|&x| (x as f64 - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// Perplexity-with-context settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub snippet_len: usize,
    /// Strictly increasing, each >= 1.
    pub context_lengths: Vec<usize>,
    /// Final keep ratio of the context schedule.
    pub ratio: f64,
    pub prune: PruneConfig,
    /// Documents to evaluate; all when absent.
    pub max_docs: Option<usize>,
    /// Chunked prefill of the context when set.
    pub chunk_size: Option<usize>,
    /// Document sampling seed.
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            snippet_len: 100,
            context_lengths: vec![100, 200, 400, 800],
            ratio: 1.0,
            prune: PruneConfig::default(),
            max_docs: None,
            chunk_size: None,
            seed: 0,
        }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snippet_len == 0 {
            return Err(Error::Config("snippet length must be >= 1".into()));
        }
        if self.context_lengths.is_empty() {
            return Err(Error::Config("no context lengths given".into()));
        }
        if self.context_lengths[0] == 0 {
            return Err(Error::Config("context lengths must be >= 1".into()));
        }
        if self.context_lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "context lengths {:?} are not strictly increasing",
                self.context_lengths
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "keep ratio {} must lie in (0, 1]",
                self.ratio
            )));
        }
        if self.chunk_size == Some(0) {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub context_len: usize,
    pub n_docs: usize,
    pub perplexity: f64,
    pub nll_sum: f64,
    pub n_tokens: usize,
    /// sha256 of the scored ids (little-endian u32, documents in order).
    pub snippet_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub rows: Vec<PplRow>,
    /// Documents shorter than the longest context plus the snippet.
    pub skipped: usize,
    pub documents: Vec<String>,
}

struct DocScore {
    nll: Vec<f64>,
    scored: Vec<Vec<u32>>,
}

fn score_document(model: &Model, ids: &[u32], spec: &EvalSpec) -> Result<DocScore> {
    let s = spec.snippet_len;
    let snippet_start = ids.len() - s;
    let mut out = DocScore {
        nll: Vec::new(),
        scored: Vec::new(),
    };
    for &c in &spec.context_lengths {
        let input = &ids[snippet_start - c..ids.len() - 1];
        let record = if let Some(chunk) = spec.chunk_size {
            let protected: Vec<usize> = (c - 1..input.len()).collect();
            forward_chunked(model, input, chunk, spec.ratio, &spec.prune, &protected)?
        } else {
            let schedule =
                linear_schedule(c, model.config.n_layers, spec.ratio, 1)?.with_fixed_suffix(s - 1);
            forward_pruned(
                model,
                input,
                &PruneRequest {
                    schedule: &schedule,
                    config: &spec.prune,
                    protected: &[],
                    target: Some(c - 1),
                    record: false,
                },
            )?
        };
        let targets = &ids[snippet_start..];
        let mut nll = 0.0;
        for (j, &tok) in targets.iter().enumerate() {
            nll -= token_logprob(&record, c - 1 + j, tok)?;
        }
        out.nll.push(nll);
        out.scored.push(targets.to_vec());
    }
    Ok(out)
}

fn token_logprob(record: &ForwardRecord, pos: usize, tok: u32) -> Result<f64> {
    let logits = record
        .logits_at(pos)
        .ok_or_else(|| Error::Degenerate(format!("position {pos} was pruned before the head")))?;
    let lp = log_softmax(logits);
    lp.get(tok as usize).copied().ok_or(Error::OutOfRange {
        index: tok as usize,
        len: lp.len(),
    })
}

/// Perplexity of each document's final `snippet_len` tokens given the `c` tokens before
/// them, for every context length. Documents are evaluated in parallel and pooled in
/// sampling order.
pub fn perplexity_with_context(
    model: &Model,
    corpus: &[Document],
    spec: &EvalSpec,
) -> Result<PplReport> {
    spec.validate()?;
    model.validate()?;
    let need = spec.context_lengths.last().unwrap() + spec.snippet_len;
    let sampled = sample_documents(corpus, None, spec.seed);
    let mut docs = Vec::new();
    let mut skipped = 0;
    for d in sampled {
        if spec.max_docs.is_some_and(|m| docs.len() >= m) {
            break;
        }
        if d.ids.len() < need {
            log::warn!("skipping {}: {} tokens, need {need}", d.name, d.ids.len());
            skipped += 1;
        } else {
            docs.push(d);
        }
    }
    if docs.is_empty() {
        return Err(Error::NoInput(format!(
            "no document has the {need} tokens required ({skipped} skipped)"
        )));
    }
    let scores: Vec<DocScore> = docs
        .par_iter()
        .map(|d| score_document(model, &d.ids, spec))
        .collect::<Result<_>>()?;
    let rows = spec
        .context_lengths
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut hasher = Sha256::new();
            let mut nll_sum = 0.0;
            let mut n_tokens = 0;
            for s in &scores {
                nll_sum += s.nll[i];
                n_tokens += s.scored[i].len();
                for t in &s.scored[i] {
                    hasher.update(t.to_le_bytes());
                }
            }
            PplRow {
                context_len: c,
                n_docs: scores.len(),
                perplexity: (nll_sum / n_tokens as f64).exp(),
                nll_sum,
                n_tokens,
                snippet_sha256: hasher
                    .finalize()
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect(),
            }
        })
        .collect();
    Ok(PplReport {
        rows,
        skipped,
        documents: docs.into_iter().map(|d| d.name).collect(),
    })
}

/// A prompt with candidate continuations, one of which is correct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLabelItem {
    pub prompt: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub answer: usize,
}

impl PromptLabelItem {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidValue("empty prompt".into()));
        }
        if self.candidates.is_empty() || self.candidates.iter().any(Vec::is_empty) {
            return Err(Error::InvalidValue("labels must be non-empty".into()));
        }
        if self.answer >= self.candidates.len() {
            return Err(Error::OutOfRange {
                index: self.answer,
                len: self.candidates.len(),
            });
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextOrIds {
    Text(String),
    Ids(Vec<u32>),
}

impl TextOrIds {
    fn ids(self) -> Vec<u32> {
        match self {
            TextOrIds::Text(t) => byte_tokenize(&t),
            TextOrIds::Ids(v) => v,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    prompt: TextOrIds,
    candidates: Vec<TextOrIds>,
    answer: usize,
}

/// JSON lines of `{"prompt": .., "candidates": [..], "answer": i}`; prompt and candidates
/// are strings (byte-tokenized) or id arrays.
pub fn load_items(path: &Path) -> Result<Vec<PromptLabelItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = serde_json::from_str(line)
            .map_err(|e| Error::InvalidValue(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let item = PromptLabelItem {
            prompt: raw.prompt.ids(),
            candidates: raw.candidates.into_iter().map(TextOrIds::ids).collect(),
            answer: raw.answer,
        };
        item.validate()
            .map_err(|e| Error::InvalidValue(format!("{}:{}: {e}", path.display(), i + 1)))?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::NoInput(format!("{} holds no items", path.display())));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEvalSpec {
    pub ratio: f64,
    pub prune: PruneConfig,
    /// Divide each label's log-likelihood by its length.
    pub normalize: bool,
}

impl Default for LabelEvalSpec {
    fn default() -> Self {
        Self {
            ratio: 1.0,
            prune: PruneConfig::default(),
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub predicted: usize,
    pub answer: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub accuracy: f64,
    pub correct: usize,
    pub items: Vec<ItemResult>,
}

/// Forward of `prompt ++ label[..len-1]`: only prompt tokens are pruned, scored against
/// the final prompt token. Returns the record and the summed label log-likelihood.
pub fn prompt_label_forward(
    model: &Model,
    prompt: &[u32],
    label: &[u32],
    ratio: f64,
    config: &PruneConfig,
) -> Result<(ForwardRecord, f64)> {
    if prompt.is_empty() || label.is_empty() {
        return Err(Error::InvalidValue(
            "prompt and label must be non-empty".into(),
        ));
    }
    let p = prompt.len();
    let input: Vec<u32> = prompt
        .iter()
        .chain(&label[..label.len() - 1])
        .copied()
        .collect();
    let schedule =
        linear_schedule(p, model.config.n_layers, ratio, 1)?.with_fixed_suffix(label.len() - 1);
    let record = forward_pruned(
        model,
        &input,
        &PruneRequest {
            schedule: &schedule,
            config,
            protected: &[],
            target: Some(p - 1),
            record: false,
        },
    )?;
    let mut ll = 0.0;
    for (j, &tok) in label.iter().enumerate() {
        ll += token_logprob(&record, p - 1 + j, tok)?;
    }
    Ok((record, ll))
}

/// Accuracy of picking the highest-scoring candidate; ties go to the earliest one.
pub fn eval_prompt_label(
    model: &Model,
    items: &[PromptLabelItem],
    spec: &LabelEvalSpec,
) -> Result<LabelReport> {
    if items.is_empty() {
        return Err(Error::NoInput("no prompt/label items".into()));
    }
    model.validate()?;
    let results: Vec<ItemResult> = items
        .par_iter()
        .map(|item| {
            item.validate()?;
            let scores = item
                .candidates
                .iter()
                .map(|label| {
                    let (_, ll) =
                        prompt_label_forward(model, &item.prompt, label, spec.ratio, &spec.prune)?;
                    Ok(if spec.normalize {
                        ll / label.len() as f64
                    } else {
                        ll
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let mut predicted = 0;
            for (i, &s) in scores.iter().enumerate() {
                if s > scores[predicted] {
                    predicted = i;
                }
            }
            Ok(ItemResult {
                predicted,
                answer: item.answer,
                scores,
            })
        })
        .collect::<Result<_>>()?;
    let correct = results.iter().filter(|r| r.predicted == r.answer).count();
    Ok(LabelReport {
        accuracy: correct as f64 / results.len() as f64,
        correct,
        items: results,
    })
}

#[cfg(test)]
pub(crate) fn random_items(seed: u64, n: usize, vocab: u32) -> Vec<PromptLabelItem> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = rng.random_range(1..24);
            let k = rng.random_range(1..4);
            let candidates = (0..k)
                .map(|_| {
                    let len = rng.random_range(1..5);
                    (0..len).map(|_| rng.random_range(0..vocab)).collect()
                })
                .collect();
            PromptLabelItem {
                prompt: (0..p).map(|_| rng.random_range(0..vocab)).collect(),
                candidates,
                answer: rng.random_range(0..k),
            }
        })
        .collect()
}
