use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ScanParams;
use crate::pruning::{
    influence_unchecked, linear_schedule, select_influence, select_random_active,
    select_uniform_active, Aggregator, Criterion, PruneSchedule,
};

use super::{block_forward, LayerState, Model};

/// Original positions of the tokens that feed block `layer` (`layer == n_layers` is the
/// set reaching the head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub layer: usize,
    pub positions: Vec<usize>,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

/// How tokens are chosen at each layer boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub aggregator: Aggregator,
    /// Drop the step-size bias from the decay factors used for scoring.
    pub exclude_bias: bool,
    /// Seed of the random criterion.
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::Influence,
            aggregator: Aggregator::Max,
            exclude_bias: true,
            seed: 0,
        }
    }
}

/// One pruned forward pass.
#[derive(Debug, Clone)]
pub struct PruneRequest<'a> {
    pub schedule: &'a PruneSchedule,
    pub config: &'a PruneConfig,
    /// Positions that must survive every layer.
    pub protected: &'a [usize],
    /// Score target. Positions after it are never pruned and the target itself is
    /// protected. Defaults to the last position.
    pub target: Option<usize>,
    /// Keep per-layer scan materials for analysis.
    pub record: bool,
}

/// Scan inputs and outputs of one block, kept for analysis.
#[derive(Debug, Clone)]
pub struct LayerMaterials {
    pub scan: ScanParams<f32>,
    /// Step sizes for the scoring decay factors (bias-free when requested).
    pub decay_delta: Vec<f32>,
    /// Index of the score target within the block's tokens.
    pub target: usize,
    /// Scan outputs `[k x d_inner]`.
    pub y: Vec<f32>,
    /// Post-residual block outputs `[k x d_model]`.
    pub hidden: Vec<f32>,
    /// Pre-residual (mixer) outputs `[k x d_model]`.
    pub mixer: Vec<f32>,
}

/// Per-layer bookkeeping of a forward pass.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// Influence scores of the prunable tokens when the influence criterion ran.
    pub scores: Option<Vec<f32>>,
    pub materials: Option<LayerMaterials>,
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub seq_len: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// `n_layers + 1` sets: `active[l]` feeds block `l`, the last one reaches the head.
    pub active: Vec<ActiveSet>,
    pub layers: Vec<LayerRecord>,
    /// Residual stream at the surviving positions, `[k x d_model]`.
    pub final_hidden: Vec<f32>,
    /// Logits at the surviving positions, `[k x vocab_size]`.
    pub logits: Vec<f32>,
}

impl ForwardRecord {
    /// Positions reaching the head.
    pub fn positions(&self) -> &[usize] {
        &self
            .active
            .last()
            .expect("at least the input set")
            .positions
    }

    fn row(&self, pos: usize) -> Option<usize> {
        self.positions().binary_search(&pos).ok()
    }

    pub fn logits_at(&self, pos: usize) -> Option<&[f32]> {
        let v = self.vocab_size;
        self.row(pos).map(|i| &self.logits[i * v..(i + 1) * v])
    }

    pub fn hidden_at(&self, pos: usize) -> Option<&[f32]> {
        let m = self.d_model;
        self.row(pos)
            .map(|i| &self.final_hidden[i * m..(i + 1) * m])
    }
}

/// Plain forward over every position, without any pruning machinery.
pub fn forward_dense(model: &Model, ids: &[u32]) -> Result<ForwardRecord> {
    if ids.is_empty() {
        return Err(Error::InvalidValue("empty token sequence".into()));
    }
    let mut hidden = model.embed(ids)?;
    for layer in &model.layers {
        hidden = block_forward(layer, &model.config, &hidden, None)?.hidden;
    }
    let all: Vec<usize> = (0..ids.len()).collect();
    Ok(ForwardRecord {
        seq_len: ids.len(),
        d_model: model.config.d_model,
        vocab_size: model.config.vocab_size,
        active: (0..=model.config.n_layers)
            .map(|layer| ActiveSet {
                layer,
                positions: all.clone(),
            })
            .collect(),
        layers: vec![
            LayerRecord {
                scores: None,
                materials: None
            };
            model.config.n_layers
        ],
        logits: model.head_logits(&hidden),
        final_hidden: hidden,
    })
}

/// Forward pass that drops tokens after every block according to `req.schedule`.
pub fn forward_pruned(model: &Model, ids: &[u32], req: &PruneRequest) -> Result<ForwardRecord> {
    let t = ids.len();
    if t == 0 {
        return Err(Error::InvalidValue("empty token sequence".into()));
    }
    if req.schedule.n_layers() != model.config.n_layers {
        return Err(Error::Config(format!(
            "schedule has {} layers, model has {}",
            req.schedule.n_layers(),
            model.config.n_layers
        )));
    }
    if req.schedule.seq_len != t {
        return Err(Error::Config(format!(
            "schedule is for {} tokens, input has {t}",
            req.schedule.seq_len
        )));
    }
    let target = req.target.unwrap_or(t - 1);
    let protected = protected_set(req.protected, target, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.config.seed);
    let hidden = model.embed(ids)?;
    let mut states = vec![None; model.config.n_layers];
    let seg = run_segment(
        model,
        hidden,
        0,
        t,
        &req.schedule.keep,
        req.config,
        &protected,
        target,
        &mut states,
        &mut rng,
        req.record,
    )?;
    Ok(seg.into_record(model, t))
}

/// Chunked prefill: the sequence is split into `chunk_size` pieces, each pruned with its
/// own linear schedule and scored against its own last token, while the recurrent and
/// convolution state carry over between chunks.
pub fn forward_chunked(
    model: &Model,
    ids: &[u32],
    chunk_size: usize,
    ratio: f64,
    config: &PruneConfig,
    protected: &[usize],
) -> Result<ForwardRecord> {
    let t = ids.len();
    if t == 0 {
        return Err(Error::InvalidValue("empty token sequence".into()));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let all_protected = protected_set(protected, t - 1, t)?;
    let n_layers = model.config.n_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut states = vec![None; n_layers];
    let mut merged: Option<Segment> = None;
    for start in (0..t).step_by(chunk_size) {
        let end = (start + chunk_size).min(t);
        let target = end - 1;
        let prot: BTreeSet<usize> = all_protected
            .range(start..end)
            .copied()
            .chain(std::iter::once(target))
            .collect();
        let schedule = linear_schedule(end - start, n_layers, ratio, prot.len())?;
        let hidden = model.embed(&ids[start..end])?;
        let seg = run_segment(
            model,
            hidden,
            start,
            end,
            &schedule.keep,
            config,
            &prot,
            target,
            &mut states,
            &mut rng,
            false,
        )?;
        merged = Some(match merged {
            None => seg,
            Some(mut acc) => {
                for (a, b) in acc.active.iter_mut().zip(seg.active) {
                    a.extend(b);
                }
                for (a, b) in acc.scores.iter_mut().zip(seg.scores) {
                    if let (Some(a), Some(b)) = (a.as_mut(), b) {
                        a.extend(b);
                    }
                }
                acc.hidden.extend(seg.hidden);
                acc
            }
        });
    }
    Ok(merged.expect("at least one chunk").into_record(model, t))
}

fn protected_set(protected: &[usize], target: usize, t: usize) -> Result<BTreeSet<usize>> {
    if target >= t {
        return Err(Error::OutOfRange {
            index: target,
            len: t,
        });
    }
    let mut set = BTreeSet::new();
    for &p in protected {
        if p >= t {
            return Err(Error::OutOfRange { index: p, len: t });
        }
        set.insert(p);
    }
    set.insert(target);
    Ok(set)
}

struct Segment {
    active: Vec<Vec<usize>>,
    scores: Vec<Option<Vec<f32>>>,
    materials: Vec<Option<LayerMaterials>>,
    hidden: Vec<f32>,
}

impl Segment {
    fn into_record(self, model: &Model, seq_len: usize) -> ForwardRecord {
        ForwardRecord {
            seq_len,
            d_model: model.config.d_model,
            vocab_size: model.config.vocab_size,
            active: self
                .active
                .into_iter()
                .enumerate()
                .map(|(layer, positions)| ActiveSet { layer, positions })
                .collect(),
            layers: self
                .scores
                .into_iter()
                .zip(self.materials)
                .map(|(scores, materials)| LayerRecord { scores, materials })
                .collect(),
            logits: model.head_logits(&self.hidden),
            final_hidden: self.hidden,
        }
    }
}

/// Runs every block over positions `start..end`. Positions after `target` and those in
/// `protected` always survive; `keep[l]` tokens leave block `l`.
#[allow(clippy::too_many_arguments)]
fn run_segment(
    model: &Model,
    mut hidden: Vec<f32>,
    start: usize,
    end: usize,
    keep: &[usize],
    config: &PruneConfig,
    protected: &BTreeSet<usize>,
    target: usize,
    states: &mut [Option<LayerState>],
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<Segment> {
    let m = model.config.d_model;
    let required = protected.len() + (end - 1 - target);
    if let Some((l, &k)) = keep.iter().enumerate().find(|(_, &k)| k < required) {
        return Err(Error::Config(format!(
            "layer {l} keeps {k} tokens but {required} must survive"
        )));
    }
    let mut active: Vec<usize> = (start..end).collect();
    let mut seg = Segment {
        active: vec![active.clone()],
        scores: Vec::with_capacity(keep.len()),
        materials: Vec::with_capacity(keep.len()),
        hidden: Vec::new(),
    };
    for (l, layer) in model.layers.iter().enumerate() {
        let out = block_forward(layer, &model.config, &hidden, states[l].as_ref())?;
        states[l] = Some(out.state.clone());
        let t_local = active
            .binary_search(&target)
            .map_err(|_| Error::Config(format!("target {target} is not active")))?;
        let k = keep[l];
        let mut scores = None;
        let kept_local: Option<Vec<usize>> = if k >= active.len() {
            None
        } else {
            let k_prefix = k - (active.len() - 1 - t_local);
            let prefix = &active[..=t_local];
            let mut picked = match config.criterion {
                Criterion::Influence => {
                    let decay = out.decay_delta(config.exclude_bias);
                    let s = influence_unchecked(&out.scan, &decay, t_local, config.aggregator)?;
                    let prot_local: Vec<usize> = prefix
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| protected.contains(p))
                        .map(|(i, _)| i)
                        .collect();
                    let picked = select_influence(&s.scores, k_prefix, &prot_local)?;
                    scores = Some(s.scores);
                    picked
                }
                Criterion::Uniform => {
                    let rel: Vec<usize> = prefix.iter().map(|p| p - start).collect();
                    let prot: Vec<usize> =
                        protected.range(start..=target).map(|p| p - start).collect();
                    let chosen = select_uniform_active(&rel, target - start + 1, k_prefix, &prot)?;
                    to_local(&rel, &chosen)
                }
                Criterion::Random => {
                    let prot: Vec<usize> = protected.range(start..=target).copied().collect();
                    let chosen = select_random_active(prefix, k_prefix, &prot, rng)?;
                    to_local(prefix, &chosen)
                }
            };
            picked.extend(t_local + 1..active.len());
            Some(picked)
        };
        if record {
            seg.materials.push(Some(LayerMaterials {
                decay_delta: out.decay_delta(config.exclude_bias),
                target: t_local,
                y: out.y,
                hidden: out.hidden.clone(),
                mixer: out.mixer,
                scan: out.scan,
            }));
        } else {
            seg.materials.push(None);
        }
        seg.scores.push(scores);
        hidden = match &kept_local {
            None => out.hidden,
            Some(idx) => {
                let mut next = Vec::with_capacity(idx.len() * m);
                for &i in idx {
                    next.extend_from_slice(&out.hidden[i * m..(i + 1) * m]);
                }
                next
            }
        };
        if let Some(idx) = kept_local {
            active = idx.into_iter().map(|i| active[i]).collect();
        }
        seg.active.push(active.clone());
    }
    seg.hidden = hidden;
    Ok(seg)
}

/// Indices into `positions` of the ascending subset `chosen`.
fn to_local(positions: &[usize], chosen: &[usize]) -> Vec<usize> {
    chosen
        .iter()
        .map(|p| positions.binary_search(p).expect("chosen from positions"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(seed: u64, d_conv: usize) -> Model {
        Model::init(
            ModelConfig {
                n_layers: 3,
                d_model: 8,
                expand: 2,
                d_state: 4,
                d_conv,
                vocab_size: 20,
                dt_rank: 0,
            },
            seed,
        )
        .unwrap()
    }

    fn ids(len: usize) -> Vec<u32> {
        (0..len as u32).map(|i| (i * 7 + 3) % 20).collect()
    }

    #[test]
    fn full_schedule_is_bitwise_dense() {
        let model = tiny(1, 4);
        let ids = ids(12);
        let dense = forward_dense(&model, &ids).unwrap();
        let schedule = PruneSchedule::dense(12, 3);
        for criterion in Criterion::ALL {
            let config = PruneConfig {
                criterion,
                ..Default::default()
            };
            let req = PruneRequest {
                schedule: &schedule,
                config: &config,
                protected: &[],
                target: None,
                record: false,
            };
            let pruned = forward_pruned(&model, &ids, &req).unwrap();
            assert_eq!(pruned.logits, dense.logits);
            assert_eq!(pruned.final_hidden, dense.final_hidden);
        }
    }

    #[test]
    fn active_sets_follow_schedule_and_nest() {
        let model = tiny(2, 4);
        let ids = ids(16);
        let schedule = linear_schedule(16, 3, 0.5, 2).unwrap();
        for criterion in Criterion::ALL {
            let config = PruneConfig {
                criterion,
                seed: 5,
                ..Default::default()
            };
            let req = PruneRequest {
                schedule: &schedule,
                config: &config,
                protected: &[0],
                target: None,
                record: true,
            };
            let rec = forward_pruned(&model, &ids, &req).unwrap();
            assert_eq!(rec.active[0].len(), 16);
            for l in 0..3 {
                assert_eq!(rec.active[l + 1].len(), schedule.keep[l]);
                assert!(rec.active[l + 1]
                    .positions
                    .iter()
                    .all(|p| rec.active[l].contains(*p)));
                assert!(rec.active[l + 1].contains(0) && rec.active[l + 1].contains(15));
            }
            assert_eq!(rec.logits.len(), 8 * 20);
            assert!(rec.logits_at(15).is_some());
        }
    }

    #[test]
    fn keep_one_leaves_the_last_token() {
        let model = tiny(3, 0);
        let ids = ids(10);
        let schedule = PruneSchedule::from_counts(10, vec![5, 2, 1]).unwrap();
        let config = PruneConfig::default();
        let req = PruneRequest {
            schedule: &schedule,
            config: &config,
            protected: &[9],
            target: None,
            record: false,
        };
        let rec = forward_pruned(&model, &ids, &req).unwrap();
        assert_eq!(rec.positions(), &[9]);
    }

    #[test]
    fn suffix_after_target_survives() {
        let model = tiny(4, 4);
        let ids = ids(12);
        let schedule = PruneSchedule::from_counts(12, vec![8, 6, 5]).unwrap();
        for criterion in Criterion::ALL {
            let config = PruneConfig {
                criterion,
                ..Default::default()
            };
            let req = PruneRequest {
                schedule: &schedule,
                config: &config,
                protected: &[],
                target: Some(7),
                record: false,
            };
            let rec = forward_pruned(&model, &ids, &req).unwrap();
            assert_eq!(rec.positions().len(), 5);
            assert!(rec.positions().ends_with(&[7, 8, 9, 10, 11]));
        }
    }

    #[test]
    fn too_many_protected_is_a_config_error() {
        let model = tiny(5, 0);
        let ids = ids(10);
        let schedule = PruneSchedule::from_counts(10, vec![5, 3, 2]).unwrap();
        let config = PruneConfig::default();
        let req = PruneRequest {
            schedule: &schedule,
            config: &config,
            protected: &[0, 1, 2],
            target: None,
            record: false,
        };
        assert!(matches!(
            forward_pruned(&model, &ids, &req),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let model = tiny(6, 4);
        let ids = ids(20);
        let schedule = linear_schedule(20, 3, 0.3, 1).unwrap();
        let config = PruneConfig {
            criterion: Criterion::Random,
            seed: 9,
            ..Default::default()
        };
        let req = PruneRequest {
            schedule: &schedule,
            config: &config,
            protected: &[],
            target: None,
            record: false,
        };
        let a = forward_pruned(&model, &ids, &req).unwrap();
        let b = forward_pruned(&model, &ids, &req).unwrap();
        assert_eq!(a.active, b.active);
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn chunked_single_chunk_matches_whole() {
        let model = tiny(7, 4);
        let ids = ids(16);
        let config = PruneConfig::default();
        let chunked = forward_chunked(&model, &ids, 16, 0.5, &config, &[]).unwrap();
        let schedule = linear_schedule(16, 3, 0.5, 1).unwrap();
        let req = PruneRequest {
            schedule: &schedule,
            config: &config,
            protected: &[],
            target: None,
            record: false,
        };
        let whole = forward_pruned(&model, &ids, &req).unwrap();
        assert_eq!(chunked.active, whole.active);
        assert_eq!(chunked.logits, whole.logits);
    }

    #[test]
    fn chunked_at_full_ratio_matches_dense() {
        let model = tiny(8, 4);
        let ids = ids(17);
        let dense = forward_dense(&model, &ids).unwrap();
        let rec = forward_chunked(&model, &ids, 5, 1.0, &PruneConfig::default(), &[]).unwrap();
        assert_eq!(rec.positions().len(), 17);
        for (a, b) in rec.logits.iter().zip(&dense.logits) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn chunks_keep_their_last_tokens() {
        let model = tiny(9, 4);
        let ids = ids(20);
        let rec = forward_chunked(&model, &ids, 8, 0.25, &PruneConfig::default(), &[]).unwrap();
        for last in [7, 15, 19] {
            assert!(rec.active[3].contains(last));
        }
        // 8 tokens -> 2 per full chunk, 4 tokens -> 1 in the tail chunk
        assert_eq!(rec.positions().len(), 5);
    }
}
