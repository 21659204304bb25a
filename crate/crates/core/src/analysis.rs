//! Measurement instruments: adjacent-token redundancy, information flow, FLOPs
//! accounting and wall-clock latency.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ScanParams;
use crate::model::{
    forward_dense, forward_pruned, ForwardRecord, Model, ModelConfig, PruneConfig, PruneRequest,
};
use crate::pruning::{influence_from_params, linear_schedule, Aggregator};

/// Where block outputs are tapped for the redundancy measurement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Residual stream after the block.
    #[default]
    Post,
    /// Block contribution before the residual add.
    Pre,
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(Tap::Post),
            "pre" => Ok(Tap::Pre),
            _ => Err(Error::Config(format!("unknown tap '{s}' (post, pre)"))),
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between consecutive rows of `rows` (`[k x width]`, k >= 2).
/// A zero row has similarity 0 with anything.
pub fn adjacent_cosine(rows: &[f32], width: usize) -> Result<f64> {
    if width == 0 || !rows.len().is_multiple_of(width) || rows.len() / width < 2 {
        return Err(Error::Shape(format!(
            "need at least 2 rows of width {width}, got {} values",
            rows.len()
        )));
    }
    let k = rows.len() / width;
    let sum: f64 = (0..k - 1)
        .map(|t| {
            cosine(
                &rows[t * width..(t + 1) * width],
                &rows[(t + 1) * width..(t + 2) * width],
            )
        })
        .sum();
    Ok(sum / (k - 1) as f64)
}

/// Per-layer adjacent cosine averaged over documents (dense forward).
pub fn redundancy_profile(model: &Model, docs: &[Vec<u32>], tap: Tap) -> Result<Vec<f64>> {
    if docs.is_empty() {
        return Err(Error::NoInput("no documents".into()));
    }
    let n_layers = model.config.n_layers;
    let mut sums = vec![0.0f64; n_layers];
    for doc in docs {
        let schedule = crate::pruning::PruneSchedule::dense(doc.len(), n_layers);
        let config = PruneConfig::default();
        let rec = forward_pruned(
            model,
            doc,
            &PruneRequest {
                schedule: &schedule,
                config: &config,
                protected: &[],
                target: None,
                record: true,
            },
        )?;
        for (l, layer) in rec.layers.iter().enumerate() {
            let mat = layer.materials.as_ref().expect("recorded");
            let rows = match tap {
                Tap::Post => &mat.hidden,
                Tap::Pre => &mat.mixer,
            };
            sums[l] += adjacent_cosine(rows, model.config.d_model)?;
        }
    }
    Ok(sums.into_iter().map(|s| s / docs.len() as f64).collect())
}

pub const FLOW_BINS: usize = 5;

/// Mean normalized influence per equal-width position bin, per layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowProfile {
    pub seq_len: usize,
    /// `[begin, end)` of every bin in original positions.
    pub bin_bounds: [(usize, usize); FLOW_BINS],
    /// `[n_layers][FLOW_BINS]` means; an empty bin reads 0.
    pub bins: Vec<[f64; FLOW_BINS]>,
    /// Number of scored positions behind every mean.
    pub counts: Vec<[usize; FLOW_BINS]>,
}

/// Bin of position `p` in a sequence of `len` tokens.
pub fn flow_bin(p: usize, len: usize) -> usize {
    p * FLOW_BINS / len
}

fn to_f64(p: &ScanParams<f32>) -> ScanParams<f64> {
    let c = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    ScanParams {
        d_inner: p.d_inner,
        d_state: p.d_state,
        a_log: c(&p.a_log),
        delta: c(&p.delta),
        b: c(&p.b),
        c: c(&p.c),
        x: c(&p.x),
    }
}

/// Normalized influence `s(t) / ||y_target||_2` of every position active at each layer,
/// binned by original position. Needs a record made with `record: true`.
pub fn information_flow(record: &ForwardRecord, aggregator: Aggregator) -> Result<FlowProfile> {
    let len = record.seq_len;
    let mut bin_bounds = [(0, 0); FLOW_BINS];
    for (b, bound) in bin_bounds.iter_mut().enumerate() {
        // smallest p with p * BINS / len >= b
        let begin = (b * len).div_ceil(FLOW_BINS);
        let end = ((b + 1) * len).div_ceil(FLOW_BINS);
        *bound = (begin, end);
    }
    let mut bins = Vec::with_capacity(record.layers.len());
    let mut counts = Vec::with_capacity(record.layers.len());
    for (l, layer) in record.layers.iter().enumerate() {
        let mat = layer.materials.as_ref().ok_or_else(|| {
            Error::Config("information flow needs a forward record with scan materials".into())
        })?;
        let d = mat.scan.d_inner;
        let y_norm = mat.y[mat.target * d..(mat.target + 1) * d]
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !y_norm.is_finite() || y_norm <= 0.0 {
            return Err(Error::Degenerate(format!(
                "layer {l}: output at the score target has norm {y_norm}"
            )));
        }
        let decay: Vec<f64> = mat.decay_delta.iter().map(|&v| v as f64).collect();
        let scores = influence_from_params(
            &to_f64(&mat.scan),
            Some(&decay),
            Some(mat.target),
            aggregator,
        )?;
        let mut sum = [0.0f64; FLOW_BINS];
        let mut cnt = [0usize; FLOW_BINS];
        for (i, s) in scores.scores.iter().enumerate() {
            let b = flow_bin(record.active[l].positions[i], len);
            sum[b] += s / y_norm;
            cnt[b] += 1;
        }
        let mut mean = [0.0f64; FLOW_BINS];
        for b in 0..FLOW_BINS {
            if cnt[b] > 0 {
                mean[b] = sum[b] / cnt[b] as f64;
            }
        }
        bins.push(mean);
        counts.push(cnt);
    }
    Ok(FlowProfile {
        seq_len: len,
        bin_bounds,
        bins,
        counts,
    })
}

/// Averages profiles of equally long documents bin by bin; counts are summed.
pub fn average_flow(profiles: &[FlowProfile]) -> Result<FlowProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::NoInput("no flow profiles to average".into()))?;
    if profiles
        .iter()
        .any(|p| p.seq_len != first.seq_len || p.bins.len() != first.bins.len())
    {
        return Err(Error::Shape(
            "flow profiles differ in length or depth".into(),
        ));
    }
    let mut out = first.clone();
    for l in 0..first.bins.len() {
        for b in 0..FLOW_BINS {
            out.bins[l][b] =
                profiles.iter().map(|p| p.bins[l][b]).sum::<f64>() / profiles.len() as f64;
            out.counts[l][b] = profiles.iter().map(|p| p.counts[l][b]).sum();
        }
    }
    Ok(out)
}

/// Operation counts of one block; a multiply-accumulate counts as 2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    /// Tokens entering the block.
    pub tokens: u64,
    /// Input and output projections.
    pub projections: u64,
    pub conv: u64,
    /// Step-size, B and C projections.
    pub ssm_proj: u64,
    pub scan: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.conv + self.ssm_proj + self.scan
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub per_layer: Vec<LayerFlops>,
    pub head: u64,
    pub total: u64,
}

impl FlopsReport {
    /// Everything except the head.
    pub fn token_proportional(&self) -> u64 {
        self.per_layer.iter().map(LayerFlops::total).sum()
    }
}

/// FLOPs of a forward pass over `seq_len` tokens where `keep[l]` tokens leave block `l`.
/// Block 0 sees every token; the head runs on the final survivors.
pub fn flops_estimate(config: &ModelConfig, keep: &[usize], seq_len: usize) -> Result<FlopsReport> {
    config.validate()?;
    if keep.len() != config.n_layers {
        return Err(Error::Config(format!(
            "{} keep counts for {} layers",
            keep.len(),
            config.n_layers
        )));
    }
    if keep.iter().any(|&k| k > seq_len) {
        return Err(Error::Config(format!(
            "keep counts {keep:?} exceed {seq_len} tokens"
        )));
    }
    let (m, d, n, r, kc, v) = (
        config.d_model as u64,
        config.d_inner() as u64,
        config.d_state as u64,
        config.dt_rank() as u64,
        config.d_conv as u64,
        config.vocab_size as u64,
    );
    let per_layer: Vec<LayerFlops> = (0..config.n_layers)
        .map(|l| {
            let k = if l == 0 { seq_len } else { keep[l - 1] } as u64;
            LayerFlops {
                tokens: k,
                projections: 2 * k * m * 2 * d + 2 * k * d * m,
                conv: 2 * k * d * kc,
                ssm_proj: 2 * k * (d * n * 2 + d * r + r * d),
                scan: 6 * k * d * n,
            }
        })
        .collect();
    let k_last = *keep.last().expect("n_layers >= 1") as u64;
    let head = 2 * k_last * m * v;
    let total = per_layer.iter().map(LayerFlops::total).sum::<u64>() + head;
    Ok(FlopsReport {
        per_layer,
        head,
        total,
    })
}

/// Dense vs pruned latency at one sequence length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub seq_len: usize,
    pub repetitions: usize,
    pub dense_mean_s: f64,
    pub pruned_mean_s: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub ratio: f64,
    pub prune: PruneConfig,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

/// Deterministic pseudo-random token ids.
pub fn synthetic_ids(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.random_range(0..vocab.min(256)) as u32)
        .collect()
}

/// Mean prefill latency of the dense and pruned forward passes; warmup runs are not
/// timed. Must not run concurrently with other benchmarks.
pub fn wall_clock_bench(model: &Model, spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    let mut rows = Vec::with_capacity(spec.lengths.len());
    for &len in &spec.lengths {
        let ids = synthetic_ids(len, model.config.vocab_size, spec.seed);
        let schedule = linear_schedule(len, model.config.n_layers, spec.ratio, 1)?;
        let req = PruneRequest {
            schedule: &schedule,
            config: &spec.prune,
            protected: &[],
            target: None,
            record: false,
        };
        let time = |pruned: bool| -> Result<f64> {
            let run = || -> Result<()> {
                if pruned {
                    forward_pruned(model, &ids, &req)?;
                } else {
                    forward_dense(model, &ids)?;
                }
                Ok(())
            };
            for _ in 0..spec.warmup {
                run()?;
            }
            let start = Instant::now();
            for _ in 0..spec.repetitions {
                run()?;
            }
            Ok(start.elapsed().as_secs_f64() / spec.repetitions as f64)
        };
        let dense = time(false)?;
        let pruned = time(true)?;
        log::info!("T={len}: dense {dense:.4}s, pruned {pruned:.4}s");
        rows.push(BenchRow {
            seq_len: len,
            repetitions: spec.repetitions,
            dense_mean_s: dense,
            pruned_mean_s: pruned,
            speedup: dense / pruned,
        });
    }
    Ok(rows)
}

/// One `layer,metric,value` CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub layer: String,
    pub metric: String,
    pub value: String,
}

impl MetricRow {
    pub fn new(layer: impl ToString, metric: impl Into<String>, value: impl ToString) -> Self {
        Self {
            layer: layer.to_string(),
            metric: metric.into(),
            value: value.to_string(),
        }
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("layer,metric,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.layer, r.metric, r.value);
    }
    out
}

pub fn redundancy_rows(profile: &[f64]) -> Vec<MetricRow> {
    profile
        .iter()
        .enumerate()
        .map(|(l, v)| MetricRow::new(l, "adjacent_cosine", v))
        .collect()
}

pub fn flow_rows(profile: &FlowProfile) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (l, (bins, counts)) in profile.bins.iter().zip(&profile.counts).enumerate() {
        for (b, v) in bins.iter().enumerate() {
            rows.push(MetricRow::new(l, format!("flow_bin{b}"), v));
        }
        for (b, n) in counts.iter().enumerate() {
            rows.push(MetricRow::new(l, format!("flow_count{b}"), n));
        }
    }
    rows
}

pub fn flops_rows(report: &FlopsReport) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (l, f) in report.per_layer.iter().enumerate() {
        rows.push(MetricRow::new(l, "tokens", f.tokens));
        rows.push(MetricRow::new(l, "projections", f.projections));
        rows.push(MetricRow::new(l, "conv", f.conv));
        rows.push(MetricRow::new(l, "ssm_proj", f.ssm_proj));
        rows.push(MetricRow::new(l, "scan", f.scan));
        rows.push(MetricRow::new(l, "total", f.total()));
    }
    rows.push(MetricRow::new("head", "total", report.head));
    rows.push(MetricRow::new("all", "total", report.total));
    rows
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("seq_len,repetitions,dense_mean_s,pruned_mean_s,speedup\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.seq_len, r.repetitions, r.dense_mean_s, r.pruned_mean_s, r.speedup
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pruning::PruneSchedule;

    #[test]
    fn cosine_basics() {
        let same = [1.0f32, 2.0, 1.0, 2.0];
        assert!((adjacent_cosine(&same, 2).unwrap() - 1.0).abs() < 1e-12);
        let ortho = [1.0f32, 0.0, 0.0, 3.0];
        assert_eq!(adjacent_cosine(&ortho, 2).unwrap(), 0.0);
        assert!(adjacent_cosine(&[1.0f32, 2.0], 2).is_err());
    }

    #[test]
    fn cosine_three_rows_by_hand() {
        let rows = [1.0f32, 2.0, 2.0, 0.5, -1.0, 4.0, 0.0, 3.0, -2.0];
        let c01 = (1.0 * 0.5 + -2.0 + 2.0 * 4.0) / (3.0 * (0.25f64 + 1.0 + 16.0).sqrt());
        let c12 = (0.0 + -3.0 + -8.0) / ((17.25f64).sqrt() * 13f64.sqrt());
        let got = adjacent_cosine(&rows, 3).unwrap();
        assert!((got - (c01 + c12) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn flow_bins_for_five_tokens() {
        for p in 0..5 {
            assert_eq!(flow_bin(p, 5), p);
        }
        assert_eq!(flow_bin(9, 10), 4);
        assert_eq!(flow_bin(1, 10), 0);
    }

    #[test]
    fn flow_brute_force() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_state: 4,
            vocab_size: 20,
            ..Default::default()
        };
        let model = Model::init(cfg, 3).unwrap();
        let ids: Vec<u32> = (0..12).map(|i| (i * 5 + 1) % 20).collect();
        let schedule = PruneSchedule::from_counts(12, vec![8, 6]).unwrap();
        let config = PruneConfig::default();
        let rec = forward_pruned(
            &model,
            &ids,
            &PruneRequest {
                schedule: &schedule,
                config: &config,
                protected: &[],
                target: None,
                record: true,
            },
        )
        .unwrap();
        let flow = information_flow(&rec, Aggregator::Max).unwrap();
        assert_eq!(flow.bins.len(), 2);
        for l in 0..2 {
            let mat = rec.layers[l].materials.as_ref().unwrap();
            let d = mat.scan.d_inner;
            let t = mat.target;
            let ynorm = mat.y[t * d..(t + 1) * d]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let a: Vec<f64> = mat.scan.a_log.iter().map(|&v| -(v as f64).exp()).collect();
            let n = mat.scan.d_state;
            let mut sums = [0.0; FLOW_BINS];
            let mut cnts = [0usize; FLOW_BINS];
            for (i, &pos) in rec.active[l].positions.iter().enumerate() {
                // Brute-force suffix product for each (d, n).
                let mut best = f64::NEG_INFINITY;
                for ch in 0..d {
                    let mut acc = 0.0;
                    for s in 0..n {
                        let mut prod = 1.0;
                        for k in i + 1..=t {
                            prod *= (mat.decay_delta[k * d + ch] as f64 * a[ch * n + s]).exp();
                        }
                        acc += mat.scan.c[t * n + s] as f64
                            * prod
                            * mat.scan.delta[i * d + ch] as f64
                            * mat.scan.b[i * n + s] as f64
                            * mat.scan.x[i * d + ch] as f64;
                    }
                    best = best.max(acc);
                }
                let b = pos * FLOW_BINS / 12;
                sums[b] += best / ynorm;
                cnts[b] += 1;
            }
            assert_eq!(flow.counts[l], cnts);
            for b in 0..FLOW_BINS {
                let want = if cnts[b] > 0 {
                    sums[b] / cnts[b] as f64
                } else {
                    0.0
                };
                assert!((flow.bins[l][b] - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
        assert_eq!(flow.bin_bounds[0], (0, 3));
        assert_eq!(flow.bin_bounds[4], (10, 12));
    }

    #[test]
    fn flops_dense_vs_pruned() {
        let cfg = ModelConfig::default();
        let dense = flops_estimate(&cfg, &[100; 4], 100).unwrap();
        let same = flops_estimate(&cfg, &PruneSchedule::dense(100, 4).keep, 100).unwrap();
        assert_eq!(dense, same);
        let pruned = flops_estimate(&cfg, &[100, 100, 99, 99], 100).unwrap();
        assert!(pruned.total < dense.total);
        let sum: u64 = dense.per_layer.iter().map(|l| l.total()).sum();
        assert_eq!(dense.total, sum + dense.head);
    }

    #[test]
    fn flops_single_layer_by_hand() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            expand: 2,
            d_state: 3,
            d_conv: 2,
            vocab_size: 5,
            dt_rank: 1,
        };
        let rep = flops_estimate(&cfg, &[2], 3).unwrap();
        let l = rep.per_layer[0];
        assert_eq!(l.projections, 2 * 3 * 4 * 16 + 2 * 3 * 8 * 4);
        assert_eq!(l.conv, 2 * 3 * 8 * 2);
        assert_eq!(l.ssm_proj, 2 * 3 * (8 * 3 * 2 + 8 + 8));
        assert_eq!(l.scan, 6 * 3 * 8 * 3);
        assert_eq!(rep.head, 2 * 2 * 4 * 5);
    }

    #[test]
    fn csv_shapes() {
        let csv = metrics_csv(&redundancy_rows(&[0.5, 0.25]));
        assert_eq!(
            csv,
            "layer,metric,value\n0,adjacent_cosine,0.5\n1,adjacent_cosine,0.25\n"
        );
    }
}
