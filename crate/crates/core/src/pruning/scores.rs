use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ScanParams, ScanTrace};
use crate::numeric::Real;

/// How the per-channel influence vector is reduced to one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Max,
    L2,
}

impl Aggregator {
    fn reduce<F: Real>(self, row: &[F]) -> F {
        match self {
            Aggregator::Max => row.iter().copied().fold(F::neg_infinity(), F::max),
            Aggregator::L2 => row.iter().map(|v| *v * *v).sum::<F>().sqrt(),
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregator::Max),
            "l2" => Ok(Aggregator::L2),
            other => Err(Error::Config(format!("unknown aggregator '{other}'"))),
        }
    }
}

/// Scores `s(t)` for positions `0..=target`, measured against the output at `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceScores<F> {
    pub scores: Vec<F>,
    pub target: usize,
}

/// Backward sweep over `t = target..=0` keeping the running suffix product
/// `P[d,n] = prod_{k=t+1..target} abar_k[d,n]`. For every `t` it hands
/// `delta_y(t)[d] = sum_n c[n] * P[d,n] * bbar_t[d,n] * x_t[d]` to `emit`.
///
/// `abar(t, d, a_row, out)` fills the decay factors of channel `d` at step `t`;
/// `bbar_x(t, d, n)` returns `bbar_t[d,n] * x_t[d]`.
fn suffix_sweep<F: Real>(
    d_inner: usize,
    d_state: usize,
    target: usize,
    c_target: &[F],
    mut abar: impl FnMut(usize, usize, &mut [F]),
    bbar_x: impl Fn(usize, usize, usize) -> F,
    mut emit: impl FnMut(usize, &[F]),
) -> Result<()> {
    let mut prod = vec![F::one(); d_inner * d_state];
    let mut row = vec![F::zero(); d_inner];
    let mut decay = vec![F::zero(); d_state];
    for t in (0..=target).rev() {
        for d in 0..d_inner {
            let p = &mut prod[d * d_state..(d + 1) * d_state];
            let mut acc = F::zero();
            for n in 0..d_state {
                acc = acc + c_target[n] * p[n] * bbar_x(t, d, n);
            }
            row[d] = acc;
            abar(t, d, &mut decay);
            for (pn, an) in p.iter_mut().zip(&decay) {
                *pn = *pn * *an;
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                what: "influence suffix product",
            });
        }
        emit(t, &row);
    }
    Ok(())
}

fn check_target(target: usize, len: usize) -> Result<()> {
    if target >= len {
        Err(Error::OutOfRange { index: target, len })
    } else {
        Ok(())
    }
}

/// Per-channel influence `delta_y(t)` on the output at `target`, `[(target+1) x d_inner]`,
/// evaluated from a recorded trace.
pub fn influence_deltas<F: Real>(
    trace: &ScanTrace<F>,
    c_target: &[F],
    target: usize,
) -> Result<Vec<F>> {
    check_target(target, trace.len())?;
    let (d_inner, d_state) = (trace.d_inner, trace.d_state);
    if c_target.len() != d_state {
        return Err(Error::Shape(format!(
            "c_target has {} entries, expected {d_state}",
            c_target.len()
        )));
    }
    let mut out = vec![F::zero(); (target + 1) * d_inner];
    suffix_sweep(
        d_inner,
        d_state,
        target,
        c_target,
        |t, d, dst| {
            let base = (t * d_inner + d) * d_state;
            dst.copy_from_slice(&trace.abar[base..base + d_state]);
        },
        |t, d, n| trace.bbar[(t * d_inner + d) * d_state + n] * trace.x[t * d_inner + d],
        |t, row| out[t * d_inner..(t + 1) * d_inner].copy_from_slice(row),
    )?;
    Ok(out)
}

/// Influence scores from a recorded trace (the decay factors stored in the trace are used
/// as they are).
pub fn influence_scores<F: Real>(
    trace: &ScanTrace<F>,
    c_target: &[F],
    target: usize,
    aggregator: Aggregator,
) -> Result<InfluenceScores<F>> {
    let deltas = influence_deltas(trace, c_target, target)?;
    let scores = deltas
        .chunks_exact(trace.d_inner)
        .map(|row| aggregator.reduce(row))
        .collect();
    Ok(InfluenceScores { scores, target })
}

/// Influence scores computed directly from scan inputs without materializing the
/// `[T x D x N]` trace.
///
/// `decay_delta`, when given, replaces the step sizes used for the decay factors
/// `abar_k` only (the bias-excluded step sizes); the input matrices `bbar_t` always use
/// `params.delta`. The target is `params.len() - 1` unless `target` says otherwise.
pub fn influence_from_params<F: Real>(
    params: &ScanParams<F>,
    decay_delta: Option<&[F]>,
    target: Option<usize>,
    aggregator: Aggregator,
) -> Result<InfluenceScores<F>> {
    params.validate()?;
    if let Some(dd) = decay_delta {
        if dd.len() != params.delta.len() {
            return Err(Error::Shape(format!(
                "decay step sizes have {} entries, expected {}",
                dd.len(),
                params.delta.len()
            )));
        }
        if dd.iter().any(|v| !(v.is_finite() && *v >= F::zero())) {
            return Err(Error::InvalidValue(
                "decay step sizes must be finite and non-negative".into(),
            ));
        }
    }
    let target = target.unwrap_or(params.len() - 1);
    check_target(target, params.len())?;
    influence_unchecked(
        params,
        decay_delta.unwrap_or(&params.delta),
        target,
        aggregator,
    )
}

/// [`influence_from_params`] for inputs the caller has already checked.
pub(crate) fn influence_unchecked<F: Real>(
    params: &ScanParams<F>,
    decay_delta: &[F],
    target: usize,
    aggregator: Aggregator,
) -> Result<InfluenceScores<F>> {
    let a = crate::kernel::transpose(&params.decay_rates(), params.d_inner, params.d_state);
    let mut scores = vec![F::zero(); target + 1];
    sweep_params(params, decay_delta, &a, target, aggregator, &mut scores)?;
    Ok(InfluenceScores { scores, target })
}

crate::numeric::multiversion!(
    fn sweep_params<F: Real>(
        params: &ScanParams<F>,
        decay_delta: &[F],
        a_t: &[F],
        target: usize,
        aggregator: Aggregator,
        scores: &mut [F],
    ) -> Result<()> => sweep_params_body
);

/// [`suffix_sweep`] specialised to scan inputs, with state-major suffix products so the
/// inner loops run over contiguous channels.
#[inline(always)]
fn sweep_params_body<F: Real>(
    params: &ScanParams<F>,
    decay_delta: &[F],
    a_t: &[F],
    target: usize,
    aggregator: Aggregator,
    scores: &mut [F],
) -> Result<()> {
    let (d_inner, d_state) = (params.d_inner, params.d_state);
    let c_target = params.c_row(target);
    let mut prod = vec![F::one(); d_inner * d_state];
    let mut row = vec![F::zero(); d_inner];
    for t in (0..=target).rev() {
        let b_row = &params.b[t * d_state..(t + 1) * d_state];
        let dd_row = &decay_delta[t * d_inner..(t + 1) * d_inner];
        row.iter_mut().for_each(|v| *v = F::zero());
        for n in 0..d_state {
            let cb = c_target[n] * b_row[n];
            let a_row = &a_t[n * d_inner..(n + 1) * d_inner];
            let p = &mut prod[n * d_inner..(n + 1) * d_inner];
            for (((r, pv), av), dt) in row.iter_mut().zip(p.iter_mut()).zip(a_row).zip(dd_row) {
                *r = *r + cb * *pv;
                *pv = *pv * (*dt * *av).exp_fast();
            }
        }
        let dt_row = &params.delta[t * d_inner..(t + 1) * d_inner];
        let x_row = &params.x[t * d_inner..(t + 1) * d_inner];
        for ((r, dt), x) in row.iter_mut().zip(dt_row).zip(x_row) {
            *r = *r * *dt * *x;
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                what: "influence suffix product",
            });
        }
        scores[t] = aggregator.reduce(&row);
    }
    Ok(())
}

/// Scores for chunked prefill: every chunk is scored against its own last token and the
/// suffix products restart at each chunk boundary. The state carried between chunks
/// shifts outputs but not the per-token differences, so chunks are scored independently.
pub fn chunked_scores<F: Real>(
    chunks: &[ScanParams<F>],
    decay_deltas: Option<&[Vec<F>]>,
    aggregator: Aggregator,
) -> Result<Vec<InfluenceScores<F>>> {
    if let Some(dd) = decay_deltas {
        if dd.len() != chunks.len() {
            return Err(Error::Shape(format!(
                "{} decay step sets for {} chunks",
                dd.len(),
                chunks.len()
            )));
        }
    }
    chunks
        .iter()
        .enumerate()
        .map(|(i, chunk)| {
            let decay = decay_deltas.map(|dd| dd[i].as_slice());
            influence_from_params(chunk, decay, None, aggregator)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{leave_one_out, scan_discretized, selective_scan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(seed: u64, len: usize, d: usize, n: usize) -> ScanParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |cnt: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..cnt).map(|_| rng.random_range(lo..hi)).collect()
        };
        ScanParams::new(
            d,
            n,
            v(d * n, -1.0, 1.0),
            v(len * d, 0.01, 0.5),
            v(len * n, -1.0, 1.0),
            v(len * n, -1.0, 1.0),
            v(len * d, -1.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn single_token_score_is_max_output() {
        let p = random_params(1, 1, 4, 3);
        let trace = selective_scan(&p).unwrap();
        let s = influence_scores(&trace, p.c_row(0), 0, Aggregator::Max).unwrap();
        let want = trace.y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(s.scores.len(), 1);
        assert!((s.scores[0] - want).abs() < 1e-12);
    }

    #[test]
    fn identity_decay_scores() {
        let (len, d, n) = (5, 3, 2);
        let p = random_params(2, len, d, n);
        let disc = crate::kernel::discretize(&p).unwrap();
        let trace =
            scan_discretized(d, n, vec![1.0; len * d * n], disc.bbar.clone(), &p.c, &p.x).unwrap();
        let c = p.c_row(len - 1);
        let s = influence_scores(&trace, c, len - 1, Aggregator::Max).unwrap();
        for t in 0..len {
            let want = (0..d)
                .map(|dd| {
                    (0..n)
                        .map(|nn| c[nn] * disc.bbar[(t * d + dd) * n + nn] * p.x[t * d + dd])
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((s.scores[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn deltas_match_leave_one_out() {
        let p = random_params(3, 24, 5, 6);
        let trace = selective_scan(&p).unwrap();
        let last = p.len() - 1;
        let deltas = influence_deltas(&trace, p.c_row(last), last).unwrap();
        let y_last = trace.y_row(last);
        for t in 0..=last {
            let loo = leave_one_out(&p, t).unwrap();
            for d in 0..5 {
                let want = y_last[d] - loo[d];
                let got = deltas[t * 5 + d];
                assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-9));
            }
        }
    }

    #[test]
    fn params_route_matches_trace_route() {
        let p = random_params(4, 17, 3, 4);
        let trace = selective_scan(&p).unwrap();
        for agg in [Aggregator::Max, Aggregator::L2] {
            let a = influence_scores(&trace, p.c_row(16), 16, agg).unwrap();
            let b = influence_from_params(&p, None, None, agg).unwrap();
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn intermediate_target_ignores_later_tokens() {
        let p = random_params(5, 12, 3, 3);
        let s = influence_from_params(&p, None, Some(6), Aggregator::Max).unwrap();
        let prefix = influence_from_params(&p.slice(0..7), None, None, Aggregator::Max).unwrap();
        assert_eq!(s.scores.len(), 7);
        assert_eq!(s.scores, prefix.scores);
    }

    #[test]
    fn decay_delta_only_changes_decay() {
        let p = random_params(6, 8, 2, 2);
        // Decay step sizes of zero make every suffix product exactly 1.
        let zeros = vec![0.0; p.delta.len()];
        let s = influence_from_params(&p, Some(&zeros), None, Aggregator::Max).unwrap();
        let c = p.c_row(7);
        for t in 0..8 {
            let want = (0..2)
                .map(|d| {
                    (0..2)
                        .map(|n| c[n] * p.delta[t * 2 + d] * p.b[t * 2 + n] * p.x[t * 2 + d])
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((s.scores[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn target_out_of_range() {
        let p = random_params(7, 4, 2, 2);
        assert!(matches!(
            influence_from_params(&p, None, Some(4), Aggregator::Max),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn chunked_single_chunk_is_plain_scores() {
        let p = random_params(8, 10, 3, 2);
        let whole = influence_from_params(&p, None, None, Aggregator::Max).unwrap();
        let chunked = chunked_scores(std::slice::from_ref(&p), None, Aggregator::Max).unwrap();
        assert_eq!(chunked, vec![whole]);
    }

    #[test]
    fn chunk_of_one_token_scores_its_output() {
        let p = random_params(9, 5, 3, 2);
        let chunks = vec![p.slice(0..4), p.slice(4..5)];
        let scores = chunked_scores(&chunks, None, Aggregator::Max).unwrap();
        let y = selective_scan(&chunks[1]).unwrap().y;
        let want = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((scores[1].scores[0] - want).abs() < 1e-12);
    }

    #[test]
    fn l2_aggregation() {
        assert_eq!(Aggregator::L2.reduce(&[3.0f64, -4.0]), 5.0);
        assert_eq!(Aggregator::Max.reduce(&[3.0f64, -4.0]), 3.0);
    }
}
