use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{round_div, Real};

/// Rule used to pick the surviving tokens at each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Keep the tokens with the largest influence on the target output.
    #[default]
    Influence,
    /// Keep tokens on an evenly spaced grid.
    Uniform,
    /// Keep a seeded uniform sample.
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Influence, Criterion::Uniform, Criterion::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Influence => "influence",
            Criterion::Uniform => "uniform",
            Criterion::Random => "random",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "influence" => Ok(Criterion::Influence),
            "uniform" => Ok(Criterion::Uniform),
            "random" => Ok(Criterion::Random),
            other => Err(Error::Config(format!("unknown criterion '{other}'"))),
        }
    }
}

fn check_request(len: usize, k: usize, protected: &BTreeSet<usize>) -> Result<()> {
    if k > len {
        return Err(Error::Config(format!("cannot keep {k} of {len} tokens")));
    }
    if let Some(&p) = protected.iter().find(|&&p| p >= len) {
        return Err(Error::OutOfRange { index: p, len });
    }
    if k < protected.len() {
        return Err(Error::Config(format!(
            "keep count {k} is smaller than the {} protected positions",
            protected.len()
        )));
    }
    Ok(())
}

/// Keeps the `k` highest-scored positions of `0..scores.len()`, with every protected
/// position forced in. Equal scores favour the earlier position. Returns ascending
/// positions.
pub fn select_influence<F: Real>(
    scores: &[F],
    k: usize,
    protected: &[usize],
) -> Result<Vec<usize>> {
    let protected: BTreeSet<usize> = protected.iter().copied().collect();
    check_request(scores.len(), k, &protected)?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "score at position {i} is not finite"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|i| !protected.contains(i))
        .collect();
    // Stable sort keeps ascending positions among equal scores.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut kept: Vec<usize> = protected.into_iter().collect();
    let free = k - kept.len();
    kept.extend(order.into_iter().take(free));
    kept.sort_unstable();
    Ok(kept)
}

/// Evenly spaced selection over positions `0..len`: 1-based grid points
/// `round(i * len / k)` for `i = 1..=k`, then protected positions forced in.
pub fn select_uniform(len: usize, k: usize, protected: &[usize]) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..len).collect();
    select_uniform_active(&all, len, k, protected)
}

/// Evenly spaced selection among already-active tokens.
///
/// The grid is laid over the original coordinates `0..span` (`round(i * span / k) - 1`
/// for `i = 1..=k`) and each grid point is snapped, in order, to the nearest unused
/// active position that still leaves room for the remaining points. When `active` is
/// `0..span` this is exactly [`select_uniform`]. Protected positions missing from the
/// result replace the nearest unprotected pick (the later one on ties).
pub fn select_uniform_active(
    active: &[usize],
    span: usize,
    k: usize,
    protected: &[usize],
) -> Result<Vec<usize>> {
    let protected_set: BTreeSet<usize> = protected.iter().copied().collect();
    let m = active.len();
    if k > m {
        return Err(Error::Config(format!("cannot keep {k} of {m} tokens")));
    }
    if let Some(&p) = protected_set
        .iter()
        .find(|p| active.binary_search(p).is_err())
    {
        return Err(Error::Config(format!(
            "protected position {p} is not active"
        )));
    }
    if k < protected_set.len() {
        return Err(Error::Config(format!(
            "keep count {k} is smaller than the {} protected positions",
            protected_set.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let span = span.max(1) as u128;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut lo = 0usize;
    for i in 1..=k {
        let grid = (round_div(i as u128 * span, k as u128) as usize).saturating_sub(1);
        let hi = m - (k - i);
        let window = &active[lo..hi];
        let at = window.partition_point(|&p| p < grid);
        let idx = match (at.checked_sub(1), (at < window.len()).then_some(at)) {
            (Some(before), Some(after)) => {
                if grid - window[before] <= window[after] - grid {
                    before
                } else {
                    after
                }
            }
            (Some(before), None) => before,
            (None, Some(after)) => after,
            (None, None) => unreachable!("window always holds at least one position"),
        };
        chosen.push(window[idx]);
        lo += idx + 1;
    }
    force_protected(chosen, &protected_set)
}

fn force_protected(mut chosen: Vec<usize>, protected: &BTreeSet<usize>) -> Result<Vec<usize>> {
    for &p in protected {
        if chosen.binary_search(&p).is_ok() {
            continue;
        }
        let victim = chosen
            .iter()
            .enumerate()
            .filter(|(_, c)| !protected.contains(c))
            .min_by_key(|(_, &c)| (c.abs_diff(p), std::cmp::Reverse(c)))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Config("no unprotected position left to evict".into()))?;
        chosen.remove(victim);
        let at = chosen.partition_point(|&c| c < p);
        chosen.insert(at, p);
    }
    Ok(chosen)
}

/// Seeded uniform sample without replacement over the unprotected positions of
/// `0..len`, protected positions forced in.
pub fn select_random(len: usize, k: usize, protected: &[usize], seed: u64) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select_random_active(&all, k, protected, &mut rng)
}

pub(crate) fn select_random_active(
    active: &[usize],
    k: usize,
    protected: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let protected_set: BTreeSet<usize> = protected.iter().copied().collect();
    let local: BTreeSet<usize> = protected_set
        .iter()
        .map(|p| {
            active
                .binary_search(p)
                .map_err(|_| Error::Config(format!("protected position {p} is not active")))
        })
        .collect::<Result<_>>()?;
    check_request(active.len(), k, &local)?;
    let pool: Vec<usize> = (0..active.len()).filter(|i| !local.contains(i)).collect();
    let picks = rand::seq::index::sample(rng, pool.len(), k - local.len());
    let mut kept: Vec<usize> = local
        .iter()
        .copied()
        .chain(picks.into_iter().map(|i| pool[i]))
        .map(|i| active[i])
        .collect();
    kept.sort_unstable();
    Ok(kept)
}
