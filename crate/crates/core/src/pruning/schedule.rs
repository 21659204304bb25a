use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ratio_numerator, round_div, RATIO_DENOM};

/// Per-layer keep counts. `keep[l]` is the number of tokens that survive the pruning
/// step after block `l` (0-based) and therefore enter block `l + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub seq_len: usize,
    pub keep: Vec<usize>,
    pub final_ratio: f64,
}

impl PruneSchedule {
    /// No pruning: every layer keeps all `seq_len` tokens.
    pub fn dense(seq_len: usize, n_layers: usize) -> Self {
        Self {
            seq_len,
            keep: vec![seq_len; n_layers],
            final_ratio: 1.0,
        }
    }

    /// An explicit schedule; counts must be non-increasing and at most `seq_len`.
    pub fn from_counts(seq_len: usize, keep: Vec<usize>) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::Config("schedule needs at least one layer".into()));
        }
        if keep.iter().any(|&k| k > seq_len || k == 0) {
            return Err(Error::Config(format!(
                "keep counts {keep:?} must lie in 1..={seq_len}"
            )));
        }
        if keep.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config(format!(
                "keep counts {keep:?} must be non-increasing"
            )));
        }
        let final_ratio = *keep.last().unwrap() as f64 / seq_len as f64;
        Ok(Self {
            seq_len,
            keep,
            final_ratio,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.keep.len()
    }

    /// Adds `extra` always-kept tokens (e.g. labels appended after a pruned prompt).
    pub fn with_fixed_suffix(&self, extra: usize) -> Self {
        Self {
            seq_len: self.seq_len + extra,
            keep: self.keep.iter().map(|k| k + extra).collect(),
            final_ratio: self.final_ratio,
        }
    }
}

/// Linearly decreasing keep counts:
/// `keep[l] = max(round(T * (1 - (1 - r) * l / L)), protected)` for `l = 1..=L`,
/// rounding halves away from zero. The ratio is quantized to 1e-9 and the rest is exact
/// integer arithmetic, so `r = 0.7` reproduces the decimal result.
pub fn linear_schedule(
    seq_len: usize,
    n_layers: usize,
    ratio: f64,
    protected: usize,
) -> Result<PruneSchedule> {
    if seq_len == 0 || n_layers == 0 {
        return Err(Error::Config(format!(
            "sequence length ({seq_len}) and layer count ({n_layers}) must be >= 1"
        )));
    }
    let r_num = ratio_numerator(ratio)
        .ok_or_else(|| Error::Config(format!("keep ratio {ratio} must lie in (0, 1]")))?;
    if protected > seq_len {
        return Err(Error::Config(format!(
            "{protected} protected positions exceed sequence length {seq_len}"
        )));
    }
    let (t, l_total) = (seq_len as u128, n_layers as u128);
    let keep = (1..=l_total)
        .map(|l| {
            // T * (L*D - (D - r)*l) / (L*D)
            let num = t * (l_total * RATIO_DENOM - (RATIO_DENOM - r_num) * l);
            (round_div(num, l_total * RATIO_DENOM) as usize)
                .max(protected)
                .max(1)
        })
        .collect();
    Ok(PruneSchedule {
        seq_len,
        keep,
        final_ratio: ratio,
    })
}
