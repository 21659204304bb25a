use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_dense, forward_pruned, LayerParams, Model, ModelConfig, PruneConfig, PruneRequest,
};
use crate::numeric::{silu, softplus};
use crate::pruning::{linear_schedule, Aggregator, Criterion};

use super::corpus::VOCAB_SIZE;

/// Filler that writes nothing.
pub const SILENT: u32 = 0;
/// Weak fillers are `WEAK_BASE + j` for `j < 8`.
pub const WEAK_BASE: u32 = 1;
/// Key tokens are `KEY_BASE + group * KEY_VALUES + value`.
pub const KEY_BASE: u32 = 16;
pub const KEY_VALUES: u32 = 8;
const WEAK_LEVELS: u32 = 8;
const MAX_GROUPS: usize = ((VOCAB_SIZE as u32 - KEY_BASE) / KEY_VALUES) as usize;

// Gains of the constructed model.
const IN_GAIN: f32 = 2.0;
const GATE: f32 = 1.0;
const DT_OFFSET: f32 = 15.0;
const KEY_DT: f32 = 10.0;
const WEAK_DT: f32 = 0.2;
const KEY_OUT: f32 = 0.01;
const WEAK_OUT: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyTaskParams {
    pub seq_len: usize,
    pub n_keys: usize,
    /// Every key is repeated on this many adjacent positions.
    pub key_span: usize,
    /// Probability that a non-key position holds a weak filler.
    pub weak_fraction: f64,
    /// Key `i` belongs to group `i % n_groups`; a later key overwrites its group.
    pub n_groups: usize,
}

impl KeyTaskParams {
    pub fn new(seq_len: usize, n_keys: usize) -> Self {
        Self {
            seq_len,
            n_keys,
            key_span: 1,
            weak_fraction: 0.0,
            n_groups: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyTokenTask {
    pub ids: Vec<u32>,
    /// Every position holding a key token, ascending.
    pub key_positions: Vec<usize>,
    /// Value of each key, in order.
    pub key_values: Vec<u32>,
    /// Last value written to each group.
    pub answer: Vec<Option<u32>>,
}

pub fn gen_keytoken_task(seed: u64, seq_len: usize, n_keys: usize) -> Result<KeyTokenTask> {
    gen_keytoken_task_with(seed, &KeyTaskParams::new(seq_len, n_keys))
}

/// Fillers with `n_keys` key spans at random disjoint places. The last position stays a
/// silent filler unless keys fill the whole sequence.
pub fn gen_keytoken_task_with(seed: u64, p: &KeyTaskParams) -> Result<KeyTokenTask> {
    let (t, w) = (p.seq_len, p.key_span);
    if t == 0 || w == 0 || p.n_groups == 0 || p.n_groups > MAX_GROUPS {
        return Err(Error::Config(format!(
            "key task needs seq_len >= 1, key_span >= 1 and 1..={MAX_GROUPS} groups"
        )));
    }
    if !(0.0..=1.0).contains(&p.weak_fraction) {
        return Err(Error::Config("weak fraction must lie in [0, 1]".into()));
    }
    let used = p.n_keys * w;
    if used > t {
        return Err(Error::Config(format!(
            "{} keys of span {w} do not fit in {t} tokens",
            p.n_keys
        )));
    }
    let avail = if used < t { t - 1 } else { t };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = sample(&mut rng, avail - used + p.n_keys, p.n_keys).into_vec();
    slots.sort_unstable();
    let mut ids = vec![SILENT; t];
    let mut is_key = vec![false; t];
    let mut key_positions = Vec::with_capacity(used);
    let mut key_values = Vec::with_capacity(p.n_keys);
    let mut answer = vec![None; p.n_groups];
    for (i, &slot) in slots.iter().enumerate() {
        let start = slot + i * (w - 1);
        let group = i % p.n_groups;
        let value = rng.random_range(0..KEY_VALUES);
        for pos in start..start + w {
            ids[pos] = KEY_BASE + group as u32 * KEY_VALUES + value;
            is_key[pos] = true;
            key_positions.push(pos);
        }
        key_values.push(value);
        answer[group] = Some(value);
    }
    for pos in 0..avail {
        if !is_key[pos] && rng.random::<f64>() < p.weak_fraction {
            ids[pos] = WEAK_BASE + rng.random_range(0..WEAK_LEVELS);
        }
    }
    Ok(KeyTokenTask {
        ids,
        key_positions,
        key_values,
        answer,
    })
}

/// Hand-built model for the key-token task. Each group owns a scan channel whose step
/// size jumps to about 10 on that group's keys, so a key overwrites the channel, and
/// stays near 3e-7 elsewhere. Weak fillers add to a leaky channel with step 0.2.
/// Residual channels: constant, key values, key flags, weak flag, weak value, padding to
/// unit RMS, then one output per group and one for the weak channel.
pub fn keytoken_model(n_layers: usize, n_groups: usize) -> Result<Model> {
    if n_groups == 0 || n_groups > MAX_GROUPS {
        return Err(Error::Config(format!(
            "key model needs 1..={MAX_GROUPS} groups"
        )));
    }
    let g = n_groups;
    let m = 3 * g + 5;
    let config = ModelConfig {
        n_layers,
        d_model: m,
        expand: 1,
        d_state: 1,
        d_conv: 0,
        vocab_size: VOCAB_SIZE,
        dt_rank: m,
    };
    let mut model = Model::zeros(config)?;
    let (c_const, c_kval, c_kflag, c_wflag, c_wval, c_pad) =
        (0, 1, 1 + g, 1 + 2 * g, 2 + 2 * g, 3 + 2 * g);
    let c_out = 4 + 2 * g;
    let emb = &mut model.embedding;
    for id in 0..VOCAB_SIZE as u32 {
        let row = &mut emb[id as usize * m..(id as usize + 1) * m];
        row[c_const] = 1.0;
        if (WEAK_BASE..WEAK_BASE + WEAK_LEVELS).contains(&id) {
            row[c_wflag] = 1.0;
            row[c_wval] = 0.3 + 0.1 * (id - WEAK_BASE) as f32;
        } else if id >= KEY_BASE && ((id - KEY_BASE) / KEY_VALUES) < g as u32 {
            let (grp, val) = (
                ((id - KEY_BASE) / KEY_VALUES) as usize,
                (id - KEY_BASE) % KEY_VALUES,
            );
            row[c_kval + grp] = 0.5 + 0.125 * val as f32;
            row[c_kflag + grp] = 1.0;
        }
        let sq: f32 = row.iter().map(|x| x * x).sum();
        row[c_pad] = (m as f32 - sq).sqrt();
    }

    // Inner channels: key values, key flags, weak value, weak flag, constant.
    let d = m;
    let (i_kval, i_kflag, i_wval, i_wflag, i_const) = (0, g, 2 * g, 2 * g + 1, 2 * g + 2);
    let u_on = silu(IN_GAIN);
    let off = -DT_OFFSET / u_on;
    let inv_softplus = |y: f32| (y.exp() - 1.0).ln();
    let mut layer = LayerParams::zeros(&model.config);
    layer.norm = vec![1.0; m];
    let set = |w: &mut Vec<f32>, cols: usize, r: usize, c: usize, v: f32| w[r * cols + c] = v;
    for k in 0..g {
        set(&mut layer.in_proj, m, i_kval + k, c_kval + k, IN_GAIN);
        set(&mut layer.in_proj, m, i_kflag + k, c_kflag + k, IN_GAIN);
    }
    set(&mut layer.in_proj, m, i_wval, c_wval, IN_GAIN);
    set(&mut layer.in_proj, m, i_wflag, c_wflag, IN_GAIN);
    set(&mut layer.in_proj, m, i_const, c_const, IN_GAIN);
    for r in 0..d {
        set(&mut layer.in_proj, m, d + r, c_const, GATE);
        set(&mut layer.dt_down, d, r, r, 1.0);
        set(&mut layer.dt_up, d, r, i_const, off);
    }
    let key_gain = (DT_OFFSET + inv_softplus(KEY_DT)) / u_on;
    let weak_gain = (DT_OFFSET + inv_softplus(WEAK_DT)) / u_on;
    for k in 0..g {
        set(&mut layer.dt_up, d, i_kval + k, i_kflag + k, key_gain);
        set(&mut layer.out_proj, d, c_out + k, i_kval + k, KEY_OUT);
    }
    set(&mut layer.dt_up, d, i_wval, i_wflag, weak_gain);
    set(&mut layer.out_proj, d, c_out + g, i_wval, WEAK_OUT);
    layer.b_proj[i_const] = 1.0 / u_on;
    layer.c_proj[i_const] = 1.0 / u_on;
    debug_assert!((softplus(key_gain * u_on - DT_OFFSET) - KEY_DT).abs() < 1e-3);
    model.layers = vec![layer; n_layers];
    model.validate()?;
    Ok(model)
}

/// `||h_pruned - h_dense|| / ||h_dense||` of the final residual at the last position,
/// for a linear schedule ending at `ratio`.
pub fn keytask_deviation(
    model: &Model,
    ids: &[u32],
    criterion: Criterion,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let t = ids.len();
    let dense = forward_dense(model, ids)?;
    let schedule = linear_schedule(t, model.config.n_layers, ratio, 1)?;
    let config = PruneConfig {
        criterion,
        aggregator: Aggregator::Max,
        exclude_bias: true,
        seed,
    };
    let pruned = forward_pruned(
        model,
        ids,
        &PruneRequest {
            schedule: &schedule,
            config: &config,
            protected: &[],
            target: None,
            record: false,
        },
    )?;
    let a = dense.hidden_at(t - 1).expect("dense keeps every position");
    let b = pruned.hidden_at(t - 1).expect("last position is protected");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum();
    let norm: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
    if norm == 0.0 {
        return Err(Error::Degenerate("dense hidden state is zero".into()));
    }
    Ok((diff / norm).sqrt())
}
