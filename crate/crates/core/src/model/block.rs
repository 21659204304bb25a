use crate::error::{Error, Result};
use crate::kernel::{scan_outputs_unchecked, ScanParams};
use crate::numeric::{linear, rms_norm, silu_inplace, softplus_rows};

use super::{LayerParams, ModelConfig};

/// Recurrent state handed from one segment of a sequence to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// `[d_inner x d_state]`
    pub h: Vec<f32>,
    /// Last `d_conv - 1` pre-convolution rows, oldest first, `[(d_conv-1) x d_inner]`.
    pub conv_tail: Vec<f32>,
}

/// Everything one block produces for `k` tokens.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// Residual stream after the block, `[k x d_model]`.
    pub hidden: Vec<f32>,
    /// Output projection before the residual add, `[k x d_model]`.
    pub mixer: Vec<f32>,
    /// Scan inputs (activated conv output as `x`).
    pub scan: ScanParams<f32>,
    /// Low-rank step-size projection before bias and softplus, `[k x d_inner]`.
    pub dt_pre: Vec<f32>,
    /// Scan outputs before gating, `[k x d_inner]`.
    pub y: Vec<f32>,
    pub state: LayerState,
}

impl BlockOutput {
    /// Step sizes used for the decay factors when scoring. With `exclude_bias` the
    /// step-size bias is dropped: `softplus(dt_pre)` instead of `softplus(dt_pre + bias)`.
    pub fn decay_delta(&self, exclude_bias: bool) -> Vec<f32> {
        if exclude_bias {
            let mut out = self.dt_pre.clone();
            softplus_rows(&mut out, &vec![0.0; self.scan.d_inner]);
            out
        } else {
            self.scan.delta.clone()
        }
    }
}

/// One block over `k = tokens.len() / d_model` tokens that are treated as adjacent.
pub fn block_forward(
    layer: &LayerParams,
    cfg: &ModelConfig,
    tokens: &[f32],
    state: Option<&LayerState>,
) -> Result<BlockOutput> {
    let (m, d, n, r, kc) = (
        cfg.d_model,
        cfg.d_inner(),
        cfg.d_state,
        cfg.dt_rank(),
        cfg.d_conv,
    );
    if tokens.is_empty() || !tokens.len().is_multiple_of(m) {
        return Err(Error::Shape(format!(
            "block input has {} values, not a positive multiple of d_model={m}",
            tokens.len()
        )));
    }
    let k = tokens.len() / m;
    let tail_rows = kc.saturating_sub(1);
    if let Some(s) = state {
        if s.h.len() != d * n || s.conv_tail.len() != tail_rows * d {
            return Err(Error::Shape(
                "carried layer state does not match the config".into(),
            ));
        }
    }

    let normed = rms_norm(tokens, m, &layer.norm);
    let proj = linear(&normed, k, &layer.in_proj, 2 * d, m);

    // Pre-convolution rows with the carried tail in front: `[(tail_rows + k) x d]`.
    let mut ext = vec![0.0f32; (tail_rows + k) * d];
    if let Some(s) = state {
        ext[..tail_rows * d].copy_from_slice(&s.conv_tail);
    }
    for t in 0..k {
        ext[(tail_rows + t) * d..(tail_rows + t + 1) * d]
            .copy_from_slice(&proj[t * 2 * d..t * 2 * d + d]);
    }
    let mut u = vec![0.0f32; k * d];
    if kc == 0 {
        u.copy_from_slice(&ext);
    } else {
        // Transposed weights so the inner loop runs over contiguous channels.
        let mut wt = vec![0.0f32; kc * d];
        for c in 0..d {
            for j in 0..kc {
                wt[j * d + c] = layer.conv_weight[c * kc + j];
            }
        }
        for (t, row) in u.chunks_exact_mut(d).enumerate() {
            row.copy_from_slice(&layer.conv_bias);
            for j in 0..kc {
                let src = &ext[(t + j) * d..(t + j + 1) * d];
                for ((o, w), v) in row.iter_mut().zip(&wt[j * d..(j + 1) * d]).zip(src) {
                    *o += w * v;
                }
            }
        }
    }
    silu_inplace(&mut u);

    let low = linear(&u, k, &layer.dt_down, r, d);
    let dt_pre = linear(&low, k, &layer.dt_up, d, r);
    let mut delta = dt_pre.clone();
    softplus_rows(&mut delta, &layer.dt_bias);
    let b = linear(&u, k, &layer.b_proj, n, d);
    let c = linear(&u, k, &layer.c_proj, n, d);
    let scan = ScanParams {
        d_inner: d,
        d_state: n,
        a_log: layer.a_log.clone(),
        delta,
        b,
        c,
        x: u,
    };
    let out = scan_outputs_unchecked(&scan, state.map(|s| s.h.as_slice()))?;

    let mut gate: Vec<f32> = proj
        .chunks_exact(2 * d)
        .flat_map(|r| &r[d..])
        .copied()
        .collect();
    silu_inplace(&mut gate);
    let gated: Vec<f32> = out.y.iter().zip(&gate).map(|(y, g)| y * g).collect();
    let mixer = linear(&gated, k, &layer.out_proj, m, d);
    let hidden: Vec<f32> = tokens.iter().zip(&mixer).map(|(a, b)| a + b).collect();
    let conv_tail = ext[k * d..].to_vec();

    Ok(BlockOutput {
        hidden,
        mixer,
        scan,
        dt_pre,
        y: out.y,
        state: LayerState {
            h: out.h_last,
            conv_tail,
        },
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn tiny(d_conv: usize) -> (Model, Vec<f32>) {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 6,
            expand: 2,
            d_state: 4,
            d_conv,
            vocab_size: 16,
            dt_rank: 2,
        };
        let model = Model::init(cfg, 11).unwrap();
        let x = model.embed(&[1, 5, 3, 3, 9, 0, 15, 2]).unwrap();
        (model, x)
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Straight-line double-precision reimplementation of the block.
    fn oracle(layer: &LayerParams, cfg: &ModelConfig, x: &[f32]) -> Vec<f64> {
        let (m, d, n, r, kc) = (
            cfg.d_model,
            cfg.d_inner(),
            cfg.d_state,
            cfg.dt_rank(),
            cfg.d_conv,
        );
        let k = x.len() / m;
        let f = |v: f32| v as f64;
        let mut xv = vec![vec![0.0; d]; k];
        let mut z = vec![vec![0.0; d]; k];
        for t in 0..k {
            let row = &x[t * m..(t + 1) * m];
            let rms = (row.iter().map(|&v| f(v) * f(v)).sum::<f64>() / m as f64 + 1e-5).sqrt();
            for o in 0..2 * d {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += f(layer.in_proj[o * m + i]) * f(row[i]) / rms * f(layer.norm[i]);
                }
                if o < d {
                    xv[t][o] = acc;
                } else {
                    z[t][o - d] = acc;
                }
            }
        }
        let mut u = vec![vec![0.0; d]; k];
        for t in 0..k {
            for c in 0..d {
                let pre = if kc == 0 {
                    xv[t][c]
                } else {
                    let mut acc = f(layer.conv_bias[c]);
                    for j in 0..kc {
                        let src = t as isize - (kc - 1 - j) as isize;
                        if src >= 0 {
                            acc += f(layer.conv_weight[c * kc + j]) * xv[src as usize][c];
                        }
                    }
                    acc
                };
                u[t][c] = pre * sig(pre);
            }
        }
        let mut h = vec![vec![0.0; n]; d];
        let mut out = Vec::new();
        for t in 0..k {
            let mut low = vec![0.0; r];
            for (q, l) in low.iter_mut().enumerate() {
                for c in 0..d {
                    *l += f(layer.dt_down[q * d + c]) * u[t][c];
                }
            }
            let mut bv = vec![0.0; n];
            let mut cv = vec![0.0; n];
            for s in 0..n {
                for c in 0..d {
                    bv[s] += f(layer.b_proj[s * d + c]) * u[t][c];
                    cv[s] += f(layer.c_proj[s * d + c]) * u[t][c];
                }
            }
            let mut gated = vec![0.0; d];
            for c in 0..d {
                let mut dt = f(layer.dt_bias[c]);
                for q in 0..r {
                    dt += f(layer.dt_up[c * r + q]) * low[q];
                }
                let dt = dt.exp().ln_1p();
                let mut y = 0.0;
                for s in 0..n {
                    let a = -f(layer.a_log[c * n + s]).exp();
                    h[c][s] = (dt * a).exp() * h[c][s] + dt * bv[s] * u[t][c];
                    y += cv[s] * h[c][s];
                }
                gated[c] = y * z[t][c] * sig(z[t][c]);
            }
            for o in 0..m {
                let mut acc = f(x[t * m + o]);
                for c in 0..d {
                    acc += f(layer.out_proj[o * d + c]) * gated[c];
                }
                out.push(acc);
            }
        }
        out
    }

    fn assert_close(got: &[f32], want: &[f64], tol: f64) {
        let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (g, w) in got.iter().zip(want) {
            assert!(
                (*g as f64 - w).abs() <= tol * scale,
                "{g} vs {w} (scale {scale})"
            );
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        for kc in [0, 4] {
            let (model, x) = tiny(kc);
            let out = block_forward(&model.layers[0], &model.config, &x, None).unwrap();
            assert_close(
                &out.hidden,
                &oracle(&model.layers[0], &model.config, &x),
                1e-5,
            );
        }
    }

    #[test]
    fn single_token() {
        let (model, x) = tiny(4);
        let out = block_forward(&model.layers[0], &model.config, &x[..6], None).unwrap();
        assert_eq!(out.hidden.len(), 6);
        assert!(out.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn carried_state_matches_one_pass() {
        let (model, x) = tiny(4);
        let (layer, cfg) = (&model.layers[0], &model.config);
        let whole = block_forward(layer, cfg, &x, None).unwrap();
        let first = block_forward(layer, cfg, &x[..18], None).unwrap();
        let second = block_forward(layer, cfg, &x[18..], Some(&first.state)).unwrap();
        let joined: Vec<f32> = first.hidden.iter().chain(&second.hidden).copied().collect();
        for (a, b) in joined.iter().zip(&whole.hidden) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert_eq!(second.state.conv_tail, whole.state.conv_tail);
    }

    #[test]
    fn bias_free_decay_steps() {
        let (model, x) = tiny(0);
        let out = block_forward(&model.layers[0], &model.config, &x, None).unwrap();
        assert_eq!(out.decay_delta(false), out.scan.delta);
        let free = out.decay_delta(true);
        assert!((free[0] - crate::numeric::softplus(out.dt_pre[0])).abs() < 1e-7);
    }

    #[test]
    fn rejects_ragged_input() {
        let (model, x) = tiny(0);
        assert!(matches!(
            block_forward(&model.layers[0], &model.config, &x[..5], None),
            Err(Error::Shape(_))
        ));
    }
}
