//! Mamba-style block stack whose forward pass runs on a shrinking set of active tokens.

mod block;
pub mod checkpoint;
mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use block::{block_forward, BlockOutput, LayerState};
pub use forward::{
    forward_chunked, forward_dense, forward_pruned, ActiveSet, ForwardRecord, LayerMaterials,
    LayerRecord, PruneConfig, PruneRequest,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// `d_inner = expand * d_model`
    pub expand: usize,
    pub d_state: usize,
    /// Width of the causal depthwise convolution; 0 disables it.
    pub d_conv: usize,
    pub vocab_size: usize,
    /// Rank of the step-size projection; 0 means `ceil(d_model / 16)`.
    pub dt_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            expand: 2,
            d_state: 16,
            d_conv: 4,
            vocab_size: crate::harness::VOCAB_SIZE,
            dt_rank: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        if self.dt_rank == 0 {
            self.d_model.div_ceil(16)
        } else {
            self.dt_rank
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("expand", self.expand),
            ("d_state", self.d_state),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Config as the string pairs stored in checkpoint metadata.
    pub fn to_metadata(&self) -> Vec<(String, String)> {
        vec![
            ("n_layers".into(), self.n_layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("expand".into(), self.expand.to_string()),
            ("d_state".into(), self.d_state.to_string()),
            ("d_conv".into(), self.d_conv.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("dt_rank".into(), self.dt_rank().to_string()),
        ]
    }

    pub fn from_metadata(meta: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let get = |key: &str| -> Result<usize> {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("metadata is missing '{key}'")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata '{key}' is not an integer")))
        };
        let cfg = Self {
            n_layers: get("n_layers")?,
            d_model: get("d_model")?,
            expand: get("expand")?,
            d_state: get("d_state")?,
            d_conv: get("d_conv")?,
            vocab_size: get("vocab_size")?,
            dt_rank: get("dt_rank")?,
        };
        cfg.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

/// Learned tensors of one block. Matrices are row-major `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[d_model]` pre-block RMS norm scale
    pub norm: Vec<f32>,
    /// `[2 * d_inner x d_model]`: value path rows first, then gate rows
    pub in_proj: Vec<f32>,
    /// `[d_inner x d_conv]`
    pub conv_weight: Vec<f32>,
    /// `[d_inner]`, empty when the convolution is disabled
    pub conv_bias: Vec<f32>,
    /// `[dt_rank x d_inner]`
    pub dt_down: Vec<f32>,
    /// `[d_inner x dt_rank]`
    pub dt_up: Vec<f32>,
    /// `[d_inner]`
    pub dt_bias: Vec<f32>,
    /// `[d_state x d_inner]`
    pub b_proj: Vec<f32>,
    /// `[d_state x d_inner]`
    pub c_proj: Vec<f32>,
    /// `[d_inner x d_state]`
    pub a_log: Vec<f32>,
    /// `[d_model x d_inner]`
    pub out_proj: Vec<f32>,
}

impl LayerParams {
    /// `(name, shape)` of every tensor, in storage order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
        let (m, d, n, r, k) = (
            cfg.d_model,
            cfg.d_inner(),
            cfg.d_state,
            cfg.dt_rank(),
            cfg.d_conv,
        );
        let conv_bias = if k == 0 { 0 } else { d };
        vec![
            ("norm", vec![m]),
            ("in_proj", vec![2 * d, m]),
            ("conv_weight", vec![d, k]),
            ("conv_bias", vec![conv_bias]),
            ("dt_down", vec![r, d]),
            ("dt_up", vec![d, r]),
            ("dt_bias", vec![d]),
            ("b_proj", vec![n, d]),
            ("c_proj", vec![n, d]),
            ("a_log", vec![d, n]),
            ("out_proj", vec![m, d]),
        ]
    }

    pub fn tensors(&self) -> [&Vec<f32>; 11] {
        [
            &self.norm,
            &self.in_proj,
            &self.conv_weight,
            &self.conv_bias,
            &self.dt_down,
            &self.dt_up,
            &self.dt_bias,
            &self.b_proj,
            &self.c_proj,
            &self.a_log,
            &self.out_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 11] {
        [
            &mut self.norm,
            &mut self.in_proj,
            &mut self.conv_weight,
            &mut self.conv_bias,
            &mut self.dt_down,
            &mut self.dt_up,
            &mut self.dt_bias,
            &mut self.b_proj,
            &mut self.c_proj,
            &mut self.a_log,
            &mut self.out_proj,
        ]
    }

    /// All-zero tensors of the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self {
            norm: Vec::new(),
            in_proj: Vec::new(),
            conv_weight: Vec::new(),
            conv_bias: Vec::new(),
            dt_down: Vec::new(),
            dt_up: Vec::new(),
            dt_bias: Vec::new(),
            b_proj: Vec::new(),
            c_proj: Vec::new(),
            a_log: Vec::new(),
            out_proj: Vec::new(),
        };
        for (slot, (_, shape)) in p.tensors_mut().into_iter().zip(Self::shapes(cfg)) {
            *slot = vec![0.0; shape.iter().product()];
        }
        p
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for (t, (name, shape)) in self.tensors().into_iter().zip(Self::shapes(cfg)) {
            let want: usize = shape.iter().product();
            if t.len() != want {
                return Err(Error::Shape(format!(
                    "layer tensor {name} has {} entries, expected {shape:?}",
                    t.len()
                )));
            }
        }
        Ok(())
    }
}

/// Embedding, blocks, final norm and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab_size x d_model]`
    pub embedding: Vec<f32>,
    pub layers: Vec<LayerParams>,
    /// `[d_model]`
    pub final_norm: Vec<f32>,
    /// `[vocab_size x d_model]`
    pub head: Vec<f32>,
}

impl Model {
    /// Randomly initialized model; the same seed always yields the same weights.
    pub fn init(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        config.dt_rank = config.dt_rank();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, n, r, k, v) = (
            config.d_model,
            config.d_inner(),
            config.d_state,
            config.dt_rank(),
            config.d_conv,
            config.vocab_size,
        );
        let mut uniform = |count: usize, bound: f32| -> Vec<f32> {
            (0..count)
                .map(|_| rng.random_range(-bound..=bound))
                .collect()
        };
        let embedding = uniform(v * m, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let in_proj = uniform(2 * d * m, (m as f32).powf(-0.5));
            let conv_weight = uniform(d * k, (k.max(1) as f32).powf(-0.5));
            let conv_bias = uniform(if k == 0 { 0 } else { d }, 0.1);
            let dt_down = uniform(r * d, (d as f32).powf(-0.5));
            let dt_up = uniform(d * r, (r as f32).powf(-0.5));
            // Step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus.
            let dt_bias = uniform(d, 1.0)
                .into_iter()
                .map(|u| {
                    let dt =
                        (0.5 * (u + 1.0) * (0.1f32.ln() - 0.001f32.ln()) + 0.001f32.ln()).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect();
            let b_proj = uniform(n * d, (d as f32).powf(-0.5));
            let c_proj = uniform(n * d, (d as f32).powf(-0.5));
            let a_log = (0..d)
                .flat_map(|_| (1..=n).map(|s| (s as f32).ln()))
                .collect();
            let out_proj = uniform(m * d, (d as f32).powf(-0.5));
            layers.push(LayerParams {
                norm: vec![1.0; m],
                in_proj,
                conv_weight,
                conv_bias,
                dt_down,
                dt_up,
                dt_bias,
                b_proj,
                c_proj,
                a_log,
                out_proj,
            });
        }
        let head = uniform(v * m, (m as f32).powf(-0.5));
        Ok(Self {
            config,
            embedding,
            layers,
            final_norm: vec![1.0; m],
            head,
        })
    }

    /// Zero weights everywhere except unit norm scales and `a_log = 0`; with a zero head
    /// every position predicts the uniform distribution.
    pub fn zeros(mut config: ModelConfig) -> Result<Self> {
        config.validate()?;
        config.dt_rank = config.dt_rank();
        let (m, v) = (config.d_model, config.vocab_size);
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut p = LayerParams::zeros(&config);
                p.norm = vec![1.0; m];
                p
            })
            .collect();
        Ok(Self {
            embedding: vec![0.0; v * m],
            layers,
            final_norm: vec![1.0; m],
            head: vec![0.0; v * m],
            config,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (m, v) = (self.config.d_model, self.config.vocab_size);
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Shape(format!(
                "{} layers for n_layers={}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        if self.embedding.len() != v * m || self.head.len() != v * m || self.final_norm.len() != m {
            return Err(Error::Shape("embedding/head/final_norm shape".into()));
        }
        self.layers
            .iter()
            .try_for_each(|l| l.check_shapes(&self.config))
    }

    /// Embedding rows for `ids`, `[len x d_model]`.
    pub fn embed(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let m = self.config.d_model;
        let mut out = Vec::with_capacity(ids.len() * m);
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::InvalidValue(format!(
                    "token id {id} at position {i} is outside the vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            out.extend_from_slice(&self.embedding[id * m..(id + 1) * m]);
        }
        Ok(out)
    }

    /// Final norm and head applied to residual rows, `[rows x vocab_size]`.
    pub fn head_logits(&self, hidden: &[f32]) -> Vec<f32> {
        let m = self.config.d_model;
        let normed = crate::numeric::rms_norm(hidden, m, &self.final_norm);
        crate::numeric::linear(
            &normed,
            hidden.len() / m,
            &self.head,
            self.config.vocab_size,
            m,
        )
    }
}
