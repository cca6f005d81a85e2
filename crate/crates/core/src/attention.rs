//! Multi-head self-attention with optional temperature scaling, diagonal
//! (LSA-style) masking, and trivial-weight suppression after the softmax.
//!
//! Per-head tensors are returned as one `N × D_h` (or `N × N`) variable per
//! head rather than a stacked 3-D tensor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::sata::{trivial_mask, twist_on_tape, SataConfig, TrivialMask};
use crate::tensor::{Tape, Tensor, Var};

/// Logit written onto the diagonal when diagonal masking is on.
pub const DIAGONAL_MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Effective softmax temperature is `temperature_multiplier / √head_dim`.
    pub temperature_multiplier: f64,
    pub lsa_diagonal_mask: bool,
    /// Learn a per-layer log-temperature, initialized at the effective
    /// temperature.
    pub lsa_learnable_temperature: bool,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_heads,
            head_dim,
            temperature_multiplier: 1.0,
            lsa_diagonal_mask: false,
            lsa_learnable_temperature: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature_multiplier / (self.head_dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "attention needs at least one head of positive width".into(),
            ));
        }
        if !(self.temperature_multiplier > 0.0 && self.temperature_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "temperature multiplier must be positive, got {}",
                self.temperature_multiplier
            )));
        }
        Ok(())
    }
}

/// Attention parameters. `T` is [`Tensor`] for stored state and [`Var`]
/// once registered on a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhsaParams<T> {
    /// `D × 3·D`, columns laid out as `[q heads | k heads | v heads]`.
    pub qkv_weight: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub log_temperature: Option<T>,
}

impl MhsaParams<Tensor> {
    pub fn init<R: Rng>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim();
        Self {
            qkv_weight: xavier_uniform(rng, d, 3 * d),
            proj_weight: xavier_uniform(rng, d, d),
            proj_bias: Tensor::zeros(&[d]),
            log_temperature: cfg
                .lsa_learnable_temperature
                .then(|| Tensor::scalar(cfg.temperature().ln())),
        }
    }
}

impl<T> MhsaParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MhsaParams<U> {
        MhsaParams {
            qkv_weight: f(&self.qkv_weight),
            proj_weight: f(&self.proj_weight),
            proj_bias: f(&self.proj_bias),
            log_temperature: self.log_temperature.as_ref().map(f),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![
            ("qkv.weight", &self.qkv_weight),
            ("proj.weight", &self.proj_weight),
            ("proj.bias", &self.proj_bias),
        ];
        if let Some(t) = &self.log_temperature {
            out.push(("log_temperature", t));
        }
        out
    }
}

/// Per-head projections, each `N × D_h`.
pub struct Qkv {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
}

/// Suppression settings for one layer; `scale` is the layer's one-element
/// `s`, a parameter when learnable and a constant otherwise.
#[derive(Clone, Copy, Debug)]
pub struct SataLayer<'a> {
    pub cfg: &'a SataConfig,
    pub scale: Var,
}

/// Attention matrices captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub image: usize,
    pub head: usize,
    /// Softmax output, before any suppression.
    pub before: Tensor,
    /// Matrix actually applied to `v`.
    pub after: Tensor,
    pub mask: Option<TrivialMask>,
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionProbe {
    /// Layer index stamped on subsequent records.
    pub layer: usize,
    pub records: Vec<AttentionRecord>,
}

fn check_embed(tape: &Tape, z: Var, cfg: &AttentionConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (rows, d) = tape.value(z).matrix_dims("mhsa")?;
    if d != cfg.embed_dim() {
        return Err(Error::Config(format!(
            "embedding width {d} is not num_heads × head_dim = {} × {}",
            cfg.num_heads, cfg.head_dim
        )));
    }
    Ok((rows, d))
}

fn split_heads(
    tape: &mut Tape,
    qkv: Var,
    row: usize,
    tokens: usize,
    cfg: &AttentionConfig,
) -> Result<Qkv> {
    let (d, dh) = (cfg.embed_dim(), cfg.head_dim);
    let mut out = Qkv {
        q: Vec::with_capacity(cfg.num_heads),
        k: Vec::with_capacity(cfg.num_heads),
        v: Vec::with_capacity(cfg.num_heads),
    };
    for h in 0..cfg.num_heads {
        out.q.push(tape.slice(qkv, row, tokens, h * dh, dh)?);
        out.k.push(tape.slice(qkv, row, tokens, d + h * dh, dh)?);
        out.v
            .push(tape.slice(qkv, row, tokens, 2 * d + h * dh, dh)?);
    }
    Ok(out)
}

/// `[q, k, v] = z · U_qkv`, split into heads. `z` is `N × D`.
pub fn qkv_project(
    tape: &mut Tape,
    z: Var,
    params: &MhsaParams<Var>,
    cfg: &AttentionConfig,
) -> Result<Qkv> {
    let (tokens, _) = check_embed(tape, z, cfg)?;
    let qkv = tape.matmul(z, params.qkv_weight)?;
    split_heads(tape, qkv, 0, tokens, cfg)
}

/// Row-softmax of `q·kᵀ` at the configured temperature, after optional
/// diagonal masking. `temperature` overrides the configured value with a
/// one-element variable (the exponentiated learnable log-temperature).
pub fn attention_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    cfg: &AttentionConfig,
    temperature: Option<Var>,
) -> Result<Var> {
    let mut logits = tape.matmul_nt(q, k)?;
    if cfg.lsa_diagonal_mask {
        logits = tape.fill_diagonal(logits, DIAGONAL_MASK_VALUE)?;
    }
    match temperature {
        Some(tau) => {
            let scaled = tape.scale_by(logits, tau)?;
            tape.softmax_rows(scaled, 1.0)
        }
        None => tape.softmax_rows(logits, cfg.temperature()),
    }
}

/// `SA = A · v` for one head.
pub fn apply_attention(tape: &mut Tape, a: Var, v: Var) -> Result<Var> {
    tape.matmul(a, v)
}

/// Full attention block on a single sequence `z` (`N × D`).
pub fn mhsa_forward(
    tape: &mut Tape,
    z: Var,
    params: &MhsaParams<Var>,
    cfg: &AttentionConfig,
    sata: Option<SataLayer<'_>>,
) -> Result<Var> {
    mhsa_forward_batched(tape, z, 1, params, cfg, sata, None)
}

/// Attention over `batch` sequences stacked row-wise in `z`
/// (`(batch·N) × D`). Linear maps run on the whole stack; attention runs per
/// sequence and head.
pub fn mhsa_forward_batched(
    tape: &mut Tape,
    z: Var,
    batch: usize,
    params: &MhsaParams<Var>,
    cfg: &AttentionConfig,
    sata: Option<SataLayer<'_>>,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<Var> {
    let (rows, _) = check_embed(tape, z, cfg)?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("mhsa", tape.shape(z), &[batch]));
    }
    if let Some(layer) = &sata {
        layer.cfg.validate()?;
    }
    let tokens = rows / batch;
    let temperature = match (cfg.lsa_learnable_temperature, params.log_temperature) {
        (true, Some(log_t)) => Some(tape.exp(log_t)),
        (true, None) => {
            return Err(Error::Config(
                "learnable temperature enabled but no log-temperature parameter".into(),
            ))
        }
        (false, _) => None,
    };

    let qkv = tape.matmul(z, params.qkv_weight)?;
    let mut sequences = Vec::with_capacity(batch);
    for b in 0..batch {
        let heads = split_heads(tape, qkv, b * tokens, tokens, cfg)?;
        let mut outputs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let a = attention_weights(tape, heads.q[h], heads.k[h], cfg, temperature)?;
            let (applied, mask, scale) = match &sata {
                Some(layer) => {
                    let mask = trivial_mask(tape.value(a), layer.cfg)?;
                    let kept = probe.is_some().then(|| mask.clone());
                    let out =
                        twist_on_tape(tape, a, mask, layer.scale, &layer.cfg.twist_options())?;
                    (out, kept, Some(tape.value(layer.scale).item()?))
                }
                None => (a, None, None),
            };
            if let Some(p) = probe.as_deref_mut() {
                p.records.push(AttentionRecord {
                    layer: p.layer,
                    image: b,
                    head: h,
                    before: tape.value(a).clone(),
                    after: tape.value(applied).clone(),
                    mask,
                    scale,
                });
            }
            outputs.push(apply_attention(tape, applied, heads.v[h])?);
        }
        sequences.push(tape.concat_cols(&outputs)?);
    }
    let merged = tape.concat_rows(&sequences)?;
    let projected = tape.matmul(merged, params.proj_weight)?;
    tape.add_row(projected, params.proj_bias)
}
