//! Small-dataset vision transformer: patch embedding with class token and
//! learned positional embedding, pre-norm blocks (attention with optional
//! suppression, then a GELU MLP), final norm, and a linear head on the
//! class token.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    mhsa_forward_batched, AttentionConfig, AttentionProbe, MhsaParams, SataLayer,
};
use crate::error::{Error, Result};
use crate::init::{trunc_normal, xavier_uniform};
use crate::sata::SataConfig;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    /// MLP hidden width is `round(mlp_ratio · embed_dim)`.
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub attention: AttentionConfig,
    pub sata: Option<SataConfig>,
    pub layer_norm_eps: f64,
}

impl Default for ViTConfig {
    /// Depth 9, width 192, 12 heads, MLP ratio 2 on 32×32 inputs with 4×4
    /// patches (65 tokens): about 2.7M parameters with 100 classes.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 192,
            depth: 9,
            mlp_ratio: 2.0,
            num_classes: 100,
            attention: AttentionConfig::new(12, 16),
            sata: Some(SataConfig::default()),
            layer_norm_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    pub fn num_heads(&self) -> usize {
        self.attention.num_heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn learnable_scale(&self) -> bool {
        self.sata.is_some_and(|s| s.scale.is_learnable())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "image, patch and channel sizes must be positive".into(),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.attention.validate()?;
        if self.embed_dim != self.attention.embed_dim() {
            return Err(Error::Config(format!(
                "embed_dim {} must equal num_heads × head_dim = {}",
                self.embed_dim,
                self.attention.embed_dim()
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config("MLP hidden width must be positive".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        if let Some(s) = &self.sata {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub attn: MhsaParams<T>,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
    /// Present only when the suppression scale is learnable.
    pub sata_scale: Option<T>,
}

/// All model parameters; `T` is [`Tensor`] for stored state and [`Var`]
/// on a tape. [`VitParams::named`] and [`VitParams::map`] share one
/// canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub class_token: T,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_gain: T,
    pub norm_bias: T,
    pub head_weight: T,
    pub head_bias: T,
}

pub type ModelState = VitParams<Tensor>;

impl<T> BlockParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            norm1_gain: f(&self.norm1_gain),
            norm1_bias: f(&self.norm1_bias),
            attn: self.attn.map(&mut *f),
            norm2_gain: f(&self.norm2_gain),
            norm2_bias: f(&self.norm2_bias),
            fc1_weight: f(&self.fc1_weight),
            fc1_bias: f(&self.fc1_bias),
            fc2_weight: f(&self.fc2_weight),
            fc2_bias: f(&self.fc2_bias),
            sata_scale: self.sata_scale.as_ref().map(f),
        }
    }

    fn named_into<'a>(&'a self, i: usize, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("blocks.{i}.norm1.gain"), &self.norm1_gain));
        out.push((format!("blocks.{i}.norm1.bias"), &self.norm1_bias));
        for (name, t) in self.attn.named() {
            out.push((format!("blocks.{i}.attn.{name}"), t));
        }
        out.push((format!("blocks.{i}.norm2.gain"), &self.norm2_gain));
        out.push((format!("blocks.{i}.norm2.bias"), &self.norm2_bias));
        out.push((format!("blocks.{i}.mlp.fc1.weight"), &self.fc1_weight));
        out.push((format!("blocks.{i}.mlp.fc1.bias"), &self.fc1_bias));
        out.push((format!("blocks.{i}.mlp.fc2.weight"), &self.fc2_weight));
        out.push((format!("blocks.{i}.mlp.fc2.bias"), &self.fc2_bias));
        if let Some(s) = &self.sata_scale {
            out.push((format!("blocks.{i}.sata_scale"), s));
        }
    }
}

impl<T> VitParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> VitParams<U> {
        VitParams {
            patch_weight: f(&self.patch_weight),
            patch_bias: f(&self.patch_bias),
            class_token: f(&self.class_token),
            pos_embed: f(&self.pos_embed),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
            head_weight: f(&self.head_weight),
            head_bias: f(&self.head_bias),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("cls_token".to_string(), &self.class_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named_into(i, &mut out);
        }
        out.push(("norm.gain".to_string(), &self.norm_gain));
        out.push(("norm.bias".to_string(), &self.norm_bias));
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Rebuilds a parameter set with this layout from items in canonical
    /// order.
    pub fn from_flat<U: Clone>(&self, items: &[U]) -> Result<VitParams<U>> {
        let expected = self.named().len();
        if items.len() != expected {
            return Err(Error::dim("from_flat", &[expected], &[items.len()]));
        }
        let mut it = items.iter();
        Ok(self.map(|_| it.next().expect("length checked").clone()))
    }
}

impl ModelState {
    /// Seeded initialization: Xavier-uniform linear weights, zero biases,
    /// unit norm gains, truncated-normal (σ = 0.02) class token and
    /// positional embedding, and `s` at its configured initial value.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let patch_weight = xavier_uniform(&mut rng, cfg.patch_dim(), d);
        let class_token = trunc_normal(&mut rng, &[1, d], 0.02);
        let pos_embed = trunc_normal(&mut rng, &[cfg.num_tokens(), d], 0.02);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                norm1_gain: Tensor::full(&[d], 1.0),
                norm1_bias: Tensor::zeros(&[d]),
                attn: MhsaParams::init(&cfg.attention, &mut rng),
                norm2_gain: Tensor::full(&[d], 1.0),
                norm2_bias: Tensor::zeros(&[d]),
                fc1_weight: xavier_uniform(&mut rng, d, hidden),
                fc1_bias: Tensor::zeros(&[hidden]),
                fc2_weight: xavier_uniform(&mut rng, hidden, d),
                fc2_bias: Tensor::zeros(&[d]),
                sata_scale: cfg
                    .sata
                    .filter(|s| s.scale.is_learnable())
                    .map(|s| Tensor::scalar(s.scale.initial())),
            })
            .collect();
        Ok(Self {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            class_token,
            pos_embed,
            blocks,
            norm_gain: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            head_weight: xavier_uniform(&mut rng, d, cfg.num_classes),
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    /// Total number of learnable scalars, by enumeration.
    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Current per-layer suppression scales (empty when not learnable).
    pub fn sata_scales(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter_map(|b| b.sata_scale.as_ref().map(|s| s.data()[0]))
            .collect()
    }

    /// Registers every parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> VitParams<Var> {
        self.map(|t| tape.leaf(t.clone(), requires_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Exact learnable-scalar count for a configuration.
pub fn param_count(cfg: &ViTConfig) -> usize {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let attn = d * 3 * d + d * d + d + usize::from(cfg.attention.lsa_learnable_temperature);
    let block =
        4 * d + attn + d * hidden + hidden + hidden * d + d + usize::from(cfg.learnable_scale());
    let patch = cfg.patch_dim() * d + d;
    patch
        + d
        + cfg.num_tokens() * d
        + cfg.depth * block
        + 2 * d
        + d * cfg.num_classes
        + cfg.num_classes
}

/// Cuts a `B × C × H × W` batch into non-overlapping patches, one row per
/// patch (`(B·P) × (C·p·p)`), patches in raster order, each flattened
/// channel-major then row-major.
pub fn patchify(images: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::Data(format!(
            "expected images of shape [B, {}, {}, {}], got {shape:?}",
            expected[0], expected[1], expected[2]
        )));
    }
    let (b, c, s, p) = (shape[0], cfg.channels, cfg.image_size, cfg.patch_size);
    let per_side = s / p;
    let patch_dim = cfg.patch_dim();
    let mut out = Vec::with_capacity(b * cfg.num_patches() * patch_dim);
    let data = images.data();
    for img in 0..b {
        let base = img * c * s * s;
        for py in 0..per_side {
            for px in 0..per_side {
                for ch in 0..c {
                    for y in 0..p {
                        let row = base + ch * s * s + (py * p + y) * s + px * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * cfg.num_patches(), patch_dim], out)
}

/// Token matrix `(B·N) × D`: per image, the class token followed by the
/// projected patches, plus the positional embedding.
pub fn patch_embed(
    tape: &mut Tape,
    images: &Tensor,
    params: &VitParams<Var>,
    cfg: &ViTConfig,
) -> Result<Var> {
    let patches = tape.constant(patchify(images, cfg)?);
    let projected = tape.matmul(patches, params.patch_weight)?;
    let projected = tape.add_row(projected, params.patch_bias)?;
    let batch = images.shape()[0];
    let p = cfg.num_patches();
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(params.class_token);
        parts.push(tape.slice(projected, b * p, p, 0, cfg.embed_dim)?);
    }
    let tokens = tape.concat_rows(&parts)?;
    let pos = tape.tile_rows(params.pos_embed, batch)?;
    tape.add(tokens, pos)
}

/// Logits (`B × num_classes`) for a `B × C × H × W` batch.
pub fn vit_forward(
    tape: &mut Tape,
    images: &Tensor,
    params: &VitParams<Var>,
    cfg: &ViTConfig,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<Var> {
    if params.blocks.len() != cfg.depth {
        return Err(Error::Config(format!(
            "parameter set has {} blocks, config expects {}",
            params.blocks.len(),
            cfg.depth
        )));
    }
    let batch = images.shape().first().copied().unwrap_or(0);
    let tokens = cfg.num_tokens();
    let eps = cfg.layer_norm_eps;
    let mut z = patch_embed(tape, images, params, cfg)?;

    for (layer, block) in params.blocks.iter().enumerate() {
        let sata = match &cfg.sata {
            Some(sc) => {
                let scale = match block.sata_scale {
                    Some(s) => s,
                    None if sc.scale.is_learnable() => {
                        return Err(Error::Config(format!(
                            "block {layer} is missing its learnable scale"
                        )))
                    }
                    None => tape.constant(Tensor::scalar(sc.scale.initial())),
                };
                Some(SataLayer { cfg: sc, scale })
            }
            None => None,
        };
        if let Some(p) = probe.as_deref_mut() {
            p.layer = layer;
        }

        let h = tape.layer_norm(z, block.norm1_gain, block.norm1_bias, eps)?;
        let attn = mhsa_forward_batched(
            tape,
            h,
            batch,
            &block.attn,
            &cfg.attention,
            sata,
            probe.as_deref_mut(),
        )?;
        z = tape.add(z, attn)?;

        let h = tape.layer_norm(z, block.norm2_gain, block.norm2_bias, eps)?;
        let h = tape.matmul(h, block.fc1_weight)?;
        let h = tape.add_row(h, block.fc1_bias)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, block.fc2_weight)?;
        let h = tape.add_row(h, block.fc2_bias)?;
        z = tape.add(z, h)?;
    }

    let class_rows: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    let cls = tape.select_rows(z, &class_rows)?;
    let cls = tape.layer_norm(cls, params.norm_gain, params.norm_bias, eps)?;
    let logits = tape.matmul(cls, params.head_weight)?;
    tape.add_row(logits, params.head_bias)
}

/// Forward pass without gradients; returns the logits.
pub fn predict_logits(state: &ModelState, cfg: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = state.register(&mut tape, false);
    let logits = vit_forward(&mut tape, images, &params, cfg, None)?;
    tape.check_finite()?;
    Ok(tape.value(logits).clone())
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}
