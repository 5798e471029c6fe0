//! Minimal pre-norm Vision Transformer with adapter attachment points.
//!
//! Block structure (row-vector convention, `X · W`):
//!
//! ```text
//! X′ = X  + PostMHSA(MHSA(PreMHSA(LN₁(X))))
//! Y  = X′ + PostFFN (FFN (PreFFN (LN₂(X′))))
//! ```
//!
//! where each `Pre*`/`Post*` is an adapter when the bank has that (layer, site) and the
//! identity otherwise. Logits come from the final-LN class token.

mod forward;
mod grad;
mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::alore::{AloreBank, ExpertMask};
use crate::error::{Error, Result};
use crate::linalg::{randn, Matrix, Real, Rng};

pub use forward::{encoder_block, mhsa, patch_embed, patch_rows, vit_features, vit_forward};
pub use grad::{loss_and_grads, Gradients};
pub use gradcheck::{grad_check, worst, TensorCheck, REL_ERR_FLOOR};

/// LayerNorm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Model width.
    pub d: usize,
    /// Number of encoder layers.
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub classes: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ViTConfig {
    /// Desk-scale model: 32×32×3 images, 4×4 patches, width 64, 6 layers, 4 heads.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            d: 64,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d", self.d),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d {} is not divisible by heads {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }
}

/// Weights of one encoder block. Vectors are `1 × len` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f64> {
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub wq: Matrix<T>,
    pub bq: Matrix<T>,
    pub wk: Matrix<T>,
    pub bk: Matrix<T>,
    pub wv: Matrix<T>,
    pub bv: Matrix<T>,
    pub wo: Matrix<T>,
    pub bo: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
    /// `d × hidden`.
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    /// `hidden × d`.
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Real> LayerWeights<T> {
    fn fields(&self) -> [(&'static str, &Matrix<T>); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 16] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
        ]
    }
}

/// Backbone weights. Trainability is decided per [`Regime`], not stored on the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel<T = f64> {
    pub config: ViTConfig,
    /// `patch_dim × d`.
    pub patch_w: Matrix<T>,
    pub patch_b: Matrix<T>,
    /// `1 × d`.
    pub cls: Matrix<T>,
    /// `tokens × d`.
    pub pos: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub norm_g: Matrix<T>,
    pub norm_b: Matrix<T>,
    /// `d × classes`.
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

fn xavier<T: Real>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix<T> {
    randn(fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl<T: Real> ViTModel<T> {
    /// Every tensor zero except LayerNorm gains, which are one.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.d, config.hidden());
        let layer = LayerWeights {
            ln1_g: Matrix::filled(1, d, T::one()),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            ln2_g: Matrix::filled(1, d, T::one()),
            ln2_b: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, h),
            b1: Matrix::zeros(1, h),
            w2: Matrix::zeros(h, d),
            b2: Matrix::zeros(1, d),
        };
        Ok(Self {
            config: config.clone(),
            patch_w: Matrix::zeros(config.patch_dim(), d),
            patch_b: Matrix::zeros(1, d),
            cls: Matrix::zeros(1, d),
            pos: Matrix::zeros(config.tokens(), d),
            layers: vec![layer; config.depth],
            norm_g: Matrix::filled(1, d, T::one()),
            norm_b: Matrix::zeros(1, d),
            head_w: Matrix::zeros(d, config.classes),
            head_b: Matrix::zeros(1, config.classes),
        })
    }

    /// Training initialization: Xavier-normal projections, `normal(0, 0.02²)` embeddings,
    /// zero biases, unit LayerNorm gains, zero head.
    pub fn init(config: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let (d, h) = (config.d, config.hidden());
        m.patch_w = xavier(config.patch_dim(), d, rng);
        m.cls = randn(1, d, 0.02, rng);
        m.pos = randn(config.tokens(), d, 0.02, rng);
        for layer in &mut m.layers {
            layer.wq = xavier(d, d, rng);
            layer.wk = xavier(d, d, rng);
            layer.wv = xavier(d, d, rng);
            layer.wo = xavier(d, d, rng);
            layer.w1 = xavier(d, h, rng);
            layer.w2 = xavier(h, d, rng);
        }
        Ok(m)
    }

    /// Every tensor (including LayerNorm parameters and biases) drawn from `normal(0, std²)`,
    /// with LayerNorm gains shifted to `1 + noise`. Used by equivalence and gradient tests.
    pub fn random(config: &ViTConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        for (name, t) in m.tensors_mut() {
            let noise: Matrix<T> = randn(t.rows(), t.cols(), std, rng);
            if name.ends_with(".g") {
                *t = noise.map(|v| v + T::one());
            } else {
                *t = noise;
            }
        }
        Ok(m)
    }

    /// Replaces the head with a zero `d × classes` head for a new task.
    pub fn reset_head(&mut self, classes: usize) {
        self.config.classes = classes;
        self.head_w = Matrix::zeros(self.config.d, classes);
        self.head_b = Matrix::zeros(1, classes);
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("patch.w".to_string(), &self.patch_w),
            ("patch.b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("norm.g".to_string(), &self.norm_g));
        out.push(("norm.b".to_string(), &self.norm_b));
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![
            ("patch.w".to_string(), &mut self.patch_w),
            ("patch.b".to_string(), &mut self.patch_b),
            ("cls".to_string(), &mut self.cls),
            ("pos".to_string(), &mut self.pos),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("norm.g".to_string(), &mut self.norm_g));
        out.push(("norm.b".to_string(), &mut self.norm_b));
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against the config and rejects non-finite entries.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(&self.config)?;
        for ((name, t), (_, r)) in self.tensors().into_iter().zip(reference.tensors()) {
            if t.shape() != r.shape() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    r.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ViTModel<U> {
        ViTModel {
            config: self.config.clone(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            cls: self.cls.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            norm_g: self.norm_g.cast(),
            norm_b: self.norm_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }
}

/// Adapter bank plus the expert mask to evaluate it with.
#[derive(Debug, Clone, Copy)]
pub struct Adapters<'a, T> {
    pub bank: &'a AloreBank<T>,
    pub mask: &'a ExpertMask,
}

impl<'a, T: Real> Adapters<'a, T> {
    pub fn new(bank: &'a AloreBank<T>, mask: &'a ExpertMask) -> Result<Self> {
        if mask.len() != bank.config().n {
            return Err(Error::shape("expert mask", (1, mask.len()), (1, bank.config().n)));
        }
        Ok(Self { bank, mask })
    }
}

/// Which tensors an optimizer may update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Every backbone tensor, plus the adapter bank when one is attached.
    Full,
    /// Classification head only.
    LinearProbe,
    /// Adapter bank and classification head; everything else (LayerNorm included) frozen.
    #[default]
    Alore,
}

impl Regime {
    pub fn trains_backbone_tensor(self, name: &str) -> bool {
        match self {
            Regime::Full => true,
            Regime::LinearProbe | Regime::Alore => name.starts_with("head."),
        }
    }

    pub fn trains_bank(self) -> bool {
        matches!(self, Regime::Full | Regime::Alore)
    }
}

/// Trainable tensors under `regime`, in a fixed order (backbone first, then bank).
pub fn trainable_parameters<'a, T: Real>(
    model: &'a ViTModel<T>,
    bank: Option<&'a AloreBank<T>>,
    regime: Regime,
) -> Vec<(String, &'a Matrix<T>)> {
    let mut out: Vec<_> = model
        .tensors()
        .into_iter()
        .filter(|(name, _)| regime.trains_backbone_tensor(name))
        .collect();
    if let (true, Some(bank)) = (regime.trains_bank(), bank) {
        out.extend(bank.tensors());
    }
    out
}

/// Mutable counterpart of [`trainable_parameters`], same order.
pub fn trainable_parameters_mut<'a, T: Real>(
    model: &'a mut ViTModel<T>,
    bank: Option<&'a mut AloreBank<T>>,
    regime: Regime,
) -> Vec<(String, &'a mut Matrix<T>)> {
    let mut out: Vec<_> = model
        .tensors_mut()
        .into_iter()
        .filter(|(name, _)| regime.trains_backbone_tensor(name))
        .collect();
    if let (true, Some(bank)) = (regime.trains_bank(), bank) {
        out.extend(bank.tensors_mut());
    }
    out
}
