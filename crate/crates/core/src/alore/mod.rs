//! Aggregated low-rank experts.
//!
//! An adapter at one (layer, site) computes `X + X·W′` with
//!
//! ```text
//! W′ = Σᵢ Sᵢ ⊗ (Dᵢ Uᵢ)        Sᵢ: n×n, Dᵢ: (d/n)×r, Uᵢ: r×(d/n)
//! ```
//!
//! The scale matrices `Sᵢ` are a single global set shared by every adapted layer and
//! every insertion site; only the `Dᵢ`/`Uᵢ` pairs are per (layer, site). The forward
//! pass never forms `W′`: splitting a token row into `n` blocks `x₁..xₙ` of width
//! `d/n`, block `j` of `x·(S ⊗ M)` is `(Σᵢ S[i,j]·xᵢ)·M`.

mod bank;
mod baseline;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bank::{compose_delta, init_alore, AloreBank, Expert, ExpertModule};
pub use baseline::{adapter_forward, stacked_forward, stacked_param_count, Activation, AdapterBaseline};
pub use forward::{alore_backward, alore_forward, alore_forward_cached, AloreCache};

/// Where an adapter sits relative to a sublayer of an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    /// Between LN1 and MHSA.
    #[serde(rename = "PreMHSA")]
    PreMhsa,
    /// After MHSA, before the residual add.
    #[serde(rename = "PostMHSA")]
    PostMhsa,
    /// Between LN2 and FFN.
    #[serde(rename = "PreFFN")]
    PreFfn,
    /// After FFN, before the residual add.
    #[serde(rename = "PostFFN")]
    PostFfn,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::PreMhsa, Site::PostMhsa, Site::PreFfn, Site::PostFfn];

    /// Tensor-name fragment.
    pub fn key(self) -> &'static str {
        match self {
            Site::PreMhsa => "pre_mhsa",
            Site::PostMhsa => "post_mhsa",
            Site::PreFfn => "pre_ffn",
            Site::PostFfn => "post_ffn",
        }
    }
}

/// Shape hyperparameters of an adapter bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AloreConfig {
    /// Model width.
    pub d: usize,
    /// Number of experts (and side of each scale matrix).
    pub n: usize,
    /// Bottleneck rank per expert.
    pub r: usize,
    /// Insertion sites, applied in every adapted layer.
    pub sites: Vec<Site>,
    /// Adapters go into encoder layers `0..layers_adapted`.
    pub layers_adapted: usize,
    /// Inverted-dropout probability on the adapter branch while training.
    pub dropout_p: f64,
}

impl AloreConfig {
    /// Default ablation settings (n = 4, r = 4, before MHSA and FFN, every layer).
    pub fn with_defaults(d: usize, num_layers: usize) -> Self {
        Self {
            d,
            n: 4,
            r: 4,
            sites: vec![Site::PreMhsa, Site::PreFfn],
            layers_adapted: num_layers,
            dropout_p: 0.1,
        }
    }

    /// Width of one hypercomplex block, `d / n`.
    pub fn block(&self) -> usize {
        self.d / self.n
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("d and n must be positive".into()));
        }
        if !self.d.is_multiple_of(self.n) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n = {}",
                self.d, self.n
            )));
        }
        if self.r == 0 || self.r > self.d / self.n {
            return Err(Error::Config(format!(
                "rank r = {} must lie in 1..={} (d/n)",
                self.r,
                self.d / self.n
            )));
        }
        if self.layers_adapted == 0 || self.layers_adapted > num_layers {
            return Err(Error::Config(format!(
                "layers_adapted = {} must lie in 1..={num_layers}",
                self.layers_adapted
            )));
        }
        if self.sites.is_empty() {
            return Err(Error::Config("at least one insertion site is required".into()));
        }
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].contains(s) {
                return Err(Error::Config(format!("duplicate site {s:?}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p = {} must lie in [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Which experts participate in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertMask {
    active: Vec<bool>,
}

impl ExpertMask {
    pub fn full(n: usize) -> Self {
        Self { active: vec![true; n] }
    }

    pub fn none(n: usize) -> Self {
        Self { active: vec![false; n] }
    }

    pub fn from_vec(active: Vec<bool>) -> Self {
        Self { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_vec(self.active.iter().zip(&other.active).map(|(&a, &b)| a || b).collect())
    }

    pub fn intersection(&self, other: &Self) -> Self {
        Self::from_vec(self.active.iter().zip(&other.active).map(|(&a, &b)| a && b).collect())
    }
}

/// Expert-role ablation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Keep experts `1..=i`.
    Increment,
    /// Keep only expert `i`.
    Single,
    /// Keep every expert except `i`.
    Sliced,
}

/// Builds the mask for `mode` with a 1-based expert index `i`.
pub fn make_expert_mask(mode: MaskMode, i: usize, n: usize) -> Result<ExpertMask> {
    if i == 0 || i > n {
        return Err(Error::Index(format!("expert index {i} outside 1..={n}")));
    }
    let active = (1..=n)
        .map(|k| match mode {
            MaskMode::Increment => k <= i,
            MaskMode::Single => k == i,
            MaskMode::Sliced => k != i,
        })
        .collect();
    Ok(ExpertMask { active })
}

/// Trainable adapter parameters: `2·d·r` per (layer, site) plus one global `n³` of scales.
pub fn count_alore_params(d: usize, r: usize, n: usize, site_count: usize, layers_adapted: usize) -> u64 {
    let (d, r, n) = (d as u64, r as u64, n as u64);
    2 * d * r * site_count as u64 * layers_adapted as u64 + n * n * n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_follow_their_definitions() {
        let f = false;
        let t = true;
        assert_eq!(
            make_expert_mask(MaskMode::Single, 2, 4).unwrap().active(),
            &[f, t, f, f]
        );
        assert_eq!(
            make_expert_mask(MaskMode::Increment, 4, 4).unwrap(),
            ExpertMask::full(4)
        );
        assert_eq!(
            make_expert_mask(MaskMode::Increment, 2, 4).unwrap().active(),
            &[t, t, f, f]
        );
        assert_eq!(
            make_expert_mask(MaskMode::Sliced, 2, 4).unwrap().active(),
            &[t, f, t, t]
        );
    }

    #[test]
    fn mask_index_out_of_range() {
        assert!(matches!(make_expert_mask(MaskMode::Single, 0, 4), Err(Error::Index(_))));
        assert!(matches!(make_expert_mask(MaskMode::Sliced, 5, 4), Err(Error::Index(_))));
    }

    #[test]
    fn reported_budget_values() {
        assert_eq!(count_alore_params(768, 4, 4, 2, 12), 147_520);
        assert_eq!(count_alore_params(768, 4, 4, 1, 12), 73_792);
        assert_eq!(count_alore_params(768, 4, 32, 2, 12), 180_224);
    }

    #[test]
    fn config_validation() {
        let mut c = AloreConfig::with_defaults(16, 2);
        c.validate(2).unwrap();
        c.d = 7;
        assert!(matches!(c.validate(2), Err(Error::Config(_))));
        let mut c = AloreConfig::with_defaults(16, 2);
        c.r = 5;
        assert!(c.validate(2).is_err(), "r > d/n");
        let mut c = AloreConfig::with_defaults(16, 2);
        c.layers_adapted = 3;
        assert!(c.validate(2).is_err());
        let mut c = AloreConfig::with_defaults(16, 2);
        c.sites = vec![Site::PreFfn, Site::PreFfn];
        assert!(c.validate(2).is_err());
        let mut c = AloreConfig::with_defaults(16, 2);
        c.dropout_p = 1.0;
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn site_serializes_with_sublayer_names() {
        assert_eq!(serde_json::to_string(&Site::PreMhsa).unwrap(), "\"PreMHSA\"");
        let s: Site = serde_json::from_str("\"PostFFN\"").unwrap();
        assert_eq!(s, Site::PostFfn);
    }
}
