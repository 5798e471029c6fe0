use super::{AloreConfig, Site};
use crate::error::{Error, Result};
use crate::linalg::{kron, matmul, randn, Matrix, Real, Rng};

/// One rank-`r` bottleneck in the `d/n`-wide block space.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T = f64> {
    /// `(d/n) × r`.
    pub down: Matrix<T>,
    /// `r × (d/n)`.
    pub up: Matrix<T>,
}

/// The `n` experts living at one (layer, site).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModule<T = f64> {
    pub layer: usize,
    pub site: Site,
    pub experts: Vec<Expert<T>>,
}

/// Every trainable adapter parameter: the global scale matrices and the per-(layer, site)
/// expert pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AloreBank<T = f64> {
    config: AloreConfig,
    scales: Vec<Matrix<T>>,
    modules: Vec<ExpertModule<T>>,
}

impl<T: Real> AloreBank<T> {
    fn build(config: &AloreConfig, num_layers: usize, mut fill: impl FnMut(usize, usize) -> Matrix<T>) -> Result<Self> {
        config.validate(num_layers)?;
        let (n, b, r) = (config.n, config.block(), config.r);
        let scales = (0..n).map(|_| fill(n, n)).collect();
        let mut modules = Vec::with_capacity(config.layers_adapted * config.sites.len());
        for layer in 0..config.layers_adapted {
            for &site in &config.sites {
                let experts = (0..n)
                    .map(|_| {
                        let down = fill(b, r);
                        let up = fill(r, b);
                        Expert { down, up }
                    })
                    .collect();
                modules.push(ExpertModule { layer, site, experts });
            }
        }
        Ok(Self {
            config: config.clone(),
            scales,
            modules,
        })
    }

    /// Bank with every entry zero (used as a gradient accumulator).
    pub fn zeros(config: &AloreConfig, num_layers: usize) -> Result<Self> {
        Self::build(config, num_layers, |r, c| Matrix::zeros(r, c))
    }

    /// Bank with every entry drawn from `normal(0, std²)`.
    pub fn random(config: &AloreConfig, num_layers: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Self::build(config, num_layers, |r, c| randn(r, c, std, rng))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            scales: self.scales.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
            modules: self
                .modules
                .iter()
                .map(|m| ExpertModule {
                    layer: m.layer,
                    site: m.site,
                    experts: m
                        .experts
                        .iter()
                        .map(|e| Expert {
                            down: Matrix::zeros(e.down.rows(), e.down.cols()),
                            up: Matrix::zeros(e.up.rows(), e.up.cols()),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn config(&self) -> &AloreConfig {
        &self.config
    }

    pub fn scales(&self) -> &[Matrix<T>] {
        &self.scales
    }

    pub fn scales_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.scales
    }

    /// Sets the training-time dropout probability of the adapter branches.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout_p = {p} must lie in [0, 1)")));
        }
        self.config.dropout_p = p;
        Ok(())
    }

    pub fn modules(&self) -> &[ExpertModule<T>] {
        &self.modules
    }

    fn position(&self, layer: usize, site: Site) -> Option<usize> {
        if layer >= self.config.layers_adapted {
            return None;
        }
        let s = self.config.sites.iter().position(|&x| x == site)?;
        Some(layer * self.config.sites.len() + s)
    }

    pub fn has_site(&self, layer: usize, site: Site) -> bool {
        self.position(layer, site).is_some()
    }

    pub fn module(&self, layer: usize, site: Site) -> Result<&ExpertModule<T>> {
        self.position(layer, site)
            .map(|i| &self.modules[i])
            .ok_or_else(|| Error::Lookup(format!("no adapter at layer {layer}, site {site:?}")))
    }

    pub fn module_mut(&mut self, layer: usize, site: Site) -> Result<&mut ExpertModule<T>> {
        match self.position(layer, site) {
            Some(i) => Ok(&mut self.modules[i]),
            None => Err(Error::Lookup(format!("no adapter at layer {layer}, site {site:?}"))),
        }
    }

    /// Named tensors in a fixed order: scales, then modules layer-major.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out: Vec<(String, &Matrix<T>)> = self
            .scales
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("alore.scale.{i}"), s))
            .collect();
        for m in &self.modules {
            for (i, e) in m.experts.iter().enumerate() {
                out.push((format!("alore.{}.{}.{i}.down", m.layer, m.site.key()), &e.down));
                out.push((format!("alore.{}.{}.{i}.up", m.layer, m.site.key()), &e.up));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out: Vec<(String, &mut Matrix<T>)> = self
            .scales
            .iter_mut()
            .enumerate()
            .map(|(i, s)| (format!("alore.scale.{i}"), s))
            .collect();
        for m in &mut self.modules {
            let (layer, key) = (m.layer, m.site.key());
            for (i, e) in m.experts.iter_mut().enumerate() {
                out.push((format!("alore.{layer}.{key}.{i}.down"), &mut e.down));
                out.push((format!("alore.{layer}.{key}.{i}.up"), &mut e.up));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> AloreBank<U> {
        AloreBank {
            config: self.config.clone(),
            scales: self.scales.iter().map(Matrix::cast).collect(),
            modules: self
                .modules
                .iter()
                .map(|m| ExpertModule {
                    layer: m.layer,
                    site: m.site,
                    experts: m
                        .experts
                        .iter()
                        .map(|e| Expert {
                            down: e.down.cast(),
                            up: e.up.cast(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Initializes a bank: `D ~ normal(0, 1/√(d/n))`, `U = 0`, `S ~ normal(0, 1/n)`.
///
/// With `U = 0` every composed update is exactly zero, so an attached bank leaves the
/// backbone function unchanged until the first optimizer step.
pub fn init_alore<T: Real>(config: &AloreConfig, num_layers: usize, rng: &mut Rng) -> Result<AloreBank<T>> {
    config.validate(num_layers)?;
    let n = config.n;
    let down_std = 1.0 / (config.block() as f64).sqrt();
    let scale_std = 1.0 / n as f64;
    let mut bank = AloreBank::zeros(config, num_layers)?;
    for s in bank.scales.iter_mut() {
        *s = randn(n, n, scale_std, rng);
    }
    for m in bank.modules.iter_mut() {
        for e in m.experts.iter_mut() {
            e.down = randn(e.down.rows(), e.down.cols(), down_std, rng);
        }
    }
    Ok(bank)
}

/// Materializes `Σᵢ Sᵢ ⊗ (Dᵢ Uᵢ)` for one (layer, site) as a `d × d` matrix.
pub fn compose_delta<T: Real>(bank: &AloreBank<T>, layer: usize, site: Site) -> Result<Matrix<T>> {
    let module = bank.module(layer, site)?;
    let d = bank.config.d;
    let mut total = Matrix::zeros(d, d);
    for (scale, e) in bank.scales.iter().zip(&module.experts) {
        let hyper = matmul(&e.down, &e.up)?;
        total.add_assign(&kron(scale, &hyper))?;
    }
    Ok(total)
}
