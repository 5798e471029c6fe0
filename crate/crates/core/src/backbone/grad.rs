//! Hand-derived reverse pass through the ViT and its adapters.

use super::forward::{forward_sample, LayerCache, SampleCache, SiteCache};
use super::{trainable_parameters, Adapters, Regime, ViTModel};
use crate::alore::{alore_backward, AloreBank, Site};
use crate::error::{Error, Result};
use crate::linalg::{gelu_backward, gemm, layer_norm_backward, matmul, matmul_nt, matmul_tn, Matrix, Real, Rng};
use crate::train::cross_entropy;

/// Gradient accumulators laid out like the parameters they belong to.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub model: ViTModel<T>,
    pub bank: Option<AloreBank<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros(model: &ViTModel<T>, bank: Option<&AloreBank<T>>) -> Result<Self> {
        let mut g = ViTModel::zeros(&model.config)?;
        for (_, t) in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(Self {
            model: g,
            bank: bank.map(AloreBank::zeros_like),
        })
    }

    /// Gradients of the tensors `regime` trains, aligned with [`trainable_parameters`].
    pub fn trainable(&self, regime: Regime) -> Vec<(String, &Matrix<T>)> {
        trainable_parameters(&self.model, self.bank.as_ref(), regime)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Scope {
    HeadOnly,
    AdaptersAndHead,
    All,
}

impl Scope {
    fn backbone(self) -> bool {
        self == Scope::All
    }
}

fn site_backward<T: Real>(
    d_out: Matrix<T>,
    site_cache: &Option<SiteCache<T>>,
    adapters: Option<Adapters<'_, T>>,
    layer: usize,
    site: Site,
    grads: &mut Option<AloreBank<T>>,
) -> Result<Matrix<T>> {
    match (site_cache, adapters, grads.as_mut()) {
        (Some(c), Some(a), Some(g)) => alore_backward(&d_out, &c.input, a.bank, layer, site, &c.alore, g),
        _ => Ok(d_out),
    }
}

fn accumulate_linear<T: Real>(
    input: &Matrix<T>,
    d_out: &Matrix<T>,
    gw: &mut Matrix<T>,
    gb: &mut Matrix<T>,
) -> Result<()> {
    gemm(T::one(), input, true, d_out, false, T::one(), gw)?;
    gb.add_assign(&d_out.col_sums())
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Real>(
    dy: Matrix<T>,
    model: &ViTModel<T>,
    l: usize,
    cache: &LayerCache<T>,
    adapters: Option<Adapters<'_, T>>,
    scope: Scope,
    gm: &mut ViTModel<T>,
    gbank: &mut Option<AloreBank<T>>,
) -> Result<Matrix<T>> {
    let w = &model.layers[l];
    let heads = model.config.heads;

    // y = x_mid + PostFFN(FFN(PreFFN(LN2(x_mid))))
    let mut d_mid = dy.clone();
    let df = site_backward(dy, &cache.post_ffn, adapters, l, Site::PostFfn, gbank)?;
    if scope.backbone() {
        let g = &mut gm.layers[l];
        accumulate_linear(&cache.hidden, &df, &mut g.w2, &mut g.b2)?;
    }
    let d_hidden = matmul_nt(&df, &w.w2)?;
    let d_pre = gelu_backward(&cache.hidden_pre, &d_hidden);
    if scope.backbone() {
        let g = &mut gm.layers[l];
        accumulate_linear(&cache.ffn_in, &d_pre, &mut g.w1, &mut g.b1)?;
    }
    let d_ffn_in = matmul_nt(&d_pre, &w.w1)?;
    let d_h2 = site_backward(d_ffn_in, &cache.pre_ffn, adapters, l, Site::PreFfn, gbank)?;
    let (dx_ln2, dg2, db2) = layer_norm_backward(&d_h2, &w.ln2_g, &cache.ln2);
    if scope.backbone() {
        let g = &mut gm.layers[l];
        g.ln2_g.add_assign(&dg2)?;
        g.ln2_b.add_assign(&db2)?;
    }
    d_mid.add_assign(&dx_ln2)?;

    // x_mid = x + PostMHSA(MHSA(PreMHSA(LN1(x))))
    let mut dx = d_mid.clone();
    let dm = site_backward(d_mid, &cache.post_mhsa, adapters, l, Site::PostMhsa, gbank)?;
    let attn = &cache.attn;
    if scope.backbone() {
        let g = &mut gm.layers[l];
        accumulate_linear(&attn.concat, &dm, &mut g.wo, &mut g.bo)?;
    }
    let d_concat = matmul_nt(&dm, &w.wo)?;
    let tokens = d_concat.rows();
    let d = model.config.d;
    let dk = d / heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut dq = Matrix::zeros(tokens, d);
    let mut dk_all = Matrix::zeros(tokens, d);
    let mut dv = Matrix::zeros(tokens, d);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let p = &attn.probs[h];
        let d_head = d_concat.slice_cols(lo, hi);
        let q = attn.q.slice_cols(lo, hi);
        let k = attn.k.slice_cols(lo, hi);
        let v = attn.v.slice_cols(lo, hi);
        let dp = matmul_nt(&d_head, &v)?;
        dv.set_cols(lo, &matmul_tn(p, &d_head)?);
        let mut ds = Matrix::zeros(tokens, tokens);
        for i in 0..tokens {
            let pr = p.row(i);
            let dpr = dp.row(i);
            let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            for (o, (&pv, &dv)) in ds.row_mut(i).iter_mut().zip(pr.iter().zip(dpr)) {
                *o = pv * (dv - dot) * scale;
            }
        }
        dq.set_cols(lo, &matmul(&ds, &k)?);
        dk_all.set_cols(lo, &matmul_tn(&ds, &q)?);
    }
    if scope.backbone() {
        let g = &mut gm.layers[l];
        accumulate_linear(&cache.attn_in, &dq, &mut g.wq, &mut g.bq)?;
        accumulate_linear(&cache.attn_in, &dk_all, &mut g.wk, &mut g.bk)?;
        accumulate_linear(&cache.attn_in, &dv, &mut g.wv, &mut g.bv)?;
    }
    let mut d_attn_in = matmul_nt(&dq, &w.wq)?;
    gemm(T::one(), &dk_all, false, &w.wk, true, T::one(), &mut d_attn_in)?;
    gemm(T::one(), &dv, false, &w.wv, true, T::one(), &mut d_attn_in)?;
    let d_h1 = site_backward(d_attn_in, &cache.pre_mhsa, adapters, l, Site::PreMhsa, gbank)?;
    let (dx_ln1, dg1, db1) = layer_norm_backward(&d_h1, &w.ln1_g, &cache.ln1);
    if scope.backbone() {
        let g = &mut gm.layers[l];
        g.ln1_g.add_assign(&dg1)?;
        g.ln1_b.add_assign(&db1)?;
    }
    dx.add_assign(&dx_ln1)?;
    Ok(dx)
}

fn backward_sample<T: Real>(
    model: &ViTModel<T>,
    adapters: Option<Adapters<'_, T>>,
    cache: &SampleCache<T>,
    d_logits: &Matrix<T>,
    scope: Scope,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let gm = &mut grads.model;
    accumulate_linear(&cache.feature, d_logits, &mut gm.head_w, &mut gm.head_b)?;
    if scope == Scope::HeadOnly {
        return Ok(());
    }
    let d_feat = matmul_nt(d_logits, &model.head_w)?;
    let (d_cls, dg, db) = layer_norm_backward(&d_feat, &model.norm_g, &cache.final_ln);
    if scope.backbone() {
        gm.norm_g.add_assign(&dg)?;
        gm.norm_b.add_assign(&db)?;
    }
    let d = model.config.d;
    let mut dx = Matrix::zeros(model.config.tokens(), d);
    dx.row_mut(0).copy_from_slice(d_cls.data());
    for l in (0..model.layers.len()).rev() {
        dx = block_backward(dx, model, l, &cache.layers[l], adapters, scope, gm, &mut grads.bank)?;
    }
    if scope.backbone() {
        let d_patches = dx.slice_rows(1, dx.rows());
        accumulate_linear(&cache.patches, &d_patches, &mut gm.patch_w, &mut gm.patch_b)?;
        let d_cls_token = Matrix::row_vector(dx.row(0));
        gm.cls.add_assign(&d_cls_token)?;
        gm.pos.add_assign(&dx)?;
    }
    Ok(())
}

/// Mean cross-entropy over the batch and its gradients for the tensors `regime` trains.
///
/// Gradients of frozen tensors are left at zero (and, for speed, not computed).
/// Dropout masks are drawn from `rng` in sample order when `train_mode` is set.
pub fn loss_and_grads<T: Real>(
    model: &ViTModel<T>,
    adapters: Option<Adapters<'_, T>>,
    images: &Matrix<T>,
    labels: &[usize],
    regime: Regime,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(T, Gradients<T>)> {
    if images.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.rows(),
            labels.len()
        )));
    }
    if let Some(a) = adapters {
        super::forward::check_adapters(model, a)?;
    }
    let scope = match regime {
        Regime::LinearProbe => Scope::HeadOnly,
        Regime::Alore if adapters.is_some() => Scope::AdaptersAndHead,
        Regime::Alore => Scope::HeadOnly,
        Regime::Full => Scope::All,
    };
    let mut grads = Gradients::zeros(model, adapters.map(|a| a.bank))?;
    let inv_batch = T::one() / T::of(labels.len() as f64);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let (logits, cache) = forward_sample(model, images.row(i), adapters, train_mode, rng)?;
        let (loss, mut d_logits) = cross_entropy(&logits, &[label])?;
        total += loss;
        d_logits.scale_in_place(inv_batch);
        backward_sample(model, adapters, &cache, &d_logits, scope, &mut grads)?;
    }
    Ok((total * inv_batch, grads))
}
