use super::{Adapters, LayerWeights, ViTConfig, ViTModel, LN_EPS};
use crate::alore::{alore_forward_cached, AloreCache, Site};
use crate::error::{Error, Result};
use crate::linalg::{
    gelu, layer_norm_forward, linear, matmul, matmul_nt, softmax_rows, LayerNormCache, Matrix, Real, Rng,
};

/// Input of one adapter site and the adapter's saved activations.
#[derive(Debug, Clone)]
pub(crate) struct SiteCache<T> {
    pub input: Matrix<T>,
    pub alore: AloreCache<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Attention probabilities per head, `T × T`.
    pub probs: Vec<Matrix<T>>,
    /// Concatenated head outputs, input of `W^O`.
    pub concat: Matrix<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub ln1: LayerNormCache<T>,
    pub pre_mhsa: Option<SiteCache<T>>,
    pub attn_in: Matrix<T>,
    pub attn: AttnCache<T>,
    pub post_mhsa: Option<SiteCache<T>>,
    pub ln2: LayerNormCache<T>,
    pub pre_ffn: Option<SiteCache<T>>,
    pub ffn_in: Matrix<T>,
    pub hidden_pre: Matrix<T>,
    pub hidden: Matrix<T>,
    pub post_ffn: Option<SiteCache<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct SampleCache<T> {
    pub patches: Matrix<T>,
    pub layers: Vec<LayerCache<T>>,
    pub final_ln: LayerNormCache<T>,
    pub feature: Matrix<T>,
}

/// Flattens one `C × H × W` image into `N² × (C·p·p)` patch rows, patches in raster
/// order and each patch ordered channel, row, column.
pub fn patch_rows<T: Real>(image: &[T], config: &ViTConfig) -> Result<Matrix<T>> {
    if image.len() != config.image_len() {
        return Err(Error::shape("patch_embed", (1, image.len()), (1, config.image_len())));
    }
    let (s, p, g) = (config.image_size, config.patch_size, config.grid());
    let mut out = Matrix::zeros(g * g, config.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut k = 0;
            for c in 0..config.channels {
                for dy in 0..p {
                    let start = c * s * s + (gy * p + dy) * s + gx * p;
                    row[k..k + p].copy_from_slice(&image[start..start + p]);
                    k += p;
                }
            }
        }
    }
    Ok(out)
}

fn embed_patches<T: Real>(patches: &Matrix<T>, model: &ViTModel<T>) -> Result<Matrix<T>> {
    let projected = linear(patches, &model.patch_w, &model.patch_b)?;
    let d = model.config.d;
    let mut tokens = Matrix::zeros(projected.rows() + 1, d);
    tokens.row_mut(0).copy_from_slice(model.cls.data());
    tokens.data_mut()[d..].copy_from_slice(projected.data());
    tokens.add_assign(&model.pos)?;
    Ok(tokens)
}

fn check_images<T: Real>(images: &Matrix<T>, config: &ViTConfig) -> Result<()> {
    if images.cols() != config.image_len() {
        return Err(Error::shape(
            "images",
            images.shape(),
            (images.rows(), config.image_len()),
        ));
    }
    Ok(())
}

/// Token sequences (`(N²+1) × d` each) for a batch of flattened images (one per row).
pub fn patch_embed<T: Real>(images: &Matrix<T>, model: &ViTModel<T>) -> Result<Vec<Matrix<T>>> {
    check_images(images, &model.config)?;
    (0..images.rows())
        .map(|i| embed_patches(&patch_rows(images.row(i), &model.config)?, model))
        .collect()
}

pub(crate) fn mhsa_cached<T: Real>(
    x: &Matrix<T>,
    w: &LayerWeights<T>,
    heads: usize,
) -> Result<(Matrix<T>, AttnCache<T>)> {
    let q = linear(x, &w.wq, &w.bq)?;
    let k = linear(x, &w.wk, &w.bk)?;
    let v = linear(x, &w.wv, &w.bv)?;
    let d = x.cols();
    let dk = d / heads;
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut concat = Matrix::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let scores = matmul_nt(&q.slice_cols(lo, hi), &k.slice_cols(lo, hi))?.scale(scale);
        let p = softmax_rows(&scores);
        concat.set_cols(lo, &matmul(&p, &v.slice_cols(lo, hi))?);
        probs.push(p);
    }
    let out = linear(&concat, &w.wo, &w.bo)?;
    Ok((out, AttnCache { q, k, v, probs, concat }))
}

/// Multi-head self-attention with scale `1/√d_k`, heads concatenated and projected by `W^O`.
pub fn mhsa<T: Real>(x: &Matrix<T>, layer: &LayerWeights<T>, heads: usize) -> Result<Matrix<T>> {
    if x.cols() != layer.wq.rows() || !x.cols().is_multiple_of(heads) {
        return Err(Error::shape("mhsa", x.shape(), layer.wq.shape()));
    }
    mhsa_cached(x, layer, heads).map(|(y, _)| y)
}

fn apply_site<T: Real>(
    x: Matrix<T>,
    adapters: Option<Adapters<'_, T>>,
    layer: usize,
    site: Site,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Matrix<T>, Option<SiteCache<T>>)> {
    match adapters {
        Some(a) if a.bank.has_site(layer, site) => {
            let (y, alore) = alore_forward_cached(&x, a.bank, layer, site, a.mask, train_mode, rng)?;
            Ok((y, Some(SiteCache { input: x, alore })))
        }
        _ => Ok((x, None)),
    }
}

pub(crate) fn block_cached<T: Real>(
    x: Matrix<T>,
    model: &ViTModel<T>,
    l: usize,
    adapters: Option<Adapters<'_, T>>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Matrix<T>, LayerCache<T>)> {
    let w = &model.layers[l];
    let eps = T::of(LN_EPS);

    let (h1, ln1) = layer_norm_forward(&x, &w.ln1_g, &w.ln1_b, eps)?;
    let (attn_in, pre_mhsa) = apply_site(h1, adapters, l, Site::PreMhsa, train_mode, rng)?;
    let (m, attn) = mhsa_cached(&attn_in, w, model.config.heads)?;
    let (m, post_mhsa) = apply_site(m, adapters, l, Site::PostMhsa, train_mode, rng)?;
    let mut x_mid = x;
    x_mid.add_assign(&m)?;

    let (h2, ln2) = layer_norm_forward(&x_mid, &w.ln2_g, &w.ln2_b, eps)?;
    let (ffn_in, pre_ffn) = apply_site(h2, adapters, l, Site::PreFfn, train_mode, rng)?;
    let hidden_pre = linear(&ffn_in, &w.w1, &w.b1)?;
    let hidden = gelu(&hidden_pre);
    let f = linear(&hidden, &w.w2, &w.b2)?;
    let (f, post_ffn) = apply_site(f, adapters, l, Site::PostFfn, train_mode, rng)?;
    let mut y = x_mid;
    y.add_assign(&f)?;

    Ok((
        y,
        LayerCache {
            ln1,
            pre_mhsa,
            attn_in,
            attn,
            post_mhsa,
            ln2,
            pre_ffn,
            ffn_in,
            hidden_pre,
            hidden,
            post_ffn,
        },
    ))
}

/// One pre-norm encoder block; layers without adapters in the bank run unmodified.
pub fn encoder_block<T: Real>(
    x: &Matrix<T>,
    model: &ViTModel<T>,
    layer: usize,
    adapters: Option<Adapters<'_, T>>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    if layer >= model.layers.len() {
        return Err(Error::Index(format!("layer {layer} of {}", model.layers.len())));
    }
    if x.cols() != model.config.d {
        return Err(Error::shape("encoder_block", x.shape(), (x.rows(), model.config.d)));
    }
    if let Some(a) = adapters {
        check_adapters(model, a)?;
    }
    block_cached(x.clone(), model, layer, adapters, train_mode, rng).map(|(y, _)| y)
}

pub(crate) fn check_adapters<T: Real>(model: &ViTModel<T>, adapters: Adapters<'_, T>) -> Result<()> {
    let c = adapters.bank.config();
    if c.d != model.config.d {
        return Err(Error::Config(format!(
            "adapter width {} != model width {}",
            c.d, model.config.d
        )));
    }
    if c.layers_adapted > model.config.depth {
        return Err(Error::Config(format!(
            "adapters cover {} layers but the model has {}",
            c.layers_adapted, model.config.depth
        )));
    }
    if adapters.mask.len() != c.n {
        return Err(Error::shape("expert mask", (1, adapters.mask.len()), (1, c.n)));
    }
    Ok(())
}

/// Final-LN class token for one image, with every intermediate saved.
pub(crate) fn features_sample<T: Real>(
    model: &ViTModel<T>,
    image: &[T],
    adapters: Option<Adapters<'_, T>>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<SampleCache<T>> {
    let patches = patch_rows(image, &model.config)?;
    let mut x = embed_patches(&patches, model)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        let (y, cache) = block_cached(x, model, l, adapters, train_mode, rng)?;
        x = y;
        layers.push(cache);
    }
    let cls = x.slice_rows(0, 1);
    let (feature, final_ln) = layer_norm_forward(&cls, &model.norm_g, &model.norm_b, T::of(LN_EPS))?;
    Ok(SampleCache {
        patches,
        layers,
        final_ln,
        feature,
    })
}

/// Logits (`1 × classes`) for one image and the cache needed to backpropagate them.
pub(crate) fn forward_sample<T: Real>(
    model: &ViTModel<T>,
    image: &[T],
    adapters: Option<Adapters<'_, T>>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Matrix<T>, SampleCache<T>)> {
    let cache = features_sample(model, image, adapters, train_mode, rng)?;
    let logits = linear(&cache.feature, &model.head_w, &model.head_b)?;
    Ok((logits, cache))
}

/// Final-LN class-token features, `batch × d`.
pub fn vit_features<T: Real>(
    model: &ViTModel<T>,
    images: &Matrix<T>,
    adapters: Option<Adapters<'_, T>>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    check_images(images, &model.config)?;
    if let Some(a) = adapters {
        check_adapters(model, a)?;
    }
    let mut out = Matrix::zeros(images.rows(), model.config.d);
    for i in 0..images.rows() {
        let cache = features_sample(model, images.row(i), adapters, train_mode, rng)?;
        out.row_mut(i).copy_from_slice(cache.feature.data());
    }
    Ok(out)
}

/// Logits, `batch × classes`. Images are rows of `C·H·W` values.
pub fn vit_forward<T: Real>(
    model: &ViTModel<T>,
    images: &Matrix<T>,
    adapters: Option<Adapters<'_, T>>,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    let features = vit_features(model, images, adapters, train_mode, rng)?;
    linear(&features, &model.head_w, &model.head_b)
}
