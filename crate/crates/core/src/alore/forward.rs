use super::{AloreBank, ExpertMask, Site};
use crate::error::{Error, Result};
use crate::linalg::{gemm, matmul, matmul_nt, matmul_tn, Matrix, Real, Rng};

/// Activations saved by [`alore_forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AloreCache<T> {
    /// Per expert: `x̃ · Dᵢ`, shape `(T·n) × r`, or `None` when masked out.
    down: Vec<Option<Matrix<T>>>,
    /// Per expert: block-mixed `down` (`Sᵢᵀ` applied per token), same shape.
    mixed: Vec<Option<Matrix<T>>>,
    /// Inverted-dropout multipliers on the branch output (`0` or `1/(1-p)`).
    dropout: Option<Matrix<T>>,
}

/// `q[t·n + j] = Σᵢ s[i, j] · p[t·n + i]` over rows of width `r`.
fn mix_blocks<T: Real>(p: &Matrix<T>, s: &Matrix<T>, n: usize) -> Matrix<T> {
    let r = p.cols();
    let mut q = Matrix::zeros(p.rows(), r);
    for t in 0..p.rows() / n {
        for j in 0..n {
            let dst_start = (t * n + j) * r;
            for i in 0..n {
                let w = s[(i, j)];
                if w == T::zero() {
                    continue;
                }
                let src = p.row(t * n + i);
                let dst = &mut q.data_mut()[dst_start..dst_start + r];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
    }
    q
}

fn check_inputs<T: Real>(x: &Matrix<T>, bank: &AloreBank<T>, mask: &ExpertMask) -> Result<()> {
    let c = bank.config();
    if x.cols() != c.d {
        return Err(Error::shape("alore_forward", x.shape(), (c.d, c.d)));
    }
    if mask.len() != c.n {
        return Err(Error::shape("expert mask", (1, mask.len()), (1, c.n)));
    }
    Ok(())
}

/// `X + Drop(X · Σ_{i ∈ mask} Sᵢ ⊗ (Dᵢ Uᵢ))`, evaluated blockwise without forming the `d × d` update.
///
/// Dropout is active only when `train_mode` is set and the bank's `dropout_p > 0`; it
/// draws from `rng` in that case and leaves `rng` untouched otherwise.
pub fn alore_forward<T: Real>(
    x: &Matrix<T>,
    bank: &AloreBank<T>,
    layer: usize,
    site: Site,
    mask: &ExpertMask,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Matrix<T>> {
    alore_forward_cached(x, bank, layer, site, mask, train_mode, rng).map(|(y, _)| y)
}

pub fn alore_forward_cached<T: Real>(
    x: &Matrix<T>,
    bank: &AloreBank<T>,
    layer: usize,
    site: Site,
    mask: &ExpertMask,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Matrix<T>, AloreCache<T>)> {
    check_inputs(x, bank, mask)?;
    let module = bank.module(layer, site)?;
    let c = bank.config();
    let (n, b) = (c.n, c.block());
    let tokens = x.rows();

    // A T×d row-major buffer read as (T·n)×(d/n): row t·n+i is block i of token t.
    let blocks = x.clone().reshape(tokens * n, b)?;
    let mut branch = Matrix::zeros(tokens * n, b);
    let mut cache = AloreCache {
        down: Vec::with_capacity(n),
        mixed: Vec::with_capacity(n),
        dropout: None,
    };
    for (i, (expert, scale)) in module.experts.iter().zip(bank.scales()).enumerate() {
        if !mask.is_active(i) {
            cache.down.push(None);
            cache.mixed.push(None);
            continue;
        }
        let down = matmul(&blocks, &expert.down)?;
        let mixed = mix_blocks(&down, scale, n);
        gemm(T::one(), &mixed, false, &expert.up, false, T::one(), &mut branch)?;
        cache.down.push(Some(down));
        cache.mixed.push(Some(mixed));
    }
    let mut branch = branch.reshape(tokens, c.d)?;

    if train_mode && c.dropout_p > 0.0 {
        let p = c.dropout_p;
        let keep = T::of(1.0 / (1.0 - p));
        let mut drop = Matrix::zeros(tokens, c.d);
        for (m, v) in drop.data_mut().iter_mut().zip(branch.data_mut()) {
            if rng.uniform() >= p {
                *m = keep;
                *v *= keep;
            } else {
                *v = T::zero();
            }
        }
        cache.dropout = Some(drop);
    }

    branch.add_assign(x)?;
    Ok((branch, cache))
}

/// Backpropagates through one adapter: accumulates parameter gradients into `grads`
/// (same layout as `bank`) and returns the gradient with respect to `x`.
#[allow(clippy::too_many_arguments)]
pub fn alore_backward<T: Real>(
    d_out: &Matrix<T>,
    x: &Matrix<T>,
    bank: &AloreBank<T>,
    layer: usize,
    site: Site,
    cache: &AloreCache<T>,
    grads: &mut AloreBank<T>,
) -> Result<Matrix<T>> {
    let c = bank.config();
    let (n, b) = (c.n, c.block());
    let tokens = x.rows();
    let module = bank.module(layer, site)?;

    let d_branch = match &cache.dropout {
        Some(m) => d_out.hadamard(m)?,
        None => d_out.clone(),
    };
    let d_branch = d_branch.reshape(tokens * n, b)?;
    let blocks = x.clone().reshape(tokens * n, b)?;
    let mut d_blocks = Matrix::zeros(tokens * n, b);

    for (i, expert) in module.experts.iter().enumerate() {
        let (Some(down), Some(mixed)) = (&cache.down[i], &cache.mixed[i]) else {
            continue;
        };
        let scale = &bank.scales()[i];
        let d_up = matmul_tn(mixed, &d_branch)?;
        let d_mixed = matmul_nt(&d_branch, &expert.up)?;

        // Mixing is q_t = Sᵀ p_t per token, so dS = Σ_t p_t · dq_tᵀ and dp_t = S · dq_t.
        let r = c.r;
        let mut d_scale = Matrix::zeros(n, n);
        let mut d_down_proj = Matrix::zeros(tokens * n, r);
        for t in 0..tokens {
            for i_blk in 0..n {
                let p_row = down.row(t * n + i_blk);
                for j in 0..n {
                    let dq_row = d_mixed.row(t * n + j);
                    let mut acc = T::zero();
                    for (&pv, &dq) in p_row.iter().zip(dq_row) {
                        acc += pv * dq;
                    }
                    d_scale[(i_blk, j)] += acc;
                    let w = scale[(i_blk, j)];
                    let dst = d_down_proj.row_mut(t * n + i_blk);
                    for (dp, &dq) in dst.iter_mut().zip(dq_row) {
                        *dp += w * dq;
                    }
                }
            }
        }
        let d_down = matmul_tn(&blocks, &d_down_proj)?;
        gemm(
            T::one(),
            &d_down_proj,
            false,
            &expert.down,
            true,
            T::one(),
            &mut d_blocks,
        )?;

        grads.scales_mut()[i].add_assign(&d_scale)?;
        let g = &mut grads.module_mut(layer, site)?.experts[i];
        g.down.add_assign(&d_down)?;
        g.up.add_assign(&d_up)?;
    }

    let mut dx = d_blocks.reshape(tokens, c.d)?;
    dx.add_assign(d_out)?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alore::{compose_delta, init_alore, make_expert_mask, AloreConfig, MaskMode};
    use crate::linalg::randn;

    fn config(d: usize, n: usize, r: usize) -> AloreConfig {
        AloreConfig {
            d,
            n,
            r,
            sites: vec![Site::PreMhsa, Site::PreFfn],
            layers_adapted: 1,
            dropout_p: 0.1,
        }
    }

    #[test]
    fn fresh_bank_is_identity_for_any_mask() {
        let c = config(8, 4, 2);
        let bank: AloreBank = init_alore(&c, 1, &mut Rng::new(1)).unwrap();
        let x = randn::<f64>(5, 8, 1.0, &mut Rng::new(2));
        for mask in [ExpertMask::full(4), make_expert_mask(MaskMode::Single, 3, 4).unwrap()] {
            let y = alore_forward(&x, &bank, 0, Site::PreMhsa, &mask, false, &mut Rng::new(0)).unwrap();
            assert!(y.bit_eq(&x));
        }
    }

    #[test]
    fn empty_mask_is_identity() {
        let c = config(8, 4, 2);
        let bank = AloreBank::<f64>::random(&c, 1, 1.0, &mut Rng::new(3)).unwrap();
        let x = randn::<f64>(5, 8, 1.0, &mut Rng::new(4));
        let y = alore_forward(
            &x,
            &bank,
            0,
            Site::PreFfn,
            &ExpertMask::none(4),
            false,
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn block_path_matches_materialized_update() {
        let c = config(8, 2, 3);
        let bank = AloreBank::<f64>::random(&c, 1, 1.0, &mut Rng::new(5)).unwrap();
        let x = randn::<f64>(6, 8, 1.0, &mut Rng::new(6));
        let y = alore_forward(
            &x,
            &bank,
            0,
            Site::PreMhsa,
            &ExpertMask::full(2),
            false,
            &mut Rng::new(0),
        )
        .unwrap();
        let mut w = compose_delta(&bank, 0, Site::PreMhsa).unwrap();
        w.add_assign(&Matrix::identity(8)).unwrap();
        let oracle = matmul(&x, &w).unwrap();
        assert!(y.max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn mask_length_checked() {
        let c = config(8, 4, 2);
        let bank: AloreBank = init_alore(&c, 1, &mut Rng::new(1)).unwrap();
        let x = Matrix::zeros(2, 8);
        let err = alore_forward(
            &x,
            &bank,
            0,
            Site::PreMhsa,
            &ExpertMask::full(3),
            false,
            &mut Rng::new(0),
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn eval_mode_does_not_touch_rng() {
        let c = config(8, 4, 2);
        let bank = AloreBank::<f64>::random(&c, 1, 1.0, &mut Rng::new(3)).unwrap();
        let x = randn::<f64>(3, 8, 1.0, &mut Rng::new(4));
        let mut rng = Rng::new(9);
        alore_forward(&x, &bank, 0, Site::PreMhsa, &ExpertMask::full(4), false, &mut rng).unwrap();
        assert_eq!(rng.counter(), 0);
        alore_forward(&x, &bank, 0, Site::PreMhsa, &ExpertMask::full(4), true, &mut rng).unwrap();
        assert!(rng.counter() > 0);
    }

    #[test]
    fn backward_matches_central_difference() {
        let c = config(8, 2, 2);
        let bank = AloreBank::<f64>::random(&c, 1, 0.7, &mut Rng::new(10)).unwrap();
        let x = randn::<f64>(3, 8, 1.0, &mut Rng::new(11));
        let probe = randn::<f64>(3, 8, 1.0, &mut Rng::new(12));
        let mask = make_expert_mask(MaskMode::Single, 2, 2)
            .unwrap()
            .union(&ExpertMask::full(2));
        // Train mode with a fixed dropout seed makes the loss a deterministic function.
        let loss = |b: &AloreBank<f64>, x: &Matrix<f64>| {
            let y = alore_forward(x, b, 0, Site::PreFfn, &mask, true, &mut Rng::new(77)).unwrap();
            y.hadamard(&probe).unwrap().sum()
        };
        let (_, cache) = alore_forward_cached(&x, &bank, 0, Site::PreFfn, &mask, true, &mut Rng::new(77)).unwrap();
        let mut grads = bank.zeros_like();
        let dx = alore_backward(&probe, &x, &bank, 0, Site::PreFfn, &cache, &mut grads).unwrap();

        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&bank, &xp) - loss(&bank, &xm)) / (2.0 * h);
            assert!((dx.data()[i] - fd).abs() < 1e-7, "dx[{i}]");
        }
        let names: Vec<String> = bank.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Matrix<f64>> = grads.tensors().into_iter().map(|(_, m)| m.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let len = analytic[k].len();
            for e in 0..len {
                let mut bp = bank.clone();
                bp.tensors_mut()[k].1.data_mut()[e] += h;
                let mut bm = bank.clone();
                bm.tensors_mut()[k].1.data_mut()[e] -= h;
                let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
                let a = analytic[k].data()[e];
                assert!((a - fd).abs() < 1e-7, "{name}[{e}]: {a} vs {fd}");
            }
        }
    }
}
