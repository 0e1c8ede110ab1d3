//! Gradient-subspace geometry for low-rank adapters.
//!
//! The central object is the first-order reachability map of an adapter
//! state `(A0, B0)`:
//!
//! ```text
//! P(g) = g B0^T B0 + A0 A0^T g
//! ```
//!
//! which is the update direction a simultaneous gradient step on both
//! factors induces on the product `A B`, to first order. `P` is an exact
//! orthogonal projector only when `A0` has orthonormal columns and `B0 = 0`;
//! callers relying on orthogonality must stay in that regime.

use crate::activation::Activation;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MlpModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Relative slack allowed before a non-expansiveness violation is treated
/// as an internal error.
pub const NON_EXPANSIVE_SLACK: f64 = 1e-9;

/// Per-probe record of how much of the full gradient the adapter update
/// can and does carry.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct InfoLossReport {
    pub step: usize,
    /// |g - P(grad_delta)|_F^2 — discrepancy between the full gradient and
    /// the projected adapter gradient.
    pub total: f64,
    /// |g - P(g)|_F^2 — rank-limited part; no initialization removes it.
    pub unavoidable: f64,
    /// |P(g) - P(grad_delta)|_F^2 — mask-mismatch part; boundary-aligned
    /// initialization drives it toward zero.
    pub reducible: f64,
    /// |g - grad_delta|_F^2 — upper bound for the reducible part.
    pub upper_bound: f64,
}

fn check_shapes<S: Scalar>(g: &Tensor2<S>, a0: &Tensor2<S>, b0: &Tensor2<S>) -> Result<()> {
    let (d, k) = g.shape();
    if a0.rows() != d {
        return Err(Error::dims(
            "tangent_projection (A0 rows vs g rows)",
            a0.shape(),
            g.shape(),
        ));
    }
    if b0.cols() != k {
        return Err(Error::dims(
            "tangent_projection (B0 cols vs g cols)",
            b0.shape(),
            g.shape(),
        ));
    }
    if a0.cols() != b0.rows() {
        return Err(Error::dims(
            "tangent_projection (factor ranks)",
            a0.shape(),
            b0.shape(),
        ));
    }
    Ok(())
}

/// First-order reachable component of `g`: `g B0^T B0 + A0 A0^T g`.
pub fn tangent_projection<S: Scalar>(
    g: &Tensor2<S>,
    a0: &Tensor2<S>,
    b0: &Tensor2<S>,
) -> Result<Tensor2<S>> {
    check_shapes(g, a0, b0)?;
    // (g B0^T) B0: row-space term; A0 (A0^T g): column-space term
    let row_term = g.matmul(&b0.transpose())?.matmul(b0)?;
    let col_term = a0.matmul(&a0.transpose().matmul(g)?)?;
    row_term.add(&col_term)
}

/// Squared Frobenius norm of the discarded component `g - P(g)`.
/// Zero exactly when the projection reproduces `g`.
pub fn info_loss<S: Scalar>(g: &Tensor2<S>, a0: &Tensor2<S>, b0: &Tensor2<S>) -> Result<S> {
    let p = tangent_projection(g, a0, b0)?;
    Ok(g.sub(&p)?.frobenius_sq())
}

/// Residual of the first-order product-update identity.
///
/// One simultaneous gradient step with rate `gamma` moves the factors to
/// `A1 = A0 - gamma eta g B0^T`, `B1 = B0 - gamma eta A0^T g`; the product
/// then satisfies `A1 B1 - A0 B0 = -gamma eta P(g) + (gamma eta)^2 g B0^T A0^T g`.
/// Returns `|A1 B1 - A0 B0 + gamma eta P(g)|_F`, which equals the norm of
/// the quadratic term.
pub fn first_order_update_check<S: Scalar>(
    a0: &Tensor2<S>,
    b0: &Tensor2<S>,
    g: &Tensor2<S>,
    gamma: S,
    eta: S,
) -> Result<S> {
    check_shapes(g, a0, b0)?;
    if gamma < S::zero() {
        return Err(Error::Config("gamma must be nonnegative".into()));
    }
    let ge = gamma * eta;
    let a1 = a0.sub(&g.matmul(&b0.transpose())?.scale(ge))?;
    let b1 = b0.sub(&a0.transpose().matmul(g)?.scale(ge))?;
    let product_change = a1.matmul(&b1)?.sub(&a0.matmul(b0)?)?;
    let projected = tangent_projection(g, a0, b0)?.scale(ge);
    Ok(product_change.add(&projected)?.frobenius_sq().sqrt())
}

/// Splits the total gradient discrepancy into its rank-limited and
/// mask-mismatch parts and checks the non-expansiveness bound
/// `reducible <= upper_bound` (up to [`NON_EXPANSIVE_SLACK`]).
pub fn decompose<S: Scalar>(
    g: &Tensor2<S>,
    grad_delta: &Tensor2<S>,
    a0: &Tensor2<S>,
    b0: &Tensor2<S>,
    step: usize,
) -> Result<InfoLossReport> {
    if g.shape() != grad_delta.shape() {
        return Err(Error::dims("decompose", g.shape(), grad_delta.shape()));
    }
    let pg = tangent_projection(g, a0, b0)?;
    let pgd = tangent_projection(grad_delta, a0, b0)?;

    let total = g.sub(&pgd)?.frobenius_sq().to_f64().unwrap();
    let unavoidable = g.sub(&pg)?.frobenius_sq().to_f64().unwrap();
    let reducible = pg.sub(&pgd)?.frobenius_sq().to_f64().unwrap();
    let upper_bound = g.sub(grad_delta)?.frobenius_sq().to_f64().unwrap();

    let slack = NON_EXPANSIVE_SLACK * upper_bound.max(1.0);
    if reducible > upper_bound + slack {
        return Err(Error::Internal(format!(
            "non-expansiveness violated at step {step}: reducible {reducible:.6e} > upper bound {upper_bound:.6e} (margin {:.3e})",
            reducible - upper_bound
        )));
    }

    Ok(InfoLossReport {
        step,
        total,
        unavoidable,
        reducible,
        upper_bound,
    })
}

/// Orthonormal basis of the column space (MGS with re-orthogonalization);
/// near-dependent columns are dropped. Returns `None` for a zero matrix.
fn column_basis<S: Scalar>(m: &Tensor2<S>) -> Option<Tensor2<S>> {
    let scale = m.max_abs();
    if scale == S::zero() {
        return None;
    }
    let tol = S::from_f64_exact(1e-12) * scale;
    let mut basis: Vec<Vec<S>> = Vec::new();
    for j in 0..m.cols() {
        let mut v: Vec<S> = (0..m.rows()).map(|i| m.get(i, j)).collect();
        for _ in 0..2 {
            for q in &basis {
                let dot: S = q.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
                for (vi, &qi) in v.iter_mut().zip(q.iter()) {
                    *vi -= dot * qi;
                }
            }
        }
        let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm > tol {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    if basis.is_empty() {
        return None;
    }
    Some(Tensor2::from_fn(m.rows(), basis.len(), |i, c| basis[c][i]))
}

/// Orthogonal projection of `g` onto the tangent space spanned by the
/// column space of `A0` and the row space of `B0`:
///
/// ```text
/// P(g) = P_A g + g P_B - P_A g P_B
/// ```
///
/// with `P_A`, `P_B` the orthogonal projectors onto those subspaces. This
/// is a genuine orthogonal projector for any factor scaling, so it is
/// non-expansive unconditionally; with orthonormal `A0` and `B0 = 0` it
/// coincides with [`tangent_projection`].
pub fn orthogonal_tangent_projection<S: Scalar>(
    g: &Tensor2<S>,
    a0: &Tensor2<S>,
    b0: &Tensor2<S>,
) -> Result<Tensor2<S>> {
    check_shapes(g, a0, b0)?;
    let qa = column_basis(a0);
    let qb = column_basis(&b0.transpose());

    let pa_g = match &qa {
        Some(q) => q.matmul(&q.transpose().matmul(g)?)?,
        None => Tensor2::zeros(g.rows(), g.cols()),
    };
    let g_pb = match &qb {
        Some(q) => g.matmul(q)?.matmul(&q.transpose())?,
        None => Tensor2::zeros(g.rows(), g.cols()),
    };
    let pa_g_pb = match (&qa, &qb) {
        (Some(_), Some(q)) => pa_g.matmul(q)?.matmul(&q.transpose())?,
        _ => Tensor2::zeros(g.rows(), g.cols()),
    };
    pa_g.add(&g_pb)?.sub(&pa_g_pb)
}

/// [`decompose`] with the projection taken by
/// [`orthogonal_tangent_projection`]. Because that map is a true
/// orthogonal projector, the non-expansiveness bound and the Pythagorean
/// split hold for arbitrary factor scalings; this is the form the training
/// probe logs.
pub fn decompose_orthogonal<S: Scalar>(
    g: &Tensor2<S>,
    grad_delta: &Tensor2<S>,
    a0: &Tensor2<S>,
    b0: &Tensor2<S>,
    step: usize,
) -> Result<InfoLossReport> {
    if g.shape() != grad_delta.shape() {
        return Err(Error::dims("decompose", g.shape(), grad_delta.shape()));
    }
    let pg = orthogonal_tangent_projection(g, a0, b0)?;
    let pgd = orthogonal_tangent_projection(grad_delta, a0, b0)?;

    let total = g.sub(&pgd)?.frobenius_sq().to_f64().unwrap();
    let unavoidable = g.sub(&pg)?.frobenius_sq().to_f64().unwrap();
    let reducible = pg.sub(&pgd)?.frobenius_sq().to_f64().unwrap();
    let upper_bound = g.sub(grad_delta)?.frobenius_sq().to_f64().unwrap();

    let slack = NON_EXPANSIVE_SLACK * upper_bound.max(1.0);
    if reducible > upper_bound + slack {
        return Err(Error::Internal(format!(
            "non-expansiveness violated at step {step}: reducible {reducible:.6e} > upper bound {upper_bound:.6e} (margin {:.3e})",
            reducible - upper_bound
        )));
    }

    Ok(InfoLossReport {
        step,
        total,
        unavoidable,
        reducible,
        upper_bound,
    })
}

/// Full-gradient / adapter-gradient pair for one layer, both taken under
/// the reference model's backpropagated error.
///
/// Two backward passes:
/// 1. the reference model's loss is differentiated end to end, yielding the
///    layer's base-weight gradient `g`, the layer input, and the error
///    signal flowing into the layer output;
/// 2. the adapted layer is rebuilt on the same input with its dense
///    effective weight, and the linearized loss `<error, sigma(z)>` is
///    differentiated through it, yielding `grad_delta`.
///
/// Holding the error signal fixed makes mask alignment exact: if the two
/// weight matrices activate identically on the batch, the pair is equal
/// down to the bit.
pub fn layer_grad_pair<S: Scalar>(
    model_base: &MlpModel<S>,
    model_adapted: &MlpModel<S>,
    layer: &str,
    inputs: &Tensor2<S>,
    labels: &[usize],
) -> Result<(Tensor2<S>, Tensor2<S>)> {
    if inputs.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if model_base.layer_names() != model_adapted.layer_names() {
        return Err(Error::Config(
            "model architectures differ (layer names do not match)".into(),
        ));
    }
    for (lb, la) in model_base
        .layers()
        .iter()
        .zip(model_adapted.layers().iter())
    {
        if !lb.w0().bits_eq(la.w0()) {
            return Err(Error::Config(format!(
                "base weights differ at layer '{}'",
                lb.name()
            )));
        }
    }
    let base_layer = model_base.layer(layer)?;
    let activation = base_layer.activation();

    // Pass 1: full backward through the reference model.
    let mut g1: Graph<S> = Graph::new();
    let nx = g1.constant(inputs.clone());
    let opts = ForwardOptions {
        train_base: true,
        ..ForwardOptions::inference()
    };
    let fwd = model_base.forward(&mut g1, nx, &opts)?;
    let loss = g1.softmax_cross_entropy(fwd.logits, labels)?;
    g1.backward(loss)?;
    let staged = fwd
        .layer(layer)
        .ok_or_else(|| Error::Config(format!("no layer named '{layer}'")))?;
    // grad wrt W0 equals grad wrt the effective weight: z depends on their sum
    let g_full = g1
        .grad(staged.w0)
        .ok_or_else(|| Error::Internal("missing base-weight gradient".into()))?;
    let layer_input = g1.value(staged.x).clone();
    let error_signal = g1
        .grad(staged.h)
        .ok_or_else(|| Error::Internal("missing layer-output gradient".into()))?;

    // Pass 2: adapted layer under the frozen error signal.
    let adapted_layer = model_adapted.layer(layer)?;
    let w_eff = adapted_layer.merge();
    let mut g2: Graph<S> = Graph::new();
    let nx2 = g2.constant(layer_input);
    let nw = g2.param(w_eff);
    let nwt = g2.transpose(nw);
    let z = g2.matmul(nx2, nwt)?;
    let h = if activation == Activation::Identity {
        z
    } else {
        g2.activation(z, activation)
    };
    let err_node = g2.constant(error_signal);
    let weighted = g2.hadamard(h, err_node)?;
    let surrogate = g2.sum_all(weighted);
    g2.backward(surrogate)?;
    let g_adapter = g2
        .grad(nw)
        .ok_or_else(|| Error::Internal("missing effective-weight gradient".into()))?;

    Ok((g_full, g_adapter))
}

/// Difference `g - grad_delta` for one layer; see [`layer_grad_pair`].
/// Zero exactly when the base and adapted weights produce identical
/// activation masks on the batch.
pub fn grad_diff_nonlinear<S: Scalar>(
    model_base: &MlpModel<S>,
    model_adapted: &MlpModel<S>,
    layer: &str,
    inputs: &Tensor2<S>,
    labels: &[usize],
) -> Result<Tensor2<S>> {
    let (g, gd) = layer_grad_pair(model_base, model_adapted, layer, inputs, labels)?;
    g.sub(&gd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = Tensor2<f64>;

    fn randt(rng: &mut ChaCha8Rng, r: usize, c: usize) -> T {
        T::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_factors_project_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = randt(&mut rng, 6, 5);
        let p = tangent_projection(&g, &T::zeros(6, 2), &T::zeros(2, 5)).unwrap();
        assert_eq!(p.frobenius_sq(), 0.0);
        assert!(
            (info_loss(&g, &T::zeros(6, 2), &T::zeros(2, 5)).unwrap() - g.frobenius_sq()).abs()
                < 1e-15
        );
    }

    #[test]
    fn column_space_gradient_is_a_fixed_point() {
        // orthonormal A0 (coordinate columns), B0 = 0, g = A0 C
        let a0 = T::from_fn(5, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let b0 = T::zeros(2, 4);
        let c = T::from_fn(2, 4, |i, j| (i + j) as f64 - 1.5);
        let g = a0.matmul(&c).unwrap();
        let p = tangent_projection(&g, &a0, &b0).unwrap();
        assert!(p.max_abs_diff(&g).unwrap() < 1e-15);
        assert!(info_loss(&g, &a0, &b0).unwrap() < 1e-20);
    }

    #[test]
    fn orthogonal_gradient_is_fully_discarded() {
        // g supported outside col(A0)
        let a0 = T::from_fn(5, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let b0 = T::zeros(2, 4);
        let g = T::from_fn(5, 4, |i, j| if i >= 2 { (i * 4 + j) as f64 } else { 0.0 });
        let loss = info_loss(&g, &a0, &b0).unwrap();
        assert!((loss - g.frobenius_sq()).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_independent_evaluation_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = randt(&mut rng, 8, 6);
        let a0 = randt(&mut rng, 8, 3);
        let b0 = randt(&mut rng, 3, 6);
        let p = tangent_projection(&g, &a0, &b0).unwrap();
        // oracle with the opposite association: g (B0^T B0) + (A0 A0^T) g
        let btb = b0.transpose().matmul(&b0).unwrap();
        let aat = a0.matmul(&a0.transpose()).unwrap();
        let oracle = g
            .matmul(&btb)
            .unwrap()
            .add(&aat.matmul(&g).unwrap())
            .unwrap();
        assert!(p.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn update_residual_is_zero_at_gamma_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = randt(&mut rng, 6, 5);
        let a0 = randt(&mut rng, 6, 2);
        let b0 = randt(&mut rng, 2, 5);
        let r = first_order_update_check(&a0, &b0, &g, 0.0, 2.0).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn update_residual_matches_quadratic_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let g = randt(&mut rng, 7, 5);
            let a0 = randt(&mut rng, 7, 3);
            let b0 = randt(&mut rng, 3, 5);
            let (gamma, eta) = (0.17, 1.6);
            let r = first_order_update_check(&a0, &b0, &g, gamma, eta).unwrap();
            // expand the product: the only term beyond first order is
            // (gamma eta)^2 g B0^T A0^T g
            let quad = g
                .matmul(&b0.transpose())
                .unwrap()
                .matmul(&a0.transpose())
                .unwrap()
                .matmul(&g)
                .unwrap();
            let expect = (gamma * eta).powi(2) * quad.frobenius_sq().sqrt();
            assert!(
                (r - expect).abs() < 1e-12,
                "residual {r} vs closed form {expect}"
            );
        }
    }

    #[test]
    fn decompose_with_equal_gradients_has_no_reducible_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = randt(&mut rng, 6, 4);
        let a0 = randt(&mut rng, 6, 2);
        let b0 = randt(&mut rng, 2, 4);
        let rep = decompose(&g, &g, &a0, &b0, 0).unwrap();
        assert_eq!(rep.reducible, 0.0);
        assert_eq!(rep.upper_bound, 0.0);
        assert!((rep.total - rep.unavoidable).abs() < 1e-15);
    }

    #[test]
    fn decompose_of_zero_gradient_is_all_zero() {
        let rep = decompose(
            &T::zeros(5, 4),
            &T::zeros(5, 4),
            &T::zeros(5, 2),
            &T::zeros(2, 4),
            3,
        )
        .unwrap();
        assert_eq!(
            (rep.total, rep.unavoidable, rep.reducible, rep.upper_bound),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(rep.step, 3);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = T::zeros(5, 4);
        let err = tangent_projection(&g, &T::zeros(6, 2), &T::zeros(2, 4));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
