//! Per-layer gradient-times-activation saliency.
//!
//! The backward pass is written by hand for the fixed block structure:
//! pre-norm layer norms, masked softmax attention, the MLP and the residual
//! sums. Attention blocks and sublayer zeroings recorded in the trace's plan
//! are honoured; representation patches are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{apply_plan_to_mask, causal_mask, InterventionPlan, SublayerKind};
use crate::model::engine::{activate_derivative, layer_norm, layer_norm_rows};
use crate::model::{ForwardTrace, HeadKind, Layout, Norm, Transformer};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layer: usize,
    pub target_token: u32,
    /// One non-negative score per position, summing to one.
    pub scores: Vec<f64>,
}

/// Gradient of `y = γ ⊙ x̂ + β` with respect to `x`, given `∂/∂y`.
pub fn layer_norm_backward<T: Scalar>(x: &[T], norm: &Norm<T>, eps: T, grad_out: &[T]) -> Vec<T> {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    let rstd = T::one() / (var + eps).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * rstd).collect();
    let gxhat: Vec<T> = grad_out.iter().zip(&norm.scale).map(|(&g, &s)| g * s).collect();
    let m1 = gxhat.iter().fold(T::zero(), |s, &v| s + v) / n;
    let m2 = dot(&gxhat, &xhat) / n;
    gxhat.iter().zip(&xhat).map(|(&g, &xh)| rstd * (g - m1 - xh * m2)).collect()
}

/// Gradient of the target logit `δ(x_N^L)_c` with respect to every `x_i^layer`.
pub fn logit_gradient<T: Scalar>(
    model: &Transformer<T>,
    trace: &ForwardTrace<T>,
    target_token: u32,
    layer: usize,
) -> Result<Matrix<T>> {
    let plan = &trace.plan;
    if plan.has_patches() {
        return Err(Error::PatchedTrace);
    }
    let l_total = model.config.n_layers;
    if layer > l_total {
        return Err(Error::PlanOutOfRange(format!("layer {layer} not in 0..={l_total}")));
    }
    if target_token as usize >= model.config.vocab_size {
        return Err(Error::PlanOutOfRange(format!("target token {target_token} outside vocabulary")));
    }
    let n = trace.n_tokens();
    let eps = T::lit(model.config.norm_epsilon);
    let head_row = match (&model.config.head_kind, &model.weights.head) {
        (HeadKind::LinearHead, Some(h)) => h.weight.row(target_token as usize),
        _ => model.weights.embedding.row(target_token as usize),
    };
    let mut grad = Matrix::zeros(n, model.config.d_model);
    grad.set_row(
        n - 1,
        &layer_norm_backward(trace.final_hidden(), &model.weights.final_norm, eps, head_row),
    );
    let base_mask = causal_mask::<T>(n);
    for l in (layer + 1..=l_total).rev() {
        grad = layer_backward(model, l, trace.residual(l - 1), plan, &base_mask, &grad)?;
    }
    Ok(grad)
}

fn layer_backward<T: Scalar>(
    model: &Transformer<T>,
    layer: usize,
    input: &Matrix<T>,
    plan: &InterventionPlan,
    base_mask: &Matrix<T>,
    grad_out: &Matrix<T>,
) -> Result<Matrix<T>> {
    let cfg = &model.config;
    let w = &model.weights.layers[layer - 1];
    let eps = T::lit(cfg.norm_epsilon);
    let n = input.rows();
    let hd = cfg.head_dim();
    let scale = T::one() / T::lit(hd as f64).sqrt();

    let normed = layer_norm_rows(input, &w.attn_norm, eps);
    let mask = apply_plan_to_mask(base_mask, plan, layer);
    let cache = model.attention_cached(layer, &normed, &normed, &mask)?;
    let mut update = cache.output.update.clone();
    for i in 0..n {
        if plan.is_zeroed(SublayerKind::Mhsa, layer, i) {
            update.row_mut(i).fill(T::zero());
        }
    }

    let mut grad_x = grad_out.clone();
    let mut grad_a = grad_out.clone();

    // MLP branch
    for i in 0..n {
        if plan.is_zeroed(SublayerKind::Mlp, layer, i) {
            continue;
        }
        let residual_in: Vec<T> = match cfg.layout {
            Layout::Serial => input.row(i).iter().zip(update.row(i)).map(|(&x, &a)| x + a).collect(),
            Layout::Parallel => input.row(i).to_vec(),
        };
        let h = layer_norm(&residual_in, &w.mlp_norm, eps);
        let pre: Vec<T> = w.w_in.matvec(&h).into_iter().zip(&w.b_in).map(|(p, &b)| p + b).collect();
        let grad_act = w.w_out.vecmat(grad_out.row(i));
        let grad_pre: Vec<T> = grad_act
            .iter()
            .zip(&pre)
            .map(|(&g, &p)| g * activate_derivative(cfg.activation, p))
            .collect();
        let grad_h = w.w_in.vecmat(&grad_pre);
        let grad_in = layer_norm_backward(&residual_in, &w.mlp_norm, eps, &grad_h);
        for (k, &g) in grad_in.iter().enumerate() {
            grad_x.row_mut(i)[k] += g;
            if cfg.layout == Layout::Serial {
                grad_a.row_mut(i)[k] += g;
            }
        }
    }

    // Attention branch
    for i in 0..n {
        if plan.is_zeroed(SublayerKind::Mhsa, layer, i) {
            grad_a.row_mut(i).fill(T::zero());
        }
    }
    let grad_z = grad_a.matmul_t(&w.w_o);
    let d = cfg.d_model;
    let mut grad_q = Matrix::zeros(n, d);
    let mut grad_k = Matrix::zeros(n, d);
    let mut grad_v = Matrix::zeros(n, d);
    for (j, a) in cache.output.weights.iter().enumerate() {
        let cols = j * hd..(j + 1) * hd;
        for r in 0..n {
            let gz = &grad_z.row(r)[cols.clone()];
            let grad_weights: Vec<T> = (0..=r).map(|c| dot(gz, &cache.v.row(c)[cols.clone()])).collect();
            let weighted = (0..=r).fold(T::zero(), |s, c| s + a.get(r, c) * grad_weights[c]);
            for c in 0..=r {
                let p = a.get(r, c);
                if p == T::zero() {
                    continue;
                }
                for (o, &g) in grad_v.row_mut(c)[cols.clone()].iter_mut().zip(gz) {
                    *o += p * g;
                }
                let grad_score = p * (grad_weights[c] - weighted) * scale;
                let k_c: Vec<T> = cache.k.row(c)[cols.clone()].to_vec();
                let q_r: Vec<T> = cache.q.row(r)[cols.clone()].to_vec();
                for (o, &kv) in grad_q.row_mut(r)[cols.clone()].iter_mut().zip(&k_c) {
                    *o += grad_score * kv;
                }
                for (o, &qv) in grad_k.row_mut(c)[cols.clone()].iter_mut().zip(&q_r) {
                    *o += grad_score * qv;
                }
            }
        }
    }
    let mut grad_normed = grad_q.matmul_t(&w.w_q);
    grad_normed.add_assign(&grad_k.matmul_t(&w.w_k));
    grad_normed.add_assign(&grad_v.matmul_t(&w.w_v));
    for i in 0..n {
        let g = layer_norm_backward(input.row(i), &w.attn_norm, eps, grad_normed.row(i));
        for (o, v) in grad_x.row_mut(i).iter_mut().zip(g) {
            *o += v;
        }
    }
    Ok(grad_x)
}

/// `‖∇_{x_i} f_c ⊙ x_i‖₂` per position, normalized to sum to one.
pub fn gradient_times_activation<T: Scalar>(
    model: &Transformer<T>,
    trace: &ForwardTrace<T>,
    target_token: u32,
    layer: usize,
) -> Result<SaliencyMap> {
    let grad = logit_gradient(model, trace, target_token, layer)?;
    let x = trace.residual(layer);
    let raw: Vec<f64> = (0..x.rows())
        .map(|i| {
            grad.row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&g, &v)| {
                    let p = (g * v).as_f64();
                    p * p
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(SaliencyMap { layer, target_token, scores: normalize_scores(&raw)? })
}

/// Scales non-negative scores to sum to one.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateSaliency);
    }
    Ok(raw.iter().map(|&s| s / total).collect())
}
