//! Forward pass with trace capture.

use crate::error::{Error, Result};
use crate::interventions::{apply_plan_to_mask, causal_mask, InterventionPlan, SublayerKind};
use crate::model::config::{Activation, HeadKind, Layout, ModelConfig};
use crate::model::trace::{ForwardTrace, TraceGauges};
use crate::model::weights::{LayerWeights, Norm, WeightStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

/// Row softmax where `-inf` entries are masked.
///
/// Masked entries come out as exactly zero. A row with every entry masked is
/// an error: it means a knockout removed every edge of some query.
pub fn softmax_row<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| *v != T::neg_infinity())
        .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
        .ok_or(Error::FullyMaskedRow { row: 0 })?;
    let mut out: Vec<T> = logits
        .iter()
        .map(|&v| if v == T::neg_infinity() { T::zero() } else { (v - max).exp() })
        .collect();
    let sum = out.iter().fold(T::zero(), |s, &v| s + v);
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

pub fn layer_norm<T: Scalar>(x: &[T], norm: &Norm<T>, eps: T) -> Vec<T> {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    let rstd = T::one() / (var + eps).sqrt();
    x.iter()
        .zip(norm.scale.iter().zip(&norm.bias))
        .map(|(&v, (&g, &b))| (v - mean) * rstd * g + b)
        .collect()
}

pub fn layer_norm_rows<T: Scalar>(x: &Matrix<T>, norm: &Norm<T>, eps: T) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        out.set_row(r, &layer_norm(x.row(r), norm, eps));
    }
    out
}

const GELU_COEFF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

pub fn activate<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => {
            let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEFF) * x * x * x);
            T::lit(0.5) * x * (T::one() + inner.tanh())
        }
    }
}

pub fn activate_derivative<T: Scalar>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let c = T::lit(GELU_SCALE);
            let k = T::lit(GELU_COEFF);
            let inner = c * (x + k * x * x * x);
            let t = inner.tanh();
            let half = T::lit(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
        }
    }
}

/// Output of one MHSA sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// `N × d`, including the output bias.
    pub update: Matrix<T>,
    /// Per-head `N × N` attention weights.
    pub weights: Vec<Matrix<T>>,
    /// Per-head `N × d` contributions; their sum plus the output bias is `update`.
    pub head_contributions: Vec<Matrix<T>>,
}

/// Intermediate values of one MHSA sublayer, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct AttentionCache<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub output: AttentionOutput<T>,
}

/// A model: configuration plus immutable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub weights: WeightStore<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, weights: WeightStore<T>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer { config: self.config.clone(), weights: self.weights.cast() }
    }

    #[inline]
    pub(crate) fn eps(&self) -> T {
        T::lit(self.config.norm_epsilon)
    }

    pub(crate) fn layer(&self, layer: usize) -> &LayerWeights<T> {
        &self.weights.layers[layer - 1]
    }

    /// Token plus position embeddings, `N × d`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix<T>> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyQuery);
        }
        if n > self.config.max_positions {
            return Err(Error::Shape(format!(
                "{n} tokens exceed max_positions {}",
                self.config.max_positions
            )));
        }
        let d = self.config.d_model;
        let mut x = Matrix::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Tokenizer(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
            }
            let e = self.weights.embedding.row(t as usize);
            let p = self.weights.position_embedding.row(i);
            for (o, (&a, &b)) in x.row_mut(i).iter_mut().zip(e.iter().zip(p)) {
                *o = a + b;
            }
        }
        Ok(x)
    }

    /// MHSA on already-normalized inputs.
    ///
    /// `queries` supplies the query rows and `keys_values` the key/value rows;
    /// they differ only when positions are patched. `mask` is additive with
    /// `-inf` for blocked entries and must keep every future position blocked.
    pub fn attention_sublayer(
        &self,
        layer: usize,
        queries: &Matrix<T>,
        keys_values: &Matrix<T>,
        mask: &Matrix<T>,
    ) -> Result<AttentionOutput<T>> {
        Ok(self.attention_cached(layer, queries, keys_values, mask)?.output)
    }

    pub(crate) fn attention_cached(
        &self,
        layer: usize,
        queries: &Matrix<T>,
        keys_values: &Matrix<T>,
        mask: &Matrix<T>,
    ) -> Result<AttentionCache<T>> {
        let n = queries.rows();
        if mask.shape() != (n, n) || keys_values.shape() != queries.shape() {
            return Err(Error::Shape(format!("attention inputs disagree at layer {layer}")));
        }
        for r in 0..n {
            for c in r + 1..n {
                if mask.get(r, c) != T::neg_infinity() {
                    return Err(Error::InvalidPlan(format!("mask exposes future position {c} to {r}")));
                }
            }
        }
        let w = self.layer(layer);
        let h = self.config.n_heads;
        let hd = self.config.head_dim();
        let d = self.config.d_model;
        let scale = T::one() / T::lit(hd as f64).sqrt();

        let mut q = queries.matmul(&w.w_q);
        q.add_row_vector(&w.b_q);
        let mut k = keys_values.matmul(&w.w_k);
        k.add_row_vector(&w.b_k);
        let mut v = keys_values.matmul(&w.w_v);
        v.add_row_vector(&w.b_v);

        let mut weights = Vec::with_capacity(h);
        let mut contributions = Vec::with_capacity(h);
        let mut update = Matrix::zeros(n, d);
        for j in 0..h {
            let cols = j * hd..(j + 1) * hd;
            let mut a = Matrix::zeros(n, n);
            for r in 0..n {
                let qr = &q.row(r)[cols.clone()];
                let logits: Vec<T> = (0..n)
                    .map(|c| {
                        let m = mask.get(r, c);
                        if m == T::neg_infinity() {
                            m
                        } else {
                            dot(qr, &k.row(c)[cols.clone()]) * scale + m
                        }
                    })
                    .collect();
                let probs = softmax_row(&logits).map_err(|_| Error::FullyMaskedRow { row: r })?;
                a.set_row(r, &probs);
            }
            let mut zj = Matrix::zeros(n, hd);
            for r in 0..n {
                for c in 0..=r {
                    let p = a.get(r, c);
                    if p == T::zero() {
                        continue;
                    }
                    let vc = &v.row(c)[cols.clone()];
                    for (o, &x) in zj.row_mut(r).iter_mut().zip(vc) {
                        *o += p * x;
                    }
                }
            }
            let contrib = zj.matmul(&w.w_o_head(j, hd));
            update.add_assign(&contrib);
            weights.push(a);
            contributions.push(contrib);
        }
        update.add_row_vector(&w.b_o);
        Ok(AttentionCache {
            q,
            k,
            v,
            output: AttentionOutput { update, weights, head_contributions: contributions },
        })
    }

    /// Inner activations `σ(W_I · input + b_I)` for a normalized MLP input.
    pub fn mlp_coefficients(&self, layer: usize, input: &[T]) -> Vec<T> {
        let w = self.layer(layer);
        w.w_in
            .matvec(input)
            .into_iter()
            .zip(&w.b_in)
            .map(|(p, &b)| activate(self.config.activation, p + b))
            .collect()
    }

    /// `W_F σ(W_I · input + b_I) + b_F` for a normalized MLP input.
    pub fn mlp_sublayer(&self, layer: usize, input: &[T]) -> Vec<T> {
        let w = self.layer(layer);
        let act = self.mlp_coefficients(layer, input);
        w.w_out.matvec(&act).into_iter().zip(&w.b_out).map(|(m, &b)| m + b).collect()
    }

    /// Prediction head `δ`: final norm followed by the unembedding.
    pub fn logits(&self, hidden: &[T]) -> Vec<T> {
        let h = layer_norm(hidden, &self.weights.final_norm, self.eps());
        self.unembed(&h)
    }

    /// Unembedding without the final norm.
    pub fn unembed(&self, h: &[T]) -> Vec<T> {
        match (&self.config.head_kind, &self.weights.head) {
            (HeadKind::LinearHead, Some(head)) => {
                head.weight.matvec(h).into_iter().zip(&head.bias).map(|(l, &u)| l + u).collect()
            }
            _ => self.weights.embedding.matvec(h),
        }
    }

    /// Projection by the embedding matrix alone, `E · v`.
    pub fn embedding_projection(&self, v: &[T]) -> Vec<T> {
        self.weights.embedding.matvec(v)
    }

    pub fn forward(&self, tokens: &[u32], plan: &InterventionPlan, gauges: TraceGauges) -> Result<ForwardTrace<T>> {
        plan.validate(&self.config, tokens.len())?;
        let x0 = self.embed(tokens)?;
        let n = tokens.len();
        let l_total = self.config.n_layers;
        let base_mask = causal_mask::<T>(n);

        let mut trace = ForwardTrace {
            tokens: tokens.to_vec(),
            plan: plan.clone(),
            gauges,
            residuals: Vec::with_capacity(l_total + 1),
            attn_updates: Vec::with_capacity(l_total),
            mlp_updates: Vec::with_capacity(l_total),
            attention_weights: Vec::new(),
            head_contributions: Vec::new(),
            mlp_inputs: Vec::new(),
            final_distribution: Vec::new(),
        };
        trace.residuals.push(x0);
        for layer in 1..=l_total {
            let step = self.layer_step(layer, &trace.residuals, plan, &base_mask)?;
            trace.residuals.push(step.output);
            trace.attn_updates.push(step.attention.output.update);
            trace.mlp_updates.push(step.mlp_update);
            if gauges.attention_weights {
                trace.attention_weights.push(step.attention.output.weights);
            }
            if gauges.head_contributions {
                trace.head_contributions.push(step.attention.output.head_contributions);
            }
            if gauges.mlp_inputs {
                trace.mlp_inputs.push(step.mlp_input);
            }
        }
        trace.final_distribution = softmax_row(&self.logits(trace.final_hidden()))?;
        Ok(trace)
    }

    /// Runs layers `start_layer + 1 ..= L` from a given residual state and
    /// returns the last-position logits. Patches are not supported here.
    pub fn logits_from_layer(&self, start_layer: usize, residual: &Matrix<T>, plan: &InterventionPlan) -> Result<Vec<T>> {
        if plan.has_patches() {
            return Err(Error::PatchedTrace);
        }
        let n = residual.rows();
        plan.validate(&self.config, n)?;
        let base_mask = causal_mask::<T>(n);
        let mut state = residual.clone();
        for layer in start_layer + 1..=self.config.n_layers {
            state = self.layer_step_from(layer, &state, &[], plan, &base_mask)?.output;
        }
        Ok(self.logits(state.row(n - 1)))
    }

    pub(crate) fn layer_step(
        &self,
        layer: usize,
        residuals: &[Matrix<T>],
        plan: &InterventionPlan,
        base_mask: &Matrix<T>,
    ) -> Result<LayerStep<T>> {
        self.layer_step_from(layer, &residuals[layer - 1], residuals, plan, base_mask)
    }

    /// One transformer block. `history` is only consulted for patched positions.
    pub(crate) fn layer_step_from(
        &self,
        layer: usize,
        input: &Matrix<T>,
        history: &[Matrix<T>],
        plan: &InterventionPlan,
        base_mask: &Matrix<T>,
    ) -> Result<LayerStep<T>> {
        let w = self.layer(layer);
        let eps = self.eps();
        let n = input.rows();
        let normed = layer_norm_rows(input, &w.attn_norm, eps);
        let mut kv_input = None;
        for i in 0..n {
            if let Some(src) = plan.patch_source(layer, i) {
                let kv = kv_input.get_or_insert_with(|| normed.clone());
                kv.set_row(i, &layer_norm(history[src].row(i), &w.attn_norm, eps));
            }
        }
        let mask = apply_plan_to_mask(base_mask, plan, layer);
        let mut attention = self.attention_cached(layer, &normed, kv_input.as_ref().unwrap_or(&normed), &mask)?;
        for i in 0..n {
            if plan.is_zeroed(SublayerKind::Mhsa, layer, i) {
                attention.output.update.row_mut(i).fill(T::zero());
                for c in &mut attention.output.head_contributions {
                    c.row_mut(i).fill(T::zero());
                }
            }
        }
        let a = &attention.output.update;

        let mut mlp_input = Matrix::zeros(n, self.config.d_model);
        let mut mlp_update = Matrix::zeros(n, self.config.d_model);
        let mut output = Matrix::zeros(n, self.config.d_model);
        for i in 0..n {
            let x = input.row(i);
            let pre: Vec<T> = match self.config.layout {
                Layout::Serial => x.iter().zip(a.row(i)).map(|(&x, &a)| x + a).collect(),
                Layout::Parallel => x.to_vec(),
            };
            let h = layer_norm(&pre, &w.mlp_norm, eps);
            let m = if plan.is_zeroed(SublayerKind::Mlp, layer, i) {
                vec![T::zero(); self.config.d_model]
            } else {
                self.mlp_sublayer(layer, &h)
            };
            for (k, o) in output.row_mut(i).iter_mut().enumerate() {
                *o = (x[k] + a.get(i, k)) + m[k];
            }
            mlp_input.set_row(i, &h);
            mlp_update.set_row(i, &m);
        }
        Ok(LayerStep { attention, mlp_input, mlp_update, output })
    }

    /// Softmax over `δ(x_i^L)`.
    pub fn predict_distribution(&self, trace: &ForwardTrace<T>, position: usize) -> Result<Vec<T>> {
        if position >= trace.n_tokens() {
            return Err(Error::PlanOutOfRange(format!("position {position} outside {} tokens", trace.n_tokens())));
        }
        softmax_row(&self.logits(trace.residual(trace.n_layers()).row(position)))
    }
}

pub(crate) struct LayerStep<T> {
    pub attention: AttentionCache<T>,
    pub mlp_input: Matrix<T>,
    pub mlp_update: Matrix<T>,
    pub output: Matrix<T>,
}
