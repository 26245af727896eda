use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::{HeadKind, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Layer-norm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub scale: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn identity(d: usize) -> Self {
        Self { scale: vec![T::one(); d], bias: vec![T::zero(); d] }
    }
}

/// Parameters of one transformer block.
///
/// Attention projections act on row vectors (`X · W_Q`); the MLP matrices
/// follow the column convention (`W_I · h`, `W_F · act`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Norm<T>,
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub b_q: Vec<T>,
    pub b_k: Vec<T>,
    pub b_v: Vec<T>,
    pub b_o: Vec<T>,
    pub mlp_norm: Norm<T>,
    /// `d_inner × d_model`
    pub w_in: Matrix<T>,
    pub b_in: Vec<T>,
    /// `d_model × d_inner`
    pub w_out: Matrix<T>,
    pub b_out: Vec<T>,
}

/// Linear prediction head `W x + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T> {
    /// `vocab_size × d_model`
    pub embedding: Matrix<T>,
    /// `max_positions × d_model`
    pub position_embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Norm<T>,
    pub head: Option<LinearHead<T>>,
}

/// A named tensor as stored in a weight container.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> LayerWeights<T> {
    /// Query projection columns owned by head `j`.
    pub fn w_q_head(&self, j: usize, head_dim: usize) -> Matrix<T> {
        self.w_q.column_block(j * head_dim, head_dim)
    }

    pub fn w_k_head(&self, j: usize, head_dim: usize) -> Matrix<T> {
        self.w_k.column_block(j * head_dim, head_dim)
    }

    pub fn w_v_head(&self, j: usize, head_dim: usize) -> Matrix<T> {
        self.w_v.column_block(j * head_dim, head_dim)
    }

    /// Output projection rows owned by head `j`.
    pub fn w_o_head(&self, j: usize, head_dim: usize) -> Matrix<T> {
        self.w_o.row_block(j * head_dim, head_dim)
    }

    fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let di = config.d_inner;
        Self {
            attn_norm: Norm::identity(d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            b_q: vec![T::zero(); d],
            b_k: vec![T::zero(); d],
            b_v: vec![T::zero(); d],
            b_o: vec![T::zero(); d],
            mlp_norm: Norm::identity(d),
            w_in: Matrix::zeros(di, d),
            b_in: vec![T::zero(); di],
            w_out: Matrix::zeros(d, di),
            b_out: vec![T::zero(); d],
        }
    }
}

impl<T: Scalar> WeightStore<T> {
    /// All-zero weights with identity norms; a starting point for hand-built models.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.max_positions, d),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
            final_norm: Norm::identity(d),
            head: match config.head_kind {
                HeadKind::TiedEmbedding => None,
                HeadKind::LinearHead => Some(LinearHead {
                    weight: Matrix::zeros(config.vocab_size, d),
                    bias: vec![T::zero(); config.vocab_size],
                }),
            },
        }
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        let v = |x: &[T]| crate::tensor::cast_vec::<T, U>(x);
        let norm = |n: &Norm<T>| Norm { scale: v(&n.scale), bias: v(&n.bias) };
        WeightStore {
            embedding: self.embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: norm(&l.attn_norm),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    b_q: v(&l.b_q),
                    b_k: v(&l.b_k),
                    b_v: v(&l.b_v),
                    b_o: v(&l.b_o),
                    mlp_norm: norm(&l.mlp_norm),
                    w_in: l.w_in.cast(),
                    b_in: v(&l.b_in),
                    w_out: l.w_out.cast(),
                    b_out: v(&l.b_out),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            head: self.head.as_ref().map(|h| LinearHead { weight: h.weight.cast(), bias: v(&h.bias) }),
        }
    }

    /// Tensors in canonical container order.
    pub fn to_tensors(&self) -> Vec<NamedTensor<T>> {
        let vec_t = |name: String, v: &[T]| NamedTensor { name, shape: vec![v.len()], data: v.to_vec() };
        let mat_t = |name: String, m: &Matrix<T>| NamedTensor {
            name,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        };
        let mut tensors = vec![
            mat_t("embedding".into(), &self.embedding),
            mat_t("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            tensors.push(vec_t(p("attn_norm.scale"), &l.attn_norm.scale));
            tensors.push(vec_t(p("attn_norm.bias"), &l.attn_norm.bias));
            tensors.push(mat_t(p("w_q"), &l.w_q));
            tensors.push(mat_t(p("w_k"), &l.w_k));
            tensors.push(mat_t(p("w_v"), &l.w_v));
            tensors.push(mat_t(p("w_o"), &l.w_o));
            tensors.push(vec_t(p("b_q"), &l.b_q));
            tensors.push(vec_t(p("b_k"), &l.b_k));
            tensors.push(vec_t(p("b_v"), &l.b_v));
            tensors.push(vec_t(p("b_o"), &l.b_o));
            tensors.push(vec_t(p("mlp_norm.scale"), &l.mlp_norm.scale));
            tensors.push(vec_t(p("mlp_norm.bias"), &l.mlp_norm.bias));
            tensors.push(mat_t(p("w_in"), &l.w_in));
            tensors.push(vec_t(p("b_in"), &l.b_in));
            tensors.push(mat_t(p("w_out"), &l.w_out));
            tensors.push(vec_t(p("b_out"), &l.b_out));
        }
        tensors.push(vec_t("final_norm.scale".into(), &self.final_norm.scale));
        tensors.push(vec_t("final_norm.bias".into(), &self.final_norm.bias));
        if let Some(h) = &self.head {
            tensors.push(mat_t("head.weight".into(), &h.weight));
            tensors.push(vec_t("head.bias".into(), &h.bias));
        }
        tensors
    }

    /// Assembles weights from named tensors, checking every shape against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<NamedTensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut by_name: BTreeMap<String, NamedTensor<T>> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let d = config.d_model;
        let di = config.d_inner;
        let v = config.vocab_size;

        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = by_name.remove(name).ok_or_else(|| Error::TensorShape {
                tensor: name.to_string(),
                expected: shape.to_vec(),
                found: vec![],
            })?;
            if t.shape != shape {
                return Err(Error::TensorShape {
                    tensor: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape,
                });
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("tensor `{name}` data length disagrees with its shape")));
            }
            Ok(t.data)
        };
        let mat = |data: Vec<T>, r: usize, c: usize| Matrix::from_vec(r, c, data);

        let embedding = mat(take("embedding", &[v, d])?, v, d)?;
        let position_embedding =
            mat(take("position_embedding", &[config.max_positions, d])?, config.max_positions, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerWeights {
                attn_norm: Norm { scale: take(&p("attn_norm.scale"), &[d])?, bias: take(&p("attn_norm.bias"), &[d])? },
                w_q: mat(take(&p("w_q"), &[d, d])?, d, d)?,
                w_k: mat(take(&p("w_k"), &[d, d])?, d, d)?,
                w_v: mat(take(&p("w_v"), &[d, d])?, d, d)?,
                w_o: mat(take(&p("w_o"), &[d, d])?, d, d)?,
                b_q: take(&p("b_q"), &[d])?,
                b_k: take(&p("b_k"), &[d])?,
                b_v: take(&p("b_v"), &[d])?,
                b_o: take(&p("b_o"), &[d])?,
                mlp_norm: Norm { scale: take(&p("mlp_norm.scale"), &[d])?, bias: take(&p("mlp_norm.bias"), &[d])? },
                w_in: mat(take(&p("w_in"), &[di, d])?, di, d)?,
                b_in: take(&p("b_in"), &[di])?,
                w_out: mat(take(&p("w_out"), &[d, di])?, d, di)?,
                b_out: take(&p("b_out"), &[d])?,
            });
        }
        let final_norm = Norm { scale: take("final_norm.scale", &[d])?, bias: take("final_norm.bias", &[d])? };
        let head = match config.head_kind {
            HeadKind::TiedEmbedding => None,
            HeadKind::LinearHead => Some(LinearHead {
                weight: mat(take("head.weight", &[v, d])?, v, d)?,
                bias: take("head.bias", &[v])?,
            }),
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Shape(format!("unexpected tensor `{extra}` for this config")));
        }
        Ok(Self { embedding, position_embedding, layers, final_norm, head })
    }

    /// Checks every tensor shape against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        Self::from_tensors(config, self.to_tensors()).map(|_| ())
    }
}
