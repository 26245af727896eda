//! Scalar abstraction shared by the engine, lens and attribution code.
//!
//! The engine runs in `f32` for real checkpoints; gradient checks and
//! invariant oracles run the same code in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs on IEEE types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices sorted by descending value, ties by ascending index.
pub fn ranked_indices<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Top `k` indices by descending value without sorting the whole slice.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    if k == values.len() {
        return ranked_indices(values);
    }
    let better = |a: usize, b: usize| values[a] > values[b] || (values[a] == values[b] && a < b);
    // Insertion into a small sorted buffer; k is typically 10..100.
    let mut top: Vec<usize> = Vec::with_capacity(k + 1);
    for i in 0..values.len() {
        if top.len() == k && !better(i, top[k - 1]) {
            continue;
        }
        let pos = top.partition_point(|&t| better(t, i));
        top.insert(pos, i);
        top.truncate(k);
    }
    top
}

/// 1-based rank of `index` under descending order with lowest-index tie-break.
pub fn rank_of<T: Scalar>(values: &[T], index: usize) -> usize {
    let target = values[index];
    1 + values
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < index))
        .count()
}
