//! Additive attention: scoring, masked normalization and the weighted-sum
//! context, with hand-written backward passes.
//!
//! The same scorer addresses the external memory (rows = memory cells) and
//! drives the decoder (rows = annotation positions), so both live here.

use crate::error::Result;
use crate::numerics::{masked_softmax, uniform_init, INIT_HALF_WIDTH};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Tensor};

/// `score_i = v_aᵀ tanh(U_a q + W_a rows_i)`; no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S> {
    pub va: Tensor<S>,
    pub ua: Tensor<S>,
    pub wa: Tensor<S>,
}

impl<S: Scalar> AttentionParams<S> {
    /// `width` is the scorer's internal dimension, `query_dim` the query
    /// vector length, `row_dim` the width of the attended rows.
    pub fn new(rng: &mut Rng, width: usize, query_dim: usize, row_dim: usize) -> Self {
        AttentionParams {
            va: uniform_init(rng, &[width], INIT_HALF_WIDTH),
            ua: uniform_init(rng, &[width, query_dim], INIT_HALF_WIDTH),
            wa: uniform_init(rng, &[width, row_dim], INIT_HALF_WIDTH),
        }
    }

    pub fn zeros(width: usize, query_dim: usize, row_dim: usize) -> Self {
        AttentionParams {
            va: Tensor::zeros(&[width]),
            ua: Tensor::zeros(&[width, query_dim]),
            wa: Tensor::zeros(&[width, row_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.ua.cols(), self.wa.cols())
    }

    pub fn width(&self) -> usize {
        self.va.len()
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![("v_a", &self.va), ("u_a", &self.ua), ("w_a", &self.wa)]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![("v_a", &mut self.va), ("u_a", &mut self.ua), ("w_a", &mut self.wa)]
    }
}

impl<S: Scalar> crate::numerics::NamedParams<S> for AttentionParams<S> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)> {
        self.fields().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.fields_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct AddressCache<S> {
    /// tanh(U_a q + W_a rows_i), one row per attended position.
    tanh_rows: Tensor<S>,
    pub weights: Vec<S>,
}

/// Score every row against the query and normalize over unmasked positions.
/// Masked positions receive exactly zero weight.
pub fn address<S: Scalar>(
    p: &AttentionParams<S>,
    query: &[S],
    rows: &Tensor<S>,
    keep: &[bool],
) -> Result<AddressCache<S>> {
    let n = rows.rows();
    assert_eq!(keep.len(), n, "address: {} rows vs {} mask", n, keep.len());
    let q = p.ua.matvec(query);
    let width = p.width();
    let mut tanh_rows = Tensor::zeros(&[n, width]);
    let mut scores = vec![S::zero(); n];
    for i in 0..n {
        let mut a = p.wa.matvec(rows.row(i));
        axpy(&mut a, S::one(), &q);
        let t = tanh_rows.row_mut(i);
        for (tj, aj) in t.iter_mut().zip(&a) {
            *tj = aj.tanh();
        }
        scores[i] = dot(p.va.data(), t);
    }
    let weights = masked_softmax(&scores, keep)?;
    Ok(AddressCache { tanh_rows, weights })
}

/// Backward of [`address`]: accumulate into `g`, return `(dquery, drows)`.
pub fn address_backward<S: Scalar>(
    p: &AttentionParams<S>,
    g: &mut AttentionParams<S>,
    query: &[S],
    rows: &Tensor<S>,
    keep: &[bool],
    cache: &AddressCache<S>,
    dweights: &[S],
) -> (Vec<S>, Tensor<S>) {
    let n = rows.rows();
    assert_eq!(dweights.len(), n, "address_backward weight grads");
    let one = S::one();
    let w = &cache.weights;

    // Softmax jacobian, restricted to unmasked positions (weights are 0
    // elsewhere, which zeroes those terms automatically).
    let inner: S = w.iter().zip(dweights).map(|(&wi, &di)| wi * di).sum();
    let mut dquery_pre = vec![S::zero(); p.width()];
    let mut drows = rows.zeros_like();
    for i in 0..n {
        if !keep[i] {
            continue;
        }
        let dscore = w[i] * (dweights[i] - inner);
        if dscore == S::zero() {
            continue;
        }
        let t = cache.tanh_rows.row(i);
        axpy(g.va.data_mut(), dscore, t);
        // da = dscore * v_a (1 - t^2)
        let da: Vec<S> = p
            .va
            .data()
            .iter()
            .zip(t)
            .map(|(&v, &ti)| dscore * v * (one - ti * ti))
            .collect();
        axpy(&mut dquery_pre, one, &da);
        g.wa.add_outer(one, &da, rows.row(i));
        axpy(drows.row_mut(i), one, &p.wa.matvec_t(&da));
    }
    g.ua.add_outer(one, &dquery_pre, query);
    let dquery = p.ua.matvec_t(&dquery_pre);
    (dquery, drows)
}

#[derive(Clone, Debug)]
pub struct AttendCache<S> {
    pub address: AddressCache<S>,
    pub context: Vec<S>,
}

/// Weights plus the weighted sum of rows: `c = Σ α_i rows_i`.
pub fn attend<S: Scalar>(
    p: &AttentionParams<S>,
    query: &[S],
    rows: &Tensor<S>,
    keep: &[bool],
) -> Result<AttendCache<S>> {
    let cache = address(p, query, rows, keep)?;
    let mut context = vec![S::zero(); rows.cols()];
    for i in 0..rows.rows() {
        if cache.weights[i] != S::zero() {
            axpy(&mut context, cache.weights[i], rows.row(i));
        }
    }
    Ok(AttendCache {
        address: cache,
        context,
    })
}

/// Backward of [`attend`]: accumulate into `g`, return `(dquery, drows)`.
pub fn attend_backward<S: Scalar>(
    p: &AttentionParams<S>,
    g: &mut AttentionParams<S>,
    query: &[S],
    rows: &Tensor<S>,
    keep: &[bool],
    cache: &AttendCache<S>,
    dcontext: &[S],
) -> (Vec<S>, Tensor<S>) {
    let n = rows.rows();
    let w = &cache.address.weights;
    let mut dweights = vec![S::zero(); n];
    for i in 0..n {
        if keep[i] {
            dweights[i] = dot(dcontext, rows.row(i));
        }
    }
    let (dquery, mut drows) = address_backward(p, g, query, rows, keep, &cache.address, &dweights);
    for i in 0..n {
        if w[i] != S::zero() {
            axpy(drows.row_mut(i), w[i], dcontext);
        }
    }
    (dquery, drows)
}
