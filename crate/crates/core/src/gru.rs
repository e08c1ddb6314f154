//! GRU cell with a hand-written backward pass.
//!
//! Column-vector convention everywhere: `y = W x` with `W` shaped
//! `(out, in)`, so `dW += dy ⊗ x` and `dx = Wᵀ dy`.

use crate::error::Result;
use crate::numerics::{sigmoid, tanh_v, uniform_init, INIT_HALF_WIDTH};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{axpy, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<S> {
    pub w: Tensor<S>,
    pub u: Tensor<S>,
    pub b: Tensor<S>,
    pub wr: Tensor<S>,
    pub ur: Tensor<S>,
    pub br: Tensor<S>,
    pub wz: Tensor<S>,
    pub uz: Tensor<S>,
    pub bz: Tensor<S>,
}

impl<S: Scalar> GruParams<S> {
    pub fn new(rng: &mut Rng, input_dim: usize, state_dim: usize) -> Self {
        let mat = |rng: &mut Rng| uniform_init(rng, &[state_dim, input_dim], INIT_HALF_WIDTH);
        let sq = |rng: &mut Rng| uniform_init(rng, &[state_dim, state_dim], INIT_HALF_WIDTH);
        let vec = |rng: &mut Rng| uniform_init(rng, &[state_dim], INIT_HALF_WIDTH);
        GruParams {
            w: mat(rng),
            u: sq(rng),
            b: vec(rng),
            wr: mat(rng),
            ur: sq(rng),
            br: vec(rng),
            wz: mat(rng),
            uz: sq(rng),
            bz: vec(rng),
        }
    }

    pub fn zeros(input_dim: usize, state_dim: usize) -> Self {
        GruParams {
            w: Tensor::zeros(&[state_dim, input_dim]),
            u: Tensor::zeros(&[state_dim, state_dim]),
            b: Tensor::zeros(&[state_dim]),
            wr: Tensor::zeros(&[state_dim, input_dim]),
            ur: Tensor::zeros(&[state_dim, state_dim]),
            br: Tensor::zeros(&[state_dim]),
            wz: Tensor::zeros(&[state_dim, input_dim]),
            uz: Tensor::zeros(&[state_dim, state_dim]),
            bz: Tensor::zeros(&[state_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.state_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn state_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("w", &self.w),
            ("u", &self.u),
            ("b", &self.b),
            ("w_r", &self.wr),
            ("u_r", &self.ur),
            ("b_r", &self.br),
            ("w_z", &self.wz),
            ("u_z", &self.uz),
            ("b_z", &self.bz),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![
            ("w", &mut self.w),
            ("u", &mut self.u),
            ("b", &mut self.b),
            ("w_r", &mut self.wr),
            ("u_r", &mut self.ur),
            ("b_r", &mut self.br),
            ("w_z", &mut self.wz),
            ("u_z", &mut self.uz),
            ("b_z", &mut self.bz),
        ]
    }
}

impl<S: Scalar> crate::numerics::NamedParams<S> for GruParams<S> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)> {
        self.fields().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.fields_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct GruCache<S> {
    pub x: Vec<S>,
    pub s_prev: Vec<S>,
    r: Vec<S>,
    z: Vec<S>,
    s_cand: Vec<S>,
    u_s: Vec<S>,
}

/// `r = σ(W_r x + U_r s + b_r)`, `z = σ(W_z x + U_z s + b_z)`,
/// `s' = tanh(W x + r ⊙ (U s) + b)`, `s_t = (1 − z) ⊙ s' + z ⊙ s`.
pub fn gru_step<S: Scalar>(
    p: &GruParams<S>,
    x: &[S],
    s_prev: &[S],
) -> Result<(Vec<S>, GruCache<S>)> {
    assert_eq!(x.len(), p.input_dim(), "gru input width");
    assert_eq!(s_prev.len(), p.state_dim(), "gru state width");

    let mut ar = p.wr.matvec(x);
    axpy(&mut ar, S::one(), &p.ur.matvec(s_prev));
    axpy(&mut ar, S::one(), p.br.data());
    let r = sigmoid(&ar)?;

    let mut az = p.wz.matvec(x);
    axpy(&mut az, S::one(), &p.uz.matvec(s_prev));
    axpy(&mut az, S::one(), p.bz.data());
    let z = sigmoid(&az)?;

    let u_s = p.u.matvec(s_prev);
    let mut ac = p.w.matvec(x);
    for ((a, &ri), &ui) in ac.iter_mut().zip(&r).zip(&u_s) {
        *a += ri * ui;
    }
    axpy(&mut ac, S::one(), p.b.data());
    let s_cand = tanh_v(&ac)?;

    let s_t: Vec<S> = s_cand
        .iter()
        .zip(&z)
        .zip(s_prev)
        .map(|((&c, &zi), &sp)| (S::one() - zi) * c + zi * sp)
        .collect();

    Ok((
        s_t,
        GruCache {
            x: x.to_vec(),
            s_prev: s_prev.to_vec(),
            r,
            z,
            s_cand,
            u_s,
        },
    ))
}

/// Accumulate parameter gradients into `g` and return `(dx, ds_prev)`.
pub fn gru_backward<S: Scalar>(
    p: &GruParams<S>,
    g: &mut GruParams<S>,
    cache: &GruCache<S>,
    ds: &[S],
) -> (Vec<S>, Vec<S>) {
    let n = p.state_dim();
    assert_eq!(ds.len(), n, "gru backward state width");
    let one = S::one();

    let mut dx = vec![S::zero(); p.input_dim()];
    let mut ds_prev = vec![S::zero(); n];

    // s_t = (1 - z) s' + z s_prev
    let mut ds_cand = vec![S::zero(); n];
    let mut dz = vec![S::zero(); n];
    for i in 0..n {
        ds_cand[i] = ds[i] * (one - cache.z[i]);
        dz[i] = ds[i] * (cache.s_prev[i] - cache.s_cand[i]);
        ds_prev[i] += ds[i] * cache.z[i];
    }

    // s' = tanh(W x + r (U s_prev) + b)
    let da_cand: Vec<S> = ds_cand
        .iter()
        .zip(&cache.s_cand)
        .map(|(&d, &c)| d * (one - c * c))
        .collect();
    g.w.add_outer(one, &da_cand, &cache.x);
    axpy(g.b.data_mut(), one, &da_cand);
    axpy(&mut dx, one, &p.w.matvec_t(&da_cand));

    let mut dr = vec![S::zero(); n];
    let mut d_us = vec![S::zero(); n];
    for i in 0..n {
        dr[i] = da_cand[i] * cache.u_s[i];
        d_us[i] = da_cand[i] * cache.r[i];
    }
    g.u.add_outer(one, &d_us, &cache.s_prev);
    axpy(&mut ds_prev, one, &p.u.matvec_t(&d_us));

    // r = sigmoid(a_r)
    let da_r: Vec<S> = dr
        .iter()
        .zip(&cache.r)
        .map(|(&d, &r)| d * r * (one - r))
        .collect();
    g.wr.add_outer(one, &da_r, &cache.x);
    g.ur.add_outer(one, &da_r, &cache.s_prev);
    axpy(g.br.data_mut(), one, &da_r);
    axpy(&mut dx, one, &p.wr.matvec_t(&da_r));
    axpy(&mut ds_prev, one, &p.ur.matvec_t(&da_r));

    // z = sigmoid(a_z)
    let da_z: Vec<S> = dz
        .iter()
        .zip(&cache.z)
        .map(|(&d, &z)| d * z * (one - z))
        .collect();
    g.wz.add_outer(one, &da_z, &cache.x);
    g.uz.add_outer(one, &da_z, &cache.s_prev);
    axpy(g.bz.data_mut(), one, &da_z);
    axpy(&mut dx, one, &p.wz.matvec_t(&da_z));
    axpy(&mut ds_prev, one, &p.uz.matvec_t(&da_z));

    (dx, ds_prev)
}
