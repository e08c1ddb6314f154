//! External memory: content addressing, gated read, rank-1 write.
//!
//! One memory per encoder direction, n cells of width m where n is the
//! sentence length. Addressing reuses the additive attention scorer; the
//! same cell weights serve the read and the write of a step.

use crate::attention::{address, address_backward, AddressCache, AttentionParams};
use crate::error::Result;
use crate::numerics::{sigmoid, uniform_init, INIT_HALF_WIDTH};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Tensor};

/// Whether the context re-applies the cell weights already baked into the
/// read memory (`Literal`, weights squared in effect) or sums the read
/// memory as-is (`Single`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadWeighting {
    Literal,
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryParams<S> {
    pub addr: AttentionParams<S>,
    /// Read gate `R_t = σ(w_read s + b_read)`, distinct from the GRU reset gate.
    pub w_read: Tensor<S>,
    pub b_read: Tensor<S>,
    /// Update gate `U_t = σ(w_update s + b_update)`.
    pub w_update: Tensor<S>,
    pub b_update: Tensor<S>,
}

impl<S: Scalar> MemoryParams<S> {
    pub fn new(rng: &mut Rng, m: usize, d: usize) -> Self {
        MemoryParams {
            addr: AttentionParams::new(rng, d, d, m),
            w_read: uniform_init(rng, &[m, d], INIT_HALF_WIDTH),
            b_read: uniform_init(rng, &[m], INIT_HALF_WIDTH),
            w_update: uniform_init(rng, &[m, d], INIT_HALF_WIDTH),
            b_update: uniform_init(rng, &[m], INIT_HALF_WIDTH),
        }
    }

    pub fn zeros(m: usize, d: usize) -> Self {
        MemoryParams {
            addr: AttentionParams::zeros(d, d, m),
            w_read: Tensor::zeros(&[m, d]),
            b_read: Tensor::zeros(&[m]),
            w_update: Tensor::zeros(&[m, d]),
            b_update: Tensor::zeros(&[m]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cell_width(), self.state_dim())
    }

    pub fn cell_width(&self) -> usize {
        self.w_read.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.w_read.cols()
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor<S>)> {
        let mut out = self.addr.fields();
        out.push(("w_read", &self.w_read));
        out.push(("b_read", &self.b_read));
        out.push(("w_update", &self.w_update));
        out.push(("b_update", &self.b_update));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        let mut out = self.addr.fields_mut();
        out.push(("w_read", &mut self.w_read));
        out.push(("b_read", &mut self.b_read));
        out.push(("w_update", &mut self.w_update));
        out.push(("b_update", &mut self.b_update));
        out
    }
}

impl<S: Scalar> crate::numerics::NamedParams<S> for MemoryParams<S> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)> {
        self.fields().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        self.fields_mut().into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }
}

/// Outputs of one read: cell weights, read gate, gated memory and context.
#[derive(Clone, Debug)]
pub struct MemoryRead<S> {
    pub weights: Vec<S>,
    pub r_gate: Vec<S>,
    /// `m_tilde[i,:] = weights[i] * (m_prev[i,:] ⊙ r_gate)`.
    pub m_tilde: Tensor<S>,
    pub context: Vec<S>,
    addr_cache: AddressCache<S>,
}

/// Address `m_prev` with `s_prev`, gate it, and fetch the context.
pub fn memory_read<S: Scalar>(
    p: &MemoryParams<S>,
    m_prev: &Tensor<S>,
    s_prev: &[S],
    mode: ReadWeighting,
) -> Result<MemoryRead<S>> {
    let n = m_prev.rows();
    let m = p.cell_width();
    assert_eq!(m_prev.cols(), m, "memory cell width");
    let keep = vec![true; n];
    let addr_cache = address(&p.addr, s_prev, m_prev, &keep)?;
    let weights = addr_cache.weights.clone();

    let mut pre = p.w_read.matvec(s_prev);
    axpy(&mut pre, S::one(), p.b_read.data());
    let r_gate = sigmoid(&pre)?;

    let mut m_tilde = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let out = m_tilde.row_mut(i);
        for ((o, &prev), &r) in out.iter_mut().zip(m_prev.row(i)).zip(&r_gate) {
            *o = weights[i] * (prev * r);
        }
    }

    let mut context = vec![S::zero(); m];
    for i in 0..n {
        let coeff = match mode {
            ReadWeighting::Literal => weights[i],
            ReadWeighting::Single => S::one(),
        };
        axpy(&mut context, coeff, m_tilde.row(i));
    }

    Ok(MemoryRead {
        weights,
        r_gate,
        m_tilde,
        context,
        addr_cache,
    })
}

/// `M_t = m_tilde + w ⊗ U_t` with `U_t = σ(w_update s_t + b_update)`.
/// Returns the new memory and the update gate (cached for backward).
pub fn memory_write<S: Scalar>(
    p: &MemoryParams<S>,
    m_tilde: &Tensor<S>,
    s_t: &[S],
    weights: &[S],
) -> Result<(Tensor<S>, Vec<S>)> {
    let n = m_tilde.rows();
    assert_eq!(weights.len(), n, "write weights");
    let mut pre = p.w_update.matvec(s_t);
    axpy(&mut pre, S::one(), p.b_update.data());
    let u_gate = sigmoid(&pre)?;
    let mut m_t = m_tilde.clone();
    for i in 0..n {
        axpy(m_t.row_mut(i), weights[i], &u_gate);
    }
    Ok((m_t, u_gate))
}

/// Backward of [`memory_write`]. Consumes `d_m_t`, accumulates parameter
/// gradients, and returns `(d_m_tilde, ds_t, dweights)`.
pub fn write_backward<S: Scalar>(
    p: &MemoryParams<S>,
    g: &mut MemoryParams<S>,
    s_t: &[S],
    weights: &[S],
    u_gate: &[S],
    d_m_t: &Tensor<S>,
) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let n = d_m_t.rows();
    let one = S::one();
    let d_m_tilde = d_m_t.clone();
    let mut du = vec![S::zero(); u_gate.len()];
    let mut dweights = vec![S::zero(); n];
    for i in 0..n {
        axpy(&mut du, weights[i], d_m_t.row(i));
        dweights[i] = dot(d_m_t.row(i), u_gate);
    }
    let dpre: Vec<S> = du
        .iter()
        .zip(u_gate)
        .map(|(&d, &u)| d * u * (one - u))
        .collect();
    g.w_update.add_outer(one, &dpre, s_t);
    axpy(g.b_update.data_mut(), one, &dpre);
    let ds_t = p.w_update.matvec_t(&dpre);
    (d_m_tilde, ds_t, dweights)
}

/// Backward of [`memory_read`]. `dweights_ext` carries gradient reaching the
/// cell weights from elsewhere (the write reuses them), `d_m_tilde` and
/// `dcontext` the gradients on the read outputs. Accumulates parameter
/// gradients and returns `(d_m_prev, ds_prev)`.
#[allow(clippy::too_many_arguments)]
pub fn read_backward<S: Scalar>(
    p: &MemoryParams<S>,
    g: &mut MemoryParams<S>,
    m_prev: &Tensor<S>,
    s_prev: &[S],
    read: &MemoryRead<S>,
    mode: ReadWeighting,
    dweights_ext: &[S],
    d_m_tilde: &Tensor<S>,
    dcontext: &[S],
) -> (Tensor<S>, Vec<S>) {
    let n = m_prev.rows();
    let m = p.cell_width();
    let one = S::one();
    let w = &read.weights;

    let mut dweights = dweights_ext.to_vec();
    let mut d_m_tilde = d_m_tilde.clone();

    // context = Σ coeff_i * m_tilde[i]
    for i in 0..n {
        match mode {
            ReadWeighting::Literal => {
                dweights[i] += dot(dcontext, read.m_tilde.row(i));
                axpy(d_m_tilde.row_mut(i), w[i], dcontext);
            }
            ReadWeighting::Single => {
                axpy(d_m_tilde.row_mut(i), one, dcontext);
            }
        }
    }

    // m_tilde[i] = w_i * (m_prev[i] ⊙ R)
    let mut d_m_prev = m_prev.zeros_like();
    let mut dr = vec![S::zero(); m];
    for i in 0..n {
        let dmt = d_m_tilde.row(i);
        let prev = m_prev.row(i);
        let dst = d_m_prev.row_mut(i);
        let mut acc = S::zero();
        for k in 0..m {
            acc += dmt[k] * prev[k] * read.r_gate[k];
            dst[k] += w[i] * dmt[k] * read.r_gate[k];
            dr[k] += w[i] * dmt[k] * prev[k];
        }
        dweights[i] += acc;
    }

    // R = σ(w_read s_prev + b_read)
    let dpre: Vec<S> = dr
        .iter()
        .zip(&read.r_gate)
        .map(|(&d, &r)| d * r * (one - r))
        .collect();
    g.w_read.add_outer(one, &dpre, s_prev);
    axpy(g.b_read.data_mut(), one, &dpre);
    let mut ds_prev = p.w_read.matvec_t(&dpre);

    // Addressing softmax.
    let keep = vec![true; n];
    let (dq, d_m_addr) = address_backward(
        &p.addr,
        &mut g.addr,
        s_prev,
        m_prev,
        &keep,
        &read.addr_cache,
        &dweights,
    );
    axpy(&mut ds_prev, one, &dq);
    d_m_prev.add_scaled(one, &d_m_addr);
    (d_m_prev, ds_prev)
}
