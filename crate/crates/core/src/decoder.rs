//! Attention decoder: one GRU conditioned on the previous target embedding
//! and the attention context, a tanh readout with optional dropout, and a
//! softmax output layer.

use crate::attention::{attend, attend_backward, AttendCache, AttentionParams};
use crate::error::Result;
use crate::gru::{gru_backward, gru_step, GruCache, GruParams};
use crate::numerics::{log_softmax, uniform_init, NamedParams, INIT_HALF_WIDTH};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{axpy, concat, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<S> {
    pub embedding: Tensor<S>,
    pub emb_bias: Option<Tensor<S>>,
    /// Input is `[e_{y_prev}; c_j]`, state width d.
    pub gru: GruParams<S>,
    pub att: AttentionParams<S>,
    /// Readout `t_j = tanh(w_s s_j + w_e emb + w_c c_j)`, width r = d.
    pub w_s: Tensor<S>,
    pub w_e: Tensor<S>,
    pub w_c: Tensor<S>,
    /// Output logits `w_o t_j`, no bias.
    pub w_o: Tensor<S>,
    /// Initial state `s_0 = tanh(w_init · mean annotation row)`.
    pub w_init: Tensor<S>,
}

impl<S: Scalar> DecoderParams<S> {
    pub fn new(
        rng: &mut Rng,
        vocab_size: usize,
        e: usize,
        d: usize,
        annotation_width: usize,
        emb_bias: bool,
    ) -> Self {
        let r = d;
        DecoderParams {
            embedding: uniform_init(rng, &[vocab_size, e], INIT_HALF_WIDTH),
            emb_bias: emb_bias.then(|| uniform_init(rng, &[e], INIT_HALF_WIDTH)),
            gru: GruParams::new(rng, e + annotation_width, d),
            att: AttentionParams::new(rng, d, d, annotation_width),
            w_s: uniform_init(rng, &[r, d], INIT_HALF_WIDTH),
            w_e: uniform_init(rng, &[r, e], INIT_HALF_WIDTH),
            w_c: uniform_init(rng, &[r, annotation_width], INIT_HALF_WIDTH),
            w_o: uniform_init(rng, &[vocab_size, r], INIT_HALF_WIDTH),
            w_init: uniform_init(rng, &[d, annotation_width], INIT_HALF_WIDTH),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DecoderParams {
            embedding: self.embedding.zeros_like(),
            emb_bias: self.emb_bias.as_ref().map(|t| t.zeros_like()),
            gru: self.gru.zeros_like(),
            att: self.att.zeros_like(),
            w_s: self.w_s.zeros_like(),
            w_e: self.w_e.zeros_like(),
            w_c: self.w_c.zeros_like(),
            w_o: self.w_o.zeros_like(),
            w_init: self.w_init.zeros_like(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_s.cols()
    }

    pub fn emb_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    fn embed(&self, id: usize) -> Vec<S> {
        assert!(id < self.vocab_size(), "token id {id} outside the vocabulary");
        let mut row = self.embedding.row(id).to_vec();
        if let Some(b) = &self.emb_bias {
            axpy(&mut row, S::one(), b.data());
        }
        row
    }
}

impl<S: Scalar> NamedParams<S> for DecoderParams<S> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![("dec.emb.table".into(), &self.embedding)];
        if let Some(b) = &self.emb_bias {
            out.push(("dec.emb.bias".into(), b));
        }
        for (n, t) in self.gru.fields() {
            out.push((format!("dec.gru.{n}"), t));
        }
        for (n, t) in self.att.fields() {
            out.push((format!("dec.att.{n}"), t));
        }
        out.push(("dec.readout.w_s".into(), &self.w_s));
        out.push(("dec.readout.w_e".into(), &self.w_e));
        out.push(("dec.readout.w_c".into(), &self.w_c));
        out.push(("dec.out.w_o".into(), &self.w_o));
        out.push(("dec.init.w_init".into(), &self.w_init));
        out
    }

    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> =
            vec![("dec.emb.table".into(), &mut self.embedding)];
        if let Some(b) = &mut self.emb_bias {
            out.push(("dec.emb.bias".into(), b));
        }
        for (n, t) in self.gru.fields_mut() {
            out.push((format!("dec.gru.{n}"), t));
        }
        for (n, t) in self.att.fields_mut() {
            out.push((format!("dec.att.{n}"), t));
        }
        out.push(("dec.readout.w_s".into(), &mut self.w_s));
        out.push(("dec.readout.w_e".into(), &mut self.w_e));
        out.push(("dec.readout.w_c".into(), &mut self.w_c));
        out.push(("dec.out.w_o".into(), &mut self.w_o));
        out.push(("dec.init.w_init".into(), &mut self.w_init));
        out
    }
}

/// `s_0 = tanh(w_init · mean of unmasked annotation rows)`.
/// Returns the state and the mean (cached for backward).
pub fn init_state<S: Scalar>(
    p: &DecoderParams<S>,
    annotation: &Tensor<S>,
    mask: &[bool],
) -> (Vec<S>, Vec<S>) {
    let n = annotation.rows();
    assert_eq!(mask.len(), n, "init_state mask");
    let mut mean = vec![S::zero(); annotation.cols()];
    let mut count = S::zero();
    for i in 0..n {
        if mask[i] {
            axpy(&mut mean, S::one(), annotation.row(i));
            count += S::one();
        }
    }
    assert!(count > S::zero(), "init_state: fully masked annotation");
    for v in &mut mean {
        *v /= count;
    }
    let s0: Vec<S> = p.w_init.matvec(&mean).iter().map(|v| v.tanh()).collect();
    (s0, mean)
}

/// Backward of [`init_state`]; accumulates `w_init` gradient and spreads the
/// mean gradient over the unmasked annotation rows.
pub fn init_state_backward<S: Scalar>(
    p: &DecoderParams<S>,
    grads: &mut DecoderParams<S>,
    mask: &[bool],
    mean: &[S],
    s0: &[S],
    ds0: &[S],
    d_annotation: &mut Tensor<S>,
) {
    let one = S::one();
    let dpre: Vec<S> = ds0
        .iter()
        .zip(s0)
        .map(|(&d, &s)| d * (one - s * s))
        .collect();
    grads.w_init.add_outer(one, &dpre, mean);
    let dmean = p.w_init.matvec_t(&dpre);
    let count = S::from_f64(mask.iter().filter(|&&m| m).count() as f64);
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            for (dst, &dm) in d_annotation.row_mut(i).iter_mut().zip(&dmean) {
                *dst += dm / count;
            }
        }
    }
}

/// One decoding step's outputs plus the caches backward needs.
pub struct StepOut<S> {
    pub s: Vec<S>,
    pub logp: Vec<S>,
    /// Attention weights over the source positions.
    pub alpha: Vec<S>,
    pub context: Vec<S>,
    attend: AttendCache<S>,
    gru: GruCache<S>,
    emb_row: Vec<S>,
    readout: Vec<S>,
    readout_dropped: Vec<S>,
    dropout: Option<Vec<S>>,
    probs: Vec<S>,
}

impl<S: Scalar> StepOut<S> {
    /// Softmax probabilities (exponentiated log-probabilities).
    pub fn probs(&self) -> &[S] {
        &self.probs
    }
}

/// Run one teacher-forced or free-running step. `dropout` is the inverted
/// dropout mask for the readout, `None` outside training.
pub fn decoder_step<S: Scalar>(
    p: &DecoderParams<S>,
    s_prev: &[S],
    y_prev: usize,
    annotation: &Tensor<S>,
    mask: &[bool],
    dropout: Option<Vec<S>>,
) -> Result<StepOut<S>> {
    let one = S::one();
    let att = attend(&p.att, s_prev, annotation, mask)?;
    let emb_row = p.embed(y_prev);
    let x = concat(&emb_row, &att.context);
    let (s, gru_cache) = gru_step(&p.gru, &x, s_prev)?;

    let mut pre = p.w_s.matvec(&s);
    axpy(&mut pre, one, &p.w_e.matvec(&emb_row));
    axpy(&mut pre, one, &p.w_c.matvec(&att.context));
    let readout: Vec<S> = pre.iter().map(|v| v.tanh()).collect();
    let readout_dropped: Vec<S> = match &dropout {
        Some(m) => {
            assert_eq!(m.len(), readout.len(), "dropout mask width");
            readout.iter().zip(m).map(|(&t, &k)| t * k).collect()
        }
        None => readout.clone(),
    };

    let logits = p.w_o.matvec(&readout_dropped);
    let logp = log_softmax(&logits)?;
    let probs: Vec<S> = logp.iter().map(|&l| l.exp()).collect();

    Ok(StepOut {
        alpha: att.address.weights.clone(),
        context: att.context.clone(),
        s,
        logp,
        attend: att,
        gru: gru_cache,
        emb_row,
        readout,
        readout_dropped,
        dropout,
        probs,
    })
}

/// Backward of one step. `dlogits` is the gradient on the output logits,
/// `ds_next` the gradient flowing into `s_j` from later steps. Accumulates
/// parameter and annotation gradients, returns the gradient on `s_{j-1}`.
#[allow(clippy::too_many_arguments)]
pub fn step_backward<S: Scalar>(
    p: &DecoderParams<S>,
    grads: &mut DecoderParams<S>,
    annotation: &Tensor<S>,
    mask: &[bool],
    y_prev: usize,
    out: &StepOut<S>,
    dlogits: &[S],
    ds_next: &[S],
    d_annotation: &mut Tensor<S>,
) -> Vec<S> {
    let one = S::one();
    let e = p.emb_dim();

    grads.w_o.add_outer(one, dlogits, &out.readout_dropped);
    let mut d_read = p.w_o.matvec_t(dlogits);
    if let Some(m) = &out.dropout {
        for (d, &k) in d_read.iter_mut().zip(m) {
            *d *= k;
        }
    }
    let dpre: Vec<S> = d_read
        .iter()
        .zip(&out.readout)
        .map(|(&d, &t)| d * (one - t * t))
        .collect();

    grads.w_s.add_outer(one, &dpre, &out.s);
    grads.w_e.add_outer(one, &dpre, &out.emb_row);
    grads.w_c.add_outer(one, &dpre, &out.context);
    let mut ds = p.w_s.matvec_t(&dpre);
    axpy(&mut ds, one, ds_next);
    let mut demb = p.w_e.matvec_t(&dpre);
    let mut dcontext = p.w_c.matvec_t(&dpre);

    let (dx, ds_prev_gru) = gru_backward(&p.gru, &mut grads.gru, &out.gru, &ds);
    axpy(&mut demb, one, &dx[..e]);
    axpy(&mut dcontext, one, &dx[e..]);

    let s_prev = &out.gru.s_prev;
    let (ds_prev_att, d_ann_rows) = attend_backward(
        &p.att,
        &mut grads.att,
        s_prev,
        annotation,
        mask,
        &out.attend,
        &dcontext,
    );
    d_annotation.add_scaled(one, &d_ann_rows);

    axpy(grads.embedding.row_mut(y_prev), one, &demb);
    if let Some(b) = grads.emb_bias.as_mut() {
        axpy(b.data_mut(), one, &demb);
    }

    let mut ds_prev = ds_prev_gru;
    axpy(&mut ds_prev, one, &ds_prev_att);
    ds_prev
}

/// Fresh inverted-dropout mask for one readout, or `None` when `rate == 0`.
pub fn readout_dropout<S: Scalar>(rng: &mut Rng, width: usize, rate: f64) -> Option<Vec<S>> {
    if rate == 0.0 {
        None
    } else {
        Some(crate::numerics::dropout_mask(rng, width, rate))
    }
}
