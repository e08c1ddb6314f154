//! Encoder-decoder composition: teacher-forced sentence loss and the full
//! backward pass that feeds training.

use crate::corpus::BOS;
use crate::decoder::{
    decoder_step, init_state, init_state_backward, readout_dropout, step_backward, DecoderParams,
    StepOut,
};
use crate::encoder::{encode, encode_backward, ChannelConfig, EncoderParams, SourceEncoding};
use crate::error::Result;
use crate::numerics::{NamedParams, INIT_HALF_WIDTH};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub encoder: EncoderParams<S>,
    pub decoder: DecoderParams<S>,
    /// Start the decoder from a zero state instead of the pooled annotation.
    pub zero_init: bool,
}

impl<S: Scalar> Model<S> {
    pub fn new(
        rng: &mut Rng,
        channels: ChannelConfig,
        src_vocab: usize,
        tgt_vocab: usize,
        zero_init: bool,
    ) -> Self {
        let width = channels.annotation_width();
        let encoder = EncoderParams::new(channels, src_vocab, rng);
        let decoder = DecoderParams::new(
            rng,
            tgt_vocab,
            channels.e,
            channels.d,
            width,
            channels.emb_bias,
        );
        Model { encoder, decoder, zero_init }
    }

    /// `new` with the uniform init rescaled to `±width`. Entries come out
    /// uniform in `±INIT_HALF_WIDTH`, so scaling them is the same draw at the
    /// requested width.
    pub fn with_init_width(
        rng: &mut Rng,
        channels: ChannelConfig,
        src_vocab: usize,
        tgt_vocab: usize,
        zero_init: bool,
        width: f64,
    ) -> Self {
        let mut model = Self::new(rng, channels, src_vocab, tgt_vocab, zero_init);
        if width != INIT_HALF_WIDTH {
            let ratio = S::from_f64(width / INIT_HALF_WIDTH);
            for (_, t) in model.entries_mut() {
                t.scale(ratio);
            }
        }
        model
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            zero_init: self.zero_init,
        }
    }

    pub fn channels(&self) -> &ChannelConfig {
        &self.encoder.channels
    }

    pub fn src_vocab_size(&self) -> usize {
        self.encoder.embedding.rows()
    }

    pub fn tgt_vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }
}

impl<S: Scalar> NamedParams<S> for Model<S> {
    fn entries(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.encoder.entries();
        out.extend(self.decoder.entries());
        out
    }

    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = self.encoder.entries_mut();
        out.extend(self.decoder.entries_mut());
        out
    }
}

/// Per-sentence teacher-forcing totals. `loss` is the summed token NLL, not
/// yet averaged over the batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct SentenceStats<S> {
    pub loss: S,
    pub tokens: usize,
    pub correct: usize,
}

/// Forward caches for one sentence pair.
pub struct SentenceForward<S> {
    pub stats: SentenceStats<S>,
    enc: SourceEncoding<S>,
    mean: Option<Vec<S>>,
    s0: Vec<S>,
    steps: Vec<StepOut<S>>,
}

fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced forward pass over one sentence pair. `tgt` must already end
/// with EOS; the first decoder input is BOS. `rng` drives readout dropout and
/// is required when `dropout_rate > 0`.
pub fn sentence_forward<S: Scalar>(
    m: &Model<S>,
    src: &[usize],
    tgt: &[usize],
    dropout_rate: f64,
    mut rng: Option<&mut Rng>,
) -> Result<SentenceForward<S>> {
    assert!(!tgt.is_empty(), "sentence_forward: empty target");
    if dropout_rate > 0.0 {
        assert!(rng.is_some(), "dropout requires an rng");
    }
    let enc = encode(&m.encoder, src)?;
    let (s0, mean) = if m.zero_init {
        (vec![S::zero(); m.decoder.state_dim()], None)
    } else {
        let (s0, mean) = init_state(&m.decoder, &enc.annotation, &enc.mask);
        (s0, Some(mean))
    };

    let mut stats = SentenceStats::<S>::default();
    let mut steps = Vec::with_capacity(tgt.len());
    let mut s_prev = s0.clone();
    for (j, &gold) in tgt.iter().enumerate() {
        let y_prev = if j == 0 { BOS } else { tgt[j - 1] };
        let mask = match rng.as_deref_mut() {
            Some(r) if dropout_rate > 0.0 => {
                readout_dropout(r, m.decoder.state_dim(), dropout_rate)
            }
            _ => None,
        };
        let out = decoder_step(&m.decoder, &s_prev, y_prev, &enc.annotation, &enc.mask, mask)?;
        stats.loss += -out.logp[gold];
        stats.tokens += 1;
        if argmax(&out.logp) == gold {
            stats.correct += 1;
        }
        s_prev = out.s.clone();
        steps.push(out);
    }

    Ok(SentenceForward { stats, enc, mean, s0, steps })
}

/// Backward pass matching [`sentence_forward`]; accumulates into `grads`.
pub fn sentence_backward<S: Scalar>(
    m: &Model<S>,
    grads: &mut Model<S>,
    src: &[usize],
    tgt: &[usize],
    fwd: &SentenceForward<S>,
) {
    let enc = &fwd.enc;
    let mut d_annotation = enc.annotation.zeros_like();
    let mut ds_next = vec![S::zero(); m.decoder.state_dim()];
    for (j, &gold) in tgt.iter().enumerate().rev() {
        let out = &fwd.steps[j];
        let mut dlogits = out.probs().to_vec();
        dlogits[gold] -= S::one();
        let y_prev = if j == 0 { BOS } else { tgt[j - 1] };
        ds_next = step_backward(
            &m.decoder,
            &mut grads.decoder,
            &enc.annotation,
            &enc.mask,
            y_prev,
            out,
            &dlogits,
            &ds_next,
            &mut d_annotation,
        );
    }
    if let Some(mean) = &fwd.mean {
        init_state_backward(
            &m.decoder,
            &mut grads.decoder,
            &enc.mask,
            mean,
            &fwd.s0,
            &ds_next,
            &mut d_annotation,
        );
    }
    encode_backward(&m.encoder, &mut grads.encoder, src, enc, &d_annotation);
}

/// Summed token NLL plus accuracy counts, no dropout, no gradients.
pub fn sequence_loss<S: Scalar>(m: &Model<S>, src: &[usize], tgt: &[usize]) -> Result<SentenceStats<S>> {
    Ok(sentence_forward(m, src, tgt, 0.0, None)?.stats)
}

/// Forward plus backward for one pair; gradients accumulate into `grads`.
pub fn sequence_grads<S: Scalar>(
    m: &Model<S>,
    grads: &mut Model<S>,
    src: &[usize],
    tgt: &[usize],
    dropout_rate: f64,
    rng: Option<&mut Rng>,
) -> Result<SentenceStats<S>> {
    let fwd = sentence_forward(m, src, tgt, dropout_rate, rng)?;
    sentence_backward(m, grads, src, tgt, &fwd);
    Ok(fwd.stats)
}
