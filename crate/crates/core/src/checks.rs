//! Finite-difference audit of every parameterized operation: the scenario
//! suite behind the `grad-check` command.
//!
//! Layer scenarios redraw parameters from ±0.5 and probe with ±0.1 weights
//! so gradients sit well above the checker's relative-error floor; the
//! whole-sentence scenario checks the token-mean NLL instead, which scales
//! finite-difference roundoff down together with the gradients.

use crate::attention::{attend, attend_backward, AttentionParams};
use crate::corpus::EOS;
use crate::decoder::{decoder_step, step_backward, DecoderParams};
use crate::encoder::{encode, encode_backward, ChannelConfig, EncoderParams};
use crate::error::Result;
use crate::gru::{gru_backward, gru_step, GruParams};
use crate::memory::{
    memory_read, memory_write, read_backward, write_backward, MemoryParams, ReadWeighting,
};
use crate::model::{sequence_grads, sequence_loss, Model};
use crate::numerics::{grad_check, uniform_init, GradCheckReport, NamedParams};
use crate::rng::{streams, Rng};
use crate::tensor::{dot, Tensor};

/// Acceptance bound on the max relative error of any scenario.
pub const TOLERANCE: f64 = 1e-4;

const PARAM_HALF_WIDTH: f64 = 0.5;
const PROBE_HALF_WIDTH: f64 = 0.1;
const LAYER_EPSILON: f64 = 5e-5;
const MODEL_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

fn redraw<P: NamedParams<f64>>(p: &mut P, rng: &mut Rng) {
    for (_, t) in p.entries_mut() {
        for v in t.data_mut() {
            *v = rng.next_uniform(PARAM_HALF_WIDTH);
        }
    }
}

fn draw(rng: &mut Rng, len: usize, half_width: f64) -> Vec<f64> {
    (0..len).map(|_| rng.next_uniform(half_width)).collect()
}

fn check_gru(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(seed, streams::INIT, 10);
    let mut p = GruParams::<f64>::new(&mut rng, 3, 4);
    redraw(&mut p, &mut rng);
    let x = draw(&mut rng, 3, PARAM_HALF_WIDTH);
    let s = draw(&mut rng, 4, PARAM_HALF_WIDTH);
    let probe = draw(&mut rng, 4, PROBE_HALF_WIDTH);

    let (_, cache) = gru_step(&p, &x, &s)?;
    let mut g = p.zeros_like();
    gru_backward(&p, &mut g, &cache, &probe);

    grad_check(&mut p, &g, LAYER_EPSILON, |p| {
        let (st, _) = gru_step(p, &x, &s)?;
        Ok(dot(&probe, &st))
    })
}

fn check_attention(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(seed, streams::INIT, 11);
    let mut p = AttentionParams::<f64>::new(&mut rng, 3, 4, 5);
    redraw(&mut p, &mut rng);
    let q = draw(&mut rng, 4, PARAM_HALF_WIDTH);
    let rows: Tensor<f64> = uniform_init(&mut rng, &[4, 5], PARAM_HALF_WIDTH);
    let keep = [true, true, false, true];
    let probe = draw(&mut rng, 5, PROBE_HALF_WIDTH);

    let cache = attend(&p, &q, &rows, &keep)?;
    let mut g = p.zeros_like();
    attend_backward(&p, &mut g, &q, &rows, &keep, &cache, &probe);

    grad_check(&mut p, &g, LAYER_EPSILON, |p| {
        let cache = attend(p, &q, &rows, &keep)?;
        Ok(dot(&probe, &cache.context))
    })
}

/// Read then write, the weights shared between them exactly as the encoder
/// chains them; the loss probes both the read context and the new memory.
fn check_memory(seed: u64, mode: ReadWeighting) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(seed, streams::INIT, 12);
    let mut p = MemoryParams::<f64>::new(&mut rng, 3, 3);
    redraw(&mut p, &mut rng);
    let m_prev: Tensor<f64> = uniform_init(&mut rng, &[4, 3], PARAM_HALF_WIDTH);
    let s_prev = draw(&mut rng, 3, PARAM_HALF_WIDTH);
    let s_t = draw(&mut rng, 3, PARAM_HALF_WIDTH);
    let probe_ctx = draw(&mut rng, 3, PROBE_HALF_WIDTH);
    let probe_mem: Tensor<f64> = uniform_init(&mut rng, &[4, 3], PROBE_HALF_WIDTH);

    let read = memory_read(&p, &m_prev, &s_prev, mode)?;
    let (_, u_gate) = memory_write(&p, &read.m_tilde, &s_t, &read.weights)?;
    let mut g = p.zeros_like();
    let (d_m_tilde, _ds_t, dweights) =
        write_backward(&p, &mut g, &s_t, &read.weights, &u_gate, &probe_mem);
    read_backward(&p, &mut g, &m_prev, &s_prev, &read, mode, &dweights, &d_m_tilde, &probe_ctx);

    grad_check(&mut p, &g, LAYER_EPSILON, |p| {
        let read = memory_read(p, &m_prev, &s_prev, mode)?;
        let (m_t, _) = memory_write(p, &read.m_tilde, &s_t, &read.weights)?;
        Ok(dot(&probe_ctx, &read.context) + dot(probe_mem.data(), m_t.data()))
    })
}

/// Full encoder under one of the gated channel combinations; the loss
/// probes every annotation entry, so the gates and all three channels
/// contribute.
fn check_combiner(seed: u64, name: &str) -> Result<GradCheckReport> {
    let cfg = ChannelConfig::preset(name, 3)?;
    let mut rng = Rng::stream(seed, streams::INIT, 13);
    let mut p = EncoderParams::<f64>::new(cfg, 7, &mut rng);
    redraw(&mut p, &mut rng);
    let ids = [1usize, 2, 3];
    let probe: Tensor<f64> =
        uniform_init(&mut rng, &[ids.len(), cfg.annotation_width()], PROBE_HALF_WIDTH);

    let enc = encode(&p, &ids)?;
    let mut g = p.zeros_like();
    encode_backward(&p, &mut g, &ids, &enc, &probe);

    grad_check(&mut p, &g, LAYER_EPSILON, |p| {
        let enc = encode(p, &ids)?;
        Ok(dot(probe.data(), enc.annotation.data()))
    })
}

fn check_decoder_step(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::stream(seed, streams::INIT, 14);
    let mut p = DecoderParams::<f64>::new(&mut rng, 7, 3, 4, 6, true);
    redraw(&mut p, &mut rng);
    let annotation: Tensor<f64> = uniform_init(&mut rng, &[3, 6], PARAM_HALF_WIDTH);
    let mask = [true, true, false];
    let s_prev = draw(&mut rng, 4, PARAM_HALF_WIDTH);
    let probe_s = draw(&mut rng, 4, PROBE_HALF_WIDTH);
    let y_prev = 2usize;
    let gold = 5usize;

    let out = decoder_step(&p, &s_prev, y_prev, &annotation, &mask, None)?;
    let mut dlogits = out.probs().to_vec();
    dlogits[gold] -= 1.0;
    let mut g = p.zeros_like();
    let mut d_ann = annotation.zeros_like();
    step_backward(&p, &mut g, &annotation, &mask, y_prev, &out, &dlogits, &probe_s, &mut d_ann);

    // The NLL term makes |f| a few units, so this check needs the wide
    // step for the same reason the sentence loss does.
    grad_check(&mut p, &g, MODEL_EPSILON, |p| {
        let out = decoder_step(p, &s_prev, y_prev, &annotation, &mask, None)?;
        Ok(-out.logp[gold] + dot(&probe_s, &out.s))
    })
}

/// Whole model, token-mean sentence NLL, all channels on.
fn check_sentence_loss(seed: u64) -> Result<GradCheckReport> {
    let cfg = ChannelConfig::full(3);
    let mut rng = Rng::stream(seed, streams::INIT, 15);
    let mut m = Model::<f64>::new(&mut rng, cfg, 7, 7, false);
    redraw(&mut m, &mut rng);
    let src = [1usize, 2, 3];
    let tgt = [4usize, 5, EOS];
    let tokens = tgt.len() as f64;

    let mut g = m.zeros_like();
    sequence_grads(&m, &mut g, &src, &tgt, 0.0, None)?;
    for (_, t) in g.entries_mut() {
        t.scale(1.0 / tokens);
    }

    grad_check(&mut m, &g, MODEL_EPSILON, |m| {
        Ok(sequence_loss(m, &src, &tgt)?.loss / tokens)
    })
}

/// Every scenario, in a fixed order, each seeded independently.
pub fn run_all(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        rows.push(CheckRow { name: name.to_string(), report });
    };
    push("gru-step", check_gru(seed)?);
    push("attention", check_attention(seed)?);
    push("memory-read-write-literal", check_memory(seed, ReadWeighting::Literal)?);
    push("memory-read-write-single", check_memory(seed, ReadWeighting::Single)?);
    push("combiner-ntm-rnn", check_combiner(seed, "NTM-RNN")?);
    push("combiner-ntm-emb", check_combiner(seed, "NTM-EMB")?);
    push("combiner-rnn-emb", check_combiner(seed, "RNN-EMB")?);
    push("combiner-ntm-rnn-emb", check_combiner(seed, "NTM-RNN-EMB")?);
    push("decoder-step", check_decoder_step(seed)?);
    push("sentence-loss", check_sentence_loss(seed)?);
    Ok(rows)
}
