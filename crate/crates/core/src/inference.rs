//! Greedy and beam-search decoding with length-normalized ranking.

use crate::corpus::{Vocabulary, BOS, EOS, OOV};
use crate::decoder::{decoder_step, init_state};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

/// Partial or finished translation. `tokens` includes the closing EOS once
/// `finished` is set; scores accumulate in f64 regardless of the model type.
#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    pub state: Vec<S>,
    pub logp: f64,
    pub finished: bool,
}

/// Ranking key: cumulative log-probability over emitted length, EOS counted.
pub fn normalized_score(logp: f64, emitted_len: usize) -> f64 {
    assert!(emitted_len >= 1, "normalized_score: empty hypothesis");
    logp / emitted_len as f64
}

fn hyp_score<S>(h: &Hypothesis<S>) -> f64 {
    normalized_score(h.logp, h.tokens.len())
}

pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 5
}

fn start_state<S: Scalar>(
    m: &Model<S>,
    enc: &crate::encoder::SourceEncoding<S>,
) -> Vec<S> {
    if m.zero_init {
        vec![S::zero(); m.decoder.state_dim()]
    } else {
        init_state(&m.decoder, &enc.annotation, &enc.mask).0
    }
}

/// Argmax decoding: one token per step, ties broken toward the lowest id,
/// stops at EOS (excluded from the result) or after `max_len` tokens.
pub fn greedy_decode<S: Scalar>(
    m: &Model<S>,
    src: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    assert!(max_len >= 1, "greedy_decode: max_len must be at least 1");
    let enc = crate::encoder::encode(&m.encoder, src)?;
    let mut state = start_state(m, &enc);
    let mut y_prev = BOS;
    let mut tokens = Vec::new();
    for _ in 0..max_len {
        let out = decoder_step(&m.decoder, &state, y_prev, &enc.annotation, &enc.mask, None)?;
        let mut best = 0;
        for (i, &l) in out.logp.iter().enumerate().skip(1) {
            if l > out.logp[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        tokens.push(best);
        state = out.s;
        y_prev = best;
    }
    Ok(tokens)
}

/// Standard beam search. Expansion looks at the top `2 * beam` tokens per
/// hypothesis; [`beam_search_full_expansion`] scores every token instead and
/// exists so tests can prove the pruned search returns the same result.
pub fn beam_search<S: Scalar>(
    m: &Model<S>,
    src: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    search(m, src, beam, max_len, Some(beam.saturating_mul(2)))
}

pub fn beam_search_full_expansion<S: Scalar>(
    m: &Model<S>,
    src: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<(Vec<usize>, f64)> {
    search(m, src, beam, max_len, None)
}

fn search<S: Scalar>(
    m: &Model<S>,
    src: &[usize],
    beam: usize,
    max_len: usize,
    expansion_cap: Option<usize>,
) -> Result<(Vec<usize>, f64)> {
    assert!(beam >= 1, "beam_search: beam must be at least 1");
    if max_len < 1 {
        return Err(Error::Config("beam_search: max_len must be at least 1".into()));
    }

    let enc = crate::encoder::encode(&m.encoder, src)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        state: start_state(m, &enc),
        logp: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis<S>> = Vec::new();

    for _ in 0..max_len {
        // Each live hypothesis steps once, consuming its last token; children
        // share the parent's new state and differ only in the emitted token.
        let mut new_states: Vec<Vec<S>> = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, h) in live.iter().enumerate() {
            let y_prev = *h.tokens.last().unwrap_or(&BOS);
            let out =
                decoder_step(&m.decoder, &h.state, y_prev, &enc.annotation, &enc.mask, None)?;
            let mut order: Vec<usize> = (0..out.logp.len()).collect();
            order.sort_by(|&a, &b| {
                out.logp[b].partial_cmp(&out.logp[a]).unwrap().then(a.cmp(&b))
            });
            let keep = expansion_cap.unwrap_or(out.logp.len()).min(out.logp.len());
            for &tok in &order[..keep] {
                cands.push((h.logp + out.logp[tok].to_f64(), tok, parent));
            }
            new_states.push(out.s);
        }

        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });

        // The top `beam` candidates are selected; a selected EOS finishes its
        // hypothesis into the pool and the slot is not refilled.
        let mut next_live = Vec::with_capacity(beam);
        for &(score, tok, parent) in cands.iter().take(beam) {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            let finished = tok == EOS;
            let h = Hypothesis {
                tokens,
                state: new_states[parent].clone(),
                logp: score,
                finished,
            };
            if finished {
                pool.push(h);
            } else {
                next_live.push(h);
            }
        }
        // Finished-pool capacity is `beam`, kept by normalized score; the
        // stable sort preserves insertion order on exact ties.
        pool.sort_by(|a, b| hyp_score(b).partial_cmp(&hyp_score(a)).unwrap());
        pool.truncate(beam);

        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    // Unfinished hypotheses compete only when nothing reached EOS.
    let winner = if !pool.is_empty() {
        pool.into_iter().next().unwrap()
    } else {
        live.into_iter()
            .reduce(|best, h| if hyp_score(&h) > hyp_score(&best) { h } else { best })
            .expect("beam search lost every hypothesis")
    };
    let score = hyp_score(&winner);
    let mut tokens = winner.tokens;
    if winner.finished {
        tokens.pop();
    }
    Ok((tokens, score))
}

/// Translate one pre-tokenized line; a blank line decodes from a single OOV.
/// Returns the space-joined hypothesis and its normalized score.
pub fn translate_line<S: Scalar>(
    m: &Model<S>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    line: &str,
    beam: usize,
) -> Result<(String, f64)> {
    let mut ids = src_vocab.numericalize(line);
    if ids.is_empty() {
        ids.push(OOV);
    }
    let max_len = default_max_len(ids.len());
    let (tokens, score) = beam_search(m, &ids, beam, max_len)?;
    Ok((tgt_vocab.denumericalize(&tokens), score))
}

pub fn translate_corpus<S: Scalar>(
    m: &Model<S>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    lines: &[String],
    beam: usize,
) -> Result<Vec<(String, f64)>> {
    lines
        .iter()
        .map(|l| translate_line(m, src_vocab, tgt_vocab, l, beam))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ChannelConfig;
    use crate::numerics::NamedParams;
    use crate::rng::{streams, Rng};

    fn random_model(seed: u64, tgt_vocab: usize) -> Model<f64> {
        let cfg = ChannelConfig::preset("RNN", 2).unwrap();
        let mut rng = Rng::stream(seed, streams::INIT, 0);
        let mut m = Model::new(&mut rng, cfg, 6, tgt_vocab, false);
        for (_, t) in m.entries_mut() {
            for v in t.data_mut() {
                *v = rng.next_uniform(0.5);
            }
        }
        m
    }

    /// Zeroed model whose readout realizes a fixed next-token table through
    /// one-hot embeddings: logits = w_o tanh(w_e emb[y_prev]).
    fn bigram_model(table: &[(usize, usize)]) -> Model<f64> {
        let v = 8;
        let cfg = ChannelConfig::preset("RNN", v).unwrap();
        let mut rng = Rng::stream(0, streams::INIT, 0);
        let mut m = Model::new(&mut rng, cfg, v, v, true);
        for (_, t) in m.entries_mut() {
            t.fill(0.0);
        }
        for i in 0..v {
            m.decoder.embedding.row_mut(i)[i] = 1.0;
            m.decoder.w_e.row_mut(i)[i] = 1.0;
        }
        for &(prev, next) in table {
            m.decoder.w_o.row_mut(next)[prev] = 20.0;
        }
        m
    }

    #[test]
    fn all_mass_on_eos_gives_an_empty_translation() {
        let m = bigram_model(&[(BOS, EOS)]);
        let out = greedy_decode(&m, &[4, 5], 10).unwrap();
        assert!(out.is_empty());
        let (tokens, score) = beam_search(&m, &[4, 5], 3, 10).unwrap();
        assert!(tokens.is_empty());
        assert!(score < 0.0 && score.is_finite());
    }

    #[test]
    fn peaked_bigram_model_emits_its_chain() {
        let m = bigram_model(&[(BOS, 4), (4, 5), (5, 6), (6, EOS)]);
        let out = greedy_decode(&m, &[4], 20).unwrap();
        assert_eq!(out, vec![4, 5, 6]);
        let (tokens, _) = beam_search(&m, &[4], 4, 20).unwrap();
        assert_eq!(tokens, vec![4, 5, 6]);
    }

    #[test]
    fn max_len_truncates_an_endless_model() {
        let m = bigram_model(&[(BOS, 4), (4, 4)]);
        let out = greedy_decode(&m, &[4], 3).unwrap();
        assert_eq!(out, vec![4, 4, 4]);
        // No hypothesis finished: the unfinished one competes.
        let (tokens, _) = beam_search(&m, &[4], 1, 3).unwrap();
        assert_eq!(tokens, vec![4, 4, 4]);
    }

    #[test]
    fn beam_one_equals_greedy_on_random_models() {
        for seed in 0..100 {
            let m = random_model(seed, 5 + (seed as usize % 3));
            let src = [4, 5, 4];
            let greedy = greedy_decode(&m, &src, 6).unwrap();
            let (beamed, _) = beam_search(&m, &src, 1, 6).unwrap();
            assert_eq!(greedy, beamed, "seed {seed}");
        }
    }

    /// Teacher-forced log-probability of `seq` (which may end with EOS).
    fn score_sequence(m: &Model<f64>, src: &[usize], seq: &[usize]) -> f64 {
        let enc = crate::encoder::encode(&m.encoder, src).unwrap();
        let mut state = start_state(m, &enc);
        let mut y_prev = BOS;
        let mut total = 0.0;
        for &tok in seq {
            let out =
                decoder_step(&m.decoder, &state, y_prev, &enc.annotation, &enc.mask, None)
                    .unwrap();
            total += out.logp[tok];
            state = out.s;
            y_prev = tok;
        }
        total
    }

    #[test]
    fn exhaustive_beam_matches_brute_force_enumeration() {
        let vocab: usize = 4;
        let max_len = 3;
        let beam = vocab.pow(max_len as u32);
        for seed in 0..50 {
            let m = random_model(1000 + seed, vocab);
            let src = [4, 5];

            // Every finished sequence is a non-EOS prefix plus EOS; only if
            // none existed would length-max_len unfinished ones compete.
            let others: Vec<usize> = (0..vocab).filter(|&t| t != EOS).collect();
            let mut best: Option<(f64, Vec<usize>)> = None;
            let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
            for _len in 1..=max_len {
                let mut longer = Vec::new();
                for p in &prefixes {
                    let mut seq = p.clone();
                    seq.push(EOS);
                    let score = normalized_score(score_sequence(&m, &src, &seq), seq.len());
                    if best.as_ref().is_none_or(|(b, _)| score > *b) {
                        best = Some((score, p.clone()));
                    }
                    for &t in &others {
                        let mut q = p.clone();
                        q.push(t);
                        longer.push(q);
                    }
                }
                prefixes = longer;
            }
            let (best_score, best_seq) = best.unwrap();

            let (full_seq, full_score) =
                beam_search_full_expansion(&m, &src, beam, max_len).unwrap();
            assert_eq!(full_seq, best_seq, "seed {seed}");
            assert!((full_score - best_score).abs() < 1e-12, "seed {seed}");

            // The capped expansion must agree with the full one here.
            let (capped_seq, capped_score) = beam_search(&m, &src, beam, max_len).unwrap();
            assert_eq!(capped_seq, full_seq, "seed {seed}");
            assert_eq!(capped_score, full_score, "seed {seed}");
        }
    }

    #[test]
    fn longer_hypothesis_wins_on_normalized_score() {
        let short = normalized_score(-2.0, 2);
        let long = normalized_score(-2.5, 5);
        assert!(long > short, "{long} vs {short}");
        assert_eq!(short, -1.0);
        assert_eq!(long, -0.5);
    }

    #[test]
    fn rejects_zero_max_len() {
        let m = random_model(1, 5);
        let err = beam_search(&m, &[4], 2, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
