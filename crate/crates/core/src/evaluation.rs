//! Corpus BLEU, BLEU-by-source-length buckets, and the channel ablation
//! harness.

use std::collections::HashMap;

use serde::Serialize;

use crate::corpus::{Vocabulary, EOS};
use crate::encoder::ChannelConfig;
use crate::error::{Error, Result};
use crate::inference::translate_corpus;
use crate::model::{sequence_loss, Model};
use crate::numerics::NamedParams;
use crate::rng::{streams, Rng};
use crate::scalar::Scalar;
use crate::task::TaskData;
use crate::training::{fit, AdamState, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn tokens(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for gram in toks.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram precision, no smoothing, and
/// `BP = min(1, exp(1 - ref_len/hyp_len))`. Any zero precision zeroes the
/// score; the precisions are still reported.
pub fn bleu(
    hypotheses: &[String],
    references: &[String],
    max_n: usize,
    lowercase: bool,
) -> Result<BleuReport> {
    assert!(max_n >= 1, "bleu: max_n must be at least 1");
    if hypotheses.len() != references.len() {
        return Err(Error::Corpus(format!(
            "bleu: {} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("bleu"));
    }

    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let h = tokens(h, lowercase);
        let r = tokens(r, lowercase);
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(&r, n);
            for (gram, &count) in &ngram_counts(&h, n) {
                matches[n - 1] += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) || hyp_len == 0 {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * mean_log.exp() * 100.0
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len, ref_len })
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthBucket {
    /// Bucket contains pairs whose source is strictly longer than this.
    pub threshold: usize,
    pub sentences: usize,
    /// `None` flags an empty bucket, distinct from a zero score.
    pub bleu: Option<f64>,
}

pub const DEFAULT_THRESHOLDS: [usize; 6] = [10, 20, 30, 40, 50, 60];

/// BLEU restricted to pairs with source length > threshold, per threshold.
pub fn length_buckets(
    src_lens: &[usize],
    hypotheses: &[String],
    references: &[String],
    thresholds: &[usize],
) -> Result<Vec<LengthBucket>> {
    assert!(
        thresholds.windows(2).all(|w| w[0] < w[1]),
        "length_buckets: thresholds must be ascending"
    );
    if src_lens.len() != hypotheses.len() || hypotheses.len() != references.len() {
        return Err(Error::Corpus("length_buckets: misaligned inputs".into()));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut hyp_subset = Vec::new();
        let mut ref_subset = Vec::new();
        for i in 0..src_lens.len() {
            if src_lens[i] > threshold {
                hyp_subset.push(hypotheses[i].clone());
                ref_subset.push(references[i].clone());
            }
        }
        let bleu_score = if hyp_subset.is_empty() {
            None
        } else {
            Some(bleu(&hyp_subset, &ref_subset, 4, false)?.bleu)
        };
        out.push(LengthBucket { threshold, sentences: hyp_subset.len(), bleu: bleu_score });
    }
    Ok(out)
}

/// Translate the test pairs, then bucket BLEU by source length.
pub fn length_bucket_report<S: Scalar>(
    m: &Model<S>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    pairs: &[(String, String)],
    beam: usize,
    thresholds: &[usize],
) -> Result<Vec<LengthBucket>> {
    let sources: Vec<String> = pairs.iter().map(|(s, _)| s.clone()).collect();
    let references: Vec<String> = pairs.iter().map(|(_, t)| t.clone()).collect();
    let src_lens: Vec<usize> =
        sources.iter().map(|s| s.split_whitespace().count()).collect();
    let hypotheses: Vec<String> = translate_corpus(m, src_vocab, tgt_vocab, &sources, beam)?
        .into_iter()
        .map(|(h, _)| h)
        .collect();
    length_buckets(&src_lens, &hypotheses, &references, thresholds)
}

/// Teacher-forced next-token accuracy over a text corpus.
pub fn token_accuracy<S: Scalar>(
    m: &Model<S>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    pairs: &[(String, String)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("token_accuracy"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (s, t) in pairs {
        let mut src = src_vocab.numericalize(s);
        if src.is_empty() {
            src.push(crate::corpus::OOV);
        }
        let mut tgt = tgt_vocab.numericalize(t);
        tgt.push(EOS);
        let stats = sequence_loss(m, &src, &tgt)?;
        correct += stats.correct;
        total += stats.tokens;
    }
    Ok(correct as f64 / total as f64)
}

/// The seven channel subsets in canonical order; the first is the ablation
/// baseline the deltas refer to.
pub const ALL_CONFIGS: [&str; 7] =
    ["RNN", "NTM", "EMB", "NTM-RNN", "NTM-EMB", "RNN-EMB", "NTM-RNN-EMB"];

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub parameters: usize,
    /// Medians across seeds; `None` when every seed failed.
    pub token_accuracy: Option<f64>,
    pub bleu: Option<f64>,
    /// Accuracy delta against the first (baseline) row.
    pub delta_vs_baseline: Option<f64>,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub task: String,
    pub dim: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[mid] } else { (xs[mid - 1] + xs[mid]) / 2.0 })
}

fn train_and_score<S: Scalar>(
    data: &TaskData,
    name: &str,
    dim: usize,
    init_width: f64,
    base: &TrainConfig,
    beam: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = ChannelConfig::preset(name, dim)?;
    let mut rng = Rng::stream(seed, streams::INIT, 0);
    let vocab_size = data.vocab.len();
    let mut model: Model<S> =
        Model::with_init_width(&mut rng, cfg, vocab_size, vocab_size, false, init_width);
    let mut adam = AdamState::new(&model);
    // Tiny-task losses oscillate after convergence, so the last step is a
    // lottery; score each run at its best epoch, like the checkpointed
    // pipeline evaluating best.ckpt.
    let train_cfg = TrainConfig { seed, keep_best: true, ..base.clone() };
    fit(&mut model, &mut adam, &data.train, &data.vocab, &data.vocab, &train_cfg, None)?;

    let accuracy = token_accuracy(&model, &data.vocab, &data.vocab, &data.test)?;
    let sources: Vec<String> = data.test.iter().map(|(s, _)| s.clone()).collect();
    let references: Vec<String> = data.test.iter().map(|(_, t)| t.clone()).collect();
    let hypotheses: Vec<String> =
        translate_corpus(&model, &data.vocab, &data.vocab, &sources, beam)?
            .into_iter()
            .map(|(h, _)| h)
            .collect();
    let score = bleu(&hypotheses, &references, 4, false)?.bleu;
    Ok((accuracy, score))
}

/// Train every config on the same data and budget, seed by seed, and report
/// per-config medians. A failed run is recorded on its row; the suite
/// continues.
pub fn ablation_suite<S: Scalar>(
    data: &TaskData,
    task_name: &str,
    dim: usize,
    init_width: f64,
    base: &TrainConfig,
    beam: usize,
    configs: &[&str],
    seeds: &[u64],
) -> AblationReport {
    assert!(!configs.is_empty() && !seeds.is_empty(), "ablation needs configs and seeds");
    let mut rows: Vec<AblationRow> = Vec::with_capacity(configs.len());
    for &name in configs {
        let parameters = ChannelConfig::preset(name, dim)
            .map(|cfg| {
                let mut rng = Rng::stream(0, streams::ABLATION, 0);
                let v = data.vocab.len();
                Model::<S>::new(&mut rng, cfg, v, v, false).param_count()
            })
            .unwrap_or(0);
        let mut accuracies = Vec::new();
        let mut bleus = Vec::new();
        let mut failures = Vec::new();
        for &seed in seeds {
            match train_and_score::<S>(data, name, dim, init_width, base, beam, seed) {
                Ok((acc, b)) => {
                    accuracies.push(acc);
                    bleus.push(b);
                }
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        rows.push(AblationRow {
            config: name.to_string(),
            parameters,
            token_accuracy: median(accuracies),
            bleu: median(bleus),
            delta_vs_baseline: None,
            failures,
        });
    }
    let baseline = rows[0].token_accuracy;
    for row in &mut rows {
        row.delta_vs_baseline = match (row.token_accuracy, baseline) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
    }
    AblationReport { task: task_name.to_string(), dim, seeds: seeds.to_vec(), rows }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".to_string())
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out =
        String::from("config,parameters,token_accuracy,bleu,delta_vs_baseline,failures\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.config,
            r.parameters,
            fmt_opt(r.token_accuracy),
            fmt_opt(r.bleu),
            fmt_opt(r.delta_vs_baseline),
            r.failures.join("; "),
        ));
    }
    out
}

pub fn ablation_table(report: &AblationReport) -> String {
    let mut out = format!(
        "task {} dim {} seeds {:?}\n{:<14} {:>10} {:>9} {:>8} {:>7}\n",
        report.task, report.dim, report.seeds, "CONFIG", "PARAMS", "TOKACC", "BLEU", "DELTA"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<14} {:>10} {:>9} {:>8} {:>7}{}\n",
            r.config,
            r.parameters,
            fmt_opt(r.token_accuracy),
            fmt_opt(r.bleu),
            fmt_opt(r.delta_vs_baseline),
            if r.failures.is_empty() {
                String::new()
            } else {
                format!("  FAILED: {}", r.failures.join("; "))
            },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{generate, TaskKind, TaskSpec};

    fn lines(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_corpora_score_one_hundred() {
        let h = lines(&["a b c d", "x y z w v"]);
        let r = bleu(&h, &h, 4, false).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
        assert!(r.precisions.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn clipped_unigram_fixture() {
        let h = lines(&["the the the the the the the"]);
        let r = lines(&["the cat is on the mat"]);
        let report = bleu(&h, &r, 4, false).unwrap();
        assert!((report.precisions[0] - 2.0 / 7.0).abs() < 1e-6);
        assert_eq!(report.bleu, 0.0, "higher-order precisions are zero");
    }

    #[test]
    fn brevity_penalty_fixture() {
        let h = lines(&["a b c d e"]);
        let r = lines(&["a b c d e f g h i j"]);
        let report = bleu(&h, &r, 4, false).unwrap();
        assert!(report.precisions.iter().all(|&p| p == 1.0));
        assert!((report.brevity_penalty - (-1.0f64).exp()).abs() < 1e-6);
        assert!((report.bleu - 100.0 * (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn zero_length_hypothesis_scores_zero() {
        let h = lines(&[""]);
        let r = lines(&["a b"]);
        let report = bleu(&h, &r, 4, false).unwrap();
        assert_eq!(report.bleu, 0.0);
        assert_eq!(report.hyp_len, 0);
    }

    #[test]
    fn lowercase_flag_folds_case() {
        let h = lines(&["The CAT sat here"]);
        let r = lines(&["the cat sat here"]);
        assert_eq!(bleu(&h, &r, 4, false).unwrap().bleu, 0.0);
        assert_eq!(bleu(&h, &r, 4, true).unwrap().bleu, 100.0);
        // Already-lowercased corpora are unaffected by the flag.
        let a = bleu(&r, &r, 4, false).unwrap();
        let b = bleu(&r, &r, 4, true).unwrap();
        assert_eq!(a.bleu, b.bleu);
    }

    #[test]
    fn corpus_bleu_is_order_invariant() {
        let h = lines(&["a b c", "d e f g", "h i"]);
        let r = lines(&["a b x", "d e f y", "h z"]);
        let fwd = bleu(&h, &r, 1, false).unwrap();
        let rev_h: Vec<String> = h.iter().rev().cloned().collect();
        let rev_r: Vec<String> = r.iter().rev().cloned().collect();
        let rev = bleu(&rev_h, &rev_r, 1, false).unwrap();
        assert_eq!(fwd.bleu, rev.bleu);
        assert_eq!(fwd.precisions, rev.precisions);
    }

    #[test]
    fn input_shape_errors() {
        let h = lines(&["a"]);
        let r = lines(&["a", "b"]);
        assert!(matches!(bleu(&h, &r, 4, false).unwrap_err(), Error::Corpus(_)));
        assert!(matches!(bleu(&[], &[], 4, false).unwrap_err(), Error::Empty(_)));
    }

    #[test]
    fn buckets_flag_empty_and_match_corpus_at_zero() {
        let src_lens = [5, 5, 5];
        let h = lines(&["a b c", "d e f", "g h i"]);
        let r = lines(&["a b c", "d x f", "g h z"]);
        let buckets = length_buckets(&src_lens, &h, &r, &[0, 10, 20]).unwrap();
        let corpus = bleu(&h, &r, 4, false).unwrap();
        assert_eq!(buckets[0].bleu, Some(corpus.bleu));
        assert_eq!(buckets[0].sentences, 3);
        assert!(buckets[1].bleu.is_none(), "no source longer than 10");
        assert!(buckets[2].bleu.is_none());
    }

    #[test]
    fn buckets_show_degradation_on_longer_sources() {
        // Short sources translate perfectly, long ones poorly.
        let short = "a b c";
        let long = "p q r s t u v w x y z a b";
        let src_lens = [3, 13];
        let h = lines(&[short, "p q r s wrong wrong wrong wrong wrong x y z a"]);
        let r = lines(&[short, long]);
        let buckets = length_buckets(&src_lens, &h, &r, &[0, 10]).unwrap();
        let all = buckets[0].bleu.unwrap();
        let long_only = buckets[1].bleu.unwrap();
        assert!(long_only < all, "{long_only} vs {all}");
        assert_eq!(buckets[1].sentences, 1);
    }

    fn tiny_task() -> TaskData {
        generate(&TaskSpec {
            kind: TaskKind::Reverse,
            words: 4,
            min_len: 2,
            max_len: 4,
            train_pairs: 24,
            test_pairs: 8,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            dropout: 0.0,
            lr_override: Some(0.05),
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_suite_is_deterministic_and_counts_parameters() {
        let data = tiny_task();
        let cfg = tiny_train_cfg();
        let run = || {
            ablation_suite::<f64>(&data, "reverse", 3, 0.04, &cfg, 2, &["RNN", "NTM-RNN"], &[1, 2])
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.rows[0].parameters < a.rows[1].parameters);
        assert!(a.rows.iter().all(|r| r.failures.is_empty()), "{:?}", a.rows);
        assert_eq!(a.rows[0].delta_vs_baseline, Some(0.0));
        let csv = ablation_csv(&a);
        assert!(csv.starts_with("config,parameters"));
        assert!(csv.contains("NTM-RNN"));
        assert!(ablation_table(&a).contains("CONFIG"));
    }

    #[test]
    fn ablation_suite_records_failures_and_continues() {
        let data = tiny_task();
        let mut cfg = tiny_train_cfg();
        cfg.lr_override = Some(f64::NAN);
        let report =
            ablation_suite::<f64>(&data, "reverse", 3, 0.04, &cfg, 2, &["RNN", "EMB"], &[1]);
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.failures.len(), 1, "{row:?}");
            assert!(row.token_accuracy.is_none());
        }
    }
}
