//! Vocabulary construction, numericalization, length filtering, padding and
//! batching of parallel text.
//!
//! Tokenization is whitespace splitting throughout; text is expected to be
//! pre-tokenized. Parallel corpora are two UTF-8 files, one sentence per
//! line, line i of each file aligned.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const OOV: TokenId = 3;

/// Reserved surface forms, in id order. Corpus tokens spelled exactly like
/// one of these are dropped during counting so ids stay unambiguous.
pub const RESERVED: [&str; 4] = ["PAD", "BOS", "EOS", "OOV"];

/// Bidirectional token/id map. Ids are dense `0..len`, reserved ids first,
/// then corpus tokens by descending frequency (ties broken lexicographically).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_token_list(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < RESERVED.len() {
            return Err(Error::Corpus(format!(
                "vocabulary needs at least the {} reserved tokens, got {}",
                RESERVED.len(),
                id_to_token.len()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *want {
                return Err(Error::Corpus(format!(
                    "vocabulary id {i} must be {want:?}, got {:?}",
                    id_to_token[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    /// Count tokens across `lines` and keep the `max_size - 4` most frequent
    /// after the reserved entries. Errors on a corpus with no tokens.
    pub fn build<I>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<str>,
    {
        assert!(
            max_size >= RESERVED.len(),
            "vocabulary max_size must be at least {}, got {max_size}",
            RESERVED.len()
        );
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Corpus("empty corpus: no tokens to build a vocabulary from".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
        ranked.truncate(max_size - RESERVED.len());

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_token_list(id_to_token)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn lookup(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(OOV)
    }

    pub fn render(&self, id: TokenId) -> &str {
        &self.id_to_token[id]
    }

    pub fn numericalize(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    pub fn denumericalize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.render(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Self::from_token_list(tokens)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Read two aligned files into sentence pairs.
pub fn read_parallel(src_path: &Path, tgt_path: &Path) -> Result<Vec<(String, String)>> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Corpus(format!(
            "parallel files disagree: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

/// Keep a pair iff both sides have at most `max_len` tokens (inclusive).
pub fn filter_pairs(pairs: Vec<(String, String)>, max_len: usize) -> Result<Vec<(String, String)>> {
    if max_len == 0 {
        return Err(Error::Config(
            "max_len = 0 would drop the whole corpus; use at least 1".into(),
        ));
    }
    Ok(pairs
        .into_iter()
        .filter(|(s, t)| {
            s.split_whitespace().count() <= max_len && t.split_whitespace().count() <= max_len
        })
        .collect())
}

/// Padded, masked batch of numericalized sentence pairs.
///
/// Target rows end with EOS before any padding; `tgt_lens` counts that EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    pub src: Vec<Vec<TokenId>>,
    pub src_mask: Vec<Vec<bool>>,
    pub src_lens: Vec<usize>,
    pub tgt: Vec<Vec<TokenId>>,
    pub tgt_mask: Vec<Vec<bool>>,
    pub tgt_lens: Vec<usize>,
}

impl ParallelBatch {
    pub fn size(&self) -> usize {
        self.src.len()
    }

    /// Source ids of sentence `i` without padding.
    pub fn src_sentence(&self, i: usize) -> &[TokenId] {
        &self.src[i][..self.src_lens[i]]
    }

    /// Target ids of sentence `i` without padding; last element is EOS.
    pub fn tgt_sentence(&self, i: usize) -> &[TokenId] {
        &self.tgt[i][..self.tgt_lens[i]]
    }
}

fn pad_block(rows: Vec<Vec<TokenId>>) -> (Vec<Vec<TokenId>>, Vec<Vec<bool>>, Vec<usize>) {
    let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    let width = lens.iter().copied().max().unwrap_or(0);
    let mut padded = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for (mut row, &len) in rows.into_iter().zip(&lens) {
        row.resize(width, PAD);
        let mut mask = vec![false; width];
        for m in mask.iter_mut().take(len) {
            *m = true;
        }
        padded.push(row);
        masks.push(mask);
    }
    (padded, masks, lens)
}

/// Shuffle `pairs` under `rng`, numericalize, append EOS to each target, pad
/// and mask. The final batch may be short. Empty source sentences are given
/// a single OOV token so every sentence has at least one annotation position.
pub fn make_batches(
    pairs: &[(String, String)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<ParallelBatch>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    if pairs.is_empty() {
        return Err(Error::Corpus("no sentence pairs to batch".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);

    let mut batches = Vec::with_capacity(pairs.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut src_rows = Vec::with_capacity(chunk.len());
        let mut tgt_rows = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (s, t) = &pairs[i];
            let mut src_ids = src_vocab.numericalize(s);
            if src_ids.is_empty() {
                src_ids.push(OOV);
            }
            let mut tgt_ids = tgt_vocab.numericalize(t);
            tgt_ids.push(EOS);
            src_rows.push(src_ids);
            tgt_rows.push(tgt_ids);
        }
        let (src, src_mask, src_lens) = pad_block(src_rows);
        let (tgt, tgt_mask, tgt_lens) = pad_block(tgt_rows);
        batches.push(ParallelBatch {
            src,
            src_mask,
            src_lens,
            tgt,
            tgt_mask,
            tgt_lens,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, Rng};
    use proptest::prelude::*;

    fn pairs_of(strs: &[(&str, &str)]) -> Vec<(String, String)> {
        strs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn build_orders_by_frequency_then_token() {
        let v = Vocabulary::build(["a a b"], 10).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.lookup("a"), 4);
        assert_eq!(v.lookup("b"), 5);
        assert_eq!(v.render(PAD), "PAD");
        assert_eq!(v.render(BOS), "BOS");
        assert_eq!(v.render(EOS), "EOS");
        assert_eq!(v.render(OOV), "OOV");

        let tie = Vocabulary::build(["y x"], 10).unwrap();
        assert_eq!(tie.lookup("x"), 4, "equal counts break ties lexicographically");
        assert_eq!(tie.lookup("y"), 5);
    }

    #[test]
    fn build_truncates_to_max_size() {
        let line: String = (0..50).map(|i| format!("tok{i:02} ")).collect();
        let v = Vocabulary::build([line.as_str()], 10).unwrap();
        assert_eq!(v.len(), 10); // 4 reserved + 6 kept
        // All 50 are equally frequent; the lexicographically first 6 survive.
        for i in 0..6 {
            assert_ne!(v.lookup(&format!("tok{i:02}")), OOV);
        }
        assert_eq!(v.lookup("tok49"), OOV);
    }

    #[test]
    fn build_rejects_empty_corpus() {
        assert!(matches!(
            Vocabulary::build(["", "   "], 10),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn lookup_unknown_is_oov_and_renders_literally() {
        let v = Vocabulary::build(["hello world"], 10).unwrap();
        assert_eq!(v.lookup("absent"), OOV);
        assert_eq!(v.render(v.lookup("absent")), "OOV");
        assert_eq!(v.denumericalize(&v.numericalize("hello absent world")), "hello OOV world");
    }

    #[test]
    fn numericalize_roundtrip_in_vocab() {
        let v = Vocabulary::build(["the cat sat on the mat"], 30).unwrap();
        let line = "the mat sat";
        assert_eq!(v.denumericalize(&v.numericalize(line)), line);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["b a a c c c"], 10).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn load_rejects_mangled_reserved_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "PAD\nBOS\nXXX\nOOV\nword\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Corpus(_))));
    }

    #[test]
    fn filter_is_inclusive_at_the_boundary() {
        let long50 = vec!["w"; 50].join(" ");
        let long51 = vec!["w"; 51].join(" ");
        let pairs = vec![
            (long50.clone(), long50.clone()),
            (long51.clone(), "a b c".to_string()),
        ];
        let kept = filter_pairs(pairs, 50).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0, long50);
    }

    #[test]
    fn filter_rejects_zero_max_len() {
        assert!(matches!(
            filter_pairs(pairs_of(&[("a", "b")]), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn read_parallel_demands_equal_line_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        std::fs::write(&s, "one\ntwo\n").unwrap();
        std::fs::write(&t, "eins\n").unwrap();
        assert!(matches!(read_parallel(&s, &t), Err(Error::Corpus(_))));
    }

    #[test]
    fn single_pair_batch() {
        let v = Vocabulary::build(["a b c d"], 10).unwrap();
        let pairs = pairs_of(&[("a b", "c d")]);
        let mut rng = Rng::stream(0, streams::SHUFFLE, 0);
        let batches = make_batches(&pairs, &v, &v, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.size(), 1);
        assert_eq!(b.src_mask[0], vec![true, true]);
        assert_eq!(b.tgt_sentence(0).last(), Some(&EOS));
        assert_eq!(b.tgt_lens[0], 3); // c d EOS
    }

    #[test]
    fn ragged_batch_pads_and_masks() {
        let v = Vocabulary::build(["a b c d e"], 10).unwrap();
        let pairs = pairs_of(&[("a b", "a"), ("a b c d e", "b")]);
        let mut rng = Rng::stream(1, streams::SHUFFLE, 0);
        let batches = make_batches(&pairs, &v, &v, 2, &mut rng).unwrap();
        let b = &batches[0];
        assert_eq!(b.src[0].len(), 5);
        for i in 0..2 {
            let mask_sum: usize = b.src_mask[i].iter().filter(|&&m| m).count();
            assert_eq!(mask_sum, b.src_lens[i]);
            for t in b.src_lens[i]..b.src[i].len() {
                assert_eq!(b.src[i][t], PAD);
            }
        }
        let short = (0..2).find(|&i| b.src_lens[i] == 2).unwrap();
        assert_eq!(b.src_mask[short].iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let pairs: Vec<(String, String)> =
            (0..17).map(|i| (format!("a b c{i}"), format!("d e f{i}"))).collect();
        let v = Vocabulary::build(
            pairs.iter().flat_map(|(s, t)| [s.clone(), t.clone()]),
            100,
        )
        .unwrap();
        let run = |seed| {
            let mut rng = Rng::stream(seed, streams::SHUFFLE, 3);
            make_batches(&pairs, &v, &v, 4, &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10), "different seeds should reorder 17 pairs");
        assert_eq!(run(9).len(), 5, "last short batch is emitted");
        assert_eq!(run(9)[4].size(), 1);
    }

    #[test]
    fn empty_source_sentence_gets_an_oov_position() {
        let v = Vocabulary::build(["a b"], 10).unwrap();
        let pairs = pairs_of(&[("", "a")]);
        let mut rng = Rng::stream(0, streams::SHUFFLE, 0);
        let b = &make_batches(&pairs, &v, &v, 1, &mut rng).unwrap()[0];
        assert_eq!(b.src_sentence(0), &[OOV]);
    }

    proptest! {
        #[test]
        fn mask_sums_match_lengths(
            lens in proptest::collection::vec((1usize..8, 0usize..8), 1..12),
            seed in any::<u64>(),
        ) {
            let v = Vocabulary::build(["w0 w1 w2 w3 w4 w5 w6 w7"], 20).unwrap();
            let pairs: Vec<(String, String)> = lens.iter()
                .map(|&(s, t)| {
                    let src = (0..s).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
                    let tgt = (0..t).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
                    (src, tgt)
                })
                .collect();
            let mut rng = Rng::new(seed);
            let batches = make_batches(&pairs, &v, &v, 3, &mut rng).unwrap();
            let mut seen = 0usize;
            for b in &batches {
                for i in 0..b.size() {
                    let sm: usize = b.src_mask[i].iter().filter(|&&m| m).count();
                    let tm: usize = b.tgt_mask[i].iter().filter(|&&m| m).count();
                    prop_assert_eq!(sm, b.src_lens[i]);
                    prop_assert_eq!(tm, b.tgt_lens[i]);
                    prop_assert_eq!(*b.tgt_sentence(i).last().unwrap(), EOS);
                    seen += 1;
                }
            }
            prop_assert_eq!(seen, pairs.len());
        }
    }
}
