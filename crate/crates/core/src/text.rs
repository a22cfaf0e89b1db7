//! Tweet text pipeline: cleaning, tokenization, stopword removal,
//! vocabulary construction, fixed-length id encoding, and bag-of-words /
//! TF-IDF featurization.
//!
//! Cleaning is aggressive by design: URLs, mentions, and hashtags vanish as
//! whole tokens, and whatever remains is stripped down to lowercase ASCII
//! letters. That removes digits, punctuation, and emoji in one rule and
//! makes `clean_text` idempotent.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;
use thiserror::Error;

/// Reserved id for right-padding.
pub const PAD_ID: u32 = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const OOV_ID: u32 = 1;

const PAD_TOKEN: &str = "<pad>";
const OOV_TOKEN: &str = "<oov>";

static STOPWORDS_RAW: &str = include_str!("../../../data/stopwords_en.txt");

/// The bundled English stopword list (179 entries), loaded once.
pub fn english_stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS_RAW.lines().filter(|l| !l.is_empty()).collect())
}

/// Lowercase and strip tweet noise.
///
/// Tokens that start with `http://`, `https://`, `www.`, `@`, or `#` are
/// dropped whole; every other token keeps only the codepoints `a..=z`.
/// Output tokens are joined by single spaces with no leading or trailing
/// whitespace. Total on all inputs, and a fixed point of itself.
pub fn clean_text(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for token in lowered.split_whitespace() {
        if token.starts_with("http://")
            || token.starts_with("https://")
            || token.starts_with("www.")
            || token.starts_with('@')
            || token.starts_with('#')
        {
            continue;
        }
        let kept: String = token.chars().filter(|c| c.is_ascii_lowercase()).collect();
        if kept.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&kept);
    }
    out
}

/// Whitespace split; never yields empty tokens.
pub fn tokenize(cleaned: &str) -> Vec<String> {
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Order-preserving filter of `tokens` against `stopwords`.
pub fn remove_stopwords(tokens: &[String], stopwords: &HashSet<&str>) -> Vec<String> {
    tokens.iter().filter(|t| !stopwords.contains(t.as_str())).cloned().collect()
}

/// Clean, tokenize, and drop stopwords in one call.
pub fn preprocess(raw: &str) -> Vec<String> {
    remove_stopwords(&tokenize(&clean_text(raw)), english_stopwords())
}

/// Token ↔ id bijection with frequency metadata. Ids are dense: 0 is the
/// pad id, 1 the out-of-vocabulary id, real tokens start at 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    frequencies: Vec<u64>,
}

/// Failures while reading a vocabulary file.
#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary line {line}: expected `token<TAB>id<TAB>frequency`")]
    Malformed { line: usize },
    #[error("vocabulary line {line}: ids must be dense and sorted, expected {expected}")]
    NonDenseIds { line: usize, expected: u32 },
    #[error("vocabulary is missing the reserved pad/oov rows")]
    MissingReserved,
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Vocabulary {
    /// Build from token lists. Tokens with frequency ≥ `min_freq` are ranked
    /// by (frequency desc, token asc), truncated to `max_size − 2`, and
    /// assigned ids from 2 upward. Deterministic for a given corpus.
    pub fn build(corpus: &[Vec<String>], min_freq: u64, max_size: usize) -> Vocabulary {
        assert!(min_freq >= 1, "min_freq must be at least 1");
        assert!(max_size >= 2, "max_size must leave room for pad and oov");
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in corpus {
            for token in doc {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - 2);

        let mut id_to_token = vec![PAD_TOKEN.to_owned(), OOV_TOKEN.to_owned()];
        let mut frequencies = vec![0u64, 0u64];
        let mut token_to_id = HashMap::with_capacity(ranked.len());
        for (token, count) in ranked {
            token_to_id.insert(token.to_owned(), id_to_token.len() as u32);
            id_to_token.push(token.to_owned());
            frequencies.push(count);
        }
        Vocabulary { token_to_id, id_to_token, frequencies }
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // pad and oov always exist
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequencies.get(id as usize).copied().unwrap_or(0)
    }

    /// Serialize as `token<TAB>id<TAB>frequency` lines sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", token, id, self.frequencies[id]).expect("string write");
        }
        out
    }

    /// Parse the `to_tsv` format back.
    pub fn from_tsv(text: &str) -> Result<Vocabulary, VocabError> {
        let mut id_to_token = Vec::new();
        let mut frequencies = Vec::new();
        let mut token_to_id = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (token, id, freq) = match (parts.next(), parts.next(), parts.next(), parts.next())
            {
                (Some(t), Some(i), Some(f), None) => (t, i, f),
                _ => return Err(VocabError::Malformed { line: i + 1 }),
            };
            let id: u32 = id.parse().map_err(|_| VocabError::Malformed { line: i + 1 })?;
            let freq: u64 = freq.parse().map_err(|_| VocabError::Malformed { line: i + 1 })?;
            let expected = id_to_token.len() as u32;
            if id != expected {
                return Err(VocabError::NonDenseIds { line: i + 1, expected });
            }
            if id >= 2 {
                if token_to_id.contains_key(token) {
                    return Err(VocabError::DuplicateToken(token.to_owned()));
                }
                token_to_id.insert(token.to_owned(), id);
            }
            id_to_token.push(token.to_owned());
            frequencies.push(freq);
        }
        if id_to_token.len() < 2 || id_to_token[0] != PAD_TOKEN || id_to_token[1] != OOV_TOKEN {
            return Err(VocabError::MissingReserved);
        }
        Ok(Vocabulary { token_to_id, id_to_token, frequencies })
    }

    pub fn write_tsv(&self, path: &std::path::Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_tsv())
    }

    pub fn read_tsv(path: &std::path::Path) -> Result<Vocabulary, VocabError> {
        Ok(Vocabulary::from_tsv(&std::fs::read_to_string(path)?)?)
    }
}

/// Encode tokens as exactly `max_len` ids: unknown tokens map to [`OOV_ID`],
/// overlong sequences keep their first `max_len` tokens, short ones are
/// right-padded with [`PAD_ID`].
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut ids = Vec::with_capacity(max_len);
    for token in tokens.iter().take(max_len) {
        ids.push(vocab.id(token).unwrap_or(OOV_ID));
    }
    ids.resize(max_len, PAD_ID);
    ids
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn empty() -> Self {
        SparseVector { indices: Vec::new(), values: Vec::new() }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dot product of two sparse vectors (indices sorted).
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Occurrence counts over vocabulary ids. Out-of-vocabulary tokens are
/// ignored and the reserved ids never appear.
pub fn count_vectorize(tokens: &[String], vocab: &Vocabulary) -> SparseVector {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for token in tokens {
        if let Some(id) = vocab.id(token) {
            *counts.entry(id).or_insert(0.0) += 1.0;
        }
    }
    let mut v = SparseVector::empty();
    for (id, count) in counts {
        v.indices.push(id);
        v.values.push(count);
    }
    v
}

#[derive(Debug, Error)]
#[error("tfidf: n_docs {n_docs} does not match {actual} provided count vectors")]
pub struct TfidfMismatch {
    pub n_docs: usize,
    pub actual: usize,
}

/// Smoothed inverse document frequencies fit on a count corpus:
/// idf(t) = ln((1 + n) / (1 + df(t))) + 1.
#[derive(Clone, Debug)]
pub struct TfidfWeights {
    idf: HashMap<u32, f64>,
    n_docs: usize,
}

impl TfidfWeights {
    pub fn fit(counts: &[SparseVector]) -> TfidfWeights {
        let n = counts.len();
        let mut df: HashMap<u32, u64> = HashMap::new();
        for doc in counts {
            for &id in &doc.indices {
                *df.entry(id).or_insert(0) += 1;
            }
        }
        let idf = df
            .into_iter()
            .map(|(id, d)| (id, ((1 + n) as f64 / (1 + d) as f64).ln() + 1.0))
            .collect();
        TfidfWeights { idf, n_docs: n }
    }

    /// idf for a feature; unseen features get the maximum smoothing value.
    pub fn idf(&self, id: u32) -> f64 {
        self.idf
            .get(&id)
            .copied()
            .unwrap_or_else(|| ((1 + self.n_docs) as f64).ln() + 1.0)
    }

    /// tf·idf then L2 normalization; the all-zero vector stays zero.
    pub fn transform(&self, counts: &SparseVector) -> SparseVector {
        let mut v = SparseVector {
            indices: counts.indices.clone(),
            values: counts
                .indices
                .iter()
                .zip(&counts.values)
                .map(|(&id, &tf)| tf * self.idf(id))
                .collect(),
        };
        let norm = v.l2_norm();
        if norm > 0.0 {
            for value in &mut v.values {
                *value /= norm;
            }
        }
        v
    }
}

/// TF-IDF over one corpus: fit document frequencies on `counts` and
/// transform every document. `n_docs` must equal `counts.len()`.
pub fn tfidf_transform(
    counts: &[SparseVector],
    n_docs: usize,
) -> Result<Vec<SparseVector>, TfidfMismatch> {
    if n_docs != counts.len() || counts.is_empty() {
        return Err(TfidfMismatch { n_docs, actual: counts.len() });
    }
    let weights = TfidfWeights::fit(counts);
    Ok(counts.iter().map(|c| weights.transform(c)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn stopword_list_has_expected_size() {
        assert_eq!(english_stopwords().len(), 179);
        assert!(english_stopwords().contains("the"));
        assert!(english_stopwords().contains("wouldn't"));
    }

    #[test]
    fn clean_empty_is_empty() {
        assert_eq!(clean_text(""), "");
    }

    #[test]
    fn clean_strips_tweet_noise() {
        assert_eq!(clean_text("@user I LOVE this!!! http://t.co/x 2024 #happy"), "i love this");
    }

    #[test]
    fn clean_fixed_point_on_plain_text() {
        assert_eq!(clean_text("no noise here"), "no noise here");
    }

    #[test]
    fn clean_handles_each_noise_class() {
        assert_eq!(clean_text("WWW.SPAM.COM says hi"), "says hi");
        assert_eq!(clean_text("https://x.io/a?b=1 ok"), "ok");
        assert_eq!(clean_text("#tag"), "");
        assert_eq!(clean_text("mood 😀😀 100%"), "mood");
        assert_eq!(clean_text("don't stop"), "dont stop");
        assert_eq!(clean_text("  spaced   out  "), "spaced out");
    }

    #[test]
    fn clean_is_idempotent_on_fuzzed_strings() {
        // 10k random unicode-ish strings drawn from a deterministic stream.
        let mut rng = Rng::new(0xC1EA);
        let alphabet: Vec<char> =
            "abcXYZ 019!@#:/.😀é✓\t\n#@wwwhttp".chars().collect();
        for _ in 0..10_000 {
            let len = rng.index(24);
            let s: String = (0..len).map(|_| alphabet[rng.index(alphabet.len())]).collect();
            let once = clean_text(&s);
            assert_eq!(clean_text(&once), once, "not idempotent on {:?}", s);
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("i love this"), toks(&["i", "love", "this"]));
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("a  b"), toks(&["a", "b"]));
    }

    #[test]
    fn stopword_filter_examples() {
        let sw: HashSet<&str> = ["the", "is"].into_iter().collect();
        assert_eq!(remove_stopwords(&toks(&["the", "cat", "is", "mean"]), &sw), toks(&["cat", "mean"]));
        assert_eq!(remove_stopwords(&[], &sw), Vec::<String>::new());
        let empty: HashSet<&str> = HashSet::new();
        assert_eq!(remove_stopwords(&toks(&["cat"]), &empty), toks(&["cat"]));
    }

    #[test]
    fn vocabulary_ranks_by_frequency_then_token() {
        let corpus = vec![toks(&["a", "b", "a"])];
        let v = Vocabulary::build(&corpus, 1, 10);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.frequency(2), 2);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn vocabulary_tie_breaks_lexicographically() {
        let corpus = vec![toks(&["zed", "ant", "zed", "ant", "mid"])];
        let v = Vocabulary::build(&corpus, 1, 10);
        assert_eq!(v.id("ant"), Some(2));
        assert_eq!(v.id("zed"), Some(3));
        assert_eq!(v.id("mid"), Some(4));
    }

    #[test]
    fn vocabulary_empty_corpus_has_only_reserved() {
        let v = Vocabulary::build(&[], 1, 10);
        assert_eq!(v.len(), 2);
        assert_eq!(v.token(PAD_ID), Some("<pad>"));
        assert_eq!(v.token(OOV_ID), Some("<oov>"));
    }

    #[test]
    fn vocabulary_min_freq_filters_everything() {
        let v = Vocabulary::build(&[toks(&["x", "y"])], 2, 10);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn vocabulary_truncates_to_max_size() {
        let corpus = vec![toks(&["a", "b", "c", "a", "b", "a"])];
        let v = Vocabulary::build(&corpus, 1, 4);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.id("c"), None);
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let corpus: Vec<Vec<String>> = (0..50)
            .map(|i| toks(&[["red", "green", "blue", "cyan"][i % 4], "common"]))
            .collect();
        let a = Vocabulary::build(&corpus, 1, 100);
        let b = Vocabulary::build(&corpus, 1, 100);
        assert_eq!(a, b);
        assert_eq!(a.to_tsv(), b.to_tsv());
    }

    #[test]
    fn vocabulary_tsv_round_trip() {
        let corpus = vec![toks(&["a", "b", "a", "c"])];
        let v = Vocabulary::build(&corpus, 1, 10);
        let parsed = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(v, parsed);
    }

    #[test]
    fn encode_pads_right() {
        let v = Vocabulary::build(&[toks(&["a"])], 1, 10);
        assert_eq!(encode(&toks(&["a"]), &v, 3), vec![2, 0, 0]);
    }

    #[test]
    fn encode_maps_unknown_to_oov() {
        let v = Vocabulary::build(&[toks(&["a"])], 1, 10);
        assert_eq!(encode(&toks(&["z"]), &v, 2), vec![1, 0]);
    }

    #[test]
    fn encode_truncates_tail() {
        let v = Vocabulary::build(&[toks(&["a", "b", "a"])], 1, 10);
        assert_eq!(encode(&toks(&["a", "b", "a"]), &v, 2), vec![2, 3]);
    }

    #[test]
    fn encode_length_and_range_invariant() {
        let corpus = vec![toks(&["w", "x", "y", "z", "w"])];
        let v = Vocabulary::build(&corpus, 1, 4);
        let mut rng = Rng::new(99);
        let pool = ["w", "x", "y", "z", "unseen", "other"];
        for _ in 0..500 {
            let n = rng.index(12);
            let tokens: Vec<String> =
                (0..n).map(|_| pool[rng.index(pool.len())].to_string()).collect();
            let ids = encode(&tokens, &v, 7);
            assert_eq!(ids.len(), 7);
            assert!(ids.iter().all(|&id| (id as usize) < v.len()));
        }
    }

    #[test]
    fn count_vectorize_counts_in_vocab_tokens() {
        let v = Vocabulary::build(&[toks(&["a", "a", "b"])], 1, 10);
        let sv = count_vectorize(&toks(&["a", "a", "b"]), &v);
        assert_eq!(sv.indices, vec![2, 3]);
        assert_eq!(sv.values, vec![2.0, 1.0]);
    }

    #[test]
    fn count_vectorize_empty_and_oov() {
        let v = Vocabulary::build(&[toks(&["a"])], 1, 10);
        assert_eq!(count_vectorize(&[], &v), SparseVector::empty());
        assert_eq!(count_vectorize(&toks(&["z"]), &v), SparseVector::empty());
    }

    #[test]
    fn count_vectorize_sum_matches_in_vocab_count() {
        let corpus = vec![toks(&["p", "q", "r"])];
        let v = Vocabulary::build(&corpus, 1, 10);
        let mut rng = Rng::new(3);
        let pool = ["p", "q", "r", "nope"];
        for _ in 0..200 {
            let tokens: Vec<String> =
                (0..rng.index(15)).map(|_| pool[rng.index(4)].to_string()).collect();
            let in_vocab = tokens.iter().filter(|t| v.id(t).is_some()).count() as f64;
            let sv = count_vectorize(&tokens, &v);
            assert_eq!(sv.values.iter().sum::<f64>(), in_vocab);
        }
    }

    #[test]
    fn tfidf_single_doc_single_term() {
        let v = Vocabulary::build(&[toks(&["a"])], 1, 10);
        let counts = vec![count_vectorize(&toks(&["a"]), &v)];
        let out = tfidf_transform(&counts, 1).unwrap();
        // idf = ln(2/2) + 1 = 1, then L2 normalization leaves exactly 1.
        assert_eq!(out[0].values, vec![1.0]);
    }

    #[test]
    fn tfidf_ubiquitous_term_gets_minimum_idf() {
        let v = Vocabulary::build(&[toks(&["a", "b", "c"])], 1, 10);
        let counts: Vec<SparseVector> = vec![
            count_vectorize(&toks(&["a", "b"]), &v),
            count_vectorize(&toks(&["a"]), &v),
            count_vectorize(&toks(&["a", "c"]), &v),
        ];
        let w = TfidfWeights::fit(&counts);
        let a = v.id("a").unwrap();
        assert!((w.idf(a) - 1.0).abs() < 1e-15, "idf = ln(4/4)+1 = 1, got {}", w.idf(a));
    }

    #[test]
    fn tfidf_empty_document_stays_zero() {
        let v = Vocabulary::build(&[toks(&["a"])], 1, 10);
        let counts = vec![count_vectorize(&toks(&["a"]), &v), SparseVector::empty()];
        let out = tfidf_transform(&counts, 2).unwrap();
        assert_eq!(out[1], SparseVector::empty());
    }

    #[test]
    fn tfidf_rejects_mismatched_n_docs() {
        let counts = vec![SparseVector::empty()];
        assert!(tfidf_transform(&counts, 2).is_err());
    }

    #[test]
    fn tfidf_vectors_are_unit_or_zero() {
        let corpus: Vec<Vec<String>> = vec![
            toks(&["a", "b", "b"]),
            toks(&["c"]),
            toks(&["a", "c", "d", "d", "d"]),
            toks(&[]),
        ];
        let v = Vocabulary::build(&corpus, 1, 100);
        let counts: Vec<SparseVector> =
            corpus.iter().map(|doc| count_vectorize(doc, &v)).collect();
        let out = tfidf_transform(&counts, 4).unwrap();
        for doc in &out {
            let norm = doc.l2_norm();
            assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9, "norm {}", norm);
        }
    }
}
