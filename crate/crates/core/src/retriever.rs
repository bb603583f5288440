//! TF-IDF knowledge selection by cosine similarity with the dialogue context.

use std::collections::HashMap;

use crate::corpus::{KnowledgePiece, Utterance};
use crate::error::{GcnError, Result};

/// Sparse vector as `(term index, weight)` pairs sorted by term index.
pub type SparseVec = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct TfidfIndex {
    terms: HashMap<String, usize>,
    idf: Vec<f64>,
    doc_vectors: Vec<SparseVec>,
    pieces: Vec<KnowledgePiece>,
}

fn term_counts<'a>(terms: &HashMap<String, usize>, tokens: impl IntoIterator<Item = &'a String>) -> HashMap<usize, f64> {
    let mut tf = HashMap::new();
    for t in tokens {
        if let Some(&i) = terms.get(t) {
            *tf.entry(i).or_insert(0.0) += 1.0;
        }
    }
    tf
}

pub(crate) fn normalize(mut v: SparseVec) -> SparseVec {
    v.sort_by_key(|&(i, _)| i);
    let norm = v.iter().map(|&(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in &mut v {
            *w /= norm;
        }
    }
    v
}

pub fn dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

impl TfidfIndex {
    /// `idf(t) = ln((1 + D) / (1 + df(t))) + 1`; document vectors are raw
    /// counts times idf, L2-normalized.
    pub fn build(pieces: &[KnowledgePiece]) -> Result<Self> {
        if pieces.is_empty() {
            return Err(GcnError::Config("cannot build a retrieval index over zero knowledge pieces".into()));
        }
        let mut terms: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<f64> = Vec::new();
        for p in pieces {
            let mut seen = std::collections::HashSet::new();
            for t in &p.tokens {
                let next = terms.len();
                let i = *terms.entry(t.clone()).or_insert(next);
                if i == df.len() {
                    df.push(0.0);
                }
                if seen.insert(i) {
                    df[i] += 1.0;
                }
            }
        }
        let d = pieces.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&f| ((1.0 + d) / (1.0 + f)).ln() + 1.0).collect();
        let doc_vectors = pieces
            .iter()
            .map(|p| {
                let tf = term_counts(&terms, &p.tokens);
                normalize(tf.into_iter().map(|(i, c)| (i, c * idf[i])).collect())
            })
            .collect();
        Ok(TfidfIndex {
            terms,
            idf,
            doc_vectors,
            pieces: pieces.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[KnowledgePiece] {
        &self.pieces
    }

    /// Pieces with the given ids, in the order given; unknown ids are skipped.
    pub fn lookup(&self, ids: &[String]) -> Vec<KnowledgePiece> {
        ids.iter()
            .filter_map(|id| self.pieces.iter().find(|p| &p.id == id).cloned())
            .collect()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.terms.get(term).map(|&i| self.idf[i])
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.terms.get(term).copied()
    }

    pub fn doc_vector(&self, doc: usize) -> &SparseVec {
        &self.doc_vectors[doc]
    }

    /// Unit TF-IDF vector of a token sequence; unknown terms are dropped.
    pub fn vectorize<'a>(&self, tokens: impl IntoIterator<Item = &'a String>) -> SparseVec {
        let tf = term_counts(&self.terms, tokens);
        normalize(tf.into_iter().map(|(i, c)| (i, c * self.idf[i])).collect())
    }

    /// Cosine similarity of every piece with the concatenated context.
    pub fn scores(&self, context: &[Utterance]) -> Vec<f64> {
        let q = self.vectorize(context.iter().flat_map(|u| u.tokens.iter()));
        self.doc_vectors
            .iter()
            .map(|d| dot(&q, d).clamp(0.0, 1.0))
            .collect()
    }

    /// The `m` best pieces by cosine similarity, ties broken by index order.
    pub fn top_m(&self, context: &[Utterance], m: usize) -> Vec<(&KnowledgePiece, f64)> {
        let scores = self.scores(context);
        let mut order: Vec<usize> = (0..self.pieces.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        order
            .into_iter()
            .take(m)
            .map(|i| (&self.pieces[i], scores[i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;
    use proptest::prelude::*;

    fn pieces(texts: &[&str]) -> Vec<KnowledgePiece> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| KnowledgePiece::new(format!("k{i}"), *t).unwrap())
            .collect()
    }

    fn ctx(text: &str) -> Vec<Utterance> {
        vec![Utterance::new(Speaker::A, text).unwrap()]
    }

    #[test]
    fn single_doc_weights() {
        let idx = TfidfIndex::build(&pieces(&["a b"])).unwrap();
        assert_eq!(idx.idf("a"), Some(1.0));
        let v = idx.doc_vector(0);
        let r = 1.0 / 2f64.sqrt();
        assert!(v.iter().all(|&(_, w)| (w - r).abs() < 1e-15));
    }

    #[test]
    fn idf_of_ubiquitous_term_is_one() {
        let idx = TfidfIndex::build(&pieces(&["x a", "x b", "x c"])).unwrap();
        assert!((idx.idf("x").unwrap() - 1.0).abs() < 1e-15);
        assert!((idx.idf("a").unwrap() - (2f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn single_token_doc_is_unit() {
        let idx = TfidfIndex::build(&pieces(&["zzz zzz", "y"])).unwrap();
        assert_eq!(idx.doc_vector(0).len(), 1);
        assert!((idx.doc_vector(0)[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_index_is_config_error() {
        assert!(matches!(TfidfIndex::build(&[]), Err(GcnError::Config(_))));
    }

    #[test]
    fn vectorize_drops_unknown_terms_and_counts_repeats() {
        let idx = TfidfIndex::build(&pieces(&["a b", "c d"])).unwrap();
        assert!(idx.vectorize(&["q".to_string(), "r".to_string()]).is_empty());
        let v = idx.vectorize(&["a".to_string(), "a".to_string(), "c".to_string()]);
        assert!((v[0].1 / v[1].1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_context_returns_first_docs() {
        let idx = TfidfIndex::build(&pieces(&["a", "b", "c", "d"])).unwrap();
        let top = idx.top_m(&ctx("nothing matches here"), 2);
        let ids: Vec<_> = top.iter().map(|(p, _)| p.id.as_str()).collect();
        assert_eq!(ids, ["k0", "k1"]);
        assert!(top.iter().all(|&(_, s)| s == 0.0));
    }

    #[test]
    fn self_retrieval_and_argmax() {
        let texts = ["the moon is bright", "cats sleep a lot", "the sun is hot", "moon landing in 1969", "jazz is loud"];
        let idx = TfidfIndex::build(&pieces(&texts)).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let scores = idx.scores(&ctx(t));
            let best = idx.top_m(&ctx(t), 1);
            assert_eq!(best[0].0.id, format!("k{i}"));
            assert!(scores.iter().all(|&s| s <= scores[i] + 1e-12));
        }
    }

    proptest! {
        #[test]
        fn scaling_raw_vector_keeps_direction(
            raw in prop::collection::vec((0usize..20, 0.01f64..10.0), 1..8),
            scale in 0.1f64..100.0,
        ) {
            let mut dedup: Vec<(usize, f64)> = Vec::new();
            for (i, w) in raw {
                if !dedup.iter().any(|&(j, _)| j == i) {
                    dedup.push((i, w));
                }
            }
            let a = normalize(dedup.clone());
            let b = normalize(dedup.iter().map(|&(i, w)| (i, w * scale)).collect());
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.0, y.0);
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
        }

        #[test]
        fn full_ranking_is_sorted_permutation(words in prop::collection::vec("[a-e]", 1..6)) {
            let idx = TfidfIndex::build(&pieces(&["a b", "b c", "c d", "d e", "e a", "a a c"])).unwrap();
            let c = ctx(&words.join(" "));
            let all = idx.top_m(&c, idx.len());
            prop_assert_eq!(all.len(), idx.len());
            let mut ids: Vec<_> = all.iter().map(|(p, _)| p.id.clone()).collect();
            prop_assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
            prop_assert!(all.iter().all(|&(_, s)| (0.0..=1.0).contains(&s)));
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), idx.len());
        }
    }
}
