//! Reference and reward metrics over token sequences.
//!
//! All scores are sentence-level; [`corpus_level`] averages them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DataPoint, KnowledgePiece, Vocabulary, RESERVED_TOKENS};
use crate::error::{GcnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Smoothing 4 (length-scaled geometric fill of zero counts) followed by
    /// smoothing 5 (averaging neighbouring n-gram orders), applied to the
    /// matched n-gram counts.
    Method7,
}

/// Constant K of the length-scaled zero-count fill.
pub const METHOD4_K: f64 = 5.0;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches of `candidate` against the references and the
/// number of candidate n-grams.
fn clipped_matches<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> (f64, f64) {
    let cand = ngram_counts(candidate, n);
    let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matched = 0usize;
    for (gram, &count) in &cand {
        let max_ref = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
        matched += count.min(max_ref);
    }
    (matched as f64, candidate.len().saturating_sub(n - 1) as f64)
}

fn brevity_penalty(cand_len: usize, ref_lens: impl Iterator<Item = usize>) -> f64 {
    let closest = ref_lens
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0);
    if cand_len > closest {
        1.0
    } else {
        (1.0 - closest as f64 / cand_len as f64).exp()
    }
}

/// Sentence BLEU with uniform weights over orders `1..=max_n`.
///
/// BLEU-1 is never smoothed. An empty candidate scores 0.
pub fn bleu<S: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<S>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if max_n == 0 {
        return Err(GcnError::InvalidInput("bleu max_n must be at least 1".into()));
    }
    if references.is_empty() {
        return Err(GcnError::InvalidInput("bleu needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let orders = if max_n > 1 && smoothing == Smoothing::Method7 {
        max_n + 1
    } else {
        max_n
    };
    let (mut matched, totals): (Vec<f64>, Vec<f64>) = (1..=orders)
        .map(|n| clipped_matches(candidate, references, n))
        .unzip();

    if max_n > 1 && smoothing == Smoothing::Method7 {
        let len = candidate.len() as f64;
        // zero-count fill for orders 1..=max_n
        if candidate.len() > 1 {
            let mut invcnt = 1.0;
            for m in matched.iter_mut().take(max_n) {
                if *m == 0.0 {
                    invcnt *= METHOD4_K / len.ln();
                    *m = 1.0 / invcnt;
                }
            }
        }
        // neighbour averaging; order max_n + 1 is only read
        let mut prev = matched[0] + 1.0;
        for n in 0..max_n {
            let avg = (prev + matched[n] + matched[n + 1]) / 3.0;
            matched[n] = avg;
            prev = avg;
        }
    }

    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = matched[n] / totals[n].max(1.0);
        if p <= 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = brevity_penalty(candidate.len(), references.iter().map(Vec::len));
    Ok((bp * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                diag + 1
            } else {
                up.max(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE F1 between a candidate and one reference.
pub fn rouge<S: AsRef<str>>(candidate: &[S], reference: &[S], variant: RougeVariant) -> f64 {
    match variant {
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if variant == RougeVariant::R1 { 1 } else { 2 };
            let c = ngram_counts(candidate, n);
            let r = ngram_counts(reference, n);
            let total_c: usize = c.values().sum();
            let total_r: usize = r.values().sum();
            if total_c == 0 || total_r == 0 {
                return 0.0;
            }
            let overlap: usize = c
                .iter()
                .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
                .sum();
            f1(overlap as f64 / total_c as f64, overlap as f64 / total_r as f64)
        }
        RougeVariant::RL => {
            if candidate.is_empty() || reference.is_empty() {
                return 0.0;
            }
            let l = lcs_len(candidate, reference) as f64;
            f1(l / candidate.len() as f64, l / reference.len() as f64)
        }
    }
}

/// Token-level F1 between an utterance and a knowledge piece with
/// multiset-clipped overlap.
pub fn kf1<S: AsRef<str>>(utterance: &[S], knowledge: &[S]) -> f64 {
    if utterance.is_empty() || knowledge.is_empty() {
        return 0.0;
    }
    let mut bag: HashMap<&str, isize> = HashMap::new();
    for t in knowledge {
        *bag.entry(t.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in utterance {
        if let Some(c) = bag.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1(
        overlap as f64 / utterance.len() as f64,
        overlap as f64 / knowledge.len() as f64,
    )
}

/// Maximum [`kf1`] over the pieces; 0 for no pieces.
pub fn kf1_multi<S: AsRef<str>>(utterance: &[S], pieces: &[KnowledgePiece]) -> f64 {
    pieces
        .iter()
        .map(|p| {
            let k: Vec<&str> = p.tokens.iter().map(String::as_str).collect();
            let u: Vec<&str> = utterance.iter().map(AsRef::as_ref).collect();
            kf1(&u, &k)
        })
        .fold(0.0, f64::max)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching embedding F1. Each token is matched to its most similar
/// token on the other side; negative similarities count as 0.
pub fn embed_score<S, F>(candidate: &[S], reference: &[S], embed: F) -> f64
where
    S: AsRef<str>,
    F: Fn(&str) -> Vec<f64>,
{
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let ce: Vec<Vec<f64>> = candidate.iter().map(|t| embed(t.as_ref())).collect();
    let re: Vec<Vec<f64>> = reference.iter().map(|t| embed(t.as_ref())).collect();
    let sim: Vec<Vec<f64>> = ce
        .iter()
        .map(|c| re.iter().map(|r| cosine(c, r).max(0.0)).collect())
        .collect();
    let precision = sim
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / ce.len() as f64;
    let recall = (0..re.len())
        .map(|j| sim.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / re.len() as f64;
    f1(precision, recall).clamp(0.0, 1.0)
}

/// Fraction of generated response tokens missing from `seed_vocabulary`.
/// Reserved marker tokens are ignored.
pub fn oov_rate(generated: &[DataPoint], seed_vocabulary: &Vocabulary) -> Result<f64> {
    let mut total = 0usize;
    let mut novel = 0usize;
    for t in generated.iter().flat_map(|dp| &dp.response.tokens) {
        if RESERVED_TOKENS.contains(&t.as_str()) {
            continue;
        }
        total += 1;
        if !seed_vocabulary.contains(t) {
            novel += 1;
        }
    }
    if total == 0 {
        return Err(GcnError::InvalidInput("oov rate of zero generated tokens is undefined".into()));
    }
    Ok(novel as f64 / total as f64)
}

/// Mean of a per-item metric.
pub fn corpus_level<T>(items: &[T], metric: impl Fn(&T) -> f64) -> Result<f64> {
    if items.is_empty() {
        return Err(GcnError::InvalidInput("corpus-level metric over an empty dataset".into()));
    }
    Ok(items.iter().map(metric).sum::<f64>() / items.len() as f64)
}

/// Token-pooled perplexity from a summed negative log-likelihood.
pub fn perplexity(nll_sum: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(GcnError::InvalidInput("perplexity over zero tokens".into()));
    }
    Ok((nll_sum / tokens as f64).exp())
}

/// Flat record of measured quantities; absent fields are omitted when
/// serialized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    /// KF1 against the retrieved pieces the model was conditioned on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kf1: Option<f64>,
    /// KF1 against the pieces the source dialogue references.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kf1_gold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oov_rate: Option<f64>,
}

impl MetricReport {
    pub fn to_map(&self) -> std::collections::BTreeMap<String, f64> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m
                .into_iter()
                .filter_map(|(k, v)| v.as_f64().map(|x| (k, x)))
                .collect(),
            _ => Default::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Origin, Speaker, Utterance};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_zero() {
        let c = toks("the cat sat on the mat today");
        assert!((bleu(&c, &[c.clone()], 4, Smoothing::Method7).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu(&c, &[c.clone()], 1, Smoothing::None).unwrap() - 1.0).abs() < 1e-12);
        let r = toks("the mat cat on sat the today");
        assert_eq!(bleu(&toks("a b c d e"), &[toks("e d c b a")], 4, Smoothing::None).unwrap(), 0.0);
        assert!(bleu(&c, &[r], 4, Smoothing::Method7).unwrap() > 0.0);
        assert_eq!(bleu::<String>(&[], &[c.clone()], 4, Smoothing::Method7).unwrap(), 0.0);
        assert!(bleu(&c, &[], 4, Smoothing::None).is_err());
    }

    #[test]
    fn bleu1_is_clipped_unigram_precision_times_bp() {
        let c = toks("the the the cat");
        let r = toks("the cat sat on mat");
        // clipped: the=1, cat=1 -> 2/4; bp = exp(1 - 5/4)
        let want = 0.5 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((bleu(&c, &[r], 1, Smoothing::Method7).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let a = toks("a b c d");
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            assert!((rouge(&a, &a, v) - 1.0).abs() < 1e-12);
        }
        assert!((rouge(&a, &toks("a c d b"), RougeVariant::RL) - 0.75).abs() < 1e-12);
        assert_eq!(rouge(&toks("a b"), &toks("b a"), RougeVariant::R2), 0.0);
        assert_eq!(rouge::<String>(&[], &[], RougeVariant::RL), 0.0);
    }

    #[test]
    fn kf1_examples() {
        assert!((kf1(&toks("a b c"), &toks("a b d")) - 2.0 / 3.0).abs() < 1e-12);
        assert!((kf1(&toks("b a c"), &toks("c b a")) - 1.0).abs() < 1e-12);
        assert_eq!(kf1(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(kf1(&toks("a a a"), &toks("a")), 0.5);
    }

    #[test]
    fn kf1_multi_takes_max() {
        let u = toks("the moon is bright");
        let disjoint = KnowledgePiece::new("x", "cats sleep").unwrap();
        let same = KnowledgePiece::new("y", "the moon is bright").unwrap();
        assert_eq!(kf1_multi(&u, &[]), 0.0);
        assert_eq!(kf1_multi(&u, std::slice::from_ref(&disjoint)), kf1(&u, &disjoint.tokens));
        assert!((kf1_multi(&u, &[disjoint, same]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embed_score_edges() {
        let onehot = |t: &str| {
            let mut v = vec![0.0; 4];
            v[(t.as_bytes()[0] - b'a') as usize % 4] = 1.0;
            v
        };
        let a = toks("a b c");
        assert!((embed_score(&a, &a, onehot) - 1.0).abs() < 1e-12);
        assert_eq!(embed_score(&toks("a b"), &toks("c d"), onehot), 0.0);
        assert_eq!(embed_score(&toks("a"), &[], onehot), 0.0);
    }

    fn generated(texts: &[&str]) -> Vec<DataPoint> {
        texts
            .iter()
            .map(|t| DataPoint {
                context: vec![],
                knowledge: vec![],
                response: Utterance::new(Speaker::B, *t).unwrap(),
                origin: Origin::Synthetic,
                gold_knowledge: vec![],
            })
            .collect()
    }

    #[test]
    fn oov_counts() {
        let vocab = Vocabulary::from_tokens(tokenize("a b c d e f g h i").into_iter());
        assert_eq!(oov_rate(&generated(&["a b c", "d e"]), &vocab).unwrap(), 0.0);
        assert_eq!(oov_rate(&generated(&["x y z"]), &vocab).unwrap(), 1.0);
        let r = oov_rate(&generated(&["a b c x", "d e f y", "g h i z"]), &vocab).unwrap();
        assert!((r - 0.25).abs() < 1e-15);
        assert!(oov_rate(&[], &vocab).is_err());
    }

    #[test]
    fn corpus_level_and_perplexity() {
        assert_eq!(corpus_level(&[1.0, 0.0, 0.5], |x| *x).unwrap(), 0.5);
        assert!(corpus_level::<f64>(&[], |x| *x).is_err());
        assert!((perplexity(2.0 * 3.0, 3).unwrap() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn report_is_flat() {
        let r = MetricReport {
            kf1: Some(0.25),
            perplexity: Some(3.0),
            ..Default::default()
        };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"kf1":0.25,"perplexity":3.0}"#);
        assert_eq!(r.to_map().len(), 2);
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..7)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn scores_are_bounded(c in seq(), r in seq()) {
            for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
                let s = rouge(&c, &r, v);
                prop_assert!((0.0..=1.0).contains(&s));
            }
            let k = kf1(&c, &r);
            prop_assert!((0.0..=1.0).contains(&k));
            prop_assert!((k - kf1(&r, &c)).abs() < 1e-12);
            for sm in [Smoothing::None, Smoothing::Method7] {
                let b = bleu(&c, std::slice::from_ref(&r), 4, sm).unwrap();
                prop_assert!((0.0..=1.0).contains(&b));
            }
        }

        #[test]
        fn kf1_is_permutation_invariant(c in seq(), r in seq(), rot in 0usize..7) {
            let mut shuffled = c.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            prop_assert!((kf1(&c, &r) - kf1(&shuffled, &r)).abs() < 1e-12);
        }

        #[test]
        fn appending_knowledge_token_never_lowers_recall(c in seq(), r in seq(), pick in 0usize..7) {
            prop_assume!(!r.is_empty());
            let recall = |u: &[String]| {
                let mut bag = r.clone();
                let mut hit = 0;
                for t in u {
                    if let Some(i) = bag.iter().position(|x| x == t) {
                        bag.swap_remove(i);
                        hit += 1;
                    }
                }
                hit as f64 / r.len() as f64
            };
            let mut longer = c.clone();
            longer.push(r[pick % r.len()].clone());
            prop_assert!(recall(&longer) >= recall(&c));
        }
    }
}
