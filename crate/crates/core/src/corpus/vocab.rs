use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataPoint;

/// Reserved tokens occupy ids 0..7 in this order.
pub const RESERVED_TOKENS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<ctx>", "<knw>", "<rsp>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_tokens(f.tokens.into_iter().skip(RESERVED_TOKENS.len()))
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            tokens: v.id_to_token,
        }
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const SEP_CTX: usize = 3;
    pub const SEP_KNW: usize = 4;
    pub const SEP_RSP: usize = 5;
    pub const UNK: usize = 6;
    pub const NUM_RESERVED: usize = RESERVED_TOKENS.len();

    /// Builds a vocabulary from non-reserved tokens in id order. Duplicates
    /// and reserved strings are ignored.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for t in RESERVED_TOKENS.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.token_to_id.contains_key(&t) {
                v.token_to_id.insert(t.clone(), v.id_to_token.len());
                v.id_to_token.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < Self::NUM_RESERVED
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Counts tokens and keeps those with frequency `>= min_count`, ordered by
/// descending frequency then lexicographically.
pub fn vocabulary_from_counts<'a>(tokens: impl IntoIterator<Item = &'a String>, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED_TOKENS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

/// Vocabulary over every context, knowledge and response token.
pub fn build_vocabulary(datapoints: &[DataPoint], min_count: usize) -> Vocabulary {
    vocabulary_from_counts(
        datapoints.iter().flat_map(|dp| {
            dp.context
                .iter()
                .flat_map(|u| u.tokens.iter())
                .chain(dp.knowledge.iter().flat_map(|k| k.tokens.iter()))
                .chain(dp.response.tokens.iter())
        }),
        min_count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Origin, Speaker, Utterance};

    fn dp(text: &str) -> DataPoint {
        DataPoint {
            context: vec![],
            knowledge: vec![],
            response: Utterance::new(Speaker::A, text).unwrap(),
            origin: Origin::Seed,
            gold_knowledge: vec![],
        }
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::from_tokens(["x".to_string()]);
        for (i, t) in RESERVED_TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), i);
        }
        assert_eq!(v.id("x"), 7);
        assert_eq!(v.id("missing"), Vocabulary::UNK);
    }

    #[test]
    fn min_count_filters() {
        let v = build_vocabulary(&[dp("a a b")], 2);
        assert!(v.contains("a") && !v.contains("b"));
        let v = build_vocabulary(&[dp("a a b")], 1);
        assert!(v.contains("a") && v.contains("b"));
        assert_eq!(v.len(), Vocabulary::NUM_RESERVED + 2);
    }

    #[test]
    fn order_depends_only_on_token_multiset() {
        let a = build_vocabulary(&[dp("c b a b c c"), dp("d")], 1);
        let b = build_vocabulary(&[dp("d c"), dp("a b c b c")], 1);
        assert_eq!(a, b);
        assert_eq!(a.tokens()[7..], ["c", "b", "a", "d"]);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocabulary(&[dp("the moon is bright")], 1);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.encode(&tokenize("moon zebra")), vec![v.id("moon"), Vocabulary::UNK]);
    }
}
