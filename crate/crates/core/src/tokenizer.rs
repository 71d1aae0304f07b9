//! Deterministic hashing tokenizer.
//!
//! Text is lowercased and split on anything that is not alphanumeric; each
//! word is hashed into `[NUM_RESERVED, vocab_size)`. Distinct words may
//! collide, which the downstream model simply has to live with.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const NUM_RESERVED: usize = 3;

/// Lowercased alphanumeric words of `text`, in order.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

/// Joint encoding of `classifier ⊕ query ⊕ separator ⊕ candidate`, padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEncoding {
    pub ids: Vec<usize>,
    /// 0 for the classifier token, query and separator; 1 for the candidate.
    pub segments: Vec<usize>,
    pub mask: Vec<u8>,
}

impl PairEncoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_size} leaves no room beyond {NUM_RESERVED} reserved ids"
            )));
        }
        Ok(Self { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn word_id(&self, word: &str) -> usize {
        let digest = Sha256::digest(word.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        let h = u64::from_le_bytes(head);
        NUM_RESERVED + (h % (self.vocab_size - NUM_RESERVED) as u64) as usize
    }

    fn word_ids(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Single-segment encoding: classifier token, words, padding.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenizedText> {
        if max_len < 1 {
            return Err(Error::Usage("max_len must be at least 1".into()));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(self.word_ids(text).into_iter().take(max_len - 1));
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        Ok(TokenizedText { ids, mask })
    }

    /// Sentence-pair encoding with longest-first truncation.
    pub fn encode_pair(
        &self,
        query: &str,
        candidate: &str,
        max_len: usize,
    ) -> Result<PairEncoding> {
        if max_len < 2 {
            return Err(Error::Usage(
                "pair encoding needs max_len of at least 2".into(),
            ));
        }
        let mut q = self.word_ids(query);
        let mut c = self.word_ids(candidate);
        let budget = max_len - 2;
        while q.len() + c.len() > budget {
            if q.len() >= c.len() {
                q.pop();
            } else {
                c.pop();
            }
        }
        let mut ids = Vec::with_capacity(max_len);
        let mut segments = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&q);
        ids.push(SEP_ID);
        segments.resize(ids.len(), 0);
        ids.extend_from_slice(&c);
        segments.resize(ids.len(), 1);
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        segments.resize(max_len, 0);
        let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        Ok(PairEncoding {
            ids,
            segments,
            mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_classifier_plus_padding() {
        let tok = Tokenizer::new(8192).unwrap();
        let t = tok.tokenize("", 5).unwrap();
        assert_eq!(t.ids, vec![0, 1, 1, 1, 1]);
        assert_eq!(t.mask, vec![1, 0, 0, 0, 0]);
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        let tok = Tokenizer::new(8192).unwrap();
        let a = tok.tokenize("How do I Reset my password?", 12).unwrap();
        let b = tok.tokenize("how do i reset MY password", 12).unwrap();
        assert_eq!(a, b);
        assert!(a.ids[1..7]
            .iter()
            .all(|&id| (NUM_RESERVED..8192).contains(&id)));
    }

    #[test]
    fn words_split_on_punctuation() {
        assert_eq!(words("Hi,there!  a-b"), vec!["hi", "there", "a", "b"]);
    }

    #[test]
    fn pair_layout_and_truncation() {
        let tok = Tokenizer::new(100).unwrap();
        let p = tok.encode_pair("a b", "c", 8).unwrap();
        assert_eq!(p.ids[0], CLS_ID);
        assert_eq!(p.ids[3], SEP_ID);
        assert_eq!(p.segments, vec![0, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(p.mask, vec![1, 1, 1, 1, 1, 0, 0, 0]);

        let long = tok.encode_pair("a b c d e f g", "h i", 6).unwrap();
        assert_eq!(long.len(), 6);
        assert_eq!(long.real_tokens(), 6);
        assert_eq!(long.segments.iter().filter(|&&s| s == 1).count(), 2);
    }

    #[test]
    fn tiny_vocab_rejected() {
        assert!(Tokenizer::new(3).is_err());
    }
}
