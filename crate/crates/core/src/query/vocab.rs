use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::QueryError;
use crate::coords::{BinIndex, QuantizerConfig};

pub const UNK_WORD: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Bos,
    Eos,
    Pad,
}

impl Special {
    pub const ALL: [Special; 3] = [Special::Bos, Special::Eos, Special::Pad];

    fn offset(self) -> u32 {
        match self {
            Special::Bos => 0,
            Special::Eos => 1,
            Special::Pad => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Text(u32),
    Position(BinIndex),
    Special(Special),
}

/// Word-level vocabulary followed by `n_bins` position tokens and three
/// specials, laid out as contiguous id ranges in that order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    n_bins: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    n_bins: usize,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_words_exact(r.words, r.n_bins)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self { words: v.words, n_bins: v.n_bins }
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.n_bins == other.n_bins
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// UNK gets id 0; remaining words keep first-occurrence order.
    pub fn new<I, S>(words: I, quant: &QuantizerConfig) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = vec![UNK_WORD.to_string()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !w.is_empty() && !list.contains(&w) {
                list.push(w);
            }
        }
        Self::from_words_exact(list, quant.n_bins())
    }

    fn from_words_exact(words: Vec<String>, n_bins: usize) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index, n_bins }
    }

    pub fn text_len(&self) -> usize {
        self.words.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.n_bins + Special::ALL.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_id(&self, w: &str) -> u32 {
        self.index.get(w).copied().unwrap_or(0)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, t: &Token) -> Result<u32, QueryError> {
        let v_text = self.words.len() as u32;
        match *t {
            Token::Text(id) if id < v_text => Ok(id),
            Token::Text(id) => Err(QueryError::InvalidTokenId { id, size: self.len() }),
            Token::Position(b) if b.index() < self.n_bins => Ok(v_text + b.index() as u32),
            Token::Position(b) => {
                Err(QueryError::InvalidTokenId { id: v_text + b.index() as u32, size: self.len() })
            }
            Token::Special(s) => Ok(v_text + self.n_bins as u32 + s.offset()),
        }
    }

    pub fn decode_id(&self, id: u32) -> Result<Token, QueryError> {
        let v_text = self.words.len();
        let idx = id as usize;
        if idx < v_text {
            Ok(Token::Text(id))
        } else if idx < v_text + self.n_bins {
            let q = QuantizerConfig::new(self.n_bins).expect("vocabulary holds a valid bin count");
            Ok(Token::Position(BinIndex::new(idx - v_text, &q).expect("in range")))
        } else if idx < self.len() {
            Ok(Token::Special(Special::ALL[idx - v_text - self.n_bins]))
        } else {
            Err(QueryError::InvalidTokenId { id, size: self.len() })
        }
    }

    /// Human-readable rendering of a token, e.g. `red`, `<p123>`, `<eos>`.
    pub fn render(&self, t: &Token) -> String {
        match t {
            Token::Text(id) => self.word(*id).unwrap_or(UNK_WORD).to_string(),
            Token::Position(b) => format!("<p{}>", b.index()),
            Token::Special(Special::Bos) => "<bos>".into(),
            Token::Special(Special::Eos) => "<eos>".into(),
            Token::Special(Special::Pad) => "<pad>".into(),
        }
    }

    /// Stable content hash; two vocabularies with the same fingerprint encode identically.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.update((self.n_bins as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}
