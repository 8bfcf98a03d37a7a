//! Region-controlled queries: an image caption followed by any number of
//! `(box, description)` pairs, their canonical text form, and the unified
//! text + position token encoding.

mod embed;
mod grammar;
mod vocab;

pub use embed::{EmbeddingInit, EmbeddingTable};
pub(crate) use embed::{ids_tensor, mask_tensor};
pub use grammar::{parse, serialize, ParseError};
pub use vocab::{Special, Token, Vocabulary, UNK_WORD};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::{box_to_bins, CoordError, NormalizedBox, QuantizerConfig};

/// Default token budget at toy scale.
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("region description is empty after normalization")]
    EmptyDescription,
    #[error("reserved character {ch:?} in query text {text:?}")]
    ReservedChar { ch: char, text: String },
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("sequence exceeds max_len {max_len} (first region that did not fit: {first_unfit_region:?})")]
    Overflow { max_len: usize, first_unfit_region: Option<usize> },
    #[error("vocabulary has {vocab} position bins but quantizer has {quantizer}")]
    BinMismatch { vocab: usize, quantizer: usize },
    #[error("token id {id} invalid for vocabulary of size {size}")]
    InvalidTokenId { id: u32, size: usize },
    #[error("embedding table mismatch: {0}")]
    TableMismatch(String),
    #[error("tensor error: {0}")]
    Candle(String),
}

impl From<candle_core::Error> for QueryError {
    fn from(e: candle_core::Error) -> Self {
        QueryError::Candle(e.to_string())
    }
}

const RESERVED: [char; 3] = [';', '<', '>'];

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn check_reserved(text: &str) -> Result<(), QueryError> {
    match text.chars().find(|c| RESERVED.contains(c)) {
        Some(ch) => Err(QueryError::ReservedChar { ch, text: text.to_string() }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRegion")]
pub struct RegionSpec {
    #[serde(rename = "box")]
    pub bbox: NormalizedBox,
    pub text: String,
}

#[derive(Deserialize)]
struct RawRegion {
    #[serde(rename = "box")]
    bbox: NormalizedBox,
    text: String,
}

impl TryFrom<RawRegion> for RegionSpec {
    type Error = QueryError;

    fn try_from(r: RawRegion) -> Result<Self, Self::Error> {
        RegionSpec::new(r.bbox, &r.text)
    }
}

impl RegionSpec {
    pub fn new(bbox: NormalizedBox, text: &str) -> Result<Self, QueryError> {
        check_reserved(text)?;
        let text = normalize_text(text);
        if text.is_empty() {
            return Err(QueryError::EmptyDescription);
        }
        Ok(Self { bbox, text })
    }
}

/// Image-level caption plus ordered regional specifications.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawQuery")]
pub struct Query {
    pub caption: String,
    #[serde(default)]
    pub regions: Vec<RegionSpec>,
}

#[derive(Deserialize)]
struct RawQuery {
    caption: String,
    #[serde(default)]
    regions: Vec<RegionSpec>,
}

impl TryFrom<RawQuery> for Query {
    type Error = QueryError;

    fn try_from(r: RawQuery) -> Result<Self, Self::Error> {
        Query::new(&r.caption, r.regions)
    }
}

impl Query {
    pub fn new(caption: &str, regions: Vec<RegionSpec>) -> Result<Self, QueryError> {
        check_reserved(caption)?;
        Ok(Self { caption: normalize_text(caption), regions })
    }

    pub fn caption_only(caption: &str) -> Result<Self, QueryError> {
        Self::new(caption, Vec::new())
    }

    /// The unconditional query used for classifier-free guidance.
    pub fn null() -> Self {
        Self::default()
    }

    pub fn is_null(&self) -> bool {
        self.caption.is_empty() && self.regions.is_empty()
    }
}

/// A padded token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    max_len: usize,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Number of tokens before the PAD suffix.
    pub fn unpadded_len(&self) -> usize {
        self.tokens.iter().take_while(|t| **t != Token::Special(Special::Pad)).count()
    }

    pub fn ids(&self, vocab: &Vocabulary) -> Result<Vec<u32>, QueryError> {
        self.tokens.iter().map(|t| vocab.token_id(t)).collect()
    }

    /// Sequence indices of each region's four position tokens, in region order.
    pub fn position_groups(&self) -> Vec<[usize; 4]> {
        let mut groups = Vec::new();
        let mut i = 0;
        while i < self.tokens.len() {
            if matches!(self.tokens[i], Token::Position(_)) {
                groups.push([i, i + 1, i + 2, i + 3]);
                i += 4;
            } else {
                i += 1;
            }
        }
        groups
    }

    /// 1 for real tokens, 0 for padding.
    pub fn key_mask(&self) -> Vec<u8> {
        self.tokens.iter().map(|t| u8::from(*t != Token::Special(Special::Pad))).collect()
    }
}

/// BOS, caption words, then per region four position tokens and the
/// description words, EOS, PAD up to `max_len`.
pub fn encode_query(
    q: &Query,
    vocab: &Vocabulary,
    cfg: &QuantizerConfig,
    max_len: usize,
) -> Result<TokenSequence, QueryError> {
    if vocab.n_bins() != cfg.n_bins() {
        return Err(QueryError::BinMismatch { vocab: vocab.n_bins(), quantizer: cfg.n_bins() });
    }
    let mut tokens = vec![Token::Special(Special::Bos)];
    tokens.extend(q.caption.split_whitespace().map(|w| Token::Text(vocab.word_id(w))));
    // +1 reserves the EOS slot
    if tokens.len() + 1 > max_len {
        return Err(QueryError::Overflow { max_len, first_unfit_region: None });
    }
    for (i, region) in q.regions.iter().enumerate() {
        let bins = box_to_bins(&region.bbox, cfg)?;
        let before = tokens.len();
        tokens.extend(bins.iter().map(|&b| Token::Position(b)));
        tokens.extend(region.text.split_whitespace().map(|w| Token::Text(vocab.word_id(w))));
        if tokens.len() + 1 > max_len {
            tokens.truncate(before);
            return Err(QueryError::Overflow { max_len, first_unfit_region: Some(i) });
        }
    }
    tokens.push(Token::Special(Special::Eos));
    tokens.resize(max_len, Token::Special(Special::Pad));
    Ok(TokenSequence { tokens, max_len })
}
