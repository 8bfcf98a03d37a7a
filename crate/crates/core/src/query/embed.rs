use candle_core::{DType, Device, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use super::{QueryError, TokenSequence, Vocabulary};

/// How the position-token table is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum EmbeddingInit {
    #[default]
    Gaussian,
    Zeros,
}

/// Token lookup tables for text words (`text`), position bins (`position`),
/// specials, plus learned sequence-position embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub text: Tensor,
    pub position: Tensor,
    pub special: Tensor,
    pub sequence_pos: Tensor,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        vb: VarBuilder,
        vocab: &Vocabulary,
        max_len: usize,
        dim: usize,
        position_init: EmbeddingInit,
    ) -> candle_core::Result<Self> {
        let normal = Init::Randn { mean: 0.0, stdev: 0.02 };
        let p_init = match position_init {
            EmbeddingInit::Gaussian => normal,
            EmbeddingInit::Zeros => Init::Const(0.0),
        };
        Ok(Self {
            text: vb.get_with_hints((vocab.text_len(), dim), "text", normal)?,
            position: vb.get_with_hints((vocab.n_bins(), dim), "position", p_init)?,
            special: vb.get_with_hints((3, dim), "special", normal)?,
            sequence_pos: vb.get_with_hints((max_len, dim), "sequence_pos", normal)?,
            dim,
        })
    }

    /// Tables built from explicit tensors; mainly for tests.
    pub fn from_tensors(
        text: Tensor,
        position: Tensor,
        special: Tensor,
        sequence_pos: Tensor,
    ) -> Result<Self, QueryError> {
        let dim = text.dim(1)?;
        for (name, t) in [("position", &position), ("special", &special), ("sequence_pos", &sequence_pos)] {
            if t.dim(1)? != dim {
                return Err(QueryError::TableMismatch(format!("{name} width {} != {dim}", t.dim(1)?)));
            }
        }
        if special.dim(0)? != 3 {
            return Err(QueryError::TableMismatch("special table must have 3 rows".into()));
        }
        Ok(Self { text, position, special, sequence_pos, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.sequence_pos.dims()[0]
    }

    fn check(&self, vocab: &Vocabulary) -> Result<(), QueryError> {
        let rows = (self.text.dims()[0], self.position.dims()[0]);
        if rows != (vocab.text_len(), vocab.n_bins()) {
            return Err(QueryError::TableMismatch(format!(
                "tables have {rows:?} text/position rows, vocabulary needs ({}, {})",
                vocab.text_len(),
                vocab.n_bins()
            )));
        }
        Ok(())
    }

    /// Embed a batch of id rows `(B, L)` into `(B, L, D)`.
    pub fn embed_ids(&self, ids: &Tensor) -> Result<Tensor, QueryError> {
        let (b, l) = ids.dims2()?;
        if l > self.max_len() {
            return Err(QueryError::TableMismatch(format!("sequence length {l} > max_len {}", self.max_len())));
        }
        let table = Tensor::cat(&[&self.text, &self.position, &self.special], 0)?;
        let rows = table.index_select(&ids.flatten_all()?, 0)?.reshape((b, l, self.dim))?;
        let pos = self.sequence_pos.narrow(0, 0, l)?.unsqueeze(0)?;
        Ok(rows.broadcast_add(&pos)?)
    }

    /// One sequence to an `(L, D)` matrix: token row plus positional row.
    pub fn embed(&self, seq: &TokenSequence, vocab: &Vocabulary) -> Result<Tensor, QueryError> {
        self.check(vocab)?;
        let ids = seq.ids(vocab)?;
        let total = vocab.len() as u32;
        if let Some(&bad) = ids.iter().find(|&&id| id >= total) {
            return Err(QueryError::InvalidTokenId { id: bad, size: vocab.len() });
        }
        let ids = Tensor::from_vec(ids, (1, seq.max_len()), self.text.device())?;
        Ok(self.embed_ids(&ids)?.squeeze(0)?)
    }

    pub fn zeros_like_positional(&self) -> candle_core::Result<Self> {
        Ok(Self { sequence_pos: self.sequence_pos.zeros_like()?, ..self.clone() })
    }
}

/// Id matrix for a batch of sequences.
pub(crate) fn ids_tensor(
    seqs: &[TokenSequence],
    vocab: &Vocabulary,
    device: &Device,
) -> Result<Tensor, QueryError> {
    let len = seqs.first().map(|s| s.max_len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        flat.extend(s.ids(vocab)?);
    }
    Ok(Tensor::from_vec(flat, (seqs.len(), len), device)?)
}

/// `(B, L)` mask with 1.0 for real tokens and 0.0 for padding.
pub(crate) fn mask_tensor(seqs: &[TokenSequence], dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let len = seqs.first().map(|s| s.max_len()).unwrap_or(0);
    let flat: Vec<f32> = seqs.iter().flat_map(|s| s.key_mask()).map(f32::from).collect();
    Tensor::from_vec(flat, (seqs.len(), len), device)?.to_dtype(dtype)
}
