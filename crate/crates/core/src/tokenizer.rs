//! Byte-level tokenizer with four framing tokens.
//!
//! Content ids are the raw UTF-8 bytes (0..=255). A training example is framed
//! as `[BOS] source [SEP] target [EOS]`; losses are taken over the target half
//! only, starting at the position returned by [`frame_pair`].

/// Begin-of-sequence id.
pub const BOS: u32 = 256;
/// End-of-sequence id; terminates the target.
pub const EOS: u32 = 257;
/// Separator between source and target.
pub const SEP: u32 = 258;
/// Trailing padding used when batching.
pub const PAD: u32 = 259;
/// Total vocabulary size (256 bytes + 4 specials).
pub const VOCAB_SIZE: usize = 260;

/// Returns true for the four reserved framing ids.
pub fn is_special(id: u32) -> bool {
    (BOS..=PAD).contains(&id)
}

/// An ordered list of token ids, each `< VOCAB_SIZE`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        debug_assert!(ids.iter().all(|&id| (id as usize) < VOCAB_SIZE));
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, id: u32) {
        debug_assert!((id as usize) < VOCAB_SIZE);
        self.0.push(id);
    }

    /// Length without trailing PAD tokens.
    pub fn unpadded_len(&self) -> usize {
        self.0.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1)
    }

    /// Appends PAD until the sequence has length `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.0.len() < len {
            self.0.push(PAD);
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq::new(ids)
    }
}

/// One id per UTF-8 byte, no specials inserted.
pub fn encode(text: &str) -> TokenSeq {
    TokenSeq(text.bytes().map(u32::from).collect())
}

/// Decodes byte ids back to text.
///
/// Special ids are skipped. Malformed UTF-8 is replaced by U+FFFD per
/// maximal invalid subsequence, which is what `String::from_utf8_lossy` does.
pub fn decode(seq: &TokenSeq) -> String {
    let bytes: Vec<u8> = seq
        .ids()
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// A framed `[BOS] source [SEP] target [EOS]` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Framed {
    pub tokens: TokenSeq,
    /// Index of the first target position (the EOS position when the target
    /// is empty).
    pub target_start: usize,
}

pub fn frame_pair(source: &TokenSeq, target: &TokenSeq) -> Framed {
    let mut ids = Vec::with_capacity(source.len() + target.len() + 3);
    ids.push(BOS);
    ids.extend_from_slice(source.ids());
    ids.push(SEP);
    let target_start = ids.len();
    ids.extend_from_slice(target.ids());
    ids.push(EOS);
    Framed {
        tokens: TokenSeq(ids),
        target_start,
    }
}

/// The generation prompt `[BOS] source [SEP]`.
pub fn frame_prompt(source: &TokenSeq) -> TokenSeq {
    let mut ids = Vec::with_capacity(source.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(source.ids());
    ids.push(SEP);
    TokenSeq(ids)
}
