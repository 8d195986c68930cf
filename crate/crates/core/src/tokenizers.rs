//! Character-level (student) and non-overlapping k-mer (teacher) encodings.

use serde::{Deserialize, Serialize};

use crate::error::{HadError, Result};
use crate::genome_io::Window;

pub const CHAR_A: u32 = 0;
pub const CHAR_C: u32 = 1;
pub const CHAR_G: u32 = 2;
pub const CHAR_T: u32 = 3;
pub const CHAR_N: u32 = 4;
pub const CHAR_PAD: u32 = 5;
pub const CHAR_VOCAB_SIZE: usize = 6;

/// Token id of a base, or `None` for anything outside `{A,C,G,T,N}`.
pub fn char_id(base: u8) -> Option<u32> {
    Some(match base {
        b'A' => CHAR_A,
        b'C' => CHAR_C,
        b'G' => CHAR_G,
        b'T' => CHAR_T,
        b'N' => CHAR_N,
        _ => return None,
    })
}

pub fn encode_char(seq: &str) -> Result<Vec<u32>> {
    seq.bytes()
        .enumerate()
        .map(|(pos, b)| char_id(b).ok_or(HadError::IllegalBase { pos, base: b as char }))
        .collect()
}

pub fn decode_char(ids: &[u32]) -> Result<String> {
    ids.iter()
        .map(|&id| match id {
            CHAR_A => Ok('A'),
            CHAR_C => Ok('C'),
            CHAR_G => Ok('G'),
            CHAR_T => Ok('T'),
            CHAR_N => Ok('N'),
            other => Err(HadError::InvalidTokenId(other)),
        })
        .collect()
}

/// Vocabulary of non-overlapping k-mers: ids `0..4^k` for pure ACGT k-mers
/// (big-endian base-4), then UNK for anything containing N, then PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmerVocab {
    pub k: usize,
}

impl KmerVocab {
    pub fn new(k: usize) -> Self {
        assert!((1..=15).contains(&k), "k must be in 1..=15");
        KmerVocab { k }
    }

    pub fn unk(&self) -> u32 {
        4u32.pow(self.k as u32)
    }

    pub fn pad(&self) -> u32 {
        self.unk() + 1
    }

    pub fn size(&self) -> usize {
        self.pad() as usize + 1
    }

    pub fn encode(&self, seq: &str) -> Result<Vec<u32>> {
        encode_kmer(seq, self.k)
    }

    /// Inverse of the pure-ACGT part of the encoding.
    pub fn decode(&self, id: u32) -> Result<String> {
        if id >= self.unk() {
            return Err(HadError::InvalidTokenId(id));
        }
        let mut out = vec![b'A'; self.k];
        let mut rest = id;
        for slot in out.iter_mut().rev() {
            *slot = b"ACGT"[(rest % 4) as usize];
            rest /= 4;
        }
        Ok(String::from_utf8(out).expect("ascii"))
    }
}

pub fn encode_kmer(seq: &str, k: usize) -> Result<Vec<u32>> {
    let bytes = seq.as_bytes();
    if k == 0 || bytes.len() % k != 0 {
        return Err(HadError::LengthNotDivisible { len: bytes.len(), k });
    }
    let unk = 4u32.pow(k as u32);
    bytes
        .chunks_exact(k)
        .enumerate()
        .map(|(j, chunk)| {
            let mut id = 0u32;
            let mut has_n = false;
            for (i, &b) in chunk.iter().enumerate() {
                let code = char_id(b).ok_or(HadError::IllegalBase {
                    pos: j * k + i,
                    base: b as char,
                })?;
                if code == CHAR_N {
                    has_n = true;
                } else {
                    id = id * 4 + code;
                }
            }
            Ok(if has_n { unk } else { id })
        })
        .collect()
}

/// One window at both granularities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub key: String,
    pub char_ids: Vec<u32>,
    pub kmer_ids: Vec<u32>,
    pub k: usize,
}

impl TokenizedSequence {
    pub fn new(key: impl Into<String>, seq: &str, k: usize) -> Result<Self> {
        let kmer_ids = encode_kmer(seq, k)?;
        let char_ids = encode_char(seq)?;
        Ok(TokenizedSequence {
            key: key.into(),
            char_ids,
            kmer_ids,
            k,
        })
    }

    pub fn from_window(w: &Window, k: usize) -> Result<Self> {
        Self::new(w.key(), &w.seq, k)
    }

    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }
}
