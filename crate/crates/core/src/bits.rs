//! Packed bit vectors over GF(2).
//!
//! Syndrome extraction reduces to dot products between check-matrix rows and
//! error vectors, so the representation is a dense `u64` word array and the
//! dot product is AND + popcount over words. Bits beyond `len` in the last
//! word are kept zero by every operation.

use crate::error::{Error, Result};

const WORD_BITS: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVec {
    len: usize,
    words: Vec<u64>,
}

impl BitVec {
    pub fn zeros(len: usize) -> Self {
        BitVec {
            len,
            words: vec![0; len.div_ceil(WORD_BITS)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = BitVec::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.set(i, true);
            }
        }
        v
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut v = BitVec::zeros(len);
        for &i in indices {
            v.set(i, true);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        let mask = 1u64 << (i % WORD_BITS);
        if value {
            self.words[i / WORD_BITS] |= mask;
        } else {
            self.words[i / WORD_BITS] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range for length {}", self.len);
        self.words[i / WORD_BITS] ^= 1u64 << (i % WORD_BITS);
    }

    pub fn xor_assign(&mut self, other: &BitVec) {
        assert_eq!(self.len, other.len, "xor of lengths {} and {}", self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    /// GF(2) dot product: parity of the AND of the two vectors.
    pub fn dot(&self, other: &BitVec) -> bool {
        assert_eq!(self.len, other.len, "dot of lengths {} and {}", self.len, other.len);
        let mut acc = 0u32;
        for (a, b) in self.words.iter().zip(&other.words) {
            acc ^= (a & b).count_ones() & 1;
        }
        acc & 1 == 1
    }

    pub fn weight(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut rem = w;
            std::iter::from_fn(move || {
                if rem == 0 {
                    None
                } else {
                    let b = rem.trailing_zeros() as usize;
                    rem &= rem - 1;
                    Some(wi * WORD_BITS + b)
                }
            })
        })
    }

    /// Index of the lowest set bit, if any.
    pub fn leading_one(&self) -> Option<usize> {
        self.ones().next()
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len).map(|i| if self.get(i) { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let mut v = BitVec::zeros(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => v.set(i, true),
                _ => {
                    return Err(Error::config(format!(
                        "bit string may contain only '0'/'1', found {c:?} at position {i}"
                    )))
                }
            }
        }
        Ok(v)
    }

    /// Serializes to bytes, least-significant bit first within each byte,
    /// zero-padded to a whole number of bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for (wi, &w) in self.words.iter().enumerate() {
            for b in 0..8 {
                let byte_index = wi * 8 + b;
                if byte_index < out.len() {
                    out[byte_index] = ((w >> (8 * b)) & 0xff) as u8;
                }
            }
        }
        out
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::io(format!(
                "bit payload of {} bytes does not match declared length {len}",
                bytes.len()
            )));
        }
        let mut v = BitVec::zeros(len);
        for (i, &byte) in bytes.iter().enumerate() {
            v.words[i / 8] |= (byte as u64) << (8 * (i % 8));
        }
        if len % 8 != 0 {
            let padding = bytes[bytes.len() - 1] >> (len % 8);
            if padding != 0 {
                return Err(Error::io("nonzero padding bits in packed bit payload"));
            }
        }
        // Bits past `len` inside the final word would corrupt dot products.
        if let Some(last) = v.words.last() {
            let tail = len % WORD_BITS;
            if tail != 0 && last >> tail != 0 {
                return Err(Error::io("nonzero padding bits in packed bit payload"));
            }
        }
        Ok(v)
    }
}

impl std::fmt::Debug for BitVec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitVec({})", self.to_bit_string())
    }
}
