//! Fixed-length packed 0/1 vectors used for per-day bucket availability and
//! sampling indicators.

use std::fmt;

use serde::{Deserialize, Serialize};

const WORD_BITS: usize = 64;

/// A packed vector of `len` bits. Bits past `len` in the last word are always
/// zero so that popcounts and word-wise operations never need masking.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

/// Per-bucket indicator of which buckets are free for sampling on a day.
pub type AvailabilityVector = BitVector;

/// Per-bucket indicator of which buckets were sampled into an experiment on a day.
pub type SamplingVector = BitVector;

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(WORD_BITS)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut v = Self {
            len,
            words: vec![u64::MAX; len.div_ceil(WORD_BITS)],
        };
        v.clear_tail();
        v
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for bit in bits {
            if len % WORD_BITS == 0 {
                words.push(0);
            }
            if bit {
                words[len / WORD_BITS] |= 1 << (len % WORD_BITS);
            }
            len += 1;
        }
        Self { len, words }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, index: usize) -> bool {
        assert!(index < self.len, "bit index {index} out of range {}", self.len);
        self.words[index / WORD_BITS] >> (index % WORD_BITS) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, index: usize, value: bool) {
        assert!(index < self.len, "bit index {index} out of range {}", self.len);
        let mask = 1u64 << (index % WORD_BITS);
        if value {
            self.words[index / WORD_BITS] |= mask;
        } else {
            self.words[index / WORD_BITS] &= !mask;
        }
    }

    pub fn fill(&mut self, value: bool) {
        let word = if value { u64::MAX } else { 0 };
        self.words.iter_mut().for_each(|w| *w = word);
        self.clear_tail();
    }

    /// Number of set bits.
    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of positions set in both vectors.
    ///
    /// Panics if the lengths differ.
    pub fn count_ones_and(&self, other: &Self) -> usize {
        assert_eq!(self.len, other.len, "bit vector length mismatch");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn all_zeros(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn all_ones(&self) -> bool {
        self.count_ones() == self.len
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    /// Indices of the set bits in increasing order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD_BITS + bit)
            })
        })
    }

    /// Run-length encoding as comma-separated `bit:count` runs starting at
    /// index 0, e.g. `1:45,0:10,1:45`. The empty vector encodes as `""`.
    pub fn to_rle(&self) -> String {
        let mut runs: Vec<String> = Vec::new();
        let mut iter = self.iter();
        let Some(mut current) = iter.next() else {
            return String::new();
        };
        let mut count = 1usize;
        for bit in iter {
            if bit == current {
                count += 1;
            } else {
                runs.push(format!("{}:{count}", u8::from(current)));
                current = bit;
                count = 1;
            }
        }
        runs.push(format!("{}:{count}", u8::from(current)));
        runs.join(",")
    }

    pub fn from_rle(encoded: &str) -> Result<Self, RleError> {
        let mut bits = Vec::new();
        if encoded.is_empty() {
            return Ok(Self::from_bools(bits));
        }
        for run in encoded.split(',') {
            let (bit, count) = run
                .split_once(':')
                .ok_or_else(|| RleError(run.to_string()))?;
            let bit = match bit.trim() {
                "0" => false,
                "1" => true,
                _ => return Err(RleError(run.to_string())),
            };
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| RleError(run.to_string()))?;
            if count == 0 {
                return Err(RleError(run.to_string()));
            }
            bits.extend(std::iter::repeat_n(bit, count));
        }
        Ok(Self::from_bools(bits))
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector[")?;
        for bit in self.iter() {
            write!(f, "{}", u8::from(bit))?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed run-length segment `{0}`")]
pub struct RleError(String);
