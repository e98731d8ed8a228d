//! Cochlear token sequences, the `CTOK` stream format, and codebook statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cochlea::FRAME_RATE_HZ;
use crate::{CoreError, Result};

/// Integer codes in `[0, 2^bit_width)`, one per 5 ms frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CochlearTokenSeq {
    pub ids: Vec<u32>,
    pub bit_width: u32,
    pub frame_rate_hz: u32,
    pub source: Option<String>,
    /// Sample offset of the clip within its source file.
    pub offset: u64,
}

impl CochlearTokenSeq {
    pub fn new(ids: Vec<u32>, bit_width: u32) -> Result<Self> {
        let vocab = vocab_size(bit_width)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(CoreError::Invalid(format!("token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Self { ids, bit_width, frame_rate_hz: FRAME_RATE_HZ, source: None, offset: 0 })
    }

    pub fn vocab(&self) -> u32 {
        1 << self.bit_width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn vocab_size(bit_width: u32) -> Result<u32> {
    if !(1..=16).contains(&bit_width) {
        return Err(CoreError::Invalid(format!("bit width {bit_width} outside 1..=16")));
    }
    Ok(1 << bit_width)
}

const CTOK_MAGIC: &[u8; 4] = b"CTOK";
const CTOK_VERSION: u16 = 1;
const CTOK_HEADER: usize = 4 + 2 + 2 + 4 + 4 + 8;

/// `"CTOK"`, u16 version, u16 bit_width, u32 vocab, u32 frame_rate_hz,
/// u64 token_count, then u16 ids; little-endian throughout.
pub fn encode_ctok(seq: &CochlearTokenSeq) -> Vec<u8> {
    let mut buf = Vec::with_capacity(CTOK_HEADER + 2 * seq.ids.len());
    buf.extend_from_slice(CTOK_MAGIC);
    buf.extend_from_slice(&CTOK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.bit_width as u16).to_le_bytes());
    buf.extend_from_slice(&seq.vocab().to_le_bytes());
    buf.extend_from_slice(&seq.frame_rate_hz.to_le_bytes());
    buf.extend_from_slice(&(seq.ids.len() as u64).to_le_bytes());
    for &id in &seq.ids {
        buf.extend_from_slice(&(id as u16).to_le_bytes());
    }
    buf
}

pub fn decode_ctok(bytes: &[u8], origin: &Path) -> Result<CochlearTokenSeq> {
    let bad = |m: String| CoreError::format(origin, m);
    if bytes.len() < CTOK_HEADER || &bytes[..4] != CTOK_MAGIC {
        return Err(bad("missing CTOK magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CTOK_VERSION {
        return Err(bad(format!("unsupported CTOK version {version}")));
    }
    let bit_width = u16::from_le_bytes([bytes[6], bytes[7]]) as u32;
    let vocab = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let frame_rate_hz = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if vocab_size(bit_width).ok() != Some(vocab) {
        return Err(bad(format!("vocab {vocab} inconsistent with bit width {bit_width}")));
    }
    let body = &bytes[CTOK_HEADER..];
    if body.len() != 2 * count {
        return Err(bad(format!("header declares {count} tokens, body holds {} bytes", body.len())));
    }
    let ids: Vec<u32> = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect();
    let mut seq = CochlearTokenSeq::new(ids, bit_width).map_err(|e| bad(e.to_string()))?;
    seq.frame_rate_hz = frame_rate_hz;
    seq.source = Some(origin.display().to_string());
    Ok(seq)
}

pub fn write_ctok(path: &Path, seq: &CochlearTokenSeq) -> Result<()> {
    std::fs::write(path, encode_ctok(seq)).map_err(|e| CoreError::io(path, e))
}

pub fn read_ctok(path: &Path) -> Result<CochlearTokenSeq> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_ctok(&bytes, path)
}

/// Exact per-code counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CodebookStats {
    /// Number of codes used at least once.
    pub fn usage(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn codebook_stats<'a>(seqs: impl IntoIterator<Item = &'a CochlearTokenSeq>, bit_width: u32) -> Result<CodebookStats> {
    let vocab = vocab_size(bit_width)? as usize;
    let mut counts = vec![0u64; vocab];
    for s in seqs {
        for &id in &s.ids {
            let slot = counts
                .get_mut(id as usize)
                .ok_or_else(|| CoreError::Invalid(format!("token {id} outside vocabulary of {vocab}")))?;
            *slot += 1;
        }
    }
    let total = counts.iter().sum();
    Ok(CodebookStats { counts, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stats_examples() {
        let s = CochlearTokenSeq::new(vec![0, 0, 5], 13).unwrap();
        let st = codebook_stats([&s], 13).unwrap();
        assert_eq!(st.counts[0], 2);
        assert_eq!(st.counts[5], 1);
        assert_eq!(st.usage(), 2);
        assert_eq!(st.total, 3);

        let empty: Vec<CochlearTokenSeq> = vec![];
        assert_eq!(codebook_stats(&empty, 13).unwrap().usage(), 0);

        let all = CochlearTokenSeq::new((0..8192).collect(), 13).unwrap();
        assert_eq!(codebook_stats([&all], 13).unwrap().usage(), 8192);
    }

    #[test]
    fn out_of_range_ids_rejected() {
        assert!(CochlearTokenSeq::new(vec![4096], 12).is_err());
        assert!(CochlearTokenSeq::new(vec![4095], 12).is_ok());
    }

    #[test]
    fn ctok_header_layout() {
        let s = CochlearTokenSeq::new(vec![1, 8191, 0], 13).unwrap();
        let b = encode_ctok(&s);
        assert_eq!(&b[..4], b"CTOK");
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 13);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 8192);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 200);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 3);
        assert_eq!(&b[24..26], &1u16.to_le_bytes());
        assert_eq!(b.len(), 24 + 6);
    }

    #[test]
    fn ctok_rejects_corruption() {
        let s = CochlearTokenSeq::new(vec![1, 2, 3], 12).unwrap();
        let mut b = encode_ctok(&s);
        b.pop();
        assert!(decode_ctok(&b, Path::new("x")).is_err());
        let mut b = encode_ctok(&s);
        b[24] = 0xff;
        b[25] = 0xff;
        assert!(decode_ctok(&b, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn ctok_round_trip(bits in 12u32..=14, raw in proptest::collection::vec(any::<u32>(), 0..200)) {
            let vocab = 1u32 << bits;
            let ids: Vec<u32> = raw.iter().map(|x| x % vocab).collect();
            let s = CochlearTokenSeq::new(ids, bits).unwrap();
            let back = decode_ctok(&encode_ctok(&s), Path::new("mem")).unwrap();
            prop_assert_eq!(back.ids, s.ids);
            prop_assert_eq!(back.bit_width, bits);
        }
    }
}
