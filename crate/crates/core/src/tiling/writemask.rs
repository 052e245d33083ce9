//! Eight-bank, byte-write-masked buffer that stores channel-major PE output
//! so the next layer can read it spatial-major.
//!
//! Channel `c` lives in bank `c % 8`; spatial position `s` occupies byte lane
//! `s % 8` of a word. Word index:
//! `word = (c / 8) * ceil(S / 8) + s / 8` for a map of `S` positions.

use serde::{Deserialize, Serialize};

pub const BANKS: usize = 8;
pub const LANES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BankAddress {
    pub bank: u8,
    pub word: u64,
    pub byte_lane: u8,
}

fn words_per_channel(spatial_len: usize) -> u64 {
    spatial_len.div_ceil(LANES) as u64
}

pub fn writemask_map(spatial: usize, channel: usize, spatial_len: usize) -> BankAddress {
    BankAddress {
        bank: (channel % BANKS) as u8,
        word: (channel / BANKS) as u64 * words_per_channel(spatial_len) + (spatial / LANES) as u64,
        byte_lane: (spatial % LANES) as u8,
    }
}

/// Inverse of [`writemask_map`] for a map of `spatial_len` positions.
pub fn writemask_unmap(addr: BankAddress, spatial_len: usize) -> (usize, usize) {
    let wpc = words_per_channel(spatial_len);
    let group = (addr.word / wpc) as usize;
    let spatial = (addr.word % wpc) as usize * LANES + addr.byte_lane as usize;
    (spatial, group * BANKS + addr.bank as usize)
}

/// Word-addressed banks with per-byte write enables.
#[derive(Debug, Clone)]
pub struct BankedBuffer<T> {
    banks: Vec<Vec<[T; LANES]>>,
}

impl<T: Copy + Default> BankedBuffer<T> {
    pub fn new(words_per_bank: usize) -> Self {
        Self {
            banks: vec![vec![[T::default(); LANES]; words_per_bank]; BANKS],
        }
    }

    /// Writes the lanes selected by `mask` (bit i = lane i); other lanes keep their value.
    pub fn write_masked(&mut self, bank: usize, word: usize, data: [T; LANES], mask: u8) {
        let w = &mut self.banks[bank][word];
        for (lane, v) in data.into_iter().enumerate() {
            if mask & (1 << lane) != 0 {
                w[lane] = v;
            }
        }
    }

    pub fn write(&mut self, addr: BankAddress, value: T) {
        let mut data = [T::default(); LANES];
        data[addr.byte_lane as usize] = value;
        self.write_masked(addr.bank as usize, addr.word as usize, data, 1 << addr.byte_lane);
    }

    pub fn read_word(&self, bank: usize, word: usize) -> [T; LANES] {
        self.banks[bank][word]
    }

    pub fn words_per_bank(&self) -> usize {
        self.banks[0].len()
    }
}

/// Pushes a position-major stream (`stream[s * channels + c]`, the order the
/// PE blocks emit it) through the banked buffer and reads it back word by
/// word, channel after channel. The result is channel-major:
/// `out[c * spatial_len + s]`.
pub fn roundtrip_check<T: Copy + Default>(stream: &[T], spatial_len: usize, channels: usize) -> Vec<T> {
    assert_eq!(stream.len(), spatial_len * channels, "stream size");
    let wpc = words_per_channel(spatial_len) as usize;
    let mut buf = BankedBuffer::new(channels.div_ceil(BANKS) * wpc);
    for s in 0..spatial_len {
        for c in 0..channels {
            buf.write(writemask_map(s, c, spatial_len), stream[s * channels + c]);
        }
    }
    let mut out = Vec::with_capacity(stream.len());
    for c in 0..channels {
        let bank = c % BANKS;
        let base = (c / BANKS) * wpc;
        for w in 0..wpc {
            let word = buf.read_word(bank, base + w);
            let n = (spatial_len - w * LANES).min(LANES);
            out.extend_from_slice(&word[..n]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub spatial: usize,
    pub channel: usize,
    pub bank: u8,
    pub word: u64,
    pub lane: u8,
}

/// One entry per byte write, in emission order.
pub fn address_trace(spatial_len: usize, channels: usize) -> Vec<TraceEntry> {
    let mut out = Vec::with_capacity(spatial_len * channels);
    for s in 0..spatial_len {
        for c in 0..channels {
            let a = writemask_map(s, c, spatial_len);
            out.push(TraceEntry {
                spatial: s,
                channel: c,
                bank: a.bank,
                word: a.word,
                lane: a.byte_lane,
            });
        }
    }
    out
}
