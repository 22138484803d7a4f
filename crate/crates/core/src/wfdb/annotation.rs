//! MIT-format annotation files (`.atr`).
//!
//! The stream is a sequence of little-endian 16-bit words: the top 6 bits are
//! the annotation code, the low 10 bits a sample increment. A handful of
//! pseudo-codes carry data instead of time and are consumed here without
//! producing annotations.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SKIP: u16 = 59;
const NUM: u16 = 60;
const SUB: u16 = 61;
const CHN: u16 = 62;
const AUX: u16 = 63;

/// Mnemonics for codes 1..=41 of the standard annotation table. `None`
/// marks codes the table leaves unassigned.
const MNEMONICS: [Option<char>; 42] = [
    None,
    Some('N'),
    Some('L'),
    Some('R'),
    Some('a'),
    Some('V'),
    Some('F'),
    Some('J'),
    Some('A'),
    Some('S'),
    Some('E'),
    Some('j'),
    Some('/'),
    Some('Q'),
    Some('~'),
    None,
    Some('|'),
    None,
    Some('s'),
    Some('T'),
    Some('*'),
    Some('D'),
    Some('"'),
    Some('='),
    Some('p'),
    Some('B'),
    Some('^'),
    Some('t'),
    Some('+'),
    Some('u'),
    Some('?'),
    Some('!'),
    Some('['),
    Some(']'),
    Some('e'),
    Some('n'),
    Some('@'),
    Some('x'),
    Some('f'),
    Some('('),
    Some(')'),
    Some('r'),
];

pub fn mnemonic(code: u16) -> Option<char> {
    MNEMONICS.get(code as usize).copied().flatten()
}

pub fn code_for(mnemonic: char) -> Option<u16> {
    MNEMONICS.iter().position(|m| *m == Some(mnemonic)).map(|c| c as u16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample_index: usize,
    pub beat_code: char,
}

impl Annotation {
    pub fn new(sample_index: usize, beat_code: char) -> Self {
        Self { sample_index, beat_code }
    }
}

/// Beat codes accepted for detection: `NLRBAJSVFREQ/` as listed, which keeps
/// the paced-beat code `/`.
pub const DEFAULT_BEAT_CODES: &str = "NLRBAJSVFREQ/";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeatSet(BTreeSet<char>);

impl BeatSet {
    pub fn new(codes: &str) -> Self {
        Self(codes.chars().collect())
    }

    pub fn without_paced(mut self) -> Self {
        self.0.remove(&'/');
        self
    }

    pub fn contains(&self, code: char) -> bool {
        self.0.contains(&code)
    }
}

impl Default for BeatSet {
    fn default() -> Self {
        Self::new(DEFAULT_BEAT_CODES)
    }
}

struct Words<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Words<'_> {
    fn next_word(&mut self) -> Result<u16> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 2)
            .ok_or_else(|| Error::parse(format!("annotation stream truncated at byte {}", self.pos)))?;
        self.pos += 2;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn skip_bytes(&mut self, n: usize) -> Result<()> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(format!("annotation AUX payload of {n} bytes truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(())
    }
}

/// Parses a terminated annotation stream into time-ordered annotations.
///
/// Indices are cumulative sums of the increments (plus SKIP intervals).
/// Several annotations may share an index, so the output is non-decreasing.
/// A stream that ends without the `0x0000` terminator is rejected.
pub fn parse_annotations(bytes: &[u8]) -> Result<Vec<Annotation>> {
    let mut words = Words { bytes, pos: 0 };
    let mut time: i64 = 0;
    let mut out = Vec::new();
    loop {
        let word = words.next_word()?;
        let code = word >> 10;
        let incr = (word & 0x3FF) as i64;
        match code {
            0 if incr == 0 => break,
            SKIP => {
                let high = words.next_word()? as u32;
                let low = words.next_word()? as u32;
                time += ((high << 16) | low) as i32 as i64;
            }
            NUM | SUB | CHN => {}
            AUX => words.skip_bytes((incr as usize).next_multiple_of(2))?,
            _ => {
                time += incr;
                if time < 0 {
                    return Err(Error::parse(format!("negative annotation time {time}")));
                }
                if let Some(beat_code) = mnemonic(code) {
                    out.push(Annotation { sample_index: time as usize, beat_code });
                }
            }
        }
    }
    Ok(out)
}

/// Writes annotations (sorted by index) in the MIT format, using SKIP words
/// for gaps wider than the 10-bit increment field.
pub fn encode_annotations(annotations: &[Annotation]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(annotations.len() * 2 + 2);
    let mut time = 0usize;
    for a in annotations {
        let code =
            code_for(a.beat_code).ok_or_else(|| Error::arg(format!("no annotation code for `{}`", a.beat_code)))?;
        let delta =
            a.sample_index.checked_sub(time).ok_or_else(|| Error::arg("annotations must be sorted by sample index"))?;
        let incr = if delta > 0x3FF {
            let interval = u32::try_from(delta).map_err(|_| Error::arg("annotation gap too large"))?;
            out.extend_from_slice(&(SKIP << 10).to_le_bytes());
            out.extend_from_slice(&((interval >> 16) as u16).to_le_bytes());
            out.extend_from_slice(&((interval & 0xFFFF) as u16).to_le_bytes());
            0
        } else {
            delta as u16
        };
        out.extend_from_slice(&((code << 10) | incr).to_le_bytes());
        time = a.sample_index;
    }
    out.extend_from_slice(&[0, 0]);
    Ok(out)
}

/// Order-preserving subset whose codes are in `valid`.
pub fn filter_beats(annotations: &[Annotation], valid: &BeatSet) -> Vec<Annotation> {
    annotations.iter().copied().filter(|a| valid.contains(a.beat_code)).collect()
}
