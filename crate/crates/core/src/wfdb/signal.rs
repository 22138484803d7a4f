//! Sample decoders for the two supported storage formats. Samples come out
//! interleaved exactly as stored: frame by frame, one value per signal.

use crate::error::{Error, Result};

fn sign_extend12(v: u16) -> i32 {
    ((v << 4) as i16 >> 4) as i32
}

/// Decodes `n_samples` 12-bit samples from format-212 bytes.
///
/// Each 3-byte group holds two samples: the first is the low byte plus the
/// low nibble of the middle byte, the second is the high nibble of the middle
/// byte plus the last byte. When `n_samples` is odd the trailing half of the
/// last group is ignored.
pub fn decode_212(bytes: &[u8], n_samples: usize) -> Result<Vec<i32>> {
    let needed = (n_samples * 3).div_ceil(2);
    if bytes.len() < needed {
        return Err(Error::parse(format!("format 212: {n_samples} samples need {needed} bytes, got {}", bytes.len())));
    }
    let mut out = Vec::with_capacity(n_samples);
    for group in bytes.chunks(3) {
        if out.len() == n_samples {
            break;
        }
        let b0 = group[0] as u16;
        let b1 = group[1] as u16;
        out.push(sign_extend12(((b1 & 0x0F) << 8) | b0));
        if out.len() == n_samples {
            break;
        }
        let b2 = group[2] as u16;
        out.push(sign_extend12(((b1 & 0xF0) << 4) | b2));
    }
    Ok(out)
}

/// Inverse of [`decode_212`]. Values are truncated to 12 bits; an odd count
/// pads the final group with a zero sample.
pub fn encode_212(samples: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len().div_ceil(2) * 3);
    for pair in samples.chunks(2) {
        let s1 = (pair[0] & 0xFFF) as u16;
        let s2 = (pair.get(1).copied().unwrap_or(0) & 0xFFF) as u16;
        out.push((s1 & 0xFF) as u8);
        out.push((((s1 >> 8) & 0x0F) | ((s2 >> 4) & 0xF0)) as u8);
        out.push((s2 & 0xFF) as u8);
    }
    out
}

pub fn decode_16(bytes: &[u8]) -> Result<Vec<i32>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::parse(format!("format 16: odd byte count {}", bytes.len())));
    }
    Ok(bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as i32).collect())
}

pub fn encode_16(samples: &[i32]) -> Vec<u8> {
    samples.iter().flat_map(|&s| (s as i16).to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn worked_212_bytes() {
        // 0x3F: low nibble 0xF belongs to sample 1, high nibble 0x3 to sample 2.
        assert_eq!(decode_212(&[0xE8, 0x3F, 0x01], 2).unwrap(), vec![-24, 0x301]);
        assert_eq!(decode_212(&[0x00, 0x00, 0x00], 2).unwrap(), vec![0, 0]);
        assert_eq!(decode_212(&[0x01, 0x08, 0x00], 1).unwrap(), vec![-2047]);
        assert_eq!(decode_212(&[0x01, 0xF8, 0xFF], 2).unwrap(), vec![-2047, -1]);
    }

    #[test]
    fn truncated_212() {
        assert!(decode_212(&[0x01, 0x02], 2).is_err());
        assert!(decode_212(&[0x01], 1).is_err());
        // One sample only needs the first two bytes of its group.
        assert_eq!(decode_212(&[0xFF, 0x07], 1).unwrap(), vec![2047]);
    }

    #[test]
    fn worked_16_bytes() {
        assert_eq!(decode_16(&[0xFF, 0xFF]).unwrap(), vec![-1]);
        assert_eq!(decode_16(&[0x00, 0x80]).unwrap(), vec![-32768]);
        assert_eq!(decode_16(&[0x34, 0x12]).unwrap(), vec![4660]);
        assert!(decode_16(&[0x34]).is_err());
    }

    proptest! {
        #[test]
        fn bytes_survive_212(bytes in proptest::collection::vec(any::<[u8; 3]>(), 0..64)) {
            let flat: Vec<u8> = bytes.concat();
            let decoded = decode_212(&flat, bytes.len() * 2).unwrap();
            prop_assert_eq!(encode_212(&decoded), flat);
        }

        #[test]
        fn both_formats_agree(samples in proptest::collection::vec(-2048i32..2048, 0..200)) {
            let a = decode_212(&encode_212(&samples), samples.len()).unwrap();
            let b = decode_16(&encode_16(&samples)).unwrap();
            prop_assert_eq!(&a, &samples);
            prop_assert_eq!(&b, &samples);
        }
    }
}
