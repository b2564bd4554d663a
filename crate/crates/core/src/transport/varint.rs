//! Unsigned LEB128.

use super::WireError;

pub fn encode(mut v: u64, out: &mut Vec<u8>) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn len(v: u64) -> usize {
    let bits = 64 - v.leading_zeros() as usize;
    bits.div_ceil(7).max(1)
}

/// Decodes one varint from the front of `buf`, advancing it.
pub fn decode(buf: &mut &[u8]) -> Result<u64, WireError> {
    let mut v: u64 = 0;
    for (i, &b) in buf.iter().enumerate().take(10) {
        let chunk = (b & 0x7f) as u64;
        if i == 9 && chunk > 1 {
            return Err(WireError::VarintOverflow);
        }
        v |= chunk << (7 * i);
        if b & 0x80 == 0 {
            *buf = &buf[i + 1..];
            return Ok(v);
        }
    }
    if buf.len() >= 10 {
        Err(WireError::VarintOverflow)
    } else {
        Err(WireError::Truncated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_encodings() {
        let cases: &[(u64, &[u8])] = &[
            (0, &[0x00]),
            (127, &[0x7f]),
            (128, &[0x80, 0x01]),
            (300, &[0xac, 0x02]),
            (1161, &[0x89, 0x09]),
        ];
        for (v, bytes) in cases {
            let mut out = Vec::new();
            encode(*v, &mut out);
            assert_eq!(&out, bytes);
            assert_eq!(len(*v), bytes.len());
            let mut b: &[u8] = bytes;
            assert_eq!(decode(&mut b).unwrap(), *v);
            assert!(b.is_empty());
        }
    }

    #[test]
    fn extremes() {
        let mut out = Vec::new();
        encode(u64::MAX, &mut out);
        assert_eq!(out.len(), 10);
        assert_eq!(len(u64::MAX), 10);
        let mut b = &out[..];
        assert_eq!(decode(&mut b).unwrap(), u64::MAX);
        let mut t: &[u8] = &[0x80];
        assert_eq!(decode(&mut t), Err(WireError::Truncated));
        let mut o: &[u8] = &[0xff; 11];
        assert_eq!(decode(&mut o), Err(WireError::VarintOverflow));
    }
}
