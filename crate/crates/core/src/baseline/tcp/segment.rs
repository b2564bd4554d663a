use super::TcpError;

pub const SEGMENT_HEADER_LEN: usize = 15;

pub const FLAG_FIN: u8 = 0x01;
pub const FLAG_SYN: u8 = 0x02;
pub const FLAG_RST: u8 = 0x04;
pub const FLAG_ACK: u8 = 0x10;

/// `src_port | dst_port | seq | ack | flags | window`, big-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpSegmentHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
}

impl TcpSegmentHeader {
    pub fn has(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }

    pub fn encode(&self, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(SEGMENT_HEADER_LEN + payload.len());
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.push(self.flags);
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<(Self, &[u8]), TcpError> {
        if buf.len() < SEGMENT_HEADER_LEN {
            return Err(TcpError::Malformed);
        }
        let u16_at = |i: usize| u16::from_be_bytes([buf[i], buf[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes(buf[i..i + 4].try_into().unwrap());
        Ok((
            Self {
                src_port: u16_at(0),
                dst_port: u16_at(2),
                seq: u32_at(4),
                ack: u32_at(8),
                flags: buf[12],
                window: u16_at(13),
            },
            &buf[SEGMENT_HEADER_LEN..],
        ))
    }
}

/// Maps a 32-bit wire sequence number to the 64-bit value nearest `reference`.
pub fn unwrap_seq(reference: u64, wire: u32) -> u64 {
    let base = reference & !0xFFFF_FFFF;
    [base.checked_sub(1 << 32), Some(base), base.checked_add(1 << 32)]
        .into_iter()
        .flatten()
        .map(|b| b | wire as u64)
        .min_by_key(|c| c.abs_diff(reference))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = TcpSegmentHeader {
            src_port: 51000,
            dst_port: 80,
            seq: 0x01020304,
            ack: 0x0A0B0C0D,
            flags: FLAG_SYN | FLAG_ACK,
            window: 65535,
        };
        let b = h.encode(b"xy");
        assert_eq!(
            b,
            [0xC7, 0x38, 0x00, 0x50, 1, 2, 3, 4, 0x0A, 0x0B, 0x0C, 0x0D, 0x12, 0xFF, 0xFF, b'x', b'y']
        );
        let (d, payload) = TcpSegmentHeader::decode(&b).unwrap();
        assert_eq!(d, h);
        assert_eq!(payload, b"xy");
        assert!(TcpSegmentHeader::decode(&b[..14]).is_err());
    }

    #[test]
    fn unwrap_picks_nearest() {
        assert_eq!(unwrap_seq(5, 7), 7);
        assert_eq!(unwrap_seq(0xFFFF_FFF0, 0x10), 0x1_0000_0010);
        assert_eq!(unwrap_seq(0x1_0000_0010, 0xFFFF_FFF0), 0xFFFF_FFF0);
        assert_eq!(unwrap_seq(0, 0xFFFF_FFFF), 0xFFFF_FFFF);
    }
}
