use super::{varint, WireError};

const PADDING: u8 = 0x00;
const PING: u8 = 0x01;
const ACK: u8 = 0x02;
const RESET_STREAM: u8 = 0x04;
const CLOSE: u8 = 0x05;
const STREAM: u8 = 0x08;
const STREAM_FIN: u8 = 0x09;

/// Acknowledged packet numbers as `(gap, run)` pairs counted down from `largest`.
///
/// The first pair always has gap 0. `run` is the number of packets in a range;
/// `gap` is the number of missing packets between a range and the one above it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AckFrame {
    pub largest: u64,
    pub ack_delay_us: u64,
    pub ranges: Vec<(u64, u64)>,
}

impl AckFrame {
    /// Builds a frame from inclusive `(lo, hi)` ranges sorted highest first, non-adjacent.
    pub fn from_ranges(ranges: &[(u64, u64)], ack_delay_us: u64) -> Self {
        assert!(!ranges.is_empty());
        let largest = ranges[0].1;
        let mut out = Vec::with_capacity(ranges.len());
        let mut prev_lo: Option<u64> = None;
        for &(lo, hi) in ranges {
            let gap = prev_lo.map_or(0, |p| p - 1 - hi);
            out.push((gap, hi - lo + 1));
            prev_lo = Some(lo);
        }
        Self {
            largest,
            ack_delay_us,
            ranges: out,
        }
    }

    /// Inclusive `(lo, hi)` ranges, highest first. Fails if the pairs underflow.
    pub fn decoded_ranges(&self) -> Result<Vec<(u64, u64)>, WireError> {
        let mut out = Vec::with_capacity(self.ranges.len());
        let mut hi = self.largest;
        for (i, &(gap, run)) in self.ranges.iter().enumerate() {
            if run == 0 || (i == 0 && gap != 0) {
                return Err(WireError::BadAckRange);
            }
            if i > 0 {
                let prev_lo = out.last().map(|r: &(u64, u64)| r.0).unwrap();
                hi = prev_lo
                    .checked_sub(1)
                    .and_then(|v| v.checked_sub(gap))
                    .ok_or(WireError::BadAckRange)?;
                if gap == 0 {
                    return Err(WireError::BadAckRange);
                }
            }
            let lo = hi.checked_sub(run - 1).ok_or(WireError::BadAckRange)?;
            out.push((lo, hi));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Padding { len: usize },
    Ping,
    Ack(AckFrame),
    ResetStream { stream_id: u64, error_code: u16 },
    Close { error_code: u16 },
    Stream { stream_id: u64, offset: u64, fin: bool, data: Vec<u8> },
}

/// Bytes a STREAM frame header takes before its data.
pub fn stream_overhead(stream_id: u64, offset: u64) -> usize {
    1 + varint::len(stream_id) + varint::len(offset) + 2
}

impl Frame {
    /// Any frame other than ACK or PADDING obliges the receiver to acknowledge.
    pub fn is_ack_eliciting(&self) -> bool {
        !matches!(self, Frame::Ack(_) | Frame::Padding { .. })
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            Frame::Padding { len } => *len,
            Frame::Ping => 1,
            Frame::Ack(a) => {
                1 + varint::len(a.largest)
                    + varint::len(a.ack_delay_us)
                    + varint::len(a.ranges.len() as u64)
                    + a.ranges
                        .iter()
                        .map(|&(g, r)| varint::len(g) + varint::len(r))
                        .sum::<usize>()
            }
            Frame::ResetStream { stream_id, .. } => 1 + varint::len(*stream_id) + 2,
            Frame::Close { .. } => 3,
            Frame::Stream {
                stream_id,
                offset,
                data,
                ..
            } => stream_overhead(*stream_id, *offset) + data.len(),
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Padding { len } => out.resize(out.len() + len, PADDING),
            Frame::Ping => out.push(PING),
            Frame::Ack(a) => {
                out.push(ACK);
                varint::encode(a.largest, out);
                varint::encode(a.ack_delay_us, out);
                varint::encode(a.ranges.len() as u64, out);
                for &(g, r) in &a.ranges {
                    varint::encode(g, out);
                    varint::encode(r, out);
                }
            }
            Frame::ResetStream {
                stream_id,
                error_code,
            } => {
                out.push(RESET_STREAM);
                varint::encode(*stream_id, out);
                out.extend_from_slice(&error_code.to_be_bytes());
            }
            Frame::Close { error_code } => {
                out.push(CLOSE);
                out.extend_from_slice(&error_code.to_be_bytes());
            }
            Frame::Stream {
                stream_id,
                offset,
                fin,
                data,
            } => {
                assert!(data.len() <= u16::MAX as usize);
                out.push(if *fin { STREAM_FIN } else { STREAM });
                varint::encode(*stream_id, out);
                varint::encode(*offset, out);
                out.extend_from_slice(&(data.len() as u16).to_be_bytes());
                out.extend_from_slice(data);
            }
        }
    }

    pub fn decode_all(mut buf: &[u8]) -> Result<Vec<Frame>, WireError> {
        let mut frames = Vec::new();
        while !buf.is_empty() {
            frames.push(Self::decode_one(&mut buf)?);
        }
        Ok(frames)
    }

    fn decode_one(buf: &mut &[u8]) -> Result<Frame, WireError> {
        let ty = take_u8(buf)?;
        Ok(match ty {
            PADDING => {
                let extra = buf.iter().take_while(|&&b| b == PADDING).count();
                *buf = &buf[extra..];
                Frame::Padding { len: 1 + extra }
            }
            PING => Frame::Ping,
            ACK => {
                let largest = varint::decode(buf)?;
                let ack_delay_us = varint::decode(buf)?;
                let count = varint::decode(buf)?;
                if count == 0 || count as usize > buf.len() {
                    return Err(WireError::BadAckRange);
                }
                let mut ranges = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    ranges.push((varint::decode(buf)?, varint::decode(buf)?));
                }
                let frame = AckFrame {
                    largest,
                    ack_delay_us,
                    ranges,
                };
                frame.decoded_ranges()?;
                Frame::Ack(frame)
            }
            RESET_STREAM => Frame::ResetStream {
                stream_id: varint::decode(buf)?,
                error_code: take_u16(buf)?,
            },
            CLOSE => Frame::Close {
                error_code: take_u16(buf)?,
            },
            STREAM | STREAM_FIN => {
                let stream_id = varint::decode(buf)?;
                let offset = varint::decode(buf)?;
                let len = take_u16(buf)? as usize;
                if buf.len() < len {
                    return Err(WireError::Truncated);
                }
                let data = buf[..len].to_vec();
                *buf = &buf[len..];
                if offset.checked_add(len as u64).is_none() {
                    return Err(WireError::BadFrame(ty));
                }
                Frame::Stream {
                    stream_id,
                    offset,
                    fin: ty == STREAM_FIN,
                    data,
                }
            }
            other => return Err(WireError::BadFrame(other)),
        })
    }
}

fn take_u8(buf: &mut &[u8]) -> Result<u8, WireError> {
    let (&b, rest) = buf.split_first().ok_or(WireError::Truncated)?;
    *buf = rest;
    Ok(b)
}

fn take_u16(buf: &mut &[u8]) -> Result<u16, WireError> {
    if buf.len() < 2 {
        return Err(WireError::Truncated);
    }
    let v = u16::from_be_bytes([buf[0], buf[1]]);
    *buf = &buf[2..];
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(f: Frame) {
        let mut out = Vec::new();
        f.encode(&mut out);
        assert_eq!(out.len(), f.encoded_len());
        assert_eq!(Frame::decode_all(&out).unwrap(), vec![f]);
    }

    #[test]
    fn each_type_round_trips() {
        round_trip(Frame::Ping);
        round_trip(Frame::Padding { len: 7 });
        round_trip(Frame::Close { error_code: 9 });
        round_trip(Frame::ResetStream {
            stream_id: 301,
            error_code: 2,
        });
        round_trip(Frame::Stream {
            stream_id: 1,
            offset: 1161,
            fin: true,
            data: vec![1, 2, 3],
        });
        round_trip(Frame::Ack(AckFrame::from_ranges(&[(9, 10), (4, 6), (0, 1)], 25_000)));
    }

    #[test]
    fn stream_wire_bytes() {
        let mut out = Vec::new();
        Frame::Stream {
            stream_id: 3,
            offset: 128,
            fin: false,
            data: vec![0xAB],
        }
        .encode(&mut out);
        assert_eq!(out, [0x08, 0x03, 0x80, 0x01, 0x00, 0x01, 0xAB]);
    }

    #[test]
    fn ack_ranges_encode_gaps() {
        let a = AckFrame::from_ranges(&[(9, 10), (4, 6), (0, 1)], 0);
        assert_eq!(a.ranges, vec![(0, 2), (2, 3), (2, 2)]);
        assert_eq!(a.decoded_ranges().unwrap(), vec![(9, 10), (4, 6), (0, 1)]);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert_eq!(Frame::decode_all(&[0x07]), Err(WireError::BadFrame(0x07)));
        assert_eq!(Frame::decode_all(&[0x08, 1, 0, 0, 5, 1]), Err(WireError::Truncated));
        // range that runs below zero
        assert_eq!(Frame::decode_all(&[0x02, 3, 0, 1, 0, 5]), Err(WireError::BadAckRange));
        assert_eq!(Frame::decode_all(&[0x05, 1]), Err(WireError::Truncated));
    }

    #[test]
    fn padding_run_collapses() {
        let frames = Frame::decode_all(&[0x01, 0, 0, 0]).unwrap();
        assert_eq!(frames, vec![Frame::Ping, Frame::Padding { len: 3 }]);
        assert!(!frames[1].is_ack_eliciting());
        assert!(frames[0].is_ack_eliciting());
    }
}
