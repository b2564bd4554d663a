//! Minimal network-layer envelope carried over every emulated hop.

use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// `src_ip | dst_ip | proto`.
pub const IP_HEADER_LEN: usize = 9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("ip packet shorter than its {IP_HEADER_LEN}-byte header")]
pub struct TruncatedPacket;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpPacket {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: u8,
    pub payload: Vec<u8>,
}

impl IpPacket {
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, payload: Vec<u8>) -> Self {
        Self {
            src,
            dst,
            proto,
            payload,
        }
    }

    pub fn wire_len(&self) -> usize {
        IP_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        out.push(self.proto);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, TruncatedPacket> {
        if buf.len() < IP_HEADER_LEN {
            return Err(TruncatedPacket);
        }
        let ip = |b: &[u8]| Ipv4Addr::new(b[0], b[1], b[2], b[3]);
        Ok(Self {
            src: ip(&buf[0..4]),
            dst: ip(&buf[4..8]),
            proto: buf[8],
            payload: buf[IP_HEADER_LEN..].to_vec(),
        })
    }
}

/// A TCP flow as seen from its initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FourTuple {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
}

impl FourTuple {
    pub fn new(src: SocketAddrV4, dst: SocketAddrV4) -> Self {
        Self { src, dst }
    }

    pub fn reversed(self) -> Self {
        Self {
            src: self.dst,
            dst: self.src,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_layout() {
        let p = IpPacket::new(
            Ipv4Addr::new(10, 0, 0, 2),
            Ipv4Addr::new(93, 184, 216, 34),
            PROTO_TCP,
            vec![0xAA, 0xBB],
        );
        let b = p.encode();
        assert_eq!(b, [10, 0, 0, 2, 93, 184, 216, 34, 6, 0xAA, 0xBB]);
        assert_eq!(IpPacket::decode(&b).unwrap(), p);
        assert_eq!(IpPacket::decode(&b[..8]), Err(TruncatedPacket));
    }
}
