use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

use crate::net::FourTuple;

pub const HEADER_VERSION: u8 = 0x01;
pub const FAMILY_IPV4: u8 = 0x04;
pub const QPEP_HEADER_LEN: usize = 14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeaderError {
    #[error("header needs {QPEP_HEADER_LEN} bytes, got {0}")]
    Truncated(usize),
    #[error("unsupported address family {0:#04x}")]
    UnsupportedFamily(u8),
    #[error("unsupported header version {0:#04x}")]
    UnsupportedVersion(u8),
}

/// First bytes of every tunnel stream: which flow the stream carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpepHeader {
    pub flow: FourTuple,
}

impl QpepHeader {
    pub fn new(flow: FourTuple) -> Self {
        Self { flow }
    }

    pub fn encode(&self) -> [u8; QPEP_HEADER_LEN] {
        let mut out = [0u8; QPEP_HEADER_LEN];
        out[0] = HEADER_VERSION;
        out[1] = FAMILY_IPV4;
        out[2..6].copy_from_slice(&self.flow.src.ip().octets());
        out[6..10].copy_from_slice(&self.flow.dst.ip().octets());
        out[10..12].copy_from_slice(&self.flow.src.port().to_be_bytes());
        out[12..14].copy_from_slice(&self.flow.dst.port().to_be_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, HeaderError> {
        if buf.len() < QPEP_HEADER_LEN {
            return Err(HeaderError::Truncated(buf.len()));
        }
        if buf[0] != HEADER_VERSION {
            return Err(HeaderError::UnsupportedVersion(buf[0]));
        }
        if buf[1] != FAMILY_IPV4 {
            return Err(HeaderError::UnsupportedFamily(buf[1]));
        }
        let ip = |b: &[u8]| Ipv4Addr::new(b[0], b[1], b[2], b[3]);
        let port = |i: usize| u16::from_be_bytes([buf[i], buf[i + 1]]);
        Ok(Self {
            flow: FourTuple::new(
                SocketAddrV4::new(ip(&buf[2..6]), port(10)),
                SocketAddrV4::new(ip(&buf[6..10]), port(12)),
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_layout() {
        let h = QpepHeader::new(FourTuple::new(
            "10.0.0.2:51000".parse().unwrap(),
            "93.184.216.34:80".parse().unwrap(),
        ));
        assert_eq!(
            h.encode(),
            [0x01, 0x04, 0x0A, 0x00, 0x00, 0x02, 0x5D, 0xB8, 0xD8, 0x22, 0xC7, 0x38, 0x00, 0x50]
        );
        assert_eq!(QpepHeader::decode(&h.encode()), Ok(h));
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = QpepHeader::new(FourTuple::new(
            "10.0.0.2:1".parse().unwrap(),
            "10.0.0.3:2".parse().unwrap(),
        ))
        .encode();
        assert_eq!(QpepHeader::decode(&b[..13]), Err(HeaderError::Truncated(13)));
        b[1] = 0x06;
        assert_eq!(QpepHeader::decode(&b), Err(HeaderError::UnsupportedFamily(0x06)));
        b[0] = 0x02;
        assert_eq!(QpepHeader::decode(&b), Err(HeaderError::UnsupportedVersion(0x02)));
    }
}
