use super::WireError;
use crate::crypto::{PacketCipher, TAG_LEN};

pub const HEADER_LEN: usize = 18;
pub const VERSION: u8 = 0x01;
pub const FLAG_HANDSHAKE: u8 = 0x01;
pub const RANDOM_LEN: usize = 32;

const INIT: u8 = 0x01;
const RESP: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub version: u8,
    pub flags: u8,
    pub session_id: u64,
    pub packet_number: u64,
}

impl PacketHeader {
    pub fn new(session_id: u64, packet_number: u64, handshake: bool) -> Self {
        Self {
            version: VERSION,
            flags: if handshake { FLAG_HANDSHAKE } else { 0 },
            session_id,
            packet_number,
        }
    }

    pub fn is_handshake(&self) -> bool {
        self.flags & FLAG_HANDSHAKE != 0
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = self.version;
        out[1] = self.flags;
        out[2..10].copy_from_slice(&self.session_id.to_be_bytes());
        out[10..18].copy_from_slice(&self.packet_number.to_be_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < HEADER_LEN {
            return Err(WireError::Truncated);
        }
        if buf[0] != VERSION {
            return Err(WireError::BadVersion(buf[0]));
        }
        Ok(Self {
            version: buf[0],
            flags: buf[1],
            session_id: u64::from_be_bytes(buf[2..10].try_into().unwrap()),
            packet_number: u64::from_be_bytes(buf[10..18].try_into().unwrap()),
        })
    }
}

/// Cleartext handshake payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Handshake {
    Init { client_random: [u8; RANDOM_LEN] },
    Resp { server_random: [u8; RANDOM_LEN] },
}

impl Handshake {
    /// Full datagram; INIT is zero-padded up to `max_packet_size`.
    pub fn encode(&self, header: &PacketHeader, max_packet_size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(max_packet_size);
        out.extend_from_slice(&header.encode());
        match self {
            Handshake::Init { client_random } => {
                out.push(INIT);
                out.extend_from_slice(client_random);
                if out.len() < max_packet_size {
                    out.resize(max_packet_size, 0);
                }
            }
            Handshake::Resp { server_random } => {
                out.push(RESP);
                out.extend_from_slice(server_random);
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, WireError> {
        if body.len() < 1 + RANDOM_LEN {
            return Err(WireError::BadHandshake);
        }
        let random: [u8; RANDOM_LEN] = body[1..1 + RANDOM_LEN].try_into().unwrap();
        match body[0] {
            INIT => Ok(Handshake::Init {
                client_random: random,
            }),
            RESP => Ok(Handshake::Resp {
                server_random: random,
            }),
            _ => Err(WireError::BadHandshake),
        }
    }
}

/// `header || AEAD(frames) || tag` with the header as associated data.
pub fn seal_packet(cipher: &PacketCipher, header: &PacketHeader, frames: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + frames.len() + TAG_LEN);
    buf.extend_from_slice(&header.encode());
    buf.extend_from_slice(frames);
    cipher.seal_in_place(header.packet_number, &mut buf, HEADER_LEN);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = PacketHeader::new(0x0102_0304_0506_0708, 0x1122, true);
        let b = h.encode();
        assert_eq!(
            b,
            [1, 1, 1, 2, 3, 4, 5, 6, 7, 8, 0, 0, 0, 0, 0, 0, 0x11, 0x22]
        );
        assert_eq!(PacketHeader::decode(&b).unwrap(), h);
        assert_eq!(PacketHeader::decode(&b[..17]), Err(WireError::Truncated));
        let mut v2 = b;
        v2[0] = 2;
        assert_eq!(PacketHeader::decode(&v2), Err(WireError::BadVersion(2)));
    }

    #[test]
    fn init_is_padded_resp_is_not() {
        let h = PacketHeader::new(9, 0, true);
        let init = Handshake::Init {
            client_random: [7; 32],
        }
        .encode(&h, 1200);
        assert_eq!(init.len(), 1200);
        assert_eq!(init[HEADER_LEN], 0x01);
        assert!(init[HEADER_LEN + 33..].iter().all(|&b| b == 0));
        let resp = Handshake::Resp {
            server_random: [8; 32],
        }
        .encode(&h, 1200);
        assert_eq!(resp.len(), HEADER_LEN + 33);
        assert_eq!(
            Handshake::decode(&resp[HEADER_LEN..]).unwrap(),
            Handshake::Resp {
                server_random: [8; 32]
            }
        );
        assert_eq!(Handshake::decode(&[0x03; 33]), Err(WireError::BadHandshake));
    }
}
