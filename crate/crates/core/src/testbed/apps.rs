use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use crate::baseline::tcp::{ConnId, TcpEvent, TcpStack};
use crate::runtime::Micros;

pub const HTTP_PORT: u16 = 80;
pub const ECHO_PORT: u16 = 7;
pub const MARKER_LEN: usize = 32;
pub const REQUEST_MAGIC: &[u8; 4] = b"SPRQ";
pub const REQUEST_LEN: usize = 4 + 8 + MARKER_LEN;

pub type Marker = [u8; MARKER_LEN];

/// `SPRQ` ‖ size (u64 BE) ‖ marker.
pub fn encode_request(size: u64, marker: &Marker) -> [u8; REQUEST_LEN] {
    let mut out = [0u8; REQUEST_LEN];
    out[..4].copy_from_slice(REQUEST_MAGIC);
    out[4..12].copy_from_slice(&size.to_be_bytes());
    out[12..].copy_from_slice(marker);
    out
}

pub fn decode_request(buf: &[u8]) -> Option<(u64, Marker)> {
    if buf.len() < REQUEST_LEN || &buf[..4] != REQUEST_MAGIC {
        return None;
    }
    let size = u64::from_be_bytes(buf[4..12].try_into().unwrap());
    Some((size, buf[12..REQUEST_LEN].try_into().unwrap()))
}

/// Byte `i` of a response body: the marker first, then a fixed filler.
pub fn response_byte(marker: &Marker, i: u64) -> u8 {
    if i < MARKER_LEN as u64 {
        marker[i as usize]
    } else {
        (i.wrapping_mul(0x9E37_79B1) >> 13) as u8
    }
}

pub fn response_body(marker: &Marker, size: u64) -> Vec<u8> {
    (0..size).map(|i| response_byte(marker, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchKind {
    /// Ask for `size` response bytes.
    Get { size: u64 },
    /// Send `data`, half-close, expect it back.
    Echo { data: Vec<u8> },
}

/// Timeline and outcome of one client connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetch {
    pub tag: u32,
    pub remote: SocketAddrV4,
    pub kind: FetchKind,
    pub connect_at: Micros,
    pub connected_at: Option<Micros>,
    pub first_byte_at: Option<Micros>,
    pub last_byte_at: Option<Micros>,
    pub received: u64,
    /// Every received byte matched the expected content.
    pub intact: bool,
    pub peer_closed: bool,
    pub failed: bool,
}

impl Fetch {
    pub fn expected_len(&self) -> u64 {
        match &self.kind {
            FetchKind::Get { size } => *size,
            FetchKind::Echo { data } => data.len() as u64,
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.failed && self.intact && self.peer_closed && self.received == self.expected_len()
    }

    pub fn is_settled(&self) -> bool {
        self.failed || self.peer_closed
    }
}

/// Client application: issues fetches over a TCP stack and checks every byte.
#[derive(Debug)]
pub struct ClientApp {
    pub ip: Ipv4Addr,
    marker: Marker,
    fetches: Vec<Fetch>,
    by_conn: BTreeMap<ConnId, usize>,
}

impl ClientApp {
    pub fn new(ip: Ipv4Addr, marker: Marker) -> Self {
        Self {
            ip,
            marker,
            fetches: Vec::new(),
            by_conn: BTreeMap::new(),
        }
    }

    pub fn marker(&self) -> &Marker {
        &self.marker
    }

    pub fn fetches(&self) -> &[Fetch] {
        &self.fetches
    }

    /// Opens a connection; returns the fetch index.
    pub fn start(&mut self, stack: &mut TcpStack, now: Micros, tag: u32, remote: SocketAddrV4, kind: FetchKind) -> usize {
        let local = SocketAddrV4::new(self.ip, stack.ephemeral_port());
        let id = stack.connect(local, remote);
        match &kind {
            FetchKind::Get { size } => {
                let _ = stack.send(id, &encode_request(*size, &self.marker));
            }
            FetchKind::Echo { data } => {
                let _ = stack.send(id, data);
                stack.close(id);
            }
        }
        self.fetches.push(Fetch {
            tag,
            remote,
            kind,
            connect_at: now,
            connected_at: None,
            first_byte_at: None,
            last_byte_at: None,
            received: 0,
            intact: true,
            peer_closed: false,
            failed: false,
        });
        let idx = self.fetches.len() - 1;
        self.by_conn.insert(id, idx);
        idx
    }

    /// Applies a stack event; returns the index of a fetch that just settled.
    pub fn on_event(&mut self, stack: &mut TcpStack, now: Micros, e: TcpEvent) -> Option<usize> {
        match e {
            TcpEvent::Connected(id) => {
                let &i = self.by_conn.get(&id)?;
                self.fetches[i].connected_at.get_or_insert(now);
                None
            }
            TcpEvent::Readable(id) => {
                let data = stack.read(id);
                let &i = self.by_conn.get(&id)?;
                let marker = self.marker;
                let f = &mut self.fetches[i];
                if data.is_empty() {
                    return None;
                }
                f.first_byte_at.get_or_insert(now);
                f.last_byte_at = Some(now);
                for (k, &b) in data.iter().enumerate() {
                    let off = f.received + k as u64;
                    let expect = match &f.kind {
                        FetchKind::Get { size } => (off < *size).then(|| response_byte(&marker, off)),
                        FetchKind::Echo { data } => data.get(off as usize).copied(),
                    };
                    if expect != Some(b) {
                        f.intact = false;
                    }
                }
                f.received += data.len() as u64;
                None
            }
            TcpEvent::PeerClosed(id) => {
                let &i = self.by_conn.get(&id)?;
                if matches!(self.fetches[i].kind, FetchKind::Get { .. }) {
                    stack.close(id);
                }
                let f = &mut self.fetches[i];
                let was = f.is_settled();
                f.peer_closed = true;
                (!was).then_some(i)
            }
            TcpEvent::Reset(id, _) | TcpEvent::ConnectFailed(id, _) => {
                let &i = self.by_conn.get(&id)?;
                let f = &mut self.fetches[i];
                let was = f.is_settled();
                f.failed = true;
                (!was).then_some(i)
            }
            TcpEvent::Closed(_) | TcpEvent::Incoming { .. } => None,
        }
    }
}

#[derive(Debug, Default)]
struct ServerConn {
    request: Vec<u8>,
    answered: bool,
}

/// Origin server: answers `SPRQ` requests on the HTTP port and echoes on the echo port.
#[derive(Debug, Default)]
pub struct ServerApp {
    conns: BTreeMap<ConnId, ServerConn>,
    pub bytes_served: u64,
}

impl ServerApp {
    pub fn install(stack: &mut TcpStack) {
        stack.listen(HTTP_PORT);
        stack.listen(ECHO_PORT);
    }

    pub fn on_event(&mut self, stack: &mut TcpStack, e: TcpEvent) {
        match e {
            TcpEvent::Incoming { id, .. } => {
                self.conns.insert(id, ServerConn::default());
            }
            TcpEvent::Readable(id) => {
                let data = stack.read(id);
                let Some((local, _)) = stack.endpoints(id) else {
                    return;
                };
                if local.port() == ECHO_PORT {
                    let _ = stack.send(id, &data);
                    return;
                }
                let Some(c) = self.conns.get_mut(&id) else {
                    return;
                };
                if c.answered {
                    return;
                }
                c.request.extend_from_slice(&data);
                if c.request.len() < REQUEST_LEN {
                    return;
                }
                c.answered = true;
                match decode_request(&c.request) {
                    Some((size, marker)) => {
                        let _ = stack.send(id, &response_body(&marker, size));
                        stack.close(id);
                        self.bytes_served += size;
                    }
                    None => stack.abort(id),
                }
            }
            TcpEvent::PeerClosed(id) => {
                let echo = stack.endpoints(id).is_some_and(|(l, _)| l.port() == ECHO_PORT);
                if echo {
                    stack.close(id);
                }
            }
            TcpEvent::Closed(id) | TcpEvent::Reset(id, _) | TcpEvent::ConnectFailed(id, _) => {
                self.conns.remove(&id);
            }
            TcpEvent::Connected(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trips() {
        let m = [7u8; MARKER_LEN];
        let r = encode_request(50_000, &m);
        assert_eq!(r.len(), 44);
        assert_eq!(&r[..4], b"SPRQ");
        assert_eq!(decode_request(&r), Some((50_000, m)));
        assert_eq!(decode_request(&r[..43]), None);
    }

    #[test]
    fn response_starts_with_marker() {
        let m: Marker = std::array::from_fn(|i| i as u8 + 100);
        let body = response_body(&m, 100);
        assert_eq!(&body[..32], &m);
        assert_eq!(body.len(), 100);
    }
}
