use std::io::{self, Read, Write};

use super::profile::Direction;
use crate::runtime::Micros;

const DROPPED: u64 = u64::MAX;

/// Verbatim copy of one datagram offered to the satellite link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapRecord {
    pub direction: Direction,
    pub send_time_us: Micros,
    pub deliver_time_us: Option<Micros>,
    pub payload: Vec<u8>,
}

/// Writes records as `u8 dir | u64 send | u64 deliver | u32 len | payload`, all big-endian.
pub fn write_tap_log<W: Write>(records: &[TapRecord], mut w: W) -> io::Result<()> {
    for r in records {
        w.write_all(&[r.direction.wire_code()])?;
        w.write_all(&r.send_time_us.to_be_bytes())?;
        w.write_all(&r.deliver_time_us.unwrap_or(DROPPED).to_be_bytes())?;
        w.write_all(&(r.payload.len() as u32).to_be_bytes())?;
        w.write_all(&r.payload)?;
    }
    Ok(())
}

pub fn read_tap_log<R: Read>(mut r: R) -> io::Result<Vec<TapRecord>> {
    let mut out = Vec::new();
    loop {
        let mut dir = [0u8; 1];
        match r.read_exact(&mut dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(out),
            Err(e) => return Err(e),
        }
        let direction = Direction::from_wire_code(dir[0])
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad direction byte"))?;
        let mut fixed = [0u8; 20];
        r.read_exact(&mut fixed)?;
        let send = u64::from_be_bytes(fixed[0..8].try_into().unwrap());
        let deliver = u64::from_be_bytes(fixed[8..16].try_into().unwrap());
        let len = u32::from_be_bytes(fixed[16..20].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        out.push(TapRecord {
            direction,
            send_time_us: send,
            deliver_time_us: (deliver != DROPPED).then_some(deliver),
            payload,
        });
    }
}

/// True if any single record's payload contains `needle`.
pub fn tap_contains(records: &[TapRecord], needle: &[u8]) -> bool {
    records.iter().any(|r| contains(&r.payload, needle))
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if haystack.len() < needle.len() {
        return false;
    }
    let first = needle[0];
    let last = haystack.len() - needle.len();
    let mut i = 0;
    while i <= last {
        match haystack[i..=last].iter().position(|&b| b == first) {
            None => return false,
            Some(off) => {
                i += off;
                if &haystack[i..i + needle.len()] == needle {
                    return true;
                }
                i += 1;
            }
        }
    }
    false
}
