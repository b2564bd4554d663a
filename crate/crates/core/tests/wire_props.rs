use std::net::{Ipv4Addr, SocketAddrV4};

use proptest::prelude::*;

use satpep_core::link::{read_tap_log, write_tap_log, Direction, TapRecord};
use satpep_core::net::{FourTuple, IpPacket};
use satpep_core::pep::{QpepHeader, QPEP_HEADER_LEN};
use satpep_core::transport::{varint, AckFrame, Frame, PacketHeader, HEADER_LEN};

fn addr() -> impl Strategy<Value = SocketAddrV4> {
    (any::<u32>(), any::<u16>()).prop_map(|(ip, port)| SocketAddrV4::new(Ipv4Addr::from(ip), port))
}

/// Inclusive ranges, highest first, with at least one missing number between neighbours.
fn ack_ranges() -> impl Strategy<Value = Vec<(u64, u64)>> {
    (0u64..1 << 40, prop::collection::vec((1u64..50, 1u64..50), 1..12)).prop_map(|(top, steps)| {
        let mut out = Vec::new();
        let mut hi = top + 5_000;
        for (gap, run) in steps {
            let lo = hi.saturating_sub(run - 1);
            out.push((lo, hi));
            match lo.checked_sub(gap + 1) {
                Some(next) => hi = next,
                None => break,
            }
        }
        out
    })
}

fn frame() -> impl Strategy<Value = Frame> {
    prop_oneof![
        (1usize..64).prop_map(|len| Frame::Padding { len }),
        Just(Frame::Ping),
        (ack_ranges(), any::<u32>()).prop_map(|(r, d)| Frame::Ack(AckFrame::from_ranges(&r, d as u64))),
        (any::<u64>(), any::<u16>()).prop_map(|(stream_id, error_code)| Frame::ResetStream { stream_id, error_code }),
        any::<u16>().prop_map(|error_code| Frame::Close { error_code }),
        (any::<u64>(), 0u64..1 << 50, any::<bool>(), prop::collection::vec(any::<u8>(), 0..1500)).prop_map(
            |(stream_id, offset, fin, data)| Frame::Stream {
                stream_id,
                offset,
                fin,
                data
            }
        ),
    ]
}

proptest! {
    #[test]
    fn varint_roundtrip(v in any::<u64>()) {
        let mut out = Vec::new();
        varint::encode(v, &mut out);
        prop_assert_eq!(out.len(), varint::len(v));
        let mut cur = &out[..];
        prop_assert_eq!(varint::decode(&mut cur).unwrap(), v);
        prop_assert!(cur.is_empty());
    }

    #[test]
    fn frames_roundtrip(frames in prop::collection::vec(frame(), 1..8)) {
        // Padding runs to the end of a packet, so keep it last.
        let mut frames: Vec<Frame> = frames.into_iter().filter(|f| !matches!(f, Frame::Padding { .. })).collect();
        frames.push(Frame::Padding { len: 3 });
        let mut buf = Vec::new();
        for f in &frames {
            let before = buf.len();
            f.encode(&mut buf);
            prop_assert_eq!(buf.len() - before, f.encoded_len());
        }
        let back = Frame::decode_all(&buf).unwrap();
        let strip = |v: &[Frame]| v.iter().filter(|f| !matches!(f, Frame::Padding { .. })).cloned().collect::<Vec<_>>();
        prop_assert_eq!(strip(&back), strip(&frames));
    }

    #[test]
    fn ack_ranges_roundtrip(r in ack_ranges(), delay in any::<u32>()) {
        let a = AckFrame::from_ranges(&r, delay as u64);
        prop_assert_eq!(a.decoded_ranges().unwrap(), r);
    }

    #[test]
    fn decode_all_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Frame::decode_all(&bytes);
    }

    #[test]
    fn packet_header_roundtrip(sid in any::<u64>(), pn in any::<u64>(), hs in any::<bool>()) {
        let h = PacketHeader::new(sid, pn, hs);
        let enc = h.encode();
        prop_assert_eq!(enc.len(), HEADER_LEN);
        prop_assert_eq!(PacketHeader::decode(&enc).unwrap(), h);
        prop_assert_eq!(h.is_handshake(), hs);
    }

    #[test]
    fn qpep_header_roundtrip(src in addr(), dst in addr()) {
        let h = QpepHeader::new(FourTuple::new(src, dst));
        let enc = h.encode();
        prop_assert_eq!(enc.len(), QPEP_HEADER_LEN);
        prop_assert_eq!(QpepHeader::decode(&enc).unwrap(), h);
        prop_assert!(QpepHeader::decode(&enc[..QPEP_HEADER_LEN - 1]).is_err());
    }

    #[test]
    fn ip_packet_roundtrip(src in any::<u32>(), dst in any::<u32>(), proto in any::<u8>(), payload in prop::collection::vec(any::<u8>(), 0..2000)) {
        let p = IpPacket::new(Ipv4Addr::from(src), Ipv4Addr::from(dst), proto, payload);
        let enc = p.encode();
        prop_assert_eq!(enc.len(), p.wire_len());
        prop_assert_eq!(IpPacket::decode(&enc).unwrap(), p);
    }

    #[test]
    fn tap_log_roundtrip(recs in prop::collection::vec((any::<bool>(), any::<u64>(), any::<Option<u64>>(), prop::collection::vec(any::<u8>(), 0..300)), 0..20)) {
        let records: Vec<TapRecord> = recs
            .into_iter()
            .map(|(fwd, send, deliver, payload)| TapRecord {
                direction: if fwd { Direction::Forward } else { Direction::Return },
                send_time_us: send,
                deliver_time_us: deliver,
                payload,
            })
            .collect();
        let mut buf = Vec::new();
        write_tap_log(&records, &mut buf).unwrap();
        prop_assert_eq!(read_tap_log(&buf[..]).unwrap(), records);
    }
}
