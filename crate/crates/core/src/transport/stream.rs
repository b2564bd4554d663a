use std::collections::{BTreeMap, VecDeque};

use super::ranges::RangeSet;

#[derive(Debug, Default)]
pub(crate) struct SendStream {
    /// Everything ever written; index equals stream offset.
    pub data: Vec<u8>,
    /// Next offset never sent before.
    pub next_offset: u64,
    pub fin: bool,
    pub fin_sent: bool,
    pub fin_acked: bool,
    pub acked: RangeSet,
    pub queued: bool,
}

impl SendStream {
    pub fn has_unsent(&self) -> bool {
        (self.next_offset as usize) < self.data.len() || (self.fin && !self.fin_sent)
    }

    pub fn final_size(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn is_done(&self) -> bool {
        self.fin && self.fin_acked && self.acked.covers(0, self.final_size())
    }
}

#[derive(Debug, Default)]
pub(crate) struct RecvStream {
    pending: BTreeMap<u64, Vec<u8>>,
    /// Offset up to which bytes have been moved into `readable`.
    pub contiguous: u64,
    pub readable: VecDeque<u8>,
    pub final_size: Option<u64>,
    pub fin_reported: bool,
}

impl RecvStream {
    /// Stores a chunk and returns how many new bytes became readable.
    pub fn insert(&mut self, offset: u64, data: &[u8], fin: bool) -> usize {
        let end = offset + data.len() as u64;
        if fin {
            self.final_size.get_or_insert(end);
        }
        if end > self.contiguous && !data.is_empty() {
            let skip = self.contiguous.saturating_sub(offset) as usize;
            let start = offset + skip as u64;
            let chunk = &data[skip..];
            let keep = match self.pending.get(&start) {
                Some(existing) => existing.len() < chunk.len(),
                None => true,
            };
            if keep {
                self.pending.insert(start, chunk.to_vec());
            }
        }
        let before = self.contiguous;
        while let Some(entry) = self.pending.first_entry() {
            let start = *entry.key();
            if start > self.contiguous {
                break;
            }
            let chunk = entry.remove();
            let chunk_end = start + chunk.len() as u64;
            if chunk_end > self.contiguous {
                let skip = (self.contiguous - start) as usize;
                self.readable.extend(&chunk[skip..]);
                self.contiguous = chunk_end;
            }
        }
        (self.contiguous - before) as usize
    }

    pub fn all_received(&self) -> bool {
        self.final_size.is_some_and(|f| self.contiguous >= f)
    }
}

#[derive(Debug, Default)]
pub(crate) struct Stream {
    pub send: SendStream,
    pub recv: RecvStream,
}

impl Stream {
    /// Both directions finished and drained by the application.
    pub fn is_finished(&self) -> bool {
        self.send.is_done() && self.recv.fin_reported && self.recv.readable.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reassembles_out_of_order_and_duplicates() {
        let mut r = RecvStream::default();
        assert_eq!(r.insert(3, b"def", false), 0);
        assert_eq!(r.insert(0, b"abc", false), 6);
        assert_eq!(r.insert(1, b"bcdefg", true), 1);
        assert_eq!(r.insert(0, b"abc", false), 0);
        assert!(r.all_received());
        assert_eq!(r.readable.iter().copied().collect::<Vec<_>>(), b"abcdefg");
    }

    #[test]
    fn empty_fin() {
        let mut r = RecvStream::default();
        assert_eq!(r.insert(0, b"", true), 0);
        assert!(r.all_received());
    }
}
