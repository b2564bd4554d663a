use std::collections::BTreeMap;

use crate::net::FourTuple;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowState {
    Open,
    /// We have sent our fin.
    HalfClosedLocal,
    /// The peer has sent its fin.
    HalfClosedRemote,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuplicateFlow;

/// Bidirectional four-tuple to stream association.
#[derive(Debug, Default)]
pub struct FlowMap {
    by_tuple: BTreeMap<FourTuple, u64>,
    by_stream: BTreeMap<u64, (FourTuple, FlowState)>,
}

impl FlowMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, flow: FourTuple, stream: u64) -> Result<(), DuplicateFlow> {
        if self.by_tuple.contains_key(&flow) || self.by_stream.contains_key(&stream) {
            return Err(DuplicateFlow);
        }
        self.by_tuple.insert(flow, stream);
        self.by_stream.insert(stream, (flow, FlowState::Open));
        Ok(())
    }

    pub fn stream_of(&self, flow: &FourTuple) -> Option<u64> {
        self.by_tuple.get(flow).copied()
    }

    pub fn flow_of(&self, stream: u64) -> Option<FourTuple> {
        self.by_stream.get(&stream).map(|e| e.0)
    }

    pub fn state(&self, stream: u64) -> Option<FlowState> {
        self.by_stream.get(&stream).map(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.by_stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_stream.is_empty()
    }

    fn transition(&mut self, stream: u64, local: bool) {
        let Some(entry) = self.by_stream.get_mut(&stream) else {
            return;
        };
        entry.1 = match (entry.1, local) {
            (FlowState::Open, true) => FlowState::HalfClosedLocal,
            (FlowState::Open, false) => FlowState::HalfClosedRemote,
            (FlowState::HalfClosedRemote, true) | (FlowState::HalfClosedLocal, false) => FlowState::Closed,
            (s, _) => s,
        };
        if entry.1 == FlowState::Closed {
            self.remove(stream);
        }
    }

    pub fn local_finished(&mut self, stream: u64) {
        self.transition(stream, true);
    }

    pub fn remote_finished(&mut self, stream: u64) {
        self.transition(stream, false);
    }

    pub fn remove(&mut self, stream: u64) -> Option<FourTuple> {
        let (flow, _) = self.by_stream.remove(&stream)?;
        self.by_tuple.remove(&flow);
        Some(flow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(port: u16) -> FourTuple {
        FourTuple::new(
            format!("10.0.0.2:{port}").parse().unwrap(),
            "93.184.216.34:80".parse().unwrap(),
        )
    }

    #[test]
    fn one_live_stream_per_tuple() {
        let mut m = FlowMap::new();
        m.insert(t(1), 1).unwrap();
        assert_eq!(m.insert(t(1), 3), Err(DuplicateFlow));
        m.insert(t(2), 3).unwrap();
        assert_eq!(m.stream_of(&t(2)), Some(3));
        assert_eq!(m.flow_of(1), Some(t(1)));
    }

    #[test]
    fn removed_after_both_directions_close() {
        let mut m = FlowMap::new();
        m.insert(t(1), 1).unwrap();
        m.local_finished(1);
        assert_eq!(m.state(1), Some(FlowState::HalfClosedLocal));
        m.local_finished(1);
        assert_eq!(m.state(1), Some(FlowState::HalfClosedLocal));
        m.remote_finished(1);
        assert_eq!(m.state(1), None);
        assert!(m.is_empty());
        m.insert(t(1), 5).unwrap();
    }
}
