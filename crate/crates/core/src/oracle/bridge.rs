use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::data::{Label, Segment};
use crate::envs::Frame;

/// One segment as shown to a labeler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub frames: Vec<Frame>,
    pub actions: Vec<Vec<f32>>,
}

/// Wire form of a pending query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub query_id: u64,
    pub segments: [SegmentView; 2],
    /// Per-timestep importance of each segment.
    pub attention: [Vec<f32>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendingQuery {
    pub payload: QueryPayload,
    pub seg_a: Segment,
    pub seg_b: Segment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmitError {
    NotFound,
    Conflict,
}

#[derive(Default)]
struct State {
    pending: BTreeMap<u64, PendingQuery>,
    labeled: HashSet<u64>,
    /// Labels waiting to be consumed at the next session boundary.
    inbox: Vec<(PendingQuery, Label)>,
}

/// Shared queue between the training loop and the query service. The loop
/// publishes immutable query snapshots and drains labels; the service only
/// reads snapshots and appends labels.
#[derive(Clone, Default)]
pub struct HumanBridge {
    state: Arc<Mutex<State>>,
}

impl HumanBridge {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn publish(&self, queries: Vec<PendingQuery>) {
        let mut s = self.lock();
        for q in queries {
            s.pending.insert(q.payload.query_id, q);
        }
    }

    pub fn pending(&self) -> Vec<QueryPayload> {
        self.lock().pending.values().map(|q| q.payload.clone()).collect()
    }

    pub fn pending_count(&self) -> usize {
        self.lock().pending.len()
    }

    /// Records a label. Each query accepts exactly one label.
    pub fn submit(&self, query_id: u64, label: Label) -> Result<(), SubmitError> {
        let mut s = self.lock();
        if s.labeled.contains(&query_id) {
            return Err(SubmitError::Conflict);
        }
        let q = s.pending.remove(&query_id).ok_or(SubmitError::NotFound)?;
        s.labeled.insert(query_id);
        s.inbox.push((q, label));
        Ok(())
    }

    /// Takes every label received since the last call, in arrival order.
    pub fn drain(&self) -> Vec<(PendingQuery, Label)> {
        std::mem::take(&mut self.lock().inbox)
    }

    /// Drops all still-pending queries; returns how many expired.
    pub fn expire_pending(&self) -> usize {
        let mut s = self.lock();
        let n = s.pending.len();
        s.pending.clear();
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(id: u64) -> PendingQuery {
        let seg = Segment { states: vec![vec![0.0]], actions: vec![vec![1.0]], target_rewards: vec![0.0], source_episode: 0, start_index: 0 };
        let view = SegmentView { frames: vec![], actions: vec![vec![1.0]] };
        PendingQuery {
            payload: QueryPayload { query_id: id, segments: [view.clone(), view], attention: [vec![1.0], vec![1.0]] },
            seg_a: seg.clone(),
            seg_b: seg,
        }
    }

    #[test]
    fn labels_each_query_once() {
        let b = HumanBridge::new();
        assert!(b.pending().is_empty());
        b.publish(vec![query(3), query(4)]);
        assert_eq!(b.submit(9, Label::A), Err(SubmitError::NotFound));
        assert_eq!(b.submit(3, Label::A), Ok(()));
        assert_eq!(b.submit(3, Label::B), Err(SubmitError::Conflict));
        assert_eq!(b.pending().len(), 1);
        let got = b.drain();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].1, Label::A);
        assert!(b.drain().is_empty());
        assert_eq!(b.expire_pending(), 1);
        assert_eq!(b.submit(4, Label::A), Err(SubmitError::NotFound));
    }
}
