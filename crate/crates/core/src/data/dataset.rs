use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Label, Segment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub query_id: u64,
    pub seg_a: Segment,
    pub seg_b: Segment,
    pub label: Label,
    /// `perfect`, `mistake` or `human`.
    pub labeler: String,
    /// RFC 3339 wall-clock time the label arrived.
    pub timestamp: String,
}

/// The growing dataset of labeled segment pairs.
#[derive(Clone, Debug, Default)]
pub struct PreferenceDataset {
    triplets: Vec<PreferenceTriplet>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[PreferenceTriplet] {
        &self.triplets
    }

    pub fn push(&mut self, t: PreferenceTriplet) -> Result<()> {
        t.seg_a.validate()?;
        t.seg_b.validate()?;
        if t.seg_a.len() != t.seg_b.len() {
            return Err(Error::Data(format!("segment lengths differ: {} vs {}", t.seg_a.len(), t.seg_b.len())));
        }
        Label::new(t.label.0, t.label.1)?;
        self.triplets.push(t);
        Ok(())
    }

    /// Appends `triplets` to a JSON-lines file, one triplet per line.
    pub fn append_jsonl(path: &Path, triplets: &[PreferenceTriplet]) -> Result<()> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut w = BufWriter::new(file);
        for t in triplets {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut ds = PreferenceDataset::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: PreferenceTriplet =
                serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            ds.push(t)?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(v: f32) -> Segment {
        Segment {
            states: vec![vec![v, 0.0]; 3],
            actions: vec![vec![1.0]; 3],
            target_rewards: vec![v; 3],
            source_episode: 4,
            start_index: 2,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preferences.jsonl");
        let t = PreferenceTriplet {
            query_id: 7,
            seg_a: seg(0.25),
            seg_b: seg(-1.5),
            label: Label::A,
            labeler: "perfect".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
        };
        let mut u = t.clone();
        u.label = Label::EQUAL;
        u.query_id = 8;
        PreferenceDataset::append_jsonl(&path, &[t.clone()]).unwrap();
        PreferenceDataset::append_jsonl(&path, &[u.clone()]).unwrap();
        let back = PreferenceDataset::read_jsonl(&path).unwrap();
        assert_eq!(back.triplets(), &[t, u]);
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        let mut ds = PreferenceDataset::new();
        let mut t = PreferenceTriplet {
            query_id: 0,
            seg_a: seg(0.0),
            seg_b: seg(1.0),
            label: Label(0.3, 0.7),
            labeler: "perfect".into(),
            timestamp: String::new(),
        };
        assert!(ds.push(t.clone()).is_err());
        t.label = Label::B;
        t.seg_b.states.pop();
        assert!(ds.push(t).is_err());
        assert!(ds.is_empty());
    }
}
