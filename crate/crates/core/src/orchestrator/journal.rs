//! Per-project append-only event journal with live fan-out.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use futures::stream::{self, BoxStream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub const LIVE_BUFFER: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Status,
    BuildLog,
    RunLog,
    ResultsChanged,
    Error,
    Share,
    Upload,
    Archive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogEvent {
    pub sequence: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub payload: String,
}

/// An event, or notice that the subscriber fell behind and missed events
/// starting at `first_missing`. The stream ends after a gap; resubscribe
/// from `first_missing`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalItem {
    Event(LogEvent),
    Gap { first_missing: u64 },
}

pub struct Journal {
    path: PathBuf,
    file: Option<File>,
    events: Vec<LogEvent>,
    live: broadcast::Sender<LogEvent>,
}

impl Journal {
    /// Opens `path`, replaying any events already stored there.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut events = Vec::new();
        if let Ok(f) = File::open(path) {
            for line in BufReader::new(f).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LogEvent>(&line) {
                    Ok(e) => events.push(e),
                    // A torn final line from a crash is dropped.
                    Err(_) => break,
                }
            }
        }
        let (live, _) = broadcast::channel(LIVE_BUFFER);
        Ok(Self { path: path.to_owned(), file: None, events, live })
    }

    pub fn head(&self) -> u64 {
        self.events.last().map_or(0, |e| e.sequence)
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn append(&mut self, kind: EventKind, payload: impl Into<String>) -> std::io::Result<LogEvent> {
        let event = LogEvent { sequence: self.head() + 1, timestamp: Utc::now(), kind, payload: payload.into() };
        if self.file.is_none() {
            if let Some(dir) = self.path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            self.file = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let mut line = serde_json::to_vec(&event).expect("event serializes");
        line.push(b'\n');
        self.file.as_mut().expect("opened above").write_all(&line)?;
        self.events.push(event.clone());
        let _ = self.live.send(event.clone());
        Ok(event)
    }

    /// Replays events with `sequence >= from` and then follows live appends.
    /// Must be called with the journal locked so replay and live join up.
    pub fn subscribe(&self, from: u64) -> BoxStream<'static, JournalItem> {
        let replay: Vec<LogEvent> = self.events.iter().filter(|e| e.sequence >= from).cloned().collect();
        let next = self.head() + 1;
        let rx = self.live.subscribe();
        let live = stream::unfold(Some((rx, next)), |state| async move {
            let (mut rx, next) = state?;
            loop {
                match rx.recv().await {
                    Ok(e) if e.sequence < next => continue,
                    Ok(e) => {
                        let n = e.sequence + 1;
                        return Some((JournalItem::Event(e), Some((rx, n))));
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => {
                        return Some((JournalItem::Gap { first_missing: next }, None));
                    }
                    Err(broadcast::error::RecvError::Closed) => return None,
                }
            }
        });
        stream::iter(replay.into_iter().map(JournalItem::Event)).chain(live).boxed()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect_now(s: &mut BoxStream<'static, JournalItem>) -> Vec<JournalItem> {
        let mut out = Vec::new();
        while let Some(Some(item)) = s.next().now_or_never() {
            out.push(item);
        }
        out
    }

    use futures::FutureExt;

    #[test]
    fn sequences_are_gapless_and_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p/journal.log");
        let mut j = Journal::open(&path).unwrap();
        for i in 0..5 {
            assert_eq!(j.append(EventKind::BuildLog, format!("line {i}")).unwrap().sequence, i + 1);
        }
        let reopened = Journal::open(&path).unwrap();
        assert_eq!(reopened.events(), j.events());
        assert_eq!(reopened.head(), 5);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.log");
        let mut j = Journal::open(&path).unwrap();
        j.append(EventKind::Status, "Cloning").unwrap();
        drop(j);
        std::fs::OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"sequ").unwrap();
        let j = Journal::open(&path).unwrap();
        assert_eq!(j.head(), 1);
    }

    #[test]
    fn replay_then_live_without_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = Journal::open(&dir.path().join("j")).unwrap();
        j.append(EventKind::Status, "Cloning").unwrap();
        j.append(EventKind::Status, "Planning").unwrap();
        let mut s = j.subscribe(2);
        j.append(EventKind::Status, "Building").unwrap();
        let seqs: Vec<u64> = collect_now(&mut s)
            .into_iter()
            .map(|i| match i {
                JournalItem::Event(e) => e.sequence,
                JournalItem::Gap { .. } => panic!("unexpected gap"),
            })
            .collect();
        assert_eq!(seqs, vec![2, 3]);

        // Beyond the head: nothing replayed, later appends arrive live.
        let mut beyond = j.subscribe(100);
        assert!(collect_now(&mut beyond).is_empty());
        j.append(EventKind::Status, "Ready").unwrap();
        assert!(matches!(&collect_now(&mut beyond)[..], [JournalItem::Event(e)] if e.sequence == 4));
    }

    #[test]
    fn lagging_subscriber_gets_gap_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut j = Journal::open(&dir.path().join("j")).unwrap();
        let mut s = j.subscribe(1);
        for i in 0..(LIVE_BUFFER + 10) {
            j.append(EventKind::BuildLog, i.to_string()).unwrap();
        }
        let items = collect_now(&mut s);
        assert_eq!(items, vec![JournalItem::Gap { first_missing: 1 }]);
    }
}
