//! Journal items as `text/event-stream` frames, and the reverse for clients.

use axum::response::sse::Event;
use rrp_core::orchestrator::{EventKind, JournalItem};
use serde_json::{json, Value};

/// One server-sent event as delivered on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct SseFrame {
    pub event_type: String,
    /// The `id:` field; the journal sequence for everything except gaps.
    pub id: Option<u64>,
    pub data: Value,
}

impl SseFrame {
    pub fn sequence(&self) -> Option<u64> {
        self.data.get("sequence").and_then(Value::as_u64)
    }

    pub fn payload(&self) -> Option<&str> {
        self.data.get("payload").and_then(Value::as_str)
    }

    pub fn is_gap(&self) -> bool {
        self.event_type == "gap"
    }
}

pub fn event_type(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Status => "status",
        EventKind::BuildLog => "build-log",
        EventKind::RunLog => "run-log",
        EventKind::ResultsChanged => "results-changed",
        EventKind::Error => "error",
        EventKind::Share => "share",
        EventKind::Upload => "upload",
        EventKind::Archive => "archive",
    }
}

pub fn frame_for(project_id: &str, item: &JournalItem) -> SseFrame {
    match item {
        JournalItem::Event(e) => SseFrame {
            event_type: event_type(e.kind).into(),
            id: Some(e.sequence),
            data: json!({
                "projectId": project_id,
                "sequence": e.sequence,
                "timestamp": e.timestamp,
                "kind": event_type(e.kind),
                "payload": e.payload,
            }),
        },
        // No id: a reconnect must resume from the last event actually seen.
        JournalItem::Gap { first_missing } => SseFrame {
            event_type: "gap".into(),
            id: None,
            data: json!({ "projectId": project_id, "sequence": first_missing, "firstMissing": first_missing }),
        },
    }
}

impl From<SseFrame> for Event {
    fn from(f: SseFrame) -> Self {
        let event = Event::default().event(f.event_type).data(f.data.to_string());
        match f.id {
            Some(id) => event.id(id.to_string()),
            None => event,
        }
    }
}

/// Incremental `text/event-stream` parser. Comments (heartbeats) and frames
/// without data are dropped.
#[derive(Debug, Default)]
pub struct SseParser {
    buf: Vec<u8>,
    event_type: Option<String>,
    id: Option<u64>,
    data: Vec<String>,
}

impl SseParser {
    pub fn push(&mut self, chunk: &[u8]) -> Vec<SseFrame> {
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
            let raw: Vec<u8> = self.buf.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&raw);
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                if let Some(frame) = self.dispatch() {
                    out.push(frame);
                }
                continue;
            }
            if line.starts_with(':') {
                continue;
            }
            let (field, value) = line.split_once(':').map(|(f, v)| (f, v.strip_prefix(' ').unwrap_or(v))).unwrap_or((line, ""));
            match field {
                "event" => self.event_type = Some(value.to_owned()),
                "id" => self.id = value.parse().ok(),
                "data" => self.data.push(value.to_owned()),
                _ => {}
            }
        }
        out
    }

    fn dispatch(&mut self) -> Option<SseFrame> {
        let event_type = self.event_type.take().unwrap_or_else(|| "message".into());
        let id = self.id.take();
        if self.data.is_empty() {
            return None;
        }
        let text = std::mem::take(&mut self.data).join("\n");
        let data = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Some(SseFrame { event_type, id, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Utc;
    use rrp_core::orchestrator::LogEvent;

    #[test]
    fn event_kinds_map_to_wire_names() {
        let names: Vec<_> = [EventKind::Status, EventKind::BuildLog, EventKind::RunLog, EventKind::ResultsChanged, EventKind::Error]
            .into_iter()
            .map(event_type)
            .collect();
        assert_eq!(names, ["status", "build-log", "run-log", "results-changed", "error"]);
    }

    #[test]
    fn parser_reassembles_split_frames_and_skips_comments() {
        let item = JournalItem::Event(LogEvent { sequence: 7, timestamp: Utc::now(), kind: EventKind::BuildLog, payload: "Step 1".into() });
        let frame = frame_for("p1", &item);
        let wire = format!(": heartbeat\n\nevent: build-log\nid: 7\ndata: {}\n\n", frame.data);
        let mut parser = SseParser::default();
        let mut got = Vec::new();
        for chunk in wire.as_bytes().chunks(5) {
            got.extend(parser.push(chunk));
        }
        assert_eq!(got, vec![frame]);
        assert_eq!(got[0].sequence(), Some(7));
        assert_eq!(got[0].payload(), Some("Step 1"));
    }

    #[test]
    fn gap_frames_carry_the_first_missing_sequence() {
        let f = frame_for("p1", &JournalItem::Gap { first_missing: 12 });
        assert!(f.is_gap());
        assert_eq!(f.id, None);
        assert_eq!(f.data["firstMissing"], 12);
    }
}
