//! Event-log and catalog IO plus date-anchored snapshots.
//!
//! The on-disk format is JSON lines: one object per line, field names
//! exactly as in the domain types. Append-friendly and trivially
//! partitionable. Readers report malformed lines by line number instead of
//! silently skipping them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{AdvertiserRecord, Event, UserProfile};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// All pipeline inputs frozen at an anchor date. No event inside has a
/// timestamp past the end of that UTC day; later events are label material
/// only and must be kept out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub anchor_date: NaiveDate,
    pub events: Vec<Event>,
    pub catalog: Vec<AdvertiserRecord>,
    pub profiles: Vec<UserProfile>,
}

/// Last UTC second of the given calendar day, as epoch seconds.
pub fn end_of_day_utc(date: NaiveDate) -> i64 {
    let next_midnight = date
        .succ_opt()
        .expect("date overflow")
        .and_hms_opt(0, 0, 0)
        .expect("valid midnight")
        .and_utc()
        .timestamp();
    next_midnight - 1
}

/// Reads one JSON object per line. Blank lines are rejected, not skipped:
/// a blank line in an event log means something upstream went wrong.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IngestError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let record = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes one JSON object per line. `read_jsonl(write_jsonl(xs))` is the
/// identity on valid records.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), IngestError> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| IngestError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, IngestError> {
    read_jsonl(path)
}

pub fn write_events(events: &[Event], path: &Path) -> Result<(), IngestError> {
    write_jsonl(events, path)
}

pub fn read_catalog(path: &Path) -> Result<Vec<AdvertiserRecord>, IngestError> {
    read_jsonl(path)
}

pub fn read_profiles(path: &Path) -> Result<Vec<UserProfile>, IngestError> {
    read_jsonl(path)
}

/// Keeps exactly the events with timestamp up to end-of-day(anchor_date)
/// UTC, in their input order. Catalog and profiles pass through as the
/// state valid at the anchor.
pub fn build_snapshot(
    events: Vec<Event>,
    catalog: Vec<AdvertiserRecord>,
    profiles: Vec<UserProfile>,
    anchor_date: NaiveDate,
) -> Snapshot {
    let cutoff = end_of_day_utc(anchor_date);
    let events = events.into_iter().filter(|e| e.timestamp <= cutoff).collect();
    Snapshot {
        anchor_date,
        events,
        catalog,
        profiles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ConversionPriority, EventKind};
    use proptest::prelude::*;

    fn event(user: &str, ts: i64, kind: EventKind) -> Event {
        Event {
            user_id: user.into(),
            timestamp: ts,
            kind,
            advertiser_id: None,
            query: None,
            url: None,
            category: None,
            brand: None,
            dwell_seconds: None,
            conversion_type: None,
        }
    }

    #[test]
    fn end_of_day_is_last_second() {
        let d = NaiveDate::from_ymd_opt(2024, 3, 10).unwrap();
        let eod = end_of_day_utc(d);
        let next_midnight = NaiveDate::from_ymd_opt(2024, 3, 11)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            .and_utc()
            .timestamp();
        assert_eq!(eod, next_midnight - 1);
    }

    #[test]
    fn snapshot_respects_anchor_boundary() {
        let d = NaiveDate::from_ymd_opt(2024, 3, 10).unwrap();
        let eod = end_of_day_utc(d);
        let events = vec![
            event("u", eod - 86_400, EventKind::OnsiteSearch),
            event("u", eod, EventKind::OnsiteSearch),
            event("u", eod + 1, EventKind::OnsiteSearch),
        ];
        let snap = build_snapshot(events, vec![], vec![], d);
        assert_eq!(snap.events.len(), 2);
        assert!(snap.events.iter().all(|e| e.timestamp <= eod));
    }

    #[test]
    fn snapshot_of_empty_list_is_empty() {
        let d = NaiveDate::from_ymd_opt(2024, 3, 10).unwrap();
        let snap = build_snapshot(vec![], vec![], vec![], d);
        assert!(snap.events.is_empty());
    }

    #[test]
    fn snapshot_count_matches_linear_scan() {
        let d = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap();
        let eod = end_of_day_utc(d);
        let mut events = Vec::new();
        // Deterministic spread across 40 days straddling the anchor.
        for i in 0..10_000i64 {
            let ts = eod - 20 * 86_400 + (i * 71) % (40 * 86_400);
            events.push(event(&format!("u{}", i % 97), ts, EventKind::Impression));
        }
        let expected = events.iter().filter(|e| e.timestamp <= eod).count();
        let snap = build_snapshot(events, vec![], vec![], d);
        assert_eq!(snap.events.len(), expected);
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(
            &path,
            "{\"user_id\":\"u\",\"timestamp\":1,\"kind\":\"impression\"}\n{\"user_id\":\"u\",\"timestamp\":2}\n",
        )
        .unwrap();
        let err = read_events(&path).unwrap_err();
        match err {
            IngestError::Parse { line, reason } => {
                assert_eq!(line, 2);
                assert!(reason.contains("kind"), "reason was: {reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_reads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_events(&path).unwrap().is_empty());
    }

    #[test]
    fn unicode_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut e = event("u", 5, EventKind::OnsiteSearch);
        e.query = Some("zapatos de niño 👟".into());
        write_events(&[e.clone()], &path).unwrap();
        assert_eq!(read_events(&path).unwrap(), vec![e]);
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        let kind = prop_oneof![
            Just(EventKind::OnsiteSearch),
            Just(EventKind::OffsiteSearch),
            Just(EventKind::OffsiteUrl),
            Just(EventKind::AttributedConversion),
            Just(EventKind::MatchedConversion),
            Just(EventKind::Impression),
            Just(EventKind::Click),
            Just(EventKind::Conversion),
        ];
        (
            "[a-z0-9]{1,12}",
            0i64..2_000_000_000,
            kind,
            proptest::option::of("[a-zA-Z0-9 ]{0,24}"),
            proptest::option::of(0.0f64..10_000.0),
            proptest::option::of(prop_oneof![
                Just(ConversionPriority::HighPriority),
                Just(ConversionPriority::LowPriority)
            ]),
        )
            .prop_map(|(user, ts, kind, query, dwell, prio)| Event {
                user_id: user,
                timestamp: ts,
                kind,
                advertiser_id: None,
                query,
                url: None,
                category: None,
                brand: None,
                dwell_seconds: dwell,
                conversion_type: prio,
            })
    }

    proptest! {
        #[test]
        fn write_read_round_trip(events in proptest::collection::vec(arb_event(), 0..100)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.jsonl");
            write_events(&events, &path).unwrap();
            let back = read_events(&path).unwrap();
            prop_assert_eq!(back, events);
        }
    }
}
