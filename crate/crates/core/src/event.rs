//! Query-event records and the NDJSON line format they are stored in.
//!
//! One line holds one JSON object. Runtime metadata fields sit at the top
//! level next to the event header; any key the model does not know about is
//! kept verbatim in [`QueryEvent::extras`] so a parse/serialize cycle never
//! loses information.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Started,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventClass {
    SqlBatch,
    SqlStatement,
    /// A statement executing inside a stored procedure.
    SpStatement,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Started => "started",
            EventKind::Completed => "completed",
        }
    }
}

impl EventClass {
    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::SqlBatch => "sql_batch",
            EventClass::SqlStatement => "sql_statement",
            EventClass::SpStatement => "sp_statement",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventMetadata {
    pub username: String,
    pub client_app_name: String,
    pub client_host: String,
    pub server_name: String,
    pub database_name: String,
    pub cpu_time_us: Option<i64>,
    pub duration_us: Option<i64>,
    pub rows_inserted: Option<i64>,
    pub rows_updated: Option<i64>,
    pub rows_deleted: Option<i64>,
    pub rows_returned: Option<i64>,
}

impl EventMetadata {
    /// Row counters paired with their wire names, in wire order.
    pub fn row_counters(&self) -> [(&'static str, Option<i64>); 4] {
        [
            ("rows_inserted", self.rows_inserted),
            ("rows_updated", self.rows_updated),
            ("rows_deleted", self.rows_deleted),
            ("rows_returned", self.rows_returned),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEvent {
    pub activity_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub class: EventClass,
    /// Microseconds since the epoch.
    pub timestamp: i64,
    pub query_text: Option<String>,
    pub metadata: EventMetadata,
    /// Only present in plan-carrying logs. Never interpreted.
    pub plan_payload: Option<String>,
    pub extras: BTreeMap<String, Value>,
}

impl QueryEvent {
    /// Total order key within a log.
    #[inline]
    pub fn order_key(&self) -> (i64, u64) {
        (self.timestamp, self.seq)
    }

    /// Plan-profile records ride along in plan-carrying logs but take no part
    /// in started/completed matching.
    #[inline]
    pub fn is_plan_profile(&self) -> bool {
        self.plan_payload.is_some()
    }

    pub fn text(&self) -> &str {
        self.query_text.as_deref().unwrap_or("")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("invariant violation: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
}

/// Parses and validates one log line.
pub fn parse_event_line(line: &str) -> Result<QueryEvent, EventError> {
    let event: QueryEvent =
        serde_json::from_str(line).map_err(|e| EventError::MalformedRecord(e.to_string()))?;
    validate_event(&event)?;
    Ok(event)
}

pub fn validate_event(e: &QueryEvent) -> Result<(), EventError> {
    let mut violated = Vec::new();
    if e.activity_id.is_empty() {
        violated.push("activity_id must be non-empty".to_string());
    }
    match e.kind {
        EventKind::Started => {
            if e.query_text.as_deref().map_or(true, |t| t.trim().is_empty()) {
                violated.push("started event requires non-empty query_text".to_string());
            }
        }
        EventKind::Completed => {
            match e.metadata.cpu_time_us {
                None => violated.push("completed event requires cpu_time_us".to_string()),
                Some(v) if v < 0 => violated.push(format!("cpu_time_us is negative ({v})")),
                _ => {}
            }
            match e.metadata.duration_us {
                None => violated.push("completed event requires duration_us".to_string()),
                Some(v) if v < 0 => violated.push(format!("duration_us is negative ({v})")),
                _ => {}
            }
        }
    }
    if e.kind == EventKind::Started {
        for (name, v) in [("cpu_time_us", e.metadata.cpu_time_us), ("duration_us", e.metadata.duration_us)] {
            if let Some(v) = v.filter(|v| *v < 0) {
                violated.push(format!("{name} is negative ({v})"));
            }
        }
    }
    for (name, v) in e.metadata.row_counters() {
        if let Some(v) = v.filter(|v| *v < 0) {
            violated.push(format!("{name} is negative ({v})"));
        }
    }
    if violated.is_empty() {
        Ok(())
    } else {
        Err(EventError::InvariantViolation(violated))
    }
}

/// Renders one NDJSON line (without the trailing newline).
pub fn serialize_event(e: &QueryEvent) -> String {
    serde_json::to_string(e).expect("event serialization is infallible")
}

/// `events-<partition>-<first_seq>.ndjson`
pub fn log_file_name(partition: u32, first_seq: u64) -> String {
    format!("events-{partition}-{first_seq}.ndjson")
}

/// Inverse of [`log_file_name`].
pub fn parse_log_file_name(name: &str) -> Option<(u32, u64)> {
    let stem = name.strip_prefix("events-")?.strip_suffix(".ndjson")?;
    let (partition, first_seq) = stem.split_once('-')?;
    Some((partition.parse().ok()?, first_seq.parse().ok()?))
}

impl Serialize for QueryEvent {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let m = &self.metadata;
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("activity_id", &self.activity_id)?;
        map.serialize_entry("seq", &self.seq)?;
        map.serialize_entry("kind", &self.kind)?;
        map.serialize_entry("class", &self.class)?;
        map.serialize_entry("ts", &self.timestamp)?;
        if let Some(text) = &self.query_text {
            map.serialize_entry("query_text", text)?;
        }
        map.serialize_entry("username", &m.username)?;
        map.serialize_entry("client_app_name", &m.client_app_name)?;
        map.serialize_entry("client_host", &m.client_host)?;
        map.serialize_entry("server_name", &m.server_name)?;
        map.serialize_entry("database_name", &m.database_name)?;
        for (name, v) in [("cpu_time_us", m.cpu_time_us), ("duration_us", m.duration_us)]
            .into_iter()
            .chain(m.row_counters())
        {
            if let Some(v) = v {
                map.serialize_entry(name, &v)?;
            }
        }
        if let Some(plan) = &self.plan_payload {
            map.serialize_entry("plan_payload", plan)?;
        }
        for (k, v) in &self.extras {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

enum Field {
    ActivityId,
    Seq,
    Kind,
    Class,
    Ts,
    QueryText,
    Username,
    ClientAppName,
    ClientHost,
    ServerName,
    DatabaseName,
    CpuTime,
    Duration,
    RowsInserted,
    RowsUpdated,
    RowsDeleted,
    RowsReturned,
    PlanPayload,
    Other(String),
}

impl<'de> Deserialize<'de> for Field {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct FieldVisitor;
        impl Visitor<'_> for FieldVisitor {
            type Value = Field;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a field name")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Field, E> {
                Ok(match v {
                    "activity_id" => Field::ActivityId,
                    "seq" => Field::Seq,
                    "kind" => Field::Kind,
                    "class" => Field::Class,
                    "ts" => Field::Ts,
                    "query_text" => Field::QueryText,
                    "username" => Field::Username,
                    "client_app_name" => Field::ClientAppName,
                    "client_host" => Field::ClientHost,
                    "server_name" => Field::ServerName,
                    "database_name" => Field::DatabaseName,
                    "cpu_time_us" => Field::CpuTime,
                    "duration_us" => Field::Duration,
                    "rows_inserted" => Field::RowsInserted,
                    "rows_updated" => Field::RowsUpdated,
                    "rows_deleted" => Field::RowsDeleted,
                    "rows_returned" => Field::RowsReturned,
                    "plan_payload" => Field::PlanPayload,
                    other => Field::Other(other.to_string()),
                })
            }
        }
        d.deserialize_identifier(FieldVisitor)
    }
}

impl<'de> Deserialize<'de> for QueryEvent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EventVisitor;

        fn set<T, E: de::Error>(slot: &mut Option<T>, v: T, name: &'static str) -> Result<(), E> {
            if slot.is_some() {
                return Err(E::duplicate_field(name));
            }
            *slot = Some(v);
            Ok(())
        }

        impl<'de> Visitor<'de> for EventVisitor {
            type Value = QueryEvent;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a query event object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<QueryEvent, A::Error> {
                let mut activity_id = None;
                let mut seq = None;
                let mut kind = None;
                let mut class = None;
                let mut ts = None;
                let mut query_text = None;
                let mut plan_payload = None;
                let mut md = EventMetadata::default();
                let mut extras = BTreeMap::new();
                while let Some(field) = map.next_key::<Field>()? {
                    match field {
                        Field::ActivityId => set(&mut activity_id, map.next_value::<String>()?, "activity_id")?,
                        Field::Seq => set(&mut seq, map.next_value::<u64>()?, "seq")?,
                        Field::Kind => set(&mut kind, map.next_value::<EventKind>()?, "kind")?,
                        Field::Class => set(&mut class, map.next_value::<EventClass>()?, "class")?,
                        Field::Ts => set(&mut ts, map.next_value::<i64>()?, "ts")?,
                        Field::QueryText => query_text = map.next_value()?,
                        Field::Username => md.username = map.next_value()?,
                        Field::ClientAppName => md.client_app_name = map.next_value()?,
                        Field::ClientHost => md.client_host = map.next_value()?,
                        Field::ServerName => md.server_name = map.next_value()?,
                        Field::DatabaseName => md.database_name = map.next_value()?,
                        Field::CpuTime => md.cpu_time_us = map.next_value()?,
                        Field::Duration => md.duration_us = map.next_value()?,
                        Field::RowsInserted => md.rows_inserted = map.next_value()?,
                        Field::RowsUpdated => md.rows_updated = map.next_value()?,
                        Field::RowsDeleted => md.rows_deleted = map.next_value()?,
                        Field::RowsReturned => md.rows_returned = map.next_value()?,
                        Field::PlanPayload => plan_payload = map.next_value()?,
                        Field::Other(key) => {
                            let v: Value = map.next_value()?;
                            extras.insert(key, v);
                        }
                    }
                }
                Ok(QueryEvent {
                    activity_id: activity_id.ok_or_else(|| de::Error::missing_field("activity_id"))?,
                    seq: seq.ok_or_else(|| de::Error::missing_field("seq"))?,
                    kind: kind.ok_or_else(|| de::Error::missing_field("kind"))?,
                    class: class.ok_or_else(|| de::Error::missing_field("class"))?,
                    timestamp: ts.ok_or_else(|| de::Error::missing_field("ts"))?,
                    query_text,
                    metadata: md,
                    plan_payload,
                    extras,
                })
            }
        }

        d.deserialize_map(EventVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig2_root_line() -> &'static str {
        r#"{"activity_id":"3","seq":0,"kind":"started","class":"sql_batch","ts":1000,"query_text":"EXECUTE SyncNewSales 2","username":"etl","client_app_name":"sqlcmd","client_host":"h1","server_name":"srv","database_name":"sales"}"#
    }

    #[test]
    fn parses_batch_start() {
        let e = parse_event_line(fig2_root_line()).unwrap();
        assert_eq!(e.class, EventClass::SqlBatch);
        assert_eq!(e.kind, EventKind::Started);
        assert_eq!(e.text(), "EXECUTE SyncNewSales 2");
        assert_eq!(e.order_key(), (1000, 0));
        assert!(e.extras.is_empty());
    }

    #[test]
    fn zero_cost_completion_is_valid() {
        let line = r#"{"activity_id":"a","seq":5,"kind":"completed","class":"sql_statement","ts":2000,"cpu_time_us":0,"duration_us":0}"#;
        let e = parse_event_line(line).unwrap();
        assert_eq!(e.metadata.cpu_time_us, Some(0));
        assert_eq!(e.metadata.duration_us, Some(0));
    }

    #[test]
    fn missing_kind_is_malformed() {
        let line = r#"{"activity_id":"a","seq":5,"class":"sql_statement","ts":2000}"#;
        let err = parse_event_line(line).unwrap_err();
        assert!(matches!(err, EventError::MalformedRecord(ref m) if m.contains("kind")), "{err}");
    }

    #[test]
    fn bad_json_is_malformed() {
        assert!(matches!(parse_event_line("{not json"), Err(EventError::MalformedRecord(_))));
        assert!(matches!(
            parse_event_line(r#"{"activity_id":"a","seq":1,"kind":"paused","class":"sql_batch","ts":1}"#),
            Err(EventError::MalformedRecord(_))
        ));
    }

    #[test]
    fn negative_duration_violates() {
        let line = r#"{"activity_id":"a","seq":5,"kind":"completed","class":"sql_statement","ts":2000,"cpu_time_us":1,"duration_us":-4}"#;
        match parse_event_line(line) {
            Err(EventError::InvariantViolation(v)) => assert!(v[0].contains("duration_us")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_started_text_violates() {
        let mut e = parse_event_line(fig2_root_line()).unwrap();
        e.query_text = Some("   ".into());
        assert!(matches!(validate_event(&e), Err(EventError::InvariantViolation(_))));
        e.query_text = None;
        assert!(matches!(validate_event(&e), Err(EventError::InvariantViolation(_))));
    }

    #[test]
    fn completed_without_cpu_violates() {
        let line = r#"{"activity_id":"a","seq":5,"kind":"completed","class":"sql_statement","ts":2000,"duration_us":3}"#;
        let e: QueryEvent = serde_json::from_str(line).unwrap();
        match validate_event(&e) {
            Err(EventError::InvariantViolation(v)) => {
                assert_eq!(v, vec!["completed event requires cpu_time_us".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extras_survive_round_trip() {
        let line = r#"{"activity_id":"a","seq":1,"kind":"started","class":"sql_batch","ts":7,"query_text":"SELECT 1","username":"","client_app_name":"","client_host":"","server_name":"","database_name":"","zeta":[1,2],"alpha":{"k":"v"}}"#;
        let e = parse_event_line(line).unwrap();
        assert_eq!(e.extras.len(), 2);
        let out = serialize_event(&e);
        assert_eq!(parse_event_line(&out).unwrap(), e);
        // extras come out key-sorted after the modeled fields
        assert!(out.ends_with(r#""alpha":{"k":"v"},"zeta":[1,2]}"#), "{out}");
    }

    #[test]
    fn duplicate_field_rejected() {
        let line = r#"{"activity_id":"a","seq":1,"seq":2,"kind":"started","class":"sql_batch","ts":7,"query_text":"x"}"#;
        assert!(matches!(parse_event_line(line), Err(EventError::MalformedRecord(_))));
    }

    #[test]
    fn file_names() {
        assert_eq!(log_file_name(3, 1200), "events-3-1200.ndjson");
        assert_eq!(parse_log_file_name("events-3-1200.ndjson"), Some((3, 1200)));
        assert_eq!(parse_log_file_name("events-x-1.ndjson"), None);
        assert_eq!(parse_log_file_name("checkpoint.json"), None);
    }
}
