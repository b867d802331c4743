//! Parser and serializer for device log entries.
//!
//! Three entry shapes share one comma separated grammar:
//!
//! ```text
//! edge         E3>R3,2024-04-26 13:36:10.273312, S:0
//! router       E3>R3,<sent>,<received>,R3>R2,<sent>, S:0
//! coordinator  E3>R3,<sent>,<received>,R3>R2,<sent>,<received>,R2>C,<sent>,<received>
//! ```
//!
//! The parser accepts spaces around every token (including `E3 > R3`).
//! Serialization is canonical: no spaces except the one before the
//! status token.

use std::fmt;

use chrono::{DateTime, NaiveDateTime};
use thiserror::Error;

use crate::netmodel::NodeId;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.6f";
const TIMESTAMP_LEN: usize = 26;

/// Wall-clock instant with microsecond precision, stored as microseconds
/// since the Unix epoch (no time zone).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_micros(us: i64) -> Timestamp {
        Timestamp(us)
    }

    pub const fn micros(self) -> i64 {
        self.0
    }

    pub fn plus_micros(self, us: i64) -> Timestamp {
        Timestamp(self.0 + us)
    }

    /// Signed difference `self - earlier` in milliseconds.
    pub fn millis_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / 1000.0
    }

    /// Parses exactly `YYYY-MM-DD HH:MM:SS.ffffff`.
    pub fn parse(text: &str) -> Option<Timestamp> {
        let b = text.as_bytes();
        if b.len() != TIMESTAMP_LEN {
            return None;
        }
        for (i, c) in b.iter().enumerate() {
            let ok = match i {
                4 | 7 => *c == b'-',
                10 => *c == b' ',
                13 | 16 => *c == b':',
                19 => *c == b'.',
                _ => c.is_ascii_digit(),
            };
            if !ok {
                return None;
            }
        }
        let dt = NaiveDateTime::parse_from_str(text, TIMESTAMP_FORMAT).ok()?;
        Some(Timestamp(dt.and_utc().timestamp_micros()))
    }
}

impl serde::Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Timestamp::parse(&text).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp `{text}`")))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::from_timestamp_micros(self.0) {
            Some(dt) => write!(f, "{}", dt.naive_utc().format(TIMESTAMP_FORMAT)),
            None => write!(f, "<out of range: {}us>", self.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Edge,
    Router,
    Coordinator,
}

/// One hop of a packet: `from>to`, when it left `from` and, if known, when
/// it arrived at `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub from: NodeId,
    pub to: NodeId,
    pub sent_at: Timestamp,
    pub received_at: Option<Timestamp>,
}

impl Segment {
    pub fn complete(from: NodeId, to: NodeId, sent_at: Timestamp, received_at: Timestamp) -> Segment {
        Segment { from, to, sent_at, received_at: Some(received_at) }
    }

    pub fn sent(from: NodeId, to: NodeId, sent_at: Timestamp) -> Segment {
        Segment { from, to, sent_at, received_at: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    kind: EntryKind,
    segments: Vec<Segment>,
    status: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntryError {
    #[error("entry has no segments")]
    Empty,
    #[error("{0}")]
    Shape(&'static str),
    #[error("segment {index} does not continue from the previous hop")]
    Discontinuous { index: usize },
    #[error("timestamps decrease at segment {index}")]
    OutOfOrder { index: usize },
    #[error("coordinator entries must end at C")]
    NotAtCoordinator,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("entry lacks the timestamps needed for this delay")]
    IncompleteTrace,
}

impl LogEntry {
    /// Builds an entry, checking the shape rules of `kind`, hop continuity
    /// and timestamp order.
    pub fn new(kind: EntryKind, segments: Vec<Segment>, status: Option<u32>) -> Result<LogEntry, EntryError> {
        let e = LogEntry { kind, segments, status };
        e.check()?;
        Ok(e)
    }

    pub fn edge(from: NodeId, to: NodeId, sent_at: Timestamp, status: u32) -> LogEntry {
        LogEntry { kind: EntryKind::Edge, segments: vec![Segment::sent(from, to, sent_at)], status: Some(status) }
    }

    fn check(&self) -> Result<(), EntryError> {
        let segs = &self.segments;
        let last = segs.last().ok_or(EntryError::Empty)?;
        let body_complete = segs[..segs.len() - 1].iter().all(|s| s.received_at.is_some());
        match self.kind {
            EntryKind::Edge => {
                if segs.len() != 1 || last.received_at.is_some() {
                    return Err(EntryError::Shape("edge entries carry one sent-only segment"));
                }
                if self.status.is_none() {
                    return Err(EntryError::Shape("edge entries carry a status"));
                }
            }
            EntryKind::Router => {
                if segs.len() < 2 || !body_complete || last.received_at.is_some() {
                    return Err(EntryError::Shape("router entries carry complete hops followed by one sent-only hop"));
                }
                if self.status.is_none() {
                    return Err(EntryError::Shape("router entries carry a status"));
                }
            }
            EntryKind::Coordinator => {
                if !body_complete || last.received_at.is_none() {
                    return Err(EntryError::Shape("coordinator entries carry complete hops only"));
                }
                if last.to != NodeId::COORDINATOR {
                    return Err(EntryError::NotAtCoordinator);
                }
            }
        }
        let mut clock = segs[0].sent_at;
        for (i, s) in segs.iter().enumerate() {
            if i > 0 && segs[i - 1].to != s.from {
                return Err(EntryError::Discontinuous { index: i });
            }
            if s.sent_at < clock {
                return Err(EntryError::OutOfOrder { index: i });
            }
            clock = s.sent_at;
            if let Some(r) = s.received_at {
                if r < clock {
                    return Err(EntryError::OutOfOrder { index: i });
                }
                clock = r;
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> EntryKind {
        self.kind
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn status(&self) -> Option<u32> {
        self.status
    }

    pub fn origin(&self) -> NodeId {
        self.segments[0].from
    }

    pub fn first_sent(&self) -> Timestamp {
        self.segments[0].sent_at
    }

    /// Device whose log this entry belongs to.
    pub fn logged_by(&self) -> NodeId {
        match self.kind {
            EntryKind::Edge => self.segments[0].from,
            EntryKind::Router => self.segments[self.segments.len() - 1].from,
            EntryKind::Coordinator => NodeId::COORDINATOR,
        }
    }

    pub fn visits(&self, node: NodeId) -> bool {
        self.segments.iter().any(|s| s.from == node || s.to == node)
    }

    pub fn hop_count(&self) -> usize {
        self.segments.len()
    }

    /// Origin send to coordinator receipt, in milliseconds.
    pub fn end_to_end_delay(&self) -> Result<f64, TraceError> {
        if self.kind != EntryKind::Coordinator {
            return Err(TraceError::IncompleteTrace);
        }
        let last = self.segments.last().and_then(|s| s.received_at).ok_or(TraceError::IncompleteTrace)?;
        Ok(last.millis_since(self.first_sent()))
    }

    /// Origin send to receipt at the first hop, in milliseconds.
    pub fn first_hop_delay(&self) -> Result<f64, TraceError> {
        let s = &self.segments[0];
        let r = s.received_at.ok_or(TraceError::IncompleteTrace)?;
        Ok(r.millis_since(s.sent_at))
    }

    /// Canonical text form (no trailing newline).
    pub fn serialize(&self) -> String {
        let mut out = String::with_capacity(48 * self.segments.len());
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}>{},{}", s.from, s.to, s.sent_at));
            if let Some(r) = s.received_at {
                out.push_str(&format!(",{r}"));
            }
        }
        if let Some(st) = self.status {
            out.push_str(&format!(", S:{st}"));
        }
        out
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: {reason}")]
pub struct ParseError {
    pub offset: usize,
    pub reason: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("empty entry")]
    Empty,
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("bad token `{0}`")]
    BadToken(String),
    #[error("bad timestamp `{0}`")]
    BadTimestamp(String),
    #[error("wrong field count: {0}")]
    FieldCount(&'static str),
    #[error(transparent)]
    Invalid(#[from] EntryError),
}

enum Field {
    Pair(NodeId, NodeId),
    Time(Timestamp),
    Status(u32),
}

fn is_pad(c: char) -> bool {
    c == ' ' || c == '\t'
}

fn classify(raw: &str, offset: usize) -> Result<Field, ParseError> {
    let err = |reason| ParseError { offset, reason };
    let tok = raw.trim_matches(is_pad);
    if tok.is_empty() {
        return Err(err(ParseErrorKind::BadToken(String::new())));
    }
    if let Some(code) = tok.strip_prefix("S:") {
        if code.is_empty() || code.len() > 9 || !code.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err(ParseErrorKind::BadToken(tok.to_string())));
        }
        return Ok(Field::Status(code.parse().expect("checked digits")));
    }
    if let Some((a, b)) = tok.split_once('>') {
        let node = |s: &str| {
            let s = s.trim_matches(is_pad);
            NodeId::parse_token(s).ok_or_else(|| err(ParseErrorKind::UnknownNode(s.to_string())))
        };
        return Ok(Field::Pair(node(a)?, node(b)?));
    }
    if tok.as_bytes().first().is_some_and(u8::is_ascii_digit) {
        return Timestamp::parse(tok)
            .map(Field::Time)
            .ok_or_else(|| err(ParseErrorKind::BadTimestamp(tok.to_string())));
    }
    Err(err(ParseErrorKind::BadToken(tok.to_string())))
}

/// Parses one logical entry. A trailing `\r` or `\n` is ignored.
pub fn parse_entry(line: &str) -> Result<LogEntry, ParseError> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim_matches(is_pad).is_empty() {
        return Err(ParseError { offset: 0, reason: ParseErrorKind::Empty });
    }
    let mut fields = Vec::new();
    let mut offset = 0;
    for raw in line.split(',') {
        fields.push((offset, classify(raw, offset)?));
        offset += raw.len() + 1;
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut status = None;
    let mut it = fields.into_iter().peekable();
    while let Some((off, field)) = it.next() {
        let fc = |what| ParseError { offset: off, reason: ParseErrorKind::FieldCount(what) };
        match field {
            Field::Pair(from, to) => {
                let Some((_, Field::Time(sent_at))) = it.next() else {
                    return Err(fc("hop without a send timestamp"));
                };
                let received_at = match it.peek() {
                    Some((_, Field::Time(t))) => {
                        let t = *t;
                        it.next();
                        Some(t)
                    }
                    _ => None,
                };
                segments.push(Segment { from, to, sent_at, received_at });
            }
            Field::Status(code) => {
                if segments.is_empty() {
                    return Err(fc("status before any hop"));
                }
                if it.peek().is_some() {
                    return Err(fc("status must be the last field"));
                }
                status = Some(code);
            }
            Field::Time(_) => return Err(fc("timestamp without a hop")),
        }
    }

    let kind = match segments.last() {
        Some(s) if s.received_at.is_some() => EntryKind::Coordinator,
        Some(_) if segments.len() == 1 => EntryKind::Edge,
        Some(_) => EntryKind::Router,
        None => return Err(ParseError { offset: 0, reason: ParseErrorKind::FieldCount("no hops") }),
    };
    LogEntry::new(kind, segments, status).map_err(|e| ParseError { offset: 0, reason: e.into() })
}

pub fn serialize_entry(e: &LogEntry) -> String {
    e.serialize()
}

/// Parses a newline-delimited log document, skipping blank lines. Errors
/// carry the byte offset within the whole document.
pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, ParseError> {
    let mut out = Vec::new();
    let mut base = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let e = parse_entry(line).map_err(|mut e| {
                e.offset += base;
                e
            })?;
            out.push(e);
        }
        base += line.len();
    }
    Ok(out)
}

pub fn render_log(entries: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.serialize());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const COORDINATOR_EXAMPLE: &str = "E3>R3,2024-04-26 13:36:10.273312,\
        2024-04-26 13:36:10.336880,\
        R3>R2,2024-04-26 13:36:10.369257,\
        2024-04-26 13:36:10.488817,\
        R2>C,2024-04-26 13:36:10.522766,\
        2024-04-26 13:36:10.787851";
    const ROUTER_EXAMPLE: &str =
        "E3>R3,2024-04-26 13:36:10.273312, 2024-04-26 13:36:10.336880, R3>R2,2024-04-26 13:36:10.369257, S:0";
    const EDGE_EXAMPLE: &str = "E3 > R3, 2024-04-26 13:36:10.273312, S:0";

    fn n(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn ts(s: &str) -> Timestamp {
        Timestamp::parse(s).unwrap()
    }

    #[test]
    fn timestamp_text_round_trip() {
        let t = ts("2024-04-26 13:36:10.273312");
        assert_eq!(t.to_string(), "2024-04-26 13:36:10.273312");
        assert_eq!(t.plus_micros(1).to_string(), "2024-04-26 13:36:10.273313");
        assert!(Timestamp::parse("2024-04-26 13:36:10.27331").is_none());
        assert!(Timestamp::parse("2024-04-26T13:36:10.273312").is_none());
        assert!(Timestamp::parse("2024-02-30 13:36:10.273312").is_none());
        assert!(Timestamp::parse("2024-04-26 13:36:10.+73312").is_none());
    }

    #[test]
    fn edge_example() {
        let e = parse_entry(EDGE_EXAMPLE).unwrap();
        assert_eq!(e.kind(), EntryKind::Edge);
        assert_eq!(e.segments()[0].from, n("E3"));
        assert_eq!(e.segments()[0].to, n("R3"));
        assert_eq!(e.status(), Some(0));
        assert_eq!(e.serialize(), "E3>R3,2024-04-26 13:36:10.273312, S:0");
        assert_eq!(e.logged_by(), n("E3"));
    }

    #[test]
    fn router_example() {
        let e = parse_entry(ROUTER_EXAMPLE).unwrap();
        assert_eq!(e.kind(), EntryKind::Router);
        assert_eq!(e.hop_count(), 2);
        assert_eq!(e.logged_by(), n("R3"));
        assert_eq!(
            e.serialize(),
            "E3>R3,2024-04-26 13:36:10.273312,2024-04-26 13:36:10.336880,R3>R2,2024-04-26 13:36:10.369257, S:0"
        );
        assert!((e.first_hop_delay().unwrap() - 63.568).abs() < 1e-9);
        assert_eq!(e.end_to_end_delay(), Err(TraceError::IncompleteTrace));
    }

    #[test]
    fn coordinator_example() {
        let e = parse_entry(COORDINATOR_EXAMPLE).unwrap();
        assert_eq!(e.kind(), EntryKind::Coordinator);
        assert_eq!(e.hop_count(), 3);
        assert_eq!(e.status(), None);
        assert_eq!(e.first_sent(), ts("2024-04-26 13:36:10.273312"));
        assert_eq!(e.segments()[2].received_at, Some(ts("2024-04-26 13:36:10.787851")));
        assert!((e.end_to_end_delay().unwrap() - 514.539).abs() < 1e-9);
        assert!((e.first_hop_delay().unwrap() - 63.568).abs() < 1e-9);
        assert_eq!(e.serialize(), COORDINATOR_EXAMPLE);
    }

    #[test]
    fn wrapped_coordinator_line_joined_with_spaces() {
        let wrapped = "E3>R3,2024-04-26 13:36:10.273312,
        2024-04-26 13:36:10.336880,
         R3>R2,2024-04-26 13:36:10.369257,
         2024-04-26 13:36:10.488817,
         R2>C,2024-04-26 13:36:10.522766,
         2024-04-26 13:36:10.787851";
        let joined = wrapped.replace('\n', "");
        assert_eq!(parse_entry(&joined).unwrap(), parse_entry(COORDINATOR_EXAMPLE).unwrap());
    }

    #[test]
    fn coordinator_with_status_is_tolerated() {
        let line = format!("{COORDINATOR_EXAMPLE}, S:0");
        let e = parse_entry(&line).unwrap();
        assert_eq!(e.status(), Some(0));
        assert_eq!(e.serialize(), line);
    }

    #[test]
    fn error_cases() {
        let e = parse_entry("E9 > R1, 2024-04-26 13:36:10.273312, S:0").unwrap_err();
        assert_eq!(e.reason, ParseErrorKind::UnknownNode("E9".into()));
        assert_eq!(e.offset, 0);

        let e = parse_entry("E1>R1, 2024-04-26 13:36:1O.273312, S:0").unwrap_err();
        assert!(matches!(e.reason, ParseErrorKind::BadTimestamp(_)));
        assert_eq!(e.offset, 6);

        let e = parse_entry("E1>R1, S:0").unwrap_err();
        assert!(matches!(e.reason, ParseErrorKind::FieldCount(_)));

        // edge entries need a status
        assert!(parse_entry("E1>R1,2024-04-26 13:36:10.273312").is_err());
        // coordinator entries must end at C
        assert!(parse_entry("E1>R1,2024-04-26 13:36:10.273312,2024-04-26 13:36:10.373312").is_err());
        // received before sent
        let e = parse_entry(
            "E1>R1,2024-04-26 13:36:10.273312,2024-04-26 13:36:10.173312,R1>C,2024-04-26 13:36:10.473312, S:0",
        )
        .unwrap_err();
        assert!(matches!(e.reason, ParseErrorKind::Invalid(EntryError::OutOfOrder { .. })));
        // hop chain broken
        assert!(parse_entry(
            "E1>R1,2024-04-26 13:36:10.273312,2024-04-26 13:36:10.373312,R2>C,2024-04-26 13:36:10.473312, S:0"
        )
        .is_err());
        assert_eq!(parse_entry("").unwrap_err().reason, ParseErrorKind::Empty);
    }

    #[test]
    fn constructor_rejects_received_before_sent() {
        let t = ts("2024-04-26 13:36:10.273312");
        let seg = Segment::complete(n("E1"), NodeId::COORDINATOR, t, t.plus_micros(-5));
        assert!(matches!(
            LogEntry::new(EntryKind::Coordinator, vec![seg], None),
            Err(EntryError::OutOfOrder { index: 0 })
        ));
    }

    #[test]
    fn log_document_offsets() {
        let doc = format!("{EDGE_EXAMPLE}\n\nE1>R1,nope, S:0\n");
        let err = parse_log(&doc).unwrap_err();
        assert_eq!(err.offset, EDGE_EXAMPLE.len() + 2 + 6);
        let doc = format!("{EDGE_EXAMPLE}\n{ROUTER_EXAMPLE}\n");
        let entries = parse_log(&doc).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(parse_log(&render_log(&entries)).unwrap(), entries);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn node() -> impl Strategy<Value = NodeId> {
            prop::sample::select(NodeId::roster().to_vec())
        }

        /// Valid entries of every kind: a continuous walk over the roster
        /// with nondecreasing timestamps.
        fn entry() -> impl Strategy<Value = LogEntry> {
            (0u8..3, prop::collection::vec(node(), 1..6), prop::collection::vec(0i64..2_000_000, 12), 0u32..10, node())
                .prop_map(|(kind, mut path, gaps, status, first)| {
                    let kind = [EntryKind::Edge, EntryKind::Router, EntryKind::Coordinator][kind as usize];
                    path.insert(0, first);
                    match kind {
                        EntryKind::Edge => path.truncate(2),
                        EntryKind::Router => {}
                        EntryKind::Coordinator => path.push(NodeId::COORDINATOR),
                    }
                    if path.len() < 3 && kind == EntryKind::Router {
                        path.push(NodeId::COORDINATOR);
                    }
                    let mut t = Timestamp::from_micros(1_714_136_400_000_000);
                    let mut g = gaps.into_iter().cycle();
                    let mut segs = Vec::new();
                    let hops = path.len() - 1;
                    for i in 0..hops {
                        let sent = t.plus_micros(g.next().unwrap());
                        let recv = sent.plus_micros(g.next().unwrap());
                        t = recv;
                        let last = i + 1 == hops;
                        segs.push(if last && kind != EntryKind::Coordinator {
                            Segment::sent(path[i], path[i + 1], sent)
                        } else {
                            Segment::complete(path[i], path[i + 1], sent, recv)
                        });
                    }
                    let status = (kind != EntryKind::Coordinator).then_some(status);
                    LogEntry::new(kind, segs, status).unwrap()
                })
        }

        proptest! {
            #[test]
            fn round_trip(e in entry()) {
                let text = e.serialize();
                let back = parse_entry(&text).unwrap();
                prop_assert_eq!(&back, &e);
                prop_assert_eq!(back.serialize(), text);
            }

            #[test]
            fn parser_total_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
                let _ = parse_entry(&String::from_utf8_lossy(&bytes));
            }

            #[test]
            fn parser_total_on_near_misses(e in entry(), cut in 0usize..400, junk in "[ ,>:SERCA0-9.-]{0,6}") {
                let text = e.serialize();
                let cut = cut.min(text.len());
                let _ = parse_entry(&format!("{}{junk}{}", &text[..cut], &text[cut..]));
            }

            #[test]
            fn delays_nonnegative(e in entry()) {
                if let Ok(d) = e.first_hop_delay() {
                    prop_assert!(d >= 0.0);
                }
                if let Ok(d) = e.end_to_end_delay() {
                    prop_assert!(d >= 0.0);
                }
            }
        }
    }
}
