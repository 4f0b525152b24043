//! Two-layer patient/event data model and the canonical event ordering.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, NaiveDateTime};

/// Attribute names that may never appear as attribute keys.
pub const RESERVED_ATTRIBUTES: [&str; 3] = ["patient_id", "timestamp", "event_type"];

/// UTC-naive instant with microsecond resolution, stored as microseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_naive(dt: NaiveDateTime) -> Self {
        Timestamp(dt.and_utc().timestamp_micros())
    }

    pub fn to_naive(self) -> Option<NaiveDateTime> {
        DateTime::from_timestamp_micros(self.0).map(|d| d.naive_utc())
    }

    pub fn micros(self) -> i64 {
        self.0
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.to_naive() {
            Some(dt) => write!(f, "{}", dt.format("%Y-%m-%d %H:%M:%S%.f")),
            None => write!(f, "@{}us", self.0),
        }
    }
}

/// One record of one patient from one source table.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Event {
    pub patient_id: String,
    pub event_type: String,
    pub timestamp: Option<Timestamp>,
    pub seq: u64,
    pub attributes: BTreeMap<String, String>,
}

/// Borrowed view of the canonical sort tuple `(patient_id, ts_class, timestamp, event_type, seq)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SortKey<'a> {
    pub patient_id: &'a [u8],
    pub ts_class: u8,
    pub timestamp: i64,
    pub event_type: &'a [u8],
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventError {
    #[error("event has an empty patient_id")]
    EmptyPatientId,
    #[error("attribute key `{0}` is reserved")]
    ReservedAttribute(String),
    #[error("time range start {start} is not before end {end}")]
    EmptyTimeRange { start: Timestamp, end: Timestamp },
}

impl Event {
    pub fn new(
        patient_id: impl Into<String>,
        event_type: impl Into<String>,
        timestamp: Option<Timestamp>,
        seq: u64,
        attributes: BTreeMap<String, String>,
    ) -> Result<Self, EventError> {
        let event = Event {
            patient_id: patient_id.into(),
            event_type: event_type.into(),
            timestamp,
            seq,
            attributes,
        };
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<(), EventError> {
        if self.patient_id.is_empty() {
            return Err(EventError::EmptyPatientId);
        }
        if let Some(k) = self
            .attributes
            .keys()
            .find(|k| RESERVED_ATTRIBUTES.contains(&k.as_str()))
        {
            return Err(EventError::ReservedAttribute(k.clone()));
        }
        Ok(())
    }

    pub fn sort_key(&self) -> SortKey<'_> {
        event_sort_key(self)
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str)
    }

    /// Estimated heap footprint including allocator rounding and map nodes, used for buffer
    /// accounting.
    pub fn approx_size(&self) -> usize {
        // A B-tree leaf holds up to 11 entries and is allocated whole.
        const MAP_NODE: usize = 11 * 2 * std::mem::size_of::<String>() + 16;
        let heap = |len: usize| if len == 0 { 0 } else { len.next_multiple_of(16) + 16 };
        std::mem::size_of::<Event>()
            + heap(self.patient_id.len())
            + heap(self.event_type.len())
            + self.attributes.len().div_ceil(11) * MAP_NODE
            + self
                .attributes
                .iter()
                .map(|(k, v)| heap(k.len()) + heap(v.len()))
                .sum::<usize>()
    }
}

/// Canonical ordering key. Untimestamped events precede timestamped ones of the same patient.
pub fn event_sort_key(e: &Event) -> SortKey<'_> {
    SortKey {
        patient_id: e.patient_id.as_bytes(),
        ts_class: e.timestamp.is_some() as u8,
        timestamp: e.timestamp.map_or(0, |t| t.0),
        event_type: e.event_type.as_bytes(),
        seq: e.seq,
    }
}

/// Total order on events by their canonical key. Events with equal keys compare equal here.
pub fn cmp_events(a: &Event, b: &Event) -> Ordering {
    event_sort_key(a).cmp(&event_sort_key(b))
}

/// All events of one patient in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub events: Vec<Event>,
}

impl PatientRecord {
    /// Builds a record, sorting events canonically. All events must belong to `patient_id`.
    pub fn new(patient_id: impl Into<String>, mut events: Vec<Event>) -> Self {
        let patient_id = patient_id.into();
        debug_assert!(events.iter().all(|e| e.patient_id == patient_id));
        events.sort_by(cmp_events);
        PatientRecord { patient_id, events }
    }

    pub fn events_of<'a>(&'a self, event_type: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.event_type == event_type)
    }

    pub fn filtered(&self, filter: &EventFilter) -> Vec<Event> {
        self.events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }
}

/// Selection predicate for [`crate::store::Store::get_events`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventFilter {
    pub event_types: Option<BTreeSet<String>>,
    time_range: Option<(Timestamp, Timestamp)>,
    pub attribute_equals: Option<BTreeMap<String, String>>,
}

impl EventFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_event_types<I, S>(mut self, types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.event_types = Some(types.into_iter().map(Into::into).collect());
        self
    }

    /// Restricts to the half-open interval `[start, end)`. Untimestamped events never match.
    pub fn with_time_range(mut self, start: Timestamp, end: Timestamp) -> Result<Self, EventError> {
        if start >= end {
            return Err(EventError::EmptyTimeRange { start, end });
        }
        self.time_range = Some((start, end));
        Ok(self)
    }

    pub fn with_attribute(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.attribute_equals
            .get_or_insert_with(BTreeMap::new)
            .insert(key.into(), value.into());
        self
    }

    pub fn time_range(&self) -> Option<(Timestamp, Timestamp)> {
        self.time_range
    }

    pub fn matches(&self, e: &Event) -> bool {
        if let Some(types) = &self.event_types {
            if !types.contains(&e.event_type) {
                return false;
            }
        }
        if let Some((start, end)) = self.time_range {
            match e.timestamp {
                Some(t) if t >= start && t < end => {}
                _ => return false,
            }
        }
        if let Some(attrs) = &self.attribute_equals {
            if !attrs.iter().all(|(k, v)| e.attr(k) == Some(v.as_str())) {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn ev(pid: &str, ty: &str, ts: Option<i64>, seq: u64) -> Event {
        Event::new(pid, ty, ts.map(Timestamp), seq, BTreeMap::new()).unwrap()
    }

    #[test]
    fn untimestamped_sorts_first() {
        let a = ev("P1", "admissions", Some(10), 0);
        let b = ev("P1", "patients", None, 5);
        let mut v = vec![a.clone(), b.clone()];
        v.sort_by(cmp_events);
        assert_eq!(v, vec![b, a]);
    }

    #[test]
    fn patient_ids_compare_bytewise() {
        let a = ev("P2", "x", None, 0);
        let b = ev("P10", "x", None, 0);
        assert_eq!(cmp_events(&b, &a), Ordering::Less);
    }

    // Naive oracle: compare the owned tuple field by field.
    fn oracle_tuple(e: &Event) -> (Vec<u8>, u8, i64, Vec<u8>, u64) {
        (
            e.patient_id.as_bytes().to_vec(),
            if e.timestamp.is_some() { 1 } else { 0 },
            e.timestamp.map(|t| t.0).unwrap_or(0),
            e.event_type.as_bytes().to_vec(),
            e.seq,
        )
    }

    #[test]
    fn six_event_fixture_matches_oracle() {
        let events = vec![
            ev("P2", "diagnoses", Some(200), 1),
            ev("P10", "admissions", Some(100), 0),
            ev("P2", "admissions", Some(200), 0),
            ev("P2", "patients", None, 3),
            ev("P10", "diagnoses", Some(50), 7),
            ev("P2", "diagnoses", Some(200), 0),
        ];
        let mut sorted = events.clone();
        sorted.sort_by(cmp_events);
        let mut oracle = events.clone();
        // bubble sort over the owned tuple, independent of SortKey
        for i in 0..oracle.len() {
            for j in 0..oracle.len() - 1 - i {
                if oracle_tuple(&oracle[j]) > oracle_tuple(&oracle[j + 1]) {
                    oracle.swap(j, j + 1);
                }
            }
        }
        assert_eq!(sorted, oracle);
        assert_eq!(sorted[0].patient_id, "P10");
        assert_eq!(sorted[2].event_type, "patients");
    }

    #[test]
    fn rejects_reserved_and_empty() {
        let mut attrs = BTreeMap::new();
        attrs.insert("timestamp".to_string(), "x".to_string());
        assert_eq!(
            Event::new("P1", "t", None, 0, attrs),
            Err(EventError::ReservedAttribute("timestamp".into()))
        );
        assert_eq!(
            Event::new("", "t", None, 0, BTreeMap::new()),
            Err(EventError::EmptyPatientId)
        );
    }

    #[test]
    fn filter_time_range_half_open() {
        let f = EventFilter::new()
            .with_time_range(Timestamp(10), Timestamp(20))
            .unwrap();
        assert!(f.matches(&ev("P", "t", Some(10), 0)));
        assert!(!f.matches(&ev("P", "t", Some(20), 0)));
        assert!(!f.matches(&ev("P", "t", None, 0)));
        assert!(EventFilter::new()
            .with_time_range(Timestamp(5), Timestamp(5))
            .is_err());
    }

    #[test]
    fn timestamp_round_trips_naive() {
        let dt = NaiveDateTime::parse_from_str("2101-10-20 19:08:00", "%Y-%m-%d %H:%M:%S").unwrap();
        let ts = Timestamp::from_naive(dt);
        assert_eq!(ts.to_naive(), Some(dt));
    }

    pub(crate) fn arb_event() -> impl Strategy<Value = Event> {
        (
            "[A-C][0-9]{0,2}",
            prop::sample::select(vec!["admissions", "diagnoses", "patients"]),
            prop::option::of(-5i64..5),
            0u64..4,
            prop::collection::btree_map("[a-c]", "[0-9]{1,2}", 0..3),
        )
            .prop_map(|(pid, ty, ts, seq, attrs)| {
                Event::new(pid, ty, ts.map(Timestamp), seq, attrs).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn sort_key_is_total_order(a in arb_event(), b in arb_event(), c in arb_event()) {
            let ab = cmp_events(&a, &b);
            let ba = cmp_events(&b, &a);
            prop_assert_eq!(ab, ba.reverse());
            if ab != Ordering::Greater && cmp_events(&b, &c) != Ordering::Greater {
                prop_assert_ne!(cmp_events(&a, &c), Ordering::Greater);
            }
            prop_assert_eq!(ab, oracle_tuple(&a).cmp(&oracle_tuple(&b)));
        }

        #[test]
        fn sorting_is_deterministic(mut v in prop::collection::vec(arb_event(), 0..30)) {
            let mut w = v.clone();
            w.reverse();
            v.sort_by(cmp_events);
            w.sort_by(cmp_events);
            let kv: Vec<_> = v.iter().map(oracle_tuple).collect();
            let kw: Vec<_> = w.iter().map(oracle_tuple).collect();
            prop_assert_eq!(kv, kw);
        }
    }
}
