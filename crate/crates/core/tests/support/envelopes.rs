//! Envelope generators shared by the codec property tests and the acceptance
//! runner.
#![allow(dead_code)]

use learnlog_core::model::{is_xml_text, Blob, EventEnvelope, Field, FieldValue};
use learnlog_core::Timestamp;
use proptest::prelude::*;

pub fn xml_char() -> impl Strategy<Value = char> {
    prop_oneof![
        4 => prop::char::range(' ', '~'),
        2 => prop::sample::select(vec!['&', '<', '>', '"', '\'', '\t', '\n', '\r', ' ', ';', '#']),
        2 => any::<char>().prop_filter("XML character", |c| is_xml_text(&c.to_string())),
    ]
}

pub fn xml_string(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(xml_char(), 0..max).prop_map(|v| v.into_iter().collect())
}

pub fn segment() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,6}"
}

pub fn token() -> impl Strategy<Value = String> {
    prop::collection::vec(segment(), 1..4).prop_map(|v| v.join("."))
}

pub fn timestamp() -> impl Strategy<Value = Timestamp> {
    (Timestamp::MIN.millis()..=Timestamp::MAX.millis()).prop_map(|m| Timestamp::from_millis(m).unwrap())
}

pub fn number() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |f| f.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(5e-324),
        Just(f64::MAX),
        (-1_000_000i64..1_000_000).prop_map(|i| i as f64 / 8.0),
    ]
}

pub fn leaf() -> impl Strategy<Value = FieldValue> {
    prop_oneof![
        xml_string(24).prop_map(FieldValue::String),
        number().prop_map(FieldValue::Number),
        timestamp().prop_map(FieldValue::Date),
        (
            prop_oneof![Just("image/png".to_string()), "[a-z]{1,8}/[a-z0-9.+-]{1,10}"],
            prop::collection::vec(any::<u8>(), 0..48)
        )
            .prop_map(|(media_type, data)| FieldValue::Blob(Blob { media_type, data })),
    ]
}

pub fn unique_fields(value: impl Strategy<Value = FieldValue>, max: usize) -> impl Strategy<Value = Vec<Field>> {
    prop::collection::vec((xml_string(10), value), 0..max).prop_map(|pairs| {
        let mut seen = std::collections::HashSet::new();
        pairs
            .into_iter()
            .filter(|(name, _)| seen.insert(name.clone()))
            .map(|(name, value)| Field { name, value })
            .collect()
    })
}

/// Values nested up to three kvlist levels deep.
pub fn value() -> impl Strategy<Value = FieldValue> + Clone {
    leaf().prop_recursive(3, 24, 4, |inner| unique_fields(inner, 4).prop_map(FieldValue::KvList))
}

pub fn envelope() -> impl Strategy<Value = EventEnvelope> {
    (token(), timestamp(), xml_string(12), unique_fields(value(), 6)).prop_map(|(event_type, ts, exercise, fields)| {
        EventEnvelope {
            event_type,
            client_timestamp: ts,
            exercise,
            fields,
        }
    })
}

pub fn same_value(a: &FieldValue, b: &FieldValue) -> bool {
    match (a, b) {
        (FieldValue::Number(x), FieldValue::Number(y)) => x.to_bits() == y.to_bits(),
        (FieldValue::KvList(x), FieldValue::KvList(y)) => {
            x.len() == y.len()
                && x.iter()
                    .zip(y)
                    .all(|(f, g)| f.name == g.name && same_value(&f.value, &g.value))
        }
        _ => a == b,
    }
}

pub fn same(a: &EventEnvelope, b: &EventEnvelope) -> bool {
    a.event_type == b.event_type
        && a.client_timestamp == b.client_timestamp
        && a.exercise == b.exercise
        && same_value(
            &FieldValue::KvList(a.fields.clone()),
            &FieldValue::KvList(b.fields.clone()),
        )
}
