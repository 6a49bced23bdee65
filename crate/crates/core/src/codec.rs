//! Canonical XML wire format for event envelopes.
//!
//! ```text
//! <event type="action" ts="2012-01-15T10:00:00.000Z" exercise="ex1">
//!   <field name="action_name" kind="string">created point P1 in domain 1</field>
//! </event>
//! ```
//!
//! (shown indented; the canonical form has no whitespace between elements).
//! `docs/wire-format.md` pins the byte layout.

use std::collections::HashSet;
use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use roxmltree::{Node, NodeType, ParsingOptions};

use crate::model::{Blob, EventEnvelope, Field, FieldKind, FieldValue};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("field {0:?} has an unknown kind")]
    UnknownKind(String),
    #[error("bad timestamp in {0:?}")]
    BadTimestamp(String),
    #[error("field {0:?} is not valid base64")]
    BadBase64(String),
    #[error("field {0:?} is not a finite number")]
    BadNumber(String),
    #[error("field {0:?} appears more than once")]
    DuplicateField(String),
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::MalformedXml(_) => "malformed_xml",
            DecodeError::UnknownKind(_) => "unknown_kind",
            DecodeError::BadTimestamp(_) => "bad_timestamp",
            DecodeError::BadBase64(_) => "bad_base64",
            DecodeError::BadNumber(_) => "bad_number",
            DecodeError::DuplicateField(_) => "duplicate_field",
        }
    }
}

pub fn encode(envelope: &EventEnvelope) -> Vec<u8> {
    encode_string(envelope).into_bytes()
}

pub fn encode_string(envelope: &EventEnvelope) -> String {
    let mut out = String::with_capacity(128 + envelope.fields.len() * 64);
    out.push_str("<event type=\"");
    escape_attr(&mut out, &envelope.event_type);
    out.push_str("\" ts=\"");
    out.push_str(&envelope.client_timestamp.to_iso());
    out.push_str("\" exercise=\"");
    escape_attr(&mut out, &envelope.exercise);
    out.push_str("\">");
    for field in &envelope.fields {
        encode_field(&mut out, field);
    }
    out.push_str("</event>");
    out
}

fn encode_field(out: &mut String, field: &Field) {
    out.push_str("<field name=\"");
    escape_attr(out, &field.name);
    out.push_str("\" kind=\"");
    out.push_str(field.value.kind().as_str());
    out.push('"');
    match &field.value {
        FieldValue::String(s) => {
            out.push('>');
            escape_text(out, s);
        }
        FieldValue::Number(n) => {
            out.push('>');
            out.push_str(&format_number(*n));
        }
        FieldValue::Date(ts) => {
            out.push('>');
            out.push_str(&ts.to_iso());
        }
        FieldValue::Blob(blob) => {
            out.push_str(" media=\"");
            escape_attr(out, &blob.media_type);
            out.push_str("\">");
            BASE64.encode_string(&blob.data, out);
        }
        FieldValue::KvList(items) => {
            out.push('>');
            for item in items {
                encode_field(out, item);
            }
        }
    }
    out.push_str("</field>");
}

/// Shortest decimal that parses back to the same double. Very large and very
/// small magnitudes use exponent notation.
pub fn format_number(n: f64) -> String {
    let abs = n.abs();
    if abs != 0.0 && !(1e-7..1e16).contains(&abs) {
        format!("{n:e}")
    } else {
        format!("{n}")
    }
}

fn escape_text(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}

fn escape_attr(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\t' => out.push_str("&#9;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => {
                let _ = out.write_char(c);
            }
        }
    }
}

/// Parses one event document. Attribute order, whitespace between elements,
/// an XML declaration and comments are tolerated; DTDs are not.
pub fn decode(doc: &[u8]) -> Result<EventEnvelope, DecodeError> {
    let text = std::str::from_utf8(doc).map_err(|e| DecodeError::MalformedXml(format!("not UTF-8: {e}")))?;
    let opts = ParsingOptions {
        allow_dtd: false,
        ..ParsingOptions::default()
    };
    let document =
        roxmltree::Document::parse_with_options(text, opts).map_err(|e| DecodeError::MalformedXml(e.to_string()))?;
    let root = document.root_element();
    expect_element(root, "event")?;

    let mut event_type = None;
    let mut ts = None;
    let mut exercise = None;
    for attr in root.attributes() {
        if attr.namespace().is_some() {
            return Err(malformed("namespaced attributes are not supported"));
        }
        match attr.name() {
            "type" => event_type = Some(attr.value().to_owned()),
            "ts" => ts = Some(attr.value()),
            "exercise" => exercise = Some(attr.value().to_owned()),
            other => return Err(malformed(format!("unexpected attribute {other:?} on <event>"))),
        }
    }
    let event_type = event_type.ok_or_else(|| malformed("<event> lacks a type attribute"))?;
    let ts = ts.ok_or_else(|| malformed("<event> lacks a ts attribute"))?;
    let client_timestamp = Timestamp::parse_iso(ts).ok_or_else(|| DecodeError::BadTimestamp("ts".into()))?;
    let exercise = exercise.ok_or_else(|| malformed("<event> lacks an exercise attribute"))?;

    Ok(EventEnvelope {
        event_type,
        client_timestamp,
        exercise,
        fields: decode_children(root)?,
    })
}

fn decode_children(parent: Node<'_, '_>) -> Result<Vec<Field>, DecodeError> {
    let mut fields = Vec::new();
    let mut names = HashSet::new();
    for child in parent.children() {
        match child.node_type() {
            NodeType::Element => {
                let field = decode_field(child)?;
                if !names.insert(field.name.clone()) {
                    return Err(DecodeError::DuplicateField(field.name));
                }
                fields.push(field);
            }
            NodeType::Text => {
                if !child.text().unwrap_or("").chars().all(char::is_whitespace) {
                    return Err(malformed(format!(
                        "unexpected text inside <{}>",
                        parent.tag_name().name()
                    )));
                }
            }
            _ => {}
        }
    }
    Ok(fields)
}

fn decode_field(node: Node<'_, '_>) -> Result<Field, DecodeError> {
    expect_element(node, "field")?;
    let mut name = None;
    let mut kind = None;
    let mut media = None;
    for attr in node.attributes() {
        if attr.namespace().is_some() {
            return Err(malformed("namespaced attributes are not supported"));
        }
        match attr.name() {
            "name" => name = Some(attr.value().to_owned()),
            "kind" => kind = Some(attr.value()),
            "media" => media = Some(attr.value().to_owned()),
            other => return Err(malformed(format!("unexpected attribute {other:?} on <field>"))),
        }
    }
    let name = name.ok_or_else(|| malformed("<field> lacks a name attribute"))?;
    let kind = kind.ok_or_else(|| malformed(format!("field {name:?} lacks a kind attribute")))?;
    let kind = FieldKind::parse(kind).ok_or_else(|| DecodeError::UnknownKind(name.clone()))?;
    if media.is_some() != (kind == FieldKind::Blob) {
        return Err(malformed(format!(
            "field {name:?}: media attribute is required for blobs and only for blobs"
        )));
    }

    let value = match kind {
        FieldKind::KvList => FieldValue::KvList(decode_children(node)?),
        FieldKind::String => FieldValue::String(scalar_text(node, &name)?),
        FieldKind::Number => {
            let raw = scalar_text(node, &name)?;
            let n: f64 = raw.trim().parse().map_err(|_| DecodeError::BadNumber(name.clone()))?;
            if !n.is_finite() {
                return Err(DecodeError::BadNumber(name));
            }
            FieldValue::Number(n)
        }
        FieldKind::Date => {
            let raw = scalar_text(node, &name)?;
            FieldValue::Date(Timestamp::parse_iso(&raw).ok_or_else(|| DecodeError::BadTimestamp(name.clone()))?)
        }
        FieldKind::Blob => {
            let raw = scalar_text(node, &name)?;
            let compact: String = raw.chars().filter(|c| !c.is_ascii_whitespace()).collect();
            let data = BASE64
                .decode(compact)
                .map_err(|_| DecodeError::BadBase64(name.clone()))?;
            FieldValue::Blob(Blob {
                media_type: media.unwrap_or_default(),
                data,
            })
        }
    };
    Ok(Field { name, value })
}

fn scalar_text(node: Node<'_, '_>, name: &str) -> Result<String, DecodeError> {
    let mut text = String::new();
    for child in node.children() {
        match child.node_type() {
            NodeType::Text => text.push_str(child.text().unwrap_or("")),
            NodeType::Element => return Err(malformed(format!("field {name:?} of scalar kind has child elements"))),
            _ => {}
        }
    }
    Ok(text)
}

fn expect_element(node: Node<'_, '_>, local: &str) -> Result<(), DecodeError> {
    let tag = node.tag_name();
    if tag.namespace().is_some() || tag.name() != local {
        return Err(malformed(format!("expected <{local}>, found <{}>", tag.name())));
    }
    Ok(())
}

fn malformed(msg: impl Into<String>) -> DecodeError {
    DecodeError::MalformedXml(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts() -> Timestamp {
        Timestamp::from_ymd_hms(2012, 1, 15, 10, 0, 0).unwrap()
    }

    const CANONICAL: &str = "<event type=\"action\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"ex1\"><field name=\"action_name\" kind=\"string\">created point P1 in domain 1</field></event>";

    fn sample() -> EventEnvelope {
        EventEnvelope::new("action", ts())
            .with_exercise("ex1")
            .with_field("action_name", "created point P1 in domain 1")
    }

    #[test]
    fn encodes_canonical_example() {
        assert_eq!(encode_string(&sample()), CANONICAL);
        assert_eq!(decode(CANONICAL.as_bytes()).unwrap(), sample());
    }

    #[test]
    fn empty_event_has_no_children() {
        let env = EventEnvelope::new("action", ts());
        assert_eq!(
            encode_string(&env),
            "<event type=\"action\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"\"></event>"
        );
    }

    #[test]
    fn tolerates_attribute_order_and_whitespace() {
        let doc = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<event exercise=\"ex1\" ts=\"2012-01-15T10:00:00.000Z\" type=\"action\">\n  <!-- note -->\n  <field kind=\"string\" name=\"action_name\">created point P1 in domain 1</field>\n</event>\n";
        let env = decode(doc.as_bytes()).unwrap();
        assert_eq!(encode_string(&env), CANONICAL);
    }

    #[test]
    fn all_kinds_and_escaping() {
        let env = EventEnvelope::new("cominm.rewrite", ts())
            .with_exercise("a \"quoted\" <ex>\n")
            .with_field("s", "x < y & z > w\r\n\t end ")
            .with_field("n", -0.0)
            .with_field("big", 1e300)
            .with_field("d", FieldValue::Date(ts()))
            .with_field("b", FieldValue::blob("image/png", vec![0, 1, 2, 255]))
            .with_field(
                "kv",
                FieldValue::KvList(vec![
                    Field::new("inner", 0.1),
                    Field::new("deep", FieldValue::KvList(vec![])),
                ]),
            );
        let bytes = encode(&env);
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.contains("exercise=\"a &quot;quoted&quot; &lt;ex&gt;&#10;\""));
        assert!(text.contains(">x &lt; y &amp; z &gt; w&#13;\n\t end </field>"));
        assert!(text.contains("kind=\"number\">-0</field>"));
        assert!(text.contains("kind=\"number\">1e300</field>"));
        assert!(text.contains("kind=\"blob\" media=\"image/png\">AAEC/w==</field>"));
        let back = decode(&bytes).unwrap();
        assert_eq!(back, env);
        assert_eq!(encode(&back), bytes);
        assert!(matches!(back.field("n"), Some(FieldValue::Number(n)) if n.is_sign_negative()));
    }

    #[test]
    fn decode_errors() {
        let bad_ts = "<event type=\"action\" ts=\"notadate\" exercise=\"\"></event>";
        assert_eq!(decode(bad_ts.as_bytes()), Err(DecodeError::BadTimestamp("ts".into())));

        let dup = "<event type=\"a\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"\"><field name=\"x\" kind=\"string\">1</field><field name=\"x\" kind=\"string\">2</field></event>";
        assert_eq!(decode(dup.as_bytes()), Err(DecodeError::DuplicateField("x".into())));

        let wrap =
            |inner: &str| format!("<event type=\"a\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"\">{inner}</event>");
        let cases = [
            (wrap("<field name=\"x\" kind=\"tensor\">1</field>"), "unknown_kind"),
            (wrap("<field name=\"x\" kind=\"number\">NaN</field>"), "bad_number"),
            (wrap("<field name=\"x\" kind=\"number\">inf</field>"), "bad_number"),
            (wrap("<field name=\"x\" kind=\"number\">12abc</field>"), "bad_number"),
            (wrap("<field name=\"x\" kind=\"date\">yesterday</field>"), "bad_timestamp"),
            (wrap("<field name=\"x\" kind=\"blob\" media=\"a/b\">@@@</field>"), "bad_base64"),
            (wrap("<field name=\"x\" kind=\"blob\">AAAA</field>"), "malformed_xml"),
            (wrap("stray text"), "malformed_xml"),
            (wrap("<field name=\"x\" kind=\"string\">a<b/></field>"), "malformed_xml"),
            (wrap("<field name=\"k\" kind=\"kvlist\"><field name=\"y\" kind=\"string\"/><field name=\"y\" kind=\"string\"/></field>"), "duplicate_field"),
            ("<event type=\"a\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"\">".to_string(), "malformed_xml"),
            ("<other/>".to_string(), "malformed_xml"),
            ("<!DOCTYPE event [<!ENTITY e \"x\">]><event type=\"a\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"\"></event>".to_string(), "malformed_xml"),
        ];
        for (doc, code) in cases {
            let err = decode(doc.as_bytes()).unwrap_err();
            assert_eq!(err.code(), code, "{doc}");
        }
    }

    #[test]
    fn blob_content_may_be_wrapped() {
        let doc = "<event type=\"a\" ts=\"2012-01-15T10:00:00.000Z\" exercise=\"\"><field name=\"b\" kind=\"blob\" media=\"image/png\">\n  AAEC\n  /w==\n</field></event>";
        let env = decode(doc.as_bytes()).unwrap();
        assert_eq!(env.field("b"), Some(&FieldValue::blob("image/png", vec![0, 1, 2, 255])));
    }

    #[test]
    fn number_format_is_shortest_round_trip() {
        for n in [
            0.0,
            1.0,
            -2.5,
            0.1,
            1e15,
            1e16,
            123456789.125,
            1e-7,
            9.9e-8,
            f64::MAX,
            f64::MIN_POSITIVE,
            5e-324,
        ] {
            let s = format_number(n);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), n.to_bits(), "{s}");
        }
        assert_eq!(format_number(1.0), "1");
        assert_eq!(format_number(1e16), "1e16");
        assert_eq!(format_number(0.1), "0.1");
    }
}
