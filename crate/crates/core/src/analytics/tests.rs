use std::collections::BTreeMap;

use super::*;
use crate::activity::test_config;
use crate::auth::{derive_pseudonym, Session};
use crate::ids::SessionToken;
use crate::model::{builtin_schemas, validate, EventEnvelope, Limits};

fn t(minutes: i64) -> Timestamp {
    Timestamp::from_ymd_hms(2012, 10, 22, 9, 0, 0)
        .unwrap()
        .saturating_add_millis(minutes * 60_000)
}

fn setup() -> (EventStore, ActivityConfig, Session) {
    let cfg = test_config();
    let store = EventStore::in_memory();
    let session = Session {
        session_id: SessionId::from_bytes([1; 16]),
        token: SessionToken::from_bytes([2; 16]),
        activity_id: cfg.activity_id.clone(),
        pseudonym: derive_pseudonym("lms:alice", &cfg.pseudonym_salt),
        started_at: t(0),
        opt_out: false,
    };
    store.insert_session(session.clone()).unwrap();
    (store, cfg, session)
}

fn append(store: &EventStore, session: &Session, env: EventEnvelope) {
    let v = validate(env, &builtin_schemas(), &Limits::default()).unwrap();
    store.append(&session.session_id, v, t(1)).unwrap();
}

#[test]
fn registry_precedence() {
    let mut reg = RendererRegistry::builtin();
    assert_eq!(reg.resolve("action").renderer_id, "text_line");
    assert_eq!(reg.resolve("squiggle.link").renderer_id, "generic_field_table");
    reg.register(RendererDescriptor::new(
        "squiggle_any",
        "squiggle.*",
        RendererShape::GenericFieldTable,
    ));
    reg.register(RendererDescriptor::new(
        "squiggle_link",
        "squiggle.link",
        RendererShape::TextLine,
    ));
    reg.register(RendererDescriptor::new(
        "squiggle_link_2",
        "squiggle.link",
        RendererShape::TextLine,
    ));
    assert_eq!(reg.resolve("squiggle.link").renderer_id, "squiggle_link");
    assert_eq!(reg.resolve("squiggle.draw").renderer_id, "squiggle_any");
    assert_eq!(reg.resolve("squiggle").renderer_id, "generic_field_table");
}

#[test]
fn session_view_items_and_prefix() {
    let (store, _, session) = setup();
    append(
        &store,
        &session,
        EventEnvelope::new("action", t(1)).with_field("action_name", "moved P1"),
    );
    append(
        &store,
        &session,
        EventEnvelope::new("feedback", t(2))
            .with_exercise("ex1")
            .with_field("verdict", "success")
            .with_field("message", "well done"),
    );
    append(
        &store,
        &session,
        EventEnvelope::new("squiggle.link", t(3)).with_field("target", "ex2"),
    );
    let reg = RendererRegistry::builtin();
    let full = build_session_view(&store, &session.session_id, None, &reg, "/b").unwrap();
    let ids: Vec<&str> = full.items.iter().map(|i| i.renderer_id.as_str()).collect();
    assert_eq!(ids, vec!["text_line", "feedback_card", "generic_field_table"]);
    assert_eq!(full.items[0].payload["text"], "moved P1");
    assert_eq!(full.items[1].payload["badge"], "success");
    assert_eq!(full.items[2].payload["fields"][0]["value"], "ex2");
    assert_eq!(full.event_count, 3);

    for n in 0..=4 {
        let part = build_session_view(&store, &session.session_id, Some(n), &reg, "/b").unwrap();
        let k = (n as usize).min(3);
        assert_eq!(part.items, full.items[..k].to_vec());
    }
    assert!(matches!(
        build_session_view(&store, &SessionId::from_bytes([9; 16]), None, &reg, "/b"),
        Err(StoreError::UnknownSession)
    ));
}

#[test]
fn learner_email_never_shown() {
    let (store, _, session) = setup();
    append(
        &store,
        &session,
        EventEnvelope::new("helprequest", t(1))
            .with_field("question_text", "help?")
            .with_field(LEARNER_EMAIL_FIELD, "alice@students.example.edu")
            .with_field("snapshot", FieldValue::blob("image/png", vec![1, 2, 3])),
    );
    let reg = RendererRegistry::builtin();
    let before = build_session_view(&store, &session.session_id, None, &reg, "/blobs").unwrap();
    let text = serde_json::to_string(&before).unwrap();
    assert!(!text.contains("alice@"), "{text}");
    assert_eq!(before.items[0].payload["snapshot_href"], "/blobs/1/snapshot");
    assert_eq!(before.items[0].payload["question_text"], "help?");

    store.redact(&session.session_id, 1, &[LEARNER_EMAIL_FIELD]).unwrap();
    let after = build_session_view(&store, &session.session_id, None, &reg, "/blobs").unwrap();
    let fields = after.items[0].payload["fields"].as_array().unwrap();
    let last = fields.last().unwrap();
    assert_eq!(last["name"], LEARNER_EMAIL_FIELD);
    assert_eq!(last["value"], REDACTED);
}

#[test]
fn cell_status_rule() {
    let stats = |attempts, successes, failures| ExerciseStats {
        attempts,
        successes,
        failures,
        last_attempt_at: t(0),
    };
    assert_eq!(CellStatus::from_stats(Some(&stats(3, 1, 2))), CellStatus::Succeeded);
    assert_eq!(CellStatus::from_stats(Some(&stats(2, 0, 1))), CellStatus::Failed);
    assert_eq!(CellStatus::from_stats(Some(&stats(2, 0, 0))), CellStatus::Attempted);
    assert_eq!(CellStatus::from_stats(None), CellStatus::NoAttempt);
}

#[test]
fn exercise_table_columns_and_rows() {
    let p1 = Pseudonym::parse("000000000001").unwrap();
    let p2 = Pseudonym::parse("000000000002").unwrap();
    let s = |a, ok, fail| ExerciseStats {
        attempts: a,
        successes: ok,
        failures: fail,
        last_attempt_at: t(0),
    };
    let mut m: ExerciseProgressMatrix = BTreeMap::new();
    m.insert((p1.clone(), "ex1".into()), s(3, 1, 2));
    m.insert((p1.clone(), "zeta".into()), s(1, 0, 0));
    m.insert((p1.clone(), "alpha".into()), s(1, 0, 1));
    m.insert((p2.clone(), "".into()), s(1, 0, 1));
    let order = vec!["ex2".to_string(), "ex1".to_string()];
    let table = exercise_table_from("a", &order, &[p2.clone()], &m);
    assert_eq!(table.columns, vec!["ex2", "ex1", "alpha", "zeta"]);
    assert_eq!(table.rows.len(), 2);
    let statuses: Vec<CellStatus> = table.rows[0].cells.iter().map(|c| c.status).collect();
    assert_eq!(
        statuses,
        vec![
            CellStatus::NoAttempt,
            CellStatus::Succeeded,
            CellStatus::Failed,
            CellStatus::Attempted
        ]
    );
    assert!(table.rows[1].cells.iter().all(|c| c.status == CellStatus::NoAttempt));
    assert_eq!(table, exercise_table_from("a", &order, &[p2], &m));
}

#[test]
fn dashboard_totals_and_week() {
    let (store, cfg, session) = setup();
    let empty = build_dashboard(&store, &cfg, t(0)).unwrap();
    assert_eq!(empty.totals.events, 0);
    assert_eq!(empty.timeline_7d.len(), 7);

    append(
        &store,
        &session,
        EventEnvelope::new("action", t(1)).with_field("action_name", "x"),
    );
    let dash = build_dashboard(&store, &cfg, t(60 * 24 * 2)).unwrap();
    assert_eq!((dash.totals.users, dash.totals.sessions, dash.totals.events), (1, 1, 1));
    assert_eq!(dash.recent_sessions.len(), 1);
    assert_eq!(dash.timeline_7d.len(), 7);
    assert_eq!(dash.timeline_7d[4].event_count, 1);
    assert_eq!(dash.timeline_7d[4].bucket_start.to_iso(), "2012-10-22T00:00:00.000Z");
    assert_eq!(dash.timeline_7d.iter().map(|b| b.event_count).sum::<u64>(), 1);
}

#[test]
fn dashboard_lists_at_most_twenty_recent_sessions() {
    let (store, cfg, _) = setup();
    for i in 0..25u8 {
        store
            .insert_session(Session {
                session_id: SessionId::from_bytes([i + 10; 16]),
                token: SessionToken::from_bytes([i + 100; 16]),
                activity_id: cfg.activity_id.clone(),
                pseudonym: derive_pseudonym("lms:bob", &cfg.pseudonym_salt),
                started_at: t(i64::from(i) + 10),
                opt_out: false,
            })
            .unwrap();
    }
    let dash = build_dashboard(&store, &cfg, t(100)).unwrap();
    assert_eq!(dash.recent_sessions.len(), RECENT_SESSIONS);
    assert_eq!(dash.recent_sessions[0].started_at, t(34));
    assert_eq!(dash.totals.sessions, 26);
}
