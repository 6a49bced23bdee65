//! Seeded synthetic workload at a requested scale.
//!
//! A plan is a pure function of its parameters: the same seed yields the
//! same sessions, events and timestamps, and, when replayed through a
//! service seeded from [`LoadgenParams::id_seed`], the same export bytes.

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::activity::ActivityConfig;
use crate::auth::LaunchRequest;
use crate::model::{EventEnvelope, FieldValue, LEARNER_EMAIL_FIELD, VERDICT_FAILURE, VERDICT_PARTIAL, VERDICT_SUCCESS};
use crate::service::{IngestError, LaunchFailure, LogService};
use crate::store::AppendOutcome;
use crate::time::Timestamp;

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
const TERM_DAYS: i64 = 84;
const DAY_MILLIS: i64 = 86_400_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadgenParams {
    pub users: usize,
    pub sessions: usize,
    pub events: usize,
    pub help_requests: usize,
    /// Extra opted-out sessions on top of `sessions`; their events are discarded.
    pub opt_out_sessions: usize,
    pub seed: u64,
    /// Used when the activity lists no exercises.
    pub exercises: Vec<String>,
    /// Probability of a `success` verdict per exercise position; the last
    /// entry repeats for later exercises.
    pub success_rates: Vec<f64>,
    pub term_start: Timestamp,
}

impl Default for LoadgenParams {
    fn default() -> Self {
        LoadgenParams {
            users: 156,
            sessions: 965,
            events: 24_655,
            help_requests: 11,
            opt_out_sessions: 0,
            seed: 2012,
            exercises: (1..=8).map(|i| format!("ex{i}")).collect(),
            success_rates: vec![0.75, 0.6, 0.4, 0.25, 0.15, 0.1, 0.05, 0.05],
            term_start: Timestamp::from_ymd_hms(2012, 10, 15, 0, 0, 0).expect("valid date"),
        }
    }
}

impl LoadgenParams {
    /// Seed for the service's session-id generator.
    pub fn id_seed(&self) -> u64 {
        self.seed ^ 0x5eed_1d5e_ed1d_5eed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("{sessions} sessions cannot cover {users} users")]
    TooFewSessions { users: usize, sessions: usize },
    #[error("sessions require at least one user")]
    NoUsers,
    #[error("events require at least one session")]
    NoSessions,
    #[error("{help_requests} help requests exceed {events} events")]
    TooManyHelpRequests { help_requests: usize, events: usize },
    #[error("no exercises to draw from")]
    NoExercises,
    #[error("success rates must lie in [0, 1]")]
    BadSuccessRate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSession {
    pub user_ref: String,
    pub opt_out: bool,
    pub started_at: Timestamp,
    pub nonce: String,
    /// Client timestamps double as the ingestion clock.
    pub events: Vec<EventEnvelope>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub activity_id: String,
    /// Ordered by start time.
    pub sessions: Vec<PlannedSession>,
}

impl Plan {
    pub fn event_count(&self) -> usize {
        self.sessions
            .iter()
            .filter(|s| !s.opt_out)
            .map(|s| s.events.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadgenSummary {
    pub users: usize,
    pub sessions: usize,
    pub events: usize,
    pub help_requests: usize,
    pub opt_out_sessions: usize,
    pub discarded_events: usize,
}

pub fn plan(params: &LoadgenParams, cfg: &ActivityConfig) -> Result<Plan, PlanError> {
    let LoadgenParams {
        users,
        sessions,
        events,
        help_requests,
        ..
    } = *params;
    if sessions > 0 && users == 0 {
        return Err(PlanError::NoUsers);
    }
    if sessions < users {
        return Err(PlanError::TooFewSessions { users, sessions });
    }
    if events > 0 && sessions == 0 {
        return Err(PlanError::NoSessions);
    }
    if help_requests > events {
        return Err(PlanError::TooManyHelpRequests { help_requests, events });
    }
    let exercises = if cfg.exercise_order.is_empty() {
        &params.exercises
    } else {
        &cfg.exercise_order
    };
    if exercises.is_empty() && events > 0 {
        return Err(PlanError::NoExercises);
    }
    if params.success_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(PlanError::BadSuccessRate);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);

    // Every user gets one session; the rest go to random users.
    let mut owners: Vec<usize> = (0..users).collect();
    owners.extend((users..sessions).map(|_| rng.gen_range(0..users)));

    // Integer cut points split the event total exactly.
    let mut cuts: Vec<usize> = (1..sessions).map(|_| rng.gen_range(0..=events)).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(sessions);
    let mut prev = 0;
    for c in cuts.iter().copied().chain((sessions > 0).then_some(events)) {
        sizes.push(c - prev);
        prev = c;
    }

    let help: Vec<bool> = {
        let mut marks = vec![false; events];
        for i in sample(&mut rng, events, help_requests) {
            marks[i] = true;
        }
        marks
    };

    let mut planned = Vec::with_capacity(sessions + params.opt_out_sessions);
    let mut next_event = 0;
    for (s, &size) in sizes.iter().enumerate() {
        let user = owners[s];
        let started_at = session_start(&mut rng, params.term_start);
        let marks = &help[next_event..next_event + size];
        next_event += size;
        let events = session_events(&mut rng, params, exercises, user, started_at, marks);
        planned.push(PlannedSession {
            user_ref: user_ref(user),
            opt_out: false,
            started_at,
            nonce: nonce(&mut rng),
            events,
        });
    }
    for _ in 0..params.opt_out_sessions {
        let user = if users > 0 { rng.gen_range(0..users) } else { 0 };
        let started_at = session_start(&mut rng, params.term_start);
        let n = rng.gen_range(1..=8);
        let events = session_events(&mut rng, params, exercises, user, started_at, &vec![false; n]);
        planned.push(PlannedSession {
            user_ref: user_ref(user),
            opt_out: true,
            started_at,
            nonce: nonce(&mut rng),
            events,
        });
    }
    planned.sort_by_key(|s| s.started_at);
    Ok(Plan {
        activity_id: cfg.activity_id.clone(),
        sessions: planned,
    })
}

fn user_ref(i: usize) -> String {
    format!("lms:user{i:04}")
}

fn learner_email(i: usize) -> String {
    format!("user{i:04}@students.example.edu")
}

fn nonce(rng: &mut impl RngCore) -> String {
    let mut b = [0u8; 16];
    rng.fill_bytes(&mut b);
    hex::encode(b)
}

/// Daytime launches spread over a twelve-week term.
fn session_start(rng: &mut impl Rng, term_start: Timestamp) -> Timestamp {
    let day = rng.gen_range(0..TERM_DAYS);
    let millis = rng.gen_range(8 * 3_600_000..22 * 3_600_000);
    term_start.saturating_add_millis(day * DAY_MILLIS + millis)
}

fn session_events(
    rng: &mut impl Rng,
    params: &LoadgenParams,
    exercises: &[String],
    user: usize,
    started_at: Timestamp,
    help_marks: &[bool],
) -> Vec<EventEnvelope> {
    // Learners reach early exercises far more often than late ones.
    let mut reach = 1;
    while reach < exercises.len() && rng.gen_bool(0.55) {
        reach += 1;
    }
    let mut at = started_at;
    help_marks
        .iter()
        .map(|&is_help| {
            at = at.saturating_add_millis(rng.gen_range(2_000..90_000));
            let ex_index = rng.gen_range(0..reach);
            let exercise = exercises[ex_index].clone();
            let env = EventEnvelope::new("", at).with_exercise(exercise.clone());
            if is_help {
                return help_request(rng, env, user, &exercise);
            }
            match rng.gen_range(0..100) {
                0..=54 => action(rng, env),
                55..=64 => EventEnvelope {
                    event_type: "question".into(),
                    ..env
                }
                .with_field(
                    "question_text",
                    format!("Which points lie in domain {}?", rng.gen_range(1..5)),
                ),
                65..=72 => EventEnvelope {
                    event_type: "image".into(),
                    ..env
                }
                .with_field("image", FieldValue::blob("image/png", png_bytes(rng))),
                _ => feedback(rng, env, params, ex_index),
            }
        })
        .collect()
}

fn action(rng: &mut impl Rng, env: EventEnvelope) -> EventEnvelope {
    const VERBS: [&str; 5] = [
        "created point",
        "moved point",
        "deleted point",
        "drew line",
        "toggled grid",
    ];
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    let n = rng.gen_range(1..20);
    EventEnvelope {
        event_type: "action".into(),
        ..env
    }
    .with_field("action_name", format!("{verb} P{n}"))
    .with_field("x", f64::from(rng.gen_range(0..400)) / 4.0)
    .with_field("y", f64::from(rng.gen_range(0..400)) / 4.0)
}

fn feedback(rng: &mut impl Rng, env: EventEnvelope, params: &LoadgenParams, ex_index: usize) -> EventEnvelope {
    let rate = params
        .success_rates
        .get(ex_index)
        .or(params.success_rates.last())
        .copied()
        .unwrap_or(0.5);
    let verdict = if rng.gen_bool(rate) {
        VERDICT_SUCCESS
    } else if rng.gen_bool(0.8) {
        VERDICT_FAILURE
    } else {
        VERDICT_PARTIAL
    };
    let message = match verdict {
        VERDICT_SUCCESS => "All points are placed correctly.",
        VERDICT_FAILURE => "Some points lie outside their domain.",
        _ => "Most points are correct; check the boundary.",
    };
    EventEnvelope {
        event_type: "feedback".into(),
        ..env
    }
    .with_field("verdict", verdict)
    .with_field("message", message)
}

fn help_request(rng: &mut impl Rng, env: EventEnvelope, user: usize, exercise: &str) -> EventEnvelope {
    EventEnvelope {
        event_type: "helprequest".into(),
        ..env
    }
    .with_field(
        "question_text",
        format!("I do not understand why my answer to {exercise} is wrong."),
    )
    .with_field(LEARNER_EMAIL_FIELD, learner_email(user))
    .with_field("snapshot", FieldValue::blob("image/png", png_bytes(rng)))
}

fn png_bytes(rng: &mut impl Rng) -> Vec<u8> {
    let mut data = PNG_MAGIC.to_vec();
    let n = rng.gen_range(24..96);
    data.extend((0..n).map(|_| rng.gen::<u8>()));
    data
}

/// A signed launch request for one planned session.
pub fn launch_request(planned: &PlannedSession, cfg: &ActivityConfig) -> LaunchRequest {
    let mut req = LaunchRequest {
        activity_id: cfg.activity_id.clone(),
        user_ref: planned.user_ref.clone(),
        issued_at: planned.started_at,
        nonce: planned.nonce.clone(),
        origin: cfg.host_whitelist.first().cloned().unwrap_or_default(),
        opt_out: planned.opt_out,
        signature: String::new(),
    };
    req.sign(&cfg.application_key);
    req
}

#[derive(Debug, thiserror::Error)]
pub enum DriveError {
    #[error("unknown activity {0:?}")]
    UnknownActivity(String),
    #[error("launch failed: {0}")]
    Launch(#[from] LaunchFailure),
    #[error("ingest failed: {0}")]
    Ingest(#[from] IngestError),
}

/// Replays a plan through the service, using planned times as the clock.
pub fn drive(plan: &Plan, service: &LogService) -> Result<LoadgenSummary, DriveError> {
    let cfg = service
        .activity(&plan.activity_id)
        .ok_or_else(|| DriveError::UnknownActivity(plan.activity_id.clone()))?
        .clone();
    let mut summary = LoadgenSummary::default();
    let mut users = std::collections::HashSet::new();
    for planned in &plan.sessions {
        let session = service.launch(&launch_request(planned, &cfg), planned.started_at)?;
        if planned.opt_out {
            summary.opt_out_sessions += 1;
        } else {
            summary.sessions += 1;
            users.insert(planned.user_ref.as_str());
        }
        for env in &planned.events {
            match service.ingest_envelope(&session.session_id, env.clone(), env.client_timestamp)? {
                AppendOutcome::Stored(stored) => {
                    summary.events += 1;
                    if stored.event_type() == "helprequest" {
                        summary.help_requests += 1;
                    }
                }
                AppendOutcome::Discarded => summary.discarded_events += 1,
            }
        }
    }
    summary.users = users.len();
    Ok(summary)
}
