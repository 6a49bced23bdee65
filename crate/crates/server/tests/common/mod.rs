//! In-process test harness: a router over a temp-dir store and outbox, with a
//! settable clock.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use learnlog_core::auth::{IdentityVerifier, LaunchRequest};
use learnlog_core::codec;
use learnlog_core::trigger::{Dispatcher, FileOutbox, MailGateway, TriggerEnv};
use learnlog_core::{ActivityConfig, ActivityRegistry, EventEnvelope, EventStore, LogService, Timestamp};
use learnlog_server::http::{router, AppState, RateLimiter};
use tower::ServiceExt;

pub const BASE_URL: &str = "https://log.example.edu";
pub const IDENTITY_SECRET: &str = "acceptance-identity-secret";
pub const TEACHER: &str = "tutor@uni.example";
pub const ORIGIN: &str = "https://lms.example.edu";

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn activity_config() -> ActivityConfig {
    let path = fixtures_dir().join("activities/squiggle-ws12.xml");
    ActivityConfig::from_xml(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A second activity with a different teacher, for cross-activity probes.
pub fn other_activity() -> ActivityConfig {
    let mut cfg = activity_config();
    cfg.activity_id = "setsails-ss13".into();
    cfg.teacher_principals = vec!["other@uni.example".into()];
    cfg.pseudonym_salt = vec![0x11; 16];
    for b in &mut cfg.trigger_bindings {
        b.activity_id = cfg.activity_id.clone();
    }
    cfg
}

pub fn t0() -> Timestamp {
    Timestamp::parse_iso("2012-10-22T09:15:00.000Z").unwrap()
}

pub struct TestApp {
    pub dir: tempfile::TempDir,
    pub router: Router,
    pub state: Arc<AppState>,
    pub clock: Arc<AtomicI64>,
    pub outbox: FileOutbox,
}

pub struct Options {
    pub durable: bool,
    pub rate: u32,
    pub console: bool,
    pub gateway: Option<Arc<dyn MailGateway>>,
    pub max_body: Option<usize>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            durable: true,
            rate: 1000,
            console: false,
            gateway: None,
            max_body: None,
        }
    }
}

impl TestApp {
    pub fn new() -> Self {
        Self::with(Options::default())
    }

    pub fn with(opts: Options) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(if opts.durable {
            EventStore::open(&dir.path().join("events.journal")).unwrap()
        } else {
            EventStore::in_memory()
        });
        let outbox = FileOutbox::new(dir.path().join("outbox")).unwrap();
        let gateway: Arc<dyn MailGateway> = opts.gateway.unwrap_or_else(|| Arc::new(outbox.clone()));
        let mut env = TriggerEnv::new(BASE_URL, gateway, store.clone());
        env.dead_letter = Some(FileOutbox::new(dir.path().join("dead-letter")).unwrap());
        env.retry_delay = Duration::from_millis(5);

        let mut registry = ActivityRegistry::new();
        registry.insert(activity_config()).unwrap();
        registry.insert(other_activity()).unwrap();
        let mut service = LogService::new(registry, store).with_dispatcher(Dispatcher::start(env, 2));
        if let Some(max) = opts.max_body {
            service = service.with_limits(learnlog_core::model::Limits {
                max_blob_bytes: max,
                max_event_bytes: max,
            });
        }

        let clock = Arc::new(AtomicI64::new(t0().millis()));
        let mut state = AppState::new(Arc::new(service), IdentityVerifier::new(IDENTITY_SECRET), BASE_URL);
        let c = clock.clone();
        state.clock = Arc::new(move || Timestamp::from_millis(c.load(Ordering::SeqCst)).unwrap());
        state.rate = RateLimiter::new(opts.rate);
        if opts.console {
            let console = dir.path().join("console");
            std::fs::create_dir_all(&console).unwrap();
            std::fs::write(
                console.join("index.html"),
                "<!doctype html><title>learnlog console</title>",
            )
            .unwrap();
            std::fs::write(console.join("app.js"), "console.log('hi')").unwrap();
            state.console_dir = Some(console);
        }
        let state = Arc::new(state);
        TestApp {
            router: router(state.clone()),
            state,
            clock,
            outbox,
            dir,
        }
    }

    pub fn now(&self) -> Timestamp {
        Timestamp::from_millis(self.clock.load(Ordering::SeqCst)).unwrap()
    }

    pub fn advance(&self, millis: i64) {
        self.clock.fetch_add(millis, Ordering::SeqCst);
    }

    pub fn journal_bytes(&self) -> Vec<u8> {
        std::fs::read(self.dir.path().join("events.journal")).unwrap_or_default()
    }

    pub fn wait_idle(&self) {
        if let Some(d) = self.state.service.dispatcher() {
            assert!(d.wait_idle(Duration::from_secs(20)), "trigger queue did not drain");
        }
    }

    pub async fn send(&self, req: Request<Body>) -> Response {
        call(&self.router, req).await
    }

    pub async fn get(&self, uri: &str, bearer: Option<&str>) -> Response {
        get(&self.router, uri, bearer).await
    }

    pub async fn post_launch(&self, req: &LaunchRequest) -> Response {
        let form = launch_form(req);
        self.send(
            Request::post(format!("/activities/{}/sessions", req.activity_id))
                .header("content-type", "application/x-www-form-urlencoded")
                .body(Body::from(form))
                .unwrap(),
        )
        .await
    }

    pub async fn post_event(&self, session_id: &str, body: impl Into<Vec<u8>>) -> Response {
        self.send(
            Request::post(format!("/sessions/{session_id}/events"))
                .header("content-type", "application/xml")
                .body(Body::from(body.into()))
                .unwrap(),
        )
        .await
    }

    pub async fn post_envelope(&self, session_id: &str, env: &EventEnvelope) -> Response {
        self.post_event(session_id, codec::encode(env)).await
    }

    /// Launches a fresh session for `user_ref` at the current clock.
    pub async fn start_session(&self, user_ref: &str, opt_out: bool, nonce: &str) -> Launched {
        let req = signed_launch(&activity_config(), user_ref, self.now(), nonce, ORIGIN, opt_out);
        let resp = self.post_launch(&req).await;
        assert_eq!(resp.status, StatusCode::CREATED, "{}", resp.text());
        let v = resp.json();
        Launched {
            session_id: v["session_id"].as_str().unwrap().to_owned(),
            token: v["session_token"].as_str().unwrap().to_owned(),
            pseudonym: v["pseudonym"].as_str().unwrap().to_owned(),
        }
    }
}

/// A router over an existing service, with the clock fixed at `now`.
pub fn router_over(service: Arc<LogService>, now: Timestamp) -> Router {
    let mut state = AppState::new(service, IdentityVerifier::new(IDENTITY_SECRET), BASE_URL);
    state.clock = Arc::new(move || now);
    router(Arc::new(state))
}

pub async fn call(router: &Router, req: Request<Body>) -> Response {
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_owned();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Response {
        status,
        content_type,
        body,
    }
}

pub async fn get(router: &Router, uri: &str, bearer: Option<&str>) -> Response {
    let mut req = Request::get(uri);
    if let Some(token) = bearer {
        req = req.header("authorization", format!("Bearer {token}"));
    }
    call(router, req.body(Body::empty()).unwrap()).await
}

pub struct Launched {
    pub session_id: String,
    pub token: String,
    pub pseudonym: String,
}

pub struct Response {
    pub status: StatusCode,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text()))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub fn teacher_token() -> String {
    token_for(TEACHER)
}

pub fn token_for(principal: &str) -> String {
    let expires = Timestamp::parse_iso("2099-01-01T00:00:00Z").unwrap();
    IdentityVerifier::new(IDENTITY_SECRET).issue(principal, expires)
}

pub fn signed_launch(
    cfg: &ActivityConfig,
    user_ref: &str,
    issued_at: Timestamp,
    nonce: &str,
    origin: &str,
    opt_out: bool,
) -> LaunchRequest {
    let mut req = LaunchRequest {
        activity_id: cfg.activity_id.clone(),
        user_ref: user_ref.into(),
        issued_at,
        nonce: nonce.into(),
        origin: origin.into(),
        opt_out,
        signature: String::new(),
    };
    req.sign(&cfg.application_key);
    req
}

pub fn launch_form(req: &LaunchRequest) -> String {
    fn enc(s: &str) -> String {
        s.bytes()
            .map(|b| match b {
                b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
                _ => format!("%{b:02X}"),
            })
            .collect()
    }
    format!(
        "user_ref={}&issued_at={}&nonce={}&origin={}&opt_out={}&signature={}",
        enc(&req.user_ref),
        enc(&req.issued_at.to_iso()),
        enc(&req.nonce),
        enc(&req.origin),
        req.opt_out,
        enc(&req.signature)
    )
}

pub fn nonce(n: u64) -> String {
    format!("{n:032x}")
}

pub fn action(ts: Timestamp, name: &str) -> EventEnvelope {
    EventEnvelope::new("action", ts)
        .with_exercise("ex1")
        .with_field("action_name", name)
}

pub fn help_request(ts: Timestamp, question: &str, email: &str) -> EventEnvelope {
    EventEnvelope::new("helprequest", ts)
        .with_exercise("ex2")
        .with_field("question_text", question)
        .with_field("learner_email", email)
}
