//! Replays a load-generator plan against a running server.

use std::collections::HashSet;
use std::time::Duration;

use anyhow::{bail, Context};
use learnlog_core::codec;
use learnlog_core::loadgen::{launch_request, LoadgenSummary, Plan};
use learnlog_core::{ActivityConfig, Timestamp};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct Launched {
    session_id: String,
}

pub fn drive_http(plan: &Plan, cfg: &ActivityConfig, base_url: &str) -> anyhow::Result<LoadgenSummary> {
    let base = base_url.trim_end_matches('/');
    let client = Client::builder().timeout(Duration::from_secs(30)).build()?;
    let mut summary = LoadgenSummary::default();
    let mut users = HashSet::new();
    for planned in &plan.sessions {
        // Launch freshness is checked against the server clock.
        let mut fresh = planned.clone();
        fresh.started_at = Timestamp::now();
        let req = launch_request(&fresh, cfg);
        let opt_out = if req.opt_out { "true" } else { "false" };
        let issued_at = req.issued_at.to_iso();
        let form = [
            ("user_ref", req.user_ref.as_str()),
            ("issued_at", issued_at.as_str()),
            ("nonce", req.nonce.as_str()),
            ("origin", req.origin.as_str()),
            ("opt_out", opt_out),
            ("signature", req.signature.as_str()),
        ];
        let resp = client
            .post(format!("{base}/activities/{}/sessions", cfg.activity_id))
            .form(&form)
            .send()
            .context("launch request")?;
        if resp.status() != StatusCode::CREATED {
            bail!("launch rejected: {} {}", resp.status(), resp.text().unwrap_or_default());
        }
        let launched: Launched = resp.json()?;
        if planned.opt_out {
            summary.opt_out_sessions += 1;
        } else {
            summary.sessions += 1;
            users.insert(planned.user_ref.as_str());
        }
        let url = format!("{base}/sessions/{}/events", launched.session_id);
        for env in &planned.events {
            let body = codec::encode(env);
            let mut backoff = Duration::from_millis(20);
            loop {
                let resp = client
                    .post(&url)
                    .header("content-type", "application/xml")
                    .body(body.clone())
                    .send()
                    .context("event post")?;
                match resp.status() {
                    StatusCode::CREATED => {
                        summary.events += 1;
                        if env.event_type == "helprequest" {
                            summary.help_requests += 1;
                        }
                    }
                    StatusCode::NO_CONTENT => summary.discarded_events += 1,
                    StatusCode::TOO_MANY_REQUESTS => {
                        std::thread::sleep(backoff);
                        backoff = (backoff * 2).min(Duration::from_secs(1));
                        continue;
                    }
                    other => bail!("event rejected: {other} {}", resp.text().unwrap_or_default()),
                }
                break;
            }
        }
    }
    summary.users = users.len();
    Ok(summary)
}
