//! Wiring a [`ServiceConfig`] into a running service.

use std::sync::Arc;

use anyhow::Context;
use learnlog_core::auth::IdentityVerifier;
use learnlog_core::model::Limits;
use learnlog_core::trigger::{Dispatcher, FileOutbox, MailGateway, SmtpGateway, TriggerEnv};
use learnlog_core::{ActivityRegistry, EventStore, LogService};

use crate::config::{MailMode, ServiceConfig};
use crate::http::{AppState, RateLimiter};

pub fn open_store(cfg: &ServiceConfig) -> anyhow::Result<Arc<EventStore>> {
    Ok(Arc::new(match &cfg.data_path {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            EventStore::open(path).with_context(|| format!("opening journal {}", path.display()))?
        }
        None => EventStore::in_memory(),
    }))
}

pub fn mail_gateway(mode: &MailMode) -> anyhow::Result<Arc<dyn MailGateway>> {
    Ok(match mode {
        MailMode::Outbox { dir } => {
            Arc::new(FileOutbox::new(dir).with_context(|| format!("creating outbox {}", dir.display()))?)
        }
        MailMode::Smtp { .. } => {
            let settings = mode.smtp_settings().expect("smtp mode");
            Arc::new(SmtpGateway::new(&settings).map_err(|e| anyhow::anyhow!(e))?)
        }
    })
}

pub fn build_state(cfg: &ServiceConfig) -> anyhow::Result<AppState> {
    let activities = ActivityRegistry::load_dir(&cfg.config_dir)
        .with_context(|| format!("loading activities from {}", cfg.config_dir.display()))?;
    let store = open_store(cfg)?;
    let mut env = TriggerEnv::new(cfg.base_url(), mail_gateway(&cfg.mail)?, store.clone());
    if let Some(dir) = &cfg.dead_letter_dir {
        env.dead_letter = Some(FileOutbox::new(dir).with_context(|| format!("creating {}", dir.display()))?);
    }
    let limits = Limits {
        max_blob_bytes: cfg.limits.max_blob_bytes,
        max_event_bytes: cfg.limits.max_body_bytes,
    };
    let service = LogService::new(activities, store)
        .with_limits(limits)
        .with_dispatcher(Dispatcher::start(env, cfg.trigger_workers));
    let mut state = AppState::new(
        Arc::new(service),
        IdentityVerifier::new(&cfg.identity_secret),
        cfg.base_url(),
    );
    state.console_dir = cfg.console_dir.clone();
    state.rate = RateLimiter::new(cfg.limits.events_per_second);
    Ok(state)
}
