//! Service configuration: a TOML file with `LEARNLOG_*` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use learnlog_core::trigger::SmtpSettings;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MailMode {
    /// One `.eml` file per notification in `dir`.
    Outbox { dir: PathBuf },
    Smtp {
        host: String,
        #[serde(default = "default_smtp_port")]
        port: u16,
        username: Option<String>,
        password: Option<String>,
        from: String,
    },
}

fn default_smtp_port() -> u16 {
    25
}

impl MailMode {
    pub fn smtp_settings(&self) -> Option<SmtpSettings> {
        match self {
            MailMode::Smtp {
                host,
                port,
                username,
                password,
                from,
            } => Some(SmtpSettings {
                host: host.clone(),
                port: *port,
                username: username.clone(),
                password: password.clone(),
                from: from.clone(),
            }),
            MailMode::Outbox { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsConfig {
    pub max_body_bytes: usize,
    pub max_blob_bytes: usize,
    pub events_per_second: u32,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        let core = learnlog_core::model::Limits::default();
        LimitsConfig {
            max_body_bytes: core.max_event_bytes,
            max_blob_bytes: core.max_blob_bytes,
            events_per_second: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Absolute URL under which this service is reachable; used in mail links.
    pub base_url: String,
    /// Directory of activity XML files.
    pub config_dir: PathBuf,
    /// Journal file; absent means an in-memory store.
    pub data_path: Option<PathBuf>,
    pub identity_secret: String,
    pub mail: MailMode,
    pub dead_letter_dir: Option<PathBuf>,
    /// Built console assets served at `/`.
    pub console_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub trigger_workers: usize,
    #[serde(default)]
    pub limits: LimitsConfig,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().expect("static address")
}

fn default_workers() -> usize {
    2
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|message| ConfigError::Parse {
            path: path.to_owned(),
            message,
        })?;
        // Relative paths in the file are relative to the file.
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        cfg.apply_env(|name| std::env::var(name).ok())?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.config_dir);
        if let Some(p) = self.data_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.dead_letter_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.console_dir.as_mut() {
            fix(p);
        }
        if let MailMode::Outbox { dir } = &mut self.mail {
            fix(dir);
        }
    }

    /// Applies `LEARNLOG_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::Env {
                name: name.into(),
                message: e.to_string(),
            })
        }
        let get = |name: &str| lookup(name).filter(|v| !v.is_empty());

        if let Some(v) = get("LEARNLOG_LISTEN") {
            self.listen = parse("LEARNLOG_LISTEN", &v)?;
        }
        if let Some(v) = get("LEARNLOG_BASE_URL") {
            self.base_url = v;
        }
        if let Some(v) = get("LEARNLOG_CONFIG_DIR") {
            self.config_dir = v.into();
        }
        if let Some(v) = get("LEARNLOG_DATA_PATH") {
            self.data_path = Some(v.into());
        }
        if let Some(v) = get("LEARNLOG_IDENTITY_SECRET") {
            self.identity_secret = v;
        }
        if let Some(v) = get("LEARNLOG_DEAD_LETTER_DIR") {
            self.dead_letter_dir = Some(v.into());
        }
        if let Some(v) = get("LEARNLOG_CONSOLE_DIR") {
            self.console_dir = Some(v.into());
        }
        if let Some(v) = get("LEARNLOG_TRIGGER_WORKERS") {
            self.trigger_workers = parse("LEARNLOG_TRIGGER_WORKERS", &v)?;
        }
        if let Some(v) = get("LEARNLOG_MAX_BODY_BYTES") {
            self.limits.max_body_bytes = parse("LEARNLOG_MAX_BODY_BYTES", &v)?;
        }
        if let Some(v) = get("LEARNLOG_MAX_BLOB_BYTES") {
            self.limits.max_blob_bytes = parse("LEARNLOG_MAX_BLOB_BYTES", &v)?;
        }
        if let Some(v) = get("LEARNLOG_EVENTS_PER_SECOND") {
            self.limits.events_per_second = parse("LEARNLOG_EVENTS_PER_SECOND", &v)?;
        }

        match get("LEARNLOG_MAIL_MODE").as_deref() {
            Some("outbox") => {
                let dir = get("LEARNLOG_OUTBOX_DIR").ok_or_else(|| ConfigError::Env {
                    name: "LEARNLOG_OUTBOX_DIR".into(),
                    message: "required when LEARNLOG_MAIL_MODE=outbox".into(),
                })?;
                self.mail = MailMode::Outbox { dir: dir.into() };
            }
            Some("smtp") => {
                let host = get("LEARNLOG_SMTP_HOST").ok_or_else(|| ConfigError::Env {
                    name: "LEARNLOG_SMTP_HOST".into(),
                    message: "required when LEARNLOG_MAIL_MODE=smtp".into(),
                })?;
                let from = get("LEARNLOG_SMTP_FROM").ok_or_else(|| ConfigError::Env {
                    name: "LEARNLOG_SMTP_FROM".into(),
                    message: "required when LEARNLOG_MAIL_MODE=smtp".into(),
                })?;
                self.mail = MailMode::Smtp {
                    host,
                    port: match get("LEARNLOG_SMTP_PORT") {
                        Some(p) => parse("LEARNLOG_SMTP_PORT", &p)?,
                        None => default_smtp_port(),
                    },
                    username: None,
                    password: None,
                    from,
                };
            }
            Some(other) => {
                return Err(ConfigError::Env {
                    name: "LEARNLOG_MAIL_MODE".into(),
                    message: format!("unknown mode {other:?}"),
                })
            }
            None => {
                if let (MailMode::Outbox { dir }, Some(v)) = (&mut self.mail, get("LEARNLOG_OUTBOX_DIR")) {
                    *dir = v.into();
                }
            }
        }
        if let MailMode::Smtp {
            host,
            port,
            username,
            password,
            from,
        } = &mut self.mail
        {
            if let Some(v) = get("LEARNLOG_SMTP_HOST") {
                *host = v;
            }
            if let Some(v) = get("LEARNLOG_SMTP_PORT") {
                *port = parse("LEARNLOG_SMTP_PORT", &v)?;
            }
            if let Some(v) = get("LEARNLOG_SMTP_USERNAME") {
                *username = Some(v);
            }
            if let Some(v) = get("LEARNLOG_SMTP_PASSWORD") {
                *password = Some(v);
            }
            if let Some(v) = get("LEARNLOG_SMTP_FROM") {
                *from = v;
            }
        }
        Ok(())
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let url = &self.base_url;
        let absolute = ["http://", "https://"]
            .iter()
            .any(|s| url.strip_prefix(s).is_some_and(|rest| !rest.is_empty()));
        if !absolute {
            return Err(ConfigError::Invalid(format!(
                "base_url {url:?} must be an absolute http(s) URL"
            )));
        }
        if self.identity_secret.len() < 16 {
            return Err(ConfigError::Invalid(
                "identity_secret must be at least 16 characters".into(),
            ));
        }
        if self.limits.events_per_second == 0 {
            return Err(ConfigError::Invalid("limits.events_per_second must be positive".into()));
        }
        Ok(())
    }

    pub fn base_url(&self) -> &str {
        self.base_url.trim_end_matches('/')
    }
}
