//! Outbound mail: the message type, the outbox file format, and the two
//! shipped gateways.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use lettre::message::header::ContentType;
use lettre::message::{Attachment, Mailbox, MultiPart, SinglePart};
use lettre::transport::smtp::authentication::Credentials;
use lettre::{SmtpTransport, Transport};

use crate::ids::SessionId;

#[derive(Debug, Clone, PartialEq)]
pub struct MailAttachment {
    pub filename: String,
    pub media_type: String,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NotificationMessage {
    pub activity_id: String,
    pub session_id: SessionId,
    pub seq: u64,
    pub binding_id: usize,
    pub to: String,
    pub reply_to: Option<String>,
    pub subject: String,
    pub body: String,
    pub attachment: Option<MailAttachment>,
}

impl NotificationMessage {
    /// Deterministic file name: one message per (event, binding).
    pub fn file_name(&self) -> String {
        format!(
            "{}-{}-{:06}-{}.eml",
            self.activity_id, self.session_id, self.seq, self.binding_id
        )
    }

    /// RFC 5322-style text as written to the outbox; see `docs/mail-outbox.md`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "To: {}", self.to);
        if let Some(reply_to) = &self.reply_to {
            let _ = writeln!(out, "Reply-To: {reply_to}");
        }
        let _ = writeln!(out, "Subject: {}", self.subject);
        let _ = writeln!(
            out,
            "X-Learnlog-Event: {}/{}/{}",
            self.activity_id, self.session_id, self.seq
        );
        out.push_str("MIME-Version: 1.0\n");
        match &self.attachment {
            None => {
                out.push_str("Content-Type: text/plain; charset=utf-8\n\n");
                out.push_str(&self.body);
            }
            Some(att) => {
                let boundary = format!("learnlog-{}-{}", self.session_id, self.seq);
                let _ = writeln!(out, "Content-Type: multipart/mixed; boundary=\"{boundary}\"\n");
                let _ = writeln!(out, "--{boundary}");
                out.push_str("Content-Type: text/plain; charset=utf-8\n\n");
                out.push_str(&self.body);
                let _ = writeln!(out, "\n--{boundary}");
                let _ = writeln!(out, "Content-Type: {}", att.media_type);
                out.push_str("Content-Transfer-Encoding: base64\n");
                let _ = writeln!(out, "Content-Disposition: attachment; filename=\"{}\"\n", att.filename);
                let encoded = BASE64.encode(&att.data);
                for chunk in encoded.as_bytes().chunks(76) {
                    out.push_str(std::str::from_utf8(chunk).expect("base64 is ASCII"));
                    out.push('\n');
                }
                let _ = write!(out, "--{boundary}--");
            }
        }
        if !out.ends_with('\n') {
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("mail gateway failure: {0}")]
pub struct GatewayError(pub String);

pub trait MailGateway: Send + Sync {
    fn send(&self, message: &NotificationMessage) -> Result<(), GatewayError>;
}

/// Writes one file per message into a directory.
#[derive(Debug, Clone)]
pub struct FileOutbox {
    dir: PathBuf,
}

impl FileOutbox {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(FileOutbox { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, message: &NotificationMessage) -> std::io::Result<PathBuf> {
        let path = self.dir.join(message.file_name());
        let tmp = self.dir.join(format!(".{}.tmp", message.file_name()));
        std::fs::write(&tmp, message.render())?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// Message files currently in the outbox, sorted by name.
    pub fn messages(&self) -> std::io::Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "eml"))
            .collect();
        files.sort();
        Ok(files)
    }
}

impl MailGateway for FileOutbox {
    fn send(&self, message: &NotificationMessage) -> Result<(), GatewayError> {
        self.write(message).map(|_| ()).map_err(|e| GatewayError(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmtpSettings {
    pub host: String,
    pub port: u16,
    pub username: Option<String>,
    pub password: Option<String>,
    pub from: String,
}

/// Plain SMTP submission to a relay. TLS is expected to be handled by the relay.
pub struct SmtpGateway {
    transport: SmtpTransport,
    from: Mailbox,
}

impl SmtpGateway {
    pub fn new(settings: &SmtpSettings) -> Result<Self, GatewayError> {
        let from: Mailbox = settings
            .from
            .parse()
            .map_err(|e| GatewayError(format!("bad sender address: {e}")))?;
        let mut builder = SmtpTransport::builder_dangerous(&settings.host).port(settings.port);
        if let (Some(user), Some(pass)) = (&settings.username, &settings.password) {
            builder = builder.credentials(Credentials::new(user.clone(), pass.clone()));
        }
        Ok(SmtpGateway {
            transport: builder.build(),
            from,
        })
    }
}

impl MailGateway for SmtpGateway {
    fn send(&self, message: &NotificationMessage) -> Result<(), GatewayError> {
        let to: Mailbox = message
            .to
            .parse()
            .map_err(|e| GatewayError(format!("bad recipient: {e}")))?;
        let mut builder = lettre::Message::builder()
            .from(self.from.clone())
            .to(to)
            .subject(message.subject.clone());
        if let Some(reply_to) = message.reply_to.as_deref().and_then(|r| r.parse::<Mailbox>().ok()) {
            builder = builder.reply_to(reply_to);
        }
        let text = SinglePart::plain(message.body.clone());
        let email = match &message.attachment {
            None => builder.singlepart(text),
            Some(att) => {
                let content_type = ContentType::parse(&att.media_type)
                    .unwrap_or(ContentType::parse("application/octet-stream").expect("static type"));
                builder.multipart(
                    MultiPart::mixed()
                        .singlepart(text)
                        .singlepart(Attachment::new(att.filename.clone()).body(att.data.clone(), content_type)),
                )
            }
        }
        .map_err(|e| GatewayError(e.to_string()))?;
        self.transport
            .send(&email)
            .map(|_| ())
            .map_err(|e| GatewayError(e.to_string()))
    }
}
