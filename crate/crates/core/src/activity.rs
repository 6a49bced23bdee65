//! Activity registration: one learning tool in one course.
//!
//! Activities are loaded from XML files at startup and are immutable after.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use roxmltree::{Document, Node};

use crate::model::is_valid_pattern;
use crate::trigger::{TriggerBinding, TriggerKind};

pub const APPLICATION_KEY_LEN: usize = 32;
pub const PSEUDONYM_SALT_LEN: usize = 16;

#[derive(Clone, PartialEq, Eq)]
pub struct ActivityConfig {
    pub activity_id: String,
    pub course_label: String,
    pub application_key: Vec<u8>,
    /// Normalized origins (`scheme://host[:port]`).
    pub host_whitelist: Vec<String>,
    pub pseudonym_salt: Vec<u8>,
    pub teacher_principals: Vec<String>,
    pub trigger_bindings: Vec<TriggerBinding>,
    /// Column order for the exercise table; unseen exercises follow alphabetically.
    pub exercise_order: Vec<String>,
}

impl fmt::Debug for ActivityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ActivityConfig")
            .field("activity_id", &self.activity_id)
            .field("course_label", &self.course_label)
            .field("application_key", &"[REDACTED]")
            .field("host_whitelist", &self.host_whitelist)
            .field("pseudonym_salt", &"[REDACTED]")
            .field("teacher_principals", &self.teacher_principals)
            .field("trigger_bindings", &self.trigger_bindings)
            .field("exercise_order", &self.exercise_order)
            .finish()
    }
}

impl ActivityConfig {
    pub fn is_teacher(&self, principal: &str) -> bool {
        self.teacher_principals
            .iter()
            .any(|t| t.eq_ignore_ascii_case(principal))
    }

    pub fn origin_allowed(&self, origin: &str) -> bool {
        normalize_origin(origin).is_some_and(|o| self.host_whitelist.iter().any(|w| *w == o))
    }

    /// Default recipient for send-mail triggers.
    pub fn first_teacher(&self) -> Option<&str> {
        self.teacher_principals.first().map(String::as_str)
    }

    pub fn check(&self) -> Result<(), String> {
        if !is_valid_activity_id(&self.activity_id) {
            return Err(format!("activity id {:?} is not a valid identifier", self.activity_id));
        }
        if self.application_key.len() != APPLICATION_KEY_LEN {
            return Err(format!("applicationKey must be {APPLICATION_KEY_LEN} bytes"));
        }
        if self.pseudonym_salt.len() != PSEUDONYM_SALT_LEN {
            return Err(format!("pseudonymSalt must be {PSEUDONYM_SALT_LEN} bytes"));
        }
        if self.host_whitelist.is_empty() {
            return Err("whitelist must name at least one host".into());
        }
        for b in &self.trigger_bindings {
            if !is_valid_pattern(&b.event_type_pattern) {
                return Err(format!("trigger pattern {:?} is invalid", b.event_type_pattern));
            }
        }
        Ok(())
    }

    /// Parses one `<activity>` document.
    pub fn from_xml(text: &str) -> Result<Self, XmlConfigError> {
        let doc = Document::parse(text).map_err(|e| XmlConfigError {
            line: e.pos().row,
            message: e.to_string(),
        })?;
        let root = doc.root_element();
        let err = |node: Node<'_, '_>, message: String| XmlConfigError {
            line: doc.text_pos_at(node.range().start).row,
            message,
        };
        if root.tag_name().name() != "activity" {
            return Err(err(root, "root element must be <activity>".into()));
        }
        let activity_id = root
            .attribute("id")
            .ok_or_else(|| err(root, "<activity> lacks an id attribute".into()))?
            .to_owned();

        let mut cfg = ActivityConfig {
            activity_id: activity_id.clone(),
            course_label: String::new(),
            application_key: Vec::new(),
            host_whitelist: Vec::new(),
            pseudonym_salt: Vec::new(),
            teacher_principals: Vec::new(),
            trigger_bindings: Vec::new(),
            exercise_order: Vec::new(),
        };

        for child in root.children().filter(Node::is_element) {
            match child.tag_name().name() {
                "course" => cfg.course_label = text_of(child).trim().to_owned(),
                "applicationKey" => {
                    cfg.application_key = hex_of(child).map_err(|m| err(child, m))?;
                }
                "pseudonymSalt" => {
                    cfg.pseudonym_salt = hex_of(child).map_err(|m| err(child, m))?;
                }
                "whitelist" => {
                    for host in elements(child, "host").map_err(|m| err(child, m))? {
                        let raw = text_of(host);
                        let origin = normalize_origin(raw.trim()).ok_or_else(|| {
                            err(
                                host,
                                format!("{:?} is not an origin (scheme://host[:port])", raw.trim()),
                            )
                        })?;
                        cfg.host_whitelist.push(origin);
                    }
                }
                "teachers" => {
                    for email in elements(child, "email").map_err(|m| err(child, m))? {
                        let email_text = text_of(email).trim().to_owned();
                        if !email_text.contains('@') {
                            return Err(err(email, format!("{email_text:?} is not an email address")));
                        }
                        cfg.teacher_principals.push(email_text);
                    }
                }
                "triggers" => {
                    for trigger in elements(child, "trigger").map_err(|m| err(child, m))? {
                        let binding = parse_trigger(trigger, &activity_id, cfg.trigger_bindings.len())
                            .map_err(|m| err(trigger, m))?;
                        cfg.trigger_bindings.push(binding);
                    }
                }
                "exercises" => {
                    for ex in elements(child, "exercise").map_err(|m| err(child, m))? {
                        let name = ex
                            .attribute("name")
                            .ok_or_else(|| err(ex, "<exercise> lacks a name attribute".into()))?;
                        cfg.exercise_order.push(name.to_owned());
                    }
                }
                other => return Err(err(child, format!("unexpected element <{other}>"))),
            }
        }
        cfg.check().map_err(|m| err(root, m))?;
        Ok(cfg)
    }
}

fn parse_trigger(node: Node<'_, '_>, activity_id: &str, id: usize) -> Result<TriggerBinding, String> {
    let pattern = node.attribute("on").ok_or("<trigger> lacks an on attribute")?;
    if !is_valid_pattern(pattern) {
        return Err(format!("trigger pattern {pattern:?} is invalid"));
    }
    let kind = match node.attribute("kind") {
        Some("sendMail") => TriggerKind::SendMail,
        Some(other) => return Err(format!("unknown trigger kind {other:?}")),
        None => return Err("<trigger> lacks a kind attribute".into()),
    };
    let params = node
        .attributes()
        .filter(|a| a.name() != "on" && a.name() != "kind")
        .map(|a| (a.name().to_owned(), a.value().to_owned()))
        .collect();
    Ok(TriggerBinding {
        id,
        activity_id: activity_id.to_owned(),
        event_type_pattern: pattern.to_owned(),
        kind,
        params,
    })
}

fn elements<'a, 'i>(parent: Node<'a, 'i>, name: &str) -> Result<Vec<Node<'a, 'i>>, String> {
    parent
        .children()
        .filter(Node::is_element)
        .map(|n| {
            if n.tag_name().name() == name {
                Ok(n)
            } else {
                Err(format!(
                    "unexpected <{}> inside <{}>",
                    n.tag_name().name(),
                    parent.tag_name().name()
                ))
            }
        })
        .collect()
}

fn text_of(node: Node<'_, '_>) -> String {
    node.children().filter_map(|c| c.text()).collect()
}

/// Secret given either as a `hex` attribute or as hex text content.
fn hex_of(node: Node<'_, '_>) -> Result<Vec<u8>, String> {
    let raw = node
        .attribute("hex")
        .map(str::to_owned)
        .unwrap_or_else(|| text_of(node));
    hex::decode(raw.trim()).map_err(|e| format!("<{}> is not valid hex: {e}", node.tag_name().name()))
}

/// `scheme://host[:port]`, lowercased, default ports dropped, no path.
/// ASCII letters, digits, `-`, `_` and `.`, starting alphanumeric; at most
/// 64 characters, so ids are safe as URL path segments and file names.
pub fn is_valid_activity_id(id: &str) -> bool {
    id.len() <= 64
        && id.starts_with(|c: char| c.is_ascii_alphanumeric())
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

pub fn normalize_origin(origin: &str) -> Option<String> {
    let (scheme, rest) = origin.split_once("://")?;
    let scheme = scheme.to_ascii_lowercase();
    let rest = rest.strip_suffix('/').unwrap_or(rest);
    if rest.is_empty() || rest.contains(['/', '?', '#', '@']) {
        return None;
    }
    let rest = rest.to_ascii_lowercase();
    let (host, port) = match rest.rsplit_once(':') {
        Some((h, p)) if !h.ends_with(']') || rest.starts_with('[') => {
            if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            (h.to_owned(), Some(p.parse::<u16>().ok()?))
        }
        _ => (rest.clone(), None),
    };
    if host.is_empty() || !matches!(scheme.as_str(), "http" | "https") {
        return None;
    }
    let default = if scheme == "https" { 443 } else { 80 };
    Some(match port {
        Some(p) if p != default => format!("{scheme}://{host}:{p}"),
        _ => format!("{scheme}://{host}"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct XmlConfigError {
    pub line: u32,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: XmlConfigError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: activity {id:?} is already registered", path.display())]
    Duplicate { path: PathBuf, id: String },
    #[error("no activity configuration found in {}", .0.display())]
    Empty(PathBuf),
}

/// All registered activities, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ActivityRegistry {
    activities: BTreeMap<String, Arc<ActivityConfig>>,
}

impl ActivityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, cfg: ActivityConfig) -> Result<(), String> {
        if self.activities.contains_key(&cfg.activity_id) {
            return Err(format!("activity {:?} is already registered", cfg.activity_id));
        }
        self.activities.insert(cfg.activity_id.clone(), Arc::new(cfg));
        Ok(())
    }

    pub fn get(&self, activity_id: &str) -> Option<&Arc<ActivityConfig>> {
        self.activities.get(activity_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<ActivityConfig>> {
        self.activities.values()
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    /// Loads every `*.xml` file in `dir` (sorted by name). At least one is required.
    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RegistryError::Io { path, source }
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xml"))
            .collect();
        paths.sort();
        let mut registry = ActivityRegistry::new();
        for path in paths {
            let text = std::fs::read_to_string(&path).map_err(io(&path))?;
            let cfg = ActivityConfig::from_xml(&text).map_err(|source| RegistryError::Parse {
                path: path.clone(),
                source,
            })?;
            let id = cfg.activity_id.clone();
            registry
                .insert(cfg)
                .map_err(|_| RegistryError::Duplicate { path: path.clone(), id })?;
        }
        if registry.is_empty() {
            return Err(RegistryError::Empty(dir.to_path_buf()));
        }
        Ok(registry)
    }
}

#[cfg(test)]
pub(crate) fn test_config() -> ActivityConfig {
    ActivityConfig::from_xml(TEST_ACTIVITY_XML).expect("test activity parses")
}

#[cfg(test)]
pub(crate) const TEST_ACTIVITY_XML: &str = r#"<activity id="squiggle-ws12">
  <course>Functions and relations, winter term</course>
  <applicationKey hex="404142434445464748494a4b4c4d4e4f505152535455565758595a5b5c5d5e5f"/>
  <pseudonymSalt>000102030405060708090a0b0c0d0e0f</pseudonymSalt>
  <whitelist>
    <host>https://lms.example.edu</host>
    <host>http://localhost:8080</host>
  </whitelist>
  <teachers><email>tutor@uni.example</email><email>prof@uni.example</email></teachers>
  <triggers><trigger on="helprequest" kind="sendMail"/></triggers>
  <exercises><exercise name="ex1"/><exercise name="ex2"/></exercises>
</activity>
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_document() {
        let cfg = test_config();
        assert_eq!(cfg.activity_id, "squiggle-ws12");
        assert_eq!(cfg.application_key, (0x40u8..0x60).collect::<Vec<_>>());
        assert_eq!(cfg.pseudonym_salt, (0u8..16).collect::<Vec<_>>());
        assert_eq!(cfg.host_whitelist, ["https://lms.example.edu", "http://localhost:8080"]);
        assert_eq!(cfg.first_teacher(), Some("tutor@uni.example"));
        assert_eq!(cfg.trigger_bindings.len(), 1);
        assert_eq!(cfg.trigger_bindings[0].event_type_pattern, "helprequest");
        assert_eq!(cfg.exercise_order, ["ex1", "ex2"]);
        assert!(!format!("{cfg:?}").contains("404142"));
    }

    #[test]
    fn origins() {
        let cfg = test_config();
        assert!(cfg.origin_allowed("https://lms.example.edu"));
        assert!(cfg.origin_allowed("HTTPS://LMS.example.edu:443/"));
        assert!(cfg.origin_allowed("http://localhost:8080"));
        assert!(!cfg.origin_allowed("http://localhost"));
        assert!(!cfg.origin_allowed("https://lms.example.edu.evil.com"));
        assert!(!cfg.origin_allowed("https://lms.example.edu/path"));
        assert_eq!(
            normalize_origin("https://[::1]:8443"),
            Some("https://[::1]:8443".into())
        );
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let bad = TEST_ACTIVITY_XML.replace("<host>http://localhost:8080</host>", "<host>localhost</host>");
        let err = ActivityConfig::from_xml(&bad).unwrap_err();
        assert_eq!(err.line, 7, "{err}");

        let short_key = TEST_ACTIVITY_XML.replace("5c5d5e5f\"", "\"");
        assert!(ActivityConfig::from_xml(&short_key)
            .unwrap_err()
            .message
            .contains("32 bytes"));

        let mismatched = "<activity id=\"a\">\n<course>x</course>\n<whitelist></teachers>\n</activity>";
        assert_eq!(ActivityConfig::from_xml(mismatched).unwrap_err().line, 3);

        let bad_trigger = TEST_ACTIVITY_XML.replace("kind=\"sendMail\"", "kind=\"webhook\"");
        let err = ActivityConfig::from_xml(&bad_trigger).unwrap_err();
        assert_eq!(err.line, 10);
    }

    #[test]
    fn load_dir_requires_one_config_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ActivityRegistry::load_dir(dir.path()),
            Err(RegistryError::Empty(_))
        ));
        std::fs::write(dir.path().join("a.xml"), TEST_ACTIVITY_XML).unwrap();
        assert_eq!(ActivityRegistry::load_dir(dir.path()).unwrap().len(), 1);
        std::fs::write(dir.path().join("b.xml"), TEST_ACTIVITY_XML).unwrap();
        assert!(matches!(
            ActivityRegistry::load_dir(dir.path()),
            Err(RegistryError::Duplicate { .. })
        ));
    }
}
