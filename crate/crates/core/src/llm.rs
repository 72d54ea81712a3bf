//! LLM access: request types, prompt rendering, response parsing, and the
//! client implementations (live HTTP, fixture, deterministic mocks).
//!
//! Clients return raw completion text. Parsing (and the single retry on a
//! parse failure) lives with the callers in `hierarchy` and `detector`, so
//! every mode goes through the same parser.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::TemplateId;
use crate::kb::ScopeKey;
use crate::Label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("LLM unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub template_id: TemplateId,
    pub text: String,
}

/// Everything the verifier sees about one unknown execution unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub key: ScopeKey,
    pub scope_description: String,
    /// `<parent> → <node sequence>` form of the unit under test.
    pub rendered: String,
    /// Rendered normal units from the same scope, most frequent first.
    pub examples: Vec<String>,
    /// Template texts of the covered log rows.
    pub segment_templates: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub extract: usize,
    pub verify: usize,
}

pub trait LlmClient: Send + Sync {
    fn extract(&self, request: &ExtractRequest) -> Result<String, LlmError>;
    fn verify(&self, request: &VerifyRequest) -> Result<String, LlmError>;
    fn counts(&self) -> CallCounts;
}

#[derive(Debug, Default)]
struct Counters {
    extract: AtomicUsize,
    verify: AtomicUsize,
}

impl Counters {
    fn snapshot(&self) -> CallCounts {
        CallCounts { extract: self.extract.load(Ordering::Relaxed), verify: self.verify.load(Ordering::Relaxed) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: String) -> Self {
        Self { role: role.to_string(), content }
    }
}

pub fn extraction_prompt(request: &ExtractRequest) -> Vec<ChatMessage> {
    let system = "You label log templates for a semantic hierarchy. Every template describes a status \
                  of an action performed on an entity. The entity is the system component, the action \
                  is the operation applied to it, and the status is the outcome or phase of that \
                  operation. Answer with exactly one fenced block containing three lines: \
                  `entity: <word>`, `action: <word>`, `status: <word>`. Use short lowercase words; \
                  join multi-word values with underscores."
        .to_string();
    let user = format!(
        "Template id: {}\nTemplate: {}\n\nExample:\nTemplate: Open session started\n```\nentity: session\naction: open\nstatus: started\n```",
        request.template_id, request.text
    );
    vec![ChatMessage::new("system", system), ChatMessage::new("user", user)]
}

pub fn verification_prompt(request: &VerifyRequest) -> Vec<ChatMessage> {
    let system = "You verify execution segments extracted from system logs. A segment is written as \
                  `<parent> → <node sequence>`. Compare the test segment with normal segments from \
                  the same scope and decide whether it is anomalous. Reply with a first line \
                  `VERDICT: NORMAL` or `VERDICT: ANOMALY`, then a line starting with `EXPLANATION:` \
                  giving a short reason."
        .to_string();
    let mut user = format!("Scope: {}\n", request.scope_description);
    if request.examples.is_empty() {
        user.push_str("Normal examples: none available for this scope.\n");
    } else {
        user.push_str("Normal examples:\n");
        for (i, ex) in request.examples.iter().enumerate() {
            user.push_str(&format!("  {}. {}\n", i + 1, ex));
        }
    }
    user.push_str(&format!("Test segment: {}\n", request.rendered));
    if !request.segment_templates.is_empty() {
        user.push_str("Covered log templates:\n");
        for t in &request.segment_templates {
            user.push_str(&format!("  - {t}\n"));
        }
    }
    vec![ChatMessage::new("system", system), ChatMessage::new("user", user)]
}

/// Reads `entity:`, `action:` and `status:` lines, preferring the first fenced
/// block when one exists.
pub fn parse_triple(raw: &str) -> Option<(String, String, String)> {
    let body = fenced_body(raw).unwrap_or(raw);
    let mut fields: [Option<String>; 3] = [None, None, None];
    for line in body.lines() {
        let Some((k, v)) = line.split_once(':') else { continue };
        let k = k.trim().trim_matches(|c| c == '-' || c == '*' || c == '"').trim().to_ascii_lowercase();
        let v = v.trim().trim_matches(|c| c == '"' || c == ',' || c == '`').trim().to_string();
        let slot = match k.as_str() {
            "entity" => 0,
            "action" => 1,
            "status" => 2,
            _ => continue,
        };
        if fields[slot].is_none() && !v.is_empty() {
            fields[slot] = Some(v);
        }
    }
    let [Some(e), Some(a), Some(s)] = fields else { return None };
    Some((e, a, s))
}

fn fenced_body(raw: &str) -> Option<&str> {
    let start = raw.find("```")?;
    let after = &raw[start + 3..];
    let body_start = after.find('\n').map(|i| i + 1)?;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// Reads a `VERDICT:` line and the explanation that follows it.
pub fn parse_verdict(raw: &str) -> Option<(Label, String)> {
    let mut label = None;
    let mut explanation = Vec::new();
    let mut in_explanation = false;
    for line in raw.lines() {
        let trimmed = line.trim();
        let upper = trimmed.to_ascii_uppercase();
        if label.is_none() {
            if let Some(rest) = upper.strip_prefix("VERDICT:") {
                label = match rest.trim().trim_matches(|c: char| !c.is_ascii_alphabetic()) {
                    "NORMAL" => Some(Label::Normal),
                    "ANOMALY" | "ANOMALOUS" | "ABNORMAL" => Some(Label::Anomaly),
                    _ => return None,
                };
                continue;
            }
        }
        if upper.starts_with("EXPLANATION:") {
            in_explanation = true;
            let rest = trimmed["EXPLANATION:".len()..].trim();
            if !rest.is_empty() {
                explanation.push(rest.to_string());
            }
        } else if in_explanation && !trimmed.is_empty() {
            explanation.push(trimmed.to_string());
        }
    }
    Some((label?, explanation.join(" ")))
}

pub fn format_verdict(label: Label, explanation: &str) -> String {
    let v = match label {
        Label::Normal => "NORMAL",
        Label::Anomaly => "ANOMALY",
    };
    format!("VERDICT: {v}\nEXPLANATION: {explanation}")
}

pub fn format_triple(entity: &str, action: &str, status: &str) -> String {
    format!("```\nentity: {entity}\naction: {action}\nstatus: {status}\n```")
}

/// Offline verifier with a fixed answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockBehavior {
    AlwaysAnomaly,
    AlwaysNormal,
}

#[derive(Debug)]
pub struct MockLlm {
    behavior: MockBehavior,
    counters: Counters,
}

impl MockLlm {
    pub fn new(behavior: MockBehavior) -> Self {
        Self { behavior, counters: Counters::default() }
    }
}

pub const MOCK_ANOMALY_EXPLANATION: &str = "mock: flagged";
pub const MOCK_NORMAL_EXPLANATION: &str = "mock: consistent with normal behavior";

impl LlmClient for MockLlm {
    fn extract(&self, request: &ExtractRequest) -> Result<String, LlmError> {
        self.counters.extract.fetch_add(1, Ordering::Relaxed);
        Err(LlmError::Unavailable(format!("mock client cannot extract {}", request.template_id)))
    }

    fn verify(&self, _request: &VerifyRequest) -> Result<String, LlmError> {
        self.counters.verify.fetch_add(1, Ordering::Relaxed);
        Ok(match self.behavior {
            MockBehavior::AlwaysAnomaly => format_verdict(Label::Anomaly, MOCK_ANOMALY_EXPLANATION),
            MockBehavior::AlwaysNormal => format_verdict(Label::Normal, MOCK_NORMAL_EXPLANATION),
        })
    }

    fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }
}

/// Canned responses: triples keyed by template id, verdicts keyed by the
/// canonical scope key string.
#[derive(Debug, Default)]
pub struct FixtureLlm {
    triples: HashMap<TemplateId, (String, String, String)>,
    verdicts: HashMap<String, (Label, String)>,
    counters: Counters,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("malformed fixture record at line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("duplicate fixture record for {0}")]
    Duplicate(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn fixture_csv_error(e: csv::Error) -> FixtureError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FixtureError::Io(io),
        kind => FixtureError::Malformed { line, reason: format!("{kind:?}") },
    }
}

impl FixtureLlm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_triple(mut self, id: impl Into<TemplateId>, entity: &str, action: &str, status: &str) -> Self {
        self.triples.insert(id.into(), (entity.into(), action.into(), status.into()));
        self
    }

    pub fn with_verdict(mut self, key: &ScopeKey, label: Label, explanation: &str) -> Self {
        self.verdicts.insert(key.canonical(), (label, explanation.into()));
        self
    }

    pub fn covers(&self, id: &TemplateId) -> bool {
        self.triples.contains_key(id)
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    /// Reads `template_id,entity,action,status` records.
    pub fn read_triples<R: Read>(mut self, reader: R) -> Result<Self, FixtureError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        for record in rdr.records() {
            let record = record.map_err(fixture_csv_error)?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 4 || record.iter().any(|f| f.trim().is_empty()) {
                return Err(FixtureError::Malformed { line, reason: "expected 4 non-empty fields".into() });
            }
            let id = TemplateId::new(record[0].trim());
            let triple = (record[1].trim().into(), record[2].trim().into(), record[3].trim().into());
            if self.triples.insert(id.clone(), triple).is_some() {
                return Err(FixtureError::Duplicate(id.0));
            }
        }
        Ok(self)
    }

    pub fn load_triples(self, path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        self.read_triples(std::fs::File::open(path)?)
    }

    /// Reads `scope_key,label,explanation` records.
    pub fn read_verdicts<R: Read>(mut self, reader: R) -> Result<Self, FixtureError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        for record in rdr.records() {
            let record = record.map_err(fixture_csv_error)?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(FixtureError::Malformed { line, reason: "expected 3 fields".into() });
            }
            let key: ScopeKey = record[0].parse().map_err(|e: String| FixtureError::Malformed { line, reason: e })?;
            let label: Label = record[1].parse().map_err(|e: String| FixtureError::Malformed { line, reason: e })?;
            let canonical = key.canonical();
            if self.verdicts.insert(canonical.clone(), (label, record[2].to_string())).is_some() {
                return Err(FixtureError::Duplicate(canonical));
            }
        }
        Ok(self)
    }

    pub fn load_verdicts(self, path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        self.read_verdicts(std::fs::File::open(path)?)
    }
}

impl LlmClient for FixtureLlm {
    fn extract(&self, request: &ExtractRequest) -> Result<String, LlmError> {
        self.counters.extract.fetch_add(1, Ordering::Relaxed);
        self.triples
            .get(&request.template_id)
            .map(|(e, a, s)| format_triple(e, a, s))
            .ok_or_else(|| LlmError::Unavailable(format!("no fixture triple for {}", request.template_id)))
    }

    fn verify(&self, request: &VerifyRequest) -> Result<String, LlmError> {
        self.counters.verify.fetch_add(1, Ordering::Relaxed);
        let key = request.key.canonical();
        self.verdicts
            .get(&key)
            .map(|(label, explanation)| format_verdict(*label, explanation))
            .ok_or_else(|| LlmError::Unavailable(format!("no fixture verdict for {key}")))
    }

    fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }
}

/// Connection settings for an OpenAI-style chat-completions endpoint.
#[derive(Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Log request and response bodies (credentials redacted).
    pub audit: bool,
    pub timeout: Duration,
}

impl std::fmt::Debug for LiveConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiveConfig")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("audit", &self.audit)
            .field("timeout", &self.timeout)
            .finish()
    }
}

pub const ENV_BASE_URL: &str = "LOGHIER_LLM_BASE_URL";
pub const ENV_MODEL: &str = "LOGHIER_LLM_MODEL";
pub const ENV_API_KEY: &str = "LOGHIER_LLM_API_KEY";
pub const ENV_AUDIT: &str = "LOGHIER_LLM_AUDIT";

impl LiveConfig {
    /// Reads the endpoint from the environment. Base URL and model are required.
    pub fn from_env() -> Result<Self, LlmError> {
        let base_url =
            std::env::var(ENV_BASE_URL).map_err(|_| LlmError::Unavailable(format!("{ENV_BASE_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL).map_err(|_| LlmError::Unavailable(format!("{ENV_MODEL} is not set")))?;
        let api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        let audit = std::env::var(ENV_AUDIT).map(|v| v == "1" || v.eq_ignore_ascii_case("true")).unwrap_or(false);
        Ok(Self { base_url, model, api_key, audit, timeout: Duration::from_secs(120) })
    }
}

pub struct LiveLlm {
    config: LiveConfig,
    agent: ureq::Agent,
    counters: Counters,
}

impl LiveLlm {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        Self { config, agent, counters: Counters::default() }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        Ok(Self::new(LiveConfig::from_env()?))
    }

    fn chat(&self, messages: Vec<ChatMessage>) -> Result<String, LlmError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": 0,
        });
        if self.config.audit {
            log::info!(target: "llm_audit", "POST {url} request={body}");
        }
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Unavailable(e.to_string()))?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| LlmError::Unavailable(e.to_string()))?;
        if self.config.audit {
            log::info!(target: "llm_audit", "response={value}");
        }
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Unavailable("response has no choices[0].message.content".into()))
    }
}

impl LlmClient for LiveLlm {
    fn extract(&self, request: &ExtractRequest) -> Result<String, LlmError> {
        self.counters.extract.fetch_add(1, Ordering::Relaxed);
        self.chat(extraction_prompt(request))
    }

    fn verify(&self, request: &VerifyRequest) -> Result<String, LlmError> {
        self.counters.verify.fetch_add(1, Ordering::Relaxed);
        self.chat(verification_prompt(request))
    }

    fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }
}

/// Stand-in used when no client is configured; every call fails.
#[derive(Debug, Default)]
pub struct NoLlm {
    counters: Counters,
}

impl LlmClient for NoLlm {
    fn extract(&self, _request: &ExtractRequest) -> Result<String, LlmError> {
        self.counters.extract.fetch_add(1, Ordering::Relaxed);
        Err(LlmError::Unavailable("no LLM configured".into()))
    }

    fn verify(&self, _request: &VerifyRequest) -> Result<String, LlmError> {
        self.counters.verify.fetch_add(1, Ordering::Relaxed);
        Err(LlmError::Unavailable("no LLM configured".into()))
    }

    fn counts(&self) -> CallCounts {
        self.counters.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Level;

    #[test]
    fn triple_parsing() {
        let raw = "Sure.\n```yaml\nentity: Session\naction: open\nstatus: started\n```\n";
        assert_eq!(parse_triple(raw), Some(("Session".into(), "open".into(), "started".into())));
        assert_eq!(
            parse_triple("- Entity: block\n- Action: \"write\"\n- Status: finished"),
            Some(("block".into(), "write".into(), "finished".into()))
        );
        assert_eq!(parse_triple("entity: block\naction: write"), None);
        assert_eq!(parse_triple("entity: block\naction: write\nstatus:   "), None);
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(
            parse_verdict("VERDICT: ANOMALY\nEXPLANATION: write failed\nafter start"),
            Some((Label::Anomaly, "write failed after start".into()))
        );
        assert_eq!(parse_verdict("verdict: normal\nexplanation: ok"), Some((Label::Normal, "ok".into())));
        assert_eq!(parse_verdict("**VERDICT: NORMAL**"), None);
        assert_eq!(parse_verdict("VERDICT: maybe"), None);
        assert_eq!(parse_verdict("no verdict here"), None);
        let round = format_verdict(Label::Anomaly, MOCK_ANOMALY_EXPLANATION);
        assert_eq!(parse_verdict(&round), Some((Label::Anomaly, MOCK_ANOMALY_EXPLANATION.into())));
    }

    fn request() -> VerifyRequest {
        VerifyRequest {
            key: ScopeKey::new(Level::Status, ["root", "session", "open"], ["started"]),
            scope_description: "statuses of action open".into(),
            rendered: "open → started".into(),
            examples: vec![],
            segment_templates: vec!["Open session started".into()],
        }
    }

    #[test]
    fn mocks_count_calls() {
        let m = MockLlm::new(MockBehavior::AlwaysAnomaly);
        let raw = m.verify(&request()).unwrap();
        assert_eq!(parse_verdict(&raw).unwrap().0, Label::Anomaly);
        assert_eq!(m.counts(), CallCounts { extract: 0, verify: 1 });
        let n = MockLlm::new(MockBehavior::AlwaysNormal);
        assert_eq!(parse_verdict(&n.verify(&request()).unwrap()).unwrap().0, Label::Normal);
    }

    #[test]
    fn fixture_lookup() {
        let req = request();
        let f = FixtureLlm::new().with_triple("E1", "session", "open", "started").with_verdict(
            &req.key,
            Label::Anomaly,
            "canned",
        );
        let raw = f.extract(&ExtractRequest { template_id: "E1".into(), text: "x".into() }).unwrap();
        assert_eq!(parse_triple(&raw), Some(("session".into(), "open".into(), "started".into())));
        assert_eq!(parse_verdict(&f.verify(&req).unwrap()), Some((Label::Anomaly, "canned".into())));
        assert!(f.extract(&ExtractRequest { template_id: "E2".into(), text: "x".into() }).is_err());
        assert_eq!(f.counts(), CallCounts { extract: 2, verify: 1 });
    }

    #[test]
    fn fixture_files() {
        let f = FixtureLlm::new()
            .read_triples("template_id,entity,action,status\nE1,session,open,started\n".as_bytes())
            .unwrap()
            .read_verdicts(
                "scope_key,label,explanation\n\"S|root/session/open|started\",Anomaly,\"missing success, retry\"\n"
                    .as_bytes(),
            )
            .unwrap();
        assert!(f.covers(&"E1".into()));
        assert_eq!(parse_verdict(&f.verify(&request()).unwrap()).unwrap().1, "missing success, retry");
        let dup = FixtureLlm::new().read_triples("h,e,a,s\nE1,a,b,c\nE1,a,b,c\n".as_bytes());
        assert!(matches!(dup, Err(FixtureError::Duplicate(_))));
    }

    #[test]
    fn prompt_mentions_missing_examples() {
        let msgs = verification_prompt(&request());
        assert!(msgs[1].content.contains("none available"));
        assert!(msgs[1].content.contains("open → started"));
        let mut req = request();
        req.examples = vec!["open → started succeeded".into()];
        assert!(verification_prompt(&req)[1].content.contains("1. open → started succeeded"));
    }

    #[test]
    fn live_config_debug_redacts_key() {
        let cfg = LiveConfig {
            base_url: "http://x".into(),
            model: "m".into(),
            api_key: Some("secret".into()),
            audit: true,
            timeout: Duration::from_secs(1),
        };
        assert!(!format!("{cfg:?}").contains("secret"));
    }

    #[test]
    fn live_client_unreachable_is_unavailable() {
        let llm = LiveLlm::new(LiveConfig {
            base_url: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key: None,
            audit: false,
            timeout: Duration::from_secs(2),
        });
        assert!(matches!(llm.verify(&request()), Err(LlmError::Unavailable(_))));
        assert_eq!(llm.counts().verify, 1);
    }
}
