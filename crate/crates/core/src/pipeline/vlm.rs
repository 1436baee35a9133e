//! Validator transport: prompt templates, the request/reply contract, an HTTP
//! client with bounded retries and a scripted stand-in for tests.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{CorError, Result};

pub const ENDPOINT_ENV: &str = "COR_VLM_ENDPOINT";

/// The pipeline steps that consult the validator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmStep {
    Quality,
    Distinct,
    Pair,
    Text,
    Verify,
    FalseMatch,
}

impl VlmStep {
    pub const ALL: [VlmStep; 6] =
        [VlmStep::Quality, VlmStep::Distinct, VlmStep::Pair, VlmStep::Text, VlmStep::Verify, VlmStep::FalseMatch];

    pub fn number(self) -> u8 {
        match self {
            VlmStep::Quality => 2,
            VlmStep::Distinct => 6,
            VlmStep::Pair => 7,
            VlmStep::Text => 8,
            VlmStep::Verify => 9,
            VlmStep::FalseMatch => 10,
        }
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate::new(match self {
            VlmStep::Quality => include_str!("../../prompts/step2.txt"),
            VlmStep::Distinct => include_str!("../../prompts/step6.txt"),
            VlmStep::Pair => include_str!("../../prompts/step7.txt"),
            VlmStep::Text => include_str!("../../prompts/step8.txt"),
            VlmStep::Verify => include_str!("../../prompts/step9.txt"),
            VlmStep::FalseMatch => include_str!("../../prompts/step10.txt"),
        })
    }
}

/// Text with `{name}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub text: String,
}

impl PromptTemplate {
    pub fn new(text: &str) -> Self {
        PromptTemplate { text: text.trim_end().to_string() }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else { break };
            let name = &rest[open + 1..open + close];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_') && !names.iter().any(|n| n == name) {
                names.push(name.to_string());
            }
            rest = &rest[open + close + 1..];
        }
        names
    }

    /// Every placeholder must get a slot, and every slot must be used.
    pub fn render(&self, slots: &[(&str, &str)]) -> Result<String> {
        let names = self.placeholders();
        for (k, _) in slots {
            if !names.iter().any(|n| n == k) {
                return Err(CorError::Input(format!("template has no placeholder {{{k}}}")));
            }
        }
        let mut out = self.text.clone();
        for n in &names {
            let v = slots
                .iter()
                .find(|(k, _)| k == n)
                .ok_or_else(|| CorError::Input(format!("no value for placeholder {{{n}}}")))?
                .1;
            out = out.replace(&format!("{{{n}}}"), v);
        }
        Ok(out)
    }
}

/// One validator call. `subject` names the objects involved so that logs and
/// the scripted client can refer to it.
#[derive(Clone, Debug)]
pub struct VlmRequest {
    pub step: VlmStep,
    pub subject: String,
    pub images: Vec<RgbImage>,
    pub prompt: String,
}

pub trait VlmClient: Sync {
    fn ask(&self, req: &VlmRequest) -> Result<String>;

    /// Upper bound on requests in flight.
    fn max_concurrent(&self) -> usize {
        1
    }
}

/// Replies to a yes/no prompt must be exactly `1` or `0` (surrounding
/// whitespace aside).
pub fn parse_binary(reply: &str) -> Result<bool> {
    match reply.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        _ => Err(CorError::VlmProtocol(reply.to_string())),
    }
}

/// `[(a), (b), (c)]` → `["a", "b", "c"]`
pub fn parse_changes(reply: &str) -> Result<Vec<String>> {
    let bad = |why: &str| CorError::VlmFormat(format!("{why} in {reply:?}"));
    let body = reply
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| bad("missing brackets"))?;
    let mut items = Vec::new();
    let mut rest = body.trim();
    while !rest.is_empty() {
        let inner = rest.strip_prefix('(').ok_or_else(|| bad("expected '('"))?;
        let close = inner.find(')').ok_or_else(|| bad("unclosed '('"))?;
        let item = inner[..close].trim();
        if item.is_empty() {
            return Err(bad("empty change"));
        }
        items.push(item.to_string());
        rest = inner[close + 1..].trim_start();
        if let Some(r) = rest.strip_prefix(',') {
            rest = r.trim_start();
            if rest.is_empty() {
                return Err(bad("trailing comma"));
            }
        } else if !rest.is_empty() {
            return Err(bad("expected ','"));
        }
    }
    if items.is_empty() {
        return Err(bad("no changes"));
    }
    Ok(items)
}

/// Runs the requests with at most `client.max_concurrent()` in flight and
/// returns the replies in request order.
pub fn ask_all<C: VlmClient + ?Sized>(client: &C, reqs: &[VlmRequest]) -> Vec<Result<String>> {
    let width = client.max_concurrent().max(1);
    if width == 1 {
        return reqs.iter().map(|r| client.ask(r)).collect();
    }
    let mut out = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(width) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || client.ask(r))).collect();
            for h in handles {
                out.push(h.join().unwrap_or_else(|_| Err(CorError::Input("validator worker panicked".into()))));
            }
        });
    }
    out
}

pub fn encode_png(img: &RgbImage) -> Result<String> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| CorError::Input(format!("png encoding failed: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Extra attempts after the first one.
    pub retries: usize,
    pub backoff: Duration,
    pub max_concurrent: usize,
}

impl HttpConfig {
    pub fn new(endpoint: &str) -> Self {
        HttpConfig {
            endpoint: endpoint.to_string(),
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_millis(500),
            max_concurrent: 4,
        }
    }

    pub fn from_env() -> Result<Self> {
        let ep = std::env::var(ENDPOINT_ENV)
            .map_err(|_| CorError::Input(format!("{ENDPOINT_ENV} is not set and no mock script was given")))?;
        Ok(HttpConfig::new(&ep))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    step: u8,
    subject: &'a str,
    prompt: &'a str,
    /// Base64 PNGs.
    images: Vec<String>,
}

#[derive(Deserialize)]
struct WireReply {
    text: String,
}

/// JSON over HTTP POST: `{step, subject, prompt, images}` in, `{text}` out.
/// Failed attempts back off exponentially.
pub struct HttpVlm {
    pub config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpVlm {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        HttpVlm { config, agent }
    }

    fn attempt(&self, body: &WireRequest) -> std::result::Result<String, String> {
        let mut resp = self.agent.post(&self.config.endpoint).send_json(body).map_err(|e| e.to_string())?;
        let reply: WireReply = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(reply.text)
    }
}

impl VlmClient for HttpVlm {
    fn ask(&self, req: &VlmRequest) -> Result<String> {
        let images = req.images.iter().map(encode_png).collect::<Result<Vec<_>>>()?;
        let body = WireRequest { step: req.step.number(), subject: &req.subject, prompt: &req.prompt, images };
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for k in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("validator attempt {} of {attempts} for {} failed: {e}", k + 1, req.subject);
                    last = e;
                }
            }
            if k + 1 < attempts {
                std::thread::sleep(self.config.backoff * 2u32.saturating_pow(k as u32));
            }
        }
        Err(CorError::RetryExhausted { attempts, last })
    }

    fn max_concurrent(&self) -> usize {
        self.config.max_concurrent
    }
}

/// Reply for one step, limited to subjects that fully match a regex.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub step: VlmStep,
    #[serde(default = "any_subject")]
    pub subject: String,
    pub reply: String,
}

fn any_subject() -> String {
    ".*".into()
}

/// Deterministic validator: the first matching rule wins, then the step's
/// default reply. Unmatched requests are an error so scripts stay explicit.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ScriptedVlm {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub defaults: BTreeMap<VlmStep, String>,
    #[serde(skip)]
    patterns: Vec<Regex>,
    #[serde(skip)]
    calls: Mutex<Vec<(VlmStep, String)>>,
}

fn compile(pattern: &str) -> Result<Regex> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| CorError::Input(format!("bad subject pattern {pattern:?}: {e}")))
}

impl Clone for ScriptedVlm {
    fn clone(&self) -> Self {
        ScriptedVlm {
            rules: self.rules.clone(),
            defaults: self.defaults.clone(),
            patterns: self.patterns.clone(),
            calls: Mutex::default(),
        }
    }
}

impl ScriptedVlm {
    /// Same reply for every yes/no step, and `texts` for text generation.
    pub fn uniform(verdict: &str, texts: &str) -> Self {
        let mut defaults = BTreeMap::new();
        for s in VlmStep::ALL {
            defaults.insert(s, if s == VlmStep::Text { texts.to_string() } else { verdict.to_string() });
        }
        ScriptedVlm { defaults, ..ScriptedVlm::default() }
    }

    /// Panics on an invalid pattern; scripts read from files go through
    /// [`ScriptedVlm::from_json`], which reports it instead.
    pub fn with_rule(mut self, step: VlmStep, subject: &str, reply: &str) -> Self {
        let rule = ScriptRule { step, subject: subject.to_string(), reply: reply.to_string() };
        self.patterns.push(compile(&rule.subject).expect("valid subject pattern"));
        self.rules.push(rule);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut s: ScriptedVlm = serde_json::from_str(text)?;
        s.patterns = s.rules.iter().map(|r| compile(&r.subject)).collect::<Result<_>>()?;
        Ok(s)
    }

    /// `(step, subject)` of every request so far, in arrival order.
    pub fn calls(&self) -> Vec<(VlmStep, String)> {
        self.calls.lock().expect("call log").clone()
    }
}

impl VlmClient for ScriptedVlm {
    fn ask(&self, req: &VlmRequest) -> Result<String> {
        self.calls.lock().expect("call log").push((req.step, req.subject.clone()));
        self.rules
            .iter()
            .zip(&self.patterns)
            .find(|(r, p)| r.step == req.step && p.is_match(&req.subject))
            .map(|(r, _)| r.reply.clone())
            .or_else(|| self.defaults.get(&req.step).cloned())
            .ok_or_else(|| CorError::Input(format!("script has no reply for step {} ({})", req.step.number(), req.subject)))
    }
}
