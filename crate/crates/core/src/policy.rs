//! Policy agents: propose thoughts, write full solutions, summarize failures
//! and refine ill thoughts.
//!
//! Two implementations ship here: [`ScriptedPolicy`], a deterministic lookup
//! table keyed by state digest, and [`RemotePolicy`], a client for an
//! OpenAI-compatible chat-completions endpoint. The free functions at the
//! bottom are the gateway the search engine calls; they enforce the
//! capability and policy-identity contracts before delegating.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::digest_hex;
use crate::evaluator::EvalReport;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy {policy}: transport failure after {attempts} attempts: {reason}")]
    Transport {
        policy: String,
        attempts: u32,
        reason: String,
    },
    #[error("policy {policy}: malformed response: {reason}")]
    Protocol { policy: String, reason: String },
    #[error("policy {policy}: no scripted {what} for state digest {digest}")]
    ScriptGap {
        policy: String,
        what: &'static str,
        digest: String,
    },
    #[error("policy {policy} lacks the {capability} capability")]
    MissingCapability {
        policy: String,
        capability: Capability,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("policy configuration: {0}")]
    Config(String),
}

impl PolicyError {
    /// Transport errors are worth retrying; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, PolicyError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Proposer,
    Solver,
    Summarizer,
    Refiner,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Capability::Proposer => "proposer",
            Capability::Solver => "solver",
            Capability::Summarizer => "summarizer",
            Capability::Refiner => "refiner",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<Capability>", into = "Vec<Capability>")]
pub struct Capabilities {
    pub proposer: bool,
    pub solver: bool,
    pub summarizer: bool,
    pub refiner: bool,
}

impl Capabilities {
    pub fn all() -> Self {
        Self {
            proposer: true,
            solver: true,
            summarizer: true,
            refiner: true,
        }
    }

    pub fn has(&self, c: Capability) -> bool {
        match c {
            Capability::Proposer => self.proposer,
            Capability::Solver => self.solver,
            Capability::Summarizer => self.summarizer,
            Capability::Refiner => self.refiner,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.proposer || self.solver || self.summarizer || self.refiner)
    }
}

impl From<Vec<Capability>> for Capabilities {
    fn from(list: Vec<Capability>) -> Self {
        let mut caps = Capabilities::default();
        for c in list {
            match c {
                Capability::Proposer => caps.proposer = true,
                Capability::Solver => caps.solver = true,
                Capability::Summarizer => caps.summarizer = true,
                Capability::Refiner => caps.refiner = true,
            }
        }
        caps
    }
}

impl From<Capabilities> for Vec<Capability> {
    fn from(caps: Capabilities) -> Self {
        [
            Capability::Proposer,
            Capability::Solver,
            Capability::Summarizer,
            Capability::Refiner,
        ]
        .into_iter()
        .filter(|c| caps.has(*c))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThoughtProposal {
    pub text: String,
    pub prior: f64,
    /// The proposal ends the reasoning: its text is itself a complete program.
    #[serde(default, rename = "terminal")]
    pub is_terminal_marker: bool,
}

impl ThoughtProposal {
    pub fn new(text: impl Into<String>, prior: f64) -> Self {
        Self {
            text: text.into(),
            prior,
            is_terminal_marker: false,
        }
    }

    pub fn terminal(text: impl Into<String>, prior: f64) -> Self {
        Self {
            text: text.into(),
            prior,
            is_terminal_marker: true,
        }
    }
}

/// What an agent sees of a search state.
#[derive(Debug, Clone, Copy)]
pub struct StateContext<'a> {
    pub statement: &'a str,
    /// Full state text: statement followed by the thoughts of the path.
    pub state: &'a str,
}

pub trait PolicyAgent: Send + Sync {
    fn policy_id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    fn propose_thoughts(
        &self,
        ctx: &StateContext<'_>,
        k: usize,
    ) -> Result<Vec<ThoughtProposal>, PolicyError>;

    fn generate_solution(&self, ctx: &StateContext<'_>) -> Result<String, PolicyError>;

    /// `ctx` is the ill node's state.
    fn summarize_failure(
        &self,
        ctx: &StateContext<'_>,
        ill_q: f64,
        block_analysis: &EvalReport,
    ) -> Result<String, PolicyError>;

    /// `ctx` is the state of the ill node's parent, where the replacement goes.
    fn refine_thought(
        &self,
        ctx: &StateContext<'_>,
        ill_q: f64,
        summary: &str,
    ) -> Result<ThoughtProposal, PolicyError>;
}

/// Renders a node value for prompts: decimal with three fraction digits.
pub fn render_q(q: f64) -> String {
    format!("{q:.3}")
}

// ---------------------------------------------------------------------------
// Scripted policy
// ---------------------------------------------------------------------------

/// On-disk form of a scripted policy. Keys are full texts; they are digested
/// when the policy is built.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptBook {
    pub policy_id: String,
    pub capabilities: Capabilities,
    /// State text → proposals in script order.
    #[serde(default)]
    pub proposals: BTreeMap<String, Vec<ThoughtProposal>>,
    /// State text → solution program.
    #[serde(default)]
    pub solutions: BTreeMap<String, String>,
    /// Ill state text → failure summary.
    #[serde(default)]
    pub summaries: BTreeMap<String, String>,
    /// Summary text → replacement thought.
    #[serde(default)]
    pub refinements: BTreeMap<String, ThoughtProposal>,
}

impl ScriptBook {
    pub fn new(policy_id: impl Into<String>, capabilities: Capabilities) -> Self {
        Self {
            policy_id: policy_id.into(),
            capabilities,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PolicyError::Config(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PolicyError::Config(format!("parse {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let text = serde_json::to_string_pretty(self).expect("script books serialize");
        fs::write(path, text + "\n")
            .map_err(|e| PolicyError::Config(format!("write {}: {e}", path.display())))
    }
}

/// Deterministic test double: a pure function of (state digest, capability).
/// A missing entry is a configuration error, never a silent fallback.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    policy_id: String,
    capabilities: Capabilities,
    proposals: HashMap<String, Vec<ThoughtProposal>>,
    solutions: HashMap<String, String>,
    summaries: HashMap<String, String>,
    refinements: HashMap<String, ThoughtProposal>,
}

impl ScriptedPolicy {
    pub fn from_book(book: ScriptBook) -> Result<Self, PolicyError> {
        if book.capabilities.is_empty() {
            return Err(PolicyError::Config(format!(
                "policy {} declares no capability",
                book.policy_id
            )));
        }
        let check = |p: &ThoughtProposal| {
            if (0.0..=1.0).contains(&p.prior) {
                Ok(())
            } else {
                Err(PolicyError::Config(format!(
                    "policy {}: prior {} outside [0, 1]",
                    book.policy_id, p.prior
                )))
            }
        };
        let mut proposals = HashMap::new();
        for (state, mut list) in book.proposals {
            list.iter().try_for_each(check)?;
            let total: f64 = list.iter().map(|p| p.prior).sum();
            if total > 1.0 {
                list.iter_mut().for_each(|p| p.prior /= total);
            }
            proposals.insert(digest_hex(&state), list);
        }
        book.refinements.values().try_for_each(check)?;
        Ok(Self {
            policy_id: book.policy_id,
            capabilities: book.capabilities,
            proposals,
            solutions: digest_keys(book.solutions),
            summaries: digest_keys(book.summaries),
            refinements: digest_keys(book.refinements),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_book(ScriptBook::load(path)?)
    }

    fn gap(&self, what: &'static str, key: &str) -> PolicyError {
        PolicyError::ScriptGap {
            policy: self.policy_id.clone(),
            what,
            digest: key.to_string(),
        }
    }
}

fn digest_keys<V>(map: BTreeMap<String, V>) -> HashMap<String, V> {
    map.into_iter().map(|(k, v)| (digest_hex(&k), v)).collect()
}

impl PolicyAgent for ScriptedPolicy {
    fn policy_id(&self) -> &str {
        &self.policy_id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn propose_thoughts(
        &self,
        ctx: &StateContext<'_>,
        k: usize,
    ) -> Result<Vec<ThoughtProposal>, PolicyError> {
        let key = digest_hex(ctx.state);
        let list = self.proposals.get(&key).ok_or_else(|| self.gap("proposals", &key))?;
        Ok(list.iter().take(k).cloned().collect())
    }

    fn generate_solution(&self, ctx: &StateContext<'_>) -> Result<String, PolicyError> {
        let key = digest_hex(ctx.state);
        self.solutions
            .get(&key)
            .cloned()
            .ok_or_else(|| self.gap("solution", &key))
    }

    fn summarize_failure(
        &self,
        ctx: &StateContext<'_>,
        _ill_q: f64,
        _block_analysis: &EvalReport,
    ) -> Result<String, PolicyError> {
        let key = digest_hex(ctx.state);
        self.summaries
            .get(&key)
            .cloned()
            .ok_or_else(|| self.gap("summary", &key))
    }

    fn refine_thought(
        &self,
        _ctx: &StateContext<'_>,
        _ill_q: f64,
        summary: &str,
    ) -> Result<ThoughtProposal, PolicyError> {
        let key = digest_hex(summary);
        self.refinements
            .get(&key)
            .cloned()
            .ok_or_else(|| self.gap("refinement", &key))
    }
}

// ---------------------------------------------------------------------------
// Remote policy
// ---------------------------------------------------------------------------

/// Plain-text prompt templates with `{statement}`, `{state}`, `{summary}`
/// and `{q_value}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub propose: String,
    pub solve: String,
    pub summarize: String,
    pub refine: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            propose: "You are solving a programming problem step by step.\n\
                      Problem:\n{statement}\n\nReasoning so far:\n{state}\n\n\
                      Write the single next reasoning step. If the reasoning is complete, \
                      write the final program followed by <END_OF_REASONING>."
                .into(),
            solve: "Problem:\n{statement}\n\nReasoning:\n{state}\n\n\
                    Write a complete program that reads standard input and writes standard output. \
                    Reply with code only."
                .into(),
            summarize: "A reasoning step led to failing programs (value {q_value}).\n\
                        State:\n{state}\n\nExecution feedback:\n{summary}\n\n\
                        Explain briefly what is wrong with the last step."
                .into(),
            refine: "Problem:\n{statement}\n\nReasoning so far:\n{state}\n\n\
                     A previous next step scored {q_value} and was diagnosed as:\n{summary}\n\n\
                     Write a corrected next reasoning step."
                .into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `propose.txt`, `solve.txt`, `summarize.txt`, `refine.txt` from a
    /// directory; missing files keep the built-in template.
    pub fn load_dir(dir: &Path) -> Result<Self, PolicyError> {
        let mut t = Self::default();
        for (name, slot) in [
            ("propose.txt", &mut t.propose),
            ("solve.txt", &mut t.solve),
            ("summarize.txt", &mut t.summarize),
            ("refine.txt", &mut t.refine),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(&path)
                    .map_err(|e| PolicyError::Config(format!("read {}: {e}", path.display())))?;
            }
        }
        Ok(t)
    }
}

pub fn fill_template(template: &str, statement: &str, state: &str, summary: &str, q: Option<f64>) -> String {
    template
        .replace("{statement}", statement)
        .replace("{state}", state)
        .replace("{summary}", summary)
        .replace("{q_value}", &q.map(render_q).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSettings {
    pub policy_id: String,
    pub capabilities: Capabilities,
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_sentinel")]
    pub terminal_sentinel: String,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_sentinel() -> String {
    "<END_OF_REASONING>".into()
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_ms() -> u64 {
    60_000
}

impl RemoteSettings {
    pub fn new(policy_id: impl Into<String>, base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            policy_id: policy_id.into(),
            capabilities: Capabilities::all(),
            base_url: base_url.into(),
            model: model.into(),
            token_env: None,
            terminal_sentinel: default_sentinel(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            seed: None,
        }
    }
}

/// One completion returned by the endpoint.
#[derive(Debug, Clone, PartialEq)]
struct Completion {
    text: String,
    /// Mean token log-probability, when the endpoint reports them.
    mean_logprob: Option<f64>,
}

/// Client for an OpenAI-compatible chat-completions API with greedy decoding.
pub struct RemotePolicy {
    settings: RemoteSettings,
    templates: PromptTemplates,
    agent: ureq::Agent,
}

impl RemotePolicy {
    pub fn new(settings: RemoteSettings, templates: PromptTemplates) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(settings.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            settings,
            templates,
            agent,
        }
    }

    fn transport(&self, attempts: u32, reason: String) -> PolicyError {
        PolicyError::Transport {
            policy: self.settings.policy_id.clone(),
            attempts,
            reason,
        }
    }

    fn protocol(&self, reason: impl Into<String>) -> PolicyError {
        PolicyError::Protocol {
            policy: self.settings.policy_id.clone(),
            reason: reason.into(),
        }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<serde_json::Value, PolicyError> {
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(var) = &self.settings.token_env {
            let token = std::env::var(var)
                .map_err(|_| PolicyError::Config(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let resp = req.send_json(body).map_err(|e| self.transport(1, e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(self.transport(1, format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(self.protocol(format!("HTTP {status}")));
        }
        resp.into_body()
            .read_json::<serde_json::Value>()
            .map_err(|e| self.protocol(format!("invalid JSON body: {e}")))
    }

    /// One round-trip, retried with exponential backoff on transport errors.
    fn chat(&self, prompt: &str, n: usize) -> Result<Vec<Completion>, PolicyError> {
        let mut body = serde_json::json!({
            "model": self.settings.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "n": n,
            "logprobs": true,
        });
        if let Some(seed) = self.settings.seed {
            body["seed"] = seed.into();
        }
        let mut attempts = 0;
        let value = loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(v) => break v,
                Err(e) if e.is_retryable() && attempts <= self.settings.retries => {
                    let wait = self.settings.backoff_ms.saturating_mul(1 << (attempts - 1));
                    log::warn!("{e}; retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                }
                Err(PolicyError::Transport { reason, .. }) => {
                    return Err(self.transport(attempts, reason));
                }
                Err(e) => return Err(e),
            }
        };
        parse_completions(&value).map_err(|r| self.protocol(r))
    }

    fn single(&self, prompt: &str) -> Result<String, PolicyError> {
        self.chat(prompt, 1)?
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| self.protocol("no choices returned"))
    }

    fn to_proposal(&self, c: Completion, uniform: f64) -> ThoughtProposal {
        let prior = c.mean_logprob.map_or(uniform, |lp| lp.exp().clamp(0.0, 1.0));
        let is_terminal_marker = c.text.contains(&self.settings.terminal_sentinel);
        let text = c
            .text
            .replace(&self.settings.terminal_sentinel, "")
            .trim()
            .to_string();
        ThoughtProposal {
            text,
            prior,
            is_terminal_marker,
        }
    }
}

fn parse_completions(value: &serde_json::Value) -> Result<Vec<Completion>, String> {
    let choices = value
        .get("choices")
        .and_then(|c| c.as_array())
        .ok_or("missing `choices` array")?;
    choices
        .iter()
        .map(|choice| {
            let text = choice
                .pointer("/message/content")
                .and_then(|c| c.as_str())
                .ok_or("choice without message content")?
                .to_string();
            let logprobs: Option<Vec<f64>> = choice
                .pointer("/logprobs/content")
                .and_then(|c| c.as_array())
                .map(|tokens| tokens.iter().filter_map(|t| t.get("logprob")?.as_f64()).collect());
            let mean_logprob = logprobs
                .filter(|lp| !lp.is_empty())
                .map(|lp| lp.iter().sum::<f64>() / lp.len() as f64);
            Ok(Completion { text, mean_logprob })
        })
        .collect()
}

impl PolicyAgent for RemotePolicy {
    fn policy_id(&self) -> &str {
        &self.settings.policy_id
    }

    fn capabilities(&self) -> Capabilities {
        self.settings.capabilities
    }

    fn propose_thoughts(
        &self,
        ctx: &StateContext<'_>,
        k: usize,
    ) -> Result<Vec<ThoughtProposal>, PolicyError> {
        let prompt = fill_template(&self.templates.propose, ctx.statement, ctx.state, "", None);
        let uniform = 1.0 / k.max(1) as f64;
        Ok(self
            .chat(&prompt, k)?
            .into_iter()
            .take(k)
            .map(|c| self.to_proposal(c, uniform))
            .collect())
    }

    fn generate_solution(&self, ctx: &StateContext<'_>) -> Result<String, PolicyError> {
        let prompt = fill_template(&self.templates.solve, ctx.statement, ctx.state, "", None);
        Ok(strip_code_fence(&self.single(&prompt)?))
    }

    fn summarize_failure(
        &self,
        ctx: &StateContext<'_>,
        ill_q: f64,
        block_analysis: &EvalReport,
    ) -> Result<String, PolicyError> {
        let feedback = block_analysis.failure_summary();
        let prompt = fill_template(&self.templates.summarize, ctx.statement, ctx.state, &feedback, Some(ill_q));
        self.single(&prompt)
    }

    fn refine_thought(
        &self,
        ctx: &StateContext<'_>,
        ill_q: f64,
        summary: &str,
    ) -> Result<ThoughtProposal, PolicyError> {
        let prompt = fill_template(&self.templates.refine, ctx.statement, ctx.state, summary, Some(ill_q));
        let c = self
            .chat(&prompt, 1)?
            .into_iter()
            .next()
            .ok_or_else(|| self.protocol("no choices returned"))?;
        Ok(self.to_proposal(c, 1.0))
    }
}

/// Drops a surrounding Markdown code fence, if any.
fn strip_code_fence(text: &str) -> String {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        let body = rest.split_once('\n').map_or("", |(_, b)| b);
        return body.strip_suffix("```").unwrap_or(body).trim_end().to_string();
    }
    trimmed.to_string()
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

fn require(agent: &dyn PolicyAgent, capability: Capability) -> Result<(), PolicyError> {
    if agent.capabilities().has(capability) {
        Ok(())
    } else {
        Err(PolicyError::MissingCapability {
            policy: agent.policy_id().to_string(),
            capability,
        })
    }
}

fn check_prior(agent: &dyn PolicyAgent, p: &ThoughtProposal) -> Result<(), PolicyError> {
    if (0.0..=1.0).contains(&p.prior) {
        Ok(())
    } else {
        Err(PolicyError::Contract(format!(
            "policy {} returned prior {} outside [0, 1]",
            agent.policy_id(),
            p.prior
        )))
    }
}

pub fn propose_thoughts(
    agent: &dyn PolicyAgent,
    ctx: &StateContext<'_>,
    k: usize,
) -> Result<Vec<ThoughtProposal>, PolicyError> {
    require(agent, Capability::Proposer)?;
    if k == 0 {
        return Err(PolicyError::Contract("k must be at least 1".into()));
    }
    let mut proposals = agent.propose_thoughts(ctx, k)?;
    proposals.truncate(k);
    proposals.iter().try_for_each(|p| check_prior(agent, p))?;
    Ok(proposals)
}

pub fn generate_solution(agent: &dyn PolicyAgent, ctx: &StateContext<'_>) -> Result<String, PolicyError> {
    require(agent, Capability::Solver)?;
    agent.generate_solution(ctx)
}

/// The summarizer must be a different policy than the one that proposed the
/// ill node.
pub fn summarize_failure(
    summarizer: &dyn PolicyAgent,
    ill_proposer: &str,
    ctx: &StateContext<'_>,
    ill_q: f64,
    block_analysis: &EvalReport,
) -> Result<String, PolicyError> {
    require(summarizer, Capability::Summarizer)?;
    if summarizer.policy_id() == ill_proposer {
        return Err(PolicyError::Contract(format!(
            "policy {ill_proposer} may not summarize its own ill node"
        )));
    }
    let summary = summarizer.summarize_failure(ctx, ill_q, block_analysis)?;
    if summary.trim().is_empty() {
        return Err(PolicyError::Contract(format!(
            "policy {} returned an empty summary",
            summarizer.policy_id()
        )));
    }
    Ok(summary)
}

/// The refiner must be the policy that proposed the ill node.
pub fn refine_thought(
    refiner: &dyn PolicyAgent,
    ill_proposer: &str,
    ctx: &StateContext<'_>,
    ill_q: f64,
    summary: &str,
) -> Result<ThoughtProposal, PolicyError> {
    require(refiner, Capability::Refiner)?;
    if refiner.policy_id() != ill_proposer {
        return Err(PolicyError::Contract(format!(
            "refinement of a {ill_proposer} node requested from {}",
            refiner.policy_id()
        )));
    }
    let proposal = refiner.refine_thought(ctx, ill_q, summary)?;
    check_prior(refiner, &proposal)?;
    Ok(proposal)
}
