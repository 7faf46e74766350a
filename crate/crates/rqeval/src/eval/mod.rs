//! The evaluator interface and its implementations.
//!
//! Every scoring method lives behind the [`Evaluator`] trait and is
//! registered by id in an [`EvaluatorRegistry`], so the runner selects
//! methods by name at runtime without knowing their internals. All
//! evaluators emit a normalized `final_score` in [0,1]; pre-normalization
//! values live in the result's `breakdown` under the descriptor's
//! `raw_score_key`.

pub mod autorace;
pub mod case;
pub mod judge;
pub mod mad;
pub mod socreval;
pub mod vera;

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::{
    parse_json_payload, ChatRequest, Gateway, GatewayError, Message, ToolCallRecord,
};
use crate::model::{CostStats, EvaluationResult, RunManifest, TaskInstance};
use crate::prompts;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown evaluator {requested:?}; registered evaluators: {known}")]
    UnknownEvaluator { requested: String, known: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error: {0}")]
    Io(String),
}

/// Static facts about a scoring method, consumed by mismatch
/// classification (native score range) and by the diagnostic prompts
/// (name and description).
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatorDescriptor {
    pub evaluator_id: String,
    pub display_name: String,
    pub model_id: String,
    /// Score range before normalization to [0,1].
    pub score_range: (f64, f64),
    /// Breakdown key holding the pre-normalization score, when one exists.
    pub raw_score_key: Option<String>,
    pub method_description: String,
    pub options: BTreeMap<String, String>,
}

impl EvaluatorDescriptor {
    /// Decision boundary between "judged correct" and "judged incorrect"
    /// on the native range.
    pub fn midpoint(&self) -> f64 {
        (self.score_range.0 + self.score_range.1) / 2.0
    }
}

/// Per-call environment handed to evaluators: the gateway plus the
/// repetition index, which is folded into cache tags so repeats are
/// scored independently.
pub struct EvalContext<'a> {
    pub gateway: &'a Gateway,
    pub repetition: u32,
}

/// Settings shared by all evaluator constructions, extracted from a run
/// manifest.
#[derive(Debug, Clone)]
pub struct EvaluatorConfig {
    pub judge_model_id: String,
    pub long_context_model_id: String,
    pub long_context_char_budget: usize,
    pub tau: f64,
    pub enable_verification: bool,
    pub enable_ambiguity: bool,
    pub max_tool_rounds: u32,
    pub debate_rounds: u32,
    /// Directory holding induced per-category criteria files.
    pub criteria_dir: PathBuf,
}

impl EvaluatorConfig {
    pub fn from_manifest(manifest: &RunManifest, criteria_dir: impl Into<PathBuf>) -> Self {
        EvaluatorConfig {
            judge_model_id: manifest.judge_model_id.clone(),
            long_context_model_id: manifest
                .long_context_model_id
                .clone()
                .unwrap_or_else(|| manifest.judge_model_id.clone()),
            long_context_char_budget: manifest.long_context_char_budget,
            tau: manifest.tau,
            enable_verification: !manifest.no_verification,
            enable_ambiguity: !manifest.no_ambiguity,
            max_tool_rounds: manifest.max_tool_rounds,
            debate_rounds: manifest.debate_rounds,
            criteria_dir: criteria_dir.into(),
        }
    }
}

pub trait Evaluator: Send + Sync {
    fn descriptor(&self) -> EvaluatorDescriptor;

    /// One-time setup against the dataset about to be scored (e.g.
    /// criteria induction). Default: nothing to do.
    fn prepare(&self, _instances: &[TaskInstance], _ctx: &EvalContext) -> Result<(), EvalError> {
        Ok(())
    }

    /// Scores one instance. Never panics; every failure mode is reported
    /// through the result's status and error fields.
    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult;
}

pub type EvaluatorBuilder = fn(&EvaluatorConfig) -> Result<Box<dyn Evaluator>, EvalError>;

pub struct EvaluatorRegistry {
    builders: BTreeMap<String, EvaluatorBuilder>,
}

impl EvaluatorRegistry {
    pub fn new() -> EvaluatorRegistry {
        EvaluatorRegistry {
            builders: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, id: &str, builder: EvaluatorBuilder) {
        self.builders.insert(id.to_string(), builder);
    }

    pub fn names(&self) -> Vec<String> {
        self.builders.keys().cloned().collect()
    }

    pub fn build(&self, id: &str, cfg: &EvaluatorConfig) -> Result<Box<dyn Evaluator>, EvalError> {
        match self.builders.get(id) {
            Some(builder) => builder(cfg),
            None => Err(EvalError::UnknownEvaluator {
                requested: id.to_string(),
                known: self.names().join(", "),
            }),
        }
    }
}

impl Default for EvaluatorRegistry {
    fn default() -> Self {
        EvaluatorRegistry::new()
    }
}

/// Registry with the six built-in scoring methods.
pub fn default_registry() -> EvaluatorRegistry {
    let mut reg = EvaluatorRegistry::new();
    reg.register("vera", |cfg| {
        Ok(Box::new(vera::VeraEvaluator::new(vera::VeraConfig::from_shared(cfg))?))
    });
    reg.register("llm_judge", |cfg| Ok(Box::new(judge::LlmJudge::new(cfg))));
    reg.register("socreval_style", |cfg| {
        Ok(Box::new(socreval::SocRevalStyle::new(cfg)))
    });
    reg.register("case_style", |cfg| Ok(Box::new(case::CaseStyle::new(cfg))));
    reg.register("mad_style", |cfg| Ok(Box::new(mad::MadStyle::new(cfg))));
    reg.register("autorace_style", |cfg| {
        Ok(Box::new(autorace::AutoRaceStyle::new(cfg)))
    });
    reg
}

/// Cache tag binding a response to the evaluator, its prompt versions,
/// and the repetition index.
pub(crate) fn cache_tag(evaluator_id: &str, asset_names: &[&str], repetition: u32) -> String {
    format!(
        "{}|{}|rep={}",
        evaluator_id,
        prompts::version_tag(asset_names),
        repetition
    )
}

/// Running cost and log accumulator threaded through an evaluation.
#[derive(Default)]
pub(crate) struct CallLog {
    pub cost: CostStats,
    pub log: Vec<String>,
}

impl CallLog {
    pub fn note(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }
}

/// A parsed JSON reply plus the conversation state that produced it, so
/// callers can append corrective turns and ask again.
#[derive(Debug)]
pub(crate) struct JsonReply {
    pub value: serde_json::Value,
    pub evidence: Vec<ToolCallRecord>,
    /// The request messages including the model's final reply.
    pub conversation: Vec<Message>,
}

const JSON_REASKS: usize = 2;
const JSON_CORRECTION: &str = "Respond with ONLY a JSON object.";

/// Plain completion with cost accounting. Gateway errors are rendered to
/// strings because evaluator failures are data, not control flow.
pub(crate) fn ask_text(
    gw: &Gateway,
    req: &ChatRequest,
    acc: &mut CallLog,
) -> Result<crate::gateway::ChatResponse, String> {
    let resp = gw.complete(req).map_err(|e| e.to_string())?;
    acc.cost.chat_calls += 1;
    acc.cost.prompt_tokens += resp.usage.prompt_tokens;
    acc.cost.completion_tokens += resp.usage.completion_tokens;
    Ok(resp)
}

/// Completion that must yield a JSON object. Unparseable replies get up
/// to two re-asks, each appending the bad reply and a correction before
/// retrying; tool-round exhaustion fails immediately.
pub(crate) fn ask_json(
    gw: &Gateway,
    base: &ChatRequest,
    use_search: bool,
    acc: &mut CallLog,
) -> Result<JsonReply, String> {
    let mut messages = base.messages.clone();
    let mut evidence: Vec<ToolCallRecord> = Vec::new();
    for attempt in 0..=JSON_REASKS {
        let mut req = base.clone();
        req.messages = messages.clone();
        let resp = if use_search {
            gw.complete_with_search(&req)
        } else {
            gw.complete(&req)
        }
        .map_err(|e| e.to_string())?;
        acc.cost.chat_calls += 1;
        acc.cost.tool_calls += resp.tool_calls.len() as u32;
        acc.cost.prompt_tokens += resp.usage.prompt_tokens;
        acc.cost.completion_tokens += resp.usage.completion_tokens;
        for rec in &resp.tool_calls {
            acc.note(format!(
                "web_search {:?} -> {}",
                rec.query,
                summarize(&rec.evidence)
            ));
        }
        evidence.extend(resp.tool_calls.clone());
        if resp.truncated_by_round_cap {
            return Err("tool rounds exhausted before the model answered".to_string());
        }
        match parse_json_payload(&resp.text) {
            Ok(value) => {
                let mut conversation = messages;
                conversation.push(Message::assistant(resp.text));
                return Ok(JsonReply {
                    value,
                    evidence,
                    conversation,
                });
            }
            Err(_) if attempt < JSON_REASKS => {
                acc.note(format!(
                    "reply had no JSON object; re-asking ({}/{})",
                    attempt + 1,
                    JSON_REASKS
                ));
                messages.push(Message::assistant(resp.text));
                messages.push(Message::user(JSON_CORRECTION));
            }
            Err(_) => {}
        }
    }
    Err(format!(
        "no JSON object in reply after {} re-asks",
        JSON_REASKS
    ))
}

/// Asks for JSON, applies `extract`, and on a malformed field appends
/// `correction` to the conversation for exactly one retry.
pub(crate) fn ask_json_field<T>(
    gw: &Gateway,
    base: &ChatRequest,
    use_search: bool,
    correction: &str,
    acc: &mut CallLog,
    extract: impl Fn(&serde_json::Value, &mut CallLog) -> Result<T, String>,
) -> Result<(T, JsonReply), String> {
    let reply = ask_json(gw, base, use_search, acc)?;
    match extract(&reply.value, acc) {
        Ok(v) => Ok((v, reply)),
        Err(reason) => {
            acc.note(format!("{}; re-asking once", reason));
            let mut retry = base.clone();
            retry.messages = reply.conversation;
            retry.messages.push(Message::user(correction.to_string()));
            let second = ask_json(gw, &retry, use_search, acc)?;
            match extract(&second.value, acc) {
                Ok(v) => Ok((v, second)),
                Err(reason) => Err(reason),
            }
        }
    }
}

/// Reads `key` as an integer, accepting integer-valued floats.
pub(crate) fn integer_field(value: &serde_json::Value, key: &str) -> Result<i64, String> {
    let v = value
        .get(key)
        .ok_or_else(|| format!("reply JSON is missing {:?}", key))?;
    if let Some(i) = v.as_i64() {
        return Ok(i);
    }
    if let Some(f) = v.as_f64() {
        if f.fract() == 0.0 && f.abs() < i64::MAX as f64 {
            return Ok(f as i64);
        }
    }
    Err(format!("{:?} is not an integer: {}", key, v))
}

pub(crate) fn number_field(value: &serde_json::Value, key: &str) -> Result<f64, String> {
    value
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| format!("reply JSON is missing a numeric {:?}", key))
}

pub(crate) fn string_field(value: &serde_json::Value, key: &str) -> String {
    value
        .get(key)
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string()
}

/// Reads a 0/1 judgment, also accepting booleans.
pub(crate) fn binary_field(value: &serde_json::Value, key: &str) -> Result<u8, String> {
    if let Some(b) = value.get(key).and_then(|v| v.as_bool()) {
        return Ok(b as u8);
    }
    match integer_field(value, key)? {
        0 => Ok(0),
        1 => Ok(1),
        other => Err(format!("{:?} must be 0 or 1, got {}", key, other)),
    }
}

/// Clamps an integer score into its rubric range, logging when it moves.
pub(crate) fn clamp_int(r: i64, lo: i64, hi: i64, field: &str, acc: &mut CallLog) -> i64 {
    let clamped = r.clamp(lo, hi);
    if clamped != r {
        let line = format!("{} {} out of [{},{}], clamped to {}", field, r, lo, hi, clamped);
        log::warn!("{}", line);
        acc.note(line);
    }
    clamped
}

/// Clamps a real into [0,1], logging when it moves.
pub(crate) fn clamp_unit(x: f64, field: &str, acc: &mut CallLog) -> f64 {
    let clamped = x.clamp(0.0, 1.0);
    if clamped != x {
        let line = format!("{} {} out of [0,1], clamped to {}", field, x, clamped);
        log::warn!("{}", line);
        acc.note(line);
    }
    clamped
}

/// Maps an arbiter verdict plus confidence to a score in [0,1]:
/// confidence when judged correct, its complement otherwise.
pub(crate) fn verdict_confidence_score(verdict_correct: bool, confidence: f64) -> f64 {
    if verdict_correct {
        confidence
    } else {
        1.0 - confidence
    }
}

/// Parses {"verdict": "correct"|"incorrect", ...} tolerantly.
pub(crate) fn verdict_field(value: &serde_json::Value) -> Result<bool, String> {
    let raw = value
        .get("verdict")
        .and_then(|v| v.as_str())
        .ok_or_else(|| "reply JSON is missing a string \"verdict\"".to_string())?;
    match raw.trim().to_ascii_lowercase().as_str() {
        "correct" => Ok(true),
        "incorrect" => Ok(false),
        other => Err(format!(
            "\"verdict\" must be correct or incorrect, got {:?}",
            other
        )),
    }
}

fn summarize(text: &str) -> String {
    const LIMIT: usize = 160;
    if text.len() <= LIMIT {
        return text.replace('\n', " ");
    }
    let mut cut = LIMIT;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}…", text[..cut].replace('\n', " "))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::gateway::mock::{MockChatProvider, MockRule, MockScript};
    use crate::gateway::GatewayConfig;
    use crate::model::{ReasoningChain, TaskCategory};
    use std::sync::Arc;

    pub fn instance(id: &str) -> TaskInstance {
        TaskInstance {
            id: id.to_string(),
            dataset_id: "fixture".to_string(),
            category: TaskCategory::Generation,
            question: "Implement a function that reverses a list.".to_string(),
            chain: ReasoningChain::from_raw_text(
                "First consider slicing.\n\nThen return the reversed copy.",
            ),
            output: "def rev(xs):\n    return xs[::-1]".to_string(),
            label: 1,
        }
    }

    pub fn rule(contains: &[&str], reply: &str) -> MockRule {
        MockRule {
            when_contains: contains.iter().map(|s| s.to_string()).collect(),
            reply: reply.to_string(),
            ..Default::default()
        }
    }

    pub fn harness(rules: Vec<MockRule>) -> (Gateway, Arc<MockChatProvider>) {
        let script = MockScript {
            rules,
            ..Default::default()
        };
        Gateway::mock_with_handle(
            script,
            GatewayConfig {
                retry_base_ms: 0,
                ..GatewayConfig::default()
            },
        )
    }

    pub fn shared_config() -> EvaluatorConfig {
        EvaluatorConfig {
            judge_model_id: "mock-judge".to_string(),
            long_context_model_id: "mock-long".to_string(),
            long_context_char_budget: 32_000,
            tau: 0.4,
            enable_verification: true,
            enable_ambiguity: true,
            max_tool_rounds: 5,
            debate_rounds: 3,
            criteria_dir: std::env::temp_dir().join("rqeval-criteria-tests"),
        }
    }
}
