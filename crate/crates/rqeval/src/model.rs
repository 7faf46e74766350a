//! Core domain types shared by every stage of the harness: task instances,
//! reasoning chains, evaluation results, mismatch cases, and run manifests.
//!
//! Everything here is a plain value type. Serialization must round-trip
//! losslessly, and deterministic byte output matters for resumable runs, so
//! every serialized map is a `BTreeMap`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Identifiers of the four released benchmark splits. User datasets may use
/// any other id.
pub const DATASET_CODEREVAL_RE: &str = "codereval_re";
pub const DATASET_SWEBENCH_RE: &str = "swebench_re";
pub const DATASET_CLASSEVAL_RE: &str = "classeval_re";
pub const DATASET_DEBUGBENCH_RE: &str = "debugbench_re";

/// Task family an instance belongs to. Determines trace-generation
/// instructions and the per-category criteria store used by the
/// criteria-induction evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Generation,
    Summarization,
    Classification,
}

impl TaskCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskCategory::Generation => "generation",
            TaskCategory::Summarization => "summarization",
            TaskCategory::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<TaskCategory> {
        match s {
            "generation" => Some(TaskCategory::Generation),
            "summarization" => Some(TaskCategory::Summarization),
            "classification" => Some(TaskCategory::Classification),
            _ => None,
        }
    }

    pub fn all() -> [TaskCategory; 3] {
        [
            TaskCategory::Generation,
            TaskCategory::Summarization,
            TaskCategory::Classification,
        ]
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A reasoning trace split into steps.
///
/// Invariant: `separators.len() == steps.len() + 1`, and interleaving
/// `separators[0], steps[0], separators[1], steps[1], ..., separators[n]`
/// reproduces `raw_text` byte for byte. Separators carry whatever the
/// segmenter did not classify as step content (blank lines, leading and
/// trailing whitespace), so no text is ever lost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub raw_text: String,
    pub steps: Vec<String>,
    pub separators: Vec<String>,
}

impl ReasoningChain {
    /// Segments free-form trace text into steps.
    ///
    /// Rule: split on blank lines; if that yields fewer than two steps, split
    /// at numbered list markers (`1.`, `2)`) at line starts; otherwise the
    /// whole text is a single step.
    pub fn from_raw_text(raw: &str) -> ReasoningChain {
        let by_blank = segment_spans(raw, blank_line_spans(raw));
        if by_blank.steps.len() >= 2 {
            return by_blank;
        }
        let by_marker = segment_spans(raw, numbered_marker_spans(raw));
        if by_marker.steps.len() >= 2 {
            return by_marker;
        }
        by_blank
    }

    /// Builds a chain from pre-segmented steps, joining them with a blank
    /// line to form the canonical raw text.
    pub fn from_steps(steps: Vec<String>) -> ReasoningChain {
        let raw_text = steps.join("\n\n");
        let mut separators = Vec::with_capacity(steps.len() + 1);
        separators.push(String::new());
        for _ in 1..steps.len().max(1) {
            separators.push("\n\n".to_string());
        }
        separators.push(String::new());
        if steps.is_empty() {
            separators = vec![String::new()];
        }
        ReasoningChain {
            raw_text,
            steps,
            separators,
        }
    }

    /// Interleaves separators and steps back into the original text.
    pub fn reconstruct(&self) -> String {
        let mut out = String::with_capacity(self.raw_text.len());
        for (i, sep) in self.separators.iter().enumerate() {
            out.push_str(sep);
            if let Some(step) = self.steps.get(i) {
                out.push_str(step);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Byte spans of separator runs, used while segmenting.
fn blank_line_spans(raw: &str) -> Vec<(usize, usize)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\n(?:[ \t\r]*\n)+").expect("static regex"));
    re.find_iter(raw).map(|m| (m.start(), m.end())).collect()
}

fn numbered_marker_spans(raw: &str) -> Vec<(usize, usize)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*\d{1,3}[.)][ \t]").expect("static regex"));
    // A marker is a split point, not a separator: the zero-width span before
    // it starts a new step. Markers at position 0 add nothing.
    re.find_iter(raw)
        .filter(|m| m.start() > 0)
        .map(|m| (m.start(), m.start()))
        .collect()
}

/// Splits `raw` at the given non-overlapping separator spans, folding
/// whitespace-only pieces into the neighbouring separators so that every
/// surviving step is non-empty after trimming.
fn segment_spans(raw: &str, spans: Vec<(usize, usize)>) -> ReasoningChain {
    let mut steps: Vec<String> = Vec::new();
    let mut separators: Vec<String> = Vec::new();
    let mut pending = String::new();
    let mut cursor = 0usize;

    let consume_piece = |piece: &str, pending: &mut String,
                             steps: &mut Vec<String>, separators: &mut Vec<String>| {
        if piece.trim().is_empty() {
            pending.push_str(piece);
        } else {
            // Leading/trailing whitespace of a step belongs to the separators.
            let start = piece.len() - piece.trim_start().len();
            let end = start + piece.trim().len();
            pending.push_str(&piece[..start]);
            separators.push(std::mem::take(pending));
            steps.push(piece[start..end].to_string());
            pending.push_str(&piece[end..]);
        }
    };

    for (s, e) in spans {
        consume_piece(&raw[cursor..s], &mut pending, &mut steps, &mut separators);
        pending.push_str(&raw[s..e]);
        cursor = e;
    }
    consume_piece(&raw[cursor..], &mut pending, &mut steps, &mut separators);
    separators.push(pending);

    ReasoningChain {
        raw_text: raw.to_string(),
        steps,
        separators,
    }
}

/// One benchmark task: the question, a model's reasoning trace and final
/// output, and a binary ground-truth verdict on that output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub dataset_id: String,
    pub category: TaskCategory,
    pub question: String,
    pub chain: ReasoningChain,
    pub output: String,
    /// 1 = output is correct, 0 = incorrect. Kept as an integer so malformed
    /// values survive deserialization long enough to be reported.
    pub label: u8,
}

/// A single failed validation check, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: &str, message: impl Into<String>) -> Violation {
        Violation {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks a single instance against the type invariants. Returns every
/// violation rather than stopping at the first.
pub fn validate_instance(inst: &TaskInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    if inst.id.trim().is_empty() {
        out.push(Violation::new("id", "must be non-empty"));
    }
    if inst.question.trim().is_empty() {
        out.push(Violation::new("question", "must be non-empty"));
    }
    if inst.output.trim().is_empty() {
        out.push(Violation::new("output", "must be non-empty"));
    }
    if inst.label > 1 {
        out.push(Violation::new(
            "label",
            format!("must be 0 or 1, got {}", inst.label),
        ));
    }
    if inst.chain.steps.is_empty() {
        out.push(Violation::new("chain", "must contain at least one step"));
    }
    for (i, step) in inst.chain.steps.iter().enumerate() {
        if step.trim().is_empty() {
            out.push(Violation::new(
                "chain",
                format!("step {} is empty after trimming", i),
            ));
        }
    }
    if inst.chain.separators.len() != inst.chain.steps.len() + 1 {
        out.push(Violation::new(
            "chain",
            format!(
                "expected {} separators for {} steps, got {}",
                inst.chain.steps.len() + 1,
                inst.chain.steps.len(),
                inst.chain.separators.len()
            ),
        ));
    } else if inst.chain.reconstruct() != inst.chain.raw_text {
        out.push(Violation::new(
            "chain",
            "steps and separators do not reconstruct raw_text",
        ));
    }
    out
}

/// Validates a whole dataset: per-instance checks plus id uniqueness.
pub fn validate_dataset(instances: &[TaskInstance]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, inst) in instances.iter().enumerate() {
        for v in validate_instance(inst) {
            out.push(Violation::new(
                &format!("[{}].{}", inst.id, v.field),
                v.message,
            ));
        }
        if let Some(first) = seen.insert(inst.id.as_str(), idx) {
            out.push(Violation::new(
                "id",
                format!(
                    "duplicate id {:?} (instances {} and {})",
                    inst.id, first, idx
                ),
            ));
        }
    }
    out
}

/// Whether an evaluation produced a usable score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Failed,
}

/// Token and call accounting for one evaluation. Latency is deliberately
/// excluded: result files must be byte-identical across reruns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostStats {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub chat_calls: u32,
    pub tool_calls: u32,
}

impl CostStats {
    pub fn add(&mut self, other: &CostStats) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.chat_calls += other.chat_calls;
        self.tool_calls += other.tool_calls;
    }
}

/// Outcome of evaluating one instance with one evaluator.
///
/// `breakdown` holds evaluator-specific named reals (for the two-stage
/// evaluator: `r`, `p`, `a`, `h`, `delta`). `execution_log` is a
/// human-readable trace of judge calls, evidence, and clamp warnings; the
/// mismatch analyst consumes it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub instance_id: String,
    pub evaluator_id: String,
    pub final_score: f64,
    pub breakdown: BTreeMap<String, f64>,
    pub rationale: String,
    pub repetition_index: u32,
    pub cost: CostStats,
    pub status: ResultStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub execution_log: Vec<String>,
}

impl EvaluationResult {
    pub fn failed(
        instance_id: &str,
        evaluator_id: &str,
        repetition_index: u32,
        error: impl Into<String>,
        cost: CostStats,
        execution_log: Vec<String>,
    ) -> EvaluationResult {
        EvaluationResult {
            instance_id: instance_id.to_string(),
            evaluator_id: evaluator_id.to_string(),
            final_score: 0.0,
            breakdown: BTreeMap::new(),
            rationale: String::new(),
            repetition_index,
            cost,
            status: ResultStatus::Failed,
            error: Some(error.into()),
            execution_log,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResultStatus::Ok
    }
}

/// Disagreement direction between an evaluator's score and the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    /// Scored at or above midpoint while the output is labelled incorrect.
    MissedError,
    /// Scored below midpoint while the output is labelled correct.
    FalseAlarm,
}

impl MismatchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MismatchKind::MissedError => "missed_error",
            MismatchKind::FalseAlarm => "false_alarm",
        }
    }
}

impl fmt::Display for MismatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluator/ground-truth disagreement, carried through diagnosis and
/// open coding. `score` and `threshold` are in the evaluator's native range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchCase {
    pub instance_id: String,
    pub evaluator_id: String,
    pub score: f64,
    pub threshold: f64,
    pub label: u8,
    pub kind: MismatchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub limitation_labels: Vec<String>,
}

/// A consolidated failure-mode category produced by taxonomy consolidation.
/// Distribution maps hold percentages and are populated by the distribution
/// report step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyCategory {
    pub name: String,
    pub definition: String,
    pub boundary_rule: String,
    pub assigned_preclusters: Vec<String>,
    #[serde(default)]
    pub evaluator_distribution: BTreeMap<String, f64>,
    #[serde(default)]
    pub error_type_distribution: BTreeMap<String, f64>,
}

/// How the response cache is consulted during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Read hits, write misses. The normal mode.
    #[default]
    ReadWrite,
    /// Read hits, never write. Useful for replaying archived runs.
    ReadOnly,
    /// Bypass the cache entirely.
    Disabled,
}

/// A dataset to evaluate: its id plus where its canonical file lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub dataset_id: String,
    pub path: PathBuf,
}

/// Full description of an experiment. Everything that affects scores lives
/// here so a run directory plus its manifest is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub evaluator_id: String,
    pub datasets: Vec<DatasetRef>,
    pub judge_model_id: String,
    pub embedding_model_id: String,
    /// Model used for mismatch diagnosis and taxonomy consolidation.
    pub analyst_model_id: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub no_verification: bool,
    #[serde(default)]
    pub no_ambiguity: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cache_policy: CachePolicy,
    /// Wall-clock run metadata. Excluded from determinism comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_max_tool_rounds")]
    pub max_tool_rounds: u32,
    #[serde(default = "default_debate_rounds")]
    pub debate_rounds: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_context_model_id: Option<String>,
    #[serde(default = "default_long_context_char_budget")]
    pub long_context_char_budget: usize,
    /// Fraction of failed instances above which the runner exits with the
    /// partial-failure code.
    #[serde(default = "default_max_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_repetitions() -> u32 {
    3
}
fn default_tau() -> f64 {
    0.4
}
fn default_workers() -> usize {
    4
}
fn default_max_tool_rounds() -> u32 {
    5
}
fn default_debate_rounds() -> u32 {
    3
}
fn default_long_context_char_budget() -> usize {
    32_000
}
fn default_max_failure_rate() -> f64 {
    0.1
}

impl RunManifest {
    /// A manifest with every knob at its default, pointing at nothing.
    pub fn new(evaluator_id: &str) -> RunManifest {
        RunManifest {
            evaluator_id: evaluator_id.to_string(),
            datasets: Vec::new(),
            judge_model_id: "mock-judge".to_string(),
            embedding_model_id: "mock-embed".to_string(),
            analyst_model_id: "mock-judge".to_string(),
            repetitions: default_repetitions(),
            tau: default_tau(),
            no_verification: false,
            no_ambiguity: false,
            seed: 0,
            cache_policy: CachePolicy::default(),
            timestamp: None,
            workers: default_workers(),
            max_tool_rounds: default_max_tool_rounds(),
            debate_rounds: default_debate_rounds(),
            long_context_model_id: None,
            long_context_char_budget: default_long_context_char_budget(),
            max_failure_rate: default_max_failure_rate(),
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.evaluator_id.trim().is_empty() {
            out.push(Violation::new("evaluator_id", "must be non-empty"));
        }
        if self.datasets.is_empty() {
            out.push(Violation::new("datasets", "at least one dataset required"));
        }
        if self.repetitions < 1 {
            out.push(Violation::new("repetitions", "must be at least 1"));
        }
        if !(0.0..=1.01).contains(&self.tau) {
            out.push(Violation::new(
                "tau",
                format!("must lie in [0, 1.01], got {}", self.tau),
            ));
        }
        if self.workers == 0 {
            out.push(Violation::new("workers", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            out.push(Violation::new(
                "max_failure_rate",
                "must lie in [0, 1]",
            ));
        }
        out
    }
}
