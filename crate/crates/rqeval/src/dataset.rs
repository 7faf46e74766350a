//! Dataset files, benchmark import, sampling, and trace generation.
//!
//! The canonical on-disk format is UTF-8 line-delimited JSON: one object
//! per line with fields `id`, `category`, `question`, `chain` (a string
//! or a list of step strings), `output`, and `label` (1 correct, 0
//! incorrect). Released benchmark files in other layouts go through the
//! thin import adapters, which emit the same canonical instances.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, Message};
use crate::model::{validate_dataset, ReasoningChain, TaskCategory, TaskInstance, Violation};
use crate::parallel::parallel_map;
use crate::prompts;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path} line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        path: String,
        line: usize,
        first_line: usize,
        id: String,
    },
    #[error("{path} line {line}: unknown category {value:?}; expected one of generation, summarization, classification")]
    UnknownCategory {
        path: String,
        line: usize,
        value: String,
    },
    #[error("dataset failed validation:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("unsupported confidence level {given}; supported: 0.90, 0.95, 0.99")]
    UnsupportedConfidence { given: f64 },
    #[error("invalid sampling input: {0}")]
    InvalidSamplingInput(String),
    #[error("cannot sample {requested} from a population of {population}")]
    SampleTooLarge {
        requested: usize,
        population: usize,
    },
    #[error("no import adapter for dataset {requested:?}; known: {known}")]
    UnknownAdapter { requested: String, known: String },
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {}", v))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Label counts reported alongside a loaded dataset. Always recomputed
/// from the instances themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub dataset_id: String,
    pub instances: usize,
    pub correct: usize,
    pub incorrect: usize,
}

impl LoadStats {
    pub fn from_instances(dataset_id: &str, instances: &[TaskInstance]) -> LoadStats {
        LoadStats {
            dataset_id: dataset_id.to_string(),
            instances: instances.len(),
            correct: instances.iter().filter(|i| i.label == 1).count(),
            incorrect: instances.iter().filter(|i| i.label != 1).count(),
        }
    }
}

/// `chain` accepts either the raw trace text or a pre-segmented step list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ChainField {
    Text(String),
    Steps(Vec<String>),
}

impl ChainField {
    fn into_chain(self) -> ReasoningChain {
        match self {
            ChainField::Text(text) => ReasoningChain::from_raw_text(&text),
            ChainField::Steps(steps) => ReasoningChain::from_steps(steps),
        }
    }

    /// Picks whichever representation reproduces the chain exactly on
    /// reload. Raw text wins when re-segmentation is stable; chains whose
    /// steps contain internal blank lines fall back to the step list.
    fn from_chain(chain: &ReasoningChain) -> ChainField {
        if ReasoningChain::from_raw_text(&chain.raw_text) == *chain {
            ChainField::Text(chain.raw_text.clone())
        } else {
            ChainField::Steps(chain.steps.clone())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FileRecord {
    id: String,
    category: String,
    question: String,
    chain: ChainField,
    output: String,
    label: u8,
}

fn io_error(path: &Path, err: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

/// Loads a canonical dataset file. Every instance is validated; the
/// returned stats are recomputed from the instances.
pub fn load_dataset(
    path: &Path,
    dataset_id: &str,
) -> Result<(Vec<TaskInstance>, LoadStats), DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FileRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        let category = TaskCategory::parse(&record.category).ok_or_else(|| {
            DatasetError::UnknownCategory {
                path: path.display().to_string(),
                line: line_no,
                value: record.category.clone(),
            }
        })?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(DatasetError::DuplicateId {
                path: path.display().to_string(),
                line: line_no,
                first_line,
                id: record.id,
            });
        }
        seen.insert(record.id.clone(), line_no);
        instances.push(TaskInstance {
            id: record.id,
            dataset_id: dataset_id.to_string(),
            category,
            question: record.question,
            chain: record.chain.into_chain(),
            output: record.output,
            label: record.label,
        });
    }
    if instances.is_empty() {
        log::warn!("{}: dataset file is empty", path.display());
    }
    let violations = validate_dataset(&instances);
    if !violations.is_empty() {
        return Err(DatasetError::Validation(violations));
    }
    let stats = LoadStats::from_instances(dataset_id, &instances);
    Ok((instances, stats))
}

/// Writes instances in the canonical format, one JSON object per line.
pub fn write_dataset(path: &Path, instances: &[TaskInstance]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for inst in instances {
        let record = FileRecord {
            id: inst.id.clone(),
            category: inst.category.as_str().to_string(),
            question: inst.question.clone(),
            chain: ChainField::from_chain(&inst.chain),
            output: inst.output.clone(),
            label: inst.label,
        };
        let json = serde_json::to_string(&record).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(out, "{}", json).map_err(|e| io_error(path, e))?;
    }
    out.flush().map_err(|e| io_error(path, e))
}

/// Field mapping from one released benchmark's layout to the canonical
/// schema. Keys are tried in order; the first present wins.
pub struct ImportAdapter {
    pub dataset_id: &'static str,
    pub category: TaskCategory,
    id_keys: &'static [&'static str],
    question_keys: &'static [&'static str],
    chain_keys: &'static [&'static str],
    output_keys: &'static [&'static str],
    label_keys: &'static [&'static str],
}

pub const IMPORT_ADAPTERS: &[ImportAdapter] = &[
    ImportAdapter {
        dataset_id: "codereval_re",
        category: TaskCategory::Generation,
        id_keys: &["_id", "task_id", "id"],
        question_keys: &["docstring", "prompt", "question"],
        chain_keys: &["reasoning", "reasoning_trace", "chain"],
        output_keys: &["solution", "code", "output"],
        label_keys: &["label", "reasoning_correct", "correct"],
    },
    ImportAdapter {
        dataset_id: "swebench_re",
        category: TaskCategory::Generation,
        id_keys: &["instance_id", "id"],
        question_keys: &["problem_statement", "question"],
        chain_keys: &["reasoning", "reasoning_trace", "chain"],
        output_keys: &["patch", "model_patch", "output"],
        label_keys: &["label", "reasoning_correct", "correct"],
    },
    ImportAdapter {
        dataset_id: "classeval_re",
        category: TaskCategory::Summarization,
        id_keys: &["task_id", "id"],
        question_keys: &["code", "class_code", "question"],
        chain_keys: &["reasoning", "chain"],
        output_keys: &["summary", "docstring", "output"],
        label_keys: &["label", "reasoning_correct", "correct"],
    },
    ImportAdapter {
        dataset_id: "debugbench_re",
        category: TaskCategory::Classification,
        id_keys: &["slug", "task_id", "id"],
        question_keys: &["buggy_code", "code", "question"],
        chain_keys: &["reasoning", "analysis", "chain"],
        output_keys: &["verdict", "answer", "output"],
        label_keys: &["label", "reasoning_correct", "correct"],
    },
];

pub fn adapter_for(dataset_id: &str) -> Result<&'static ImportAdapter, DatasetError> {
    IMPORT_ADAPTERS
        .iter()
        .find(|a| a.dataset_id == dataset_id)
        .ok_or_else(|| DatasetError::UnknownAdapter {
            requested: dataset_id.to_string(),
            known: IMPORT_ADAPTERS
                .iter()
                .map(|a| a.dataset_id)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

impl ImportAdapter {
    fn field<'a>(
        &self,
        obj: &'a serde_json::Value,
        keys: &[&str],
        what: &str,
        path: &Path,
        line: usize,
    ) -> Result<&'a serde_json::Value, DatasetError> {
        keys.iter().find_map(|k| obj.get(*k)).ok_or_else(|| {
            DatasetError::MalformedLine {
                path: path.display().to_string(),
                line,
                message: format!("no {} field; tried {}", what, keys.join(", ")),
            }
        })
    }

    fn convert(
        &self,
        obj: &serde_json::Value,
        path: &Path,
        line: usize,
    ) -> Result<TaskInstance, DatasetError> {
        let text_of = |v: &serde_json::Value| match v.as_str() {
            Some(s) => s.to_string(),
            None => v.to_string(),
        };
        let id = text_of(self.field(obj, self.id_keys, "id", path, line)?);
        let question = text_of(self.field(obj, self.question_keys, "question", path, line)?);
        let chain_value = self.field(obj, self.chain_keys, "chain", path, line)?;
        let chain = match chain_value {
            serde_json::Value::Array(items) => ReasoningChain::from_steps(
                items.iter().map(text_of).collect(),
            ),
            other => ReasoningChain::from_raw_text(&text_of(other)),
        };
        let output = text_of(self.field(obj, self.output_keys, "output", path, line)?);
        let label_value = self.field(obj, self.label_keys, "label", path, line)?;
        let label = coerce_label(label_value).ok_or_else(|| DatasetError::MalformedLine {
            path: path.display().to_string(),
            line,
            message: format!("uninterpretable label {}", label_value),
        })?;
        Ok(TaskInstance {
            id,
            dataset_id: self.dataset_id.to_string(),
            category: self.category,
            question,
            chain,
            output,
            label,
        })
    }

    /// Reads an upstream-layout JSONL file and emits canonical instances.
    pub fn import(&self, path: &Path) -> Result<(Vec<TaskInstance>, LoadStats), DatasetError> {
        let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
        let reader = BufReader::new(file);
        let mut instances = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| io_error(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                    path: path.display().to_string(),
                    line: line_no,
                    message: e.to_string(),
                })?;
            instances.push(self.convert(&obj, path, line_no)?);
        }
        let violations = validate_dataset(&instances);
        if !violations.is_empty() {
            return Err(DatasetError::Validation(violations));
        }
        let stats = LoadStats::from_instances(self.dataset_id, &instances);
        Ok((instances, stats))
    }
}

fn coerce_label(value: &serde_json::Value) -> Option<u8> {
    match value {
        serde_json::Value::Bool(b) => Some(u8::from(*b)),
        serde_json::Value::Number(n) => match n.as_u64() {
            Some(0) => Some(0),
            Some(1) => Some(1),
            _ => None,
        },
        serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "correct" => Some(1),
            "0" | "false" | "incorrect" => Some(0),
            _ => None,
        },
        _ => None,
    }
}

/// Cochran sample size with finite-population correction, rounded up.
/// z is table-driven for the three standard confidence levels.
pub fn sample_size(population: u64, confidence: f64, margin: f64) -> Result<u64, DatasetError> {
    if population == 0 {
        return Err(DatasetError::InvalidSamplingInput(
            "population must be at least 1".to_string(),
        ));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(DatasetError::InvalidSamplingInput(format!(
            "margin of error must be in (0, 1), got {}",
            margin
        )));
    }
    let z = if (confidence - 0.90).abs() < 1e-9 {
        1.645
    } else if (confidence - 0.95).abs() < 1e-9 {
        1.96
    } else if (confidence - 0.99).abs() < 1e-9 {
        2.576
    } else {
        return Err(DatasetError::UnsupportedConfidence { given: confidence });
    };
    let n0 = z * z * 0.25 / (margin * margin);
    let corrected = n0 / (1.0 + (n0 - 1.0) / population as f64);
    Ok(corrected.ceil() as u64)
}

/// Uniform draw from [0, bound) by rejection, so every value is equally
/// likely regardless of bound.
fn uniform_below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let max_valid = (u64::MAX / bound) * bound;
    loop {
        let v = rng.next_u64();
        if v < max_valid {
            return v % bound;
        }
    }
}

/// Uniform sample of `n` instances without replacement, deterministic
/// under `seed`. Partial Fisher-Yates over an index vector.
pub fn sample(
    instances: &[TaskInstance],
    n: usize,
    seed: u64,
) -> Result<Vec<TaskInstance>, DatasetError> {
    if n > instances.len() {
        return Err(DatasetError::SampleTooLarge {
            requested: n,
            population: instances.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..instances.len()).collect();
    for i in 0..n {
        let j = i + uniform_below(&mut rng, (idx.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    Ok(idx[..n].iter().map(|&i| instances[i].clone()).collect())
}

/// A task that does not have a reasoning trace yet. Labels stay unset;
/// annotation happens elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftInstance {
    pub id: String,
    pub category: TaskCategory,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ReasoningChain>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// Draft files use the canonical record layout with chain, output, and
/// label optional, so a fully annotated draft file is directly loadable
/// as a dataset.
#[derive(Debug, Serialize, Deserialize)]
struct DraftRecord {
    id: String,
    category: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chain: Option<ChainField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

pub fn read_drafts(path: &Path) -> Result<Vec<DraftInstance>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| io_error(path, e))?;
    let reader = BufReader::new(file);
    let mut drafts = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DraftRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                path: path.display().to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        let category = TaskCategory::parse(&record.category).ok_or_else(|| {
            DatasetError::UnknownCategory {
                path: path.display().to_string(),
                line: line_no,
                value: record.category.clone(),
            }
        })?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(DatasetError::DuplicateId {
                path: path.display().to_string(),
                line: line_no,
                first_line,
                id: record.id,
            });
        }
        seen.insert(record.id.clone(), line_no);
        drafts.push(DraftInstance {
            id: record.id,
            category,
            question: record.question,
            chain: record.chain.map(ChainField::into_chain),
            output: record.output,
            label: record.label,
        });
    }
    Ok(drafts)
}

pub fn write_drafts(path: &Path, drafts: &[DraftInstance]) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for draft in drafts {
        let record = DraftRecord {
            id: draft.id.clone(),
            category: draft.category.as_str().to_string(),
            question: draft.question.clone(),
            chain: draft.chain.as_ref().map(ChainField::from_chain),
            output: draft.output.clone(),
            label: draft.label,
        };
        let json = serde_json::to_string(&record).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        writeln!(out, "{}", json).map_err(|e| io_error(path, e))?;
    }
    out.flush().map_err(|e| io_error(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub completed: Vec<DraftInstance>,
    /// (instance id, reason) for every draft left without a trace.
    pub failures: Vec<(String, String)>,
}

fn trace_instruction(category: TaskCategory) -> &'static str {
    match category {
        TaskCategory::Generation => {
            "Solve the following coding task and produce the requested code."
        }
        TaskCategory::Summarization => {
            "Read the code in the following task and write a concise summary of what it does."
        }
        TaskCategory::Classification => {
            "Inspect the code in the following task and decide whether it contains a bug."
        }
    }
}

const FINAL_ANSWER_MARKER: &str = "FINAL ANSWER:";

fn split_trace(reply: &str) -> Option<(String, String)> {
    let mut marker_start = None;
    let mut offset = 0;
    for line in reply.split_inclusive('\n') {
        if line.trim_start().starts_with(FINAL_ANSWER_MARKER) {
            marker_start = Some(offset);
        }
        offset += line.len();
    }
    let start = marker_start?;
    let chain = reply[..start].trim();
    let answer_part = &reply[start..];
    let after = answer_part
        .trim_start()
        .strip_prefix(FINAL_ANSWER_MARKER)
        .expect("marker located above");
    let output = after.trim();
    if chain.is_empty() || output.is_empty() {
        return None;
    }
    Some((chain.to_string(), output.to_string()))
}

/// Generates a reasoning trace and final answer for each draft with one
/// model call, in parallel through the gateway limiter. Drafts that fail
/// (gateway error, missing answer marker, pre-existing chain) are listed
/// in the report and left untouched.
pub fn generate_traces(
    drafts: &[DraftInstance],
    gateway: &Gateway,
    model_id: &str,
    workers: usize,
) -> TraceReport {
    let template = prompts::get("gen_trace")
        .expect("trace asset registered")
        .text();
    let outcomes = parallel_map(drafts, workers, |_, draft| {
        if draft.chain.is_some() {
            return Err("already has a reasoning chain; refusing to overwrite".to_string());
        }
        let prompt = prompts::render(
            template,
            &[
                ("instruction", trace_instruction(draft.category)),
                ("question", draft.question.as_str()),
            ],
        )
        .map_err(|e| e.to_string())?;
        let mut req = ChatRequest::new(model_id, vec![Message::user(prompt)]);
        req.cache_tag = format!("gen_trace|{}", prompts::version_tag(&["gen_trace"]));
        let resp = gateway.complete(&req).map_err(|e| e.to_string())?;
        let (chain_text, output) = split_trace(&resp.text).ok_or_else(|| {
            format!("reply lacks a {:?} line", FINAL_ANSWER_MARKER)
        })?;
        Ok((chain_text, output))
    });

    let mut report = TraceReport {
        completed: Vec::new(),
        failures: Vec::new(),
    };
    for (draft, outcome) in drafts.iter().zip(outcomes) {
        match outcome {
            Ok((chain_text, output)) => {
                let mut done = draft.clone();
                done.chain = Some(ReasoningChain::from_raw_text(&chain_text));
                done.output = Some(output);
                report.completed.push(done);
            }
            Err(reason) => {
                log::warn!("trace generation skipped {}: {}", draft.id, reason);
                report.failures.push((draft.id.clone(), reason));
            }
        }
    }
    report
}
