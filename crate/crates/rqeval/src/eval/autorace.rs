//! Criteria-induction evaluator: before scoring, it studies labeled
//! incorrect reasoning examples per task category and distills a numbered
//! checklist; each instance is then judged against its category's
//! checklist, yielding {verdict, confidence} mapped to a score.
//!
//! Induced checklists persist as one text file per category so later runs
//! (and later repetitions) reuse them instead of re-inducing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use crate::gateway::{ChatRequest, Message};
use crate::model::{EvaluationResult, ResultStatus, TaskCategory, TaskInstance};
use crate::prompts;

use super::{
    ask_json_field, ask_text, cache_tag, clamp_unit, number_field, verdict_confidence_score,
    verdict_field, CallLog, EvalContext, EvalError, Evaluator, EvaluatorConfig,
    EvaluatorDescriptor,
};

pub const EVALUATOR_ID: &str = "autorace_style";

/// Cap on examples folded into one induction prompt, taken in dataset
/// order so induction is deterministic.
const MAX_INDUCTION_EXAMPLES: usize = 5;

pub struct AutoRaceStyle {
    model_id: String,
    criteria_dir: PathBuf,
    criteria: RwLock<BTreeMap<TaskCategory, String>>,
}

impl AutoRaceStyle {
    pub fn new(cfg: &EvaluatorConfig) -> AutoRaceStyle {
        AutoRaceStyle {
            model_id: cfg.judge_model_id.clone(),
            criteria_dir: cfg.criteria_dir.clone(),
            criteria: RwLock::new(BTreeMap::new()),
        }
    }

    fn criteria_file(&self, category: TaskCategory) -> PathBuf {
        self.criteria_dir.join(format!("{}.txt", category.as_str()))
    }

    /// Builds the induction prompt body from incorrect examples.
    fn format_examples(examples: &[&TaskInstance]) -> String {
        let mut out = String::new();
        for (i, inst) in examples.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            out.push_str(&format!(
                "Example {}:\nQuestion: {}\nReasoning:\n{}\nOutput:\n{}",
                i + 1,
                inst.question,
                inst.chain.raw_text,
                inst.output
            ));
        }
        out
    }

    pub fn induce_criteria(
        &self,
        category: TaskCategory,
        incorrect: &[&TaskInstance],
        ctx: &EvalContext,
    ) -> Result<String, EvalError> {
        if incorrect.is_empty() {
            return Err(EvalError::Precondition(format!(
                "criteria induction for {:?} needs at least one incorrect example",
                category.as_str()
            )));
        }
        let shown = &incorrect[..incorrect.len().min(MAX_INDUCTION_EXAMPLES)];
        let prompt = prompts::render(
            prompts::get("autorace_induce").expect("asset").text(),
            &[
                ("category", category.as_str()),
                ("examples", Self::format_examples(shown).as_str()),
            ],
        )
        .map_err(|e| EvalError::Precondition(e.to_string()))?;
        let mut req = ChatRequest::new(self.model_id.clone(), vec![Message::user(prompt)]);
        // Criteria are induced once and shared by every repetition.
        req.cache_tag = cache_tag(EVALUATOR_ID, &["autorace_induce"], 0);
        let mut acc = CallLog::default();
        let resp = ask_text(ctx.gateway, &req, &mut acc)
            .map_err(|e| EvalError::Precondition(format!("criteria induction: {}", e)))?;
        Ok(resp.text.trim().to_string())
    }

    fn store_criteria(&self, category: TaskCategory, text: &str) -> Result<(), EvalError> {
        std::fs::create_dir_all(&self.criteria_dir)
            .map_err(|e| EvalError::Io(format!("{}: {}", self.criteria_dir.display(), e)))?;
        let path = self.criteria_file(category);
        std::fs::write(&path, text)
            .map_err(|e| EvalError::Io(format!("{}: {}", path.display(), e)))?;
        self.criteria
            .write()
            .expect("criteria lock")
            .insert(category, text.to_string());
        Ok(())
    }

    fn load_criteria(&self, category: TaskCategory) -> Option<String> {
        if let Some(text) = self.criteria.read().expect("criteria lock").get(&category) {
            return Some(text.clone());
        }
        let path = self.criteria_file(category);
        let text = read_if_nonempty(&path)?;
        self.criteria
            .write()
            .expect("criteria lock")
            .insert(category, text.clone());
        Some(text)
    }
}

fn read_if_nonempty(path: &Path) -> Option<String> {
    let text = std::fs::read_to_string(path).ok()?;
    if text.trim().is_empty() {
        None
    } else {
        Some(text)
    }
}

impl Evaluator for AutoRaceStyle {
    fn descriptor(&self) -> EvaluatorDescriptor {
        let mut options = BTreeMap::new();
        options.insert(
            "criteria_dir".to_string(),
            self.criteria_dir.display().to_string(),
        );
        EvaluatorDescriptor {
            evaluator_id: EVALUATOR_ID.to_string(),
            display_name: "AutoRace-style".to_string(),
            model_id: self.model_id.clone(),
            score_range: (0.0, 1.0),
            raw_score_key: None,
            method_description: "Criteria-induction evaluation: task-specific checklists are \
                                 first distilled from labeled incorrect reasoning examples per \
                                 task category, then each chain is judged against its \
                                 category's checklist for a correct/incorrect verdict with \
                                 confidence."
                .to_string(),
            options,
        }
    }

    /// Ensures every category in the dataset has criteria, inducing and
    /// persisting them where absent.
    fn prepare(&self, instances: &[TaskInstance], ctx: &EvalContext) -> Result<(), EvalError> {
        let categories: BTreeSet<TaskCategory> =
            instances.iter().map(|inst| inst.category).collect();
        for category in categories {
            if self.load_criteria(category).is_some() {
                continue;
            }
            let incorrect: Vec<&TaskInstance> = instances
                .iter()
                .filter(|inst| inst.category == category && inst.label == 0)
                .collect();
            if incorrect.is_empty() {
                return Err(EvalError::Precondition(format!(
                    "no stored criteria and no incorrect examples to induce them for \
                     category {:?}",
                    category.as_str()
                )));
            }
            let text = self.induce_criteria(category, &incorrect, ctx)?;
            self.store_criteria(category, &text)?;
            log::info!(
                "induced {} criteria bytes for category {}",
                text.len(),
                category.as_str()
            );
        }
        Ok(())
    }

    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult {
        let mut acc = CallLog::default();
        let criteria = match self.load_criteria(inst.category) {
            Some(c) => c,
            None => {
                return EvaluationResult::failed(
                    &inst.id,
                    EVALUATOR_ID,
                    ctx.repetition,
                    format!(
                        "no induced criteria for category {:?}; run prepare() with labeled \
                         data or provide {}",
                        inst.category.as_str(),
                        self.criteria_file(inst.category).display()
                    ),
                    acc.cost,
                    acc.log,
                )
            }
        };
        let prompt = match prompts::render(
            prompts::get("autorace_eval").expect("asset").text(),
            &[
                ("criteria", criteria.as_str()),
                ("question", inst.question.as_str()),
                ("chain", inst.chain.raw_text.as_str()),
                ("output", inst.output.as_str()),
            ],
        ) {
            Ok(p) => p,
            Err(e) => {
                return EvaluationResult::failed(
                    &inst.id,
                    EVALUATOR_ID,
                    ctx.repetition,
                    e.to_string(),
                    acc.cost,
                    acc.log,
                )
            }
        };
        let mut req = ChatRequest::new(self.model_id.clone(), vec![Message::user(prompt)]);
        req.cache_tag = cache_tag(EVALUATOR_ID, &["autorace_eval"], ctx.repetition);
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"verdict\": \"correct\" or \"incorrect\", \
                          \"confidence\": <0.0-1.0>}.";
        match ask_json_field(ctx.gateway, &req, false, correction, &mut acc, |v, _| {
            Ok((verdict_field(v)?, number_field(v, "confidence")?))
        }) {
            Ok(((correct, raw_confidence), _)) => {
                let confidence = clamp_unit(raw_confidence, "confidence", &mut acc);
                let mut breakdown = BTreeMap::new();
                breakdown.insert("verdict_correct".to_string(), if correct { 1.0 } else { 0.0 });
                breakdown.insert("confidence".to_string(), confidence);
                EvaluationResult {
                    instance_id: inst.id.clone(),
                    evaluator_id: EVALUATOR_ID.to_string(),
                    final_score: verdict_confidence_score(correct, confidence),
                    breakdown,
                    rationale: format!(
                        "checklist verdict: {} (confidence {})",
                        if correct { "correct" } else { "incorrect" },
                        confidence
                    ),
                    repetition_index: ctx.repetition,
                    cost: acc.cost,
                    status: ResultStatus::Ok,
                    error: None,
                    execution_log: acc.log,
                }
            }
            Err(e) => {
                EvaluationResult::failed(&inst.id, EVALUATOR_ID, ctx.repetition, e, acc.cost, acc.log)
            }
        }
    }
}
