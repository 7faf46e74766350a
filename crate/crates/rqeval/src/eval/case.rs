//! Step-level evaluator: each reasoning step gets binary relevance and
//! coherence judgments given only the question and the preceding steps;
//! the chain score is the mean of per-step (relevance+coherence)/2.
//!
//! Averaging (not min) is deliberate: it matches the evaluated method,
//! which lets a single fatal step be diluted by good neighbors.

use std::collections::BTreeMap;

use crate::gateway::{ChatRequest, Message};
use crate::model::{EvaluationResult, ResultStatus, TaskInstance};
use crate::prompts;

use super::{
    ask_json_field, binary_field, cache_tag, CallLog, EvalContext, Evaluator, EvaluatorConfig,
    EvaluatorDescriptor,
};

pub const EVALUATOR_ID: &str = "case_style";

pub struct CaseStyle {
    model_id: String,
}

impl CaseStyle {
    pub fn new(cfg: &EvaluatorConfig) -> CaseStyle {
        CaseStyle {
            model_id: cfg.judge_model_id.clone(),
        }
    }

    fn judge_step(
        &self,
        inst: &TaskInstance,
        index: usize,
        ctx: &EvalContext,
        acc: &mut CallLog,
    ) -> Result<(u8, u8), String> {
        let steps = &inst.chain.steps;
        let preceding = if index == 0 {
            "(none)".to_string()
        } else {
            steps[..index].join("\n\n")
        };
        let prompt = prompts::render(
            prompts::get("case_step").expect("asset").text(),
            &[
                ("question", inst.question.as_str()),
                ("preceding_steps", preceding.as_str()),
                ("step", steps[index].as_str()),
            ],
        )
        .map_err(|e| e.to_string())?;
        let mut req = ChatRequest::new(self.model_id.clone(), vec![Message::user(prompt)]);
        req.cache_tag = cache_tag(EVALUATOR_ID, &["case_step"], ctx.repetition);
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"relevance\": 0 or 1, \"coherence\": 0 or 1}.";
        let (pair, _) = ask_json_field(ctx.gateway, &req, false, correction, acc, |v, _| {
            Ok((binary_field(v, "relevance")?, binary_field(v, "coherence")?))
        })
        .map_err(|e| format!("step {}: {}", index + 1, e))?;
        Ok(pair)
    }
}

impl Evaluator for CaseStyle {
    fn descriptor(&self) -> EvaluatorDescriptor {
        EvaluatorDescriptor {
            evaluator_id: EVALUATOR_ID.to_string(),
            display_name: "CaSE-style".to_string(),
            model_id: self.model_id.clone(),
            score_range: (0.0, 1.0),
            raw_score_key: None,
            method_description: "Per-step evaluation: each reasoning step receives binary \
                                 relevance and coherence judgments given only the question \
                                 and the preceding steps; the chain score is the mean of \
                                 the per-step scores."
                .to_string(),
            options: BTreeMap::new(),
        }
    }

    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult {
        let mut acc = CallLog::default();
        let n = inst.chain.steps.len();
        if n == 0 {
            return EvaluationResult::failed(
                &inst.id,
                EVALUATOR_ID,
                ctx.repetition,
                "chain has no steps to judge",
                acc.cost,
                acc.log,
            );
        }
        let mut breakdown = BTreeMap::new();
        let mut sum = 0.0;
        for i in 0..n {
            match self.judge_step(inst, i, ctx, &mut acc) {
                Ok((rel, coh)) => {
                    let step_score = (rel + coh) as f64 / 2.0;
                    acc.note(format!(
                        "step {}: relevance={} coherence={}",
                        i + 1,
                        rel,
                        coh
                    ));
                    breakdown.insert(format!("step_{:02}", i + 1), step_score);
                    sum += step_score;
                }
                Err(e) => {
                    return EvaluationResult::failed(
                        &inst.id,
                        EVALUATOR_ID,
                        ctx.repetition,
                        e,
                        acc.cost,
                        acc.log,
                    )
                }
            }
        }
        breakdown.insert("steps".to_string(), n as f64);
        EvaluationResult {
            instance_id: inst.id.clone(),
            evaluator_id: EVALUATOR_ID.to_string(),
            final_score: sum / n as f64,
            breakdown,
            rationale: format!("mean of {} per-step relevance/coherence judgments", n),
            repetition_index: ctx.repetition,
            cost: acc.cost,
            status: ResultStatus::Ok,
            error: None,
            execution_log: acc.log,
        }
    }
}
