//! Single-call judge: one prompt, one integer 1–10, normalized to [0,1].

use std::collections::BTreeMap;

use crate::gateway::{ChatRequest, Message};
use crate::model::{EvaluationResult, ResultStatus, TaskInstance};
use crate::prompts;

use super::{
    ask_json_field, cache_tag, clamp_int, integer_field, string_field, CallLog, EvalContext,
    Evaluator, EvaluatorConfig, EvaluatorDescriptor,
};

pub const EVALUATOR_ID: &str = "llm_judge";

pub struct LlmJudge {
    model_id: String,
}

impl LlmJudge {
    pub fn new(cfg: &EvaluatorConfig) -> LlmJudge {
        LlmJudge {
            model_id: cfg.judge_model_id.clone(),
        }
    }
}

impl Evaluator for LlmJudge {
    fn descriptor(&self) -> EvaluatorDescriptor {
        EvaluatorDescriptor {
            evaluator_id: EVALUATOR_ID.to_string(),
            display_name: "LLM-as-Judge".to_string(),
            model_id: self.model_id.clone(),
            score_range: (1.0, 10.0),
            raw_score_key: Some("r".to_string()),
            method_description: "A single judge call that reads the task, reasoning chain, \
                                 and output, then directly assigns an overall quality score \
                                 from 1 to 10."
                .to_string(),
            options: BTreeMap::new(),
        }
    }

    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult {
        let mut acc = CallLog::default();
        let template = prompts::get("llm_judge").expect("judge asset registered");
        let prompt = match prompts::render(
            template.text(),
            &[
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
        req.cache_tag = cache_tag(EVALUATOR_ID, &["llm_judge"], ctx.repetition);
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"score\": <integer 1-10>, \"reason\": \"...\"}.";
        match ask_json_field(ctx.gateway, &req, false, correction, &mut acc, |v, _| {
            integer_field(v, "score")
        }) {
            Ok((raw, reply)) => {
                let r = clamp_int(raw, 1, 10, "judge score", &mut acc);
                let mut breakdown = BTreeMap::new();
                breakdown.insert("r".to_string(), r as f64);
                EvaluationResult {
                    instance_id: inst.id.clone(),
                    evaluator_id: EVALUATOR_ID.to_string(),
                    final_score: (r - 1) as f64 / 9.0,
                    breakdown,
                    rationale: string_field(&reply.value, "reason"),
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
