//! Three-phase protocol in one conversation: the judge first solves the
//! task itself, then analyzes the candidate's reasoning against that
//! reference, then commits to a 1–5 score, normalized via (s−1)/4.
//!
//! Long inputs switch the whole conversation to a designated long-context
//! model once the rendered prompts exceed a character budget.

use std::collections::BTreeMap;

use crate::gateway::{ChatRequest, Message};
use crate::model::{EvaluationResult, ResultStatus, TaskInstance};
use crate::prompts;

use super::{
    ask_json_field, ask_text, cache_tag, clamp_int, integer_field, string_field, CallLog,
    EvalContext, Evaluator, EvaluatorConfig, EvaluatorDescriptor,
};

pub const EVALUATOR_ID: &str = "socreval_style";

const ASSETS: [&str; 3] = ["socreval_phase1", "socreval_phase2", "socreval_phase3"];

pub struct SocRevalStyle {
    model_id: String,
    long_context_model_id: String,
    long_context_char_budget: usize,
}

impl SocRevalStyle {
    pub fn new(cfg: &EvaluatorConfig) -> SocRevalStyle {
        SocRevalStyle {
            model_id: cfg.judge_model_id.clone(),
            long_context_model_id: cfg.long_context_model_id.clone(),
            long_context_char_budget: cfg.long_context_char_budget,
        }
    }

    fn run(&self, inst: &TaskInstance, ctx: &EvalContext, acc: &mut CallLog) -> Result<(i64, String, bool), String> {
        let phase1 = prompts::render(
            prompts::get("socreval_phase1").expect("asset").text(),
            &[("question", inst.question.as_str())],
        )
        .map_err(|e| e.to_string())?;
        let phase2 = prompts::render(
            prompts::get("socreval_phase2").expect("asset").text(),
            &[
                ("chain", inst.chain.raw_text.as_str()),
                ("output", inst.output.as_str()),
            ],
        )
        .map_err(|e| e.to_string())?;
        let phase3 = prompts::get("socreval_phase3").expect("asset").text();

        let total_chars = phase1.len() + phase2.len() + phase3.len();
        let long = total_chars > self.long_context_char_budget;
        let model = if long {
            acc.note(format!(
                "input of {} chars exceeds budget {}; using long-context model {}",
                total_chars, self.long_context_char_budget, self.long_context_model_id
            ));
            self.long_context_model_id.clone()
        } else {
            self.model_id.clone()
        };
        let tag = cache_tag(EVALUATOR_ID, &ASSETS, ctx.repetition);

        let mut messages = vec![Message::user(phase1)];
        let mut req = ChatRequest::new(model.clone(), messages.clone());
        req.cache_tag = tag.clone();
        let reference = ask_text(ctx.gateway, &req, acc)?;
        acc.note("phase1: reference solution drafted".to_string());
        messages.push(Message::assistant(reference.text));

        messages.push(Message::user(phase2));
        let mut req = ChatRequest::new(model.clone(), messages.clone());
        req.cache_tag = tag.clone();
        let analysis = ask_text(ctx.gateway, &req, acc)?;
        acc.note("phase2: candidate analyzed against the reference".to_string());
        messages.push(Message::assistant(analysis.text));

        messages.push(Message::user(phase3.to_string()));
        let mut req = ChatRequest::new(model, messages);
        req.cache_tag = tag;
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"score\": <integer 1-5>, \"reason\": \"...\"}.";
        let (raw, reply) = ask_json_field(ctx.gateway, &req, false, correction, acc, |v, _| {
            integer_field(v, "score")
        })?;
        let s = clamp_int(raw, 1, 5, "phase3 score", acc);
        Ok((s, string_field(&reply.value, "reason"), long))
    }
}

impl Evaluator for SocRevalStyle {
    fn descriptor(&self) -> EvaluatorDescriptor {
        let mut options = BTreeMap::new();
        options.insert(
            "long_context_model_id".to_string(),
            self.long_context_model_id.clone(),
        );
        options.insert(
            "long_context_char_budget".to_string(),
            self.long_context_char_budget.to_string(),
        );
        EvaluatorDescriptor {
            evaluator_id: EVALUATOR_ID.to_string(),
            display_name: "SocREval-style".to_string(),
            model_id: self.model_id.clone(),
            score_range: (1.0, 5.0),
            raw_score_key: Some("s".to_string()),
            method_description: "A three-phase protocol in one conversation: the judge first \
                                 produces its own reference solution, then analyzes the \
                                 candidate reasoning against it, then assigns a discrete \
                                 quality score from 1 to 5."
                .to_string(),
            options,
        }
    }

    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult {
        let mut acc = CallLog::default();
        match self.run(inst, ctx, &mut acc) {
            Ok((s, reason, long)) => {
                let mut breakdown = BTreeMap::new();
                breakdown.insert("s".to_string(), s as f64);
                breakdown.insert("long_context".to_string(), if long { 1.0 } else { 0.0 });
                EvaluationResult {
                    instance_id: inst.id.clone(),
                    evaluator_id: EVALUATOR_ID.to_string(),
                    final_score: (s - 1) as f64 / 4.0,
                    breakdown,
                    rationale: reason,
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

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::model::ResultStatus;

    fn phase_rules(score: u32) -> Vec<crate::gateway::mock::MockRule> {
        let final_reply = format!(r#"{{"score": {}, "reason": "compared to reference"}}"#, score);
        vec![
            rule(&["rate the overall quality"], &final_reply),
            rule(
                &["candidate solution to the same task"],
                "The candidate's slicing approach matches my reference.",
            ),
            rule(
                &["Solve the following coding task yourself"],
                "My reference: return xs[::-1].",
            ),
        ]
    }

    #[test]
    fn three_phases_share_one_growing_conversation() {
        let (gw, chat) = harness(phase_rules(3));
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = SocRevalStyle::new(&shared_config()).evaluate(&instance("t"), &ctx);
        assert_eq!(result.status, ResultStatus::Ok);
        assert_eq!(result.final_score, 0.5);
        assert_eq!(result.breakdown["s"], 3.0);
        assert_eq!(result.cost.chat_calls, 3);
        // The final call sees the full transcript: phase-1 reply included.
        assert_eq!(chat.calls_matching("My reference: return xs[::-1]."), 2);
    }

    #[test]
    fn score_anchors_normalize_to_unit_interval() {
        for (s, expected) in [(5, 1.0), (1, 0.0)] {
            let (gw, _) = harness(phase_rules(s));
            let ctx = EvalContext {
                gateway: &gw,
                repetition: 0,
            };
            let result = SocRevalStyle::new(&shared_config()).evaluate(&instance("t"), &ctx);
            assert_eq!(result.final_score, expected);
        }
    }

    #[test]
    fn oversized_input_switches_to_the_long_context_model() {
        let (gw, chat) = harness(phase_rules(4));
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let mut cfg = shared_config();
        cfg.long_context_char_budget = 10;
        let result = SocRevalStyle::new(&cfg).evaluate(&instance("t"), &ctx);
        assert_eq!(result.status, ResultStatus::Ok);
        assert_eq!(result.breakdown["long_context"], 1.0);
        assert_eq!(chat.calls_matching("[model mock-long]"), 3);
        assert_eq!(chat.calls_matching("[model mock-judge]"), 0);
        assert!(result
            .execution_log
            .iter()
            .any(|l| l.contains("long-context")));
    }
}
