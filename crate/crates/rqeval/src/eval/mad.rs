//! Debate evaluator: a verifier attacks the reasoning and a defender
//! rebuts, alternating inside one growing transcript for a fixed number
//! of rounds; an arbiter then issues {verdict, confidence}, mapped to a
//! continuous score (confidence when correct, its complement otherwise).

use std::collections::BTreeMap;

use crate::gateway::{ChatRequest, Message};
use crate::model::{EvaluationResult, ResultStatus, TaskInstance};
use crate::prompts;

use super::{
    ask_json_field, ask_text, cache_tag, clamp_unit, number_field, verdict_confidence_score,
    verdict_field, CallLog, EvalContext, Evaluator, EvaluatorConfig, EvaluatorDescriptor,
};

pub const EVALUATOR_ID: &str = "mad_style";

const ASSETS: [&str; 4] = ["mad_opening", "mad_verifier", "mad_defender", "mad_arbiter"];

pub struct MadStyle {
    model_id: String,
    rounds: u32,
}

impl MadStyle {
    pub fn new(cfg: &EvaluatorConfig) -> MadStyle {
        MadStyle {
            model_id: cfg.judge_model_id.clone(),
            rounds: cfg.debate_rounds,
        }
    }

    fn run(
        &self,
        inst: &TaskInstance,
        ctx: &EvalContext,
        acc: &mut CallLog,
    ) -> Result<(bool, f64), String> {
        let opening = prompts::render(
            prompts::get("mad_opening").expect("asset").text(),
            &[
                ("question", inst.question.as_str()),
                ("chain", inst.chain.raw_text.as_str()),
                ("output", inst.output.as_str()),
            ],
        )
        .map_err(|e| e.to_string())?;
        let tag = cache_tag(EVALUATOR_ID, &ASSETS, ctx.repetition);
        let mut messages = vec![Message::user(opening)];

        for round in 1..=self.rounds {
            let round_str = round.to_string();
            for asset in ["mad_verifier", "mad_defender"] {
                let turn_prompt = prompts::render(
                    prompts::get(asset).expect("asset").text(),
                    &[("round", round_str.as_str())],
                )
                .map_err(|e| e.to_string())?;
                messages.push(Message::user(turn_prompt));
                let mut req = ChatRequest::new(self.model_id.clone(), messages.clone());
                req.cache_tag = tag.clone();
                let resp = ask_text(ctx.gateway, &req, acc)
                    .map_err(|e| format!("{} round {}: {}", asset, round, e))?;
                messages.push(Message::assistant(resp.text));
            }
            acc.note(format!("debate round {} complete", round));
        }

        messages.push(Message::user(
            prompts::get("mad_arbiter").expect("asset").text().to_string(),
        ));
        let mut req = ChatRequest::new(self.model_id.clone(), messages);
        req.cache_tag = tag;
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"verdict\": \"correct\" or \"incorrect\", \
                          \"confidence\": <0.0-1.0>}.";
        let (parsed, _) = ask_json_field(ctx.gateway, &req, false, correction, acc, |v, _| {
            Ok((verdict_field(v)?, number_field(v, "confidence")?))
        })
        .map_err(|e| format!("arbiter: {}", e))?;
        let confidence = clamp_unit(parsed.1, "arbiter confidence", acc);
        acc.note(format!(
            "arbiter: verdict={} confidence={}",
            if parsed.0 { "correct" } else { "incorrect" },
            confidence
        ));
        Ok((parsed.0, confidence))
    }
}

impl Evaluator for MadStyle {
    fn descriptor(&self) -> EvaluatorDescriptor {
        let mut options = BTreeMap::new();
        options.insert("debate_rounds".to_string(), self.rounds.to_string());
        EvaluatorDescriptor {
            evaluator_id: EVALUATOR_ID.to_string(),
            display_name: "MAD-style".to_string(),
            model_id: self.model_id.clone(),
            score_range: (0.0, 1.0),
            raw_score_key: None,
            method_description: "Multi-round debate: a verifier raises potential flaws in the \
                                 reasoning and a defender rebuts them across alternating turns, \
                                 after which an arbiter issues a correct/incorrect verdict with \
                                 a confidence that becomes the continuous score."
                .to_string(),
            options,
        }
    }

    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult {
        let mut acc = CallLog::default();
        match self.run(inst, ctx, &mut acc) {
            Ok((correct, confidence)) => {
                let mut breakdown = BTreeMap::new();
                breakdown.insert("verdict_correct".to_string(), if correct { 1.0 } else { 0.0 });
                breakdown.insert("confidence".to_string(), confidence);
                breakdown.insert("rounds".to_string(), self.rounds as f64);
                EvaluationResult {
                    instance_id: inst.id.clone(),
                    evaluator_id: EVALUATOR_ID.to_string(),
                    final_score: verdict_confidence_score(correct, confidence),
                    breakdown,
                    rationale: format!(
                        "arbiter judged the chain {} with confidence {} after {} debate rounds",
                        if correct { "correct" } else { "incorrect" },
                        confidence,
                        self.rounds
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
