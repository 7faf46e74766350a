//! Two-stage evaluator: an evidence-seeking correctness judgment followed
//! by an ambiguity assessment that can only lower the score.
//!
//! Stage 1 scores the reasoning chain 1–10 (with web search available
//! unless verification is ablated) and normalizes to p = (r−1)/9. Stage 2
//! rates task ambiguity a and uncertainty-handling quality h, both in
//! [0,1], and applies δ = a·min(2h−1, 0) once a clears the threshold τ.
//! The final score is max(p + δ, 0).

use std::collections::BTreeMap;

use crate::gateway::{ChatRequest, Message, ToolCallRecord};
use crate::model::{EvaluationResult, ResultStatus, TaskInstance};
use crate::prompts;

use super::{
    ask_json_field, cache_tag, clamp_int, clamp_unit, integer_field, number_field, string_field,
    CallLog, EvalContext, EvalError, Evaluator, EvaluatorConfig, EvaluatorDescriptor,
};

pub const EVALUATOR_ID: &str = "vera";

#[derive(Debug, Clone)]
pub struct VeraConfig {
    /// Ambiguity threshold below which no penalty applies. The valid range
    /// extends past 1 so a sweep can include a value that disables the
    /// penalty entirely.
    pub tau: f64,
    pub enable_verification: bool,
    pub enable_ambiguity: bool,
    pub model_id: String,
    pub max_tool_rounds: u32,
}

impl VeraConfig {
    pub fn from_shared(cfg: &EvaluatorConfig) -> VeraConfig {
        VeraConfig {
            tau: cfg.tau,
            enable_verification: cfg.enable_verification,
            enable_ambiguity: cfg.enable_ambiguity,
            model_id: cfg.judge_model_id.clone(),
            max_tool_rounds: cfg.max_tool_rounds,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !(0.0..=1.01).contains(&self.tau) {
            return Err(EvalError::InvalidConfig(format!(
                "tau must lie in [0, 1.01], got {}",
                self.tau
            )));
        }
        if self.model_id.is_empty() {
            return Err(EvalError::InvalidConfig("model_id is empty".to_string()));
        }
        Ok(())
    }
}

/// p = (r−1)/9 for r on the 1–10 rubric.
pub fn normalize_score(r: i64) -> Result<f64, EvalError> {
    if !(1..=10).contains(&r) {
        return Err(EvalError::Precondition(format!(
            "score {} outside the 1-10 rubric",
            r
        )));
    }
    Ok((r - 1) as f64 / 9.0)
}

/// δ = a·min(2h−1, 0) when a ≥ τ, else 0. Never positive: h above the
/// neutral point 0.5 cannot raise a score.
pub fn compute_penalty(a: f64, h: f64, tau: f64) -> f64 {
    if a >= tau {
        a * (2.0 * h - 1.0).min(0.0)
    } else {
        0.0
    }
}

/// Final score max(p + δ, 0); the floor keeps large penalties from
/// producing negative scores.
pub fn combine(p: f64, delta: f64) -> f64 {
    (p + delta).max(0.0)
}

struct Stage1 {
    r: i64,
    reason: String,
    evidence: Vec<ToolCallRecord>,
}

struct Stage2 {
    a: f64,
    h: f64,
    handling_issues: String,
}

pub struct VeraEvaluator {
    cfg: VeraConfig,
}

impl VeraEvaluator {
    pub fn new(cfg: VeraConfig) -> Result<VeraEvaluator, EvalError> {
        cfg.validate()?;
        Ok(VeraEvaluator { cfg })
    }

    fn stage1_asset(&self) -> &'static str {
        if self.cfg.enable_verification {
            "vera_stage1"
        } else {
            "vera_stage1_no_search"
        }
    }

    fn request(&self, prompt: String, ctx: &EvalContext, asset: &str) -> ChatRequest {
        let mut req = ChatRequest::new(self.cfg.model_id.clone(), vec![Message::user(prompt)]);
        req.max_tool_rounds = self.cfg.max_tool_rounds;
        req.cache_tag = cache_tag(EVALUATOR_ID, &[asset], ctx.repetition);
        req
    }

    fn stage1(
        &self,
        inst: &TaskInstance,
        ctx: &EvalContext,
        acc: &mut CallLog,
    ) -> Result<Stage1, String> {
        let asset = self.stage1_asset();
        let template = prompts::get(asset).expect("stage1 asset registered");
        let prompt = prompts::render(
            template.text(),
            &[
                ("question", inst.question.as_str()),
                ("chain", inst.chain.raw_text.as_str()),
                ("output", inst.output.as_str()),
            ],
        )
        .map_err(|e| format!("stage1 template: {}", e))?;
        let req = self.request(prompt, ctx, asset);
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"score\": <integer 1-10>, \"reason\": \"...\"}.";
        let (raw, reply) = ask_json_field(
            ctx.gateway,
            &req,
            self.cfg.enable_verification,
            correction,
            acc,
            |v, _| integer_field(v, "score"),
        )
        .map_err(|e| format!("stage1: {}", e))?;
        let r = clamp_int(raw, 1, 10, "stage1 score", acc);
        acc.note(format!(
            "stage1: r={} after {} search call(s)",
            r,
            reply.evidence.len()
        ));
        Ok(Stage1 {
            r,
            reason: string_field(&reply.value, "reason"),
            evidence: reply.evidence,
        })
    }

    fn stage2(
        &self,
        inst: &TaskInstance,
        ctx: &EvalContext,
        acc: &mut CallLog,
    ) -> Result<Stage2, String> {
        let template = prompts::get("vera_stage2").expect("stage2 asset registered");
        let prompt = prompts::render(
            template.text(),
            &[
                ("question", inst.question.as_str()),
                ("chain", inst.chain.raw_text.as_str()),
                ("output", inst.output.as_str()),
            ],
        )
        .map_err(|e| format!("stage2 template: {}", e))?;
        let req = self.request(prompt, ctx, "vera_stage2");
        let correction = "Respond with ONLY a JSON object of the form \
                          {\"ambiguity_level\": <0.0-1.0>, \"handling_quality\": <0.0-1.0>, \
                          \"handling_issues\": \"...\"}.";
        let (pair, reply) = ask_json_field(
            ctx.gateway,
            &req,
            false,
            correction,
            acc,
            |v, _| {
                Ok((
                    number_field(v, "ambiguity_level")?,
                    number_field(v, "handling_quality")?,
                ))
            },
        )
        .map_err(|e| format!("stage2: {}", e))?;
        let a = clamp_unit(pair.0, "stage2 ambiguity_level", acc);
        let h = clamp_unit(pair.1, "stage2 handling_quality", acc);
        acc.note(format!("stage2: a={} h={}", a, h));
        Ok(Stage2 {
            a,
            h,
            handling_issues: string_field(&reply.value, "handling_issues"),
        })
    }
}

impl Evaluator for VeraEvaluator {
    fn descriptor(&self) -> EvaluatorDescriptor {
        let mut options = BTreeMap::new();
        options.insert("tau".to_string(), self.cfg.tau.to_string());
        options.insert(
            "verification".to_string(),
            self.cfg.enable_verification.to_string(),
        );
        options.insert(
            "ambiguity".to_string(),
            self.cfg.enable_ambiguity.to_string(),
        );
        EvaluatorDescriptor {
            evaluator_id: EVALUATOR_ID.to_string(),
            display_name: "VERA".to_string(),
            model_id: self.cfg.model_id.clone(),
            score_range: (0.0, 1.0),
            raw_score_key: None,
            method_description: "Two-stage reasoning evaluation: a strict judge verifies \
                                 technical claims (using web search when enabled) and scores \
                                 correctness 1-10, then a second assessment rates task \
                                 ambiguity and how the reasoning handles it, applying a \
                                 score penalty when high ambiguity is handled poorly."
                .to_string(),
            options,
        }
    }

    fn evaluate(&self, inst: &TaskInstance, ctx: &EvalContext) -> EvaluationResult {
        let mut acc = CallLog::default();
        let stage1 = match self.stage1(inst, ctx, &mut acc) {
            Ok(s) => s,
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
        };
        let p = match normalize_score(stage1.r) {
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

        let mut breakdown = BTreeMap::new();
        breakdown.insert("r".to_string(), stage1.r as f64);
        breakdown.insert("p".to_string(), p);

        let delta = if self.cfg.enable_ambiguity {
            let stage2 = match self.stage2(inst, ctx, &mut acc) {
                Ok(s) => s,
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
            };
            if !stage2.handling_issues.is_empty() {
                acc.note(format!("stage2 issues: {}", stage2.handling_issues));
            }
            breakdown.insert("a".to_string(), stage2.a);
            breakdown.insert("h".to_string(), stage2.h);
            compute_penalty(stage2.a, stage2.h, self.cfg.tau)
        } else {
            acc.note("stage2 skipped: ambiguity assessment disabled".to_string());
            0.0
        };
        breakdown.insert("delta".to_string(), delta);

        for rec in &stage1.evidence {
            acc.note(format!("evidence[{}]: {}", rec.query, compact(&rec.evidence)));
        }

        EvaluationResult {
            instance_id: inst.id.clone(),
            evaluator_id: EVALUATOR_ID.to_string(),
            final_score: combine(p, delta),
            breakdown,
            rationale: stage1.reason,
            repetition_index: ctx.repetition,
            cost: acc.cost,
            status: ResultStatus::Ok,
            error: None,
            execution_log: acc.log,
        }
    }
}

fn compact(text: &str) -> String {
    const LIMIT: usize = 400;
    let flat = text.replace('\n', " ");
    if flat.len() <= LIMIT {
        return flat;
    }
    let mut cut = LIMIT;
    while !flat.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}…", &flat[..cut])
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::gateway::mock::MockRule;
    use crate::model::ResultStatus;

    fn vera(cfg_mut: impl FnOnce(&mut VeraConfig)) -> VeraEvaluator {
        let mut cfg = VeraConfig::from_shared(&shared_config());
        cfg_mut(&mut cfg);
        VeraEvaluator::new(cfg).unwrap()
    }

    #[test]
    fn normalize_hits_the_anchors() {
        assert_eq!(normalize_score(1).unwrap(), 0.0);
        assert_eq!(normalize_score(10).unwrap(), 1.0);
        assert!((normalize_score(7).unwrap() - 6.0 / 9.0).abs() < 1e-12);
        assert!(normalize_score(0).is_err());
        assert!(normalize_score(11).is_err());
    }

    #[test]
    fn penalty_gates_on_tau_and_neutral_handling() {
        assert_eq!(compute_penalty(0.3, 0.0, 0.4), 0.0);
        assert_eq!(compute_penalty(0.8, 0.5, 0.4), 0.0);
        assert!((compute_penalty(0.8, 0.2, 0.4) - (-0.48)).abs() < 1e-12);
    }

    #[test]
    fn penalty_never_rewards_good_handling() {
        for h in [0.5, 0.6, 0.75, 0.9, 1.0] {
            for a in [0.0, 0.4, 0.7, 1.0] {
                assert_eq!(compute_penalty(a, h, 0.4), 0.0);
            }
        }
    }

    #[test]
    fn combine_floors_at_zero() {
        assert_eq!(combine(0.5, -1.0), 0.0);
        assert_eq!(combine(1.0, 0.0), 1.0);
        let expected: f64 = 6.0 / 9.0 + 0.8 * (2.0 * 0.2 - 1.0);
        assert!((combine(6.0 / 9.0, compute_penalty(0.8, 0.2, 0.4)) - expected).abs() < 1e-12);
    }

    fn scripted_rules() -> Vec<MockRule> {
        vec![
            rule(
                &["strict evaluator of AI reasoning chains"],
                r#"{"score": 7, "reason": "one moderate oversight"}"#,
            ),
            rule(
                &["Task Ambiguity Level"],
                r#"{"ambiguity_level": 0.8, "handling_quality": 0.2, "handling_issues": "assumes in-place reversal"}"#,
            ),
        ]
    }

    #[test]
    fn evaluate_composes_both_stages() {
        let (gw, _) = harness(scripted_rules());
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|_| {}).evaluate(&instance("t1"), &ctx);
        assert_eq!(result.status, ResultStatus::Ok);
        let p: f64 = 6.0 / 9.0;
        let delta: f64 = 0.8 * (2.0 * 0.2 - 1.0);
        assert!((result.final_score - (p + delta).max(0.0)).abs() < 1e-12);
        assert_eq!(result.breakdown["r"], 7.0);
        assert!((result.breakdown["a"] - 0.8).abs() < 1e-12);
        assert!((result.breakdown["h"] - 0.2).abs() < 1e-12);
        assert!((result.breakdown["delta"] - delta).abs() < 1e-12);
        assert_eq!(result.rationale, "one moderate oversight");
        assert_eq!(result.cost.chat_calls, 2);
    }

    #[test]
    fn ambiguity_ablation_skips_stage_two_entirely() {
        let (gw, chat) = harness(scripted_rules());
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|c| c.enable_ambiguity = false).evaluate(&instance("t1"), &ctx);
        assert!((result.final_score - 6.0 / 9.0).abs() < 1e-12);
        assert!(!result.breakdown.contains_key("a"));
        assert_eq!(result.breakdown["delta"], 0.0);
        assert_eq!(chat.calls_matching("Task Ambiguity Level"), 0);
        assert_eq!(result.cost.chat_calls, 1);
    }

    #[test]
    fn tau_above_one_matches_the_ablation_score_but_still_runs_stage_two() {
        let (gw, chat) = harness(scripted_rules());
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|c| c.tau = 1.01).evaluate(&instance("t1"), &ctx);
        assert!((result.final_score - 6.0 / 9.0).abs() < 1e-12);
        assert_eq!(result.breakdown["delta"], 0.0);
        assert!(result.breakdown.contains_key("a"));
        assert_eq!(chat.calls_matching("Task Ambiguity Level"), 1);
    }

    #[test]
    fn out_of_range_scores_are_clamped_with_a_log_line() {
        let mut rules = scripted_rules();
        rules[0].reply = r#"{"score": 0, "reason": "broken rubric"}"#.to_string();
        let (gw, _) = harness(rules);
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|_| {}).evaluate(&instance("t1"), &ctx);
        assert_eq!(result.breakdown["r"], 1.0);
        assert!(result.execution_log.iter().any(|l| l.contains("clamped")));
    }

    #[test]
    fn non_integer_score_gets_one_reask_then_succeeds() {
        let mut rules = vec![rule(&["integer 1-10"], r#"{"score": 6, "reason": "fixed"}"#)];
        rules.extend(scripted_rules());
        rules[1].reply = r#"{"score": 6.5, "reason": "fence sitting"}"#.to_string();
        let (gw, chat) = harness(rules);
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|c| c.enable_ambiguity = false).evaluate(&instance("t1"), &ctx);
        assert_eq!(result.status, ResultStatus::Ok);
        assert_eq!(result.breakdown["r"], 6.0);
        assert_eq!(chat.calls(), 2);
    }

    #[test]
    fn persistent_non_integer_score_fails_the_instance() {
        let mut rules = scripted_rules();
        rules[0].reply = r#"{"score": "high", "reason": "words"}"#.to_string();
        let (gw, _) = harness(rules);
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|_| {}).evaluate(&instance("t1"), &ctx);
        assert_eq!(result.status, ResultStatus::Failed);
        assert!(result.error.as_deref().unwrap().contains("stage1"));
    }

    #[test]
    fn search_evidence_lands_in_the_log_and_cost() {
        let mut rules = scripted_rules();
        rules[0].tool_calls = vec!["python list reverse slicing".to_string()];
        let mut script = crate::gateway::mock::MockScript {
            rules,
            ..Default::default()
        };
        script.search_results.insert(
            "python list reverse slicing".to_string(),
            vec![crate::gateway::search::SearchHit {
                title: "list slicing".to_string(),
                snippet: "xs[::-1] returns a reversed copy".to_string(),
                url: "https://docs.python.org".to_string(),
            }],
        );
        let (gw, _) = crate::gateway::Gateway::mock_with_handle(
            script,
            crate::gateway::GatewayConfig {
                retry_base_ms: 0,
                ..Default::default()
            },
        );
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|_| {}).evaluate(&instance("t1"), &ctx);
        assert_eq!(result.status, ResultStatus::Ok);
        assert_eq!(result.cost.tool_calls, 1);
        assert!(result
            .execution_log
            .iter()
            .any(|l| l.contains("reversed copy")));
    }

    #[test]
    fn no_verification_uses_the_promptless_search_variant() {
        let (gw, chat) = harness(vec![rule(
            &["strict evaluator of AI reasoning chains"],
            r#"{"score": 9, "reason": "clean"}"#,
        )]);
        let ctx = EvalContext {
            gateway: &gw,
            repetition: 0,
        };
        let result = vera(|c| {
            c.enable_verification = false;
            c.enable_ambiguity = false;
        })
        .evaluate(&instance("t1"), &ctx);
        assert_eq!(result.status, ResultStatus::Ok);
        assert_eq!(chat.calls_matching("with access to web search"), 0);
        assert_eq!(chat.calls_matching("Use web search"), 0);
    }

    #[test]
    fn config_rejects_bad_tau() {
        let mut cfg = VeraConfig::from_shared(&shared_config());
        cfg.tau = 1.5;
        assert!(VeraEvaluator::new(cfg).is_err());
    }
}
