//! Limitation analysis over evaluator/ground-truth disagreements.
//!
//! The pipeline has five steps, each usable on its own:
//! 1. [`classify_mismatches`] splits results into missed errors, false
//!    alarms, and agreements using each evaluator's native score midpoint.
//! 2. [`diagnose_case`] asks an analyst model why the evaluator failed,
//!    given the full case content and execution log.
//! 3. [`extract_labels`] open-codes each diagnosis into 2–4 short
//!    limitation labels.
//! 4. [`precluster_labels`] groups distinct labels by embedding similarity
//!    (average-linkage, cosine distance).
//! 5. [`consolidate_taxonomy`] has the analyst merge preclusters into a
//!    MECE category system, validated and re-asked once on violations.
//!
//! [`distribution_report`] then tallies how cases spread across the final
//! categories, evaluators, and error types.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvaluatorDescriptor;
use crate::gateway::{ChatRequest, Gateway, Message};
use crate::model::{
    EvaluationResult, MismatchCase, MismatchKind, TaskInstance, TaxonomyCategory,
};
use crate::prompts;

/// Case volume of the original large-scale analysis; archives claiming
/// that provenance must match it exactly.
pub const REFERENCE_MISSED_ERRORS: usize = 709;
pub const REFERENCE_FALSE_ALARMS: usize = 360;

/// Default merge cutoff for pre-clustering, on cosine distance.
pub const DEFAULT_CLUSTER_CUTOFF: f64 = 0.35;

#[derive(Debug, Error)]
pub enum MismatchError {
    #[error("result references unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("result for {instance:?} lacks breakdown key {key:?} required for native-range classification")]
    MissingBreakdown { instance: String, key: String },
    #[error("analyst call failed: {0}")]
    Analyst(String),
    #[error("embedding failed: {0}")]
    Embedding(String),
    #[error("taxonomy is not a partition of the preclusters: unassigned [{unassigned}]; assigned more than once [{duplicated}]; not in the input [{unknown}]")]
    MeceViolation {
        unassigned: String,
        duplicated: String,
        unknown: String,
    },
    #[error("archive claims reference provenance but holds {missed} missed errors and {false_alarms} false alarms; the reference set has {REFERENCE_MISSED_ERRORS} and {REFERENCE_FALSE_ALARMS}")]
    ReferenceScaleMismatch { missed: usize, false_alarms: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Tally of the four score/label quadrants plus results that never
/// produced a score. Cases + agreements + failures always equals the
/// number of input results.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementCounts {
    pub agree_high: usize,
    pub agree_low: usize,
    pub missed_errors: usize,
    pub false_alarms: usize,
    pub failed_results: usize,
}

/// Splits results into mismatch cases and agreement counts.
///
/// The decision boundary is the midpoint of the evaluator's native score
/// range; scores exactly at the midpoint count as high. Evaluators with a
/// `raw_score_key` are classified on that breakdown entry, everything
/// else on the normalized final score.
pub fn classify_mismatches(
    results: &[EvaluationResult],
    instances: &[TaskInstance],
    descriptor: &EvaluatorDescriptor,
) -> Result<(Vec<MismatchCase>, AgreementCounts), MismatchError> {
    let labels: BTreeMap<&str, u8> = instances
        .iter()
        .map(|inst| (inst.id.as_str(), inst.label))
        .collect();
    let midpoint = descriptor.midpoint();
    let mut cases = Vec::new();
    let mut counts = AgreementCounts::default();
    for result in results {
        if !result.is_ok() {
            counts.failed_results += 1;
            continue;
        }
        let label = *labels
            .get(result.instance_id.as_str())
            .ok_or_else(|| MismatchError::UnknownInstance(result.instance_id.clone()))?;
        let score = match &descriptor.raw_score_key {
            Some(key) => *result.breakdown.get(key).ok_or_else(|| {
                MismatchError::MissingBreakdown {
                    instance: result.instance_id.clone(),
                    key: key.clone(),
                }
            })?,
            None => result.final_score,
        };
        let judged_high = score >= midpoint;
        match (judged_high, label) {
            (true, 0) => {
                counts.missed_errors += 1;
                cases.push(MismatchCase {
                    instance_id: result.instance_id.clone(),
                    evaluator_id: result.evaluator_id.clone(),
                    score,
                    threshold: midpoint,
                    label,
                    kind: MismatchKind::MissedError,
                    diagnosis: None,
                    limitation_labels: Vec::new(),
                });
            }
            (false, 1) => {
                counts.false_alarms += 1;
                cases.push(MismatchCase {
                    instance_id: result.instance_id.clone(),
                    evaluator_id: result.evaluator_id.clone(),
                    score,
                    threshold: midpoint,
                    label,
                    kind: MismatchKind::FalseAlarm,
                    diagnosis: None,
                    limitation_labels: Vec::new(),
                });
            }
            (true, _) => counts.agree_high += 1,
            (false, _) => counts.agree_low += 1,
        }
    }
    Ok((cases, counts))
}

/// Renders the full case body shown to the analyst: the task, the chain,
/// the verdicts on both sides, and the evaluator's own execution trace.
fn format_case_content(
    case: &MismatchCase,
    inst: &TaskInstance,
    result: &EvaluationResult,
    descriptor: &EvaluatorDescriptor,
) -> String {
    let label_text = if case.label == 1 {
        "correct (1)"
    } else {
        "incorrect (0)"
    };
    let mut out = format!(
        "### Question\n{}\n\n### Reasoning Chain\n{}\n\n### Final Output\n{}\n\n\
         ### Ground Truth\nHuman label: {}\n\n### Evaluator Assessment\n\
         Score: {} on range [{}, {}] (decision threshold {})\nRationale: {}\n",
        inst.question,
        inst.chain.raw_text,
        inst.output,
        label_text,
        case.score,
        descriptor.score_range.0,
        descriptor.score_range.1,
        case.threshold,
        result.rationale,
    );
    out.push_str("\n### Execution Log\n");
    if result.execution_log.is_empty() {
        out.push_str("(empty)\n");
    } else {
        for line in &result.execution_log {
            out.push_str("- ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

/// Asks the analyst model why the evaluator failed on this case. The
/// prompt template is selected by mismatch kind.
pub fn diagnose_case(
    case: &MismatchCase,
    inst: &TaskInstance,
    result: &EvaluationResult,
    descriptor: &EvaluatorDescriptor,
    gateway: &Gateway,
    analyst_model_id: &str,
) -> Result<String, MismatchError> {
    let asset = match case.kind {
        MismatchKind::MissedError => "diagnose_missed_error",
        MismatchKind::FalseAlarm => "diagnose_false_alarm",
    };
    let content = format_case_content(case, inst, result, descriptor);
    let prompt = prompts::render(
        prompts::get(asset).expect("diagnosis asset registered").text(),
        &[
            ("method_name", descriptor.display_name.as_str()),
            ("method_description", descriptor.method_description.as_str()),
            ("case_content", content.as_str()),
        ],
    )
    .map_err(|e| MismatchError::Precondition(e.to_string()))?;
    let mut req = ChatRequest::new(analyst_model_id, vec![Message::user(prompt)]);
    req.cache_tag = format!("mismatch|{}", prompts::version_tag(&[asset]));
    let resp = gateway
        .complete(&req)
        .map_err(|e| MismatchError::Analyst(e.to_string()))?;
    Ok(resp.text.trim().to_string())
}

/// One line of why this mismatch matters, used in the open-coding prompt.
fn describe_mismatch(case: &MismatchCase, descriptor: &EvaluatorDescriptor) -> String {
    match case.kind {
        MismatchKind::MissedError => format!(
            "{} scored this case {} (at or above its decision threshold {}), \
             but human annotators labeled the reasoning incorrect.",
            descriptor.display_name, case.score, case.threshold
        ),
        MismatchKind::FalseAlarm => format!(
            "{} scored this case {} (below its decision threshold {}), \
             but human annotators labeled the reasoning correct.",
            descriptor.display_name, case.score, case.threshold
        ),
    }
}

const LABEL_CORRECTION: &str = "Return ONLY a JSON object {\"limitations\": [...]} with 2 to 4 \
                                labels, each 2-5 words in lowercase_with_underscores.";

/// Open-codes a diagnosed case into limitation labels.
///
/// Shape violations (count outside 2–4, labels not in
/// lowercase_with_underscores with 2–5 words) trigger one re-ask; if the
/// model still misbehaves, labels are normalized and truncated with a
/// warning instead of failing the case.
pub fn extract_labels(
    case: &MismatchCase,
    descriptor: &EvaluatorDescriptor,
    gateway: &Gateway,
    analyst_model_id: &str,
) -> Result<Vec<String>, MismatchError> {
    let diagnosis = case.diagnosis.as_deref().ok_or_else(|| {
        MismatchError::Precondition(format!(
            "case {} has no diagnosis to open-code",
            case.instance_id
        ))
    })?;
    let description = describe_mismatch(case, descriptor);
    let prompt = prompts::render(
        prompts::get("open_coding").expect("open-coding asset registered").text(),
        &[
            ("method_name", descriptor.display_name.as_str()),
            ("mismatch_type", case.kind.as_str()),
            ("mismatch_description", description.as_str()),
            ("annotation", diagnosis),
        ],
    )
    .map_err(|e| MismatchError::Precondition(e.to_string()))?;
    let mut req = ChatRequest::new(analyst_model_id, vec![Message::user(prompt)]);
    req.cache_tag = format!("mismatch|{}", prompts::version_tag(&["open_coding"]));

    let mut acc = crate::eval::CallLog::default();
    let reply = crate::eval::ask_json(gateway, &req, false, &mut acc)
        .map_err(MismatchError::Analyst)?;
    let raw = parse_label_array(&reply.value);
    if let Some(labels) = raw.as_ref().filter(|l| labels_conform(l)) {
        return Ok(dedup(labels.clone()));
    }

    let mut retry = req.clone();
    retry.messages = reply.conversation;
    retry.messages.push(Message::user(LABEL_CORRECTION));
    let second = crate::eval::ask_json(gateway, &retry, false, &mut acc)
        .map_err(MismatchError::Analyst)?;
    let raw = parse_label_array(&second.value)
        .or(raw)
        .ok_or_else(|| MismatchError::Analyst("no \"limitations\" array in reply".to_string()))?;
    if labels_conform(&raw) {
        return Ok(dedup(raw));
    }
    let normalized = force_conformance(&raw);
    log::warn!(
        "case {}: labels still malformed after re-ask; normalized {:?} -> {:?}",
        case.instance_id,
        raw,
        normalized
    );
    Ok(normalized)
}

fn parse_label_array(value: &serde_json::Value) -> Option<Vec<String>> {
    let arr = value.get("limitations")?.as_array()?;
    let labels: Vec<String> = arr
        .iter()
        .map(|v| match v.as_str() {
            Some(s) => s.to_string(),
            None => v.to_string(),
        })
        .collect();
    if labels.is_empty() {
        None
    } else {
        Some(labels)
    }
}

fn labels_conform(labels: &[String]) -> bool {
    (2..=4).contains(&labels.len()) && labels.iter().all(|l| is_well_shaped(l))
}

/// lowercase_with_underscores, 2–5 words.
fn is_well_shaped(label: &str) -> bool {
    let words: Vec<&str> = label.split('_').collect();
    (2..=5).contains(&words.len())
        && words.iter().all(|w| {
            !w.is_empty() && w.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
        })
}

/// Rewrites a label into the canonical shape: lowercase, non-alphanumeric
/// runs become single underscores, at most five words.
pub fn normalize_label(raw: &str) -> String {
    let mut out = String::new();
    let mut pending_sep = false;
    for c in raw.trim().chars() {
        if c.is_ascii_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(c.to_ascii_lowercase());
        } else {
            pending_sep = true;
        }
    }
    let words: Vec<&str> = out.split('_').filter(|w| !w.is_empty()).collect();
    words[..words.len().min(5)].join("_")
}

fn force_conformance(labels: &[String]) -> Vec<String> {
    let mut out: Vec<String> = labels
        .iter()
        .map(|l| normalize_label(l))
        .filter(|l| !l.is_empty())
        .collect();
    out.truncate(4);
    dedup(out)
}

fn dedup(labels: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels
        .into_iter()
        .filter(|l| seen.insert(l.clone()))
        .collect()
}

/// One member label of a precluster with its occurrence count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCount {
    pub label: String,
    pub count: u64,
}

/// A group of near-synonymous limitation labels found by embedding
/// similarity, named after its most frequent member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precluster {
    pub name: String,
    /// Sorted by count descending, then label ascending.
    pub members: Vec<LabelCount>,
    /// Sum of member counts.
    pub size: u64,
    pub evaluator_breakdown: BTreeMap<String, u64>,
    pub category_breakdown: BTreeMap<String, u64>,
}

/// Groups distinct labels by average-linkage agglomerative clustering on
/// cosine distance, merging while the closest pair of clusters is within
/// `cutoff`. Iteration order, merge order, and tie-breaking are all
/// deterministic given the label set.
pub fn precluster_labels(
    cases: &[MismatchCase],
    instances: &[TaskInstance],
    gateway: &Gateway,
    embedding_model_id: &str,
    cutoff: f64,
) -> Result<Vec<Precluster>, MismatchError> {
    let category_of: BTreeMap<&str, &str> = instances
        .iter()
        .map(|inst| (inst.id.as_str(), inst.category.as_str()))
        .collect();

    struct LabelStats {
        count: u64,
        per_evaluator: BTreeMap<String, u64>,
        per_category: BTreeMap<String, u64>,
    }
    let mut stats: BTreeMap<String, LabelStats> = BTreeMap::new();
    for case in cases {
        let category = category_of.get(case.instance_id.as_str()).copied();
        for label in &case.limitation_labels {
            let entry = stats.entry(label.clone()).or_insert_with(|| LabelStats {
                count: 0,
                per_evaluator: BTreeMap::new(),
                per_category: BTreeMap::new(),
            });
            entry.count += 1;
            *entry
                .per_evaluator
                .entry(case.evaluator_id.clone())
                .or_insert(0) += 1;
            if let Some(cat) = category {
                *entry.per_category.entry(cat.to_string()).or_insert(0) += 1;
            }
        }
    }
    if stats.is_empty() {
        return Ok(Vec::new());
    }

    let labels: Vec<String> = stats.keys().cloned().collect();
    let vectors = gateway
        .embed(embedding_model_id, &labels)
        .map_err(|e| MismatchError::Embedding(e.to_string()))?;

    let n = labels.len();
    let mut base = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&vectors[i], &vectors[j]);
            base[i][j] = d;
            base[j][i] = d;
        }
    }

    let assignments = average_linkage(&base, cutoff);

    let mut out = Vec::new();
    for cluster in assignments {
        let mut members: Vec<LabelCount> = cluster
            .iter()
            .map(|&i| LabelCount {
                label: labels[i].clone(),
                count: stats[&labels[i]].count,
            })
            .collect();
        members.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
        let size = members.iter().map(|m| m.count).sum();
        let mut evaluator_breakdown = BTreeMap::new();
        let mut category_breakdown = BTreeMap::new();
        for member in &members {
            for (k, v) in &stats[&member.label].per_evaluator {
                *evaluator_breakdown.entry(k.clone()).or_insert(0) += v;
            }
            for (k, v) in &stats[&member.label].per_category {
                *category_breakdown.entry(k.clone()).or_insert(0) += v;
            }
        }
        out.push(Precluster {
            name: members[0].label.clone(),
            members,
            size,
            evaluator_breakdown,
            category_breakdown,
        });
    }
    out.sort_by(|a, b| b.size.cmp(&a.size).then_with(|| a.name.cmp(&b.name)));
    Ok(out)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Agglomerative clustering over a precomputed distance matrix. Linkage
/// between clusters is the mean of all cross-pair base distances. Ties go
/// to the earliest (i, j) pair in index order, which is label-sorted
/// order, so results are stable.
fn average_linkage(base: &[Vec<f64>], cutoff: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..base.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let mut sum = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        sum += base[a][b];
                    }
                }
                let d = sum / (clusters[i].len() * clusters[j].len()) as f64;
                if best.map_or(true, |(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        match best {
            Some((i, j, d)) if d <= cutoff => {
                let merged = clusters.remove(j);
                clusters[i].extend(merged);
                clusters[i].sort_unstable();
            }
            _ => break,
        }
    }
    clusters
}

fn format_preclusters(preclusters: &[Precluster]) -> String {
    let mut out = String::new();
    for (i, pc) in preclusters.iter().enumerate() {
        let members = pc
            .members
            .iter()
            .map(|m| format!("{} (x{})", m.label, m.count))
            .collect::<Vec<_>>()
            .join("; ");
        out.push_str(&format!(
            "{}. {} ({} occurrences): {}\n",
            i + 1,
            pc.name,
            pc.size,
            members
        ));
    }
    out
}

/// Asks the analyst to merge preclusters into a mutually exclusive,
/// collectively exhaustive category system. Partition violations get one
/// corrective re-ask naming the offenders; persistent violations are a
/// typed error.
pub fn consolidate_taxonomy(
    preclusters: &[Precluster],
    gateway: &Gateway,
    analyst_model_id: &str,
) -> Result<Vec<TaxonomyCategory>, MismatchError> {
    if preclusters.is_empty() {
        return Err(MismatchError::Precondition(
            "no preclusters to consolidate".to_string(),
        ));
    }
    let formatted = format_preclusters(preclusters);
    let num = preclusters.len().to_string();
    let prompt = prompts::render(
        prompts::get("taxonomy_consolidation")
            .expect("consolidation asset registered")
            .text(),
        &[
            ("num_pcs", num.as_str()),
            ("formatted_preclusters", formatted.as_str()),
        ],
    )
    .map_err(|e| MismatchError::Precondition(e.to_string()))?;
    let mut req = ChatRequest::new(analyst_model_id, vec![Message::user(prompt)]);
    req.cache_tag = format!(
        "mismatch|{}",
        prompts::version_tag(&["taxonomy_consolidation"])
    );

    let expected: BTreeSet<&str> = preclusters.iter().map(|p| p.name.as_str()).collect();
    let mut acc = crate::eval::CallLog::default();
    let reply = crate::eval::ask_json(gateway, &req, false, &mut acc)
        .map_err(MismatchError::Analyst)?;
    let categories = parse_categories(&reply.value)?;
    match validate_partition(&expected, &categories) {
        Ok(()) => return Ok(categories),
        Err(violation) => {
            let mut retry = req.clone();
            retry.messages = reply.conversation;
            retry.messages.push(Message::user(format!(
                "Your category assignment is not a valid partition. {} \
                 Re-emit the complete JSON object with every precluster assigned to exactly \
                 one category, using only the precluster names given.",
                violation
            )));
            let second = crate::eval::ask_json(gateway, &retry, false, &mut acc)
                .map_err(MismatchError::Analyst)?;
            let categories = parse_categories(&second.value)?;
            validate_partition(&expected, &categories)?;
            Ok(categories)
        }
    }
}

fn parse_categories(value: &serde_json::Value) -> Result<Vec<TaxonomyCategory>, MismatchError> {
    let arr = value
        .get("categories")
        .and_then(|v| v.as_array())
        .ok_or_else(|| MismatchError::Analyst("reply lacks a \"categories\" array".to_string()))?;
    let mut out = Vec::new();
    for entry in arr {
        let name = entry
            .get("name")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        if name.is_empty() {
            return Err(MismatchError::Analyst(
                "category entry without a name".to_string(),
            ));
        }
        let assigned = entry
            .get("assigned_preclusters")
            .and_then(|v| v.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str())
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .unwrap_or_default();
        out.push(TaxonomyCategory {
            name,
            definition: entry
                .get("definition")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
            boundary_rule: entry
                .get("boundary_rule")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string(),
            assigned_preclusters: assigned,
            evaluator_distribution: BTreeMap::new(),
            error_type_distribution: BTreeMap::new(),
        });
    }
    if out.is_empty() {
        return Err(MismatchError::Analyst("empty category list".to_string()));
    }
    Ok(out)
}

fn validate_partition(
    expected: &BTreeSet<&str>,
    categories: &[TaxonomyCategory],
) -> Result<(), MismatchError> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut unknown: BTreeSet<&str> = BTreeSet::new();
    for cat in categories {
        for pc in &cat.assigned_preclusters {
            if expected.contains(pc.as_str()) {
                *seen.entry(pc.as_str()).or_insert(0) += 1;
            } else {
                unknown.insert(pc.as_str());
            }
        }
    }
    let unassigned: Vec<&str> = expected
        .iter()
        .filter(|pc| !seen.contains_key(**pc))
        .copied()
        .collect();
    let duplicated: Vec<&str> = seen
        .iter()
        .filter(|(_, &count)| count > 1)
        .map(|(&pc, _)| pc)
        .collect();
    if unassigned.is_empty() && duplicated.is_empty() && unknown.is_empty() {
        Ok(())
    } else {
        Err(MismatchError::MeceViolation {
            unassigned: unassigned.join(", "),
            duplicated: duplicated.join(", "),
            unknown: unknown.into_iter().collect::<Vec<_>>().join(", "),
        })
    }
}

/// Per-category share of cases, split by evaluator and by error type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub name: String,
    pub case_count: usize,
    /// Percentage of all cases touching this category. Categories are
    /// non-exclusive at case level, so these can sum past 100.
    pub share_of_cases_pct: f64,
    /// Sums to 100 (within float error) when case_count > 0.
    pub evaluator_pct: BTreeMap<String, f64>,
    pub error_type_pct: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub total_cases: usize,
    pub missed_errors: usize,
    pub false_alarms: usize,
    pub categories: Vec<CategoryDistribution>,
}

/// Tallies cases into taxonomy categories via their labels' preclusters.
/// A case belongs to every category one of its labels maps into. Also
/// fills the categories' own distribution maps in place.
pub fn distribution_report(
    categories: &mut [TaxonomyCategory],
    preclusters: &[Precluster],
    cases: &[MismatchCase],
) -> DistributionReport {
    let mut precluster_of_label: BTreeMap<&str, &str> = BTreeMap::new();
    for pc in preclusters {
        for member in &pc.members {
            precluster_of_label.insert(member.label.as_str(), pc.name.as_str());
        }
    }
    let mut category_of_precluster: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, cat) in categories.iter().enumerate() {
        for pc in &cat.assigned_preclusters {
            category_of_precluster.insert(pc.as_str(), idx);
        }
    }

    struct Tally {
        cases: usize,
        by_evaluator: BTreeMap<String, usize>,
        by_kind: BTreeMap<String, usize>,
    }
    let mut tallies: Vec<Tally> = categories
        .iter()
        .map(|_| Tally {
            cases: 0,
            by_evaluator: BTreeMap::new(),
            by_kind: BTreeMap::new(),
        })
        .collect();

    let mut missed = 0;
    let mut false_alarms = 0;
    for case in cases {
        match case.kind {
            MismatchKind::MissedError => missed += 1,
            MismatchKind::FalseAlarm => false_alarms += 1,
        }
        let hit: BTreeSet<usize> = case
            .limitation_labels
            .iter()
            .filter_map(|l| precluster_of_label.get(l.as_str()))
            .filter_map(|pc| category_of_precluster.get(pc).copied())
            .collect();
        for idx in hit {
            let tally = &mut tallies[idx];
            tally.cases += 1;
            *tally
                .by_evaluator
                .entry(case.evaluator_id.clone())
                .or_insert(0) += 1;
            *tally
                .by_kind
                .entry(case.kind.as_str().to_string())
                .or_insert(0) += 1;
        }
    }

    let total = cases.len();
    let mut rows = Vec::new();
    for (cat, tally) in categories.iter_mut().zip(tallies) {
        let pct = |count: usize, denom: usize| {
            if denom == 0 {
                0.0
            } else {
                100.0 * count as f64 / denom as f64
            }
        };
        let evaluator_pct: BTreeMap<String, f64> = tally
            .by_evaluator
            .iter()
            .map(|(k, &v)| (k.clone(), pct(v, tally.cases)))
            .collect();
        let error_type_pct: BTreeMap<String, f64> = tally
            .by_kind
            .iter()
            .map(|(k, &v)| (k.clone(), pct(v, tally.cases)))
            .collect();
        cat.evaluator_distribution = evaluator_pct.clone();
        cat.error_type_distribution = error_type_pct.clone();
        rows.push(CategoryDistribution {
            name: cat.name.clone(),
            case_count: tally.cases,
            share_of_cases_pct: pct(tally.cases, total),
            evaluator_pct,
            error_type_pct,
        });
    }
    DistributionReport {
        total_cases: total,
        missed_errors: missed,
        false_alarms: false_alarms,
        categories: rows,
    }
}

/// Serialized set of mismatch cases. Archives marked with `provenance:
/// "reference"` must match the reference analysis scale exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseArchive {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub cases: Vec<MismatchCase>,
}

impl CaseArchive {
    pub fn new(cases: Vec<MismatchCase>) -> CaseArchive {
        CaseArchive {
            provenance: None,
            cases,
        }
    }

    pub fn check_scale(&self) -> Result<(), MismatchError> {
        if self.provenance.as_deref() != Some("reference") {
            return Ok(());
        }
        let missed = self
            .cases
            .iter()
            .filter(|c| c.kind == MismatchKind::MissedError)
            .count();
        let false_alarms = self.cases.len() - missed;
        if missed == REFERENCE_MISSED_ERRORS && false_alarms == REFERENCE_FALSE_ALARMS {
            Ok(())
        } else {
            Err(MismatchError::ReferenceScaleMismatch {
                missed,
                false_alarms,
            })
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MismatchError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| MismatchError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| MismatchError::Io(format!("{}: {}", path.display(), e)))
    }

    pub fn load(path: &Path) -> Result<CaseArchive, MismatchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MismatchError::Io(format!("{}: {}", path.display(), e)))?;
        let archive: CaseArchive =
            serde_json::from_str(&text).map_err(|e| MismatchError::Io(e.to_string()))?;
        archive.check_scale()?;
        Ok(archive)
    }
}
