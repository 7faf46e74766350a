//! Randomized invariant checks over the public API.

use proptest::prelude::*;

use rqeval::dataset::{load_dataset, sample, sample_size, write_dataset, LoadStats};
use rqeval::eval::vera::{combine, compute_penalty};
use rqeval::gateway::parse_json_payload;
use rqeval::metrics::{self, ScoredSample};
use rqeval::mismatch::normalize_label;
use rqeval::model::{
    CachePolicy, CostStats, DatasetRef, EvaluationResult, ReasoningChain, ResultStatus,
    RunManifest, TaskCategory, TaskInstance, validate_dataset,
};

fn category_strategy() -> impl Strategy<Value = TaskCategory> {
    prop_oneof![
        Just(TaskCategory::Generation),
        Just(TaskCategory::Summarization),
        Just(TaskCategory::Classification),
    ]
}

/// Chains from both construction paths: re-segmented free text and
/// explicit step lists (the latter may contain internal blank lines).
fn chain_strategy() -> impl Strategy<Value = ReasoningChain> {
    let step = "[a-zA-Z][a-zA-Z0-9 ,.]{0,30}";
    let from_text = proptest::collection::vec(step, 1..4)
        .prop_map(|steps| ReasoningChain::from_raw_text(&steps.join("\n\n")));
    let tricky_step = "[a-zA-Z][a-zA-Z0-9 ,.]{0,15}(\n\n[a-zA-Z][a-zA-Z0-9 ]{0,15})?";
    let from_steps = proptest::collection::vec(tricky_step, 1..4)
        .prop_map(ReasoningChain::from_steps);
    prop_oneof![from_text, from_steps]
}

fn instance_strategy(index: usize) -> impl Strategy<Value = TaskInstance> {
    (
        category_strategy(),
        "[a-zA-Z][a-zA-Z0-9 ?]{0,40}",
        chain_strategy(),
        "[a-zA-Z][a-zA-Z0-9 ]{0,40}",
        0u8..=1,
    )
        .prop_map(move |(category, question, chain, output, label)| TaskInstance {
            id: format!("inst-{}", index),
            dataset_id: "prop".to_string(),
            category,
            question,
            chain,
            output,
            label,
        })
}

fn dataset_strategy() -> impl Strategy<Value = Vec<TaskInstance>> {
    (1usize..8).prop_flat_map(|n| {
        let strategies: Vec<_> = (0..n).map(instance_strategy).collect();
        strategies
    })
}

fn finite_f64() -> impl Strategy<Value = f64> {
    -1e9f64..1e9
}

fn samples_strategy() -> impl Strategy<Value = Vec<ScoredSample>> {
    proptest::collection::vec((0u32..=16, 0u8..=1), 4..20)
        .prop_map(|raw| {
            raw.into_iter()
                .map(|(s, label)| ScoredSample::new(s as f64 / 16.0, label))
                .collect::<Vec<_>>()
        })
        .prop_filter("need both classes and score variance", |v| {
            let pos = v.iter().filter(|s| s.label == 1).count();
            pos > 0 && pos < v.len() && v.iter().any(|s| s.score != v[0].score)
        })
}

proptest! {
    #[test]
    fn chain_segmentation_preserves_every_byte(text in any::<String>()) {
        let chain = ReasoningChain::from_raw_text(&text);
        prop_assert_eq!(chain.reconstruct(), text);
        prop_assert_eq!(chain.separators.len(), chain.steps.len() + 1);
    }

    #[test]
    fn chain_steps_survive_trimming(text in any::<String>()) {
        let chain = ReasoningChain::from_raw_text(&text);
        for step in &chain.steps {
            prop_assert!(!step.trim().is_empty());
            prop_assert_eq!(step.trim(), step.as_str());
        }
    }

    #[test]
    fn task_instance_serde_round_trips(inst in instance_strategy(0)) {
        let json = serde_json::to_string(&inst).unwrap();
        let back: TaskInstance = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, inst);
    }

    #[test]
    fn evaluation_result_serde_round_trips(
        score in 0.0f64..=1.0,
        keys in proptest::collection::btree_map("[a-z]{1,6}", finite_f64(), 0..4),
        failed in any::<bool>(),
        log in proptest::collection::vec("[a-z0-9 :]{0,20}", 0..4),
    ) {
        let result = EvaluationResult {
            instance_id: "inst-0".to_string(),
            evaluator_id: "vera".to_string(),
            final_score: score,
            breakdown: keys,
            rationale: "because".to_string(),
            repetition_index: 2,
            cost: CostStats::default(),
            status: if failed { ResultStatus::Failed } else { ResultStatus::Ok },
            error: failed.then(|| "boom".to_string()),
            execution_log: log,
        };
        let json = serde_json::to_string(&result).unwrap();
        let back: EvaluationResult = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, result);
    }

    #[test]
    fn run_manifest_serde_round_trips(
        reps in 1u32..6,
        tau in 0.0f64..=1.01,
        seed in any::<u64>(),
        flags in any::<(bool, bool)>(),
        policy in prop_oneof![
            Just(CachePolicy::ReadWrite),
            Just(CachePolicy::ReadOnly),
            Just(CachePolicy::Disabled),
        ],
        path in "[a-z]{1,8}(/[a-z]{1,8}){0,2}",
    ) {
        let mut manifest = RunManifest::new("vera");
        manifest.datasets = vec![DatasetRef {
            dataset_id: "d0".to_string(),
            path: path.into(),
        }];
        manifest.repetitions = reps;
        manifest.tau = tau;
        manifest.seed = seed;
        manifest.no_verification = flags.0;
        manifest.no_ambiguity = flags.1;
        manifest.cache_policy = policy;
        let json = serde_json::to_string(&manifest).unwrap();
        let back: RunManifest = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, manifest);
    }

    #[test]
    fn rank_metrics_ignore_monotone_score_transforms(samples in samples_strategy()) {
        let transformed: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample::new(3.0 * s.score + 1.0 + s.score.powi(3), s.label))
            .collect();
        let tol = 1e-9;
        let d = metrics::somers_d(&samples).unwrap();
        let dt = metrics::somers_d(&transformed).unwrap();
        prop_assert!((d - dt).abs() < tol, "somers {} vs {}", d, dt);
        let auc = metrics::aucroc(&samples).unwrap();
        let auct = metrics::aucroc(&transformed).unwrap();
        prop_assert!((auc - auct).abs() < tol, "aucroc {} vs {}", auc, auct);
        let pr = metrics::auprc(&samples).unwrap();
        let prt = metrics::auprc(&transformed).unwrap();
        prop_assert!((pr - prt).abs() < tol, "auprc {} vs {}", pr, prt);
        let rho = metrics::spearman_rho(&samples).unwrap().rho;
        let rhot = metrics::spearman_rho(&transformed).unwrap().rho;
        prop_assert!((rho - rhot).abs() < tol, "rho {} vs {}", rho, rhot);
    }

    #[test]
    fn rank_metrics_ignore_sample_order(samples in samples_strategy().prop_shuffle()) {
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap()
                .then(a.label.cmp(&b.label))
        });
        let tol = 1e-12;
        let pairs = [
            (metrics::somers_d(&samples).unwrap(), metrics::somers_d(&sorted).unwrap()),
            (metrics::aucroc(&samples).unwrap(), metrics::aucroc(&sorted).unwrap()),
            (metrics::auprc(&samples).unwrap(), metrics::auprc(&sorted).unwrap()),
            (
                metrics::spearman_rho(&samples).unwrap().rho,
                metrics::spearman_rho(&sorted).unwrap().rho,
            ),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() < tol, "{} vs {}", a, b);
        }
    }

    #[test]
    fn penalty_is_gated_and_never_positive(
        a in 0.0f64..=1.0,
        h in 0.0f64..=1.0,
        tau in 0.0f64..=1.01,
        p in 0.0f64..=1.0,
    ) {
        let delta = compute_penalty(a, h, tau);
        prop_assert!(delta <= 0.0);
        if a < tau || h >= 0.5 {
            prop_assert_eq!(delta, 0.0);
        }
        let final_score = combine(p, delta);
        prop_assert!((0.0..=1.0).contains(&final_score));
        prop_assert!(final_score <= p);
    }

    #[test]
    fn json_payload_is_extracted_from_surrounding_prose(
        fields in proptest::collection::btree_map("[a-z]{1,6}", any::<String>(), 1..4),
        prefix in "[a-zA-Z0-9 \n`.:)}\\]]{0,40}",
        suffix in any::<String>(),
    ) {
        let object = serde_json::to_value(&fields).unwrap();
        let text = format!("{}{}{}", prefix, serde_json::to_string(&object).unwrap(), suffix);
        let parsed = parse_json_payload(&text).unwrap();
        prop_assert_eq!(parsed, object);
    }

    #[test]
    fn sample_size_is_monotone(
        population in 1u64..5000,
        extra in 0u64..500,
        m1 in 0.01f64..0.2,
        m2 in 0.01f64..0.2,
    ) {
        let n = sample_size(population, 0.90, 0.05).unwrap();
        let larger = sample_size(population + extra, 0.90, 0.05).unwrap();
        prop_assert!(n <= larger);
        prop_assert!(n >= 1 && n <= population);
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let tight = sample_size(population, 0.95, lo).unwrap();
        let loose = sample_size(population, 0.95, hi).unwrap();
        prop_assert!(tight >= loose);
    }

    #[test]
    fn sampling_is_deterministic_and_without_replacement(
        n in 1usize..20,
        pool in 20usize..40,
        seed in any::<u64>(),
    ) {
        let population: Vec<TaskInstance> = (0..pool)
            .map(|i| TaskInstance {
                id: format!("inst-{}", i),
                dataset_id: "prop".to_string(),
                category: TaskCategory::Generation,
                question: "Q".to_string(),
                chain: ReasoningChain::from_raw_text("Step."),
                output: "A".to_string(),
                label: (i % 2) as u8,
            })
            .collect();
        let once = sample(&population, n, seed).unwrap();
        let twice = sample(&population, n, seed).unwrap();
        prop_assert_eq!(&once, &twice);
        let ids: std::collections::BTreeSet<&str> =
            once.iter().map(|i| i.id.as_str()).collect();
        prop_assert_eq!(ids.len(), n);
        let pool_ids: std::collections::BTreeSet<&str> =
            population.iter().map(|i| i.id.as_str()).collect();
        prop_assert!(ids.is_subset(&pool_ids));
    }

    #[test]
    fn normalized_labels_are_well_shaped_and_stable(raw in ".{0,60}") {
        let label = normalize_label(&raw);
        prop_assert!(label
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'));
        prop_assert!(label.split('_').filter(|w| !w.is_empty()).count() <= 5);
        prop_assert_eq!(normalize_label(&label), label);
    }

    #[test]
    fn dataset_files_round_trip_with_consistent_stats(instances in dataset_strategy()) {
        prop_assert!(validate_dataset(&instances).is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.jsonl");
        write_dataset(&path, &instances).unwrap();
        let (loaded, stats) = load_dataset(&path, "prop").unwrap();
        prop_assert_eq!(&loaded, &instances);
        prop_assert_eq!(stats.clone(), LoadStats::from_instances("prop", &loaded));
        let correct = instances.iter().filter(|i| i.label == 1).count();
        prop_assert_eq!(stats.correct, correct);
        prop_assert_eq!(stats.incorrect, instances.len() - correct);
    }
}
