//! Evaluation protocol: overall accuracy against IoU-matched targets,
//! symmetric/exclusive subset accuracies, per-concept diagnostics behind the
//! learned relation matrices, zero-shot and transfer evaluation, and the
//! data-efficiency / noise sweeps.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{
    self, init_params, ConceptsError, LearnedScorer, ParamBinding, ParamStore,
};
use crate::data::{self, DataError, Dataset, DatasetConfig};
use crate::dsl::{Arity, ConceptName, GroundingQuery};
use crate::exec;
use crate::learn::{self, EpochMetrics, LearnError, LossWeights, TrainConfig};
use crate::rules::RuleSet;
use crate::scene::DetectedScene;
use crate::tape::Tape;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Concepts(#[from] ConceptsError),
    #[error("held-out concept `{0}` is present in the parameter store")]
    HoldoutLeak(ConceptName),
    #[error("invalid sweep axis: {0}")]
    InvalidAxis(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryFailure {
    pub query_index: usize,
    pub reason: String,
}

/// Accuracy and structure metrics over one query set.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_acc: f64,
    pub correct: usize,
    pub total: usize,
    /// Absent (not zero) when no query uses a concept of the class.
    pub symmetric_subset_acc: Option<f64>,
    pub exclusive_subset_acc: Option<f64>,
    pub per_concept_acc: BTreeMap<String, f64>,
    pub asymmetry_ratio: BTreeMap<String, f64>,
    pub co_positivity: BTreeMap<String, f64>,
    pub failures: Vec<QueryFailure>,
}

enum Outcome {
    Correct,
    Incorrect,
    Failed(String),
}

fn run_query(
    scenes: &[DetectedScene],
    query: &GroundingQuery,
    params: &ParamStore,
    rules: &RuleSet,
) -> Outcome {
    let scene = &scenes[query.scene_ref];
    let Some(target) = scene.matching.get(query.answer).copied().flatten() else {
        return Outcome::Failed("target object undetected".into());
    };
    let mut tape = Tape::new();
    let mut scorer = LearnedScorer::new(&mut tape, params, &scene.detections);
    match exec::execute(&mut tape, &mut scorer, rules, &query.program) {
        Ok(trace) => {
            if exec::predict(&trace) == target {
                Outcome::Correct
            } else {
                Outcome::Incorrect
            }
        }
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

fn subset_rate(hits: usize, total: usize) -> Option<f64> {
    if total == 0 {
        None
    } else {
        Some(hits as f64 / total as f64)
    }
}

/// Accuracy of `predict ∘ execute` against the IoU-matched target detection.
/// Unresolvable queries count as incorrect, with the reason recorded.
pub fn evaluate(
    scenes: &[DetectedScene],
    queries: &[GroundingQuery],
    params: &ParamStore,
    rules: &RuleSet,
) -> Metrics {
    let outcomes: Vec<Outcome> = queries
        .par_iter()
        .map(|q| run_query(scenes, q, params, rules))
        .collect();

    let mut m = Metrics { total: queries.len(), ..Metrics::default() };
    let (mut sym_hit, mut sym_total) = (0usize, 0usize);
    let (mut excl_hit, mut excl_total) = (0usize, 0usize);
    let mut concept_hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();

    for (idx, (q, outcome)) in queries.iter().zip(&outcomes).enumerate() {
        let correct = matches!(outcome, Outcome::Correct);
        if correct {
            m.correct += 1;
        }
        if let Outcome::Failed(reason) = outcome {
            m.failures.push(QueryFailure { query_index: idx, reason: reason.clone() });
        }
        let mut in_sym = false;
        let mut in_excl = false;
        q.program.visit_concepts(&mut |c, arity, _| {
            if arity == Arity::Binary {
                in_sym |= rules.is_symmetric(c);
                in_excl |= rules.is_exclusive(c);
            }
            if arity != Arity::Unary {
                let e = concept_hits.entry(c.to_string()).or_insert((0, 0));
                e.1 += 1;
                if correct {
                    e.0 += 1;
                }
            }
        });
        if in_sym {
            sym_total += 1;
            sym_hit += correct as usize;
        }
        if in_excl {
            excl_total += 1;
            excl_hit += correct as usize;
        }
    }
    m.overall_acc = if queries.is_empty() { 0.0 } else { m.correct as f64 / m.total as f64 };
    m.symmetric_subset_acc = subset_rate(sym_hit, sym_total);
    m.exclusive_subset_acc = subset_rate(excl_hit, excl_total);
    m.per_concept_acc = concept_hits
        .into_iter()
        .map(|(c, (hit, total))| (c, hit as f64 / total as f64))
        .collect();
    m
}

/// Per-concept structure diagnostics over held-out scenes.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// ‖P−Pᵀ‖ / ‖P‖ (Frobenius over valid entries), per symmetric concept.
    pub asymmetry_ratio: BTreeMap<String, f64>,
    /// Fraction of valid (i,j) with P[i,j] > 0 and P[j,i] > 0, per exclusive
    /// concept.
    pub co_positivity: BTreeMap<String, f64>,
}

fn relation_matrix(
    params: &ParamStore,
    scene: &DetectedScene,
    concept: &ConceptName,
) -> Option<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binding = ParamBinding::new(params);
    let mut feats = concepts::encode_scene(&mut tape, &mut binding, &scene.detections);
    let id = concepts::binary_scores(&mut tape, &mut binding, &mut feats, concept).ok()?;
    Some(tape.value(id).data().to_vec())
}

/// Compute asymmetry ratios and co-positivity rates for every constrained
/// concept the store knows, averaged over up to `max_scenes` scenes.
pub fn concept_diagnostics(
    scenes: &[DetectedScene],
    scene_ids: &[usize],
    params: &ParamStore,
    rules: &RuleSet,
    max_scenes: usize,
) -> Diagnostics {
    let ids: Vec<usize> = scene_ids.iter().copied().take(max_scenes).collect();
    let mut out = Diagnostics::default();
    for concept in rules.symmetric_concepts() {
        if !params.has_concept(concept, Arity::Binary) {
            continue;
        }
        let mut ratios = Vec::new();
        for &sid in &ids {
            let Some(p) = relation_matrix(params, &scenes[sid], concept) else { continue };
            let n = scenes[sid].detections.len();
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let d = p[i * n + j] - p[j * n + i];
                        num += d * d;
                        den += p[i * n + j] * p[i * n + j];
                    }
                }
            }
            ratios.push(if den > 0.0 { (num / den).sqrt() } else { 0.0 });
        }
        if !ratios.is_empty() {
            out.asymmetry_ratio
                .insert(concept.to_string(), ratios.iter().sum::<f64>() / ratios.len() as f64);
        }
    }
    for concept in rules.exclusive_concepts() {
        if !params.has_concept(concept, Arity::Binary) {
            continue;
        }
        let (mut co, mut total) = (0usize, 0usize);
        for &sid in &ids {
            let Some(p) = relation_matrix(params, &scenes[sid], concept) else { continue };
            let n = scenes[sid].detections.len();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        total += 1;
                        if p[i * n + j] > 0.0 && p[j * n + i] > 0.0 {
                            co += 1;
                        }
                    }
                }
            }
        }
        if total > 0 {
            out.co_positivity.insert(concept.to_string(), co as f64 / total as f64);
        }
    }
    out
}

/// Evaluate the held-out-concept split, first asserting that no held-out
/// ternary concept leaked into the parameter store.
pub fn zero_shot_eval(dataset: &Dataset, params: &ParamStore, rules: &RuleSet) -> Result<Metrics, EvalError> {
    for concept in &dataset.manifest.holdout_concepts {
        for arity in [Arity::Unary, Arity::Binary, Arity::Ternary] {
            if params.has_concept(concept, arity) {
                return Err(EvalError::HoldoutLeak(concept.clone()));
            }
        }
    }
    Ok(evaluate(&dataset.scenes, &dataset.zero_shot, params, rules))
}

/// Inference-only evaluation of unseen utterance templates.
pub fn transfer_eval(
    scenes: &[DetectedScene],
    transfer_queries: &[GroundingQuery],
    params: &ParamStore,
    rules: &RuleSet,
) -> Metrics {
    if transfer_queries.is_empty() {
        log::warn!("transfer template set is empty; returning empty metrics");
        return Metrics::default();
    }
    evaluate(scenes, transfer_queries, params, rules)
}

/// A full training-then-evaluation run specification.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub rules: RuleSet,
    /// Concept embedding dimension.
    pub dim: usize,
    pub seed: u64,
}

pub struct ExperimentResult {
    pub dataset: Dataset,
    pub params: ParamStore,
    pub epochs: Vec<EpochMetrics>,
    pub eval: Metrics,
    /// True when training aborted on a non-finite loss; `params` then holds
    /// the last finite checkpoint.
    pub diverged: bool,
}

/// Build the dataset, initialize parameters over the train vocabulary (plus
/// synonyms), train, and evaluate on the held-out scenes. All randomness
/// derives from `seed`. A diverging run is evaluated at its last finite
/// checkpoint rather than failing the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, EvalError> {
    let mut dataset_cfg = cfg.dataset.clone();
    dataset_cfg.noise_level = cfg.train.noise_level;
    dataset_cfg.data_fraction = cfg.train.data_fraction;
    let dataset = data::build_dataset(&dataset_cfg, data::derive_seed(cfg.seed, "data", 0))?;
    let vocab = data::train_vocab(&dataset)?;
    let vocab = crate::rules::extend_vocab_for_training(&vocab, &cfg.rules);
    let attr_dim = cfg.dataset.generator.attr_dim;
    let params = init_params(&vocab, cfg.dim, attr_dim, data::derive_seed(cfg.seed, "init", 0))?;
    let train_cfg = TrainConfig { seed: data::derive_seed(cfg.seed, "train", 0), ..cfg.train.clone() };
    let (params, epochs, diverged) = match learn::train(&dataset, params, &cfg.rules, &cfg.weights, &train_cfg) {
        Ok(out) => (out.params, out.metrics, false),
        Err(LearnError::Diverged { checkpoint, metrics, epoch }) => {
            log::warn!("training diverged at epoch {epoch}; evaluating last finite checkpoint");
            (*checkpoint, metrics, true)
        }
        Err(e) => return Err(e.into()),
    };
    let eval = evaluate(&dataset.scenes, &dataset.eval, &params, &cfg.rules);
    Ok(ExperimentResult { dataset, params, epochs, eval, diverged })
}

/// Metrics per point along one sweep axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis_name: String,
    pub axis: Vec<f64>,
    pub points: Vec<Metrics>,
}

fn check_axis(values: &[f64], lo: f64, hi: f64, name: &str) -> Result<(), EvalError> {
    if values.is_empty() {
        return Err(EvalError::InvalidAxis(format!("{name}: empty axis")));
    }
    for w in values.windows(2) {
        if w[1] <= w[0] {
            return Err(EvalError::InvalidAxis(format!("{name}: axis must be strictly increasing")));
        }
    }
    if values.iter().any(|v| *v < lo || *v > hi) {
        return Err(EvalError::InvalidAxis(format!("{name}: values outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Train from scratch at each data fraction against a fixed eval set.
pub fn data_efficiency_sweep(
    fractions: &[f64],
    base: &ExperimentConfig,
) -> Result<SweepResult, EvalError> {
    check_axis(fractions, f64::MIN_POSITIVE, 1.0, "data fraction")?;
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut cfg = base.clone();
        cfg.train.data_fraction = fraction;
        points.push(run_experiment(&cfg)?.eval);
    }
    Ok(SweepResult { axis_name: "data_fraction".into(), axis: fractions.to_vec(), points })
}

/// Train from scratch at each detector-noise level, same seeds across levels.
pub fn noise_sweep(levels: &[f64], base: &ExperimentConfig) -> Result<SweepResult, EvalError> {
    check_axis(levels, 0.0, 0.99, "noise level")?;
    let mut points = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut cfg = base.clone();
        cfg.train.noise_level = level;
        points.push(run_experiment(&cfg)?.eval);
    }
    Ok(SweepResult { axis_name: "noise_level".into(), axis: levels.to_vec(), points })
}

/// Check every query in every split against one-hot oracle execution on its
/// ground-truth scene; returns `(split, index, reason)` for each violation.
/// A freshly generated dataset must come back clean.
pub fn oracle_validate(dataset: &Dataset, rulebook: &crate::scene::Rulebook, rules: &RuleSet) -> Vec<(String, usize, String)> {
    let mut bad = Vec::new();
    for (split, queries) in [
        ("train", &dataset.train),
        ("eval", &dataset.eval),
        ("zero_shot", &dataset.zero_shot),
        ("transfer", &dataset.transfer),
    ] {
        for (idx, q) in queries.iter().enumerate() {
            let scene = &dataset.scenes[q.scene_ref].source;
            let mut tape = Tape::new();
            let mut scorer = exec::OracleScorer::new(scene, rulebook);
            match exec::execute(&mut tape, &mut scorer, rules, &q.program) {
                Ok(trace) => {
                    let got = exec::predict(&trace);
                    if got != q.answer {
                        bad.push((split.to_string(), idx, format!("oracle argmax {got} != answer {}", q.answer)));
                    }
                }
                Err(e) => bad.push((split.to_string(), idx, e.to_string())),
            }
        }
    }
    bad
}

/// Flat CSV, one row per axis point.
pub fn write_sweep_csv<W: Write>(mut w: W, sweep: &SweepResult) -> Result<(), EvalError> {
    writeln!(w, "{},overall_acc,symmetric_subset_acc,exclusive_subset_acc,correct,total", sweep.axis_name)?;
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (x, m) in sweep.axis.iter().zip(&sweep.points) {
        writeln!(
            w,
            "{x},{:.6},{},{},{},{}",
            m.overall_acc,
            fmt_opt(m.symmetric_subset_acc),
            fmt_opt(m.exclusive_subset_acc),
            m.correct,
            m.total,
        )?;
    }
    Ok(())
}

/// Dump per-concept relation matrices on the given scenes as numeric grids
/// (the data behind qualitative structure visualizations).
pub fn emit_relation_matrices<W: Write>(
    mut w: W,
    scenes: &[DetectedScene],
    scene_ids: &[usize],
    params: &ParamStore,
    concepts_to_dump: &[ConceptName],
) -> Result<(), EvalError> {
    for &sid in scene_ids {
        let scene = &scenes[sid];
        let n = scene.detections.len();
        for concept in concepts_to_dump {
            let Some(p) = relation_matrix(params, scene, concept) else { continue };
            writeln!(w, "# scene {sid} concept {concept} n {n}")?;
            for i in 0..n {
                let row: Vec<String> = (0..n)
                    .map(|j| if i == j { "masked".into() } else { format!("{:+.4}", p[i * n + j]) })
                    .collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::ConceptName;
    use crate::rules::{distill_rules, CompletionBackend};
    use crate::scene::GeneratorConfig;

    fn c(s: &str) -> ConceptName {
        ConceptName::new(s).unwrap()
    }

    fn tiny_experiment(seed: u64) -> ExperimentConfig {
        let dataset = DatasetConfig {
            generator: GeneratorConfig {
                n_objects: (4, 5),
                vocabulary: vec![c("chair"), c("shelf"), c("lamp"), c("wardrobe")],
                ..GeneratorConfig::default()
            },
            n_scenes: 12,
            queries_per_scene: 2,
            ..DatasetConfig::default()
        };
        let mut vocab = crate::dsl::ConceptVocabulary::default();
        for u in ["chair", "shelf", "lamp", "wardrobe", "dresser"] {
            vocab.unary.insert(c(u));
        }
        for b in crate::scene::BINARY_RELATIONS {
            vocab.binary.insert(c(b));
        }
        for t in crate::scene::TERNARY_RELATIONS {
            vocab.ternary.insert(c(t));
        }
        let rules = distill_rules(&vocab, &CompletionBackend::Fixture { rule_file: None }).unwrap();
        ExperimentConfig {
            dataset,
            train: TrainConfig { epochs: 2, ..TrainConfig::default() },
            weights: LossWeights::default(),
            rules,
            dim: 8,
            seed,
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_order_insensitive() {
        let cfg = tiny_experiment(3);
        let result = run_experiment(&cfg).unwrap();
        let d = &result.dataset;
        let a = evaluate(&d.scenes, &d.eval, &result.params, &cfg.rules);
        let b = evaluate(&d.scenes, &d.eval, &result.params, &cfg.rules);
        assert_eq!(a.overall_acc, b.overall_acc);
        let mut reversed = d.eval.clone();
        reversed.reverse();
        let r = evaluate(&d.scenes, &reversed, &result.params, &cfg.rules);
        assert_eq!(a.correct, r.correct);
    }

    #[test]
    fn empty_subsets_report_absent_not_zero() {
        let cfg = tiny_experiment(4);
        let result = run_experiment(&cfg).unwrap();
        let d = &result.dataset;
        // Only unary queries: no relation concepts at all.
        let unary_queries: Vec<_> = d
            .eval
            .iter()
            .filter(|q| matches!(q.program, crate::dsl::ProgramAst::Filter { .. }))
            .cloned()
            .collect();
        let m = evaluate(&d.scenes, &unary_queries, &result.params, &cfg.rules);
        assert!(m.symmetric_subset_acc.is_none());
        assert!(m.exclusive_subset_acc.is_none());
    }

    #[test]
    fn sweep_axes_are_validated() {
        let cfg = tiny_experiment(5);
        assert!(matches!(
            data_efficiency_sweep(&[0.5, 0.5], &cfg),
            Err(EvalError::InvalidAxis(_))
        ));
        assert!(matches!(
            data_efficiency_sweep(&[], &cfg),
            Err(EvalError::InvalidAxis(_))
        ));
        assert!(matches!(noise_sweep(&[0.2, 0.1], &cfg), Err(EvalError::InvalidAxis(_))));
    }

    #[test]
    fn single_point_sweep_equals_plain_run() {
        let cfg = tiny_experiment(6);
        let plain = run_experiment(&cfg).unwrap();
        let sweep = data_efficiency_sweep(&[1.0], &cfg).unwrap();
        assert_eq!(sweep.points.len(), 1);
        assert_eq!(sweep.points[0].overall_acc, plain.eval.overall_acc);
        let noise = noise_sweep(&[0.0], &cfg).unwrap();
        assert_eq!(noise.points[0].overall_acc, plain.eval.overall_acc);
    }

    #[test]
    fn transfer_eval_on_empty_set_warns_and_returns_empty() {
        let cfg = tiny_experiment(7);
        let result = run_experiment(&cfg).unwrap();
        let m = transfer_eval(&result.dataset.scenes, &[], &result.params, &cfg.rules);
        assert_eq!(m.total, 0);
    }

    #[test]
    fn sweep_csv_has_one_row_per_point() {
        let cfg = tiny_experiment(8);
        let sweep = data_efficiency_sweep(&[0.5, 1.0], &cfg).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &sweep).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("data_fraction,"));
    }
}
