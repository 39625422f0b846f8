//! Subcommand implementations. Every command creates its output directory,
//! writes a resolved-config snapshot and a manifest of produced files, and
//! maps errors onto exit codes (2 = configuration, 1 = runtime).

use std::path::{Path, PathBuf};

use refground_core::concepts::{init_params, ExtendPolicy, ParamStore};
use refground_core::data::{self, DatasetConfig};
use refground_core::dsl::{self, Arity, ConceptName, ConceptVocabulary, GroundingQuery};
use refground_core::eval::{self, ExperimentConfig};
use refground_core::exec;
use refground_core::learn::{self, LearnError};
use refground_core::rules::{
    self, CompletionBackend, RemoteConfig, RuleSet, RulesError, DEFAULT_RULE_FILE,
};
use refground_core::scene::{self, Rulebook};
use refground_core::tape::Tape;

use crate::config::Settings;

/// Errors split by exit code: configuration problems exit 2, everything
/// else exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RulesError> for CliError {
    fn from(e: RulesError) -> Self {
        match e {
            RulesError::MissingAuthToken(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),+) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })+
    };
}

runtime_from!(
    std::io::Error,
    serde_json::Error,
    refground_core::scene::SceneError,
    refground_core::data::DataError,
    refground_core::dsl::DslError,
    refground_core::eval::EvalError
);

impl From<refground_core::concepts::ConceptsError> for CliError {
    fn from(e: refground_core::concepts::ConceptsError) -> Self {
        match e {
            refground_core::concepts::ConceptsError::InvalidConfig(_)
            | refground_core::concepts::ConceptsError::VocabMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Tracks produced files; written as `manifest.json` in the output dir.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path, settings: &Settings) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)?;
        let mut out = OutDir { root: root.to_path_buf(), files: Vec::new() };
        out.write("resolved_config.txt", settings.to_key_values().as_bytes())?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.note(name);
        Ok(path)
    }

    pub fn note(&mut self, name: &str) {
        if !self.files.contains(&name.to_string()) {
            self.files.push(name.to_string());
        }
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.files.push("manifest.json".into());
        let manifest = serde_json::json!({ "files": self.files });
        std::fs::write(self.root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn dataset_config(settings: &Settings) -> Result<DatasetConfig, CliError> {
    Ok(DatasetConfig {
        generator: settings.generator_config()?,
        n_scenes: settings.scenes,
        queries_per_scene: settings.queries_per_scene,
        query_attempts: settings.query_attempts,
        noise_level: settings.noise_level,
        eval_fraction: settings.eval_fraction,
        data_fraction: settings.data_fraction,
        holdout: settings.parse_holdout()?,
        holdout_negated: settings.holdout_negated,
        templates: dsl::default_templates(),
        transfer_templates: if settings.transfer_templates {
            dsl::paraphrase_templates()
        } else {
            Vec::new()
        },
    })
}

fn backend_from(settings: &Settings, cache_dir: PathBuf) -> Result<CompletionBackend, CliError> {
    match settings.backend.as_str() {
        "fixture" => Ok(CompletionBackend::Fixture { rule_file: None }),
        "replay" => Ok(CompletionBackend::Replay { cache_dir }),
        "remote" => Ok(CompletionBackend::Remote {
            config: RemoteConfig {
                endpoint: settings.endpoint.clone(),
                auth_env: settings.auth_env.clone(),
                model: settings.model.clone(),
                ..RemoteConfig::default()
            },
            cache_dir,
        }),
        other => Err(CliError::Config(format!(
            "unknown backend `{other}` (expected fixture, replay or remote)"
        ))),
    }
}

fn load_rules(rules_file: Option<&Path>) -> Result<RuleSet, CliError> {
    let text = match rules_file {
        Some(path) => std::fs::read_to_string(path)?,
        None => DEFAULT_RULE_FILE.to_string(),
    };
    Ok(rules::parse_rule_file(&text)?)
}

fn full_vocabulary(settings: &Settings) -> Result<ConceptVocabulary, CliError> {
    let mut vocab = ConceptVocabulary::default();
    for cat in settings.parse_vocabulary()? {
        vocab.unary.insert(cat);
    }
    for rel in scene::BINARY_RELATIONS {
        vocab.binary.insert(ConceptName::new(rel).expect("builtin relation"));
    }
    for rel in scene::TERNARY_RELATIONS {
        vocab.ternary.insert(ConceptName::new(rel).expect("builtin relation"));
    }
    Ok(vocab)
}

pub fn gen_data(settings: &Settings, out: &Path) -> Result<(), CliError> {
    let mut dir = OutDir::create(out, settings)?;
    let cfg = dataset_config(settings)?;
    let dataset = data::build_dataset(&cfg, settings.seed)?;

    let rules = load_rules(None)?;
    let violations = eval::oracle_validate(&dataset, &cfg.generator.rulebook, &rules);
    if !violations.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} queries fail oracle validation, first: {:?}",
            violations.len(),
            violations[0]
        )));
    }

    data::save_dataset(out, &dataset)?;
    for name in [
        "scenes.jsonl",
        "queries_train.jsonl",
        "queries_eval.jsonl",
        "queries_zero_shot.jsonl",
        "queries_transfer.jsonl",
        "split_manifest.json",
    ] {
        dir.note(name);
    }
    println!(
        "generated {} scenes; queries: {} train / {} eval / {} zero-shot / {} transfer (all oracle-validated)",
        dataset.scenes.len(),
        dataset.train.len(),
        dataset.eval.len(),
        dataset.zero_shot.len(),
        dataset.transfer.len()
    );
    dir.finish()
}

/// Vocabulary for distillation: extracted from a dataset when given,
/// otherwise the configured generator vocabulary plus the builtin relations.
fn distill_vocab(settings: &Settings, data_dir: Option<&Path>) -> Result<ConceptVocabulary, CliError> {
    match data_dir {
        Some(dir) => {
            let dataset = data::load_dataset(dir)?;
            let mut programs: Vec<dsl::ProgramAst> = Vec::new();
            for split in [&dataset.train, &dataset.eval, &dataset.zero_shot, &dataset.transfer] {
                programs.extend(split.iter().map(|q| q.program.clone()));
            }
            Ok(dsl::extract_concepts(&programs)?)
        }
        None => full_vocabulary(settings),
    }
}

pub fn distill(settings: &Settings, out: &Path, data_dir: Option<&Path>) -> Result<(), CliError> {
    let mut dir = OutDir::create(out, settings)?;
    let vocab = distill_vocab(settings, data_dir)?;
    let cache_dir = dir.path("prompt_cache");
    let backend = backend_from(settings, cache_dir.clone())?;
    let ruleset = rules::distill_rules(&vocab, &backend)?;
    dir.write("rules.txt", rules::format_rule_file(&ruleset).as_bytes())?;
    if cache_dir.exists() {
        dir.note("prompt_cache/");
    }
    println!(
        "distilled rules: {} symmetric, {} exclusive, {} synonym groups, {} antonym pairs, {} compositions",
        ruleset.symmetric_concepts().count(),
        ruleset.exclusive_concepts().count(),
        ruleset.synonym_groups().len(),
        ruleset.antonym_pair_count(),
        ruleset.composition_concepts().count(),
    );
    dir.finish()
}

pub fn train(
    settings: &Settings,
    out: &Path,
    data_dir: &Path,
    rules_file: Option<&Path>,
) -> Result<(), CliError> {
    let mut dir = OutDir::create(out, settings)?;
    let dataset = data::load_dataset(data_dir)?;
    let ruleset = load_rules(rules_file)?;
    let vocab = data::train_vocab(&dataset)?;
    let vocab = rules::extend_vocab_for_training(&vocab, &ruleset);
    let attr_dim = dataset
        .scenes
        .first()
        .and_then(|s| s.detections.first())
        .map(|d| d.attributes.len())
        .ok_or_else(|| CliError::Runtime("dataset has no detections".into()))?;
    let params = init_params(&vocab, settings.dim, attr_dim, data::derive_seed(settings.seed, "init", 0))?;
    let weights = settings.loss_weights();
    let config = settings.train_config()?;

    match learn::train(&dataset, params, &ruleset, &weights, &config) {
        Ok(output) => {
            let mut lines = String::new();
            for m in &output.metrics {
                lines.push_str(&serde_json::to_string(m)?);
                lines.push('\n');
            }
            dir.write("metrics.jsonl", lines.as_bytes())?;
            output.params.save(&dir.path("checkpoint.json"))?;
            dir.note("checkpoint.json");
            if let Some(last) = output.metrics.last() {
                println!(
                    "trained {} epochs; final train loss {:.4}, eval accuracy {:.4}",
                    last.epoch + 1,
                    last.train_loss,
                    last.eval_acc
                );
            }
            dir.finish()
        }
        Err(LearnError::Diverged { epoch, checkpoint, metrics }) => {
            let mut lines = String::new();
            for m in &metrics {
                lines.push_str(&serde_json::to_string(m)?);
                lines.push('\n');
            }
            dir.write("metrics.jsonl", lines.as_bytes())?;
            checkpoint.save(&dir.path("checkpoint_last_finite.json"))?;
            dir.note("checkpoint_last_finite.json");
            dir.finish()?;
            Err(CliError::Runtime(format!(
                "training diverged at epoch {epoch}; last finite checkpoint saved"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// Concepts the executor will look up directly for these queries: filters and
/// plain relations as written, antonyms for negated relations, composition
/// components for unseen ternaries.
fn required_concepts(queries: &[GroundingQuery], ruleset: &RuleSet, params: &ParamStore) -> ConceptVocabulary {
    let mut needed = ConceptVocabulary::default();
    for q in queries {
        q.program.visit_concepts(&mut |c, arity, negated| {
            let effective = if negated {
                match ruleset.resolve_antonym(c) {
                    Ok(a) => a.clone(),
                    Err(_) => return, // unresolvable at runtime regardless
                }
            } else {
                c.clone()
            };
            match arity {
                Arity::Unary => {
                    needed.unary.insert(effective);
                }
                Arity::Binary => {
                    needed.binary.insert(effective);
                }
                Arity::Ternary => {
                    if params.has_concept(&effective, Arity::Ternary) {
                        needed.ternary.insert(effective);
                    } else if let Some(spec) = ruleset.composition(&effective) {
                        needed.binary.insert(spec.first.clone());
                        needed.binary.insert(spec.second.clone());
                    } else {
                        needed.ternary.insert(effective);
                    }
                }
            }
        });
    }
    needed
}

pub struct EvalArgs<'a> {
    pub data_dir: &'a Path,
    pub checkpoint: &'a Path,
    pub rules_file: Option<&'a Path>,
    pub split: String,
    pub extend_vocab: bool,
    pub emit_matrices: bool,
    pub dump_trace: bool,
}

pub fn eval_cmd(settings: &Settings, out: &Path, args: &EvalArgs) -> Result<(), CliError> {
    let mut dir = OutDir::create(out, settings)?;
    let dataset = data::load_dataset(args.data_dir)?;
    let ruleset = load_rules(args.rules_file)?;
    let mut params = ParamStore::load(args.checkpoint)?;

    let queries: &[GroundingQuery] = match args.split.as_str() {
        "eval" => &dataset.eval,
        "train" => &dataset.train,
        "zero-shot" => &dataset.zero_shot,
        "transfer" => &dataset.transfer,
        other => {
            return Err(CliError::Config(format!(
                "unknown split `{other}` (expected eval, train, zero-shot or transfer)"
            )))
        }
    };

    let needed = required_concepts(queries, &ruleset, &params);
    let policy = if args.extend_vocab {
        ExtendPolicy::Extend { seed: data::derive_seed(settings.seed, "extend", 0) }
    } else {
        ExtendPolicy::Reject
    };
    params.ensure_vocab(&needed, policy)?;

    let metrics = match args.split.as_str() {
        "zero-shot" => eval::zero_shot_eval(&dataset, &params, &ruleset)?,
        "transfer" => eval::transfer_eval(&dataset.scenes, queries, &params, &ruleset),
        _ => eval::evaluate(&dataset.scenes, queries, &params, &ruleset),
    };
    dir.write("metrics.json", serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    println!(
        "split {}: accuracy {:.4} ({}/{}), {} failures",
        args.split, metrics.overall_acc, metrics.correct, metrics.total,
        metrics.failures.len()
    );

    if args.emit_matrices {
        let scene_ids: Vec<usize> = {
            let mut ids: Vec<usize> = queries.iter().map(|q| q.scene_ref).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.truncate(5);
            ids
        };
        let concepts_to_dump: Vec<ConceptName> = ruleset
            .symmetric_concepts()
            .chain(ruleset.exclusive_concepts())
            .cloned()
            .collect();
        let mut buf = Vec::new();
        eval::emit_relation_matrices(&mut buf, &dataset.scenes, &scene_ids, &params, &concepts_to_dump)?;
        dir.write("matrices.txt", &buf)?;
    }

    if args.dump_trace {
        let mut text = String::new();
        for (i, q) in queries.iter().take(settings.dump_trace_queries).enumerate() {
            let scene = &dataset.scenes[q.scene_ref];
            let mut tape = Tape::new();
            let mut scorer =
                refground_core::concepts::LearnedScorer::new(&mut tape, &params, &scene.detections);
            text.push_str(&format!("## query {i}: {}\n", q.utterance));
            match exec::execute(&mut tape, &mut scorer, &ruleset, &q.program) {
                Ok(trace) => text.push_str(&exec::format_trace(&tape, &trace, 3)),
                Err(e) => text.push_str(&format!("error: {e}\n")),
            }
            text.push('\n');
        }
        dir.write("traces.txt", text.as_bytes())?;
    }
    dir.finish()
}

pub fn sweep(
    settings: &Settings,
    out: &Path,
    kind: &str,
    axis: &str,
    rules_file: Option<&Path>,
) -> Result<(), CliError> {
    let mut dir = OutDir::create(out, settings)?;
    let axis: Vec<f64> = axis
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|e| CliError::Config(format!("bad axis value `{t}`: {e}"))))
        .collect::<Result<_, _>>()?;
    let ruleset = load_rules(rules_file)?;
    let base = ExperimentConfig {
        dataset: dataset_config(settings)?,
        train: settings.train_config()?,
        weights: settings.loss_weights(),
        rules: ruleset,
        dim: settings.dim,
        seed: settings.seed,
    };
    let result = match kind {
        "data" => eval::data_efficiency_sweep(&axis, &base)?,
        "noise" => eval::noise_sweep(&axis, &base)?,
        other => {
            return Err(CliError::Config(format!("unknown sweep kind `{other}` (expected data or noise)")))
        }
    };
    let mut csv = Vec::new();
    eval::write_sweep_csv(&mut csv, &result)?;
    dir.write("sweep.csv", &csv)?;
    dir.write("sweep.json", serde_json::to_string_pretty(&result)?.as_bytes())?;
    println!("{}", String::from_utf8_lossy(&csv));
    dir.finish()
}

/// Three collinear objects; compose `center` from oracle left/right matrices
/// and print the composed argmax next to the oracle's own answer.
pub fn compose_demo(settings: &Settings) -> Result<(), CliError> {
    let mut gen = settings.generator_config()?;
    gen.n_objects = (3, 3);
    gen.ensure_distractors = false;
    let mut scene = scene::generate_scene(&gen, settings.seed)?;
    // Force a collinear lamp–couch–desk arrangement along x.
    let cats = ["lamp", "couch", "desk"];
    for (i, obj) in scene.objects.iter_mut().enumerate() {
        obj.category = ConceptName::new(cats[i]).expect("builtin category");
        obj.box3.center = [i as f64 * 1.5 - 1.5, 0.0, 0.0];
    }
    let rulebook = Rulebook::default();
    let ruleset = load_rules(None)?;
    let center = ConceptName::new("center").unwrap();

    let mut tape = Tape::new();
    let mut scorer = exec::OracleScorer::new(&scene, &rulebook);
    use refground_core::concepts::ConceptScorer;
    let left = scorer.binary(&mut tape, &ConceptName::new("left").unwrap())?;
    let right = scorer.binary(&mut tape, &ConceptName::new("right").unwrap())?;
    let composed = rules::compose_ternary(&mut tape, &ruleset, &center, left, right)?;

    let n = scene.len();
    let t = tape.value(composed);
    let (j, k) = (0usize, 2usize); // anchors: the lamp and the desk
    let mut best = None;
    for i in 0..n {
        if i == j || i == k {
            continue;
        }
        let v = t.data()[(i * n + j) * n + k];
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    let composed_answer = best.map(|(i, _)| i).unwrap_or(0);
    let mut oracle_answer = None;
    for i in 0..n {
        if i != j && i != k && rulebook.holds(&scene, "center", i, j, Some(k))? {
            oracle_answer = Some(i);
        }
    }
    println!("scene: lamp at x=-1.5, couch at x=0.0, desk at x=+1.5");
    println!("query: the object in the center of the lamp and the desk");
    println!(
        "composed argmax = {} ({}), oracle answer = {} ({})",
        composed_answer,
        scene.objects[composed_answer].category,
        oracle_answer.map(|i| i.to_string()).unwrap_or_else(|| "none".into()),
        oracle_answer.map(|i| scene.objects[i].category.to_string()).unwrap_or_else(|| "none".into()),
    );
    if oracle_answer != Some(composed_answer) {
        return Err(CliError::Runtime("composition disagrees with the oracle".into()));
    }
    Ok(())
}
