//! Dataset assembly: generate scenes, perturb them with detector noise,
//! instantiate query templates, and split into train / eval / zero-shot /
//! transfer sets. Files are line-delimited JSON with a version header.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{
    self, ConceptName, ConceptVocabulary, DslError, GroundingQuery, ProgramAst, TemplateSpec,
};
use crate::scene::{self, DetectedScene, Detection, GeneratorConfig, SceneError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse: {0}")]
    Parse(String),
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
}

/// Split a root seed into independent per-component streams.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(index.to_le_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub noise_level: f64,
    pub holdout_concepts: Vec<ConceptName>,
    pub holdout_negated: bool,
    pub counts: BTreeMap<String, usize>,
}

/// A complete benchmark: detected scenes plus query splits. `zero_shot`
/// holds the queries whose concepts were removed from training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<DetectedScene>,
    pub train: Vec<GroundingQuery>,
    pub eval: Vec<GroundingQuery>,
    pub zero_shot: Vec<GroundingQuery>,
    pub transfer: Vec<GroundingQuery>,
    pub manifest: SplitManifest,
}

#[derive(Clone, Debug)]
pub struct DatasetConfig {
    pub generator: GeneratorConfig,
    pub n_scenes: usize,
    pub queries_per_scene: usize,
    /// Template draws attempted per query slot before giving up on it.
    pub query_attempts: usize,
    pub noise_level: f64,
    /// Fraction of scenes (and their queries) reserved for evaluation.
    pub eval_fraction: f64,
    /// Fraction of surviving train queries actually kept.
    pub data_fraction: f64,
    pub holdout: Vec<ConceptName>,
    pub holdout_negated: bool,
    pub templates: Vec<TemplateSpec>,
    pub transfer_templates: Vec<TemplateSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            generator: GeneratorConfig::default(),
            n_scenes: 100,
            queries_per_scene: 4,
            query_attempts: 12,
            noise_level: 0.0,
            eval_fraction: 0.2,
            data_fraction: 1.0,
            holdout: Vec::new(),
            holdout_negated: false,
            templates: dsl::default_templates(),
            transfer_templates: Vec::new(),
        }
    }
}

fn is_held_out(program: &ProgramAst, holdout: &[ConceptName], holdout_negated: bool) -> bool {
    if holdout_negated && program.has_negation() {
        return true;
    }
    holdout.iter().any(|c| program.uses_concept(c))
}

/// Generate scenes and queries deterministically from `(config, seed)`.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Dataset, DataError> {
    if cfg.n_scenes == 0 {
        return Err(DataError::InvalidConfig("n_scenes must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.eval_fraction) {
        return Err(DataError::InvalidConfig("eval_fraction must be in [0, 1)".into()));
    }
    if !(0.0..=1.0).contains(&cfg.data_fraction) || cfg.data_fraction == 0.0 {
        return Err(DataError::InvalidConfig("data_fraction must be in (0, 1]".into()));
    }
    if cfg.templates.is_empty() {
        return Err(DataError::InvalidConfig("no query templates".into()));
    }

    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let s = scene::generate_scene(&cfg.generator, derive_seed(seed, "scene", i as u64))?;
        let d = scene::apply_detector_noise(&s, cfg.noise_level, derive_seed(seed, "noise", i as u64))?;
        scenes.push(d);
    }
    let n_eval = ((cfg.n_scenes as f64) * cfg.eval_fraction).round() as usize;
    let n_train_scenes = cfg.n_scenes - n_eval;

    let gen_queries = |scene_idx: usize,
                       templates: &[TemplateSpec],
                       tag: &str|
     -> Result<Vec<GroundingQuery>, DataError> {
        let detected = &scenes[scene_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, scene_idx as u64));
        let mut out: Vec<GroundingQuery> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for slot in 0..cfg.queries_per_scene {
            for attempt in 0..cfg.query_attempts {
                let template = &templates[rng.gen_range(0..templates.len())];
                let qseed = derive_seed(
                    seed,
                    &format!("{tag}-q"),
                    ((scene_idx * cfg.queries_per_scene + slot) * cfg.query_attempts + attempt) as u64,
                );
                match dsl::generate_query(
                    &detected.source,
                    scene_idx,
                    &cfg.generator.rulebook,
                    template,
                    qseed,
                ) {
                    Ok(q) => {
                        if seen.insert(dsl::print_program(&q.program)) {
                            out.push(q);
                            break;
                        }
                    }
                    Err(DslError::NotRealizable { .. }) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(out)
    };

    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut zero_shot = Vec::new();
    for idx in 0..cfg.n_scenes {
        let queries = gen_queries(idx, &cfg.templates, "query")?;
        let held: Vec<bool> = queries
            .iter()
            .map(|q| is_held_out(&q.program, &cfg.holdout, cfg.holdout_negated))
            .collect();
        if idx < n_train_scenes {
            // Held-out concepts never reach training; a train query also needs
            // its target detected.
            for (q, h) in queries.into_iter().zip(held) {
                if !h && scenes[idx].matching[q.answer].is_some() {
                    train.push(q);
                }
            }
        } else {
            for (q, h) in queries.into_iter().zip(held) {
                if h {
                    zero_shot.push(q);
                } else {
                    eval.push(q);
                }
            }
        }
    }

    let mut transfer = Vec::new();
    if !cfg.transfer_templates.is_empty() {
        for idx in n_train_scenes..cfg.n_scenes {
            transfer.extend(gen_queries(idx, &cfg.transfer_templates, "transfer")?);
        }
    }

    if cfg.data_fraction < 1.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fraction", 0));
        let mut indices: Vec<usize> = (0..train.len()).collect();
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let keep = ((train.len() as f64) * cfg.data_fraction).ceil().max(1.0) as usize;
        let mut kept: Vec<usize> = indices.into_iter().take(keep).collect();
        kept.sort_unstable();
        train = kept.into_iter().map(|i| train[i].clone()).collect();
    }

    let mut counts = BTreeMap::new();
    counts.insert("scenes".into(), scenes.len());
    counts.insert("train".into(), train.len());
    counts.insert("eval".into(), eval.len());
    counts.insert("zero_shot".into(), zero_shot.len());
    counts.insert("transfer".into(), transfer.len());
    let manifest = SplitManifest {
        seed,
        noise_level: cfg.noise_level,
        holdout_concepts: cfg.holdout.clone(),
        holdout_negated: cfg.holdout_negated,
        counts,
    };
    Ok(Dataset { scenes, train, eval, zero_shot, transfer, manifest })
}

/// The vocabulary needed to train on this dataset (train split only).
pub fn train_vocab(dataset: &Dataset) -> Result<ConceptVocabulary, DataError> {
    let programs: Vec<ProgramAst> = dataset.train.iter().map(|q| q.program.clone()).collect();
    Ok(dsl::extract_concepts(&programs)?)
}

/// What training is allowed to see: detected boxes and attributes, the
/// program, and the target detection index. No ground-truth categories.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub detections: Vec<Detection>,
    pub program: ProgramAst,
    pub target: usize,
}

/// Project a query onto its naturally-supervised form; `None` when the
/// target object went undetected.
pub fn project_example(scene: &DetectedScene, query: &GroundingQuery) -> Option<TrainExample> {
    let target = scene.matching.get(query.answer).copied().flatten()?;
    Some(TrainExample {
        detections: scene.detections.clone(),
        program: query.program.clone(),
        target,
    })
}

/// Expected accuracy of uniform guessing over detections.
pub fn chance_accuracy(scenes: &[DetectedScene], queries: &[GroundingQuery]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let total: f64 = queries
        .iter()
        .map(|q| 1.0 / scenes[q.scene_ref].detections.len().max(1) as f64)
        .sum();
    total / queries.len() as f64
}

const QUERY_FORMAT: &str = "query-dataset";
const QUERY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct QueryHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    utterance: String,
    program: String,
    scene_ref: usize,
    answer: usize,
}

pub fn write_queries<W: Write>(mut w: W, queries: &[GroundingQuery]) -> Result<(), DataError> {
    let header = QueryHeader { format: QUERY_FORMAT.into(), version: QUERY_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for q in queries {
        let rec = QueryRecord {
            utterance: q.utterance.clone(),
            program: dsl::print_program(&q.program),
            scene_ref: q.scene_ref,
            answer: q.answer,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("query serializes"))?;
    }
    Ok(())
}

pub fn read_queries<R: BufRead>(r: R) -> Result<Vec<GroundingQuery>, DataError> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or_else(|| DataError::Parse("empty query dataset".into()))??;
    let header: QueryHeader = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Parse(format!("bad header: {e}")))?;
    if header.format != QUERY_FORMAT || header.version != QUERY_VERSION {
        return Err(DataError::Parse(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse(format!("record {}: {e}", lineno + 2)))?;
        out.push(GroundingQuery {
            utterance: rec.utterance,
            program: dsl::parse_program(&rec.program)?,
            scene_ref: rec.scene_ref,
            answer: rec.answer,
        });
    }
    Ok(out)
}

/// Write all dataset files under `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    scene::write_scenes(std::fs::File::create(dir.join("scenes.jsonl"))?, &dataset.scenes)?;
    for (name, queries) in [
        ("queries_train.jsonl", &dataset.train),
        ("queries_eval.jsonl", &dataset.eval),
        ("queries_zero_shot.jsonl", &dataset.zero_shot),
        ("queries_transfer.jsonl", &dataset.transfer),
    ] {
        write_queries(std::fs::File::create(dir.join(name))?, queries)?;
    }
    let manifest = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| DataError::Parse(e.to_string()))?;
    std::fs::write(dir.join("split_manifest.json"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let open = |name: &str| -> Result<std::io::BufReader<std::fs::File>, DataError> {
        Ok(std::io::BufReader::new(std::fs::File::open(dir.join(name))?))
    };
    let scenes = scene::read_scenes(open("scenes.jsonl")?)?;
    let train = read_queries(open("queries_train.jsonl")?)?;
    let eval = read_queries(open("queries_eval.jsonl")?)?;
    let zero_shot = read_queries(open("queries_zero_shot.jsonl")?)?;
    let transfer = read_queries(open("queries_transfer.jsonl")?)?;
    let manifest: SplitManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("split_manifest.json"))?)
            .map_err(|e| DataError::Parse(e.to_string()))?;
    Ok(Dataset { scenes, train, eval, zero_shot, transfer, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> ConceptName {
        ConceptName::new(s).unwrap()
    }

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            generator: GeneratorConfig {
                n_objects: (4, 6),
                vocabulary: vec![c("chair"), c("shelf"), c("lamp"), c("desk")],
                ..GeneratorConfig::default()
            },
            n_scenes: 12,
            queries_per_scene: 3,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small_cfg();
        let a = build_dataset(&cfg, 5).unwrap();
        let b = build_dataset(&cfg, 5).unwrap();
        assert_eq!(a.scenes, b.scenes);
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval, b.eval);
        assert!(!a.train.is_empty());
        assert!(!a.eval.is_empty());
    }

    #[test]
    fn holdout_concepts_never_reach_training() {
        let mut cfg = small_cfg();
        cfg.holdout = vec![c("center"), c("between")];
        cfg.holdout_negated = true;
        cfg.n_scenes = 20;
        let d = build_dataset(&cfg, 9).unwrap();
        for q in &d.train {
            assert!(!q.program.uses_concept(&c("center")));
            assert!(!q.program.uses_concept(&c("between")));
            assert!(!q.program.has_negation());
        }
        assert!(
            d.zero_shot.iter().any(|q| q.program.uses_concept(&c("center"))
                || q.program.uses_concept(&c("between"))
                || q.program.has_negation()),
            "zero-shot split should collect held-out queries"
        );
    }

    #[test]
    fn data_fraction_subsamples_train_only() {
        let cfg = small_cfg();
        let full = build_dataset(&cfg, 7).unwrap();
        let mut frac_cfg = small_cfg();
        frac_cfg.data_fraction = 0.25;
        let frac = build_dataset(&frac_cfg, 7).unwrap();
        assert_eq!(full.eval, frac.eval);
        let expect = ((full.train.len() as f64) * 0.25).ceil() as usize;
        assert_eq!(frac.train.len(), expect);
        for q in &frac.train {
            assert!(full.train.contains(q));
        }
    }

    #[test]
    fn train_targets_are_always_detected() {
        let mut cfg = small_cfg();
        cfg.noise_level = 0.4;
        let d = build_dataset(&cfg, 21).unwrap();
        for q in &d.train {
            assert!(d.scenes[q.scene_ref].matching[q.answer].is_some());
            assert!(project_example(&d.scenes[q.scene_ref], q).is_some());
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let cfg = small_cfg();
        let d = build_dataset(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.scenes, d.scenes);
        assert_eq!(back.train, d.train);
        assert_eq!(back.eval, d.eval);
        assert_eq!(back.zero_shot, d.zero_shot);
        assert_eq!(back.transfer, d.transfer);
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, "scene", 0), derive_seed(1, "noise", 0));
        assert_ne!(derive_seed(1, "scene", 0), derive_seed(2, "scene", 0));
        assert_eq!(derive_seed(1, "scene", 3), derive_seed(1, "scene", 3));
    }
}
