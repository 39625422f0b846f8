//! Learnable parameters and concept score tensors.
//!
//! A [`ParamStore`] owns one embedding per (concept, arity) plus three small
//! MLP encoders (objects, pairs, triples) and a temperature. Scores are dot
//! products between encoded features and concept embeddings, divided by the
//! temperature; they live on logit scale, not in [0, 1].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{Arity, ConceptName, ConceptVocabulary};
use crate::scene::Detection;
use crate::tape::{GradMap, Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ConceptsError {
    #[error("unknown concept `{concept}` at arity {arity:?}")]
    UnknownConcept { concept: ConceptName, arity: Arity },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary mismatch: checkpoint lacks {missing:?} (pass --extend-vocab to add them)")]
    VocabMismatch { missing: Vec<ConceptName> },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Identifies one parameter tensor in the store.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    Embedding { arity: Arity, concept: ConceptName },
    UnaryW1,
    UnaryB1,
    UnaryW2,
    UnaryB2,
    PairW1,
    PairB1,
    PairW2,
    PairB2,
    TripleW1,
    TripleB1,
    TripleW2,
    TripleB2,
    Temperature,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Embedding { arity, concept } => write!(f, "embedding/{}/{}", arity.as_u8(), concept),
            other => {
                let s = match other {
                    ParamKey::UnaryW1 => "unary_w1",
                    ParamKey::UnaryB1 => "unary_b1",
                    ParamKey::UnaryW2 => "unary_w2",
                    ParamKey::UnaryB2 => "unary_b2",
                    ParamKey::PairW1 => "pair_w1",
                    ParamKey::PairB1 => "pair_b1",
                    ParamKey::PairW2 => "pair_w2",
                    ParamKey::PairB2 => "pair_b2",
                    ParamKey::TripleW1 => "triple_w1",
                    ParamKey::TripleB1 => "triple_b1",
                    ParamKey::TripleW2 => "triple_w2",
                    ParamKey::TripleB2 => "triple_b2",
                    ParamKey::Temperature => "temperature",
                    ParamKey::Embedding { .. } => unreachable!(),
                };
                f.write_str(s)
            }
        }
    }
}

impl ParamKey {
    fn parse(s: &str) -> Result<Self, ConceptsError> {
        let bad = || ConceptsError::Checkpoint(format!("unknown parameter key `{s}`"));
        if let Some(rest) = s.strip_prefix("embedding/") {
            let (arity, concept) = rest.split_once('/').ok_or_else(bad)?;
            let arity = match arity {
                "1" => Arity::Unary,
                "2" => Arity::Binary,
                "3" => Arity::Ternary,
                _ => return Err(bad()),
            };
            let concept = ConceptName::new(concept).map_err(|_| bad())?;
            return Ok(ParamKey::Embedding { arity, concept });
        }
        Ok(match s {
            "unary_w1" => ParamKey::UnaryW1,
            "unary_b1" => ParamKey::UnaryB1,
            "unary_w2" => ParamKey::UnaryW2,
            "unary_b2" => ParamKey::UnaryB2,
            "pair_w1" => ParamKey::PairW1,
            "pair_b1" => ParamKey::PairB1,
            "pair_w2" => ParamKey::PairW2,
            "pair_b2" => ParamKey::PairB2,
            "triple_w1" => ParamKey::TripleW1,
            "triple_b1" => ParamKey::TripleB1,
            "triple_w2" => ParamKey::TripleW2,
            "triple_b2" => ParamKey::TripleB2,
            "temperature" => ParamKey::Temperature,
            _ => return Err(bad()),
        })
    }
}

/// Number of relative-geometry scalars appended to pair features
/// (Δcenter and distance).
pub const PAIR_GEOMETRY_DIM: usize = 4;
/// Triples append Δcenter and distance to each anchor.
pub const TRIPLE_GEOMETRY_DIM: usize = 8;

/// All trainable state: concept embeddings, encoder weights, temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    dim: usize,
    attr_dim: usize,
    vocab: ConceptVocabulary,
    params: BTreeMap<ParamKey, Tensor>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Initialize a store for the vocabulary: scaled-uniform weights
/// (scale 1/√fan_in), zero biases, temperature 1.
pub fn init_params(
    vocab: &ConceptVocabulary,
    dim: usize,
    attr_dim: usize,
    seed: u64,
) -> Result<ParamStore, ConceptsError> {
    if dim == 0 {
        return Err(ConceptsError::InvalidConfig("embedding dim must be ≥ 1".into()));
    }
    if attr_dim == 0 {
        return Err(ConceptsError::InvalidConfig("attribute dim must be ≥ 1".into()));
    }
    if vocab.is_empty() {
        return Err(ConceptsError::InvalidConfig("empty concept vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for (set, arity) in [
        (&vocab.unary, Arity::Unary),
        (&vocab.binary, Arity::Binary),
        (&vocab.ternary, Arity::Ternary),
    ] {
        for concept in set {
            params.insert(
                ParamKey::Embedding { arity, concept: concept.clone() },
                uniform_tensor(&mut rng, &[dim], dim),
            );
        }
    }
    let pair_in = 2 * attr_dim + PAIR_GEOMETRY_DIM;
    let triple_in = 3 * attr_dim + TRIPLE_GEOMETRY_DIM;
    for (w1, b1, w2, b2, d_in) in [
        (ParamKey::UnaryW1, ParamKey::UnaryB1, ParamKey::UnaryW2, ParamKey::UnaryB2, attr_dim),
        (ParamKey::PairW1, ParamKey::PairB1, ParamKey::PairW2, ParamKey::PairB2, pair_in),
        (ParamKey::TripleW1, ParamKey::TripleB1, ParamKey::TripleW2, ParamKey::TripleB2, triple_in),
    ] {
        params.insert(w1, uniform_tensor(&mut rng, &[d_in, dim], d_in));
        params.insert(b1, Tensor::zeros(&[dim]));
        params.insert(w2, uniform_tensor(&mut rng, &[dim, dim], dim));
        params.insert(b2, Tensor::zeros(&[dim]));
    }
    params.insert(ParamKey::Temperature, Tensor::scalar(1.0));
    Ok(ParamStore { dim, attr_dim, vocab: vocab.clone(), params })
}

/// Policy when a required concept is missing from a loaded checkpoint.
#[derive(Clone, Copy, Debug)]
pub enum ExtendPolicy {
    Reject,
    /// Add freshly initialized embeddings for the missing concepts.
    Extend { seed: u64 },
}

impl ParamStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn vocab(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    pub fn tau(&self) -> f64 {
        self.params[&ParamKey::Temperature].as_scalar()
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.params.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.params.get_mut(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.params.keys()
    }

    pub fn has_concept(&self, concept: &ConceptName, arity: Arity) -> bool {
        self.params.contains_key(&ParamKey::Embedding { arity, concept: concept.clone() })
    }

    /// Rename a concept everywhere (embedding key and vocabulary). Purely a
    /// relabeling: scores are unchanged when the program renames with it.
    pub fn rename_concept(&mut self, from: &ConceptName, to: &ConceptName, arity: Arity) {
        let old_key = ParamKey::Embedding { arity, concept: from.clone() };
        if let Some(t) = self.params.remove(&old_key) {
            self.params.insert(ParamKey::Embedding { arity, concept: to.clone() }, t);
            let set = match arity {
                Arity::Unary => &mut self.vocab.unary,
                Arity::Binary => &mut self.vocab.binary,
                Arity::Ternary => &mut self.vocab.ternary,
            };
            set.remove(from);
            set.insert(to.clone());
        }
    }

    /// Check that every concept in `needed` has an embedding; extend or
    /// reject per policy. New embeddings are seeded per concept name so the
    /// result does not depend on insertion order.
    pub fn ensure_vocab(
        &mut self,
        needed: &ConceptVocabulary,
        policy: ExtendPolicy,
    ) -> Result<(), ConceptsError> {
        let mut missing = Vec::new();
        for (set, arity) in [
            (&needed.unary, Arity::Unary),
            (&needed.binary, Arity::Binary),
            (&needed.ternary, Arity::Ternary),
        ] {
            for c in set {
                if !self.has_concept(c, arity) {
                    missing.push((c.clone(), arity));
                }
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        match policy {
            ExtendPolicy::Reject => Err(ConceptsError::VocabMismatch {
                missing: missing.into_iter().map(|(c, _)| c).collect(),
            }),
            ExtendPolicy::Extend { seed } => {
                for (concept, arity) in missing {
                    let mut hasher = Sha256::new();
                    hasher.update(seed.to_le_bytes());
                    hasher.update(concept.as_str().as_bytes());
                    let s = u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap());
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let emb = uniform_tensor(&mut rng, &[self.dim], self.dim);
                    let set = match arity {
                        Arity::Unary => &mut self.vocab.unary,
                        Arity::Binary => &mut self.vocab.binary,
                        Arity::Ternary => &mut self.vocab.ternary,
                    };
                    set.insert(concept.clone());
                    self.params.insert(ParamKey::Embedding { arity, concept }, emb);
                }
                Ok(())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ConceptsError> {
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dim: self.dim,
            attr_dim: self.attr_dim,
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .iter()
                .map(|(k, t)| (k.to_string(), TensorRecord { shape: t.shape().to_vec(), data: t.data().to_vec() }))
                .collect(),
        };
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer(&mut f, &record).map_err(|e| ConceptsError::Checkpoint(e.to_string()))?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore, ConceptsError> {
        let f = std::fs::File::open(path)?;
        let record: CheckpointRecord = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| ConceptsError::Checkpoint(e.to_string()))?;
        if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
            return Err(ConceptsError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                record.format, record.version
            )));
        }
        let mut params = BTreeMap::new();
        for (k, t) in record.tensors {
            params.insert(ParamKey::parse(&k)?, Tensor::new(t.shape, t.data));
        }
        if !params.contains_key(&ParamKey::Temperature) {
            return Err(ConceptsError::Checkpoint("missing temperature".into()));
        }
        Ok(ParamStore { dim: record.dim, attr_dim: record.attr_dim, vocab: record.vocab, params })
    }
}

const CHECKPOINT_FORMAT: &str = "param-store";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    dim: usize,
    attr_dim: usize,
    vocab: ConceptVocabulary,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Maps store parameters to tape leaves for one forward pass, inserting each
/// parameter at most once.
pub struct ParamBinding<'a> {
    store: &'a ParamStore,
    ids: BTreeMap<ParamKey, TensorId>,
}

impl<'a> ParamBinding<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        ParamBinding { store, ids: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn id(&mut self, tape: &mut Tape, key: &ParamKey) -> TensorId {
        if let Some(id) = self.ids.get(key) {
            return *id;
        }
        let tensor = self.store.params[key].clone();
        let id = tape.param(tensor);
        self.ids.insert(key.clone(), id);
        id
    }

    fn embedding(
        &mut self,
        tape: &mut Tape,
        concept: &ConceptName,
        arity: Arity,
    ) -> Result<TensorId, ConceptsError> {
        let key = ParamKey::Embedding { arity, concept: concept.clone() };
        if !self.store.params.contains_key(&key) {
            return Err(ConceptsError::UnknownConcept { concept: concept.clone(), arity });
        }
        Ok(self.id(tape, &key))
    }

    /// Collect this pass's gradients keyed by parameter.
    pub fn gradients(&self, grads: &GradMap) -> BTreeMap<ParamKey, Tensor> {
        self.ids
            .iter()
            .filter_map(|(k, id)| grads.get(*id).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Encoded features for one detected scene. Pair and triple features are
/// materialized lazily on first use.
pub struct SceneFeatures {
    n: usize,
    attrs: Vec<Vec<f64>>,
    centers: Vec<[f64; 3]>,
    object_feats: TensorId,
    pair_feats: Option<TensorId>,
    triple_feats: Option<TensorId>,
}

fn mlp(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    input: TensorId,
    w1: ParamKey,
    b1: ParamKey,
    w2: ParamKey,
    b2: ParamKey,
) -> TensorId {
    let w1 = binding.id(tape, &w1);
    let b1 = binding.id(tape, &b1);
    let w2 = binding.id(tape, &w2);
    let b2 = binding.id(tape, &b2);
    let h = tape.linear(input, w1);
    let h = tape.add_row(h, b1);
    let h = tape.tanh(h);
    let out = tape.linear(h, w2);
    tape.add_row(out, b2)
}

/// Encode detections into per-object features; geometry inputs are retained
/// so pair/triple features can be built on demand.
pub fn encode_scene(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    detections: &[Detection],
) -> SceneFeatures {
    let n = detections.len();
    let attr_dim = binding.store().attr_dim();
    let mut rows = Vec::with_capacity(n * attr_dim);
    for d in detections {
        assert_eq!(d.attributes.len(), attr_dim, "detection attribute dim mismatch");
        rows.extend_from_slice(&d.attributes);
    }
    let input = tape.leaf(Tensor::matrix(n, attr_dim, rows));
    let object_feats = mlp(
        tape,
        binding,
        input,
        ParamKey::UnaryW1,
        ParamKey::UnaryB1,
        ParamKey::UnaryW2,
        ParamKey::UnaryB2,
    );
    SceneFeatures {
        n,
        attrs: detections.iter().map(|d| d.attributes.clone()).collect(),
        centers: detections.iter().map(|d| d.box3.center).collect(),
        object_feats,
        pair_feats: None,
        triple_feats: None,
    }
}

impl SceneFeatures {
    pub fn n_objects(&self) -> usize {
        self.n
    }

    pub fn object_feats(&self) -> TensorId {
        self.object_feats
    }

    fn geometry(&self, i: usize, j: usize) -> [f64; 4] {
        let (ci, cj) = (self.centers[i], self.centers[j]);
        let d = [cj[0] - ci[0], cj[1] - ci[1], cj[2] - ci[2]];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0], d[1], d[2], dist]
    }

    /// Pair features as an (N·N)×d matrix; diagonal rows are computed from
    /// zeroed inputs and only ever consumed through masked ops.
    pub fn pair_feats(&mut self, tape: &mut Tape, binding: &mut ParamBinding) -> TensorId {
        if let Some(id) = self.pair_feats {
            return id;
        }
        let n = self.n;
        let a = binding.store().attr_dim();
        let width = 2 * a + PAIR_GEOMETRY_DIM;
        let mut rows = vec![0.0; n * n * width];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let base = (i * n + j) * width;
                rows[base..base + a].copy_from_slice(&self.attrs[i]);
                rows[base + a..base + 2 * a].copy_from_slice(&self.attrs[j]);
                rows[base + 2 * a..base + width].copy_from_slice(&self.geometry(i, j));
            }
        }
        let input = tape.leaf(Tensor::matrix(n * n, width, rows));
        let feats = mlp(
            tape,
            binding,
            input,
            ParamKey::PairW1,
            ParamKey::PairB1,
            ParamKey::PairW2,
            ParamKey::PairB2,
        );
        self.pair_feats = Some(feats);
        feats
    }

    pub fn triple_feats(&mut self, tape: &mut Tape, binding: &mut ParamBinding) -> TensorId {
        if let Some(id) = self.triple_feats {
            return id;
        }
        let n = self.n;
        let a = binding.store().attr_dim();
        let width = 3 * a + TRIPLE_GEOMETRY_DIM;
        let mut rows = vec![0.0; n * n * n * width];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i == j || i == k || j == k {
                        continue;
                    }
                    let base = ((i * n + j) * n + k) * width;
                    rows[base..base + a].copy_from_slice(&self.attrs[i]);
                    rows[base + a..base + 2 * a].copy_from_slice(&self.attrs[j]);
                    rows[base + 2 * a..base + 3 * a].copy_from_slice(&self.attrs[k]);
                    rows[base + 3 * a..base + 3 * a + 4].copy_from_slice(&self.geometry(i, j));
                    rows[base + 3 * a + 4..base + width].copy_from_slice(&self.geometry(i, k));
                }
            }
        }
        let input = tape.leaf(Tensor::matrix(n * n * n, width, rows));
        let feats = mlp(
            tape,
            binding,
            input,
            ParamKey::TripleW1,
            ParamKey::TripleB1,
            ParamKey::TripleW2,
            ParamKey::TripleB2,
        );
        self.triple_feats = Some(feats);
        feats
    }
}

/// Produces score tensors for concepts during execution. Implemented by the
/// learned path below and by the one-hot oracle in the executor module.
pub trait ConceptScorer {
    fn n_objects(&self) -> usize;
    fn unary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError>;
    fn binary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError>;
    fn ternary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError>;
}

/// Logit scores for `concept` over objects: ⟨object_feats_i, embedding⟩ / τ.
pub fn unary_scores(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    feats: &SceneFeatures,
    concept: &ConceptName,
) -> Result<TensorId, ConceptsError> {
    let emb = binding.embedding(tape, concept, Arity::Unary)?;
    let raw = tape.matvec(feats.object_feats, emb);
    let tau = binding.id(tape, &ParamKey::Temperature);
    Ok(tape.div_scalar(raw, tau))
}

/// N×N score matrix; the diagonal is masked by every consumer.
pub fn binary_scores(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    feats: &mut SceneFeatures,
    concept: &ConceptName,
) -> Result<TensorId, ConceptsError> {
    let emb = binding.embedding(tape, concept, Arity::Binary)?;
    let pf = feats.pair_feats(tape, binding);
    let raw = tape.matvec(pf, emb);
    let tau = binding.id(tape, &ParamKey::Temperature);
    let scaled = tape.div_scalar(raw, tau);
    let n = feats.n;
    Ok(tape.reshape(scaled, vec![n, n]))
}

/// N×N×N score tensor; repeated-index entries are masked by every consumer.
pub fn ternary_scores(
    tape: &mut Tape,
    binding: &mut ParamBinding,
    feats: &mut SceneFeatures,
    concept: &ConceptName,
) -> Result<TensorId, ConceptsError> {
    let emb = binding.embedding(tape, concept, Arity::Ternary)?;
    let tf = feats.triple_feats(tape, binding);
    let raw = tape.matvec(tf, emb);
    let tau = binding.id(tape, &ParamKey::Temperature);
    let scaled = tape.div_scalar(raw, tau);
    let n = feats.n;
    Ok(tape.reshape(scaled, vec![n, n, n]))
}

/// Scorer over a live [`ParamBinding`] and encoded scene; score tensors are
/// computed once per concept and reused.
pub struct LearnedScorer<'a> {
    pub binding: ParamBinding<'a>,
    feats: SceneFeatures,
    cache: BTreeMap<(Arity, ConceptName), TensorId>,
}

impl<'a> LearnedScorer<'a> {
    pub fn new(tape: &mut Tape, store: &'a ParamStore, detections: &[Detection]) -> Self {
        let mut binding = ParamBinding::new(store);
        let feats = encode_scene(tape, &mut binding, detections);
        LearnedScorer { binding, feats, cache: BTreeMap::new() }
    }

    pub fn features(&self) -> &SceneFeatures {
        &self.feats
    }
}

impl ConceptScorer for LearnedScorer<'_> {
    fn n_objects(&self) -> usize {
        self.feats.n
    }

    fn unary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError> {
        if let Some(id) = self.cache.get(&(Arity::Unary, concept.clone())) {
            return Ok(*id);
        }
        let id = unary_scores(tape, &mut self.binding, &self.feats, concept)?;
        self.cache.insert((Arity::Unary, concept.clone()), id);
        Ok(id)
    }

    fn binary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError> {
        if let Some(id) = self.cache.get(&(Arity::Binary, concept.clone())) {
            return Ok(*id);
        }
        let id = binary_scores(tape, &mut self.binding, &mut self.feats, concept)?;
        self.cache.insert((Arity::Binary, concept.clone()), id);
        Ok(id)
    }

    fn ternary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError> {
        if let Some(id) = self.cache.get(&(Arity::Ternary, concept.clone())) {
            return Ok(*id);
        }
        let id = ternary_scores(tape, &mut self.binding, &mut self.feats, concept)?;
        self.cache.insert((Arity::Ternary, concept.clone()), id);
        Ok(id)
    }
}
