//! Concept constraint rules: which relations are symmetric or exclusive,
//! which object categories are synonymous, the antonym lookup table, and
//! composition recipes for unseen ternary relations.
//!
//! Rules are distilled from a pluggable text-completion backend. The remote
//! path caches every completion by prompt hash; replay mode serves the cache
//! without touching the network; fixture mode reads a rule file directly.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{ConceptName, ConceptVocabulary};
use crate::tape::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("inconsistent rules: {0}")]
    Inconsistent(String),
    #[error("no antonym recorded for `{0}`")]
    MissingAntonym(String),
    #[error("no composition rule for `{0}`")]
    MissingComposition(String),
    #[error("auth token env var `{0}` is not set")]
    MissingAuthToken(String),
    #[error("completion backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("rule file parse error at line {line}: {message}")]
    RuleFile { line: usize, message: String },
    #[error("rules io: {0}")]
    Io(#[from] std::io::Error),
}

/// How an unseen ternary concept decomposes into two learned binary
/// concepts: `T[i,j,k] = max(F[i,j]+S[i,k], S[i,j]+F[i,k])`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub first: ConceptName,
    pub second: ConceptName,
}

/// Distilled language constraints. Construction validates every invariant:
/// symmetric/exclusive disjointness, antonym involution without fixed
/// points, pairwise-disjoint synonym groups.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub(crate) symmetric: BTreeSet<ConceptName>,
    pub(crate) exclusive: BTreeSet<ConceptName>,
    pub(crate) synonym_groups: Vec<BTreeSet<ConceptName>>,
    pub(crate) antonyms: BTreeMap<ConceptName, ConceptName>,
    pub(crate) compositions: BTreeMap<ConceptName, CompositionSpec>,
}

impl RuleSet {
    pub fn empty() -> Self {
        RuleSet::default()
    }

    pub fn new(
        symmetric: BTreeSet<ConceptName>,
        exclusive: BTreeSet<ConceptName>,
        synonym_groups: Vec<BTreeSet<ConceptName>>,
        antonyms: BTreeMap<ConceptName, ConceptName>,
        compositions: BTreeMap<ConceptName, CompositionSpec>,
    ) -> Result<Self, RulesError> {
        let rs = RuleSet { symmetric, exclusive, synonym_groups, antonyms, compositions };
        rs.validate()?;
        Ok(rs)
    }

    pub fn validate(&self) -> Result<(), RulesError> {
        let both: Vec<_> = self.symmetric.intersection(&self.exclusive).collect();
        if !both.is_empty() {
            return Err(RulesError::Inconsistent(format!(
                "concepts in both symmetric and exclusive sets: {}",
                both.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        for (a, b) in &self.antonyms {
            if a == b {
                return Err(RulesError::Inconsistent(format!("`{a}` is its own antonym")));
            }
            match self.antonyms.get(b) {
                Some(back) if back == a => {}
                _ => {
                    return Err(RulesError::Inconsistent(format!(
                        "antonym map is not an involution at `{a}` ↔ `{b}`"
                    )))
                }
            }
        }
        let mut seen: BTreeSet<&ConceptName> = BTreeSet::new();
        for group in &self.synonym_groups {
            if group.len() < 2 {
                return Err(RulesError::Inconsistent("synonym group with fewer than 2 members".into()));
            }
            for m in group {
                if !seen.insert(m) {
                    return Err(RulesError::Inconsistent(format!(
                        "`{m}` appears in more than one synonym group"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_symmetric(&self, c: &ConceptName) -> bool {
        self.symmetric.contains(c)
    }

    pub fn is_exclusive(&self, c: &ConceptName) -> bool {
        self.exclusive.contains(c)
    }

    pub fn symmetric_concepts(&self) -> impl Iterator<Item = &ConceptName> {
        self.symmetric.iter()
    }

    pub fn exclusive_concepts(&self) -> impl Iterator<Item = &ConceptName> {
        self.exclusive.iter()
    }

    pub fn synonym_groups(&self) -> &[BTreeSet<ConceptName>] {
        &self.synonym_groups
    }

    /// Other members of `c`'s synonym group, if any.
    pub fn synonyms_of(&self, c: &ConceptName) -> Option<Vec<&ConceptName>> {
        self.synonym_groups
            .iter()
            .find(|g| g.contains(c))
            .map(|g| g.iter().filter(|m| *m != c).collect())
    }

    pub fn resolve_antonym(&self, c: &ConceptName) -> Result<&ConceptName, RulesError> {
        self.antonyms.get(c).ok_or_else(|| RulesError::MissingAntonym(c.to_string()))
    }

    pub fn composition(&self, c: &ConceptName) -> Option<&CompositionSpec> {
        self.compositions.get(c)
    }

    pub fn antonym_pair_count(&self) -> usize {
        self.antonyms.len() / 2
    }

    pub fn composition_concepts(&self) -> impl Iterator<Item = &ConceptName> {
        self.compositions.keys()
    }

    /// A copy with composition and antonym rules removed; the "no language
    /// rules" ablation for zero-shot tests.
    pub fn without_composition_rules(&self) -> RuleSet {
        RuleSet {
            symmetric: self.symmetric.clone(),
            exclusive: self.exclusive.clone(),
            synonym_groups: self.synonym_groups.clone(),
            antonyms: BTreeMap::new(),
            compositions: BTreeMap::new(),
        }
    }

    /// Drop every rule mentioning a concept outside the vocabulary. Synonym
    /// groups are kept whole while at least one member is known: the other
    /// members are lexical variants that augmentation substitutes in.
    fn restricted_to(&self, vocab: &ConceptVocabulary) -> RuleSet {
        let keep_binary = |c: &ConceptName| vocab.binary.contains(c);
        let symmetric = self.symmetric.iter().filter(|c| keep_binary(c)).cloned().collect();
        let exclusive: BTreeSet<_> = self.exclusive.iter().filter(|c| keep_binary(c)).cloned().collect();
        let synonym_groups: Vec<BTreeSet<ConceptName>> = self
            .synonym_groups
            .iter()
            .filter(|g| g.iter().any(|c| vocab.unary.contains(c)))
            .cloned()
            .collect();
        let antonyms = self
            .antonyms
            .iter()
            .filter(|(a, b)| keep_binary(a) && keep_binary(b))
            .map(|(a, b)| (a.clone(), b.clone()))
            .collect();
        let compositions = self
            .compositions
            .iter()
            .filter(|(c, spec)| {
                vocab.ternary.contains(*c) && keep_binary(&spec.first) && keep_binary(&spec.second)
            })
            .map(|(c, s)| (c.clone(), s.clone()))
            .collect();
        RuleSet { symmetric, exclusive, synonym_groups, antonyms, compositions }
    }
}

/// Build an unseen ternary concept's score tensor from two binary score
/// matrices per the concept's composition rule. Symmetric in the two anchor
/// roles and monotone in every input entry.
pub fn compose_ternary(
    tape: &mut Tape,
    rules: &RuleSet,
    concept: &ConceptName,
    left_scores: TensorId,
    right_scores: TensorId,
) -> Result<TensorId, RulesError> {
    if rules.composition(concept).is_none() {
        return Err(RulesError::MissingComposition(concept.to_string()));
    }
    let (ls, rs) = (tape.value(left_scores).shape(), tape.value(right_scores).shape());
    if ls != rs || ls.len() != 2 || ls[0] != ls[1] {
        return Err(RulesError::Inconsistent(format!(
            "composition inputs must be equal square matrices, got {ls:?} and {rs:?}"
        )));
    }
    Ok(tape.compose_max_pair(left_scores, right_scores))
}

/// Prompt texts sent to the completion backend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompts {
    pub relation: String,
    pub synonym_round1: String,
    pub synonym_round2: String,
}

fn comma_list<'a, I: Iterator<Item = &'a ConceptName>>(items: I) -> String {
    items.map(|c| c.as_str()).collect::<Vec<_>>().join(", ")
}

/// Fill the fixed prompt templates with the vocabulary's concept lists
/// (sorted, comma-separated).
pub fn build_prompts(vocab: &ConceptVocabulary) -> Prompts {
    if vocab.binary.is_empty() {
        log::warn!("building relation prompt with an empty relation list");
    }
    let relation = format!(
        "We define two kinds of spatial relations: Asymmetric relations are relations that \
         don't exhibit reciprocity when the order of the objects is reversed. Symmetric \
         relations are relations that exhibit reciprocity when the order of the objects is \
         reversed. Here are some relations: {}. For each relation, specify whether it is a \
         symmetric relation or an asymmetric relation.",
        comma_list(vocab.binary.iter())
    );
    let synonym_round1 = format!(
        "Here are some object categories: {}. List categories that have similar meanings.",
        comma_list(vocab.unary.iter())
    );
    let synonym_round2 = "Within each group, list categories that have similar appearances.".to_string();
    Prompts { relation, synonym_round1, synonym_round2 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    RelationClassification,
    SynonymGroups,
}

/// Partial rules recovered from one completion.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedRules {
    pub symmetric: BTreeSet<ConceptName>,
    pub asymmetric: BTreeSet<ConceptName>,
    /// Asymmetric relations the response explicitly marked exclusive.
    pub exclusive: BTreeSet<ConceptName>,
    pub synonym_groups: Vec<BTreeSet<ConceptName>>,
    pub warnings: Vec<String>,
}

/// Tolerant line-oriented parsing of completion text. Concepts outside the
/// vocabulary are dropped with a warning; concepts with no recognizable
/// classification stay unconstrained, never guessed.
pub fn parse_response(kind: RuleKind, text: &str, vocab: &ConceptVocabulary) -> ParsedRules {
    let mut out = ParsedRules::default();
    match kind {
        RuleKind::RelationClassification => {
            let mut classified: BTreeSet<ConceptName> = BTreeSet::new();
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let lower = line.to_lowercase();
                let tokens: Vec<String> = lower
                    .split(|ch: char| !(ch.is_ascii_lowercase() || ch.is_ascii_digit() || ch == '_'))
                    .filter(|t| !t.is_empty())
                    .map(str::to_string)
                    .collect();
                let Some(concept) = tokens.iter().find_map(|t| {
                    ConceptName::new(t).ok().filter(|c| vocab.binary.contains(c))
                }) else {
                    if tokens.iter().any(|t| t == "symmetric" || t == "asymmetric") {
                        out.warnings.push(format!("line names no known relation: `{line}`"));
                    }
                    continue;
                };
                let is_asym = tokens.iter().any(|t| t == "asymmetric");
                let is_sym = !is_asym && tokens.iter().any(|t| t == "symmetric");
                let is_excl = tokens.iter().any(|t| t == "exclusive");
                if is_asym {
                    out.asymmetric.insert(concept.clone());
                    if is_excl {
                        out.exclusive.insert(concept.clone());
                    }
                    classified.insert(concept);
                } else if is_sym {
                    out.symmetric.insert(concept.clone());
                    classified.insert(concept);
                } else {
                    out.warnings.push(format!("no classification for `{concept}`; left unconstrained"));
                }
            }
            for c in &vocab.binary {
                if !classified.contains(c) {
                    out.warnings.push(format!("relation `{c}` unresolved; left unconstrained"));
                }
            }
        }
        RuleKind::SynonymGroups => {
            for line in text.lines() {
                let line = line.trim();
                let Some(start) = line.find('[') else { continue };
                let Some(end) = line[start..].find(']') else { continue };
                let mut group = BTreeSet::new();
                for raw in line[start + 1..start + end].split(',') {
                    match ConceptName::normalize(raw) {
                        Ok(c) if vocab.unary.contains(&c) => {
                            group.insert(c);
                        }
                        Ok(c) => out.warnings.push(format!("synonym `{c}` not in vocabulary; dropped")),
                        Err(_) => out.warnings.push(format!("unparseable synonym entry `{}`", raw.trim())),
                    }
                }
                if group.len() >= 2 {
                    out.synonym_groups.push(group);
                }
            }
        }
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    out
}

/// The curated default rules: the shipped fixture used when no backend runs,
/// and the source of antonym/composition entries in remote mode.
pub const DEFAULT_RULE_FILE: &str = "\
# concept rules v1
[symmetric]
near
far
beside
[exclusive]
left
right
front
behind
above
below
beneath
[synonyms]
wardrobe, dresser
table, dining_table
couch, sofa
[antonyms]
left <-> right
front <-> behind
above <-> below
[compositions]
center = left, right
between = left, right
";

/// Parse the four-section rule file format (plus composition specs).
pub fn parse_rule_file(text: &str) -> Result<RuleSet, RulesError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Symmetric,
        Exclusive,
        Synonyms,
        Antonyms,
        Compositions,
    }
    let mut section = Section::None;
    let mut rs = RuleSet::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| RulesError::RuleFile { line: lineno + 1, message };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = match name {
                "symmetric" => Section::Symmetric,
                "exclusive" => Section::Exclusive,
                "synonyms" => Section::Synonyms,
                "antonyms" => Section::Antonyms,
                "compositions" => Section::Compositions,
                other => return Err(err(format!("unknown section `{other}`"))),
            };
            continue;
        }
        let concept =
            |s: &str| ConceptName::normalize(s).map_err(|e| err(format!("bad concept: {e}")));
        match section {
            Section::None => return Err(err("content before any [section]".into())),
            Section::Symmetric => {
                rs.symmetric.insert(concept(line)?);
            }
            Section::Exclusive => {
                rs.exclusive.insert(concept(line)?);
            }
            Section::Synonyms => {
                let group = line
                    .split(',')
                    .map(concept)
                    .collect::<Result<BTreeSet<_>, _>>()?;
                if group.len() < 2 {
                    return Err(err("synonym group needs at least 2 members".into()));
                }
                rs.synonym_groups.push(group);
            }
            Section::Antonyms => {
                let (a, b) = line
                    .split_once("<->")
                    .ok_or_else(|| err("expected `a <-> b`".into()))?;
                let (a, b) = (concept(a)?, concept(b)?);
                rs.antonyms.insert(a.clone(), b.clone());
                rs.antonyms.insert(b, a);
            }
            Section::Compositions => {
                let (name, body) = line
                    .split_once('=')
                    .ok_or_else(|| err("expected `ternary = first, second`".into()))?;
                let (first, second) = body
                    .split_once(',')
                    .ok_or_else(|| err("expected two component concepts".into()))?;
                rs.compositions.insert(
                    concept(name)?,
                    CompositionSpec { first: concept(first)?, second: concept(second)? },
                );
            }
        }
    }
    rs.validate()?;
    Ok(rs)
}

/// Render a rule set back into the rule file format.
pub fn format_rule_file(rs: &RuleSet) -> String {
    let mut out = String::from("# concept rules v1\n[symmetric]\n");
    for c in &rs.symmetric {
        out.push_str(c.as_str());
        out.push('\n');
    }
    out.push_str("[exclusive]\n");
    for c in &rs.exclusive {
        out.push_str(c.as_str());
        out.push('\n');
    }
    out.push_str("[synonyms]\n");
    for g in &rs.synonym_groups {
        out.push_str(&g.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "));
        out.push('\n');
    }
    out.push_str("[antonyms]\n");
    let mut seen = BTreeSet::new();
    for (a, b) in &rs.antonyms {
        if seen.contains(a) {
            continue;
        }
        seen.insert(b.clone());
        out.push_str(&format!("{a} <-> {b}\n"));
    }
    out.push_str("[compositions]\n");
    for (c, spec) in &rs.compositions {
        out.push_str(&format!("{c} = {}, {}\n", spec.first, spec.second));
    }
    out
}

/// Remote text-completion endpoint settings. Requests and responses use a
/// minimal JSON shape: `{model, prompt, temperature}` in, `{completion}` out.
#[derive(Clone, Debug)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub auth_env: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://localhost:8080/v1/complete".into(),
            auth_env: "COMPLETION_AUTH_TOKEN".into(),
            model: "gpt-3.5-turbo".into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
        }
    }
}

/// Where completions come from.
#[derive(Clone, Debug)]
pub enum CompletionBackend {
    /// Live endpoint; completions cached under `cache_dir` by prompt hash.
    Remote { config: RemoteConfig, cache_dir: PathBuf },
    /// Serve a previously warmed cache; never touches the network.
    Replay { cache_dir: PathBuf },
    /// Parse a rule file directly (`None` = the shipped defaults).
    Fixture { rule_file: Option<PathBuf> },
}

fn prompt_cache_key(model: &str, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.as_bytes());
    hasher.update(b"\n");
    hasher.update(prompt.as_bytes());
    format!("{:x}", hasher.finalize())
}

fn cache_path(dir: &Path, model: &str, prompt: &str) -> PathBuf {
    dir.join(format!("{}.txt", prompt_cache_key(model, prompt)))
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    completion: String,
}

fn remote_complete(config: &RemoteConfig, prompt: &str) -> Result<String, RulesError> {
    let token = std::env::var(&config.auth_env)
        .map_err(|_| RulesError::MissingAuthToken(config.auth_env.clone()))?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .build()
        .into();
    let mut last_err = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 << attempt.min(4)));
        }
        let result = agent
            .post(&config.endpoint)
            .header("authorization", &format!("Bearer {token}"))
            .send_json(&CompletionRequest { model: &config.model, prompt, temperature: 0.0 });
        match result {
            Ok(mut resp) => match resp.body_mut().read_json::<CompletionResponse>() {
                Ok(body) => return Ok(body.completion),
                Err(e) => last_err = format!("bad response body: {e}"),
            },
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(RulesError::BackendUnavailable(format!(
        "{} after {} attempts: {last_err}",
        config.endpoint,
        config.max_retries + 1
    )))
}

fn complete(backend: &CompletionBackend, prompt: &str) -> Result<String, RulesError> {
    match backend {
        CompletionBackend::Remote { config, cache_dir } => {
            let path = cache_path(cache_dir, &config.model, prompt);
            if path.exists() {
                return Ok(std::fs::read_to_string(path)?);
            }
            let completion = remote_complete(config, prompt)?;
            std::fs::create_dir_all(cache_dir)?;
            std::fs::write(path, &completion)?;
            Ok(completion)
        }
        CompletionBackend::Replay { cache_dir } => {
            // Replay uses a fixed model tag so caches can be assembled by hand.
            let path = cache_path(cache_dir, REPLAY_MODEL, prompt);
            std::fs::read_to_string(&path).map_err(|_| {
                RulesError::BackendUnavailable(format!(
                    "no cached completion at {} (replay mode never queries the network)",
                    path.display()
                ))
            })
        }
        CompletionBackend::Fixture { .. } => unreachable!("fixture mode does not complete prompts"),
    }
}

/// Model tag under which replay caches are keyed.
pub const REPLAY_MODEL: &str = "replay";

/// Hash key for a prompt under a model, exposed so callers can warm caches.
pub fn cache_file_name(model: &str, prompt: &str) -> String {
    format!("{}.txt", prompt_cache_key(model, prompt))
}

/// Distill a full rule set for the vocabulary. Fixture mode parses the rule
/// file; remote/replay modes classify relations and synonym groups from
/// completions and take antonyms/compositions from the curated defaults.
pub fn distill_rules(
    vocab: &ConceptVocabulary,
    backend: &CompletionBackend,
) -> Result<RuleSet, RulesError> {
    let curated = parse_rule_file(DEFAULT_RULE_FILE).expect("default rule file parses");
    let rs = match backend {
        CompletionBackend::Fixture { rule_file } => {
            let text = match rule_file {
                Some(path) => std::fs::read_to_string(path)?,
                None => DEFAULT_RULE_FILE.to_string(),
            };
            parse_rule_file(&text)?
        }
        _ => {
            let prompts = build_prompts(vocab);
            let relation_text = complete(backend, &prompts.relation)?;
            let relations = parse_response(RuleKind::RelationClassification, &relation_text, vocab);

            let round1_text = complete(backend, &prompts.synonym_round1)?;
            let round2_prompt = format!(
                "{}\n\n{}\n\n{}",
                prompts.synonym_round1, round1_text, prompts.synonym_round2
            );
            let round2_text = complete(backend, &round2_prompt)?;
            let synonyms = parse_response(RuleKind::SynonymGroups, &round2_text, vocab);

            // Exclusivity has no prompt of its own: asymmetric relations are
            // screened against explicit annotations plus the curated list.
            let mut exclusive = relations.exclusive.clone();
            for c in &relations.asymmetric {
                if curated.exclusive.contains(c) {
                    exclusive.insert(c.clone());
                }
            }
            RuleSet {
                symmetric: relations.symmetric,
                exclusive,
                synonym_groups: synonyms.synonym_groups,
                antonyms: curated.antonyms,
                compositions: curated.compositions,
            }
        }
    };
    let rs = rs.restricted_to(vocab);
    rs.validate()?;
    Ok(rs)
}

/// Close a training vocabulary over the rules: synonym-group members of
/// known categories (synonym augmentation substitutes them into programs)
/// and antonym partners of known relations (negated relations execute, and
/// therefore train, the antonym's matrix).
pub fn extend_vocab_for_training(vocab: &ConceptVocabulary, rules: &RuleSet) -> ConceptVocabulary {
    let mut out = vocab.clone();
    for group in rules.synonym_groups() {
        if group.iter().any(|c| vocab.unary.contains(c)) {
            for c in group {
                if out.arity_of(c).is_none() {
                    out.unary.insert(c.clone());
                }
            }
        }
    }
    for (a, b) in &rules.antonyms {
        if vocab.binary.contains(a) && out.arity_of(b).is_none() {
            out.binary.insert(b.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tensor;

    fn c(s: &str) -> ConceptName {
        ConceptName::new(s).unwrap()
    }

    fn full_vocab() -> ConceptVocabulary {
        let mut v = ConceptVocabulary::default();
        for u in ["chair", "shelf", "wardrobe", "dresser", "table", "dining_table", "couch", "sofa"] {
            v.unary.insert(c(u));
        }
        for b in ["near", "far", "beside", "left", "right", "front", "behind", "above", "below", "beneath"] {
            v.binary.insert(c(b));
        }
        for t in ["center", "between"] {
            v.ternary.insert(c(t));
        }
        v
    }

    #[test]
    fn default_fixture_distills_and_validates() {
        let rs = distill_rules(&full_vocab(), &CompletionBackend::Fixture { rule_file: None }).unwrap();
        for s in ["near", "beside", "far"] {
            assert!(rs.is_symmetric(&c(s)), "{s} should be symmetric");
        }
        for e in ["left", "behind", "beneath"] {
            assert!(rs.is_exclusive(&c(e)), "{e} should be exclusive");
        }
        let wardrobe_syns = rs.synonyms_of(&c("wardrobe")).unwrap();
        assert_eq!(wardrobe_syns, vec![&c("dresser")]);
        assert_eq!(rs.resolve_antonym(&c("left")).unwrap(), &c("right"));
        assert_eq!(rs.resolve_antonym(&c("right")).unwrap(), &c("left"));
        assert!(rs.composition(&c("center")).is_some());
        assert!(rs.composition(&c("between")).is_some());
    }

    #[test]
    fn antonym_resolution_is_an_involution() {
        let rs = distill_rules(&full_vocab(), &CompletionBackend::Fixture { rule_file: None }).unwrap();
        for (a, _) in &rs.antonyms {
            let b = rs.resolve_antonym(a).unwrap();
            assert_eq!(rs.resolve_antonym(b).unwrap(), a);
            assert_ne!(a, b);
        }
        assert!(matches!(
            rs.resolve_antonym(&c("beside")),
            Err(RulesError::MissingAntonym(_))
        ));
    }

    #[test]
    fn inconsistent_fixture_is_rejected() {
        let bad = "[symmetric]\nnear\n[exclusive]\nnear\n";
        assert!(matches!(parse_rule_file(bad), Err(RulesError::Inconsistent(_))));
        let fixed_point = "[antonyms]\nnear <-> near\n";
        assert!(parse_rule_file(fixed_point).is_err());
    }

    #[test]
    fn rule_file_round_trips() {
        let rs = parse_rule_file(DEFAULT_RULE_FILE).unwrap();
        let text = format_rule_file(&rs);
        assert_eq!(parse_rule_file(&text).unwrap(), rs);
    }

    #[test]
    fn relation_prompt_substitutes_sorted_list() {
        let mut v = ConceptVocabulary::default();
        v.binary.insert(c("near"));
        v.binary.insert(c("left"));
        let p = build_prompts(&v);
        assert!(p.relation.contains("Here are some relations: left, near."), "{}", p.relation);
        let mut v2 = ConceptVocabulary::default();
        v2.unary.insert(c("wardrobe"));
        v2.unary.insert(c("dresser"));
        let p2 = build_prompts(&v2);
        assert!(p2.synonym_round1.contains("dresser"));
        assert!(p2.synonym_round1.contains("wardrobe"));
    }

    #[test]
    fn response_parsing_is_tolerant() {
        let vocab = full_vocab();
        let parsed = parse_response(
            RuleKind::RelationClassification,
            "near: symmetric\nleft: asymmetric\n- floats: symmetric\n",
            &vocab,
        );
        assert!(parsed.symmetric.contains(&c("near")));
        assert!(parsed.asymmetric.contains(&c("left")));
        assert!(!parsed.symmetric.contains(&c("floats")));
        assert!(parsed.warnings.iter().any(|w| w.contains("floats")));

        let syn = parse_response(
            RuleKind::SynonymGroups,
            "Groups:\n[wardrobe, dresser]\n[lava_lamp, plasma_lamp]\n",
            &vocab,
        );
        assert_eq!(syn.synonym_groups.len(), 1);
        assert!(syn.synonym_groups[0].contains(&c("wardrobe")));
    }

    #[test]
    fn replay_mode_is_deterministic_and_offline() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = full_vocab();
        let prompts = build_prompts(&vocab);
        let relation_reply = "near: symmetric\nfar: symmetric\nbeside: symmetric\n\
                              left: asymmetric\nright: asymmetric\nfront: asymmetric\n\
                              behind: asymmetric\nabove: asymmetric\nbelow: asymmetric\nbeneath: asymmetric\n";
        let round1_reply = "[wardrobe, dresser]\n[table, dining_table]\n[couch, sofa]";
        let round2_prompt =
            format!("{}\n\n{}\n\n{}", prompts.synonym_round1, round1_reply, prompts.synonym_round2);
        std::fs::write(dir.path().join(cache_file_name(REPLAY_MODEL, &prompts.relation)), relation_reply).unwrap();
        std::fs::write(dir.path().join(cache_file_name(REPLAY_MODEL, &prompts.synonym_round1)), round1_reply).unwrap();
        std::fs::write(dir.path().join(cache_file_name(REPLAY_MODEL, &round2_prompt)), round1_reply).unwrap();

        let backend = CompletionBackend::Replay { cache_dir: dir.path().to_path_buf() };
        let a = distill_rules(&vocab, &backend).unwrap();
        let b = distill_rules(&vocab, &backend).unwrap();
        assert_eq!(a, b);
        // Curated screening routes asymmetric relations into the exclusive set.
        assert!(a.is_exclusive(&c("left")));
        assert!(a.is_symmetric(&c("near")));
        assert!(a.composition(&c("center")).is_some());

        let empty = CompletionBackend::Replay { cache_dir: tempfile::tempdir().unwrap().path().into() };
        assert!(matches!(
            distill_rules(&vocab, &empty),
            Err(RulesError::BackendUnavailable(_))
        ));
    }

    #[test]
    fn remote_mode_without_token_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let backend = CompletionBackend::Remote {
            config: RemoteConfig {
                auth_env: "REFGROUND_TEST_TOKEN_THAT_IS_UNSET".into(),
                ..RemoteConfig::default()
            },
            cache_dir: dir.path().to_path_buf(),
        };
        assert!(matches!(
            distill_rules(&full_vocab(), &backend),
            Err(RulesError::MissingAuthToken(_))
        ));
    }

    #[test]
    fn compose_ternary_is_anchor_symmetric_and_zero_preserving() {
        let rs = distill_rules(&full_vocab(), &CompletionBackend::Fixture { rule_file: None }).unwrap();
        let n = 4;
        let mut tape = Tape::new();
        let mut data_l = vec![0.0; n * n];
        let mut data_r = vec![0.0; n * n];
        for (i, v) in data_l.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        for (i, v) in data_r.iter_mut().enumerate() {
            *v = (i as f64 * 0.61).cos();
        }
        let l = tape.leaf(Tensor::matrix(n, n, data_l));
        let r = tape.leaf(Tensor::matrix(n, n, data_r));
        let t = compose_ternary(&mut tape, &rs, &c("center"), l, r).unwrap();
        let tv = tape.value(t);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i == j || i == k || j == k {
                        continue;
                    }
                    let a = tv.data()[(i * n + j) * n + k];
                    let b = tv.data()[(i * n + k) * n + j];
                    assert_eq!(a, b, "anchor swap changed T[{i},{j},{k}]");
                }
            }
        }

        let zl = tape.leaf(Tensor::zeros(&[n, n]));
        let zr = tape.leaf(Tensor::zeros(&[n, n]));
        let zt = compose_ternary(&mut tape, &rs, &c("between"), zl, zr).unwrap();
        assert!(tape.value(zt).data().iter().all(|v| *v == 0.0));

        assert!(matches!(
            compose_ternary(&mut tape, &rs, &c("beside"), l, r),
            Err(RulesError::MissingComposition(_))
        ));
    }
}
