//! The symbolic program language: AST, parser, printer, concept vocabulary
//! extraction, and the deterministic template generator that pairs utterances
//! with programs (standing in for an LLM semantic parser).
//!
//! Grammar (whitespace-insensitive):
//!
//! ```text
//! EXPR    := "scene" "(" ")"
//!          | "filter" "(" EXPR "," IDENT ")"
//!          | "relate" "(" EXPR "," EXPR "," CONCEPT ")"
//!          | "relate_ternary" "(" EXPR "," EXPR "," EXPR "," CONCEPT ")"
//! CONCEPT := IDENT | "not" IDENT
//! IDENT   := [a-z_][a-z0-9_]*
//! ```

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Rulebook, Scene};

#[derive(Debug, Error)]
pub enum DslError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("invalid concept name `{0}`: must be a lowercase identifier")]
    InvalidConcept(String),
    #[error("concept `{concept}` used at both arity {first} and arity {second}")]
    ConflictingArity { concept: String, first: u8, second: u8 },
    #[error("no unique satisfying tuple for template `{template}`")]
    NotRealizable { template: String },
    #[error("template `{template}` is malformed: {details}")]
    BadTemplate { template: String, details: String },
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

/// Normalized concept identifier: lowercase letters, digits, underscores.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptName(String);

impl ConceptName {
    pub fn new(s: &str) -> Result<Self, DslError> {
        if s.is_empty()
            || !s.chars().next().unwrap().is_ascii_lowercase() && !s.starts_with('_')
            || !s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            return Err(DslError::InvalidConcept(s.to_string()));
        }
        Ok(ConceptName(s.to_string()))
    }

    /// Lowercase and replace whitespace/dashes before validating.
    pub fn normalize(s: &str) -> Result<Self, DslError> {
        let cleaned: String = s
            .trim()
            .chars()
            .map(|c| {
                if c.is_whitespace() || c == '-' {
                    '_'
                } else {
                    c.to_ascii_lowercase()
                }
            })
            .collect();
        ConceptName::new(&cleaned)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ConceptName {
    type Error = DslError;
    fn try_from(s: String) -> Result<Self, DslError> {
        ConceptName::new(&s)
    }
}

impl From<ConceptName> for String {
    fn from(c: ConceptName) -> String {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arity {
    Unary,
    Binary,
    Ternary,
}

impl Arity {
    pub fn as_u8(self) -> u8 {
        match self {
            Arity::Unary => 1,
            Arity::Binary => 2,
            Arity::Ternary => 3,
        }
    }
}

/// Symbolic program tree. `Scene` is the only leaf; negation lives on relate
/// nodes as a flag because it executes purely through antonym lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProgramAst {
    Scene,
    Filter {
        child: Box<ProgramAst>,
        concept: ConceptName,
    },
    Relate {
        target: Box<ProgramAst>,
        anchor: Box<ProgramAst>,
        concept: ConceptName,
        negated: bool,
    },
    RelateTernary {
        target: Box<ProgramAst>,
        anchor1: Box<ProgramAst>,
        anchor2: Box<ProgramAst>,
        concept: ConceptName,
        negated: bool,
    },
}

impl ProgramAst {
    pub fn filter(child: ProgramAst, concept: ConceptName) -> Self {
        ProgramAst::Filter { child: Box::new(child), concept }
    }

    pub fn relate(target: ProgramAst, anchor: ProgramAst, concept: ConceptName, negated: bool) -> Self {
        ProgramAst::Relate {
            target: Box::new(target),
            anchor: Box::new(anchor),
            concept,
            negated,
        }
    }

    pub fn relate_ternary(
        target: ProgramAst,
        anchor1: ProgramAst,
        anchor2: ProgramAst,
        concept: ConceptName,
        negated: bool,
    ) -> Self {
        ProgramAst::RelateTernary {
            target: Box::new(target),
            anchor1: Box::new(anchor1),
            anchor2: Box::new(anchor2),
            concept,
            negated,
        }
    }

    /// Visit every (concept, arity, negated) mention in the tree.
    pub fn visit_concepts<F: FnMut(&ConceptName, Arity, bool)>(&self, f: &mut F) {
        match self {
            ProgramAst::Scene => {}
            ProgramAst::Filter { child, concept } => {
                f(concept, Arity::Unary, false);
                child.visit_concepts(f);
            }
            ProgramAst::Relate { target, anchor, concept, negated } => {
                f(concept, Arity::Binary, *negated);
                target.visit_concepts(f);
                anchor.visit_concepts(f);
            }
            ProgramAst::RelateTernary { target, anchor1, anchor2, concept, negated } => {
                f(concept, Arity::Ternary, *negated);
                target.visit_concepts(f);
                anchor1.visit_concepts(f);
                anchor2.visit_concepts(f);
            }
        }
    }

    pub fn uses_concept(&self, name: &ConceptName) -> bool {
        let mut found = false;
        self.visit_concepts(&mut |c, _, _| found |= c == name);
        found
    }

    pub fn has_negation(&self) -> bool {
        let mut found = false;
        self.visit_concepts(&mut |_, _, neg| found |= neg);
        found
    }
}

// Display is the canonical printer: parse(print(ast)) == ast.
impl fmt::Display for ProgramAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProgramAst::Scene => write!(f, "scene()"),
            ProgramAst::Filter { child, concept } => write!(f, "filter({child}, {concept})"),
            ProgramAst::Relate { target, anchor, concept, negated } => {
                let not = if *negated { "not " } else { "" };
                write!(f, "relate({target}, {anchor}, {not}{concept})")
            }
            ProgramAst::RelateTernary { target, anchor1, anchor2, concept, negated } => {
                let not = if *negated { "not " } else { "" };
                write!(f, "relate_ternary({target}, {anchor1}, {anchor2}, {not}{concept})")
            }
        }
    }
}

/// Canonical program text.
pub fn print_program(ast: &ProgramAst) -> String {
    ast.to_string()
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, DslError> {
        Err(DslError::Parse { offset: self.pos, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), DslError> {
        match self.peek() {
            Some(b) if b == c => {
                self.pos += 1;
                Ok(())
            }
            Some(b) => self.err(format!("expected `{}`, found `{}`", c as char, b as char)),
            None => self.err(format!("expected `{}`, found end of input", c as char)),
        }
    }

    fn ident(&mut self) -> Result<String, DslError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_lowercase() || b == b'_' || (self.pos > start && b.is_ascii_digit()) {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return self.err("expected an identifier");
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos]).unwrap().to_string())
    }

    fn concept_arg(&mut self, node: &str, allow_not: bool) -> Result<(ConceptName, bool), DslError> {
        let at = self.pos;
        let first = self.ident()?;
        if first == "not" {
            if !allow_not {
                self.pos = at;
                return self.err(format!("`not` is only allowed in the concept slot of relate forms, not in `{node}`"));
            }
            let name = self.ident()?;
            return Ok((self.concept(at, &name)?, true));
        }
        Ok((self.concept(at, &first)?, false))
    }

    fn concept(&self, at: usize, name: &str) -> Result<ConceptName, DslError> {
        ConceptName::new(name).map_err(|_| DslError::Parse {
            offset: at,
            message: format!("invalid concept name `{name}`"),
        })
    }

    fn expr(&mut self) -> Result<ProgramAst, DslError> {
        let head_at = self.pos;
        let head = self.ident()?;
        self.expect(b'(')?;
        let ast = match head.as_str() {
            "scene" => ProgramAst::Scene,
            "filter" => {
                let child = self.node_arg("filter", 1)?;
                self.comma("filter", 2)?;
                let (concept, _) = self.concept_arg("filter", false)?;
                ProgramAst::filter(child, concept)
            }
            "relate" => {
                let target = self.node_arg("relate", 1)?;
                self.comma("relate", 2)?;
                let anchor = self.node_arg("relate", 2)?;
                self.comma("relate", 3)?;
                let (concept, negated) = self.concept_arg("relate", true)?;
                ProgramAst::relate(target, anchor, concept, negated)
            }
            "relate_ternary" => {
                let target = self.node_arg("relate_ternary", 1)?;
                self.comma("relate_ternary", 2)?;
                let a1 = self.node_arg("relate_ternary", 2)?;
                self.comma("relate_ternary", 3)?;
                let a2 = self.node_arg("relate_ternary", 3)?;
                self.comma("relate_ternary", 4)?;
                let (concept, negated) = self.concept_arg("relate_ternary", true)?;
                ProgramAst::relate_ternary(target, a1, a2, concept, negated)
            }
            other => {
                self.pos = head_at;
                return self.err(format!("unknown node `{other}`"));
            }
        };
        self.close(&head)?;
        Ok(ast)
    }

    fn node_arg(&mut self, node: &str, index: usize) -> Result<ProgramAst, DslError> {
        if self.peek() == Some(b')') {
            return self.err(format!("`{node}` is missing argument {index}"));
        }
        // Lookahead: an expression's head identifier is always followed by
        // `(`; a bare identifier here means the caller passed a concept where
        // `node` expects a sub-program (usually an arity mistake).
        let start = self.pos;
        if self.ident().is_ok() && self.peek() != Some(b'(') {
            let at = start;
            self.pos = at;
            return self.err(format!(
                "`{node}` has too few arguments: argument {index} must be a sub-program"
            ));
        }
        self.pos = start;
        self.expr()
    }

    fn comma(&mut self, node: &str, next_index: usize) -> Result<(), DslError> {
        match self.peek() {
            Some(b',') => {
                self.pos += 1;
                Ok(())
            }
            Some(b')') => self.err(format!(
                "`{node}` has too few arguments: expected argument {next_index}"
            )),
            _ => self.err(format!("expected `,` between arguments of `{node}`")),
        }
    }

    fn close(&mut self, node: &str) -> Result<(), DslError> {
        match self.peek() {
            Some(b')') => {
                self.pos += 1;
                Ok(())
            }
            Some(b',') => self.err(format!("`{node}` has too many arguments")),
            _ => self.err(format!("expected `)` to close `{node}`")),
        }
    }
}

/// Parse canonical or whitespace-varied program text into an AST.
pub fn parse_program(text: &str) -> Result<ProgramAst, DslError> {
    let mut p = Parser { bytes: text.as_bytes(), pos: 0 };
    let ast = p.expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return p.err("trailing input after program");
    }
    Ok(ast)
}

/// Concepts grouped by arity; the three sets never overlap.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    pub unary: BTreeSet<ConceptName>,
    pub binary: BTreeSet<ConceptName>,
    pub ternary: BTreeSet<ConceptName>,
}

impl ConceptVocabulary {
    pub fn arity_of(&self, name: &ConceptName) -> Option<Arity> {
        if self.unary.contains(name) {
            Some(Arity::Unary)
        } else if self.binary.contains(name) {
            Some(Arity::Binary)
        } else if self.ternary.contains(name) {
            Some(Arity::Ternary)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.unary.len() + self.binary.len() + self.ternary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&mut self, name: &ConceptName, arity: Arity) -> Result<(), DslError> {
        if let Some(existing) = self.arity_of(name) {
            if existing != arity {
                return Err(DslError::ConflictingArity {
                    concept: name.to_string(),
                    first: existing.as_u8(),
                    second: arity.as_u8(),
                });
            }
            return Ok(());
        }
        match arity {
            Arity::Unary => self.unary.insert(name.clone()),
            Arity::Binary => self.binary.insert(name.clone()),
            Arity::Ternary => self.ternary.insert(name.clone()),
        };
        Ok(())
    }
}

/// Collect every concept mentioned in a program corpus, split by arity.
pub fn extract_concepts(corpus: &[ProgramAst]) -> Result<ConceptVocabulary, DslError> {
    let mut vocab = ConceptVocabulary::default();
    for ast in corpus {
        let mut err = None;
        ast.visit_concepts(&mut |c, a, _| {
            if err.is_none() {
                if let Err(e) = vocab.insert(c, a) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(vocab)
}

/// One referring expression: surface text, its program, and the ground-truth
/// answer object in the referenced scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingQuery {
    pub utterance: String,
    pub program: ProgramAst,
    pub scene_ref: usize,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    Unary,
    Binary { relation: ConceptName, negated: bool },
    Ternary { relation: ConceptName },
}

/// Utterance pattern plus the program shape it compiles to. Patterns use
/// `{target}`, `{anchor}`, `{anchor2}` and `{relation}` placeholders.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSpec {
    pub name: String,
    pub pattern: String,
    pub kind: TemplateKind,
    /// Minimum number of target-category instances. At 2 and above, every
    /// query has same-category distractors and relational reasoning is the
    /// only way to disambiguate.
    pub min_target_count: usize,
}

impl TemplateSpec {
    pub fn binary(name: &str, pattern: &str, relation: &ConceptName, negated: bool) -> Self {
        TemplateSpec {
            name: name.into(),
            pattern: pattern.into(),
            kind: TemplateKind::Binary { relation: relation.clone(), negated },
            min_target_count: 1,
        }
    }

    pub fn ternary(name: &str, pattern: &str, relation: &ConceptName) -> Self {
        TemplateSpec {
            name: name.into(),
            pattern: pattern.into(),
            kind: TemplateKind::Ternary { relation: relation.clone() },
            min_target_count: 1,
        }
    }

    pub fn with_min_target_count(mut self, count: usize) -> Self {
        self.min_target_count = count;
        self
    }

    pub fn relation(&self) -> Option<&ConceptName> {
        match &self.kind {
            TemplateKind::Unary => None,
            TemplateKind::Binary { relation, .. } => Some(relation),
            TemplateKind::Ternary { relation } => Some(relation),
        }
    }

    pub fn is_negated(&self) -> bool {
        matches!(self.kind, TemplateKind::Binary { negated: true, .. })
    }
}

fn phrase_for(relation: &ConceptName, negated: bool) -> String {
    let base = match relation.as_str() {
        "left" => "to the left of".to_string(),
        "right" => "to the right of".to_string(),
        "front" => "in front of".to_string(),
        "far" => "far from".to_string(),
        "center" => "in the center of".to_string(),
        other => other.replace('_', " "),
    };
    if negated {
        format!("not {base}")
    } else {
        base
    }
}

fn display_category(cat: &ConceptName) -> String {
    cat.as_str().replace('_', " ")
}

fn fill_pattern(
    pattern: &str,
    target: &ConceptName,
    anchor: Option<&ConceptName>,
    anchor2: Option<&ConceptName>,
    relation: Option<(&ConceptName, bool)>,
) -> String {
    let mut out = pattern.replace("{target}", &display_category(target));
    if let Some(a) = anchor {
        out = out.replace("{anchor}", &display_category(a));
    }
    if let Some(a2) = anchor2 {
        out = out.replace("{anchor2}", &display_category(a2));
    }
    if let Some((rel, neg)) = relation {
        out = out.replace("{relation}", &phrase_for(rel, neg));
    }
    out
}

fn categories_by_name(scene: &Scene) -> Vec<(ConceptName, Vec<usize>)> {
    let mut map: std::collections::BTreeMap<ConceptName, Vec<usize>> = Default::default();
    for o in &scene.objects {
        map.entry(o.category.clone()).or_default().push(o.id);
    }
    map.into_iter().collect()
}

/// Objects of `target_cat` that relate to every anchor of `anchor_cat`
/// (matching the executor's universal reading over the anchor set).
fn binary_members(
    scene: &Scene,
    rulebook: &Rulebook,
    relation: &str,
    targets: &[usize],
    anchors: &[usize],
) -> Result<Vec<usize>, DslError> {
    let mut members = Vec::new();
    'outer: for &i in targets {
        for &j in anchors {
            if j == i {
                continue;
            }
            if !rulebook.holds(scene, relation, i, j, None)? {
                continue 'outer;
            }
        }
        members.push(i);
    }
    Ok(members)
}

fn ternary_members(
    scene: &Scene,
    rulebook: &Rulebook,
    relation: &str,
    targets: &[usize],
    anchors1: &[usize],
    anchors2: &[usize],
) -> Result<Vec<usize>, DslError> {
    let mut members = Vec::new();
    'outer: for &i in targets {
        for &j in anchors1 {
            if j == i {
                continue;
            }
            for &k in anchors2 {
                if k == i || k == j {
                    continue;
                }
                if !rulebook.holds(scene, relation, i, j, Some(k))? {
                    continue 'outer;
                }
            }
        }
        members.push(i);
    }
    Ok(members)
}

/// Instantiate a template on a scene: pick (deterministically in `seed`) a
/// category tuple whose unique satisfying object becomes the answer.
pub fn generate_query(
    scene: &Scene,
    scene_ref: usize,
    rulebook: &Rulebook,
    template: &TemplateSpec,
    seed: u64,
) -> Result<GroundingQuery, DslError> {
    let cats = categories_by_name(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    match &template.kind {
        TemplateKind::Unary => {
            let singles: Vec<_> = cats.iter().filter(|(_, ids)| ids.len() == 1).collect();
            if singles.is_empty() {
                return Err(DslError::NotRealizable { template: template.name.clone() });
            }
            let (cat, ids) = singles[rng.gen_range(0..singles.len())];
            Ok(GroundingQuery {
                utterance: fill_pattern(&template.pattern, cat, None, None, None),
                program: ProgramAst::filter(ProgramAst::Scene, cat.clone()),
                scene_ref,
                answer: ids[0],
            })
        }
        TemplateKind::Binary { relation, negated } => {
            let effective = if *negated {
                rulebook.antonym(relation.as_str()).ok_or_else(|| DslError::BadTemplate {
                    template: template.name.clone(),
                    details: format!("`not {relation}` has no geometric antonym"),
                })?
            } else {
                relation.as_str()
            };
            let mut options = Vec::new();
            for (tc, targets) in &cats {
                if targets.len() < template.min_target_count {
                    continue;
                }
                for (ac, anchors) in &cats {
                    if tc == ac {
                        continue;
                    }
                    let members = binary_members(scene, rulebook, effective, targets, anchors)?;
                    if members.len() == 1 {
                        options.push((tc.clone(), ac.clone(), members[0]));
                    }
                }
            }
            if options.is_empty() {
                return Err(DslError::NotRealizable { template: template.name.clone() });
            }
            let (tc, ac, answer) = options[rng.gen_range(0..options.len())].clone();
            Ok(GroundingQuery {
                utterance: fill_pattern(
                    &template.pattern,
                    &tc,
                    Some(&ac),
                    None,
                    Some((relation, *negated)),
                ),
                program: ProgramAst::relate(
                    ProgramAst::filter(ProgramAst::Scene, tc),
                    ProgramAst::filter(ProgramAst::Scene, ac),
                    relation.clone(),
                    *negated,
                ),
                scene_ref,
                answer,
            })
        }
        TemplateKind::Ternary { relation } => {
            let mut options = Vec::new();
            for (tc, targets) in &cats {
                if targets.len() < template.min_target_count {
                    continue;
                }
                for (a1c, anchors1) in &cats {
                    if a1c == tc {
                        continue;
                    }
                    for (a2c, anchors2) in &cats {
                        if a2c == tc || a2c == a1c {
                            continue;
                        }
                        let members =
                            ternary_members(scene, rulebook, relation.as_str(), targets, anchors1, anchors2)?;
                        if members.len() == 1 {
                            options.push((tc.clone(), a1c.clone(), a2c.clone(), members[0]));
                        }
                    }
                }
            }
            if options.is_empty() {
                return Err(DslError::NotRealizable { template: template.name.clone() });
            }
            let (tc, a1c, a2c, answer) = options[rng.gen_range(0..options.len())].clone();
            Ok(GroundingQuery {
                utterance: fill_pattern(
                    &template.pattern,
                    &tc,
                    Some(&a1c),
                    Some(&a2c),
                    Some((relation, false)),
                ),
                program: ProgramAst::relate_ternary(
                    ProgramAst::filter(ProgramAst::Scene, tc),
                    ProgramAst::filter(ProgramAst::Scene, a1c),
                    ProgramAst::filter(ProgramAst::Scene, a2c),
                    relation.clone(),
                    false,
                ),
                scene_ref,
                answer,
            })
        }
    }
}

fn c(s: &str) -> ConceptName {
    ConceptName::new(s).expect("builtin concept name")
}

/// The training-side template set: plain binary relations for the whole
/// rulebook, negated variants where a geometric antonym exists, both ternary
/// relations, and a unary form.
pub fn default_templates() -> Vec<TemplateSpec> {
    let mut out = vec![TemplateSpec {
        name: "unary".into(),
        pattern: "the {target}".into(),
        kind: TemplateKind::Unary,
        min_target_count: 1,
    }];
    for rel in ["near", "far", "beside", "left", "right", "front", "behind", "above", "below", "beneath"] {
        out.push(
            TemplateSpec::binary(
                &format!("binary-{rel}"),
                "the {target} {relation} the {anchor}",
                &c(rel),
                false,
            )
            .with_min_target_count(2),
        );
    }
    for rel in ["left", "right", "front", "behind", "above", "below"] {
        out.push(
            TemplateSpec::binary(
                &format!("negated-{rel}"),
                "the {target} {relation} the {anchor}",
                &c(rel),
                true,
            )
            .with_min_target_count(2),
        );
    }
    for rel in ["center", "between"] {
        out.push(
            TemplateSpec::ternary(
                &format!("ternary-{rel}"),
                "the {target} {relation} the {anchor} and the {anchor2}",
                &c(rel),
            )
            .with_min_target_count(2),
        );
    }
    out
}

/// Paraphrase templates: unseen surface forms that compile to the same
/// program shapes, for transfer evaluation.
pub fn paraphrase_templates() -> Vec<TemplateSpec> {
    let mut out = vec![TemplateSpec {
        name: "xfer-unary".into(),
        pattern: "find the {target}".into(),
        kind: TemplateKind::Unary,
        min_target_count: 1,
    }];
    for rel in ["near", "far", "beside", "left", "right", "front", "behind", "above", "below", "beneath"] {
        out.push(
            TemplateSpec::binary(
                &format!("xfer-binary-{rel}"),
                "there is a {anchor}; pick the {target} that is {relation} it",
                &c(rel),
                false,
            )
            .with_min_target_count(2),
        );
    }
    for rel in ["center", "between"] {
        out.push(
            TemplateSpec::ternary(
                &format!("xfer-ternary-{rel}"),
                "locate the {target} placed {relation} the {anchor} and the {anchor2}",
                &c(rel),
            )
            .with_min_target_count(2),
        );
    }
    out
}
