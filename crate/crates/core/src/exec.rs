//! Differentiable program execution.
//!
//! A program evaluates to a denotation: an N-vector of logit scores over the
//! scene's objects. `scene()` is the zero vector; `filter` takes an
//! elementwise min with unary scores; `relate` contracts the relation matrix
//! against the softmaxed anchor denotation (diagonal excluded) and mins with
//! the target. Negated relations execute their antonym's matrix; unseen
//! ternary relations are composed from two learned binary relations.
//!
//! Every relation tensor materialized on the way is recorded in the
//! [`ExecutionTrace`], which is what the regularization losses consume.

use thiserror::Error;

use crate::concepts::{ConceptScorer, ConceptsError};
use crate::dsl::{Arity, ConceptName, ProgramAst};
use crate::rules::{self, RuleSet, RulesError};
use crate::scene::{Rulebook, Scene, SceneError};
use crate::tape::{Tape, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("cannot execute over an empty scene")]
    EmptyScene,
    #[error("cannot resolve concept `{concept}` (arity {arity:?}): {reason}")]
    Unresolvable { concept: ConceptName, arity: Arity, reason: String },
    #[error(transparent)]
    Concepts(ConceptsError),
    #[error(transparent)]
    Rules(#[from] RulesError),
}

#[derive(Clone, Debug)]
pub struct TraceStep {
    pub label: String,
    pub output: TensorId,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RelationUse {
    /// The concept whose tensor was materialized; for negated relations this
    /// is the resolved antonym.
    pub concept: ConceptName,
    pub arity: Arity,
    pub tensor: TensorId,
}

/// Everything produced while executing one program.
#[derive(Clone, Debug)]
pub struct ExecutionTrace {
    pub final_id: TensorId,
    pub final_scores: Vec<f64>,
    pub steps: Vec<TraceStep>,
    pub relation_uses: Vec<RelationUse>,
}

struct Executor<'a, S: ConceptScorer> {
    tape: &'a mut Tape,
    scorer: &'a mut S,
    rules: &'a RuleSet,
    steps: Vec<TraceStep>,
    relation_uses: Vec<RelationUse>,
}

impl<S: ConceptScorer> Executor<'_, S> {
    fn record(&mut self, label: String, output: TensorId) -> TensorId {
        let shape = self.tape.value(output).shape().to_vec();
        self.steps.push(TraceStep { label, output, shape });
        output
    }

    fn binary_tensor(&mut self, concept: &ConceptName, negated: bool) -> Result<(ConceptName, TensorId), ExecError> {
        let effective = if negated {
            self.rules
                .resolve_antonym(concept)
                .map_err(|_| ExecError::Unresolvable {
                    concept: concept.clone(),
                    arity: Arity::Binary,
                    reason: "negated relation has no antonym rule".into(),
                })?
                .clone()
        } else {
            concept.clone()
        };
        let tensor = self.scorer.binary(self.tape, &effective).map_err(|e| match e {
            ConceptsError::UnknownConcept { concept, arity } => ExecError::Unresolvable {
                concept,
                arity,
                reason: "no learned relation and no rule to build one".into(),
            },
            other => ExecError::Concepts(other),
        })?;
        Ok((effective, tensor))
    }

    fn ternary_tensor(&mut self, concept: &ConceptName, negated: bool) -> Result<(ConceptName, TensorId), ExecError> {
        let effective = if negated {
            self.rules
                .resolve_antonym(concept)
                .map_err(|_| ExecError::Unresolvable {
                    concept: concept.clone(),
                    arity: Arity::Ternary,
                    reason: "negated relation has no antonym rule".into(),
                })?
                .clone()
        } else {
            concept.clone()
        };
        match self.scorer.ternary(self.tape, &effective) {
            Ok(t) => Ok((effective, t)),
            Err(ConceptsError::UnknownConcept { .. }) => {
                // Zero-shot path: build the tensor from the composition rule.
                let spec = self.rules.composition(&effective).ok_or_else(|| ExecError::Unresolvable {
                    concept: effective.clone(),
                    arity: Arity::Ternary,
                    reason: "no learned relation and no composition rule".into(),
                })?;
                let spec = spec.clone();
                let (_, left) = self.binary_tensor(&spec.first, false)?;
                let (_, right) = self.binary_tensor(&spec.second, false)?;
                let composed = rules::compose_ternary(self.tape, self.rules, &effective, left, right)?;
                self.record(format!("compose({effective} = {}, {})", spec.first, spec.second), composed);
                Ok((effective, composed))
            }
            Err(other) => Err(ExecError::Concepts(other)),
        }
    }

    fn eval(&mut self, ast: &ProgramAst) -> Result<TensorId, ExecError> {
        match ast {
            ProgramAst::Scene => {
                let n = self.scorer.n_objects();
                let zeros = self.tape.leaf(Tensor::vector(vec![0.0; n]));
                Ok(self.record("scene()".into(), zeros))
            }
            ProgramAst::Filter { child, concept } => {
                let den = self.eval(child)?;
                let scores = self.scorer.unary(self.tape, concept).map_err(|e| match e {
                    ConceptsError::UnknownConcept { concept, arity } => ExecError::Unresolvable {
                        concept,
                        arity,
                        reason: "no learned category".into(),
                    },
                    other => ExecError::Concepts(other),
                })?;
                let out = self.tape.min_elem(den, scores);
                Ok(self.record(format!("filter({concept})"), out))
            }
            ProgramAst::Relate { target, anchor, concept, negated } => {
                let target_den = self.eval(target)?;
                let anchor_den = self.eval(anchor)?;
                let (effective, p) = self.binary_tensor(concept, *negated)?;
                self.relation_uses.push(RelationUse {
                    concept: effective.clone(),
                    arity: Arity::Binary,
                    tensor: p,
                });
                let weights = self.tape.softmax(anchor_den);
                let contracted = self.tape.relate_contract(p, weights);
                let out = self.tape.min_elem(target_den, contracted);
                let label = if *negated {
                    format!("relate(not {concept} -> {effective})")
                } else {
                    format!("relate({concept})")
                };
                Ok(self.record(label, out))
            }
            ProgramAst::RelateTernary { target, anchor1, anchor2, concept, negated } => {
                let target_den = self.eval(target)?;
                let a1 = self.eval(anchor1)?;
                let a2 = self.eval(anchor2)?;
                let (effective, t) = self.ternary_tensor(concept, *negated)?;
                self.relation_uses.push(RelationUse {
                    concept: effective.clone(),
                    arity: Arity::Ternary,
                    tensor: t,
                });
                let w1 = self.tape.softmax(a1);
                let w2 = self.tape.softmax(a2);
                let contracted = self.tape.ternary_contract(t, w1, w2);
                let out = self.tape.min_elem(target_den, contracted);
                Ok(self.record(format!("relate_ternary({effective})"), out))
            }
        }
    }
}

/// Execute a program against a scorer, materializing all intermediates on
/// the tape and registering every relation tensor in the trace.
pub fn execute<S: ConceptScorer>(
    tape: &mut Tape,
    scorer: &mut S,
    rules: &RuleSet,
    ast: &ProgramAst,
) -> Result<ExecutionTrace, ExecError> {
    if scorer.n_objects() == 0 {
        return Err(ExecError::EmptyScene);
    }
    let mut ex = Executor { tape, scorer, rules, steps: Vec::new(), relation_uses: Vec::new() };
    let final_id = ex.eval(ast)?;
    let final_scores = ex.tape.value(final_id).data().to_vec();
    Ok(ExecutionTrace { final_id, final_scores, steps: ex.steps, relation_uses: ex.relation_uses })
}

/// Index of the referred object: argmax with lowest-index tie-break.
pub fn predict(trace: &ExecutionTrace) -> usize {
    let mut best = 0;
    for (i, v) in trace.final_scores.iter().enumerate() {
        if *v > trace.final_scores[best] {
            best = i;
        }
    }
    best
}

/// Render the trace for `--dump-trace`: one line per step with shape and the
/// top-k scores of vector-valued outputs.
pub fn format_trace(tape: &Tape, trace: &ExecutionTrace, top_k: usize) -> String {
    let mut out = String::from("# execution trace\n");
    for (i, step) in trace.steps.iter().enumerate() {
        let value = tape.value(step.output);
        let mut line = format!("step {i:<3} {:<40} shape={:?}", step.label, step.shape);
        if value.shape().len() == 1 {
            let mut indexed: Vec<(usize, f64)> =
                value.data().iter().cloned().enumerate().collect();
            indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let top: Vec<String> = indexed
                .into_iter()
                .take(top_k)
                .map(|(i, v)| format!("({i}, {v:.3})"))
                .collect();
            line.push_str(&format!("  top=[{}]", top.join(", ")));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str(&format!("final argmax = {}\n", predict(trace)));
    out
}

/// One-hot scorer over ground truth: 0 where the category/relation holds,
/// -inf elsewhere. The exactness gate for the executor.
pub struct OracleScorer<'a> {
    scene: &'a Scene,
    rulebook: &'a Rulebook,
}

impl<'a> OracleScorer<'a> {
    pub fn new(scene: &'a Scene, rulebook: &'a Rulebook) -> Self {
        OracleScorer { scene, rulebook }
    }

    fn n(&self) -> usize {
        self.scene.len()
    }
}

const HIT: f64 = 0.0;
const MISS: f64 = f64::NEG_INFINITY;

impl ConceptScorer for OracleScorer<'_> {
    fn n_objects(&self) -> usize {
        self.n()
    }

    fn unary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError> {
        let data = self
            .scene
            .objects
            .iter()
            .map(|o| if &o.category == concept { HIT } else { MISS })
            .collect();
        Ok(tape.leaf(Tensor::vector(data)))
    }

    fn binary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError> {
        if !self.rulebook.knows_binary(concept.as_str()) {
            return Err(ConceptsError::UnknownConcept { concept: concept.clone(), arity: Arity::Binary });
        }
        let n = self.n();
        let mut data = vec![MISS; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let holds = self
                        .rulebook
                        .holds(self.scene, concept.as_str(), i, j, None)
                        .map_err(|e| oracle_error(concept, Arity::Binary, e))?;
                    data[i * n + j] = if holds { HIT } else { MISS };
                }
            }
        }
        Ok(tape.leaf(Tensor::matrix(n, n, data)))
    }

    fn ternary(&mut self, tape: &mut Tape, concept: &ConceptName) -> Result<TensorId, ConceptsError> {
        if !self.rulebook.knows_ternary(concept.as_str()) {
            return Err(ConceptsError::UnknownConcept { concept: concept.clone(), arity: Arity::Ternary });
        }
        let n = self.n();
        let mut data = vec![MISS; n * n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if i == j || i == k || j == k {
                        continue;
                    }
                    let holds = self
                        .rulebook
                        .holds(self.scene, concept.as_str(), i, j, Some(k))
                        .map_err(|e| oracle_error(concept, Arity::Ternary, e))?;
                    data[(i * n + j) * n + k] = if holds { HIT } else { MISS };
                }
            }
        }
        Ok(tape.leaf(Tensor::new(vec![n, n, n], data)))
    }
}

fn oracle_error(concept: &ConceptName, arity: Arity, e: SceneError) -> ConceptsError {
    match e {
        SceneError::UnknownRelation(_) => {
            ConceptsError::UnknownConcept { concept: concept.clone(), arity }
        }
        other => ConceptsError::InvalidConfig(other.to_string()),
    }
}
