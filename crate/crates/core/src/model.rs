//! The logistic vote model and its regularized negative log-likelihood.
//!
//! A vote on answer `j` of question `i` is positive with probability
//!
//! ```text
//! sigmoid(q_ij + lambda * R + nu_i * L + beta / (1 + D))
//! ```
//!
//! where `R` is the prior positive-vote ratio, `L` the relative length and
//! `D` the displayed rank. The fit minimizes the negative log-likelihood plus
//! `(w / 2) * |theta|^2` over all parameters.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CvaError, Result};
use crate::trajectory::{drop_first_votes, QuestionTrajectory, VoteContext};

/// Probabilities are kept inside `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-12;

/// Events per partial sum. Fixed so reductions do not depend on the number
/// of worker threads.
const CHUNK: usize = 2048;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Parameters that enter a single vote's linear score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteParams {
    pub q: f64,
    pub lambda: f64,
    pub nu: f64,
    pub beta: f64,
}

impl VoteParams {
    pub fn score(&self, pos_ratio: f64, rel_length: f64, rank: f64) -> f64 {
        self.q + self.lambda * pos_ratio + self.nu * rel_length + self.beta / (1.0 + rank)
    }
}

/// Positive-vote probability for a context, clipped away from 0 and 1.
pub fn vote_prob(params: &VoteParams, ctx: &VoteContext) -> f64 {
    clip(sigmoid(params.score(
        ctx.pos_ratio,
        ctx.rel_length,
        ctx.rank as f64,
    )))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub objective: f64,
    pub converged: bool,
    pub n_events: usize,
    #[serde(default)]
    pub frozen_beta: Option<f64>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Objective after each accepted step, starting with the initial point.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

/// Fitted parameters of one community.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityModel {
    pub lambda: f64,
    pub beta: f64,
    pub l2_weight: f64,
    pub nu: BTreeMap<String, f64>,
    pub q: BTreeMap<String, BTreeMap<String, f64>>,
    pub fit_meta: FitMeta,
}

impl CommunityModel {
    /// All-zero model with the given entries.
    pub fn zeros<'a>(
        l2_weight: f64,
        entries: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let mut q: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut nu = BTreeMap::new();
        for (qid, aid) in entries {
            q.entry(qid.to_string())
                .or_default()
                .insert(aid.to_string(), 0.0);
            nu.insert(qid.to_string(), 0.0);
        }
        CommunityModel {
            lambda: 0.0,
            beta: 0.0,
            l2_weight,
            nu,
            q,
            fit_meta: FitMeta::default(),
        }
    }

    pub fn quality(&self, question_id: &str, answer_id: &str) -> Option<f64> {
        self.q.get(question_id)?.get(answer_id).copied()
    }

    pub fn nu_of(&self, question_id: &str) -> f64 {
        self.nu.get(question_id).copied().unwrap_or(0.0)
    }

    pub fn params(&self, question_id: &str, q: f64) -> VoteParams {
        VoteParams {
            q,
            lambda: self.lambda,
            nu: self.nu_of(question_id),
            beta: self.beta,
        }
    }

    pub fn n_answers(&self) -> usize {
        self.q.values().map(BTreeMap::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| CvaError::Json { line: 0, source })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|source| CvaError::Json { line: 0, source })
    }
}

/// One vote prepared for the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEvent {
    pub question_id: String,
    pub answer_id: String,
    pub upvote: bool,
    pub context: VoteContext,
    pub time_index: u32,
}

/// Flatten reconstructed trajectories into training events, optionally
/// dropping every answer's first vote.
pub fn training_events(
    trajs: &[QuestionTrajectory],
    drop_first: bool,
) -> Result<Vec<TrainingEvent>> {
    let mut out = Vec::new();
    for t in trajs {
        let kept;
        let src = if drop_first {
            kept = drop_first_votes(t);
            &kept
        } else {
            t
        };
        for e in &src.events {
            let context = e.context.ok_or_else(|| {
                CvaError::malformed(&t.question_id, "event without reconstructed context")
            })?;
            out.push(TrainingEvent {
                question_id: t.question_id.clone(),
                answer_id: t.answers[e.answer_index].answer_id.clone(),
                upvote: e.sign.is_up(),
                context,
                time_index: e.time_index,
            });
        }
    }
    Ok(out)
}

/// Position of every parameter in the flat vector:
/// `[q_0 .. q_{A-1}, nu_0 .. nu_{Q-1}, lambda, beta]`.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    answers: Vec<(usize, String)>,
    questions: Vec<String>,
    answer_index: HashMap<(String, String), usize>,
    question_index: HashMap<String, usize>,
}

impl ParamLayout {
    /// Layout over the `(question, answer)` pairs in iteration order;
    /// duplicates are merged.
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut layout = ParamLayout {
            answers: Vec::new(),
            questions: Vec::new(),
            answer_index: HashMap::new(),
            question_index: HashMap::new(),
        };
        for (qid, aid) in pairs {
            let qi = match layout.question_index.get(qid) {
                Some(&i) => i,
                None => {
                    layout.questions.push(qid.to_string());
                    layout.question_index.insert(qid.to_string(), layout.questions.len() - 1);
                    layout.questions.len() - 1
                }
            };
            let key = (qid.to_string(), aid.to_string());
            if !layout.answer_index.contains_key(&key) {
                layout.answers.push((qi, aid.to_string()));
                layout.answer_index.insert(key, layout.answers.len() - 1);
            }
        }
        layout
    }

    pub fn from_model(model: &CommunityModel) -> Self {
        let mut layout = Self::new(
            model
                .q
                .iter()
                .flat_map(|(qid, m)| m.keys().map(move |aid| (qid.as_str(), aid.as_str()))),
        );
        // questions with a nu entry but no answers still take a slot
        for qid in model.nu.keys() {
            if !layout.question_index.contains_key(qid) {
                layout.questions.push(qid.clone());
                layout.question_index.insert(qid.clone(), layout.questions.len() - 1);
            }
        }
        layout
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn dim(&self) -> usize {
        self.answers.len() + self.questions.len() + 2
    }

    pub fn lambda_slot(&self) -> usize {
        self.answers.len() + self.questions.len()
    }

    pub fn beta_slot(&self) -> usize {
        self.lambda_slot() + 1
    }

    pub fn q_slot(&self, question_id: &str, answer_id: &str) -> Option<usize> {
        self.answer_index
            .get(&(question_id.to_string(), answer_id.to_string()))
            .copied()
    }

    pub fn nu_slot(&self, question_id: &str) -> Option<usize> {
        self.question_index
            .get(question_id)
            .map(|&i| self.answers.len() + i)
    }

    pub fn pack(&self, model: &CommunityModel) -> Result<Vec<f64>> {
        let mut theta = vec![0.0; self.dim()];
        for (slot, (qi, aid)) in self.answers.iter().enumerate() {
            let qid = &self.questions[*qi];
            theta[slot] = model
                .quality(qid, aid)
                .ok_or_else(|| CvaError::UnknownParameter(format!("q[{qid}][{aid}]")))?;
        }
        for (i, qid) in self.questions.iter().enumerate() {
            theta[self.answers.len() + i] = *model
                .nu
                .get(qid)
                .ok_or_else(|| CvaError::UnknownParameter(format!("nu[{qid}]")))?;
        }
        theta[self.lambda_slot()] = model.lambda;
        theta[self.beta_slot()] = model.beta;
        Ok(theta)
    }

    pub fn unpack(&self, theta: &[f64], l2_weight: f64, fit_meta: FitMeta) -> CommunityModel {
        let mut q: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (slot, (qi, aid)) in self.answers.iter().enumerate() {
            q.entry(self.questions[*qi].clone())
                .or_default()
                .insert(aid.clone(), theta[slot]);
        }
        let nu = self
            .questions
            .iter()
            .enumerate()
            .map(|(i, qid)| (qid.clone(), theta[self.answers.len() + i]))
            .collect();
        CommunityModel {
            lambda: theta[self.lambda_slot()],
            beta: theta[self.beta_slot()],
            l2_weight,
            nu,
            q,
            fit_meta,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CompiledEvent {
    q_slot: usize,
    nu_slot: usize,
    target: f64,
    pos_ratio: f64,
    rel_length: f64,
    inv_rank: f64,
}

/// Regularized negative log-likelihood over a fixed set of events.
#[derive(Debug, Clone)]
pub struct Objective {
    layout: ParamLayout,
    events: Vec<CompiledEvent>,
    l2_weight: f64,
    frozen_beta: Option<f64>,
}

impl Objective {
    pub fn new(layout: ParamLayout, events: &[TrainingEvent], l2_weight: f64) -> Result<Self> {
        if !(l2_weight >= 0.0) {
            return Err(CvaError::InvalidInput(format!(
                "l2 weight must be non-negative, got {l2_weight}"
            )));
        }
        let compiled = events
            .iter()
            .map(|e| {
                let q_slot = layout.q_slot(&e.question_id, &e.answer_id).ok_or_else(|| {
                    CvaError::UnknownParameter(format!("q[{}][{}]", e.question_id, e.answer_id))
                })?;
                let nu_slot = layout
                    .nu_slot(&e.question_id)
                    .ok_or_else(|| CvaError::UnknownParameter(format!("nu[{}]", e.question_id)))?;
                Ok(CompiledEvent {
                    q_slot,
                    nu_slot,
                    target: if e.upvote { 1.0 } else { 0.0 },
                    pos_ratio: e.context.pos_ratio,
                    rel_length: e.context.rel_length,
                    inv_rank: e.context.inverse_rank(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Objective {
            layout,
            events: compiled,
            l2_weight,
            frozen_beta: None,
        })
    }

    /// Hold `beta` at a fixed value: its gradient is reported as zero.
    pub fn freeze_beta(mut self, value: f64) -> Self {
        self.frozen_beta = Some(value);
        self
    }

    pub fn frozen_beta(&self) -> Option<f64> {
        self.frozen_beta
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn l2_weight(&self) -> f64 {
        self.l2_weight
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Objective value at `theta`; the gradient is written into `grad`.
    pub fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let dim = self.dim();
        assert_eq!(theta.len(), dim);
        assert_eq!(grad.len(), dim);
        let (ls, bs) = (self.layout.lambda_slot(), self.layout.beta_slot());
        let (lambda, beta) = (theta[ls], theta[bs]);

        let partials: Vec<(f64, Vec<f64>)> = self
            .events
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; dim];
                let mut nll = 0.0;
                for e in chunk {
                    let x = theta[e.q_slot]
                        + lambda * e.pos_ratio
                        + theta[e.nu_slot] * e.rel_length
                        + beta * e.inv_rank;
                    let p = sigmoid(x);
                    let pc = clip(p);
                    nll -= e.target * pc.ln() + (1.0 - e.target) * (1.0 - pc).ln();
                    let r = p - e.target;
                    g[e.q_slot] += r;
                    g[e.nu_slot] += r * e.rel_length;
                    g[ls] += r * e.pos_ratio;
                    g[bs] += r * e.inv_rank;
                }
                (nll, g)
            })
            .collect();

        let w = self.l2_weight;
        let mut obj = 0.5 * w * theta.iter().map(|t| t * t).sum::<f64>();
        for (slot, g) in grad.iter_mut().enumerate() {
            *g = w * theta[slot];
        }
        for (nll, g) in &partials {
            obj += nll;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        if self.frozen_beta.is_some() {
            grad[bs] = 0.0;
        }
        obj
    }
}

/// Gradient arranged like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub lambda: f64,
    pub beta: f64,
    pub nu: BTreeMap<String, f64>,
    pub q: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ModelGradient {
    pub fn max_abs(&self) -> f64 {
        self.q
            .values()
            .flat_map(|m| m.values())
            .chain(self.nu.values())
            .chain([&self.lambda, &self.beta])
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Regularized negative log-likelihood of `events` under `model`, with its
/// gradient. The penalty covers every parameter stored in the model.
pub fn nll_and_grad(
    model: &CommunityModel,
    events: &[TrainingEvent],
) -> Result<(f64, ModelGradient)> {
    let layout = ParamLayout::from_model(model);
    let theta = layout.pack(model)?;
    let objective = Objective::new(layout, events, model.l2_weight)?;
    let mut grad = vec![0.0; objective.dim()];
    let value = objective.eval(&theta, &mut grad);
    let shaped = objective.layout().unpack(&grad, 0.0, FitMeta::default());
    Ok((
        value,
        ModelGradient {
            lambda: shaped.lambda,
            beta: shaped.beta,
            nu: shaped.nu,
            q: shaped.q,
        },
    ))
}
