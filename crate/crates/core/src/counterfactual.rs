//! Debiased quality and what-if queries.
//!
//! The debiased quality of an answer is its fitted positive-vote probability
//! averaged over the community's population of vote-ratio and rank contexts,
//! with the answer's own relative length held fixed. Integrating out the
//! context removes the part of the vote rate that came from where the answer
//! sat and which votes it already had.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CvaError, Result};
use crate::model::{sigmoid, vote_prob, CommunityModel, VoteParams};
use crate::trajectory::{QuestionTrajectory, VoteContext, NEUTRAL_RATIO};

/// Populations larger than this are subsampled.
pub const SUBSAMPLE_THRESHOLD: usize = 100_000;
pub const SUBSAMPLE_SIZE: usize = 10_000;
/// Per-time slices smaller than this fall back to the global population.
pub const MIN_SLICE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationSample {
    pub pos_ratio: f64,
    pub rank: u32,
    pub rel_length: f64,
}

impl PopulationSample {
    fn from_context(ctx: &VoteContext) -> Self {
        PopulationSample {
            pos_ratio: ctx.pos_ratio,
            rank: ctx.rank,
            rel_length: ctx.rel_length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationMode {
    Global,
    PerTime,
}

/// Empirical distribution of vote contexts in a community.
#[derive(Debug, Clone)]
pub struct ContextPopulation {
    pub samples: Vec<PopulationSample>,
    /// Slices keyed by the answer's vote ordinal (1 = its first vote).
    pub slices: BTreeMap<u32, Vec<PopulationSample>>,
    pub mode: PopulationMode,
    pub seed: u64,
}

fn subsample(mut v: Vec<PopulationSample>, seed: u64) -> Vec<PopulationSample> {
    if v.len() <= SUBSAMPLE_THRESHOLD {
        return v;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, v.len(), SUBSAMPLE_SIZE).into_vec();
    idx.sort_unstable();
    let picked = idx.iter().map(|&i| v[i]).collect();
    v.clear();
    picked
}

impl ContextPopulation {
    /// Explicit population, mainly for tests and synthetic what-ifs.
    pub fn from_samples(samples: Vec<PopulationSample>) -> Result<Self> {
        let pop = ContextPopulation {
            samples,
            slices: BTreeMap::new(),
            mode: PopulationMode::Global,
            seed: 0,
        };
        pop.validate()?;
        Ok(pop)
    }

    /// Every reconstructed vote context in the community. With
    /// `PopulationMode::PerTime` the contexts are also grouped by the voted
    /// answer's vote ordinal.
    pub fn from_trajectories(
        trajs: &[QuestionTrajectory],
        mode: PopulationMode,
        seed: u64,
    ) -> Result<Self> {
        let mut samples = Vec::new();
        let mut slices: BTreeMap<u32, Vec<PopulationSample>> = BTreeMap::new();
        for t in trajs {
            let mut ordinal = vec![0u32; t.answers.len()];
            for e in &t.events {
                let ctx = e.context.ok_or_else(|| {
                    CvaError::malformed(&t.question_id, "event without reconstructed context")
                })?;
                let s = PopulationSample::from_context(&ctx);
                samples.push(s);
                if mode == PopulationMode::PerTime {
                    ordinal[e.answer_index] += 1;
                    slices.entry(ordinal[e.answer_index]).or_default().push(s);
                }
            }
        }
        let pop = ContextPopulation {
            samples: subsample(samples, seed),
            slices: slices
                .into_iter()
                .map(|(k, v)| (k, subsample(v, seed.wrapping_add(k as u64))))
                .collect(),
            mode,
            seed,
        };
        pop.validate()?;
        Ok(pop)
    }

    fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(CvaError::InvalidInput("empty context population".into()));
        }
        if let Some(bad) = self
            .samples
            .iter()
            .find(|s| !(0.0..=1.0).contains(&s.pos_ratio) || s.rank < 1)
        {
            return Err(CvaError::InvalidInput(format!("invalid population sample {bad:?}")));
        }
        Ok(())
    }

    fn slice(&self, ordinal: u32) -> &[PopulationSample] {
        match self.slices.get(&ordinal) {
            Some(s) if s.len() >= MIN_SLICE => s,
            _ => &self.samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// Average over the population.
    Mean,
    /// Sum over the answer's vote ordinals of the per-ordinal average.
    PerTimeSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthHandling {
    /// Keep the answer's own relative length.
    Fixed,
    /// Integrate the relative length over the population as well.
    Integrated,
}

/// Debiased quality of one answer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityEstimate {
    pub question_id: String,
    pub answer_id: String,
    pub q: f64,
    pub q_hat: f64,
}

fn average(params: &VoteParams, own_length: f64, samples: &[PopulationSample], length: LengthHandling) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let l = match length {
                LengthHandling::Fixed => own_length,
                LengthHandling::Integrated => s.rel_length,
            };
            let x = params.score(s.pos_ratio, l, s.rank as f64);
            sigmoid(x)
        })
        .sum();
    total / samples.len() as f64
}

/// Debiased quality for every answer of `trajs` that the model knows.
/// Answers missing from the model are skipped with a warning. Output follows
/// trajectory order, then answer order.
pub fn estimate_quality(
    model: &CommunityModel,
    trajs: &[QuestionTrajectory],
    population: &ContextPopulation,
    aggregate: Aggregate,
    length: LengthHandling,
) -> Vec<QualityEstimate> {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for t in trajs {
        let lengths = t.final_rel_lengths();
        let votes_per_answer = {
            let mut n = vec![0u32; t.answers.len()];
            for e in &t.events {
                n[e.answer_index] += 1;
            }
            n
        };
        for (j, a) in t.answers.iter().enumerate() {
            let Some(q) = model.quality(&t.question_id, &a.answer_id) else {
                skipped += 1;
                continue;
            };
            let params = model.params(&t.question_id, q);
            let q_hat = match aggregate {
                Aggregate::Mean => average(&params, lengths[j], &population.samples, length),
                Aggregate::PerTimeSum => (1..=votes_per_answer[j])
                    .map(|k| average(&params, lengths[j], population.slice(k), length))
                    .sum(),
            };
            out.push(QualityEstimate {
                question_id: t.question_id.clone(),
                answer_id: a.answer_id.clone(),
                q,
                q_hat,
            });
        }
    }
    if skipped > 0 {
        warn!("{skipped} answers have no fitted quality and were skipped");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mood {
    Pos,
    Neutral,
    Neg,
}

impl Mood {
    pub const ALL: [Mood; 3] = [Mood::Pos, Mood::Neutral, Mood::Neg];

    pub fn as_str(self) -> &'static str {
        match self {
            Mood::Pos => "pos",
            Mood::Neutral => "neutral",
            Mood::Neg => "neg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveStatus {
    Ok,
    NoQualifyingAnswers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoodCurve {
    pub mood: Mood,
    /// `(rank, mean positive-vote probability)` for ranks `1..=K`.
    pub points: Vec<(u32, f64)>,
    pub n_answers: usize,
    pub status: CurveStatus,
}

/// Mean positive-vote probability per rank under a forced vote-ratio mood.
///
/// Neutral forces an even vote ratio. Positive and negative use the answer's
/// mean observed ratio over its votes cast under a positive (`R > 0.5`) or
/// negative (`R < 0.5`) majority; answers without such votes are left out.
pub fn counterfactual_curve(
    model: &CommunityModel,
    trajs: &[QuestionTrajectory],
    max_rank: u32,
    mood: Mood,
) -> Result<MoodCurve> {
    if max_rank < 2 {
        return Err(CvaError::InvalidInput("curve needs at least two ranks".into()));
    }
    let mut sums = vec![0.0; max_rank as usize];
    let mut n_answers = 0usize;
    for t in trajs {
        let lengths = t.final_rel_lengths();
        for (j, a) in t.answers.iter().enumerate() {
            let Some(q) = model.quality(&t.question_id, &a.answer_id) else {
                continue;
            };
            let ratio = match mood {
                Mood::Neutral => Some(NEUTRAL_RATIO),
                Mood::Pos | Mood::Neg => {
                    let (mut s, mut n) = (0.0, 0usize);
                    for e in t.events.iter().filter(|e| e.answer_index == j) {
                        if let Some(c) = e.context {
                            let qualifies = match mood {
                                Mood::Pos => c.pos_ratio > NEUTRAL_RATIO,
                                _ => c.pos_ratio < NEUTRAL_RATIO,
                            };
                            if qualifies {
                                s += c.pos_ratio;
                                n += 1;
                            }
                        }
                    }
                    (n > 0).then(|| s / n as f64)
                }
            };
            let Some(r) = ratio else { continue };
            let params = model.params(&t.question_id, q);
            for (k, acc) in sums.iter_mut().enumerate() {
                let ctx = VoteContext {
                    rank: k as u32 + 1,
                    pos_ratio: r,
                    rel_length: lengths[j],
                    prior_pos: 0,
                    prior_neg: 0,
                };
                *acc += vote_prob(&params, &ctx);
            }
            n_answers += 1;
        }
    }
    if n_answers == 0 {
        return Ok(MoodCurve {
            mood,
            points: Vec::new(),
            n_answers,
            status: CurveStatus::NoQualifyingAnswers,
        });
    }
    Ok(MoodCurve {
        mood,
        points: sums
            .iter()
            .enumerate()
            .map(|(k, s)| (k as u32 + 1, s / n_answers as f64))
            .collect(),
        n_answers,
        status: CurveStatus::Ok,
    })
}

/// Least-squares fit of `p = 1 / (rank^b + 1) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub b: f64,
    pub c: f64,
    pub sse: f64,
}

const B_MAX: f64 = 5.0;
const B_GRID_STEP: f64 = 1e-3;

fn power_law_fit_at(points: &[(u32, f64)], b: f64) -> PowerLawFit {
    let shape = |r: u32| 1.0 / ((r as f64).powf(b) + 1.0);
    let c = points.iter().map(|&(r, p)| p - shape(r)).sum::<f64>() / points.len() as f64;
    let sse = points
        .iter()
        .map(|&(r, p)| {
            let e = p - shape(r) - c;
            e * e
        })
        .sum();
    PowerLawFit { b, c, sse }
}

/// Fit the power law to a curve. For fixed `b` the best `c` is the mean
/// residual, so only `b` is searched: a grid over `[0, 5]` and then a
/// golden-section refinement around the best grid point.
pub fn fit_power_law(points: &[(u32, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(CvaError::InvalidInput("power-law fit needs at least 3 points".into()));
    }
    if points.iter().any(|&(r, p)| r < 1 || !p.is_finite()) {
        return Err(CvaError::InvalidInput("power-law points need rank >= 1 and finite p".into()));
    }
    let first = points[0].1;
    if points.iter().all(|&(_, p)| p == first) {
        return Ok(PowerLawFit {
            b: 0.0,
            c: first - 0.5,
            sse: 0.0,
        });
    }

    let steps = (B_MAX / B_GRID_STEP).round() as usize;
    let mut best = power_law_fit_at(points, 0.0);
    for i in 1..=steps {
        let cand = power_law_fit_at(points, i as f64 * B_GRID_STEP);
        if cand.sse < best.sse {
            best = cand;
        }
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = ((best.b - B_GRID_STEP).max(0.0), (best.b + B_GRID_STEP).min(B_MAX));
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = power_law_fit_at(points, x1).sse;
    let mut f2 = power_law_fit_at(points, x2).sse;
    for _ in 0..100 {
        if hi - lo < 1e-12 {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = power_law_fit_at(points, x1).sse;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = power_law_fit_at(points, x2).sse;
        }
    }
    let refined = power_law_fit_at(points, 0.5 * (lo + hi));
    Ok(if refined.sse < best.sse { refined } else { best })
}
