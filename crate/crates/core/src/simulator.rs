//! Semi-synthetic trajectory generation and the fixed toy scenarios.
//!
//! Each simulated event picks a question, then either opens a new answer
//! (Chinese restaurant process over the question's prior event count) or
//! casts a vote on an existing answer chosen with probability proportional to
//! the inverse of its displayed rank. Vote signs are drawn from the vote
//! model with the generating coefficients.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};

use crate::error::{CvaError, Result};
use crate::model::{vote_prob, VoteParams};
use crate::trajectory::{Answer, Board, QuestionTrajectory, Sign, VoteContext, VoteEvent};

#[derive(Debug, Clone, PartialEq)]
pub enum CrpAlpha {
    Fixed(f64),
    /// Estimate from the empirical question-weight trajectories.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LengthSource {
    /// Draw lengths uniformly from these observed lengths.
    Empirical(Vec<u64>),
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuestionWeights {
    Uniform,
    Zipf(f64),
    /// Weight question `k` by the event count (answers + votes) of reference
    /// question `k mod m`.
    Empirical(Vec<QuestionTrajectory>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_questions: usize,
    pub n_events: usize,
    pub crp_alpha: CrpAlpha,
    pub quality_mean: f64,
    pub quality_sd: f64,
    pub true_lambda: f64,
    pub true_beta: f64,
    pub true_nu: f64,
    pub length_source: LengthSource,
    pub question_weight_source: QuestionWeights,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_questions: 200,
            n_events: 8000,
            crp_alpha: CrpAlpha::Fixed(2.0),
            quality_mean: 0.0,
            quality_sd: 1.0,
            true_lambda: 1.0,
            true_beta: 2.0,
            true_nu: 0.0,
            length_source: LengthSource::LogNormal { mu: 6.0, sigma: 1.0 },
            question_weight_source: QuestionWeights::Uniform,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CvaError::Config(m));
        if self.n_questions == 0 {
            return bad("n_questions must be positive".into());
        }
        if self.n_events < self.n_questions {
            return bad(format!(
                "n_events ({}) must be at least n_questions ({})",
                self.n_events, self.n_questions
            ));
        }
        if !(self.quality_sd > 0.0) {
            return bad(format!("quality_sd must be positive, got {}", self.quality_sd));
        }
        match &self.crp_alpha {
            CrpAlpha::Fixed(a) if !(*a > 0.0 && a.is_finite()) => {
                return bad(format!("crp_alpha must be positive, got {a}"))
            }
            CrpAlpha::Auto if !matches!(self.question_weight_source, QuestionWeights::Empirical(_)) => {
                return bad("crp_alpha = auto needs empirical question weights".into())
            }
            _ => {}
        }
        match &self.length_source {
            LengthSource::Empirical(v) if v.is_empty() => return bad("empty empirical lengths".into()),
            LengthSource::LogNormal { sigma, .. } if !(*sigma > 0.0) => {
                return bad("lognormal sigma must be positive".into())
            }
            _ => {}
        }
        match &self.question_weight_source {
            QuestionWeights::Empirical(v) if v.is_empty() => {
                return bad("empty empirical question weights".into())
            }
            QuestionWeights::Zipf(s) if !s.is_finite() => return bad("zipf exponent must be finite".into()),
            _ => {}
        }
        for (name, v) in [
            ("quality_mean", self.quality_mean),
            ("true_lambda", self.true_lambda),
            ("true_beta", self.true_beta),
            ("true_nu", self.true_nu),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

/// Generated trajectories with the true quality of every answer.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trajectories: Vec<QuestionTrajectory>,
    pub truth: BTreeMap<String, f64>,
    pub alpha: f64,
}

/// Whether the next event of a question with `prior` events opens a new
/// answer. The first event always does.
pub fn crp_opens_answer<R: Rng>(rng: &mut R, prior: usize, alpha: f64) -> bool {
    prior == 0 || rng.random::<f64>() < alpha / (prior as f64 + alpha)
}

/// Pick an answer with probability proportional to `1 / rank`.
pub fn select_by_inverse_rank<R: Rng>(rng: &mut R, ranks: &[u32]) -> usize {
    let total: f64 = ranks.iter().map(|&r| 1.0 / r as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &r) in ranks.iter().enumerate() {
        u -= 1.0 / r as f64;
        if u < 0.0 {
            return i;
        }
    }
    ranks.len() - 1
}

struct LiveQuestion {
    board: Board,
    answers: Vec<Answer>,
    qualities: Vec<f64>,
    events: Vec<VoteEvent>,
    prior: usize,
}

/// Run the generator. Identical configs give identical output.
pub fn generate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let alpha = match (&config.crp_alpha, &config.question_weight_source) {
        (CrpAlpha::Fixed(a), _) => *a,
        (CrpAlpha::Auto, QuestionWeights::Empirical(refs)) => estimate_crp_alpha(refs)?.alpha,
        (CrpAlpha::Auto, _) => unreachable!("checked by validate"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let weights: Option<WeightedIndex<f64>> = match &config.question_weight_source {
        QuestionWeights::Uniform => None,
        QuestionWeights::Zipf(s) => Some(
            WeightedIndex::new((0..config.n_questions).map(|k| 1.0 / ((k + 1) as f64).powf(*s)))
                .map_err(|e| CvaError::Config(format!("zipf weights: {e}")))?,
        ),
        QuestionWeights::Empirical(refs) => Some(
            WeightedIndex::new((0..config.n_questions).map(|k| {
                let r = &refs[k % refs.len()];
                (r.answers.len() + r.events.len()) as f64
            }))
            .map_err(|e| CvaError::Config(format!("empirical weights: {e}")))?,
        ),
    };
    let quality = Normal::new(config.quality_mean, config.quality_sd)
        .map_err(|e| CvaError::Config(format!("quality distribution: {e}")))?;
    let lognormal = match &config.length_source {
        LengthSource::LogNormal { mu, sigma } => Some(
            LogNormal::new(*mu, *sigma).map_err(|e| CvaError::Config(format!("length distribution: {e}")))?,
        ),
        LengthSource::Empirical(_) => None,
    };

    let mut live: Vec<LiveQuestion> = (0..config.n_questions)
        .map(|_| LiveQuestion {
            board: Board::default(),
            answers: Vec::new(),
            qualities: Vec::new(),
            events: Vec::new(),
            prior: 0,
        })
        .collect();

    for step in 0..config.n_events {
        let timestamp = step as i64 + 1;
        let qi = match &weights {
            Some(w) => w.sample(&mut rng),
            None => rng.random_range(0..config.n_questions),
        };
        let lq = &mut live[qi];
        if crp_opens_answer(&mut rng, lq.prior, alpha) {
            let q = quality.sample(&mut rng);
            let text_length = match (&config.length_source, &lognormal) {
                (LengthSource::Empirical(lengths), _) => lengths[rng.random_range(0..lengths.len())],
                (_, Some(ln)) => (ln.sample(&mut rng).round() as u64).max(1),
                _ => unreachable!(),
            };
            let answer = Answer {
                answer_id: format!("q{qi}a{}", lq.answers.len()),
                creation_time: timestamp,
                text_length,
                accepted: false,
                acceptance_time: None,
            };
            lq.board.push(answer.creation_time, answer.log_length());
            lq.answers.push(answer);
            lq.qualities.push(q);
        } else {
            let ranks: Vec<u32> = lq
                .board
                .ranks()
                .into_iter()
                .map(|r| r.expect("simulated answers are always ranked"))
                .collect();
            let j = select_by_inverse_rank(&mut rng, &ranks);
            let context: VoteContext = lq.board.context_with_rank(j, ranks[j]);
            let params = VoteParams {
                q: lq.qualities[j],
                lambda: config.true_lambda,
                nu: config.true_nu,
                beta: config.true_beta,
            };
            let up = rng.random::<f64>() < vote_prob(&params, &context);
            let sign = if up { Sign::Up } else { Sign::Down };
            lq.board.record(j, sign);
            lq.events.push(VoteEvent {
                answer_index: j,
                time_index: lq.events.len() as u32 + 1,
                timestamp,
                sign,
                context: Some(context),
            });
        }
        lq.prior += 1;
    }

    let mut truth = BTreeMap::new();
    let mut trajectories = Vec::new();
    for (qi, lq) in live.into_iter().enumerate() {
        if lq.answers.is_empty() {
            continue;
        }
        for (a, q) in lq.answers.iter().zip(&lq.qualities) {
            truth.insert(a.answer_id.clone(), *q);
        }
        trajectories.push(QuestionTrajectory {
            question_id: format!("q{qi}"),
            answers: lq.answers,
            events: lq.events,
        });
    }
    Ok(SimOutput {
        trajectories,
        truth,
        alpha,
    })
}

/// Min-max scale true qualities to `[-1, 1]` for label files.
pub fn scaled_truth(truth: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let lo = truth.values().copied().fold(f64::INFINITY, f64::min);
    let hi = truth.values().copied().fold(f64::NEG_INFINITY, f64::max);
    truth
        .iter()
        .map(|(k, v)| {
            let s = if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 };
            (k.clone(), s)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEstimate {
    pub alpha: f64,
    /// The root was not bracketed and the estimate sits on a search bound.
    pub at_bound: bool,
}

const ALPHA_LO: f64 = 1e-6;
const ALPHA_HI: f64 = 1e6;

/// Maximum-likelihood CRP concentration: solves
/// `sum_q J_q = sum_q sum_{k < n_q} alpha / (alpha + k)` by bisection, where
/// `J_q` is the number of answers and `n_q` the number of events (answers
/// plus votes) of question `q`.
pub fn estimate_crp_alpha(trajs: &[QuestionTrajectory]) -> Result<AlphaEstimate> {
    if trajs.is_empty() {
        return Err(CvaError::InvalidInput("alpha estimation needs trajectories".into()));
    }
    let answers: f64 = trajs.iter().map(|t| t.answers.len() as f64).sum();
    let counts: Vec<usize> = trajs.iter().map(|t| t.answers.len() + t.events.len()).collect();
    if counts.iter().all(|&n| n <= 1) {
        return Err(CvaError::Unidentifiable("every question has a single event".into()));
    }
    // expected tables minus observed; increasing in alpha
    let excess = |alpha: f64| -> f64 {
        counts
            .iter()
            .map(|&n| (0..n).map(|k| alpha / (alpha + k as f64)).sum::<f64>())
            .sum::<f64>()
            - answers
    };
    let (mut lo, mut hi) = (ALPHA_LO, ALPHA_HI);
    if excess(hi) <= 0.0 {
        return Ok(AlphaEstimate { alpha: hi, at_bound: true });
    }
    if excess(lo) >= 0.0 {
        return Ok(AlphaEstimate { alpha: lo, at_bound: true });
    }
    while (hi - lo) > 1e-9 * lo {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(AlphaEstimate {
        alpha: 0.5 * (lo + hi),
        at_bound: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyScenario {
    /// Two answers, three upvotes each; A's come first at rank 1, B's at rank 2.
    S1a,
    /// Mirror of 1a with downvotes: B's come first, A stays at rank 1.
    S1b,
    /// Both answers pinned to rank 1, net score 0, different sequences.
    S2,
}

impl ToyScenario {
    pub fn name(self) -> &'static str {
        match self {
            ToyScenario::S1a => "1a",
            ToyScenario::S1b => "1b",
            ToyScenario::S2 => "2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim_start_matches(['s', 'S']) {
            "1a" => Ok(ToyScenario::S1a),
            "1b" => Ok(ToyScenario::S1b),
            "2" => Ok(ToyScenario::S2),
            other => Err(CvaError::InvalidInput(format!("unknown toy scenario {other}"))),
        }
    }

    /// Prefix ticks the toy protocol refits at.
    pub fn ticks(self) -> Vec<u32> {
        vec![3, 4, 5, 6]
    }
}

/// Build a toy trajectory with the given pinned ranks. Contexts carry the
/// true prior vote counts; lengths are equal so the length term vanishes.
fn pinned(qid: &str, names: &[&str], votes: &[(usize, bool)], ranks: &[u32]) -> QuestionTrajectory {
    let answers = names
        .iter()
        .map(|n| Answer {
            answer_id: n.to_string(),
            creation_time: 0,
            text_length: 1,
            accepted: false,
            acceptance_time: None,
        })
        .collect();
    let mut board = Board::default();
    for _ in names {
        board.push(0, 0.0);
    }
    let events = votes
        .iter()
        .enumerate()
        .map(|(t, &(j, up))| {
            let sign = if up { Sign::Up } else { Sign::Down };
            let context = board.context_with_rank(j, ranks[j]);
            board.record(j, sign);
            VoteEvent {
                answer_index: j,
                time_index: t as u32 + 1,
                timestamp: t as i64 + 1,
                sign,
                context: Some(context),
            }
        })
        .collect();
    QuestionTrajectory {
        question_id: qid.to_string(),
        answers,
        events,
    }
}

/// Toy scenarios. Scenario 2 yields one trajectory per answer, since its
/// answers are fitted separately.
pub fn toy_scenario(scenario: ToyScenario) -> Vec<QuestionTrajectory> {
    match scenario {
        ToyScenario::S1a => {
            let votes = [(0, true), (0, true), (0, true), (1, true), (1, true), (1, true)];
            vec![pinned("s1a", &["A", "B"], &votes, &[1, 2])]
        }
        ToyScenario::S1b => {
            let votes = [(1, false), (1, false), (1, false), (0, false), (0, false), (0, false)];
            vec![pinned("s1b", &["A", "B"], &votes, &[1, 2])]
        }
        ToyScenario::S2 => {
            let a: Vec<_> = [true, true, true, false, false, false].iter().map(|&s| (0, s)).collect();
            let b: Vec<_> = [true, false, true, false, true, false].iter().map(|&s| (0, s)).collect();
            vec![
                pinned("s2_A", &["A"], &a, &[1]),
                pinned("s2_B", &["B"], &b, &[1]),
            ]
        }
    }
}
