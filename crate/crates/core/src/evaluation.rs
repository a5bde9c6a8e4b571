//! Ranking-quality metrics and the ranker comparison report.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{estimate_quality, Aggregate, ContextPopulation, LengthHandling};
use crate::error::{CvaError, Result};
use crate::model::CommunityModel;
use crate::trajectory::QuestionTrajectory;

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const MIN_BOOTSTRAP_QUESTIONS: usize = 10;

pub const VOTE_DIFF: &str = "vote_diff";
pub const CVA: &str = "cva";
pub const ABLATION: &str = "no_position_ablation";

/// 1-based ranks by descending score; ties go to the earlier answer.
/// `scores` must be in creation order.
pub fn rank_answers(scores: &[f64]) -> Result<Vec<u32>> {
    if scores.len() < 2 {
        return Err(CvaError::InvalidInput("ranking needs at least two answers".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CvaError::InvalidInput("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut ranks = vec![0u32; scores.len()];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos as u32 + 1;
    }
    Ok(ranks)
}

/// Standardize ranks with the population standard deviation.
pub fn rank_zscores(ranks: &[u32]) -> Result<Vec<f64>> {
    if ranks.len() < 2 {
        return Err(CvaError::InvalidInput("z-scores need at least two ranks".into()));
    }
    let n = ranks.len() as f64;
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = ranks.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(CvaError::Undefined("all ranks equal".into()));
    }
    let sd = var.sqrt();
    Ok(ranks.iter().map(|&r| (r as f64 - mean) / sd).collect())
}

/// Sum of squared vertical distances from the line `y = x`.
pub fn residual_to_diagonal(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CvaError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum())
}

/// Count of discordant pairs while merge-sorting `v` in place.
fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Pairs tied within runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Kendall's tau-b, in O(n log n) (Knight's algorithm).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CvaError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(CvaError::InvalidInput("tau needs at least two items".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(CvaError::InvalidInput("NaN in tau input".into()));
    }
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let ties_a = tied_pairs(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let ties_ab = tied_pairs(&pairs);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(n);
    let swaps = merge_count(&mut ys, &mut buf);
    let ties_b = tied_pairs(&ys);

    if ties_a == n0 || ties_b == n0 {
        return Err(CvaError::Undefined("tau undefined: one side is all ties".into()));
    }
    // concordant - discordant
    let numer = n0 as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * swaps as f64;
    let denom = ((n0 - ties_a) as f64).sqrt() * ((n0 - ties_b) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub insufficient_data: bool,
    pub n: usize,
}

/// One-sided paired bootstrap: `p` is the share of resampled means that are
/// `<= 0`, floored at `1 / resamples`. Positive deltas favour the method
/// under test.
pub fn paired_significance(deltas: &[f64], seed: u64) -> Significance {
    let n = deltas.len();
    if n < MIN_BOOTSTRAP_QUESTIONS {
        return Significance {
            p_value: 1.0,
            insufficient_data: true,
            n,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let sum: f64 = (0..n).map(|_| deltas[rng.random_range(0..n)]).sum();
        if sum / n as f64 <= 0.0 {
            hits += 1;
        }
    }
    Significance {
        p_value: (hits.max(1)) as f64 / BOOTSTRAP_RESAMPLES as f64,
        insufficient_data: false,
        n,
    }
}

/// Ranks of one question's answers, per ranker and for the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSet {
    pub question_id: String,
    pub answer_ids: Vec<String>,
    pub truth: Vec<u32>,
    pub rankers: BTreeMap<String, Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerSummary {
    pub mean_tau: f64,
    pub residual_sum: f64,
    pub per_question_tau: Vec<f64>,
    pub per_question_residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTests {
    pub tau: Significance,
    pub residual: Significance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_questions: usize,
    pub question_ids: Vec<String>,
    pub rankers: BTreeMap<String, RankerSummary>,
    /// CVA against each baseline, keyed by baseline name.
    pub p_values: BTreeMap<String, PairedTests>,
}

/// Which fitted number the CVA ranker sorts by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvaScore {
    QHat,
    RawQ,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub score: CvaScore,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score: CvaScore::QHat,
            seed: 7,
        }
    }
}

fn model_scores(
    model: &CommunityModel,
    trajs: &[QuestionTrajectory],
    population: &ContextPopulation,
    score: CvaScore,
) -> BTreeMap<(String, String), f64> {
    estimate_quality(model, trajs, population, Aggregate::Mean, LengthHandling::Fixed)
        .into_iter()
        .map(|e| {
            let v = match score {
                CvaScore::QHat => e.q_hat,
                CvaScore::RawQ => e.q,
            };
            ((e.question_id, e.answer_id), v)
        })
        .collect()
}

/// Build per-question rankings. Only answers that both models scored and
/// that carry a truth label are ranked; questions left with fewer than two
/// such answers are skipped.
pub fn build_rankings(
    trajs: &[QuestionTrajectory],
    model: &CommunityModel,
    ablation: &CommunityModel,
    truth: &BTreeMap<String, f64>,
    config: &EvalConfig,
) -> Result<Vec<RankingSet>> {
    let population = ContextPopulation::from_trajectories(
        trajs,
        crate::counterfactual::PopulationMode::Global,
        config.seed,
    )?;
    let cva = model_scores(model, trajs, &population, config.score);
    let abl = model_scores(ablation, trajs, &population, config.score);

    let mut out = Vec::new();
    for t in trajs {
        let diffs = t.vote_differences();
        let mut ids = Vec::new();
        let (mut truth_s, mut vd, mut cv, mut ab) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (j, a) in t.answers.iter().enumerate() {
            let key = (t.question_id.clone(), a.answer_id.clone());
            let (Some(&c), Some(&b), Some(&tr)) = (cva.get(&key), abl.get(&key), truth.get(&a.answer_id))
            else {
                continue;
            };
            ids.push(a.answer_id.clone());
            truth_s.push(tr);
            vd.push(diffs[j] as f64);
            cv.push(c);
            ab.push(b);
        }
        if ids.len() < 2 {
            continue;
        }
        let mut rankers = BTreeMap::new();
        rankers.insert(VOTE_DIFF.to_string(), rank_answers(&vd)?);
        rankers.insert(CVA.to_string(), rank_answers(&cv)?);
        rankers.insert(ABLATION.to_string(), rank_answers(&ab)?);
        out.push(RankingSet {
            question_id: t.question_id.clone(),
            answer_ids: ids,
            truth: rank_answers(&truth_s)?,
            rankers,
        });
    }
    Ok(out)
}

fn as_f64(r: &[u32]) -> Vec<f64> {
    r.iter().map(|&v| v as f64).collect()
}

/// Score rankings against truth and run the paired tests.
pub fn summarize(rankings: &[RankingSet], seed: u64) -> Result<EvaluationReport> {
    let mut rankers: BTreeMap<String, RankerSummary> = BTreeMap::new();
    let mut question_ids = Vec::new();
    for set in rankings {
        let truth_z = rank_zscores(&set.truth)?;
        let truth_f = as_f64(&set.truth);
        question_ids.push(set.question_id.clone());
        for (name, ranks) in &set.rankers {
            let tau = kendall_tau(&truth_f, &as_f64(ranks))?;
            let res = residual_to_diagonal(&truth_z, &rank_zscores(ranks)?)?;
            let entry = rankers.entry(name.clone()).or_insert_with(|| RankerSummary {
                mean_tau: 0.0,
                residual_sum: 0.0,
                per_question_tau: Vec::new(),
                per_question_residual: Vec::new(),
            });
            entry.per_question_tau.push(tau);
            entry.per_question_residual.push(res);
        }
    }
    for s in rankers.values_mut() {
        let n = s.per_question_tau.len().max(1) as f64;
        s.mean_tau = s.per_question_tau.iter().sum::<f64>() / n;
        s.residual_sum = s.per_question_residual.iter().sum();
    }

    let mut p_values = BTreeMap::new();
    if let Some(cva) = rankers.get(CVA) {
        for base in [VOTE_DIFF, ABLATION] {
            let Some(b) = rankers.get(base) else { continue };
            let tau_d: Vec<f64> = cva
                .per_question_tau
                .iter()
                .zip(&b.per_question_tau)
                .map(|(c, o)| c - o)
                .collect();
            let res_d: Vec<f64> = cva
                .per_question_residual
                .iter()
                .zip(&b.per_question_residual)
                .map(|(c, o)| o - c)
                .collect();
            p_values.insert(
                base.to_string(),
                PairedTests {
                    tau: paired_significance(&tau_d, seed),
                    residual: paired_significance(&res_d, seed.wrapping_add(1)),
                },
            );
        }
    }
    Ok(EvaluationReport {
        n_questions: rankings.len(),
        question_ids,
        rankers,
        p_values,
    })
}

/// Full comparison of vote difference, CVA and the no-position ablation
/// against truth labels keyed by answer id.
pub fn evaluate(
    trajs: &[QuestionTrajectory],
    model: &CommunityModel,
    ablation: &CommunityModel,
    truth: &BTreeMap<String, f64>,
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    let rankings = build_rankings(trajs, model, ablation, truth, config)?;
    summarize(&rankings, config.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WinRateRow {
    pub vs_vote_diff: f64,
    pub vs_ablation: f64,
    pub vs_both: f64,
}

/// Percentage of communities where CVA is strictly better, per metric.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRates {
    pub n_communities: usize,
    pub residual: WinRateRow,
    pub tau: WinRateRow,
}

pub fn winrates(reports: &[(String, EvaluationReport)]) -> Result<WinRates> {
    if reports.is_empty() {
        return Err(CvaError::InvalidInput("win rates need at least one community".into()));
    }
    let get = |r: &EvaluationReport, name: &str| -> Result<RankerSummary> {
        r.rankers
            .get(name)
            .cloned()
            .ok_or_else(|| CvaError::InvalidInput(format!("report lacks ranker {name}")))
    };
    let mut counts = [[0usize; 3]; 2];
    for (_, r) in reports {
        let (c, v, a) = (get(r, CVA)?, get(r, VOTE_DIFF)?, get(r, ABLATION)?);
        let res = [c.residual_sum < v.residual_sum, c.residual_sum < a.residual_sum];
        let tau = [c.mean_tau > v.mean_tau, c.mean_tau > a.mean_tau];
        for (m, wins) in [res, tau].iter().enumerate() {
            counts[m][0] += wins[0] as usize;
            counts[m][1] += wins[1] as usize;
            counts[m][2] += (wins[0] && wins[1]) as usize;
        }
    }
    let n = reports.len() as f64;
    let row = |c: [usize; 3]| WinRateRow {
        vs_vote_diff: 100.0 * c[0] as f64 / n,
        vs_ablation: 100.0 * c[1] as f64 / n,
        vs_both: 100.0 * c[2] as f64 / n,
    };
    Ok(WinRates {
        n_communities: reports.len(),
        residual: row(counts[0]),
        tau: row(counts[1]),
    })
}

impl WinRates {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "cva_better_than_vote_diff", "cva_better_than_ablation", "cva_better_than_both"])?;
        for (name, r) in [("Res", self.residual), ("KT", self.tau)] {
            w.write_record([
                name.to_string(),
                format!("{:.2}", r.vs_vote_diff),
                format!("{:.2}", r.vs_ablation),
                format!("{:.2}", r.vs_both),
            ])?;
        }
        w.flush().map_err(|e| CvaError::io("<csv>", e))?;
        Ok(())
    }
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CvaError::InvalidInput("pearson needs two equal samples of size >= 2".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CvaError::Undefined("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
