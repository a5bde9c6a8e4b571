//! Deterministic fitting of the vote model.
//!
//! The objective is smooth and, for a positive L2 weight, strongly convex, so
//! a full-batch L-BFGS with a backtracking line search reaches the unique
//! optimum from the all-zero start. Nothing here draws random numbers.

use std::collections::VecDeque;

use log::warn;

use crate::error::{CvaError, Result};
use crate::model::{training_events, CommunityModel, FitMeta, Objective, ParamLayout, TrainingEvent};
use crate::trajectory::QuestionTrajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub l2_weight: f64,
    /// Stop once the largest gradient component is below this.
    pub tol: f64,
    pub max_iters: usize,
    pub drop_first_votes: bool,
    /// Recorded for provenance; the optimizer itself is deterministic.
    pub seed: u64,
    /// Hold `beta` at this value instead of fitting it.
    pub freeze_beta: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            l2_weight: 1.0,
            tol: 1e-6,
            max_iters: 10_000,
            drop_first_votes: true,
            seed: 0,
            freeze_beta: None,
        }
    }
}

const HISTORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
const ROUNDING: f64 = 1e-13;
const CURVATURE: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct Solution {
    pub theta: Vec<f64>,
    pub meta: FitMeta,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `objective` with L-BFGS starting from `theta`.
pub fn minimize(objective: &Objective, mut theta: Vec<f64>, tol: f64, max_iters: usize) -> Solution {
    let dim = objective.dim();
    let beta_slot = objective.layout().beta_slot();
    if let Some(b) = objective.frozen_beta() {
        theta[beta_slot] = b;
    }

    let mut grad = vec![0.0; dim];
    let mut f = objective.eval(&theta, &mut grad);
    let mut trace = vec![f];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(HISTORY);
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) < tol;
    let mut warnings = Vec::new();

    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];

    while !converged && iterations < max_iters {
        // two-loop recursion
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &dir);
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            for d in dir.iter_mut() {
                *d *= gamma;
            }
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (a - b) * si;
            }
        }
        if objective.frozen_beta().is_some() {
            dir[beta_slot] = 0.0;
        }
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &dir);
        }

        let mut step = if history.is_empty() {
            (1.0 / inf_norm(&grad)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            for i in 0..dim {
                trial[i] = theta[i] + step * dir[i];
            }
            let ft = objective.eval(&trial, &mut trial_grad);
            let sufficient = ft <= f + ARMIJO * step * slope;
            // Near the optimum the Armijo decrease drops below rounding of
            // the objective. There, accept steps that keep the objective
            // within rounding and satisfy the curvature condition.
            let rounding_regime = ft <= f + ROUNDING * f.abs().max(1.0)
                && dot(&trial_grad, &dir).abs() <= CURVATURE * -slope;
            if ft.is_finite() && (sufficient || rounding_regime) {
                accepted = Some(ft);
                break;
            }
            step *= 0.5;
        }
        let Some(ft) = accepted else {
            warnings.push(format!("line search stalled at iteration {iterations}"));
            break;
        };

        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == HISTORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut theta, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        f = ft;
        trace.push(f);
        iterations += 1;
        converged = inf_norm(&grad) < tol;
    }

    if !converged {
        warnings.push(format!(
            "not converged after {iterations} iterations (grad norm {:.3e})",
            inf_norm(&grad)
        ));
    }
    Solution {
        meta: FitMeta {
            iterations,
            final_grad_norm: inf_norm(&grad),
            objective: f,
            converged,
            n_events: objective.n_events(),
            frozen_beta: objective.frozen_beta(),
            warnings,
            objective_trace: trace,
        },
        theta,
    }
}

/// Fit on already-prepared training events. Parameters exist for every
/// question and answer that appears in `events`.
pub fn fit_events(events: &[TrainingEvent], config: &FitConfig) -> Result<CommunityModel> {
    if events.is_empty() {
        return Err(CvaError::NoTrainingEvents);
    }
    let layout = ParamLayout::new(
        events
            .iter()
            .map(|e| (e.question_id.as_str(), e.answer_id.as_str())),
    );
    let mut objective = Objective::new(layout, events, config.l2_weight)?;
    if let Some(b) = config.freeze_beta {
        objective = objective.freeze_beta(b);
    }
    let theta = vec![0.0; objective.dim()];
    let sol = minimize(&objective, theta, config.tol, config.max_iters);
    for w in &sol.meta.warnings {
        warn!("{w}");
    }
    Ok(objective
        .layout()
        .unpack(&sol.theta, config.l2_weight, sol.meta))
}

/// Fit the community model to reconstructed trajectories.
pub fn fit(trajs: &[QuestionTrajectory], config: &FitConfig) -> Result<CommunityModel> {
    let events = training_events(trajs, config.drop_first_votes)?;
    fit_events(&events, config)
}

/// Independent fits on event prefixes: for each tick, only events with
/// `time_index <= tick` are used. Ticks whose prefix is empty are skipped.
pub fn fit_prefixes(
    trajs: &[QuestionTrajectory],
    config: &FitConfig,
    ticks: &[u32],
) -> Result<Vec<(u32, CommunityModel)>> {
    if ticks.windows(2).any(|w| w[1] < w[0]) {
        return Err(CvaError::InvalidInput("prefix ticks must be ascending".into()));
    }
    let events = training_events(trajs, config.drop_first_votes)?;
    let mut out = Vec::with_capacity(ticks.len());
    for &tick in ticks {
        let prefix: Vec<TrainingEvent> = events
            .iter()
            .filter(|e| e.time_index <= tick)
            .cloned()
            .collect();
        if prefix.is_empty() {
            warn!("prefix tick {tick} has no events, skipped");
            continue;
        }
        out.push((tick, fit_events(&prefix, config)?));
    }
    Ok(out)
}
