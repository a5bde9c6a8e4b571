//! Brute-force oracles and random instance builders shared by the
//! integration tests. Nothing here reuses library internals.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cva_core::model::{CommunityModel, TrainingEvent};
use cva_core::trajectory::{Answer, QuestionTrajectory, Sign, VoteContext, VoteEvent};
use rand::Rng;

pub fn random_trajectory<R: Rng>(rng: &mut R, qid: &str, max_answers: usize, max_events: usize) -> QuestionTrajectory {
    let n_answers = rng.random_range(1..=max_answers);
    let mut t = 0i64;
    let mut answers = Vec::new();
    for j in 0..n_answers {
        t += rng.random_range(0..4);
        answers.push(Answer {
            answer_id: format!("{qid}a{j}"),
            creation_time: t,
            text_length: rng.random_range(0..2000),
            accepted: false,
            acceptance_time: None,
        });
    }
    if rng.random_bool(0.5) {
        let j = rng.random_range(0..n_answers);
        answers[j].accepted = true;
        answers[j].acceptance_time = Some(answers[j].creation_time + rng.random_range(0..30));
    }
    let n_events = rng.random_range(0..=max_events);
    let mut ts = answers[0].creation_time + 1;
    let mut events = Vec::new();
    for _ in 0..n_events {
        ts += rng.random_range(0..3);
        let open: Vec<usize> = (0..n_answers).filter(|&j| answers[j].creation_time < ts).collect();
        let j = open[rng.random_range(0..open.len())];
        events.push(VoteEvent {
            answer_index: j,
            time_index: 0,
            timestamp: ts,
            sign: if rng.random_bool(0.6) { Sign::Up } else { Sign::Down },
            context: None,
        });
    }
    let mut traj = QuestionTrajectory {
        question_id: qid.to_string(),
        answers,
        events,
    };
    traj.reindex();
    traj
}

fn gone_at(a: &Answer, ts: i64) -> bool {
    a.accepted && a.acceptance_time.is_some_and(|at| ts > at)
}

/// Context replay by brute force: at every vote, re-sort the full answer
/// state from scratch. Returns the kept events with their contexts.
pub fn brute_contexts(traj: &QuestionTrajectory) -> Vec<(usize, VoteContext)> {
    let n = traj.answers.len();
    let mut pos = vec![0u32; n];
    let mut neg = vec![0u32; n];
    let mut out = Vec::new();
    for e in &traj.events {
        let j = e.answer_index;
        if gone_at(&traj.answers[j], e.timestamp) {
            continue;
        }
        let existing: Vec<usize> = (0..n).filter(|&k| traj.answers[k].creation_time < e.timestamp).collect();
        let mut ranked: Vec<usize> = existing
            .iter()
            .copied()
            .filter(|&k| !gone_at(&traj.answers[k], e.timestamp))
            .collect();
        ranked.sort_by_key(|&k| {
            let diff = pos[k] as i64 - neg[k] as i64;
            (-diff, traj.answers[k].creation_time, k)
        });
        let rank = ranked.iter().position(|&k| k == j).unwrap() as u32 + 1;
        let total = pos[j] + neg[j];
        let ratio = if total == 0 { 0.5 } else { pos[j] as f64 / total as f64 };
        let ln = |k: usize| (traj.answers[k].text_length.max(1) as f64).ln();
        let mean = existing.iter().map(|&k| ln(k)).sum::<f64>() / existing.len() as f64;
        out.push((
            j,
            VoteContext {
                rank,
                pos_ratio: ratio,
                rel_length: (ln(j) - mean).clamp(-3.0, 3.0),
                prior_pos: pos[j],
                prior_neg: neg[j],
            },
        ));
        match e.sign {
            Sign::Up => pos[j] += 1,
            Sign::Down => neg[j] += 1,
        }
    }
    out
}

/// Kendall tau-b from an O(n^2) pair count.
pub fn brute_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).signum() as i64 * (a[i] != a[j]) as i64;
            let db = (b[i] - b[j]).signum() as i64 * (b[i] != b[j]) as i64;
            if da == 0 {
                ties_a += 1;
            }
            if db == 0 {
                ties_b += 1;
            }
            match da * db {
                1 => conc += 1,
                -1 => disc += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - ties_a) * (pairs - ties_b)) as f64).sqrt();
    (denom > 0.0).then(|| (conc - disc) as f64 / denom)
}

/// All permutations of `0..n`, as floats.
pub fn permutations(n: usize) -> Vec<Vec<f64>> {
    fn go(prefix: &mut Vec<f64>, left: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let v = left.remove(i);
            prefix.push(v);
            go(prefix, left, out);
            prefix.pop();
            left.insert(i, v);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n).map(|v| v as f64).collect(), &mut out);
    out
}

/// Plain logistic vote probability, clipped like the library does.
pub fn oracle_prob(q: f64, lambda: f64, nu: f64, beta: f64, c: &VoteContext) -> f64 {
    let x = q + lambda * c.pos_ratio + nu * c.rel_length + beta / (1.0 + c.rank as f64);
    (1.0 / (1.0 + (-x).exp())).clamp(1e-12, 1.0 - 1e-12)
}

/// Herding degree as the literal product of odds raised to `h`, then the
/// n-th root. Events are the non-first votes with their full-history
/// contexts.
pub fn herding_product(model: &CommunityModel, trajs: &[QuestionTrajectory]) -> f64 {
    let mut product = 1.0f64;
    let mut n = 0usize;
    for t in trajs {
        let mut seen = vec![false; t.answers.len()];
        for e in &t.events {
            if !std::mem::replace(&mut seen[e.answer_index], true) {
                continue;
            }
            let c = e.context.unwrap();
            let a = &t.answers[e.answer_index];
            let p = oracle_prob(
                model.q[&t.question_id][&a.answer_id],
                model.lambda,
                model.nu[&t.question_id],
                model.beta,
                &c,
            );
            let odds = p / (1.0 - p);
            product *= if c.prior_pos >= c.prior_neg { odds } else { 1.0 / odds };
            n += 1;
        }
    }
    product.powf(1.0 / n as f64)
}

/// Random model covering every `(question, answer)` pair in `events`.
pub fn random_model<R: Rng>(rng: &mut R, events: &[TrainingEvent], l2_weight: f64) -> CommunityModel {
    let mut model = CommunityModel::zeros(
        l2_weight,
        events.iter().map(|e| (e.question_id.as_str(), e.answer_id.as_str())),
    );
    model.lambda = rng.random_range(-2.0..2.0);
    model.beta = rng.random_range(-3.0..3.0);
    for v in model.nu.values_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for m in model.q.values_mut() {
        for v in m.values_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    model
}

pub fn random_events<R: Rng>(rng: &mut R, n: usize) -> Vec<TrainingEvent> {
    let n_q = rng.random_range(1..=3);
    let answers: Vec<(String, String)> = (0..n_q)
        .flat_map(|q| (0..rng.random_range(1..=4)).map(move |a| (format!("q{q}"), format!("q{q}a{a}"))))
        .collect();
    (0..n)
        .map(|i| {
            let (qid, aid) = answers[rng.random_range(0..answers.len())].clone();
            TrainingEvent {
                question_id: qid,
                answer_id: aid,
                upvote: rng.random_bool(0.5),
                context: VoteContext {
                    rank: rng.random_range(1..=8),
                    pos_ratio: rng.random_range(0.0..=1.0),
                    rel_length: rng.random_range(-3.0..=3.0),
                    prior_pos: 0,
                    prior_neg: 0,
                },
                time_index: i as u32 + 1,
            }
        })
        .collect()
}

/// Every scalar parameter of a model, addressed for perturbation.
#[derive(Debug, Clone)]
pub enum Slot {
    Lambda,
    Beta,
    Nu(String),
    Q(String, String),
}

pub fn slots(model: &CommunityModel) -> Vec<Slot> {
    let mut out = vec![Slot::Lambda, Slot::Beta];
    out.extend(model.nu.keys().map(|k| Slot::Nu(k.clone())));
    for (qid, m) in &model.q {
        out.extend(m.keys().map(|a| Slot::Q(qid.clone(), a.clone())));
    }
    out
}

pub fn slot_mut<'a>(model: &'a mut CommunityModel, slot: &Slot) -> &'a mut f64 {
    match slot {
        Slot::Lambda => &mut model.lambda,
        Slot::Beta => &mut model.beta,
        Slot::Nu(q) => model.nu.get_mut(q).unwrap(),
        Slot::Q(q, a) => model.q.get_mut(q).unwrap().get_mut(a).unwrap(),
    }
}

pub fn grad_at(grad: &cva_core::model::ModelGradient, slot: &Slot) -> f64 {
    match slot {
        Slot::Lambda => grad.lambda,
        Slot::Beta => grad.beta,
        Slot::Nu(q) => grad.nu[q],
        Slot::Q(q, a) => grad.q[q][a],
    }
}

/// Relative error between the analytic gradient and central differences
/// with step `h`, as `|analytic - numeric| / max(|analytic|, |numeric|)`
/// over the whole vector.
pub fn finite_difference_error(model: &CommunityModel, events: &[TrainingEvent], h: f64) -> f64 {
    use cva_core::model::nll_and_grad;
    let (_, grad) = nll_and_grad(model, events).unwrap();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for slot in slots(model) {
        let mut plus = model.clone();
        *slot_mut(&mut plus, &slot) += h;
        let mut minus = model.clone();
        *slot_mut(&mut minus, &slot) -= h;
        let numeric = (nll_and_grad(&plus, events).unwrap().0 - nll_and_grad(&minus, events).unwrap().0) / (2.0 * h);
        let analytic = grad_at(&grad, &slot);
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(f64::MIN_POSITIVE)
}

/// Empirical frequency of "next event opens an answer" per prior event
/// count, read back from generated trajectories. Returns `(opens, trials)`.
pub fn crp_counts(trajs: &[QuestionTrajectory], priors: &[usize]) -> BTreeMap<usize, (usize, usize)> {
    let mut out: BTreeMap<usize, (usize, usize)> = priors.iter().map(|&n| (n, (0, 0))).collect();
    for t in trajs {
        let mut kinds: Vec<(i64, bool)> = t.answers.iter().map(|a| (a.creation_time, true)).collect();
        kinds.extend(t.events.iter().map(|e| (e.timestamp, false)));
        kinds.sort_unstable();
        for (n, entry) in out.iter_mut() {
            if let Some(&(_, is_answer)) = kinds.get(*n) {
                entry.1 += 1;
                entry.0 += is_answer as usize;
            }
        }
    }
    out
}
