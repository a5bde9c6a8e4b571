mod common;

use cva_core::evaluation::{kendall_tau, rank_answers, rank_zscores, residual_to_diagonal};
use cva_core::model::{training_events, vote_prob, VoteParams};
use cva_core::simulator::{generate, CrpAlpha, SimConfig};
use cva_core::trainer::{fit, fit_prefixes, FitConfig};
use cva_core::trajectory::{drop_first_votes, read_jsonl, reconstruct_all, reconstruct_contexts, write_jsonl, VoteContext};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trajectory_strategy() -> impl Strategy<Value = cva_core::trajectory::QuestionTrajectory> {
    any::<u64>().prop_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_trajectory(&mut rng, "p", 6, 40)
    })
}

proptest! {
    #[test]
    fn replay_is_idempotent_and_bounded(traj in trajectory_strategy()) {
        let once = reconstruct_contexts(&traj).unwrap();
        let twice = reconstruct_contexts(&once).unwrap();
        prop_assert_eq!(&once, &twice);
        for e in &once.events {
            let c = e.context.unwrap();
            prop_assert!((0.0..=1.0).contains(&c.pos_ratio));
            prop_assert!((-3.0..=3.0).contains(&c.rel_length));
            prop_assert!(c.rank >= 1);
        }
    }

    #[test]
    fn signs_sum_to_vote_difference(traj in trajectory_strategy()) {
        let r = reconstruct_contexts(&traj).unwrap();
        let diffs = r.vote_differences();
        for (j, d) in diffs.iter().enumerate() {
            let s: i64 = r.events.iter().filter(|e| e.answer_index == j).map(|e| e.sign.value()).sum();
            prop_assert_eq!(s, *d);
        }
    }

    #[test]
    fn jsonl_round_trip(traj in trajectory_strategy()) {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&traj)).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(back, vec![traj]);
    }

    #[test]
    fn first_votes_dropped_once_per_answer(traj in trajectory_strategy()) {
        let r = reconstruct_contexts(&traj).unwrap();
        let d = drop_first_votes(&r);
        let voted = (0..r.answers.len()).filter(|&j| r.events.iter().any(|e| e.answer_index == j)).count();
        prop_assert_eq!(d.events.len() + voted, r.events.len());
    }

    #[test]
    fn vote_prob_is_monotone(q in -5.0..5.0f64, lambda in 0.0..3.0f64, beta in 0.0..3.0f64,
                             r1 in 0.0..1.0f64, r2 in 0.0..1.0f64, d1 in 1u32..20, d2 in 1u32..20) {
        let p = VoteParams { q, lambda, nu: 0.0, beta };
        let ctx = |r, d| VoteContext { rank: d, pos_ratio: r, rel_length: 0.0, prior_pos: 0, prior_neg: 0 };
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(vote_prob(&p, &ctx(lo, 3)) <= vote_prob(&p, &ctx(hi, 3)));
        let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(vote_prob(&p, &ctx(0.5, near)) >= vote_prob(&p, &ctx(0.5, far)));
    }

    #[test]
    fn zscores_are_standardized(perm in Just((0..9u32).collect::<Vec<_>>()).prop_shuffle()) {
        let ranks: Vec<u32> = perm.iter().map(|r| r + 1).collect();
        let z = rank_zscores(&ranks).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        prop_assert!(mean.abs() < 1e-12);
        prop_assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_is_symmetric(x in prop::collection::vec(-3.0..3.0f64, 2..12), shift in -1.0..1.0f64) {
        let y: Vec<f64> = x.iter().rev().map(|v| v + shift).collect();
        let a = residual_to_diagonal(&x, &y).unwrap();
        let b = residual_to_diagonal(&y, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ranks_are_permutations(scores in prop::collection::vec(-3i32..3, 2..10)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut r = rank_answers(&s).unwrap();
        r.sort_unstable();
        prop_assert_eq!(r, (1..=s.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn tau_matches_pair_count_with_ties(a in prop::collection::vec(0i32..4, 2..9), seed in any::<u64>()) {
        let b: Vec<f64> = {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            a.iter().map(|_| rng.random_range(0..4) as f64).collect()
        };
        let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        match (kendall_tau(&a, &b), common::brute_tau_b(&a, &b)) {
            (Ok(t), Some(o)) => prop_assert!((t - o).abs() < 1e-12, "{} vs {}", t, o),
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "{:?} vs {:?}", got, want),
        }
    }
}

#[test]
fn fitting_is_deterministic_across_thread_counts() {
    let out = generate(&SimConfig { n_questions: 30, n_events: 6000, ..SimConfig::default() }).unwrap();
    let trajs = reconstruct_all(&out.trajectories).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit(&trajs, &FitConfig::default()).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
}

#[test]
fn tick_past_last_event_equals_full_fit() {
    let out = generate(&SimConfig { n_questions: 10, n_events: 300, ..SimConfig::default() }).unwrap();
    let trajs = reconstruct_all(&out.trajectories).unwrap();
    let full = fit(&trajs, &FitConfig::default()).unwrap();
    let fits = fit_prefixes(&trajs, &FitConfig::default(), &[1, 10_000]).unwrap();
    assert_eq!(fits.last().unwrap().1, full);
    // tick 1 is every answer's first vote, all dropped
    assert_eq!(fits.len(), 1);
}

#[test]
fn noiseless_scores_rank_like_truth() {
    // no position or herding effect: the expected per-vote difference is
    // monotone in quality, so ranking on it reproduces the truth ranking
    let cfg = SimConfig {
        n_questions: 40,
        n_events: 4000,
        crp_alpha: CrpAlpha::Fixed(1.0),
        true_lambda: 0.0,
        true_beta: 0.0,
        ..SimConfig::default()
    };
    let out = generate(&cfg).unwrap();
    let mut checked = 0;
    for t in out.trajectories.iter().filter(|t| t.answers.len() >= 2) {
        let truth: Vec<f64> = t.answers.iter().map(|a| out.truth[&a.answer_id]).collect();
        let expected_diff: Vec<f64> = truth.iter().map(|q| 2.0 / (1.0 + (-q).exp()) - 1.0).collect();
        let a: Vec<f64> = rank_answers(&truth).unwrap().iter().map(|&r| r as f64).collect();
        let b: Vec<f64> = rank_answers(&expected_diff).unwrap().iter().map(|&r| r as f64).collect();
        assert!((kendall_tau(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        checked += 1;
    }
    assert!(checked > 0);
}

#[test]
fn answers_per_question_grow_with_alpha() {
    let mean_answers = |alpha| {
        let out = generate(&SimConfig {
            n_questions: 300,
            n_events: 9000,
            crp_alpha: CrpAlpha::Fixed(alpha),
            ..SimConfig::default()
        })
        .unwrap();
        let n: usize = out.trajectories.iter().map(|t| t.answers.len()).sum();
        n as f64 / out.trajectories.len() as f64
    };
    let (a, b, c) = (mean_answers(1.0), mean_answers(5.0), mean_answers(20.0));
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn training_events_need_contexts() {
    let out = generate(&SimConfig { n_questions: 3, n_events: 30, ..SimConfig::default() }).unwrap();
    let mut bare = out.trajectories.clone();
    for t in &mut bare {
        for e in &mut t.events {
            e.context = None;
        }
    }
    if bare.iter().any(|t| !t.events.is_empty()) {
        assert!(training_events(&bare, false).is_err());
    }
}
