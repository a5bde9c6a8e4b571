//! Questions, answers and vote streams, plus replay of each vote's context.
//!
//! The context of a vote is what the voter saw just before casting it: the
//! answer's displayed rank, its share of positive votes so far and its length
//! relative to the answers that coexisted with it. All three are recomputed
//! instantaneously after every event from strictly earlier events.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CvaError, Result};

/// Bound applied to the centered log length.
pub const REL_LENGTH_CLIP: f64 = 3.0;

/// Vote ratio shown for an answer with no prior votes.
pub const NEUTRAL_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer_id: String,
    pub creation_time: i64,
    pub text_length: u64,
    pub accepted: bool,
    pub acceptance_time: Option<i64>,
}

impl Answer {
    /// Log length used for the relative-length feature. Empty bodies count as
    /// length 1 so the log stays finite.
    pub fn log_length(&self) -> f64 {
        (self.text_length.max(1) as f64).ln()
    }

    fn accepted_before(&self, timestamp: i64) -> bool {
        self.accepted && self.acceptance_time.is_some_and(|at| timestamp > at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Up,
    Down,
}

impl Sign {
    pub fn is_up(self) -> bool {
        matches!(self, Sign::Up)
    }

    pub fn value(self) -> i64 {
        match self {
            Sign::Up => 1,
            Sign::Down => -1,
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i64(self.value())
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i64::deserialize(d)? {
            1 => Ok(Sign::Up),
            -1 => Ok(Sign::Down),
            other => Err(serde::de::Error::custom(format!(
                "vote sign must be +1 or -1, got {other}"
            ))),
        }
    }
}

/// What the voter saw when casting a vote.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteContext {
    /// Displayed rank, 1 = top.
    pub rank: u32,
    /// Share of the answer's prior votes that were positive.
    pub pos_ratio: f64,
    /// Centered log length, clipped to `[-3, 3]`.
    pub rel_length: f64,
    pub prior_pos: u32,
    pub prior_neg: u32,
}

impl VoteContext {
    pub fn inverse_rank(&self) -> f64 {
        1.0 / (1.0 + self.rank as f64)
    }

    /// Whether the prior majority is positive or tied.
    pub fn majority_positive(&self) -> bool {
        self.prior_pos >= self.prior_neg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteEvent {
    pub answer_index: usize,
    /// 1-based position of the event within its question. Not serialized;
    /// assigned from list order on load.
    #[serde(skip)]
    pub time_index: u32,
    pub timestamp: i64,
    pub sign: Sign,
    #[serde(skip)]
    pub context: Option<VoteContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTrajectory {
    pub question_id: String,
    pub answers: Vec<Answer>,
    pub events: Vec<VoteEvent>,
}

impl QuestionTrajectory {
    /// Renumber events 1..n in list order.
    pub fn reindex(&mut self) {
        for (i, e) in self.events.iter_mut().enumerate() {
            e.time_index = i as u32 + 1;
        }
    }

    /// Final vote difference per answer, counting every event in the list.
    pub fn vote_differences(&self) -> Vec<i64> {
        let mut diff = vec![0i64; self.answers.len()];
        for e in &self.events {
            if let Some(d) = diff.get_mut(e.answer_index) {
                *d += e.sign.value();
            }
        }
        diff
    }

    /// Relative length of each answer against every answer of the question.
    pub fn final_rel_lengths(&self) -> Vec<f64> {
        let logs: Vec<f64> = self.answers.iter().map(Answer::log_length).collect();
        if logs.is_empty() {
            return Vec::new();
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        logs.iter()
            .map(|l| (l - mean).clamp(-REL_LENGTH_CLIP, REL_LENGTH_CLIP))
            .collect()
    }

    pub fn has_contexts(&self) -> bool {
        self.events.iter().all(|e| e.context.is_some())
    }
}

/// Live display state of one question: the answers that exist so far and
/// their vote tallies. Shared by context replay and the simulator so both
/// rank and measure answers the same way.
#[derive(Debug, Clone, Default)]
pub(crate) struct Board {
    slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    creation_time: i64,
    log_length: f64,
    pos: u32,
    neg: u32,
    ranked: bool,
}

impl Slot {
    fn diff(&self) -> i64 {
        self.pos as i64 - self.neg as i64
    }

    /// Ordering key for the default display: larger vote difference first,
    /// then earlier creation, then list position.
    fn outranks(&self, self_idx: usize, other: &Slot, other_idx: usize) -> bool {
        let (a, b) = (self.diff(), other.diff());
        a > b || (a == b && (self.creation_time, self_idx) < (other.creation_time, other_idx))
    }
}

impl Board {
    pub(crate) fn len(&self) -> usize {
        self.slots.len()
    }

    pub(crate) fn push(&mut self, creation_time: i64, log_length: f64) {
        self.slots.push(Slot {
            creation_time,
            log_length,
            pos: 0,
            neg: 0,
            ranked: true,
        });
    }

    /// Take an answer out of the display ordering (accepted answers after
    /// acceptance).
    pub(crate) fn unrank(&mut self, idx: usize) {
        self.slots[idx].ranked = false;
    }

    pub(crate) fn record(&mut self, idx: usize, sign: Sign) {
        let s = &mut self.slots[idx];
        match sign {
            Sign::Up => s.pos += 1,
            Sign::Down => s.neg += 1,
        }
    }

    pub(crate) fn rank_of(&self, idx: usize) -> u32 {
        let me = &self.slots[idx];
        let ahead = self
            .slots
            .iter()
            .enumerate()
            .filter(|(j, s)| *j != idx && s.ranked && s.outranks(*j, me, idx))
            .count();
        ahead as u32 + 1
    }

    /// Ranks of all ranked answers; unranked slots get `None`.
    pub(crate) fn ranks(&self) -> Vec<Option<u32>> {
        let mut order: Vec<usize> = (0..self.slots.len())
            .filter(|&i| self.slots[i].ranked)
            .collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (&self.slots[a], &self.slots[b]);
            sb.diff()
                .cmp(&sa.diff())
                .then(sa.creation_time.cmp(&sb.creation_time))
                .then(a.cmp(&b))
        });
        let mut ranks = vec![None; self.slots.len()];
        for (pos, &i) in order.iter().enumerate() {
            ranks[i] = Some(pos as u32 + 1);
        }
        ranks
    }

    fn rel_length(&self, idx: usize) -> f64 {
        let mean = self.slots.iter().map(|s| s.log_length).sum::<f64>() / self.slots.len() as f64;
        (self.slots[idx].log_length - mean).clamp(-REL_LENGTH_CLIP, REL_LENGTH_CLIP)
    }

    pub(crate) fn context_with_rank(&self, idx: usize, rank: u32) -> VoteContext {
        let s = &self.slots[idx];
        let total = s.pos + s.neg;
        let pos_ratio = if total > 0 {
            s.pos as f64 / total as f64
        } else {
            NEUTRAL_RATIO
        };
        VoteContext {
            rank,
            pos_ratio,
            rel_length: self.rel_length(idx),
            prior_pos: s.pos,
            prior_neg: s.neg,
        }
    }

    pub(crate) fn context(&self, idx: usize) -> VoteContext {
        self.context_with_rank(idx, self.rank_of(idx))
    }
}

/// Replay a question's events and attach the context each vote was cast in.
///
/// Answers must be listed by creation time and events by timestamp. Votes on
/// the accepted answer after its acceptance are dropped, and from that point
/// the accepted answer no longer takes a display slot. Remaining events are
/// renumbered 1..n.
pub fn reconstruct_contexts(traj: &QuestionTrajectory) -> Result<QuestionTrajectory> {
    let qid = &traj.question_id;
    for w in traj.answers.windows(2) {
        if w[1].creation_time < w[0].creation_time {
            return Err(CvaError::malformed(qid, "answers not ordered by creation time"));
        }
    }

    let mut board = Board::default();
    let mut events = Vec::with_capacity(traj.events.len());
    let mut last_ts = i64::MIN;

    for ev in &traj.events {
        if ev.timestamp < last_ts {
            return Err(CvaError::malformed(qid, "events not ordered by timestamp"));
        }
        last_ts = ev.timestamp;
        let answer = traj.answers.get(ev.answer_index).ok_or_else(|| {
            CvaError::malformed(qid, format!("answer index {} out of range", ev.answer_index))
        })?;

        while board.len() < traj.answers.len()
            && traj.answers[board.len()].creation_time < ev.timestamp
        {
            let a = &traj.answers[board.len()];
            board.push(a.creation_time, a.log_length());
        }
        for (i, a) in traj.answers.iter().enumerate().take(board.len()) {
            if a.accepted_before(ev.timestamp) {
                board.unrank(i);
            }
        }

        if ev.answer_index >= board.len() {
            return Err(CvaError::malformed(
                qid,
                format!(
                    "event at {} references answer {} created at {}",
                    ev.timestamp, answer.answer_id, answer.creation_time
                ),
            ));
        }
        if answer.accepted_before(ev.timestamp) {
            continue;
        }

        let context = board.context(ev.answer_index);
        board.record(ev.answer_index, ev.sign);
        events.push(VoteEvent {
            context: Some(context),
            ..ev.clone()
        });
    }

    let mut out = QuestionTrajectory {
        question_id: traj.question_id.clone(),
        answers: traj.answers.clone(),
        events,
    };
    out.reindex();
    Ok(out)
}

/// Copy of the trajectory without each answer's chronologically first vote.
/// Remaining events keep their time indices and the contexts computed from
/// the full history.
pub fn drop_first_votes(traj: &QuestionTrajectory) -> QuestionTrajectory {
    let mut seen = vec![false; traj.answers.len()];
    let events = traj
        .events
        .iter()
        .filter(|e| match seen.get_mut(e.answer_index) {
            Some(s) if !*s => {
                *s = true;
                false
            }
            _ => true,
        })
        .cloned()
        .collect();
    QuestionTrajectory {
        question_id: traj.question_id.clone(),
        answers: traj.answers.clone(),
        events,
    }
}

/// Parse trajectory JSONL, one question per line. Time indices are assigned
/// from list order; contexts are left empty.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<QuestionTrajectory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CvaError::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut traj: QuestionTrajectory = serde_json::from_str(&line)
            .map_err(|source| CvaError::Json { line: i + 1, source })?;
        traj.reindex();
        out.push(traj);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<QuestionTrajectory>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CvaError::io(path, e))?;
    read_jsonl(BufReader::new(file))
}

pub fn write_jsonl<W: Write>(mut writer: W, trajs: &[QuestionTrajectory]) -> Result<()> {
    for t in trajs {
        let line = serde_json::to_string(t).map_err(|source| CvaError::Json { line: 0, source })?;
        writeln!(writer, "{line}").map_err(|e| CvaError::io("<jsonl>", e))?;
    }
    Ok(())
}

/// Reconstruct contexts for every trajectory, in parallel. Output order
/// matches input order.
pub fn reconstruct_all(trajs: &[QuestionTrajectory]) -> Result<Vec<QuestionTrajectory>> {
    use rayon::prelude::*;
    trajs.par_iter().map(reconstruct_contexts).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn answer(id: &str, created: i64) -> Answer {
        Answer {
            answer_id: id.to_string(),
            creation_time: created,
            text_length: 100,
            accepted: false,
            acceptance_time: None,
        }
    }

    pub(crate) fn vote(answer_index: usize, timestamp: i64, up: bool) -> VoteEvent {
        VoteEvent {
            answer_index,
            time_index: 0,
            timestamp,
            sign: if up { Sign::Up } else { Sign::Down },
            context: None,
        }
    }

    fn traj(answers: Vec<Answer>, events: Vec<VoteEvent>) -> QuestionTrajectory {
        let mut t = QuestionTrajectory {
            question_id: "q".into(),
            answers,
            events,
        };
        t.reindex();
        t
    }

    #[test]
    fn ranks_follow_vote_difference() {
        // diffs A=3, B=1, C=2 then one probe vote on each
        let answers = vec![answer("A", 0), answer("B", 1), answer("C", 2)];
        let mut events = Vec::new();
        let mut ts = 10;
        for (idx, n) in [(0usize, 3), (1, 1), (2, 2)] {
            for _ in 0..n {
                events.push(vote(idx, ts, true));
                ts += 1;
            }
        }
        for idx in 0..3 {
            events.push(vote(idx, 100 + idx as i64, false));
        }
        let t = reconstruct_contexts(&traj(answers, events)).unwrap();
        // probe on A sees diffs [3,1,2]
        assert_eq!(t.events[6].context.unwrap().rank, 1);
        // probe on B sees [2,1,2]: A and C tie ahead of B
        assert_eq!(t.events[7].context.unwrap().rank, 3);
        // probe on C sees [2,0,2]: tie with A, A created first
        assert_eq!(t.events[8].context.unwrap().rank, 2);
    }

    #[test]
    fn tie_breaks_by_creation_time() {
        let t = traj(
            vec![answer("A", 0), answer("B", 1)],
            vec![vote(1, 5, true), vote(0, 6, true)],
        );
        let t = reconstruct_contexts(&t).unwrap();
        assert_eq!(t.events[0].context.unwrap().rank, 2);
        // A at diff 0 vs B at diff 1
        assert_eq!(t.events[1].context.unwrap().rank, 2);

        let t2 = traj(
            vec![answer("A", 0), answer("B", 1)],
            vec![vote(0, 5, true), vote(0, 6, false), vote(1, 7, true), vote(0, 8, true)],
        );
        let t2 = reconstruct_contexts(&t2).unwrap();
        let c = t2.events[2].context.unwrap();
        assert_eq!(c.rank, 2, "B loses the 0-0 tie to the older A");
        assert_eq!(t2.events[3].context.unwrap().rank, 2);
    }

    #[test]
    fn vote_ratio_counts_prior_votes_only() {
        let ev = vec![
            vote(0, 1, true),
            vote(0, 2, true),
            vote(0, 3, false),
            vote(0, 4, true),
            vote(0, 5, true),
        ];
        let t = reconstruct_contexts(&traj(vec![answer("A", 0)], ev)).unwrap();
        let first = t.events[0].context.unwrap();
        assert_eq!(first.pos_ratio, 0.5);
        assert_eq!((first.prior_pos, first.prior_neg), (0, 0));
        let fifth = t.events[4].context.unwrap();
        assert_eq!((fifth.prior_pos, fifth.prior_neg), (3, 1));
        assert_eq!(fifth.pos_ratio, 0.75);
    }

    #[test]
    fn relative_length_is_centered_log() {
        let mut a = answer("A", 0);
        a.text_length = 100;
        let mut b = answer("B", 1);
        b.text_length = 400;
        let t = traj(vec![a, b], vec![vote(0, 0 + 2, true), vote(1, 3, true)]);
        let t = reconstruct_contexts(&t).unwrap();
        let la = t.events[0].context.unwrap().rel_length;
        let expect = -(4.0f64.ln()) / 2.0;
        assert!((la - expect).abs() < 1e-12);
        let lb = t.events[1].context.unwrap().rel_length;
        assert!((lb + expect).abs() < 1e-12);
    }

    #[test]
    fn relative_length_clipped() {
        let mut a = answer("A", 0);
        a.text_length = 1;
        let mut b = answer("B", 0);
        b.text_length = 10_000_000_000;
        let t = reconstruct_contexts(&traj(vec![a, b], vec![vote(0, 2, true)])).unwrap();
        assert_eq!(t.events[0].context.unwrap().rel_length, -REL_LENGTH_CLIP);
    }

    #[test]
    fn vote_before_creation_is_malformed() {
        let t = traj(vec![answer("A", 0), answer("B", 10)], vec![vote(1, 10, true)]);
        assert!(matches!(
            reconstruct_contexts(&t),
            Err(CvaError::MalformedTrajectory { .. })
        ));
    }

    #[test]
    fn accepted_answer_leaves_ranking_after_acceptance() {
        let mut acc = answer("A", 0);
        acc.accepted = true;
        acc.acceptance_time = Some(20);
        let t = traj(
            vec![acc, answer("B", 1), answer("C", 2)],
            vec![
                vote(0, 10, true),
                vote(0, 11, true),
                vote(1, 12, true),
                vote(0, 25, true),
                vote(2, 26, true),
            ],
        );
        let t = reconstruct_contexts(&t).unwrap();
        assert_eq!(t.events.len(), 4, "post-acceptance vote on A dropped");
        assert_eq!(t.events[3].answer_index, 2);
        assert_eq!(t.events[3].time_index, 4);
        // C competes only with B once A is accepted
        assert_eq!(t.events[3].context.unwrap().rank, 2);
    }

    #[test]
    fn drop_first_votes_keeps_full_history_contexts() {
        let t = traj(
            vec![answer("A", 0), answer("B", 1)],
            vec![
                vote(0, 2, true),
                vote(0, 3, true),
                vote(1, 4, true),
                vote(0, 5, false),
                vote(1, 6, true),
                vote(1, 7, false),
            ],
        );
        let full = reconstruct_contexts(&t).unwrap();
        let dropped = drop_first_votes(&full);
        assert_eq!(dropped.events.len(), 4);
        assert_eq!(
            dropped.events.iter().map(|e| e.time_index).collect::<Vec<_>>(),
            vec![2, 4, 5, 6]
        );
        for e in &dropped.events {
            let orig = &full.events[e.time_index as usize - 1];
            assert_eq!(e.context, orig.context);
        }
        let signs: Vec<_> = dropped
            .events
            .iter()
            .filter(|e| e.answer_index == 0)
            .map(|e| e.sign)
            .collect();
        assert_eq!(signs, vec![Sign::Up, Sign::Down]);
    }

    #[test]
    fn single_vote_answer_contributes_nothing() {
        let t = traj(vec![answer("A", 0)], vec![vote(0, 1, true)]);
        let full = reconstruct_contexts(&t).unwrap();
        assert!(drop_first_votes(&full).events.is_empty());
    }

    #[test]
    fn jsonl_field_names() {
        let t = traj(vec![answer("A", 0)], vec![vote(0, 1, false)]);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[t.clone()]).unwrap();
        let s = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            s.trim(),
            r#"{"question_id":"q","answers":[{"answer_id":"A","creation_time":0,"text_length":100,"accepted":false,"acceptance_time":null}],"events":[{"answer_index":0,"timestamp":1,"sign":-1}]}"#
        );
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back[0], t);
    }

    #[test]
    fn jsonl_rejects_bad_sign() {
        let line = r#"{"question_id":"q","answers":[],"events":[{"answer_index":0,"timestamp":1,"sign":0}]}"#;
        assert!(read_jsonl(line.as_bytes()).is_err());
    }
}
