//! StackExchange data-dump ingestion and quality-label loading.
//!
//! Dump files carry one `<row .../>` element per line. Each line is parsed on
//! its own, so a broken row only costs that row: it goes to the reject log and
//! parsing continues.
//!
//! Vote dates in the dump have day granularity. A vote cast on day `d` is
//! stamped at the first second after that day (`d + 1` at midnight UTC), so it
//! sorts after every post created on day `d`. Acceptance times use the same
//! stamp, which means same-day votes on the accepted answer are kept.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use chrono::NaiveDateTime;
use log::warn;
use quick_xml::events::Event;
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Serialize};

use crate::error::{CvaError, Result};
use crate::trajectory::{Answer, QuestionTrajectory, Sign, VoteEvent};

const DAY: i64 = 86_400;
const TYPE_QUESTION: u8 = 1;
const TYPE_ANSWER: u8 = 2;
const VOTE_ACCEPTED: u32 = 1;
const VOTE_UP: u32 = 2;
const VOTE_DOWN: u32 = 3;
const HISTORY_CLOSED: u32 = 10;
const HISTORY_LOCKED: u32 = 14;

/// A skipped input record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub source: String,
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for Reject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}\t{}", self.source, self.line, self.reason)
    }
}

/// A parsed question before filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct RawQuestion {
    pub trajectory: QuestionTrajectory,
    pub closed: bool,
    pub locked: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedDump {
    pub questions: Vec<RawQuestion>,
    pub rejects: Vec<Reject>,
}

/// Parse a datetime such as `2010-07-28T19:04:21.300` (UTC) to epoch seconds.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
        .ok()
        .map(|dt| dt.and_utc().timestamp())
}

/// Stamp for a vote dated `s`: the end of that day.
pub fn vote_stamp(s: &str) -> Option<i64> {
    parse_timestamp(s).map(|t| t.div_euclid(DAY) * DAY + DAY)
}

type Attrs = HashMap<String, String>;

/// Attributes of the single `<row/>` element on `line`. `Ok(None)` for lines
/// that hold something else (declaration, root tags, blank).
fn parse_row(line: &str) -> std::result::Result<Option<Attrs>, String> {
    let trimmed = line.trim();
    if !trimmed.starts_with("<row") {
        if trimmed.is_empty() || trimmed.starts_with("<?") || trimmed.starts_with("</") {
            return Ok(None);
        }
        if trimmed.starts_with('<') && !trimmed.contains('=') && trimmed.ends_with('>') {
            return Ok(None);
        }
        return Err("not a row element".into());
    }
    let mut reader = Reader::from_str(trimmed);
    match reader.read_event() {
        Ok(Event::Empty(e)) if e.name().into_inner() == "row" => {
            let mut attrs = Attrs::new();
            for attr in e.attributes() {
                let attr = attr.map_err(|err| format!("bad attribute: {err}"))?;
                let key = attr.key.into_inner().to_string();
                let value = attr
                    .normalized_value(XmlVersion::Implicit1_0)
                    .map_err(|err| format!("bad value for {key}: {err}"))?;
                attrs.insert(key, value.into_owned());
            }
            Ok(Some(attrs))
        }
        Ok(Event::Start(_)) => Err("row element is not self-closing".into()),
        Ok(_) => Err("not a row element".into()),
        Err(err) => Err(format!("xml error: {err}")),
    }
}

fn required<'a>(attrs: &'a Attrs, key: &str) -> std::result::Result<&'a str, String> {
    attrs
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| format!("missing attribute {key}"))
}

fn required_int<T: std::str::FromStr>(attrs: &Attrs, key: &str) -> std::result::Result<T, String> {
    let raw = required(attrs, key)?;
    raw.parse()
        .map_err(|_| format!("attribute {key} is not an integer: {raw:?}"))
}

fn required_time(attrs: &Attrs, key: &str) -> std::result::Result<i64, String> {
    let raw = required(attrs, key)?;
    parse_timestamp(raw).ok_or_else(|| format!("attribute {key} is not a datetime: {raw:?}"))
}

/// Call `handle` with the attributes of every row in the file. Rows that fail
/// to parse, or that `handle` rejects, land in `rejects`.
fn scan_rows<R: Read>(
    reader: R,
    source: &str,
    rejects: &mut Vec<Reject>,
    mut handle: impl FnMut(usize, &Attrs) -> std::result::Result<(), String>,
) -> Result<()> {
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| CvaError::io(source, e))?;
        let outcome = parse_row(&line).and_then(|row| match row {
            Some(attrs) => handle(i + 1, &attrs),
            None => Ok(()),
        });
        if let Err(reason) = outcome {
            rejects.push(Reject {
                source: source.to_string(),
                line: i + 1,
                reason,
            });
        }
    }
    Ok(())
}

struct QuestionRow {
    id: u64,
    accepted_answer: Option<u64>,
    closed: bool,
}

struct AnswerRow {
    id: u64,
    parent: u64,
    creation_time: i64,
    text_length: u64,
}

struct VoteRow {
    line: usize,
    id: u64,
    post: u64,
    kind: u32,
    stamp: i64,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CvaError::io(path, e))
}

/// Parse the three dump files into per-question trajectories. Questions come
/// out in ascending id order, answers by creation time, and votes by
/// `(day, vote id)`.
pub fn parse_dump(posts: &Path, votes: &Path, posthistory: &Path) -> Result<ParsedDump> {
    parse_dump_from(
        open(posts)?,
        open(votes)?,
        open(posthistory)?,
        ["Posts.xml", "Votes.xml", "PostHistory.xml"],
    )
}

/// [`parse_dump`] over arbitrary readers; `names` label the reject log.
pub fn parse_dump_from<P: Read, V: Read, H: Read>(
    posts: P,
    votes: V,
    posthistory: H,
    names: [&str; 3],
) -> Result<ParsedDump> {
    let mut rejects = Vec::new();
    let mut questions: BTreeMap<u64, QuestionRow> = BTreeMap::new();
    let mut answers: Vec<AnswerRow> = Vec::new();

    scan_rows(posts, names[0], &mut rejects, |_, row| {
        let id: u64 = required_int(row, "Id")?;
        let kind: u8 = required_int(row, "PostTypeId")?;
        let creation_time = required_time(row, "CreationDate")?;
        match kind {
            TYPE_QUESTION => {
                let accepted_answer = match row.get("AcceptedAnswerId") {
                    Some(_) => Some(required_int(row, "AcceptedAnswerId")?),
                    None => None,
                };
                questions.insert(
                    id,
                    QuestionRow {
                        id,
                        accepted_answer,
                        closed: row.contains_key("ClosedDate"),
                    },
                );
            }
            TYPE_ANSWER => answers.push(AnswerRow {
                id,
                parent: required_int(row, "ParentId")?,
                creation_time,
                text_length: row.get("Body").map_or(0, |b| b.chars().count() as u64),
            }),
            _ => {}
        }
        Ok(())
    })?;

    let mut vote_rows: Vec<VoteRow> = Vec::new();
    scan_rows(votes, names[1], &mut rejects, |line, row| {
        let id: u64 = required_int(row, "Id")?;
        if id == 0 {
            return Err("vote id must be positive".into());
        }
        let kind: u32 = required_int(row, "VoteTypeId")?;
        if !matches!(kind, VOTE_ACCEPTED | VOTE_UP | VOTE_DOWN) {
            return Ok(());
        }
        let raw = required(row, "CreationDate")?;
        let stamp = vote_stamp(raw).ok_or_else(|| format!("attribute CreationDate is not a datetime: {raw:?}"))?;
        vote_rows.push(VoteRow {
            line,
            id,
            post: required_int(row, "PostId")?,
            kind,
            stamp,
        });
        Ok(())
    })?;

    let mut locked: HashMap<u64, (bool, bool)> = HashMap::new();
    scan_rows(posthistory, names[2], &mut rejects, |_, row| {
        let kind: u32 = required_int(row, "PostHistoryTypeId")?;
        let post: u64 = required_int(row, "PostId")?;
        let entry = locked.entry(post).or_default();
        match kind {
            HISTORY_CLOSED => entry.0 = true,
            HISTORY_LOCKED => entry.1 = true,
            _ => {}
        }
        Ok(())
    })?;

    let mut by_question: BTreeMap<u64, Vec<AnswerRow>> = BTreeMap::new();
    for a in answers {
        if questions.contains_key(&a.parent) {
            by_question.entry(a.parent).or_default().push(a);
        } else {
            warn!("answer {} has unknown parent {}", a.id, a.parent);
        }
    }
    // answer id -> (question id, index within the sorted answers)
    let mut locate: HashMap<u64, (u64, usize)> = HashMap::new();
    for (qid, list) in by_question.iter_mut() {
        list.sort_by_key(|a| (a.creation_time, a.id));
        for (i, a) in list.iter().enumerate() {
            locate.insert(a.id, (*qid, i));
        }
    }

    vote_rows.sort_by_key(|v| (v.stamp, v.id));
    let mut acceptance: HashMap<u64, i64> = HashMap::new();
    let mut events: BTreeMap<u64, Vec<VoteEvent>> = BTreeMap::new();
    for v in &vote_rows {
        let Some(&(qid, idx)) = locate.get(&v.post) else {
            continue;
        };
        if v.kind == VOTE_ACCEPTED {
            acceptance.entry(v.post).or_insert(v.stamp);
            continue;
        }
        let answer = &by_question[&qid][idx];
        if v.stamp <= answer.creation_time {
            rejects.push(Reject {
                source: names[1].to_string(),
                line: v.line,
                reason: format!("vote {} predates answer {}", v.id, answer.id),
            });
            continue;
        }
        events.entry(qid).or_default().push(VoteEvent {
            answer_index: idx,
            time_index: 0,
            timestamp: v.stamp,
            sign: if v.kind == VOTE_UP { Sign::Up } else { Sign::Down },
            context: None,
        });
    }

    let questions = questions
        .into_values()
        .map(|q| {
            let rows = by_question.remove(&q.id).unwrap_or_default();
            let answers = rows
                .iter()
                .map(|a| {
                    let accepted = q.accepted_answer == Some(a.id);
                    Answer {
                        answer_id: a.id.to_string(),
                        creation_time: a.creation_time,
                        text_length: a.text_length,
                        accepted,
                        acceptance_time: accepted
                            .then(|| acceptance.get(&a.id).copied().unwrap_or(a.creation_time)),
                    }
                })
                .collect();
            let mut trajectory = QuestionTrajectory {
                question_id: q.id.to_string(),
                answers,
                events: events.remove(&q.id).unwrap_or_default(),
            };
            trajectory.reindex();
            let (closed_history, locked) = locked.get(&q.id).copied().unwrap_or_default();
            RawQuestion {
                trajectory,
                closed: q.closed || closed_history,
                locked,
            }
        })
        .collect();

    Ok(ParsedDump { questions, rejects })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Accepted,
    /// Fewer than `min_questions` questions survived.
    TooSmall,
}

/// How many questions and votes each filter removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub questions_in: usize,
    pub closed: usize,
    pub locked: usize,
    pub too_few_answers: usize,
    pub post_acceptance_votes: usize,
    pub questions_out: usize,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub trajectories: Vec<QuestionTrajectory>,
    pub report: FilterReport,
    pub status: FilterStatus,
}

/// Drop closed and locked questions, questions with fewer than `min_answers`
/// non-accepted answers, and votes on an accepted answer cast after its
/// acceptance. A question that is both closed and locked counts as closed.
pub fn apply_filters(raw: Vec<RawQuestion>, min_answers: usize, min_questions: usize) -> FilterOutcome {
    let mut report = FilterReport {
        questions_in: raw.len(),
        ..FilterReport::default()
    };
    let mut trajectories = Vec::new();
    for q in raw {
        if q.closed {
            report.closed += 1;
            continue;
        }
        if q.locked {
            report.locked += 1;
            continue;
        }
        let mut t = q.trajectory;
        let open_answers = t.answers.iter().filter(|a| !a.accepted).count();
        if open_answers < min_answers {
            report.too_few_answers += 1;
            continue;
        }
        let before = t.events.len();
        let answers = &t.answers;
        t.events.retain(|e| {
            let a = &answers[e.answer_index];
            !(a.accepted && a.acceptance_time.is_some_and(|at| e.timestamp > at))
        });
        report.post_acceptance_votes += before - t.events.len();
        t.reindex();
        trajectories.push(t);
    }
    report.questions_out = trajectories.len();
    let status = if trajectories.len() < min_questions {
        FilterStatus::TooSmall
    } else {
        FilterStatus::Accepted
    };
    FilterOutcome {
        trajectories,
        report,
        status,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    CommentSentiment,
    LlmHelpfulness,
    SyntheticTruth,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::CommentSentiment => "comment_sentiment",
            LabelSource::LlmHelpfulness => "llm_helpfulness",
            LabelSource::SyntheticTruth => "synthetic_truth",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "comment_sentiment" => Some(LabelSource::CommentSentiment),
            "llm_helpfulness" => Some(LabelSource::LlmHelpfulness),
            "synthetic_truth" => Some(LabelSource::SyntheticTruth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityLabel {
    pub answer_id: String,
    pub score: f64,
    pub source: LabelSource,
}

#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    pub labels: BTreeMap<String, QualityLabel>,
    /// Rows that replaced an earlier label for the same answer.
    pub duplicates: usize,
    pub rejects: Vec<Reject>,
}

impl LabelSet {
    pub fn scores(&self) -> BTreeMap<String, f64> {
        self.labels
            .iter()
            .map(|(k, l)| (k.clone(), l.score))
            .collect()
    }
}

/// Read an `answer_id,score,source` CSV. Later duplicates win.
pub fn read_labels<R: Read>(reader: R, source: &str) -> Result<LabelSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["answer_id", "score", "source"] {
        return Err(CvaError::InvalidInput(format!(
            "{source}: expected header answer_id,score,source"
        )));
    }
    let mut set = LabelSet::default();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let reject = |reason: String| Reject {
            source: source.to_string(),
            line,
            reason,
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                set.rejects.push(reject(e.to_string()));
                continue;
            }
        };
        let (id, score, kind) = (&record[0], &record[1], &record[2]);
        let Ok(score) = score.parse::<f64>() else {
            set.rejects.push(reject(format!("score is not a number: {score:?}")));
            continue;
        };
        if !(-1.0..=1.0).contains(&score) {
            set.rejects.push(reject(format!("score {score} outside [-1, 1]")));
            continue;
        }
        let Some(kind) = LabelSource::parse(kind) else {
            set.rejects.push(reject(format!("unknown label source {kind:?}")));
            continue;
        };
        let label = QualityLabel {
            answer_id: id.to_string(),
            score,
            source: kind,
        };
        if set.labels.insert(id.to_string(), label).is_some() {
            set.duplicates += 1;
        }
    }
    if set.duplicates > 0 {
        warn!("{source}: {} duplicate labels, last row kept", set.duplicates);
    }
    Ok(set)
}

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    read_labels(open(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(posts: &str, votes: &str, history: &str) -> ParsedDump {
        parse_dump_from(
            posts.as_bytes(),
            votes.as_bytes(),
            history.as_bytes(),
            ["posts", "votes", "history"],
        )
        .unwrap()
    }

    const POSTS: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" PostTypeId="1" CreationDate="2020-01-01T10:00:00.000" AcceptedAnswerId="3" Body="q" />
  <row Id="2" PostTypeId="2" ParentId="1" CreationDate="2020-01-01T11:00:00.000" Body="&lt;p&gt;hi&lt;/p&gt;" />
  <row Id="3" PostTypeId="2" ParentId="1" CreationDate="2020-01-01T12:00:00.000" Body="abc" />
</posts>"#;

    #[test]
    fn timestamps() {
        assert_eq!(parse_timestamp("1970-01-01T00:01:00.000"), Some(60));
        assert_eq!(parse_timestamp("1970-01-02T00:00:00"), Some(DAY));
        assert_eq!(vote_stamp("1970-01-01T00:00:00.000"), Some(DAY));
        assert_eq!(parse_timestamp("01/02/1970"), None);
    }

    #[test]
    fn body_length_is_unescaped_chars() {
        let d = dump(POSTS, "", "");
        let t = &d.questions[0].trajectory;
        assert_eq!(t.answers[0].text_length, "<p>hi</p>".len() as u64);
        assert!(t.answers[1].accepted);
        // no acceptance vote: falls back to the creation time
        assert_eq!(t.answers[1].acceptance_time, t.answers[1].creation_time.into());
        assert!(d.rejects.is_empty());
    }

    #[test]
    fn same_day_votes_order_by_id() {
        let votes = r#"<votes>
  <row Id="10" PostId="2" VoteTypeId="2" CreationDate="2020-01-02T00:00:00.000" />
  <row Id="7" PostId="3" VoteTypeId="3" CreationDate="2020-01-02T00:00:00.000" />
  <row Id="8" PostId="3" VoteTypeId="16" CreationDate="2020-01-02T00:00:00.000" />
</votes>"#;
        let d = dump(POSTS, votes, "");
        let ev = &d.questions[0].trajectory.events;
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].answer_index, ev[0].sign), (1, Sign::Down));
        assert_eq!((ev[1].answer_index, ev[1].sign), (0, Sign::Up));
        assert_eq!(ev[1].time_index, 2);
    }

    #[test]
    fn malformed_rows_are_logged() {
        let posts = "<posts>\n<row Id=\"x\" PostTypeId=\"1\" CreationDate=\"2020-01-01T00:00:00\" />\n<row Id=\"5\" PostTypeId=\"1\" />\n<row Id=\"6\" PostTypeId=\"1\" CreationDate=\"2020-01-01T00:00:00\"\n</posts>";
        let d = dump(posts, "", "");
        let lines: Vec<usize> = d.rejects.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![2, 3, 4]);
        assert!(d.rejects[1].reason.contains("CreationDate"));
        assert_eq!(d.rejects[0].to_string().split('\t').count(), 2);
        assert!(d.questions.is_empty());
    }

    #[test]
    fn history_flags() {
        let history = r#"<row Id="1" PostId="1" PostHistoryTypeId="14" CreationDate="2020-01-03T00:00:00.000" />"#;
        let d = dump(POSTS, "", history);
        assert!(d.questions[0].locked && !d.questions[0].closed);
    }

    fn raw(answers: usize, accepted: Option<usize>, votes: &[(usize, i64)]) -> RawQuestion {
        let answers = (0..answers)
            .map(|i| Answer {
                answer_id: i.to_string(),
                creation_time: 0,
                text_length: 10,
                accepted: accepted == Some(i),
                acceptance_time: (accepted == Some(i)).then_some(100),
            })
            .collect();
        let mut t = QuestionTrajectory {
            question_id: "q".into(),
            answers,
            events: votes
                .iter()
                .map(|&(j, ts)| VoteEvent {
                    answer_index: j,
                    time_index: 0,
                    timestamp: ts,
                    sign: Sign::Up,
                    context: None,
                })
                .collect(),
        };
        t.reindex();
        RawQuestion {
            trajectory: t,
            closed: false,
            locked: false,
        }
    }

    #[test]
    fn accepted_answer_does_not_count() {
        let out = apply_filters(vec![raw(5, Some(0), &[])], 5, 1);
        assert_eq!(out.report.too_few_answers, 1);
        assert_eq!(out.status, FilterStatus::TooSmall);
        let out = apply_filters(vec![raw(5, None, &[])], 5, 1);
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.status, FilterStatus::Accepted);
    }

    #[test]
    fn post_acceptance_votes_dropped() {
        let votes = [(0, 50), (0, 60), (0, 100), (0, 150), (1, 160), (0, 200)];
        let out = apply_filters(vec![raw(6, Some(0), &votes)], 5, 1);
        let t = &out.trajectories[0];
        assert_eq!(t.events.iter().filter(|e| e.answer_index == 0).count(), 3);
        assert_eq!(out.report.post_acceptance_votes, 2);
        assert_eq!(t.events.last().unwrap().time_index, 4);
    }

    #[test]
    fn closed_and_locked_dropped() {
        let mut closed = raw(6, None, &[]);
        closed.closed = true;
        let mut locked = raw(6, None, &[]);
        locked.locked = true;
        let out = apply_filters(vec![closed, locked], 5, 0);
        assert_eq!((out.report.closed, out.report.locked), (1, 1));
        assert!(out.trajectories.is_empty());
    }

    #[test]
    fn labels() {
        let csv = "answer_id,score,source\na42,0.5,llm_helpfulness\na7,1.7,comment_sentiment\na42,0.25,synthetic_truth\nb,x,synthetic_truth\nc,0.1,gpt\n";
        let set = read_labels(csv.as_bytes(), "labels.csv").unwrap();
        assert_eq!(set.labels.len(), 1);
        assert_eq!(set.labels["a42"].score, 0.25);
        assert_eq!(set.labels["a42"].source, LabelSource::SyntheticTruth);
        assert_eq!(set.duplicates, 1);
        let lines: Vec<usize> = set.rejects.iter().map(|r| r.line).collect();
        assert_eq!(lines, vec![3, 5, 6]);
    }

    #[test]
    fn labels_need_header() {
        assert!(read_labels("id,score\n".as_bytes(), "x").is_err());
    }
}
