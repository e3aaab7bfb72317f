//! Ranking metrics and per-participant reports.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::QuestionGroup;
use crate::error::{Error, Result};
use crate::model::backbone::score_value;
use crate::model::Model;
use crate::params::ParameterSet;

/// One scored candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub aid: u64,
    pub score: f64,
    pub label: bool,
}

/// Candidates of one question in rank order: descending score, ties by
/// ascending answer id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub qid: u64,
    items: Vec<Ranked>,
}

impl RankedList {
    /// Sorts `items` into rank order. Returns `None` when there is no
    /// positive, since such questions are excluded from every metric.
    pub fn new(qid: u64, mut items: Vec<Ranked>) -> Option<Self> {
        if !items.iter().any(|r| r.label) {
            return None;
        }
        items.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.aid.cmp(&b.aid))
        });
        Some(Self { qid, items })
    }

    pub fn items(&self) -> &[Ranked] {
        &self.items
    }
}

pub fn average_precision(list: &RankedList) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, r) in list.items.iter().enumerate() {
        if r.label {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / hits as f64
}

pub fn reciprocal_rank(list: &RankedList) -> f64 {
    let first = list
        .items
        .iter()
        .position(|r| r.label)
        .expect("list holds a positive");
    1.0 / (first + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantMetrics {
    pub participant: String,
    pub map: f64,
    pub mrr: f64,
    /// Questions that entered the metric.
    pub questions: usize,
    /// Questions dropped because no candidate was positive.
    pub excluded: usize,
}

/// Averages AP and RR over `lists`; `excluded` is carried into the report.
pub fn metrics_from_lists(
    participant: &str,
    lists: &[RankedList],
    excluded: usize,
) -> Result<ParticipantMetrics> {
    if lists.is_empty() {
        return Err(Error::Evaluation(format!(
            "participant `{participant}` has no question with a positive candidate"
        )));
    }
    let n = lists.len() as f64;
    Ok(ParticipantMetrics {
        participant: participant.to_string(),
        map: lists.iter().map(average_precision).sum::<f64>() / n,
        mrr: lists.iter().map(reciprocal_rank).sum::<f64>() / n,
        questions: lists.len(),
        excluded,
    })
}

/// Scores every candidate with the participant's own parameters.
/// Also returns how many candidate inputs had their answer truncated.
pub fn evaluate_participant(
    participant: &str,
    model: &Model,
    params: &ParameterSet,
    groups: &[QuestionGroup],
) -> Result<(ParticipantMetrics, usize)> {
    let mut lists = Vec::with_capacity(groups.len());
    let mut excluded = 0;
    let mut truncated = 0;
    for g in groups {
        if !g.candidates.iter().any(|c| c.label) {
            excluded += 1;
            continue;
        }
        let mut items = Vec::with_capacity(g.candidates.len());
        for c in &g.candidates {
            let (score, cut) = score_value(model, params, &g.question, &c.tokens)?;
            truncated += usize::from(cut);
            items.push(Ranked {
                aid: c.aid,
                score,
                label: c.label,
            });
        }
        lists.extend(RankedList::new(g.qid, items));
    }
    Ok((
        metrics_from_lists(participant, &lists, excluded)?,
        truncated,
    ))
}

/// Unweighted mean of MAP and of MRR across participants.
pub fn overall(per_participant: &[ParticipantMetrics]) -> (f64, f64) {
    let n = per_participant.len() as f64;
    (
        per_participant.iter().map(|m| m.map).sum::<f64>() / n,
        per_participant.iter().map(|m| m.mrr).sum::<f64>() / n,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub participants: Vec<ParticipantMetrics>,
    pub overall_map: f64,
    pub overall_mrr: f64,
}

impl MetricsReport {
    pub fn new(participants: Vec<ParticipantMetrics>) -> Self {
        let (overall_map, overall_mrr) = overall(&participants);
        Self {
            participants,
            overall_map,
            overall_mrr,
        }
    }

    pub fn participant(&self, name: &str) -> Option<&ParticipantMetrics> {
        self.participants.iter().find(|p| p.participant == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one MAP/MRR column pair per participant, overall last.
    pub fn table(&self, row_label: &str) -> String {
        let mut header = format!("{:<24}", "");
        let mut sub = format!("{:<24}", "");
        let mut row = format!("{row_label:<24}");
        for p in &self.participants {
            let _ = write!(header, " {:^15}", truncate(&p.participant, 15));
            sub.push_str("     MAP     MRR");
            let _ = write!(row, " {:>7.4} {:>7.4}", p.map, p.mrr);
        }
        let _ = write!(header, " {:^15}", "Overall");
        sub.push_str("     MAP     MRR");
        let _ = write!(row, " {:>7.4} {:>7.4}", self.overall_map, self.overall_mrr);
        format!("{header}\n{sub}\n{row}\n")
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
