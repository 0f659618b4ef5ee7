//! Filtered MRR and Hits@k.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::query::{Direction, Query};
use crate::retrieve::RankingResult;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no ranks to average")]
    Empty,
    #[error("rank {0} is below 1")]
    BadRank(f64),
    #[error("ranking for {0:?} carries no gold rank")]
    Unranked(crate::query::Query),
}

pub fn mrr(ranks: &[f64]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&r) = ranks.iter().find(|&&r| !(r >= 1.0)) {
        return Err(EvalError::BadRank(r));
    }
    Ok(ranks.iter().map(|r| 1.0 / r).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks `≤ k`; tied ranks such as 1.5 are compared as is.
pub fn hits_at_k(ranks: &[f64], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / ranks.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[f64]) -> Result<Self, EvalError> {
        Ok(Self {
            queries: ranks.len(),
            mrr: mrr(ranks)?,
            hits1: hits_at_k(ranks, 1),
            hits3: hits_at_k(ranks, 3),
            hits10: hits_at_k(ranks, 10),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Metrics,
    pub head: Option<Metrics>,
    pub tail: Option<Metrics>,
    /// Free-form echo of the settings that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
    /// Seconds; left out of the JSON so reports stay byte-stable.
    #[serde(skip)]
    pub wall_time: Option<f64>,
}

impl MetricsReport {
    pub fn from_rankings(rankings: &[RankingResult]) -> Result<Self, EvalError> {
        let ranked = rankings
            .iter()
            .map(|r| r.rank.map(|k| (r.query, k)).ok_or(EvalError::Unranked(r.query)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_query_ranks(&ranked)
    }

    pub fn from_query_ranks(ranked: &[(Query, f64)]) -> Result<Self, EvalError> {
        let mut all = Vec::with_capacity(ranked.len());
        let (mut head, mut tail) = (Vec::new(), Vec::new());
        for &(query, rank) in ranked {
            all.push(rank);
            match query.direction {
                Direction::Head => head.push(rank),
                Direction::Tail => tail.push(rank),
            }
        }
        let part = |v: &[f64]| if v.is_empty() { Ok(None) } else { Metrics::from_ranks(v).map(Some) };
        Ok(Self {
            overall: Metrics::from_ranks(&all)?,
            head: part(&head)?,
            tail: part(&tail)?,
            config: serde_json::Value::Null,
            wall_time: None,
        })
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned table with values ×100.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<8} {:>7} {:>8} {:>8} {:>8} {:>8}", "split", "N", "MRR", "Hits@1", "Hits@3", "Hits@10").unwrap();
        let mut row = |name: &str, m: &Metrics| {
            writeln!(
                out,
                "{:<8} {:>7} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                name,
                m.queries,
                m.mrr * 100.0,
                m.hits1 * 100.0,
                m.hits3 * 100.0,
                m.hits10 * 100.0
            )
            .unwrap();
        };
        row("all", &self.overall);
        if let Some(m) = &self.head {
            row("head", m);
        }
        if let Some(m) = &self.tail {
            row("tail", m);
        }
        if let Some(t) = self.wall_time {
            writeln!(out, "wall time {t:.2}s").unwrap();
        }
        out
    }
}

/// Fraction of queries whose gold appears among their candidates.
pub fn candidate_recall(lists: &[crate::retrieve::CandidateList]) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let hit = lists
        .iter()
        .filter(|l| l.query.gold.is_some_and(|g| l.position(g).is_some()))
        .count();
    hit as f64 / lists.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub metrics: Metrics,
    pub recall: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,queries,mrr,hits1,hits3,hits10,candidate_recall\n");
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k, m.queries, m.mrr, m.hits1, m.hits3, m.hits10, r.recall
        )
        .unwrap();
    }
    out
}
