use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{query_key, LlmClient, LlmRequest};
use super::parse::parse_answer;
use super::prompt::{build_prompt, EmbeddingSlot};
use super::GlpError;
use crate::eval::{candidate_recall, MetricsReport};
use crate::kg::{FilterIndex, Vocab};
use crate::query::Query;
use crate::retrieve::{candidates_from, rerank_with_answer, CandidateList, Retriever};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlpSettings {
    pub k: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub slot: EmbeddingSlot,
    /// Concurrent requests; 0 lets rayon decide.
    pub workers: usize,
}

impl Default for GlpSettings {
    fn default() -> Self {
        Self {
            k: 20,
            max_tokens: 32,
            temperature: 0.0,
            slot: EmbeddingSlot::Placeholder,
            workers: 0,
        }
    }
}

/// What happened to one query.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub key: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    pub candidates: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Label the response was parsed to.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choice: Option<String>,
    /// The retriever ranking was kept because the LLM could not be reached.
    pub fallback: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retriever_rank: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_rank: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GlpRun {
    pub outcomes: Vec<QueryOutcome>,
    pub candidates: Vec<CandidateList>,
    pub retriever_ranks: Vec<(Query, f64)>,
    pub final_ranks: Vec<(Query, f64)>,
}

impl GlpRun {
    pub fn retriever_report(&self) -> Result<MetricsReport, GlpError> {
        Ok(MetricsReport::from_query_ranks(&self.retriever_ranks)?)
    }

    pub fn final_report(&self) -> Result<MetricsReport, GlpError> {
        Ok(MetricsReport::from_query_ranks(&self.final_ranks)?)
    }

    pub fn candidate_recall(&self) -> f64 {
        candidate_recall(&self.candidates)
    }

    pub fn fallbacks(&self) -> usize {
        self.outcomes.iter().filter(|o| o.fallback).count()
    }

    pub fn parse_failures(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.fallback && o.choice.is_none()).count()
    }
}

/// Retrieves top-k candidates, asks the LLM to pick one and promotes the
/// pick to rank 1. Unreachable LLMs leave the retriever ranking in place.
pub fn run_glp(
    retriever: &Retriever,
    vocab: &Vocab,
    queries: &[Query],
    rank_filter: &FilterIndex,
    candidate_filter: &FilterIndex,
    client: &LlmClient,
    settings: &GlpSettings,
) -> Result<GlpRun, GlpError> {
    if settings.k == 0 {
        return Err(GlpError::Config("k must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| GlpError::Config(format!("could not build worker pool: {e}")))?;
    let one = |q: &Query| -> Result<(QueryOutcome, CandidateList, Option<f64>, Option<f64>), GlpError> {
        let ranking = retriever.rank(q, rank_filter, candidate_filter)?;
        let list = candidates_from(&ranking, settings.k);
        let prompt = build_prompt(&list, retriever, vocab, settings.slot)?;
        let key = query_key(q, vocab);
        let req = LlmRequest {
            prompt: prompt.text,
            embeddings: prompt.embeddings,
            max_tokens: settings.max_tokens,
            temperature: settings.temperature,
        };
        let (response, error) = match client.query(&key, &req) {
            Ok(r) => (Some(r.text), None),
            Err(e) => {
                log::warn!("{key}: {e}; keeping the retriever ranking");
                (None, Some(e.to_string()))
            }
        };
        let choice = response.as_deref().and_then(|t| parse_answer(t, &prompt.candidates));
        let answer = choice.map(|i| list.candidates[i].entity);
        let reranked = rerank_with_answer(&ranking, answer, rank_filter);
        let outcome = QueryOutcome {
            key,
            gold: q.gold.map(|g| vocab.entity_label(g).to_string()),
            candidates: prompt.candidates.clone(),
            fallback: error.is_some(),
            response,
            choice: choice.map(|i| prompt.candidates[i].clone()),
            error,
            retriever_rank: ranking.rank,
            final_rank: reranked.rank,
        };
        Ok((outcome, list, ranking.rank, reranked.rank))
    };

    let mut run = GlpRun {
        outcomes: Vec::with_capacity(queries.len()),
        candidates: Vec::with_capacity(queries.len()),
        retriever_ranks: Vec::new(),
        final_ranks: Vec::new(),
    };
    // bounded chunks keep at most a few hundred full score vectors alive
    for chunk in queries.chunks(256) {
        let results: Vec<_> = pool.install(|| chunk.par_iter().map(one).collect::<Result<_, _>>())?;
        for (q, (outcome, list, before, after)) in chunk.iter().zip(results) {
            if let (Some(b), Some(a)) = (before, after) {
                run.retriever_ranks.push((*q, b));
                run.final_ranks.push((*q, a));
            }
            run.outcomes.push(outcome);
            run.candidates.push(list);
        }
    }
    Ok(run)
}
