use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GlpError;
use crate::kg::Vocab;
use crate::query::Direction;
use crate::retrieve::{CandidateList, Retriever};

pub const INSTRUCTION: &str = "You are an excellent linguist. The task is to predict the head or tail based on the given incomplete triple, and you only need to answer one entity.";
pub const PLACEHOLDER: &str = "[Placeholder]";
/// Embedding key of the query entity, independent of its label.
pub const QUERY_KEY: &str = "query entity";

/// How embedding slots appear in the rendered text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EmbeddingSlot {
    /// Literal `[Placeholder]`; vectors travel beside the prompt.
    #[default]
    Placeholder,
    /// Leading components written inline, for text-only endpoints.
    Textualize { components: usize, decimals: usize },
}

impl EmbeddingSlot {
    pub fn textualize() -> Self {
        Self::Textualize {
            components: 16,
            decimals: 3,
        }
    }

    fn render(&self, v: &[f32]) -> String {
        match *self {
            Self::Placeholder => PLACEHOLDER.to_string(),
            Self::Textualize { components, decimals } => {
                let parts: Vec<String> = v.iter().take(components).map(|x| format!("{x:.decimals$}")).collect();
                format!("[{}]", parts.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptInstance {
    pub instruction: String,
    pub question: String,
    /// Candidate labels in retriever order.
    pub candidates: Vec<String>,
    /// `QUERY_KEY` plus one entry per candidate label.
    pub embeddings: BTreeMap<String, Vec<f32>>,
    pub text: String,
}

/// Wraps a label in single quotes, escaping `\` and `'`.
pub fn quote(label: &str) -> String {
    let mut s = String::with_capacity(label.len() + 2);
    s.push('\'');
    for c in label.chars() {
        if c == '\\' || c == '\'' {
            s.push('\\');
        }
        s.push(c);
    }
    s.push('\'');
    s
}

pub fn question(direction: Direction, entity: &str, relation: &str) -> String {
    match direction {
        Direction::Tail => format!("Question: What is the tail in ({}, {}, tail)?", quote(entity), quote(relation)),
        Direction::Head => format!("Question: What is the head in (head, {}, {})?", quote(relation), quote(entity)),
    }
}

/// Renders the four template lines. `vectors[0]` belongs to the query
/// entity, the rest follow `candidates`.
pub fn render_prompt(
    direction: Direction,
    entity: &str,
    relation: &str,
    candidates: &[String],
    vectors: &[Vec<f32>],
    slot: EmbeddingSlot,
) -> Result<PromptInstance, GlpError> {
    if candidates.is_empty() {
        return Err(GlpError::NoCandidates);
    }
    if vectors.len() != candidates.len() + 1 {
        return Err(GlpError::MissingEmbedding(format!(
            "{} vectors for {} candidates plus the query entity",
            vectors.len(),
            candidates.len()
        )));
    }
    if let Some((name, _)) = std::iter::once(&QUERY_KEY.to_string())
        .chain(candidates)
        .zip(vectors)
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
    {
        return Err(GlpError::MissingEmbedding(format!("embedding of `{name}` is not finite")));
    }

    let quoted: Vec<String> = candidates.iter().map(|c| quote(c)).collect();
    let constraint = format!("{INSTRUCTION} The answer must be in ({}).", quoted.join(", "));
    let refs: Vec<String> = std::iter::once(quote(QUERY_KEY))
        .chain(quoted)
        .zip(vectors)
        .map(|(k, v)| format!("{k}: {}", slot.render(v)))
        .collect();
    let reference = format!("You can refer to the entity embeddings: {}.", refs.join(", "));
    let q = question(direction, entity, relation);
    let text = [constraint.as_str(), &reference, &q, "Answer:"].join("\n");

    let mut embeddings = BTreeMap::new();
    for (name, v) in std::iter::once(QUERY_KEY.to_string()).chain(candidates.iter().cloned()).zip(vectors) {
        if embeddings.insert(name.clone(), v.clone()).is_some() {
            return Err(GlpError::DuplicateLabel(name));
        }
    }
    Ok(PromptInstance {
        instruction: INSTRUCTION.to_string(),
        question: q,
        candidates: candidates.to_vec(),
        embeddings,
        text,
    })
}

/// Prompt for a retrieved candidate list, carrying fused embeddings under
/// the query relation.
pub fn build_prompt(
    list: &CandidateList,
    retriever: &Retriever,
    vocab: &Vocab,
    slot: EmbeddingSlot,
) -> Result<PromptInstance, GlpError> {
    let q = &list.query;
    let fused = retriever.fused(q.relation)?;
    let row = |e: crate::kg::EntityId| -> Result<Vec<f32>, GlpError> {
        if e.index() >= fused.rows() {
            return Err(GlpError::MissingEmbedding(format!("no fused row for entity {}", e.index())));
        }
        Ok(fused.row(e.index()).to_vec())
    };
    let mut vectors = vec![row(q.entity)?];
    let mut labels = Vec::with_capacity(list.candidates.len());
    for c in &list.candidates {
        vectors.push(row(c.entity)?);
        labels.push(vocab.entity_label(c.entity).to_string());
    }
    render_prompt(
        q.direction,
        vocab.entity_label(q.entity),
        vocab.relation_label(q.relation),
        &labels,
        &vectors,
        slot,
    )
}
