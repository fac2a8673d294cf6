//! Glue between modules: embedding, index construction, prompt preparation,
//! and JSON file helpers shared by the CLI and library callers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::claims::format_claim;
use crate::cohort::{Corpus, Split};
use crate::error::{Error, Result};
use crate::gateway::{EmbeddingEndpoint, GatewayError, PreparedCase};
use crate::prompt::{PromptTemplateSet, PromptVariant, RagContext};
use crate::retrieval::{EmbeddingRecord, HashingEmbedder, IndexMetadata, VectorIndex};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

impl EmbeddingEndpoint for HashingEmbedder {
    fn embed(&self, texts: &[String], dim: usize) -> std::result::Result<Vec<Vec<f32>>, GatewayError> {
        if dim != self.dim {
            return Err(GatewayError::DimensionMismatch { index: 0, expected: dim, got: self.dim });
        }
        Ok(texts.iter().map(|t| HashingEmbedder::embed(self, t)).collect())
    }
}

fn lookup<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a crate::claims::EncounterRecord> {
    corpus
        .get(id)
        .ok_or_else(|| Error::Data(format!("encounter `{id}` is not in the corpus")))
}

/// Embeds the notes of `ids` in batches of `batch`.
pub fn embed_notes(
    corpus: &Corpus,
    ids: &[String],
    embedder: &dyn EmbeddingEndpoint,
    dim: usize,
    batch: usize,
) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch.max(1)) {
        let notes = chunk
            .iter()
            .map(|id| lookup(corpus, id).map(|r| r.note.clone()))
            .collect::<Result<Vec<_>>>()?;
        let vectors = embedder.embed(&notes, dim)?;
        out.extend(chunk.iter().zip(vectors).map(|(id, vector)| EmbeddingRecord { id: id.clone(), vector }));
    }
    Ok(out)
}

/// Index over the training encounters, each row carrying its formatted claim.
pub fn build_train_index(
    corpus: &Corpus,
    split: &Split,
    embeddings: &[EmbeddingRecord],
    dim: usize,
) -> Result<VectorIndex> {
    let by_id: HashMap<&str, &[f32]> = embeddings.iter().map(|e| (e.id.as_str(), e.vector.as_slice())).collect();
    let rows = split
        .train
        .iter()
        .map(|id| {
            let record = lookup(corpus, id)?;
            let vector = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("no embedding for training encounter `{id}`")))?;
            Ok((
                vector.to_vec(),
                IndexMetadata {
                    encounter_id: id.clone(),
                    claim_text: format_claim(&record.claim),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VectorIndex::build(rows, dim)?)
}

/// Index and query vectors for retrieval-augmented prompts.
pub struct RagInputs<'a> {
    pub index: &'a VectorIndex,
    pub queries: HashMap<String, Vec<f32>>,
}

impl<'a> RagInputs<'a> {
    pub fn new(index: &'a VectorIndex, queries: Vec<EmbeddingRecord>) -> Self {
        RagInputs {
            index,
            queries: queries.into_iter().map(|q| (q.id, q.vector)).collect(),
        }
    }
}

/// Renders one inference prompt per id, in id order.
pub fn prepare_cases(
    corpus: &Corpus,
    ids: &[String],
    templates: &PromptTemplateSet,
    variant: PromptVariant,
    rag: Option<&RagInputs<'_>>,
) -> Result<Vec<PreparedCase>> {
    if variant == PromptVariant::Rag && rag.is_none() {
        return Err(Error::Config("the rag variant needs an index and query embeddings".into()));
    }
    let mut ids: Vec<&String> = ids.iter().collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let record = lookup(corpus, id)?;
            let context = match (variant, rag) {
                (PromptVariant::Rag, Some(rag)) => {
                    let query = rag
                        .queries
                        .get(id)
                        .ok_or_else(|| Error::Data(format!("no query embedding for `{id}`")))?;
                    let hits = rag.index.search(query, templates.rag_k)?;
                    Some(RagContext {
                        examples: hits.into_iter().map(|h| h.metadata.claim_text.clone()).collect(),
                    })
                }
                _ => None,
            };
            let prompt = templates.build_inference_prompt(&record.note, variant, context.as_ref())?;
            Ok(PreparedCase { encounter_id: id.clone(), prompt })
        })
        .collect()
}
