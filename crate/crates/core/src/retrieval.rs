//! Recall@K evaluation in both retrieval directions.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::{Corpus, Split};
use crate::encoder::RetrievalModel;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::objective::similarity_matrix;
use crate::rng;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Unit-norm vectors keyed by unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Tensor,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(Error::shape("index", format!("{} ids for {:?}", ids.len(), vectors.shape())));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Config(format!("duplicate index id {dup}")));
        }
        for r in 0..vectors.rows() {
            let n = vectors.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("index row {} has norm {n}", ids[r])));
            }
        }
        Ok(Self { ids, vectors })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Tensor]) -> Result<Self> {
        let e = rows.first().map_or(0, Tensor::numel);
        let data: Vec<f64> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
        Self::new(ids, Tensor::new(vec![rows.len(), e], data)?)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SpeechToImage,
    ImageToSpeech,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::SpeechToImage => "speech_to_image",
            Direction::ImageToSpeech => "image_to_speech",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Unconditioned encoding of each mixture (the clean utterance when K=1).
    Single,
    /// Each mixture conditioned on its target speaker's enrollment.
    Target,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Single => "single",
            Protocol::Target => "target",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::Single),
            "target" | "target-speaker" => Ok(Protocol::Target),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

/// Recall values for one query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub n_queries: usize,
    pub n_candidates: usize,
    pub values: Vec<RecallAt>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Recall {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.values.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub protocol: Protocol,
    pub direction: Direction,
    pub config_digest: String,
    #[serde(flatten)]
    pub recall: Recall,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.at(k)
    }
}

/// Zero-based rank of the best gold candidate in each row. Ties go to the
/// smaller candidate index.
pub fn gold_ranks(sims: &Tensor, gold: &[Vec<usize>]) -> Result<Vec<usize>> {
    let s = sims.shape();
    if s.len() != 2 || s[0] != gold.len() {
        return Err(Error::shape("recall_at_k", format!("{} gold entries for sims {s:?}", gold.len())));
    }
    let c = s[1];
    let mut ranks = Vec::with_capacity(gold.len());
    for (q, golds) in gold.iter().enumerate() {
        if golds.is_empty() || golds.iter().any(|&g| g >= c) {
            return Err(Error::Config(format!("query {q}: gold {golds:?} outside {c} candidates")));
        }
        let row = sims.row(q);
        let rank_of = |g: usize| {
            row.iter()
                .enumerate()
                .filter(|&(j, &v)| v > row[g] || (v == row[g] && j < g))
                .count()
        };
        ranks.push(golds.iter().map(|&g| rank_of(g)).min().expect("non-empty"));
    }
    Ok(ranks)
}

fn recall_from_ranks(ranks: &[usize], n_candidates: usize, ks: &[usize]) -> Recall {
    let mut warnings = Vec::new();
    let values = ks
        .iter()
        .map(|&k| {
            let eff = if k > n_candidates {
                warnings.push(format!("k={k} exceeds {n_candidates} candidates; clamped"));
                n_candidates
            } else {
                k
            };
            let hits = ranks.iter().filter(|&&r| r < eff).count();
            RecallAt {
                k,
                recall: hits as f64 / ranks.len().max(1) as f64,
            }
        })
        .collect();
    Recall {
        n_queries: ranks.len(),
        n_candidates,
        values,
        warnings,
    }
}

/// Fraction of queries whose gold column ranks within the top `k`.
pub fn recall_at_k(sims: &Tensor, gold: &[usize], ks: &[usize]) -> Result<Recall> {
    let sets: Vec<Vec<usize>> = gold.iter().map(|&g| vec![g]).collect();
    recall_at_k_multi(sims, &sets, ks)
}

/// As [`recall_at_k`] with several relevant candidates per query.
pub fn recall_at_k_multi(sims: &Tensor, gold: &[Vec<usize>], ks: &[usize]) -> Result<Recall> {
    if ks.contains(&0) {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let ranks = gold_ranks(sims, gold)?;
    Ok(recall_from_ranks(&ranks, sims.shape()[1], ks))
}

/// Speech and image indexes for one split under a protocol.
pub fn embed_split(model: &RetrievalModel, corpus: &Corpus, split: Split, protocol: Protocol) -> Result<(EmbeddingIndex, EmbeddingIndex, Vec<String>)> {
    match (protocol, model.tsre().is_some()) {
        (Protocol::Single, true) => {
            return Err(Error::Config(
                "single protocol needs an unconditioned encoder; detach the adapters".into(),
            ))
        }
        (Protocol::Target, false) => {
            return Err(Error::Config("target protocol needs a model with adapters attached".into()))
        }
        _ => {}
    }
    if model.config.input_dim != corpus.config.input_dim || model.config.latent_dim != corpus.config.latent_dim {
        return Err(Error::Config("model and corpus dimensions disagree".into()));
    }
    let samples = corpus.split(split);
    if samples.is_empty() {
        return Err(Error::Config(format!("{} split is empty", split.name())));
    }
    let mut speech = Vec::with_capacity(samples.len());
    let mut speech_ids = Vec::with_capacity(samples.len());
    let mut gold_images = Vec::with_capacity(samples.len());
    for s in &samples {
        let u = match protocol {
            Protocol::Single => None,
            Protocol::Target => Some(s.target_enrollment()),
        };
        speech.push(model.encode_speech(&s.mixture, u)?);
        speech_ids.push(s.sample_id.clone());
        gold_images.push(s.image_id.clone());
    }
    let image_ids: Vec<String> =
        corpus.image_split.iter().filter(|(_, &sp)| sp == split).map(|(id, _)| id.clone()).collect();
    let images = image_ids
        .iter()
        .map(|id| model.encode_image(corpus.image_latent(id)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        EmbeddingIndex::from_rows(speech_ids, &speech)?,
        EmbeddingIndex::from_rows(image_ids, &images)?,
        gold_images,
    ))
}

pub fn config_digest(model: &RetrievalModel, corpus: &Corpus, split: Split, protocol: Protocol) -> String {
    let doc = json!({
        "encoder": model.config,
        "tsre": model.tsre().map(|t| t.config.clone()),
        "data": corpus.config,
        "split": split,
        "protocol": protocol,
    });
    rng::digest_hex(doc.to_string().as_bytes())[..16].to_string()
}

/// Speech→image and image→speech reports for one split.
pub fn evaluate(
    model: &RetrievalModel,
    corpus: &Corpus,
    split: Split,
    protocol: Protocol,
    ks: &[usize],
) -> Result<(RecallReport, RecallReport)> {
    let (speech, images, gold_images) = embed_split(model, corpus, split, protocol)?;
    let s2i_gold = gold_images
        .iter()
        .map(|g| images.position(g).map(|p| vec![p]).ok_or_else(|| Error::Config(format!("image {g} not in split"))))
        .collect::<Result<Vec<_>>>()?;
    let s2i = recall_at_k_multi(&similarity_matrix(speech.vectors(), images.vectors())?, &s2i_gold, ks)?;

    let i2s_gold: Vec<Vec<usize>> = images
        .ids()
        .iter()
        .map(|img| gold_images.iter().enumerate().filter(|(_, g)| *g == img).map(|(i, _)| i).collect())
        .collect();
    let keep: Vec<usize> = (0..images.len()).filter(|&i| !i2s_gold[i].is_empty()).collect();
    let sims = similarity_matrix(images.vectors(), speech.vectors())?;
    let c = speech.len();
    let rows: Vec<f64> = keep.iter().flat_map(|&i| sims.row(i).to_vec()).collect();
    let sims = Tensor::new(vec![keep.len(), c], rows)?;
    let gold: Vec<Vec<usize>> = keep.iter().map(|&i| i2s_gold[i].clone()).collect();
    let i2s = recall_at_k_multi(&sims, &gold, ks)?;

    let digest = config_digest(model, corpus, split, protocol);
    Ok((
        RecallReport {
            protocol,
            direction: Direction::SpeechToImage,
            config_digest: digest.clone(),
            recall: s2i,
        },
        RecallReport {
            protocol,
            direction: Direction::ImageToSpeech,
            config_digest: digest,
            recall: i2s,
        },
    ))
}

/// One row per (protocol, direction, k).
pub fn reports_csv(reports: &[RecallReport]) -> String {
    let mut out = String::from("protocol,direction,k,recall,n_queries,n_candidates,config_digest\n");
    for r in reports {
        for v in &r.recall.values {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.protocol.name(),
                r.direction.name(),
                v.k,
                v.recall,
                r.recall.n_queries,
                r.recall.n_candidates,
                r.config_digest
            ));
        }
    }
    out
}

/// Writes `<stem>.json` and `<stem>.csv`.
pub fn write_reports(reports: &[RecallReport], stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    fs::write(stem.with_extension("csv"), reports_csv(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests;
