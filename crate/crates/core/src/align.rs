//! Region-level contrastive alignment of visual and text prompts, negative
//! visual prompts built from inter-category means, and a sampler that keeps
//! every batch inside one source dataset.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::{self, dot, log_sum_exp, softmax};
use crate::prompt::{normalize, PromptEmbedding, PromptKind};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignPair {
    pub visual: PromptEmbedding,
    pub text: PromptEmbedding,
    pub category: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignBatch {
    pairs: Vec<AlignPair>,
}

impl AlignBatch {
    pub fn new(pairs: Vec<AlignPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("alignment batch"));
        }
        let dim = pairs[0].visual.dim();
        for p in &pairs {
            if p.category.is_empty() {
                return Err(Error::invalid("alignment pair with empty category"));
            }
            check_len("visual embedding width", dim, p.visual.dim())?;
            check_len("text embedding width", dim, p.text.dim())?;
        }
        Ok(Self { pairs })
    }

    /// Builds a batch from raw vectors, normalizing each embedding.
    pub fn from_vectors(
        visual: &[Vec<f64>],
        text: &[Vec<f64>],
        categories: &[&str],
        dataset_id: &str,
    ) -> Result<Self> {
        check_len("text vectors", visual.len(), text.len())?;
        check_len("categories", visual.len(), categories.len())?;
        let pairs = visual
            .iter()
            .zip(text)
            .zip(categories)
            .map(|((v, t), c)| {
                Ok(AlignPair {
                    visual: normalize(&PromptEmbedding::new(v.clone(), PromptKind::Visual)?)?,
                    text: normalize(&PromptEmbedding::new(t.clone(), PromptKind::Text)?)?,
                    category: c.to_string(),
                    dataset_id: dataset_id.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[AlignPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].visual.dim()
    }

    pub fn visual_vectors(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.visual.vec.clone()).collect()
    }

    pub fn text_vectors(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.text.vec.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignLoss {
    /// Mean of the two directions.
    pub loss: f64,
    pub visual_to_text: f64,
    pub text_to_visual: f64,
    pub grad_visual: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
    /// Gradient for each appended negative key; empty without negatives.
    pub grad_negative: Vec<Vec<f64>>,
}

/// Symmetric cross-entropy over `v_i·t_j / temperature`: the mean of the
/// visual→text and text→visual losses `−(1/K) Σ_i log softmax(row i)[i]`.
/// Embeddings are expected to be unit length, making the logits scaled
/// cosine similarities.
pub fn align_loss(batch: &AlignBatch, temperature: f64) -> Result<AlignLoss> {
    align_loss_vectors(&batch.visual_vectors(), &batch.text_vectors(), &[], temperature)
}

/// [`align_loss`] with one extra negative visual key per text query: the
/// inter-category mean for that pair's category (see
/// [`build_negative_prompts`]).
pub fn align_loss_with_negatives(
    batch: &AlignBatch,
    negatives: &BTreeMap<String, PromptEmbedding>,
    temperature: f64,
) -> Result<AlignLoss> {
    let negs = batch
        .pairs
        .iter()
        .map(|p| {
            negatives
                .get(&p.category)
                .map(|n| n.vec.clone())
                .ok_or_else(|| Error::invalid(format!("no negative prompt for `{}`", p.category)))
        })
        .collect::<Result<Vec<_>>>()?;
    align_loss_vectors(&batch.visual_vectors(), &batch.text_vectors(), &negs, temperature)
}

/// Loss and gradients on raw vectors. `negatives` is empty or holds one
/// extra visual key per text query.
pub fn align_loss_vectors(
    visual: &[Vec<f64>],
    text: &[Vec<f64>],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<AlignLoss> {
    let k = visual.len();
    check_len("text embeddings", k, text.len())?;
    if k < 2 {
        return Err(Error::invalid(format!(
            "contrastive alignment needs at least 2 pairs, got {k}"
        )));
    }
    if temperature.is_nan() || temperature <= 0.0 || temperature.is_infinite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if !negatives.is_empty() {
        check_len("negative prompts", k, negatives.len())?;
    }
    let dim = visual[0].len();
    for v in visual.iter().chain(text).chain(negatives) {
        check_len("embedding width", dim, v.len())?;
    }

    let inv_t = 1.0 / temperature;
    let logits: Vec<Vec<f64>> = visual
        .iter()
        .map(|v| text.iter().map(|t| dot(v, t) * inv_t).collect())
        .collect();
    let neg_logits: Vec<f64> = negatives
        .iter()
        .zip(text)
        .map(|(n, t)| dot(n, t) * inv_t)
        .collect();

    // dL/dlogit, before the 1/(2K) factor
    let mut g = vec![vec![0.0; k]; k];
    let mut g_neg = vec![0.0; negatives.len()];

    let mut v2t = 0.0;
    for (i, row) in logits.iter().enumerate() {
        v2t += log_sum_exp(row) - row[i];
        for (j, p) in softmax(row).into_iter().enumerate() {
            g[i][j] += p - f64::from(u8::from(i == j));
        }
    }

    let mut t2v = 0.0;
    for j in 0..k {
        let mut col: Vec<f64> = (0..k).map(|i| logits[i][j]).collect();
        if !negatives.is_empty() {
            col.push(neg_logits[j]);
        }
        t2v += log_sum_exp(&col) - col[j];
        for (i, p) in softmax(&col).into_iter().enumerate() {
            if i < k {
                g[i][j] += p - f64::from(u8::from(i == j));
            } else {
                g_neg[j] += p;
            }
        }
    }
    let kf = k as f64;
    let (v2t, t2v) = (v2t / kf, t2v / kf);

    let coef = 0.5 / kf * inv_t;
    let mut grad_visual = vec![vec![0.0; dim]; k];
    let mut grad_text = vec![vec![0.0; dim]; k];
    for i in 0..k {
        for j in 0..k {
            let w = coef * g[i][j];
            for d in 0..dim {
                grad_visual[i][d] += w * text[j][d];
                grad_text[j][d] += w * visual[i][d];
            }
        }
    }
    let mut grad_negative = vec![vec![0.0; dim]; negatives.len()];
    for j in 0..negatives.len() {
        let w = coef * g_neg[j];
        for d in 0..dim {
            grad_negative[j][d] = w * text[j][d];
            grad_text[j][d] += w * negatives[j][d];
        }
    }

    Ok(AlignLoss {
        loss: 0.5 * (v2t + t2v),
        visual_to_text: v2t,
        text_to_visual: t2v,
        grad_visual,
        grad_text,
        grad_negative,
    })
}

/// For each category `c`, the renormalized mean of every visual embedding
/// whose category differs from `c`. Contributions are summed in a canonical
/// order, so the result does not depend on batch order.
pub fn build_negative_prompts(batch: &AlignBatch) -> Result<BTreeMap<String, PromptEmbedding>> {
    let mut members: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for p in &batch.pairs {
        members.entry(&p.category).or_default().push(&p.visual.vec);
    }
    if members.len() < 2 {
        return Err(Error::invalid(
            "negative prompts need at least 2 distinct categories",
        ));
    }
    for vecs in members.values_mut() {
        vecs.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }

    let dim = batch.dim();
    let mut out = BTreeMap::new();
    for &cat in members.keys() {
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for (_, vecs) in members.iter().filter(|(other, _)| **other != cat) {
            for v in vecs {
                for (s, x) in sum.iter_mut().zip(v.iter()) {
                    *s += x;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let neg = PromptEmbedding::new(mean, PromptKind::Visual)?.with_category(cat);
        out.insert(cat.to_string(), normalize(&neg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerManifest {
    pub batch_size: usize,
    pub seed: u64,
    pub samples: Vec<SampleRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Batch {
    pub dataset: String,
    pub ids: Vec<String>,
}

/// One epoch of single-dataset batches.
///
/// Samples are shuffled within their dataset and cut into batches (the last
/// batch of a dataset may be short). Batches are then drawn dataset by
/// dataset with probability proportional to the number of batches each
/// dataset still has, so datasets interleave in proportion to their size.
pub fn sample_batches(manifest: &SamplerManifest) -> Result<Vec<Batch>> {
    if manifest.samples.is_empty() {
        return Err(Error::Empty("sampler manifest"));
    }
    if manifest.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if manifest.samples.iter().any(|s| s.dataset.is_empty()) {
        return Err(Error::invalid("sample with empty dataset id"));
    }

    let mut rng = numeric::seeded_rng(manifest.seed);
    let mut by_dataset: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in &manifest.samples {
        by_dataset.entry(&s.dataset).or_default().push(&s.id);
    }
    let mut queues: Vec<(&str, std::vec::IntoIter<Vec<String>>)> = by_dataset
        .into_iter()
        .map(|(dataset, mut ids)| {
            ids.shuffle(&mut rng);
            let chunks: Vec<Vec<String>> = ids
                .chunks(manifest.batch_size)
                .map(|c| c.iter().map(|s| s.to_string()).collect())
                .collect();
            (dataset, chunks.into_iter())
        })
        .collect();

    let mut batches = Vec::new();
    loop {
        let remaining: Vec<usize> = queues.iter().map(|(_, q)| q.len()).collect();
        let total: usize = remaining.iter().sum();
        if total == 0 {
            break;
        }
        let mut pick = rng.random_range(0..total);
        let idx = remaining
            .iter()
            .position(|&r| {
                if pick < r {
                    true
                } else {
                    pick -= r;
                    false
                }
            })
            .expect("pick falls inside total");
        let (dataset, queue) = &mut queues[idx];
        let ids = queue.next().expect("selected queue has a batch");
        batches.push(Batch {
            dataset: dataset.to_string(),
            ids,
        });
    }
    Ok(batches)
}
