//! Prompt encoders.
//!
//! Visual prompts are produced by refining a query through one simplified
//! single-head deformable attention layer per feature level. Text prompts come
//! from a pluggable [`EmbeddingSource`]: a JSON table of vectors, a
//! deterministic hash fallback, or both.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::losses::BoxXYXY;
use crate::numeric::{self, l2_norm, softmax, FeatureLevel, Matrix};

/// Hidden width used throughout the model.
pub const DEFAULT_DIM: usize = 256;
/// Sampling points per level for each deformable attention layer.
pub const DEFAULT_POINTS: usize = 4;
pub const MAX_LEVELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vec: Vec<f64>,
    pub kind: PromptKind,
    pub category: Option<String>,
    /// Set once the vector has been scaled to unit L2 norm.
    pub normalized: bool,
}

impl PromptEmbedding {
    pub fn new(vec: Vec<f64>, kind: PromptKind) -> Result<Self> {
        if vec.is_empty() {
            return Err(Error::Empty("prompt embedding"));
        }
        check_finite("prompt embedding", &vec)?;
        Ok(Self {
            vec,
            kind,
            category: None,
            normalized: false,
        })
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn normalize(&self) -> Result<PromptEmbedding> {
        normalize(self)
    }
}

pub fn normalize(p: &PromptEmbedding) -> Result<PromptEmbedding> {
    let norm = l2_norm(&p.vec);
    if norm == 0.0 {
        return Err(Error::invalid("cannot normalize a zero vector"));
    }
    Ok(PromptEmbedding {
        vec: p.vec.iter().map(|v| v / norm).collect(),
        kind: p.kind,
        category: p.category.clone(),
        normalized: true,
    })
}

/// Feature pyramid `{f_1, …, f_L}`; every level shares one vector width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    levels: Vec<FeatureLevel>,
    dim: usize,
}

impl FeatureMap {
    pub fn new(levels: Vec<FeatureLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Empty("feature map levels"));
        }
        if levels.len() > MAX_LEVELS {
            return Err(Error::invalid(format!(
                "at most {MAX_LEVELS} feature levels supported, got {}",
                levels.len()
            )));
        }
        let dim = levels[0].dim();
        for level in &levels {
            check_len("feature level width", dim, level.dim())?;
        }
        Ok(Self { levels, dim })
    }

    /// Random pyramid with level `l` of size `base >> l` (at least 1).
    pub fn random(n_levels: usize, base: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = numeric::seeded_rng(seed);
        let levels = (0..n_levels)
            .map(|l| {
                let side = (base >> l).max(1);
                FeatureLevel::random(side, side, dim, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All grid vectors, level by level in row-major order.
    pub fn flatten(&self) -> Vec<Vec<f64>> {
        self.levels.iter().flat_map(FeatureLevel::tokens).collect()
    }
}

/// Weights of one deformable attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformLayer {
    /// `2·n_points × dim`: (dx, dy) per point, in cells of the sampled level.
    pub offset_weights: Matrix,
    /// `n_points × dim`: attention logits per point.
    pub attn_weights: Matrix,
    pub value_proj: Matrix,
    pub output_proj: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformAttnParams {
    pub dim: usize,
    pub n_points: usize,
    /// Coefficient on the incoming query in `v_l = gate·v_{l−1} + update`.
    pub residual_gate: f64,
    pub layers: Vec<DeformLayer>,
}

impl DeformAttnParams {
    pub fn new(dim: usize, n_points: usize, residual_gate: f64, layers: Vec<DeformLayer>) -> Result<Self> {
        if dim == 0 || n_points == 0 {
            return Err(Error::invalid("dim and n_points must be positive"));
        }
        if layers.is_empty() {
            return Err(Error::Empty("deformable attention layers"));
        }
        if !residual_gate.is_finite() {
            return Err(Error::invalid("residual gate must be finite"));
        }
        for layer in &layers {
            check_len("offset weight rows", 2 * n_points, layer.offset_weights.rows())?;
            check_len("attention weight rows", n_points, layer.attn_weights.rows())?;
            for m in [&layer.offset_weights, &layer.attn_weights, &layer.value_proj] {
                check_len("layer input width", dim, m.cols())?;
            }
            check_len("value projection rows", dim, layer.value_proj.rows())?;
            check_len("output projection rows", dim, layer.output_proj.rows())?;
            check_len("output projection cols", dim, layer.output_proj.cols())?;
        }
        Ok(Self {
            dim,
            n_points,
            residual_gate,
            layers,
        })
    }

    /// Zero offsets, uniform attention, identity projections, unit residual.
    pub fn identity(dim: usize, n_points: usize, layer_count: usize) -> Self {
        let layer = DeformLayer {
            offset_weights: Matrix::zeros(2 * n_points, dim),
            attn_weights: Matrix::zeros(n_points, dim),
            value_proj: Matrix::identity(dim),
            output_proj: Matrix::identity(dim),
        };
        Self {
            dim,
            n_points,
            residual_gate: 1.0,
            layers: vec![layer; layer_count],
        }
    }

    /// Gaussian weights scaled by `1/√dim`.
    pub fn random(dim: usize, n_points: usize, layer_count: usize, seed: u64) -> Self {
        let mut rng = numeric::seeded_rng(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let layers = (0..layer_count)
            .map(|_| DeformLayer {
                offset_weights: Matrix::random(2 * n_points, dim, s, &mut rng),
                attn_weights: Matrix::random(n_points, dim, s, &mut rng),
                value_proj: Matrix::random(dim, dim, s, &mut rng),
                output_proj: Matrix::random(dim, dim, s, &mut rng),
            })
            .collect();
        Self {
            dim,
            n_points,
            residual_gate: 1.0,
            layers,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// What one layer read and how it combined it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub level: usize,
    pub locations: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub combined: Vec<f64>,
}

/// Reference point of a box prompt: its center.
pub fn box_reference_point(b: &BoxXYXY) -> (f64, f64) {
    b.center()
}

pub fn encode_visual_prompt(
    fm: &FeatureMap,
    params: &DeformAttnParams,
    init_query: &PromptEmbedding,
    ref_point: (f64, f64),
) -> Result<PromptEmbedding> {
    encode_visual_prompt_traced(fm, params, init_query, ref_point).map(|(p, _)| p)
}

/// Layer `l` reads level `l mod L`. With as many layers as levels each level
/// is read exactly once, in order.
pub fn encode_visual_prompt_traced(
    fm: &FeatureMap,
    params: &DeformAttnParams,
    init_query: &PromptEmbedding,
    ref_point: (f64, f64),
) -> Result<(PromptEmbedding, Vec<LayerTrace>)> {
    check_len("feature map width", params.dim, fm.dim())?;
    check_len("initial query width", params.dim, init_query.dim())?;
    let (rx, ry) = ref_point;
    if !(0.0..=1.0).contains(&rx) || !(0.0..=1.0).contains(&ry) {
        return Err(Error::invalid(format!(
            "reference point ({rx}, {ry}) outside [0, 1]²"
        )));
    }

    let mut query = init_query.vec.clone();
    let mut traces = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let level_idx = l % fm.levels.len();
        let level = &fm.levels[level_idx];
        let offsets = layer.offset_weights.mul_vec(&query)?;
        let weights = softmax(&layer.attn_weights.mul_vec(&query)?);

        let mut locations = Vec::with_capacity(params.n_points);
        let mut samples = Vec::with_capacity(params.n_points);
        let mut combined = vec![0.0; params.dim];
        for (p, &w) in weights.iter().enumerate() {
            let x = rx + offsets[2 * p] / level.width() as f64;
            let y = ry + offsets[2 * p + 1] / level.height() as f64;
            let sample = level.bilinear_sample(x, y);
            for (c, s) in combined.iter_mut().zip(&sample) {
                *c += w * s;
            }
            locations.push((x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)));
            samples.push(sample);
        }

        let update = layer
            .output_proj
            .mul_vec(&layer.value_proj.mul_vec(&combined)?)?;
        query = query
            .iter()
            .zip(&update)
            .map(|(q, u)| params.residual_gate * q + u)
            .collect();
        traces.push(LayerTrace {
            level: level_idx,
            locations,
            weights,
            samples,
            combined,
        });
    }

    let out = PromptEmbedding {
        vec: query,
        kind: PromptKind::Visual,
        category: init_query.category.clone(),
        normalized: false,
    };
    Ok((out, traces))
}

/// Source of raw text-prompt vectors.
pub trait EmbeddingSource: Send + Sync {
    fn dim(&self) -> usize;

    /// Raw (not yet normalized) vector for `tag`.
    fn lookup(&self, tag: &str) -> Result<Vec<f64>>;
}

/// Normalized text embedding for `tag`.
pub fn provide_text_embedding(tag: &str, provider: &dyn EmbeddingSource) -> Result<PromptEmbedding> {
    let raw = PromptEmbedding::new(provider.lookup(tag)?, PromptKind::Text)?.with_category(tag);
    normalize(&raw)
}

/// Table of tag vectors, optionally backed by a hash fallback for unknown tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
    hash_fallback: bool,
}

impl TextEmbeddings {
    /// Parses a JSON object mapping tag → array of `d` floats.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let table: BTreeMap<String, Vec<f64>> =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("embedding file: {e}")))?;
        let dim = match table.values().next() {
            Some(v) => v.len(),
            None => return Err(Error::Parse("embedding file has no entries".into())),
        };
        if dim == 0 {
            return Err(Error::Parse("embedding vectors are empty".into()));
        }
        for (tag, v) in &table {
            if v.len() != dim {
                return Err(Error::Parse(format!(
                    "ragged embedding for `{tag}`: expected {dim} values, got {}",
                    v.len()
                )));
            }
        }
        Ok(Self {
            dim,
            table,
            hash_fallback: false,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Empty table answering every tag from the hash fallback.
    pub fn hash_only(dim: usize) -> Self {
        Self {
            dim,
            table: BTreeMap::new(),
            hash_fallback: true,
        }
    }

    pub fn with_hash_fallback(mut self, enabled: bool) -> Self {
        self.hash_fallback = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingSource for TextEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, tag: &str) -> Result<Vec<f64>> {
        match self.table.get(tag) {
            Some(v) => Ok(v.clone()),
            None if self.hash_fallback => Ok(hash_vector(tag, self.dim)),
            None => Err(Error::UnknownTag(tag.to_string())),
        }
    }
}

/// Gaussian vector seeded by the FNV-1a hash of the tag bytes.
pub fn hash_vector(tag: &str, dim: usize) -> Vec<f64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    numeric::normal_vec(&mut numeric::seeded_rng(h), dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{cosine, dot};

    fn query(v: Vec<f64>) -> PromptEmbedding {
        PromptEmbedding::new(v, PromptKind::Visual).unwrap()
    }

    #[test]
    fn identity_layer_reads_reference_point() {
        let fm = FeatureMap::random(1, 5, 3, 11).unwrap();
        let mut params = DeformAttnParams::identity(3, 1, 1);
        params.residual_gate = 0.0;
        let q = query(vec![0.4, -0.2, 1.0]);
        let out = encode_visual_prompt(&fm, &params, &q, (0.3, 0.6)).unwrap();
        assert_eq!(out.vec, fm.levels()[0].bilinear_sample(0.3, 0.6));
    }

    #[test]
    fn constant_grid_returns_constant() {
        let c = [0.5, -1.5, 2.0, 0.25];
        let level = FeatureLevel::constant(4, 6, &c).unwrap();
        let fm = FeatureMap::new(vec![level]).unwrap();
        let mut params = DeformAttnParams::random(4, 4, 1, 3);
        params.layers[0].value_proj = Matrix::identity(4);
        params.layers[0].output_proj = Matrix::identity(4);
        params.residual_gate = 0.0;
        let out = encode_visual_prompt(&fm, &params, &query(vec![1.0, 2.0, -3.0, 0.5]), (0.5, 0.5))
            .unwrap();
        for (o, e) in out.vec.iter().zip(c) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_is_pure_residual() {
        let fm = FeatureMap::random(2, 8, 4, 5).unwrap();
        let mut params = DeformAttnParams::random(4, 4, 2, 6);
        for layer in &mut params.layers {
            layer.value_proj = Matrix::zeros(4, 4);
        }
        let q = query(vec![0.1, 0.2, 0.3, 0.4]);
        let out = encode_visual_prompt(&fm, &params, &q, (0.2, 0.9)).unwrap();
        assert_eq!(out.vec, q.vec);
    }

    #[test]
    fn layers_pair_with_levels_in_order() {
        let fm = FeatureMap::random(3, 16, 4, 1).unwrap();
        let params = DeformAttnParams::random(4, 2, 3, 2);
        let (_, trace) = encode_visual_prompt_traced(&fm, &params, &query(vec![1.0; 4]), (0.5, 0.5)).unwrap();
        assert_eq!(trace.iter().map(|t| t.level).collect::<Vec<_>>(), vec![0, 1, 2]);

        let params = DeformAttnParams::random(4, 2, 6, 2);
        let (_, trace) = encode_visual_prompt_traced(&fm, &params, &query(vec![1.0; 4]), (0.5, 0.5)).unwrap();
        assert_eq!(trace.iter().map(|t| t.level).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let fm = FeatureMap::random(1, 4, 4, 1).unwrap();
        let params = DeformAttnParams::identity(4, 1, 1);
        assert!(encode_visual_prompt(&fm, &params, &query(vec![1.0; 3]), (0.5, 0.5)).is_err());
        assert!(encode_visual_prompt(&fm, &params, &query(vec![1.0; 4]), (1.5, 0.5)).is_err());
        let wrong = DeformAttnParams::identity(3, 1, 1);
        assert!(encode_visual_prompt(&fm, &wrong, &query(vec![1.0; 3]), (0.5, 0.5)).is_err());
    }

    #[test]
    fn feature_map_limits() {
        assert!(FeatureMap::new(vec![]).is_err());
        assert!(FeatureMap::random(9, 4, 2, 0).is_err());
        let a = FeatureLevel::constant(2, 2, &[1.0, 2.0]).unwrap();
        let b = FeatureLevel::constant(2, 2, &[1.0]).unwrap();
        assert!(FeatureMap::new(vec![a, b]).is_err());
    }

    #[test]
    fn normalize_unit_and_zero() {
        let p = normalize(&query(vec![3.0, 4.0])).unwrap();
        assert!((l2_norm(&p.vec) - 1.0).abs() < 1e-12);
        assert!(p.normalized);
        assert!(normalize(&query(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn file_provider_normalizes_stored_vector() {
        let emb = TextEmbeddings::from_json_str(r#"{"cat": [3.0, 0.0, 4.0], "dog": [0, 1, 0]}"#).unwrap();
        let cat = provide_text_embedding("cat", &emb).unwrap();
        assert_eq!(cat.vec, vec![0.6, 0.0, 0.8]);
        assert_eq!(cat.kind, PromptKind::Text);
        assert_eq!(cat.category.as_deref(), Some("cat"));
        assert_eq!(
            provide_text_embedding("bird", &emb).unwrap_err(),
            Error::UnknownTag("bird".into())
        );
        let emb = emb.with_hash_fallback(true);
        assert_eq!(provide_text_embedding("bird", &emb).unwrap().dim(), 3);
    }

    #[test]
    fn file_provider_rejects_bad_files() {
        assert!(TextEmbeddings::from_json_str(r#"{"a": [1, 2], "b": [1]}"#).is_err());
        assert!(TextEmbeddings::from_json_str("{}").is_err());
        assert!(TextEmbeddings::from_json_str("[1, 2]").is_err());
    }

    #[test]
    fn hash_fallback_is_deterministic() {
        let emb = TextEmbeddings::hash_only(DEFAULT_DIM);
        let a = provide_text_embedding("traffic light", &emb).unwrap();
        let b = provide_text_embedding("traffic light", &emb).unwrap();
        assert_eq!(a, b);
        assert!((dot(&a.vec, &a.vec) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_fallback_tags_are_nearly_orthogonal() {
        let emb = TextEmbeddings::hash_only(DEFAULT_DIM);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let a = provide_text_embedding(&format!("tag-{i}"), &emb).unwrap();
            let b = provide_text_embedding(&format!("other-{i}"), &emb).unwrap();
            worst = worst.max(cosine(&a.vec, &b.vec).abs());
        }
        assert!(worst < 0.5, "worst |cos| = {worst}");
    }
}
