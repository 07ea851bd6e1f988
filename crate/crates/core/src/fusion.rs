//! Early fusion of image features with text and visual prompts.
//!
//! A fusion layer runs self-attention over each stream, then three gated
//! cross-attention pathways (text ← features, visual ← features,
//! features ← visual), then a residual FFN per stream. Gated attention
//! appends a learnable background token `B` to both keys and values, so a
//! query that matches no key puts its mass on `B` instead of reconstructing
//! an unrelated key.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::{self, softmax_rows, Matrix};
use crate::prompt::PromptEmbedding;

pub const DEFAULT_FUSION_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttnOutput {
    pub output: Matrix,
    /// `queries × (keys + 1)`; the last column is the background token.
    pub weights: Matrix,
    pub background_weight: Vec<f64>,
}

/// `softmax(Q·[K, B]ᵀ / √d_k) · [V, B]`.
pub fn gated_attn(q: &Matrix, k: &Matrix, v: &Matrix, b: &[f64], d_k: usize) -> Result<GatedAttnOutput> {
    check_len("gated attention key/value rows", k.rows(), v.rows())?;
    if k.rows() == 0 {
        return Err(Error::Empty("gated attention keys"));
    }
    if d_k == 0 {
        return Err(Error::invalid("d_k must be positive"));
    }
    check_len("query width", k.cols(), q.cols())?;
    check_len("background token width", k.cols(), b.len())?;
    check_len("value width", b.len(), v.cols())?;

    let mut keys = k.row_vecs();
    keys.push(b.to_vec());
    let keys = Matrix::from_rows(&keys, b.len())?;
    let mut values = v.row_vecs();
    values.push(b.to_vec());
    let values = Matrix::from_rows(&values, b.len())?;

    let logits = q.matmul(&keys.transpose())?.scale(1.0 / (d_k as f64).sqrt());
    let weights = if q.rows() == 0 {
        Matrix::zeros(0, keys.rows())
    } else {
        softmax_rows(&logits)?
    };
    let output = weights.matmul(&values)?;
    let last = keys.rows() - 1;
    let background_weight = (0..weights.rows()).map(|r| weights.get(r, last)).collect();
    Ok(GatedAttnOutput {
        output,
        weights,
        background_weight,
    })
}

/// Query/key/value/output projections, each `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnProj {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttnProj {
    fn zeros(dim: usize) -> Self {
        Self {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            wo: Matrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            wq: Matrix::identity(dim),
            wk: Matrix::identity(dim),
            wv: Matrix::identity(dim),
            wo: Matrix::identity(dim),
        }
    }

    fn random(dim: usize, scale: f64, rng: &mut rand::rngs::Xoshiro256PlusPlus) -> Self {
        Self {
            wq: Matrix::random(dim, dim, scale, rng),
            wk: Matrix::random(dim, dim, scale, rng),
            wv: Matrix::random(dim, dim, scale, rng),
            wo: Matrix::random(dim, dim, scale, rng),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        for m in [&self.wq, &self.wk, &self.wv, &self.wo] {
            check_len("projection rows", dim, m.rows())?;
            check_len("projection cols", dim, m.cols())?;
        }
        Ok(())
    }
}

/// `x + W2·relu(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Ffn {
    fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(dim, hidden),
            b2: vec![0.0; dim],
        }
    }

    fn random(dim: usize, hidden: usize, scale: f64, rng: &mut rand::rngs::Xoshiro256PlusPlus) -> Self {
        Self {
            w1: Matrix::random(hidden, dim, scale, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::random(dim, hidden, scale, rng),
            b2: vec![0.0; dim],
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut hidden = x.project_rows(&self.w1)?;
        for r in 0..hidden.rows() {
            for c in 0..hidden.cols() {
                hidden.set(r, c, (hidden.get(r, c) + self.b1[c]).max(0.0));
            }
        }
        let mut out = hidden.project_rows(&self.w2)?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, x.get(r, c) + out.get(r, c) + self.b2[c]);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    TextFromFeatures,
    VisualFromFeatures,
    FeaturesFromVisual,
}

impl Pathway {
    pub const ALL: [Pathway; 3] = [
        Pathway::TextFromFeatures,
        Pathway::VisualFromFeatures,
        Pathway::FeaturesFromVisual,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub dim: usize,
    pub d_k: usize,
    /// Shared background token `B`.
    pub background: Vec<f64>,
    /// Separate tokens per pathway, in [`Pathway::ALL`] order, when enabled.
    pub pathway_backgrounds: Option<[Vec<f64>; 3]>,
    /// Self-attention for the feature, text and visual streams.
    pub self_attn: [AttnProj; 3],
    /// Cross-attention per pathway, in [`Pathway::ALL`] order.
    pub cross_attn: [AttnProj; 3],
    /// FFN for the feature, text and visual streams.
    pub ffn: [Ffn; 3],
}

impl FusionParams {
    /// All projections zero: every sub-layer reduces to its residual.
    pub fn zeros(dim: usize) -> Self {
        let hidden = 2 * dim;
        Self {
            dim,
            d_k: dim,
            background: vec![0.0; dim],
            pathway_backgrounds: None,
            self_attn: std::array::from_fn(|_| AttnProj::zeros(dim)),
            cross_attn: std::array::from_fn(|_| AttnProj::zeros(dim)),
            ffn: std::array::from_fn(|_| Ffn::zeros(dim, hidden)),
        }
    }

    /// Gaussian weights with standard deviation `1/√dim`; `B ~ N(0, 1)`.
    pub fn random(dim: usize, seed: u64, per_pathway_background: bool) -> Self {
        let mut rng = numeric::seeded_rng(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let hidden = 2 * dim;
        let background = numeric::normal_vec(&mut rng, dim);
        let pathway_backgrounds = per_pathway_background
            .then(|| std::array::from_fn(|_| numeric::normal_vec(&mut rng, dim)));
        Self {
            dim,
            d_k: dim,
            background,
            pathway_backgrounds,
            self_attn: std::array::from_fn(|_| AttnProj::random(dim, s, &mut rng)),
            cross_attn: std::array::from_fn(|_| AttnProj::random(dim, s, &mut rng)),
            ffn: std::array::from_fn(|_| Ffn::random(dim, hidden, s, &mut rng)),
        }
    }

    pub fn background_for(&self, pathway: Pathway) -> &[f64] {
        match &self.pathway_backgrounds {
            Some(tokens) => &tokens[pathway.index()],
            None => &self.background,
        }
    }

    fn check(&self) -> Result<()> {
        if self.d_k == 0 {
            return Err(Error::invalid("d_k must be positive"));
        }
        check_len("background token width", self.dim, self.background.len())?;
        numeric_check("background token", &self.background)?;
        if let Some(tokens) = &self.pathway_backgrounds {
            for t in tokens {
                check_len("pathway background width", self.dim, t.len())?;
                numeric_check("pathway background token", t)?;
            }
        }
        for p in self.self_attn.iter().chain(&self.cross_attn) {
            p.check(self.dim)?;
        }
        for f in &self.ffn {
            check_len("ffn input width", self.dim, f.w1.cols())?;
            check_len("ffn hidden bias", f.w1.rows(), f.b1.len())?;
            check_len("ffn output rows", self.dim, f.w2.rows())?;
            check_len("ffn hidden width", f.w1.rows(), f.w2.cols())?;
            check_len("ffn output bias", self.dim, f.b2.len())?;
        }
        Ok(())
    }
}

fn numeric_check(context: &'static str, v: &[f64]) -> Result<()> {
    crate::error::check_finite(context, v)
}

/// Token streams entering or leaving a fusion layer, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub features: Matrix,
    pub text: Matrix,
    pub visual: Matrix,
}

impl FusionState {
    pub fn new(features: Matrix, text: Matrix, visual: Matrix) -> Result<Self> {
        check_len("text width", features.cols(), text.cols())?;
        check_len("visual width", features.cols(), visual.cols())?;
        Ok(Self {
            features,
            text,
            visual,
        })
    }

    pub fn from_prompts(
        features: &[Vec<f64>],
        text: &[PromptEmbedding],
        visual: &[PromptEmbedding],
        dim: usize,
    ) -> Result<Self> {
        let rows = |ps: &[PromptEmbedding]| ps.iter().map(|p| p.vec.clone()).collect::<Vec<_>>();
        Self::new(
            Matrix::from_rows(features, dim)?,
            Matrix::from_rows(&rows(text), dim)?,
            Matrix::from_rows(&rows(visual), dim)?,
        )
    }

    pub fn random(dim: usize, n_features: usize, n_text: usize, n_visual: usize, seed: u64) -> Self {
        let mut rng = numeric::seeded_rng(seed);
        Self {
            features: Matrix::random(n_features, dim, 1.0, &mut rng),
            text: Matrix::random(n_text, dim, 1.0, &mut rng),
            visual: Matrix::random(n_visual, dim, 1.0, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.features.rows(), self.text.rows(), self.visual.rows())
    }
}

fn self_attention(x: &Matrix, proj: &AttnProj, d_k: usize) -> Result<Matrix> {
    if x.rows() == 0 {
        return Ok(x.clone());
    }
    let q = x.project_rows(&proj.wq)?;
    let k = x.project_rows(&proj.wk)?;
    let v = x.project_rows(&proj.wv)?;
    let attn = softmax_rows(&q.matmul(&k.transpose())?.scale(1.0 / (d_k as f64).sqrt()))?;
    x.add(&attn.matmul(&v)?.project_rows(&proj.wo)?)
}

/// Weights recorded for one cross-attention pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayTrace {
    pub pathway: Pathway,
    pub weights: Matrix,
    pub background_weight: Vec<f64>,
}

fn cross_pathway(
    x: &Matrix,
    source: &Matrix,
    pathway: Pathway,
    params: &FusionParams,
    traces: &mut Vec<PathwayTrace>,
) -> Result<Matrix> {
    if x.rows() == 0 || source.rows() == 0 {
        return Ok(x.clone());
    }
    let proj = &params.cross_attn[pathway.index()];
    let attn = gated_attn(
        &x.project_rows(&proj.wq)?,
        &source.project_rows(&proj.wk)?,
        &source.project_rows(&proj.wv)?,
        params.background_for(pathway),
        params.d_k,
    )?;
    let out = x.add(&attn.output.project_rows(&proj.wo)?)?;
    traces.push(PathwayTrace {
        pathway,
        weights: attn.weights,
        background_weight: attn.background_weight,
    });
    Ok(out)
}

pub fn fusion_layer(state: &FusionState, params: &FusionParams) -> Result<FusionState> {
    fusion_layer_traced(state, params).map(|(s, _)| s)
}

/// Runs one fusion layer and returns the attention weights of every
/// cross-attention pathway that had both a query and a source stream.
pub fn fusion_layer_traced(
    state: &FusionState,
    params: &FusionParams,
) -> Result<(FusionState, Vec<PathwayTrace>)> {
    params.check()?;
    check_len("state width", params.dim, state.dim())?;
    check_len("text width", params.dim, state.text.cols())?;
    check_len("visual width", params.dim, state.visual.cols())?;

    let features = self_attention(&state.features, &params.self_attn[0], params.d_k)?;
    let text = self_attention(&state.text, &params.self_attn[1], params.d_k)?;
    let visual = self_attention(&state.visual, &params.self_attn[2], params.d_k)?;

    // All three pathways read the post-self-attention snapshot.
    let mut traces = Vec::with_capacity(3);
    let text_out = cross_pathway(&text, &features, Pathway::TextFromFeatures, params, &mut traces)?;
    let visual_out = cross_pathway(&visual, &features, Pathway::VisualFromFeatures, params, &mut traces)?;
    let features_out = cross_pathway(&features, &visual, Pathway::FeaturesFromVisual, params, &mut traces)?;

    let next = FusionState {
        features: params.ffn[0].apply(&features_out)?,
        text: params.ffn[1].apply(&text_out)?,
        visual: params.ffn[2].apply(&visual_out)?,
    };
    Ok((next, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathwayStats {
    pub pathway: Pathway,
    pub queries: usize,
    pub mean_background: f64,
    pub max_background: f64,
}

/// Mean and max background-token weight per active pathway of one layer.
pub fn background_activation_stats(state: &FusionState, params: &FusionParams) -> Result<Vec<PathwayStats>> {
    let (_, traces) = fusion_layer_traced(state, params)?;
    Ok(summarize(&traces))
}

fn summarize(traces: &[PathwayTrace]) -> Vec<PathwayStats> {
    traces
        .iter()
        .map(|t| {
            let n = t.background_weight.len();
            PathwayStats {
                pathway: t.pathway,
                queries: n,
                mean_background: t.background_weight.iter().sum::<f64>() / n as f64,
                max_background: t.background_weight.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect()
}

fn default_dim() -> usize {
    32
}

fn default_layers() -> usize {
    DEFAULT_FUSION_LAYERS
}

/// Configuration of the `fuse-demo` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseDemoConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub n_features: usize,
    pub n_text: usize,
    pub n_visual: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub per_pathway_background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    pub layer: usize,
    pub pathways: Vec<PathwayStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuseDemoReport {
    pub config: FuseDemoConfig,
    pub layers: Vec<LayerStats>,
    pub token_counts: [usize; 3],
}

/// Random state through `layers` randomly initialized fusion layers.
pub fn run_fuse_demo(config: &FuseDemoConfig) -> Result<FuseDemoReport> {
    if config.dim == 0 {
        return Err(Error::invalid("dim must be positive"));
    }
    let mut state = FusionState::random(
        config.dim,
        config.n_features,
        config.n_text,
        config.n_visual,
        config.seed,
    );
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let layer_seed = config.seed.wrapping_add(1 + l as u64);
        let params = FusionParams::random(config.dim, layer_seed, config.per_pathway_background);
        let (next, traces) = fusion_layer_traced(&state, &params)?;
        layers.push(LayerStats {
            layer: l,
            pathways: summarize(&traces),
        });
        state = next;
    }
    let (f, t, v) = state.counts();
    Ok(FuseDemoReport {
        config: config.clone(),
        layers,
        token_counts: [f, t, v],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn symmetric_logits_average_value_and_background() {
        let q = m(&[vec![1.0, 2.0]]);
        let k = m(&[vec![0.5, 0.25]]);
        let b = [0.5, 0.25];
        let v = m(&[vec![4.0, -2.0]]);
        let out = gated_attn(&q, &k, &v, &b, 2).unwrap();
        assert_eq!(out.output.row(0), &[2.25, -0.875]);
        assert_eq!(out.background_weight, vec![0.5]);
    }

    #[test]
    fn ln3_gap_gives_three_to_one_weights() {
        let d_k = 4usize;
        let gap = (d_k as f64).sqrt() * 3f64.ln();
        let q = m(&[vec![1.0, 0.0, 0.0, 0.0]]);
        let k = m(&[vec![gap, 0.0, 0.0, 0.0]]);
        let b = [0.0, 1.0, 0.0, 0.0];
        let v = m(&[vec![2.0, 0.0, 0.0, 4.0]]);
        let out = gated_attn(&q, &k, &v, &b, d_k).unwrap();
        assert!((out.weights.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((out.background_weight[0] - 0.25).abs() < 1e-15);
        let expected = [1.5, 0.25, 0.0, 3.0];
        for (o, e) in out.output.row(0).iter().zip(expected) {
            assert!((o - e).abs() < 1e-14);
        }
    }

    #[test]
    fn large_gap_falls_back_to_background() {
        let q = m(&[vec![1.0, 0.0]]);
        let k = m(&[vec![-40.0, 3.0], vec![-45.0, 1.0]]);
        let v = m(&[vec![100.0, 100.0], vec![-100.0, 5.0]]);
        let b = [0.0, 7.0];
        let out = gated_attn(&q, &k, &v, &b, 1).unwrap();
        for (o, e) in out.output.row(0).iter().zip(b) {
            assert!((o - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn gated_attn_shape_errors() {
        let q = m(&[vec![1.0, 0.0]]);
        let k = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = m(&[vec![1.0, 0.0]]);
        assert!(gated_attn(&q, &k, &v, &[0.0, 0.0], 2).is_err());
        assert!(gated_attn(&q, &Matrix::zeros(0, 2), &Matrix::zeros(0, 2), &[0.0, 0.0], 2).is_err());
        assert!(gated_attn(&q, &k, &k, &[0.0], 2).is_err());
    }

    #[test]
    fn zero_params_are_identity() {
        let state = FusionState::random(6, 5, 2, 3, 1);
        let out = fusion_layer(&state, &FusionParams::zeros(6)).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn visual_query_picks_matching_feature_token() {
        let dim = 4;
        let scale = 20.0;
        let features: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { scale } else { 0.0 }).collect())
            .collect();
        let visual = vec![features[2].clone()];
        let mut params = FusionParams::zeros(dim);
        params.cross_attn[Pathway::VisualFromFeatures as usize] = AttnProj::identity(dim);
        let state = FusionState::new(
            Matrix::from_rows(&features, dim).unwrap(),
            Matrix::zeros(0, dim),
            Matrix::from_rows(&visual, dim).unwrap(),
        )
        .unwrap();
        let (_, traces) = fusion_layer_traced(&state, &params).unwrap();
        let t = traces
            .iter()
            .find(|t| t.pathway == Pathway::VisualFromFeatures)
            .unwrap();
        assert!(t.weights.get(0, 2) > 1.0 - 1e-12);
    }

    #[test]
    fn missing_text_only_skips_text_pathway() {
        let params = FusionParams::random(8, 3, false);
        let with_text = FusionState::random(8, 6, 2, 2, 9);
        let without = FusionState {
            text: Matrix::zeros(0, 8),
            ..with_text.clone()
        };
        let (a, ta) = fusion_layer_traced(&with_text, &params).unwrap();
        let (b, tb) = fusion_layer_traced(&without, &params).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.visual, b.visual);
        assert_eq!(b.text.rows(), 0);
        assert_eq!(ta.len(), 3);
        assert_eq!(tb.len(), 2);
        assert!(tb.iter().all(|t| t.pathway != Pathway::TextFromFeatures));
    }

    #[test]
    fn per_pathway_background_changes_weights() {
        let state = FusionState::random(8, 6, 2, 2, 4);
        let shared = FusionParams::random(8, 5, false);
        let mut split = shared.clone();
        split.pathway_backgrounds = Some(std::array::from_fn(|i| vec![i as f64; 8]));
        let a = background_activation_stats(&state, &shared).unwrap();
        let b = background_activation_stats(&state, &split).unwrap();
        assert_eq!(a.len(), 3);
        assert_ne!(a, b);
    }

    #[test]
    fn fuse_demo_preserves_counts() {
        let config: FuseDemoConfig =
            serde_json::from_str(r#"{"dim": 8, "n_features": 10, "n_text": 3, "n_visual": 2, "seed": 5}"#)
                .unwrap();
        assert_eq!(config.layers, DEFAULT_FUSION_LAYERS);
        let report = run_fuse_demo(&config).unwrap();
        assert_eq!(report.token_counts, [10, 3, 2]);
        assert_eq!(report.layers.len(), 3);
        for layer in &report.layers {
            for p in &layer.pathways {
                assert!((0.0..=1.0).contains(&p.mean_background));
                assert!(p.max_background >= p.mean_background);
            }
        }
    }
}
