//! Dual-path annotation cross-verification.
//!
//! A top-down set (image tags → open-set detector boxes) and a bottom-up set
//! (class-agnostic regions → per-region labels) for the same image are
//! matched one-to-one by Hungarian assignment on `1 − IoU`. Matched pairs
//! below the IoU gate are dropped, then the tags of each surviving pair are
//! compared by embedding cosine similarity and pairs under the similarity
//! threshold are dropped. Unmatched instances never reach the output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{hungarian, iou, BoxXYXY, CostMatrix};
use crate::numeric::{self, dot};
use crate::prompt::{provide_text_embedding, EmbeddingSource, TextEmbeddings};

pub const DEFAULT_IOU_GATE: f64 = 0.5;
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.6;
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    TopDown,
    BottomUp,
}

/// One annotated instance. The producing pipeline is recorded on the
/// enclosing [`AnnotationSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub tag: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub source: Source,
    pub instances: Vec<Instance>,
}

impl AnnotationSet {
    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::invalid("annotation set with empty image_id"));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.tag.is_empty() {
                return Err(Error::invalid(format!(
                    "{}: instance {i} has an empty tag",
                    self.image_id
                )));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::invalid(format!(
                    "{}: instance {i} score {} outside [0, 1]",
                    self.image_id, inst.score
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let set: AnnotationSet =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation sets always serialize")
    }
}

/// Base used for the retention rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionBase {
    /// Mean of the two input counts.
    #[default]
    Mean,
    TopDown,
    BottomUp,
}

impl RetentionBase {
    fn denominator(self, input_a: usize, input_b: usize) -> f64 {
        match self {
            RetentionBase::Mean => 0.5 * (input_a + input_b) as f64,
            RetentionBase::TopDown => input_a as f64,
            RetentionBase::BottomUp => input_b as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub iou_gate: f64,
    pub sim_threshold: f64,
    #[serde(default)]
    pub retention_base: RetentionBase,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            iou_gate: DEFAULT_IOU_GATE,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            retention_base: RetentionBase::Mean,
        }
    }
}

impl VerifyConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(Error::invalid(format!("iou gate {} outside [0, 1]", self.iou_gate)));
        }
        if !(-1.0..=1.0).contains(&self.sim_threshold) {
            return Err(Error::invalid(format!(
                "similarity threshold {} outside [-1, 1]",
                self.sim_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub input_a: usize,
    pub input_b: usize,
    /// Pairs produced by the assignment.
    pub matched: usize,
    /// Matched pairs that passed the IoU gate.
    pub gated: usize,
    pub retained: usize,
    pub retention_rate: f64,
    pub retention_base: RetentionBase,
    /// Mean tag similarity over gated pairs.
    pub mean_similarity_before: Option<f64>,
    /// Mean tag similarity over retained pairs.
    pub mean_similarity_after: Option<f64>,
    #[serde(skip)]
    pub similarities_before: Vec<f64>,
    #[serde(skip)]
    pub similarities_after: Vec<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

impl VerificationReport {
    fn build(
        input_a: usize,
        input_b: usize,
        matched: usize,
        base: RetentionBase,
        similarities_before: Vec<f64>,
        similarities_after: Vec<f64>,
    ) -> Self {
        let retained = similarities_after.len();
        let denom = base.denominator(input_a, input_b);
        Self {
            input_a,
            input_b,
            matched,
            gated: similarities_before.len(),
            retained,
            retention_rate: if denom > 0.0 { retained as f64 / denom } else { 0.0 },
            retention_base: base,
            mean_similarity_before: mean(&similarities_before),
            mean_similarity_after: mean(&similarities_after),
            similarities_before,
            similarities_after,
        }
    }

    /// Sums counts and pools similarities across reports.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a VerificationReport>, base: RetentionBase) -> Self {
        let (mut a, mut b, mut matched) = (0, 0, 0);
        let (mut before, mut after) = (Vec::new(), Vec::new());
        for r in reports {
            a += r.input_a;
            b += r.input_b;
            matched += r.matched;
            before.extend_from_slice(&r.similarities_before);
            after.extend_from_slice(&r.similarities_after);
        }
        Self::build(a, b, matched, base, before, after)
    }
}

/// Caches normalized tag embeddings for one verification run.
struct TagCache<'a> {
    provider: &'a dyn EmbeddingSource,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl<'a> TagCache<'a> {
    fn new(provider: &'a dyn EmbeddingSource) -> Self {
        Self {
            provider,
            vectors: BTreeMap::new(),
        }
    }

    fn similarity(&mut self, a: &str, b: &str) -> Result<f64> {
        for tag in [a, b] {
            if !self.vectors.contains_key(tag) {
                let e = provide_text_embedding(tag, self.provider)?;
                self.vectors.insert(tag.to_string(), e.vec);
            }
        }
        if a == b {
            return Ok(1.0);
        }
        Ok(dot(&self.vectors[a], &self.vectors[b]).clamp(-1.0, 1.0))
    }
}

pub fn cross_verify(
    a: &AnnotationSet,
    b: &AnnotationSet,
    emb: &dyn EmbeddingSource,
    config: &VerifyConfig,
) -> Result<(AnnotationSet, VerificationReport)> {
    config.validate()?;
    if a.source != Source::TopDown {
        return Err(Error::invalid(format!("{}: first set must be top_down", a.image_id)));
    }
    if b.source != Source::BottomUp {
        return Err(Error::invalid(format!("{}: second set must be bottom_up", b.image_id)));
    }
    if a.image_id != b.image_id {
        return Err(Error::invalid(format!(
            "image_id mismatch: `{}` vs `{}`",
            a.image_id, b.image_id
        )));
    }

    let pairs = if a.instances.is_empty() || b.instances.is_empty() {
        Vec::new()
    } else {
        let costs = a
            .instances
            .iter()
            .flat_map(|x| b.instances.iter().map(move |y| 1.0 - iou(&x.bbox, &y.bbox)))
            .collect();
        hungarian(&CostMatrix::new(a.instances.len(), b.instances.len(), costs)?).pairs
    };

    let mut cache = TagCache::new(emb);
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut verified = Vec::new();
    for &(i, j) in &pairs {
        let (top, bottom) = (&a.instances[i], &b.instances[j]);
        if iou(&top.bbox, &bottom.bbox) < config.iou_gate {
            continue;
        }
        let sim = cache.similarity(&top.tag, &bottom.tag)?;
        before.push(sim);
        if sim < config.sim_threshold {
            continue;
        }
        after.push(sim);
        verified.push(Instance {
            bbox: top.bbox,
            tag: top.tag.clone(),
            score: top.score,
            alias_tag: (bottom.tag != top.tag).then(|| bottom.tag.clone()),
            similarity: Some(sim),
        });
    }

    let report = VerificationReport::build(
        a.instances.len(),
        b.instances.len(),
        pairs.len(),
        config.retention_base,
        before,
        after,
    );
    let out = AnnotationSet {
        image_id: a.image_id.clone(),
        width: a.width,
        height: a.height,
        source: Source::TopDown,
        instances: verified,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageOutcome {
    pub image_id: String,
    pub report: VerificationReport,
    #[serde(skip)]
    pub verified: AnnotationSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unpaired {
    pub image_id: String,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileFailure {
    pub path: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutcome {
    pub aggregate: VerificationReport,
    pub images: Vec<ImageOutcome>,
    pub unpaired: Vec<Unpaired>,
    pub failures: Vec<FileFailure>,
}

/// Reads every `*.json` file in `dir`, keyed by the `image_id` it contains.
fn load_dir(dir: &Path, failures: &mut Vec<FileFailure>) -> Result<BTreeMap<String, (PathBuf, AnnotationSet)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();

    let mut sets = BTreeMap::new();
    for path in paths {
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(&path, e))
            .and_then(|text| AnnotationSet::from_json_str(&text));
        match parsed {
            Ok(set) => {
                if let Some((first, _)) = sets.get(&set.image_id) {
                    let first: &PathBuf = first;
                    failures.push(FileFailure {
                        path: path.display().to_string(),
                        error: format!("duplicate image_id `{}` (first seen in {})", set.image_id, first.display()),
                    });
                } else {
                    sets.insert(set.image_id.clone(), (path, set));
                }
            }
            Err(e) => failures.push(FileFailure {
                path: path.display().to_string(),
                error: e.to_string(),
            }),
        }
    }
    Ok(sets)
}

/// Cross-verifies every image present in both directories. Malformed files
/// and per-image errors are collected in `failures`; processing continues.
/// `jobs > 1` verifies images on a thread pool; results are ordered by
/// image id either way.
pub fn batch_verify(
    dir_a: &Path,
    dir_b: &Path,
    emb: &dyn EmbeddingSource,
    config: &VerifyConfig,
    jobs: usize,
) -> Result<BatchOutcome> {
    config.validate()?;
    let mut failures = Vec::new();
    let sets_a = load_dir(dir_a, &mut failures)?;
    let sets_b = load_dir(dir_b, &mut failures)?;

    let mut unpaired = Vec::new();
    let mut work = Vec::new();
    for (id, (path, a)) in &sets_a {
        match sets_b.get(id) {
            Some((_, b)) => work.push((path, a, b)),
            None => unpaired.push(Unpaired {
                image_id: id.clone(),
                source: a.source,
            }),
        }
    }
    for (id, (_, b)) in &sets_b {
        if !sets_a.contains_key(id) {
            unpaired.push(Unpaired {
                image_id: id.clone(),
                source: b.source,
            });
        }
    }

    let run = |(path, a, b): &(&PathBuf, &AnnotationSet, &AnnotationSet)| {
        cross_verify(a, b, emb, config)
            .map(|(verified, report)| ImageOutcome {
                image_id: a.image_id.clone(),
                report,
                verified,
            })
            .map_err(|e| FileFailure {
                path: path.display().to_string(),
                error: e.to_string(),
            })
    };
    let results: Vec<std::result::Result<ImageOutcome, FileFailure>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| work.par_iter().map(run).collect())
    } else {
        work.iter().map(run).collect()
    };

    let mut images = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(outcome) => images.push(outcome),
            Err(f) => failures.push(f),
        }
    }
    let aggregate = VerificationReport::combine(images.iter().map(|i| &i.report), config.retention_base);
    Ok(BatchOutcome {
        aggregate,
        images,
        unpaired,
        failures,
    })
}

/// Writes one verified JSON file per image into `out_dir`.
pub fn write_verified(outcome: &BatchOutcome, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for image in &outcome.images {
        let name: String = image
            .image_id
            .chars()
            .map(|c| if c == '/' || c == '\\' { '_' } else { c })
            .collect();
        let path = out_dir.join(format!("{name}.json"));
        std::fs::write(&path, image.verified.to_json_string() + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over [-1, 1]; the top edge falls in the last bin.
    pub fn similarity(values: &[f64]) -> Self {
        let (lo, hi) = (-1.0, 1.0);
        let mut counts = vec![0u64; HISTOGRAM_BINS];
        for &v in values {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let bin = ((t * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionSummary {
    pub images: usize,
    pub input_a: usize,
    pub input_b: usize,
    pub matched: usize,
    pub gated: usize,
    pub retained: usize,
    pub retention_rate: f64,
    pub filtered_fraction: f64,
    pub mean_similarity_before: Option<f64>,
    pub mean_similarity_after: Option<f64>,
    pub histogram_before: Histogram,
    pub histogram_after: Histogram,
}

pub fn retention_stats(reports: &[VerificationReport], base: RetentionBase) -> RetentionSummary {
    let total = VerificationReport::combine(reports, base);
    RetentionSummary {
        images: reports.len(),
        input_a: total.input_a,
        input_b: total.input_b,
        matched: total.matched,
        gated: total.gated,
        retained: total.retained,
        retention_rate: total.retention_rate,
        filtered_fraction: if base.denominator(total.input_a, total.input_b) > 0.0 {
            1.0 - total.retention_rate
        } else {
            0.0
        },
        mean_similarity_before: total.mean_similarity_before,
        mean_similarity_after: total.mean_similarity_after,
        histogram_before: Histogram::similarity(&total.similarities_before),
        histogram_after: Histogram::similarity(&total.similarities_after),
    }
}

/// Tag vocabulary of the synthetic fixture, grouped into near-synonyms.
pub const SYNTHETIC_GROUPS: [&[&str]; 4] = [
    &["dog", "puppy", "hound"],
    &["car", "sedan", "vehicle"],
    &["bird", "pigeon", "sparrow"],
    &["chair", "stool", "bench"],
];

/// Embedding table for [`SYNTHETIC_GROUPS`]: each tag is its group's
/// direction plus independent noise, so synonyms score high and unrelated
/// tags near zero.
pub fn synthetic_embeddings(dim: usize, seed: u64) -> TextEmbeddings {
    let mut rng = numeric::seeded_rng(seed);
    let mut table = serde_json::Map::new();
    for group in SYNTHETIC_GROUPS {
        let center = numeric::normal_vec(&mut rng, dim);
        for tag in group {
            let noise = numeric::normal_vec(&mut rng, dim);
            let v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + 0.6 * n).collect();
            table.insert(tag.to_string(), serde_json::json!(v));
        }
    }
    TextEmbeddings::from_json_str(&serde_json::Value::Object(table).to_string())
        .expect("synthetic table is well formed")
}

fn random_box(rng: &mut rand::rngs::Xoshiro256PlusPlus) -> BoxXYXY {
    let w = rng.random_range(0.05..0.4);
    let h = rng.random_range(0.05..0.4);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BoxXYXY::new(x, y, x + w, y + h).expect("box inside the unit square")
}

fn jitter(b: &BoxXYXY, amount: f64, rng: &mut rand::rngs::Xoshiro256PlusPlus) -> BoxXYXY {
    let mut c = b.to_array().map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0));
    if c[0] > c[2] {
        c.swap(0, 2);
    }
    if c[1] > c[3] {
        c.swap(1, 3);
    }
    BoxXYXY::try_from(c).expect("clamped box is valid")
}

/// Paired top-down / bottom-up sets with a mix of agreeing, relabelled,
/// displaced and pipeline-specific instances, for tests and demos.
pub fn synthetic_pairs(n_images: usize, seed: u64) -> Vec<(AnnotationSet, AnnotationSet)> {
    let mut rng = numeric::seeded_rng(seed);
    let tags: Vec<&str> = SYNTHETIC_GROUPS.iter().flat_map(|g| g.iter().copied()).collect();
    let pick = |rng: &mut rand::rngs::Xoshiro256PlusPlus| tags[rng.random_range(0..tags.len())];
    (0..n_images)
        .map(|i| {
            let image_id = format!("img_{i:04}");
            let mut top = Vec::new();
            let mut bottom = Vec::new();
            for _ in 0..rng.random_range(0..8usize) {
                let bbox = random_box(&mut rng);
                let group = SYNTHETIC_GROUPS[rng.random_range(0..SYNTHETIC_GROUPS.len())];
                let tag = group[rng.random_range(0..group.len())];
                let score = rng.random_range(0.3..1.0);
                top.push(Instance {
                    bbox,
                    tag: tag.to_string(),
                    score,
                    alias_tag: None,
                    similarity: None,
                });
                let roll: f64 = rng.random_range(0.0..1.0);
                let (other_box, other_tag) = if roll < 0.4 {
                    (jitter(&bbox, 0.02, &mut rng), tag)
                } else if roll < 0.6 {
                    (jitter(&bbox, 0.03, &mut rng), group[rng.random_range(0..group.len())])
                } else if roll < 0.75 {
                    (jitter(&bbox, 0.03, &mut rng), pick(&mut rng))
                } else if roll < 0.9 {
                    (jitter(&bbox, 0.15, &mut rng), tag)
                } else {
                    continue;
                };
                bottom.push(Instance {
                    bbox: other_box,
                    tag: other_tag.to_string(),
                    score: rng.random_range(0.3..1.0),
                    alias_tag: None,
                    similarity: None,
                });
            }
            for _ in 0..rng.random_range(0..4usize) {
                bottom.push(Instance {
                    bbox: random_box(&mut rng),
                    tag: pick(&mut rng).to_string(),
                    score: rng.random_range(0.3..1.0),
                    alias_tag: None,
                    similarity: None,
                });
            }
            let set = |source, instances| AnnotationSet {
                image_id: image_id.clone(),
                width: 640,
                height: 480,
                source,
                instances,
            };
            (set(Source::TopDown, top), set(Source::BottomUp, bottom))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(c: [f64; 4], tag: &str) -> Instance {
        Instance {
            bbox: BoxXYXY::try_from(c).unwrap(),
            tag: tag.into(),
            score: 0.9,
            alias_tag: None,
            similarity: None,
        }
    }

    fn set(source: Source, instances: Vec<Instance>) -> AnnotationSet {
        AnnotationSet {
            image_id: "img".into(),
            width: 100,
            height: 80,
            source,
            instances,
        }
    }

    fn provider() -> TextEmbeddings {
        TextEmbeddings::hash_only(64)
    }

    #[test]
    fn identical_sets_verify_themselves() {
        let a = set(Source::TopDown, vec![inst([0.1, 0.1, 0.5, 0.5], "cat")]);
        let b = set(Source::BottomUp, a.instances.clone());
        let (out, r) = cross_verify(&a, &b, &provider(), &VerifyConfig::default()).unwrap();
        assert_eq!((r.matched, r.retained), (1, 1));
        assert_eq!(r.retention_rate, 1.0);
        assert_eq!(out.instances[0].alias_tag, None);
        assert_eq!(out.instances[0].similarity, Some(1.0));
    }

    #[test]
    fn disjoint_boxes_are_gated_out() {
        let a = set(Source::TopDown, vec![inst([0.0, 0.0, 0.2, 0.2], "cat")]);
        let b = set(Source::BottomUp, vec![inst([0.6, 0.6, 0.9, 0.9], "cat")]);
        let (out, r) = cross_verify(&a, &b, &provider(), &VerifyConfig::default()).unwrap();
        assert_eq!((r.matched, r.gated, r.retained), (1, 0, 0));
        assert!(out.instances.is_empty());
        assert_eq!(r.mean_similarity_before, None);
    }

    #[test]
    fn two_by_two_assignment_follows_iou() {
        // IoU(a1,b1)=0.9, IoU(a1,b2)=0.1, IoU(a2,b1)=0.2, IoU(a2,b2)=0.8
        let a1 = [0.0, 0.0, 0.5, 1.0];
        let a2 = [0.25, 0.0, 1.0, 1.0];
        let b1 = [0.0, 0.0, 0.45, 1.0];
        let b2 = [0.4, 0.0, 1.0, 1.0];
        let bx = |c| BoxXYXY::try_from(c).unwrap();
        for (p, q, want) in [(a1, b1, 0.9), (a1, b2, 0.1), (a2, b1, 0.2), (a2, b2, 0.8)] {
            assert!((iou(&bx(p), &bx(q)) - want).abs() < 1e-12);
        }
        let a = set(Source::TopDown, vec![inst(a1, "dog"), inst(a2, "dog")]);
        let b = set(Source::BottomUp, vec![inst(b2, "dog"), inst(b1, "dog")]);
        let (out, r) = cross_verify(&a, &b, &provider(), &VerifyConfig::default()).unwrap();
        assert_eq!(r.retained, 2);
        assert!((r.mean_similarity_after.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(out.instances[0].bbox.to_array(), a1);
        assert_eq!(out.instances[1].bbox.to_array(), a2);
    }

    #[test]
    fn differing_tags_keep_top_down_box_and_alias() {
        let emb = TextEmbeddings::from_json_str(r#"{"dog": [1, 0], "puppy": [0.8, 0.6]}"#).unwrap();
        let a = set(Source::TopDown, vec![inst([0.1, 0.1, 0.5, 0.5], "dog")]);
        let b = set(Source::BottomUp, vec![inst([0.12, 0.1, 0.5, 0.52], "puppy")]);
        let (out, r) = cross_verify(&a, &b, &emb, &VerifyConfig::default()).unwrap();
        assert_eq!(r.retained, 1);
        let v = &out.instances[0];
        assert_eq!((v.tag.as_str(), v.alias_tag.as_deref()), ("dog", Some("puppy")));
        assert_eq!(v.bbox, a.instances[0].bbox);
        assert!((v.similarity.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cross_verify_errors() {
        let a = set(Source::TopDown, vec![inst([0.1, 0.1, 0.5, 0.5], "cat")]);
        let mut b = set(Source::BottomUp, vec![inst([0.1, 0.1, 0.5, 0.5], "dog")]);
        let strict = TextEmbeddings::from_json_str(r#"{"cat": [1, 0]}"#).unwrap();
        assert_eq!(
            cross_verify(&a, &b, &strict, &VerifyConfig::default()).unwrap_err(),
            Error::UnknownTag("dog".into())
        );
        b.image_id = "other".into();
        assert!(cross_verify(&a, &b, &provider(), &VerifyConfig::default()).is_err());
        assert!(cross_verify(&a, &a, &provider(), &VerifyConfig::default()).is_err());
        let bad = VerifyConfig {
            iou_gate: 1.5,
            ..VerifyConfig::default()
        };
        assert!(cross_verify(&a, &a, &provider(), &bad).is_err());
    }

    #[test]
    fn empty_sets_retain_nothing() {
        let a = set(Source::TopDown, vec![]);
        let b = set(Source::BottomUp, vec![inst([0.1, 0.1, 0.5, 0.5], "cat")]);
        let (_, r) = cross_verify(&a, &b, &provider(), &VerifyConfig::default()).unwrap();
        assert_eq!((r.input_a, r.input_b, r.matched, r.retained), (0, 1, 0, 0));
        assert_eq!(r.retention_rate, 0.0);
    }

    #[test]
    fn retention_bases() {
        let a = set(
            Source::TopDown,
            vec![inst([0.1, 0.1, 0.5, 0.5], "cat"), inst([0.6, 0.6, 0.9, 0.9], "cat")],
        );
        let b = set(Source::BottomUp, vec![inst([0.1, 0.1, 0.5, 0.5], "cat")]);
        let rate = |base| {
            let cfg = VerifyConfig {
                retention_base: base,
                ..VerifyConfig::default()
            };
            cross_verify(&a, &b, &provider(), &cfg).unwrap().1.retention_rate
        };
        assert_eq!(rate(RetentionBase::Mean), 1.0 / 1.5);
        assert_eq!(rate(RetentionBase::TopDown), 0.5);
        assert_eq!(rate(RetentionBase::BottomUp), 1.0);
    }

    #[test]
    fn json_schema_round_trip() {
        let text = r#"{"image_id": "x", "width": 10, "height": 20, "source": "bottom_up",
            "instances": [{"box": [0.1, 0.2, 0.3, 0.4], "tag": "cat", "score": 0.5}]}"#;
        let s = AnnotationSet::from_json_str(text).unwrap();
        assert_eq!(s.source, Source::BottomUp);
        let out = serde_json::to_value(&s).unwrap();
        assert_eq!(
            out,
            serde_json::json!({"image_id": "x", "width": 10, "height": 20, "source": "bottom_up",
                "instances": [{"box": [0.1, 0.2, 0.3, 0.4], "tag": "cat", "score": 0.5}]})
        );
        assert!(AnnotationSet::from_json_str(&text.replace("\"cat\"", "\"\"")).is_err());
        assert!(AnnotationSet::from_json_str(&text.replace("0.5}", "1.5}")).is_err());
        assert!(AnnotationSet::from_json_str(&text.replace("bottom_up", "sideways")).is_err());
    }

    #[test]
    fn histogram_edges() {
        let h = Histogram::similarity(&[-1.0, 0.0, 0.99, 1.0]);
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 2);
    }

    #[test]
    fn synthetic_fixture_is_valid_and_deterministic() {
        let pairs = synthetic_pairs(20, 3);
        assert_eq!(pairs, synthetic_pairs(20, 3));
        for (a, b) in &pairs {
            a.validate().unwrap();
            b.validate().unwrap();
        }
        let emb = synthetic_embeddings(32, 1);
        let same = provide_text_embedding("dog", &emb).unwrap();
        let syn = provide_text_embedding("puppy", &emb).unwrap();
        let other = provide_text_embedding("car", &emb).unwrap();
        assert!(dot(&same.vec, &syn.vec) > dot(&same.vec, &other.vec));
    }
}
