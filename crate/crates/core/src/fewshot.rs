//! Personalization for an unseen person from a handful of source frames:
//! background merging, test-time fine-tuning and motion transfer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{Checkpoint, Progress, Stage};
use crate::error::{Error, Result};
use crate::geometry;
use crate::graph::Graph;
use crate::losses::{image_loss, test_loss, total_loss, FeatureExtractor, LossReport, LossWeights, Term};
use crate::model::{select, GeometryPrediction, Model};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::renderer::{render, render_var};
use crate::synthworld::derive_seed;
use crate::tensor::Tensor;
use crate::texture;
use crate::trainer::FrameBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub geometry_steps: usize,
    pub embedding_steps: usize,
    pub lr_geometry: f64,
    pub lr_embedding: f64,
    /// Source frames of the new person.
    pub sources: usize,
    /// Source frames reconstructed per step.
    pub batch: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub feature_seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            geometry_steps: 40,
            embedding_steps: 300,
            lr_geometry: 2e-4,
            lr_embedding: 5e-3,
            sources: 20,
            batch: 6,
            clip_norm: 10.0,
            seed: 0,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            feature_seed: 17,
        }
    }
}

impl FinetuneConfig {
    /// Paper step counts and rates with a smaller reconstruction batch.
    pub fn desk() -> Self {
        Self { batch: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_geometry", self.lr_geometry), ("lr_embedding", self.lr_embedding), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("finetune.{name}"), "must be positive"));
            }
        }
        if self.sources == 0 {
            return Err(Error::config("finetune.sources", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("finetune.batch", "must be positive"));
        }
        self.adam.validate()?;
        self.loss_weights.validate()
    }
}

/// Per-pixel median over frames where the person is absent (`mask < 0.5`);
/// pixels never uncovered are filled by diffusing from valid neighbors.
pub fn merge_background(images: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4();
    if b == 0 || c != 3 || masks.shape() != [b, 1, h, w] {
        return Err(Error::Shape(format!("images {:?} / masks {:?}", images.shape(), masks.shape())));
    }
    let hw = h * w;
    let mut out = vec![0.0f32; 3 * hw];
    let mut known = vec![false; hw];
    let mut obs = Vec::with_capacity(b);
    for p in 0..hw {
        let frames: Vec<usize> = (0..b).filter(|&j| masks[j * hw + p] < 0.5).collect();
        if frames.is_empty() {
            continue;
        }
        known[p] = true;
        for ch in 0..3 {
            obs.clear();
            obs.extend(frames.iter().map(|&j| images[(j * 3 + ch) * hw + p]));
            out[ch * hw + p] = median(&mut obs);
        }
    }
    fill_unknown(&mut out, &mut known, h, w);
    Tensor::new(&[1, 3, h, w], out)
}

fn median(v: &mut [f32]) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Each sweep assigns every unknown pixel bordering a known one the mean of
/// its known 4-neighbors. An image with nothing known becomes mid-gray.
fn fill_unknown(img: &mut [f32], known: &mut [bool], h: usize, w: usize) {
    let hw = h * w;
    if !known.iter().any(|&k| k) {
        img.iter_mut().for_each(|v| *v = 0.5);
        known.iter_mut().for_each(|k| *k = true);
        return;
    }
    while known.iter().any(|&k| !k) {
        let snapshot = known.to_vec();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if snapshot[p] {
                    continue;
                }
                let mut acc = [0.0f32; 3];
                let mut count = 0;
                let neighbors = [(y > 0).then(|| p - w), (y + 1 < h).then(|| p + w), (x > 0).then(|| p - 1), (x + 1 < w).then(|| p + 1)];
                for q in neighbors.into_iter().flatten().filter(|&q| snapshot[q]) {
                    for ch in 0..3 {
                        acc[ch] += img[ch * hw + q];
                    }
                    count += 1;
                }
                if count > 0 {
                    for ch in 0..3 {
                        img[ch * hw + p] = acc[ch] / count as f32;
                    }
                    known[p] = true;
                }
            }
        }
    }
}

/// Everything needed to animate one person.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalState {
    pub geometry: ParamStore,
    /// `[1, C, s, s]`
    pub embedding: Tensor,
    /// `[1, 3, H, W]`
    pub background: Tensor,
    pub source_images: Tensor,
    pub source_poses: Tensor,
}

impl PersonalState {
    /// Embedding as the mean of the encoded source textures, background
    /// merged from the sources, geometry taken from the trained model.
    pub fn init(model: &Model, sources: &FrameBatch) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Invalid("personalization needs at least one source frame".into()));
        }
        let per_source = model.encode_textures(&sources.atlases())?;
        let (b, c, s, _) = per_source.dims4();
        let items: Vec<Tensor> = (0..b).map(|i| per_source.batch_item(i)).collect();
        let embedding = texture::merge_embeddings(&items)?;
        debug_assert_eq!(embedding.shape(), &[1, c, s, s]);
        Ok(Self {
            geometry: model.geometry.clone(),
            embedding,
            background: merge_background(&sources.images, &sources.masks)?,
            source_images: sources.images.clone(),
            source_poses: sources.poses.clone(),
        })
    }

    /// Stored as a checkpoint whose geometry is the personalized one.
    pub fn to_checkpoint(&self, model: &Model, config: Value) -> Checkpoint {
        let mut m = model.clone();
        m.geometry = self.geometry.clone();
        let mut ck = Checkpoint::new(config, m);
        ck.progress = Progress { stage: Stage::Done, epoch: 0, step: 0 };
        ck.extra.insert("personal.embedding".into(), self.embedding.clone());
        ck.extra.insert("personal.background".into(), self.background.clone());
        ck.extra.insert("personal.source_images".into(), self.source_images.clone());
        ck.extra.insert("personal.source_poses".into(), self.source_poses.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, Self)> {
        let get = |k: &str| ck.extra.get(k).cloned().ok_or_else(|| Error::MissingTensor(format!("extra.{k}")));
        let state = Self {
            geometry: ck.model.geometry.clone(),
            embedding: get("personal.embedding")?,
            background: get("personal.background")?,
            source_images: get("personal.source_images")?,
            source_poses: get("personal.source_poses")?,
        };
        let want = ck.model.texture_config.embedding_shape();
        if state.embedding.shape() != want {
            return Err(Error::TensorShape {
                name: "extra.personal.embedding".into(),
                expected: want.to_vec(),
                found: state.embedding.shape().to_vec(),
            });
        }
        Ok((ck.model.clone(), state))
    }

    fn atlas(&self, model: &Model) -> Result<Tensor> {
        model.decode_texture(&self.embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutput {
    /// `[k, 3, H, W]`
    pub images: Tensor,
    pub scores: Tensor,
    pub uv: Tensor,
}

/// Animate the personalized state with target poses `[k, P, H, W]`.
pub fn transfer(model: &Model, state: &PersonalState, poses: &Tensor) -> Result<TransferOutput> {
    let (k, _, h, w) = poses.dims4();
    let n = model.n_parts();
    if k == 0 {
        return Ok(TransferOutput {
            images: Tensor::zeros(&[0, 3, h, w]),
            scores: Tensor::zeros(&[0, n + 1, h, w]),
            uv: Tensor::zeros(&[0, 2 * n, h, w]),
        });
    }
    let pred = model.predict_geometry(Some(&state.geometry), &state.source_images, &state.source_poses, poses)?;
    let atlas = state.atlas(model)?;
    let images = model.render_prediction(&atlas, &pred, Some(&state.background))?;
    Ok(TransferOutput { images, scores: pred.scores, uv: pred.uv })
}

/// Test objective of `state` over all its frames `frames` (normally the
/// sources themselves).
pub fn test_objective(
    model: &Model,
    state: &PersonalState,
    frames: &FrameBatch,
    fx: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossReport> {
    let pred = model.predict_geometry(Some(&state.geometry), &state.source_images, &state.source_poses, &frames.poses)?;
    let atlas = state.atlas(model)?;
    objective_with(&pred, &atlas, &state.background, frames, fx, weights)
}

fn objective_with(
    pred: &GeometryPrediction,
    atlas: &Tensor,
    background: &Tensor,
    frames: &FrameBatch,
    fx: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossReport> {
    let k = frames.len();
    let bg = Tensor::stack(&vec![background; k])?;
    let rendered = render(atlas, &pred.uv, &pred.scores, Some(&bg))?;
    let targets = frames.geometry_targets()?;
    let mut g = Graph::new();
    let r = g.constant(rendered);
    let s = g.constant(pred.scores.clone());
    let uv = g.constant(pred.uv.clone());
    Ok(test_loss(&mut g, fx, r, &frames.images, s, uv, &targets, weights)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub initial: LossReport,
    pub after_geometry: LossReport,
    pub final_loss: LossReport,
    /// Mini-batch objective after every step of each phase.
    pub geometry_trace: Vec<f64>,
    pub embedding_trace: Vec<f64>,
    /// Phases whose result was discarded because they made things worse or
    /// diverged.
    pub reverted: Vec<String>,
}

/// Fine-tune geometry first, then embedding and background, each phase with
/// fresh optimizer state. The texture decoder is never modified. A phase that
/// diverges or ends with a higher objective is rolled back.
pub fn finetune_fewshot(model: &Model, sources: &FrameBatch, cfg: &FinetuneConfig) -> Result<(PersonalState, FinetuneReport)> {
    cfg.validate()?;
    let fx = FeatureExtractor::new(cfg.feature_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[303]));
    let mut state = PersonalState::init(model, sources)?;
    let w = &cfg.loss_weights;
    let batch = cfg.batch.min(sources.len());
    let mut reverted = Vec::new();

    let initial = test_objective(model, &state, sources, &fx, w)?;
    if cfg.geometry_steps == 0 && cfg.embedding_steps == 0 {
        let report = FinetuneReport {
            after_geometry: initial.clone(),
            final_loss: initial.clone(),
            initial,
            geometry_trace: vec![],
            embedding_trace: vec![],
            reverted,
        };
        return Ok((state, report));
    }

    // phase 1: geometry generator against the sources
    let atlas = state.atlas(model)?;
    let start = state.geometry.clone();
    let mut opt = Adam::new(cfg.adam.clone());
    let mut geometry_trace = Vec::with_capacity(cfg.geometry_steps);
    let mut diverged = false;
    for _ in 0..cfg.geometry_steps {
        let idx = rand::seq::index::sample(&mut rng, sources.len(), batch).into_vec();
        let tgt = sources.subset(&idx)?;
        let gc = &model.geometry_config;
        let mut g = Graph::new();
        let im = g.constant(state.source_images.clone());
        let po = g.constant(state.source_poses.clone());
        let pyr = geometry::encode_sources(&mut g, &state.geometry, gc, im, po)?;
        let tp = g.constant(tgt.poses.clone());
        let out = geometry::forward_with(&mut g, &state.geometry, gc, tp, &pyr)?;
        let s = geometry::part_scores(&mut g, out.logits);
        let a = g.constant(atlas.clone());
        let bg = g.constant(Tensor::stack(&vec![&state.background; batch])?);
        let r = render_var(&mut g, a, out.uv, s, Some(bg))?;
        let step = test_loss(&mut g, &fx, r, &tgt.images, s, out.uv, &tgt.geometry_targets()?, w);
        let Ok((total, report)) = step else {
            diverged = true;
            break;
        };
        let mut grads = g.backward(total).params(&state.geometry);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() || opt.update(&mut state.geometry, &grads, cfg.lr_geometry).is_err() {
            diverged = true;
            break;
        }
        geometry_trace.push(report.total);
    }
    let mut after_geometry = test_objective(model, &state, sources, &fx, w)?;
    if cfg.geometry_steps > 0 && (diverged || !(after_geometry.total <= initial.total)) {
        state.geometry = start;
        after_geometry = initial.clone();
        reverted.push("geometry".to_string());
    }

    // phase 2: embedding and background with the geometry held fixed
    let pred = model.predict_geometry(Some(&state.geometry), &state.source_images, &state.source_poses, &sources.poses)?;
    let frozen_texture = model.texture.clone().frozen();
    let tc = &model.texture_config;
    let mut personal = ParamStore::new();
    personal.insert("personal.embedding", state.embedding.clone());
    personal.insert("personal.background", state.background.clone());
    let start = personal.clone();
    let mut opt = Adam::new(cfg.adam.clone());
    let mut embedding_trace = Vec::with_capacity(cfg.embedding_steps);
    let mut diverged = false;
    for _ in 0..cfg.embedding_steps {
        let idx = rand::seq::index::sample(&mut rng, sources.len(), batch).into_vec();
        let mut g = Graph::new();
        let t = g.param(&personal, "personal.embedding");
        let b = g.param(&personal, "personal.background");
        let atlas = texture::decode(&mut g, &frozen_texture, tc, t)?;
        let uv = g.constant(select(&pred.uv, &idx)?);
        let s = g.constant(select(&pred.scores, &idx)?);
        let bg = g.repeat_batch(b, batch);
        let r = render_var(&mut g, atlas, uv, s, Some(bg))?;
        let li = image_loss(&mut g, &fx, r, &select(&sources.images, &idx)?, None)?;
        let Ok((total, report)) = total_loss(&mut g, &[(Term::Image, li)], w) else {
            diverged = true;
            break;
        };
        let mut grads = g.backward(total).params(&personal);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() || opt.update(&mut personal, &grads, cfg.lr_embedding).is_err() {
            diverged = true;
            break;
        }
        // the background stays a valid image
        personal.get_mut("personal.background").unwrap().data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        embedding_trace.push(report.total);
    }
    let take = |p: &ParamStore, k: &str| p.get(k).cloned().unwrap();
    state.embedding = take(&personal, "personal.embedding");
    state.background = take(&personal, "personal.background");
    let mut final_loss = test_objective(model, &state, sources, &fx, w)?;
    if cfg.embedding_steps > 0 && (diverged || !(final_loss.total <= after_geometry.total)) {
        state.embedding = take(&start, "personal.embedding");
        state.background = take(&start, "personal.background");
        final_loss = after_geometry.clone();
        reverted.push("embedding".to_string());
    }
    let report = FinetuneReport { initial, after_geometry, final_loss, geometry_trace, embedding_trace, reverted };
    Ok((state, report))
}

/// Texture decoder digest, for checking that fine-tuning leaves it alone.
pub fn texture_digest(model: &Model) -> String {
    model.texture.digest()
}

/// Per-part mean color of `image [1,3,H,W]` over pixels whose argmax score
/// falls in base part `k` (summing a base part's segments).
pub fn part_mean_colors(image: &Tensor, scores: &Tensor, segments: usize) -> Vec<Option<[f64; 3]>> {
    let (_, k1, h, w) = scores.dims4();
    let n = k1 - 1;
    let hw = h * w;
    let labels = crate::trainer::argmax_labels(scores);
    let mut acc: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
    for p in 0..hw {
        if labels[p] == n {
            continue;
        }
        let e = acc.entry(labels[p] / segments).or_insert(([0.0; 3], 0));
        for c in 0..3 {
            e.0[c] += image[c * hw + p] as f64;
        }
        e.1 += 1;
    }
    (0..n / segments)
        .map(|k| acc.get(&k).map(|(s, c)| [s[0] / *c as f64, s[1] / *c as f64, s[2] / *c as f64]))
        .collect()
}
