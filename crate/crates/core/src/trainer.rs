//! Initialization and multi-video training with per-person mini-batches.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, Progress, RngState, Stage};
use crate::error::{Error, Result};
use crate::geometry;
use crate::graph::Graph;
use crate::losses::{
    coord_loss, image_loss, mask_loss, reg_coord_loss, reg_mask_loss, segmentation_loss, texture_loss, total_loss,
    FeatureExtractor, GeometryTargets, LossReport, LossWeights, Term, TextureTargets,
};
use crate::metrics::masked_l1;
use crate::model::{select, stack_new_axis, Model};
use crate::optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
use crate::renderer::render_var;
use crate::synthworld::{derive_seed, FrameSource, GtFrame, PartialTexture, Split};
use crate::tensor::Tensor;
use crate::texture;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    /// Epochs at which the rate halves.
    pub milestones: Vec<usize>,
    /// `None` means one pass over the training frames per epoch.
    pub steps_per_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub adam: AdamConfig,
    pub init: StageSchedule,
    pub multivideo: StageSchedule,
    pub batch_init_geometry: usize,
    pub batch_init_texture: usize,
    /// Texture updates per initialization step; texture steps are far
    /// cheaper than geometry steps.
    pub init_texture_updates: usize,
    pub batch_multivideo: usize,
    /// Source frames per training batch.
    pub sources: usize,
    pub clip_norm: f64,
    /// Trailing frames of every training person kept out of training.
    pub validation_frames: usize,
    /// Held-out targets scored per person at validation.
    pub validation_targets: usize,
    pub loss_weights: LossWeights,
    pub feature_seed: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            seed: 0,
            lr: 2e-4,
            adam: AdamConfig::default(),
            init: StageSchedule { epochs: 10, milestones: vec![5], steps_per_epoch: None },
            multivideo: StageSchedule { epochs: 15, milestones: vec![5, 10], steps_per_epoch: None },
            batch_init_geometry: 16,
            batch_init_texture: 8,
            init_texture_updates: 1,
            batch_multivideo: 10,
            sources: 4,
            clip_norm: 10.0,
            validation_frames: 50,
            validation_targets: 8,
            loss_weights: LossWeights::default(),
            feature_seed: 17,
        }
    }

    /// Shorter schedules and halved batches; milestone and batch ratios kept.
    pub fn desk() -> Self {
        Self {
            init: StageSchedule { epochs: 4, milestones: vec![2], steps_per_epoch: Some(60) },
            multivideo: StageSchedule { epochs: 6, milestones: vec![2, 4], steps_per_epoch: Some(30) },
            batch_init_geometry: 8,
            batch_init_texture: 4,
            init_texture_updates: 6,
            batch_multivideo: 5,
            validation_frames: 20,
            validation_targets: 4,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        self.adam.validate()?;
        self.loss_weights.validate()?;
        for (name, s) in [("init", &self.init), ("multivideo", &self.multivideo)] {
            if s.epochs == 0 {
                return Err(Error::config(format!("train.{name}.epochs"), "must be positive"));
            }
            if s.steps_per_epoch == Some(0) {
                return Err(Error::config(format!("train.{name}.steps_per_epoch"), "must be positive"));
            }
        }
        for (name, v) in [
            ("batch_init_geometry", self.batch_init_geometry),
            ("batch_init_texture", self.batch_init_texture),
            ("init_texture_updates", self.init_texture_updates),
            ("batch_multivideo", self.batch_multivideo),
            ("sources", self.sources),
            ("validation_frames", self.validation_frames),
            ("validation_targets", self.validation_targets),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name}"), "must be positive"));
            }
        }
        if self.validation_targets > self.validation_frames {
            return Err(Error::config("train.validation_targets", "exceeds train.validation_frames"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        Ok(())
    }

    fn schedule(&self, stage: Stage) -> LrSchedule {
        let s = match stage {
            Stage::Init => &self.init,
            _ => &self.multivideo,
        };
        LrSchedule { base: self.lr, milestones: s.milestones.clone() }
    }
}

/// Frames of one person stacked along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub frames: Vec<usize>,
    pub images: Tensor,
    pub poses: Tensor,
    pub masks: Tensor,
    pub scores: Tensor,
    pub uv: Tensor,
    pub partials: Vec<PartialTexture>,
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

impl FrameBatch {
    pub fn load(data: &dyn FrameSource, split: Split, person: usize, frames: &[usize]) -> Result<Self> {
        let gt = frames.iter().map(|&f| data.frame(split, person, f)).collect::<Result<Vec<_>>>()?;
        Self::from_frames(frames.to_vec(), &gt)
    }

    pub fn from_frames(frames: Vec<usize>, gt: &[GtFrame]) -> Result<Self> {
        let pick = |f: fn(&GtFrame) -> &Tensor| stack_new_axis(&gt.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            frames,
            images: pick(|f| &f.image)?,
            poses: pick(|f| &f.stickman)?,
            masks: pick(|f| &f.mask)?,
            scores: pick(|f| &f.scores)?,
            uv: pick(|f| &f.uv)?,
            partials: gt.iter().map(|f| f.partial.clone()).collect(),
            keypoints: gt.iter().map(|f| f.keypoints.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sub-batch of rows `idx`.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            frames: idx.iter().map(|&i| self.frames[i]).collect(),
            images: select(&self.images, idx)?,
            poses: select(&self.poses, idx)?,
            masks: select(&self.masks, idx)?,
            scores: select(&self.scores, idx)?,
            uv: select(&self.uv, idx)?,
            partials: idx.iter().map(|&i| self.partials[i].clone()).collect(),
            keypoints: idx.iter().map(|&i| self.keypoints[i].clone()).collect(),
        })
    }

    pub fn geometry_targets(&self) -> Result<GeometryTargets<f32>> {
        GeometryTargets::new(self.uv.clone(), self.scores.clone(), self.masks.clone())
    }

    pub fn texture_targets(&self) -> Result<TextureTargets<f32>> {
        TextureTargets::from_partials(&self.partials.iter().collect::<Vec<_>>())
    }

    pub fn atlases(&self) -> Vec<&Tensor> {
        self.partials.iter().map(|p| &p.atlas).collect()
    }
}

/// Frame indices of one person's batch; sources and targets never overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonBatch {
    pub person: usize,
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Draw disjoint source and target frames from `pool` (one person's frames).
pub fn sample_person_batch(
    rng: &mut ChaCha8Rng,
    person_id: &str,
    person: usize,
    pool: &[usize],
    sources: usize,
    targets: usize,
) -> Result<PersonBatch> {
    let needed = sources + targets;
    if pool.len() < needed {
        return Err(Error::InsufficientFrames { person: person_id.to_string(), needed, available: pool.len() });
    }
    let picks = rand::seq::index::sample(rng, pool.len(), needed);
    let mut frames = picks.into_iter().map(|i| pool[i]);
    let src = frames.by_ref().take(sources).collect();
    Ok(PersonBatch { person, sources: src, targets: frames.collect() })
}

/// `count` indices evenly spread over `range`.
pub fn spread(range: std::ops::Range<usize>, count: usize) -> Vec<usize> {
    let len = range.len();
    (0..count.min(len)).map(|i| range.start + i * len / count.min(len).max(1)).collect()
}

/// Held-out evaluation data of one training person.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub person: usize,
    pub sources: FrameBatch,
    pub targets: FrameBatch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    /// argmax S vs argmax S* over all pixels.
    pub seg_accuracy: f64,
    pub segmentation: f64,
    pub coord: f64,
    /// Score-weighted UV deviation from C*, the coordinate regularizer.
    pub coord_deviation: f64,
    /// Foreground reconstruction against `m * I*`.
    pub masked_l1: f64,
    /// Texture objective on held-out frames: the atlas generated from the
    /// targets' partial textures against those same partials.
    pub texture: f64,
    /// Atlas generated from the sources against the targets' partials.
    pub texture_cross: f64,
}

/// Held-out metrics of `model`, averaged over persons.
pub fn validate_model(model: &Model, sets: &[ValidationSet]) -> Result<ValidationMetrics> {
    let mut acc = ValidationMetrics::default();
    for set in sets {
        let pred = model.predict_geometry(None, &set.sources.images, &set.sources.poses, &set.targets.poses)?;
        let targets = set.targets.geometry_targets()?;
        let (_, atlas) = texture::generate(&model.texture, &model.texture_config, &set.sources.atlases())?;
        let rendered = model.render_prediction(&atlas, &pred, None)?;

        let mut g = Graph::<f32>::new();
        let uv = g.constant(pred.uv.clone());
        let s = g.constant(pred.scores.clone());
        let a = g.constant(atlas);
        let ls = segmentation_loss(&mut g, s, &targets)?;
        let lc = coord_loss(&mut g, uv, &targets)?;
        let lrc = reg_coord_loss(&mut g, uv, s, &targets)?;
        let tt = set.targets.texture_targets()?;
        let (lx, _) = texture_loss(&mut g, a, &tt)?;
        let (_, own) = texture::generate(&model.texture, &model.texture_config, &set.targets.atlases())?;
        let own = g.constant(own);
        let (lt, _) = texture_loss(&mut g, own, &tt)?;

        let labels = targets.labels();
        let predicted = argmax_labels(&pred.scores);
        let hits = labels.iter().zip(&predicted).filter(|(a, b)| a == b).count();

        let mut l1 = 0.0;
        for i in 0..set.targets.len() {
            // only pixels under the mask count, where m * I* equals I*
            let m = set.targets.masks.batch_item(i);
            l1 += masked_l1(&rendered.batch_item(i), &set.targets.images.batch_item(i), &m).unwrap_or(0.0);
        }
        acc.seg_accuracy += hits as f64 / labels.len() as f64;
        acc.segmentation += g.value(ls).item() as f64;
        acc.coord += g.value(lc).item() as f64;
        acc.coord_deviation += g.value(lrc).item() as f64;
        acc.texture += g.value(lt).item() as f64;
        acc.texture_cross += g.value(lx).item() as f64;
        acc.masked_l1 += l1 / set.targets.len() as f64;
    }
    let k = sets.len().max(1) as f64;
    for v in [
        &mut acc.seg_accuracy,
        &mut acc.segmentation,
        &mut acc.coord,
        &mut acc.coord_deviation,
        &mut acc.masked_l1,
        &mut acc.texture,
        &mut acc.texture_cross,
    ] {
        *v /= k;
    }
    Ok(acc)
}

/// Per-pixel argmax over channels of `[B, K, H, W]`, flattened `[B*H*W]`.
pub fn argmax_labels(scores: &Tensor) -> Vec<usize> {
    let (b, k, h, w) = scores.dims4();
    let hw = h * w;
    let s = scores.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if s[(bi * k + c) * hw + p] > s[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// JSON-lines training log, mirrored in memory.
#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<Value>,
    file: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn to_file(path: &Path, append: bool) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { records: Vec::new(), file: Some(BufWriter::new(f)) })
    }

    fn push(&mut self, record: Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Records without wall-clock fields, for reproducibility checks.
    pub fn deterministic_records(&self) -> Vec<Value> {
        self.records
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Some(o) = r.as_object_mut() {
                    o.remove("wall_time");
                }
                r
            })
            .collect()
    }
}

/// How far `Trainer::run` may go.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopAfter {
    Init,
    Multivideo,
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: Model,
    pub opt_geometry: Adam,
    pub opt_texture: Adam,
    pub progress: Progress,
    pub log: TrainLog,
    /// Echo of the full run configuration, stored in checkpoints.
    pub config_echo: Value,
    rng: ChaCha8Rng,
    data: &'a dyn FrameSource,
    fx: FeatureExtractor,
    validation: Vec<ValidationSet>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, model: Model, data: &'a dyn FrameSource, config_echo: Value) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[101]));
        let mut t = Self {
            opt_geometry: Adam::new(config.adam.clone()),
            opt_texture: Adam::new(config.adam.clone()),
            progress: Progress { stage: Stage::Init, epoch: 0, step: 0 },
            log: TrainLog::default(),
            config_echo,
            rng,
            data,
            fx: FeatureExtractor::new(config.feature_seed),
            validation: Vec::new(),
            started: Instant::now(),
            config,
            model,
        };
        t.check_data()?;
        t.validation = t.build_validation()?;
        Ok(t)
    }

    /// Continue from a checkpoint written by `checkpoint()`.
    pub fn resume(config: TrainConfig, ck: Checkpoint, data: &'a dyn FrameSource) -> Result<Self> {
        let mut t = Self::new(config, ck.model, data, ck.config)?;
        t.progress = ck.progress;
        if let Some(r) = &ck.rng {
            t.rng = r.restore()?;
        }
        if let Some(o) = ck.optimizers.get("geometry") {
            t.opt_geometry = o.clone();
        }
        if let Some(o) = ck.optimizers.get("texture") {
            t.opt_texture = o.clone();
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config_echo.clone(), self.model.clone());
        ck.progress = self.progress;
        ck.rng = Some(RngState::capture(&self.rng));
        ck.optimizers.insert("geometry".into(), self.opt_geometry.clone());
        ck.optimizers.insert("texture".into(), self.opt_texture.clone());
        ck
    }

    pub fn validation_sets(&self) -> &[ValidationSet] {
        &self.validation
    }

    pub fn validate(&self) -> Result<ValidationMetrics> {
        validate_model(&self.model, &self.validation)
    }

    fn check_data(&self) -> Result<()> {
        let wc = self.data.config();
        let gc = &self.model.geometry_config;
        if wc.n_parts != gc.n_parts {
            return Err(Error::config("geometry.n_parts", format!("dataset has {} parts", wc.n_parts)));
        }
        if wc.atlas_size != self.model.texture_config.atlas_size {
            return Err(Error::config("texture.atlas_size", format!("dataset atlas is {}", wc.atlas_size)));
        }
        let pool = self.pool_len();
        let c = &self.config;
        let need = c.sources + c.batch_init_geometry.max(c.batch_init_texture).max(c.batch_multivideo);
        if wc.frames_per_person <= c.validation_frames || pool < need {
            let p = self.data.persons(Split::Train).first().map(|p| p.person_id.clone()).unwrap_or_default();
            return Err(Error::InsufficientFrames { person: p, needed: need + c.validation_frames, available: wc.frames_per_person });
        }
        if self.data.persons(Split::Train).is_empty() {
            return Err(Error::Invalid("dataset has no training persons".into()));
        }
        Ok(())
    }

    fn pool_len(&self) -> usize {
        self.data.config().frames_per_person.saturating_sub(self.config.validation_frames)
    }

    fn build_validation(&self) -> Result<Vec<ValidationSet>> {
        let f = self.data.config().frames_per_person;
        let pool = self.pool_len();
        (0..self.data.persons(Split::Train).len())
            .map(|p| {
                let src = spread(0..pool, self.config.sources);
                let tgt = spread(pool..f, self.config.validation_targets);
                Ok(ValidationSet {
                    person: p,
                    sources: FrameBatch::load(self.data, Split::Train, p, &src)?,
                    targets: FrameBatch::load(self.data, Split::Train, p, &tgt)?,
                })
            })
            .collect()
    }

    fn steps_per_epoch(&self, stage: Stage) -> usize {
        let c = &self.config;
        let (s, batch) = match stage {
            Stage::Init => (&c.init, c.batch_init_geometry),
            _ => (&c.multivideo, c.batch_multivideo),
        };
        s.steps_per_epoch.unwrap_or_else(|| {
            let frames = self.pool_len() * self.data.persons(Split::Train).len();
            frames.div_ceil(batch)
        })
    }

    /// Run epochs until `stop` is reached or `max_epochs` have run in this
    /// call. A checkpoint is written after every epoch when `path` is given.
    pub fn run(&mut self, stop: StopAfter, checkpoint: Option<&Path>, max_epochs: Option<usize>) -> Result<()> {
        let mut ran = 0;
        loop {
            let done = match (self.progress.stage, stop) {
                (Stage::Done, _) | (Stage::Multivideo, StopAfter::Init) => true,
                _ => false,
            };
            if done || max_epochs.is_some_and(|m| ran >= m) {
                return Ok(());
            }
            self.run_epoch()?;
            ran += 1;
            if let Some(p) = checkpoint {
                self.checkpoint().save(p)?;
            }
        }
    }

    /// One epoch of the current stage, then validation and stage advance.
    pub fn run_epoch(&mut self) -> Result<ValidationMetrics> {
        let stage = self.progress.stage;
        if stage == Stage::Done {
            return Err(Error::Invalid("training already finished".into()));
        }
        let epoch = self.progress.epoch;
        let lr = self.config.schedule(stage).at(epoch);
        let persons = self.data.persons(Split::Train).len();
        let mut order: Vec<usize> = Vec::new();
        for i in 0..self.steps_per_epoch(stage) {
            if i % persons == 0 {
                order = (0..persons).collect();
                order.shuffle(&mut self.rng);
            }
            let person = order[i % persons];
            let reports = match stage {
                Stage::Init => self.init_step(person, lr),
                _ => self.multivideo_step(person, lr),
            }
            .map_err(|e| match e {
                Error::NonFinite(what) => self.diverged(what),
                e => e,
            })?;
            self.progress.step += 1;
            let mut losses = serde_json::Map::new();
            let mut norms = serde_json::Map::new();
            let mut total = 0.0;
            for (group, report, norm) in &reports {
                for (k, v) in &report.terms {
                    losses.insert(k.clone(), json!(v));
                }
                total += report.total;
                norms.insert(group.to_string(), json!(norm));
            }
            self.log.push(json!({
                "kind": "step",
                "stage": stage.name(),
                "epoch": epoch,
                "step": self.progress.step,
                "person": person,
                "lr": lr,
                "losses": losses,
                "total": total,
                "grad_norm": norms,
                "wall_time": self.started.elapsed().as_secs_f64(),
            }))?;
        }
        let metrics = self.validate()?;
        self.log.push(json!({
            "kind": "epoch",
            "stage": stage.name(),
            "epoch": epoch,
            "step": self.progress.step,
            "lr": lr,
            "validation": metrics,
            "wall_time": self.started.elapsed().as_secs_f64(),
        }))?;
        self.progress.epoch += 1;
        let epochs = match stage {
            Stage::Init => self.config.init.epochs,
            _ => self.config.multivideo.epochs,
        };
        if self.progress.epoch >= epochs {
            self.progress = Progress {
                stage: if stage == Stage::Init { Stage::Multivideo } else { Stage::Done },
                epoch: 0,
                step: self.progress.step,
            };
            // each stage starts with fresh moments
            self.opt_geometry = Adam::new(self.config.adam.clone());
            self.opt_texture = Adam::new(self.config.adam.clone());
        }
        Ok(metrics)
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Diverged {
            stage: self.progress.stage.name().into(),
            epoch: self.progress.epoch,
            step: self.progress.step as usize,
            reason,
        }
    }

    fn draw(&mut self, person: usize, sources: usize, targets: usize) -> Result<PersonBatch> {
        let pool: Vec<usize> = (0..self.pool_len()).collect();
        let id = self.data.persons(Split::Train)[person].person_id.clone();
        sample_person_batch(&mut self.rng, &id, person, &pool, sources, targets)
    }

    fn sample(&mut self, person: usize, sources: usize, targets: usize) -> Result<(FrameBatch, FrameBatch)> {
        let pb = self.draw(person, sources, targets)?;
        let src = FrameBatch::load(self.data, Split::Train, person, &pb.sources)?;
        let tgt = FrameBatch::load(self.data, Split::Train, person, &pb.targets)?;
        Ok((src, tgt))
    }

    fn apply(
        &mut self,
        g: &Graph<f32>,
        total: crate::graph::Var,
        report: &LossReport,
        geometry: bool,
        texture: bool,
        lr: f64,
    ) -> Result<f64> {
        if !report.total.is_finite() {
            return Err(self.diverged(format!("non-finite loss {report:?}")));
        }
        let mut grads = g.backward(total);
        let mut all = BTreeMap::new();
        if geometry {
            all.extend(grads.params(&self.model.geometry));
        }
        if texture {
            all.extend(grads.params(&self.model.texture));
        }
        let norm = clip_global_norm(&mut all, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(self.diverged("non-finite gradient norm".into()));
        }
        let (mut gg, mut tg) = (BTreeMap::new(), BTreeMap::new());
        for (k, v) in all {
            if k.starts_with("geo.") {
                gg.insert(k, v);
            } else {
                tg.insert(k, v);
            }
        }
        if geometry {
            self.opt_geometry.update(&mut self.model.geometry, &gg, lr)?;
        }
        if texture {
            self.opt_texture.update(&mut self.model.texture, &tg, lr)?;
        }
        Ok(norm)
    }

    /// Geometry against the oracle maps, texture against partial atlases.
    fn init_step(&mut self, person: usize, lr: f64) -> Result<Vec<(&'static str, LossReport, f64)>> {
        let c = self.config.clone();
        let (src, tgt) = self.sample(person, c.sources, c.batch_init_geometry)?;
        let gc = self.model.geometry_config.clone();
        let mut g = Graph::new();
        let im = g.constant(src.images.clone());
        let po = g.constant(src.poses.clone());
        let tp = g.constant(tgt.poses.clone());
        let out = geometry::forward(&mut g, &self.model.geometry, &gc, tp, im, po)?;
        let s = geometry::part_scores(&mut g, out.logits);
        let targets = tgt.geometry_targets()?;
        let lc = coord_loss(&mut g, out.uv, &targets)?;
        let ls = segmentation_loss(&mut g, s, &targets)?;
        let (total, geo_report) = total_loss(&mut g, &[(Term::Coord, lc), (Term::Segmentation, ls)], &c.loss_weights)?;
        let geo_norm = self.apply(&g, total, &geo_report, true, false, lr)?;
        drop(g);

        let mut last = None;
        let persons = self.data.persons(Split::Train).len();
        for k in 0..c.init_texture_updates {
            // later updates visit other persons so consecutive texture
            // batches do not all show the same appearance
            let who = (person + k) % persons;
            let pb = self.draw(who, 0, c.batch_init_texture)?;
            let tex = FrameBatch::load(self.data, Split::Train, who, &pb.targets)?;
            let tc = self.model.texture_config.clone();
            let mut g = Graph::new();
            let packed = g.constant(texture::pack_atlases(&tc, &tex.atlases())?);
            let out = texture::forward(&mut g, &self.model.texture, &tc, packed)?;
            let (lt, _) = texture_loss(&mut g, out.atlas, &tex.texture_targets()?)?;
            let (total, report) = total_loss(&mut g, &[(Term::Texture, lt)], &c.loss_weights)?;
            let norm = self.apply(&g, total, &report, false, true, lr)?;
            last = Some((report, norm));
        }
        let (tex_report, tex_norm) = last.expect("at least one texture update");
        Ok(vec![("geometry", geo_report, geo_norm), ("texture", tex_report, tex_norm)])
    }

    /// Joint step: texture from the sources' partials, geometry for the
    /// targets, foreground rendered and compared against `m * I*`.
    fn multivideo_step(&mut self, person: usize, lr: f64) -> Result<Vec<(&'static str, LossReport, f64)>> {
        let c = self.config.clone();
        let (src, tgt) = self.sample(person, c.sources, c.batch_multivideo)?;
        let gc = self.model.geometry_config.clone();
        let tc = self.model.texture_config.clone();
        let mut g = Graph::new();
        let packed = g.constant(texture::pack_atlases(&tc, &src.atlases())?);
        let tex = texture::forward(&mut g, &self.model.texture, &tc, packed)?;
        let im = g.constant(src.images.clone());
        let po = g.constant(src.poses.clone());
        let pyramids = geometry::encode_sources(&mut g, &self.model.geometry, &gc, im, po)?;
        let tp = g.constant(tgt.poses.clone());
        let out = geometry::forward_with(&mut g, &self.model.geometry, &gc, tp, &pyramids)?;
        let s = geometry::part_scores(&mut g, out.logits);
        let rendered = render_var(&mut g, tex.atlas, out.uv, s, None)?;
        let targets = tgt.geometry_targets()?;
        let terms = [
            (Term::Image, image_loss(&mut g, &self.fx, rendered, &tgt.images, Some(&tgt.masks))?),
            (Term::Mask, mask_loss(&mut g, s, &tgt.masks)?),
            (Term::RegTexture, texture_loss(&mut g, tex.atlas, &src.texture_targets()?)?.0),
            (Term::RegCoord, reg_coord_loss(&mut g, out.uv, s, &targets)?),
            (Term::RegMask, reg_mask_loss(&mut g, s, &targets)?),
        ];
        let (total, report) = total_loss(&mut g, &terms, &c.loss_weights)?;
        let norm = self.apply(&g, total, &report, true, true, lr)?;
        Ok(vec![("joint", report, norm)])
    }
}
