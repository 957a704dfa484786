//! Training checkpoints: model parameters, optimizer moments, extra named
//! tensors (personal embedding, background) and the sampler RNG state.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bundle::{Bundle, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::texture::TextureConfig;

pub const CHECKPOINT_FORMAT: &str = "geotex-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Multivideo,
    Done,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Multivideo => "multivideo",
            Stage::Done => "done",
        }
    }
}

/// Where training stands: the next epoch to run within `stage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
}

/// ChaCha8 position, enough to resume the exact stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position does not fit a JSON number.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Corrupt { path: "checkpoint".into(), reason: "malformed rng state".into() };
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    step: u64,
    config: AdamConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    config: Value,
    geometry: GeometryConfig,
    texture: TextureConfig,
    progress: Progress,
    rng: Option<RngState>,
    optimizers: BTreeMap<String, OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Echo of the run configuration that produced this checkpoint.
    pub config: Value,
    pub model: Model,
    pub progress: Progress,
    pub rng: Option<RngState>,
    /// Keyed `geometry` / `texture`, matching the store they update.
    pub optimizers: BTreeMap<String, Adam>,
    pub extra: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: Value, model: Model) -> Self {
        Self {
            config,
            model,
            progress: Progress { stage: Stage::Init, epoch: 0, step: 0 },
            rng: None,
            optimizers: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let meta = Meta {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            geometry: self.model.geometry_config.clone(),
            texture: self.model.texture_config.clone(),
            progress: self.progress,
            rng: self.rng.clone(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(k, o)| (k.clone(), OptimizerMeta { step: o.step, config: o.config.clone() }))
                .collect(),
        };
        let mut b = Bundle::new(serde_json::to_value(meta)?);
        for store in [&self.model.geometry, &self.model.texture] {
            for (name, t) in store.iter() {
                b.insert(name.clone(), t.clone());
            }
        }
        for (name, opt) in &self.optimizers {
            opt.save(&format!("opt.{name}"), &mut b);
        }
        for (name, t) in &self.extra {
            b.insert(format!("extra.{name}"), t.clone());
        }
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let meta: Meta = serde_json::from_value(b.meta.clone()).map_err(|e| Error::Corrupt {
            path: "checkpoint".into(),
            reason: format!("bad header: {e}"),
        })?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Corrupt { path: "checkpoint".into(), reason: format!("format `{}`", meta.format) });
        }
        let mut geometry = ParamStore::new();
        let mut texture = ParamStore::new();
        let mut extra = BTreeMap::new();
        for (name, t) in &b.tensors {
            if name.starts_with("geo.") {
                geometry.insert(name.clone(), t.clone());
            } else if name.starts_with("tex.") {
                texture.insert(name.clone(), t.clone());
            } else if let Some(rest) = name.strip_prefix("extra.") {
                extra.insert(rest.to_string(), t.clone());
            } else if !name.starts_with("opt.") {
                return Err(Error::Invalid(format!("unexpected tensor `{name}` in checkpoint")));
            }
        }
        let model = Model { geometry_config: meta.geometry, texture_config: meta.texture, geometry, texture };
        model.geometry_config.validate()?;
        model.texture_config.validate()?;
        model.check_layout()?;
        let mut optimizers = BTreeMap::new();
        for (name, om) in meta.optimizers {
            let store = match name.as_str() {
                "geometry" => &model.geometry,
                "texture" => &model.texture,
                other => return Err(Error::Invalid(format!("unknown optimizer `{other}`"))),
            };
            let head = format!("opt.{name}.");
            for (tname, t) in b.tensors.range(head.clone()..) {
                let Some(rest) = tname.strip_prefix(&head) else { break };
                let pname = rest.strip_prefix("m.").or_else(|| rest.strip_prefix("v.")).unwrap_or(rest);
                let p = store.get(pname).ok_or_else(|| Error::MissingTensor(pname.to_string()))?;
                if p.shape() != t.shape() {
                    return Err(Error::TensorShape {
                        name: tname.clone(),
                        expected: p.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
            optimizers.insert(name.clone(), Adam::load(om.config, om.step, &format!("opt.{name}"), b));
        }
        Ok(Self { config: meta.config, model, progress: meta.progress, rng: meta.rng, optimizers, extra })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_bundle()?.to_bytes(CHECKPOINT_MAGIC)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::read(path, CHECKPOINT_MAGIC)?)
    }

    /// Load and refuse a checkpoint whose architecture differs from `expected`.
    pub fn load_matching(path: &Path, geometry: &GeometryConfig, texture: &TextureConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let want = Model::init(geometry.clone(), texture.clone(), 0)?;
        want.geometry.check_layout(&ck.model.geometry)?;
        want.texture.check_layout(&ck.model.texture)?;
        Ok(ck)
    }
}
