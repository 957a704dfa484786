//! Run configuration: one JSON document with world, model, train, finetune
//! and eval sections, plus `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fewshot::FinetuneConfig;
use crate::geometry::GeometryConfig;
use crate::synthworld::{WorldConfig, STICKMAN_CHANNELS};
use crate::texture::TextureConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub geometry: GeometryConfig,
    pub texture: TextureConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        let world = WorldConfig::desk();
        Self {
            model: ModelConfig {
                geometry: GeometryConfig::desk(world.n_parts, STICKMAN_CHANNELS),
                texture: TextureConfig::desk(world.n_parts, world.atlas_size),
            },
            world,
            train: TrainConfig::desk(),
            finetune: FinetuneConfig::desk(),
            eval: EvalConfig::desk(),
        }
    }

    pub fn paper() -> Self {
        let world = WorldConfig::paper();
        Self {
            model: ModelConfig {
                geometry: GeometryConfig::paper(world.n_parts, STICKMAN_CHANNELS),
                texture: TextureConfig::paper(world.n_parts, world.atlas_size),
            },
            world,
            train: TrainConfig::paper(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::paper(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (desk, paper)"))),
        }
    }

    /// Parse a JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Load `path` (or the desk preset when `None`), apply overrides, validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
            }
            None => serde_json::to_value(Self::desk())?,
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg = Self::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Every section, then the constraints between sections.
    pub fn validate(&self) -> Result<()> {
        let (w, g, t) = (&self.world, &self.model.geometry, &self.model.texture);
        w.validate()?;
        g.validate()?;
        t.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.eval.validate()?;
        if g.n_parts != w.n_parts {
            return Err(Error::config("model.geometry.n_parts", format!("{} differs from world.n_parts {}", g.n_parts, w.n_parts)));
        }
        if t.n_parts != w.n_parts {
            return Err(Error::config("model.texture.n_parts", format!("{} differs from world.n_parts {}", t.n_parts, w.n_parts)));
        }
        if t.atlas_size != w.atlas_size {
            return Err(Error::config(
                "model.texture.atlas_size",
                format!("{} differs from world.atlas_size {}", t.atlas_size, w.atlas_size),
            ));
        }
        if g.stickman_channels != STICKMAN_CHANNELS {
            return Err(Error::config("model.geometry.stickman_channels", format!("must be {STICKMAN_CHANNELS}")));
        }
        let m = g.size_multiple();
        if w.image_size % m != 0 {
            return Err(Error::config("world.image_size", format!("{} is not a multiple of {m}", w.image_size)));
        }
        let tr = &self.train;
        let pool = w.frames_per_person.saturating_sub(tr.validation_frames);
        let need = tr.sources + tr.batch_init_geometry.max(tr.batch_init_texture).max(tr.batch_multivideo);
        if pool < need {
            return Err(Error::config(
                "train.validation_frames",
                format!("leaves {pool} training frames per person, batches need {need}"),
            ));
        }
        if w.frames_per_person < self.finetune.sources + self.eval.held_out {
            return Err(Error::config(
                "eval.held_out",
                format!(
                    "{} plus finetune.sources {} exceeds world.frames_per_person {}",
                    self.eval.held_out, self.finetune.sources, w.frames_per_person
                ),
            ));
        }
        if self.finetune.batch > self.finetune.sources {
            return Err(Error::config("finetune.batch", "exceeds finetune.sources"));
        }
        Ok(())
    }
}

/// Apply `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string. Only existing keys may be set.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("`{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::config(key, "no such configuration key"))?;
    }
    *node = value;
    Ok(())
}
