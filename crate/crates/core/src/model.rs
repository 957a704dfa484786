//! The two generators bundled together, plus batched inference helpers.

use crate::error::{Error, Result};
use crate::geometry::{self, GeometryConfig};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::renderer::render;
use crate::synthworld::derive_seed;
use crate::tensor::Tensor;
use crate::texture::{self, TextureConfig};

/// Targets decoded per graph during inference; bounds peak memory.
const INFER_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub geometry_config: GeometryConfig,
    pub texture_config: TextureConfig,
    pub geometry: ParamStore,
    pub texture: ParamStore,
}

/// Geometry prediction for a batch of target poses.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryPrediction {
    /// `[k, 2n, H, W]`
    pub uv: Tensor,
    /// `[k, n+1, H, W]`, softmax-normalized.
    pub scores: Tensor,
}

impl Model {
    pub fn init(geometry_config: GeometryConfig, texture_config: TextureConfig, seed: u64) -> Result<Self> {
        if geometry_config.n_parts != texture_config.n_parts {
            return Err(Error::config(
                "texture.n_parts",
                format!("{} differs from geometry.n_parts {}", texture_config.n_parts, geometry_config.n_parts),
            ));
        }
        let geometry = geometry::init_params(&geometry_config, derive_seed(seed, &[1]))?;
        let texture = texture::init_params(&texture_config, derive_seed(seed, &[2]))?;
        Ok(Self { geometry_config, texture_config, geometry, texture })
    }

    /// Verify the stores match the layout implied by the configs.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = Self::init(self.geometry_config.clone(), self.texture_config.clone(), 0)?;
        fresh.geometry.check_layout(&self.geometry)?;
        fresh.texture.check_layout(&self.texture)
    }

    pub fn n_parts(&self) -> usize {
        self.geometry_config.n_parts
    }

    /// Embedding `t` of each source atlas, `[b, C, s, s]`.
    pub fn encode_textures(&self, atlases: &[&Tensor]) -> Result<Tensor> {
        let cfg = &self.texture_config;
        let store = self.texture.clone().frozen();
        let mut g = Graph::new();
        let x = g.constant(texture::pack_atlases(cfg, atlases)?);
        let t = texture::encode(&mut g, &store, cfg, x)?;
        Ok(g.value(t).clone())
    }

    /// Atlas `[n, 3, A, A]` decoded from an embedding `[1, C, s, s]`.
    pub fn decode_texture(&self, embedding: &Tensor) -> Result<Tensor> {
        let cfg = &self.texture_config;
        let store = self.texture.clone().frozen();
        let mut g = Graph::new();
        let t = g.constant(embedding.clone());
        let atlas = texture::decode(&mut g, &store, cfg, t)?;
        Ok(g.value(atlas).clone())
    }

    /// Geometry for every target pose given one source set; `geometry`
    /// overrides the model's own parameters (personalized fine-tunes).
    pub fn predict_geometry(
        &self,
        geometry: Option<&ParamStore>,
        images: &Tensor,
        poses: &Tensor,
        target_poses: &Tensor,
    ) -> Result<GeometryPrediction> {
        let store = geometry.unwrap_or(&self.geometry).clone().frozen();
        let cfg = &self.geometry_config;
        let k = target_poses.shape()[0];
        if k == 0 {
            return Err(Error::Invalid("no target poses".into()));
        }
        let mut uv = Vec::new();
        let mut scores = Vec::new();
        for start in (0..k).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..k.min(start + INFER_CHUNK)).collect();
            let mut g = Graph::new();
            let im = g.constant(images.clone());
            let po = g.constant(poses.clone());
            let src = geometry::encode_sources(&mut g, &store, cfg, im, po)?;
            let tp = g.constant(select(target_poses, &idx)?);
            let out = geometry::forward_with(&mut g, &store, cfg, tp, &src)?;
            let s = geometry::part_scores(&mut g, out.logits);
            uv.push(g.value(out.uv).clone());
            scores.push(g.value(s).clone());
        }
        Ok(GeometryPrediction {
            uv: Tensor::stack(&uv.iter().collect::<Vec<_>>())?,
            scores: Tensor::stack(&scores.iter().collect::<Vec<_>>())?,
        })
    }

    /// Render predicted geometry against an atlas and optional background.
    pub fn render_prediction(&self, atlas: &Tensor, pred: &GeometryPrediction, background: Option<&Tensor>) -> Result<Tensor> {
        let k = pred.uv.shape()[0];
        let bg = match background {
            Some(b) if b.shape()[0] == 1 && k > 1 => Some(Tensor::stack(&vec![b; k])?),
            Some(b) => Some(b.clone()),
            None => None,
        };
        render(atlas, &pred.uv, &pred.scores, bg.as_ref())
    }
}

/// Rows `idx` of the leading axis.
pub fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx.iter().map(|&i| t.batch_item(i)).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// Stack unbatched tensors along a new leading axis.
pub fn stack_new_axis(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!("stack: {:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}
