//! Texture generator: encodes each partial atlas, averages the embeddings and
//! decodes one complete atlas.
//!
//! An atlas `[n, 3, A, A]` enters the network as `[1, 3n, A, A]` with channel
//! index `part * 3 + rgb`. That is exactly the memory layout of the atlas, so
//! the reshape in both directions is a relabelling of the shape and
//! checkpoints depend on it staying that way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::netblocks::{conv_layer, crn, init_resblock, resblock, upsample2x, ConvSpec};
use crate::params::{init_conv, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureConfig {
    pub n_parts: usize,
    pub atlas_size: usize,
    /// Stem width followed by one width per stride-2 stage.
    pub widths: Vec<usize>,
    pub stem_kernel: usize,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    pub head_kernel: usize,
    pub resblocks: usize,
    /// Instance-normalize the encoder and upsampling blocks.
    pub instance_norm: bool,
}

impl TextureConfig {
    pub fn desk(n_parts: usize, atlas_size: usize) -> Self {
        Self {
            n_parts,
            atlas_size,
            widths: vec![16, 32, 64, 128],
            stem_kernel: 3,
            enc_kernel: 3,
            dec_kernel: 3,
            head_kernel: 3,
            resblocks: 3,
            instance_norm: false,
        }
    }

    pub fn paper(n_parts: usize, atlas_size: usize) -> Self {
        Self {
            n_parts,
            atlas_size,
            widths: vec![64, 128, 256, 512],
            stem_kernel: 7,
            enc_kernel: 3,
            dec_kernel: 3,
            head_kernel: 7,
            resblocks: 6,
            instance_norm: true,
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.n_parts
    }

    fn stages(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_parts == 0 {
            return Err(Error::config("texture.n_parts", "must be positive"));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::config("texture.widths", "need a stem width and at least one positive stage width"));
        }
        let m = 1 << self.stages();
        if self.atlas_size == 0 || self.atlas_size % m != 0 {
            return Err(Error::config("texture.atlas_size", format!("{} is not a positive multiple of {m}", self.atlas_size)));
        }
        for (name, k) in [
            ("stem_kernel", self.stem_kernel),
            ("enc_kernel", self.enc_kernel),
            ("dec_kernel", self.dec_kernel),
            ("head_kernel", self.head_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(format!("texture.{name}"), format!("{k} is not odd")));
            }
        }
        Ok(())
    }

    /// Shape of one embedding, batch axis included.
    pub fn embedding_shape(&self) -> [usize; 4] {
        let s = self.atlas_size >> self.stages();
        [1, *self.widths.last().unwrap(), s, s]
    }

    pub fn atlas_shape(&self) -> [usize; 4] {
        [self.n_parts, 3, self.atlas_size, self.atlas_size]
    }

    fn encoder_specs(&self) -> Vec<ConvSpec> {
        let w = &self.widths;
        let mut specs = vec![ConvSpec::new(self.channels(), w[0], self.stem_kernel, 1)];
        for l in 1..w.len() {
            specs.push(ConvSpec::new(w[l - 1], w[l], self.enc_kernel, 2));
        }
        specs
    }

    /// Decoder layers in decoding order, each preceded by a 2x upsample.
    fn decoder_specs(&self) -> Vec<ConvSpec> {
        (1..self.widths.len())
            .rev()
            .map(|l| ConvSpec::new(self.widths[l], self.widths[l - 1], self.dec_kernel, 1))
            .collect()
    }

    fn head_spec(&self) -> ConvSpec {
        ConvSpec::new(self.widths[0], self.channels(), self.head_kernel, 1)
    }

    pub fn param_count(&self) -> usize {
        let m = *self.widths.last().unwrap();
        self.encoder_specs().iter().map(ConvSpec::param_count).sum::<usize>()
            + self.resblocks * 2 * ConvSpec::new(m, m, 3, 1).param_count()
            + self.decoder_specs().iter().map(ConvSpec::param_count).sum::<usize>()
            + self.head_spec().param_count()
    }
}

pub fn init_params<T: Real>(cfg: &TextureConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, s) in cfg.encoder_specs().iter().enumerate() {
        init_conv(&mut store, &mut rng, &format!("tex.enc.{i}"), s.in_channels, s.out_channels, s.kernel);
    }
    let m = *cfg.widths.last().unwrap();
    for r in 0..cfg.resblocks {
        init_resblock(&mut store, &mut rng, &format!("tex.dec.res{r}"), m);
    }
    for (i, s) in cfg.decoder_specs().iter().enumerate() {
        init_conv(&mut store, &mut rng, &format!("tex.dec.{i}"), s.in_channels, s.out_channels, s.kernel);
    }
    let h = cfg.head_spec();
    init_conv(&mut store, &mut rng, "tex.dec.head", h.in_channels, h.out_channels, h.kernel);
    Ok(store)
}

/// Stack partial atlases `[n, 3, A, A]` into the network layout `[b, 3n, A, A]`.
pub fn pack_atlases<T: Real>(cfg: &TextureConfig, atlases: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if atlases.is_empty() {
        return Err(Error::Invalid("texture generator needs at least one input atlas".into()));
    }
    let shape = cfg.atlas_shape();
    let mut data = Vec::with_capacity(atlases.len() * atlases[0].len());
    for a in atlases {
        if a.shape() != shape {
            return Err(Error::Shape(format!("atlas {:?}, expected {:?}", a.shape(), shape)));
        }
        data.extend_from_slice(a.data());
    }
    Tensor::new(&[atlases.len(), cfg.channels(), cfg.atlas_size, cfg.atlas_size], data)
}

/// Inverse of the pack for one atlas: `[1, 3n, A, A]` to `[n, 3, A, A]`.
pub fn unpack_atlas<T: Real>(cfg: &TextureConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    x.reshaped(&cfg.atlas_shape())
}

/// Conv and ReLU, instance-normalized when the config asks for it.
fn block<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TextureConfig, prefix: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
    if cfg.instance_norm {
        return crn(g, store, prefix, x, spec);
    }
    let y = conv_layer(g, store, prefix, x, spec)?;
    Ok(g.relu(y))
}

/// Encode `[b, 3n, A, A]` into `b` embeddings `[b, C, A/2^s, A/2^s]`.
pub fn encode<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TextureConfig, x: Var) -> Result<Var> {
    let shape = g.value(x).shape();
    if shape.len() != 4 || shape[0] == 0 || shape[1..] != [cfg.channels(), cfg.atlas_size, cfg.atlas_size] {
        return Err(Error::Shape(format!("texture input {shape:?} does not match the config")));
    }
    let mut y = x;
    for (i, spec) in cfg.encoder_specs().iter().enumerate() {
        y = block(g, store, cfg, &format!("tex.enc.{i}"), y, spec)?;
    }
    Ok(y)
}

/// Mean embedding of a batch of embeddings.
pub fn merge<T: Real>(g: &mut Graph<T>, t: Var) -> Var {
    g.mean_batch(t)
}

/// Elementwise mean of standalone embeddings.
pub fn merge_embeddings<T: Real>(ts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = ts.first().ok_or_else(|| Error::Invalid("cannot merge an empty set of embeddings".into()))?;
    let mut out = first.clone();
    for t in &ts[1..] {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!("embedding {:?} vs {:?}", t.shape(), first.shape())));
        }
        out.add_assign(t);
    }
    out.scale_inplace(T::one() / T::from_usize(ts.len()).unwrap());
    Ok(out)
}

/// Decode embeddings `[B, C, s, s]` into atlases `[B*n, 3, A, A]` in [0, 1].
pub fn decode<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TextureConfig, t: Var) -> Result<Var> {
    let e = cfg.embedding_shape();
    let shape = g.value(t).shape().to_vec();
    if shape.len() != 4 || shape[0] == 0 || shape[1..] != e[1..] {
        return Err(Error::Shape(format!("embedding {shape:?}, expected [B, {}, {}, {}]", e[1], e[2], e[3])));
    }
    let m = e[1];
    let mut y = t;
    for r in 0..cfg.resblocks {
        y = resblock(g, store, &format!("tex.dec.res{r}"), y, m)?;
    }
    for (i, spec) in cfg.decoder_specs().iter().enumerate() {
        y = upsample2x(g, y);
        y = block(g, store, cfg, &format!("tex.dec.{i}"), y, spec)?;
    }
    let y = conv_layer(g, store, "tex.dec.head", y, &cfg.head_spec())?;
    let y = g.sigmoid(y);
    Ok(g.reshape(y, &[shape[0] * cfg.n_parts, 3, cfg.atlas_size, cfg.atlas_size]))
}

pub struct TextureOutput {
    /// Merged embedding `[1, C, s, s]`.
    pub embedding: Var,
    /// `[n, 3, A, A]`.
    pub atlas: Var,
}

/// Full generator on packed inputs `[b, 3n, A, A]`.
pub fn forward<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &TextureConfig, packed: Var) -> Result<TextureOutput> {
    let t = encode(g, store, cfg, packed)?;
    let embedding = merge(g, t);
    let atlas = decode(g, store, cfg, embedding)?;
    Ok(TextureOutput { embedding, atlas })
}

/// Inference helper: complete atlas from standalone partial atlases.
pub fn generate(store: &ParamStore<f32>, cfg: &TextureConfig, atlases: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(pack_atlases(cfg, atlases)?);
    let out = forward(&mut g, &store.clone().frozen(), cfg, x)?;
    Ok((g.value(out.embedding).clone(), g.value(out.atlas).clone()))
}
