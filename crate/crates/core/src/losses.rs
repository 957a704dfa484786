//! Training objectives.
//!
//! Every term is a fused graph node with a hand-written backward. L1 terms are
//! mean-normalized so the default weights do not depend on resolution, and
//! every cross-entropy clamps probabilities at `PROB_CLAMP`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::netblocks::{conv2d_forward, conv_layer, ConvSpec};
use crate::params::{init_conv, ParamStore};
use crate::synthworld::PartialTexture;
use crate::tensor::{Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub image: f64,
    pub mask: f64,
    pub reg_texture: f64,
    pub reg_coord: f64,
    pub reg_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { image: 1.0, mask: 1.0, reg_texture: 1.0, reg_coord: 20.0, reg_mask: 0.8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image", self.image),
            ("mask", self.mask),
            ("reg_texture", self.reg_texture),
            ("reg_coord", self.reg_coord),
            ("reg_mask", self.reg_mask),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss_weights.{name}"), format!("{v} is not a finite nonnegative number")));
            }
        }
        Ok(())
    }

    /// The ablation without regularizers.
    pub fn without_regularizers(&self) -> Self {
        Self { reg_texture: 0.0, reg_coord: 0.0, reg_mask: 0.0, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Coord,
    Segmentation,
    Texture,
    Image,
    Mask,
    RegTexture,
    RegCoord,
    RegMask,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Coord => "coord",
            Term::Segmentation => "segmentation",
            Term::Texture => "texture",
            Term::Image => "image",
            Term::Mask => "mask",
            Term::RegTexture => "reg_texture",
            Term::RegCoord => "reg_coord",
            Term::RegMask => "reg_mask",
        }
    }

    /// Initialization terms are summed unweighted.
    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Term::Coord | Term::Segmentation | Term::Texture => 1.0,
            Term::Image => w.image,
            Term::Mask => w.mask,
            Term::RegTexture => w.reg_texture,
            Term::RegCoord => w.reg_coord,
            Term::RegMask => w.reg_mask,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Unweighted term values.
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub total: f64,
}

/// Weighted sum of scalar terms plus a report of the unweighted values.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &[(Term, Var)], w: &LossWeights) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let mut weighted = Vec::with_capacity(terms.len());
    for &(term, v) in terms {
        let value = g.value(v).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss term {}", term.name())));
        }
        let lambda = term.weight(w);
        report.total += lambda * value;
        report.terms.insert(term.name().to_string(), value);
        report.weights.insert(term.name().to_string(), lambda);
        weighted.push((v, T::lit(lambda)));
    }
    Ok((g.weighted_sum(&weighted), report))
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `mean |a - b|` against a constant.
pub fn l1_mean<T: Real>(g: &mut Graph<T>, a: Var, b: &Tensor<T>) -> Var {
    let x = g.value(a);
    assert_eq!(x.shape(), b.shape(), "l1_mean shape mismatch");
    let inv = T::one() / T::from_usize(x.len().max(1)).unwrap();
    let value = x.data().iter().zip(b.data()).map(|(&p, &q)| (p - q).abs()).sum::<T>() * inv;
    let b = b.clone();
    g.custom(&[a], Tensor::scalar(value), move |ctx| {
        let k = ctx.grad.item() * inv;
        vec![Some(ctx.inputs[0].zip_map(&b, |p, q| k * sign(p - q)))]
    })
}

// ----- geometry targets -----

/// Pseudo ground truth for geometry terms, shared by several losses.
pub struct GeometryTargets<T: Real> {
    /// `[B, 2n, H, W]`
    pub uv: Tensor<T>,
    /// `[B, n+1, H, W]`, background last.
    pub scores: Tensor<T>,
    /// `[B, 1, H, W]` foreground mask.
    pub mask: Tensor<T>,
    labels: Vec<usize>,
    foreground: Vec<T>,
    coord_denom: T,
}

impl<T: Real> GeometryTargets<T> {
    pub fn new(uv: Tensor<T>, scores: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        let (b, k, h, w) = scores.dims4();
        let n = k.checked_sub(1).filter(|&n| n > 0).ok_or_else(|| Error::Shape("scores need parts and a background".into()))?;
        if uv.shape() != [b, 2 * n, h, w] || mask.shape() != [b, 1, h, w] {
            return Err(Error::Shape(format!(
                "targets: uv {:?}, scores {:?}, mask {:?} do not agree",
                uv.shape(),
                scores.shape(),
                mask.shape()
            )));
        }
        let hw = h * w;
        let s = scores.data();
        let mut labels = Vec::with_capacity(b * hw);
        let mut foreground = Vec::with_capacity(b * hw);
        let mut coord_denom = T::zero();
        for bi in 0..b {
            for p in 0..hw {
                let at = |c: usize| s[(bi * k + c) * hw + p];
                let mut best = 0;
                for c in 1..k {
                    if at(c) > at(best) {
                        best = c;
                    }
                }
                labels.push(best);
                foreground.push(T::one() - at(n));
                for c in 0..n {
                    coord_denom += at(c);
                }
            }
        }
        Ok(Self { uv, scores, mask, labels, foreground, coord_denom: coord_denom * T::lit(2.0) })
    }

    /// Concatenate per-frame targets `[1, ...]` along the batch axis.
    pub fn stack(frames: &[(&Tensor<T>, &Tensor<T>, &Tensor<T>)]) -> Result<Self> {
        let uv: Vec<&Tensor<T>> = frames.iter().map(|f| f.0).collect();
        let sc: Vec<&Tensor<T>> = frames.iter().map(|f| f.1).collect();
        let m: Vec<&Tensor<T>> = frames.iter().map(|f| f.2).collect();
        Self::new(Tensor::stack(&uv)?, Tensor::stack(&sc)?, Tensor::stack(&m)?)
    }

    pub fn parts(&self) -> usize {
        self.scores.shape()[1] - 1
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// `sum_k ||w^k (C^k - C*^k)||_1` over both UV channels of every part,
/// divided by `denom`. Gradients reach `uv` and, if it is a variable, `w`.
fn weighted_uv_l1<T: Real>(g: &mut Graph<T>, uv: Var, weights: Var, t: &GeometryTargets<T>) -> Result<Var> {
    let c = g.value(uv);
    let s = g.value(weights);
    if c.shape() != t.uv.shape() || s.shape() != t.scores.shape() {
        return Err(Error::Shape(format!("uv {:?} / scores {:?} vs targets", c.shape(), s.shape())));
    }
    if t.coord_denom <= T::zero() {
        return Ok(zero(g));
    }
    let (b, k, h, w) = s.dims4();
    let n = k - 1;
    let hw = h * w;
    let inv = T::one() / t.coord_denom;
    let mut value = T::zero();
    for bi in 0..b {
        for part in 0..n {
            let sw = &s.data()[(bi * k + part) * hw..][..hw];
            for ch in 0..2 {
                let off = (bi * 2 * n + 2 * part + ch) * hw;
                for p in 0..hw {
                    value += sw[p] * (c.data()[off + p] - t.uv.data()[off + p]).abs();
                }
            }
        }
    }
    let target = t.uv.clone();
    Ok(g.custom(&[uv, weights], Tensor::scalar(value * inv), move |ctx| {
        let gk = ctx.grad.item() * inv;
        let (c, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut gc = vec![T::zero(); c.len()];
        let mut gs = vec![T::zero(); s.len()];
        for bi in 0..b {
            for part in 0..n {
                let soff = (bi * k + part) * hw;
                for ch in 0..2 {
                    let off = (bi * 2 * n + 2 * part + ch) * hw;
                    for p in 0..hw {
                        let d = c[off + p] - target.data()[off + p];
                        gc[off + p] = gk * s[soff + p] * sign(d);
                        gs[soff + p] += gk * d.abs();
                    }
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape(), gc).unwrap()),
            ctx.needs[1].then(|| Tensor::new(ctx.inputs[1].shape(), gs).unwrap()),
        ]
    }))
}

/// UV loss under the pseudo ground-truth part masks.
pub fn coord_loss<T: Real>(g: &mut Graph<T>, uv: Var, t: &GeometryTargets<T>) -> Result<Var> {
    let w = g.constant(t.scores.clone());
    weighted_uv_l1(g, uv, w, t)
}

/// UV regularizer under the predicted soft part masks; shares the
/// normalization of `coord_loss` so both live on the same scale. The masks
/// act as fixed weights: letting the gradient reach them rewards shrinking
/// every part toward background, and thin limbs vanish first.
pub fn reg_coord_loss<T: Real>(g: &mut Graph<T>, uv: Var, scores: Var, t: &GeometryTargets<T>) -> Result<Var> {
    let w = g.constant(g.value(scores).clone());
    weighted_uv_l1(g, uv, w, t)
}

/// `sum_p w_p * -ln(clamp(S[label_p]))  /  sum_p w_p` over probabilities.
fn weighted_ce<T: Real>(g: &mut Graph<T>, scores: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
    let s = g.value(scores);
    let (b, k, h, w) = s.dims4();
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(Error::Shape(format!("scores {:?} vs {} labels", s.shape(), labels.len())));
    }
    let total_w: T = weights.iter().copied().sum();
    if total_w <= T::zero() {
        return Ok(zero(g));
    }
    let eps = T::lit(PROB_CLAMP);
    let inv = T::one() / total_w;
    let idx = |i: usize| (i / hw * k + labels[i]) * hw + i % hw;
    let mut value = T::zero();
    for i in 0..labels.len() {
        value -= weights[i] * s.data()[idx(i)].max(eps).ln();
    }
    let labels = labels.to_vec();
    let weights = weights.to_vec();
    Ok(g.custom(&[scores], Tensor::scalar(value * inv), move |ctx| {
        let gk = ctx.grad.item() * inv;
        let s = ctx.inputs[0].data();
        let mut out = vec![T::zero(); s.len()];
        for i in 0..labels.len() {
            let j = (i / hw * k + labels[i]) * hw + i % hw;
            if s[j] > eps {
                out[j] = -gk * weights[i] / s[j];
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), out).unwrap())]
    }))
}

/// Pixel-mean cross-entropy of part probabilities against the argmax labels.
pub fn segmentation_loss<T: Real>(g: &mut Graph<T>, scores: Var, t: &GeometryTargets<T>) -> Result<Var> {
    let ones = vec![T::one(); t.labels.len()];
    weighted_ce(g, scores, &t.labels, &ones)
}

/// Cross-entropy restricted to pseudo ground-truth foreground pixels.
pub fn reg_mask_loss<T: Real>(g: &mut Graph<T>, scores: Var, t: &GeometryTargets<T>) -> Result<Var> {
    weighted_ce(g, scores, &t.labels, &t.foreground)
}

/// Binary cross-entropy between the background score and `1 - m`.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, scores: Var, mask: &Tensor<T>) -> Result<Var> {
    let s = g.value(scores);
    let (b, k, h, w) = s.dims4();
    if mask.shape() != [b, 1, h, w] {
        return Err(Error::Shape(format!("mask {:?} vs scores {:?}", mask.shape(), s.shape())));
    }
    let hw = h * w;
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let inv = T::one() / T::from_usize(b * hw).unwrap();
    let bg = |bi: usize, p: usize| (bi * k + k - 1) * hw + p;
    let mut value = T::zero();
    for bi in 0..b {
        for p in 0..hw {
            let q = s.data()[bg(bi, p)].max(lo).min(hi);
            let y = T::one() - mask.data()[bi * hw + p];
            value -= y * q.ln() + (T::one() - y) * (T::one() - q).ln();
        }
    }
    let mask = mask.clone();
    Ok(g.custom(&[scores], Tensor::scalar(value * inv), move |ctx| {
        let gk = ctx.grad.item() * inv;
        let s = ctx.inputs[0].data();
        let mut out = vec![T::zero(); s.len()];
        for bi in 0..b {
            for p in 0..hw {
                let j = (bi * k + k - 1) * hw + p;
                let q = s[j];
                if q > lo && q < hi {
                    let y = T::one() - mask.data()[bi * hw + p];
                    out[j] = gk * ((T::one() - y) / (T::one() - q) - y / q);
                }
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), out).unwrap())]
    }))
}

// ----- texture -----

/// Partial atlases `[b, n, 3, A, A]` with visibility `[b, n, A, A]`.
pub struct TextureTargets<T: Real> {
    pub atlases: Tensor<T>,
    pub visibility: Tensor<T>,
}

impl<T: Real> TextureTargets<T> {
    pub fn new(atlases: Tensor<T>, visibility: Tensor<T>) -> Result<Self> {
        let s = atlases.shape();
        if s.len() != 5 || s[2] != 3 || visibility.shape() != [s[0], s[1], s[3], s[4]] {
            return Err(Error::Shape(format!("atlases {:?} / visibility {:?}", s, visibility.shape())));
        }
        Ok(Self { atlases, visibility })
    }

    pub fn from_partials(partials: &[&PartialTexture]) -> Result<Self> {
        let first = partials.first().ok_or_else(|| Error::Invalid("no partial textures".into()))?;
        let a = first.atlas.shape().to_vec();
        let mut atlases = Vec::new();
        let mut vis = Vec::new();
        for p in partials {
            if p.atlas.shape() != a.as_slice() {
                return Err(Error::Shape(format!("partial atlas {:?} vs {:?}", p.atlas.shape(), a)));
            }
            atlases.extend(p.atlas.data().iter().map(|&v| T::lit(v as f64)));
            vis.extend(p.visibility.data().iter().map(|&v| T::lit(v as f64)));
        }
        let b = partials.len();
        Self::new(
            Tensor::new(&[b, a[0], 3, a[2], a[3]], atlases)?,
            Tensor::new(&[b, a[0], a[2], a[3]], vis)?,
        )
    }

    pub fn visible_texels(&self) -> T {
        self.visibility.sum()
    }
}

/// `sum_j ||sigma_j (T - T_j)||_1 / (3 sum_j |sigma_j|)`. The flag is set when
/// no texel is visible, in which case the loss is zero.
pub fn texture_loss<T: Real>(g: &mut Graph<T>, atlas: Var, t: &TextureTargets<T>) -> Result<(Var, bool)> {
    let a = g.value(atlas);
    let s = t.atlases.shape();
    if a.shape() != &s[1..] {
        return Err(Error::Shape(format!("atlas {:?} vs partials {:?}", a.shape(), s)));
    }
    let count = t.visible_texels();
    if count <= T::zero() {
        return Ok((zero(g), true));
    }
    let (b, n, plane) = (s[0], s[1], s[3] * s[4]);
    let inv = T::one() / (T::lit(3.0) * count);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); a.len()];
    for j in 0..b {
        for k in 0..n {
            let sig = &t.visibility.data()[(j * n + k) * plane..][..plane];
            for c in 0..3 {
                let off = (k * 3 + c) * plane;
                let tj = &t.atlases.data()[j * n * 3 * plane + off..][..plane];
                for p in 0..plane {
                    let d = a.data()[off + p] - tj[p];
                    value += sig[p] * d.abs();
                    grad[off + p] += sig[p] * sign(d);
                }
            }
        }
    }
    let grad = Tensor::new(a.shape(), grad)?;
    let v = g.custom(&[atlas], Tensor::scalar(value * inv), move |ctx| {
        let k = ctx.grad.item() * inv;
        vec![Some(grad.map(|v| v * k))]
    });
    Ok((v, false))
}

// ----- perceptual -----

/// Frozen random-weight conv pyramid used as the perceptual feature space.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Real = f32> {
    store: ParamStore<T>,
    specs: Vec<ConvSpec>,
    pub level_weights: Vec<f64>,
    pub seed: u64,
}

pub const FEATURE_CHANNELS: [usize; 4] = [8, 16, 32, 64];

impl<T: Real> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut specs = Vec::new();
        let mut c = 3;
        for (l, &o) in FEATURE_CHANNELS.iter().enumerate() {
            init_conv(&mut store, &mut rng, &format!("fx.{l}"), c, o, 3);
            specs.push(ConvSpec::new(c, o, 3, 2));
            c = o;
        }
        Self { store: store.frozen(), specs, level_weights: vec![1.0; FEATURE_CHANNELS.len()], seed }
    }

    pub fn levels(&self) -> usize {
        self.specs.len()
    }

    /// Features of a constant image batch.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.specs.len());
        let mut y = x.clone();
        for (l, spec) in self.specs.iter().enumerate() {
            let w = self.store.get(&format!("fx.{l}.weight")).unwrap();
            let b = self.store.get(&format!("fx.{l}.bias")).unwrap();
            y = conv2d_forward(&y, w, b, spec)?.map(|v| v.max(T::zero()));
            out.push(y.clone());
        }
        Ok(out)
    }

    pub fn features_var(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.specs.len());
        let mut y = x;
        for (l, spec) in self.specs.iter().enumerate() {
            y = conv_layer(g, &self.store, &format!("fx.{l}"), y, spec)?;
            y = g.relu(y);
            out.push(y);
        }
        Ok(out)
    }
}

/// Pixel L1 plus level-weighted feature L1, each mean-normalized. With a mask
/// the target is `m * I*` (foreground reconstruction); without it the full
/// frame is compared.
pub fn image_loss<T: Real>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor<T>,
    rendered: Var,
    target: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let (b, c, h, w) = g.value(rendered).dims4();
    if target.shape() != [b, c, h, w] || c != 3 {
        return Err(Error::Shape(format!("rendered {:?} vs target {:?}", g.value(rendered).shape(), target.shape())));
    }
    let target = match mask {
        Some(m) => {
            if m.shape() != [b, 1, h, w] {
                return Err(Error::Shape(format!("mask {:?}", m.shape())));
            }
            let hw = h * w;
            Tensor::from_fn(target.shape(), |i| target[i] * m[(i / (3 * hw)) * hw + i % hw])
        }
        None => target.clone(),
    };
    let mut terms = vec![(l1_mean(g, rendered, &target), T::one())];
    let tf = fx.features(&target)?;
    let rf = fx.features_var(g, rendered)?;
    for ((r, t), &lw) in rf.into_iter().zip(&tf).zip(&fx.level_weights) {
        terms.push((l1_mean(g, r, t), T::lit(lw)));
    }
    Ok(g.weighted_sum(&terms))
}

/// Test-time objective on the full composited frame: image, mask, coordinate
/// regularizer and mask regularizer. The texture regularizer is not part of it.
pub fn test_loss<T: Real>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor<T>,
    rendered: Var,
    target: &Tensor<T>,
    scores: Var,
    uv: Var,
    t: &GeometryTargets<T>,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let terms = [
        (Term::Image, image_loss(g, fx, rendered, target, None)?),
        (Term::Mask, mask_loss(g, scores, &t.mask)?),
        (Term::RegCoord, reg_coord_loss(g, uv, scores, t)?),
        (Term::RegMask, reg_mask_loss(g, scores, t)?),
    ];
    total_loss(g, &terms, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::{grad_check, random_tensor, GradCheckOptions};

    const N: usize = 3;

    /// Random probability maps `[b, n+1, h, w]`, bounded away from the clamp.
    fn random_scores(b: usize, seed: u64) -> Tensor<f64> {
        let raw = random_tensor(&[b, N + 1, 4, 4], seed).map(|v| 2.0 * v);
        crate::graph::softmax_channels(&raw)
    }

    fn one_hot(b: usize, seed: u64) -> Tensor<f64> {
        let s = random_scores(b, seed);
        let mut out = Tensor::zeros(s.shape());
        for bi in 0..b {
            for p in 0..16 {
                let best = (0..=N).max_by(|&x, &y| s[(bi * 4 + x) * 16 + p].total_cmp(&s[(bi * 4 + y) * 16 + p])).unwrap();
                out[(bi * 4 + best) * 16 + p] = 1.0;
            }
        }
        out
    }

    fn targets(b: usize, seed: u64) -> GeometryTargets<f64> {
        let scores = one_hot(b, seed);
        let mask = Tensor::from_fn(&[b, 1, 4, 4], |i| 1.0 - scores[(i / 16 * 4 + N) * 16 + i % 16]);
        let uv = random_tensor(&[b, 2 * N, 4, 4], seed + 1).map(|v| 0.5 + 0.5 * v);
        GeometryTargets::new(uv, scores, mask).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    // brute-force references, written pixel by pixel

    fn ref_coord(uv: &Tensor<f64>, w: &Tensor<f64>, t: &GeometryTargets<f64>) -> f64 {
        let (b, k, _, _) = w.dims4();
        let (mut num, mut den) = (0.0, 0.0);
        for bi in 0..b {
            for part in 0..k - 1 {
                for y in 0..4 {
                    for x in 0..4 {
                        let p = y * 4 + x;
                        let ws = w[(bi * k + part) * 16 + p];
                        den += 2.0 * t.scores[(bi * k + part) * 16 + p];
                        for ch in 0..2 {
                            let i = (bi * 2 * (k - 1) + 2 * part + ch) * 16 + p;
                            num += ws * (uv[i] - t.uv[i]).abs();
                        }
                    }
                }
            }
        }
        num / den
    }

    fn ref_ce(s: &Tensor<f64>, t: &GeometryTargets<f64>, fg_only: bool) -> f64 {
        let (b, k, _, _) = s.dims4();
        let (mut num, mut den) = (0.0, 0.0);
        for bi in 0..b {
            for p in 0..16 {
                let label = (0..k).find(|&c| t.scores[(bi * k + c) * 16 + p] == 1.0).unwrap();
                let w = if fg_only { 1.0 - t.scores[(bi * k + k - 1) * 16 + p] } else { 1.0 };
                num += -w * s[(bi * k + label) * 16 + p].max(1e-6).ln();
                den += w;
            }
        }
        num / den
    }

    fn ref_bce(s: &Tensor<f64>, m: &Tensor<f64>) -> f64 {
        let (b, k, _, _) = s.dims4();
        let mut acc = 0.0;
        for bi in 0..b {
            for p in 0..16 {
                let q = s[(bi * k + k - 1) * 16 + p].clamp(1e-6, 1.0 - 1e-6);
                let y = 1.0 - m[bi * 16 + p];
                acc -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
            }
        }
        acc / (b * 16) as f64
    }

    #[test]
    fn coord_loss_cases() {
        let t = targets(2, 1);
        let same = eval(|g| {
            let uv = g.constant(t.uv.clone());
            coord_loss(g, uv, &t).unwrap()
        });
        assert_eq!(same, 0.0);
        let uv = random_tensor(&[2, 2 * N, 4, 4], 5);
        let got = eval(|g| {
            let v = g.constant(uv.clone());
            coord_loss(g, v, &t).unwrap()
        });
        assert!((got - ref_coord(&uv, &t.scores, &t)).abs() <= 1e-6);
        // all background: nothing to compare
        let mut bg = Tensor::zeros(&[1, N + 1, 4, 4]);
        bg.data_mut()[N * 16..].iter_mut().for_each(|v| *v = 1.0);
        let tb = GeometryTargets::new(Tensor::zeros(&[1, 2 * N, 4, 4]), bg, Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let v = eval(|g| {
            let v = g.constant(random_tensor(&[1, 2 * N, 4, 4], 6));
            coord_loss(g, v, &tb).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn reg_coord_matches_reference() {
        let t = targets(2, 2);
        let uv = random_tensor(&[2, 2 * N, 4, 4], 7);
        let s = random_scores(2, 8);
        let got = eval(|g| {
            let (a, b) = (g.constant(uv.clone()), g.constant(s.clone()));
            reg_coord_loss(g, a, b, &t).unwrap()
        });
        assert!((got - ref_coord(&uv, &s, &t)).abs() <= 1e-6);
        let zero_case = eval(|g| {
            let (a, b) = (g.constant(t.uv.clone()), g.constant(s.clone()));
            reg_coord_loss(g, a, b, &t).unwrap()
        });
        assert_eq!(zero_case, 0.0);
        // the part scores only weight the regularizer; no gradient reaches them
        let mut g = Graph::new();
        let (a, b) = (g.leaf(uv.clone()), g.leaf(s.clone()));
        let l = reg_coord_loss(&mut g, a, b, &t).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(b).map_or(true, |gs| gs.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cross_entropies_match_reference() {
        let t = targets(2, 3);
        let s = random_scores(2, 9);
        let seg = eval(|g| {
            let v = g.constant(s.clone());
            segmentation_loss(g, v, &t).unwrap()
        });
        assert!((seg - ref_ce(&s, &t, false)).abs() <= 1e-6);
        let rm = eval(|g| {
            let v = g.constant(s.clone());
            reg_mask_loss(g, v, &t).unwrap()
        });
        assert!((rm - ref_ce(&s, &t, true)).abs() <= 1e-6);
        // exact one-hot agreement
        let hit = eval(|g| {
            let v = g.constant(t.scores.clone());
            reg_mask_loss(g, v, &t).unwrap()
        });
        assert!(hit <= 1e-5);
    }

    #[test]
    fn mask_loss_cases() {
        let t = targets(2, 4);
        let s = random_scores(2, 10);
        let got = eval(|g| {
            let v = g.constant(s.clone());
            mask_loss(g, v, &t.mask).unwrap()
        });
        assert!((got - ref_bce(&s, &t.mask)).abs() <= 1e-6);
        let hard = eval(|g| {
            let v = g.constant(t.scores.clone());
            mask_loss(g, v, &t.mask).unwrap()
        });
        assert!(hard <= 1e-5, "{hard}");
        let mut half = Tensor::zeros(&[1, N + 1, 4, 4]);
        half.data_mut()[N * 16..].iter_mut().for_each(|v| *v = 0.5);
        let m = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
        let h = eval(|g| {
            let v = g.constant(half.clone());
            mask_loss(g, v, &m).unwrap()
        });
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn texture_targets(b: usize, seed: u64) -> TextureTargets<f64> {
        let a = random_tensor(&[b, 2, 3, 4, 4], seed).map(|v| v.abs());
        let vis = random_tensor(&[b, 2, 4, 4], seed + 1).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        TextureTargets::new(a, vis).unwrap()
    }

    #[test]
    fn texture_loss_cases() {
        // one input, half of the visible texels off by 0.5
        let atlas = Tensor::from_fn(&[1, 1, 3, 2, 2], |i| i as f64 * 0.1);
        let vis = Tensor::full(&[1, 1, 2, 2], 1.0);
        let t = TextureTargets::new(atlas.clone(), vis).unwrap();
        let mut pred = atlas.reshaped(&[1, 3, 2, 2]).unwrap();
        for c in 0..3 {
            pred[c * 4] += 0.5;
            pred[c * 4 + 3] -= 0.5;
        }
        let (v, empty) = {
            let mut g = Graph::new();
            let p = g.constant(pred);
            let (v, e) = texture_loss(&mut g, p, &t).unwrap();
            (g.value(v).item(), e)
        };
        assert!(!empty && (v - 0.25).abs() < 1e-12, "{v}");

        // agreement on the visible support only
        let t = texture_targets(2, 11);
        let mut agree = t.atlases.batch_item(0).reshaped(&[2, 3, 4, 4]).unwrap();
        for k in 0..2 {
            for c in 0..3 {
                for p in 0..16 {
                    if t.visibility[(2 + k) * 16 + p] == 1.0 {
                        agree[(k * 3 + c) * 16 + p] = t.atlases[((2 + k) * 3 + c) * 16 + p];
                    }
                }
            }
        }
        let single = TextureTargets::new(
            Tensor::stack(&[&t.atlases.batch_item(1)]).unwrap(),
            t.visibility.batch_item(1),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.constant(agree);
        let v = texture_loss(&mut g, p, &single).unwrap().0;
        assert_eq!(g.value(v).item(), 0.0);

        // brute-force reference
        let pred = random_tensor(&[2, 3, 4, 4], 12);
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..2 {
            for k in 0..2 {
                for p in 0..16 {
                    let s = t.visibility[(j * 2 + k) * 16 + p];
                    den += 3.0 * s;
                    for c in 0..3 {
                        num += s * (pred[(k * 3 + c) * 16 + p] - t.atlases[((j * 2 + k) * 3 + c) * 16 + p]).abs();
                    }
                }
            }
        }
        let p = g.constant(pred);
        let v = texture_loss(&mut g, p, &t).unwrap().0;
        let got = g.value(v).item();
        assert!((got - num / den).abs() <= 1e-6);

        let blind = TextureTargets::new(t.atlases.clone(), Tensor::zeros(t.visibility.shape())).unwrap();
        let (v, empty) = texture_loss(&mut g, p, &blind).unwrap();
        assert!(empty);
        assert_eq!(g.value(v).item(), 0.0);
    }

    #[test]
    fn image_loss_cases() {
        let fx = FeatureExtractor::<f64>::new(3);
        let target = random_tensor(&[2, 3, 16, 16], 13).map(|v| v.abs());
        let same = eval(|g| {
            let r = g.constant(target.clone());
            image_loss(g, &fx, r, &target, None).unwrap()
        });
        assert_eq!(same, 0.0);

        // uniform offset: pixel term 0.1, then features through the extractor
        let ones = Tensor::full(&[2, 1, 16, 16], 1.0);
        let shifted = target.map(|v| v + 0.1);
        let got = eval(|g| {
            let r = g.constant(shifted.clone());
            image_loss(g, &fx, r, &target, Some(&ones)).unwrap()
        });
        let pixel = shifted.zip_map(&target, |a, b| (a - b).abs()).mean();
        assert!((pixel - 0.1).abs() < 1e-12);
        let fr = fx.features(&shifted).unwrap();
        let ft = fx.features(&target).unwrap();
        let feat: f64 = fr.iter().zip(&ft).map(|(a, b)| a.zip_map(b, |x, y| (x - y).abs()).mean()).sum();
        assert!((got - pixel - feat).abs() <= 1e-6);

        // the graph path agrees with the constant path
        let mut g = Graph::new();
        let x = g.constant(shifted.clone());
        for (v, t) in fx.features_var(&mut g, x).unwrap().into_iter().zip(&fr) {
            assert!(g.value(v).max_abs_diff(t) < 1e-12);
        }
        assert_eq!(fr.iter().map(|f| f.shape()[1]).collect::<Vec<_>>(), FEATURE_CHANNELS);
        assert_eq!(fr[3].shape(), &[2, 64, 1, 1]);

        // masked target: pixels outside the mask count against black
        let m = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 3 == 0) as u8 as f64);
        let masked = Tensor::from_fn(target.shape(), |i| target[i] * m[(i / 768) * 256 + i % 256]);
        let a = eval(|g| {
            let r = g.constant(masked.clone());
            image_loss(g, &fx, r, &target, Some(&m)).unwrap()
        });
        assert_eq!(a, 0.0);
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::scalar(1.0));
        let terms: Vec<(Term, Var)> =
            [Term::Image, Term::Mask, Term::RegTexture, Term::RegCoord, Term::RegMask].iter().map(|&t| (t, one)).collect();
        let (v, report) = total_loss(&mut g, &terms, &w).unwrap();
        assert!((g.value(v).item() - 23.8).abs() < 1e-12);
        assert!((report.total - 23.8).abs() < 1e-12);
        assert_eq!(report.terms["reg_coord"], 1.0);

        let zero_w = LossWeights { image: 0.0, mask: 0.0, reg_texture: 0.0, reg_coord: 0.0, reg_mask: 0.0 };
        let (v, _) = total_loss(&mut g, &terms, &zero_w).unwrap();
        assert_eq!(g.value(v).item(), 0.0);

        let x = g.constant(Tensor::scalar(0.37));
        let (v, r) = total_loss(&mut g, &[(Term::RegMask, x)], &w).unwrap();
        assert!((g.value(v).item() - 0.8 * 0.37).abs() < 1e-12);
        let sum: f64 = r.terms.iter().map(|(k, v)| r.weights[k] * v).sum();
        assert!((sum - r.total).abs() <= 1e-6);

        let nan = g.constant(Tensor::scalar(f64::NAN));
        match total_loss(&mut g, &[(Term::Image, one), (Term::Mask, nan)], &w).unwrap_err() {
            Error::NonFinite(s) => assert!(s.contains("mask")),
            e => panic!("{e}"),
        }
        let ablated = w.without_regularizers();
        assert_eq!((ablated.reg_coord, ablated.reg_mask, ablated.reg_texture), (0.0, 0.0, 0.0));
        assert!(LossWeights { mask: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn weights_parse_with_defaults() {
        let w: LossWeights = serde_json::from_str(r#"{"reg_coord": 5.0}"#).unwrap();
        assert_eq!(w.reg_coord, 5.0);
        assert_eq!(w.reg_mask, 0.8);
        assert!(serde_json::from_str::<LossWeights>(r#"{"lambda": 1}"#).is_err());
    }

    #[test]
    fn test_loss_is_the_four_term_sum() {
        let fx = FeatureExtractor::<f64>::new(4);
        let t = targets(1, 20);
        let w = LossWeights::default();
        let target = random_tensor(&[1, 3, 4, 4], 21).map(|v| v.abs());
        let rendered = random_tensor(&[1, 3, 4, 4], 22).map(|v| v.abs());
        let s = random_scores(1, 23);
        let uv = random_tensor(&[1, 2 * N, 4, 4], 24);
        let mut g = Graph::new();
        let (r, sv, uvv) = (g.constant(rendered.clone()), g.constant(s.clone()), g.constant(uv.clone()));
        let (total, report) = test_loss(&mut g, &fx, r, &target, sv, uvv, &t, &w).unwrap();
        assert!(!report.terms.contains_key("reg_texture"));
        let img = image_loss(&mut g, &fx, r, &target, None).unwrap();
        let expect = g.value(img).item()
            + ref_bce(&s, &t.mask)
            + 20.0 * ref_coord(&uv, &s, &t)
            + 0.8 * ref_ce(&s, &t, true);
        assert!((g.value(total).item() - expect).abs() <= 1e-6);
        assert!((report.total - expect).abs() <= 1e-6);

        // perfect geometry and image leave only the clamp floor
        let perfect_r = g.constant(target.clone());
        let (ps, pu) = (g.constant(t.scores.clone()), g.constant(t.uv.clone()));
        let (_, rep) = test_loss(&mut g, &fx, perfect_r, &target, ps, pu, &t, &w).unwrap();
        assert!(rep.total <= 1e-5, "{rep:?}");
    }

    fn check(name: &str, tensors: Vec<(String, Tensor<f64>)>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        let opts = GradCheckOptions { step: 1e-6, ..Default::default() };
        let r = grad_check(name, &tensors, opts, f).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = targets(2, 30);
        let tt = texture_targets(2, 31);
        let fx = FeatureExtractor::<f64>::new(5);
        let uv = ("uv".to_string(), random_tensor(&[2, 2 * N, 4, 4], 32));
        let s = ("s".to_string(), random_scores(2, 33));
        check("coord", vec![uv.clone()], |g, v| coord_loss(g, v[0], &t));
        let fixed = s.1.clone();
        check("reg_coord", vec![uv.clone()], |g, v| {
            let w = g.constant(fixed.clone());
            reg_coord_loss(g, v[0], w, &t)
        });
        check("segmentation", vec![s.clone()], |g, v| segmentation_loss(g, v[0], &t));
        check("reg_mask", vec![s.clone()], |g, v| reg_mask_loss(g, v[0], &t));
        check("mask", vec![s.clone()], |g, v| mask_loss(g, v[0], &t.mask));
        check("texture", vec![("a".into(), random_tensor(&[2, 3, 4, 4], 34))], |g, v| {
            Ok(texture_loss(g, v[0], &tt)?.0)
        });
        let target = random_tensor(&[1, 3, 16, 16], 35).map(|v| v.abs());
        let m = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 5 != 0) as u8 as f64);
        check("image", vec![("r".into(), random_tensor(&[1, 3, 16, 16], 36).map(|v| v.abs()))], |g, v| {
            image_loss(g, &fx, v[0], &target, Some(&m))
        });
        // through the softmax, as the segmentation term is used in training
        check("segmentation_logits", vec![("z".into(), random_tensor(&[2, N + 1, 4, 4], 37))], |g, v| {
            let p = g.softmax_channels(v[0]);
            segmentation_loss(g, p, &t)
        });
    }
}
