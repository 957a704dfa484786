//! Geometry generator: predicts the UV map and part-score logits for a target
//! pose from a set of source images and their poses.
//!
//! Three encoders share one layout (`widths[0]` stem at full resolution, then
//! one stride-2 level per remaining width): `ei` encodes source images, `ew`
//! encodes poses (sources and target alike) for attention, `ep` encodes the
//! target pose and ends in a residual trunk. At each level the target's `ew`
//! features attend over all source positions; the attended image features are
//! concatenated with the running decoder state, upsampled and convolved. The
//! mask and coordinate branches share the attended features but have their
//! own decoder layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::netblocks::{crn, conv_layer, init_resblock, resblock, upsample2x, ConvSpec};
use crate::params::{init_conv, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Scores scaled by `1/sqrt(C)` and softmax-normalized jointly over
    /// (source, source position) for each target position.
    Softmax,
    /// Unnormalized dot products, `d_a = sum_j a_j (q_j^T q)`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_parts: usize,
    pub stickman_channels: usize,
    /// Stem width followed by one width per fusion level.
    pub widths: Vec<usize>,
    pub stem_kernel: usize,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    pub head_kernel: usize,
    pub resblocks: usize,
    pub attention: AttentionMode,
}

impl GeometryConfig {
    pub fn desk(n_parts: usize, stickman_channels: usize) -> Self {
        Self {
            n_parts,
            stickman_channels,
            widths: vec![16, 32, 64, 64],
            stem_kernel: 3,
            enc_kernel: 3,
            dec_kernel: 3,
            head_kernel: 3,
            resblocks: 4,
            attention: AttentionMode::Softmax,
        }
    }

    pub fn paper(n_parts: usize, stickman_channels: usize) -> Self {
        Self {
            n_parts,
            stickman_channels,
            widths: vec![32, 64, 128, 128, 128],
            stem_kernel: 7,
            enc_kernel: 3,
            dec_kernel: 5,
            head_kernel: 7,
            resblocks: 10,
            attention: AttentionMode::Softmax,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_parts == 0 {
            return Err(Error::config("geometry.n_parts", "must be positive"));
        }
        if self.stickman_channels == 0 {
            return Err(Error::config("geometry.stickman_channels", "must be positive"));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::config("geometry.widths", "need a stem width and at least one positive level width"));
        }
        for (name, k) in [
            ("stem_kernel", self.stem_kernel),
            ("enc_kernel", self.enc_kernel),
            ("dec_kernel", self.dec_kernel),
            ("head_kernel", self.head_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(format!("geometry.{name}"), format!("{k} is not odd")));
            }
        }
        Ok(())
    }

    /// Input side length must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels()
    }

    fn encoder_specs(&self, in_ch: usize) -> Vec<ConvSpec> {
        let w = &self.widths;
        let mut specs = vec![ConvSpec::new(in_ch, w[0], self.stem_kernel, 1)];
        for l in 1..w.len() {
            specs.push(ConvSpec::new(w[l - 1], w[l], self.enc_kernel, 2));
        }
        specs
    }

    /// Decoder layer for level `l` (1-based), in decoding order M..1.
    fn decoder_spec(&self, l: usize) -> ConvSpec {
        ConvSpec::new(2 * self.widths[l], self.widths[l - 1], self.dec_kernel, 1)
    }

    fn head_spec(&self, out: usize) -> ConvSpec {
        ConvSpec::new(self.widths[0], out, self.head_kernel, 1)
    }

    pub fn param_count(&self) -> usize {
        let enc = |c| self.encoder_specs(c).iter().map(|s| s.param_count()).sum::<usize>();
        let m = *self.widths.last().unwrap();
        let trunk = self.resblocks * 2 * ConvSpec::new(m, m, 3, 1).param_count();
        let dec: usize = (1..=self.levels()).map(|l| self.decoder_spec(l).param_count()).sum();
        enc(3)
            + 2 * enc(self.stickman_channels)
            + trunk
            + 2 * dec
            + self.head_spec(self.n_parts + 1).param_count()
            + self.head_spec(2 * self.n_parts).param_count()
    }
}

/// Fresh parameters with Kaiming-uniform weights.
pub fn init_params<T: Real>(cfg: &GeometryConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (prefix, in_ch) in [("ei", 3), ("ew", cfg.stickman_channels), ("ep", cfg.stickman_channels)] {
        for (i, s) in cfg.encoder_specs(in_ch).iter().enumerate() {
            init_conv(&mut store, &mut rng, &format!("geo.{prefix}.{i}"), s.in_channels, s.out_channels, s.kernel);
        }
    }
    let m = *cfg.widths.last().unwrap();
    for r in 0..cfg.resblocks {
        init_resblock(&mut store, &mut rng, &format!("geo.ep.res{r}"), m);
    }
    for (branch, out) in [("mask", cfg.n_parts + 1), ("coord", 2 * cfg.n_parts)] {
        for l in (1..=cfg.levels()).rev() {
            let s = cfg.decoder_spec(l);
            init_conv(&mut store, &mut rng, &format!("geo.{branch}.dec{l}"), s.in_channels, s.out_channels, s.kernel);
        }
        let h = cfg.head_spec(out);
        init_conv(&mut store, &mut rng, &format!("geo.{branch}.head"), h.in_channels, h.out_channels, h.kernel);
    }
    Ok(store)
}

/// Encoder outputs at levels 1..=M (the stem output is not fused).
fn encode<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &GeometryConfig,
    prefix: &str,
    x: Var,
) -> Result<Vec<Var>> {
    let (_, c, h, w) = g.value(x).dims4();
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!("input {h}x{w} is not divisible by {m}")));
    }
    let mut y = x;
    let mut levels = Vec::with_capacity(cfg.levels());
    for (i, spec) in cfg.encoder_specs(c).iter().enumerate() {
        y = crn(g, store, &format!("geo.{prefix}.{i}"), y, spec)?;
        if i > 0 {
            levels.push(y);
        }
    }
    Ok(levels)
}

/// Source-side pyramids `a_j^l` (images) and `q_j^l` (poses), batched over `j`.
pub struct SourcePyramids {
    pub a: Vec<Var>,
    pub q: Vec<Var>,
}

pub fn encode_sources<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &GeometryConfig,
    images: Var,
    poses: Var,
) -> Result<SourcePyramids> {
    let (bi, ci, _, _) = g.value(images).dims4();
    let (bp, cp, _, _) = g.value(poses).dims4();
    if bi == 0 || bi != bp || ci != 3 || cp != cfg.stickman_channels {
        return Err(Error::Shape(format!(
            "sources: images {:?} and poses {:?} do not form a source set",
            g.value(images).shape(),
            g.value(poses).shape()
        )));
    }
    Ok(SourcePyramids { a: encode(g, store, cfg, "ei", images)?, q: encode(g, store, cfg, "ew", poses)? })
}

pub struct GeometryOutput {
    /// `[B, 2n, H, W]` in [0, 1].
    pub uv: Var,
    /// `[B, n+1, H, W]` raw logits.
    pub logits: Var,
}

/// Decode targets against pre-encoded sources; the source pyramids are shared
/// by every target in the batch.
pub fn forward_with<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &GeometryConfig,
    target_pose: Var,
    src: &SourcePyramids,
) -> Result<GeometryOutput> {
    let q_t = encode(g, store, cfg, "ew", target_pose)?;
    let p_levels = encode(g, store, cfg, "ep", target_pose)?;
    let mut d_p = *p_levels.last().unwrap();
    let m = *cfg.widths.last().unwrap();
    for r in 0..cfg.resblocks {
        d_p = resblock(g, store, &format!("geo.ep.res{r}"), d_p, m)?;
    }
    let mut d_a = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        d_a.push(attention_fuse(g, src.q[l], q_t[l], src.a[l], cfg.attention)?);
    }
    let mut heads = Vec::with_capacity(2);
    for (branch, out) in [("mask", cfg.n_parts + 1), ("coord", 2 * cfg.n_parts)] {
        let mut state = d_p;
        for l in (1..=cfg.levels()).rev() {
            let x = g.concat_channels(&[d_a[l - 1], state]);
            let x = upsample2x(g, x);
            state = crn(g, store, &format!("geo.{branch}.dec{l}"), x, &cfg.decoder_spec(l))?;
        }
        heads.push(conv_layer(g, store, &format!("geo.{branch}.head"), state, &cfg.head_spec(out))?);
    }
    let uv = g.sigmoid(heads[1]);
    Ok(GeometryOutput { uv, logits: heads[0] })
}

pub fn forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &GeometryConfig,
    target_pose: Var,
    images: Var,
    poses: Var,
) -> Result<GeometryOutput> {
    let src = encode_sources(g, store, cfg, images, poses)?;
    forward_with(g, store, cfg, target_pose, &src)
}

/// Channelwise softmax of the mask logits.
pub fn part_scores<T: Real>(g: &mut Graph<T>, logits: Var) -> Var {
    g.softmax_channels(logits)
}

// ----- attention -----

/// Attention matrix for one target: `[b*N, N]`, row `j*N + m` holds the weight
/// of source `j` position `m` for each target position.
fn attention_matrix<T: Real>(qs: &[T], qt: &[T], b: usize, c: usize, n: usize, mode: AttentionMode) -> Vec<T> {
    let scale = match mode {
        AttentionMode::Softmax => T::one() / T::from_usize(c).unwrap().sqrt(),
        AttentionMode::Raw => T::one(),
    };
    let mut w = vec![T::zero(); b * n * n];
    for j in 0..b {
        T::gemm(n, c, n, scale, &qs[j * c * n..(j + 1) * c * n], true, qt, false, T::zero(), &mut w[j * n * n..(j + 1) * n * n]);
    }
    if mode == AttentionMode::Softmax {
        let mut col_max = vec![T::neg_infinity(); n];
        for row in w.chunks(n) {
            for (m, &v) in col_max.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        let mut col_sum = vec![T::zero(); n];
        for row in w.chunks_mut(n) {
            for (v, m) in row.iter_mut().zip(&col_max) {
                *v = *v - *m;
            }
            T::exp_slice(row);
            for (s, v) in col_sum.iter_mut().zip(row.iter()) {
                *s += *v;
            }
        }
        for s in col_sum.iter_mut() {
            *s = T::one() / *s;
        }
        // Weights this small only matter as subnormal operands, which are
        // very slow on x86; they are dropped.
        let tiny = T::lit(1e-20);
        for row in w.chunks_mut(n) {
            for (v, s) in row.iter_mut().zip(&col_sum) {
                let x = *v * *s;
                *v = if x < tiny { T::zero() } else { x };
            }
        }
    }
    w
}

/// Attention weights for every target, `[B, b*N, N]`.
pub fn attention_weights<T: Real>(q_src: &Tensor<T>, q_tgt: &Tensor<T>, mode: AttentionMode) -> Result<Tensor<T>> {
    let (b, c, h, w) = q_src.dims4();
    let (bt, ct, ht, wt) = q_tgt.dims4();
    if (c, h, w) != (ct, ht, wt) {
        return Err(Error::Shape(format!("attention keys {:?} vs {:?}", q_src.shape(), q_tgt.shape())));
    }
    let n = h * w;
    let mut out = Vec::with_capacity(bt * b * n * n);
    for t in 0..bt {
        out.extend(attention_matrix(q_src.data(), &q_tgt.data()[t * c * n..(t + 1) * c * n], b, c, n, mode));
    }
    Tensor::new(&[bt, b * n, n], out)
}

/// Fuse source features `a_src [b,C,H,W]` for targets `q_tgt [B,C,H,W]` using
/// source keys `q_src [b,C,H,W]`. Output `[B,C,H,W]`.
pub fn attention_fuse<T: Real>(
    g: &mut Graph<T>,
    q_src: Var,
    q_tgt: Var,
    a_src: Var,
    mode: AttentionMode,
) -> Result<Var> {
    let (b, c, h, w) = g.value(q_src).dims4();
    let (bt, ct, ht, wt) = g.value(q_tgt).dims4();
    let (ba, ca, ha, wa) = g.value(a_src).dims4();
    if (c, h, w) != (ct, ht, wt) || (ba, ha, wa) != (b, h, w) {
        return Err(Error::Shape(format!(
            "attention shapes: keys {:?}, query {:?}, values {:?}",
            g.value(q_src).shape(),
            g.value(q_tgt).shape(),
            g.value(a_src).shape()
        )));
    }
    let n = h * w;
    let qs = g.value(q_src).data();
    let qt = g.value(q_tgt).data();
    let av = g.value(a_src).data();
    let mut weights = Vec::with_capacity(bt);
    let mut out = vec![T::zero(); bt * ca * n];
    for t in 0..bt {
        let wm = attention_matrix(qs, &qt[t * c * n..(t + 1) * c * n], b, c, n, mode);
        let o = &mut out[t * ca * n..(t + 1) * ca * n];
        for j in 0..b {
            T::gemm(ca, n, n, T::one(), &av[j * ca * n..(j + 1) * ca * n], false, &wm[j * n * n..(j + 1) * n * n], false, T::one(), o);
        }
        weights.push(wm);
    }
    let value = Tensor::new(&[bt, ca, h, w], out)?;
    Ok(g.custom(&[q_src, q_tgt, a_src], value, move |ctx| {
        let scale = match mode {
            AttentionMode::Softmax => T::one() / T::from_usize(c).unwrap().sqrt(),
            AttentionMode::Raw => T::one(),
        };
        let qs = ctx.inputs[0].data();
        let qt = ctx.inputs[1].data();
        let av = ctx.inputs[2].data();
        let go = ctx.grad.data();
        let mut d_qs = vec![T::zero(); qs.len()];
        let mut d_qt = vec![T::zero(); qt.len()];
        let mut d_av = vec![T::zero(); av.len()];
        let mut dw = vec![T::zero(); b * n * n];
        for (t, wm) in weights.iter().enumerate() {
            let g_t = &go[t * ca * n..(t + 1) * ca * n];
            for j in 0..b {
                let a_j = &av[j * ca * n..(j + 1) * ca * n];
                let w_j = &wm[j * n * n..(j + 1) * n * n];
                T::gemm(n, ca, n, T::one(), a_j, true, g_t, false, T::zero(), &mut dw[j * n * n..(j + 1) * n * n]);
                if ctx.needs[2] {
                    T::gemm(ca, n, n, T::one(), g_t, false, w_j, true, T::one(), &mut d_av[j * ca * n..(j + 1) * ca * n]);
                }
            }
            if !(ctx.needs[0] || ctx.needs[1]) {
                continue;
            }
            // gradient w.r.t. the pre-softmax scores, in place
            if mode == AttentionMode::Softmax {
                let mut col = vec![T::zero(); n];
                for (wr, dr) in wm.chunks(n).zip(dw.chunks(n)) {
                    for p in 0..n {
                        col[p] += wr[p] * dr[p];
                    }
                }
                for (wr, dr) in wm.chunks(n).zip(dw.chunks_mut(n)) {
                    for p in 0..n {
                        dr[p] = wr[p] * (dr[p] - col[p]);
                    }
                }
            }
            let qt_t = &qt[t * c * n..(t + 1) * c * n];
            for j in 0..b {
                let ds_j = &dw[j * n * n..(j + 1) * n * n];
                let qs_j = &qs[j * c * n..(j + 1) * c * n];
                if ctx.needs[1] {
                    T::gemm(c, n, n, scale, qs_j, false, ds_j, false, T::one(), &mut d_qt[t * c * n..(t + 1) * c * n]);
                }
                if ctx.needs[0] {
                    T::gemm(c, n, n, scale, qt_t, false, ds_j, true, T::one(), &mut d_qs[j * c * n..(j + 1) * c * n]);
                }
            }
        }
        vec![
            ctx.needs[0].then(|| Tensor::new(ctx.inputs[0].shape(), d_qs).unwrap()),
            ctx.needs[1].then(|| Tensor::new(ctx.inputs[1].shape(), d_qt).unwrap()),
            ctx.needs[2].then(|| Tensor::new(ctx.inputs[2].shape(), d_av).unwrap()),
        ]
    }))
}
