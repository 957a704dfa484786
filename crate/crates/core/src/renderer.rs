//! Differentiable part-based rendering.
//!
//! Each body part `k` samples its texture `T[k]` through its UV channels
//! `(C[2k], C[2k+1])`; parts are blended by their soft scores and the
//! background is added with the background score:
//!
//! `image = S[n] * B + sum_k S[k] * T[k](C[2k], C[2k+1])`
//!
//! Layouts: atlas `[n, 3, Ht, Wt]`, UV `[batch, 2n, H, W]`, scores
//! `[batch, n+1, H, W]`, background `[1 | batch, 3, H, W]`. UV coordinates use
//! the align-corners convention `x = u * (Wt - 1)` and are clamped to [0, 1].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::netblocks::resize_bilinear;
use crate::tensor::{Real, Tensor};

/// Bilinear tap: texel indices, fractional offsets and d(texel coord)/d(uv).
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    dxdu: T,
    dydv: T,
}

fn axis<T: Real>(coord: T, size: usize) -> (usize, usize, T, T) {
    if size < 2 {
        return (0, 0, T::zero(), T::zero());
    }
    let scale = T::from_usize(size - 1).unwrap();
    let inside = coord >= T::zero() && coord <= T::one();
    let c = coord.max(T::zero()).min(T::one()) * scale;
    let i0 = c.floor().to_usize().unwrap_or(0).min(size - 2);
    let f = c - T::from_usize(i0).unwrap();
    (i0, i0 + 1, f, if inside { scale } else { T::zero() })
}

fn tap<T: Real>(u: T, v: T, h: usize, w: usize) -> Tap<T> {
    let (x0, x1, fx, dxdu) = axis(u, w);
    let (y0, y1, fy, dydv) = axis(v, h);
    Tap { x0, x1, y0, y1, fx, fy, dxdu, dydv }
}

impl<T: Real> Tap<T> {
    #[inline]
    fn sample(&self, plane: &[T], w: usize) -> T {
        let top = plane[self.y0 * w + self.x0] * (T::one() - self.fx) + plane[self.y0 * w + self.x1] * self.fx;
        let bot = plane[self.y1 * w + self.x0] * (T::one() - self.fx) + plane[self.y1 * w + self.x1] * self.fx;
        top * (T::one() - self.fy) + bot * self.fy
    }

    /// (d value / du, d value / dv)
    #[inline]
    fn grad_uv(&self, plane: &[T], w: usize) -> (T, T) {
        let t00 = plane[self.y0 * w + self.x0];
        let t01 = plane[self.y0 * w + self.x1];
        let t10 = plane[self.y1 * w + self.x0];
        let t11 = plane[self.y1 * w + self.x1];
        let dfx = (T::one() - self.fy) * (t01 - t00) + self.fy * (t11 - t10);
        let dfy = (T::one() - self.fx) * (t10 - t00) + self.fx * (t11 - t01);
        (dfx * self.dxdu, dfy * self.dydv)
    }

    #[inline]
    fn scatter(&self, plane: &mut [T], w: usize, g: T) {
        let (fx, fy) = (self.fx, self.fy);
        plane[self.y0 * w + self.x0] += g * (T::one() - fx) * (T::one() - fy);
        plane[self.y0 * w + self.x1] += g * fx * (T::one() - fy);
        plane[self.y1 * w + self.x0] += g * (T::one() - fx) * fy;
        plane[self.y1 * w + self.x1] += g * fx * fy;
    }
}

/// Sample one texture plane `[Ht, Wt]` at `(u, v)`.
pub fn sample_bilinear<T: Real>(plane: &[T], height: usize, width: usize, u: T, v: T) -> T {
    tap(u, v, height, width).sample(plane, width)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderDims {
    pub batch: usize,
    pub parts: usize,
    pub height: usize,
    pub width: usize,
    pub tex_h: usize,
    pub tex_w: usize,
}

impl RenderDims {
    pub fn check<T: Real>(
        atlas: &Tensor<T>,
        uv: &Tensor<T>,
        scores: &Tensor<T>,
        background: Option<&Tensor<T>>,
    ) -> Result<Self> {
        let (n, c, th, tw) = atlas.dims4();
        let (b, cu, h, w) = uv.dims4();
        let (bs, cs, hs, ws) = scores.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("atlas must have 3 colour channels, got {c}")));
        }
        if cu != 2 * n || cs != n + 1 || bs != b || (hs, ws) != (h, w) {
            return Err(Error::Shape(format!(
                "render shapes disagree: atlas {:?}, uv {:?}, scores {:?}",
                atlas.shape(),
                uv.shape(),
                scores.shape()
            )));
        }
        if let Some(bg) = background {
            let (bb, bc, bh, bw) = bg.dims4();
            if !(bb == 1 || bb == b) || bc != 3 || (bh, bw) != (h, w) {
                return Err(Error::Shape(format!("background {:?} incompatible", bg.shape())));
            }
        }
        Ok(Self { batch: b, parts: n, height: h, width: w, tex_h: th, tex_w: tw })
    }
}

/// Per-part renders `R[b, k, c, y, x]`, shape `[batch, n, 3, H, W]`.
pub fn render_parts<T: Real>(atlas: &Tensor<T>, uv: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, th, tw) = atlas.dims4();
    let (b, cu, h, w) = uv.dims4();
    if cu != 2 * n {
        return Err(Error::Shape(format!("uv has {cu} channels for {n} parts")));
    }
    let hw = h * w;
    let tex_plane = th * tw;
    let mut out = vec![T::zero(); b * n * 3 * hw];
    for bi in 0..b {
        for k in 0..n {
            let u = &uv.data()[(bi * 2 * n + 2 * k) * hw..][..hw];
            let v = &uv.data()[(bi * 2 * n + 2 * k + 1) * hw..][..hw];
            for p in 0..hw {
                let t = tap(u[p], v[p], th, tw);
                for c in 0..3 {
                    let plane = &atlas.data()[(k * 3 + c) * tex_plane..][..tex_plane];
                    out[((bi * n + k) * 3 + c) * hw + p] = t.sample(plane, tw);
                }
            }
        }
    }
    Tensor::new(&[b, n, 3, h, w], out)
}

/// Foreground `sum_{k<n} S[k] * R[k]`, shape `[batch, 3, H, W]`.
pub fn compose<T: Real>(parts: &Tensor<T>, scores: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, h, w) = match parts.shape() {
        [b, n, 3, h, w] => (*b, *n, *h, *w),
        s => return Err(Error::Shape(format!("part renders must be [b,n,3,h,w], got {s:?}"))),
    };
    let (bs, cs, _, _) = scores.dims4();
    if bs != b || cs != n + 1 {
        return Err(Error::Shape(format!("scores {:?} vs parts {:?}", scores.shape(), parts.shape())));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); b * 3 * hw];
    for bi in 0..b {
        for k in 0..n {
            let s = &scores.data()[(bi * (n + 1) + k) * hw..][..hw];
            for c in 0..3 {
                let r = &parts.data()[((bi * n + k) * 3 + c) * hw..][..hw];
                let o = &mut out[(bi * 3 + c) * hw..][..hw];
                for p in 0..hw {
                    o[p] += s[p] * r[p];
                }
            }
        }
    }
    Tensor::new(&[b, 3, h, w], out)
}

/// `fg + S[n] * B`; the foreground already carries mass `1 - S[n]`.
pub fn composite<T: Real>(fg: &Tensor<T>, scores: &Tensor<T>, background: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, _, h, w) = fg.dims4();
    let (_, cs, _, _) = scores.dims4();
    let (bb, _, _, _) = background.dims4();
    let hw = h * w;
    let mut out = fg.clone();
    for bi in 0..b {
        let s = &scores.data()[(bi * cs + cs - 1) * hw..][..hw];
        let bg_b = if bb == 1 { 0 } else { bi };
        for c in 0..3 {
            let bg = &background.data()[(bg_b * 3 + c) * hw..][..hw];
            let o = &mut out.data_mut()[(bi * 3 + c) * hw..][..hw];
            for p in 0..hw {
                o[p] += s[p] * bg[p];
            }
        }
    }
    Ok(out)
}

/// Full render. Without a background only the foreground term is produced.
pub fn render<T: Real>(
    atlas: &Tensor<T>,
    uv: &Tensor<T>,
    scores: &Tensor<T>,
    background: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = RenderDims::check(atlas, uv, scores, background)?;
    let hw = d.height * d.width;
    let n = d.parts;
    let tex_plane = d.tex_h * d.tex_w;
    let mut out = vec![T::zero(); d.batch * 3 * hw];
    for bi in 0..d.batch {
        for k in 0..n {
            let u = &uv.data()[(bi * 2 * n + 2 * k) * hw..][..hw];
            let v = &uv.data()[(bi * 2 * n + 2 * k + 1) * hw..][..hw];
            let s = &scores.data()[(bi * (n + 1) + k) * hw..][..hw];
            for p in 0..hw {
                if s[p] == T::zero() {
                    continue;
                }
                let t = tap(u[p], v[p], d.tex_h, d.tex_w);
                for c in 0..3 {
                    let plane = &atlas.data()[(k * 3 + c) * tex_plane..][..tex_plane];
                    out[(bi * 3 + c) * hw + p] += s[p] * t.sample(plane, d.tex_w);
                }
            }
        }
    }
    let fg = Tensor::new(&[d.batch, 3, d.height, d.width], out)?;
    match background {
        Some(bg) => composite(&fg, scores, bg),
        None => Ok(fg),
    }
}

pub struct RenderGrads<T: Real> {
    pub atlas: Tensor<T>,
    pub uv: Tensor<T>,
    pub scores: Tensor<T>,
    pub background: Option<Tensor<T>>,
}

/// Analytic gradients of `render` for an upstream gradient `[batch, 3, H, W]`.
pub fn render_backward<T: Real>(
    atlas: &Tensor<T>,
    uv: &Tensor<T>,
    scores: &Tensor<T>,
    background: Option<&Tensor<T>>,
    grad: &Tensor<T>,
) -> Result<RenderGrads<T>> {
    let d = RenderDims::check(atlas, uv, scores, background)?;
    let hw = d.height * d.width;
    let n = d.parts;
    let tex_plane = d.tex_h * d.tex_w;
    let mut g_atlas = Tensor::zeros(atlas.shape());
    let mut g_uv = Tensor::zeros(uv.shape());
    let mut g_scores = Tensor::zeros(scores.shape());
    let g = grad.data();
    for bi in 0..d.batch {
        let gb = &g[bi * 3 * hw..(bi + 1) * 3 * hw];
        for k in 0..n {
            let u_off = (bi * 2 * n + 2 * k) * hw;
            let v_off = u_off + hw;
            let s_off = (bi * (n + 1) + k) * hw;
            for p in 0..hw {
                let u = uv[u_off + p];
                let v = uv[v_off + p];
                let s = scores[s_off + p];
                let t = tap(u, v, d.tex_h, d.tex_w);
                let (mut gs, mut gu, mut gv) = (T::zero(), T::zero(), T::zero());
                for c in 0..3 {
                    let go = gb[c * hw + p];
                    let base = (k * 3 + c) * tex_plane;
                    let plane = &atlas.data()[base..base + tex_plane];
                    gs += go * t.sample(plane, d.tex_w);
                    if s != T::zero() && go != T::zero() {
                        let (du, dv) = t.grad_uv(plane, d.tex_w);
                        gu += go * s * du;
                        gv += go * s * dv;
                        t.scatter(&mut g_atlas.data_mut()[base..base + tex_plane], d.tex_w, go * s);
                    }
                }
                g_scores[s_off + p] = gs;
                g_uv[u_off + p] = gu;
                g_uv[v_off + p] = gv;
            }
        }
    }
    let mut g_bg = None;
    if let Some(bg) = background {
        let (bb, _, _, _) = bg.dims4();
        let mut gbg = Tensor::zeros(bg.shape());
        for bi in 0..d.batch {
            let bg_b = if bb == 1 { 0 } else { bi };
            let s_off = (bi * (n + 1) + n) * hw;
            let mut gs = vec![T::zero(); hw];
            for c in 0..3 {
                for p in 0..hw {
                    let go = g[(bi * 3 + c) * hw + p];
                    gs[p] += go * bg[(bg_b * 3 + c) * hw + p];
                    gbg[(bg_b * 3 + c) * hw + p] += go * scores[s_off + p];
                }
            }
            g_scores.data_mut()[s_off..s_off + hw].copy_from_slice(&gs);
        }
        g_bg = Some(gbg);
    }
    Ok(RenderGrads { atlas: g_atlas, uv: g_uv, scores: g_scores, background: g_bg })
}

/// Graph node for `render`; gradients flow to every input that needs them.
pub fn render_var<T: Real>(
    g: &mut Graph<T>,
    atlas: Var,
    uv: Var,
    scores: Var,
    background: Option<Var>,
) -> Result<Var> {
    let value = render(g.value(atlas), g.value(uv), g.value(scores), background.map(|b| g.value(b)))?;
    let mut inputs = vec![atlas, uv, scores];
    inputs.extend(background);
    Ok(g.custom(&inputs, value, |ctx| {
        let grads = render_backward(
            ctx.inputs[0],
            ctx.inputs[1],
            ctx.inputs[2],
            ctx.inputs.get(3).copied(),
            ctx.grad,
        )
        .expect("shapes validated in forward");
        let mut out = vec![
            ctx.needs[0].then_some(grads.atlas),
            ctx.needs[1].then_some(grads.uv),
            ctx.needs[2].then_some(grads.scores),
        ];
        if ctx.inputs.len() == 4 {
            out.push(grads.background.filter(|_| ctx.needs[3]));
        }
        out
    }))
}

/// High-resolution rendering: UV map, scores and background are bilinearly
/// upsampled by an integer factor (half-pixel centers), scores renormalized,
/// then rendered against the unchanged atlas.
pub fn render_hd<T: Real>(
    atlas: &Tensor<T>,
    uv: &Tensor<T>,
    scores: &Tensor<T>,
    background: Option<&Tensor<T>>,
    scale: usize,
) -> Result<Tensor<T>> {
    if scale == 0 {
        return Err(Error::Invalid("render_hd scale must be >= 1".into()));
    }
    if scale == 1 {
        return render(atlas, uv, scores, background);
    }
    let (_, _, h, w) = uv.dims4();
    let (oh, ow) = (h * scale, w * scale);
    let uv_hd = resize_bilinear(uv, oh, ow, false);
    let mut s_hd = resize_bilinear(scores, oh, ow, false);
    let (b, c, _, _) = s_hd.dims4();
    let hw = oh * ow;
    for bi in 0..b {
        for p in 0..hw {
            let total: T = (0..c).map(|k| s_hd[(bi * c + k) * hw + p]).sum();
            if total > T::zero() {
                for k in 0..c {
                    s_hd[(bi * c + k) * hw + p] /= total;
                }
            }
        }
    }
    let bg_hd = background.map(|bg| resize_bilinear(bg, oh, ow, false));
    render(atlas, &uv_hd, &s_hd, bg_hd.as_ref())
}
