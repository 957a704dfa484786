//! Convolutional building blocks: SAME-padded convolution, instance
//! normalization, conv-relu-norm (CRN), residual blocks and bilinear
//! upsampling, each with an analytic backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_conv, ParamStore};
use crate::tensor::{Real, Tensor};

/// Variance guard for instance normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("conv.channels", "must be >= 1"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("conv.kernel", format!("{} is not odd", self.kernel)));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::config("conv.stride", format!("{} not in {{1,2}}", self.stride)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels
    }

    /// `(pad_before, output_size)` for one spatial axis. Stride 2 puts the odd
    /// padding pixel at the top/left so output = ceil(input / stride).
    pub fn same_padding(&self, input: usize) -> (usize, usize) {
        let out = input.div_ceil(self.stride);
        let total = ((out - 1) * self.stride + self.kernel).saturating_sub(input);
        (total - total / 2, out)
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(spec: &ConvSpec, h: usize, w: usize) -> Self {
        let (pt, ho) = spec.same_padding(h);
        let (pl, wo) = spec.same_padding(w);
        Self { ci: spec.in_channels, h, w, k: spec.kernel, s: spec.stride, pt, pl, ho, wo }
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    /// Output index range along one axis that reads inside the input.
    fn valid(&self, offset: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
        // input index = o*s + offset - pad must lie in [0, size)
        let lo = if pad > offset { (pad - offset).div_ceil(self.s) } else { 0 };
        let hi_num = size as isize - 1 + pad as isize - offset as isize;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = ((hi_num as usize) / self.s + 1).min(out);
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let (k, s, hw_out) = (self.k, self.s, self.ho * self.wo);
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid(ky, self.pt, self.h, self.ho);
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * hw_out..][..hw_out];
                    row.fill(T::zero());
                    let (ox0, ox1) = self.valid(kx, self.pl, self.w, self.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - self.pt;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * s + kx - self.pl];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let (k, s, hw_out) = (self.k, self.s, self.ho * self.wo);
        for c in 0..self.ci {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid(ky, self.pt, self.h, self.ho);
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * hw_out..][..hw_out];
                    let (ox0, ox1) = self.valid(kx, self.pl, self.w, self.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - self.pt;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let src = &row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in ox0..ox1 {
                            dst[ox * s + kx - self.pl] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_inputs<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let (_, c, _, _) = x.dims4();
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {c} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let ws = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
    if w.shape() != ws || b.shape() != [spec.out_channels] {
        return Err(Error::Shape(format!(
            "conv weight {:?}/bias {:?} do not match spec {spec:?}",
            w.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Direct SAME convolution `[N,Ci,H,W] -> [N,Co,ceil(H/s),ceil(W/s)]`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_conv_inputs(x, w, b, spec)?;
    let (n, _, h, wd) = x.dims4();
    let geom = ConvGeom::new(spec, h, wd);
    let co = spec.out_channels;
    let hw_out = geom.ho * geom.wo;
    let in_stride = spec.in_channels * h * wd;
    let mut col = vec![T::zero(); geom.rows() * hw_out];
    let mut out = vec![T::zero(); n * co * hw_out];
    for bi in 0..n {
        geom.im2col(&x.data()[bi * in_stride..(bi + 1) * in_stride], &mut col);
        let y = &mut out[bi * co * hw_out..(bi + 1) * co * hw_out];
        for (o, chunk) in y.chunks_mut(hw_out).enumerate() {
            chunk.fill(b[o]);
        }
        T::gemm(co, geom.rows(), hw_out, T::one(), w.data(), false, &col, false, T::one(), y);
    }
    Tensor::new(&[n, co, geom.ho, geom.wo], out)
}

/// Gradients `(dx, dw, db)` of a SAME convolution.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, ci, h, wd) = x.dims4();
    let geom = ConvGeom::new(spec, h, wd);
    let co = spec.out_channels;
    let hw_out = geom.ho * geom.wo;
    let rows = geom.rows();
    let in_stride = ci * h * wd;
    let mut col = vec![T::zero(); rows * hw_out];
    let mut dcol = vec![T::zero(); rows * hw_out];
    let mut dw = vec![T::zero(); co * rows];
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for bi in 0..n {
        let gy = &grad.data()[bi * co * hw_out..(bi + 1) * co * hw_out];
        for (o, chunk) in gy.chunks(hw_out).enumerate() {
            db[o] += chunk.iter().copied().sum::<T>();
        }
        geom.im2col(&x.data()[bi * in_stride..(bi + 1) * in_stride], &mut col);
        T::gemm(co, hw_out, rows, T::one(), gy, false, &col, true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            T::gemm(rows, co, hw_out, T::one(), w.data(), true, gy, false, T::zero(), &mut dcol);
            geom.col2im(&dcol, &mut dx[bi * in_stride..(bi + 1) * in_stride]);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        Tensor::new(w.shape(), dw).unwrap(),
        Tensor::new(&[co], db).unwrap(),
    )
}

/// Per-sample per-channel normalization without affine parameters.
pub fn instance_norm_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = x.dims4();
    let hw = h * w;
    let eps = T::lit(NORM_EPS);
    let inv_n = T::one() / T::from_usize(hw).unwrap();
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        let mean = plane.iter().copied().sum::<T>() * inv_n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        for v in plane.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn instance_norm_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = x.dims4();
    let hw = h * w;
    let eps = T::lit(NORM_EPS);
    let inv_n = T::one() / T::from_usize(hw).unwrap();
    let mut out = vec![T::zero(); x.len()];
    for (((xp, yp), gp), op) in x
        .data()
        .chunks(hw)
        .zip(y.data().chunks(hw))
        .zip(grad.data().chunks(hw))
        .zip(out.chunks_mut(hw))
    {
        let mean = xp.iter().copied().sum::<T>() * inv_n;
        let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        let g_mean = gp.iter().copied().sum::<T>() * inv_n;
        let gy_mean = gp.iter().zip(yp).map(|(&g, &v)| g * v).sum::<T>() * inv_n;
        for ((o, &g), &v) in op.iter_mut().zip(gp).zip(yp) {
            *o = inv * (g - g_mean - v * gy_mean);
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// Source index table for one axis of a bilinear resize.
fn resize_axis(input: usize, output: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if align_corners {
                if output > 1 {
                    o as f64 * (input as f64 - 1.0) / (output as f64 - 1.0)
                } else {
                    0.0
                }
            } else {
                ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a 4-D tensor. `align_corners` maps corner pixel centers
/// onto each other; otherwise half-pixel centers are used with edge clamping.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize, align_corners: bool) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ty = resize_axis(h, out_h, align_corners);
    let tx = resize_axis(w, out_w, align_corners);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out).unwrap()
}

fn resize_bilinear_backward<T: Real>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
    align_corners: bool,
) -> Tensor<T> {
    let (n, c, out_h, out_w) = grad.dims4();
    let ty = resize_axis(in_h, out_h, align_corners);
    let tx = resize_axis(in_w, out_w, align_corners);
    let mut out = vec![T::zero(); n * c * in_h * in_w];
    for (g, dst) in grad.data().chunks(out_h * out_w).zip(out.chunks_mut(in_h * in_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let v = g[oy * out_w + ox];
                dst[y0 * in_w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * in_w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * in_w + x0] += v * fy * (T::one() - fx);
                dst[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(&[n, c, in_h, in_w], out).unwrap()
}

// ----- graph operations -----

pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
    let value = conv2d_forward(g.value(x), g.value(w), g.value(b), spec)?;
    let spec = *spec;
    Ok(g.custom(&[x, w, b], value, move |ctx| {
        let (dx, dw, db) = conv2d_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, &spec, ctx.needs[0]);
        vec![dx, ctx.needs[1].then_some(dw), ctx.needs[2].then_some(db)]
    }))
}

pub fn instance_norm<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let value = instance_norm_forward(g.value(x));
    g.custom(&[x], value, |ctx| {
        vec![Some(instance_norm_backward(ctx.inputs[0], ctx.output, ctx.grad))]
    })
}

/// Bilinear 2x upsampling with aligned corners.
pub fn upsample2x<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let (_, _, h, w) = g.value(x).dims4();
    let value = resize_bilinear(g.value(x), 2 * h, 2 * w, true);
    g.custom(&[x], value, move |ctx| vec![Some(resize_bilinear_backward(ctx.grad, h, w, true))])
}

/// Convolution with parameters `{prefix}.weight` / `{prefix}.bias` from the store.
pub fn conv_layer<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    spec: &ConvSpec,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"));
    let b = g.param(store, &format!("{prefix}.bias"));
    conv2d(g, x, w, b, spec)
}

/// Conv -> ReLU -> instance norm.
pub fn crn<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    spec: &ConvSpec,
) -> Result<Var> {
    let y = conv_layer(g, store, prefix, x, spec)?;
    let y = g.relu(y);
    Ok(instance_norm(g, y))
}

/// `x + norm(conv(relu(norm(conv(x)))))` with 3x3 convolutions.
pub fn resblock<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    channels: usize,
) -> Result<Var> {
    let spec = ConvSpec::new(channels, channels, 3, 1);
    let y = conv_layer(g, store, &format!("{prefix}.conv1"), x, &spec)?;
    let y = instance_norm(g, y);
    let y = g.relu(y);
    let y = conv_layer(g, store, &format!("{prefix}.conv2"), y, &spec)?;
    let y = instance_norm(g, y);
    Ok(g.add(x, y))
}

pub fn init_resblock<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, channels: usize) {
    init_conv(store, rng, &format!("{prefix}.conv1"), channels, channels, 3);
    init_conv(store, rng, &format!("{prefix}.conv2"), channels, channels, 3);
}

pub fn resblock_param_count(channels: usize) -> usize {
    2 * ConvSpec::new(channels, channels, 3, 1).param_count()
}

// ----- gradient checking -----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-4, coords_per_tensor: None, floor: 1e-6, seed: 0 }
    }
}

/// Compare analytic gradients of `loss(graph, leaves)` against central finite
/// differences. Every named tensor becomes a gradient-receiving leaf.
pub fn grad_check<F>(
    name: &str,
    tensors: &[(String, Tensor<f64>)],
    opts: GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|(_, t)| g.leaf(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = tensors.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for (ti, (tname, t)) in tensors.iter().enumerate() {
        let analytic = grads.get(vars[ti]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("{name}: gradient of {tname}")));
        }
        let mut coords: Vec<usize> = (0..t.len()).collect();
        if let Some(k) = opts.coords_per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(k);
        }
        for &i in &coords {
            let orig = t[i];
            work[ti].1[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].1[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].1[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("{name}: finite difference of {tname}[{i}]")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = format!("{tname}[{i}]");
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

/// Random projection weights used to reduce block outputs to a scalar loss;
/// a plain sum would vanish identically after normalization.
pub fn projection_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    projection_weights(shape, seed ^ 0x9e37_79b9_7f4a_7c15)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Triple-loop SAME convolution used as the oracle.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (pt, ho) = spec.same_padding(h);
        let (pl, wo) = spec.same_padding(wd);
        let k = spec.kernel;
        let co = spec.out_channels;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for bi in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * spec.stride + ky) as isize - pt as isize;
                                    let ix = (ox * spec.stride + kx) as isize - pl as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x[((bi * ci + c) * h + iy as usize) * wd + ix as usize];
                                    acc += xv * w[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_conv(spec: &ConvSpec, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let w = random_tensor(&[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel], seed);
        let b = random_tensor(&[spec.out_channels], seed + 1);
        (w, b)
    }

    #[test]
    fn same_padding_sizes() {
        let s2 = ConvSpec::new(1, 1, 3, 2);
        assert_eq!(s2.same_padding(64), (1, 32));
        assert_eq!(s2.same_padding(5), (1, 3));
        let s1 = ConvSpec::new(1, 1, 7, 1);
        assert_eq!(s1.same_padding(16), (3, 16));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let spec = ConvSpec::new(1, 2, 3, 1);
        let (w, _) = random_conv(&spec, 3);
        let y = conv2d_forward(&Tensor::zeros(&[1, 1, 3, 3]), &w, &Tensor::zeros(&[2]), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let spec = ConvSpec::new(1, 1, 3, 1);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w[4] = 1.0;
        let x = random_tensor(&[1, 1, 5, 5], 1);
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_triple_loop() {
        for &(stride, size) in &[(1, 5), (2, 5), (2, 6)] {
            let spec = ConvSpec::new(2, 3, 3, stride);
            let (w, b) = random_conv(&spec, 7);
            let x = random_tensor(&[2, 2, size, size], 11);
            let fast = conv2d_forward(&x, &w, &b, &spec).unwrap();
            let slow = conv_reference(&x, &w, &b, &spec);
            assert!(fast.max_abs_diff(&slow) <= 1e-6, "stride {stride} size {size}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let spec = ConvSpec::new(3, 1, 3, 1);
        let (w, b) = random_conv(&spec, 0);
        let err = conv2d_forward(&Tensor::zeros(&[1, 2, 4, 4]), &w, &b, &spec);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert!(ConvSpec::new(1, 1, 4, 1).validate().is_err());
        assert!(ConvSpec::new(1, 1, 3, 3).validate().is_err());
    }

    #[test]
    fn conv_is_linear_in_input() {
        let spec = ConvSpec::new(2, 2, 3, 2);
        let (w, _) = random_conv(&spec, 5);
        let zero_b = Tensor::zeros(&[2]);
        let x = random_tensor(&[1, 2, 6, 6], 1);
        let y = random_tensor(&[1, 2, 6, 6], 2);
        let (alpha, beta) = (0.7, -1.3);
        let combo = x.zip_map(&y, |a, b| alpha * a + beta * b);
        let lhs = conv2d_forward(&combo, &w, &zero_b, &spec).unwrap();
        let cx = conv2d_forward(&x, &w, &zero_b, &spec).unwrap();
        let cy = conv2d_forward(&y, &w, &zero_b, &spec).unwrap();
        let rhs = cx.zip_map(&cy, |a, b| alpha * a + beta * b);
        assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn instance_norm_statistics() {
        let x = random_tensor(&[2, 3, 4, 4], 9).map(|v| 3.0 * v + 1.0);
        let y = instance_norm_forward(&x);
        for plane in y.data().chunks(16) {
            let m: f64 = plane.iter().sum::<f64>() / 16.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() <= 1e-5);
            assert!((v - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn crn_of_constant_or_negative_map_is_zero() {
        // constant positive post-conv map: 1x1 kernel, weight 1, bias 2
        let spec = ConvSpec::new(1, 1, 1, 1);
        let store = {
            let mut s = ParamStore::<f64>::new();
            s.insert("c.weight", Tensor::full(&[1, 1, 1, 1], 1.0));
            s.insert("c.bias", Tensor::full(&[1], 2.0));
            s
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 0.5));
        let y = crn(&mut g, &store, "c", x, &spec).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));

        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], -5.0));
        let y = crn(&mut g, &store, "c", x, &spec).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0 && v.is_finite()));
    }

    #[test]
    fn crn_matches_composed_references() {
        let spec = ConvSpec::new(2, 3, 3, 1);
        let (w, b) = random_conv(&spec, 21);
        let x = random_tensor(&[1, 2, 5, 5], 22);
        let mut store = ParamStore::new();
        store.insert("l.weight", w.clone());
        store.insert("l.bias", b.clone());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = crn(&mut g, &store, "l", xv, &spec).unwrap();
        let conv = conv_reference(&x, &w, &b, &spec).map(|v| v.max(0.0));
        let reference = {
            let mut out = conv.clone();
            for plane in out.data_mut().chunks_mut(25) {
                let m = plane.iter().sum::<f64>() / 25.0;
                let v = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 25.0;
                plane.iter_mut().for_each(|a| *a = (*a - m) / (v + NORM_EPS).sqrt());
            }
            out
        };
        assert!(g.value(y).max_abs_diff(&reference) <= 1e-6);
    }

    #[test]
    fn resblock_identity_and_zero() {
        let mut store = ParamStore::<f64>::new();
        for conv in ["r.conv1", "r.conv2"] {
            store.insert(format!("{conv}.weight"), Tensor::zeros(&[2, 2, 3, 3]));
            store.insert(format!("{conv}.bias"), Tensor::zeros(&[2]));
        }
        let x = random_tensor(&[1, 2, 4, 4], 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = resblock(&mut g, &store, "r", xv, 2).unwrap();
        assert_eq!(g.value(y), &x);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        init_resblock(&mut store, &mut rng, "r", 2);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let y = resblock(&mut g, &store, "r", xv, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resblock_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        init_resblock(&mut store, &mut rng, "r", 2);
        for (_, t) in store.iter_mut() {
            if t.shape().len() == 1 {
                *t = random_tensor(t.shape(), 8);
            }
        }
        let x = random_tensor(&[1, 2, 4, 4], 5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = resblock(&mut g, &store, "r", xv, 2).unwrap();
        let spec = ConvSpec::new(2, 2, 3, 1);
        let norm = |t: Tensor<f64>| {
            let mut out = t;
            for plane in out.data_mut().chunks_mut(16) {
                let m = plane.iter().sum::<f64>() / 16.0;
                let v = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
                plane.iter_mut().for_each(|a| *a = (*a - m) / (v + NORM_EPS).sqrt());
            }
            out
        };
        let p = |n: &str| store.get(n).unwrap();
        let h = norm(conv_reference(&x, p("r.conv1.weight"), p("r.conv1.bias"), &spec)).map(|v| v.max(0.0));
        let f = norm(conv_reference(&h, p("r.conv2.weight"), p("r.conv2.bias"), &spec));
        let reference = x.zip_map(&f, |a, b| a + b);
        assert!(g.value(y).max_abs_diff(&reference) <= 1e-6);
    }

    #[test]
    fn upsample_constant_and_corners() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 5.0));
        let y = upsample2x(&mut g, x);
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));

        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = upsample2x(&mut g, x);
        // align-corners oracle: source coordinate o * (2-1)/(4-1)
        let mut expected = Tensor::zeros(&[1, 1, 4, 4]);
        for oy in 0..4 {
            for ox in 0..4 {
                let sy = oy as f64 / 3.0;
                let sx = ox as f64 / 3.0;
                let v = (1.0 - sy) * ((1.0 - sx) * 0.0 + sx * 1.0) + sy * ((1.0 - sx) * 2.0 + sx * 3.0);
                expected[oy * 4 + ox] = v;
            }
        }
        assert!(g.value(y).max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn upsample_reproduces_affine_ramps() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| 2.0 * (i / 4) as f64 - 0.5 * (i % 4) as f64);
        let y = resize_bilinear(&x, 6, 8, true);
        for oy in 0..6 {
            for ox in 0..8 {
                let sy = oy as f64 * 2.0 / 5.0;
                let sx = ox as f64 * 3.0 / 7.0;
                assert!((y[oy * 8 + ox] - (2.0 * sy - 0.5 * sx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        assert_eq!(ConvSpec::new(32, 48, 7, 1).param_count(), 32 * 48 * 49 + 48);
        assert_eq!(resblock_param_count(4), 2 * (4 * 4 * 9 + 4));
    }

    fn block_check(name: &str, x_shape: &[usize], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, extra: Vec<(String, Tensor<f64>)>) -> f64 {
        let mut tensors = vec![("x".to_string(), random_tensor(x_shape, 31))];
        tensors.extend(extra);
        let report = grad_check(name, &tensors, GradCheckOptions::default(), f).unwrap();
        report.max_rel_error
    }

    #[test]
    fn conv_gradients() {
        for stride in [1, 2] {
            let spec = ConvSpec::new(2, 3, 3, stride);
            let (w, b) = random_conv(&spec, 40);
            let proj = projection_weights(&[1, 3, 4 / stride, 4 / stride], 41);
            let err = block_check(
                "conv2d",
                &[1, 2, 4, 4],
                |g, v| {
                    let y = conv2d(g, v[0], v[1], v[2], &spec)?;
                    Ok(g.dot_const(y, &proj))
                },
                vec![("w".into(), w), ("b".into(), b)],
            );
            assert!(err <= 1e-4, "stride {stride}: {err}");
        }
    }

    #[test]
    fn crn_and_resblock_gradients() {
        let spec = ConvSpec::new(2, 3, 3, 1);
        let (w, b) = random_conv(&spec, 50);
        let proj = projection_weights(&[1, 3, 4, 4], 51);
        let err = block_check(
            "crn",
            &[1, 2, 4, 4],
            |g, v| {
                let y = conv2d(g, v[0], v[1], v[2], &spec)?;
                let y = g.relu(y);
                let y = instance_norm(g, y);
                Ok(g.dot_const(y, &proj))
            },
            vec![("w".into(), w), ("b".into(), b)],
        );
        assert!(err <= 1e-4, "crn: {err}");

        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut store = ParamStore::<f64>::new();
        init_resblock(&mut store, &mut rng, "r", 4);
        let names: Vec<String> = store.names().cloned().collect();
        let extra: Vec<(String, Tensor<f64>)> =
            names.iter().map(|n| (n.clone(), store.get(n).unwrap().clone())).collect();
        let proj = projection_weights(&[1, 4, 4, 4], 53);
        let err = block_check(
            "resblock",
            &[1, 4, 4, 4],
            |g, v| {
                for (n, &var) in names.iter().zip(&v[1..]) {
                    g.bind_param(n, var);
                }
                let y = resblock(g, &store, "r", v[0], 4)?;
                Ok(g.dot_const(y, &proj))
            },
            extra,
        );
        assert!(err <= 1e-4, "resblock: {err}");
    }

    #[test]
    fn upsample_gradient() {
        let proj = projection_weights(&[1, 2, 6, 8], 60);
        let err = block_check(
            "upsample2x",
            &[1, 2, 3, 4],
            |g, v| {
                let y = upsample2x(g, v[0]);
                Ok(g.dot_const(y, &proj))
            },
            vec![],
        );
        assert!(err <= 1e-4, "{err}");
    }
}
