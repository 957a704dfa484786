//! The gradient-check suite: every differentiable operation checked against
//! central finite differences in double precision.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{self, AttentionMode, GeometryConfig};
use crate::graph::{softmax_channels, Graph, Var};
use crate::losses::{
    coord_loss, image_loss, mask_loss, reg_coord_loss, reg_mask_loss, segmentation_loss, texture_loss, FeatureExtractor,
    GeometryTargets, TextureTargets,
};
use crate::netblocks::{
    conv2d, grad_check, init_resblock, instance_norm, projection_weights, random_tensor, resblock, upsample2x, ConvSpec,
    GradCheckOptions, GradCheckReport,
};
use crate::params::ParamStore;
use crate::renderer::render_var;
use crate::tensor::Tensor;
use crate::texture::{self, TextureConfig};

/// Tolerance for single operations and losses.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for whole generator graphs.
pub const GENERATOR_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub group: String,
    pub tolerance: f64,
    pub passed: bool,
    pub report: GradCheckReport,
}

type Loss<'a> = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    group: &'static str,
    name: &'static str,
    tensors: Vec<(String, Tensor<f64>)>,
    opts: GradCheckOptions,
    tolerance: f64,
    loss: Loss<'a>,
}

fn op<'a>(group: &'static str, name: &'static str, tensors: Vec<(String, Tensor<f64>)>, loss: Loss<'a>) -> Case<'a> {
    Case { group, name, tensors, opts: GradCheckOptions::default(), tolerance: OP_TOLERANCE, loss }
}

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

fn scores(shape: &[usize], seed: u64) -> Tensor<f64> {
    softmax_channels(&random_tensor(shape, seed).map(|v| 2.0 * v))
}

fn one_hot(s: &Tensor<f64>) -> Tensor<f64> {
    let (b, k, h, w) = s.dims4();
    let hw = h * w;
    let mut out = Tensor::zeros(s.shape());
    for bi in 0..b {
        for p in 0..hw {
            let best = (0..k).max_by(|&x, &y| s[(bi * k + x) * hw + p].total_cmp(&s[(bi * k + y) * hw + p])).unwrap();
            out[(bi * k + best) * hw + p] = 1.0;
        }
    }
    out
}

/// Parameters of `store` as check leaves, minus biases that feed an
/// instance norm directly (their gradient is exactly zero).
fn param_leaves(store: &ParamStore<f64>) -> Vec<(String, Tensor<f64>)> {
    store
        .iter()
        .filter(|(k, _)| !(k.contains(".res") && k.ends_with(".bias")))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn netblock_cases<'a>() -> Vec<Case<'a>> {
    let mut cases = Vec::new();
    for (name, stride) in [("conv2d_stride1", 1), ("conv2d_stride2", 2)] {
        let spec = ConvSpec::new(2, 3, 3, stride);
        let proj = projection_weights(&[1, 3, 4 / stride, 4 / stride], 41);
        cases.push(op(
            "netblocks",
            name,
            vec![
                named("x", random_tensor(&[1, 2, 4, 4], 31)),
                named("w", random_tensor(&[3, 2, 3, 3], 40)),
                named("b", random_tensor(&[3], 39)),
            ],
            Box::new(move |g, v| {
                let y = conv2d(g, v[0], v[1], v[2], &spec)?;
                Ok(g.dot_const(y, &proj))
            }),
        ));
    }
    let spec = ConvSpec::new(2, 3, 3, 1);
    let proj = projection_weights(&[1, 3, 4, 4], 51);
    cases.push(op(
        "netblocks",
        "conv_relu_instance_norm",
        vec![
            named("x", random_tensor(&[1, 2, 4, 4], 32)),
            named("w", random_tensor(&[3, 2, 3, 3], 50)),
            named("b", random_tensor(&[3], 49)),
        ],
        Box::new(move |g, v| {
            let y = conv2d(g, v[0], v[1], v[2], &spec)?;
            let y = g.relu(y);
            let y = instance_norm(g, y);
            Ok(g.dot_const(y, &proj))
        }),
    ));

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(52);
    let mut store = ParamStore::<f64>::new();
    init_resblock(&mut store, &mut rng, "r", 4);
    let mut tensors = vec![named("x", random_tensor(&[1, 4, 4, 4], 33))];
    tensors.extend(store.iter().map(|(k, v)| (k.clone(), v.clone())));
    let names: Vec<String> = store.names().cloned().collect();
    let proj = projection_weights(&[1, 4, 4, 4], 53);
    cases.push(op(
        "netblocks",
        "resblock",
        tensors,
        Box::new(move |g, v| {
            for (n, &var) in names.iter().zip(&v[1..]) {
                g.bind_param(n, var);
            }
            let y = resblock(g, &store, "r", v[0], 4)?;
            Ok(g.dot_const(y, &proj))
        }),
    ));

    let proj = projection_weights(&[1, 2, 6, 8], 60);
    cases.push(op(
        "netblocks",
        "upsample2x",
        vec![named("x", random_tensor(&[1, 2, 3, 4], 34))],
        Box::new(move |g, v| {
            let y = upsample2x(g, v[0]);
            Ok(g.dot_const(y, &proj))
        }),
    ));

    let proj = projection_weights(&[2, 5, 3, 3], 61);
    cases.push(op(
        "netblocks",
        "softmax_channels",
        vec![named("z", random_tensor(&[2, 5, 3, 3], 35))],
        Box::new(move |g, v| {
            let y = g.softmax_channels(v[0]);
            Ok(g.dot_const(y, &proj))
        }),
    ));
    cases
}

fn renderer_cases<'a>() -> Vec<Case<'a>> {
    let n = 2;
    // coordinates stay away from texel boundaries and the clamp range
    let tensors = vec![
        named("T", random_tensor(&[n, 3, 4, 4], 12).map(|v| v * 0.5 + 0.5)),
        named("C", random_tensor(&[1, 2 * n, 5, 5], 13).map(|v| v * 0.45 + 0.5)),
        named("S", scores(&[1, n + 1, 5, 5], 14)),
        named("B", random_tensor(&[1, 3, 5, 5], 15)),
    ];
    let proj = projection_weights(&[1, 3, 5, 5], 16);
    vec![op(
        "renderer",
        "render",
        tensors,
        Box::new(move |g, v| {
            let out = render_var(g, v[0], v[1], v[2], Some(v[3]))?;
            Ok(g.dot_const(out, &proj))
        }),
    )]
}

fn loss_cases<'a>() -> Vec<Case<'a>> {
    const N: usize = 3;
    let b = 2;
    let gt_scores = one_hot(&scores(&[b, N + 1, 4, 4], 30));
    let mask = Tensor::from_fn(&[b, 1, 4, 4], |i| 1.0 - gt_scores[(i / 16 * (N + 1) + N) * 16 + i % 16]);
    let uv_t = random_tensor(&[b, 2 * N, 4, 4], 31).map(|v| 0.5 + 0.5 * v);
    let t = std::rc::Rc::new(GeometryTargets::new(uv_t, gt_scores, mask).unwrap());
    let tt = TextureTargets::new(
        random_tensor(&[b, 2, 3, 4, 4], 32).map(|v| v.abs()),
        random_tensor(&[b, 2, 4, 4], 33).map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
    )
    .unwrap();
    let uv = named("uv", random_tensor(&[b, 2 * N, 4, 4], 34));
    let s = named("s", scores(&[b, N + 1, 4, 4], 35));
    let fx = FeatureExtractor::<f64>::new(5);
    let target = random_tensor(&[1, 3, 16, 16], 36).map(|v| v.abs());
    let m = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 5 != 0) as u8 as f64);

    let small = GradCheckOptions { step: 1e-6, ..Default::default() };
    let mut cases = Vec::new();
    let mut add = |name: &'static str, tensors: Vec<(String, Tensor<f64>)>, loss: Loss<'a>| {
        cases.push(Case { group: "losses", name, tensors, opts: small, tolerance: OP_TOLERANCE, loss });
    };
    let t1 = t.clone();
    add("coord", vec![uv.clone()], Box::new(move |g, v| coord_loss(g, v[0], &t1)));
    let t1 = t.clone();
    let fixed = s.1.clone();
    add(
        "reg_coord",
        vec![uv],
        Box::new(move |g, v| {
            let w = g.constant(fixed.clone());
            reg_coord_loss(g, v[0], w, &t1)
        }),
    );
    let t1 = t.clone();
    add("segmentation", vec![s.clone()], Box::new(move |g, v| segmentation_loss(g, v[0], &t1)));
    let t1 = t.clone();
    add("reg_mask", vec![s.clone()], Box::new(move |g, v| reg_mask_loss(g, v[0], &t1)));
    let t1 = t.clone();
    add("mask", vec![s], Box::new(move |g, v| mask_loss(g, v[0], &t1.mask)));
    add(
        "texture",
        vec![named("a", random_tensor(&[2, 3, 4, 4], 37))],
        Box::new(move |g, v| Ok(texture_loss(g, v[0], &tt)?.0)),
    );
    add(
        "image",
        vec![named("r", random_tensor(&[1, 3, 16, 16], 38).map(|v| v.abs()))],
        Box::new(move |g, v| image_loss(g, &fx, v[0], &target, Some(&m))),
    );
    cases
}

fn geometry_cases<'a>() -> Vec<Case<'a>> {
    let mut cases = Vec::new();
    for (name, mode) in [("attention_softmax", AttentionMode::Softmax), ("attention_raw", AttentionMode::Raw)] {
        let proj = projection_weights(&[2, 4, 2, 2], 33);
        cases.push(op(
            "geometry",
            name,
            vec![
                named("q_src", random_tensor(&[2, 3, 2, 2], 30)),
                named("q_tgt", random_tensor(&[2, 3, 2, 2], 31)),
                named("a_src", random_tensor(&[2, 4, 2, 2], 32)),
            ],
            Box::new(move |g, v| {
                let o = geometry::attention_fuse(g, v[0], v[1], v[2], mode)?;
                Ok(g.dot_const(o, &proj))
            }),
        ));
    }

    let cfg = GeometryConfig::desk(8, 18);
    let store = geometry::init_params::<f64>(&cfg, 3).unwrap();
    let mut tensors = param_leaves(&store);
    let n_params = tensors.len();
    tensors.push(named("target", random_tensor(&[1, 18, 16, 16], 40).map(|v| v.abs())));
    tensors.push(named("images", random_tensor(&[2, 3, 16, 16], 41).map(|v| v.abs())));
    tensors.push(named("poses", random_tensor(&[2, 18, 16, 16], 42).map(|v| v.abs())));
    let names: Vec<String> = tensors[..n_params].iter().map(|(k, _)| k.clone()).collect();
    let pu = projection_weights(&[1, 16, 16, 16], 43).map(|v| v / 64.0);
    let pl = projection_weights(&[1, 9, 16, 16], 44).map(|v| v / 48.0);
    cases.push(Case {
        group: "geometry",
        name: "generator_end_to_end",
        tensors,
        // tiny step: the deep ReLU stack has kinks close to many coordinates;
        // the raised floor absorbs the rounding noise such a step brings
        opts: GradCheckOptions { step: 1e-7, coords_per_tensor: Some(3), floor: 1e-5, seed: 5 },
        tolerance: GENERATOR_TOLERANCE,
        loss: Box::new(move |g, v| {
            for (i, name) in names.iter().enumerate() {
                g.bind_param(name, v[i]);
            }
            let out = geometry::forward(g, &store, &cfg, v[n_params], v[n_params + 1], v[n_params + 2])?;
            let a = g.dot_const(out.uv, &pu);
            let b = g.dot_const(out.logits, &pl);
            Ok(g.add(a, b))
        }),
    });
    cases
}

fn texture_cases<'a>() -> Vec<Case<'a>> {
    let mut cases = Vec::new();
    for instance_norm in [true, false] {
        let cfg = TextureConfig { widths: vec![4, 6, 8, 8], resblocks: 1, instance_norm, ..TextureConfig::desk(2, 16) };
        let store = texture::init_params::<f64>(&cfg, 14).unwrap();
        let mut tensors = param_leaves(&store);
        let n_params = tensors.len();
        tensors.push(named("inputs", random_tensor(&[2, 6, 16, 16], 15).map(|v| v.abs())));
        let names: Vec<String> = tensors[..n_params].iter().map(|(k, _)| k.clone()).collect();
        let w = projection_weights(&[2, 3, 16, 16], 16).map(|v| v / 16.0);
        cases.push(Case {
            group: "texture",
            name: if instance_norm { "generator_end_to_end_norm" } else { "generator_end_to_end" },
            tensors,
            opts: GradCheckOptions { step: 1e-7, coords_per_tensor: Some(4), floor: 1e-5, seed: 2 },
            tolerance: GENERATOR_TOLERANCE,
            loss: Box::new(move |g, v| {
                for (i, name) in names.iter().enumerate() {
                    g.bind_param(name, v[i]);
                }
                let out = texture::forward(g, &store, &cfg, v[n_params])?;
                Ok(g.dot_const(out.atlas, &w))
            }),
        });
    }
    cases
}

/// Run every check; failures are reported, not raised.
pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    let mut cases = netblock_cases();
    cases.extend(renderer_cases());
    cases.extend(loss_cases());
    cases.extend(geometry_cases());
    cases.extend(texture_cases());
    cases
        .into_iter()
        .map(|c| {
            let report = grad_check(c.name, &c.tensors, c.opts, c.loss)?;
            Ok(SuiteEntry {
                group: c.group.into(),
                tolerance: c.tolerance,
                passed: report.max_rel_error <= c.tolerance,
                report,
            })
        })
        .collect()
}
