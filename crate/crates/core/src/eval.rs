//! Reconstruction and motion-transfer evaluation, JSON reports and PNG
//! contact sheets.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fewshot::{transfer, PersonalState};
use crate::metrics::{masked_l1, part_keypoints, pose_error, ssim};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::FrameBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out frames evaluated per person, taken after the source frames.
    pub held_out: usize,
    /// Run few-shot fine-tuning before evaluating.
    pub finetune: bool,
    /// Rows in each contact sheet; 0 disables sheets.
    pub sheet_rows: usize,
}

impl EvalConfig {
    pub fn desk() -> Self {
        Self { held_out: 20, finetune: true, sheet_rows: 6 }
    }

    pub fn paper() -> Self {
        Self { held_out: 100, finetune: true, sheet_rows: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.held_out == 0 {
            return Err(Error::config("eval.held_out", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub ssim: Option<f64>,
    pub masked_l1: Option<f64>,
    pub pose_error: Option<f64>,
    /// Base parts missing on either side of the pose comparison.
    pub missing_parts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub person: String,
    /// Person whose poses drove the sequence; `None` for reconstruction.
    pub driving: Option<String>,
    pub frames: Vec<FrameMetrics>,
    pub ssim: Option<f64>,
    pub masked_l1: Option<f64>,
    pub pose_error: Option<f64>,
}

/// A metric this implementation does not compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unsupported {
    pub supported: bool,
    pub reason: String,
}

impl Unsupported {
    fn new(reason: &str) -> Self {
        Self { supported: false, reason: reason.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub frames: usize,
    pub ssim: Option<f64>,
    pub masked_l1: Option<f64>,
    pub pose_error: Option<f64>,
    pub lpips: Unsupported,
    pub freid: Unsupported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub sequences: Vec<SequenceReport>,
    /// Means over every frame of every sequence.
    pub aggregate: Aggregate,
    pub config: Value,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl SequenceReport {
    fn new(person: &str, driving: Option<&str>, frames: Vec<FrameMetrics>) -> Self {
        Self {
            person: person.into(),
            driving: driving.map(Into::into),
            ssim: mean(frames.iter().map(|f| f.ssim)),
            masked_l1: mean(frames.iter().map(|f| f.masked_l1)),
            pose_error: mean(frames.iter().map(|f| f.pose_error)),
            frames,
        }
    }
}

impl EvalReport {
    pub fn new(kind: &str, sequences: Vec<SequenceReport>, config: Value) -> Self {
        let all = || sequences.iter().flat_map(|s| s.frames.iter());
        let aggregate = Aggregate {
            frames: all().count(),
            ssim: mean(all().map(|f| f.ssim)),
            masked_l1: mean(all().map(|f| f.masked_l1)),
            pose_error: mean(all().map(|f| f.pose_error)),
            lpips: Unsupported::new("needs a pretrained perceptual network"),
            freid: Unsupported::new("needs a pretrained re-identification network"),
        };
        Self { kind: kind.into(), sequences, aggregate, config }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Rendered frames plus their metrics.
pub struct Evaluated {
    pub report: SequenceReport,
    pub images: Tensor,
    pub scores: Tensor,
}

fn frame_metrics(driving: &FrameBatch, images: &Tensor, scores: &Tensor, with_image: bool) -> Vec<FrameMetrics> {
    (0..driving.len())
        .map(|i| {
            let out = images.batch_item(i);
            let s = scores.batch_item(i);
            let target = part_keypoints(&driving.scores.batch_item(i));
            let pe = pose_error(&s, &target);
            let (ssim_v, l1) = if with_image {
                let gt = driving.images.batch_item(i);
                (Some(ssim(&out, &gt)), masked_l1(&out, &gt, &driving.masks.batch_item(i)))
            } else {
                (None, None)
            };
            FrameMetrics { frame: driving.frames[i], ssim: ssim_v, masked_l1: l1, pose_error: pe.mean, missing_parts: pe.missing }
        })
        .collect()
}

/// Re-render each held-out frame of the personalized person from its own pose.
pub fn eval_reconstruction(model: &Model, state: &PersonalState, person: &str, frames: &FrameBatch) -> Result<Evaluated> {
    let out = transfer(model, state, &frames.poses)?;
    let metrics = frame_metrics(frames, &out.images, &out.scores, true);
    Ok(Evaluated { report: SequenceReport::new(person, None, metrics), images: out.images, scores: out.scores })
}

/// Drive the personalized person with another sequence; only pose error
/// is defined since no ground-truth image exists.
pub fn eval_transfer(
    model: &Model,
    state: &PersonalState,
    person: &str,
    driving_person: &str,
    driving: &FrameBatch,
) -> Result<Evaluated> {
    let out = transfer(model, state, &driving.poses)?;
    let metrics = frame_metrics(driving, &out.images, &out.scores, false);
    Ok(Evaluated {
        report: SequenceReport::new(person, Some(driving_person), metrics),
        images: out.images,
        scores: out.scores,
    })
}

/// 8-bit RGB bytes of a `[3, H, W]` image in [0, 1].
fn rgb_bytes(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let hw = h * w;
    let mut out = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push((img[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Write a `[3, H, W]` (or `[1, 3, H, W]`) image as PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() < 3 || s[s.len() - 3] != 3 || (s.len() == 4 && s[0] != 1) || s.len() > 4 {
        return Err(Error::Shape(format!("write_png expects [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let img = img.reshaped(&[3, h, w])?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| Error::Invalid(format!("png {}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(&rgb_bytes(&img)).map_err(bad)?;
    writer.finish().map_err(bad)
}

/// Gray visualization of a stickman `[P, H, W]`: the max over channels.
pub fn pose_image(pose: &Tensor) -> Tensor {
    let (p, h, w) = (pose.shape()[0], pose.shape()[1], pose.shape()[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    for i in 0..hw {
        let v = (0..p).map(|c| pose[c * hw + i]).fold(0.0f32, f32::max);
        for c in 0..3 {
            out[c * hw + i] = v;
        }
    }
    out
}

/// Tile `[3, h, w]` cells into a grid, row-major; missing cells are black.
pub fn tile(rows: &[Vec<Option<Tensor>>], h: usize, w: usize) -> Result<Tensor> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * h, cols * w);
    let mut out = Tensor::zeros(&[3, gh.max(1), gw.max(1)]);
    if rows.is_empty() || cols == 0 {
        return Ok(out);
    }
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(cell) = cell else { continue };
            if cell.shape() != [3, h, w] {
                return Err(Error::Shape(format!("tile cell {:?}, expected [3, {h}, {w}]", cell.shape())));
            }
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * gh + r * h + y) * gw + c * w + x] = cell[(ch * h + y) * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Contact sheet with one row per frame: source | target pose | output | ground truth.
pub fn contact_sheet(source: &Tensor, poses: &Tensor, outputs: &Tensor, truth: Option<&Tensor>, rows: usize) -> Result<Tensor> {
    let (k, _, h, w) = poses.dims4();
    let src = source.reshaped(&[3, h, w])?;
    let picks = crate::trainer::spread(0..k, rows);
    let grid: Vec<Vec<Option<Tensor>>> = picks
        .iter()
        .map(|&i| {
            vec![
                Some(src.clone()),
                Some(pose_image(&item(poses, i))),
                Some(item(outputs, i)),
                truth.map(|t| item(t, i)),
            ]
        })
        .collect();
    tile(&grid, h, w)
}

/// Atlas `[n, 3, A, A]` laid out as one row of part tiles.
pub fn atlas_tiles(atlas: &Tensor) -> Result<Tensor> {
    let (n, _, a, _) = atlas.dims4();
    tile(&[(0..n).map(|i| Some(item(atlas, i))).collect()], a, a)
}

/// Item `i` of the leading axis with that axis dropped.
fn item(t: &Tensor, i: usize) -> Tensor {
    let b = t.batch_item(i);
    b.reshaped(&t.shape()[1..]).expect("same element count")
}
