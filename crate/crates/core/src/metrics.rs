//! Image and pose metrics computable without pretrained networks.

use serde::{Deserialize, Serialize};

use crate::synthworld::{N_BASE_PARTS, PART_JOINTS};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x0 in 0..wo {
            rows[y * wo + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y0 in 0..ho {
        for x0 in 0..wo {
            out[y0 * wo + x0] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y0 + i) * wo + x0]).sum();
        }
    }
    (out, ho, wo)
}

/// Single-scale SSIM for images in [0, 1] with layout `[.., 3, H, W]`
/// (a leading batch axis of one is accepted), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim shape mismatch");
    let s = a.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    assert!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "image smaller than the SSIM window");
    let k = gaussian_kernel();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ho, wo) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..ho * wo {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (ho * wo) as f64;
    }
    total / c as f64
}

/// `sum m |a - b| / (3 sum m)` for images `[.., 3, H, W]` and a mask `[.., 1, H, W]`;
/// `None` for an empty mask.
pub fn masked_l1(a: &Tensor, b: &Tensor, mask: &Tensor) -> Option<f64> {
    assert_eq!(a.shape(), b.shape(), "masked_l1 shape mismatch");
    let hw = mask.len();
    assert_eq!(a.len(), 3 * hw, "masked_l1 expects three channels");
    let den: f64 = mask.data().iter().map(|&m| m as f64).sum::<f64>() * 3.0;
    if den <= 0.0 {
        return None;
    }
    let mut num = 0.0;
    for c in 0..3 {
        for p in 0..hw {
            num += mask[p] as f64 * (a[c * hw + p] - b[c * hw + p]).abs() as f64;
        }
    }
    Some(num / den)
}

/// Per-base-part keypoint estimates; `None` where a part is not detected.
pub type PartKeypoints = Vec<Option<[f64; 2]>>;

/// Keypoint estimator: the centroid (pixel-center coordinates) of the pixels
/// whose most likely label falls in each base part. Hard labels keep diffuse
/// low-probability mass spread over the frame from dragging the centroid.
pub fn part_keypoints(scores: &Tensor) -> PartKeypoints {
    let s = scores.shape();
    let (k, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let n = k - 1;
    let segs = n / N_BASE_PARTS;
    let hw = h * w;
    let data = &scores.data()[..k * hw];
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); N_BASE_PARTS];
    for p in 0..hw {
        let mut best = 0;
        for c in 1..k {
            if data[c * hw + p] > data[best * hw + p] {
                best = c;
            }
        }
        if best < n {
            let e = &mut acc[best / segs];
            e.0 += 1;
            e.1 += (p % w) as f64 + 0.5;
            e.2 += (p / w) as f64 + 0.5;
        }
    }
    acc.into_iter().map(|(m, sx, sy)| (m > 0).then(|| [sx / m as f64, sy / m as f64])).collect()
}

/// Midpoint of each base part's two skeleton joints. Occlusion pulls visible
/// centroids away from these, so this reference carries a floor of its own.
pub fn skeleton_keypoints(keypoints: &[[f64; 2]]) -> PartKeypoints {
    PART_JOINTS
        .iter()
        .map(|&(i, j)| Some([(keypoints[i][0] + keypoints[j][0]) / 2.0, (keypoints[i][1] + keypoints[j][1]) / 2.0]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Mean L2 distance in pixels over parts found on both sides; `None` if none.
    pub mean: Option<f64>,
    pub per_part: Vec<Option<f64>>,
    /// Base parts missing from the generated scores or from the target.
    pub missing: Vec<usize>,
}

impl PoseError {
    pub fn all_detected(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Pose error of generated part scores `[.., n+1, H, W]` against target
/// keypoints, usually the same estimator applied to the driving frame.
pub fn pose_error(scores: &Tensor, target: &[Option<[f64; 2]>]) -> PoseError {
    let per_part: Vec<Option<f64>> = part_keypoints(scores)
        .iter()
        .zip(target)
        .map(|(c, r)| match (c, r) {
            (Some(c), Some(r)) => Some(((c[0] - r[0]).powi(2) + (c[1] - r[1]).powi(2)).sqrt()),
            _ => None,
        })
        .collect();
    let found: Vec<f64> = per_part.iter().flatten().copied().collect();
    let mean = (!found.is_empty()).then(|| found.iter().sum::<f64>() / found.len() as f64);
    let missing = per_part.iter().enumerate().filter(|(_, e)| e.is_none()).map(|(i, _)| i).collect();
    PoseError { mean, per_part, missing }
}
