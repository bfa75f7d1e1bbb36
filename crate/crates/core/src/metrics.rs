//! PSNR and single-scale SSIM, plus split evaluation with mask-cropped
//! scoring and the per-frame CSV report.
//!
//! Evaluation crops both images to the tight bounding box of the ground
//! truth mask dilated by 4 pixels before scoring, so background pixels do
//! not inflate the numbers.

use std::io::Write;
use std::path::Path;

use crate::image_io::{GreyBuf, ImageBuf};
use crate::model::{Model, ModelError};
use crate::params::ParamStore;
use crate::scene::{Dataset, SceneError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

/// PSNR capped at 99 dB for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(pred: &ImageBuf, target: &ImageBuf) -> f64 {
    assert_eq!(pred.data.len(), target.data.len());
    pred.data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data.len() as f64
}

/// `10 log10(peak^2 / MSE)` in dB.
pub fn psnr(pred: &ImageBuf, target: &ImageBuf, peak: f64) -> f64 {
    let e = mse(pred, target);
    if e <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / e).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5),
/// C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, averaged over valid window
/// centers per channel, then over channels. Images smaller than the window
/// fall back to a single global window.
pub fn ssim(pred: &ImageBuf, target: &ImageBuf) -> f64 {
    assert_eq!(pred.width, target.width);
    assert_eq!(pred.height, target.height);
    let peak = 1.0;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let (w, h) = (pred.width, pred.height);

    let mut channel_means = [0.0; 3];
    for ch in 0..3 {
        let px = |img: &ImageBuf, x: usize, y: usize| img.data[(y * w + x) * 3 + ch];
        let mut acc = 0.0;
        let mut count = 0usize;
        if w < SSIM_WINDOW || h < SSIM_WINDOW {
            // whole image as one uniform window
            let n = (w * h) as f64;
            let (mut mx, mut my) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    mx += px(pred, x, y);
                    my += px(target, x, y);
                }
            }
            mx /= n;
            my /= n;
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let dx = px(pred, x, y) - mx;
                    let dy = px(target, x, y) - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            vx /= n;
            vy /= n;
            cov /= n;
            acc = ssim_term(mx, my, vx, vy, cov, c1, c2);
            count = 1;
        } else {
            let k = gaussian_kernel();
            let half = SSIM_WINDOW / 2;
            for cy in half..h - half {
                for cx in half..w - half {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = k[dy] * k[dx];
                            mx += wgt * px(pred, cx + dx - half, cy + dy - half);
                            my += wgt * px(target, cx + dx - half, cy + dy - half);
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let wgt = k[dy] * k[dx];
                            let ax = px(pred, cx + dx - half, cy + dy - half) - mx;
                            let ay = px(target, cx + dx - half, cy + dy - half) - my;
                            vx += wgt * ax * ax;
                            vy += wgt * ay * ay;
                            cov += wgt * ax * ay;
                        }
                    }
                    acc += ssim_term(mx, my, vx, vy, cov, c1, c2);
                    count += 1;
                }
            }
        }
        channel_means[ch] = acc / count as f64;
    }
    (channel_means[0] + channel_means[1] + channel_means[2]) / 3.0
}

fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Tight bounding box (x0, y0, x1, y1 exclusive) of mask pixels > 0.5,
/// dilated by `dilate` pixels and clamped to the frame. None when empty.
pub fn mask_bbox(mask: &GreyBuf, dilate: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    Some((
        x0.saturating_sub(dilate),
        y0.saturating_sub(dilate),
        (x1 + dilate).min(mask.width),
        (y1 + dilate).min(mask.height),
    ))
}

pub fn crop(img: &ImageBuf, bbox: (usize, usize, usize, usize)) -> ImageBuf {
    let (x0, y0, x1, y1) = bbox;
    let mut out = ImageBuf::new(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            out.set(x - x0, y - y0, img.get(x, y));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct FrameScore {
    pub pose_id: usize,
    pub camera_id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub split: String,
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub const EVAL_CSV_HEADER: &str = "frame,pose_id,camera_id,psnr,ssim";

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{EVAL_CSV_HEADER}")?;
        for (i, s) in self.frames.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{:.6},{:.6}",
                i, s.pose_id, s.camera_id, s.psnr, s.ssim
            )?;
        }
        writeln!(
            f,
            "aggregate,,,{:.6},{:.6}",
            self.mean_psnr, self.mean_ssim
        )?;
        Ok(())
    }
}

/// Render and score every frame of a split, cropped to the dilated GT-mask
/// bounding box.
pub fn eval_split(
    model: &Model,
    params: &ParamStore,
    dataset: &Dataset,
    split: &str,
) -> Result<EvalReport, EvalError> {
    let frames = dataset
        .splits
        .get(split)
        .ok_or_else(|| EvalError::Other(format!("unknown split `{split}`")))?;
    if frames.is_empty() {
        return Err(EvalError::Other(format!("split `{split}` is empty")));
    }
    let mut scores = Vec::with_capacity(frames.len());
    for &(p, c) in frames {
        let gt = dataset.load_frame(p, c)?;
        let (pred, _) = model.render_image(params, &dataset.poses[p], &dataset.cameras[c], None)?;
        let bbox = mask_bbox(&gt.mask, 4)
            .unwrap_or((0, 0, gt.image.width, gt.image.height));
        let score = FrameScore {
            pose_id: p,
            camera_id: c,
            psnr: psnr(&crop(&pred, bbox), &crop(&gt.image, bbox), 1.0),
            ssim: ssim(&crop(&pred, bbox), &crop(&gt.image, bbox)),
        };
        scores.push(score);
    }
    let n = scores.len() as f64;
    Ok(EvalReport {
        split: split.to_string(),
        mean_psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
        frames: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageBuf::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn psnr_analytic_and_cap() {
        let a = ImageBuf::new(4, 4);
        let mut b = ImageBuf::new(4, 4);
        for v in b.data.iter_mut() {
            *v = 0.5; // MSE = 0.25
        }
        let p = psnr(&a, &b, 1.0);
        assert!((p - 6.020599913279624).abs() < 1e-9, "{p}");
        assert_eq!(psnr(&a, &a, 1.0), PSNR_CAP);
    }

    #[test]
    fn psnr_matches_direct_formula_on_random_pairs() {
        for seed in 0..20 {
            let a = random_image(seed, 6, 5);
            let b = random_image(seed + 100, 6, 5);
            let direct = 10.0 * (1.0 / mse(&a, &b)).log10();
            assert!((psnr(&a, &b, 1.0) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_symmetry() {
        let a = random_image(1, 8, 8);
        let b = random_image(2, 8, 8);
        assert_eq!(psnr(&a, &b, 1.0), psnr(&b, &a, 1.0));
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(3, 16, 16);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_upper_bound() {
        for seed in 0..10 {
            let a = random_image(seed, 14, 14);
            let b = random_image(seed + 50, 14, 14);
            assert!(ssim(&a, &b) <= 1.0 + 1e-12);
            assert!(ssim(&a, &b) < 1.0, "different images score below 1");
        }
    }

    #[test]
    fn ssim_negative_for_inverted_checkerboard() {
        // 0.5-mean checkerboard against its negative: structure anti-correlates
        let n = 16;
        let mut a = ImageBuf::new(n, n);
        let mut b = ImageBuf::new(n, n);
        for y in 0..n {
            for x in 0..n {
                let v = if (x + y) % 2 == 0 { 0.9 } else { 0.1 };
                a.set(x, y, [v; 3]);
                b.set(x, y, [1.0 - v; 3]);
            }
        }
        let s = ssim(&a, &b);
        assert!(s < 0.0, "ssim {s} should be negative");
    }

    #[test]
    fn ssim_constants_closed_form() {
        // constant images differing by c: variance terms vanish, SSIM
        // reduces to the luminance term (2 mx my + C1)/(mx^2 + my^2 + C1)
        let mut a = ImageBuf::new(16, 16);
        let mut b = ImageBuf::new(16, 16);
        for v in a.data.iter_mut() {
            *v = 0.4;
        }
        for v in b.data.iter_mut() {
            *v = 0.6;
        }
        let c1 = 0.0001;
        let expect = (2.0 * 0.4 * 0.6 + c1) / (0.4 * 0.4 + 0.6 * 0.6 + c1);
        let got = ssim(&a, &b);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn bbox_and_crop() {
        let mut mask = GreyBuf::new(10, 8);
        mask.set(3, 2, 1.0);
        mask.set(5, 4, 1.0);
        let bbox = mask_bbox(&mask, 1).unwrap();
        assert_eq!(bbox, (2, 1, 7, 6));
        assert!(mask_bbox(&GreyBuf::new(4, 4), 2).is_none());

        let img = random_image(9, 10, 8);
        let c = crop(&img, bbox);
        assert_eq!(c.width, 5);
        assert_eq!(c.height, 5);
        assert_eq!(c.get(0, 0), img.get(2, 1));
    }
}
