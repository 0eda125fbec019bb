//! Frame-level evaluation metrics.
//!
//! MSE and MAE are per-frame sums over pixels on a 0–255 scale, averaged over
//! samples. SSIM uses an 11-tap Gaussian window (σ = 1.5) over the valid
//! region. CSI binarizes at a threshold and skips frames with no positives in
//! either prediction or truth.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PIXEL_SCALE: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Sum of squared differences of one frame on the 0–255 scale.
pub fn frame_mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = PIXEL_SCALE * (p - t);
            d * d
        })
        .sum()
}

/// Sum of absolute differences of one frame on the 0–255 scale.
pub fn frame_mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| PIXEL_SCALE * (p - t).abs()).sum()
}

/// Per-frame MSE of `[N, T, ...]` clips averaged over samples, with the mean
/// over frames.
pub fn sequence_mse(pred: &Tensor, truth: &Tensor) -> Result<(Vec<f64>, f64)> {
    check_same("sequence_mse", pred, truth)?;
    per_frame(pred, truth, frame_mse)
}

pub fn sequence_mae(pred: &Tensor, truth: &Tensor) -> Result<(Vec<f64>, f64)> {
    check_same("sequence_mae", pred, truth)?;
    per_frame(pred, truth, frame_mae)
}

fn per_frame(pred: &Tensor, truth: &Tensor, f: fn(&[f64], &[f64]) -> f64) -> Result<(Vec<f64>, f64)> {
    let s = pred.shape();
    if s.len() < 3 {
        return Err(Error::config(format!("expected [N, T, ...] clips, got {s:?}")));
    }
    let (n, t) = (s[0], s[1]);
    let per: usize = s[2..].iter().product();
    let mut curve = vec![0.0; t];
    for b in 0..n {
        for (i, c) in curve.iter_mut().enumerate() {
            let off = (b * t + i) * per;
            *c += f(&pred.data()[off..off + per], &truth.data()[off..off + per]);
        }
    }
    curve.iter_mut().for_each(|c| *c /= n as f64);
    let mean = curve.iter().sum::<f64>() / t as f64;
    Ok((curve, mean))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` single-channel images with dynamic range 1.
pub fn ssim(pred: &[f64], truth: &[f64], h: usize, w: usize) -> Result<f64> {
    if pred.len() != h * w || truth.len() != h * w {
        return Err(Error::shape("ssim", &[pred.len(), truth.len()], &[h * w]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "frame {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mx = filter_valid(pred, h, w, &k);
    let my = filter_valid(truth, h, w, &k);
    let mxx = filter_valid(&prod(pred, pred), h, w, &k);
    let myy = filter_valid(&prod(truth, truth), h, w, &k);
    let mxy = filter_valid(&prod(pred, truth), h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Per-frame SSIM of `[N, T, P, H, W]` clips (channels averaged), averaged over samples.
pub fn sequence_ssim(pred: &Tensor, truth: &Tensor) -> Result<(Vec<f64>, f64)> {
    check_same("sequence_ssim", pred, truth)?;
    let s = pred.shape();
    if s.len() != 5 {
        return Err(Error::config(format!("expected [N, T, P, H, W] clips, got {s:?}")));
    }
    let (n, t, p, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut curve = vec![0.0; t];
    for b in 0..n {
        for (i, c) in curve.iter_mut().enumerate() {
            for ch in 0..p {
                let off = ((b * t + i) * p + ch) * h * w;
                *c += ssim(&pred.data()[off..off + h * w], &truth.data()[off..off + h * w], h, w)?;
            }
        }
    }
    curve.iter_mut().for_each(|c| *c /= (n * p) as f64);
    let mean = curve.iter().sum::<f64>() / t as f64;
    Ok((curve, mean))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Contingency {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
}

impl Contingency {
    /// Binarizes at `threshold` (positive means `>= threshold`).
    pub fn count(pred: &[f64], truth: &[f64], threshold: f64) -> Self {
        let mut c = Contingency::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p >= threshold, t >= threshold) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => {}
            }
        }
        c
    }

    /// `hits / (hits + misses + false alarms)`, or `None` when undefined.
    pub fn csi(&self) -> Option<f64> {
        let d = self.hits + self.misses + self.false_alarms;
        (d > 0).then(|| self.hits as f64 / d as f64)
    }
}

pub fn csi(hits: u64, misses: u64, false_alarms: u64) -> Option<f64> {
    Contingency {
        hits,
        misses,
        false_alarms,
    }
    .csi()
}

/// Per-frame CSI of `[N, T, ...]` clips averaged over the samples where it is
/// defined, and the mean over every defined (sample, frame) pair.
pub fn sequence_csi(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    check_same("sequence_csi", pred, truth)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("CSI threshold must lie in (0, 1), got {threshold}")));
    }
    let s = pred.shape();
    let (n, t) = (s[0], s[1]);
    let per: usize = s[2..].iter().product();
    let mut sums = vec![(0.0, 0usize); t];
    for b in 0..n {
        for (i, acc) in sums.iter_mut().enumerate() {
            let off = (b * t + i) * per;
            let c = Contingency::count(&pred.data()[off..off + per], &truth.data()[off..off + per], threshold);
            if let Some(v) = c.csi() {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    let curve = sums.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect();
    let (s, c) = sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok((curve, (c > 0).then(|| s / c as f64)))
}

/// Accumulates metrics over batches of predictions.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    frames: usize,
    samples: usize,
    mse: Vec<f64>,
    mae: Vec<f64>,
    ssim: Vec<f64>,
    ssim_enabled: bool,
    csi_threshold: Option<f64>,
    csi: Vec<(f64, usize)>,
}

impl EvalAccumulator {
    /// SSIM is skipped when frames are smaller than its window.
    pub fn new(frames: usize, frame_hw: (usize, usize), csi_threshold: Option<f64>) -> Self {
        EvalAccumulator {
            frames,
            samples: 0,
            mse: vec![0.0; frames],
            mae: vec![0.0; frames],
            ssim: vec![0.0; frames],
            ssim_enabled: frame_hw.0 >= SSIM_WINDOW && frame_hw.1 >= SSIM_WINDOW,
            csi_threshold,
            csi: vec![(0.0, 0); frames],
        }
    }

    /// Adds a `[N, T, P, H, W]` batch.
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        check_same("EvalAccumulator::add", pred, truth)?;
        let s = pred.shape();
        if s.len() != 5 || s[1] != self.frames {
            return Err(Error::config(format!("expected {} predicted frames, got shape {s:?}", self.frames)));
        }
        let (n, t, p, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let per = p * h * w;
        for b in 0..n {
            for i in 0..t {
                let off = (b * t + i) * per;
                let (x, y) = (&pred.data()[off..off + per], &truth.data()[off..off + per]);
                self.mse[i] += frame_mse(x, y);
                self.mae[i] += frame_mae(x, y);
                if self.ssim_enabled {
                    let mut v = 0.0;
                    for ch in 0..p {
                        let o = ch * h * w;
                        v += ssim(&x[o..o + h * w], &y[o..o + h * w], h, w)?;
                    }
                    self.ssim[i] += v / p as f64;
                }
                if let Some(th) = self.csi_threshold {
                    if let Some(c) = Contingency::count(x, y, th).csi() {
                        self.csi[i].0 += c;
                        self.csi[i].1 += 1;
                    }
                }
            }
        }
        self.samples += n;
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.samples == 0 {
            return Err(Error::Usage("no samples were evaluated".into()));
        }
        let n = self.samples as f64;
        let avg = |v: &[f64]| v.iter().map(|x| x / n).collect::<Vec<_>>();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mse = avg(&self.mse);
        let mae = avg(&self.mae);
        let ssim = self.ssim_enabled.then(|| avg(&self.ssim));
        let (csi_curve, csi_mean) = match self.csi_threshold {
            Some(_) => {
                let curve: Vec<Option<f64>> = self.csi.iter().map(|&(s, c)| (c > 0).then(|| s / c as f64)).collect();
                let (s, c) = self.csi.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
                (Some(curve), (c > 0).then(|| s / c as f64))
            }
            None => (None, None),
        };
        Ok(EvalReport {
            frames: self.frames,
            samples: self.samples,
            mse: mean(&mse),
            mae: mean(&mae),
            ssim: ssim.as_deref().map(mean),
            csi: csi_mean,
            csi_threshold: self.csi_threshold,
            mse_per_frame: mse,
            mae_per_frame: mae,
            ssim_per_frame: ssim,
            csi_per_frame: csi_curve,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub samples: usize,
    pub mse: f64,
    pub mae: f64,
    pub ssim: Option<f64>,
    pub csi: Option<f64>,
    pub csi_threshold: Option<f64>,
    pub mse_per_frame: Vec<f64>,
    pub mae_per_frame: Vec<f64>,
    pub ssim_per_frame: Option<Vec<f64>>,
    pub csi_per_frame: Option<Vec<Option<f64>>>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "samples={} frames={} mse={} mae={} ssim={}",
            self.samples,
            self.frames,
            self.mse,
            self.mae,
            opt(self.ssim)
        );
        if let Some(th) = self.csi_threshold {
            let _ = write!(s, " csi={} csi_threshold={th}", opt(self.csi));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>12} {:>12} {:>8}{}", "frame", "MSE", "MAE", "SSIM", if self.csi_threshold.is_some() { "      CSI" } else { "" });
        let cell = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{x:.4}"));
        for i in 0..self.frames {
            let _ = write!(
                s,
                "{:>6} {:>12.2} {:>12.2} {:>8}",
                i + 1,
                self.mse_per_frame[i],
                self.mae_per_frame[i],
                cell(self.ssim_per_frame.as_ref().map(|v| v[i]))
            );
            if let Some(c) = &self.csi_per_frame {
                let _ = write!(s, " {:>8}", cell(c[i]));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:>6} {:>12.2} {:>12.2} {:>8}", "mean", self.mse, self.mae, cell(self.ssim));
        if self.csi_threshold.is_some() {
            let _ = write!(s, " {:>8}", cell(self.csi));
        }
        s.push('\n');
        s
    }

    /// One row per predicted frame: `frame,mse,mae,ssim[,csi]`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,mse,mae,ssim");
        if self.csi_threshold.is_some() {
            s.push_str(",csi");
        }
        s.push('\n');
        for i in 0..self.frames {
            let _ = write!(
                s,
                "{},{},{},{}",
                i + 1,
                self.mse_per_frame[i],
                self.mae_per_frame[i],
                opt(self.ssim_per_frame.as_ref().map(|v| v[i]))
            );
            if let Some(c) = &self.csi_per_frame {
                let _ = write!(s, ",{}", opt(c[i]));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checker(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect()
    }

    #[test]
    fn mse_conventions_on_unit_case() {
        let truth = vec![0.0; 16];
        let mut pred = truth.clone();
        pred[5] = 1.0;
        assert_eq!(frame_mse(&pred, &truth), 65025.0);
        assert_eq!(frame_mse(&pred, &truth) / 16.0, 65025.0 / 16.0);
        assert_eq!(frame_mse(&truth, &truth), 0.0);
        assert_eq!(frame_mae(&pred, &truth), 255.0);
    }

    #[test]
    fn sequence_mse_averages_samples_per_frame() {
        let truth = Tensor::zeros(&[2, 2, 1, 1, 2]);
        let pred = Tensor::new(&[2, 2, 1, 1, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (curve, mean) = sequence_mse(&pred, &truth).unwrap();
        assert_eq!(curve, vec![65025.0 * 1.5, 0.0]);
        assert_eq!(mean, 65025.0 * 0.75);
        assert!(sequence_mse(&pred, &Tensor::zeros(&[2, 2, 1, 2, 1])).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..256).map(|_| rng.gen()).collect();
        assert!((ssim(&a, &a, 16, 16).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, 16, 16).unwrap();
        assert_eq!(ab, ssim(&b, &a, 16, 16).unwrap());
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let x = checker(16);
        let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        let s = ssim(&inv, &x, 16, 16).unwrap();
        assert!(s < -0.9, "{s}");
    }

    #[test]
    fn ssim_of_constant_prediction_is_near_zero() {
        let x = checker(16);
        let flat = vec![0.5; 256];
        // Oracle: the structure term is C2 / (var + C2) with var ≈ 0.25.
        let s = ssim(&flat, &x, 16, 16).unwrap();
        assert!(s.abs() < 0.01, "{s}");
    }

    #[test]
    fn ssim_rejects_small_frames() {
        assert!(matches!(ssim(&[0.0; 100], &[0.0; 100], 10, 10), Err(Error::Config(_))));
    }

    #[test]
    fn csi_examples() {
        assert_eq!(csi(5, 3, 2), Some(0.5));
        assert_eq!(csi(0, 0, 0), None);
        let truth = [0.9, 0.1, 0.5, 0.0];
        assert_eq!(Contingency::count(&truth, &truth, 0.286).csi(), Some(1.0));
        assert_eq!(Contingency::count(&[0.0; 4], &truth, 0.286).csi(), Some(0.0));
    }

    #[test]
    fn csi_skips_undefined_frames() {
        let truth = Tensor::new(&[1, 2, 1, 1, 2], vec![0.9, 0.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::new(&[1, 2, 1, 1, 2], vec![0.9, 0.9, 0.0, 0.0]).unwrap();
        let (curve, mean) = sequence_csi(&pred, &truth, 0.5).unwrap();
        assert_eq!(curve, vec![Some(0.5), None]);
        assert_eq!(mean, Some(0.5));
    }

    #[test]
    fn accumulator_matches_direct_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [3, 2, 1, 12, 12];
        let p = Tensor::from_fn(&shape, |_| rng.gen());
        let t = Tensor::from_fn(&shape, |_| rng.gen());
        let mut acc = EvalAccumulator::new(2, (12, 12), Some(0.3));
        acc.add(&p.index_outer(0).unwrap().reshape(&[1, 2, 1, 12, 12]).unwrap(), &t.index_outer(0).unwrap().reshape(&[1, 2, 1, 12, 12]).unwrap()).unwrap();
        let rest: Vec<usize> = vec![1, 2];
        let gather = |x: &Tensor| {
            Tensor::stack(&rest.iter().map(|&i| x.index_outer(i).unwrap()).collect::<Vec<_>>()).unwrap()
        };
        acc.add(&gather(&p), &gather(&t)).unwrap();
        let r = acc.finish().unwrap();
        let (mse_curve, mse) = sequence_mse(&p, &t).unwrap();
        let (_, ssim_mean) = sequence_ssim(&p, &t).unwrap();
        let (_, csi_mean) = sequence_csi(&p, &t, 0.3).unwrap();
        for (a, b) in r.mse_per_frame.iter().zip(&mse_curve) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
        assert!((r.mse - mse).abs() < 1e-9 * mse);
        assert!((r.ssim.unwrap() - ssim_mean).abs() < 1e-12);
        assert!((r.csi.unwrap() - csi_mean.unwrap()).abs() < 1e-12);
        assert!(r.to_kv().contains("csi="));
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(r.to_table().contains("mean"));
    }

    #[test]
    fn small_frames_report_no_ssim() {
        let p = Tensor::zeros(&[1, 1, 1, 4, 4]);
        let mut acc = EvalAccumulator::new(1, (4, 4), None);
        acc.add(&p, &p).unwrap();
        let r = acc.finish().unwrap();
        assert_eq!(r.ssim, None);
        assert_eq!(r.mse, 0.0);
        assert!(r.to_kv().contains("ssim=na"));
    }

    proptest! {
        #[test]
        fn csi_is_monotone(h in 0u64..1000, m in 0u64..1000, f in 0u64..1000) {
            if let Some(base) = csi(h, m, f) {
                prop_assert!(csi(h + 1, m, f).unwrap() >= base);
                prop_assert!(csi(h, m, f + 1).unwrap() <= base);
                prop_assert!((0.0..=1.0).contains(&base));
            }
        }

        #[test]
        fn mse_is_symmetric_and_nonnegative(a in proptest::collection::vec(0.0f64..1.0, 8), b in proptest::collection::vec(0.0f64..1.0, 8)) {
            prop_assert_eq!(frame_mse(&a, &b), frame_mse(&b, &a));
            prop_assert!(frame_mse(&a, &b) >= 0.0);
        }
    }
}
