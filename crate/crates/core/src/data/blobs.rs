//! Advecting blobs: Gaussian echoes drifting over a periodic domain.

use std::f64::consts::TAU;

use rand::Rng;

use super::{sequence_rng, Generator};
use crate::codec::kv_get;
use crate::error::{Error, Result};

/// Normalised alarm threshold, 20 on a 0–70 intensity scale.
pub const DEFAULT_THRESHOLD: f64 = 20.0 / 70.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BlobConfig {
    pub size: usize,
    pub input_len: usize,
    pub predict_len: usize,
    /// Probability that a sequence is near-empty.
    pub aridity: f64,
    pub max_blobs: usize,
    /// Enables slow exponential growth or decay of blob intensity.
    pub growth: bool,
    /// Intensity that near-empty sequences stay strictly below.
    pub threshold: f64,
}

/// One blob at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: [f64; 2],
    pub sigma: f64,
    pub peak: f64,
    pub rate: f64,
}

/// Blobs plus the smooth velocity field that carries them.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobFieldSpec {
    pub blobs: Vec<Blob>,
    pub drift: [f64; 2],
    pub swirl: f64,
    pub phase: [f64; 2],
    pub arid: bool,
}

impl BlobFieldSpec {
    /// Velocity in px/frame at `p`.
    pub fn velocity(&self, p: [f64; 2], size: usize) -> [f64; 2] {
        let k = TAU / size as f64;
        [
            self.drift[0] + self.swirl * (k * p[1] + self.phase[0]).sin(),
            self.drift[1] + self.swirl * (k * p[0] + self.phase[1]).sin(),
        ]
    }
}

impl BlobConfig {
    pub fn new(size: usize, aridity: f64) -> Self {
        BlobConfig {
            size,
            input_len: 10,
            predict_len: 10,
            aridity,
            max_blobs: 3,
            growth: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.aridity) {
            return Err(Error::config(format!("aridity must lie in [0, 1], got {}", self.aridity)));
        }
        if self.size < 8 {
            return Err(Error::config("blob frames must be at least 8 pixels wide"));
        }
        if self.max_blobs == 0 {
            return Err(Error::config("need at least one blob"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        if self.input_len == 0 || self.predict_len == 0 {
            return Err(Error::config("sequence horizons must be positive"));
        }
        Ok(())
    }

    /// Initial field of sequence `index`.
    pub fn initial(&self, seed: u64, index: u64) -> BlobFieldSpec {
        let mut rng = sequence_rng(seed, index);
        let n = self.size as f64;
        let arid = rng.gen::<f64>() < self.aridity;
        let count = rng.gen_range(1..=self.max_blobs);
        let speed = rng.gen_range(n / 32.0..n / 16.0);
        let angle = rng.gen_range(0.0..TAU);
        let swirl = 0.5 * speed * rng.gen::<f64>();
        let phase = [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];
        // Faint peaks are capped so that even fully overlapping blobs stay
        // below the threshold.
        let faint = 0.8 * self.threshold / self.max_blobs as f64;
        let blobs = (0..count)
            .map(|_| {
                let center = [rng.gen_range(0.0..n), rng.gen_range(0.0..n)];
                let sigma = rng.gen_range(n / 10.0..n / 6.0);
                let peak = if arid {
                    faint * rng.gen_range(0.25..1.0)
                } else {
                    rng.gen_range(0.4..0.9)
                };
                let rate = rng.gen_range(-0.04..0.04);
                let rate = if self.growth && !arid { rate } else { 0.0 };
                Blob {
                    center,
                    sigma,
                    peak,
                    rate,
                }
            })
            .collect();
        BlobFieldSpec {
            blobs,
            drift: [speed * angle.cos(), speed * angle.sin()],
            swirl,
            phase,
            arid,
        }
    }

    /// Per-frame field states of sequence `index`.
    pub fn trajectory(&self, seed: u64, index: u64) -> Vec<BlobFieldSpec> {
        let n = self.size as f64;
        let mut spec = self.initial(seed, index);
        let total = self.input_len + self.predict_len;
        let mut out = Vec::with_capacity(total);
        for _ in 0..total {
            out.push(spec.clone());
            let moved: Vec<[f64; 2]> = spec.blobs.iter().map(|b| spec.velocity(b.center, self.size)).collect();
            for (b, v) in spec.blobs.iter_mut().zip(moved) {
                b.center = [(b.center[0] + v[0]).rem_euclid(n), (b.center[1] + v[1]).rem_euclid(n)];
                b.peak *= b.rate.exp();
            }
        }
        out
    }

    /// Renders a frame, summing periodic Gaussians and clipping to `[0, 1]`.
    pub fn render(&self, spec: &BlobFieldSpec) -> Vec<f64> {
        let n = self.size;
        let mut img = vec![0.0; n * n];
        let profile = |c: f64, sigma: f64| -> Vec<f64> {
            (0..n)
                .map(|x| {
                    (-1..=1)
                        .map(|i| {
                            let d = x as f64 - c + (i * n as i64) as f64;
                            (-d * d / (2.0 * sigma * sigma)).exp()
                        })
                        .sum()
                })
                .collect()
        };
        for b in &spec.blobs {
            let gx = profile(b.center[0], b.sigma);
            let gy = profile(b.center[1], b.sigma);
            for (y, &wy) in gy.iter().enumerate() {
                for (x, &wx) in gx.iter().enumerate() {
                    img[y * n + x] += b.peak * wx * wy;
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| kv_get(kv, k).ok_or_else(|| Error::format(format!("missing dataset key {k:?}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad value for dataset key {k:?}")))
        };
        Ok(BlobConfig {
            size: num("size")? as usize,
            input_len: num("input_len")? as usize,
            predict_len: num("predict_len")? as usize,
            aridity: num("aridity")?,
            max_blobs: num("max_blobs")? as usize,
            growth: get("growth")? == "true",
            threshold: num("threshold")?,
        })
    }
}

impl Generator for BlobConfig {
    fn name(&self) -> &'static str {
        "advecting-blobs"
    }

    fn config_kv(&self) -> Vec<(String, String)> {
        vec![
            ("size".into(), self.size.to_string()),
            ("input_len".into(), self.input_len.to_string()),
            ("predict_len".into(), self.predict_len.to_string()),
            ("aridity".into(), self.aridity.to_string()),
            ("max_blobs".into(), self.max_blobs.to_string()),
            ("growth".into(), self.growth.to_string()),
            ("threshold".into(), self.threshold.to_string()),
        ]
    }

    fn frame_shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }

    fn horizon(&self) -> (usize, usize) {
        (self.input_len, self.predict_len)
    }

    fn validate(&self) -> Result<()> {
        BlobConfig::validate(self)
    }

    fn sequence(&self, seed: u64, index: u64) -> Vec<f64> {
        self.trajectory(seed, index).iter().flat_map(|s| self.render(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max(v: &[f64]) -> f64 {
        v.iter().copied().fold(0.0, f64::max)
    }

    #[test]
    fn fully_arid_sequences_stay_below_threshold() {
        let cfg = BlobConfig::new(16, 1.0);
        for i in 0..50 {
            assert!(max(&cfg.sequence(3, i)) < cfg.threshold);
        }
    }

    #[test]
    fn wet_sequences_cross_threshold() {
        let cfg = BlobConfig::new(16, 0.0);
        let wet = (0..20).filter(|&i| max(&cfg.sequence(3, i)) >= cfg.threshold).count();
        assert_eq!(wet, 20);
    }

    #[test]
    fn aridity_fraction_is_respected() {
        let cfg = BlobConfig::new(16, 0.3);
        let arid = (0..2000).filter(|&i| cfg.initial(9, i).arid).count() as f64 / 2000.0;
        assert!((arid - 0.3).abs() < 0.04, "{arid}");
    }

    #[test]
    fn mass_is_conserved_without_growth() {
        let mut cfg = BlobConfig::new(16, 0.0);
        cfg.growth = false;
        cfg.max_blobs = 1;
        for i in 0..20 {
            let seq = cfg.sequence(4, i);
            let masses: Vec<f64> = seq.chunks(256).map(|f| f.iter().sum()).collect();
            for w in masses.windows(2) {
                assert!(((w[1] - w[0]) / w[0]).abs() < 0.01, "mass drift {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn values_are_in_unit_range_and_nonnegative() {
        let cfg = BlobConfig::new(16, 0.2);
        for i in 0..10 {
            assert!(cfg.sequence(1, i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn bad_aridity_is_rejected() {
        assert!(BlobConfig::new(16, 1.5).validate().is_err());
        assert!(BlobConfig::new(16, -0.1).validate().is_err());
    }
}
