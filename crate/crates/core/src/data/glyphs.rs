//! Moving glyphs: binary sprites bouncing inside the frame, rendered at
//! sub-pixel positions by bilinear interpolation.

use rand::Rng;

use super::{sequence_rng, Generator};
use crate::codec::kv_get;
use crate::error::{Error, Result};

/// Sprite side length before scaling.
pub const GLYPH_CELLS: usize = 7;

type Pattern = fn(i32, i32) -> bool;

/// Built-in sprites on a 7×7 grid centred at (3, 3).
const PATTERNS: [Pattern; 12] = [
    |r, c| (r - 3).abs().max((c - 3).abs()) == 3,
    |r, c| (r - 3).pow(2) + (c - 3).pow(2) <= 9,
    |r, c| (r - 3).abs() <= 1 || (c - 3).abs() <= 1,
    |r, c| r == c || r + c == 6,
    |r, c| (r - 3).abs() + (c - 3).abs() == 3,
    |r, c| r + 1 > 2 * (c - 3).abs(),
    |r, _| r % 3 == 0,
    |r, c| c <= 1 || r >= 5,
    |r, c| r <= 1 || (c - 3).abs() <= 1,
    |r, c| r + c <= 6,
    |r, c| c <= 1 || c >= 5 || r == 3,
    |r, c| {
        let d = (((r - 3).pow(2) + (c - 3).pow(2)) as f64).sqrt();
        (d - 2.8).abs() < 0.7
    },
];

pub fn num_sprites() -> usize {
    PATTERNS.len()
}

/// Whether cell `(row, col)` of sprite `id` is lit.
pub fn sprite_cell(id: usize, row: usize, col: usize) -> bool {
    PATTERNS[id % PATTERNS.len()](row as i32, col as i32)
}

/// One glyph's state at one frame. `position` is the top-left corner `[x, y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    pub glyph: usize,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphConfig {
    pub num_glyphs: usize,
    pub size: usize,
    pub input_len: usize,
    pub predict_len: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Initial glyph states used instead of random draws (test hook).
    pub overrides: Option<Vec<GlyphSpec>>,
}

impl GlyphConfig {
    /// Speeds scale with the frame: between `size/16` and `size/8` px per frame.
    pub fn new(num_glyphs: usize, size: usize) -> Self {
        GlyphConfig {
            num_glyphs,
            size,
            input_len: 10,
            predict_len: 10,
            speed_min: size as f64 / 16.0,
            speed_max: size as f64 / 8.0,
            overrides: None,
        }
    }

    pub fn scale(&self) -> usize {
        (self.size / 16).max(1)
    }

    pub fn extent(&self) -> usize {
        GLYPH_CELLS * self.scale()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_glyphs == 0 {
            return Err(Error::config("need at least one glyph"));
        }
        if self.size < 2 * self.extent() {
            return Err(Error::config(format!(
                "frame size {} is smaller than twice the glyph extent {}",
                self.size,
                self.extent()
            )));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max) {
            return Err(Error::config("speed band must satisfy 0 <= min <= max"));
        }
        if self.input_len == 0 || self.predict_len == 0 {
            return Err(Error::config("sequence horizons must be positive"));
        }
        if let Some(o) = &self.overrides {
            if o.len() != self.num_glyphs {
                return Err(Error::config("override count must equal the glyph count"));
            }
        }
        Ok(())
    }

    fn max_pos(&self) -> f64 {
        (self.size - self.extent()) as f64
    }

    fn initial(&self, seed: u64, index: u64) -> Vec<GlyphSpec> {
        if let Some(o) = &self.overrides {
            return o.clone();
        }
        let mut rng = sequence_rng(seed, index);
        let hi = self.max_pos();
        (0..self.num_glyphs)
            .map(|_| {
                let glyph = rng.gen_range(0..PATTERNS.len());
                let position = [rng.gen_range(0.0..=hi), rng.gen_range(0.0..=hi)];
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = if self.speed_max > self.speed_min {
                    rng.gen_range(self.speed_min..self.speed_max)
                } else {
                    self.speed_min
                };
                GlyphSpec {
                    glyph,
                    position,
                    velocity: [speed * angle.cos(), speed * angle.sin()],
                }
            })
            .collect()
    }

    /// Per-frame glyph states of sequence `index`.
    pub fn trajectory(&self, seed: u64, index: u64) -> Vec<Vec<GlyphSpec>> {
        let hi = self.max_pos();
        let mut state = self.initial(seed, index);
        let total = self.input_len + self.predict_len;
        let mut frames = Vec::with_capacity(total);
        for _ in 0..total {
            frames.push(state.clone());
            for g in &mut state {
                for a in 0..2 {
                    let (p, v) = reflect(g.position[a] + g.velocity[a], g.velocity[a], hi);
                    g.position[a] = p;
                    g.velocity[a] = v;
                }
            }
        }
        frames
    }

    /// Renders one frame as `size × size` intensities; overlaps take the max.
    /// A glyph at a fractional position is the bilinear resampling of its
    /// bitmap, so its centroid moves exactly with the velocity.
    pub fn render(&self, glyphs: &[GlyphSpec]) -> Vec<f64> {
        let (n, s) = (self.size, self.scale());
        let e = GLYPH_CELLS * s;
        let lit = |g: usize, r: usize, c: usize| -> f64 {
            if r >= 1 && c >= 1 && r <= e && c <= e && sprite_cell(g, (r - 1) / s, (c - 1) / s) {
                1.0
            } else {
                0.0
            }
        };
        let mut img = vec![0.0; n * n];
        for g in glyphs {
            let (ix, iy) = (g.position[0].floor(), g.position[1].floor());
            let (fx, fy) = (g.position[0] - ix, g.position[1] - iy);
            let (ix, iy) = (ix as usize, iy as usize);
            // Bitmap indices are shifted by one so that row/column -1 reads as empty.
            for r in 0..=e {
                for c in 0..=e {
                    let (y, x) = (iy + r, ix + c);
                    if y >= n || x >= n {
                        continue;
                    }
                    let v = (1.0 - fy) * ((1.0 - fx) * lit(g.glyph, r + 1, c + 1) + fx * lit(g.glyph, r + 1, c))
                        + fy * ((1.0 - fx) * lit(g.glyph, r, c + 1) + fx * lit(g.glyph, r, c));
                    let px = &mut img[y * n + x];
                    *px = f64::max(*px, v);
                }
            }
        }
        img
    }
}

/// Elastic reflection of a coordinate into `[0, hi]`.
fn reflect(mut p: f64, mut v: f64, hi: f64) -> (f64, f64) {
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

impl Generator for GlyphConfig {
    fn name(&self) -> &'static str {
        "moving-glyphs"
    }

    fn config_kv(&self) -> Vec<(String, String)> {
        vec![
            ("num_glyphs".into(), self.num_glyphs.to_string()),
            ("size".into(), self.size.to_string()),
            ("input_len".into(), self.input_len.to_string()),
            ("predict_len".into(), self.predict_len.to_string()),
            ("speed_min".into(), self.speed_min.to_string()),
            ("speed_max".into(), self.speed_max.to_string()),
        ]
    }

    fn frame_shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }

    fn horizon(&self) -> (usize, usize) {
        (self.input_len, self.predict_len)
    }

    fn validate(&self) -> Result<()> {
        GlyphConfig::validate(self)
    }

    fn sequence(&self, seed: u64, index: u64) -> Vec<f64> {
        self.trajectory(seed, index)
            .iter()
            .flat_map(|g| self.render(g))
            .collect()
    }
}

impl GlyphConfig {
    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let num = |k: &str| -> Result<f64> {
            kv_get(kv, k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("missing or bad dataset key {k:?}")))
        };
        Ok(GlyphConfig {
            num_glyphs: num("num_glyphs")? as usize,
            size: num("size")? as usize,
            input_len: num("input_len")? as usize,
            predict_len: num("predict_len")? as usize,
            speed_min: num("speed_min")?,
            speed_max: num("speed_max")?,
            overrides: None,
        })
    }
}
