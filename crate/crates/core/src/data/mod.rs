//! Procedural video datasets and the dataset file format.
//!
//! Every sequence is a pure function of `(seed, index)`: its random draws come
//! from a ChaCha8 stream keyed by the seed and selected by the index, so the
//! output is identical on every platform. Splits use disjoint index ranges.

mod blobs;
mod glyphs;

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blobs::{Blob, BlobConfig, BlobFieldSpec, DEFAULT_THRESHOLD};
pub use glyphs::{num_sprites, sprite_cell, GlyphConfig, GlyphSpec, GLYPH_CELLS};

use crate::codec::{decode_kv, encode_kv, kv_get, read_magic, read_str, read_version, write_atomic, write_str, write_u32, write_u64};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Tensor};

const MAGIC: &[u8; 4] = b"TMUD";
pub const DATASET_VERSION: u32 = 1;

pub(crate) fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A seed-deterministic source of video sequences.
pub trait Generator {
    fn name(&self) -> &'static str;
    fn config_kv(&self) -> Vec<(String, String)>;
    /// `[P, H, W]`
    fn frame_shape(&self) -> [usize; 3];
    /// `(input_len, predict_len)`
    fn horizon(&self) -> (usize, usize);
    fn validate(&self) -> Result<()>;
    /// Row-major `[T, P, H, W]` values of sequence `index`.
    fn sequence(&self, seed: u64, index: u64) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Validation and test sizes follow a 10:2:3 ratio to `train`.
    pub fn from_train(train: usize) -> Self {
        SplitSizes {
            train,
            val: (train / 5).max(1),
            test: (train * 3 / 10).max(1),
        }
    }
}

/// A clip batch `[N, T, P, H, W]` with its input/prediction split.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub frames: Tensor,
    pub input_len: usize,
    pub predict_len: usize,
}

impl SequenceBatch {
    pub fn new(frames: Tensor, input_len: usize, predict_len: usize) -> Result<Self> {
        if frames.rank() != 5 || frames.shape()[1] != input_len + predict_len {
            return Err(Error::config(format!(
                "batch shape {:?} does not hold {input_len}+{predict_len} frames",
                frames.shape()
            )));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("frame values must lie in [0, 1]"));
        }
        Ok(SequenceBatch {
            frames,
            input_len,
            predict_len,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Frame `t` of every clip in a `[N, T, P, H, W]` tensor, as `[N, P, H, W]`.
pub fn frame_at(frames: &Tensor, t: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 5 || t >= s[1] {
        return Err(Error::config(format!("cannot take frame {t} of a tensor shaped {s:?}")));
    }
    let per: usize = s[2..].iter().product();
    let mut data = Vec::with_capacity(s[0] * per);
    for b in 0..s[0] {
        let off = (b * s[1] + t) * per;
        data.extend_from_slice(&frames.data()[off..off + per]);
    }
    Tensor::new(&[s[0], s[2], s[3], s[4]], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub generator: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub input_len: usize,
    pub predict_len: usize,
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
}

impl Dataset {
    pub fn generate(generator: &dyn Generator, seed: u64, sizes: SplitSizes) -> Result<Self> {
        generator.validate()?;
        if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
            return Err(Error::config("every split needs at least one sequence"));
        }
        let (input_len, predict_len) = generator.horizon();
        let [p, h, w] = generator.frame_shape();
        let t = input_len + predict_len;
        let build = |start: usize, count: usize| {
            let mut data = Vec::with_capacity(count * t * p * h * w);
            for i in start..start + count {
                data.extend(generator.sequence(seed, i as u64));
            }
            Tensor::new(&[count, t, p, h, w], data)
        };
        let mut config = generator.config_kv();
        for key in ["input_len", "predict_len"] {
            if kv_get(&config, key).is_none() {
                let v = if key == "input_len" { input_len } else { predict_len };
                config.push((key.to_string(), v.to_string()));
            }
        }
        Ok(Dataset {
            generator: generator.name().to_string(),
            seed,
            config,
            input_len,
            predict_len,
            train: build(0, sizes.train)?,
            val: build(sizes.train, sizes.val)?,
            test: build(sizes.train + sizes.val, sizes.test)?,
        })
    }

    pub fn split(&self, split: Split) -> &Tensor {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.split(split).shape()[0]
    }

    /// `[P, H, W]`
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.train.shape();
        [s[2], s[3], s[4]]
    }

    pub fn seq_len(&self) -> usize {
        self.input_len + self.predict_len
    }

    /// Gathers the clips at `indices` of `split` into one batch.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Result<SequenceBatch> {
        let src = self.split(split);
        let n = src.shape()[0];
        let per: usize = src.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= n {
                return Err(Error::config(format!("sequence {i} out of range for {} split of {n}", split.as_str())));
            }
            data.extend_from_slice(&src.data()[i * per..(i + 1) * per]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = indices.len();
        SequenceBatch::new(Tensor::new(&shape, data)?, self.input_len, self.predict_len)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, DATASET_VERSION)?;
        write_str(w, &self.generator)?;
        write_u64(w, self.seed)?;
        write_str(w, &encode_kv(&self.config))?;
        write_u32(w, 3)?;
        for split in Split::ALL {
            write_str(w, split.as_str())?;
            self.split(split).write_blob(w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, MAGIC, "dataset")?;
        read_version(r, DATASET_VERSION, "dataset")?;
        let generator = read_str(r, "generator name")?;
        let seed = read_u64(r)?;
        let config = decode_kv(&read_str(r, "dataset config")?)?;
        let horizon = |k: &str| -> Result<usize> {
            kv_get(&config, k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("dataset config lacks {k:?}")))
        };
        let (input_len, predict_len) = (horizon("input_len")?, horizon("predict_len")?);
        let count = read_u32(r)?;
        if count != 3 {
            return Err(Error::format(format!("expected 3 splits, found {count}")));
        }
        let mut tensors = Vec::with_capacity(3);
        for split in Split::ALL {
            let name = read_str(r, "split name")?;
            if name != split.as_str() {
                return Err(Error::format(format!("expected split {:?}, found {name:?}", split.as_str())));
            }
            let t = Tensor::read_blob(r)?;
            if t.rank() != 5 || t.shape()[1] != input_len + predict_len {
                return Err(Error::format(format!("split {name} has shape {:?}", t.shape())));
            }
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::format(format!("split {name} holds values outside [0, 1]")));
            }
            tensors.push(t);
        }
        let test = tensors.pop().unwrap();
        let val = tensors.pop().unwrap();
        let train = tensors.pop().unwrap();
        if train.shape()[1..] != val.shape()[1..] || train.shape()[1..] != test.shape()[1..] {
            return Err(Error::format("splits disagree on clip shape"));
        }
        Ok(Dataset {
            generator,
            seed,
            config,
            input_len,
            predict_len,
            train,
            val,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Usage(format!("cannot open dataset {}: {e}", path.display())))?;
        Dataset::read(&mut BufReader::new(f))
    }
}
