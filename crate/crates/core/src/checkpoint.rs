//! Checkpoint files: configuration, named tensors, optimizer and RNG state.
//!
//! Layout: magic `TMUC`, `u32` version, length-prefixed `key=value` config
//! text, `u32` tensor count followed by (name, tensor blob) pairs, a flag byte
//! and optional Adam state, a flag byte and optional ChaCha8 stream position.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{
    decode_kv, encode_kv, kv_get, read_f64, read_magic, read_str, read_version, write_atomic, write_f64, write_str,
    write_u32, write_u64,
};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{read_exact, read_u32, read_u64, Tensor};

const MAGIC: &[u8; 4] = b"TMUC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        kv_get(&self.config, key)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(format!("checkpoint lacks config key {key:?}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, CHECKPOINT_VERSION)?;
        write_str(w, &encode_kv(&self.config))?;
        write_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            t.write_blob(w)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(a) => {
                w.write_all(&[1])?;
                write_u64(w, a.step)?;
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    write_f64(w, v)?;
                }
                write_u32(w, a.m.len() as u32)?;
                for t in a.m.iter().chain(&a.v) {
                    t.write_blob(w)?;
                }
            }
        }
        match &self.rng {
            None => w.write_all(&[0])?,
            Some(r) => {
                w.write_all(&[1])?;
                w.write_all(&r.seed)?;
                write_u64(w, r.stream)?;
                w.write_all(&r.word_pos.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        read_magic(r, MAGIC, "checkpoint")?;
        read_version(r, CHECKPOINT_VERSION, "checkpoint")?;
        let config = decode_kv(&read_str(r, "checkpoint config")?)?;
        let n = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = read_str(r, "tensor name")?;
            tensors.push((name, Tensor::read_blob(r)?));
        }
        let optimizer = match read_flag(r)? {
            false => None,
            true => {
                let step = read_u64(r)?;
                let lr = read_f64(r)?;
                let beta1 = read_f64(r)?;
                let beta2 = read_f64(r)?;
                let eps = read_f64(r)?;
                let k = read_u32(r)? as usize;
                if k > n {
                    return Err(Error::format(format!("optimizer holds {k} moments for {n} tensors")));
                }
                let m = (0..k).map(|_| Tensor::read_blob(r)).collect::<Result<Vec<_>>>()?;
                let v = (0..k).map(|_| Tensor::read_blob(r)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    step,
                    m,
                    v,
                })
            }
        };
        let rng = match read_flag(r)? {
            false => None,
            true => {
                let mut seed = [0u8; 32];
                read_exact(r, &mut seed, "rng seed")?;
                let stream = read_u64(r)?;
                let mut pos = [0u8; 16];
                read_exact(r, &mut pos, "rng position")?;
                Some(RngState {
                    seed,
                    stream,
                    word_pos: u128::from_le_bytes(pos),
                })
            }
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            tensors,
            optimizer,
            rng,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)
            .map_err(|e| Error::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
        Checkpoint::read(&mut BufReader::new(f))
    }
}

fn read_flag<R: Read>(r: &mut R) -> Result<bool> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, "flag")?;
    match b[0] {
        0 => Ok(false),
        1 => Ok(true),
        x => Err(Error::format(format!("invalid flag byte {x}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(&[2, 1], vec![0.25, -1.5]).unwrap()).unwrap();
        store.insert("b", Tensor::scalar(3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        rng.next_u64();
        let mut adam = AdamState::new(&store, 1e-3);
        adam.step = 7;
        adam.m[0].data_mut()[1] = 0.5;
        Checkpoint {
            config: vec![("mode".into(), "transfer".into()), ("seed".into(), "9".into())],
            tensors: store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: Some(adam),
            rng: Some(RngState::capture(&rng)),
        }
    }

    #[test]
    fn save_load_save_is_bitwise_stable() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tmuc");
        c.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        rng.set_stream(3);
        rng.next_u32();
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        assert_eq!(rng.next_u64(), resumed.next_u64());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(Checkpoint::read(&mut bad.as_slice()).unwrap_err().to_string().contains("bad magic"));
        let mut ver = bytes.clone();
        ver[4] = 9;
        let e = Checkpoint::read(&mut ver.as_slice()).unwrap_err().to_string();
        assert!(e.contains('9') && e.contains('1'), "{e}");
        assert!(matches!(Checkpoint::read(&mut &bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::read(&mut long.as_slice()).is_err());
    }

    #[test]
    fn minimal_checkpoint_roundtrip() {
        let c = Checkpoint {
            config: vec![],
            tensors: vec![],
            optimizer: None,
            rng: None,
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::read(&mut bytes.as_slice()).unwrap(), c);
    }
}
