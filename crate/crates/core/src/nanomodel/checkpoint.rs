//! Versioned binary checkpoint.
//!
//! ```text
//! "VLAC" u32:version
//! u32:len config-json   [64]config-digest-hex
//! u32:len meta-json
//! u64:n f64[n] params
//! u8:has_opt [u64:t f64[n] m f64[n] v]
//! [32]rng-seed u64:rng-stream u128:rng-word-pos
//! ```
//! All integers and floats little endian.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{AdamState, Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VLAC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub rng: RngState,
    /// Free-form run metadata (layout, vocabulary digest, step, ...).
    pub meta: serde_json::Value,
}

fn w_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(w_err(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(w_err(path))?;
        w.flush().map_err(w_err(path))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let cfg = serde_json::to_vec(&self.model.config).expect("config serializes");
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(self.model.config.digest().as_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        write_f64s(w, &self.model.params)?;
        match &self.optimizer {
            Some(opt) => {
                w.write_all(&[1])?;
                w.write_all(&opt.t.to_le_bytes())?;
                write_f64s(w, &opt.m)?;
                write_f64s(w, &opt.v)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())
    }

    /// Loads a checkpoint, refusing it when its config differs from `expected`.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(w_err(path))?;
        Checkpoint::read_from(&mut BufReader::new(f), expected)
    }

    pub fn read_from<R: Read>(r: &mut R, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut magic = [0u8; 4];
        read(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = read_u32(r)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        read(r, &mut cfg_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
        let mut digest = [0u8; 64];
        read(r, &mut digest)?;
        let digest = String::from_utf8_lossy(&digest).to_string();
        if digest != config.digest() {
            return Err(Error::data("checkpoint config digest does not match its config"));
        }
        if let Some(exp) = expected {
            if exp.digest() != digest {
                return Err(Error::config(format!(
                    "checkpoint config {config:?} does not match expected config {exp:?}"
                )));
            }
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read(r, &mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let params = read_f64s(r)?;
        let model = Model::from_params(config, params)?;
        let mut flag = [0u8; 1];
        read(r, &mut flag)?;
        let optimizer = if flag[0] == 1 {
            let mut t = [0u8; 8];
            read(r, &mut t)?;
            let m = read_f64s(r)?;
            let v = read_f64s(r)?;
            if m.len() != model.params.len() || v.len() != model.params.len() {
                return Err(Error::data("optimizer state length differs from parameter count"));
            }
            Some(AdamState {
                m,
                v,
                t: u64::from_le_bytes(t),
            })
        } else {
            None
        };
        let mut seed = [0u8; 32];
        read(r, &mut seed)?;
        let mut stream = [0u8; 8];
        read(r, &mut stream)?;
        let mut pos = [0u8; 16];
        read(r, &mut pos)?;
        Ok(Checkpoint {
            model,
            optimizer,
            rng: RngState {
                seed,
                stream: u64::from_le_bytes(stream),
                word_pos: u128::from_le_bytes(pos),
            },
            meta,
        })
    }
}

fn read<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::data(format!("truncated checkpoint: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let mut n = [0u8; 8];
    read(r, &mut n)?;
    let n = u64::from_le_bytes(n) as usize;
    let mut buf = vec![0u8; n * 8];
    read(r, &mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 16,
            visual_patch_size: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn roundtrip_and_config_guard() {
        let model = Model::init(tiny(), 3).unwrap();
        let mut opt = AdamState::new(model.n_params());
        opt.t = 7;
        opt.m[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rand::RngCore::next_u64(&mut rng);
        let ck = Checkpoint {
            model,
            optimizer: Some(opt),
            rng: RngState::capture(&rng),
            meta: serde_json::json!({"step": 7}),
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice(), Some(&tiny())).unwrap();
        assert_eq!(back, ck);
        assert_eq!(rand::RngCore::next_u64(&mut back.rng.restore()), rand::RngCore::next_u64(&mut rng.clone()));

        let other = ModelConfig { embed_dim: 16, ..tiny() };
        assert!(matches!(Checkpoint::read_from(&mut buf.as_slice(), Some(&other)), Err(Error::Config(_))));
        assert!(Checkpoint::read_from(&mut &buf[..40], None).is_err());
    }
}
