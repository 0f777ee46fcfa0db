//! Binary checkpoint format.
//!
//! Little-endian layout, version-gated:
//!
//! ```text
//! magic "SERCKPT\0" | version u8
//! recipe: u32 length + JSON
//! dtype u8 (4 = f32, 8 = f64)
//! params:  u32 count, then per entry: name (u16 len + utf-8),
//!          rank u8, dims u32*, payload
//! buffers: u32 count, same record layout (batch-norm running stats)
//! norm stats: u8 present, then u32 n + mean f64* + std f64*
//! optimizer: u8 present, then u64 step + per param (registry order)
//!            m payload + v payload
//! rng: 32-byte seed + u128 word position
//! epoch u32 | best_ua f64
//! ```
//!
//! Loading rejects version or dtype mismatches outright; a round trip is
//! bit-exact for parameters, moments, and the RNG position.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunRecipe;
use crate::error::{Result, SerError};
use crate::features::NormStats;
use crate::model::SerModel;
use crate::tensor::Element;
use crate::training::{Adam, AdamConfig};

const MAGIC: &[u8; 8] = b"SERCKPT\0";
const VERSION: u8 = 1;

#[derive(Debug)]
pub struct OptimizerState<T: Element> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug)]
pub struct Checkpoint<T: Element> {
    pub recipe: RunRecipe,
    pub params: Vec<(String, Vec<usize>, Vec<T>)>,
    pub buffers: Vec<(String, Vec<T>)>,
    pub norm_stats: Option<NormStats>,
    pub optimizer: Option<OptimizerState<T>>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub epoch: u32,
    pub best_ua: f64,
}

impl<T: Element> Checkpoint<T> {
    /// Snapshot the current training state.
    pub fn capture(
        recipe: &RunRecipe,
        model: &SerModel<T>,
        norm_stats: Option<&NormStats>,
        optimizer: Option<&Adam<T>>,
        rng: &ChaCha8Rng,
        epoch: u32,
        best_ua: f64,
    ) -> Result<Self> {
        let params = model
            .parameters()?
            .iter()
            .map(|p| (p.name().to_string(), p.shape(), p.data()))
            .collect();
        let buffers = model
            .buffers()
            .iter()
            .map(|b| (b.name().to_string(), b.get()))
            .collect();
        let optimizer = optimizer.map(|o| {
            let (m, v) = o.moments();
            OptimizerState {
                step: o.step_count(),
                m: m.to_vec(),
                v: v.to_vec(),
            }
        });
        Ok(Checkpoint {
            recipe: recipe.clone(),
            params,
            buffers,
            norm_stats: norm_stats.cloned(),
            optimizer,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            epoch,
            best_ua,
        })
    }

    /// Rebuild the model and overwrite its parameters and buffers with the
    /// checkpointed values (matched by name).
    pub fn build_model(&self) -> Result<SerModel<T>> {
        // Construction draws from a throwaway RNG; every value is replaced.
        let mut init_rng = ChaCha8Rng::seed_from_u64(0);
        let model = SerModel::new(&mut init_rng, &self.recipe.model)?;
        let by_name: std::collections::HashMap<&str, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n.as_str(), i))
            .collect();
        let live = model.parameters()?;
        if live.len() != self.params.len() {
            return Err(SerError::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                live.len()
            )));
        }
        for p in live {
            let &idx = by_name.get(p.name()).ok_or_else(|| {
                SerError::Data(format!("checkpoint missing parameter `{}`", p.name()))
            })?;
            let (_, shape, data) = &self.params[idx];
            if *shape != p.shape() {
                return Err(SerError::Data(format!(
                    "parameter `{}` shape {:?} != checkpoint {:?}",
                    p.name(),
                    p.shape(),
                    shape
                )));
            }
            p.set_data(data.clone());
        }
        let buf_by_name: std::collections::HashMap<&str, usize> = self
            .buffers
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.as_str(), i))
            .collect();
        for b in model.buffers() {
            let &idx = buf_by_name.get(b.name()).ok_or_else(|| {
                SerError::Data(format!("checkpoint missing buffer `{}`", b.name()))
            })?;
            b.set(self.buffers[idx].1.clone());
        }
        Ok(model)
    }

    pub fn build_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Rebuild the optimizer (moments aligned with the model's registry).
    pub fn build_optimizer(&self, model: &SerModel<T>) -> Result<Option<Adam<T>>> {
        let Some(state) = &self.optimizer else {
            return Ok(None);
        };
        let params = model.parameters()?;
        let mut adam = Adam::new(
            AdamConfig {
                weight_decay: self.recipe.train.weight_decay,
                ..AdamConfig::default()
            },
            &params,
        );
        adam.restore(state.step, state.m.clone(), state.v.clone());
        Ok(Some(adam))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let recipe = serde_json::to_vec(&self.recipe).expect("recipe serializes");
        out.extend_from_slice(&(recipe.len() as u32).to_le_bytes());
        out.extend_from_slice(&recipe);
        out.push(T::DTYPE.byte_width() as u8);

        let write_record = |out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[T]| {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes_vec());
            }
        };

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, dims, data) in &self.params {
            write_record(&mut out, name, dims, data);
        }
        out.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        for (name, data) in &self.buffers {
            write_record(&mut out, name, &[data.len()], data);
        }

        match &self.norm_stats {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
                for &v in &s.mean {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for &v in &s.std {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }

        match &self.optimizer {
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    for &x in m {
                        out.extend_from_slice(&x.to_le_bytes_vec());
                    }
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes_vec());
                    }
                }
            }
            None => out.push(0),
        }

        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_ua.to_le_bytes());

        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut c = Cursor { buf: &bytes, pos: 0 };
        if c.take(8, "magic")? != MAGIC {
            return Err(SerError::Parse {
                offset: 0,
                detail: "bad checkpoint magic".into(),
            });
        }
        let version = c.u8("version")?;
        if version != VERSION {
            return Err(SerError::Parse {
                offset: 8,
                detail: format!("unsupported checkpoint version {version} (expected {VERSION})"),
            });
        }
        let recipe_len = c.u32("recipe length")? as usize;
        let recipe_at = c.pos;
        let recipe: RunRecipe = serde_json::from_slice(c.take(recipe_len, "recipe")?)
            .map_err(|e| SerError::Parse {
                offset: recipe_at as u64,
                detail: format!("recipe json: {e}"),
            })?;
        let dtype_at = c.pos;
        let dtype = c.u8("dtype")?;
        if dtype as usize != T::DTYPE.byte_width() {
            return Err(SerError::Parse {
                offset: dtype_at as u64,
                detail: format!(
                    "element width {dtype} bytes does not match the requested {}-byte load",
                    T::DTYPE.byte_width()
                ),
            });
        }
        let width = T::DTYPE.byte_width();

        let read_record = |c: &mut Cursor| -> Result<(String, Vec<usize>, Vec<T>)> {
            let name_len = c.u16("name length")? as usize;
            let at = c.pos;
            let name = String::from_utf8(c.take(name_len, "name")?.to_vec()).map_err(|e| {
                SerError::Parse {
                    offset: at as u64,
                    detail: format!("name not utf-8: {e}"),
                }
            })?;
            let rank = c.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(c.u32("dim")? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = c.take(numel * width, "payload")?;
            let data = raw.chunks(width).map(T::from_le_slice).collect();
            Ok((name, dims, data))
        };

        let n_params = c.u32("param count")? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(read_record(&mut c)?);
        }
        let n_buffers = c.u32("buffer count")? as usize;
        let mut buffers = Vec::with_capacity(n_buffers);
        for _ in 0..n_buffers {
            let (name, _, data) = read_record(&mut c)?;
            buffers.push((name, data));
        }

        let norm_stats = if c.u8("stats flag")? == 1 {
            let n = c.u32("stats length")? as usize;
            let mut mean = Vec::with_capacity(n);
            for _ in 0..n {
                mean.push(c.f64("stats mean")?);
            }
            let mut std = Vec::with_capacity(n);
            for _ in 0..n {
                std.push(c.f64("stats std")?);
            }
            Some(NormStats { mean, std })
        } else {
            None
        };

        let optimizer = if c.u8("optimizer flag")? == 1 {
            let step = c.u64("optimizer step")?;
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for (_, dims, _) in &params {
                let numel: usize = dims.iter().product();
                let raw_m = c.take(numel * width, "first moment")?;
                m.push(raw_m.chunks(width).map(T::from_le_slice).collect());
                let raw_v = c.take(numel * width, "second moment")?;
                v.push(raw_v.chunks(width).map(T::from_le_slice).collect());
            }
            Some(OptimizerState { step, m, v })
        } else {
            None
        };

        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(c.take(32, "rng seed")?);
        let rng_word_pos = u128::from_le_bytes(c.take(16, "rng position")?.try_into().unwrap());
        let epoch = c.u32("epoch")?;
        let best_ua = c.f64("best ua")?;
        Ok(Checkpoint {
            recipe,
            params,
            buffers,
            norm_stats,
            optimizer,
            rng_seed,
            rng_word_pos,
            epoch,
            best_ua,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SerError::Parse {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
