//! Named parameter tensors and checkpoint serialization.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

use super::optim::AdamState;

const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
const CHECKPOINT_VERSION: u32 = 1;

pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Array2<f64>>,
    /// Whether weight decay applies; true for weight matrices, false for
    /// biases, gains, and embedding tables.
    pub decay: bool,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order and is part of the model's serialized identity: the optimizer,
/// gradient vectors, and checkpoints all index parameters by position.
#[derive(Default)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry {
                name: e.name.clone(),
                value: Arc::clone(&e.value),
                decay: e.decay,
            })
            .collect();
        ModelParams { entries, by_name: self.by_name.clone() }
    }
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>, decay: bool) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let index = self.entries.len();
        self.by_name.insert(name.to_string(), index);
        self.entries.push(ParamEntry { name: name.to_string(), value: Arc::new(value), decay });
        Ok(index)
    }

    /// Adds a tensor drawn from a normal(0, std) with resampling outside
    /// two standard deviations.
    pub fn add_init(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let value = Array2::from_shape_fn((rows, cols), |_| truncated_normal(rng, std));
        self.add(name, value, decay)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Array2<f64>>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.entries[index].value)
    }

    /// Copy with one element nudged by `delta`; used for finite differences.
    pub fn perturbed(&self, index: usize, row: usize, col: usize, delta: f64) -> ModelParams {
        let mut copy = self.clone();
        copy.value_mut(index)[[row, col]] += delta;
        copy
    }

    /// Digest of names, shapes, decay flags, and raw values, in order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            hasher.update([0u8, e.decay as u8]);
            hasher.update((e.value.nrows() as u64).to_le_bytes());
            hasher.update((e.value.ncols() as u64).to_le_bytes());
            for v in e.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sample from a normal with the given standard deviation, redrawing any
/// value beyond two standard deviations.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box-Muller from two uniform draws.
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// A trainable-state snapshot: model configuration, progress counters, the
/// parameter tensors, and (optionally) optimizer moments, all serialized
/// with a digest footer so corruption is detected before parsing.
pub struct Checkpoint {
    pub config_json: String,
    pub epoch: u32,
    pub global_step: u64,
    pub master_seed: u64,
    pub best_val_loss: f64,
    pub params: ModelParams,
    pub opt: Option<AdamState>,
}

fn write_array(w: &mut Writer, a: &Array2<f64>) {
    w.u64(a.nrows() as u64);
    w.u64(a.ncols() as u64);
    for v in a.iter() {
        w.f64(*v);
    }
}

fn read_array(r: &mut Reader) -> Result<Array2<f64>> {
    let rows = r.u64("tensor rows")? as usize;
    let cols = r.u64("tensor cols")? as usize;
    if rows.checked_mul(cols).is_none_or(|n| n > (1 << 28)) {
        return Err(Error::io(format!("unreasonable tensor shape {rows}x{cols}")));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64("tensor element")?);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::io(format!("tensor shape: {e}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.config_json);
        w.u32(self.epoch);
        w.u64(self.global_step);
        w.u64(self.master_seed);
        w.f64(self.best_val_loss);
        w.u64(self.params.len() as u64);
        for e in self.params.entries() {
            w.str(&e.name);
            w.u8(e.decay as u8);
            write_array(&mut w, &e.value);
        }
        match &self.opt {
            None => w.u8(0),
            Some(state) => {
                w.u8(1);
                w.u64(state.step);
                for (m, v) in state.m.iter().zip(&state.v) {
                    write_array(&mut w, m);
                    write_array(&mut w, v);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let config_json = r.str("config json")?;
        let epoch = r.u32("epoch")?;
        let global_step = r.u64("global step")?;
        let master_seed = r.u64("master seed")?;
        let best_val_loss = r.f64("best validation loss")?;
        let count = r.u64("parameter count")? as usize;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name = r.str("parameter name")?;
            let decay = match r.u8("decay flag")? {
                0 => false,
                1 => true,
                other => return Err(Error::io(format!("bad decay flag {other}"))),
            };
            let value = read_array(&mut r)?;
            params.add(&name, value, decay)?;
        }
        let opt = match r.u8("optimizer-state flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for i in 0..count {
                    let mi = read_array(&mut r)?;
                    let vi = read_array(&mut r)?;
                    let shape = {
                        let p = &params.entry(i).value;
                        (p.nrows(), p.ncols())
                    };
                    if (mi.nrows(), mi.ncols()) != shape || (vi.nrows(), vi.ncols()) != shape {
                        return Err(Error::io(format!(
                            "optimizer moment shape disagrees with parameter {}",
                            params.entry(i).name
                        )));
                    }
                    m.push(mi);
                    v.push(vi);
                }
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::io(format!("bad optimizer-state flag {other}"))),
        };
        r.done("checkpoint")?;
        Ok(Checkpoint { config_json, epoch, global_step, master_seed, best_val_loss, params, opt })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = ModelParams::new();
        p.add("w", Array2::zeros((2, 2)), true).unwrap();
        assert!(p.add("w", Array2::zeros((1, 1)), false).is_err());
    }

    #[test]
    fn truncated_normal_respects_the_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let std = 0.02;
        let samples: Vec<f64> = (0..20_000).map(|_| truncated_normal(&mut rng, std)).collect();
        assert!(samples.iter().all(|v| v.abs() <= 2.0 * std + 1e-15));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        assert!(mean.abs() < 3e-4, "mean {mean} drifted");
        let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        assert!(
            sd > 0.5 * std && sd < 1.1 * std,
            "spread {sd} inconsistent with requested {std}"
        );
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::new();
        p.add_init("a", 3, 4, 0.02, true, &mut rng).unwrap();
        p.add_init("b", 1, 4, 0.02, false, &mut rng).unwrap();
        let h1 = p.content_hash();
        assert_eq!(h1, p.content_hash());
        p.value_mut(0)[[0, 0]] += 1e-9;
        assert_ne!(h1, p.content_hash());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ModelParams::new();
        params.add_init("w1", 4, 5, 0.02, true, &mut rng).unwrap();
        params.add_init("b1", 1, 5, 0.02, false, &mut rng).unwrap();
        let opt = AdamState {
            step: 17,
            m: vec![Array2::from_elem((4, 5), 0.25), Array2::from_elem((1, 5), -0.5)],
            v: vec![Array2::from_elem((4, 5), 0.125), Array2::from_elem((1, 5), 0.0625)],
        };
        let ck = Checkpoint {
            config_json: "{\"embed\":16}".into(),
            epoch: 3,
            global_step: 444,
            master_seed: 99,
            best_val_loss: 0.123456789,
            params,
            opt: Some(opt),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_json, ck.config_json);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.global_step, 444);
        assert_eq!(back.master_seed, 99);
        assert_eq!(back.best_val_loss, 0.123456789);
        assert_eq!(back.params.content_hash(), ck.params.content_hash());
        let bo = back.opt.as_ref().unwrap();
        assert_eq!(bo.step, 17);
        assert_eq!(bo.m[0], ck.opt.as_ref().unwrap().m[0]);
        assert_eq!(bo.v[1], ck.opt.as_ref().unwrap().v[1]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_checkpoint_is_refused() {
        let ck = Checkpoint {
            config_json: "{}".into(),
            epoch: 0,
            global_step: 0,
            master_seed: 0,
            best_val_loss: f64::INFINITY,
            params: ModelParams::new(),
            opt: None,
        };
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
