//! Depolarizing noise and reproducible sample datasets.
//!
//! Each dataset record carries its own RNG stream: the generator is ChaCha8
//! seeded by the master seed with the record index as the stream id. Content
//! is therefore a pure function of (master seed, record index), independent
//! of generation order or parallelism, and any record can be re-derived in
//! isolation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::BitVec;
use crate::error::{Error, Result};
use crate::lattice::{Pauli, PauliError, Syndrome, ToricCode};
use crate::wire::{sha256_hex, Reader, Writer};

const MAGIC: &[u8; 4] = b"TSND";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
pub struct DepolarizingChannel {
    p: f64,
}

impl DepolarizingChannel {
    pub fn new(p: f64) -> Result<Self> {
        if !p.is_finite() || !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "depolarizing rate p={p} outside [0, 1)"
            )));
        }
        Ok(DepolarizingChannel { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Draws one error: independently per qubit, X, Y, Z each with
    /// probability p/3. Consumes exactly one uniform per qubit, in edge-id
    /// order.
    pub fn sample(&self, code: &ToricCode, rng: &mut impl Rng) -> PauliError {
        let mut err = PauliError::identity(code.n());
        let third = self.p / 3.0;
        for edge in 0..code.n() {
            let u: f64 = rng.random();
            let pauli = if u < third {
                Pauli::X
            } else if u < 2.0 * third {
                Pauli::Y
            } else if u < self.p {
                Pauli::Z
            } else {
                Pauli::I
            };
            err.apply(edge, pauli);
        }
        err
    }
}

/// RNG for one dataset record or Monte Carlo trial.
pub fn record_rng(master_seed: u64, record_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(record_index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the dataset's rate list.
    pub p_index: u32,
    /// Record index; doubles as the RNG stream id.
    pub seed_id: u64,
    pub error: PauliError,
    pub syndrome: Syndrome,
    pub logical: BitVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub l: usize,
    pub rates: Vec<f64>,
    pub count_per_rate: u64,
    pub master_seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn rate_of(&self, sample: &Sample) -> f64 {
        self.rates[sample.p_index as usize]
    }
}

fn validate_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::config("rate list is empty"));
    }
    for &p in rates {
        DepolarizingChannel::new(p)?;
    }
    Ok(())
}

/// Generates `count_per_rate` samples per rate, interleaved round-robin so
/// that every prefix of the record stream is balanced across rates.
pub fn generate_dataset(
    code: &ToricCode,
    rates: &[f64],
    count_per_rate: u64,
    master_seed: u64,
) -> Result<Dataset> {
    validate_rates(rates)?;
    if count_per_rate == 0 {
        return Err(Error::config("count per rate must be at least 1"));
    }
    let channels: Vec<DepolarizingChannel> = rates
        .iter()
        .map(|&p| DepolarizingChannel::new(p))
        .collect::<Result<_>>()?;
    let total = count_per_rate * rates.len() as u64;
    let mut samples = Vec::with_capacity(total as usize);
    for t in 0..total {
        let p_index = (t % rates.len() as u64) as u32;
        let mut rng = record_rng(master_seed, t);
        let error = channels[p_index as usize].sample(code, &mut rng);
        let syndrome = code.syndrome_of(&error);
        let logical = code.logical_effect(&error);
        samples.push(Sample { p_index, seed_id: t, error, syndrome, logical });
    }
    Ok(Dataset {
        l: code.l(),
        rates: rates.to_vec(),
        count_per_rate,
        master_seed,
        samples,
    })
}

pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u32(ds.l as u32);
    w.u32(ds.rates.len() as u32);
    for &p in &ds.rates {
        w.f64(p);
    }
    w.u64(ds.count_per_rate);
    w.u64(ds.master_seed);
    w.u64(ds.samples.len() as u64);
    for s in &ds.samples {
        w.u32(s.p_index);
        w.u64(s.seed_id);
        w.bytes(&s.syndrome.bits().to_bytes());
        w.bytes(&s.error.bits().to_bytes());
        w.bytes(&s.logical.to_bytes());
    }
    w.finish()
}

/// Parses and fully revalidates a dataset image: digest footer, header
/// consistency, and per-record syndrome/logical consistency against the
/// reconstructed code.
pub fn dataset_from_bytes(data: &[u8]) -> Result<(Dataset, ToricCode)> {
    let what = "dataset";
    let mut r = Reader::open(data, MAGIC, VERSION, what)?;
    let l = r.u32(what)? as usize;
    let code = ToricCode::new(l)?;
    let rate_count = r.u32(what)? as usize;
    let mut rates = Vec::with_capacity(rate_count);
    for _ in 0..rate_count {
        rates.push(r.f64(what)?);
    }
    validate_rates(&rates)?;
    let count_per_rate = r.u64(what)?;
    let master_seed = r.u64(what)?;
    let total = r.u64(what)?;
    if total != count_per_rate * rate_count as u64 {
        return Err(Error::io(format!(
            "{what}: record count {total} does not equal rates x count-per-rate"
        )));
    }
    let syn_bytes = code.m().div_ceil(8);
    let err_bytes = (2 * code.n()).div_ceil(8);
    let log_bytes = (2 * code.k()).div_ceil(8);
    let mut samples = Vec::with_capacity(total as usize);
    for t in 0..total {
        let p_index = r.u32(what)?;
        if p_index as usize >= rate_count {
            return Err(Error::io(format!("{what}: record {t} has rate index {p_index} out of range")));
        }
        let seed_id = r.u64(what)?;
        let syndrome = Syndrome::new(BitVec::from_bytes(code.m(), r.take(syn_bytes, what)?)?);
        let error = PauliError::from_bits(BitVec::from_bytes(2 * code.n(), r.take(err_bytes, what)?)?)
            .map_err(|e| Error::io(format!("{what}: record {t}: {e}")))?;
        let logical = BitVec::from_bytes(2 * code.k(), r.take(log_bytes, what)?)?;
        if code.syndrome_of(&error) != syndrome {
            return Err(Error::io(format!("{what}: record {t} syndrome inconsistent with its error")));
        }
        if code.logical_effect(&error) != logical {
            return Err(Error::io(format!("{what}: record {t} logical effect inconsistent with its error")));
        }
        samples.push(Sample { p_index, seed_id, error, syndrome, logical });
    }
    r.done(what)?;
    Ok((
        Dataset { l, rates, count_per_rate, master_seed, samples },
        code,
    ))
}

/// Human-readable companion: per-rate record counts and a defect-count
/// histogram, plus the binary's content hash.
pub fn dataset_summary(ds: &Dataset, binary: &[u8], file_name: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("dataset summary for {file_name}\n"));
    out.push_str(&format!(
        "L={} records={} master_seed={} count_per_rate={}\n",
        ds.l,
        ds.samples.len(),
        ds.master_seed,
        ds.count_per_rate
    ));
    out.push_str(&format!("content_sha256={}\n\n", sha256_hex(binary)));
    out.push_str("rate_index  p         records   mean_defects  mean_error_qubits\n");
    for (i, &p) in ds.rates.iter().enumerate() {
        let recs: Vec<&Sample> = ds.samples.iter().filter(|s| s.p_index as usize == i).collect();
        let mean_defects: f64 =
            recs.iter().map(|s| s.syndrome.bits().weight() as f64).sum::<f64>() / recs.len() as f64;
        let mean_weight: f64 =
            recs.iter().map(|s| s.error.qubit_weight() as f64).sum::<f64>() / recs.len() as f64;
        out.push_str(&format!(
            "{i:<11} {p:<9.5} {:<9} {mean_defects:<13.4} {mean_weight:.4}\n",
            recs.len()
        ));
    }
    out.push_str("\ndefect_count  records\n");
    let max_defects = ds.samples.iter().map(|s| s.syndrome.bits().weight()).max().unwrap_or(0);
    let mut hist = vec![0u64; max_defects + 1];
    for s in &ds.samples {
        hist[s.syndrome.bits().weight()] += 1;
    }
    for (k, count) in hist.iter().enumerate() {
        if *count > 0 {
            out.push_str(&format!("{k:<13} {count}\n"));
        }
    }
    out
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let bytes = dataset_to_bytes(ds);
    std::fs::write(path, &bytes)
        .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))?;
    let summary = dataset_summary(ds, &bytes, &path.display().to_string());
    let summary_path = path.with_extension(format!(
        "{}.txt",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin")
    ));
    std::fs::write(&summary_path, summary)
        .map_err(|e| Error::io(format!("writing {}: {e}", summary_path.display())))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(Dataset, ToricCode)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    dataset_from_bytes(&bytes)
}
