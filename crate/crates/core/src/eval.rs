//! Monte Carlo decoder evaluation with paired trials.
//!
//! Every trial index owns a fixed RNG stream derived from the evaluation
//! seed, so two decoders run with the same seed face exactly the same error
//! samples and their scores differ only by decoding quality. Tallies from
//! disjoint trial ranges merge by plain addition, which is what makes the
//! worker split exact rather than approximate.

use std::ops::Range;
use std::time::Instant;

use crate::decoders::TrialDecoder;
use crate::error::{Error, Result};
use crate::lattice::ToricCode;
use crate::noise::{record_rng, DepolarizingChannel};
use crate::wire::sha256_hex;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

/// Trials per decode call: bounds the memory held in flight while letting
/// batching decoders amortize a whole forward pass.
const DECODE_CHUNK: usize = 512;

/// Wilson score interval at 95% confidence for `events` out of `total`.
/// Stays inside [0, 1] and remains informative at zero counts, which is why
/// it is used instead of the normal approximation: desk-scale logical error
/// rates sit near zero. Returns (0, 1) when there is no data.
pub fn wilson_interval(events: u64, total: u64) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let n = total as f64;
    let phat = events as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (phat + z2 / (2.0 * n)) / denom;
    let half = (Z95 / denom) * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt();
    // At zero or full counts, center and half are equal on paper but not in
    // floating point; the extra clamp keeps the point estimate inside.
    let lo = (center - half).max(0.0).min(phat);
    let hi = (center + half).min(1.0).max(phat);
    (lo, hi)
}

/// Parameters of one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    pub p: f64,
    pub trials: u64,
    pub seed: u64,
    /// Measure decode wall time. Off by default: timing is the one
    /// nondeterministic column, and leaving it zero keeps reruns
    /// byte-identical.
    pub timing: bool,
    pub workers: usize,
}

impl EvalSpec {
    pub fn new(p: f64, trials: u64, seed: u64) -> Self {
        EvalSpec { p, trials, seed, timing: false, workers: 1 }
    }
}

pub const CSV_HEADER: &str =
    "decoder,L,p,trials,ber,ber_lo,ber_hi,ler,ler_lo,ler_hi,ns_per_decode,config_hash";

/// One line of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub decoder: String,
    pub l: usize,
    pub p: f64,
    pub trials: u64,
    pub ber: f64,
    pub ber_lo: f64,
    pub ber_hi: f64,
    pub ler: f64,
    pub ler_lo: f64,
    pub ler_hi: f64,
    pub ns_per_decode: u64,
    pub config_hash: String,
}

impl EvalRow {
    pub fn validate(&self) -> Result<()> {
        if self.decoder.is_empty() || self.decoder.contains(',') {
            return Err(Error::config(format!("bad decoder name {:?}", self.decoder)));
        }
        if self.config_hash.is_empty() || self.config_hash.contains(',') {
            return Err(Error::config(format!("bad config hash {:?}", self.config_hash)));
        }
        if self.trials == 0 {
            return Err(Error::config("row reports zero trials"));
        }
        for (name, lo, mid, hi) in [
            ("ber", self.ber_lo, self.ber, self.ber_hi),
            ("ler", self.ler_lo, self.ler, self.ler_hi),
        ] {
            let ordered = 0.0 <= lo && lo <= mid && mid <= hi && hi <= 1.0;
            if !ordered {
                return Err(Error::config(format!(
                    "{name} interval [{lo}, {hi}] does not bracket {mid} inside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.decoder,
            self.l,
            self.p,
            self.trials,
            self.ber,
            self.ber_lo,
            self.ber_hi,
            self.ler,
            self.ler_lo,
            self.ler_hi,
            self.ns_per_decode,
            self.config_hash
        )
    }
}

/// Evaluation result: the CSV row plus the raw counts behind it.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub row: EvalRow,
    /// Mismatched bits between correction and truth, summed over trials.
    pub ber_events: u64,
    /// Trials whose residual had a nonzero syndrome or logical effect.
    pub failures: u64,
    /// Failures where the decoder errored instead of mis-correcting.
    pub exceptions: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    trials: u64,
    ber_events: u64,
    failures: u64,
    exceptions: u64,
    decode_ns: u128,
}

impl Tally {
    fn absorb(&mut self, other: Tally) {
        self.trials += other.trials;
        self.ber_events += other.ber_events;
        self.failures += other.failures;
        self.exceptions += other.exceptions;
        self.decode_ns += other.decode_ns;
    }
}

fn run_range(
    decoder: &dyn TrialDecoder,
    code: &ToricCode,
    channel: &DepolarizingChannel,
    spec: &EvalSpec,
    range: Range<u64>,
) -> Tally {
    let width = 2 * code.n() as u64;
    let mut tally = Tally::default();
    let mut at = range.start;
    while at < range.end {
        let batch = DECODE_CHUNK.min((range.end - at) as usize);
        let mut truths = Vec::with_capacity(batch);
        let mut syndromes = Vec::with_capacity(batch);
        for t in at..at + batch as u64 {
            let mut rng = record_rng(spec.seed, t);
            let err = channel.sample(code, &mut rng);
            syndromes.push(code.syndrome_of(&err));
            truths.push(err);
        }
        let started = spec.timing.then(Instant::now);
        let verdicts = decoder.decode_trials(code, &syndromes, &truths);
        if let Some(t0) = started {
            tally.decode_ns += t0.elapsed().as_nanos();
        }
        let mut verdicts = verdicts.into_iter();
        for truth in &truths {
            match verdicts.next() {
                Some(Ok(mut correction)) if correction.n() == code.n() => {
                    correction.xor_assign(truth);
                    tally.ber_events += correction.bits().weight() as u64;
                    let clean = code.syndrome_of(&correction).is_trivial()
                        && code.logical_effect(&correction).is_zero();
                    if !clean {
                        tally.failures += 1;
                    }
                }
                _ => {
                    tally.exceptions += 1;
                    tally.failures += 1;
                    tally.ber_events += width;
                }
            }
        }
        tally.trials += batch as u64;
        at += batch as u64;
    }
    tally
}

fn split_ranges(total: u64, workers: usize) -> Vec<Range<u64>> {
    let w = workers as u64;
    let base = total / w;
    let extra = total % w;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for i in 0..w {
        let len = base + u64::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Digest identifying the run configuration: decoder identity and
/// parameters, code size, rate, trial count, and seed. Sixteen hex digits of
/// SHA-256 over the canonical JSON encoding.
pub fn eval_config_hash(decoder: &dyn TrialDecoder, l: usize, spec: &EvalSpec) -> String {
    let desc = serde_json::json!({
        "decoder": decoder.name(),
        "decoder_metadata": decoder.metadata(),
        "l": l,
        "p": spec.p,
        "trials": spec.trials,
        "seed": spec.seed,
    });
    sha256_hex(desc.to_string().as_bytes())[..16].to_string()
}

/// Runs `spec.trials` paired Monte Carlo trials of one decoder.
///
/// Trial `t` draws its error from the RNG stream `t` of `spec.seed`,
/// computes the syndrome, asks the decoder for a correction, and scores the
/// residual (correction xor truth): every mismatched bit counts toward the
/// bit error rate, and the trial counts as a logical failure when the
/// residual has a nonzero syndrome or a nonzero logical effect. A decoder
/// error (or a wrong-size correction) counts as a failure with every bit
/// wrong, and is additionally tallied under `exceptions`.
pub fn evaluate(
    decoder: &dyn TrialDecoder,
    code: &ToricCode,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    let channel = DepolarizingChannel::new(spec.p)?;
    if spec.trials < 1_000 {
        return Err(Error::config(format!(
            "{} trials requested; estimates need at least 1000",
            spec.trials
        )));
    }
    if spec.workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }

    let tally = if spec.workers == 1 {
        run_range(decoder, code, &channel, spec, 0..spec.trials)
    } else {
        let ranges = split_ranges(spec.trials, spec.workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges
                .into_iter()
                .map(|r| scope.spawn(|| run_range(decoder, code, &channel, spec, r)))
                .collect();
            let mut total = Tally::default();
            for h in handles {
                total.absorb(h.join().expect("evaluation worker panicked"));
            }
            total
        })
    };

    let width = 2 * code.n() as u64;
    let bit_total = tally.trials * width;
    let (ber_lo, ber_hi) = wilson_interval(tally.ber_events, bit_total);
    let (ler_lo, ler_hi) = wilson_interval(tally.failures, tally.trials);
    let row = EvalRow {
        decoder: decoder.name(),
        l: code.l(),
        p: spec.p,
        trials: tally.trials,
        ber: tally.ber_events as f64 / bit_total as f64,
        ber_lo,
        ber_hi,
        ler: tally.failures as f64 / tally.trials as f64,
        ler_lo,
        ler_hi,
        ns_per_decode: if spec.timing {
            (tally.decode_ns / tally.trials as u128) as u64
        } else {
            0
        },
        config_hash: eval_config_hash(decoder, code.l(), spec),
    };
    row.validate()?;
    Ok(EvalReport {
        row,
        ber_events: tally.ber_events,
        failures: tally.failures,
        exceptions: tally.exceptions,
    })
}

/// Renders rows under the fixed header, preceded by `#`-prefixed comment
/// lines (used to echo the resolved configuration into the artifact).
/// Numbers use the shortest representation that parses back exactly, so a
/// write/read round trip is lossless.
pub fn rows_to_csv(comments: &[String], rows: &[EvalRow]) -> String {
    let mut out = String::new();
    for comment in comments {
        for line in comment.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(raw: &str, line: usize, name: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::io(format!("evaluation csv line {line}: bad {name} value {raw:?}"))
    })
}

/// Parses an evaluation CSV, skipping blank and `#` comment lines. The
/// header must match [`CSV_HEADER`] exactly and every row is revalidated.
pub fn rows_from_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(Error::io(format!(
                    "evaluation csv line {}: expected header {CSV_HEADER:?}, found {line:?}",
                    idx + 1
                )));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::io(format!(
                "evaluation csv line {}: {} fields, expected 12",
                idx + 1,
                f.len()
            )));
        }
        let n = idx + 1;
        let row = EvalRow {
            decoder: f[0].to_string(),
            l: field(f[1], n, "L")?,
            p: field(f[2], n, "p")?,
            trials: field(f[3], n, "trials")?,
            ber: field(f[4], n, "ber")?,
            ber_lo: field(f[5], n, "ber_lo")?,
            ber_hi: field(f[6], n, "ber_hi")?,
            ler: field(f[7], n, "ler")?,
            ler_lo: field(f[8], n, "ler_lo")?,
            ler_hi: field(f[9], n, "ler_hi")?,
            ns_per_decode: field(f[10], n, "ns_per_decode")?,
            config_hash: f[11].to_string(),
        };
        row.validate()
            .map_err(|e| Error::io(format!("evaluation csv line {n}: {e}")))?;
        rows.push(row);
    }
    if !saw_header {
        return Err(Error::io("evaluation csv has no header line"));
    }
    Ok(rows)
}
