//! Syndrome decoders and the interfaces the evaluation harness drives.

pub mod bp;
pub mod defect;
mod matching;
pub mod mwpm;

pub use bp::{bp_decode, BpDecoder, BpOutcome};
pub use defect::{blossom_min_matching, shortest_toroidal_path, toroidal_distance, DefectGraph, Matching};
pub use mwpm::{mwpm_decode, MwpmDecoder, MwpmVariant};

use crate::error::Result;
use crate::lattice::{PauliError, Syndrome, ToricCode};

/// A syndrome decoder: proposes a correction whose syndrome should reproduce
/// the input. Implementations must be safe to share across threads.
pub trait Decoder: Sync {
    fn name(&self) -> String;
    fn decode(&self, code: &ToricCode, syndrome: &Syndrome) -> Result<PauliError>;

    /// One verdict per syndrome, in order. Decoders that amortize work
    /// across calls (the neural decoder batches a whole forward pass)
    /// override this; each verdict must match what `decode` would return.
    fn decode_batch(&self, code: &ToricCode, syndromes: &[Syndrome]) -> Vec<Result<PauliError>> {
        syndromes.iter().map(|s| self.decode(code, s)).collect()
    }

    /// Algorithm identity and parameters, echoed into evaluation artifacts.
    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({})
    }
}

/// Decoder interface for paired Monte Carlo trials. The sampled error is
/// passed alongside the syndrome so that reference decoders (the clairvoyant
/// bound, in particular) can be driven by the same harness; real decoders
/// ignore it.
pub trait TrialDecoder: Sync {
    fn name(&self) -> String;
    fn decode_trial(
        &self,
        code: &ToricCode,
        syndrome: &Syndrome,
        truth: &PauliError,
    ) -> Result<PauliError>;

    /// Batched form of `decode_trial`; `truths` aligns with `syndromes`.
    fn decode_trials(
        &self,
        code: &ToricCode,
        syndromes: &[Syndrome],
        truths: &[PauliError],
    ) -> Vec<Result<PauliError>> {
        syndromes
            .iter()
            .zip(truths)
            .map(|(s, t)| self.decode_trial(code, s, t))
            .collect()
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({})
    }
}

impl<D: Decoder> TrialDecoder for D {
    fn name(&self) -> String {
        Decoder::name(self)
    }

    fn decode_trial(
        &self,
        code: &ToricCode,
        syndrome: &Syndrome,
        _truth: &PauliError,
    ) -> Result<PauliError> {
        self.decode(code, syndrome)
    }

    fn decode_trials(
        &self,
        code: &ToricCode,
        syndromes: &[Syndrome],
        _truths: &[PauliError],
    ) -> Vec<Result<PauliError>> {
        self.decode_batch(code, syndromes)
    }

    fn metadata(&self) -> serde_json::Value {
        Decoder::metadata(self)
    }
}

/// Returns the identity correction regardless of the syndrome; its logical
/// error rate is the raw chance that noise alone walks a logical operator,
/// so it upper-bounds any useful decoder.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl Decoder for IdentityDecoder {
    fn name(&self) -> String {
        "identity".into()
    }

    fn decode(&self, code: &ToricCode, _syndrome: &Syndrome) -> Result<PauliError> {
        Ok(PauliError::identity(code.n()))
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({"algorithm": "identity (no correction)"})
    }
}

/// Clairvoyant reference: returns the sampled error itself, giving zero
/// failure rate by construction. Used to validate the evaluation harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectOracle;

impl TrialDecoder for PerfectOracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn decode_trial(
        &self,
        _code: &ToricCode,
        _syndrome: &Syndrome,
        truth: &PauliError,
    ) -> Result<PauliError> {
        Ok(truth.clone())
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({"algorithm": "clairvoyant oracle (returns the sampled error)"})
    }
}
