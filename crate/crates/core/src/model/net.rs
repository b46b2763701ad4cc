//! The SoftMoE transformer decoder: stencil embedding of the syndrome,
//! masked multi-head attention over edge tokens, dense or soft mixture
//! feed-forward stages, and the three-part training loss.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ModelParams, Var};
use crate::decoders::Decoder;
use crate::error::{Error, Result};
use crate::lattice::{PauliError, Syndrome, ToricCode};

use super::layout::{SyndromeGrid, TokenLayout};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SmoeConfig {
    /// Lattice size; fixes token count 2L² and output width 4L².
    pub l: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// How many blocks at the end of the stack use the soft mixture stage
    /// instead of a dense MLP.
    pub moe_blocks: usize,
    pub experts: usize,
    pub slots_per_expert: usize,
    /// Hidden width of every feed-forward map: experts, dense stages, and
    /// the prediction head.
    pub hidden: usize,
    pub lambda_ber: f64,
    pub lambda_ler: f64,
    pub lambda_os: f64,
}

impl SmoeConfig {
    /// Published configuration: 6 blocks of width 128 with 8 heads, the
    /// final 2 blocks mixing 8 experts x 4 slots, feed-forward width 512.
    pub fn full(l: usize) -> Self {
        SmoeConfig {
            l,
            embed_dim: 128,
            heads: 8,
            blocks: 6,
            moe_blocks: 2,
            experts: 8,
            slots_per_expert: 4,
            hidden: 512,
            lambda_ber: 0.5,
            lambda_ler: 1.0,
            lambda_os: 0.1,
        }
    }

    /// Reduced configuration sized for single-core CPU training.
    pub fn desk(l: usize) -> Self {
        SmoeConfig { embed_dim: 64, heads: 4, blocks: 4, hidden: 128, ..SmoeConfig::full(l) }
    }

    /// Minimal configuration for gradient checks and fast tests.
    pub fn tiny(l: usize) -> Self {
        SmoeConfig {
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            moe_blocks: 1,
            experts: 4,
            slots_per_expert: 2,
            hidden: 32,
            ..SmoeConfig::full(l)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.blocks == 0 || self.hidden == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.moe_blocks > self.blocks {
            return Err(Error::config(format!(
                "{} mixture blocks exceed {} total blocks",
                self.moe_blocks, self.blocks
            )));
        }
        if self.experts == 0 || self.slots_per_expert == 0 {
            return Err(Error::config("expert and slot counts must be positive"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        2 * self.l * self.l
    }

    pub fn output_bits(&self) -> usize {
        4 * self.l * self.l
    }

    pub fn slots(&self) -> usize {
        self.experts * self.slots_per_expert
    }

    fn is_moe_block(&self, b: usize) -> bool {
        b >= self.blocks - self.moe_blocks
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SmoeConfig =
            serde_json::from_str(s).map_err(|e| Error::config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

enum ParamKind {
    Weight,
    Bias,
    Gain,
    Table,
}

fn param_spec(cfg: &SmoeConfig) -> Vec<(String, usize, usize, ParamKind)> {
    use ParamKind::*;
    let d = cfg.embed_dim;
    let h = cfg.hidden;
    let mut spec = vec![
        ("embed.stencil".to_string(), 4, d, Weight),
        ("embed.bias".to_string(), 1, d, Bias),
        ("embed.pos".to_string(), cfg.tokens(), d, Table),
    ];
    for b in 0..cfg.blocks {
        spec.push((format!("block{b}.ln1.gain"), 1, d, Gain));
        spec.push((format!("block{b}.ln1.bias"), 1, d, Bias));
        for proj in ["q", "k", "v", "o"] {
            spec.push((format!("block{b}.attn.w{proj}"), d, d, Weight));
            spec.push((format!("block{b}.attn.b{proj}"), 1, d, Bias));
        }
        spec.push((format!("block{b}.ln2.gain"), 1, d, Gain));
        spec.push((format!("block{b}.ln2.bias"), 1, d, Bias));
        if cfg.is_moe_block(b) {
            spec.push((format!("block{b}.moe.phi"), d, cfg.slots(), Weight));
            for e in 0..cfg.experts {
                spec.push((format!("block{b}.moe.expert{e}.w1"), d, h, Weight));
                spec.push((format!("block{b}.moe.expert{e}.b1"), 1, h, Bias));
                spec.push((format!("block{b}.moe.expert{e}.w2"), h, d, Weight));
                spec.push((format!("block{b}.moe.expert{e}.b2"), 1, d, Bias));
            }
        } else {
            spec.push((format!("block{b}.mlp.w1"), d, h, Weight));
            spec.push((format!("block{b}.mlp.b1"), 1, h, Bias));
            spec.push((format!("block{b}.mlp.w2"), h, d, Weight));
            spec.push((format!("block{b}.mlp.b2"), 1, d, Bias));
        }
    }
    spec.push(("final.ln.gain".to_string(), 1, d, Gain));
    spec.push(("final.ln.bias".to_string(), 1, d, Bias));
    spec.push(("head.w1".to_string(), d, h, Weight));
    spec.push(("head.b1".to_string(), 1, h, Bias));
    spec.push(("head.w2".to_string(), h, cfg.output_bits(), Weight));
    spec.push(("head.b2".to_string(), 1, cfg.output_bits(), Bias));
    spec
}

pub fn init_params(cfg: &SmoeConfig, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, rows, cols, kind) in param_spec(cfg) {
        match kind {
            ParamKind::Weight | ParamKind::Table => {
                params.add_init(&name, rows, cols, INIT_STD, matches!(kind, ParamKind::Weight), &mut rng)?;
            }
            ParamKind::Bias => {
                params.add(&name, Array2::zeros((rows, cols)), false)?;
            }
            ParamKind::Gain => {
                params.add(&name, Array2::ones((rows, cols)), false)?;
            }
        }
    }
    Ok(params)
}

fn check_params_match(cfg: &SmoeConfig, params: &ModelParams) -> Result<()> {
    let spec = param_spec(cfg);
    if spec.len() != params.len() {
        return Err(Error::config(format!(
            "parameter set has {} tensors, the configuration needs {}",
            params.len(),
            spec.len()
        )));
    }
    for (i, (name, rows, cols, kind)) in spec.iter().enumerate() {
        let e = params.entry(i);
        if &e.name != name {
            return Err(Error::config(format!(
                "parameter {i} is named {} where {name} was expected",
                e.name
            )));
        }
        if e.value.nrows() != *rows || e.value.ncols() != *cols {
            return Err(Error::config(format!(
                "parameter {name} has shape {}x{}, expected {rows}x{cols}",
                e.value.nrows(),
                e.value.ncols()
            )));
        }
        let decay = matches!(kind, ParamKind::Weight);
        if e.decay != decay {
            return Err(Error::config(format!("parameter {name} has the wrong decay flag")));
        }
    }
    Ok(())
}

struct Wired<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl<'p> Wired<'p> {
    fn new(g: &mut Graph, params: &'p ModelParams) -> Self {
        let vars = params.entries().iter().map(|e| g.param(&e.value)).collect();
        Wired { params, vars }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::config(format!("model has no parameter named {name}")))
    }
}

/// Per-forward diagnostics: slot inputs for the orthogonality loss, the
/// dispatch and combine weights of each mixture block, and how many
/// expert-slot applications served each sample. For a batched forward the
/// dispatch, combine, and slot matrices stack the samples' blocks row-wise.
#[derive(Default)]
pub struct ForwardTrace {
    pub expert_invocations: usize,
    pub slot_inputs: Vec<Var>,
    pub dispatch: Vec<Array2<f64>>,
    pub combine: Vec<Array2<f64>>,
}

pub struct LossVars {
    pub ber: Var,
    pub ler: Var,
    pub os: Var,
    pub overall: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub ber: f64,
    pub ler: f64,
    pub os: f64,
    pub overall: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            ber: g.value(self.ber)[[0, 0]],
            ler: g.value(self.ler)[[0, 0]],
            os: g.value(self.os)[[0, 0]],
            overall: g.value(self.overall)[[0, 0]],
        }
    }
}

struct SoftmoeOut {
    out: Var,
    slots: Var,
    dispatch: Array2<f64>,
    combine: Array2<f64>,
}

/// Soft mixture stage on normalized tokens `u`, holding `samples` stacked
/// token blocks: dispatch-weight every token into its sample's slots, run
/// each expert over all its slots across the batch at once, and recombine
/// per token.
fn softmoe_mix(
    g: &mut Graph,
    u: Var,
    phi: Var,
    experts: &[[Var; 4]],
    slots_per_expert: usize,
    samples: usize,
) -> Result<SoftmoeOut> {
    let (rows, _) = g.shape(u);
    let tokens = rows / samples;
    let logits = g.matmul(u, phi)?;
    let dispatch = g.group_softmax_cols(logits, tokens)?;
    let slots = g.block_matmul_t(dispatch, u, samples)?;
    let processed = if samples == 1 {
        g.grouped_mlp(slots, experts, slots_per_expert)?
    } else {
        // Regroup slot rows expert-major so each expert crosses the whole
        // batch in one grouped stage, then restore sample-major order.
        let s = experts.len() * slots_per_expert;
        let mut fwd = Vec::with_capacity(samples * s);
        for e in 0..experts.len() {
            for b in 0..samples {
                let base = b * s + e * slots_per_expert;
                fwd.extend(base..base + slots_per_expert);
            }
        }
        let mut inv = Vec::with_capacity(samples * s);
        for b in 0..samples {
            for e in 0..experts.len() {
                let base = e * samples * slots_per_expert + b * slots_per_expert;
                inv.extend(base..base + slots_per_expert);
            }
        }
        let expert_major = g.gather_rows(slots, Arc::new(fwd))?;
        let grouped = g.grouped_mlp(expert_major, experts, samples * slots_per_expert)?;
        g.gather_rows(grouped, Arc::new(inv))?
    };
    let combine = g.softmax_rows(logits)?;
    let out = g.block_matmul(combine, processed, samples)?;
    Ok(SoftmoeOut {
        out,
        slots,
        dispatch: g.value(dispatch).to_owned(),
        combine: g.value(combine).to_owned(),
    })
}

/// Mean cosine similarity between slots assigned to different experts,
/// normalized by 2(n_e - 1)p_s. Zero when all cross-expert slot pairs are
/// orthogonal; n_e p_s / 2 when all slots coincide.
pub fn slot_orthogonality(
    g: &mut Graph,
    slots: Var,
    experts: usize,
    slots_per_expert: usize,
) -> Result<Var> {
    let (s, _) = g.shape(slots);
    if s != experts * slots_per_expert {
        return Err(Error::config(format!(
            "{s} slot rows for {experts} experts x {slots_per_expert} slots"
        )));
    }
    if experts == 1 {
        return Ok(g.constant(Array2::zeros((1, 1))));
    }
    let cross = Arc::new(Array2::from_shape_fn((s, s), |(i, j)| {
        if i / slots_per_expert == j / slots_per_expert {
            0.0
        } else {
            1.0
        }
    }));
    let sim = g.cosine_sim(slots)?;
    let picked = g.mul_const(sim, cross)?;
    let total = g.sum_all(picked)?;
    g.scale(total, 1.0 / (2.0 * (experts as f64 - 1.0) * slots_per_expert as f64))
}

pub struct SmoeModel {
    config: SmoeConfig,
    code: ToricCode,
    layout: TokenLayout,
    params: ModelParams,
}

impl SmoeModel {
    pub fn new(config: SmoeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        SmoeModel::from_params(config, params)
    }

    pub fn from_params(config: SmoeConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        check_params_match(&config, &params)?;
        let code = ToricCode::new(config.l)?;
        let layout = TokenLayout::new(&code);
        Ok(SmoeModel { config, code, layout, params })
    }

    pub fn config(&self) -> &SmoeConfig {
        &self.config
    }

    pub fn code(&self) -> &ToricCode {
        &self.code
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Stencil embedding: each token reads its 4 incident check bits through
    /// a learned 4 x d map, plus bias and per-token position row.
    pub fn embed_with(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        syndrome: &Syndrome,
    ) -> Result<Var> {
        let w = Wired::new(g, params);
        self.embed_wired(g, &w, std::slice::from_ref(syndrome))
    }

    fn embed_wired(&self, g: &mut Graph, w: &Wired, syndromes: &[Syndrome]) -> Result<Var> {
        let m = self.code.m();
        let tokens = self.layout.tokens();
        let samples = syndromes.len();
        let mut row = Array2::zeros((1, samples * m));
        for (b, syndrome) in syndromes.iter().enumerate() {
            let grid = SyndromeGrid::from_syndrome(&self.code, syndrome)?;
            row.slice_mut(ndarray::s![.., b * m..(b + 1) * m]).assign(&grid.to_row());
        }
        let row = g.constant(row);
        let table = if samples == 1 {
            Arc::clone(self.layout.incident_table())
        } else {
            let base = self.layout.incident_table();
            let mut table = Vec::with_capacity(samples * base.len());
            for b in 0..samples {
                table.extend(base.iter().map(|&check| b * m + check));
            }
            Arc::new(table)
        };
        let stencil_in = g.gather_table(row, table, 4)?;
        let projected = g.matmul(stencil_in, w.get("embed.stencil")?)?;
        let biased = g.add_row(projected, w.get("embed.bias")?)?;
        let pos = w.get("embed.pos")?;
        let pos = if samples == 1 {
            pos
        } else {
            let mut tile = Vec::with_capacity(samples * tokens);
            for _ in 0..samples {
                tile.extend(0..tokens);
            }
            g.gather_rows(pos, Arc::new(tile))?
        };
        g.add(biased, pos)
    }

    fn forward_wired(
        &self,
        g: &mut Graph,
        w: &Wired,
        syndromes: &[Syndrome],
    ) -> Result<(Var, ForwardTrace)> {
        let cfg = &self.config;
        let samples = syndromes.len();
        if samples == 0 {
            return Err(Error::config("forward pass needs at least one syndrome"));
        }
        let mut trace = ForwardTrace::default();
        let mut x = self.embed_wired(g, w, syndromes)?;
        for b in 0..cfg.blocks {
            let u = {
                let gain = w.get(&format!("block{b}.ln1.gain"))?;
                let bias = w.get(&format!("block{b}.ln1.bias"))?;
                g.layer_norm(x, gain, bias)?
            };
            let q = {
                let m = g.matmul(u, w.get(&format!("block{b}.attn.wq"))?)?;
                g.add_row(m, w.get(&format!("block{b}.attn.bq"))?)?
            };
            let k = {
                let m = g.matmul(u, w.get(&format!("block{b}.attn.wk"))?)?;
                g.add_row(m, w.get(&format!("block{b}.attn.bk"))?)?
            };
            let v = {
                let m = g.matmul(u, w.get(&format!("block{b}.attn.wv"))?)?;
                g.add_row(m, w.get(&format!("block{b}.attn.bv"))?)?
            };
            let cat =
                g.multi_head_attention(q, k, v, Arc::clone(self.layout.mask()), cfg.heads)?;
            let projected = g.matmul(cat, w.get(&format!("block{b}.attn.wo"))?)?;
            let attn = g.add_row(projected, w.get(&format!("block{b}.attn.bo"))?)?;
            x = g.add(x, attn)?;

            let u2 = {
                let gain = w.get(&format!("block{b}.ln2.gain"))?;
                let bias = w.get(&format!("block{b}.ln2.bias"))?;
                g.layer_norm(x, gain, bias)?
            };
            let ff = if cfg.is_moe_block(b) {
                let phi = w.get(&format!("block{b}.moe.phi"))?;
                let mut experts = Vec::with_capacity(cfg.experts);
                for e in 0..cfg.experts {
                    experts.push([
                        w.get(&format!("block{b}.moe.expert{e}.w1"))?,
                        w.get(&format!("block{b}.moe.expert{e}.b1"))?,
                        w.get(&format!("block{b}.moe.expert{e}.w2"))?,
                        w.get(&format!("block{b}.moe.expert{e}.b2"))?,
                    ]);
                }
                let mixed = softmoe_mix(g, u2, phi, &experts, cfg.slots_per_expert, samples)?;
                trace.expert_invocations += cfg.slots();
                trace.slot_inputs.push(mixed.slots);
                trace.dispatch.push(mixed.dispatch);
                trace.combine.push(mixed.combine);
                mixed.out
            } else {
                let quad = [
                    w.get(&format!("block{b}.mlp.w1"))?,
                    w.get(&format!("block{b}.mlp.b1"))?,
                    w.get(&format!("block{b}.mlp.w2"))?,
                    w.get(&format!("block{b}.mlp.b2"))?,
                ];
                let (rows, _) = g.shape(u2);
                g.grouped_mlp(u2, &[quad], rows)?
            };
            x = g.add(x, ff)?;
        }
        let fx = g.layer_norm(x, w.get("final.ln.gain")?, w.get("final.ln.bias")?)?;
        let pooled = g.group_mean_rows(fx, cfg.tokens())?;
        let h1 = g.matmul(pooled, w.get("head.w1")?)?;
        let h1 = g.add_row(h1, w.get("head.b1")?)?;
        let h1 = g.gelu(h1)?;
        let logits = g.matmul(h1, w.get("head.w2")?)?;
        let logits = g.add_row(logits, w.get("head.b2")?)?;
        Ok((logits, trace))
    }

    fn check_syndromes(&self, syndromes: &[Syndrome]) -> Result<()> {
        if syndromes.is_empty() {
            return Err(Error::config("forward pass needs at least one syndrome"));
        }
        for syndrome in syndromes {
            if syndrome.len() != self.code.m() {
                return Err(Error::config(format!(
                    "syndrome has {} bits, the model expects {}",
                    syndrome.len(),
                    self.code.m()
                )));
            }
        }
        Ok(())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        syndrome: &Syndrome,
    ) -> Result<(Var, ForwardTrace)> {
        self.check_syndromes(std::slice::from_ref(syndrome))?;
        let w = Wired::new(g, params);
        self.forward_wired(g, &w, std::slice::from_ref(syndrome))
    }

    pub fn forward(&self, g: &mut Graph, syndrome: &Syndrome) -> Result<(Var, ForwardTrace)> {
        self.forward_with(g, &self.params, syndrome)
    }

    /// Forward over a batch of syndromes in one graph. Row b of the logits
    /// belongs to syndrome b; samples never mix, so the result matches
    /// independent single forwards.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        syndromes: &[Syndrome],
    ) -> Result<(Var, ForwardTrace)> {
        self.check_syndromes(syndromes)?;
        let w = Wired::new(g, &self.params);
        self.forward_wired(g, &w, syndromes)
    }

    /// Loss terms for a batch of labeled samples (every term is the mean of
    /// the per-sample terms), plus the parameter nodes in parameter order
    /// (for gradient collection).
    pub fn loss_parts_batch_with(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        errors: &[PauliError],
    ) -> Result<(LossVars, Vec<Var>)> {
        if errors.is_empty() {
            return Err(Error::config("loss needs at least one sample"));
        }
        for error in errors {
            if error.n() != self.code.n() {
                return Err(Error::config(format!(
                    "error acts on {} qubits, the model expects {}",
                    error.n(),
                    self.code.n()
                )));
            }
        }
        let syndromes: Vec<Syndrome> =
            errors.iter().map(|e| self.code.syndrome_of(e)).collect();
        let w = Wired::new(g, params);
        let (logits, trace) = self.forward_wired(g, &w, &syndromes)?;
        let losses =
            assemble_losses(g, &self.code, &self.config, logits, &trace.slot_inputs, errors)?;
        Ok((losses, w.vars))
    }

    pub fn loss_parts_with(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        error: &PauliError,
    ) -> Result<(LossVars, Vec<Var>)> {
        self.loss_parts_batch_with(g, params, std::slice::from_ref(error))
    }

    pub fn sample_loss(&self, g: &mut Graph, error: &PauliError) -> Result<LossVars> {
        self.loss_parts_with(g, &self.params, error).map(|(l, _)| l)
    }

    /// Hard decision: bit i is 1 exactly when its logit is positive, so a
    /// probability of exactly 1/2 resolves to 0.
    pub fn decode_syndrome(&self, syndrome: &Syndrome) -> Result<PauliError> {
        let mut out = self.decode_syndromes(std::slice::from_ref(syndrome))?;
        out.pop().expect("one decode per syndrome")
    }

    /// Batched hard decision in one graph. Per-sample results stay
    /// independent; a non-finite logit fails only its own sample.
    pub fn decode_syndromes(&self, syndromes: &[Syndrome]) -> Result<Vec<Result<PauliError>>> {
        self.check_syndromes(syndromes)?;
        let mut g = Graph::new();
        let w = Wired::new(&mut g, &self.params);
        let (logits, _) = self.forward_wired(&mut g, &w, syndromes)?;
        let lv = g.value(logits);
        let mut out = Vec::with_capacity(syndromes.len());
        for b in 0..syndromes.len() {
            let mut bits = crate::bits::BitVec::zeros(2 * self.code.n());
            let mut verdict = Ok(());
            for (i, &z) in lv.row(b).iter().enumerate() {
                if !z.is_finite() {
                    verdict = Err(Error::numerical(format!("logit {i} is not finite ({z})")));
                    break;
                }
                if z > 0.0 {
                    bits.set(i, true);
                }
            }
            out.push(verdict.and_then(|()| PauliError::from_bits(bits)));
        }
        Ok(out)
    }

    /// Dispatch-weight matrices (tokens x slots), one per mixture block.
    pub fn dispatch_weights(&self, syndrome: &Syndrome) -> Result<Vec<Array2<f64>>> {
        let mut g = Graph::new();
        let (_, trace) = self.forward(&mut g, syndrome)?;
        Ok(trace.dispatch)
    }
}

/// Builds the three loss terms and their weighted sum from the logits of a
/// batch (one row per sample): bitwise cross-entropy against the true
/// errors, cross-entropy of soft logical parities against the true logical
/// effects, and the slot orthogonality penalty averaged over mixture blocks.
/// Every term is the mean of its per-sample values.
pub(crate) fn assemble_losses(
    g: &mut Graph,
    code: &ToricCode,
    cfg: &SmoeConfig,
    logits: Var,
    slot_inputs: &[Var],
    errors: &[PauliError],
) -> Result<LossVars> {
    let width = 2 * code.n();
    let samples = errors.len();
    if g.shape(logits) != (samples, width) {
        return Err(Error::config(format!(
            "logits have shape {:?}, expected {samples}x{width}",
            g.shape(logits)
        )));
    }
    let targets = Arc::new(Array2::from_shape_fn((samples, width), |(b, i)| {
        errors[b].bits().get(i) as u8 as f64
    }));
    let ber = g.bce_with_logits(logits, targets)?;

    let q = g.sigmoid(logits)?;
    let mut parities = Vec::with_capacity(2 * code.k());
    for i in 0..2 * code.k() {
        let support = Arc::new(code.logical_swapped_support(i));
        let picked = g.gather_cols(q, support)?;
        // Soft XOR over the support: parity = (1 - prod(1 - 2q)) / 2,
        // exact on hard bits and smooth in between.
        let flipped = g.affine(picked, -2.0, 1.0)?;
        let prod = g.row_prod(flipped)?;
        parities.push(g.affine(prod, -0.5, 0.5)?);
    }
    let parity_cols = g.hstack(&parities)?;
    let effects: Vec<_> = errors.iter().map(|e| code.logical_effect(e)).collect();
    let ltargets = Arc::new(Array2::from_shape_fn((samples, 2 * code.k()), |(b, i)| {
        effects[b].get(i) as u8 as f64
    }));
    let ler = g.bce_with_probs(parity_cols, ltargets)?;

    let os = if slot_inputs.is_empty() || cfg.experts == 1 {
        g.constant(Array2::zeros((1, 1)))
    } else {
        let s = cfg.slots();
        let cross = Arc::new(Array2::from_shape_fn((s, s), |(i, j)| {
            if i / cfg.slots_per_expert == j / cfg.slots_per_expert {
                0.0
            } else {
                1.0
            }
        }));
        let scale = 1.0
            / (2.0 * (cfg.experts as f64 - 1.0)
                * cfg.slots_per_expert as f64
                * samples as f64);
        let mut terms = Vec::with_capacity(slot_inputs.len());
        for &slots in slot_inputs {
            terms.push(g.group_cosine_penalty(slots, s, Arc::clone(&cross), scale)?);
        }
        let total = g.add_n(&terms)?;
        g.scale(total, 1.0 / slot_inputs.len() as f64)?
    };

    let wb = g.scale(ber, cfg.lambda_ber)?;
    let wl = g.scale(ler, cfg.lambda_ler)?;
    let wo = g.scale(os, cfg.lambda_os)?;
    let overall = g.add_n(&[wb, wl, wo])?;
    Ok(LossVars { ber, ler, os, overall })
}

impl Decoder for SmoeModel {
    fn name(&self) -> String {
        "smoe".to_string()
    }

    fn decode(&self, code: &ToricCode, syndrome: &Syndrome) -> Result<PauliError> {
        if code.l() != self.config.l {
            return Err(Error::config(format!(
                "model was built for L={}, asked to decode L={}",
                self.config.l,
                code.l()
            )));
        }
        self.decode_syndrome(syndrome)
    }

    fn decode_batch(&self, code: &ToricCode, syndromes: &[Syndrome]) -> Vec<Result<PauliError>> {
        if syndromes.is_empty() {
            return Vec::new();
        }
        if code.l() != self.config.l {
            return syndromes.iter().map(|s| self.decode(code, s)).collect();
        }
        match self.decode_syndromes(syndromes) {
            Ok(verdicts) => verdicts,
            Err(_) => syndromes.iter().map(|s| self.decode(code, s)).collect(),
        }
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "name": "smoe",
            "config": self.config,
            "parameters": self.params.scalar_count(),
            "params_sha256": self.params.content_hash(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, AdamW, OptimConfig};
    use crate::noise::DepolarizingChannel;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn random_error(code: &ToricCode, p: f64, seed: u64) -> PauliError {
        let channel = DepolarizingChannel::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        channel.sample(code, &mut rng)
    }

    #[test]
    fn dispatch_columns_and_combine_rows_are_normalized() {
        let model = SmoeModel::new(SmoeConfig::desk(4), 40).unwrap();
        for seed in 0..20 {
            let err = random_error(model.code(), 0.12, 100 + seed);
            let syndrome = model.code().syndrome_of(&err);
            let mut g = Graph::new();
            let (_, trace) = model.forward(&mut g, &syndrome).unwrap();
            assert_eq!(trace.dispatch.len(), 2);
            for d in &trace.dispatch {
                assert_eq!(d.nrows(), model.layout().tokens());
                assert_eq!(d.ncols(), model.config().slots());
                for col in d.columns() {
                    assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-12);
                }
            }
            for c in &trace.combine {
                for row in c.rows() {
                    assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn expert_invocations_match_slot_count() {
        let model = SmoeModel::new(SmoeConfig::full(4), 41).unwrap();
        let err = random_error(model.code(), 0.1, 7);
        let syndrome = model.code().syndrome_of(&err);
        let mut g = Graph::new();
        let (_, trace) = model.forward(&mut g, &syndrome).unwrap();
        // 8 experts x 4 slots per mixture block, and invocation count per
        // forward stays 32 regardless of token count.
        assert_eq!(model.config().slots(), 32);
        assert_eq!(trace.expert_invocations / trace.dispatch.len(), 32);
    }

    #[test]
    fn orthogonality_loss_anchors() {
        // 8 experts x 4 slots: orthogonal slot rows give 0, identical rows
        // give n_e * p_s / 2 = 16.
        let mut g = Graph::new();
        let eye = g.constant(Array2::from_shape_fn((32, 32), |(i, j)| {
            if i == j {
                1.0
            } else {
                0.0
            }
        }));
        let v = slot_orthogonality(&mut g, eye, 8, 4).unwrap();
        assert!(g.value(v)[[0, 0]].abs() <= 1e-10);

        let same = g.constant(Array2::from_shape_fn((32, 5), |(_, j)| 0.3 * (j as f64) - 0.7));
        let v = slot_orthogonality(&mut g, same, 8, 4).unwrap();
        assert!((g.value(v)[[0, 0]] - 16.0).abs() <= 1e-8);
    }

    #[test]
    fn orthogonality_loss_is_bounded_and_sensitive_to_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..30 {
            let slots =
                Array2::from_shape_fn((32, 6), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let mut g = Graph::new();
            let sv = g.constant(slots.clone());
            let v = slot_orthogonality(&mut g, sv, 8, 4).unwrap();
            let val = g.value(v)[[0, 0]];
            assert!(val.abs() <= 16.0 + 1e-9, "trial {trial}: {val} out of range");

            // Negating a slot row flips the sign of all its cross-expert
            // similarities, so the loss moves unless their sum was zero.
            let row = trial % 32;
            let mut negated = slots.clone();
            for x in negated.row_mut(row) {
                *x = -*x;
            }
            let mut g2 = Graph::new();
            let nv = g2.constant(negated);
            let v2 = slot_orthogonality(&mut g2, nv, 8, 4).unwrap();
            let val2 = g2.value(v2)[[0, 0]];
            let norms: Vec<f64> =
                slots.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
            let cross_sum: f64 = (0..32)
                .filter(|&j| j / 4 != row / 4)
                .map(|j| slots.row(row).dot(&slots.row(j)) / (norms[row] * norms[j]))
                .sum();
            if cross_sum.abs() > 1e-9 {
                assert!(
                    (val - val2).abs() > 1e-12,
                    "trial {trial}: negation left the loss unchanged"
                );
            }
        }
    }

    #[test]
    fn zero_syndrome_embeds_to_bias_plus_position() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 43).unwrap();
        let syndrome = Syndrome::zeros(model.code().m());
        let mut g = Graph::new();
        let emb = model.embed_with(&mut g, model.params(), &syndrome).unwrap();
        let bias = model.params().get("embed.bias").unwrap();
        let pos = model.params().get("embed.pos").unwrap();
        let ev = g.value(emb);
        for t in 0..model.layout().tokens() {
            for j in 0..model.config().embed_dim {
                assert_abs_diff_eq!(ev[[t, j]], bias[[0, j]] + pos[[t, j]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn single_error_reaches_exactly_the_stencil_neighbors() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 44).unwrap();
        let code = model.code();
        for edge in 0..code.n() {
            let mut err = PauliError::identity(code.n());
            err.flip_x(edge);
            let syndrome = code.syndrome_of(&err);
            let defects: Vec<usize> = syndrome.defects().collect();
            assert_eq!(defects.len(), 2, "single X error lights two plaquettes");
            let expected: Vec<usize> = (0..code.n())
                .filter(|&t| code.incident_checks(t).iter().any(|c| defects.contains(c)))
                .collect();

            let mut g = Graph::new();
            let emb = model.embed_with(&mut g, model.params(), &syndrome).unwrap();
            let bias = model.params().get("embed.bias").unwrap();
            let pos = model.params().get("embed.pos").unwrap();
            let ev = g.value(emb);
            let touched: Vec<usize> = (0..code.n())
                .filter(|&t| {
                    (0..model.config().embed_dim)
                        .any(|j| (ev[[t, j]] - bias[[0, j]] - pos[[t, j]]).abs() > 1e-12)
                })
                .collect();
            assert_eq!(touched, expected, "edge {edge}");
        }
    }

    #[test]
    fn translated_syndrome_permutes_stencil_contributions() {
        use crate::lattice::EdgeCoord;
        let model = SmoeModel::new(SmoeConfig::tiny(4), 45).unwrap();
        let code = model.code();
        let l = code.l();
        let err = random_error(code, 0.1, 9);
        let (dr, dc) = (1, 3);
        let mut shifted = PauliError::identity(code.n());
        for edge in 0..code.n() {
            let EdgeCoord { kind, row, col } = code.edge_coord(edge);
            let moved =
                code.edge_id(EdgeCoord { kind, row: (row + dr) % l, col: (col + dc) % l });
            if err.z_bit(edge) {
                shifted.flip_z(moved);
            }
            if err.x_bit(edge) {
                shifted.flip_x(moved);
            }
        }
        let contributions = |e: &PauliError| {
            let syndrome = code.syndrome_of(e);
            let mut g = Graph::new();
            let emb = model.embed_with(&mut g, model.params(), &syndrome).unwrap();
            let bias = model.params().get("embed.bias").unwrap();
            let pos = model.params().get("embed.pos").unwrap();
            let ev = g.value(emb);
            Array2::from_shape_fn((code.n(), model.config().embed_dim), |(t, j)| {
                ev[[t, j]] - bias[[0, j]] - pos[[t, j]]
            })
        };
        let base = contributions(&err);
        let moved = contributions(&shifted);
        for edge in 0..code.n() {
            let EdgeCoord { kind, row, col } = code.edge_coord(edge);
            let target =
                code.edge_id(EdgeCoord { kind, row: (row + dr) % l, col: (col + dc) % l });
            for j in 0..model.config().embed_dim {
                assert_abs_diff_eq!(base[[edge, j]], moved[[target, j]], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn single_expert_single_slot_averages_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut g = Graph::new();
        let token = Array2::from_shape_fn((1, 6), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let tokens = Array2::from_shape_fn((10, 6), |(_, j)| token[[0, j]]);
        let u = g.constant(tokens);
        let phi = g.constant(Array2::from_shape_fn((6, 1), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        }));
        let w1 = Array2::from_shape_fn((6, 8), |_| rand::Rng::random_range(&mut rng, -0.5..0.5));
        let b1 = Array2::from_shape_fn((1, 8), |_| rand::Rng::random_range(&mut rng, -0.5..0.5));
        let w2 = Array2::from_shape_fn((8, 6), |_| rand::Rng::random_range(&mut rng, -0.5..0.5));
        let b2 = Array2::from_shape_fn((1, 6), |_| rand::Rng::random_range(&mut rng, -0.5..0.5));
        let experts = [[
            g.constant(w1.clone()),
            g.constant(b1.clone()),
            g.constant(w2.clone()),
            g.constant(b2.clone()),
        ]];
        let mixed = softmoe_mix(&mut g, u, phi, &experts, 1, 1).unwrap();

        assert!(mixed.dispatch.iter().all(|&v| (v - 0.1).abs() < 1e-12), "uniform dispatch");
        assert!(mixed.combine.iter().all(|&v| (v - 1.0).abs() < 1e-12), "single-slot combine");
        let slots = g.value(mixed.slots).to_owned();
        for j in 0..6 {
            assert_abs_diff_eq!(slots[[0, j]], token[[0, j]], epsilon = 1e-12);
        }
        // Every output row equals the expert applied to the mean token.
        let hidden = token.dot(&w1) + &b1;
        let hidden = hidden.mapv(|v| {
            0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh())
        });
        let expected = hidden.dot(&w2) + &b2;
        let out = g.value(mixed.out);
        for t in 0..10 {
            for j in 0..6 {
                assert_abs_diff_eq!(out[[t, j]], expected[[0, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_drive_ber_and_ler_to_zero() {
        let code = ToricCode::new(4).unwrap();
        let cfg = SmoeConfig::tiny(4);
        let err = random_error(&code, 0.12, 11);
        let mut g = Graph::new();
        let logits = g.constant(Array2::from_shape_fn((1, 2 * code.n()), |(_, i)| {
            if err.bits().get(i) {
                25.0
            } else {
                -25.0
            }
        }));
        let losses = assemble_losses(&mut g, &code, &cfg, logits, &[], std::slice::from_ref(&err)).unwrap();
        let v = losses.values(&g);
        assert!(v.ber < 1e-6, "ber {}", v.ber);
        assert!(v.ler < 1e-6, "ler {}", v.ler);
        assert_eq!(v.os, 0.0);
        assert!((v.overall - (0.5 * v.ber + v.ler)).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_give_ln2_losses() {
        let code = ToricCode::new(4).unwrap();
        let cfg = SmoeConfig::tiny(4);
        let err = random_error(&code, 0.12, 12);
        let mut g = Graph::new();
        let logits = g.constant(Array2::zeros((1, 2 * code.n())));
        let losses = assemble_losses(&mut g, &code, &cfg, logits, &[], std::slice::from_ref(&err)).unwrap();
        let v = losses.values(&g);
        assert_abs_diff_eq!(v.ber, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(v.ler, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn full_model_loss_matches_finite_differences() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 47).unwrap();
        let mut err = PauliError::identity(model.code().n());
        err.flip_x(3);
        err.flip_z(20);
        err.flip_z(3);
        let report = finite_diff_check(model.params(), 1e-5, 1e-4, |g, p| {
            let (losses, vars) = model.loss_parts_with(g, p, &err)?;
            Ok((losses.overall, vars))
        })
        .unwrap();
        assert!(
            report.ok(),
            "{} of {} gradient elements disagree, worst rel err {:.3e}:\n{}",
            report.failures.len(),
            report.checked,
            report.max_rel_err,
            report.failures.join("\n")
        );
    }

    #[test]
    fn one_optimizer_step_decreases_the_loss() {
        for seed in 0..10 {
            let cfg = SmoeConfig::tiny(4);
            let mut model = SmoeModel::new(cfg, 400 + seed).unwrap();
            let err = random_error(model.code(), 0.12, 500 + seed);
            let mut g = Graph::new();
            let (losses, vars) = model.loss_parts_with(&mut g, model.params(), &err).unwrap();
            let before = losses.values(&g).overall;
            g.backward(losses.overall).unwrap();
            let grads: Vec<Array2<f64>> = vars
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let p = &model.params().entry(i).value;
                    g.grad(v).cloned().unwrap_or_else(|| Array2::zeros((p.nrows(), p.ncols())))
                })
                .collect();
            let mut opt = AdamW::new(
                model.params(),
                OptimConfig { lr_max: 1e-4, lr_min: 1e-4, clip_norm: None, ..OptimConfig::default() },
            );
            opt.step(model.params_mut(), &grads).unwrap();
            let mut g2 = Graph::new();
            let after = model.sample_loss(&mut g2, &err).unwrap().values(&g2).overall;
            assert!(
                after < before,
                "seed {seed}: loss went {before} -> {after}"
            );
        }
    }

    #[test]
    fn batched_loss_is_the_mean_of_per_sample_losses() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 52).unwrap();
        let errors: Vec<PauliError> =
            (0..3).map(|i| random_error(model.code(), 0.12, 600 + i)).collect();

        let mut sum = LossValues { ber: 0.0, ler: 0.0, os: 0.0, overall: 0.0 };
        let mut grad_sum: Vec<Array2<f64>> = model
            .params()
            .entries()
            .iter()
            .map(|e| Array2::zeros((e.value.nrows(), e.value.ncols())))
            .collect();
        for err in &errors {
            let mut g = Graph::new();
            let (losses, vars) = model.loss_parts_with(&mut g, model.params(), err).unwrap();
            let v = losses.values(&g);
            sum.ber += v.ber;
            sum.ler += v.ler;
            sum.os += v.os;
            sum.overall += v.overall;
            g.backward(losses.overall).unwrap();
            for (acc, &var) in grad_sum.iter_mut().zip(&vars) {
                if let Some(gr) = g.grad(var) {
                    *acc += gr;
                }
            }
        }
        let b = errors.len() as f64;

        let mut g = Graph::new();
        let (losses, vars) =
            model.loss_parts_batch_with(&mut g, model.params(), &errors).unwrap();
        let v = losses.values(&g);
        assert_abs_diff_eq!(v.ber, sum.ber / b, epsilon = 1e-12);
        assert_abs_diff_eq!(v.ler, sum.ler / b, epsilon = 1e-12);
        assert_abs_diff_eq!(v.os, sum.os / b, epsilon = 1e-12);
        assert_abs_diff_eq!(v.overall, sum.overall / b, epsilon = 1e-12);
        g.backward(losses.overall).unwrap();
        for (i, (acc, &var)) in grad_sum.iter().zip(&vars).enumerate() {
            let batch = g.grad(var).cloned().unwrap_or_else(|| Array2::zeros(acc.raw_dim()));
            for (got, want) in batch.iter().zip(acc.iter()) {
                assert!(
                    (got - want / b).abs() < 1e-11,
                    "{}: batch grad {got} vs mean {}",
                    model.params().entry(i).name,
                    want / b
                );
            }
        }
    }

    #[test]
    fn batched_decode_matches_single_decodes() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 53).unwrap();
        let syndromes: Vec<Syndrome> = (0..5)
            .map(|i| model.code().syndrome_of(&random_error(model.code(), 0.15, 700 + i)))
            .collect();
        let batch = model.decode_syndromes(&syndromes).unwrap();
        assert_eq!(batch.len(), syndromes.len());
        for (syndrome, got) in syndromes.iter().zip(batch) {
            let single = model.decode_syndrome(syndrome).unwrap();
            assert_eq!(got.unwrap(), single);
        }
    }

    #[test]
    fn zeroed_head_decodes_to_identity() {
        let mut model = SmoeModel::new(SmoeConfig::tiny(4), 48).unwrap();
        let w2 = model.params().index_of("head.w2").unwrap();
        let b2 = model.params().index_of("head.b2").unwrap();
        model.params_mut().value_mut(w2).fill(0.0);
        model.params_mut().value_mut(b2).fill(0.0);
        let err = random_error(model.code(), 0.12, 13);
        let syndrome = model.code().syndrome_of(&err);
        let decoded = model.decode_syndrome(&syndrome).unwrap();
        assert_eq!(decoded, PauliError::identity(model.code().n()));
    }

    #[test]
    fn decoding_is_deterministic() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 49).unwrap();
        let err = random_error(model.code(), 0.15, 14);
        let syndrome = model.code().syndrome_of(&err);
        let a = model.decode_syndrome(&syndrome).unwrap();
        let b = model.decode_syndrome(&syndrome).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoder_trait_checks_the_lattice_size() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 50).unwrap();
        assert_eq!(model.name(), "smoe");
        assert_eq!(model.metadata()["config"]["embed_dim"], 16);
        let other = ToricCode::new(6).unwrap();
        let syndrome = Syndrome::zeros(other.m());
        assert!(model.decode(&other, &syndrome).is_err());
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = SmoeConfig::full(4);
        cfg.heads = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = SmoeConfig::full(4);
        cfg.moe_blocks = 9;
        assert!(cfg.validate().is_err());
        let cfg = SmoeConfig::desk(4);
        let back = SmoeConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn checkpointed_params_rebuild_the_same_model() {
        let model = SmoeModel::new(SmoeConfig::tiny(4), 51).unwrap();
        let err = random_error(model.code(), 0.12, 15);
        let syndrome = model.code().syndrome_of(&err);
        let expected = model.decode_syndrome(&syndrome).unwrap();
        let cfg = model.config().clone();
        let params = model.into_params();
        let rebuilt = SmoeModel::from_params(cfg, params).unwrap();
        assert_eq!(rebuilt.decode_syndrome(&syndrome).unwrap(), expected);

        let wrong = init_params(&SmoeConfig::desk(4), 1).unwrap();
        assert!(SmoeModel::from_params(SmoeConfig::tiny(4), wrong).is_err());
    }
}
