//! Incremental network quantization.
//!
//! Weights are partitioned by magnitude; the selected group is rounded to the
//! nearest power of two (or zero) and frozen, the rest keep training. Repeating
//! this over an ascending schedule ends with every eligible weight in the
//! codebook `{0} ∪ {±2^p : n2 ≤ p ≤ n1}`.

use std::ops::ControlFlow;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Parameter;

/// Exponent range of a power-of-two codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantBounds {
    /// Largest exponent.
    pub n1: i32,
    /// Smallest exponent.
    pub n2: i32,
}

/// Exact 2^p for the normal f64 range.
fn pow2(p: i32) -> f64 {
    assert!((-1022..=1023).contains(&p), "exponent {p} out of range");
    f64::from_bits(((p + 1023) as u64) << 52)
}

impl QuantBounds {
    pub fn levels(&self) -> usize {
        (self.n1 - self.n2 + 1) as usize
    }

    pub fn codebook_size(&self) -> usize {
        2 * self.levels() + 1
    }

    /// Sorted codebook values.
    pub fn codebook(&self) -> Vec<f32> {
        let mut v: Vec<f32> = (self.n2..=self.n1).map(|p| pow2(p) as f32).collect();
        let neg: Vec<f32> = v.iter().rev().map(|x| -x).collect();
        v.insert(0, 0.0);
        neg.into_iter().chain(v).collect()
    }

    pub fn contains(&self, v: f32) -> bool {
        if v == 0.0 {
            return true;
        }
        let a = v.abs() as f64;
        let e = a.log2().round() as i32;
        (self.n2..=self.n1).contains(&e) && pow2(e) == a
    }
}

/// `n1 = ⌊log2(4·max|w|/3)⌋`, `n2 = n1 − (2^(b−1) − 2)`: 2^(b−1) − 1 magnitude
/// levels and 2^b − 1 codewords.
pub fn compute_bounds(weights: &[f32], bits: u8) -> Result<QuantBounds> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Quant(format!("unsupported bit width {bits}")));
    }
    let max = weights.iter().fold(0.0f64, |m, &w| m.max((w as f64).abs()));
    if max == 0.0 || !max.is_finite() {
        return Err(Error::Quant("cannot derive bounds from an all-zero tensor".into()));
    }
    let target = 4.0 * max / 3.0;
    let mut n1 = target.log2().floor() as i32;
    while pow2(n1) > target {
        n1 -= 1;
    }
    while pow2(n1 + 1) <= target {
        n1 += 1;
    }
    let n2 = n1 - ((1i32 << (bits - 1)) - 2);
    Ok(QuantBounds { n1, n2 })
}

/// Rounds `w` to the nearest codeword in magnitude, keeping its sign.
///
/// The band `[3·2^(p−2), 3·2^(p−1))` maps to `2^p`; magnitudes below
/// `2^(n2−1)` become zero and magnitudes above the top band clamp to `2^n1`.
/// Exact midpoints round up.
pub fn quantize_value(w: f32, bounds: &QuantBounds) -> f32 {
    let a = (w as f64).abs();
    if a < pow2(bounds.n2 - 1) || a.is_nan() {
        return 0.0;
    }
    let p = if a >= pow2(bounds.n1) {
        bounds.n1
    } else {
        let mut p = (a / 0.75).log2().floor() as i32;
        while a < 0.75 * pow2(p) {
            p -= 1;
        }
        while a >= 1.5 * pow2(p) {
            p += 1;
        }
        p.clamp(bounds.n2, bounds.n1)
    };
    (pow2(p) as f32).copysign(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    /// Largest magnitudes first.
    #[default]
    MagnitudeDesc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub schedule: Vec<f64>,
    pub strategy: PartitionStrategy,
    /// Retraining iterations between quantization steps.
    pub retrain_iterations: usize,
    pub quantize_bn_affine: bool,
    pub quantize_biases: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 5,
            schedule: vec![0.5, 0.75, 1.0],
            strategy: PartitionStrategy::MagnitudeDesc,
            retrain_iterations: 100,
            quantize_bn_affine: true,
            quantize_biases: true,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if ![3, 5, 7].contains(&self.bits) {
            return Err(Error::Quant(format!("bits must be 3, 5 or 7, got {}", self.bits)));
        }
        if self.schedule.is_empty() {
            return Err(Error::Quant("schedule is empty".into()));
        }
        let mut prev = 0.0;
        for &f in &self.schedule {
            if !(f > prev && f <= 1.0) {
                return Err(Error::Quant(format!(
                    "schedule must be strictly ascending within (0, 1], got {:?}",
                    self.schedule
                )));
            }
            prev = f;
        }
        Ok(())
    }

    pub fn is_eligible(&self, name: &str) -> bool {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            self.quantize_bn_affine
        } else if name.ends_with(".bias") {
            self.quantize_biases
        } else {
            true
        }
    }
}

/// Number of elements a fraction corresponds to (round half up).
pub fn target_count(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).round() as usize).min(len)
}

/// Indices of not-yet-frozen elements to freeze so the frozen count reaches
/// `target_fraction` of the tensor.
pub fn partition_weights(
    param: &Parameter,
    target_fraction: f64,
    strategy: PartitionStrategy,
) -> Result<Vec<usize>> {
    let frozen = param.frozen_count();
    let want = target_count(param.len(), target_fraction);
    if want < frozen {
        return Err(Error::Quant(format!(
            "{}: fraction {target_fraction} is below the {frozen} already frozen elements",
            param.name
        )));
    }
    let PartitionStrategy::MagnitudeDesc = strategy;
    let mut free: Vec<usize> = (0..param.len()).filter(|&i| !param.frozen_mask[i]).collect();
    let v = param.values();
    free.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    free.truncate(want - frozen);
    free.sort_unstable();
    Ok(free)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamQuant {
    pub name: String,
    /// `None` when the tensor was all zeros; its codebook is then `{0}`.
    pub bounds: Option<QuantBounds>,
    pub quantized_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantState {
    pub bits: u8,
    /// One entry per eligible parameter.
    pub entries: Vec<ParamQuant>,
}

impl QuantState {
    /// Fixes per-tensor bounds from the current (pre-quantization) values.
    pub fn new(params: &[Parameter], config: &QuantConfig) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        for p in params.iter().filter(|p| config.is_eligible(&p.name)) {
            let bounds = if p.values().iter().all(|&v| v == 0.0) {
                None
            } else {
                Some(compute_bounds(p.values(), config.bits)?)
            };
            entries.push(ParamQuant {
                name: p.name.clone(),
                bounds,
                quantized_fraction: p.frozen_count() as f64 / p.len().max(1) as f64,
            });
        }
        Ok(Self {
            bits: config.bits,
            entries,
        })
    }

    pub fn entry(&self, name: &str) -> Option<&ParamQuant> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Every frozen element of every tracked parameter lies in its codebook.
    pub fn frozen_in_codebook(&self, params: &[Parameter]) -> bool {
        self.entries.iter().all(|e| {
            let Some(p) = params.iter().find(|p| p.name == e.name) else {
                return false;
            };
            p.values().iter().zip(&p.frozen_mask).all(|(&v, &f)| {
                !f || match &e.bounds {
                    Some(b) => b.contains(v),
                    None => v == 0.0,
                }
            })
        })
    }
}

/// Quantizes and freezes elements of every tracked parameter up to
/// `target_fraction`.
pub fn apply_quant_step(
    params: &mut [Parameter],
    state: &mut QuantState,
    target_fraction: f64,
    strategy: PartitionStrategy,
) -> Result<()> {
    for entry in &mut state.entries {
        let p = params
            .iter_mut()
            .find(|p| p.name == entry.name)
            .ok_or_else(|| Error::Quant(format!("parameter {} disappeared", entry.name)))?;
        let picked = partition_weights(p, target_fraction, strategy)?;
        let values = p.tensor.data_mut();
        for i in picked {
            values[i] = match &entry.bounds {
                Some(b) => quantize_value(values[i], b),
                None => 0.0,
            };
            p.frozen_mask[i] = true;
        }
        entry.quantized_fraction = p.frozen_count() as f64 / p.len().max(1) as f64;
    }
    Ok(())
}

/// FNV-1a over (name, index, bit pattern) of every frozen element.
pub fn frozen_checksum(params: &[Parameter]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for p in params {
        eat(p.name.as_bytes());
        for (i, (&v, &f)) in p.values().iter().zip(&p.frozen_mask).enumerate() {
            if f {
                eat(&(i as u64).to_le_bytes());
                eat(&v.to_bits().to_le_bytes());
            }
        }
    }
    h
}

/// Anything that owns a parameter list the schedule can quantize.
pub trait Quantizable {
    fn quant_params(&self) -> &[Parameter];
    fn quant_params_mut(&mut self) -> &mut [Parameter];
}

impl Quantizable for ModelGraph<f32> {
    fn quant_params(&self) -> &[Parameter] {
        self.params()
    }
    fn quant_params_mut(&mut self) -> &mut [Parameter] {
        self.params_mut()
    }
}

impl Quantizable for Vec<Parameter> {
    fn quant_params(&self) -> &[Parameter] {
        self
    }
    fn quant_params_mut(&mut self) -> &mut [Parameter] {
        self
    }
}

/// Model state after one schedule step (quantize, then retrain).
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub fraction: f64,
    pub params: Vec<Parameter>,
    pub state: QuantState,
}

#[derive(Debug, Clone)]
pub struct InqOutcome {
    pub state: QuantState,
    pub snapshots: Vec<Snapshot>,
}

/// A retraining failure. The model has been restored to the last completed
/// step and `outcome` describes that step.
#[derive(Debug)]
pub struct InqAbort<E> {
    pub step: usize,
    pub error: E,
    pub outcome: InqOutcome,
}

/// Runs the schedule: for each fraction, quantize and freeze, retrain the
/// remaining weights (skipped once everything is frozen), then snapshot. The
/// snapshot hook may stop the schedule early with `ControlFlow::Break`.
pub fn run_inq_schedule<M, E, R, S>(
    model: &mut M,
    config: &QuantConfig,
    mut retrain: R,
    mut on_snapshot: S,
) -> std::result::Result<InqOutcome, InqAbort<E>>
where
    M: Quantizable + ?Sized,
    E: From<Error>,
    R: FnMut(usize, &mut M) -> std::result::Result<(), E>,
    S: FnMut(&Snapshot, &M) -> ControlFlow<()>,
{
    let abort = |step, error, state: QuantState, snapshots| InqAbort {
        step,
        error,
        outcome: InqOutcome { state, snapshots },
    };
    let mut state = match QuantState::new(model.quant_params(), config) {
        Ok(s) => s,
        Err(e) => {
            let empty = QuantState {
                bits: config.bits,
                entries: Vec::new(),
            };
            return Err(abort(0, e.into(), empty, Vec::new()));
        }
    };
    let mut snapshots: Vec<Snapshot> = Vec::new();
    for (step, &fraction) in config.schedule.iter().enumerate() {
        let saved_params = model.quant_params().to_vec();
        let saved_state = state.clone();
        let restore = |model: &mut M| {
            model.quant_params_mut().clone_from_slice(&saved_params);
        };
        if let Err(e) = apply_quant_step(model.quant_params_mut(), &mut state, fraction, config.strategy) {
            restore(model);
            return Err(abort(step, e.into(), saved_state, snapshots));
        }
        let all_frozen = model.quant_params().iter().all(|p| p.frozen_mask.iter().all(|&f| f));
        if !all_frozen {
            if let Err(e) = retrain(step, model) {
                restore(model);
                return Err(abort(step, e, saved_state, snapshots));
            }
        }
        let snap = Snapshot {
            step,
            fraction,
            params: model.quant_params().to_vec(),
            state: state.clone(),
        };
        let flow = on_snapshot(&snap, model);
        snapshots.push(snap);
        if flow.is_break() {
            break;
        }
    }
    Ok(InqOutcome { state, snapshots })
}
