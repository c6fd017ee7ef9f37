//! Sample-count-weighted model averaging and DP noise.
//!
//! Weighted sums accumulate in 128-bit fixed point (80 fractional bits)
//! rather than f64. Integer addition is associative and commutative, so
//! the average is independent of update order and of how partial sums are
//! grouped: a hierarchy of regional [`Aggregator`]s merged at a root
//! finalizes to exactly the same bits as one flat pass over the same
//! updates. The single division happens once, at finalize.
//!
//! Quantization at 2^-80 is exact for any |value| >= 2^-28 and loses only
//! absolute error below 8e-25 otherwise; magnitudes are capped at 2^14 so
//! sums over total sample counts up to 2^32 cannot overflow.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::model::ModelParams;
use super::{standard_normal, UpdateRecord};

const FRAC_BITS: i32 = 80;
const MAX_MAGNITUDE: f64 = 16384.0; // 2^14
const MAX_TOTAL_COUNT: u64 = 1 << 32;

#[derive(Debug, Error, PartialEq)]
pub enum AggError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update from node {node} has mismatched shape")]
    ShapeMismatch { node: u64 },
    #[error("update from node {node} has sample_count 0")]
    ZeroSampleCount { node: u64 },
    #[error("parameter magnitude {0} exceeds aggregation range")]
    ValueOutOfRange(f64),
    #[error("accumulator overflow (total sample count too large)")]
    Overflow,
    #[error("negative noise sigma {0}")]
    NegativeSigma(f64),
}

fn to_fixed(v: f64) -> Result<i128, AggError> {
    if !v.is_finite() || v.abs() >= MAX_MAGNITUDE {
        return Err(AggError::ValueOutOfRange(v));
    }
    if v == 0.0 {
        return Ok(0);
    }
    let bits = v.to_bits();
    let negative = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7FF) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mantissa, exp) = if biased == 0 {
        (frac, -1074)
    } else {
        (frac | (1 << 52), biased - 1075)
    };
    let shift = exp + FRAC_BITS;
    let magnitude: i128 = if shift >= 0 {
        (mantissa as i128) << shift
    } else {
        let s = -shift as u32;
        if s >= 128 {
            0
        } else {
            // round half away from zero
            ((mantissa as i128) + (1i128 << (s - 1))) >> s
        }
    };
    Ok(if negative { -magnitude } else { magnitude })
}

fn fixed_to_f64(q: i128) -> f64 {
    (q as f64) * 2f64.powi(-FRAC_BITS)
}

/// Accumulates sample-count-weighted parameter sums exactly.
#[derive(Debug, Clone)]
pub struct Aggregator {
    shape: Vec<(usize, usize)>,
    sums: Vec<i128>,
    total_count: u64,
    contributors: usize,
}

impl Aggregator {
    pub fn new() -> Self {
        Aggregator {
            shape: Vec::new(),
            sums: Vec::new(),
            total_count: 0,
            contributors: 0,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    pub fn contributors(&self) -> usize {
        self.contributors
    }

    pub fn is_empty(&self) -> bool {
        self.contributors == 0
    }

    /// Add `count` copies of `params` to the weighted sum.
    pub fn absorb(&mut self, params: &ModelParams, count: u64, node: u64) -> Result<(), AggError> {
        if count == 0 {
            return Err(AggError::ZeroSampleCount { node });
        }
        if self.contributors == 0 && self.shape.is_empty() {
            self.shape = params.shape();
            self.sums = vec![0i128; params.param_count()];
        } else if params.shape() != self.shape {
            return Err(AggError::ShapeMismatch { node });
        }
        self.total_count = self
            .total_count
            .checked_add(count)
            .filter(|&t| t <= MAX_TOTAL_COUNT)
            .ok_or(AggError::Overflow)?;
        for (slot, v) in self.sums.iter_mut().zip(params.values()) {
            let q = to_fixed(v)?;
            let weighted = q.checked_mul(count as i128).ok_or(AggError::Overflow)?;
            *slot = slot.checked_add(weighted).ok_or(AggError::Overflow)?;
        }
        self.contributors += 1;
        Ok(())
    }

    /// Fold another aggregator's exact partial sums into this one.
    pub fn merge(&mut self, other: &Aggregator) -> Result<(), AggError> {
        if other.is_empty() {
            return Ok(());
        }
        if self.contributors == 0 && self.shape.is_empty() {
            self.shape = other.shape.clone();
            self.sums = vec![0i128; other.sums.len()];
        } else if other.shape != self.shape {
            return Err(AggError::ShapeMismatch { node: u64::MAX });
        }
        self.total_count = self
            .total_count
            .checked_add(other.total_count)
            .filter(|&t| t <= MAX_TOTAL_COUNT)
            .ok_or(AggError::Overflow)?;
        for (slot, &q) in self.sums.iter_mut().zip(&other.sums) {
            *slot = slot.checked_add(q).ok_or(AggError::Overflow)?;
        }
        self.contributors += other.contributors;
        Ok(())
    }

    /// Internal state for wire transfer of exact partial sums.
    pub fn raw_parts(&self) -> (&[(usize, usize)], &[i128], u64, usize) {
        (&self.shape, &self.sums, self.total_count, self.contributors)
    }

    /// Rebuild from transferred state (inverse of [`Self::raw_parts`]).
    pub fn from_raw_parts(
        shape: Vec<(usize, usize)>,
        sums: Vec<i128>,
        total_count: u64,
        contributors: usize,
    ) -> Result<Self, AggError> {
        let expected: usize = shape.iter().map(|(i, o)| i * o + o).sum();
        if sums.len() != expected {
            return Err(AggError::ShapeMismatch { node: u64::MAX });
        }
        Ok(Aggregator {
            shape,
            sums,
            total_count,
            contributors,
        })
    }

    /// Divide once and round each element to f64.
    pub fn finalize(&self) -> Result<ModelParams, AggError> {
        if self.is_empty() {
            return Err(AggError::Empty);
        }
        let total = self.total_count as i128;
        let mut values = self.sums.iter().map(|&s| fixed_to_f64(s / total));
        let mut out = ModelParams {
            layers: Vec::with_capacity(self.shape.len()),
        };
        for &(inputs, outputs) in &self.shape {
            let weights = (&mut values).take(inputs * outputs).collect();
            let bias = (&mut values).take(outputs).collect();
            out.layers.push(super::model::LayerParams {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        Ok(out)
    }
}

impl Default for Aggregator {
    fn default() -> Self {
        Self::new()
    }
}

/// Element-wise average of update parameters weighted by
/// `sample_count / total`. A single update passes through unchanged.
pub fn fedavg<'a, I>(updates: I) -> Result<ModelParams, AggError>
where
    I: IntoIterator<Item = &'a UpdateRecord>,
{
    let refs: Vec<&UpdateRecord> = updates.into_iter().collect();
    match refs.as_slice() {
        [] => Err(AggError::Empty),
        [only] => {
            if only.sample_count == 0 {
                return Err(AggError::ZeroSampleCount { node: only.node });
            }
            Ok(only.params.clone())
        }
        many => {
            let mut agg = Aggregator::new();
            for u in many {
                agg.absorb(&u.params, u.sample_count, u.node)?;
            }
            agg.finalize()
        }
    }
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma` to every
/// parameter, drawn from the given stream. `sigma == 0` is the identity.
pub fn add_dp_noise(
    params: &ModelParams,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams, AggError> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(AggError::NegativeSigma(sigma));
    }
    let mut out = params.clone();
    if sigma > 0.0 {
        out.map_in_place(|v| v + sigma * standard_normal(rng));
    }
    Ok(out)
}
