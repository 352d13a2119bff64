//! Batch planning for out-of-core derivative tensors.
//!
//! Given the tensor rank, state count, element width and a per-batch memory
//! limit, [`plan_batches`] decides how many batches each dimension is split
//! into. Dimensions are reduced from the last one inward: a dropped
//! dimension is either fully batched (extent 1) or split into
//! `ceil(n_s / E_max)` slices where `E_max` slices of the remaining block
//! fit the limit. The leading dimension is never batched; if a single row
//! exceeds the limit the plan is infeasible.

use crate::error::{Error, Result};
use crate::tensor::IndexRange;
use serde::Serialize;

pub const GIB: u128 = 1 << 30;

/// Inputs to the batch planner.
#[derive(Debug, Clone, Copy)]
pub struct PlannerInput {
    /// Tensor rank; an order-N derivative tensor has rank N+1.
    pub n_dim: usize,
    /// State count (every dimension has this extent).
    pub n_states: usize,
    /// Per-batch memory limit in GiB.
    pub limit_gb: f64,
    /// Bytes per element (4, 8 or 16).
    pub elem_bytes: u32,
}

impl PlannerInput {
    pub fn validate(&self) -> Result<()> {
        if self.n_dim == 0 {
            return Err(Error::Argument("n_dim must be >= 1".into()));
        }
        if self.n_states == 0 {
            return Err(Error::Argument("n_states must be >= 1".into()));
        }
        if !(self.limit_gb > 0.0) || !self.limit_gb.is_finite() {
            return Err(Error::Argument("memory limit must be > 0".into()));
        }
        if ![4, 8, 16].contains(&self.elem_bytes) {
            return Err(Error::Argument(format!(
                "element width {} not in {{4, 8, 16}}",
                self.elem_bytes
            )));
        }
        Ok(())
    }

    pub fn limit_bytes(&self) -> u128 {
        (self.limit_gb * GIB as f64).floor() as u128
    }
}

/// A computed batching layout for one derivative tensor.
#[derive(Debug, Clone, Serialize)]
pub struct BatchPlan {
    /// Full tensor extents (`n_states` repeated `n_dim` times).
    pub dims: Vec<usize>,
    /// Batch count per dimension.
    pub batch_counts: Vec<usize>,
    /// Maximal batch extent per dimension.
    pub max_extents: Vec<usize>,
    pub elem_bytes: u32,
    pub limit_bytes: u128,
    pub total_bytes: u128,
    /// Bytes of a maximal batch.
    pub per_batch_bytes: u128,
    /// Total number of batches (product of `batch_counts`).
    pub num_batches: u128,
}

/// Bytes needed by a dense tensor of the given extents.
pub fn estimate_bytes(dims: &[usize], elem_bytes: u32) -> Result<u128> {
    if dims.is_empty() {
        return Err(Error::Argument("dims must be non-empty".into()));
    }
    let mut n: u128 = elem_bytes as u128;
    for &d in dims {
        if d == 0 {
            return Err(Error::Argument("extents must be >= 1".into()));
        }
        n = n
            .checked_mul(d as u128)
            .ok_or_else(|| Error::Argument("byte count overflows u128".into()))?;
    }
    Ok(n)
}

pub fn bytes_to_gb(bytes: u128) -> f64 {
    bytes as f64 / GIB as f64
}

/// Run the batch-size / batch-count computation.
pub fn plan_batches(input: &PlannerInput) -> Result<BatchPlan> {
    input.validate()?;
    let n_dim = input.n_dim;
    let n_s = input.n_states;
    let limit = input.limit_bytes();
    if limit == 0 {
        return Err(Error::InfeasiblePlan(
            "memory limit is below one element".into(),
        ));
    }

    let dims = vec![n_s; n_dim];
    let total = estimate_bytes(&dims, input.elem_bytes)?;
    let mut batch_counts = vec![1usize; n_dim];
    let mut max_extents = vec![n_s; n_dim];

    let mut block = total;
    let mut nd = n_dim;
    while block > limit {
        if nd == 1 {
            // a single leading-dimension row still exceeds the limit
            return Err(Error::InfeasiblePlan(format!(
                "a single row of {} bytes exceeds the {} byte limit",
                block, limit
            )));
        }
        nd -= 1;
        let sub = estimate_bytes(&dims[..nd], input.elem_bytes)?;
        if sub > limit {
            batch_counts[nd] = n_s;
            max_extents[nd] = 1;
        } else {
            let e_max = (limit / sub) as usize;
            debug_assert!(e_max >= 1 && e_max < n_s);
            batch_counts[nd] = n_s.div_ceil(e_max);
            max_extents[nd] = e_max;
        }
        block = sub;
    }

    let mut num_batches: u128 = 1;
    for &c in &batch_counts {
        num_batches = num_batches
            .checked_mul(c as u128)
            .ok_or_else(|| Error::Argument("batch count overflows u128".into()))?;
    }
    let per_batch_bytes = estimate_bytes(&max_extents, input.elem_bytes)?;
    debug_assert!(per_batch_bytes <= limit);

    Ok(BatchPlan {
        dims,
        batch_counts,
        max_extents,
        elem_bytes: input.elem_bytes,
        limit_bytes: limit,
        total_bytes: total,
        per_batch_bytes,
        num_batches,
    })
}

impl BatchPlan {
    pub fn n_states(&self) -> usize {
        self.dims[0]
    }

    pub fn total_gb(&self) -> f64 {
        bytes_to_gb(self.total_bytes)
    }

    pub fn per_batch_gb(&self) -> f64 {
        bytes_to_gb(self.per_batch_bytes)
    }

    /// Index ranges of batch `ordinal`, in the fixed enumeration order
    /// (outermost batched dimension slowest).
    pub fn ranges_for(&self, ordinal: u128) -> Result<Vec<IndexRange>> {
        if ordinal >= self.num_batches {
            return Err(Error::Argument(format!(
                "batch ordinal {ordinal} out of range (< {})",
                self.num_batches
            )));
        }
        let n_dim = self.dims.len();
        let mut strides = vec![1u128; n_dim];
        for d in (0..n_dim.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.batch_counts[d + 1] as u128;
        }
        let mut out = Vec::with_capacity(n_dim);
        let mut rem = ordinal;
        for d in 0..n_dim {
            let digit = (rem / strides[d]) as usize;
            rem %= strides[d];
            let start = digit * self.max_extents[d];
            let end = (start + self.max_extents[d]).min(self.dims[d]);
            out.push(IndexRange { start, end });
        }
        Ok(out)
    }

    /// Lazy enumeration of all batch range lists.
    pub fn iter_ranges(&self) -> RangeIter<'_> {
        RangeIter { plan: self, next: 0 }
    }
}

/// Iterator over per-batch index ranges; see [`BatchPlan::iter_ranges`].
pub struct RangeIter<'a> {
    plan: &'a BatchPlan,
    next: u128,
}

impl Iterator for RangeIter<'_> {
    type Item = Vec<IndexRange>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.plan.num_batches {
            return None;
        }
        let r = self.plan.ranges_for(self.next).expect("ordinal in range");
        self.next += 1;
        Some(r)
    }
}

/// Convenience constructor used by the enumeration examples.
pub fn enumerate_ranges(plan: &BatchPlan) -> RangeIter<'_> {
    plan.iter_ranges()
}
