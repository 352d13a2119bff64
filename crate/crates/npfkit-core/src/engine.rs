//! The batched, vectorized NPF pipeline.
//!
//! Per shard the schedule is: contract the leading output-state axis with
//! the selected rows of `psi` (folding in `1/N!`), squeeze extent-1 trailing
//! axes (their mode index is deferred into a scalar weight, a denominator
//! shift and a per-excitation factor), then walk the remaining trailing axes
//! in mode-column chunks against `phi`. At the innermost block the
//! resonance denominators are generated on the fly from the eigenvalues,
//! clamped by epsilon, and the block is contracted against products of the
//! modal excitation vectors. Per-shard partial results sum to the unbatched
//! result because every stage is linear in the derivative tensor.
//!
//! Workspace accounting covers every transient block; the peak must stay
//! within 4x the plan's per-batch bytes.

use crate::error::{Error, Result};
use crate::modal::{ModalBasis, ModeSubset};
use crate::planner::{plan_batches, BatchPlan, PlannerInput, GIB};
use crate::shard;
use crate::system::{
    derivative_batch_exact, derivative_batch_fd, DerivativeTensorBatch, EquilibriumPoint,
    StepPolicy, SystemModel,
};
use crate::tensor::DenseTensor;
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Whether modal initial conditions carry normal-form corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMode {
    /// Uncorrected zeta, matching the printed vectorized algorithm.
    Raw,
    /// Corrected zeta-star built from one extra streaming pass per order.
    Corrected,
}

/// Engine configuration.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Highest NPF order N (>= 2).
    pub max_order: usize,
    /// Resonance clamp threshold.
    pub epsilon: f64,
    pub correction: CorrectionMode,
    /// Excitation magnitude.
    pub delta: f64,
    /// Memory limit in GiB for auto plans and materialization gates.
    pub limit_gb: f64,
    pub workers: usize,
    /// Upper cap on mode-axis chunk widths.
    pub chunk_width: usize,
    /// Element width used for batch planning (the paper plans with 8).
    pub plan_elem_bytes: u32,
    /// Test-only fault injection: flips the sign of every streamed
    /// h-contribution so validation suites can prove they would notice.
    #[doc(hidden)]
    pub fault_sign_flip: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_order: 2,
            epsilon: 1e-8,
            correction: CorrectionMode::Raw,
            delta: 1.0,
            limit_gb: 8.0,
            workers: 1,
            chunk_width: 64,
            plan_elem_bytes: 8,
            fault_sign_flip: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_order < 2 {
            return Err(Error::Argument("max order must be >= 2".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Argument("epsilon must be > 0".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Argument("delta must be > 0".into()));
        }
        if self.workers == 0 {
            return Err(Error::Argument("worker count must be >= 1".into()));
        }
        if self.chunk_width == 0 {
            return Err(Error::Argument("chunk width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn limit_bytes(&self) -> u128 {
        (self.limit_gb * GIB as f64).floor() as u128
    }
}

/// Initial perturbation: one state, or one unit perturbation per state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Excitation {
    AllStates,
    Single { state: usize },
}

impl Excitation {
    pub fn columns(&self, n: usize) -> usize {
        match self {
            Excitation::AllStates => n,
            Excitation::Single { .. } => 1,
        }
    }
}

/// Modal initial conditions zeta and their corrected values.
#[derive(Debug, Clone)]
pub struct ModalInitialState {
    /// `n x n_exc`: column e is the modal image of exciting state e.
    pub zeta: DenseTensor,
    /// Corrections subtracted (equals `zeta` in raw mode).
    pub zeta_star: DenseTensor,
    /// Highest order of corrections applied (1 = none).
    pub correction_order: usize,
}

/// A fully materialized normal-form coefficient tensor.
#[derive(Debug, Clone)]
pub struct HTensor {
    pub order: usize,
    /// Rank order+1 over modes; the leading index runs over `mode_rows`.
    pub values: DenseTensor,
    pub epsilon: f64,
    pub mode_rows: Vec<usize>,
}

/// Per-order participation matrices.
#[derive(Debug, Clone)]
pub struct NpfResult {
    pub system: String,
    pub n_states: usize,
    pub selected_modes: Vec<usize>,
    /// Eigenvalues of the selected modes.
    pub eigenvalues: Vec<Complex64>,
    /// `n_sel x n`: order-1 matrix.
    pub order1: DenseTensor,
    /// Higher orders, ascending.
    pub higher: Vec<(usize, DenseTensor)>,
    /// Sum of order 1 and all higher orders.
    pub totals: DenseTensor,
    pub delta: f64,
    pub epsilon: f64,
    pub max_order: usize,
    pub correction: CorrectionMode,
    pub excitation: Excitation,
    pub peak_workspace_bytes: u64,
    pub workspace_budget_bytes: u64,
}

/// Derivative provider behind a shard source.
#[derive(Debug, Clone, Copy)]
pub enum Provider {
    Exact,
    FiniteDifference(StepPolicy),
}

/// Where shards come from: read from `dir` when the file exists, generated
/// on the fly otherwise (and persisted when `save` is set).
pub struct ShardSource<'a> {
    pub model: &'a SystemModel,
    pub x_star: &'a EquilibriumPoint,
    pub provider: Provider,
    pub dir: Option<PathBuf>,
    pub save: bool,
}

impl<'a> ShardSource<'a> {
    pub fn generate(model: &'a SystemModel, x_star: &'a EquilibriumPoint) -> Self {
        Self { model, x_star, provider: Provider::Exact, dir: None, save: false }
    }

    fn fetch(&self, order: usize, plan: &BatchPlan, ordinal: u64) -> Result<DerivativeTensorBatch> {
        let ranges = plan.ranges_for(ordinal as u128)?;
        if let Some(dir) = &self.dir {
            let path = dir.join(shard::shard_filename(order, ordinal));
            if path.is_file() {
                let (batch, _total) = shard::read_shard_file(&path)?;
                if batch.order != order || batch.n_states != self.model.n_states() {
                    return Err(Error::Coverage(format!(
                        "shard {} does not match the requested tensor",
                        path.display()
                    )));
                }
                if batch.ranges != ranges {
                    return Err(Error::Coverage(format!(
                        "shard {} ranges {:?} do not match the plan ({:?})",
                        path.display(),
                        batch.ranges,
                        ranges
                    )));
                }
                return Ok(batch);
            }
        }
        let batch = match self.provider {
            Provider::Exact => {
                derivative_batch_exact(self.model, self.x_star, order, &ranges, ordinal)?
            }
            Provider::FiniteDifference(policy) => {
                derivative_batch_fd(self.model, self.x_star, order, &ranges, ordinal, policy)?
            }
        };
        if self.save {
            if let Some(dir) = &self.dir {
                let total = u32::try_from(plan.num_batches)
                    .map_err(|_| Error::ShardFormat("batch total exceeds u32".into()))?;
                shard::write_shard_file(dir, &batch, total)?;
            }
        }
        Ok(batch)
    }
}

/// Plan selection for a run.
#[derive(Debug, Clone)]
pub enum PlanChoice {
    /// Plan from the engine config limit per order.
    Auto,
    /// Explicit plans keyed by order.
    Explicit(BTreeMap<usize, BatchPlan>),
}

// ---------------------------------------------------------------------------
// workspace accounting

const ENFORCE_FLOOR_BYTES: u64 = 4096;

#[derive(Debug, Clone, Copy)]
struct Workspace {
    current: u64,
    peak: u64,
    budget: u64,
    enforce: bool,
}

impl Workspace {
    fn new(per_batch_bytes: u128) -> Self {
        let budget = (4u128 * per_batch_bytes).min(u64::MAX as u128) as u64;
        Self {
            current: 0,
            peak: 0,
            budget,
            enforce: budget >= 4 * ENFORCE_FLOOR_BYTES,
        }
    }

    fn tensor_bytes(t: &DenseTensor) -> u64 {
        let w = match t.dtype() {
            crate::tensor::Dtype::Real64 => 8,
            crate::tensor::Dtype::Complex128 => 16,
        };
        (t.len() as u64) * w
    }

    fn alloc(&mut self, bytes: u64) -> Result<()> {
        self.current += bytes;
        if self.current > self.peak {
            self.peak = self.current;
        }
        if self.enforce && self.current > self.budget {
            return Err(Error::WorkspaceBudget(format!(
                "{} bytes in flight exceeds the {}-byte budget",
                self.current, self.budget
            )));
        }
        Ok(())
    }

    fn free(&mut self, bytes: u64) {
        debug_assert!(self.current >= bytes);
        self.current -= bytes;
    }
}

// ---------------------------------------------------------------------------
// zeta

/// Raw modal initial conditions: `zeta[i, e] = delta * psi[i, k_e]`.
pub fn compute_zeta(basis: &ModalBasis, exc: &Excitation, delta: f64) -> Result<ModalInitialState> {
    let n = basis.n();
    let psi = basis.psi.as_complex().expect("psi is complex");
    let (cols, states): (usize, Vec<usize>) = match exc {
        Excitation::AllStates => (n, (0..n).collect()),
        Excitation::Single { state } => {
            if *state >= n {
                return Err(Error::Argument(format!(
                    "excited state {state} out of range for n={n}"
                )));
            }
            (1, vec![*state])
        }
    };
    let mut z = vec![Complex64::new(0.0, 0.0); n * cols];
    for i in 0..n {
        for (e, &k) in states.iter().enumerate() {
            z[i * cols + e] = psi[i * n + k] * delta;
        }
    }
    let zeta = DenseTensor::complex(vec![n, cols], z)?;
    Ok(ModalInitialState { zeta_star: zeta.clone(), zeta, correction_order: 1 })
}

/// Subtract the order-2..N h-contractions of raw zeta (one streaming pass
/// per order), yielding zeta-star.
pub fn correct_zeta(
    state: &ModalInitialState,
    source: &ShardSource,
    plans: &BTreeMap<usize, BatchPlan>,
    basis: &ModalBasis,
    cfg: &EngineConfig,
) -> Result<(ModalInitialState, u64)> {
    let n = basis.n();
    let all = ModeSubset::all(n);
    let mut star = state.zeta.to_complex_vec();
    let cols = state.zeta.shape()[1];
    let mut peak = 0u64;
    let mut max_order = 1;
    for (&order, plan) in plans {
        let (contrib, p) =
            stream_order_contribution(order, source, plan, basis, &all, &state.zeta, cfg)?;
        peak = peak.max(p);
        let c = contrib.as_complex().expect("complex");
        for (s, v) in star.iter_mut().zip(c) {
            *s -= v;
        }
        max_order = max_order.max(order);
    }
    Ok((
        ModalInitialState {
            zeta: state.zeta.clone(),
            zeta_star: DenseTensor::complex(vec![n, cols], star)?,
            correction_order: max_order,
        },
        peak,
    ))
}

// ---------------------------------------------------------------------------
// the streaming contraction

/// Stream every shard of one order and return the selected-mode rows of
/// `h_order` contracted `order` times with the columns of `z`
/// (`n_sel x n_exc`), plus the peak tracked workspace bytes.
pub fn stream_order_contribution(
    order: usize,
    source: &ShardSource,
    plan: &BatchPlan,
    basis: &ModalBasis,
    modes: &ModeSubset,
    z: &DenseTensor,
    cfg: &EngineConfig,
) -> Result<(DenseTensor, u64)> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::Argument("mode subset is empty".into()));
    }
    let n = basis.n();
    if plan.dims.len() != order + 1 || plan.n_states() != n {
        return Err(Error::Coverage(format!(
            "plan for dims {:?} does not match order {order}, n={n}",
            plan.dims
        )));
    }
    if z.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "z has {} rows, expected {n}",
            z.shape()[0]
        )));
    }
    let nb = u64::try_from(plan.num_batches)
        .map_err(|_| Error::Argument("plan has too many batches to execute".into()))?;
    let n_sel = modes.len();
    let n_exc = z.shape()[1];

    let workers = cfg.workers.min(nb.max(1) as usize).max(1);
    let chunk = nb.div_ceil(workers as u64);

    let mut partials: Vec<Result<(Vec<Complex64>, u64)>> = Vec::with_capacity(workers);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            let lo = (w as u64) * chunk;
            let hi = ((w as u64 + 1) * chunk).min(nb);
            let z_ref = &*z;
            let basis_ref = basis;
            let modes_ref = modes;
            let plan_ref = plan;
            let cfg_ref = cfg;
            let source_ref = &*source;
            handles.push(scope.spawn(move || -> Result<(Vec<Complex64>, u64)> {
                let mut ws = Workspace::new(plan_ref.per_batch_bytes);
                let mut acc = vec![Complex64::new(0.0, 0.0); n_sel * n_exc];
                for ordinal in lo..hi {
                    let batch = source_ref.fetch(order, plan_ref, ordinal)?;
                    process_shard(
                        &batch, basis_ref, modes_ref, z_ref, cfg_ref, &mut ws, &mut acc,
                    )?;
                }
                Ok((acc, ws.peak))
            }));
        }
        for h in handles {
            partials.push(h.join().expect("worker panicked"));
        }
    });

    let mut acc = vec![Complex64::new(0.0, 0.0); n_sel * n_exc];
    let mut peak = 0u64;
    for p in partials {
        let (part, pk) = p?;
        for (a, v) in acc.iter_mut().zip(&part) {
            *a += v;
        }
        peak = peak.max(pk);
    }
    Ok((DenseTensor::complex(vec![n_sel, n_exc], acc)?, peak))
}

/// Rows `range` of a complex matrix as a standalone rank-2 tensor.
fn rows_of(m: &DenseTensor, start: usize, end: usize) -> DenseTensor {
    let n_cols = m.shape()[1];
    let v = m.as_complex().expect("complex matrix");
    DenseTensor::complex(
        vec![end - start, n_cols],
        v[start * n_cols..end * n_cols].to_vec(),
    )
    .expect("shape")
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn process_shard(
    batch: &DerivativeTensorBatch,
    basis: &ModalBasis,
    modes: &ModeSubset,
    z: &DenseTensor,
    cfg: &EngineConfig,
    ws: &mut Workspace,
    acc: &mut [Complex64],
) -> Result<()> {
    let n = basis.n();
    let order = batch.order;
    let sel = modes.indices();
    let n_sel = sel.len();
    let psi = basis.psi.as_complex().expect("complex");
    let inv_fact = 1.0 / factorial(order);

    // leading contraction: raw output states -> selected modes, with 1/N!
    let lead_range = batch.ranges[0];
    let w0 = lead_range.width();
    let mut lead = vec![Complex64::new(0.0, 0.0); w0 * n_sel];
    for a in 0..w0 {
        for (c, &i) in sel.iter().enumerate() {
            lead[a * n_sel + c] = psi[i * n + lead_range.start + a] * inv_fact;
        }
    }
    let lead = DenseTensor::complex(vec![w0, n_sel], lead)?;
    ws.alloc(Workspace::tensor_bytes(&lead))?;

    let g = batch.values.contract_axis(&lead, 0)?;
    ws.alloc(Workspace::tensor_bytes(&g))?;
    ws.free(Workspace::tensor_bytes(&lead));
    drop(lead);

    // classify trailing axes
    let mut scalar_axes: Vec<usize> = Vec::new(); // raw state index per squeezed axis
    let mut walk_axes: Vec<(usize, crate::tensor::IndexRange)> = Vec::new(); // (post-squeeze pos, range)
    let mut squeeze_list: Vec<usize> = Vec::new();
    let mut pos = 1usize;
    for t in 1..=order {
        let r = batch.ranges[t];
        if r.width() == 1 {
            scalar_axes.push(r.start);
            squeeze_list.push(t);
        } else {
            walk_axes.push((pos, r));
            pos += 1;
        }
    }
    let g_bytes = Workspace::tensor_bytes(&g);
    let g = if squeeze_list.is_empty() {
        g
    } else {
        g.into_squeezed(&squeeze_list)?
    };

    // per walked axis: phi rows restricted to the shard range
    let mut phi_rows: Vec<DenseTensor> = Vec::with_capacity(walk_axes.len());
    for (_, r) in &walk_axes {
        let m = rows_of(&basis.phi, r.start, r.end);
        ws.alloc(Workspace::tensor_bytes(&m))?;
        phi_rows.push(m);
    }

    let lambda_sel: Vec<Complex64> = sel.iter().map(|&i| basis.lambda[i]).collect();
    let mut fin = Finalizer {
        lambda: &basis.lambda,
        lambda_sel: &lambda_sel,
        phi: basis.phi.as_complex().expect("complex"),
        z: z.as_complex().expect("complex"),
        n_exc: z.shape()[1],
        n,
        eps: cfg.epsilon,
        sign: if cfg.fault_sign_flip { -1.0 } else { 1.0 },
        scalar_axes: &scalar_axes,
        acc,
        n_sel,
    };

    let mut offsets = vec![0usize; walk_axes.len()];
    walk(
        &g, &walk_axes, &phi_rows, 0, &mut offsets, cfg.chunk_width, ws, &mut fin,
    )?;

    ws.free(g_bytes);
    for m in &phi_rows {
        ws.free(Workspace::tensor_bytes(m));
    }
    Ok(())
}

/// Nested chunked contraction over the walked trailing axes.
#[allow(clippy::too_many_arguments)]
fn walk(
    block: &DenseTensor,
    walk_axes: &[(usize, crate::tensor::IndexRange)],
    phi_rows: &[DenseTensor],
    level: usize,
    offsets: &mut Vec<usize>,
    chunk_cap: usize,
    ws: &mut Workspace,
    fin: &mut Finalizer,
) -> Result<()> {
    if level == walk_axes.len() {
        let mode_axes: Vec<(usize, usize)> = walk_axes
            .iter()
            .zip(offsets.iter())
            .map(|((pos, _), &off)| (*pos, off))
            .collect();
        return fin.run(block, &mode_axes);
    }
    let (axis_pos, range) = walk_axes[level];
    let n = fin.n;
    // keep each level's block at most a quarter of its parent
    let width = chunk_cap.min(n).min((range.width() / 4).max(1));
    let mut lo = 0usize;
    while lo < n {
        let hi = (lo + width).min(n);
        let sub = block.contract_axis_cols(&phi_rows[level], axis_pos, lo..hi)?;
        ws.alloc(Workspace::tensor_bytes(&sub))?;
        offsets[level] = lo;
        walk(&sub, walk_axes, phi_rows, level + 1, offsets, chunk_cap, ws, fin)?;
        ws.free(Workspace::tensor_bytes(&sub));
        lo = hi;
    }
    Ok(())
}

/// Innermost stage: resonance division fused with the excitation-product
/// contraction, allocation-free.
struct Finalizer<'a> {
    lambda: &'a [Complex64],
    lambda_sel: &'a [Complex64],
    /// Right eigenvectors, row-major `n x n`.
    phi: &'a [Complex64],
    z: &'a [Complex64],
    n_exc: usize,
    n: usize,
    eps: f64,
    sign: f64,
    /// Raw state index of each squeezed (extent-1) trailing axis.
    scalar_axes: &'a [usize],
    acc: &'a mut [Complex64],
    n_sel: usize,
}

impl Finalizer<'_> {
    /// `block` has shape `[n_sel, d_1, ..., d_K]`; `mode_axes[j]` gives the
    /// block axis position and mode offset of walked axis j.
    fn run(&mut self, block: &DenseTensor, mode_axes: &[(usize, usize)]) -> Result<()> {
        let n = self.n;
        let n_exc = self.n_exc;
        let data = block.as_complex().expect("complex block");
        let shape = block.shape();
        let k_axes = mode_axes.len();
        debug_assert_eq!(shape.len(), k_axes + 1);
        let inner: usize = shape[1..].iter().product();

        // odometer over the scalar (squeezed) axes' mode indices
        let s_count = self.scalar_axes.len();
        let mut s_idx = vec![0usize; s_count];
        let s_total = n.pow(s_count as u32);
        let mut wf = vec![Complex64::new(0.0, 0.0); n_exc];

        for _ in 0..s_total {
            // weight, denominator shift and excitation factors of the tuple
            let mut omega = Complex64::new(self.sign, 0.0);
            let mut shift = Complex64::new(0.0, 0.0);
            for e in wf.iter_mut() {
                *e = Complex64::new(1.0, 0.0);
            }
            for (j, &raw) in self.scalar_axes.iter().enumerate() {
                let r = s_idx[j];
                omega *= self.phi[raw * n + r];
                shift += self.lambda[r];
                for e in 0..n_exc {
                    wf[e] *= self.z[r * n_exc + e];
                }
            }

            self.contract_block(data, shape, inner, mode_axes, omega, shift, &wf)?;

            // bump the scalar odometer
            for d in (0..s_count).rev() {
                s_idx[d] += 1;
                if s_idx[d] < n {
                    break;
                }
                s_idx[d] = 0;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn contract_block(
        &mut self,
        data: &[Complex64],
        shape: &[usize],
        inner: usize,
        mode_axes: &[(usize, usize)],
        omega: Complex64,
        shift: Complex64,
        wf: &[Complex64],
    ) -> Result<()> {
        let n_exc = self.n_exc;
        let n_sel = self.n_sel;
        let k_axes = mode_axes.len();
        // trailing dims in block order with their mode offsets
        let dims: Vec<usize> = shape[1..].to_vec();
        let offs: Vec<usize> = {
            let mut o = vec![0usize; k_axes];
            for &(pos, off) in mode_axes {
                o[pos - 1] = off;
            }
            o
        };
        let mut idx = vec![0usize; k_axes];
        // prefix[j] holds omega*wf product of rows 0..j; prefix[k_axes] is the
        // full excitation product row
        let mut prefix = vec![Complex64::new(0.0, 0.0); (k_axes + 1) * n_exc];
        for e in 0..n_exc {
            prefix[e] = omega * wf[e];
        }
        let mut dirty = 0usize; // lowest prefix level that must be rebuilt
        let mut base = shift;
        for &(pos, off) in mode_axes {
            let _ = pos;
            base += self.lambda[off];
        }

        for f in 0..inner {
            // rebuild stale prefix rows
            for j in dirty..k_axes {
                let r = offs[j] + idx[j];
                let (lo, hi) = (j * n_exc, (j + 1) * n_exc);
                for e in 0..n_exc {
                    prefix[hi + e] = prefix[lo + e] * self.z[r * n_exc + e];
                }
            }
            dirty = k_axes;
            let w_row = &prefix[k_axes * n_exc..(k_axes + 1) * n_exc];

            for i in 0..n_sel {
                let mut den = base - self.lambda_sel[i];
                if den.norm() < self.eps {
                    den = Complex64::new(self.eps, 0.0);
                }
                let v = data[i * inner + f] / den;
                if v.re == 0.0 && v.im == 0.0 {
                    continue;
                }
                let row = &mut self.acc[i * n_exc..(i + 1) * n_exc];
                for e in 0..n_exc {
                    row[e] += v * w_row[e];
                }
            }

            // bump the trailing odometer, maintaining the lambda base
            for d in (0..k_axes).rev() {
                base -= self.lambda[offs[d] + idx[d]];
                idx[d] += 1;
                if idx[d] < dims[d] {
                    base += self.lambda[offs[d] + idx[d]];
                    dirty = dirty.min(d);
                    break;
                }
                idx[d] = 0;
                base += self.lambda[offs[d]];
                dirty = dirty.min(d);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// materialized h tensors

/// Materialize the full order-M coefficient tensor (selected leading rows).
/// Errors with a size diagnostic when it cannot fit the configured limit;
/// the streaming path has no such restriction.
pub fn export_h_tensor(
    order: usize,
    source: &ShardSource,
    plan: &BatchPlan,
    basis: &ModalBasis,
    modes: &ModeSubset,
    cfg: &EngineConfig,
) -> Result<HTensor> {
    cfg.validate()?;
    let n = basis.n();
    if plan.dims.len() != order + 1 || plan.n_states() != n {
        return Err(Error::Coverage(format!(
            "plan for dims {:?} does not match order {order}, n={n}",
            plan.dims
        )));
    }
    let n_sel = modes.len();
    let mut elems: u128 = n_sel as u128;
    for _ in 0..order {
        elems = elems
            .checked_mul(n as u128)
            .ok_or_else(|| Error::MemoryLimit("h tensor size overflows".into()))?;
    }
    let bytes = elems
        .checked_mul(16)
        .ok_or_else(|| Error::MemoryLimit("h tensor size overflows".into()))?;
    if bytes > cfg.limit_bytes() {
        return Err(Error::MemoryLimit(format!(
            "h tensor needs {:.2} GB > limit {:.2} GB; use the streaming path",
            crate::planner::bytes_to_gb(bytes),
            cfg.limit_gb
        )));
    }
    let sel = modes.indices();
    let psi = basis.psi.as_complex().expect("complex");
    let inv_fact = 1.0 / factorial(order);
    let mut shape = vec![n_sel];
    shape.extend(std::iter::repeat(n).take(order));
    let mut cm = DenseTensor::zeros_complex(shape.clone())?;

    let nb = u64::try_from(plan.num_batches)
        .map_err(|_| Error::Argument("plan has too many batches".into()))?;
    for ordinal in 0..nb {
        let batch = source.fetch(order, plan, ordinal)?;
        let lead_range = batch.ranges[0];
        let w0 = lead_range.width();
        let mut lead = vec![Complex64::new(0.0, 0.0); w0 * n_sel];
        for a in 0..w0 {
            for (c, &i) in sel.iter().enumerate() {
                lead[a * n_sel + c] = psi[i * n + lead_range.start + a] * inv_fact;
            }
        }
        let lead = DenseTensor::complex(vec![w0, n_sel], lead)?;
        let mut block = batch.values.contract_axis(&lead, 0)?;
        for t in 1..=order {
            let r = batch.ranges[t];
            let phi_rows = rows_of(&basis.phi, r.start, r.end);
            block = block.contract_axis(&phi_rows, t)?;
        }
        cm.add_assign(&block)?;
    }

    // divide by the resonance denominators, leading index mapped through sel
    let (shape, mut data) = cm.into_complex_parts();
    let inner: usize = shape[1..].iter().product();
    let mut idx = vec![0usize; order];
    for (row, &i) in sel.iter().enumerate() {
        let li = basis.lambda[i];
        idx.iter_mut().for_each(|d| *d = 0);
        let mut lam_sum = basis.lambda[0] * order as f64;
        for f in 0..inner {
            let mut den = lam_sum - li;
            if den.norm() < cfg.epsilon {
                den = Complex64::new(cfg.epsilon, 0.0);
            }
            data[row * inner + f] /= den;
            for d in (0..order).rev() {
                lam_sum -= basis.lambda[idx[d]];
                idx[d] += 1;
                if idx[d] < n {
                    lam_sum += basis.lambda[idx[d]];
                    break;
                }
                idx[d] = 0;
                lam_sum += basis.lambda[0];
            }
        }
    }
    Ok(HTensor {
        order,
        values: DenseTensor::complex(shape, data)?,
        epsilon: cfg.epsilon,
        mode_rows: sel.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// full pipeline

/// Resolve the per-order batch plans for a run.
pub fn resolve_plans(
    n: usize,
    cfg: &EngineConfig,
    choice: &PlanChoice,
) -> Result<BTreeMap<usize, BatchPlan>> {
    let mut plans = BTreeMap::new();
    for order in 2..=cfg.max_order {
        let plan = match choice {
            PlanChoice::Auto => plan_batches(&PlannerInput {
                n_dim: order + 1,
                n_states: n,
                limit_gb: cfg.limit_gb,
                elem_bytes: cfg.plan_elem_bytes,
            })?,
            PlanChoice::Explicit(map) => {
                let p = map.get(&order).ok_or_else(|| {
                    Error::Argument(format!("no explicit plan for order {order}"))
                })?;
                if p.dims.len() != order + 1 || p.n_states() != n {
                    return Err(Error::Argument(format!(
                        "explicit plan for order {order} has dims {:?}",
                        p.dims
                    )));
                }
                p.clone()
            }
        };
        plans.insert(order, plan);
    }
    Ok(plans)
}

/// Compute per-order participation matrices.
///
/// Result rows are the selected modes. For an all-states excitation, column
/// k pairs the excitation of state k with the observation of state k (the
/// vectorized schedule); for a single-state excitation the columns range
/// over observed states under that one excitation.
pub fn compute_npf(
    source: &ShardSource,
    basis: &ModalBasis,
    modes: &ModeSubset,
    plan_choice: &PlanChoice,
    cfg: &EngineConfig,
    exc: &Excitation,
) -> Result<NpfResult> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::Argument("mode subset is empty".into()));
    }
    let n = basis.n();
    if source.model.n_states() != n {
        return Err(Error::Dimension("model/basis size mismatch".into()));
    }
    let plans = resolve_plans(n, cfg, plan_choice)?;
    let raw = compute_zeta(basis, exc, cfg.delta)?;
    let mut peak = 0u64;
    let state = match cfg.correction {
        CorrectionMode::Raw => raw,
        CorrectionMode::Corrected => {
            let (state, p) = correct_zeta(&raw, source, &plans, basis, cfg)?;
            peak = peak.max(p);
            state
        }
    };
    let z_use = &state.zeta_star;
    let n_exc = z_use.shape()[1];
    let sel = modes.indices();
    let n_sel = sel.len();
    let phi = basis.phi.as_complex().expect("complex");
    let zv = z_use.as_complex().expect("complex");

    // column mapping: all-states pairs excitation k with observation k;
    // a single excitation fans out over observed states
    let col_of = |k: usize| -> usize {
        if n_exc == n {
            k
        } else {
            0
        }
    };

    let mut order1 = vec![Complex64::new(0.0, 0.0); n_sel * n];
    for (row, &i) in sel.iter().enumerate() {
        for k in 0..n {
            order1[row * n + k] = phi[k * n + i] * zv[i * n_exc + col_of(k)];
        }
    }
    let order1 = DenseTensor::complex(vec![n_sel, n], order1)?;

    let mut higher = Vec::new();
    for (&order, plan) in &plans {
        let (contrib, p) =
            stream_order_contribution(order, source, plan, basis, modes, z_use, cfg)?;
        peak = peak.max(p);
        let cv = contrib.as_complex().expect("complex");
        let mut pm = vec![Complex64::new(0.0, 0.0); n_sel * n];
        for (row, &i) in sel.iter().enumerate() {
            for k in 0..n {
                pm[row * n + k] = phi[k * n + i] * cv[row * n_exc + col_of(k)];
            }
        }
        higher.push((order, DenseTensor::complex(vec![n_sel, n], pm)?));
    }

    let mut totals = order1.clone();
    for (_, pm) in &higher {
        totals.add_assign(pm)?;
    }

    let budget = plans
        .values()
        .map(|p| (4u128 * p.per_batch_bytes).min(u64::MAX as u128) as u64)
        .max()
        .unwrap_or(0);

    Ok(NpfResult {
        system: source.model.name().to_string(),
        n_states: n,
        selected_modes: sel.to_vec(),
        eigenvalues: sel.iter().map(|&i| basis.lambda[i]).collect(),
        order1,
        higher,
        totals,
        delta: cfg.delta,
        epsilon: cfg.epsilon,
        max_order: cfg.max_order,
        correction: cfg.correction,
        excitation: *exc,
        peak_workspace_bytes: peak,
        workspace_budget_bytes: budget,
    })
}


#[cfg(test)]
mod debug_tests {
    use super::*;
    use crate::modal::{decompose, ModeSubset};
    use crate::system::{find_equilibrium, linear_part, PolynomialSystem, Term};

    #[test]
    fn dbg_monomial() {
        let (k, a, b, c) = (2usize, 0usize, 1usize, 0.8f64);
        let model = SystemModel::Polynomial(
            PolynomialSystem::new(
                3,
                vec![
                    Term { target: 0, coeff: -1.0, exponents: vec![(0, 1)] },
                    Term { target: 1, coeff: -2.0, exponents: vec![(1, 1)] },
                    Term { target: 2, coeff: -3.5, exponents: vec![(2, 1)] },
                    Term { target: k, coeff: c, exponents: vec![(a, 1), (b, 1)] },
                ],
                Some(vec![0.0; 3]),
                "mono".into(),
            )
            .unwrap(),
        );
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let a1 = linear_part(&model, &eq).unwrap();
        println!("A1 = {:?}", a1.as_real().unwrap());
        let basis = decompose(&a1, 1e10).unwrap();
        println!("lambda = {:?}", basis.lambda);
        println!("phi = {:?}", basis.phi.to_complex_vec());
        let full = vec![crate::tensor::IndexRange::full(3); 3];
        let a2 = crate::system::derivative_batch_exact(&model, &eq, 2, &full, 0).unwrap();
        println!("A2 = {:?}", a2.values.as_real().unwrap());
        let src = ShardSource::generate(&model, &eq);
        let cfg = EngineConfig::default();
        let plans = resolve_plans(3, &cfg, &PlanChoice::Auto).unwrap();
        let h = export_h_tensor(2, &src, &plans[&2], &basis, &ModeSubset::all(3), &cfg).unwrap();
        for i in 0..3 {
            for aa in 0..3 {
                for bb in 0..3 {
                    let v = h.values.value_at(&[i, aa, bb]);
                    if v.norm() > 1e-10 {
                        println!("h[{i},{aa},{bb}] = {v}");
                    }
                }
            }
        }
    }
}
