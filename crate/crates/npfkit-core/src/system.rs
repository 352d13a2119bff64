//! Dynamical system definitions and derivative-tensor providers.
//!
//! Two model families are supported: polynomial vector fields and
//! sine-coupled oscillator networks (classical swing equations, angles
//! then speeds). Both admit closed-form partial derivatives of any order,
//! so raw derivative tensors can be produced exactly; a central
//! finite-difference provider covers the black-box path up to order 4.
//!
//! Stored tensors are raw partial derivatives; the `1/N!` Taylor factor is
//! applied downstream by the contraction pipeline.

use crate::error::{Error, Result};
use crate::tensor::{bump_odometer, DenseTensor, IndexRange};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One monomial `c * prod_s x_s^p` feeding equation `target`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    pub target: usize,
    pub coeff: f64,
    /// `(state, power)` pairs, powers >= 1.
    pub exponents: Vec<(usize, u32)>,
}

/// Polynomial vector field `d/dt x = f(x)`.
#[derive(Debug, Clone)]
pub struct PolynomialSystem {
    pub n_states: usize,
    pub terms: Vec<Term>,
    pub declared_equilibrium: Option<Vec<f64>>,
    pub name: String,
    terms_by_target: Vec<Vec<usize>>,
}

/// Swing-equation network: `m` machines, states are angles then speeds.
///
/// `d/dt delta_i = omega_i`
/// `d/dt omega_i = (P_i - D_i omega_i - sum_j V_i V_j C_ij sin(delta_i - delta_j)) / M_i`
#[derive(Debug, Clone)]
pub struct SineNetwork {
    pub machines: usize,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub mech_power: Vec<f64>,
    /// Symmetric coupling matrix with zero diagonal, row-major `m x m`.
    pub coupling: Vec<f64>,
    pub voltage: Vec<f64>,
    pub declared_equilibrium: Option<Vec<f64>>,
    pub name: String,
}

/// Any supported model.
#[derive(Debug, Clone)]
pub enum SystemModel {
    Polynomial(PolynomialSystem),
    Sine(SineNetwork),
}

/// A located equilibrium with its residual.
#[derive(Debug, Clone)]
pub struct EquilibriumPoint {
    pub x: Vec<f64>,
    /// Max-norm of the vector field at `x`.
    pub residual: f64,
}

/// A contiguous slice of one raw order-N derivative tensor.
#[derive(Debug, Clone)]
pub struct DerivativeTensorBatch {
    /// Derivative order N; the tensor rank is N+1.
    pub order: usize,
    pub n_states: usize,
    pub ordinal: u64,
    /// One range per dimension; dimension 0 is the output-state index.
    pub ranges: Vec<IndexRange>,
    pub values: DenseTensor,
    pub warnings: Vec<String>,
}

/// Step control for the finite-difference provider.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepPolicy {
    /// Overrides the default base step `eps^(1/(N+2))`.
    pub base_step: Option<f64>,
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
enum SystemDoc {
    #[serde(rename = "polynomial")]
    Polynomial {
        name: Option<String>,
        n: usize,
        terms: Vec<TermDoc>,
        equilibrium: Option<Vec<f64>>,
    },
    #[serde(rename = "sine_network")]
    SineNetwork {
        name: Option<String>,
        m: usize,
        inertia: Vec<f64>,
        damping: Vec<f64>,
        mech_power: Vec<f64>,
        coupling: Vec<Vec<f64>>,
        voltage: Vec<f64>,
        equilibrium: Option<Vec<f64>>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TermDoc {
    target: usize,
    coeff: f64,
    exponents: Vec<(usize, u32)>,
}

/// Parse a system-definition document (JSON).
pub fn parse_system(document: &str) -> Result<SystemModel> {
    let doc: SystemDoc = serde_json::from_str(document)
        .map_err(|e| Error::Parse(format!("system definition: {e}")))?;
    match doc {
        SystemDoc::Polynomial { name, n, terms, equilibrium } => {
            let terms = terms
                .into_iter()
                .map(|t| Term { target: t.target, coeff: t.coeff, exponents: t.exponents })
                .collect();
            let sys = PolynomialSystem::new(
                n,
                terms,
                equilibrium,
                name.unwrap_or_else(|| "polynomial".into()),
            )?;
            Ok(SystemModel::Polynomial(sys))
        }
        SystemDoc::SineNetwork {
            name,
            m,
            inertia,
            damping,
            mech_power,
            coupling,
            voltage,
            equilibrium,
        } => {
            if coupling.len() != m || coupling.iter().any(|r| r.len() != m) {
                return Err(Error::Parse(format!("coupling matrix must be {m} x {m}")));
            }
            let flat: Vec<f64> = coupling.into_iter().flatten().collect();
            let sys = SineNetwork::new(
                m,
                inertia,
                damping,
                mech_power,
                flat,
                voltage,
                equilibrium,
                name.unwrap_or_else(|| "sine_network".into()),
            )?;
            Ok(SystemModel::Sine(sys))
        }
    }
}

impl PolynomialSystem {
    pub fn new(
        n_states: usize,
        terms: Vec<Term>,
        declared_equilibrium: Option<Vec<f64>>,
        name: String,
    ) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::Parse("n must be >= 1".into()));
        }
        for (ti, t) in terms.iter().enumerate() {
            if t.target >= n_states {
                return Err(Error::Parse(format!(
                    "term {ti}: target state {} out of range for n={n_states}",
                    t.target
                )));
            }
            if t.exponents.is_empty() {
                return Err(Error::Parse(format!(
                    "term {ti}: constant terms are not supported (total degree >= 1)"
                )));
            }
            let mut seen = vec![false; n_states];
            for &(s, p) in &t.exponents {
                if s >= n_states {
                    return Err(Error::Parse(format!(
                        "term {ti}: exponent references state {s} of a {n_states}-state system"
                    )));
                }
                if p == 0 {
                    return Err(Error::Parse(format!("term {ti}: power must be >= 1")));
                }
                if seen[s] {
                    return Err(Error::Parse(format!(
                        "term {ti}: state {s} appears twice in exponents"
                    )));
                }
                seen[s] = true;
            }
        }
        if let Some(eq) = &declared_equilibrium {
            if eq.len() != n_states {
                return Err(Error::Parse(format!(
                    "declared equilibrium has length {}, expected {n_states}",
                    eq.len()
                )));
            }
        }
        let mut terms_by_target = vec![Vec::new(); n_states];
        for (i, t) in terms.iter().enumerate() {
            terms_by_target[t.target].push(i);
        }
        Ok(Self { n_states, terms, declared_equilibrium, name, terms_by_target })
    }
}

impl SineNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        machines: usize,
        inertia: Vec<f64>,
        damping: Vec<f64>,
        mech_power: Vec<f64>,
        coupling: Vec<f64>,
        voltage: Vec<f64>,
        declared_equilibrium: Option<Vec<f64>>,
        name: String,
    ) -> Result<Self> {
        let m = machines;
        if m == 0 {
            return Err(Error::Parse("machine count must be >= 1".into()));
        }
        for (label, v) in [
            ("inertia", &inertia),
            ("damping", &damping),
            ("mech_power", &mech_power),
            ("voltage", &voltage),
        ] {
            if v.len() != m {
                return Err(Error::Parse(format!(
                    "{label} has length {}, expected {m}",
                    v.len()
                )));
            }
        }
        if coupling.len() != m * m {
            return Err(Error::Parse(format!(
                "coupling has {} entries, expected {}",
                coupling.len(),
                m * m
            )));
        }
        if inertia.iter().any(|&x| x <= 0.0) {
            return Err(Error::Parse("inertias must be strictly positive".into()));
        }
        if damping.iter().any(|&x| x < 0.0) {
            return Err(Error::Parse("damping must be non-negative".into()));
        }
        for i in 0..m {
            if coupling[i * m + i] != 0.0 {
                return Err(Error::Parse(format!("coupling diagonal entry {i} must be 0")));
            }
            for j in 0..i {
                if coupling[i * m + j] != coupling[j * m + i] {
                    return Err(Error::Parse(format!(
                        "coupling matrix is asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if let Some(eq) = &declared_equilibrium {
            if eq.len() != 2 * m {
                return Err(Error::Parse(format!(
                    "declared equilibrium has length {}, expected {}",
                    eq.len(),
                    2 * m
                )));
            }
        }
        Ok(Self {
            machines,
            inertia,
            damping,
            mech_power,
            coupling,
            voltage,
            declared_equilibrium,
            name,
        })
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.voltage[i] * self.voltage[j] * self.coupling[i * self.machines + j]
    }
}

impl SystemModel {
    pub fn n_states(&self) -> usize {
        match self {
            SystemModel::Polynomial(p) => p.n_states,
            SystemModel::Sine(s) => 2 * s.machines,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            SystemModel::Polynomial(p) => &p.name,
            SystemModel::Sine(s) => &s.name,
        }
    }

    pub fn declared_equilibrium(&self) -> Option<&[f64]> {
        match self {
            SystemModel::Polynomial(p) => p.declared_equilibrium.as_deref(),
            SystemModel::Sine(s) => s.declared_equilibrium.as_deref(),
        }
    }
}

// ---------------------------------------------------------------------------
// field evaluation

/// Evaluate the vector field at `x`.
pub fn eval_field(model: &SystemModel, x: &[f64]) -> Result<Vec<f64>> {
    let n = model.n_states();
    if x.len() != n {
        return Err(Error::Dimension(format!(
            "state vector has length {}, expected {n}",
            x.len()
        )));
    }
    let mut f = vec![0.0; n];
    match model {
        SystemModel::Polynomial(p) => {
            for t in &p.terms {
                let mut v = t.coeff;
                for &(s, pw) in &t.exponents {
                    v *= x[s].powi(pw as i32);
                }
                f[t.target] += v;
            }
        }
        SystemModel::Sine(s) => {
            let m = s.machines;
            for i in 0..m {
                f[i] = x[m + i];
                let mut pe = 0.0;
                for j in 0..m {
                    if i != j {
                        pe += s.weight(i, j) * (x[i] - x[j]).sin();
                    }
                }
                f[m + i] = (s.mech_power[i] - s.damping[i] * x[m + i] - pe) / s.inertia[i];
            }
        }
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// equilibrium solve

/// Newton iteration for an equilibrium; rank-deficient Jacobians (e.g. the
/// uniform-angle-shift null mode of a sine network) are handled with a
/// least-squares step.
pub fn solve_equilibrium(
    model: &SystemModel,
    x_guess: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<EquilibriumPoint> {
    let n = model.n_states();
    if x_guess.len() != n || x_guess.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("guess must be finite and of length n".into()));
    }
    let mut x = x_guess.to_vec();
    for _ in 0..=max_iter {
        let f = eval_field(model, &x)?;
        let residual = f.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if residual <= tol {
            return Ok(EquilibriumPoint { x, residual });
        }
        let jac = jacobian_at(model, &x)?;
        let step = solve_least_squares(&jac, &f, n)?;
        for i in 0..n {
            x[i] -= step[i];
            if !x[i].is_finite() {
                return Err(Error::Equilibrium("iterate diverged".into()));
            }
        }
    }
    Err(Error::Equilibrium(format!(
        "no convergence within {max_iter} Newton iterations"
    )))
}

/// Jacobian of the field at an arbitrary point (analytic).
fn jacobian_at(model: &SystemModel, x: &[f64]) -> Result<Vec<f64>> {
    let n = model.n_states();
    let mut j = vec![0.0; n * n];
    match model {
        SystemModel::Polynomial(p) => {
            for t in &p.terms {
                for &(s, pw) in &t.exponents {
                    let mut v = t.coeff * pw as f64 * x[s].powi(pw as i32 - 1);
                    for &(s2, pw2) in &t.exponents {
                        if s2 != s {
                            v *= x[s2].powi(pw2 as i32);
                        }
                    }
                    j[t.target * n + s] += v;
                }
            }
        }
        SystemModel::Sine(s) => {
            let m = s.machines;
            for i in 0..m {
                j[i * n + m + i] = 1.0;
                j[(m + i) * n + m + i] = -s.damping[i] / s.inertia[i];
                for jj in 0..m {
                    if i != jj {
                        let c = s.weight(i, jj) * (x[i] - x[jj]).cos() / s.inertia[i];
                        j[(m + i) * n + i] -= c;
                        j[(m + i) * n + jj] += c;
                    }
                }
            }
        }
    }
    Ok(j)
}

fn solve_least_squares(jac: &[f64], rhs: &[f64], n: usize) -> Result<Vec<f64>> {
    use faer::Mat;
    let a = Mat::<f64>::from_fn(n, n, |r, c| jac[r * n + c]);
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("Jacobian has non-finite entries".into()));
    }
    let svd = a
        .svd()
        .map_err(|_| Error::Singular("SVD of Jacobian failed".into()))?;
    let s = svd.S();
    let smax = (0..n).map(|i| s[i]).fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Err(Error::Singular("Jacobian is identically zero".into()));
    }
    let cut = smax * 1e-12;
    let u = svd.U();
    let v = svd.V();
    // x = V * diag(1/s) * U^T * rhs, truncating tiny singular values
    let mut ut_rhs = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for r in 0..n {
            acc += u[(r, i)] * rhs[r];
        }
        ut_rhs[i] = if s[i] > cut { acc / s[i] } else { 0.0 };
    }
    let mut out = vec![0.0; n];
    for r in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += v[(r, i)] * ut_rhs[i];
        }
        out[r] = acc;
    }
    Ok(out)
}

/// Verify a declared equilibrium against the field.
pub fn verify_equilibrium(model: &SystemModel, x: &[f64], tol: f64) -> Result<EquilibriumPoint> {
    let f = eval_field(model, x)?;
    let residual = f.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if residual > tol {
        return Err(Error::Equilibrium(format!(
            "declared equilibrium has residual {residual:.3e} > {tol:.3e}"
        )));
    }
    Ok(EquilibriumPoint { x: x.to_vec(), residual })
}

// ---------------------------------------------------------------------------
// exact derivative tensors

fn falling_factorial(e: u32, m: u32) -> f64 {
    let mut acc = 1.0;
    for k in 0..m {
        acc *= (e - k) as f64;
    }
    acc
}

/// Raw partial derivative of `f^k` with respect to the ordered index tuple,
/// evaluated at `x`.
fn derivative_entry(model: &SystemModel, x: &[f64], k: usize, tuple: &[usize]) -> f64 {
    match model {
        SystemModel::Polynomial(p) => {
            let mut acc = 0.0;
            'terms: for &ti in &p.terms_by_target[k] {
                let t = &p.terms[ti];
                let mut v = t.coeff;
                for &(s, e) in &t.exponents {
                    let m = tuple.iter().filter(|&&a| a == s).count() as u32;
                    if m > e {
                        continue 'terms;
                    }
                    v *= falling_factorial(e, m);
                    if e > m {
                        v *= x[s].powi((e - m) as i32);
                    }
                }
                // any tuple index outside the term's support kills the term
                for &a in tuple {
                    if !t.exponents.iter().any(|&(s, _)| s == a) {
                        continue 'terms;
                    }
                }
                acc += v;
            }
            acc
        }
        SystemModel::Sine(s) => {
            let m = s.machines;
            let order = tuple.len();
            if k < m {
                // angle rows: d(delta_i)/dt = omega_i, only one first derivative
                if order == 1 && tuple[0] == m + k {
                    1.0
                } else {
                    0.0
                }
            } else {
                let i = k - m;
                if order == 1 && tuple[0] == m + i {
                    return -s.damping[i] / s.inertia[i];
                }
                // higher derivatives involve only angle variables
                if tuple.iter().any(|&a| a >= m) {
                    return 0.0;
                }
                // at most one distinct angle other than i may appear
                let mut other: Option<usize> = None;
                let mut other_count = 0usize;
                for &a in tuple {
                    if a != i {
                        match other {
                            None => {
                                other = Some(a);
                                other_count = 1;
                            }
                            Some(o) if o == a => other_count += 1,
                            Some(_) => return 0.0,
                        }
                    }
                }
                let sin_cycle = |n: usize, u: f64| -> f64 {
                    match n % 4 {
                        0 => u.sin(),
                        1 => u.cos(),
                        2 => -u.sin(),
                        _ => -u.cos(),
                    }
                };
                match other {
                    Some(j) => {
                        let w = s.weight(i, j);
                        if w == 0.0 {
                            return 0.0;
                        }
                        let u = x[i] - x[j];
                        let sign = if other_count % 2 == 0 { 1.0 } else { -1.0 };
                        -w / s.inertia[i] * sign * sin_cycle(order, u)
                    }
                    None => {
                        // all derivatives taken with respect to delta_i
                        let mut acc = 0.0;
                        for j in 0..m {
                            if j != i {
                                let w = s.weight(i, j);
                                if w != 0.0 {
                                    acc += w * sin_cycle(order, x[i] - x[j]);
                                }
                            }
                        }
                        -acc / s.inertia[i]
                    }
                }
            }
        }
    }
}

/// Exact raw derivative tensor of the given order, restricted to `ranges`.
pub fn derivative_batch_exact(
    model: &SystemModel,
    x_star: &EquilibriumPoint,
    order: usize,
    ranges: &[IndexRange],
    ordinal: u64,
) -> Result<DerivativeTensorBatch> {
    if order == 0 {
        return Err(Error::Argument("derivative order must be >= 1".into()));
    }
    let n = model.n_states();
    check_ranges(ranges, order, n)?;
    let widths: Vec<usize> = ranges.iter().map(|r| r.width()).collect();
    let cells: usize = widths.iter().product();
    let mut data = Vec::with_capacity(cells);
    let mut local = vec![0usize; order + 1];
    let mut tuple = vec![0usize; order];
    for _ in 0..cells {
        let k = ranges[0].start + local[0];
        for d in 0..order {
            tuple[d] = ranges[d + 1].start + local[d + 1];
        }
        data.push(derivative_entry(model, &x_star.x, k, &tuple));
        bump_odometer(&mut local, &widths);
    }
    Ok(DerivativeTensorBatch {
        order,
        n_states: n,
        ordinal,
        ranges: ranges.to_vec(),
        values: DenseTensor::real(widths, data)?,
        warnings: Vec::new(),
    })
}

fn check_ranges(ranges: &[IndexRange], order: usize, n: usize) -> Result<()> {
    if ranges.len() != order + 1 {
        return Err(Error::Argument(format!(
            "expected {} ranges for order {order}, got {}",
            order + 1,
            ranges.len()
        )));
    }
    for r in ranges {
        r.validate(n)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// finite-difference derivative tensors

/// Central finite-difference derivative tensor (order <= 4).
///
/// Schwarz symmetry is exploited: each unordered index multiset is computed
/// once and scattered to all ordered positions in the batch.
pub fn derivative_batch_fd(
    model: &SystemModel,
    x_star: &EquilibriumPoint,
    order: usize,
    ranges: &[IndexRange],
    ordinal: u64,
    policy: StepPolicy,
) -> Result<DerivativeTensorBatch> {
    if order == 0 || order > 4 {
        return Err(Error::Argument(
            "finite differences support orders 1..=4".into(),
        ));
    }
    let n = model.n_states();
    check_ranges(ranges, order, n)?;
    let base = policy
        .base_step
        .unwrap_or_else(|| f64::EPSILON.powf(1.0 / (order as f64 + 2.0)));
    let mut warnings = Vec::new();
    let steps: Vec<f64> = (0..n)
        .map(|a| base * x_star.x[a].abs().max(1.0))
        .collect();
    for a in 0..n {
        let scale = x_star.x[a].abs().max(1.0);
        if steps[a] < scale * f64::EPSILON * 4.0 {
            warnings.push(format!(
                "step {:.3e} for coordinate {a} underflows its state scale",
                steps[a]
            ));
        }
    }

    let widths: Vec<usize> = ranges.iter().map(|r| r.width()).collect();
    let cells: usize = widths.iter().product();
    let mut data = vec![0.0; cells];
    // cache per unordered tuple: value for every output state k
    let mut tuple_cache: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
    // cache of field evaluations per displacement pattern
    let mut point_cache: HashMap<Vec<(usize, i32)>, Vec<f64>> = HashMap::new();

    let mut local = vec![0usize; order + 1];
    let mut tuple = vec![0usize; order];
    for cell in 0..cells {
        let k_local = local[0];
        for d in 0..order {
            tuple[d] = ranges[d + 1].start + local[d + 1];
        }
        let mut key = tuple.clone();
        key.sort_unstable();
        if !tuple_cache.contains_key(&key) {
            let per_k = fd_unordered(model, x_star, &key, &steps, &mut point_cache)?;
            tuple_cache.insert(key.clone(), per_k);
        }
        let per_k = &tuple_cache[&key];
        data[cell] = per_k[ranges[0].start + k_local];
        bump_odometer(&mut local, &widths);
    }
    Ok(DerivativeTensorBatch {
        order,
        n_states: n,
        ordinal,
        ranges: ranges.to_vec(),
        values: DenseTensor::real(widths, data)?,
        warnings,
    })
}

/// Central-difference stencil for an m-th derivative in one variable.
fn stencil(m: u32) -> (&'static [i32], &'static [f64]) {
    match m {
        1 => (&[-1, 1], &[-0.5, 0.5]),
        2 => (&[-1, 0, 1], &[1.0, -2.0, 1.0]),
        3 => (&[-2, -1, 1, 2], &[-0.5, 1.0, -1.0, 0.5]),
        4 => (&[-2, -1, 0, 1, 2], &[1.0, -4.0, 6.0, -4.0, 1.0]),
        _ => unreachable!("orders are capped at 4"),
    }
}

fn fd_unordered(
    model: &SystemModel,
    x_star: &EquilibriumPoint,
    sorted_tuple: &[usize],
    steps: &[f64],
    point_cache: &mut HashMap<Vec<(usize, i32)>, Vec<f64>>,
) -> Result<Vec<f64>> {
    // group multiplicities per distinct variable
    let mut vars: Vec<(usize, u32)> = Vec::new();
    for &a in sorted_tuple {
        match vars.last_mut() {
            Some((v, c)) if *v == a => *c += 1,
            _ => vars.push((a, 1)),
        }
    }
    let mut denom = 1.0;
    for &(a, m) in &vars {
        denom *= steps[a].powi(m as i32);
    }
    let stencils: Vec<(&[i32], &[f64])> = vars.iter().map(|&(_, m)| stencil(m)).collect();
    let n = model.n_states();
    let mut acc = vec![0.0; n];

    let shape: Vec<usize> = stencils.iter().map(|(o, _)| o.len()).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; vars.len()];
    for _ in 0..total {
        let mut weight = 1.0;
        let mut pattern: Vec<(usize, i32)> = Vec::with_capacity(vars.len());
        for (vi, &(a, _)) in vars.iter().enumerate() {
            let (offs, ws) = stencils[vi];
            weight *= ws[idx[vi]];
            if offs[idx[vi]] != 0 {
                pattern.push((a, offs[idx[vi]]));
            }
        }
        if weight != 0.0 {
            let f = match point_cache.get(&pattern) {
                Some(f) => f,
                None => {
                    let mut x = x_star.x.clone();
                    for &(a, o) in &pattern {
                        x[a] += o as f64 * steps[a];
                    }
                    let f = eval_field(model, &x)?;
                    point_cache.entry(pattern.clone()).or_insert(f)
                }
            };
            for k in 0..n {
                acc[k] += weight * f[k];
            }
        }
        bump_odometer(&mut idx, &shape);
    }
    for v in acc.iter_mut() {
        *v /= denom;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// random system corpus

/// Deterministic random polynomial system with a Hurwitz linear part.
///
/// The linear part is shifted so every eigenvalue real part is at most
/// `-margin`; higher-degree terms are sparse with the given density and the
/// origin is an equilibrium by construction.
pub fn gen_random_poly(
    n: usize,
    max_degree: u32,
    density: f64,
    seed: u64,
    margin: f64,
) -> Result<PolynomialSystem> {
    if n < 1 {
        return Err(Error::Argument("n must be >= 1".into()));
    }
    if max_degree < 1 {
        return Err(Error::Argument("max_degree must be >= 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Argument("density must be in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = vec![0.0; n * n];
    for v in a.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    // shift the spectrum left of -margin
    let rho = max_real_eigenvalue(&a, n);
    for i in 0..n {
        a[i * n + i] -= rho + margin;
    }
    let mut terms = Vec::new();
    for k in 0..n {
        for r in 0..n {
            let c = a[k * n + r];
            if c != 0.0 {
                terms.push(Term { target: k, coeff: c, exponents: vec![(r, 1)] });
            }
        }
    }
    for degree in 2..=max_degree {
        let per_target = (density * n as f64).round() as usize;
        for k in 0..n {
            for _ in 0..per_target {
                let mut powers = vec![0u32; n];
                for _ in 0..degree {
                    powers[rng.gen_range(0..n)] += 1;
                }
                let exponents: Vec<(usize, u32)> = powers
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(s, &p)| (s, p))
                    .collect();
                let coeff = rng.gen_range(-0.5..0.5);
                terms.push(Term { target: k, coeff, exponents });
            }
        }
    }
    PolynomialSystem::new(
        n,
        terms,
        Some(vec![0.0; n]),
        format!("random-n{n}-d{max_degree}-s{seed}"),
    )
}

fn max_real_eigenvalue(a: &[f64], n: usize) -> f64 {
    use faer::Mat;
    let m = Mat::<f64>::from_fn(n, n, |r, c| a[r * n + c]);
    match m.eigenvalues() {
        Ok(ev) => ev.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max),
        Err(_) => 0.0,
    }
}

/// The linear part of a model as a dense real matrix (row-major n x n).
pub fn linear_part(model: &SystemModel, x_star: &EquilibriumPoint) -> Result<DenseTensor> {
    let n = model.n_states();
    let full = vec![IndexRange::full(n); 2];
    let batch = derivative_batch_exact(model, x_star, 1, &full, 0)?;
    Ok(batch.values)
}

/// Equilibrium for a model: the declared one when present (verified),
/// otherwise a Newton solve from the origin-ish default guess.
pub fn find_equilibrium(model: &SystemModel, tol: f64) -> Result<EquilibriumPoint> {
    if let Some(eq) = model.declared_equilibrium() {
        let eq = eq.to_vec();
        return verify_equilibrium(model, &eq, tol.max(1e-9));
    }
    let n = model.n_states();
    solve_equilibrium(model, &vec![0.0; n], tol, 50)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// The worked two-state system: dx0 = -x0 + x1^2, dx1 = -2 x1.
    pub(crate) fn quadratic_demo() -> SystemModel {
        SystemModel::Polynomial(
            PolynomialSystem::new(
                2,
                vec![
                    Term { target: 0, coeff: -1.0, exponents: vec![(0, 1)] },
                    Term { target: 0, coeff: 1.0, exponents: vec![(1, 2)] },
                    Term { target: 1, coeff: -2.0, exponents: vec![(1, 1)] },
                ],
                Some(vec![0.0, 0.0]),
                "quadratic-demo".into(),
            )
            .unwrap(),
        )
    }

    pub(crate) fn three_machine() -> SystemModel {
        let m = 3;
        let voltage = vec![1.0, 1.05, 0.98];
        let coupling = vec![0.0, 1.0, 0.8, 1.0, 0.0, 1.2, 0.8, 1.2, 0.0];
        let delta_star = [0.0f64, 0.15, -0.1];
        let mut mech_power = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    mech_power[i] += voltage[i]
                        * voltage[j]
                        * coupling[i * m + j]
                        * (delta_star[i] - delta_star[j]).sin();
                }
            }
        }
        SystemModel::Sine(
            SineNetwork::new(
                m,
                vec![1.0, 1.2, 0.8],
                vec![0.5, 0.4, 0.6],
                mech_power,
                coupling,
                voltage,
                None,
                "three-machine".into(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn parse_polynomial_document() {
        let doc = r#"{
            "type": "polynomial", "name": "demo", "n": 2,
            "terms": [
                {"target": 0, "coeff": -1.0, "exponents": [[0, 1]]},
                {"target": 0, "coeff": 1.0, "exponents": [[1, 2]]},
                {"target": 1, "coeff": -2.0, "exponents": [[1, 1]]}
            ],
            "equilibrium": [0.0, 0.0]
        }"#;
        let model = parse_system(doc).unwrap();
        match &model {
            SystemModel::Polynomial(p) => assert_eq!(p.terms.len(), 3),
            _ => panic!("expected polynomial"),
        }
    }

    #[test]
    fn parse_rejects_out_of_range_state() {
        let doc = r#"{
            "type": "polynomial", "n": 2,
            "terms": [{"target": 0, "coeff": 1.0, "exponents": [[5, 1]]}]
        }"#;
        assert!(matches!(parse_system(doc), Err(Error::Parse(_))));
    }

    #[test]
    fn parse_sine_network() {
        let doc = r#"{
            "type": "sine_network", "m": 3,
            "inertia": [1.0, 1.0, 1.0],
            "damping": [0.1, 0.1, 0.1],
            "mech_power": [0.0, 0.0, 0.0],
            "coupling": [[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
            "voltage": [1.0, 1.0, 1.0]
        }"#;
        let model = parse_system(doc).unwrap();
        assert_eq!(model.n_states(), 6);
    }

    #[test]
    fn parse_rejects_asymmetric_coupling() {
        let doc = r#"{
            "type": "sine_network", "m": 2,
            "inertia": [1.0, 1.0], "damping": [0.1, 0.1],
            "mech_power": [0.0, 0.0],
            "coupling": [[0.0, 1.0], [2.0, 0.0]],
            "voltage": [1.0, 1.0]
        }"#;
        assert!(matches!(parse_system(doc), Err(Error::Parse(_))));
    }

    #[test]
    fn eval_linear_at_origin() {
        let model = SystemModel::Polynomial(
            PolynomialSystem::new(
                2,
                vec![
                    Term { target: 0, coeff: -1.0, exponents: vec![(0, 1)] },
                    Term { target: 1, coeff: -2.0, exponents: vec![(1, 1)] },
                ],
                None,
                "lin".into(),
            )
            .unwrap(),
        );
        assert_eq!(eval_field(&model, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn eval_quadratic_demo_by_hand() {
        let model = quadratic_demo();
        let f = eval_field(&model, &[1.0, 2.0]).unwrap();
        assert_eq!(f, vec![3.0, -4.0]);
    }

    #[test]
    fn solve_linear_from_anywhere() {
        let model = SystemModel::Polynomial(
            PolynomialSystem::new(
                2,
                vec![
                    Term { target: 0, coeff: -1.0, exponents: vec![(0, 1)] },
                    Term { target: 0, coeff: 0.5, exponents: vec![(1, 1)] },
                    Term { target: 1, coeff: -2.0, exponents: vec![(1, 1)] },
                ],
                None,
                "lin".into(),
            )
            .unwrap(),
        );
        let eq = solve_equilibrium(&model, &[10.0, -4.0], 1e-12, 50).unwrap();
        assert!(eq.x.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn solve_quadratic_demo() {
        let model = quadratic_demo();
        let eq = solve_equilibrium(&model, &[0.1, 0.1], 1e-12, 50).unwrap();
        assert!(eq.x[0].abs() < 1e-11 && eq.x[1].abs() < 1e-11);
    }

    #[test]
    fn solve_three_machine_network() {
        let model = three_machine();
        let guess = vec![0.05, 0.1, -0.02, 0.0, 0.0, 0.0];
        let eq = solve_equilibrium(&model, &guess, 1e-10, 50).unwrap();
        assert!(eq.residual <= 1e-10);
        let f = eval_field(&model, &eq.x).unwrap();
        assert!(f.iter().all(|v| v.abs() <= 1e-10));
        // speeds vanish at any swing equilibrium
        assert!(eq.x[3..].iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn exact_order1_is_coefficient_matrix() {
        let model = quadratic_demo();
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let a = linear_part(&model, &eq).unwrap();
        assert_eq!(a.as_real().unwrap(), &[-1.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn exact_order2_quadratic_entry() {
        let model = quadratic_demo();
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let full = vec![IndexRange::full(2); 3];
        let b = derivative_batch_exact(&model, &eq, 2, &full, 0).unwrap();
        assert_eq!(b.values.value_at(&[0, 1, 1]).re, 2.0);
        // everything else vanishes
        let mut nonzero = 0;
        for v in b.values.as_real().unwrap() {
            if *v != 0.0 {
                nonzero += 1;
            }
        }
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn exact_order3_cubic_entry() {
        let c = 0.7;
        let model = SystemModel::Polynomial(
            PolynomialSystem::new(
                2,
                vec![
                    Term { target: 1, coeff: -1.0, exponents: vec![(1, 1)] },
                    Term { target: 0, coeff: -1.0, exponents: vec![(0, 1)] },
                    Term { target: 1, coeff: c, exponents: vec![(0, 3)] },
                ],
                Some(vec![0.0, 0.0]),
                "cubic".into(),
            )
            .unwrap(),
        );
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let full = vec![IndexRange::full(2); 4];
        let b = derivative_batch_exact(&model, &eq, 3, &full, 0).unwrap();
        assert_relative_eq!(b.values.value_at(&[1, 0, 0, 0]).re, 6.0 * c);
    }

    #[test]
    fn fd_order1_matches_exact_linear() {
        let model = quadratic_demo();
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let full = vec![IndexRange::full(2); 2];
        let exact = derivative_batch_exact(&model, &eq, 1, &full, 0).unwrap();
        let fd = derivative_batch_fd(&model, &eq, 1, &full, 0, StepPolicy::default()).unwrap();
        for (a, b) in exact
            .values
            .as_real()
            .unwrap()
            .iter()
            .zip(fd.values.as_real().unwrap())
        {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_order2_quadratic_entry() {
        let model = quadratic_demo();
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let full = vec![IndexRange::full(2); 3];
        let fd = derivative_batch_fd(&model, &eq, 2, &full, 0, StepPolicy::default()).unwrap();
        assert!((fd.values.value_at(&[0, 1, 1]).re - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fd_order3_sine_network_matches_exact() {
        let model = three_machine();
        let eq = solve_equilibrium(&model, &[0.0; 6], 1e-12, 50).unwrap();
        let full = vec![IndexRange::full(6); 4];
        let exact = derivative_batch_exact(&model, &eq, 3, &full, 0).unwrap();
        let fd = derivative_batch_fd(&model, &eq, 3, &full, 0, StepPolicy::default()).unwrap();
        let ev = exact.values.as_real().unwrap();
        let fv = fd.values.as_real().unwrap();
        for (a, b) in ev.iter().zip(fv) {
            if a.abs() > 1e-6 {
                assert!(
                    ((a - b) / a).abs() < 1e-3,
                    "exact {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn trailing_symmetry_bit_exact() {
        let model = quadratic_demo();
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let full = vec![IndexRange::full(2); 4];
        let b = derivative_batch_exact(&model, &eq, 3, &full, 0).unwrap();
        for k in 0..2 {
            for a in 0..2 {
                for bb in 0..2 {
                    for c in 0..2 {
                        let v = b.values.value_at(&[k, a, bb, c]);
                        for perm in [[a, c, bb], [bb, a, c], [c, bb, a]] {
                            assert_eq!(
                                v,
                                b.values.value_at(&[k, perm[0], perm[1], perm[2]])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batches_concatenate_to_full_tensor() {
        use crate::planner::{plan_batches, PlannerInput};
        let model = three_machine();
        let eq = solve_equilibrium(&model, &[0.0; 6], 1e-12, 50).unwrap();
        let n = 6usize;
        let order = 2usize;
        let full_ranges = vec![IndexRange::full(n); order + 1];
        let full = derivative_batch_exact(&model, &eq, order, &full_ranges, 0).unwrap();
        // force several batches
        let plan = plan_batches(&PlannerInput {
            n_dim: order + 1,
            n_states: n,
            limit_gb: (n * n * 2 * 8) as f64 / crate::planner::GIB as f64,
            elem_bytes: 8,
        })
        .unwrap();
        assert!(plan.num_batches > 1);
        let mut rebuilt = vec![f64::NAN; n.pow(order as u32 + 1)];
        for (ord, ranges) in plan.iter_ranges().enumerate() {
            let b = derivative_batch_exact(&model, &eq, order, &ranges, ord as u64).unwrap();
            let vals = b.values.as_real().unwrap();
            let widths: Vec<usize> = ranges.iter().map(|r| r.width()).collect();
            let mut local = vec![0usize; order + 1];
            for v in vals {
                let mut f = 0usize;
                for d in 0..=order {
                    f = f * n + ranges[d].start + local[d];
                }
                rebuilt[f] = *v;
                bump_odometer(&mut local, &widths);
            }
        }
        let fv = full.values.as_real().unwrap();
        assert!(rebuilt.iter().zip(fv).all(|(a, b)| a == b));
    }

    #[test]
    fn taylor_reconstruction_pins_raw_convention() {
        // degree-3 polynomial: f(x* + v) must equal the Taylor sum exactly
        let sys = gen_random_poly(4, 3, 0.6, 42, 0.5).unwrap();
        let model = SystemModel::Polynomial(sys);
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let n = 4usize;
        let v = [0.3, -0.2, 0.15, 0.08];
        let mut expect = eval_field(
            &model,
            &v.iter().zip(&eq.x).map(|(a, b)| a + b).collect::<Vec<_>>(),
        )
        .unwrap();
        let f0 = eval_field(&model, &eq.x).unwrap();
        for i in 0..n {
            expect[i] -= f0[i];
        }
        let vt = DenseTensor::real(vec![n, 1], v.to_vec()).unwrap();
        let mut got = vec![0.0; n];
        let mut factorial = 1.0;
        for order in 1..=3usize {
            factorial *= order as f64;
            let full = vec![IndexRange::full(n); order + 1];
            let t = derivative_batch_exact(&model, &eq, order, &full, 0).unwrap();
            let mut contracted = t.values;
            for axis in (1..=order).rev() {
                contracted = contracted.contract_axis(&vt, axis).unwrap();
            }
            // contracted is now [n, 1, 1, ...]
            let flat = contracted.to_complex_vec();
            for i in 0..n {
                got[i] += flat[i].re / factorial;
            }
        }
        for i in 0..n {
            assert_relative_eq!(got[i], expect[i], max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn gen_random_poly_deterministic_and_stable() {
        let a = gen_random_poly(4, 3, 0.5, 7, 0.3).unwrap();
        let b = gen_random_poly(4, 3, 0.5, 7, 0.3).unwrap();
        assert_eq!(a.terms.len(), b.terms.len());
        for (x, y) in a.terms.iter().zip(&b.terms) {
            assert_eq!(x.target, y.target);
            assert_eq!(x.coeff, y.coeff);
            assert_eq!(x.exponents, y.exponents);
        }
        // eigenvalues of the linear part sit left of the margin
        let model = SystemModel::Polynomial(a);
        let eq = find_equilibrium(&model, 1e-9).unwrap();
        let lin = linear_part(&model, &eq).unwrap();
        let rho = max_real_eigenvalue(lin.as_real().unwrap(), 4);
        assert!(rho <= -0.3 + 1e-9, "max Re(eig) = {rho}");
    }

    #[test]
    fn gen_random_poly_low_density_degree1_is_linear() {
        let sys = gen_random_poly(5, 1, 0.01, 3, 0.2).unwrap();
        assert!(sys.terms.iter().all(|t| t.exponents.iter().map(|e| e.1).sum::<u32>() == 1));
    }

    #[test]
    fn degenerate_single_state() {
        let model = SystemModel::Polynomial(
            PolynomialSystem::new(
                1,
                vec![Term { target: 0, coeff: -1.5, exponents: vec![(0, 1)] }],
                None,
                "scalar".into(),
            )
            .unwrap(),
        );
        let eq = solve_equilibrium(&model, &[2.0], 1e-12, 50).unwrap();
        assert!(eq.x[0].abs() < 1e-12);
        let full = vec![IndexRange::full(1); 2];
        let a = derivative_batch_exact(&model, &eq, 1, &full, 0).unwrap();
        assert_eq!(a.values.as_real().unwrap(), &[-1.5]);
    }
}
