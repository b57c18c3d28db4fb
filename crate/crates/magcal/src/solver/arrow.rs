//! Arrow-structured normal equations and their O(M) direct solve.
//!
//! The Gauss–Newton normal equations of the calibration problem couple M
//! per-epoch orientation states (dimension S each) only to their immediate
//! neighbours (through rate/preintegration constraints) and to one shared
//! parameter vector θ (dimension P):
//!
//! ```text
//!      ⎡ D₀  U₀          C₀ ⎤
//!      ⎢ U₀ᵀ D₁  U₁      C₁ ⎥
//! H =  ⎢     U₁ᵀ  ⋱   ⋱   ⋮ ⎥        H δ = b
//!      ⎢         ⋱  Dₘ₋₁ Cₘ₋₁⎥
//!      ⎣ C₀ᵀ C₁ᵀ  ⋯      Hθ ⎦
//! ```
//!
//! The solve runs a block-tridiagonal Cholesky over the state band, forms
//! the P×P Schur complement on θ, solves it densely, and back-substitutes —
//! linear in M, so doubling the trajectory length doubles the work.
//!
//! Assembly is chunked: blocks are evaluated in fixed-size index ranges
//! (independent of thread count), each chunk scatters into a private
//! partial system, and partials are folded in chunk order. The parallel and
//! sequential paths therefore perform bit-identical arithmetic.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::parallel;
use crate::residuals::{ResidualBlock, VarId};
use crate::solver::{FreezeMask, ManifoldProblem};

/// Number of residual blocks evaluated per assembly chunk. Fixed (not a
/// function of thread count) so chunk boundaries — and thus floating-point
/// summation order — never depend on the execution environment.
const ASSEMBLY_CHUNK_BLOCKS: usize = 512;

/// Cholesky pivot floor; anything at or below is reported as indefinite.
const MIN_PIVOT: f64 = 1e-300;

/// Normal-equation system with arrow sparsity (see module docs).
///
/// Layouts (all row-major within a block unless noted):
/// * `diag`: M blocks of S×S, block i at `i·S²`.
/// * `off`: M−1 blocks of S×S; block i couples states (i, i+1).
/// * `coupling`: M blocks of S×P, **column-major** within the block —
///   entry (r, c) of block i at `i·S·P + c·S + r`.
/// * `theta`: dense P×P, row-major.
/// * `b_x`, `b_theta`: right-hand side `−Jᵀ r` stacked per state / for θ.
#[derive(Clone, Debug)]
pub struct ArrowSystem {
    pub num_states: usize,
    pub state_dim: usize,
    pub theta_dim: usize,
    diag: Vec<f64>,
    off: Vec<f64>,
    coupling: Vec<f64>,
    theta: Vec<f64>,
    b_x: Vec<f64>,
    b_theta: Vec<f64>,
}

/// Result of one damped linear solve.
#[derive(Clone, Debug)]
pub struct ArrowSolution {
    /// Stacked per-state increments (M·S).
    pub states: Vec<f64>,
    /// Parameter increment (P).
    pub theta: Vec<f64>,
    /// The (damped, frozen) Schur complement on θ before factorization,
    /// row-major P×P — kept for observability diagnostics.
    pub schur: Vec<f64>,
}

impl ArrowSolution {
    pub fn step_norm(&self) -> f64 {
        let s: f64 = self.states.iter().map(|x| x * x).sum::<f64>()
            + self.theta.iter().map(|x| x * x).sum::<f64>();
        s.sqrt()
    }

    /// Smallest eigenvalue of the Schur complement restricted to the
    /// unfrozen parameters — near-zero means the trajectory does not excite
    /// some parameter direction.
    pub fn schur_min_eigenvalue(&self, freeze: &FreezeMask) -> f64 {
        let p = (self.schur.len() as f64).sqrt().round() as usize;
        let free: Vec<usize> = (0..p).filter(|&j| !freeze.is_frozen(j)).collect();
        if free.is_empty() {
            return 0.0;
        }
        let sub = DMatrix::from_fn(free.len(), free.len(), |r, c| {
            self.schur[free[r] * p + free[c]]
        });
        sub.symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

impl ArrowSystem {
    pub fn zeros(num_states: usize, state_dim: usize, theta_dim: usize) -> Self {
        let s = state_dim;
        let p = theta_dim;
        Self {
            num_states,
            state_dim,
            theta_dim,
            diag: vec![0.0; num_states * s * s],
            off: vec![0.0; num_states.saturating_sub(1) * s * s],
            coupling: vec![0.0; num_states * s * p],
            theta: vec![0.0; p * p],
            b_x: vec![0.0; num_states * s],
            b_theta: vec![0.0; p],
        }
    }

    fn coupling_entry(&mut self, state: usize, r: usize, c: usize) -> &mut f64 {
        &mut self.coupling[state * self.state_dim * self.theta_dim + c * self.state_dim + r]
    }

    /// Scatter one residual block's Gauss–Newton contribution
    /// (`H += JᵀJ`, `b −= Jᵀr`). `state_offset` shifts every state index
    /// (used by chunked assembly into range-local partials).
    ///
    /// Panics if the block couples non-adjacent states: the band structure
    /// is a contract of the problem construction, not a runtime condition.
    pub fn add_residual_block(&mut self, block: &ResidualBlock, state_offset: usize) {
        let s = self.state_dim;
        let p = self.theta_dim;
        let jac = &block.jacobians;
        for a in 0..jac.len() {
            // right-hand side: b[var_a] −= J_aᵀ r
            let g = jac[a].mat.transpose() * block.value;
            match jac[a].var {
                VarId::State(i) => {
                    let i = i - state_offset;
                    for r in 0..s {
                        self.b_x[i * s + r] -= g[r];
                    }
                }
                VarId::Theta { offset, dim } => {
                    for r in 0..dim {
                        self.b_theta[offset + r] -= g[r];
                    }
                }
            }
            for b in a..jac.len() {
                let gram = jac[a].mat.transpose() * jac[b].mat;
                match (jac[a].var, jac[b].var) {
                    (VarId::State(i), VarId::State(j)) => {
                        let (i, j) = (i - state_offset, j - state_offset);
                        if i == j {
                            let base = i * s * s;
                            for r in 0..s {
                                for c in 0..s {
                                    self.diag[base + r * s + c] += gram[(r, c)];
                                }
                            }
                        } else {
                            let (lo, transpose) = if j == i + 1 {
                                (i, false)
                            } else if i == j + 1 {
                                (j, true)
                            } else {
                                panic!("residual couples non-adjacent states {i} and {j}");
                            };
                            let base = lo * s * s;
                            for r in 0..s {
                                for c in 0..s {
                                    let v = if transpose { gram[(c, r)] } else { gram[(r, c)] };
                                    self.off[base + r * s + c] += v;
                                }
                            }
                        }
                    }
                    (VarId::State(i), VarId::Theta { offset, dim }) => {
                        let i = i - state_offset;
                        for r in 0..s {
                            for c in 0..dim {
                                *self.coupling_entry(i, r, offset + c) += gram[(r, c)];
                            }
                        }
                    }
                    (VarId::Theta { offset, dim }, VarId::State(i)) => {
                        let i = i - state_offset;
                        for r in 0..s {
                            for c in 0..dim {
                                *self.coupling_entry(i, r, offset + c) += gram[(c, r)];
                            }
                        }
                    }
                    (
                        VarId::Theta {
                            offset: o1,
                            dim: d1,
                        },
                        VarId::Theta {
                            offset: o2,
                            dim: d2,
                        },
                    ) => {
                        for r in 0..d1 {
                            for c in 0..d2 {
                                self.theta[(o1 + r) * p + o2 + c] += gram[(r, c)];
                            }
                        }
                        if o1 != o2 {
                            for r in 0..d1 {
                                for c in 0..d2 {
                                    self.theta[(o2 + c) * p + o1 + r] += gram[(r, c)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Add `other` (covering global states `lo..lo+other.num_states`) into
    /// this system.
    fn merge_at(&mut self, other: &ArrowSystem, lo: usize) {
        let s = self.state_dim;
        let p = self.theta_dim;
        let span = other.num_states;
        for (dst, src) in self.diag[lo * s * s..(lo + span) * s * s]
            .iter_mut()
            .zip(&other.diag)
        {
            *dst += *src;
        }
        if span > 0 {
            let n_off = span - 1;
            for (dst, src) in self.off[lo * s * s..(lo + n_off) * s * s]
                .iter_mut()
                .zip(&other.off)
            {
                *dst += *src;
            }
        }
        for (dst, src) in self.coupling[lo * s * p..(lo + span) * s * p]
            .iter_mut()
            .zip(&other.coupling)
        {
            *dst += *src;
        }
        for (dst, src) in self.b_x[lo * s..(lo + span) * s].iter_mut().zip(&other.b_x) {
            *dst += *src;
        }
        for (dst, src) in self.theta.iter_mut().zip(&other.theta) {
            *dst += *src;
        }
        for (dst, src) in self.b_theta.iter_mut().zip(&other.b_theta) {
            *dst += *src;
        }
    }

    /// Gradient norm ‖Jᵀr‖ of the assembled system (over everything).
    pub fn gradient_norm(&self) -> f64 {
        let s: f64 = self.b_x.iter().map(|x| x * x).sum::<f64>()
            + self.b_theta.iter().map(|x| x * x).sum::<f64>();
        s.sqrt()
    }

    /// Infinity norm ‖Jᵀr‖_∞ — the convergence certificate: at a local
    /// minimum this vanishes up to numerical precision.
    pub fn gradient_inf_norm(&self) -> f64 {
        self.b_x
            .iter()
            .chain(&self.b_theta)
            .fold(0.0f64, |a, &x| a.max(x.abs()))
    }

    /// Solve `(H + λ·diag(H)) δ = b` with the frozen parameters pinned to a
    /// zero increment (their rows/columns replaced by identity *after*
    /// damping, so freezing is exact regardless of λ).
    ///
    /// Returns [`Error::IndefiniteSystem`] if any Cholesky pivot fails —
    /// the damping loop of the optimizer treats that as a rejected step.
    pub fn solve(&self, lambda: f64, freeze: &FreezeMask) -> Result<ArrowSolution> {
        let s = self.state_dim;
        let p = self.theta_dim;
        let m = self.num_states;
        let panel = p + 1; // [ y | Yθ ] carried per state

        // Schur accumulator starts from the damped, frozen θ block.
        let mut schur = self.theta.clone();
        for d in 0..p {
            schur[d * p + d] *= 1.0 + lambda;
        }
        let mut rhs = self.b_theta.clone();
        for j in 0..p {
            if freeze.is_frozen(j) {
                for k in 0..p {
                    schur[j * p + k] = 0.0;
                    schur[k * p + j] = 0.0;
                }
                schur[j * p + j] = 1.0;
                rhs[j] = 0.0;
            }
        }

        let mut l_blocks = vec![0.0; m * s * s];
        let mut w_blocks = vec![0.0; m * s * s]; // w_blocks[i] valid for i ≥ 1
        let mut panels = vec![0.0; m * s * panel];

        for i in 0..m {
            // damped diagonal block
            let mut mi = self.diag[i * s * s..(i + 1) * s * s].to_vec();
            for d in 0..s {
                mi[d * s + d] *= 1.0 + lambda;
            }
            if i > 0 {
                // W_i = L_{i−1}⁻¹ U_{i−1}
                let w = &mut w_blocks[i * s * s..(i + 1) * s * s];
                w.copy_from_slice(&self.off[(i - 1) * s * s..i * s * s]);
                solve_lower(&l_blocks[(i - 1) * s * s..i * s * s], s, w, s);
                // M_i = D_i − W_iᵀ W_i
                sub_at_b(w, s, s, w, s, &mut mi);
            }
            cholesky_in_place(&mut mi, s)?;
            l_blocks[i * s * s..(i + 1) * s * s].copy_from_slice(&mi);

            // B_i = [b_i | C_i] with frozen θ columns suppressed
            let (done, rest) = panels.split_at_mut(i * s * panel);
            let pb = &mut rest[..s * panel];
            for r in 0..s {
                pb[r * panel] = self.b_x[i * s + r];
                for c in 0..p {
                    pb[r * panel + 1 + c] = if freeze.is_frozen(c) {
                        0.0
                    } else {
                        self.coupling[i * s * p + c * s + r]
                    };
                }
            }
            if i > 0 {
                let prev = &done[(i - 1) * s * panel..i * s * panel];
                sub_at_b(&w_blocks[i * s * s..(i + 1) * s * s], s, s, prev, panel, pb);
            }
            solve_lower(&mi, s, pb, panel);

            // Schur downdate: S −= Yθᵀ Yθ, rhs −= Yθᵀ y
            for r in 0..s {
                let row = &pb[r * panel..(r + 1) * panel];
                let y = row[0];
                for a in 0..p {
                    let v = row[1 + a];
                    if v != 0.0 {
                        rhs[a] -= v * y;
                        let srow = &mut schur[a * p..(a + 1) * p];
                        for (sb, rb) in srow.iter_mut().zip(&row[1..]) {
                            *sb -= v * rb;
                        }
                    }
                }
            }
        }

        let schur_out = schur.clone();
        cholesky_in_place(&mut schur, p)?;
        let mut dtheta = rhs;
        solve_lower(&schur, p, &mut dtheta, 1);
        solve_lower_transposed(&schur, p, &mut dtheta, 1);

        // back-substitution: z_i = L_iᵀ⁻¹ (y_i − Yθ_i δθ − W_{i+1} z_{i+1})
        let mut states = vec![0.0; m * s];
        for i in (0..m).rev() {
            let pb = &panels[i * s * panel..(i + 1) * s * panel];
            let mut z = [0.0; 3];
            let z = &mut z[..s];
            for r in 0..s {
                let row = &pb[r * panel..(r + 1) * panel];
                let mut v = row[0];
                for (a, &dt) in dtheta.iter().enumerate() {
                    v -= row[1 + a] * dt;
                }
                z[r] = v;
            }
            if i + 1 < m {
                let w = &w_blocks[(i + 1) * s * s..(i + 2) * s * s];
                let z_next = &states[(i + 1) * s..(i + 2) * s];
                for r in 0..s {
                    let mut acc = 0.0;
                    for (c, &zn) in z_next.iter().enumerate() {
                        acc += w[r * s + c] * zn;
                    }
                    z[r] -= acc;
                }
            }
            solve_lower_transposed(&l_blocks[i * s * s..(i + 1) * s * s], s, z, 1);
            states[i * s..(i + 1) * s].copy_from_slice(z);
        }

        Ok(ArrowSolution {
            states,
            theta: dtheta,
            schur: schur_out,
        })
    }

    /// Densify into an (M·S + P)² matrix and stacked right-hand side.
    /// Diagnostic/oracle path — O((MS+P)²) memory, tests only.
    pub fn to_dense(&self) -> (DMatrix<f64>, Vec<f64>) {
        let s = self.state_dim;
        let p = self.theta_dim;
        let m = self.num_states;
        let n = m * s + p;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..m {
            for r in 0..s {
                for c in 0..s {
                    h[(i * s + r, i * s + c)] = self.diag[i * s * s + r * s + c];
                }
            }
        }
        for i in 0..m.saturating_sub(1) {
            for r in 0..s {
                for c in 0..s {
                    let v = self.off[i * s * s + r * s + c];
                    h[(i * s + r, (i + 1) * s + c)] = v;
                    h[((i + 1) * s + c, i * s + r)] = v;
                }
            }
        }
        for i in 0..m {
            for r in 0..s {
                for c in 0..p {
                    let v = self.coupling[i * s * p + c * s + r];
                    h[(i * s + r, m * s + c)] = v;
                    h[(m * s + c, i * s + r)] = v;
                }
            }
        }
        for r in 0..p {
            for c in 0..p {
                h[(m * s + r, m * s + c)] = self.theta[r * p + c];
            }
        }
        let mut b = self.b_x.clone();
        b.extend_from_slice(&self.b_theta);
        (h, b)
    }
}

/// Assemble the normal equations of `problem` at `point`, chunk-parallel.
pub fn assemble_normal_equations<P: ManifoldProblem>(
    problem: &P,
    point: &P::Point,
) -> Result<ArrowSystem> {
    assemble_impl(problem, point, true)
}

/// Sequential reference assembly. Performs the same chunked arithmetic as
/// [`assemble_normal_equations`], so the two agree bit-for-bit.
pub fn assemble_normal_equations_seq<P: ManifoldProblem>(
    problem: &P,
    point: &P::Point,
) -> Result<ArrowSystem> {
    assemble_impl(problem, point, false)
}

struct Partial {
    lo: usize,
    sys: ArrowSystem,
}

fn assemble_impl<P: ManifoldProblem>(
    problem: &P,
    point: &P::Point,
    parallel: bool,
) -> Result<ArrowSystem> {
    let n = problem.num_blocks();
    let s = problem.state_dim();
    let p = problem.theta_dim();
    let m = problem.num_states();
    let chunks = n.div_ceil(ASSEMBLY_CHUNK_BLOCKS);

    let build = |c: usize| -> Result<Partial> {
        let start = c * ASSEMBLY_CHUNK_BLOCKS;
        let end = ((c + 1) * ASSEMBLY_CHUNK_BLOCKS).min(n);
        let mut blocks = Vec::with_capacity(end - start);
        let mut lo = usize::MAX;
        let mut hi = 0usize;
        for idx in start..end {
            let b = problem.block(idx, point)?;
            if !b.is_finite() {
                return Err(Error::NonFinite {
                    context: "residual block during assembly",
                });
            }
            for j in &b.jacobians {
                if let VarId::State(i) = j.var {
                    lo = lo.min(i);
                    hi = hi.max(i);
                }
            }
            blocks.push(b);
        }
        let (lo, span) = if lo == usize::MAX {
            (0, 0)
        } else {
            (lo, hi - lo + 1)
        };
        let mut sys = ArrowSystem::zeros(span, s, p);
        for b in &blocks {
            sys.add_residual_block(b, lo);
        }
        Ok(Partial { lo, sys })
    };

    let partials = if parallel {
        parallel::try_map_indexed(chunks, build)?
    } else {
        parallel::try_map_indexed_seq(chunks, build)?
    };

    let mut out = ArrowSystem::zeros(m, s, p);
    for part in &partials {
        out.merge_at(&part.sys, part.lo);
    }
    Ok(out)
}

// ---- small dense kernels (row-major slices, runtime dims) ----------------

/// In-place lower Cholesky of a symmetric row-major n×n matrix. Only the
/// lower triangle of the result is meaningful.
fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > MIN_PIVOT) {
            return Err(Error::IndefiniteSystem);
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }
    Ok(())
}

/// Solve `L X = B` in place; `l` row-major n×n lower-triangular, `b` n×m.
fn solve_lower(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in 0..n {
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                let (head, tail) = b.split_at_mut(i * m);
                let bk = &head[k * m..(k + 1) * m];
                for (bi, bkv) in tail[..m].iter_mut().zip(bk) {
                    *bi -= lik * bkv;
                }
            }
        }
        let inv = 1.0 / l[i * n + i];
        for v in &mut b[i * m..(i + 1) * m] {
            *v *= inv;
        }
    }
}

/// Solve `Lᵀ X = B` in place.
fn solve_lower_transposed(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[k * n + i];
            if lki != 0.0 {
                let (head, tail) = b.split_at_mut(k * m);
                let bi = &mut head[i * m..(i + 1) * m];
                for (biv, bkv) in bi.iter_mut().zip(&tail[..m]) {
                    *biv -= lki * bkv;
                }
            }
        }
        let inv = 1.0 / l[i * n + i];
        for v in &mut b[i * m..(i + 1) * m] {
            *v *= inv;
        }
    }
}

/// `C −= Aᵀ B` with `a` n×p, `b` n×q, `c` p×q (all row-major).
fn sub_at_b(a: &[f64], n: usize, p: usize, b: &[f64], q: usize, c: &mut [f64]) {
    for k in 0..n {
        for i in 0..p {
            let aki = a[k * p + i];
            if aki != 0.0 {
                let brow = &b[k * q..(k + 1) * q];
                let crow = &mut c[i * q..(i + 1) * q];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv -= aki * bv;
                }
            }
        }
    }
}
