//! Entropic optimal transport by log-domain Sinkhorn iterations.
//!
//! With potentials `f, g` the plan is `π_ij = exp((f_i + g_j − C_ij)/ε)`.
//! Each iteration fits the column marginal exactly, then measures the row
//! marginal error before refitting the rows:
//!
//! ```text
//! g = ε log q − ε LSE_i((f_i − C_ij)/ε)
//! f = ε log p − ε LSE_j((g_j − C_ij)/ε)
//! ```
//!
//! On a pixel grid the squared Euclidean cost is separable, so every
//! log-sum-exp is evaluated one axis at a time.

use crate::error::{Error, Result};

/// Kernel sums below this are recomputed entry by entry in log space.
const UNDERFLOW_GUARD: f64 = 1e-280;

#[derive(Clone, Debug, PartialEq)]
pub enum CostMatrix {
    /// Row-major `rows × cols`.
    Dense { rows: usize, cols: usize, data: Vec<f64> },
    /// Squared Euclidean distance between cells of one `height × width` grid
    /// (row-major cell order, unit spacing).
    Grid { height: usize, width: usize },
}

impl CostMatrix {
    pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("cost matrix {rows}x{cols} needs {} entries, got {}", rows * cols, data.len())));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("cost matrix has a non-finite entry".into()));
        }
        Ok(CostMatrix::Dense { rows, cols, data })
    }

    pub fn grid(height: usize, width: usize) -> Self {
        CostMatrix::Grid { height, width }
    }

    pub fn rows(&self) -> usize {
        match self {
            CostMatrix::Dense { rows, .. } => *rows,
            CostMatrix::Grid { height, width } => height * width,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            CostMatrix::Dense { cols, .. } => *cols,
            CostMatrix::Grid { height, width } => height * width,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            CostMatrix::Dense { cols, data, .. } => data[i * cols + j],
            CostMatrix::Grid { width, .. } => {
                let dr = (i / width) as f64 - (j / width) as f64;
                let dc = (i % width) as f64 - (j % width) as f64;
                dr * dr + dc * dc
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            CostMatrix::Dense { data, .. } => data.iter().sum::<f64>() / data.len().max(1) as f64,
            // E[(a − b)²] for independent uniform a, b over 0..n is (n² − 1)/6.
            CostMatrix::Grid { height, width } => {
                let (h, w) = (*height as f64, *width as f64);
                (h * h - 1.0) / 6.0 + (w * w - 1.0) / 6.0
            }
        }
    }

    pub fn median(&self) -> f64 {
        let mut all: Vec<f64> = (0..self.rows()).flat_map(|i| (0..self.cols()).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        all.sort_by(f64::total_cmp);
        let n = all.len();
        if n == 0 {
            0.0
        } else if n % 2 == 1 {
            all[n / 2]
        } else {
            0.5 * (all[n / 2 - 1] + all[n / 2])
        }
    }
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain application of the Gibbs kernel `exp(−C/ε)`.
struct LogKernel<'a> {
    cost: &'a CostMatrix,
    eps: f64,
    /// Per-axis kernels `exp(−d²/ε)` for the grid case.
    axes: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> LogKernel<'a> {
    fn new(cost: &'a CostMatrix, eps: f64) -> Self {
        let axes = match cost {
            CostMatrix::Grid { height, width } => {
                let axis = |n: usize| {
                    (0..n * n).map(|k| {
                        let d = (k / n) as f64 - (k % n) as f64;
                        (-d * d / eps).exp()
                    })
                    .collect::<Vec<_>>()
                };
                Some((axis(*height), axis(*width)))
            }
            CostMatrix::Dense { .. } => None,
        };
        LogKernel { cost, eps, axes }
    }

    /// `out_i = LSE_j(x_j − C_ij/ε)`
    fn rows(&self, x: &[f64]) -> Vec<f64> {
        match self.cost {
            CostMatrix::Dense { rows, cols, data } => (0..*rows)
                .map(|i| lse((0..*cols).map(|j| x[j] - data[i * cols + j] / self.eps)))
                .collect(),
            CostMatrix::Grid { height, width } => self.grid(*height, *width, x),
        }
    }

    /// `out_j = LSE_i(x_i − C_ij/ε)`
    fn cols(&self, x: &[f64]) -> Vec<f64> {
        match self.cost {
            CostMatrix::Dense { rows, cols, data } => (0..*cols)
                .map(|j| lse((0..*rows).map(|i| x[i] - data[i * cols + j] / self.eps)))
                .collect(),
            // The grid cost is symmetric.
            CostMatrix::Grid { height, width } => self.grid(*height, *width, x),
        }
    }

    fn grid(&self, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
        let (kr, kc) = self.axes.as_ref().expect("grid kernel");
        let mut along_cols = vec![0.0; h * w];
        for r in 0..h {
            let line: Vec<f64> = x[r * w..(r + 1) * w].to_vec();
            let out = self.axis_lse(&line, kc);
            along_cols[r * w..(r + 1) * w].copy_from_slice(&out);
        }
        let mut out = vec![0.0; h * w];
        let mut line = vec![0.0; h];
        for c in 0..w {
            for r in 0..h {
                line[r] = along_cols[r * w + c];
            }
            for (r, v) in self.axis_lse(&line, kr).into_iter().enumerate() {
                out[r * w + c] = v;
            }
        }
        out
    }

    /// `out_a = LSE_b(line_b − (a − b)²/ε)` with a max-shifted matrix product,
    /// falling back to the exact form where the product underflows.
    fn axis_lse(&self, line: &[f64], kernel: &[f64]) -> Vec<f64> {
        let n = line.len();
        let m = line.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return vec![m; n];
        }
        let e: Vec<f64> = line.iter().map(|v| (v - m).exp()).collect();
        (0..n)
            .map(|a| {
                let s: f64 = (0..n).map(|b| kernel[a * n + b] * e[b]).sum();
                if s > UNDERFLOW_GUARD {
                    m + s.ln()
                } else {
                    lse((0..n).map(|b| {
                        let d = a as f64 - b as f64;
                        line[b] - d * d / self.eps
                    }))
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub cost: CostMatrix,
    pub epsilon: f64,
    pub max_iters: usize,
    /// Bound on the L1 marginal errors for a run to count as converged.
    pub tolerance: f64,
}

impl TransportProblem {
    pub const DEFAULT_MAX_ITERS: usize = 200;
    pub const DEFAULT_TOLERANCE: f64 = 1e-6;

    /// Problem with the default ε (1% of the mean cost), iteration cap and tolerance.
    pub fn new(p: Vec<f64>, q: Vec<f64>, cost: CostMatrix) -> Self {
        let epsilon = 0.01 * cost.mean();
        TransportProblem { p, q, cost, epsilon, max_iters: Self::DEFAULT_MAX_ITERS, tolerance: Self::DEFAULT_TOLERANCE }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("entropic regularization must be positive, got {}", self.epsilon)));
        }
        if self.p.len() != self.cost.rows() || self.q.len() != self.cost.cols() {
            return Err(Error::Shape(format!(
                "marginals of length {} and {} do not fit a {}x{} cost matrix",
                self.p.len(),
                self.q.len(),
                self.cost.rows(),
                self.cost.cols()
            )));
        }
        for (name, v) in [("p", &self.p), ("q", &self.q)] {
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidArgument(format!("marginal {name} must be finite and non-negative")));
            }
            let mass: f64 = v.iter().sum();
            if mass == 0.0 {
                return Err(Error::ZeroMass(format!("marginal {name} has zero mass")));
            }
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("marginal {name} sums to {mass}, expected 1")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// Row-major `p.len() × q.len()`.
    pub plan: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Dual potential of the first marginal.
    pub f: Vec<f64>,
    /// Dual potential of the second marginal.
    pub g: Vec<f64>,
    /// `⟨π, C⟩`
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub row_error: f64,
    pub col_error: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }
}

/// Potentials after every iteration, kept for the reverse pass.
struct History {
    /// `f_0 … f_{K−1}`
    fs: Vec<Vec<f64>>,
    /// `g_1 … g_K`
    gs: Vec<Vec<f64>>,
    converged: bool,
}

fn log_marginal(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

fn solve(problem: &TransportProblem, kernel: &LogKernel) -> History {
    let eps = problem.epsilon;
    let (lp, lq) = (log_marginal(&problem.p), log_marginal(&problem.q));
    let mut f = vec![0.0; problem.p.len()];
    let mut fs = Vec::new();
    let mut gs = Vec::new();
    let mut converged = false;
    for it in 0..problem.max_iters {
        let fe: Vec<f64> = f.iter().map(|v| v / eps).collect();
        let g: Vec<f64> = kernel.cols(&fe).iter().zip(&lq).map(|(l, lq)| eps * (lq - l)).collect();
        let ge: Vec<f64> = g.iter().map(|v| v / eps).collect();
        let r = kernel.rows(&ge);
        let err: f64 = f.iter().zip(&r).zip(&problem.p).map(|((fi, ri), pi)| ((fi / eps + ri).exp() - pi).abs()).sum();
        fs.push(f.clone());
        gs.push(g);
        if err <= problem.tolerance {
            converged = true;
            break;
        }
        if it + 1 < problem.max_iters {
            f = r.iter().zip(&lp).map(|(ri, lp)| eps * (lp - ri)).collect();
        }
    }
    History { fs, gs, converged }
}

fn assemble(problem: &TransportProblem, history: &History) -> TransportPlan {
    let eps = problem.epsilon;
    let f = history.fs.last().expect("at least one iteration").clone();
    let g = history.gs.last().expect("at least one iteration").clone();
    let (n, m) = (f.len(), g.len());
    let mut plan = vec![0.0; n * m];
    let mut cost = 0.0;
    let mut col = vec![0.0; m];
    let mut row_error = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..m {
            let c = problem.cost.get(i, j);
            let v = ((f[i] + g[j] - c) / eps).exp();
            plan[i * m + j] = v;
            cost += v * c;
            row += v;
            col[j] += v;
        }
        row_error += (row - problem.p[i]).abs();
    }
    let col_error = col.iter().zip(&problem.q).map(|(a, b)| (a - b).abs()).sum();
    let converged = history.converged && row_error <= problem.tolerance && col_error <= problem.tolerance;
    TransportPlan { plan, rows: n, cols: m, f, g, cost, iterations: history.gs.len(), converged, row_error, col_error }
}

/// Runs Sinkhorn to convergence or `max_iters`; hitting the cap is reported
/// through `converged`, not as an error.
pub fn sinkhorn(problem: &TransportProblem) -> Result<TransportPlan> {
    problem.validate()?;
    let kernel = LogKernel::new(&problem.cost, problem.epsilon);
    Ok(assemble(problem, &solve(problem, &kernel)))
}

fn signed_logs(v: &[f64], offset: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = vec![f64::NEG_INFINITY; v.len()];
    let mut neg = vec![f64::NEG_INFINITY; v.len()];
    for (k, (&x, &o)) in v.iter().zip(offset).enumerate() {
        if x > 0.0 {
            pos[k] = x.ln() + o;
        } else if x < 0.0 {
            neg[k] = (-x).ln() + o;
        }
    }
    (pos, neg)
}

/// Sinkhorn plan plus the gradient of `⟨π, C⟩` with respect to `q`,
/// obtained by reverse-mode differentiation through every iteration that ran.
pub fn sinkhorn_with_gradient(problem: &TransportProblem) -> Result<(TransportPlan, Vec<f64>)> {
    problem.validate()?;
    let eps = problem.epsilon;
    let kernel = LogKernel::new(&problem.cost, eps);
    let history = solve(problem, &kernel);
    let plan = assemble(problem, &history);
    let (n, m) = (plan.rows, plan.cols);
    let q = &problem.q;

    // Adjoints of the final potentials. `h` holds ḡ_j / exp(g_j/ε), which stays
    // finite where q_j = 0.
    let f = &plan.f;
    let mut fbar = vec![0.0; n];
    let mut h = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let c = problem.cost.get(i, j);
            let pij = plan.plan[i * m + j];
            fbar[i] += pij * c / eps;
            h[j] += ((f[i] - c) / eps).exp() * c / eps;
        }
    }

    let mut qbar = vec![0.0; m];
    for k in (0..history.gs.len()).rev() {
        // g_k = ε log q − ε L, L = LSE_i((f_{k−1} − C)/ε)
        let fe: Vec<f64> = history.fs[k].iter().map(|v| v / eps).collect();
        let l = kernel.cols(&fe);
        for j in 0..m {
            qbar[j] += eps * h[j] * (-l[j]).exp();
        }
        let hq: Vec<f64> = h.iter().zip(q).map(|(a, b)| a * b).collect();
        let off: Vec<f64> = l.iter().map(|v| -2.0 * v).collect();
        let (pos, neg) = signed_logs(&hq, &off);
        let (sp, sn) = (kernel.rows(&pos), kernel.rows(&neg));
        for i in 0..n {
            fbar[i] -= (fe[i] + sp[i]).exp() - (fe[i] + sn[i]).exp();
        }
        if k == 0 {
            break;
        }
        // f_{k−1} = ε log p − ε r, r = LSE_j((g_{k−1} − C)/ε)
        let ge: Vec<f64> = history.gs[k - 1].iter().map(|v| v / eps).collect();
        let r = kernel.rows(&ge);
        let off: Vec<f64> = r.iter().map(|v| -v).collect();
        let (pos, neg) = signed_logs(&fbar, &off);
        let (sp, sn) = (kernel.cols(&pos), kernel.cols(&neg));
        for j in 0..m {
            h[j] = -(sp[j].exp() - sn[j].exp());
        }
        fbar.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((plan, qbar))
}
