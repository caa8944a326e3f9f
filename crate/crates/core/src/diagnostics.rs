//! Functionals, inequality margins and stabilization metrics evaluated on
//! discrete states.
//!
//! Every quantity is computed from cell values and two-point face
//! differences with the quadratures of [`crate::grid`]. Inequalities are
//! reported as margins `rhs - lhs`, so that a claim becomes `margin >= -slack`.

use crate::fluid::buoyancy;
use crate::grid::{
    face_inner, gradient, integrate, laplacian, pairwise_sum_by, FaceField, GridSpec, MacVelocity,
    ScalarField,
};
use crate::sensitivity::SensitivitySpec;
use crate::state::SimState;
use std::f64::consts::PI;
use thiserror::Error;

/// Cells with `n` below this value are floored before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-30;

/// Fixed multiplier of the slack model `kappa (dt + dx^2) max|terms|`.
pub const SLACK_KAPPA: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("f'(0) = 0 required: the conditional energy functional does not apply to {0}")]
    FlatOriginRequired(String),
    #[error("no admissible small-oxygen cutoff A: g(s) exceeds 1/(16 cP n0) = {threshold:e} already at s = {first_sample:e}")]
    NoCutoff { threshold: f64, first_sample: f64 },
    #[error("ratio undefined for a constant field")]
    ConstantField,
    #[error("field must be nonnegative and not identically zero")]
    BadDensity,
}

/// One row of the diagnostics time series.
///
/// The first 19 columns are the functionals of the state. The appended
/// columns describe the step that produced the state: `step_dt` is zero for
/// the initial report, and `qe_margin`/`qe_slack` are the quasi-energy margin
/// over that step and its admissible slack.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FunctionalReport {
    pub t: f64,
    pub mass_n: f64,
    pub sup_c: f64,
    pub entropy_n: f64,
    pub neg_log_mass: f64,
    pub w_mass: f64,
    pub fisher_n: f64,
    pub dirichlet_w: f64,
    pub kinetic: f64,
    pub dirichlet_u: f64,
    pub c_l2: f64,
    pub dirichlet_c: f64,
    pub lap_w_l2: f64,
    pub quasi_energy_lhs_rate: f64,
    pub quasi_energy_rhs: f64,
    pub cond_f: f64,
    pub uniform_int: f64,
    pub ck_margin: f64,
    pub heihoff_ratio: f64,
    pub step_dt: f64,
    pub qe_margin: f64,
    pub qe_slack: f64,
    pub eta0: f64,
    pub floored_cells: f64,
}

impl FunctionalReport {
    pub const COLUMNS: [&'static str; 24] = [
        "t",
        "mass_n",
        "sup_c",
        "entropy_n",
        "neg_log_mass",
        "w_mass",
        "fisher_n",
        "dirichlet_w",
        "kinetic",
        "dirichlet_u",
        "c_l2",
        "dirichlet_c",
        "lap_w_l2",
        "quasi_energy_lhs_rate",
        "quasi_energy_rhs",
        "cond_F",
        "uniform_int",
        "ck_margin",
        "heihoff_ratio",
        "step_dt",
        "qe_margin",
        "qe_slack",
        "eta0",
        "floored_cells",
    ];

    pub fn to_row(&self) -> [f64; 24] {
        [
            self.t,
            self.mass_n,
            self.sup_c,
            self.entropy_n,
            self.neg_log_mass,
            self.w_mass,
            self.fisher_n,
            self.dirichlet_w,
            self.kinetic,
            self.dirichlet_u,
            self.c_l2,
            self.dirichlet_c,
            self.lap_w_l2,
            self.quasi_energy_lhs_rate,
            self.quasi_energy_rhs,
            self.cond_f,
            self.uniform_int,
            self.ck_margin,
            self.heihoff_ratio,
            self.step_dt,
            self.qe_margin,
            self.qe_slack,
            self.eta0,
            self.floored_cells,
        ]
    }

    pub fn from_row(r: &[f64; 24]) -> Self {
        Self {
            t: r[0],
            mass_n: r[1],
            sup_c: r[2],
            entropy_n: r[3],
            neg_log_mass: r[4],
            w_mass: r[5],
            fisher_n: r[6],
            dirichlet_w: r[7],
            kinetic: r[8],
            dirichlet_u: r[9],
            c_l2: r[10],
            dirichlet_c: r[11],
            lap_w_l2: r[12],
            quasi_energy_lhs_rate: r[13],
            quasi_energy_rhs: r[14],
            cond_f: r[15],
            uniform_int: r[16],
            ck_margin: r[17],
            heihoff_ratio: r[18],
            step_dt: r[19],
            qe_margin: r[20],
            qe_slack: r[21],
            eta0: r[22],
            floored_cells: r[23],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.to_row().iter().all(|v| v.is_finite())
    }

    /// `1/2 fisher_n + chi^2/2 dirichlet_w`.
    pub fn dissipation(&self, chi: f64) -> f64 {
        0.5 * self.fisher_n + 0.5 * chi * chi * self.dirichlet_w
    }

    /// `-int ln n + chi^2 int w`.
    pub fn quasi_energy(&self, chi: f64) -> f64 {
        self.neg_log_mass + chi * chi * self.w_mass
    }
}

/// Weights and thresholds of the conditional energy functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalParams {
    /// Weight of `int |grad w|^2`.
    pub k: f64,
    /// `1/(2L)` multiplies `int |u|^2`.
    pub l: f64,
    /// Weight of `int c^2`.
    pub m: f64,
    pub eta0: f64,
    /// Small-oxygen cutoff.
    pub a: f64,
    pub g_max: f64,
    /// Poincare constant.
    pub c_p: f64,
    /// Sobolev constant (`W^{1,1}` into `L^2`).
    pub c_s: f64,
    /// Gagliardo-Nirenberg constant for `|grad phi|^4`.
    pub c_g: f64,
}

/// Fixed inputs of the report evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsContext {
    pub chi: f64,
    pub c0_inf: f64,
    /// Mean of the initial density.
    pub n_bar0: f64,
    pub spec: SensitivitySpec,
    pub conditional: Option<ConditionalParams>,
}

fn ln_floored(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// `int n ln(n / n_bar)`, with `0 ln 0 = 0`.
pub fn entropy(n: &ScalarField, n_bar: f64) -> f64 {
    let v = n.values();
    pairwise_sum_by(v.len(), &|k| {
        let x = v[k];
        if x <= 0.0 {
            0.0
        } else {
            x * (ln_floored(x) - n_bar.ln())
        }
    }) * n.grid().cell_volume()
}

/// `sum_faces (q_R - q_L)^2 / (q_L q_R h^2) * dx dy`, the face form of
/// `int |grad q|^2 / q^2`.
pub fn log_gradient_energy(q: &ScalarField) -> f64 {
    let g = *q.grid();
    let grad = gradient(q);
    let v = q.values();
    let (nx, ny) = (g.nx, g.ny);
    let vol = g.cell_volume();
    let fl = |x: f64| x.max(LOG_FLOOR);
    let sx = pairwise_sum_by((nx - 1) * ny, &|k| {
        let (i, j) = (k % (nx - 1) + 1, k / (nx - 1));
        let d = grad.fx(i, j);
        d * d / (fl(v[i - 1 + j * nx]) * fl(v[i + j * nx]))
    });
    let sy = pairwise_sum_by(nx * (ny - 1), &|k| {
        let (i, j) = (k % nx, k / nx + 1);
        let d = grad.fy(i, j);
        d * d / (fl(v[i + (j - 1) * nx]) * fl(v[i + j * nx]))
    });
    (sx + sy) * vol
}

/// `int |grad q|^2` over faces.
pub fn dirichlet_energy(q: &ScalarField) -> f64 {
    let grad = gradient(q);
    face_inner(&grad, &grad)
}

/// `1/2 int |u|^2` over faces.
pub fn kinetic_energy(u: &MacVelocity) -> f64 {
    0.5 * face_inner(u.faces(), u.faces())
}

/// `int |grad u|^2` for a no-slip MAC field, including the half-cell wall
/// differences; equals `-int u . lap u` for the stepper's vector Laplacian.
pub fn velocity_dirichlet(u: &MacVelocity) -> f64 {
    let f = u.faces();
    let g = *u.grid();
    let (nx, ny) = (g.nx, g.ny);
    let (dx, dy) = (g.dx(), g.dy());
    let vol = g.cell_volume();
    let sq = |v: f64| v * v;
    // ux: differences along x at cell centers, along y at interior corners,
    // and wall differences against the mirrored halo.
    let ux_x = pairwise_sum_by(nx * ny, &|k| {
        let (i, j) = (k % nx, k / nx);
        sq((f.fx(i + 1, j) - f.fx(i, j)) / dx)
    });
    let ux_y = pairwise_sum_by((nx - 1) * (ny + 1), &|k| {
        let (i, jc) = (k % (nx - 1) + 1, k / (nx - 1));
        if jc == 0 {
            0.5 * sq(2.0 * f.fx(i, 0) / dy)
        } else if jc == ny {
            0.5 * sq(2.0 * f.fx(i, ny - 1) / dy)
        } else {
            sq((f.fx(i, jc) - f.fx(i, jc - 1)) / dy)
        }
    });
    let uy_y = pairwise_sum_by(nx * ny, &|k| {
        let (i, j) = (k % nx, k / nx);
        sq((f.fy(i, j + 1) - f.fy(i, j)) / dy)
    });
    let uy_x = pairwise_sum_by((nx + 1) * (ny - 1), &|k| {
        let (ic, j) = (k % (nx + 1), k / (nx + 1) + 1);
        if ic == 0 {
            0.5 * sq(2.0 * f.fy(0, j) / dx)
        } else if ic == nx {
            0.5 * sq(2.0 * f.fy(nx - 1, j) / dx)
        } else {
            sq((f.fy(ic, j) - f.fy(ic - 1, j)) / dx)
        }
    });
    (ux_x + ux_y + uy_y + uy_x) * vol
}

/// Csiszar-Kullback margin together with the scale it should be judged at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CkMargin {
    /// `2 (int phi)(int phi ln(phi/mean)) - (int |phi - mean|)^2`.
    pub margin: f64,
    /// `(int phi)^2`, an upper bound for both sides up to a factor 4.
    pub scale: f64,
}

pub fn csiszar_check(phi: &ScalarField) -> Result<CkMargin, DiagnosticsError> {
    if phi.min() < 0.0 || phi.max() <= 0.0 {
        return Err(DiagnosticsError::BadDensity);
    }
    let mass = integrate(phi);
    let mean = mass / phi.grid().area();
    let v = phi.values();
    let l1 = pairwise_sum_by(v.len(), &|k| (v[k] - mean).abs()) * phi.grid().cell_volume();
    let ent = entropy(phi, mean);
    Ok(CkMargin {
        margin: 2.0 * mass * ent - l1 * l1,
        scale: mass * mass,
    })
}

/// `(int psi) int |grad psi|^2/psi^2  /  int psi ln(psi/mean)`.
pub fn heihoff_ratio(psi: &ScalarField) -> Result<f64, DiagnosticsError> {
    if !(psi.min() > 0.0) {
        return Err(DiagnosticsError::BadDensity);
    }
    let mass = integrate(psi);
    let ent = entropy(psi, mass / psi.grid().area());
    let fisher = log_gradient_energy(psi);
    if fisher == 0.0 || !(ent > 0.0) {
        return Err(DiagnosticsError::ConstantField);
    }
    Ok(mass * fisher / ent)
}

/// `int n f(c) |ln(n f(c))|`, extended by zero where `n f(c) = 0`.
pub fn uniform_integrability(n: &ScalarField, c: &ScalarField, spec: &SensitivitySpec) -> f64 {
    let (nv, cv) = (n.values(), c.values());
    pairwise_sum_by(nv.len(), &|k| {
        let s = nv[k] * spec.f(cv[k]);
        if s > 0.0 {
            s * s.ln().abs()
        } else {
            0.0
        }
    }) * n.grid().cell_volume()
}

/// `int_{c <= A} |grad c|^2 / c^2`, counting a face when both of its cells
/// satisfy `c <= A`.
pub fn small_c_gradient(c: &ScalarField, a: f64) -> f64 {
    let g = *c.grid();
    let grad = gradient(c);
    let v = c.values();
    let (nx, ny) = (g.nx, g.ny);
    let term = |ca: f64, cb: f64, d: f64| {
        if ca <= a && cb <= a {
            d * d / (ca * cb)
        } else {
            0.0
        }
    };
    let sx = pairwise_sum_by((nx - 1) * ny, &|k| {
        let (i, j) = (k % (nx - 1) + 1, k / (nx - 1));
        term(v[i - 1 + j * nx], v[i + j * nx], grad.fx(i, j))
    });
    let sy = pairwise_sum_by(nx * (ny - 1), &|k| {
        let (i, j) = (k % nx, k / nx + 1);
        term(v[i + (j - 1) * nx], v[i + j * nx], grad.fy(i, j))
    });
    (sx + sy) * g.cell_volume()
}

/// Distances to the constant steady state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilizationMetrics {
    /// `int |n - n_bar0|`.
    pub dist_n_l1: f64,
    /// `int c`.
    pub c_l1: f64,
    /// `int |u|` from cell-centered velocities.
    pub u_l1: f64,
    /// `max |n - n_bar0|`.
    pub dist_n_c0: f64,
    /// `max |lap_h n|`, the second-difference part of the smooth-norm proxy.
    pub n_second_diff: f64,
}

pub fn stabilization_metrics(state: &SimState, n_bar0: f64) -> StabilizationMetrics {
    let v = state.n.values();
    let vol = state.grid().cell_volume();
    let dist_n_l1 = pairwise_sum_by(v.len(), &|k| (v[k] - n_bar0).abs()) * vol;
    let dist_n_c0 = v.iter().fold(0.0_f64, |m, x| m.max((x - n_bar0).abs()));
    let lap = laplacian(&state.n);
    StabilizationMetrics {
        dist_n_l1,
        c_l1: integrate(&state.c),
        u_l1: crate::fluid::velocity_l1(&state.u),
        dist_n_c0,
        n_second_diff: lap.values().iter().fold(0.0_f64, |m, x| m.max(x.abs())),
    }
}

/// `F = int n ln(n/n_bar0) + K/2 int |grad w|^2 + 1/(2L) int |u|^2 + M/2 int c^2`.
pub fn conditional_functional(state: &SimState, params: &ConditionalParams, n_bar0: f64, c0_inf: f64) -> f64 {
    let w = state.c.map(|v| -(v / c0_inf).ln());
    let c2 = integrate(&state.c.map(|v| v * v));
    entropy(&state.n, n_bar0)
        + 0.5 * params.k * dirichlet_energy(&w)
        + (1.0 / (2.0 * params.l)) * 2.0 * kinetic_energy(&state.u)
        + 0.5 * params.m * c2
}

/// Test fields for the Sobolev and Gagliardo-Nirenberg constants: the 63
/// nonconstant Neumann cosine modes with wavenumbers below 8 in each
/// direction, and `exp(cos(pi x/lx) cos(pi y/ly))`.
fn constant_library(lx: f64, ly: f64) -> Vec<Box<dyn Fn(f64, f64) -> f64>> {
    let mut lib: Vec<Box<dyn Fn(f64, f64) -> f64>> = Vec::with_capacity(64);
    for k in 0..8 {
        for l in 0..8 {
            if k == 0 && l == 0 {
                continue;
            }
            let (kx, ky) = (k as f64 * PI / lx, l as f64 * PI / ly);
            lib.push(Box::new(move |x, y| (kx * x).cos() * (ky * y).cos()));
        }
    }
    lib.push(Box::new(move |x, y| ((PI * x / lx).cos() * (PI * y / ly).cos()).exp()));
    lib
}

fn cell_gradient_norms(f: &ScalarField) -> Vec<f64> {
    let g = *f.grid();
    let grad = gradient(f);
    (0..g.cells())
        .map(|k| {
            let (i, j) = (k % g.nx, k / g.nx);
            let gx = 0.5 * (grad.fx(i, j) + grad.fx(i + 1, j));
            let gy = 0.5 * (grad.fy(i, j) + grad.fy(i, j + 1));
            gx.hypot(gy)
        })
        .collect()
}

/// Estimated `(cS, cG)`: the maxima of the defining ratios over the fixed
/// test library, sampled on a 64x64 grid of the domain and doubled.
pub fn estimate_sobolev_constants(lx: f64, ly: f64) -> (f64, f64) {
    let g = GridSpec::new(64, 64, lx, ly).expect("valid library grid");
    let vol = g.cell_volume();
    let mut c_s = 0.0_f64;
    let mut c_g = 0.0_f64;
    for f in constant_library(lx, ly) {
        let field = ScalarField::from_fn(g, |x, y| f(x, y));
        let mean = field.mean();
        let var = integrate(&field.map(|v| (v - mean) * (v - mean)));
        let norms = cell_gradient_norms(&field);
        let grad_l1 = norms.iter().sum::<f64>() * vol;
        let grad_l2 = norms.iter().map(|v| v * v).sum::<f64>() * vol;
        let grad_l4 = norms.iter().map(|v| v.powi(4)).sum::<f64>() * vol;
        let lap_l2 = integrate(&laplacian(&field).map(|v| v * v));
        c_s = c_s.max(var / (grad_l1 * grad_l1));
        c_g = c_g.max(grad_l4 / (lap_l2 * grad_l2));
    }
    (2.0 * c_s, 2.0 * c_g)
}

/// Number of samples of `g` on `[0, c0_inf]`.
const G_SAMPLES: usize = 20_001;

/// Weights `K, L, M`, cutoff `A` and threshold `eta0` of the conditional
/// energy functional for the given data.
///
/// `phi_grad_sup` is `||grad phi||_inf` and `n0_mass` is `int n_0`.
pub fn conditional_parameters(
    grid: &GridSpec,
    chi: f64,
    n0_mass: f64,
    c0_inf: f64,
    spec: &SensitivitySpec,
    phi_grad_sup: f64,
) -> Result<ConditionalParams, DiagnosticsError> {
    if !spec.has_flat_origin() {
        return Err(DiagnosticsError::FlatOriginRequired(spec.label()));
    }
    let area = grid.area();
    let n_bar0 = n0_mass / area;
    // First nonzero Neumann eigenvalue of the rectangle; the Dirichlet
    // eigenvalue is larger, so 1/lambda bounds both Poincare inequalities.
    let lambda1 = PI * PI * (1.0 / (grid.lx * grid.lx)).min(1.0 / (grid.ly * grid.ly));
    let c_p = 1.0 / lambda1;
    let (c_s, c_g) = estimate_sobolev_constants(grid.lx, grid.ly);
    let k = 16.0 * c_p * chi * chi * n_bar0;
    let g = |s: f64| {
        let r = spec.ratio(s);
        let (_, df) = spec.eval_unchecked(s);
        k * r * r + r + df.abs()
    };
    let threshold = 1.0 / (16.0 * c_p * n_bar0);
    let mut g_max = 0.0_f64;
    let mut last_ok: Option<usize> = None;
    let mut scanning = true;
    for idx in 0..G_SAMPLES {
        let s = c0_inf * idx as f64 / (G_SAMPLES - 1) as f64;
        let gs = g(s);
        g_max = g_max.max(gs);
        if scanning {
            if gs <= threshold {
                last_ok = Some(idx);
            } else {
                scanning = false;
            }
        }
    }
    let a = match last_ok {
        Some(idx) if idx > 0 => c0_inf * idx as f64 / (G_SAMPLES - 1) as f64,
        _ => {
            return Err(DiagnosticsError::NoCutoff {
                threshold,
                first_sample: c0_inf / (G_SAMPLES - 1) as f64,
            })
        }
    };
    let l = 2.0 * c_p * c_s * phi_grad_sup * phi_grad_sup * n0_mass + 1.0;
    let m = 2.0 * k * g_max * n_bar0 / (a * a);
    let c5 = k * (k * l + 0.5);
    let c6 = 2.0 * c_s * area * n_bar0 * (k * g_max + chi * chi).powi(2);
    let c7 = 2.0 * c_g * (c5 + c6) / k;
    let eta0 = k / (8.0 * c7);
    Ok(ConditionalParams {
        k,
        l,
        m,
        eta0,
        a,
        g_max,
        c_p,
        c_s,
        c_g,
    })
}

/// Functionals of one state. The step-dependent columns are left at their
/// initial-report values: `quasi_energy_lhs_rate` holds the dissipation only
/// and `step_dt`, `qe_margin`, `qe_slack` are zero.
pub fn evaluate_report(state: &SimState, ctx: &DiagnosticsContext) -> FunctionalReport {
    let (n, c) = (&state.n, &state.c);
    let vol = state.grid().cell_volume();
    let chi2 = ctx.chi * ctx.chi;
    let nv = n.values();
    let cv = c.values();
    let floored = nv.iter().filter(|&&v| v < LOG_FLOOR).count();
    let w = c.map(|v| -(v / ctx.c0_inf).ln());
    let mass_n = integrate(n);
    let fisher_n = log_gradient_energy(n);
    let dirichlet_w = dirichlet_energy(&w);
    let rhs = chi2 * pairwise_sum_by(nv.len(), &|k| nv[k] * ctx.spec.ratio(cv[k])) * vol;
    let ck = csiszar_check(n).map(|m| m.margin).unwrap_or(0.0);
    let (cond_f, eta0) = match &ctx.conditional {
        Some(p) => (conditional_functional(state, p, ctx.n_bar0, ctx.c0_inf), p.eta0),
        None => (0.0, 0.0),
    };
    FunctionalReport {
        t: state.t,
        mass_n,
        sup_c: c.max(),
        entropy_n: entropy(n, ctx.n_bar0),
        neg_log_mass: -pairwise_sum_by(nv.len(), &|k| ln_floored(nv[k])) * vol,
        w_mass: integrate(&w),
        fisher_n,
        dirichlet_w,
        kinetic: kinetic_energy(&state.u),
        dirichlet_u: velocity_dirichlet(&state.u),
        c_l2: integrate(&c.map(|v| v * v)),
        dirichlet_c: dirichlet_energy(c),
        lap_w_l2: integrate(&laplacian(&w).map(|v| v * v)),
        quasi_energy_lhs_rate: 0.5 * fisher_n + 0.5 * chi2 * dirichlet_w,
        quasi_energy_rhs: rhs,
        cond_f,
        uniform_int: uniform_integrability(n, c, &ctx.spec),
        ck_margin: ck,
        heihoff_ratio: heihoff_ratio(n).unwrap_or(0.0),
        step_dt: 0.0,
        qe_margin: 0.0,
        qe_slack: 0.0,
        eta0,
        floored_cells: floored as f64,
    }
}

/// Quasi-energy inequality over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiEnergyStep {
    /// `d/dt(-int ln n + chi^2 int w) + 1/2 int |grad n|^2/n^2 + chi^2/2 int |grad w|^2`.
    pub lhs_rate: f64,
    /// `chi^2 int n f(c)/c`.
    pub rhs: f64,
    /// `rhs - lhs_rate`.
    pub margin: f64,
    pub slack: f64,
}

/// Discrete quasi-energy balance between two consecutive states: the time
/// derivative is the difference quotient, and the dissipation and source
/// terms are averaged over the two end points.
pub fn quasi_energy_check(prev: &FunctionalReport, next: &FunctionalReport, dt: f64, chi: f64, dx2: f64) -> QuasiEnergyStep {
    let rate = (next.quasi_energy(chi) - prev.quasi_energy(chi)) / dt;
    let (d0, d1) = (prev.dissipation(chi), next.dissipation(chi));
    let lhs_rate = rate + 0.5 * (d0 + d1);
    let rhs = 0.5 * (prev.quasi_energy_rhs + next.quasi_energy_rhs);
    let scale = [rate.abs(), d0, d1, prev.quasi_energy_rhs, next.quasi_energy_rhs]
        .into_iter()
        .fold(0.0_f64, f64::max);
    QuasiEnergyStep {
        lhs_rate,
        rhs,
        margin: rhs - lhs_rate,
        slack: SLACK_KAPPA * (dt + dx2) * scale,
    }
}

/// Terms of the discrete kinetic energy balance
/// `d/dt 1/2 int |u|^2 + int |grad u|^2 - int n grad phi . u` over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBalance {
    pub rate: f64,
    pub dissipation: f64,
    pub forcing: f64,
    /// `rate + dissipation - forcing`.
    pub residual: f64,
    pub max_term: f64,
}

/// Evaluate the kinetic energy balance between `prev` and `next`, with the
/// buoyancy of `prev` (the density the fluid step used) and midpoint
/// dissipation and velocity.
pub fn fluid_energy_balance(prev: &SimState, next: &SimState, phi: &ScalarField, dt: f64) -> EnergyBalance {
    let rate = (kinetic_energy(&next.u) - kinetic_energy(&prev.u)) / dt;
    let dissipation = 0.5 * (velocity_dirichlet(&prev.u) + velocity_dirichlet(&next.u));
    let mid: FaceField = prev.u.faces().zip_map(next.u.faces(), |a, b| 0.5 * (a + b));
    let forcing = face_inner(&buoyancy(&prev.n, phi), &mid);
    let residual = rate + dissipation - forcing;
    EnergyBalance {
        rate,
        dissipation,
        forcing,
        residual,
        max_term: rate.abs().max(dissipation).max(forcing.abs()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::{vector_laplacian, FluidOperators};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_valued(g: GridSpec) -> ScalarField {
        ScalarField::from_fn(g, |x, _| if x < 0.5 { 1.0 } else { 3.0 })
    }

    /// Closed form for n in {1, 3} on halves of the unit square, mean 2.
    fn two_valued_entropy() -> f64 {
        0.5 * (0.5_f64).ln() + 1.5 * (1.5_f64).ln()
    }

    fn ctx(spec: SensitivitySpec, conditional: Option<ConditionalParams>) -> DiagnosticsContext {
        DiagnosticsContext {
            chi: 1.0,
            c0_inf: 1.0,
            n_bar0: 1.0,
            spec,
            conditional,
        }
    }

    #[test]
    fn homogeneous_state_report() {
        let g = GridSpec::unit_square(8);
        let spec = SensitivitySpec::power(2.0).unwrap();
        let cp = conditional_parameters(&g, 1.0, 1.0, 1.0, &spec, 0.0).unwrap();
        let state = SimState {
            t: 0.0,
            n: ScalarField::constant(g, 1.0),
            c: ScalarField::constant(g, 1.0),
            u: MacVelocity::zero(g),
        };
        let r = evaluate_report(&state, &ctx(spec, Some(cp)));
        assert_eq!(r.entropy_n, 0.0);
        assert_eq!(r.w_mass, 0.0);
        assert_eq!(r.fisher_n + r.dirichlet_w + r.dirichlet_u + r.dirichlet_c, 0.0);
        assert!((r.cond_f - 0.5 * cp.m).abs() < 1e-12 * cp.m);
        assert!(r.all_finite());
    }

    #[test]
    fn two_valued_entropy_closed_form() {
        let g = GridSpec::unit_square(16);
        let e = entropy(&two_valued(g), 2.0);
        assert!((e - two_valued_entropy()).abs() < 1e-12);
        assert!((e - 0.2616).abs() < 1e-4);
    }

    #[test]
    fn entropy_nonnegative_on_random_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = GridSpec::unit_square(12);
        for _ in 0..50 {
            let n = ScalarField::from_values(g, (0..g.cells()).map(|_| rng.gen_range(0.0..4.0)).collect()).unwrap();
            assert!(entropy(&n, n.mean()) >= -1e-14);
        }
    }

    #[test]
    fn ck_cases() {
        let g = GridSpec::unit_square(8);
        let m = csiszar_check(&ScalarField::constant(g, 2.0)).unwrap();
        assert!(m.margin.abs() < 1e-15);
        let m = csiszar_check(&two_valued(g)).unwrap();
        let expected = 4.0 * two_valued_entropy() - 1.0;
        assert!((m.margin - expected).abs() < 1e-12);
        assert!((m.margin - 0.047).abs() < 1e-3);
        assert!(csiszar_check(&ScalarField::zeros(g)).is_err());
    }

    #[test]
    fn heihoff_ratio_cases() {
        let g = GridSpec::unit_square(8);
        assert_eq!(heihoff_ratio(&ScalarField::constant(g, 1.0)), Err(DiagnosticsError::ConstantField));
        let g = GridSpec::unit_square(64);
        let r = heihoff_ratio(&ScalarField::from_fn(g, |x, _| 2.0 + (2.0 * PI * x).cos())).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn uniform_integrability_cases() {
        let g = GridSpec::unit_square(8);
        let spec = SensitivitySpec::power(2.0).unwrap();
        let c = ScalarField::constant(g, 0.5);
        assert_eq!(uniform_integrability(&ScalarField::zeros(g), &c, &spec), 0.0);
        let e = std::f64::consts::E;
        let c = ScalarField::constant(g, e.sqrt());
        let v = uniform_integrability(&ScalarField::constant(g, 1.0), &c, &spec);
        assert!((v - e).abs() < 1e-13);
    }

    #[test]
    fn small_c_gradient_cases() {
        let g = GridSpec::unit_square(16);
        let c = ScalarField::from_fn(g, |x, _| 1.0 + x);
        assert_eq!(small_c_gradient(&c, 0.5), 0.0);
        assert_eq!(small_c_gradient(&ScalarField::constant(g, 0.25), 0.5), 0.0);
    }

    #[test]
    fn small_c_gradient_matches_subdomain_quadrature() {
        let g = GridSpec::unit_square(128);
        let c = ScalarField::from_fn(g, |x, _| 0.1 + x);
        // int_0^0.5 dx / (0.1 + x)^2 over a unit-height strip.
        let exact = 1.0 / 0.1 - 1.0 / 0.6;
        let v = small_c_gradient(&c, 0.6);
        assert!(((v - exact) / exact).abs() < 0.05, "{v} vs {exact}");
    }

    #[test]
    fn velocity_dirichlet_is_minus_u_dot_laplacian() {
        let g = GridSpec::new(12, 9, 1.0, 0.8).unwrap();
        let ops = FluidOperators::new(g);
        let u = MacVelocity::from_stream_function(g, |x, y| (x * (1.0 - x) * y * (0.8 - y)).powi(2) * (3.0 * x + y).sin());
        let lap = vector_laplacian(&u, &ops);
        let sbp = -face_inner(u.faces(), &lap);
        assert!((velocity_dirichlet(&u) - sbp).abs() <= 1e-12 * sbp.abs());
    }

    #[test]
    fn conditional_constants_unit_square() {
        let g = GridSpec::unit_square(64);
        let spec = SensitivitySpec::power(2.0).unwrap();
        let p = conditional_parameters(&g, 1.0, 1.0, 1.0, &spec, 0.1).unwrap();
        assert!((p.c_p - 1.0 / (PI * PI)).abs() < 1e-15);
        assert!((p.k - 1.6211).abs() < 1e-4);
        assert!(p.a > 0.0 && p.a <= 1.0);
        assert!(p.eta0 > 0.0 && p.m > 0.0 && p.l >= 1.0);
        // g stays below the threshold on [0, A].
        let thr = 1.0 / (16.0 * p.c_p);
        for k in 0..=1000 {
            let s = p.a * k as f64 / 1000.0;
            assert!(p.k * s * s + s + 2.0 * s <= thr * (1.0 + 1e-12));
        }
    }

    #[test]
    fn linear_f_is_rejected_by_conditional_parameters() {
        let g = GridSpec::unit_square(16);
        let err = conditional_parameters(&g, 1.0, 1.0, 1.0, &SensitivitySpec::linear(), 0.0).unwrap_err();
        assert!(matches!(err, DiagnosticsError::FlatOriginRequired(_)));
        assert!(err.to_string().contains("f'(0) = 0 required"));
    }

    #[test]
    fn conditional_functional_cases() {
        let g = GridSpec::unit_square(16);
        let spec = SensitivitySpec::power(2.0).unwrap();
        let p = conditional_parameters(&g, 1.0, 1.0, 1.0, &spec, 0.0).unwrap();
        let rest = SimState {
            t: 0.0,
            n: ScalarField::constant(g, 1.0),
            c: ScalarField::constant(g, 1e-200),
            u: MacVelocity::zero(g),
        };
        assert!(conditional_functional(&rest, &p, 1.0, 1.0) < 1e-300);
        let full = SimState { c: ScalarField::constant(g, 1.0), ..rest.clone() };
        assert!((conditional_functional(&full, &p, 1.0, 1.0) - 0.5 * p.m).abs() < 1e-12 * p.m);
    }

    #[test]
    fn report_columns_roundtrip() {
        let mut r = FunctionalReport::default();
        r.t = 1.5;
        r.floored_cells = 3.0;
        r.eta0 = 0.25;
        assert_eq!(FunctionalReport::from_row(&r.to_row()), r);
        assert_eq!(FunctionalReport::COLUMNS[15], "cond_F");
    }
}
