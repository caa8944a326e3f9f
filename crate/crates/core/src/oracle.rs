//! Independent reference solutions.
//!
//! The quadratures here are written as plain nested loops over cell values
//! and deliberately share no stencil or summation code with
//! [`crate::diagnostics`] or [`crate::grid`]: agreement between the two is
//! the check.

use crate::diagnostics::{ConditionalParams, DiagnosticsContext, FunctionalReport};
use crate::driver::{run, DriverError, RunSummary, SimConfig};
use crate::grid::{GridSpec, ScalarField};
use crate::sensitivity::{SensitivityKind, SensitivitySpec};
use crate::state::SimState;

/// Step of the four-stage integrator used for general `f`.
pub const ODE_DT: f64 = 1e-6;

/// Oxygen of the spatially homogeneous problem `c' = -n_bar f(c)`.
pub fn homogeneous_ode(n_bar: f64, c0: f64, spec: &SensitivitySpec, t: f64) -> f64 {
    if n_bar == 0.0 || t == 0.0 {
        return c0;
    }
    match spec.kind() {
        SensitivityKind::Power(p) if *p == 2.0 => c0 / (1.0 + n_bar * c0 * t),
        SensitivityKind::Power(p) if *p == 1.0 => c0 * (-n_bar * t).exp(),
        SensitivityKind::Linear => c0 * (-n_bar * t).exp(),
        _ => {
            let rhs = |c: f64| -n_bar * spec.f(c.max(0.0));
            let steps = (t / ODE_DT).ceil() as usize;
            let h = t / steps as f64;
            let mut c = c0;
            for _ in 0..steps {
                let k1 = rhs(c);
                let k2 = rhs(c + 0.5 * h * k1);
                let k3 = rhs(c + 0.5 * h * k2);
                let k4 = rhs(c + h * k3);
                c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            c
        }
    }
}

/// Entries of [`FunctionalReport`] that depend on a single state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    MassN,
    SupC,
    EntropyN,
    NegLogMass,
    WMass,
    FisherN,
    DirichletW,
    Kinetic,
    DirichletU,
    CL2,
    DirichletC,
    LapWL2,
    QuasiEnergyDissipation,
    QuasiEnergyRhs,
    CondF,
    UniformInt,
    CkMargin,
    HeihoffRatio,
    FlooredCells,
}

impl Functional {
    pub const ALL: [Functional; 19] = [
        Functional::MassN,
        Functional::SupC,
        Functional::EntropyN,
        Functional::NegLogMass,
        Functional::WMass,
        Functional::FisherN,
        Functional::DirichletW,
        Functional::Kinetic,
        Functional::DirichletU,
        Functional::CL2,
        Functional::DirichletC,
        Functional::LapWL2,
        Functional::QuasiEnergyDissipation,
        Functional::QuasiEnergyRhs,
        Functional::CondF,
        Functional::UniformInt,
        Functional::CkMargin,
        Functional::HeihoffRatio,
        Functional::FlooredCells,
    ];

    /// The matching entry of a report from [`crate::diagnostics::evaluate_report`].
    pub fn of(self, r: &FunctionalReport) -> f64 {
        match self {
            Functional::MassN => r.mass_n,
            Functional::SupC => r.sup_c,
            Functional::EntropyN => r.entropy_n,
            Functional::NegLogMass => r.neg_log_mass,
            Functional::WMass => r.w_mass,
            Functional::FisherN => r.fisher_n,
            Functional::DirichletW => r.dirichlet_w,
            Functional::Kinetic => r.kinetic,
            Functional::DirichletU => r.dirichlet_u,
            Functional::CL2 => r.c_l2,
            Functional::DirichletC => r.dirichlet_c,
            Functional::LapWL2 => r.lap_w_l2,
            Functional::QuasiEnergyDissipation => r.quasi_energy_lhs_rate,
            Functional::QuasiEnergyRhs => r.quasi_energy_rhs,
            Functional::CondF => r.cond_f,
            Functional::UniformInt => r.uniform_int,
            Functional::CkMargin => r.ck_margin,
            Functional::HeihoffRatio => r.heihoff_ratio,
            Functional::FlooredCells => r.floored_cells,
        }
    }
}

const FLOOR: f64 = 1e-30;

struct Cells<'a> {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    v: &'a [f64],
}

impl<'a> Cells<'a> {
    fn new(f: &'a ScalarField) -> Self {
        let g: &GridSpec = f.grid();
        Cells {
            nx: g.nx,
            ny: g.ny,
            dx: g.lx / g.nx as f64,
            dy: g.ly / g.ny as f64,
            v: f.values(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[j * self.nx + i]
    }

    fn sum(&self, h: impl Fn(f64) -> f64) -> f64 {
        let mut s = 0.0;
        for j in 0..self.ny {
            for i in 0..self.nx {
                s += h(self.at(i, j));
            }
        }
        s * self.dx * self.dy
    }

    /// Sum over interior cell pairs of `h(left, right, step)`.
    fn pairs(&self, h: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let mut s = 0.0;
        for j in 0..self.ny {
            for i in 1..self.nx {
                s += h(self.at(i - 1, j), self.at(i, j), self.dx);
            }
        }
        for j in 1..self.ny {
            for i in 0..self.nx {
                s += h(self.at(i, j - 1), self.at(i, j), self.dy);
            }
        }
        s * self.dx * self.dy
    }
}

fn entropy(n: &Cells, n_bar: f64) -> f64 {
    n.sum(|v| if v <= 0.0 { 0.0 } else { v * (v.max(FLOOR).ln() - n_bar.ln()) })
}

fn fisher(n: &Cells) -> f64 {
    n.pairs(|a, b, h| {
        let d = (b - a) / h;
        d * d / (a.max(FLOOR) * b.max(FLOOR))
    })
}

fn dirichlet(q: &Cells) -> f64 {
    q.pairs(|a, b, h| ((b - a) / h).powi(2))
}

fn lap_l2(q: &Cells) -> f64 {
    let mut s = 0.0;
    for j in 0..q.ny {
        for i in 0..q.nx {
            let c = q.at(i, j);
            let mut l = 0.0;
            if i > 0 {
                l += (q.at(i - 1, j) - c) / (q.dx * q.dx);
            }
            if i + 1 < q.nx {
                l += (q.at(i + 1, j) - c) / (q.dx * q.dx);
            }
            if j > 0 {
                l += (q.at(i, j - 1) - c) / (q.dy * q.dy);
            }
            if j + 1 < q.ny {
                l += (q.at(i, j + 1) - c) / (q.dy * q.dy);
            }
            s += l * l;
        }
    }
    s * q.dx * q.dy
}

/// Kinetic energy and `int |grad u|^2` of the staggered velocity, from the
/// raw face arrays.
fn velocity_terms(state: &SimState) -> (f64, f64) {
    let g = state.grid();
    let (nx, ny) = (g.nx, g.ny);
    let dx = g.lx / nx as f64;
    let dy = g.ly / ny as f64;
    let f = state.u.faces();
    let ux = |i: usize, j: usize| f.x[j * (nx + 1) + i];
    let uy = |i: usize, j: usize| f.y[j * nx + i];
    let mut kin = 0.0;
    for j in 0..ny {
        for i in 0..=nx {
            let w = if i == 0 || i == nx { 0.5 } else { 1.0 };
            kin += w * ux(i, j) * ux(i, j);
        }
    }
    for j in 0..=ny {
        for i in 0..nx {
            let w = if j == 0 || j == ny { 0.5 } else { 1.0 };
            kin += w * uy(i, j) * uy(i, j);
        }
    }
    let mut dir = 0.0;
    for j in 0..ny {
        for i in 0..nx {
            dir += ((ux(i + 1, j) - ux(i, j)) / dx).powi(2);
            dir += ((uy(i, j + 1) - uy(i, j)) / dy).powi(2);
        }
    }
    // Tangential differences; the wall value is mirrored to `-u`, which is
    // a half-cell difference worth half a cell.
    for i in 1..nx {
        dir += 0.5 * (2.0 * ux(i, 0) / dy).powi(2) + 0.5 * (2.0 * ux(i, ny - 1) / dy).powi(2);
        for j in 1..ny {
            dir += ((ux(i, j) - ux(i, j - 1)) / dy).powi(2);
        }
    }
    for j in 1..ny {
        dir += 0.5 * (2.0 * uy(0, j) / dx).powi(2) + 0.5 * (2.0 * uy(nx - 1, j) / dx).powi(2);
        for i in 1..nx {
            dir += ((uy(i, j) - uy(i - 1, j)) / dx).powi(2);
        }
    }
    (0.5 * kin * dx * dy, dir * dx * dy)
}

fn conditional(state: &SimState, p: &ConditionalParams, n_bar0: f64, c0_inf: f64) -> f64 {
    let n = Cells::new(&state.n);
    let w = state.c.map(|v| -(v / c0_inf).ln());
    let wc = Cells::new(&w);
    let c = Cells::new(&state.c);
    let (kin, _) = velocity_terms(state);
    entropy(&n, n_bar0) + 0.5 * p.k * dirichlet(&wc) + kin / p.l + 0.5 * p.m * c.sum(|v| v * v)
}

/// Naive-loop evaluation of one report entry.
pub fn brute_force_functional(state: &SimState, which: Functional, ctx: &DiagnosticsContext) -> f64 {
    let n = Cells::new(&state.n);
    let c = Cells::new(&state.c);
    let w_field = state.c.map(|v| -(v / ctx.c0_inf).ln());
    let w = Cells::new(&w_field);
    let chi2 = ctx.chi * ctx.chi;
    let mass = || n.sum(|v| v);
    match which {
        Functional::MassN => mass(),
        Functional::SupC => c.v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        Functional::EntropyN => entropy(&n, ctx.n_bar0),
        Functional::NegLogMass => -n.sum(|v| v.max(FLOOR).ln()),
        Functional::WMass => w.sum(|v| v),
        Functional::FisherN => fisher(&n),
        Functional::DirichletW => dirichlet(&w),
        Functional::Kinetic => velocity_terms(state).0,
        Functional::DirichletU => velocity_terms(state).1,
        Functional::CL2 => c.sum(|v| v * v),
        Functional::DirichletC => dirichlet(&c),
        Functional::LapWL2 => lap_l2(&w),
        Functional::QuasiEnergyDissipation => 0.5 * fisher(&n) + 0.5 * chi2 * dirichlet(&w),
        Functional::QuasiEnergyRhs => {
            let mut s = 0.0;
            for (nv, cv) in n.v.iter().zip(c.v) {
                let r = if *cv == 0.0 { 0.0 } else { ctx.spec.f(*cv) / cv };
                s += nv * r;
            }
            chi2 * s * n.dx * n.dy
        }
        Functional::CondF => match &ctx.conditional {
            Some(p) => conditional(state, p, ctx.n_bar0, ctx.c0_inf),
            None => 0.0,
        },
        Functional::UniformInt => {
            let mut s = 0.0;
            for (nv, cv) in n.v.iter().zip(c.v) {
                let a = nv * ctx.spec.f(*cv);
                if a > 0.0 {
                    s += a * a.ln().abs();
                }
            }
            s * n.dx * n.dy
        }
        Functional::CkMargin => {
            let m = mass();
            let area = n.dx * n.dy * (n.nx * n.ny) as f64;
            let mean = m / area;
            let l1 = n.sum(|v| (v - mean).abs());
            2.0 * m * entropy(&n, mean) - l1 * l1
        }
        Functional::HeihoffRatio => {
            let m = mass();
            let area = n.dx * n.dy * (n.nx * n.ny) as f64;
            let ent = entropy(&n, m / area);
            let fi = fisher(&n);
            if fi == 0.0 || !(ent > 0.0) {
                0.0
            } else {
                m * fi / ent
            }
        }
        Functional::FlooredCells => n.v.iter().filter(|&&v| v < FLOOR).count() as f64,
    }
}

/// Average `factor x factor` blocks of a fine field onto the coarse grid.
pub fn restrict(fine: &ScalarField, factor: usize) -> ScalarField {
    let fg = fine.grid();
    let (nx, ny) = (fg.nx / factor, fg.ny / factor);
    let coarse = GridSpec::new(nx, ny, fg.lx, fg.ly).expect("coarse grid of a refined grid");
    let mut vals = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let mut s = 0.0;
            for b in 0..factor {
                for a in 0..factor {
                    s += fine.values()[(j * factor + b) * fg.nx + i * factor + a];
                }
            }
            vals[j * nx + i] = s / (factor * factor) as f64;
        }
    }
    ScalarField::from_values(coarse, vals).expect("shape matches")
}

/// The configuration on a grid refined by `factor` (2 or 4), with `dt_max`
/// scaled by the same factor so that time and space errors shrink together.
pub fn fine_grid_reference(cfg: &SimConfig, factor: usize) -> Result<RunSummary, DriverError> {
    if factor != 2 && factor != 4 {
        return Err(DriverError::Config(format!("refinement factor must be 2 or 4, got {factor}")));
    }
    let mut fine = cfg.refined(factor);
    fine.dt_max = cfg.dt_max / factor as f64;
    run(&fine)
}

/// `int |n_coarse - R n_fine|` on the coarse grid, where `R` is block
/// averaging.
pub fn restricted_l1(coarse: &ScalarField, fine: &ScalarField) -> f64 {
    let factor = fine.grid().nx / coarse.grid().nx;
    let r = restrict(fine, factor);
    let g = coarse.grid();
    let mut s = 0.0;
    for (a, b) in coarse.values().iter().zip(r.values()) {
        s += (a - b).abs();
    }
    s * (g.lx / g.nx as f64) * (g.ly / g.ny as f64)
}
