//! Coupled time stepping and whole-run orchestration.
//!
//! One step advances the fluid on the old density, then `n` and `c` with the
//! old velocity, the old drift and (for the sink) the old density. A step
//! whose density turns negative or whose oxygen turns nonpositive is retried
//! at half the time step, at most [`MAX_HALVINGS`] times.

use crate::diagnostics::{
    conditional_parameters, csiszar_check, evaluate_report, fluid_energy_balance, quasi_energy_check,
    stabilization_metrics, ConditionalParams, DiagnosticsContext, DiagnosticsError, FunctionalReport,
    StabilizationMetrics,
};
use crate::fluid::{advance_u, FluidError, FluidMode, FluidOperators, FluidParams, Viscous};
use crate::grid::{l1_distance, pairwise_sum, GridSpec, MacVelocity, ScalarField};
use crate::sensitivity::SensitivitySpec;
use crate::state::SimState;
use crate::taxis::{advance_c, advance_n, taxis_drift, Diffusion, SpeciesParams, TaxisError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::Instant;
use thiserror::Error;

pub const MAX_HALVINGS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Taxis(#[from] TaxisError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("maximal face speed is not finite")]
    NonFiniteSpeed,
    #[error("step rejected {rejections} times in a row at t = {t:e} (last dt = {dt:e}): {reason}")]
    Aborted {
        t: f64,
        dt: f64,
        rejections: usize,
        reason: String,
    },
}

/// Initial cell density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensityInit {
    Constant { mean: f64 },
    /// `mean + amp cos(k pi x/lx) cos(k pi y/ly)`.
    Cosine { mean: f64, amp: f64, modes: u32 },
    /// `mean (1 + amp (2U - 1))` with `U` uniform per cell, drawn from the
    /// run seed.
    Random { mean: f64, amp: f64 },
}

/// Initial oxygen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OxygenInit {
    Constant { value: f64 },
    /// `base + amp exp(-|x - center|^2 / width^2)`.
    Bump { base: f64, amp: f64, width: f64 },
}

/// Initial velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VelocityInit {
    Zero,
    /// Curl of `psi = A sin^2(pi x/lx) sin^2(pi y/ly)`, scaled so that the
    /// largest horizontal velocity is `amp`.
    Vortex { amp: f64 },
    /// Four counter-rotating Taylor-Green cells under a wall envelope,
    /// `psi = A s(x/lx) s(y/ly)` with `s(z) = sin(pi z) sin(2 pi z)`, so that
    /// `u` vanishes on the walls. Largest horizontal velocity `amp`.
    TaylorGreen { amp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub n: DensityInit,
    pub c: OxygenInit,
    pub u: VelocityInit,
}

impl InitSpec {
    /// Upper bound of the initial oxygen, used as `||c_0||_inf`.
    pub fn c_sup(&self) -> f64 {
        match self.c {
            OxygenInit::Constant { value } => value,
            OxygenInit::Bump { base, amp, .. } => base + amp.max(0.0),
        }
    }

    pub fn c_inf(&self) -> f64 {
        match self.c {
            OxygenInit::Constant { value } => value,
            OxygenInit::Bump { base, amp, .. } => base + amp.min(0.0),
        }
    }
}

/// Time integration of the diffusion and viscosity terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeScheme {
    /// Forward Euler; the time step obeys the parabolic bound.
    Explicit,
    /// Backward Euler with linear solves to the given relative residual.
    Implicit { tol: f64 },
}

/// Fluid mode and the linear potential `phi = phi_x x + phi_y y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidConfig {
    pub mode: FluidMode,
    pub phi_x: f64,
    pub phi_y: f64,
    pub poisson_tol: f64,
}

impl FluidConfig {
    pub fn params(&self, grid: GridSpec) -> FluidParams {
        let (ax, ay) = (self.phi_x, self.phi_y);
        FluidParams {
            mode: self.mode,
            phi: ScalarField::from_fn(grid, |x, y| ax * x + ay * y),
            poisson_tol: self.poisson_tol,
        }
    }

    /// `||grad phi||_inf`.
    pub fn phi_grad_sup(&self) -> f64 {
        self.phi_x.hypot(self.phi_y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub grid: GridSpec,
    pub species: SpeciesParams,
    pub sensitivity: SensitivitySpec,
    pub fluid: FluidConfig,
    pub init: InitSpec,
    pub t_end: f64,
    pub dt_max: f64,
    pub cfl_safety: f64,
    pub report_every: usize,
    pub seed: u64,
    pub scheme: TimeScheme,
    /// Evaluate the conditional energy functional (requires `f'(0) = 0`).
    pub conditional: bool,
    /// Stop this long after stabilization is first detected.
    pub grace: Option<f64>,
}

impl SimConfig {
    /// Reference experiment: unit square at 64x64, `chi = 1`, `f(c) = c^2`,
    /// `n_0 = 1 + 0.5 cos(2 pi x) cos(2 pi y)`, `c_0 = 1`, a vortex of
    /// amplitude 0.1, `phi = 0.1 y`, `eps = 1e-3`, `t_end = 50`, implicit
    /// diffusion and viscosity with `dt <= 5e-4`.
    pub fn reference() -> Self {
        SimConfig {
            grid: GridSpec::unit_square(64),
            species: SpeciesParams {
                chi: 1.0,
                eps: 1e-3,
                c0_inf: 1.0,
                delta: 1.0,
            },
            sensitivity: SensitivitySpec::power(2.0).expect("valid exponent"),
            fluid: FluidConfig {
                mode: FluidMode::NavierStokes,
                phi_x: 0.0,
                phi_y: 0.1,
                poisson_tol: 1e-10,
            },
            init: InitSpec {
                n: DensityInit::Cosine {
                    mean: 1.0,
                    amp: 0.5,
                    modes: 2,
                },
                c: OxygenInit::Constant { value: 1.0 },
                u: VelocityInit::Vortex { amp: 0.1 },
            },
            t_end: 50.0,
            dt_max: 5e-4,
            cfl_safety: 0.5,
            report_every: 100,
            seed: 0,
            scheme: TimeScheme::Implicit { tol: 1e-12 },
            conditional: false,
            grace: None,
        }
    }

    pub fn validate(&self) -> Result<(), DriverError> {
        let bad = |m: String| Err(DriverError::Config(m));
        self.species.validate()?;
        if self.init.c_inf() < self.species.delta {
            return bad(format!(
                "c_0 >= delta for some delta > 0 violated: min c_0 = {} < delta = {}",
                self.init.c_inf(),
                self.species.delta
            ));
        }
        if (self.init.c_sup() - self.species.c0_inf).abs() > 1e-12 * self.species.c0_inf {
            return bad(format!(
                "c0_inf = {} does not match sup c_0 = {}",
                self.species.c0_inf,
                self.init.c_sup()
            ));
        }
        if self.species.c0_inf > self.sensitivity.c_max() {
            return bad(format!(
                "c0_inf = {} exceeds the range of f ({})",
                self.species.c0_inf,
                self.sensitivity.c_max()
            ));
        }
        if self.conditional && !self.sensitivity.has_flat_origin() {
            return Err(DiagnosticsError::FlatOriginRequired(self.sensitivity.label()).into());
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be finite and >= 0, got {}", self.t_end));
        }
        if !(self.dt_max > 0.0) {
            return bad(format!("dt_max must be positive, got {}", self.dt_max));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return bad(format!("cfl_safety must lie in (0, 1), got {}", self.cfl_safety));
        }
        if self.report_every == 0 {
            return bad("report_every must be >= 1".into());
        }
        if let TimeScheme::Implicit { tol } = self.scheme {
            if !(tol > 0.0 && tol < 1.0) {
                return bad(format!("solver tolerance must lie in (0, 1), got {tol}"));
            }
        }
        match self.init.n {
            DensityInit::Constant { mean } if !(mean > 0.0) => {
                return bad(format!("initial density must be positive, got mean {mean}"))
            }
            DensityInit::Cosine { mean, amp, .. } if !(mean > 0.0 && amp.abs() < mean) => {
                return bad(format!("cosine density needs |amp| < mean, got {amp} and {mean}"))
            }
            DensityInit::Random { mean, amp } if !(mean > 0.0 && (0.0..1.0).contains(&amp)) => {
                return bad(format!("random density needs mean > 0 and amp in [0, 1), got {mean}, {amp}"))
            }
            _ => {}
        }
        if let OxygenInit::Bump { width, .. } = self.init.c {
            if !(width > 0.0) {
                return bad(format!("bump width must be positive, got {width}"));
            }
        }
        self.fluid.params(self.grid).validate()?;
        Ok(())
    }

    /// Same experiment on a grid refined by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        let mut out = self.clone();
        out.grid = self.grid.refined(factor);
        out
    }
}

/// Initial state of a configuration.
pub fn initial_state(cfg: &SimConfig) -> Result<SimState, DriverError> {
    cfg.validate()?;
    let g = cfg.grid;
    let (lx, ly) = (g.lx, g.ly);
    let n = match cfg.init.n {
        DensityInit::Constant { mean } => ScalarField::constant(g, mean),
        DensityInit::Cosine { mean, amp, modes } => {
            let k = modes as f64 * PI;
            ScalarField::from_fn(g, |x, y| mean + amp * (k * x / lx).cos() * (k * y / ly).cos())
        }
        DensityInit::Random { mean, amp } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let vals = (0..g.cells())
                .map(|_| mean * (1.0 + amp * (2.0 * rng.gen::<f64>() - 1.0)))
                .collect();
            ScalarField::from_values(g, vals).map_err(TaxisError::from)?
        }
    };
    let c = match cfg.init.c {
        OxygenInit::Constant { value } => ScalarField::constant(g, value),
        OxygenInit::Bump { base, amp, width } => ScalarField::from_fn(g, |x, y| {
            let r2 = (x - 0.5 * lx).powi(2) + (y - 0.5 * ly).powi(2);
            base + amp * (-r2 / (width * width)).exp()
        }),
    };
    let u = match cfg.init.u {
        VelocityInit::Zero => MacVelocity::zero(g),
        VelocityInit::Vortex { amp } => {
            let a = amp * ly / PI;
            MacVelocity::from_stream_function(g, |x, y| a * (PI * x / lx).sin().powi(2) * (PI * y / ly).sin().powi(2))
        }
        VelocityInit::TaylorGreen { amp } => {
            let a = amp * ly * 3.0 * 3f64.sqrt() / (8.0 * PI);
            let s = |z: f64| (PI * z).sin() * (2.0 * PI * z).sin();
            MacVelocity::from_stream_function(g, |x, y| a * s(x / lx) * s(y / ly))
        }
    };
    let u = if cfg.fluid.mode == FluidMode::None { MacVelocity::zero(g) } else { u };
    Ok(SimState { t: 0.0, n, c, u })
}

/// Pre-built operators and fixed inputs of one simulation.
pub struct Simulation {
    cfg: SimConfig,
    ops: FluidOperators,
    fluid: FluidParams,
    ctx: DiagnosticsContext,
    state: SimState,
}

enum StepFailure {
    Retry(String),
    Fatal(DriverError),
}

impl Simulation {
    pub fn new(cfg: &SimConfig) -> Result<Self, DriverError> {
        let state = initial_state(cfg)?;
        let g = cfg.grid;
        let conditional = if cfg.conditional {
            Some(conditional_parameters(
                &g,
                cfg.species.chi,
                crate::grid::integrate(&state.n),
                cfg.species.c0_inf,
                &cfg.sensitivity,
                cfg.fluid.phi_grad_sup(),
            )?)
        } else {
            None
        };
        let ctx = DiagnosticsContext {
            chi: cfg.species.chi,
            c0_inf: cfg.species.c0_inf,
            n_bar0: state.n.mean(),
            spec: cfg.sensitivity.clone(),
            conditional,
        };
        Ok(Self {
            ops: FluidOperators::new(g),
            fluid: cfg.fluid.params(g),
            cfg: cfg.clone(),
            ctx,
            state,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn context(&self) -> &DiagnosticsContext {
        &self.ctx
    }

    pub fn phi(&self) -> &ScalarField {
        &self.fluid.phi
    }

    pub fn report(&self) -> FunctionalReport {
        evaluate_report(&self.state, &self.ctx)
    }

    pub fn cfl_dt(&self) -> Result<f64, DriverError> {
        cfl_dt(&self.state, &self.cfg)
    }

    fn try_step(&self, dt: f64) -> Result<SimState, StepFailure> {
        let s = &self.state;
        let diffusion = match self.cfg.scheme {
            TimeScheme::Explicit => Diffusion::Explicit,
            TimeScheme::Implicit { tol } => Diffusion::Implicit {
                op: &self.ops.pressure,
                tol,
            },
        };
        let viscous = match self.cfg.scheme {
            TimeScheme::Explicit => Viscous::Explicit,
            TimeScheme::Implicit { tol } => Viscous::Implicit { tol },
        };
        let fatal = |e: DriverError| StepFailure::Fatal(e);
        let (u, _) = advance_u(&s.u, &s.n, &self.fluid, dt, &self.ops, viscous).map_err(|e| fatal(e.into()))?;
        let drift = taxis_drift(&s.c, &s.n, &self.cfg.species).map_err(|e| fatal(e.into()))?;
        let retry_or_fatal = |e: TaxisError| match e {
            TaxisError::NegativeDensity { .. } | TaxisError::NonPositiveOxygen { .. } => StepFailure::Retry(e.to_string()),
            other => StepFailure::Fatal(other.into()),
        };
        let n = advance_n(&s.n, &drift, &s.u, dt, diffusion).map_err(retry_or_fatal)?;
        let c = advance_c(&s.c, &s.n, &s.u, &self.cfg.sensitivity, dt, diffusion).map_err(retry_or_fatal)?;
        Ok(SimState { t: s.t + dt, n, c, u })
    }

    /// Advance by `dt`, halving on positivity failures. Returns the step
    /// actually taken and the number of rejections.
    pub fn step(&mut self, dt: f64) -> Result<(f64, usize), DriverError> {
        let (next, dt, rejected) = self.attempt(dt)?;
        self.state = next;
        Ok((dt, rejected))
    }

    fn attempt(&self, dt: f64) -> Result<(SimState, f64, usize), DriverError> {
        let mut dt = dt;
        let mut reason = String::new();
        for rejected in 0..=MAX_HALVINGS {
            match self.try_step(dt) {
                Ok(next) => return Ok((next, dt, rejected)),
                Err(StepFailure::Fatal(e)) => return Err(e),
                Err(StepFailure::Retry(r)) => {
                    log::debug!("step rejected at t = {:e}, dt = {:e}: {r}", self.state.t, dt);
                    reason = r;
                    if rejected < MAX_HALVINGS {
                        dt *= 0.5;
                    }
                }
            }
        }
        Err(DriverError::Aborted {
            t: self.state.t,
            dt,
            rejections: MAX_HALVINGS + 1,
            reason,
        })
    }

    fn set_state(&mut self, state: SimState) {
        self.state = state;
    }
}

/// Largest admissible time step: `cfl_safety * min(dx^2/8, h/max speed)`,
/// capped by `dt_max`. The parabolic bound is dropped for implicit schemes.
pub fn cfl_dt(state: &SimState, cfg: &SimConfig) -> Result<f64, DriverError> {
    let g = cfg.grid;
    let h = g.dx().min(g.dy());
    let drift = taxis_drift(&state.c, &state.n, &cfg.species)?;
    let speed = drift.zip_map(state.u.faces(), |a, b| a + b).max_abs().max(state.u.max_abs());
    if !speed.is_finite() {
        return Err(DriverError::NonFiniteSpeed);
    }
    let mut limit = f64::INFINITY;
    if cfg.scheme == TimeScheme::Explicit {
        limit = h * h / 8.0;
    }
    if speed > 0.0 {
        limit = limit.min(h / speed);
    }
    Ok((cfg.cfl_safety * limit).min(cfg.dt_max))
}

/// Worst values of the per-step invariants over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepChecks {
    pub mass_initial: f64,
    /// `max |int n(t) - int n_0| / int n_0`.
    pub max_mass_drift: f64,
    pub max_sup_c: f64,
    pub min_c: f64,
    pub min_n: f64,
    /// Smallest `qe_margin + qe_slack`; negative means a violated step.
    pub min_qe_excess: f64,
    pub qe_violations: usize,
    /// Smallest `ck_margin / scale`.
    pub min_ck_ratio: f64,
    /// Largest `|residual| / max_term` of the fluid energy balance, over
    /// steps whose largest term is at least [`ENERGY_FLOOR`] times the
    /// running peak.
    pub max_energy_residual: f64,
    pub energy_steps: usize,
    /// Steps below the energy floor, where the balance is round-off.
    pub energy_floor_steps: usize,
    pub energy_peak: f64,
    /// Sum of accepted time steps.
    pub dt_sum: f64,
    pub max_floored_cells: f64,
    pub all_finite: bool,
}

/// Fluid energy terms this far below their running peak are round-off: the
/// velocity is then sustained by rounding noise in the density through the
/// buoyancy, and the relative residual carries no information.
pub const ENERGY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub reports: Vec<FunctionalReport>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub wall_time: f64,
    pub checksum: String,
    pub stabilization_time: Option<f64>,
    /// First time with `cond_F < 0.9 eta0`.
    pub t0: Option<f64>,
    /// `max_{t >= t0} cond_F(t) - cond_F(t0)`.
    pub cond_f_excess: f64,
    pub conditional: Option<ConditionalParams>,
    pub initial_metrics: StabilizationMetrics,
    pub final_metrics: StabilizationMetrics,
    pub checks: StepChecks,
    pub final_state: SimState,
    pub aborted: Option<String>,
}

/// Relative thresholds of stabilization: the three `L^1` distances drop to
/// 1% of their initial values and the sup distance of `n` to 5%.
fn stabilized(m: &StabilizationMetrics, m0: &StabilizationMetrics) -> bool {
    const TINY: f64 = 1e-12;
    m.dist_n_l1 <= 0.01 * m0.dist_n_l1 + TINY
        && m.c_l1 <= 0.01 * m0.c_l1 + TINY
        && m.u_l1 <= 0.01 * m0.u_l1 + TINY
        && m.dist_n_c0 <= 0.05 * m0.dist_n_c0 + TINY
}

/// Per-run bookkeeping shared by [`run`] and [`epsilon_family`].
struct Tracker {
    reports: Vec<FunctionalReport>,
    last: FunctionalReport,
    accepted: usize,
    rejected: usize,
    stabilization_time: Option<f64>,
    t0: Option<(f64, f64)>,
    cond_f_excess: f64,
    initial_metrics: StabilizationMetrics,
    last_metrics: StabilizationMetrics,
    checks: StepChecks,
}

impl Tracker {
    fn new(sim: &Simulation) -> Self {
        let r = sim.report();
        let m0 = stabilization_metrics(sim.state(), sim.context().n_bar0);
        let mut t = Tracker {
            reports: vec![r],
            last: r,
            accepted: 0,
            rejected: 0,
            stabilization_time: None,
            t0: None,
            cond_f_excess: 0.0,
            initial_metrics: m0,
            last_metrics: m0,
            checks: StepChecks {
                mass_initial: r.mass_n,
                max_mass_drift: 0.0,
                max_sup_c: r.sup_c,
                min_c: sim.state().c.min(),
                min_n: sim.state().n.min(),
                min_qe_excess: f64::INFINITY,
                qe_violations: 0,
                min_ck_ratio: f64::INFINITY,
                max_energy_residual: 0.0,
                energy_steps: 0,
                energy_floor_steps: 0,
                energy_peak: 0.0,
                dt_sum: 0.0,
                max_floored_cells: r.floored_cells,
                all_finite: r.all_finite(),
            },
        };
        t.observe_state(sim.state(), &r);
        t
    }

    fn observe_state(&mut self, state: &SimState, r: &FunctionalReport) {
        let ck = csiszar_check(&state.n).expect("density stays positive");
        let ratio = if ck.scale > 0.0 { ck.margin / ck.scale } else { 0.0 };
        self.checks.min_ck_ratio = self.checks.min_ck_ratio.min(ratio);
        if r.eta0 > 0.0 {
            match self.t0 {
                None if r.cond_f < 0.9 * r.eta0 => self.t0 = Some((r.t, r.cond_f)),
                Some((_, f0)) => self.cond_f_excess = self.cond_f_excess.max(r.cond_f - f0),
                None => {}
            }
        }
    }

    fn accept(&mut self, sim: &Simulation, prev: &SimState, dt: f64, rejected: usize) {
        let state = sim.state();
        let ctx = sim.context();
        let mut r = evaluate_report(state, ctx);
        let g = state.grid();
        let qe = quasi_energy_check(&self.last, &r, dt, ctx.chi, g.dx() * g.dy());
        r.quasi_energy_lhs_rate = qe.lhs_rate;
        r.step_dt = dt;
        r.qe_margin = qe.margin;
        r.qe_slack = qe.slack;
        self.accepted += 1;
        self.rejected += rejected;
        let c = &mut self.checks;
        c.dt_sum += dt;
        c.max_mass_drift = c.max_mass_drift.max((r.mass_n - c.mass_initial).abs() / c.mass_initial);
        c.max_sup_c = c.max_sup_c.max(r.sup_c);
        c.min_c = c.min_c.min(state.c.min());
        c.min_n = c.min_n.min(state.n.min());
        let excess = qe.margin + qe.slack;
        c.min_qe_excess = c.min_qe_excess.min(excess);
        if excess < 0.0 {
            c.qe_violations += 1;
        }
        c.max_floored_cells = c.max_floored_cells.max(r.floored_cells);
        c.all_finite &= r.all_finite();
        if sim.config().fluid.mode != FluidMode::None {
            let eb = fluid_energy_balance(prev, state, sim.phi(), dt);
            c.energy_peak = c.energy_peak.max(eb.max_term);
            if eb.max_term > ENERGY_FLOOR * c.energy_peak {
                c.max_energy_residual = c.max_energy_residual.max(eb.residual.abs() / eb.max_term);
                c.energy_steps += 1;
            } else {
                c.energy_floor_steps += 1;
            }
        }
        self.observe_state(state, &r);
        let m = stabilization_metrics(state, ctx.n_bar0);
        if self.stabilization_time.is_none() && stabilized(&m, &self.initial_metrics) {
            self.stabilization_time = Some(state.t);
        }
        self.last_metrics = m;
        if self.accepted % sim.config().report_every == 0 {
            self.reports.push(r);
        }
        self.last = r;
    }

    fn finish(self, sim: &Simulation, started: Instant, aborted: Option<String>) -> RunSummary {
        RunSummary {
            reports: self.reports,
            accepted_steps: self.accepted,
            rejected_steps: self.rejected,
            wall_time: started.elapsed().as_secs_f64(),
            checksum: sim.state().checksum(),
            stabilization_time: self.stabilization_time,
            t0: self.t0.map(|(t, _)| t),
            cond_f_excess: self.cond_f_excess,
            conditional: sim.context().conditional,
            initial_metrics: self.initial_metrics,
            final_metrics: self.last_metrics,
            checks: self.checks,
            final_state: sim.state().clone(),
            aborted,
        }
    }
}

/// Remaining time, with a relative tolerance that absorbs round-off in the
/// accumulated time.
fn remaining(t: f64, t_end: f64) -> f64 {
    let r = t_end - t;
    if r <= 1e-12 * t_end.max(1.0) {
        0.0
    } else {
        r
    }
}

/// Run a configuration to `t_end`, or to stabilization plus the grace
/// period. A run that aborts returns the partial summary with `aborted` set.
pub fn run(cfg: &SimConfig) -> Result<RunSummary, DriverError> {
    let started = Instant::now();
    let mut sim = Simulation::new(cfg)?;
    let mut tracker = Tracker::new(&sim);
    loop {
        let left = remaining(sim.state().t, cfg.t_end);
        if left == 0.0 {
            break;
        }
        if let (Some(ts), Some(grace)) = (tracker.stabilization_time, cfg.grace) {
            if sim.state().t >= ts + grace {
                break;
            }
        }
        let dt = match sim.cfl_dt() {
            Ok(dt) => dt.min(left),
            Err(e) => return Ok(tracker.finish(&sim, started, Some(e.to_string()))),
        };
        let prev = sim.state().clone();
        match sim.attempt(dt) {
            Ok((next, dt, rejected)) => {
                sim.set_state(next);
                tracker.accept(&sim, &prev, dt, rejected);
            }
            Err(e) => {
                log::error!("run aborted: {e}");
                return Ok(tracker.finish(&sim, started, Some(e.to_string())));
            }
        }
    }
    Ok(tracker.finish(&sim, started, None))
}

/// Pairwise distances of consecutive members of an epsilon family.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonRow {
    pub eps_a: f64,
    pub eps_b: f64,
    /// `int_0^T ||n_a - n_b||_1 dt`, trapezoidal over report times.
    pub dist_n: f64,
    pub dist_c: f64,
    pub dist_u: f64,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonTable {
    pub eps: Vec<f64>,
    pub rows: Vec<EpsilonRow>,
    /// `mass_n` at every report time, one trace per member.
    pub mass_traces: Vec<Vec<f64>>,
    pub summaries: Vec<RunSummary>,
}

fn trapezoid(t: &[f64], v: &[f64]) -> f64 {
    let parts: Vec<f64> = (1..t.len()).map(|k| 0.5 * (t[k] - t[k - 1]) * (v[k] + v[k - 1])).collect();
    pairwise_sum(&parts)
}

fn u_distance(a: &MacVelocity, b: &MacVelocity) -> f64 {
    let diff = a.faces().zip_map(b.faces(), |x, y| x - y);
    crate::fluid::velocity_l1(&MacVelocity::from_faces(diff).expect("difference of wall-compatible fields"))
}

/// Run the configuration for each `eps` in lockstep: every member takes the
/// same time step (the smallest admissible one), so all members are compared
/// at identical times.
pub fn epsilon_family(cfg: &SimConfig, eps_list: &[f64]) -> Result<EpsilonTable, DriverError> {
    if eps_list.is_empty() {
        return Err(DriverError::Config("empty eps list".into()));
    }
    let all_equal = eps_list.iter().all(|&e| e == eps_list[0]);
    if !all_equal && eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(DriverError::Config(format!("eps list must be strictly decreasing, got {eps_list:?}")));
    }
    if eps_list.iter().any(|&e| !(e >= 0.0)) {
        return Err(DriverError::Config("eps must be >= 0".into()));
    }
    let started = Instant::now();
    let mut sims = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut c = cfg.clone();
        c.species.eps = eps;
        sims.push(Simulation::new(&c)?);
    }
    let mut trackers: Vec<Tracker> = sims.iter().map(Tracker::new).collect();
    let mut failed: Vec<Option<String>> = vec![None; sims.len()];
    // Spatial distances at every report, per consecutive pair.
    let mut times = vec![0.0];
    let pair_dist = |sims: &[Simulation]| -> Vec<[f64; 3]> {
        sims.windows(2)
            .map(|w| {
                let (a, b) = (w[0].state(), w[1].state());
                [l1_distance(&a.n, &b.n), l1_distance(&a.c, &b.c), u_distance(&a.u, &b.u)]
            })
            .collect()
    };
    let mut dists = vec![pair_dist(&sims)];
    let mut steps = 0usize;
    'outer: loop {
        let left = remaining(sims[0].state().t, cfg.t_end);
        if left == 0.0 {
            break;
        }
        let mut dt = left;
        for (k, s) in sims.iter().enumerate() {
            match s.cfl_dt() {
                Ok(d) => dt = dt.min(d),
                Err(e) => {
                    failed[k] = Some(e.to_string());
                    break 'outer;
                }
            }
        }
        let mut rejected = 0;
        let nexts = loop {
            let attempts: Vec<Result<SimState, StepFailure>> = sims.iter().map(|s| s.try_step(dt)).collect();
            if let Some(k) = attempts.iter().position(|a| matches!(a, Err(StepFailure::Fatal(_)))) {
                if let Err(StepFailure::Fatal(e)) = &attempts[k] {
                    failed[k] = Some(e.to_string());
                }
                break 'outer;
            }
            match attempts.iter().position(|a| a.is_err()) {
                None => break attempts.into_iter().map(|a| a.ok().expect("checked")).collect::<Vec<_>>(),
                Some(k) => {
                    rejected += 1;
                    if rejected > MAX_HALVINGS {
                        if let Err(StepFailure::Retry(r)) = &attempts[k] {
                            failed[k] = Some(r.clone());
                        }
                        break 'outer;
                    }
                    dt *= 0.5;
                }
            }
        };
        for ((sim, tr), next) in sims.iter_mut().zip(trackers.iter_mut()).zip(nexts) {
            let prev = sim.state().clone();
            sim.set_state(next);
            tr.accept(sim, &prev, dt, rejected);
        }
        steps += 1;
        if steps % cfg.report_every == 0 {
            times.push(sims[0].state().t);
            dists.push(pair_dist(&sims));
        }
    }
    let summaries: Vec<RunSummary> = sims
        .iter()
        .zip(trackers)
        .zip(&failed)
        .map(|((s, t), f)| t.finish(s, started, f.clone()))
        .collect();
    let mass_traces = summaries.iter().map(|s| s.reports.iter().map(|r| r.mass_n).collect()).collect();
    let any_failed = failed.iter().flatten().next().cloned();
    let rows = (0..eps_list.len().saturating_sub(1))
        .map(|k| {
            let col = |m: usize| -> Vec<f64> { dists.iter().map(|d| d[k][m]).collect() };
            let row_failed = failed[k].clone().or_else(|| failed[k + 1].clone()).or_else(|| any_failed.clone());
            EpsilonRow {
                eps_a: eps_list[k],
                eps_b: eps_list[k + 1],
                dist_n: trapezoid(&times, &col(0)),
                dist_c: trapezoid(&times, &col(1)),
                dist_u: trapezoid(&times, &col(2)),
                failed: row_failed,
            }
        })
        .collect();
    Ok(EpsilonTable {
        eps: eps_list.to_vec(),
        rows,
        mass_traces,
        summaries,
    })
}

/// Outcome of the eventual-smallness search.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallnessOutcome {
    /// First time with `cond_F < 0.9 eta0`.
    pub t0: Option<f64>,
    pub eta0: f64,
    /// `(t, cond_F)` at every report.
    pub trace: Vec<(f64, f64)>,
    /// `max_{t >= t0} cond_F(t) - cond_F(t0)`.
    pub max_excess: f64,
    /// Whether the excess stays within `1e-3 eta0`.
    pub monotone: bool,
    pub summary: RunSummary,
}

pub fn eventual_smallness_search(cfg: &SimConfig) -> Result<SmallnessOutcome, DriverError> {
    if !cfg.sensitivity.has_flat_origin() {
        return Err(DiagnosticsError::FlatOriginRequired(cfg.sensitivity.label()).into());
    }
    let mut c = cfg.clone();
    c.conditional = true;
    let summary = run(&c)?;
    let eta0 = summary.conditional.map(|p| p.eta0).unwrap_or(0.0);
    Ok(SmallnessOutcome {
        t0: summary.t0,
        eta0,
        trace: summary.reports.iter().map(|r| (r.t, r.cond_f)).collect(),
        max_excess: summary.cond_f_excess,
        monotone: summary.cond_f_excess <= 1e-3 * eta0,
        summary,
    })
}
