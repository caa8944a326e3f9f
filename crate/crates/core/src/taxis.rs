//! Finite-volume updates for the cell density `n` and oxygen `c`.
//!
//! Transport uses first-order upwinding on the total face velocity (fluid
//! plus taxis drift), which keeps `n >= 0` and the discrete maximum principle
//! for `c` under the CFL bound. Consumption `-n f(c)` is applied as a
//! Patankar factor `1 / (1 + dt n f(c)/c)`, so `c` stays strictly positive.

use crate::grid::{divergence, gradient, FaceField, GridError, MacVelocity, ScalarField};
use crate::sensitivity::SensitivitySpec;
use crate::solver::{pcg, SeparableOperator, SolveError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxisError {
    #[error("oxygen concentration must stay positive: c = {value:e} at cell ({i}, {j})")]
    NonPositiveOxygen { i: usize, j: usize, value: f64 },
    #[error("negative cell density {value:e} at cell ({i}, {j}); retry with dt <= {suggested_dt:e}")]
    NegativeDensity {
        i: usize,
        j: usize,
        value: f64,
        suggested_dt: f64,
    },
    #[error("invalid species parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("implicit diffusion solve failed: {0}")]
    Solve(#[from] SolveError),
}

/// Taxis strength, regularization and the bounds on the initial oxygen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeciesParams {
    pub chi: f64,
    pub eps: f64,
    /// `||c_0||_inf`.
    pub c0_inf: f64,
    /// Lower bound `c_0 >= delta`.
    pub delta: f64,
}

impl SpeciesParams {
    pub fn validate(&self) -> Result<(), TaxisError> {
        let fail = |m: String| Err(TaxisError::BadParams(m));
        if !(self.chi > 0.0 && self.chi.is_finite()) {
            return fail(format!("chi must be positive, got {}", self.chi));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be >= 0, got {}", self.eps));
        }
        if !(self.delta > 0.0) {
            return fail(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.c0_inf >= self.delta && self.c0_inf.is_finite()) {
            return fail(format!("need c0_inf >= delta, got {} < {}", self.c0_inf, self.delta));
        }
        Ok(())
    }

    /// Un-regularized runs (`eps = 0`) solve the original taxis term.
    pub fn classical_mode(&self) -> bool {
        self.eps == 0.0
    }
}

/// How the Laplacian terms are integrated in time.
#[derive(Debug, Clone, Copy)]
pub enum Diffusion<'a> {
    /// Forward Euler; needs `dt <= dx^2 / 8`-type bounds.
    Explicit,
    /// Backward Euler, solved by CG on the Neumann operator to `tol`.
    Implicit { op: &'a SeparableOperator, tol: f64 },
}

fn check_positive(c: &ScalarField) -> Result<(), TaxisError> {
    let nx = c.grid().nx;
    match c.values().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        None => Ok(()),
        Some(k) => Err(TaxisError::NonPositiveOxygen {
            i: k % nx,
            j: k / nx,
            value: c.values()[k],
        }),
    }
}

/// Face drift `chi grad c / ((1 + eps n) c)` with the harmonic mean of `c`
/// and the arithmetic mean of `n` across each face. Boundary faces carry no
/// drift.
pub fn taxis_drift(c: &ScalarField, n: &ScalarField, params: &SpeciesParams) -> Result<FaceField, TaxisError> {
    check_positive(c)?;
    let g = *c.grid();
    let (nx, ny) = (g.nx, g.ny);
    let (dx, dy) = (g.dx(), g.dy());
    let (cv, nv) = (c.values(), n.values());
    let mut out = FaceField::zeros(g);
    let face = |ca: f64, cb: f64, na: f64, nb: f64, h: f64| {
        let c_h = 2.0 * ca * cb / (ca + cb);
        let n_a = 0.5 * (na + nb);
        params.chi * (cb - ca) / h / ((1.0 + params.eps * n_a) * c_h)
    };
    for j in 0..ny {
        for i in 1..nx {
            let (a, b) = (i - 1 + j * nx, i + j * nx);
            out.set_fx(i, j, face(cv[a], cv[b], nv[a], nv[b], dx));
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let (a, b) = (i + (j - 1) * nx, i + j * nx);
            out.set_fy(i, j, face(cv[a], cv[b], nv[a], nv[b], dy));
        }
    }
    Ok(out)
}

/// Upwind advective flux `q_up v` on every face.
pub fn upwind_flux(q: &ScalarField, v: &FaceField) -> FaceField {
    let g = *q.grid();
    let (nx, ny) = (g.nx, g.ny);
    let qv = q.values();
    let mut out = FaceField::zeros(g);
    for j in 0..ny {
        for i in 1..nx {
            let s = v.fx(i, j);
            let up = if s > 0.0 { qv[i - 1 + j * nx] } else { qv[i + j * nx] };
            out.set_fx(i, j, s * up);
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let s = v.fy(i, j);
            let up = if s > 0.0 { qv[i + (j - 1) * nx] } else { qv[i + j * nx] };
            out.set_fy(i, j, s * up);
        }
    }
    out
}

/// Largest per-cell outflow rate `sum_out |v| / h` of a face velocity.
pub fn max_outflow_rate(v: &FaceField) -> f64 {
    let g = *v.grid();
    let (nx, ny) = (g.nx, g.ny);
    let (dx, dy) = (g.dx(), g.dy());
    let mut worst = 0.0_f64;
    for j in 0..ny {
        for i in 0..nx {
            let rate = v.fx(i + 1, j).max(0.0) / dx
                + (-v.fx(i, j)).max(0.0) / dx
                + v.fy(i, j + 1).max(0.0) / dy
                + (-v.fy(i, j)).max(0.0) / dy;
            worst = worst.max(rate);
        }
    }
    worst
}

/// Solve `(I - dt L) x = rhs` for the Neumann Laplacian `L`.
///
/// The iteration starts from `rhs`, so the initial residual `dt L rhs` has
/// zero sum; every CG update then stays orthogonal to constants and the
/// integral of the solution equals that of `rhs` up to round-off.
pub fn implicit_diffusion(
    rhs: &ScalarField,
    dt: f64,
    op: &SeparableOperator,
    tol: f64,
) -> Result<ScalarField, TaxisError> {
    let b = rhs.values();
    let mut x = b.to_vec();
    pcg(
        |v, out| {
            op.apply(v, out);
            for k in 0..v.len() {
                out[k] = v[k] - dt * out[k];
            }
        },
        |r, z| op.solve_shifted(r, 1.0, dt, z),
        b,
        &mut x,
        tol,
        50,
    )?;
    Ok(ScalarField::from_values(*rhs.grid(), x)?)
}

fn first_negative(n: &ScalarField) -> Option<(usize, f64)> {
    n.values()
        .iter()
        .position(|&v| v < 0.0 || !v.is_finite())
        .map(|k| (k, n.values()[k]))
}

/// One conservative step of the density equation with face flux
/// `-grad n + n_up (drift + u)`.
pub fn advance_n(
    n: &ScalarField,
    drift: &FaceField,
    u: &MacVelocity,
    dt: f64,
    diffusion: Diffusion<'_>,
) -> Result<ScalarField, TaxisError> {
    let g = *n.grid();
    let velocity = drift.zip_map(u.faces(), |a, b| a + b);
    let transport = divergence(&upwind_flux(n, &velocity));
    let out = match diffusion {
        Diffusion::Explicit => {
            let lap = divergence(&gradient(n));
            let vals = n
                .values()
                .iter()
                .zip(transport.values())
                .zip(lap.values())
                .map(|((&v, &t), &l)| v + dt * (l - t))
                .collect();
            ScalarField::from_values(g, vals)?
        }
        Diffusion::Implicit { op, tol } => {
            let star = n.zip_map(&transport, |v, t| v - dt * t);
            implicit_diffusion(&star, dt, op, tol)?
        }
    };
    if let Some((k, value)) = first_negative(&out) {
        let mut rate = max_outflow_rate(&velocity);
        if matches!(diffusion, Diffusion::Explicit) {
            rate += 2.0 / (g.dx() * g.dx()) + 2.0 / (g.dy() * g.dy());
        }
        let suggested_dt = if rate > 0.0 { (1.0 / rate).min(0.5 * dt) } else { 0.5 * dt };
        return Err(TaxisError::NegativeDensity {
            i: k % g.nx,
            j: k / g.nx,
            value,
            suggested_dt,
        });
    }
    Ok(out)
}

/// Transport and diffusion of `c` followed by the Patankar consumption
/// factor, using the density `n` of the previous state.
pub fn advance_c(
    c: &ScalarField,
    n: &ScalarField,
    u: &MacVelocity,
    spec: &SensitivitySpec,
    dt: f64,
    diffusion: Diffusion<'_>,
) -> Result<ScalarField, TaxisError> {
    check_positive(c)?;
    let g = *c.grid();
    let star = if u.is_zero() {
        c.clone()
    } else {
        let transport = divergence(&upwind_flux(c, u.faces()));
        c.zip_map(&transport, |v, t| v - dt * t)
    };
    let star = match diffusion {
        Diffusion::Explicit => {
            let lap = divergence(&gradient(c));
            star.zip_map(&lap, |v, l| v + dt * l)
        }
        Diffusion::Implicit { op, tol } => implicit_diffusion(&star, dt, op, tol)?,
    };
    check_positive(&star)?;
    let vals = star
        .values()
        .iter()
        .zip(n.values())
        .map(|(&s, &nn)| s / (1.0 + dt * nn * spec.ratio(s)))
        .collect();
    let out = ScalarField::from_values(g, vals)?;
    check_positive(&out)?;
    Ok(out)
}

/// `w = -ln(c / c0_inf)`.
pub fn log_transform(c: &ScalarField, c0_inf: f64) -> Result<ScalarField, TaxisError> {
    check_positive(c)?;
    Ok(c.map(|v| -(v / c0_inf).ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, GridSpec};
    use crate::solver::Bc1d;
    use std::f64::consts::PI;

    fn params(chi: f64, eps: f64) -> SpeciesParams {
        SpeciesParams { chi, eps, c0_inf: 1.0, delta: 0.1 }
    }

    fn neumann(g: GridSpec) -> SeparableOperator {
        SeparableOperator::new(g.nx, g.ny, Bc1d::NeumannCells, Bc1d::NeumannCells, g.dx(), g.dy())
    }

    #[test]
    fn params_validation() {
        assert!(params(1.0, 0.0).validate().is_ok());
        assert!(params(0.0, 0.0).validate().is_err());
        assert!(SpeciesParams { delta: 0.0, ..params(1.0, 0.0) }.validate().is_err());
        assert!(SpeciesParams { c0_inf: 0.05, ..params(1.0, 0.0) }.validate().is_err());
        assert!(params(1.0, 0.0).classical_mode());
    }

    #[test]
    fn constant_oxygen_gives_zero_drift() {
        let g = GridSpec::unit_square(8);
        let c = ScalarField::constant(g, 0.7);
        let n = ScalarField::from_fn(g, |x, y| 1.0 + x * y);
        assert_eq!(taxis_drift(&c, &n, &params(2.0, 0.1)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn drift_rejects_nonpositive_oxygen() {
        let g = GridSpec::unit_square(8);
        let mut c = ScalarField::constant(g, 1.0);
        c.update(|v| v[5 + 8 * 6] = 0.0);
        let err = taxis_drift(&c, &c, &params(1.0, 0.0)).unwrap_err();
        assert!(matches!(err, TaxisError::NonPositiveOxygen { i: 5, j: 6, .. }));
    }

    fn exp_drift_error(nx: usize) -> f64 {
        let g = GridSpec::new(nx, 4, 1.0, 1.0).unwrap();
        let c = ScalarField::from_fn(g, |x, _| x.exp());
        let n = ScalarField::from_fn(g, |x, y| 1.0 + x + y);
        let d = taxis_drift(&c, &n, &params(2.0, 0.0)).unwrap();
        (1..nx).map(|i| (d.fx(i, 1) - 2.0).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn drift_of_exponential_is_second_order() {
        let (e1, e2) = (exp_drift_error(64), exp_drift_error(128));
        assert!(e1 < 1e-3);
        assert!((e1 / e2).log2() > 1.9);
    }

    #[test]
    fn strong_regularization_damps_drift() {
        let g = GridSpec::unit_square(16);
        let c = ScalarField::from_fn(g, |x, y| 1.0 + 0.5 * (PI * x).cos() * (PI * y).cos());
        let n = ScalarField::constant(g, 1.0);
        let p = params(3.0, 1e6);
        let d = taxis_drift(&c, &n, &p).unwrap();
        let grad = gradient(&c);
        let cmin = c.min();
        for k in 0..d.x.len() {
            assert!(d.x[k].abs() <= p.chi * grad.x[k].abs() / ((1.0 + 1e6) * cmin) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn constant_density_is_steady() {
        let g = GridSpec::unit_square(16);
        let n = ScalarField::constant(g, 2.5);
        let u = MacVelocity::zero(g);
        let out = advance_n(&n, &FaceField::zeros(g), &u, 1e-4, Diffusion::Explicit).unwrap();
        assert_eq!(out, n);
    }

    #[test]
    fn diffusion_conserves_mass_over_many_steps() {
        let g = GridSpec::unit_square(32);
        let mut n = ScalarField::from_fn(g, |x, y| (-((x - 0.5).powi(2) + (y - 0.5).powi(2)) / 0.01).exp());
        let m0 = integrate(&n);
        let u = MacVelocity::zero(g);
        let zero = FaceField::zeros(g);
        let dt = 0.2 * g.dx() * g.dx();
        for _ in 0..1000 {
            n = advance_n(&n, &zero, &u, dt, Diffusion::Explicit).unwrap();
        }
        assert!(((integrate(&n) - m0) / m0).abs() <= 1e-12);
    }

    #[test]
    fn implicit_diffusion_conserves_mass() {
        let g = GridSpec::unit_square(32);
        let op = neumann(g);
        let mut n = ScalarField::from_fn(g, |x, y| 1.0 + 0.9 * (3.0 * x).sin() * (5.0 * y).cos());
        let m0 = integrate(&n);
        let u = MacVelocity::zero(g);
        let zero = FaceField::zeros(g);
        for _ in 0..200 {
            n = advance_n(&n, &zero, &u, 1e-2, Diffusion::Implicit { op: &op, tol: 1e-10 }).unwrap();
        }
        assert!(((integrate(&n) - m0) / m0).abs() <= 1e-13);
        assert!(n.min() > 0.0);
    }

    /// Gaussian pulse carried by a uniform drift in x; the center of mass
    /// moves by `v t` (method of characteristics), diffusion leaves it fixed
    /// as long as the pulse stays away from the walls.
    #[test]
    fn uniform_drift_moves_center_of_mass() {
        let g = GridSpec::new(256, 4, 4.0, 4.0 / 64.0).unwrap();
        let v = 10.0;
        let mut drift = FaceField::zeros(g);
        for j in 0..g.ny {
            for i in 1..g.nx {
                drift.set_fx(i, j, v);
            }
        }
        let mut n = ScalarField::from_fn(g, |x, _| (-(x - 1.5).powi(2) / 0.01).exp());
        let u = MacVelocity::zero(g);
        let center = |n: &ScalarField| {
            let w = n.values();
            let m: f64 = w.iter().sum();
            (0..w.len()).map(|k| w[k] * g.xc(k % g.nx)).sum::<f64>() / m
        };
        let x0 = center(&n);
        let dt = 0.2 * g.dx() * g.dx();
        let steps = (0.05 / dt).round() as usize;
        for _ in 0..steps {
            n = advance_n(&n, &drift, &u, dt, Diffusion::Explicit).unwrap();
        }
        let moved = center(&n) - x0;
        let expected = v * dt * steps as f64;
        assert!(((moved - expected) / expected).abs() < 0.02, "moved {moved}, expected {expected}");
    }

    #[test]
    fn negative_density_is_rejected_with_suggestion() {
        let g = GridSpec::unit_square(8);
        let mut drift = FaceField::zeros(g);
        drift.set_fx(4, 4, 50.0);
        let n = ScalarField::constant(g, 1.0);
        let err = advance_n(&n, &drift, &MacVelocity::zero(g), 0.01, Diffusion::Explicit).unwrap_err();
        match err {
            TaxisError::NegativeDensity { suggested_dt, .. } => assert!(suggested_dt < 0.01),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn homogeneous_consumption_matches_closed_form() {
        let g = GridSpec::unit_square(8);
        let f = SensitivitySpec::power(2.0).unwrap();
        let n = ScalarField::constant(g, 1.0);
        let u = MacVelocity::zero(g);
        let mut c = ScalarField::constant(g, 1.0);
        let dt = 1e-3;
        for _ in 0..1000 {
            c = advance_c(&c, &n, &u, &f, dt, Diffusion::Explicit).unwrap();
        }
        assert!((c.get(3, 3) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn tiny_oxygen_stays_positive() {
        let g = GridSpec::unit_square(8);
        let f = SensitivitySpec::power(2.0).unwrap();
        let n = ScalarField::constant(g, 5.0);
        let c = ScalarField::constant(g, 1e-8);
        let dt = 1e-3;
        let out = advance_c(&c, &n, &MacVelocity::zero(g), &f, dt, Diffusion::Explicit).unwrap();
        let decay = 1.0 - out.get(0, 0) / 1e-8;
        assert!(out.min() > 0.0);
        assert!(decay <= dt * 5.0 * 1e-8 * (1.0 + 1e-9));
    }

    #[test]
    fn pure_transport_respects_max_principle() {
        let g = GridSpec::unit_square(32);
        let f = SensitivitySpec::power(2.0).unwrap();
        let n = ScalarField::zeros(g);
        let u = MacVelocity::from_stream_function(g, |x, y| 0.3 * ((PI * x).sin() * (PI * y).sin()).powi(2));
        let mut c = ScalarField::from_fn(g, |x, y| 0.2 + (-((x - 0.3).powi(2) + (y - 0.6).powi(2)) / 0.02).exp());
        let dt = 0.2 * g.dx() * g.dx();
        let mut sup = c.max();
        for _ in 0..300 {
            c = advance_c(&c, &n, &u, &f, dt, Diffusion::Explicit).unwrap();
            assert!(c.max() <= sup * (1.0 + 1e-12));
            sup = c.max();
        }
    }

    #[test]
    fn log_transform_cases() {
        let g = GridSpec::unit_square(8);
        let w = log_transform(&ScalarField::constant(g, 2.0), 2.0).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.0));
        let w = log_transform(&ScalarField::constant(g, 2.0 * (-1.0_f64).exp()), 2.0).unwrap();
        assert!(w.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(log_transform(&ScalarField::zeros(g), 1.0).is_err());
    }

    fn chain_rule_error(n: usize) -> f64 {
        let g = GridSpec::unit_square(n);
        let c = ScalarField::from_fn(g, |x, y| 1.0 + 0.5 * (PI * x).cos() * (PI * y).cos());
        let w = log_transform(&c, 1.5).unwrap();
        let (gw, gc) = (gradient(&w), gradient(&c));
        let mut err = 0.0_f64;
        for j in 0..n {
            for i in 1..n {
                let c_face = 0.5 * (c.get(i - 1, j) + c.get(i, j));
                err = err.max((gw.fx(i, j) + gc.fx(i, j) / c_face).abs());
            }
        }
        err
    }

    #[test]
    fn log_gradient_chain_rule_second_order() {
        let (e1, e2) = (chain_rule_error(64), chain_rule_error(128));
        assert!((e1 / e2).log2() > 1.9, "{e1} {e2}");
    }
}
