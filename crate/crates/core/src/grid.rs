//! Uniform rectangular grid, cell-centered scalar fields with a one-cell
//! Neumann halo, face-centered vector fields, and the discrete calculus
//! (gradient, divergence, Laplacian, quadrature) built on them.
//!
//! Layout conventions:
//! - cell `(i, j)` has center `((i + 1/2) dx, (j + 1/2) dy)`;
//! - x-face `(i, j)`, `i in 0..=nx`, separates cells `(i-1, j)` and `(i, j)`;
//! - y-face `(i, j)`, `j in 0..=ny`, separates cells `(i, j-1)` and `(i, j)`.
//!
//! All reductions go through [`pairwise_sum`] so that results do not depend
//! on anything but the data.

use thiserror::Error;

/// Errors raised by grid construction and field validation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 4x4 cells, got {nx}x{ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("domain lengths must be positive and finite, got lx={lx}, ly={ly}")]
    BadExtent { lx: f64, ly: f64 },
    #[error("non-finite value {value} in field `{name}` at cell ({i}, {j})")]
    NonFinite {
        name: &'static str,
        i: usize,
        j: usize,
        value: f64,
    },
    #[error("velocity has a nonzero wall-normal component on the boundary")]
    SlipAtWall,
    #[error("expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
}

/// Rectangle `[0, lx] x [0, ly]` split into `nx x ny` equal cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, GridError> {
        if nx < 4 || ny < 4 {
            return Err(GridError::TooSmall { nx, ny });
        }
        if !(lx.is_finite() && ly.is_finite() && lx > 0.0 && ly > 0.0) {
            return Err(GridError::BadExtent { lx, ly });
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// `n x n` cells on the unit square.
    pub fn unit_square(n: usize) -> Self {
        Self::new(n, n, 1.0, 1.0).expect("unit square grid with n >= 4")
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn xc(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx()
    }

    #[inline]
    pub fn yc(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dy()
    }

    /// Smallest cell edge.
    pub fn h(&self) -> f64 {
        self.dx().min(self.dy())
    }

    /// Grid refined by an integer factor in both directions.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            nx: self.nx * factor,
            ny: self.ny * factor,
            ..*self
        }
    }
}

/// Deterministic pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(k)` for `k in 0..len`, without materializing the terms
/// beyond one leaf-sized buffer per recursion level.
pub fn pairwise_sum_by(len: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= 32 {
            let mut acc = 0.0;
            for k in lo..hi {
                acc += f(k);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, len, f)
}

/// Cell-centered scalar with a one-cell halo on each side.
///
/// The interior is stored row-major (`i` fastest). Halo values live in four
/// separate strips; corners are never needed by the 5-point stencils.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
    bottom: Vec<f64>,
    top: Vec<f64>,
}

impl ScalarField {
    /// Field with the given interior values and Neumann halo.
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.cells() {
            return Err(GridError::Shape {
                expected: grid.cells(),
                got: values.len(),
            });
        }
        let mut field = Self {
            grid,
            values,
            left: vec![0.0; grid.ny],
            right: vec![0.0; grid.ny],
            bottom: vec![0.0; grid.nx],
            top: vec![0.0; grid.nx],
        };
        field.mirror_halo();
        Ok(field)
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self::from_values(grid, vec![value; grid.cells()]).expect("shape matches")
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Sample `f` at cell centers.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.cells());
        for j in 0..grid.ny {
            let y = grid.yc(j);
            for i in 0..grid.nx {
                values.push(f(grid.xc(i), y));
            }
        }
        Self::from_values(grid, values).expect("shape matches")
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i + j * self.grid.nx]
    }

    /// Value at `(i, j)` where `i in -1..=nx`, `j in -1..=ny` reach into the
    /// halo. Corner halo cells are not stored.
    #[inline]
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let (nx, ny) = (self.grid.nx as isize, self.grid.ny as isize);
        if i < 0 {
            self.left[j as usize]
        } else if i >= nx {
            self.right[j as usize]
        } else if j < 0 {
            self.bottom[i as usize]
        } else if j >= ny {
            self.top[i as usize]
        } else {
            self.values[(i + j * nx) as usize]
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Interior values plus a halo strip, as `(left, right, bottom, top)`.
    pub fn halo(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        (&self.left, &self.right, &self.bottom, &self.top)
    }

    /// Mutate the interior in place; the Neumann halo is refreshed afterwards.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.values);
        self.mirror_halo();
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_values(self.grid, self.values.iter().map(|&v| f(v)).collect())
            .expect("shape matches")
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_values(self.grid, values).expect("shape matches")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mean over the domain.
    pub fn mean(&self) -> f64 {
        integrate(self) / self.grid.area()
    }

    /// First non-finite interior value, reported as a [`GridError`].
    pub fn check_finite(&self, name: &'static str) -> Result<(), GridError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(GridError::NonFinite {
                name,
                i: k % self.grid.nx,
                j: k / self.grid.nx,
                value: self.values[k],
            }),
        }
    }

    fn mirror_halo(&mut self) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        for j in 0..ny {
            self.left[j] = self.values[j * nx];
            self.right[j] = self.values[nx - 1 + j * nx];
        }
        for i in 0..nx {
            self.bottom[i] = self.values[i];
            self.top[i] = self.values[i + (ny - 1) * nx];
        }
    }
}

/// Refresh the halo with the zero-flux mirror rule, rejecting non-finite data.
pub fn fill_ghost_neumann(field: &ScalarField) -> Result<ScalarField, GridError> {
    field.check_finite("field")?;
    let mut out = field.clone();
    out.mirror_halo();
    Ok(out)
}

/// Face-centered vector field: x-components on x-faces, y-components on
/// y-faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    grid: GridSpec,
    /// `(nx + 1) * ny`, index `i + j * (nx + 1)`.
    pub x: Vec<f64>,
    /// `nx * (ny + 1)`, index `i + j * nx`.
    pub y: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            x: vec![0.0; (grid.nx + 1) * grid.ny],
            y: vec![0.0; grid.nx * (grid.ny + 1)],
        }
    }

    /// Sample `fx` at x-face midpoints and `fy` at y-face midpoints.
    pub fn from_fns(
        grid: GridSpec,
        fx: impl Fn(f64, f64) -> f64,
        fy: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut out = Self::zeros(grid);
        let (dx, dy) = (grid.dx(), grid.dy());
        for j in 0..grid.ny {
            for i in 0..=grid.nx {
                out.x[i + j * (grid.nx + 1)] = fx(i as f64 * dx, grid.yc(j));
            }
        }
        for j in 0..=grid.ny {
            for i in 0..grid.nx {
                out.y[i + j * grid.nx] = fy(grid.xc(i), j as f64 * dy);
            }
        }
        out
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn fx(&self, i: usize, j: usize) -> f64 {
        self.x[i + j * (self.grid.nx + 1)]
    }

    #[inline]
    pub fn fy(&self, i: usize, j: usize) -> f64 {
        self.y[i + j * self.grid.nx]
    }

    #[inline]
    pub fn set_fx(&mut self, i: usize, j: usize, v: f64) {
        self.x[i + j * (self.grid.nx + 1)] = v;
    }

    #[inline]
    pub fn set_fy(&mut self, i: usize, j: usize, v: f64) {
        self.y[i + j * self.grid.nx] = v;
    }

    /// Largest absolute face value.
    pub fn max_abs(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(&a, &b)| f(a, b)).collect(),
            y: self.y.iter().zip(&other.y).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            x: self.x.iter().map(|v| v * s).collect(),
            y: self.y.iter().map(|v| v * s).collect(),
        }
    }

    /// True when every wall-normal boundary face carries zero.
    pub fn boundary_is_zero(&self) -> bool {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        (0..ny).all(|j| self.fx(0, j) == 0.0 && self.fx(nx, j) == 0.0)
            && (0..nx).all(|i| self.fy(i, 0) == 0.0 && self.fy(i, ny) == 0.0)
    }

    /// Zero the wall-normal boundary faces.
    pub fn zero_boundary(&mut self) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        for j in 0..ny {
            self.set_fx(0, j, 0.0);
            self.set_fx(nx, j, 0.0);
        }
        for i in 0..nx {
            self.set_fy(i, 0, 0.0);
            self.set_fy(i, ny, 0.0);
        }
    }
}

/// Staggered velocity with no-slip walls: the wall-normal boundary faces are
/// identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MacVelocity(FaceField);

impl MacVelocity {
    pub fn zero(grid: GridSpec) -> Self {
        Self(FaceField::zeros(grid))
    }

    /// Wrap face values, refusing any nonzero wall-normal boundary face.
    pub fn from_faces(faces: FaceField) -> Result<Self, GridError> {
        if faces.boundary_is_zero() {
            Ok(Self(faces))
        } else {
            Err(GridError::SlipAtWall)
        }
    }

    /// Discrete curl of a corner-sampled stream function `psi`; exactly
    /// divergence-free, and no-slip when `psi` vanishes on the boundary.
    pub fn from_stream_function(grid: GridSpec, psi: impl Fn(f64, f64) -> f64) -> Self {
        let (nx, ny) = (grid.nx, grid.ny);
        let (dx, dy) = (grid.dx(), grid.dy());
        let corner = |i: usize, j: usize| psi(i as f64 * dx, j as f64 * dy);
        let mut f = FaceField::zeros(grid);
        for j in 0..ny {
            for i in 1..nx {
                f.set_fx(i, j, (corner(i, j + 1) - corner(i, j)) / dy);
            }
        }
        for j in 1..ny {
            for i in 0..nx {
                f.set_fy(i, j, -(corner(i + 1, j) - corner(i, j)) / dx);
            }
        }
        Self(f)
    }

    /// Wrap face values without checking the wall condition.
    #[cfg(test)]
    pub(crate) fn from_faces_unchecked(faces: FaceField) -> Self {
        Self(faces)
    }

    pub fn faces(&self) -> &FaceField {
        &self.0
    }

    pub fn into_faces(self) -> FaceField {
        self.0
    }

    pub fn grid(&self) -> &GridSpec {
        self.0.grid()
    }

    pub fn is_zero(&self) -> bool {
        self.0.x.iter().chain(&self.0.y).all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.max_abs()
    }
}

/// Weight of a face in face quadratures: `dx dy` inside, half at the wall.
#[inline]
fn face_weight(k: usize, n: usize, vol: f64) -> f64 {
    if k == 0 || k == n {
        0.5 * vol
    } else {
        vol
    }
}

/// `sum_faces a . b * face_volume`, the discrete `int a . b` for face fields.
pub fn face_inner(a: &FaceField, b: &FaceField) -> f64 {
    let g = *a.grid();
    let vol = g.cell_volume();
    let sx = pairwise_sum_by(a.x.len(), &|k| {
        face_weight(k % (g.nx + 1), g.nx, vol) * a.x[k] * b.x[k]
    });
    let sy = pairwise_sum_by(a.y.len(), &|k| {
        face_weight(k / g.nx, g.ny, vol) * a.y[k] * b.y[k]
    });
    sx + sy
}

/// Two-point gradient across every face, using the halo at the boundary.
pub fn gradient(field: &ScalarField) -> FaceField {
    let g = *field.grid();
    let (nx, ny) = (g.nx, g.ny);
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = FaceField::zeros(g);
    let v = field.values();
    let (left, right, bottom, top) = field.halo();
    for j in 0..ny {
        let row = &v[j * nx..(j + 1) * nx];
        let dst = &mut out.x[j * (nx + 1)..(j + 1) * (nx + 1)];
        dst[0] = (row[0] - left[j]) / dx;
        for i in 1..nx {
            dst[i] = (row[i] - row[i - 1]) / dx;
        }
        dst[nx] = (right[j] - row[nx - 1]) / dx;
    }
    for i in 0..nx {
        out.y[i] = (v[i] - bottom[i]) / dy;
        out.y[i + ny * nx] = (top[i] - v[i + (ny - 1) * nx]) / dy;
    }
    for j in 1..ny {
        for i in 0..nx {
            out.y[i + j * nx] = (v[i + j * nx] - v[i + (j - 1) * nx]) / dy;
        }
    }
    out
}

/// Net outflux per unit volume in every cell.
pub fn divergence(flux: &FaceField) -> ScalarField {
    let g = *flux.grid();
    let (nx, ny) = (g.nx, g.ny);
    let (dx, dy) = (g.dx(), g.dy());
    let mut values = vec![0.0; g.cells()];
    for j in 0..ny {
        for i in 0..nx {
            values[i + j * nx] = (flux.fx(i + 1, j) - flux.fx(i, j)) / dx
                + (flux.fy(i, j + 1) - flux.fy(i, j)) / dy;
        }
    }
    ScalarField::from_values(g, values).expect("shape matches")
}

/// 5-point Laplacian, `divergence(gradient(field))`.
pub fn laplacian(field: &ScalarField) -> ScalarField {
    divergence(&gradient(field))
}

/// Midpoint quadrature `sum values * dx * dy`.
pub fn integrate(field: &ScalarField) -> f64 {
    pairwise_sum(field.values()) * field.grid().cell_volume()
}

/// `int |a - b|`.
pub fn l1_distance(a: &ScalarField, b: &ScalarField) -> f64 {
    let (va, vb) = (a.values(), b.values());
    pairwise_sum_by(va.len(), &|k| (va[k] - vb[k]).abs()) * a.grid().cell_volume()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: GridSpec, rng: &mut ChaCha8Rng) -> ScalarField {
        let vals = (0..grid.cells()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ScalarField::from_values(grid, vals).unwrap()
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(matches!(
            GridSpec::new(3, 8, 1.0, 1.0),
            Err(GridError::TooSmall { .. })
        ));
        assert!(GridSpec::new(8, 8, 0.0, 1.0).is_err());
    }

    #[test]
    fn cell_volumes_sum_to_area() {
        let g = GridSpec::new(37, 19, 1.3, 0.7).unwrap();
        let total = integrate(&ScalarField::constant(g, 1.0));
        assert_relative_eq!(total, 1.3 * 0.7, max_relative = 1e-14);
    }

    #[test]
    fn neumann_ghosts() {
        let g = GridSpec::unit_square(8);
        let c = fill_ghost_neumann(&ScalarField::constant(g, 3.0)).unwrap();
        let (l, r, b, t) = c.halo();
        assert!(l.iter().chain(r).chain(b).chain(t).all(|&v| v == 3.0));

        let f = fill_ghost_neumann(&ScalarField::from_fn(g, |x, _| x)).unwrap();
        for j in 0..8 {
            assert_eq!(f.at(-1, j as isize), f.get(0, j));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = fill_ghost_neumann(&random_field(g, &mut rng)).unwrap();
        let grad = gradient(&f);
        for j in 0..8 {
            assert_eq!(grad.fx(0, j), 0.0);
            assert_eq!(grad.fx(8, j), 0.0);
        }
        for i in 0..8 {
            assert_eq!(grad.fy(i, 0), 0.0);
            assert_eq!(grad.fy(i, 8), 0.0);
        }
    }

    #[test]
    fn ghost_fill_rejects_nan() {
        let g = GridSpec::unit_square(8);
        let mut f = ScalarField::zeros(g);
        f.update(|v| v[3 + 2 * 8] = f64::NAN);
        let err = fill_ghost_neumann(&f).unwrap_err();
        assert!(matches!(err, GridError::NonFinite { i: 3, j: 2, .. }));
    }

    #[test]
    fn gradient_exact_on_affine() {
        let g = GridSpec::unit_square(16);
        let grad = gradient(&ScalarField::from_fn(g, |x, _| 2.0 * x));
        for j in 0..16 {
            for i in 1..16 {
                assert_relative_eq!(grad.fx(i, j), 2.0, max_relative = 1e-12);
            }
        }
        assert_eq!(gradient(&ScalarField::constant(g, 1.5)).max_abs(), 0.0);
    }

    fn sin_gradient_error(n: usize) -> f64 {
        let g = GridSpec::unit_square(n);
        let grad = gradient(&ScalarField::from_fn(g, |x, _| (2.0 * PI * x).sin()));
        let mut err = 0.0_f64;
        for j in 0..n {
            for i in 1..n {
                let x = i as f64 * g.dx();
                err = err.max((grad.fx(i, j) - 2.0 * PI * (2.0 * PI * x).cos()).abs());
            }
        }
        err
    }

    #[test]
    fn gradient_second_order() {
        let (e64, e128) = (sin_gradient_error(64), sin_gradient_error(128));
        let order = (e64 / e128).log2();
        assert!(order >= 1.9, "observed order {order}");
    }

    #[test]
    fn divergence_basics() {
        let g = GridSpec::unit_square(8);
        assert_eq!(divergence(&FaceField::zeros(g)).max(), 0.0);
        let uniform = FaceField::from_fns(g, |_, _| 1.0, |_, _| 0.0);
        let d = divergence(&uniform);
        assert!(d.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn divergence_telescopes() {
        let g = GridSpec::new(23, 17, 1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut flux = FaceField::zeros(g);
        for v in flux.x.iter_mut().chain(flux.y.iter_mut()) {
            *v = rng.gen_range(-5.0..5.0);
        }
        flux.zero_boundary();
        let scale: f64 = flux.x.iter().chain(&flux.y).map(|v| v.abs()).sum::<f64>() * g.dy();
        let total = integrate(&divergence(&flux));
        assert!(total.abs() <= 1e-13 * scale, "{total}");
    }

    #[test]
    fn laplacian_quadratic_and_constant() {
        let g = GridSpec::unit_square(16);
        assert_eq!(laplacian(&ScalarField::constant(g, 2.0)).max(), 0.0);
        let lap = laplacian(&ScalarField::from_fn(g, |x, y| x * x + y * y));
        for j in 1..15 {
            for i in 1..15 {
                assert_relative_eq!(lap.get(i, j), 4.0, max_relative = 1e-9);
            }
        }
    }

    fn eigen_error(n: usize) -> f64 {
        let g = GridSpec::unit_square(n);
        let f = |x: f64, y: f64| (PI * x).cos() * (PI * y).cos();
        let lap = laplacian(&ScalarField::from_fn(g, f));
        let exact = ScalarField::from_fn(g, |x, y| -2.0 * PI * PI * f(x, y));
        lap.values()
            .iter()
            .zip(exact.values())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    #[test]
    fn laplacian_second_order_on_neumann_eigenfunction() {
        let order = (eigen_error(64) / eigen_error(128)).log2();
        assert!(order >= 1.9, "observed order {order}");
    }

    #[test]
    fn laplacian_sums_to_zero() {
        let g = GridSpec::unit_square(24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(g, &mut rng);
        let lap = laplacian(&f);
        let scale: f64 = lap.values().iter().map(|v| v.abs()).sum::<f64>() * g.cell_volume();
        assert!(integrate(&lap).abs() <= 1e-13 * scale);
    }

    #[test]
    fn summation_by_parts() {
        let g = GridSpec::new(20, 12, 1.0, 0.6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_field(g, &mut rng);
        let b = random_field(g, &mut rng);
        let lhs = integrate(&a.zip_map(&laplacian(&b), |x, y| x * y));
        let rhs = -face_inner(&gradient(&a), &gradient(&b));
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn quadrature_cases() {
        let g = GridSpec::unit_square(16);
        assert_relative_eq!(integrate(&ScalarField::constant(g, 2.0)), 2.0, max_relative = 1e-15);
        assert_relative_eq!(integrate(&ScalarField::from_fn(g, |x, _| x)), 0.5, max_relative = 1e-14);
        let g = GridSpec::unit_square(32);
        let s = integrate(&ScalarField::from_fn(g, |x, _| (2.0 * PI * x).sin().powi(2)));
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v: Vec<f64> = (0..1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum_by(1000, &|k| k as f64), 499_500.0);
    }
}
