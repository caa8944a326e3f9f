//! Oxygen consumption rate `f` and its derivative.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("argument {s} outside the evaluation range [0, {c_max}]")]
    OutOfRange { s: f64, c_max: f64 },
    #[error("power exponent must be >= 1 for f to be C^1 on [0, inf), got {0}")]
    BadExponent(f64),
    #[error("invalid table: {0}")]
    BadTable(String),
}

/// Piecewise cubic Hermite interpolant through `(s_k, f_k, f'_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteTable {
    s: Vec<f64>,
    f: Vec<f64>,
    df: Vec<f64>,
}

impl HermiteTable {
    pub fn new(s: Vec<f64>, f: Vec<f64>, df: Vec<f64>) -> Result<Self, SensitivityError> {
        let bad = |m: &str| Err(SensitivityError::BadTable(m.to_string()));
        if s.len() < 2 || s.len() != f.len() || s.len() != df.len() {
            return bad("need at least two nodes with matching value and slope columns");
        }
        if s[0] != 0.0 {
            return bad("first node must be s = 0");
        }
        if s.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("nodes must be strictly increasing");
        }
        if s.iter().chain(&f).chain(&df).any(|v| !v.is_finite()) {
            return bad("non-finite entry");
        }
        if f[0] != 0.0 {
            return bad("f(0) must be 0");
        }
        if f[1..].iter().any(|&v| v <= 0.0) {
            return bad("f must be positive at every node s > 0");
        }
        Ok(Self { s, f, df })
    }

    pub fn nodes(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.s, &self.f, &self.df)
    }

    fn s_max(&self) -> f64 {
        *self.s.last().expect("non-empty")
    }

    fn eval(&self, s: f64) -> (f64, f64) {
        let k = match self.s.partition_point(|&x| x <= s) {
            0 => 0,
            p => (p - 1).min(self.s.len() - 2),
        };
        let (s0, s1) = (self.s[k], self.s[k + 1]);
        let h = s1 - s0;
        let t = (s - s0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let f = h00 * self.f[k] + h10 * h * self.df[k] + h01 * self.f[k + 1] + h11 * h * self.df[k + 1];
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        let df = (d00 * self.f[k] + d01 * self.f[k + 1]) / h + d10 * self.df[k] + d11 * self.df[k + 1];
        (f, df)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityKind {
    /// `f(s) = s^p`, `p >= 1`.
    Power(f64),
    /// `f(s) = s`.
    Linear,
    Table(HermiteTable),
}

/// Consumption function `f` together with the range it may be evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySpec {
    kind: SensitivityKind,
    c_max: f64,
}

impl SensitivitySpec {
    pub fn power(p: f64) -> Result<Self, SensitivityError> {
        if !(p.is_finite() && p >= 1.0) {
            return Err(SensitivityError::BadExponent(p));
        }
        Ok(Self {
            kind: SensitivityKind::Power(p),
            c_max: f64::INFINITY,
        })
    }

    pub fn linear() -> Self {
        Self {
            kind: SensitivityKind::Linear,
            c_max: f64::INFINITY,
        }
    }

    pub fn table(table: HermiteTable) -> Self {
        let c_max = table.s_max();
        Self {
            kind: SensitivityKind::Table(table),
            c_max,
        }
    }

    pub fn kind(&self) -> &SensitivityKind {
        &self.kind
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    /// `(f(s), f'(s))`, rejecting arguments outside `[0, c_max]`.
    pub fn eval(&self, s: f64) -> Result<(f64, f64), SensitivityError> {
        if !(s >= 0.0 && s <= self.c_max) {
            return Err(SensitivityError::OutOfRange { s, c_max: self.c_max });
        }
        Ok(self.eval_unchecked(s))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, s: f64) -> (f64, f64) {
        match &self.kind {
            SensitivityKind::Power(p) => {
                let p = *p;
                if s == 0.0 {
                    (0.0, if p == 1.0 { 1.0 } else { 0.0 })
                } else {
                    (s.powf(p), p * s.powf(p - 1.0))
                }
            }
            SensitivityKind::Linear => (s, 1.0),
            SensitivityKind::Table(t) => t.eval(s.min(self.c_max)),
        }
    }

    /// `f(s) / s`, continued by `f'(0)` at `s = 0`.
    #[inline]
    pub fn ratio(&self, s: f64) -> f64 {
        match &self.kind {
            SensitivityKind::Power(p) => {
                if s == 0.0 {
                    if *p == 1.0 { 1.0 } else { 0.0 }
                } else {
                    s.powf(p - 1.0)
                }
            }
            SensitivityKind::Linear => 1.0,
            SensitivityKind::Table(_) => {
                if s == 0.0 {
                    self.eval_unchecked(0.0).1
                } else {
                    self.eval_unchecked(s).0 / s
                }
            }
        }
    }

    #[inline]
    pub fn f(&self, s: f64) -> f64 {
        match &self.kind {
            SensitivityKind::Power(p) => s.powf(*p),
            SensitivityKind::Linear => s,
            SensitivityKind::Table(_) => self.eval_unchecked(s).0,
        }
    }

    /// Whether `f'(0) = 0`, the hypothesis under which the conditional
    /// energy functional applies.
    pub fn has_flat_origin(&self) -> bool {
        self.eval_unchecked(0.0).1 == 0.0
    }

    pub fn label(&self) -> String {
        match &self.kind {
            SensitivityKind::Power(p) => format!("power({p})"),
            SensitivityKind::Linear => "linear".to_string(),
            SensitivityKind::Table(t) => format!("table({} nodes)", t.s.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_two_values() {
        let f = SensitivitySpec::power(2.0).unwrap();
        assert_eq!(f.eval(0.5).unwrap(), (0.25, 1.0));
        assert_eq!(f.eval(0.0).unwrap(), (0.0, 0.0));
        assert!(f.has_flat_origin());
        assert_eq!(f.ratio(0.0), 0.0);
        assert_eq!(f.ratio(1e-8), 1e-8);
    }

    #[test]
    fn linear_violates_flat_origin() {
        let f = SensitivitySpec::linear();
        assert_eq!(f.eval(0.0).unwrap(), (0.0, 1.0));
        assert!(!f.has_flat_origin());
        assert!(!SensitivitySpec::power(1.0).unwrap().has_flat_origin());
    }

    #[test]
    fn range_and_exponent_checks() {
        let f = SensitivitySpec::power(2.0).unwrap();
        assert!(matches!(f.eval(-0.1), Err(SensitivityError::OutOfRange { .. })));
        assert!(SensitivitySpec::power(0.5).is_err());
    }

    #[test]
    fn hermite_table_reproduces_cubic() {
        // s^3 is reproduced exactly by cubic Hermite interpolation.
        let s: Vec<f64> = (0..6).map(|k| k as f64 * 0.25).collect();
        let f = s.iter().map(|x| x * x * x).collect();
        let df = s.iter().map(|x| 3.0 * x * x).collect();
        let spec = SensitivitySpec::table(HermiteTable::new(s, f, df).unwrap());
        for x in [0.0, 0.1, 0.33, 0.8, 1.25] {
            let (v, d) = spec.eval(x).unwrap();
            assert!((v - x * x * x).abs() < 1e-14);
            assert!((d - 3.0 * x * x).abs() < 1e-13);
        }
        assert!(spec.has_flat_origin());
        assert!(spec.eval(1.3).is_err());
    }

    #[test]
    fn table_validation() {
        assert!(HermiteTable::new(vec![0.0, 1.0], vec![0.1, 1.0], vec![0.0, 1.0]).is_err());
        assert!(HermiteTable::new(vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(HermiteTable::new(vec![0.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]).is_err());
    }
}
