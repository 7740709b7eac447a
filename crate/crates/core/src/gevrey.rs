//! Gevrey-class constant propagation, modulus constants, the tail integral,
//! the main generalization bound, and calibration of its amplitude.
//!
//! Two different constants are both called `C` in the underlying theory.
//! Here the Gevrey derivative-bound constant is [`GevreyConstants::c`] and
//! the bound's exponent constant is [`BoundInputs::c_exp`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

pub const TAIL_TOL: f64 = 1e-10;
pub const TAIL_MAX_DEPTH: u32 = 60;

/// `(C, R, s)` with `|∂^α f| ≤ C R^{|α|} (α!)^s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevreyConstants {
    pub c: f64,
    pub r: f64,
    pub s: f64,
}

impl GevreyConstants {
    pub fn new(c: f64, r: f64, s: f64) -> Result<Self> {
        if !(c > 0.0) || !(r >= 0.0) || !(s >= 1.0) {
            return Err(Error::Domain(format!("invalid Gevrey constants ({c}, {r}, {s})")));
        }
        Ok(GevreyConstants { c, r, s })
    }
}

pub fn gc_add(f: GevreyConstants, g: GevreyConstants) -> GevreyConstants {
    GevreyConstants { c: f.c + g.c, r: f.r.max(g.r), s: f.s.max(g.s) }
}

pub fn gc_mul(f: GevreyConstants, g: GevreyConstants) -> GevreyConstants {
    let s = f.s.max(g.s);
    GevreyConstants { c: f.c * g.c * 2f64.powf(s), r: f.r + g.r, s }
}

/// Componentwise maxima for a vector-valued map.
pub fn gc_product(parts: &[GevreyConstants]) -> Result<GevreyConstants> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Contract("product of no components".into()))?;
    Ok(rest.iter().fold(*first, |acc, p| GevreyConstants {
        c: acc.c.max(p.c),
        r: acc.r.max(p.r),
        s: acc.s.max(p.s),
    }))
}

/// Constants of `f ∘ g`.
pub fn gc_compose(f: GevreyConstants, g: GevreyConstants) -> GevreyConstants {
    let cr = g.c * g.r;
    GevreyConstants { c: f.c * cr.exp(), r: f.r * cr.powf(f.s), s: f.s * g.s }
}

/// Order of an `n_out`-fold self-composition: `s^n_out`.
pub fn family_order(s: f64, n_out: u32) -> f64 {
    s.powi(n_out as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusConstants {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    /// `s = 1` collapses `B` to zero and the modulus to the constant `A`.
    pub vacuous: bool,
}

/// `A = C D^s`, `B = ((s - 1) / (e R)) ln(1/R)`.
pub fn modulus_constants(c: f64, r: f64, d: f64, s: f64) -> Result<ModulusConstants> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("modulus constants need 0 < R < 1, got {r}")));
    }
    if !(s >= 1.0) || !(c > 0.0) || !(d > 0.0) {
        return Err(Error::Domain(format!("need C > 0, D > 0, s >= 1; got C={c}, D={d}, s={s}")));
    }
    let b = (s - 1.0) / (std::f64::consts::E * r) * (1.0 / r).ln();
    Ok(ModulusConstants { a: c * d.powf(s), b, s, vacuous: s == 1.0 })
}

/// `exp(-2 B r^{-1/s} ln(1/r))`, taken as 1 for `r >= 1`.
pub fn phi(r: f64, b: f64, s: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("phi needs r > 0, got {r}")));
    }
    if r >= 1.0 {
        return Ok(1.0);
    }
    Ok((-2.0 * b * r.powf(-1.0 / s) * (1.0 / r).ln()).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailInputs {
    pub b: f64,
    pub s: f64,
    pub d: f64,
    pub r0: f64,
    pub diameter: f64,
}

/// `φ(r0) + ∫_{r0}^{D_K} φ(r) d / r^2 dr`.
pub fn tail_bound(t: &TailInputs) -> Result<f64> {
    if !(t.r0 > 0.0) || t.r0 > t.diameter {
        return Err(Error::Contract(format!("need 0 < r0 <= D_K, got r0={} D_K={}", t.r0, t.diameter)));
    }
    if !(t.d >= 0.0) {
        return Err(Error::Domain(format!("shift must be nonnegative, got {}", t.d)));
    }
    let head = phi(t.r0, t.b, t.s)?;
    if t.d == 0.0 || t.r0 == t.diameter {
        return Ok(head);
    }
    let integrand = |r: f64| phi(r, t.b, t.s).unwrap_or(1.0) * t.d / (r * r);
    // φ has a kink at r = 1; integrate the two pieces separately.
    let integral = if t.r0 < 1.0 && t.diameter > 1.0 {
        adaptive_simpson(&integrand, t.r0, 1.0, TAIL_TOL / 2.0, TAIL_MAX_DEPTH)
            + adaptive_simpson(&integrand, 1.0, t.diameter, TAIL_TOL / 2.0, TAIL_MAX_DEPTH)
    } else {
        adaptive_simpson(&integrand, t.r0, t.diameter, TAIL_TOL, TAIL_MAX_DEPTH)
    };
    Ok(head + integral)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffChoice {
    pub r0: f64,
    /// Set when `d >= 1`, outside the regime where `d^{s/(s+1)}` is used.
    pub degenerate: bool,
}

pub fn r0_optimal(d: f64, s: f64, diameter: f64) -> Result<CutoffChoice> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("cutoff needs d > 0, got {d}")));
    }
    if d >= 1.0 {
        return Ok(CutoffChoice { r0: diameter.min(1.0), degenerate: true });
    }
    Ok(CutoffChoice { r0: d.powf(s / (s + 1.0)), degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub a: f64,
    pub c_exp: f64,
    pub s: f64,
    pub eps: f64,
    pub lip: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub d: f64,
    pub shift: f64,
    pub eps_term: f64,
    pub lip_term: f64,
    pub total: f64,
    /// `d >= 1`: the log factor is non-positive and the shift term is at
    /// least `6 A^2`.
    pub degenerate: bool,
}

fn shift_factor_ln(c_exp: f64, s: f64, d: f64) -> f64 {
    -c_exp * d.powf(-1.0 / (s + 1.0)) * (1.0 / d).ln()
}

/// `6 A^2 exp(-C d^{-1/(s+1)} ln(1/d)) + 3 ε + 3 L_1^2 d^2`.
pub fn main_bound(x: &BoundInputs) -> Result<BoundTerms> {
    if !(x.d > 0.0) {
        return Err(Error::Domain(format!("bound needs d > 0, got {}", x.d)));
    }
    let shift = 6.0 * x.a * x.a * shift_factor_ln(x.c_exp, x.s, x.d).exp();
    let eps_term = 3.0 * x.eps;
    let lip_term = 3.0 * x.lip * x.lip * x.d * x.d;
    Ok(BoundTerms { d: x.d, shift, eps_term, lip_term, total: shift + eps_term + lip_term, degenerate: x.d >= 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub s: f64,
    pub c_exp: f64,
    /// Index of the point where the fitted curve touches the data.
    pub binding: usize,
}

impl Calibration {
    pub fn bound_at(&self, d: f64) -> Result<f64> {
        main_bound(&BoundInputs { a: self.a, c_exp: self.c_exp, s: self.s, eps: 0.0, lip: 0.0, d }).map(|t| t.total)
    }
}

/// Smallest amplitude `A` whose shift-only bound dominates every `(d, loss)`.
pub fn calibrate(points: &[(f64, f64)], s: f64, c_exp: f64) -> Result<Calibration> {
    if points.is_empty() {
        return Err(Error::Contract("calibration needs at least one point".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, &(d, loss)) in points.iter().enumerate() {
        if !(d > 0.0) || !(loss > 0.0) {
            return Err(Error::Domain(format!("calibration point {j} needs d > 0 and loss > 0, got ({d}, {loss})")));
        }
        // ln A_j = (ln loss - ln 6 - ln factor) / 2
        let ln_a = 0.5 * (loss.ln() - 6f64.ln() - shift_factor_ln(c_exp, s, d));
        if ln_a > best.0 {
            best = (ln_a, j);
        }
    }
    let a = best.0.exp();
    if !a.is_finite() {
        return Err(Error::Domain("calibrated amplitude overflows".into()));
    }
    // Nudge upward until the binding point is dominated in floating point.
    let mut cal = Calibration { a, s, c_exp, binding: best.1 };
    let (d, loss) = points[best.1];
    while cal.bound_at(d)? < loss {
        cal.a = cal.a.next_up();
    }
    Ok(cal)
}

/// Tries every `(s, C_exp)` pair and keeps the one whose calibrated curve
/// sits closest to the data (smallest summed log gap).
pub fn calibrate_grid(points: &[(f64, f64)], s_grid: &[f64], c_grid: &[f64]) -> Result<Calibration> {
    let mut best: Option<(f64, Calibration)> = None;
    for &s in s_grid {
        for &c in c_grid {
            let cal = calibrate(points, s, c)?;
            let mut gap = 0.0;
            for &(d, loss) in points {
                gap += (cal.bound_at(d)? / loss).ln();
            }
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, cal));
            }
        }
    }
    best.map(|(_, c)| c).ok_or_else(|| Error::Contract("empty calibration grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(c: f64, r: f64, s: f64) -> GevreyConstants {
        GevreyConstants::new(c, r, s).unwrap()
    }

    #[test]
    fn closure_formulas() {
        assert_eq!(gc_add(g(1.0, 2.0, 1.0), g(3.0, 1.0, 1.0)), g(4.0, 2.0, 1.0));
        assert_eq!(gc_add(g(1.5, 0.5, 2.0), g(1.5, 0.5, 2.0)), g(3.0, 0.5, 2.0));
        assert_eq!(gc_add(g(1.0, 1.0, 1.0), g(1.0, 1.0, 2.0)), g(2.0, 1.0, 2.0));
        assert_eq!(gc_mul(g(1.0, 1.0, 1.0), g(1.0, 1.0, 1.0)), g(2.0, 2.0, 1.0));
        assert_eq!(gc_mul(g(1.0, 1.0, 2.0), g(1.0, 1.0, 1.0)), g(4.0, 2.0, 2.0));
        assert_eq!(gc_mul(g(3.0, 0.7, 1.5), g(1.0, 0.0, 1.5)).r, 0.7);
        assert_eq!(gc_product(&[g(1.0, 2.0, 1.0), g(3.0, 1.0, 2.0)]).unwrap(), g(3.0, 2.0, 2.0));
        assert_eq!(gc_product(&[g(2.0, 3.0, 1.0)]).unwrap(), g(2.0, 3.0, 1.0));
        assert!(gc_product(&[]).is_err());
        let e = gc_compose(g(1.0, 1.0, 1.0), g(1.0, 1.0, 1.0));
        assert_eq!(e, g(std::f64::consts::E, 1.0, 1.0));
        assert_eq!(gc_compose(g(1.0, 1.0, 2.0), g(1.0, 1.0, 3.0)).s, 6.0);
        assert_eq!(gc_compose(g(2.0, 0.3, 2.5), g(0.5, 2.0, 1.0)).r, 0.3);
        assert!(GevreyConstants::new(1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn product_order_invariance() {
        let parts = [g(1.0, 2.0, 1.0), g(3.0, 1.0, 2.0), g(0.5, 4.0, 1.5)];
        let a = gc_product(&parts).unwrap();
        let mut rev = parts;
        rev.reverse();
        assert_eq!(a, gc_product(&rev).unwrap());
    }

    #[test]
    fn family_orders() {
        for k in 0..=10 {
            assert_eq!(family_order(1.0, k), 1.0);
        }
        assert_eq!(family_order(2.0, 3), 8.0);
        for k in 0..10 {
            assert!(family_order(1.3, k + 1) >= family_order(1.3, k));
        }
    }

    #[test]
    fn modulus_examples() {
        let m = modulus_constants(2.0, 0.5, 3.0, 1.0).unwrap();
        assert_eq!(m.b, 0.0);
        assert!(m.vacuous);
        let m = modulus_constants(1.0, 0.5, 1.0, 2.0).unwrap();
        assert_eq!(m.a, 1.0);
        // 2 ln 2 / e, to 20 digits
        assert!((m.b - 0.509_989_194_867_907_1).abs() < 1e-15);
        let m2 = modulus_constants(3.0, 0.5, 1.0, 2.0).unwrap();
        assert_eq!(m2.a, 3.0 * m.a);
        assert!(modulus_constants(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(modulus_constants(1.0, 1.5, 1.0, 2.0).is_err());
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.3, 0.0, 2.0).unwrap(), 1.0);
        assert!((phi(1.0 - 1e-12, 3.0, 2.0).unwrap() - 1.0).abs() < 1e-10);
        assert_eq!(phi(1.0, 3.0, 2.0).unwrap(), 1.0);
        // exp(-8 ln 4) = 4^-8
        assert!((phi(0.25, 1.0, 1.0).unwrap() - 1.525_878_906_25e-5).abs() < 1e-18);
        assert!(phi(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn phi_grows_with_radius() {
        for &b in &[0.1, 1.0, 5.0] {
            for &s in &[1.0, 1.5, 3.0] {
                let mut prev = 0.0;
                for k in 1..1000 {
                    let v = phi(k as f64 / 1000.0, b, s).unwrap();
                    assert!(v >= prev);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn tail_closed_forms() {
        let t = TailInputs { b: 0.0, s: 2.0, d: 0.3, r0: 0.2, diameter: 4.0 };
        let v = tail_bound(&t).unwrap();
        assert!((v - (1.0 + 0.3 * (1.0 / 0.2 - 1.0 / 4.0))).abs() <= 1e-10);
        let t = TailInputs { b: 1.0, s: 2.0, d: 0.0, r0: 0.2, diameter: 1.0 };
        assert_eq!(tail_bound(&t).unwrap(), phi(0.2, 1.0, 2.0).unwrap());
        let bad = TailInputs { b: 1.0, s: 2.0, d: 0.1, r0: 2.0, diameter: 1.0 };
        assert!(matches!(tail_bound(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn tail_matches_fine_riemann_sum() {
        let t = TailInputs { b: 1.0, s: 2.0, d: 0.1, r0: 0.2, diameter: 1.0 };
        let q = tail_bound(&t).unwrap();
        let n = 1_000_000;
        let h = (t.diameter - t.r0) / n as f64;
        let riemann: f64 = (0..n)
            .map(|k| {
                let r = t.r0 + (k as f64 + 0.5) * h;
                phi(r, t.b, t.s).unwrap() * t.d / (r * r) * h
            })
            .sum();
        let expect = phi(t.r0, t.b, t.s).unwrap() + riemann;
        assert!((q - expect).abs() < 1e-9, "{q} vs {expect}");
        assert!(q >= phi(t.r0, t.b, t.s).unwrap());
    }

    #[test]
    fn cutoff_choice() {
        let c = r0_optimal(0.01, 1.0, 5.0).unwrap();
        assert!((c.r0 - 0.1).abs() < 1e-15 && !c.degenerate);
        assert!((r0_optimal(1.0 - 1e-9, 2.0, 5.0).unwrap().r0 - 1.0).abs() < 1e-8);
        let c = r0_optimal(2.0, 1.0, 0.5).unwrap();
        assert_eq!(c.r0, 0.5);
        assert!(c.degenerate);
        for &d in &[1e-4, 0.1, 0.5, 0.9] {
            for &s in &[1.0, 2.0, 7.0] {
                assert!(r0_optimal(d, s, 1.0).unwrap().r0 >= d);
            }
        }
    }

    #[test]
    fn bound_examples() {
        let t = main_bound(&BoundInputs { a: 1.5, c_exp: 2.0, s: 1.0, eps: 0.0, lip: 0.0, d: 1.0 }).unwrap();
        assert_eq!(t.total, 6.0 * 1.5 * 1.5);
        assert!(t.degenerate);
        let t = main_bound(&BoundInputs { a: 1.0, c_exp: 1.0, s: 1.0, eps: 0.0, lip: 0.0, d: 0.1 }).unwrap();
        assert!((t.total - 0.004_129_272_940_439_666).abs() < 1e-15);
        let t = main_bound(&BoundInputs { a: 0.0, c_exp: 1.0, s: 1.0, eps: 0.5, lip: 2.0, d: 0.3 }).unwrap();
        assert!((t.total - 2.58).abs() < 1e-12);
        let t = main_bound(&BoundInputs { a: 1.0, c_exp: 1.0, s: 1.0, eps: 0.0, lip: 0.0, d: 1e-6 }).unwrap();
        assert!(t.shift < 1e-12);
        assert!(main_bound(&BoundInputs { a: 1.0, c_exp: 1.0, s: 1.0, eps: 0.0, lip: 0.0, d: 0.0 }).is_err());
    }

    #[test]
    fn collapse_step_holds() {
        for &d in &[1e-6f64, 0.01, 0.3, 1.0] {
            for &s in &[1.0, 2.0, 4.0] {
                let r0 = r0_optimal(d.min(0.999_999), s, 1.0).unwrap().r0;
                let p = phi(r0, 0.7, s).unwrap();
                assert!(p * (1.0 + d.powf(1.0 / (s + 1.0))) <= 2.0 * p + 1e-15);
            }
        }
    }

    #[test]
    fn calibration_properties() {
        let on_curve = main_bound(&BoundInputs { a: 2.0, c_exp: 1.0, s: 1.0, eps: 0.0, lip: 0.0, d: 3.0 }).unwrap().total;
        let c = calibrate(&[(3.0, on_curve)], 1.0, 1.0).unwrap();
        assert!((c.a - 2.0).abs() < 1e-12);

        let pts = [(2.0, 4.0), (6.0, 30.0), (10.0, 50.0)];
        let c1 = calibrate(&pts, 1.0, 0.5).unwrap();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(d, l)| (d, 4.0 * l)).collect();
        let c4 = calibrate(&scaled, 1.0, 0.5).unwrap();
        assert!((c4.a / c1.a - 2.0).abs() < 1e-12);
        for &(d, l) in &pts {
            assert!(c1.bound_at(d).unwrap() >= l);
        }
        let (bd, bl) = pts[c1.binding];
        assert!((c1.bound_at(bd).unwrap() - bl).abs() <= 1e-9 * bl.max(1.0));
        assert!(calibrate(&[], 1.0, 1.0).is_err());
        assert!(calibrate(&[(0.0, 1.0)], 1.0, 1.0).is_err());
    }

    #[test]
    fn grid_calibration_dominates() {
        let pts = [(0.8, 0.05), (1.5, 0.4), (7.8, 20.0)];
        let c = calibrate_grid(&pts, &[1.0, 2.0, 3.0], &[0.1, 0.5, 1.0, 2.0]).unwrap();
        for &(d, l) in &pts {
            assert!(c.bound_at(d).unwrap() >= l);
        }
    }
}
