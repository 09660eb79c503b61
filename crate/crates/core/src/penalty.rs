//! Group-structured sparsity penalties and the abundance simplex.
//!
//! Every penalty acts on one pixel's coefficient vector at a time. The
//! convex kinds use the mixed norm `(sum_p ||x_p||_r^s)^(1/s)` directly; the
//! fractional kind uses the power form `sum_p ||x_p||_r^s`, which is
//! separable across groups.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use crate::hsi::GroupStructure;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    None,
    L1,
    Group,
    Elitist,
    Fractional,
}

/// Penalty selection with its `(r, s)` exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPenalty", into = "RawPenalty")]
pub struct PenaltySpec {
    kind: PenaltyKind,
    r: f64,
    s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPenalty {
    kind: PenaltyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s: Option<f64>,
}

impl TryFrom<RawPenalty> for PenaltySpec {
    type Error = Error;

    fn try_from(raw: RawPenalty) -> Result<Self> {
        let fixed = |spec: PenaltySpec| -> Result<PenaltySpec> {
            let clash = raw.r.is_some_and(|r| r != spec.r) || raw.s.is_some_and(|s| s != spec.s);
            if clash {
                Err(Error::param(
                    "penalty",
                    format!("{:?} fixes (r, s) = ({}, {})", spec.kind, spec.r, spec.s),
                ))
            } else {
                Ok(spec)
            }
        };
        match raw.kind {
            PenaltyKind::None => fixed(PenaltySpec::none()),
            PenaltyKind::L1 => fixed(PenaltySpec::l1()),
            PenaltyKind::Group => fixed(PenaltySpec::group()),
            PenaltyKind::Elitist => fixed(PenaltySpec::elitist()),
            PenaltyKind::Fractional => {
                PenaltySpec::fractional(raw.r.unwrap_or(2.0), raw.s.unwrap_or(0.5))
            }
        }
    }
}

impl From<PenaltySpec> for RawPenalty {
    fn from(p: PenaltySpec) -> Self {
        let exponents = p.kind == PenaltyKind::Fractional;
        RawPenalty {
            kind: p.kind,
            r: exponents.then_some(p.r),
            s: exponents.then_some(p.s),
        }
    }
}

impl Default for PenaltySpec {
    fn default() -> Self {
        PenaltySpec::none()
    }
}

impl PenaltySpec {
    pub const fn none() -> Self {
        PenaltySpec {
            kind: PenaltyKind::None,
            r: 1.0,
            s: 1.0,
        }
    }

    pub const fn l1() -> Self {
        PenaltySpec {
            kind: PenaltyKind::L1,
            r: 1.0,
            s: 1.0,
        }
    }

    pub const fn group() -> Self {
        PenaltySpec {
            kind: PenaltyKind::Group,
            r: 2.0,
            s: 1.0,
        }
    }

    pub const fn elitist() -> Self {
        PenaltySpec {
            kind: PenaltyKind::Elitist,
            r: 1.0,
            s: 2.0,
        }
    }

    /// Power-form penalty `sum_p ||x_p||_r^s`. The proximal operator is
    /// available for `r` in {1, 2} and any `s > 0`.
    pub fn fractional(r: f64, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::param("penalty.s", format!("must be positive, got {s}")));
        }
        if r != 1.0 && r != 2.0 {
            return Err(Error::param(
                "penalty.r",
                format!("fractional penalty supports r = 1 or r = 2, got {r}"),
            ));
        }
        Ok(PenaltySpec {
            kind: PenaltyKind::Fractional,
            r,
            s,
        })
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn is_convex(&self) -> bool {
        self.kind != PenaltyKind::Fractional || self.s >= 1.0
    }

    /// Penalty value `R(x)` for one pixel.
    pub fn evaluate(&self, x: &[f64], groups: &GroupStructure) -> f64 {
        match self.kind {
            PenaltyKind::None => 0.0,
            PenaltyKind::Fractional => groups
                .ranges()
                .iter()
                .map(|g| lr_norm(&x[g.clone()], self.r).powf(self.s))
                .sum(),
            _ => mixed_norm_unchecked(x, groups, self.r, self.s),
        }
    }
}

fn lr_norm(x: &[f64], r: f64) -> f64 {
    if r == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else if r == 2.0 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        x.iter().map(|v| v.abs().powf(r)).sum::<f64>().powf(1.0 / r)
    }
}

fn mixed_norm_unchecked(x: &[f64], groups: &GroupStructure, r: f64, s: f64) -> f64 {
    let total: f64 = groups
        .ranges()
        .iter()
        .map(|g| lr_norm(&x[g.clone()], r).powf(s))
        .sum();
    total.powf(1.0 / s)
}

/// Two-level mixed norm `(sum_p (sum_i |x_{p,i}|^r)^(s/r))^(1/s)`.
pub fn mixed_norm(x: &[f64], groups: &GroupStructure, r: f64, s: f64) -> Result<f64> {
    if x.len() != groups.total() {
        return Err(Error::Dimension {
            context: "mixed norm input",
            expected: groups.total(),
            found: x.len(),
        });
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "mixed norm input",
            index,
        });
    }
    if !(r > 0.0 && s > 0.0) {
        return Err(Error::param("r/s", "exponents must be positive"));
    }
    Ok(mixed_norm_unchecked(x, groups, r, s))
}

/// `sum_n R(x_n)` over the columns of a `Q x N` matrix.
pub fn penalty_matrix(x: &DMatrix<f64>, groups: &GroupStructure, spec: &PenaltySpec) -> Result<f64> {
    if x.nrows() != groups.total() {
        return Err(Error::Dimension {
            context: "penalty rows",
            expected: groups.total(),
            found: x.nrows(),
        });
    }
    Ok(x.column_iter()
        .map(|c| spec.evaluate(c.as_slice(), groups))
        .sum())
}

/// `argmin_u 0.5 ||u - v||^2 + t R(u)`.
pub fn prox(v: &[f64], groups: &GroupStructure, spec: &PenaltySpec, t: f64) -> Result<Vec<f64>> {
    if v.len() != groups.total() {
        return Err(Error::Dimension {
            context: "prox input",
            expected: groups.total(),
            found: v.len(),
        });
    }
    let mut out = vec![0.0; v.len()];
    prox_into(v, groups, spec, t, &mut out)?;
    Ok(out)
}

/// In-place form of [`prox`]; `out` must have the length of `v`.
pub fn prox_into(
    v: &[f64],
    groups: &GroupStructure,
    spec: &PenaltySpec,
    t: f64,
    out: &mut [f64],
) -> Result<()> {
    if !(t >= 0.0) {
        return Err(Error::param("prox step", format!("must be nonnegative, got {t}")));
    }
    if t == 0.0 || spec.kind == PenaltyKind::None {
        out.copy_from_slice(v);
        return Ok(());
    }
    match spec.kind {
        PenaltyKind::None => unreachable!(),
        PenaltyKind::L1 => {
            for (o, &x) in out.iter_mut().zip(v) {
                *o = soft(x, t);
            }
        }
        PenaltyKind::Group => {
            for g in groups.ranges() {
                let norm = lr_norm(&v[g.clone()], 2.0);
                let scale = if norm > t { 1.0 - t / norm } else { 0.0 };
                for i in g.clone() {
                    out[i] = scale * v[i];
                }
            }
        }
        PenaltyKind::Elitist => elitist_prox(v, groups, t, out),
        PenaltyKind::Fractional => {
            for g in groups.ranges() {
                fractional_group_prox(&v[g.clone()], spec.r, spec.s, t, &mut out[g.clone()])?;
            }
        }
    }
    Ok(())
}

#[inline]
fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Sorted-magnitude prefix data used by the l1-type proxes.
struct SortedMagnitudes {
    /// Magnitudes in decreasing order.
    desc: Vec<f64>,
    /// `prefix[k]` = sum of the `k` largest magnitudes.
    prefix: Vec<f64>,
}

impl SortedMagnitudes {
    fn new(v: &[f64]) -> Self {
        let mut desc: Vec<f64> = v.iter().map(|x| x.abs()).collect();
        desc.sort_unstable_by(|a, b| b.total_cmp(a));
        let mut prefix = Vec::with_capacity(desc.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &d in &desc {
            acc += d;
            prefix.push(acc);
        }
        SortedMagnitudes { desc, prefix }
    }

    /// Solves `a = sum_i (|v_i| - kappa a)_+` for `a >= 0`; this is the l1
    /// norm of the prox of `(kappa / 2) ||.||_1^2`.
    fn squared_l1_level(&self, kappa: f64) -> f64 {
        let mut best = 0.0;
        for k in 1..=self.desc.len() {
            let a = self.prefix[k] / (1.0 + kappa * k as f64);
            if self.desc[k - 1] > kappa * a {
                best = a;
            } else {
                break;
            }
        }
        best
    }
}

/// Prox of `t * sqrt(sum_p ||u_p||_1^2)`. At the solution every group is
/// soft-thresholded at `kappa * ||u_p||_1` with `kappa * F(u) = t`; the map
/// `kappa -> kappa * F` is increasing, so `kappa` is found by bisection.
fn elitist_prox(v: &[f64], groups: &GroupStructure, t: f64, out: &mut [f64]) {
    let sorted: Vec<SortedMagnitudes> = groups
        .ranges()
        .iter()
        .map(|g| SortedMagnitudes::new(&v[g.clone()]))
        .collect();
    let dual: f64 = sorted
        .iter()
        .map(|s| s.desc.first().copied().unwrap_or(0.0).powi(2))
        .sum::<f64>()
        .sqrt();
    if dual <= t {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let h = |kappa: f64| -> f64 {
        let f2: f64 = sorted
            .iter()
            .map(|s| s.squared_l1_level(kappa).powi(2))
            .sum();
        kappa * f2.sqrt()
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while h(hi) < t {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) < t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kappa = 0.5 * (lo + hi);
    for (g, s) in groups.ranges().iter().zip(&sorted) {
        let theta = kappa * s.squared_l1_level(kappa);
        for i in g.clone() {
            out[i] = soft(v[i], theta);
        }
    }
}

const SCALAR_MAX_ITER: usize = 100;
const SCALAR_TOL: f64 = 1e-10;

/// One linear piece of the reduced scalar problem over `c = ||u||_r`:
/// `g'(c) = (c - sum) / support + t s c^(s-1)` for `c` in `[lo, hi]`.
struct Piece {
    lo: f64,
    hi: f64,
    sum: f64,
    support: f64,
}

/// Prox of `t ||u||_r^s` on one group, `r` in {1, 2}.
///
/// The minimizer has the form "shrink `v` onto the r-sphere of radius c", so
/// the problem reduces to a scalar one in `c`. Stationary points are found by
/// safeguarded Newton iteration on each monotone stretch of `g'`, then
/// compared against the endpoints (including `c = 0`).
fn fractional_group_prox(v: &[f64], r: f64, s: f64, t: f64, out: &mut [f64]) -> Result<()> {
    if r == 2.0 && s < 1.0 {
        return euclidean_fractional_prox(v, s, t, out);
    }
    let pieces: Vec<Piece>;
    let cmax;
    let sorted;
    if r == 2.0 {
        cmax = lr_norm(v, 2.0);
        pieces = vec![Piece {
            lo: 0.0,
            hi: cmax,
            sum: cmax,
            support: 1.0,
        }];
        sorted = None;
    } else {
        let sm = SortedMagnitudes::new(v);
        let m = sm.desc.len();
        cmax = sm.prefix[m];
        let mut ps = Vec::with_capacity(m);
        for k in 1..=m {
            let next = if k < m { sm.desc[k] } else { 0.0 };
            let kf = k as f64;
            let lo = sm.prefix[k] - kf * sm.desc[k - 1];
            let hi = sm.prefix[k] - kf * next;
            if hi > lo {
                ps.push(Piece {
                    lo,
                    hi,
                    sum: sm.prefix[k],
                    support: kf,
                });
            }
        }
        pieces = ps;
        sorted = Some(sm);
    }
    if cmax == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return Ok(());
    }

    // Objective of the reduced problem, evaluated through the shrunk vector.
    let shrink = |c: f64, dst: &mut [f64]| {
        if r == 2.0 {
            let scale = c / cmax;
            for (o, &x) in dst.iter_mut().zip(v) {
                *o = scale * x;
            }
        } else {
            let sm = sorted.as_ref().unwrap();
            let theta = l1_threshold_for_radius(sm, c);
            for (o, &x) in dst.iter_mut().zip(v) {
                *o = soft(x, theta);
            }
        }
    };
    let mut scratch = vec![0.0; v.len()];
    let mut objective = |c: f64| -> f64 {
        shrink(c, &mut scratch);
        let dist: f64 = scratch.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * dist + t * c.powf(s)
    };

    let mut best_c = 0.0;
    let mut best_val = objective(0.0);
    let consider = |c: f64, best_c: &mut f64, best_val: &mut f64, obj: &mut dyn FnMut(f64) -> f64| {
        let val = obj(c);
        if val < *best_val {
            *best_val = val;
            *best_c = c;
        }
    };
    consider(cmax, &mut best_c, &mut best_val, &mut objective);

    for piece in &pieces {
        let grad = |c: f64| (c - piece.sum) / piece.support + t * s * c.powf(s - 1.0);
        let curv = |c: f64| 1.0 / piece.support + t * s * (s - 1.0) * c.powf(s - 2.0);
        // Split the piece where g' changes monotonicity (s < 1 only).
        let mut cuts = vec![piece.lo, piece.hi];
        if s < 1.0 {
            let inflection = (piece.support * t * s * (1.0 - s)).powf(1.0 / (2.0 - s));
            if inflection > piece.lo && inflection < piece.hi {
                cuts.insert(1, inflection);
            }
        }
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let ga = if a == 0.0 { f64::INFINITY } else { grad(a) };
            let gb = grad(b);
            // A local minimum needs g' to cross from negative to positive.
            if ga < 0.0 && gb > 0.0 {
                let c = safeguarded_newton(&grad, &curv, a, b)?;
                consider(c, &mut best_c, &mut best_val, &mut objective);
            } else {
                consider(b, &mut best_c, &mut best_val, &mut objective);
            }
        }
    }
    shrink(best_c, out);
    Ok(())
}

/// `r = 2`, `s < 1`: the reduced problem is `0.5 (c - a)^2 + t c^s` with
/// `a = ||v||_2`. Its derivative is decreasing below the inflection point
/// and increasing above it, so the only candidates are `c = 0` and the root
/// above the inflection point.
fn euclidean_fractional_prox(v: &[f64], s: f64, t: f64, out: &mut [f64]) -> Result<()> {
    let a = lr_norm(v, 2.0);
    out.iter_mut().for_each(|o| *o = 0.0);
    if a == 0.0 {
        return Ok(());
    }
    // c^s through sqrt for the common square-root case.
    let pow_s = |c: f64| if s == 0.5 { c.sqrt() } else { c.powf(s) };
    let grad = |c: f64| c - a + t * s * pow_s(c) / c;
    let curv = |c: f64| 1.0 + t * s * (s - 1.0) * pow_s(c) / (c * c);
    let inflection = (t * s * (1.0 - s)).powf(1.0 / (2.0 - s));
    if inflection >= a || grad(inflection) >= 0.0 {
        return Ok(());
    }
    let c = safeguarded_newton(&grad, &curv, inflection, a)?;
    let value = 0.5 * (a - c) * (a - c) + t * pow_s(c);
    if value < 0.5 * a * a {
        let scale = c / a;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = scale * x;
        }
    }
    Ok(())
}

/// Threshold `theta` with `sum_i (|v_i| - theta)_+ = c`.
fn l1_threshold_for_radius(sm: &SortedMagnitudes, c: f64) -> f64 {
    let m = sm.desc.len();
    if c <= 0.0 {
        return sm.desc.first().copied().unwrap_or(0.0);
    }
    for k in 1..=m {
        let theta = (sm.prefix[k] - c) / k as f64;
        let next = if k < m { sm.desc[k] } else { 0.0 };
        if theta >= next {
            return theta.max(0.0);
        }
    }
    0.0
}

/// Root of an increasing `f` on `[a, b]` with `f(a) < 0 < f(b)`.
fn safeguarded_newton(
    f: &dyn Fn(f64) -> f64,
    df: &dyn Fn(f64) -> f64,
    mut a: f64,
    mut b: f64,
) -> Result<f64> {
    let mut x = b;
    let scale = b.abs().max(1.0);
    let mut residual = f64::INFINITY;
    for _ in 0..SCALAR_MAX_ITER {
        let fx = f(x);
        residual = fx.abs();
        if residual <= SCALAR_TOL * scale || (b - a) <= SCALAR_TOL * scale * 1e-6 {
            return Ok(x);
        }
        if fx > 0.0 {
            b = x;
        } else {
            a = x;
        }
        let d = df(x);
        let step = x - fx / d;
        x = if d > 0.0 && step > a && step < b {
            step
        } else {
            0.5 * (a + b)
        };
    }
    Err(Error::ProxNonConvergence { residual })
}

/// Euclidean projection onto `{u >= 0, sum u = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut scratch = Vec::with_capacity(v.len());
    project_simplex_into(v, &mut out, &mut scratch);
    out
}

/// In-place form of [`project_simplex`]. The threshold is found by
/// repeatedly discarding entries below the current estimate, which gives
/// the same result as the sorted scan without sorting.
pub fn project_simplex_into(v: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    let mut theta = (scratch.iter().sum::<f64>() - 1.0) / scratch.len() as f64;
    loop {
        let before = scratch.len();
        scratch.retain(|&x| x > theta);
        if scratch.len() == before {
            break;
        }
        theta = (scratch.iter().sum::<f64>() - 1.0) / scratch.len() as f64;
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - theta).max(0.0);
    }
}

/// Sort-based reference for [`project_simplex`].
pub fn project_simplex_sorted(v: &[f64]) -> Vec<f64> {
    let mut desc = v.to_vec();
    desc.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (j, &u) in desc.iter().enumerate() {
        acc += u;
        let candidate = (acc - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}
