//! Interval maps with an intermittent left branch, their first-return
//! partition on Y = (1/2, 1], and skew-product extensions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;

/// Default cap on the number of steps an orbit may spend outside Y.
pub const DEFAULT_TRAP_CAP: u64 = 10_000_000;

/// Increasing affine branch `x -> slope * x + intercept` on `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineBranch {
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub intercept: f64,
}

impl AffineBranch {
    pub fn new(lo: f64, hi: f64, slope: f64, intercept: f64) -> Self {
        Self { lo, hi, slope, intercept }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    #[inline]
    pub fn image(&self) -> (f64, f64) {
        (self.apply(self.lo), self.apply(self.hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Lsv,
    NonMarkov,
    Custom,
}

/// `f0(x) = x (1 + (2x)^alpha)` on `[0, 1/2]`, an affine table on `(1/2, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMapSpec {
    pub kind: MapKind,
    pub alpha: f64,
    pub right: Vec<AffineBranch>,
}

impl IntervalMapSpec {
    pub fn lsv(alpha: f64) -> Result<Self> {
        Self::build(MapKind::Lsv, alpha, vec![AffineBranch::new(0.5, 1.0, 2.0, -1.0)])
    }

    /// Two full-slope-2.5 branches whose images (0, 3/4] and (3/10, 4/5] are
    /// not unions of partition elements.
    pub fn non_markov(alpha: f64) -> Result<Self> {
        Self::build(
            MapKind::NonMarkov,
            alpha,
            vec![
                AffineBranch::new(0.5, 0.8, 2.5, -1.25),
                AffineBranch::new(0.8, 1.0, 2.5, -1.7),
            ],
        )
    }

    pub fn custom(alpha: f64, right: Vec<AffineBranch>) -> Result<Self> {
        Self::build(MapKind::Custom, alpha, right)
    }

    fn build(kind: MapKind, alpha: f64, right: Vec<AffineBranch>) -> Result<Self> {
        let m = Self { kind, alpha, right };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            bail!(InvalidParameter, "alpha must be positive and finite, got {}", self.alpha);
        }
        if self.right.is_empty() {
            bail!(InvalidParameter, "branch table is empty");
        }
        let tol = 1e-12;
        let mut edge = 0.5;
        for (k, b) in self.right.iter().enumerate() {
            if ![b.lo, b.hi, b.slope, b.intercept].iter().all(|v| v.is_finite()) {
                bail!(InvalidParameter, "branch {k} has non-finite entries");
            }
            if math::abs(b.lo - edge) > tol {
                bail!(InvalidParameter, "branch {k} starts at {} but the previous ends at {edge}", b.lo);
            }
            if b.hi <= b.lo {
                bail!(InvalidParameter, "branch {k} has empty domain ({}, {}]", b.lo, b.hi);
            }
            if b.slope <= 1.0 {
                bail!(
                    InvalidParameter,
                    "branch {k} has slope {}; only increasing expanding branches are supported",
                    b.slope
                );
            }
            let (a, c) = b.image();
            if a < -tol || c > 1.0 + tol {
                bail!(InvalidParameter, "branch {k} maps outside [0, 1]: ({a}, {c}]");
            }
            edge = b.hi;
        }
        if math::abs(edge - 1.0) > tol {
            bail!(InvalidParameter, "branch table ends at {edge}, not 1");
        }
        Ok(())
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        1.0 / self.alpha
    }

    /// Number of monotone branches including the left one.
    pub fn branch_count(&self) -> usize {
        self.right.len() + 1
    }

    /// 0 for the left branch, `k + 1` for right branch `k`.
    #[inline]
    pub fn branch_index(&self, x: f64) -> usize {
        if x <= 0.5 {
            return 0;
        }
        for (k, b) in self.right.iter().enumerate() {
            if x <= b.hi {
                return k + 1;
            }
        }
        self.right.len()
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        if x <= 0.5 {
            lsv_left(x, self.alpha)
        } else {
            let b = &self.right[self.branch_index(x) - 1];
            b.apply(x)
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        if x <= 0.5 {
            lsv_left_derivative(x, self.alpha)
        } else {
            self.right[self.branch_index(x) - 1].slope
        }
    }

    /// Every right branch maps its domain onto a union of {(0,1/2], (1/2,1]}.
    pub fn is_markov(&self) -> bool {
        let on_grid = |v: f64| [0.0, 0.5, 1.0].iter().any(|g| math::abs(v - g) < 1e-12);
        self.right.iter().all(|b| {
            let (a, c) = b.image();
            on_grid(a) && on_grid(c)
        })
    }
}

#[inline]
fn lsv_left(x: f64, alpha: f64) -> f64 {
    x * (1.0 + math::powf(2.0 * x, alpha))
}

#[inline]
fn lsv_left_derivative(x: f64, alpha: f64) -> f64 {
    1.0 + (1.0 + alpha) * math::powf(2.0 * x, alpha)
}

/// The Liverani-Saussol-Vaienti map.
pub fn lsv_apply(x: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        bail!(Domain, "x = {x} is outside [0, 1]");
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        bail!(InvalidParameter, "alpha must be positive and finite, got {alpha}");
    }
    Ok(if x <= 0.5 { lsv_left(x, alpha) } else { 2.0 * x - 1.0 })
}

/// Inverse of the left branch: the unique `x` in `[0, 1/2]` with
/// `x (1 + (2x)^alpha) = y`. Newton's method inside a bisection bracket.
pub fn left_branch_preimage(y: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&y) {
        bail!(Domain, "y = {y} is outside [0, 1]");
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        bail!(InvalidParameter, "alpha must be positive and finite, got {alpha}");
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    if y == 1.0 {
        return Ok(0.5);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    let mut x = y / (1.0 + math::powf(2.0 * y, alpha));
    for _ in 0..200 {
        let p = math::powf(2.0 * x, alpha);
        let fx = x * (1.0 + p) - y;
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let mut next = x - fx / (1.0 + (1.0 + alpha) * p);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if math::abs(next - x) <= 4.0 * f64::EPSILON * x || hi - lo <= f64::EPSILON * x {
            let r = lsv_left(next, alpha) - y;
            if math::abs(r) > 1e-13 {
                bail!(NoConvergence, "preimage of {y}: residual {r}");
            }
            return Ok(next);
        }
        x = next;
    }
    bail!(NoConvergence, "preimage of {y} did not converge")
}

/// `z[0] = 1`, `z[1] = 1/2`, `z[k+1] = left preimage of z[k]`, up to `z[n_max]`.
pub fn boundary_sequence(alpha: f64, n_max: usize) -> Result<Vec<f64>> {
    let mut z = Vec::with_capacity(n_max + 1);
    z.push(1.0);
    if n_max >= 1 {
        z.push(0.5);
    }
    for k in 1..n_max {
        let next = left_branch_preimage(z[k], alpha)?;
        z.push(next);
    }
    Ok(z)
}

/// Piece of Y on which the first return time is constant and the return map
/// is a single smooth branch. Positions are stored as offsets `u = x - 1/2`
/// so that pieces accumulating at 1/2 keep full relative precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnPiece {
    /// Return time; `n_max + 1` marks the lumped overflow piece.
    pub n: usize,
    /// Index into the right branch table.
    pub branch: usize,
    pub ulo: f64,
    pub uhi: f64,
    /// Image of the piece after its first step, inside (0, 1].
    pub wlo: f64,
    pub whi: f64,
    /// Image under the return map, inside [1/2, 1].
    pub ylo: f64,
    pub yhi: f64,
    /// The return map is onto Y.
    pub full: bool,
}

impl ReturnPiece {
    #[inline]
    pub fn lo(&self) -> f64 {
        0.5 + self.ulo
    }
    #[inline]
    pub fn hi(&self) -> f64 {
        0.5 + self.uhi
    }
    #[inline]
    pub fn len(&self) -> f64 {
        self.uhi - self.ulo
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.uhi <= self.ulo
    }
    /// Number of left-branch steps after the first one.
    #[inline]
    pub fn depth(&self) -> usize {
        self.n - 1
    }
}

/// First-return partition of Y truncated at `n_max`.
#[derive(Debug, Clone)]
pub struct ReturnPartition {
    pub map: IntervalMapSpec,
    pub n_max: usize,
    /// `z[k]` for `k = 0..=n_max`.
    pub z: Vec<f64>,
    /// Sorted by position.
    pub pieces: Vec<ReturnPiece>,
}

impl ReturnPartition {
    pub fn alpha(&self) -> f64 {
        self.map.alpha
    }

    /// Pieces with return time exactly `n`.
    pub fn cells(&self, n: usize) -> impl Iterator<Item = &ReturnPiece> {
        self.pieces.iter().filter(move |p| p.n == n)
    }

    /// Lebesgue measure of {phi = n} for `n = 1..=n_max + 1`, index `n - 1`.
    pub fn lebesgue_lengths(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_max + 1];
        for p in &self.pieces {
            out[p.n - 1] += p.len();
        }
        out
    }

    /// Lebesgue measure of the lumped region {phi > n_max}.
    pub fn overflow_length(&self) -> f64 {
        self.pieces.iter().filter(|p| p.n > self.n_max).map(|p| p.len()).sum()
    }

    /// Return time of a point of Y, from the partition; `None` off Y.
    pub fn return_time(&self, x: f64) -> Option<usize> {
        let u = x - 0.5;
        if !(u > 0.0 && u <= 0.5) {
            return None;
        }
        let idx = self.pieces.partition_point(|p| p.uhi < u);
        self.pieces.get(idx).map(|p| p.n)
    }
}

/// Iterate the left branch `k` times.
fn left_iterate(mut w: f64, alpha: f64, k: usize) -> f64 {
    for _ in 0..k {
        w = lsv_left(w, alpha);
    }
    w
}

/// Return partition with exact endpoints from the boundary sequence. The
/// region {phi > n_max} is kept as overflow pieces with `n = n_max + 1`.
pub fn build_return_partition(map: &IntervalMapSpec, n_max: usize) -> Result<ReturnPartition> {
    map.validate()?;
    if n_max < 2 {
        bail!(InvalidParameter, "n_max must be at least 2, got {n_max}");
    }
    let alpha = map.alpha;
    let z = boundary_sequence(alpha, n_max)?;
    let mut pieces = Vec::new();
    for (bi, b) in map.right.iter().enumerate() {
        let (a, c) = b.image();
        let (a, c) = (a.max(0.0), c.min(1.0));
        let shift = b.apply(0.5);
        let to_u = |w: f64| -> f64 {
            if w == a {
                b.lo - 0.5
            } else if w == c {
                b.hi - 0.5
            } else {
                (w - shift) / b.slope
            }
        };
        let mut push = |n: usize, wlo: f64, whi: f64, full: bool| {
            let (ylo, yhi) = if full {
                (0.5, 1.0)
            } else {
                let d = n - 1;
                let lo_img = if wlo <= z[n] { 0.5 } else { left_iterate(wlo, alpha, d) };
                let hi_img = if whi >= z[n - 1] { 1.0 } else { left_iterate(whi, alpha, d) };
                (lo_img, hi_img)
            };
            let piece = ReturnPiece {
                n,
                branch: bi,
                ulo: to_u(wlo),
                uhi: to_u(whi),
                wlo,
                whi,
                ylo,
                yhi,
                full,
            };
            if !piece.is_empty() {
                pieces.push(piece);
            }
        };
        for n in 1..=n_max {
            let (lo_n, hi_n) = (z[n], z[n - 1]);
            if hi_n <= a {
                break;
            }
            if lo_n >= c {
                continue;
            }
            let wlo = a.max(lo_n);
            let whi = c.min(hi_n);
            let full = wlo == lo_n && whi == hi_n;
            push(n, wlo, whi, full);
        }
        if a < z[n_max] {
            // overflow: treated as a full branch of return time n_max + 1
            let whi = c.min(z[n_max]);
            let piece = ReturnPiece {
                n: n_max + 1,
                branch: bi,
                ulo: to_u(a),
                uhi: to_u(whi),
                wlo: a,
                whi,
                ylo: 0.5,
                yhi: 1.0,
                full: true,
            };
            if !piece.is_empty() {
                pieces.push(piece);
            }
        }
    }
    pieces.sort_by(|p, q| p.ulo.partial_cmp(&q.ulo).unwrap_or(core::cmp::Ordering::Equal));
    Ok(ReturnPartition { map: map.clone(), n_max, z, pieces })
}

/// First return map to Y. Returns the image and the return time.
pub fn induced_apply(map: &IntervalMapSpec, x: f64, cap: u64) -> Result<(f64, u64)> {
    if !(x > 0.5 && x <= 1.0) {
        bail!(Domain, "x = {x} is not in Y = (1/2, 1]");
    }
    let mut y = map.apply(x);
    let mut n = 1u64;
    while y <= 0.5 {
        if n > cap {
            return Err(Error::Trapped(cap));
        }
        y = lsv_left(y, map.alpha);
        n += 1;
    }
    Ok((y, n))
}

/// Fiber maps `g(x, y)` on `[0, 1]`. All are increasing contractions in `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FiberMap {
    /// `g = (y + b(x)) / B` with `b` the branch index and `B` the branch
    /// count; for a two-branch map this is `(y + 1_{x > 1/2}) / 2`.
    Stacked,
    /// Stacked plus a shear `eps * y (1 - y) sin(2 pi x) / B`, `|eps| < 1`.
    Sheared { eps: f64 },
}

/// `f(x, y) = (f0(x), g(x, y))` on `[0,1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewProduct {
    pub map: IntervalMapSpec,
    pub fiber: FiberMap,
}

impl SkewProduct {
    pub fn new(map: IntervalMapSpec, fiber: FiberMap) -> Result<Self> {
        map.validate()?;
        if let FiberMap::Sheared { eps } = fiber {
            if !(eps.is_finite() && math::abs(eps) < 1.0) {
                bail!(InvalidParameter, "shear must satisfy |eps| < 1, got {eps}");
            }
        }
        Ok(Self { map, fiber })
    }

    #[inline]
    pub fn fiber_apply(&self, x: f64, y: f64) -> f64 {
        let b = self.map.branch_index(x) as f64;
        let count = self.map.branch_count() as f64;
        match self.fiber {
            FiberMap::Stacked => (y + b) / count,
            FiberMap::Sheared { eps } => {
                (y + b + eps * y * (1.0 - y) * math::sin(2.0 * math::PI * x)) / count
            }
        }
    }

    /// `(dg/dx, dg/dy)`.
    #[inline]
    pub fn fiber_partials(&self, x: f64, y: f64) -> (f64, f64) {
        let count = self.map.branch_count() as f64;
        match self.fiber {
            FiberMap::Stacked => (0.0, 1.0 / count),
            FiberMap::Sheared { eps } => {
                let t = 2.0 * math::PI * x;
                (
                    eps * y * (1.0 - y) * 2.0 * math::PI * math::cos(t) / count,
                    (1.0 + eps * (1.0 - 2.0 * y) * math::sin(t)) / count,
                )
            }
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.map.apply(x), self.fiber_apply(x, y))
    }
}

/// First return of the skew product to `Y x [0, 1]`.
pub fn skew_induced_apply(sp: &SkewProduct, x: f64, y: f64, cap: u64) -> Result<((f64, f64), u64)> {
    if !(x > 0.5 && x <= 1.0) {
        bail!(Domain, "x = {x} is not in Y = (1/2, 1]");
    }
    if !(0.0..=1.0).contains(&y) {
        bail!(Domain, "y = {y} is outside [0, 1]");
    }
    let (mut px, mut py) = sp.apply(x, y);
    let mut n = 1u64;
    while px <= 0.5 {
        if n > cap {
            return Err(Error::Trapped(cap));
        }
        let next = sp.apply(px, py);
        px = next.0;
        py = next.1;
        n += 1;
    }
    Ok(((px, py), n))
}

/// Constants measured by [`check_hyperbolicity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperbolicity {
    /// min of the horizontal derivative of the return map
    pub min_expansion: f64,
    /// max of |dG/dy|
    pub max_contraction: f64,
    /// max slope of DF applied to vectors in the unit horizontal cone
    pub max_cone_slope: f64,
    pub samples: usize,
    pub holds: bool,
}

/// Sample the return map of the skew product on a grid of `Y x [0,1]` and
/// check uniform expansion, fiber contraction and invariance of the cone
/// `{|v_y| <= |v_x|}`.
pub fn check_hyperbolicity(sp: &SkewProduct, samples: usize) -> Result<Hyperbolicity> {
    if samples == 0 {
        bail!(InvalidParameter, "need at least one sample");
    }
    let side = (math::sqrt(samples as f64) as usize).max(1);
    let mut h = Hyperbolicity {
        min_expansion: f64::INFINITY,
        max_contraction: 0.0,
        max_cone_slope: 0.0,
        samples: side * side,
        holds: false,
    };
    for i in 0..side {
        let x = 0.5 + 0.5 * (i as f64 + 0.5) / side as f64;
        for j in 0..side {
            let y = (j as f64 + 0.5) / side as f64;
            // DF is lower triangular: [[a, 0], [c, d]]; track a, d and c/a.
            let (mut px, mut py) = (x, y);
            let mut a = 1.0f64;
            let mut d = 1.0f64;
            let mut s = 0.0f64;
            let mut steps = 0u64;
            loop {
                let fa = sp.map.derivative(px);
                let (gx, gy) = sp.fiber_partials(px, py);
                s = gx / fa + (gy / fa) * s;
                a *= fa;
                d *= gy;
                let next = sp.apply(px, py);
                px = next.0;
                py = next.1;
                steps += 1;
                if px > 0.5 {
                    break;
                }
                if steps > DEFAULT_TRAP_CAP {
                    return Err(Error::Trapped(DEFAULT_TRAP_CAP));
                }
            }
            // a vector (1, t) with |t| <= 1 maps to slope s + (d/a) t
            let cone = math::abs(s) + math::abs(d / a);
            h.min_expansion = h.min_expansion.min(a);
            h.max_contraction = h.max_contraction.max(math::abs(d));
            h.max_cone_slope = h.max_cone_slope.max(cone);
        }
    }
    h.holds = h.min_expansion > 1.0 && h.max_contraction < 1.0 && h.max_cone_slope <= 1.0;
    Ok(h)
}

/// Fraction of an even `cells`-cell grid of Y hit after `iterates` applications
/// of the return map to `samples` points spread over `(start_lo, start_hi]`.
/// Used as an empirical topological-mixing check.
pub fn mixing_coverage(
    map: &IntervalMapSpec,
    start_lo: f64,
    start_hi: f64,
    cells: usize,
    iterates: usize,
    samples: usize,
) -> Result<f64> {
    if !(start_lo >= 0.5 && start_hi <= 1.0 && start_lo < start_hi) {
        bail!(InvalidParameter, "start interval ({start_lo}, {start_hi}] is not inside Y");
    }
    if cells == 0 || samples == 0 {
        bail!(InvalidParameter, "cells and samples must be positive");
    }
    let mut hit = vec![false; cells];
    for k in 0..samples {
        let mut x = start_lo + (start_hi - start_lo) * (k as f64 + 0.5) / samples as f64;
        for _ in 0..iterates {
            x = induced_apply(map, x, DEFAULT_TRAP_CAP)?.0;
        }
        let c = (((x - 0.5) * 2.0 * cells as f64) as usize).min(cells - 1);
        hit[c] = true;
    }
    Ok(hit.iter().filter(|h| **h).count() as f64 / cells as f64)
}
