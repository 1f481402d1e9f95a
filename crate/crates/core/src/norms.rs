//! Weak and strong norms along vertical leaves for densities on
//! `Y x [0, 1]`, a grid transfer operator for the stacked LSV skew product,
//! and a numerical Lasota-Yorke audit.
//!
//! Every norm here is a sup over a finite test family, so it is a lower
//! bound for the true norm. The audit is a consistency check, not a proof.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::fit::line_fit;
use crate::maps::{boundary_sequence, left_branch_preimage, FiberMap, MapKind, SkewProduct};
use crate::math;

/// Smallest number of nodes on a leaf.
pub const MIN_LEAF_NODES: usize = 64;

/// Density sampled at `mx` column centers `x_i = 1/2 + (i + 1/2) / (2 mx)`
/// and `my` nodes `y_j = j / (my - 1)` per leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafFunction {
    pub mx: usize,
    pub my: usize,
    /// `values[i * my + j]`
    pub values: Vec<f64>,
}

impl LeafFunction {
    pub fn new(mx: usize, my: usize, values: Vec<f64>) -> Result<Self> {
        if mx < 2 || my < MIN_LEAF_NODES {
            bail!(InvalidParameter, "need mx >= 2 and my >= {MIN_LEAF_NODES}, got {mx} x {my}");
        }
        if values.len() != mx * my {
            bail!(InvalidParameter, "{} values for a {mx} x {my} grid", values.len());
        }
        if values.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "leaf function has non-finite values");
        }
        Ok(Self { mx, my, values })
    }

    pub fn from_fn(mx: usize, my: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(mx * my);
        for i in 0..mx {
            let x = column_center(mx, i);
            for j in 0..my {
                values.push(f(x, node(my, j)));
            }
        }
        Self::new(mx, my, values)
    }

    #[inline]
    pub fn leaf(&self, i: usize) -> &[f64] {
        &self.values[i * self.my..(i + 1) * self.my]
    }

    pub fn x(&self, i: usize) -> f64 {
        column_center(self.mx, i)
    }

    /// Midpoint in x, trapezoid in y.
    pub fn total(&self) -> f64 {
        let tw = trapezoid_weights(self.my);
        let dx = 0.5 / self.mx as f64;
        let mut s = math::KahanSum::new();
        for i in 0..self.mx {
            s.add(dx * self.leaf(i).iter().zip(&tw).map(|(a, b)| a * b).sum::<f64>());
        }
        s.value()
    }

    /// `int int h phi` with `phi` evaluated at the grid points.
    pub fn pair(&self, phi: impl Fn(f64, f64) -> f64) -> f64 {
        let tw = trapezoid_weights(self.my);
        let dx = 0.5 / self.mx as f64;
        let mut s = math::KahanSum::new();
        for i in 0..self.mx {
            let x = self.x(i);
            for (j, (h, w)) in self.leaf(i).iter().zip(&tw).enumerate() {
                s.add(dx * w * h * phi(x, node(self.my, j)));
            }
        }
        s.value()
    }
}

#[inline]
fn column_center(mx: usize, i: usize) -> f64 {
    0.5 + (i as f64 + 0.5) / (2.0 * mx as f64)
}

#[inline]
fn node(my: usize, j: usize) -> f64 {
    j as f64 / (my - 1) as f64
}

fn trapezoid_weights(my: usize) -> Vec<f64> {
    let d = 1.0 / (my - 1) as f64;
    let mut w = vec![d; my];
    w[0] = 0.5 * d;
    w[my - 1] = 0.5 * d;
    w
}

/// `int_0^1 h(x_i, t) phi(t) dt` by the composite trapezoid rule.
pub fn leaf_integral(h: &LeafFunction, i: usize, phi: &[f64]) -> Result<f64> {
    if i >= h.mx {
        bail!(InvalidParameter, "leaf {i} out of range");
    }
    if phi.len() != h.my {
        bail!(InvalidParameter, "test function has {} nodes, leaf has {}", phi.len(), h.my);
    }
    let l = h.leaf(i);
    let inner: f64 = l[1..h.my - 1].iter().zip(&phi[1..h.my - 1]).map(|(a, b)| a * b).sum();
    let ends = 0.5 * (l[0] * phi[0] + l[h.my - 1] * phi[h.my - 1]);
    Ok((inner + ends) / (h.my - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Cheb(usize),
    Cos(usize),
    Sin(usize),
    /// `sin^2(pi s)` on `[0, 1]`, zero outside
    Bump,
    /// `sin(2 pi s) sin(pi s)` on `[0, 1]`, zero outside
    Dipole,
}

impl Shape {
    /// value and derivative at `t`
    fn eval(self, t: f64) -> (f64, f64) {
        let pi = math::PI;
        match self {
            Shape::Cheb(k) => {
                // T_k(s), with T_k' = k U_{k-1}, s = 2t - 1
                if k == 0 {
                    return (1.0, 0.0);
                }
                let s = 2.0 * t - 1.0;
                let (mut t0, mut t1) = (1.0, s);
                let (mut u0, mut u1) = (1.0, 2.0 * s);
                let mut u_prev = u0;
                for _ in 1..k {
                    let t2 = 2.0 * s * t1 - t0;
                    t0 = t1;
                    t1 = t2;
                    u_prev = u1;
                    let u2 = 2.0 * s * u1 - u0;
                    u0 = u1;
                    u1 = u2;
                }
                (t1, 2.0 * k as f64 * u_prev)
            }
            Shape::Cos(k) => {
                let a = pi * k as f64;
                (math::cos(a * t), -a * math::sin(a * t))
            }
            Shape::Sin(k) => {
                let a = pi * k as f64;
                (math::sin(a * t), a * math::cos(a * t))
            }
            Shape::Bump => {
                if !(0.0..=1.0).contains(&t) {
                    return (0.0, 0.0);
                }
                let s = math::sin(pi * t);
                (s * s, pi * math::sin(2.0 * pi * t))
            }
            Shape::Dipole => {
                if !(0.0..=1.0).contains(&t) {
                    return (0.0, 0.0);
                }
                let (s1, c1) = (math::sin(pi * t), math::cos(pi * t));
                let (s2, c2) = (math::sin(2.0 * pi * t), math::cos(2.0 * pi * t));
                (s2 * s1, 2.0 * pi * c2 * s1 + pi * s2 * c1)
            }
        }
    }
}

/// Chebyshev degrees 0..=12 and trigonometric modes 1..=12.
pub const DEFAULT_BASIS: usize = 37;
/// Degrees and modes up to 64.
pub const MAX_BASIS: usize = 193;
const MAX_MODE: usize = 64;

/// `(sup, lip, hoelder)` of a shape on `[0, 1]`. The Hoelder seminorm is
/// taken over short separations on a dense grid plus all separations on a
/// coarse one.
fn shape_norms(s: Shape, q: f64) -> (f64, f64, f64) {
    let dense = 16385;
    let short = 64;
    let coarse = 513;
    let mut sup = 0.0f64;
    let mut lip = 0.0f64;
    let mut vals = Vec::with_capacity(dense);
    for k in 0..dense {
        let (v, d) = s.eval(k as f64 / (dense - 1) as f64);
        sup = sup.max(math::abs(v));
        lip = lip.max(math::abs(d));
        vals.push(v);
    }
    let pow_fine: Vec<f64> = (0..=short).map(|d| math::powf(d as f64 / (dense - 1) as f64, q)).collect();
    let pow_coarse: Vec<f64> = (0..coarse).map(|d| math::powf(d as f64 / (coarse - 1) as f64, q)).collect();
    let mut hq = 0.0f64;
    for a in 0..dense {
        for d in 1..=short.min(dense - 1 - a) {
            hq = hq.max(math::abs(vals[a + d] - vals[a]) / pow_fine[d]);
        }
    }
    let step = (dense - 1) / (coarse - 1);
    for a in 0..coarse {
        for b in a + 1..coarse {
            hq = hq.max(math::abs(vals[b * step] - vals[a * step]) / pow_coarse[b - a]);
        }
    }
    // |s - t| <= 1 on the leaf
    (sup, lip, hq.min(lip))
}

/// A test function tabulated on the leaf nodes `start..start + vals.len()`,
/// zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub start: usize,
    pub vals: Vec<f64>,
    pub c1: f64,
    pub cq: f64,
}

/// Global polynomial and trigonometric test functions, optionally joined by
/// bumps and dipoles on every dyadic interval of levels `0..levels`.
/// The dyadic part follows the stacked fiber, which maps leaves onto dyadic
/// intervals, so iterates carry structure at those scales.
#[derive(Debug, Clone)]
pub struct TestFamily {
    pub q: f64,
    pub my: usize,
    pub global: usize,
    pub levels: usize,
    pub funcs: Vec<TestFunction>,
}

impl TestFamily {
    /// First `size` functions of the round-robin order
    /// `T_0, cos 1, sin 1, T_1, cos 2, sin 2, ...`.
    pub fn new(size: usize, my: usize, q: f64) -> Result<Self> {
        Self::with_levels(size, 0, my, q)
    }

    /// Finest usable dyadic level count: level `k` needs two cells per interval.
    pub fn max_levels(my: usize) -> usize {
        let mut l = 0;
        while (my - 1) >> l >= 2 {
            l += 1;
        }
        l
    }

    pub fn with_levels(size: usize, levels: usize, my: usize, q: f64) -> Result<Self> {
        if !(8..=MAX_BASIS).contains(&size) {
            bail!(InvalidParameter, "basis size must lie in [8, {MAX_BASIS}], got {size}");
        }
        if !(q > 0.0 && q < 1.0) {
            bail!(InvalidParameter, "Hoelder exponent must lie in (0, 1), got {q}");
        }
        if my < MIN_LEAF_NODES {
            bail!(InvalidParameter, "need at least {MIN_LEAF_NODES} leaf nodes");
        }
        if levels > Self::max_levels(my) {
            bail!(InvalidParameter, "{levels} dyadic levels exceed the {} that {my} nodes resolve", Self::max_levels(my));
        }
        let mut shapes = Vec::with_capacity(MAX_BASIS);
        for k in 0..=MAX_MODE {
            shapes.push(Shape::Cheb(k));
            if k < MAX_MODE {
                shapes.push(Shape::Cos(k + 1));
                shapes.push(Shape::Sin(k + 1));
            }
        }
        shapes.truncate(size);
        let mut funcs = Vec::new();
        for s in shapes {
            let (sup, lip, hq) = shape_norms(s, q);
            funcs.push(TestFunction {
                start: 0,
                vals: (0..my).map(|j| s.eval(node(my, j)).0).collect(),
                c1: sup + lip,
                cq: sup + hq,
            });
        }
        if levels > 0 {
            let cells = (my - 1) as f64;
            for s in [Shape::Bump, Shape::Dipole] {
                let (sup, lip, hq) = shape_norms(s, q);
                for k in 0..levels {
                    let scale = (1usize << k) as f64;
                    for j in 0..1usize << k {
                        let lo = libm::ceil(j as f64 * cells / scale) as usize;
                        let hi = (libm::floor((j + 1) as f64 * cells / scale) as usize).min(my - 1);
                        let vals: Vec<f64> = (lo..=hi).map(|n| s.eval(node(my, n) * scale - j as f64).0).collect();
                        funcs.push(TestFunction {
                            start: lo,
                            vals,
                            c1: sup + scale * lip,
                            cq: sup + (math::powf(scale, q) * hq).min(scale * lip),
                        });
                    }
                }
            }
        }
        Ok(Self { q, my, global: size, levels, funcs })
    }

    pub fn len(&self) -> usize {
        self.funcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.funcs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    pub weak: f64,
    pub strong_stable: f64,
    pub unstable: f64,
    pub basis_size: usize,
    /// estimates are lower bounds of suprema
    pub lower_bound: bool,
}

impl NormEstimate {
    pub fn strong(&self) -> f64 {
        self.strong_stable + self.unstable
    }
}

/// Sup of leaf integrals over the family, normalized in C^1 (weak) and C^q
/// (strong stable); unstable compares leaves at most `window` columns apart.
pub fn estimate_norms(h: &LeafFunction, family: &TestFamily, window: usize) -> Result<NormEstimate> {
    if family.my != h.my {
        bail!(InvalidParameter, "test family has {} nodes, leaves have {}", family.my, h.my);
    }
    if window == 0 {
        bail!(InvalidParameter, "leaf window must be positive");
    }
    let k = family.len();
    let tw = trapezoid_weights(h.my);
    let mut ints = vec![0.0; h.mx * k];
    let mut weighted = vec![0.0; h.my];
    for i in 0..h.mx {
        for (w, (a, b)) in weighted.iter_mut().zip(h.leaf(i).iter().zip(&tw)) {
            *w = a * b;
        }
        for (f, phi) in family.funcs.iter().enumerate() {
            ints[i * k + f] = weighted[phi.start..phi.start + phi.vals.len()].iter().zip(&phi.vals).map(|(a, b)| a * b).sum();
        }
    }
    let (mut weak, mut strong, mut unstable) = (0.0f64, 0.0f64, 0.0f64);
    let dx = 0.5 / h.mx as f64;
    for i in 0..h.mx {
        for (f, phi) in family.funcs.iter().enumerate() {
            let a = math::abs(ints[i * k + f]);
            weak = weak.max(a / phi.c1);
            strong = strong.max(a / phi.cq);
            for d in 1..=window {
                if i + d >= h.mx {
                    break;
                }
                let diff = math::abs(ints[(i + d) * k + f] - ints[i * k + f]) / (d as f64 * dx);
                unstable = unstable.max(diff / phi.c1);
            }
        }
    }
    Ok(NormEstimate { weak, strong_stable: strong, unstable, basis_size: k, lower_bound: true })
}

/// Grid transfer operator of the first-return map of the stacked LSV skew
/// product, `F(x, y) = (F0(x), (y + 1) / 2^n)` on the piece with return time
/// `n`.
///
/// The x-direction pulls each column center back along the preimage ladder
/// and interpolates linearly between columns. The y-direction moves mass:
/// leaf mass is deposited onto the target nodes with hat weights, which
/// conserves it even on strips far thinner than a cell. Strips thinner than
/// a quarter cell go in through their mass and first moment, which is the
/// same hat deposit computed in closed form. Return times past the ladder
/// depth are lumped at `y = 0` with a weight extrapolated from the last rung.
#[derive(Debug, Clone)]
pub struct LeafTransfer {
    pub mx: usize,
    pub my: usize,
    pub depth: usize,
    /// fractional column index of the rung `n` preimage, `[i * depth + n - 1]`
    pos: Vec<f64>,
    /// `1 / F0'` at that preimage
    weight: Vec<f64>,
    /// weight of everything with return time above `depth`, per column
    overflow: Vec<f64>,
}

impl LeafTransfer {
    pub fn new(sp: &SkewProduct, mx: usize, my: usize, depth: usize) -> Result<Self> {
        if sp.map.kind != MapKind::Lsv || sp.fiber != FiberMap::Stacked {
            bail!(InvalidParameter, "leaf transfer is implemented for the stacked LSV skew product only");
        }
        if mx < 2 || my < MIN_LEAF_NODES || depth < 2 {
            bail!(InvalidParameter, "need mx >= 2, my >= {MIN_LEAF_NODES}, depth >= 2");
        }
        let alpha = sp.map.alpha;
        let z = boundary_sequence(alpha, depth)?;
        let mut pos = vec![0.0; mx * depth];
        let mut weight = vec![0.0; mx * depth];
        let mut overflow = vec![0.0; mx];
        let col = |x: f64| (x - 0.5) * 2.0 * mx as f64 - 0.5;
        for i in 0..mx {
            let target = column_center(mx, i);
            // rung 1: straight through the right branch
            pos[i * depth] = col(0.5 * (target + 1.0));
            weight[i * depth] = 0.5;
            let mut b = target;
            let mut jac = 2.0;
            for n in 2..=depth {
                b = left_branch_preimage(b, alpha)?;
                jac *= sp.map.derivative(b);
                pos[i * depth + n - 1] = col(0.5 * (b + 1.0));
                weight[i * depth + n - 1] = 1.0 / jac;
            }
            // the last rung's weight relative to its piece length carries over
            let len_last = z[depth - 1] - z[depth];
            overflow[i] = weight[i * depth + depth - 1] * z[depth] / len_last;
        }
        Ok(Self { mx, my, depth, pos, weight, overflow })
    }

    fn check(&self, h: &LeafFunction) -> Result<()> {
        if h.mx != self.mx || h.my != self.my {
            bail!(InvalidParameter, "leaf function grid {} x {} does not match {} x {}", h.mx, h.my, self.mx, self.my);
        }
        Ok(())
    }

    pub fn apply(&self, h: &LeafFunction) -> Result<LeafFunction> {
        self.check(h)?;
        self.push(h, 1, self.depth, true)
    }

    /// Only the pieces with return time `n`.
    pub fn apply_slice(&self, h: &LeafFunction, n: usize) -> Result<LeafFunction> {
        self.check(h)?;
        if n == 0 || n > self.depth {
            bail!(InvalidParameter, "return time {n} outside 1..={}", self.depth);
        }
        self.push(h, n, n, false)
    }

    fn push(&self, h: &LeafFunction, n_lo: usize, n_hi: usize, with_overflow: bool) -> Result<LeafFunction> {
        let (mx, my) = (self.mx, self.my);
        let tw = trapezoid_weights(my);
        let dy = 1.0 / (my - 1) as f64;
        let mut col_mass = vec![0.0; mx];
        let mut col_mom = vec![0.0; mx];
        for i in 0..mx {
            let l = h.leaf(i);
            for j in 0..my {
                col_mass[i] += tw[j] * l[j];
                col_mom[i] += tw[j] * l[j] * node(my, j);
            }
        }
        let interp = |p: f64| -> (usize, usize, f64) {
            if p <= 0.0 {
                (0, 0, 0.0)
            } else if p >= (mx - 1) as f64 {
                (mx - 1, mx - 1, 0.0)
            } else {
                let a = p as usize;
                (a, a + 1, p - a as f64)
            }
        };
        let mut out = vec![0.0; mx * my];
        let mut acc = vec![0.0; my];
        for i in 0..mx {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for n in n_lo..=n_hi {
                let w = self.weight[i * self.depth + n - 1];
                let (a, b, th) = interp(self.pos[i * self.depth + n - 1]);
                let scale = math::powf(2.0, -(n as f64));
                if scale >= 0.25 * dy {
                    let (la, lb) = (h.leaf(a), h.leaf(b));
                    for j in 0..my {
                        let m = w * tw[j] * ((1.0 - th) * la[j] + th * lb[j]);
                        if m == 0.0 {
                            continue;
                        }
                        let p = (node(my, j) + 1.0) * scale / dy;
                        let k = (p as usize).min(my - 1);
                        let fr = p - k as f64;
                        if k + 1 < my {
                            acc[k] += m * (1.0 - fr);
                            acc[k + 1] += m * fr;
                        } else {
                            acc[k] += m;
                        }
                    }
                } else {
                    // the strip sits inside [0, y_1]
                    let mass = w * ((1.0 - th) * col_mass[a] + th * col_mass[b]);
                    let mom = w * ((1.0 - th) * col_mom[a] + th * col_mom[b]);
                    let first = (mom + mass) * scale;
                    acc[0] += mass - first / dy;
                    acc[1] += first / dy;
                }
            }
            if with_overflow {
                acc[0] += self.overflow[i] * col_mass[0];
            }
            for j in 0..my {
                out[i * my + j] = acc[j] / tw[j];
            }
        }
        LeafFunction::new(mx, my, out)
    }
}

/// `(h id, n, strong, weak, bound, pass)` per audited iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct LyRecord {
    pub id: String,
    pub n: usize,
    pub strong: f64,
    pub weak: f64,
    /// `slack (lambda^{-nq} strong(h) + C weak(h))`
    pub bound: f64,
    pub pass: bool,
    /// largest relative change of any norm component between the two bases
    pub basis_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyReport {
    pub lambda: f64,
    pub q: f64,
    /// smallest constant that works on the small basis
    pub c_fit: f64,
    pub slack: f64,
    pub records: Vec<LyRecord>,
    pub inequality_holds: bool,
    pub max_basis_change: f64,
    pub basis_stable: bool,
    /// per-application contraction of the strong norm on leaf-mean-free
    /// samples, `(id, geometric-mean ratio)`
    pub ratios: Vec<(String, f64)>,
    pub ratio_bound: f64,
    pub ratios_ok: bool,
}

pub struct LyAuditConfig<'a> {
    pub transfer: &'a LeafTransfer,
    pub small: &'a TestFamily,
    pub full: &'a TestFamily,
    /// largest power; every n in 0..=powers is audited
    pub powers: usize,
    pub window: usize,
    /// fiber contraction per return
    pub lambda: f64,
    pub slack: f64,
    pub basis_tolerance: f64,
    pub ratio_slack: f64,
}

/// Fit `C` so that `strong(R^n h) <= lambda^{-nq} strong(h) + C weak(h)` on
/// the small basis, then check it with slack on the full basis.
pub fn ly_audit(cfg: &LyAuditConfig, samples: &[(String, LeafFunction)]) -> Result<LyReport> {
    if cfg.small.q != cfg.full.q || cfg.small.len() > cfg.full.len() || cfg.small.my != cfg.full.my {
        bail!(InvalidParameter, "the full basis must extend the small one with the same q");
    }
    if samples.is_empty() || cfg.powers == 0 {
        bail!(InvalidParameter, "need samples and at least one power");
    }
    let q = cfg.full.q;
    // norms[s][n] = (small, full)
    let mut norms: Vec<Vec<(NormEstimate, NormEstimate)>> = Vec::with_capacity(samples.len());
    let mut mean_free = Vec::with_capacity(samples.len());
    for (_, h) in samples {
        let mut cur = h.clone();
        let mut row = Vec::with_capacity(cfg.powers + 1);
        for n in 0..=cfg.powers {
            if n > 0 {
                cur = cfg.transfer.apply(&cur)?;
            }
            row.push((estimate_norms(&cur, cfg.small, cfg.window)?, estimate_norms(&cur, cfg.full, cfg.window)?));
        }
        norms.push(row);
        let tw = trapezoid_weights(h.my);
        let scale = h.values.iter().fold(0.0f64, |m, v| m.max(math::abs(*v)));
        let max_leaf = (0..h.mx)
            .map(|i| math::abs(h.leaf(i).iter().zip(&tw).map(|(a, b)| a * b).sum::<f64>()))
            .fold(0.0, f64::max);
        mean_free.push(max_leaf <= 1e-12 * scale.max(1e-300));
    }
    let contraction = |n: usize| math::powf(cfg.lambda, -(n as f64) * q);
    let mut c_fit = 0.0f64;
    for row in &norms {
        let (s0, w0) = (row[0].0.strong(), row[0].0.weak);
        for (n, (est, _)) in row.iter().enumerate().skip(1) {
            let excess = est.strong() - contraction(n) * s0;
            if excess > 0.0 {
                if w0 <= 0.0 {
                    bail!(CheckFailed, "strong norm grows on a sample with zero weak norm");
                }
                c_fit = c_fit.max(excess / w0);
            }
        }
    }
    let rel = |a: f64, b: f64| {
        let m = a.max(b);
        if m <= 1e-12 {
            0.0
        } else {
            math::abs(a - b) / m
        }
    };
    let mut records = Vec::new();
    let mut holds = true;
    let mut max_change = 0.0f64;
    let mut ratios = Vec::new();
    for (si, (id, _)) in samples.iter().enumerate() {
        let row = &norms[si];
        let (s0, w0) = (row[0].1.strong(), row[0].1.weak);
        // components are compared relative to the sample's own scale, so a
        // norm that has decayed to round-off does not dominate
        let floor = 1e-9 * (s0 + w0);
        for (n, (a, b)) in row.iter().enumerate() {
            let change = [
                (a.weak, b.weak),
                (a.strong_stable, b.strong_stable),
                (a.unstable, b.unstable),
            ]
            .iter()
            .filter(|(x, y)| x.max(*y) > floor)
            .map(|(x, y)| rel(*x, *y))
            .fold(0.0, f64::max);
            max_change = max_change.max(change);
            let bound = cfg.slack * (contraction(n) * s0 + c_fit * w0);
            let pass = n == 0 || b.strong() <= bound;
            holds &= pass;
            records.push(LyRecord {
                id: id.clone(),
                n,
                strong: b.strong(),
                weak: b.weak,
                bound,
                pass,
                basis_change: change,
            });
        }
        if mean_free[si] && s0 > 0.0 {
            let last = row[cfg.powers].1.strong();
            ratios.push((id.clone(), math::powf(last / s0, 1.0 / cfg.powers as f64)));
        }
    }
    let ratio_bound = math::powf(cfg.lambda, -q) + cfg.ratio_slack;
    let ratios_ok = ratios.iter().all(|(_, r)| *r <= ratio_bound);
    Ok(LyReport {
        lambda: cfg.lambda,
        q,
        c_fit,
        slack: cfg.slack,
        records,
        inequality_holds: holds,
        max_basis_change: max_change,
        basis_stable: max_change <= cfg.basis_tolerance,
        ratios,
        ratio_bound,
        ratios_ok,
    })
}

/// `(slope, its standard error, (n, strong norm) points)`
pub type SlopeFit = (f64, f64, Vec<(usize, f64)>);

/// Slope of `log strong(R_n h)` against `log n` over the given return times.
pub fn slice_norm_slope(
    transfer: &LeafTransfer,
    h: &LeafFunction,
    family: &TestFamily,
    window: usize,
    times: &[usize],
) -> Result<SlopeFit> {
    let mut pts = Vec::with_capacity(times.len());
    for &n in times {
        let s = estimate_norms(&transfer.apply_slice(h, n)?, family, window)?.strong();
        pts.push((n, s));
    }
    let lx: Vec<f64> = pts.iter().map(|(n, _)| math::ln(*n as f64)).collect();
    let ly: Vec<f64> = pts.iter().map(|(_, s)| math::ln(*s)).collect();
    if ly.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "slice norm vanished");
    }
    let (_, slope, _, se) = line_fit(&lx, &ly)?;
    Ok((slope, se, pts))
}

/// Mixed smooth and rough samples for the audit, `count` of them cycling
/// through a fixed list with varying parameters.
pub fn mixed_samples(mx: usize, my: usize, count: usize) -> Result<Vec<(String, LeafFunction)>> {
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let p = (k / 10) as f64;
        let (id, f): (String, alloc::boxed::Box<dyn Fn(f64, f64) -> f64>) = match k % 10 {
            0 => ("one".into(), alloc::boxed::Box::new(|_, _| 1.0)),
            1 => (alloc::format!("sign_y_{k}"), alloc::boxed::Box::new(move |_, y| {
                let c = 0.5 - 0.1 * p;
                if y > c { 1.0 } else if y < c { -1.0 } else { 0.0 }
            })),
            2 => (alloc::format!("sin_y_{k}"), alloc::boxed::Box::new(move |_, y| math::sin(2.0 * math::PI * (1.0 + p) * y))),
            3 => (alloc::format!("smooth_xy_{k}"), alloc::boxed::Box::new(move |x, y| (1.0 + x * x) * math::cos(math::PI * (1.0 + p) * y) + 0.5)),
            4 => (alloc::format!("step_x_{k}"), alloc::boxed::Box::new(move |x, _| if x > 0.7 + 0.05 * p { 2.0 } else { 0.5 })),
            5 => (alloc::format!("cusp_y_{k}"), alloc::boxed::Box::new(move |_, y| math::powf(math::abs(y - 1.0 / 3.0), 0.3 + 0.2 * p))),
            6 => (alloc::format!("saw_y_{k}"), alloc::boxed::Box::new(move |_, y| {
                let t = y * (3.0 + p);
                t - math::floor(t) - 0.5
            })),
            7 => (alloc::format!("poly_x_{k}"), alloc::boxed::Box::new(move |x, y| (x - 0.5) * (1.0 - x) * 8.0 + y * (1.0 + p))),
            8 => (alloc::format!("checker_{k}"), alloc::boxed::Box::new(move |x, y| {
                let a = math::floor(x * (8.0 + 4.0 * p)) as i64;
                let b = math::floor(y * 4.0) as i64;
                if (a + b) % 2 == 0 { 1.0 } else { -0.5 }
            })),
            _ => (alloc::format!("osc_xy_{k}"), alloc::boxed::Box::new(move |x, y| math::sin(6.0 * x * (1.0 + p)) * (y - 0.5))),
        };
        out.push((id, LeafFunction::from_fn(mx, my, f)?));
    }
    Ok(out)
}

/// Per-branch bounds on `|F0'(x) / F0'(x') - 1|` divided by `|x - x'|`
/// (domain form) and by `|F0 x - F0 x'|` (image form), sampled with `points`
/// targets and again with twice as many. On LSV the domain form is finite on
/// each branch but grows like `F0'` with the return time; the image form is
/// uniformly bounded.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionReport {
    /// `(n, domain bound, image bound)` at the base sampling
    pub per_branch: Vec<(usize, f64, f64)>,
    pub max_domain: f64,
    pub max_image: f64,
    pub refined_max_domain: f64,
    pub refined_max_image: f64,
    pub finite: bool,
    /// largest relative change of a per-branch bound under refinement
    pub refinement_change: f64,
}

pub fn distortion_check(sp: &SkewProduct, branches: usize, points: usize) -> Result<DistortionReport> {
    if sp.map.kind != MapKind::Lsv {
        bail!(InvalidParameter, "distortion check runs on the LSV map");
    }
    if branches == 0 || points < 3 {
        bail!(InvalidParameter, "need at least one branch and three points");
    }
    let run = |pts: usize| -> Result<Vec<(f64, f64)>> {
        let alpha = sp.map.alpha;
        // (x_n, F0'(x_n)) for each target and rung
        let mut xs = vec![0.0; pts * branches];
        let mut ds = vec![0.0; pts * branches];
        let mut targets = vec![0.0; pts];
        for k in 0..pts {
            let target = 0.5 + 0.5 * (k as f64 + 0.5) / pts as f64;
            targets[k] = target;
            xs[k * branches] = 0.5 * (target + 1.0);
            ds[k * branches] = 2.0;
            let mut b = target;
            let mut jac = 2.0;
            for n in 2..=branches {
                b = left_branch_preimage(b, alpha)?;
                jac *= sp.map.derivative(b);
                xs[k * branches + n - 1] = 0.5 * (b + 1.0);
                ds[k * branches + n - 1] = jac;
            }
        }
        let mut out = vec![(0.0f64, 0.0f64); branches];
        for n in 0..branches {
            for k in 0..pts - 1 {
                let (xa, xb) = (xs[k * branches + n], xs[(k + 1) * branches + n]);
                let (da, db) = (ds[k * branches + n], ds[(k + 1) * branches + n]);
                let dev = math::abs(da / db - 1.0);
                let dx = math::abs(xb - xa);
                if dx > 0.0 {
                    out[n].0 = out[n].0.max(dev / dx);
                }
                out[n].1 = out[n].1.max(dev / (targets[k + 1] - targets[k]));
            }
        }
        Ok(out)
    };
    let base = run(points)?;
    let fine = run(2 * points)?;
    let max_of = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).fold(0.0, f64::max);
    let mut change = 0.0f64;
    for (a, b) in base.iter().zip(&fine) {
        for (u, v) in [(a.0, b.0), (a.1, b.1)] {
            if u.max(v) > 0.0 {
                change = change.max(math::abs(u - v) / u.max(v));
            }
        }
    }
    let r = DistortionReport {
        per_branch: base.iter().enumerate().map(|(n, b)| (n + 1, b.0, b.1)).collect(),
        max_domain: max_of(&base, |b| b.0),
        max_image: max_of(&base, |b| b.1),
        refined_max_domain: max_of(&fine, |b| b.0),
        refined_max_image: max_of(&fine, |b| b.1),
        finite: false,
        refinement_change: change,
    };
    let finite = [r.max_domain, r.max_image, r.refined_max_domain, r.refined_max_image].iter().all(|v| v.is_finite());
    Ok(DistortionReport { finite, ..r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::IntervalMapSpec;

    fn sp() -> SkewProduct {
        SkewProduct::new(IntervalMapSpec::lsv(4.0 / 3.0).unwrap(), FiberMap::Stacked).unwrap()
    }

    #[test]
    fn leaf_integrals() {
        let one = LeafFunction::from_fn(4, 1024, |_, _| 1.0).unwrap();
        let ones = vec![1.0; 1024];
        assert!((leaf_integral(&one, 0, &ones).unwrap() - 1.0).abs() < 1e-12);
        let y = LeafFunction::from_fn(4, 1024, |_, y| y).unwrap();
        assert!((leaf_integral(&y, 2, &ones).unwrap() - 0.5).abs() < 1e-6);
        let s = LeafFunction::from_fn(4, 1024, |_, y| (2.0 * math::PI * y).sin()).unwrap();
        let phi: Vec<f64> = (0..1024).map(|j| (2.0 * math::PI * node(1024, j)).sin()).collect();
        assert!((leaf_integral(&s, 1, &phi).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn chebyshev_derivative() {
        for k in 0..8 {
            let t = 0.3;
            let (_, d) = Shape::Cheb(k).eval(t);
            let e = 1e-6;
            let fd = (Shape::Cheb(k).eval(t + e).0 - Shape::Cheb(k).eval(t - e).0) / (2.0 * e);
            assert!((d - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{k} {d} {fd}");
        }
    }

    #[test]
    fn constant_and_x_only_norms() {
        let fam = TestFamily::new(DEFAULT_BASIS, 128, 0.5).unwrap();
        let one = LeafFunction::from_fn(32, 128, |_, _| 1.0).unwrap();
        let e = estimate_norms(&one, &fam, 3).unwrap();
        assert!((e.weak - 1.0).abs() < 1e-12 && (e.strong_stable - 1.0).abs() < 1e-12);
        assert!(e.unstable < 1e-12);
        let a = LeafFunction::from_fn(256, 128, |x, _| (3.0 * x).sin()).unwrap();
        let e = estimate_norms(&a, &fam, 1).unwrap();
        let max_a = (0..256).map(|i| (3.0 * a.x(i)).sin().abs()).fold(0.0, f64::max);
        let max_da = (0..256).map(|i| (3.0 * (3.0 * a.x(i)).cos()).abs()).fold(0.0, f64::max);
        assert!((e.weak - max_a).abs() < 1e-9);
        assert!((e.unstable - max_da).abs() < 1e-3 * max_da);
    }

    #[test]
    fn weak_below_strong_and_monotone_in_basis() {
        let h = LeafFunction::from_fn(16, 256, |_, y| if y > 0.5 { 1.0 } else { -1.0 }).unwrap();
        let mut prev: Option<NormEstimate> = None;
        for size in [8, 16, 24, DEFAULT_BASIS, 73] {
            let fam = TestFamily::new(size, 256, 0.5).unwrap();
            let e = estimate_norms(&h, &fam, 2).unwrap();
            assert!(e.weak <= e.strong_stable + 1e-12);
            if let Some(p) = prev {
                assert!(e.weak >= p.weak && e.strong_stable >= p.strong_stable && e.unstable >= p.unstable);
            }
            prev = Some(e);
        }
        let h = LeafFunction::from_fn(16, 257, |_, y| if y > 0.3 { 1.0 } else { -1.0 }).unwrap();
        let mut last = estimate_norms(&h, &TestFamily::new(DEFAULT_BASIS, 257, 0.5).unwrap(), 2).unwrap();
        for levels in 1..=TestFamily::max_levels(257) {
            let fam = TestFamily::with_levels(DEFAULT_BASIS, levels, 257, 0.5).unwrap();
            let e = estimate_norms(&h, &fam, 2).unwrap();
            assert!(e.weak <= e.strong_stable + 1e-12);
            assert!(e.weak >= last.weak && e.strong_stable >= last.strong_stable && e.unstable >= last.unstable);
            last = e;
        }
    }

    #[test]
    fn dyadic_tests_resolve_fine_dipoles() {
        // an interior dipole on [1/2, 1/2 + 1/64]: global tests of degree 12
        // see about half of it, a level-6 dipole test matches it
        let f = |_: f64, y: f64| {
            let u = y - 0.5;
            if (0.0..1.0 / 128.0).contains(&u) { 1.0 } else if (1.0 / 128.0..1.0 / 64.0).contains(&u) { -1.0 } else { 0.0 }
        };
        let h = LeafFunction::from_fn(4, 1025, f).unwrap();
        let g = estimate_norms(&h, &TestFamily::new(DEFAULT_BASIS, 1025, 0.5).unwrap(), 1).unwrap();
        let d = estimate_norms(&h, &TestFamily::with_levels(DEFAULT_BASIS, 8, 1025, 0.5).unwrap(), 1).unwrap();
        assert!(d.strong_stable > 1.5 * g.strong_stable, "{} {}", d.strong_stable, g.strong_stable);
    }

    #[test]
    fn transfer_conserves_mass_and_positivity() {
        let t = LeafTransfer::new(&sp(), 512, 512, 2000).unwrap();
        for f in [
            &(|_: f64, _: f64| 1.0) as &dyn Fn(f64, f64) -> f64,
            &|x: f64, y: f64| 1.0 + x * y,
            &|x: f64, y: f64| (1.0 + (5.0 * x).sin() * 0.5) * (y - 0.3).abs(),
        ] {
            let h = LeafFunction::from_fn(512, 512, f).unwrap();
            let rh = t.apply(&h).unwrap();
            assert!(rh.values.iter().all(|v| *v >= 0.0));
            let (a, b) = (h.total(), rh.total());
            assert!((a - b).abs() < 1e-3 * a, "{a} {b}");
        }
    }

    #[test]
    fn transfer_dual_pairing() {
        // <R 1, phi> = <1, phi o F>, the right side by midpoint quadrature of
        // the induced skew map itself
        let s = sp();
        let t = LeafTransfer::new(&s, 512, 512, 4000).unwrap();
        let one = LeafFunction::from_fn(512, 512, |_, _| 1.0).unwrap();
        let r1 = t.apply(&one).unwrap();
        let tests: [&dyn Fn(f64, f64) -> f64; 5] = [
            &|x, y| x * (1.0 + y),
            &|_, y| y,
            &|x, _| (4.0 * x).cos(),
            &|x, y| (x - 0.5) * y * y,
            &|_, y| (-3.0 * y).exp(),
        ];
        let (nx, ny) = (4000, 16);
        for phi in tests {
            let lhs = r1.pair(phi);
            let mut rhs = 0.0;
            for i in 0..nx {
                let x = 0.5 + 0.5 * (i as f64 + 0.5) / nx as f64;
                for j in 0..ny {
                    let y = (j as f64 + 0.5) / ny as f64;
                    let ((fx, fy), _) = crate::maps::skew_induced_apply(&s, x, y, crate::maps::DEFAULT_TRAP_CAP).unwrap();
                    rhs += phi(fx, fy);
                }
            }
            rhs *= 0.5 / (nx * ny) as f64;
            assert!((lhs - rhs).abs() < 2e-3 * rhs.abs().max(0.05), "{lhs} {rhs}");
        }
    }

    #[test]
    fn distortion_is_bounded() {
        let r = distortion_check(&sp(), 300, 200).unwrap();
        assert!(r.finite);
        assert!(r.refinement_change < 0.05, "{}", r.refinement_change);
        // image form: no growth with the return time
        let band = |lo: usize, hi: usize| r.per_branch[lo..hi].iter().map(|b| b.2).fold(0.0, f64::max);
        assert!(band(200, 300) <= 1.1 * band(50, 100), "{} {}", band(200, 300), band(50, 100));
        // domain form grows roughly like F0' ~ n^{1 + beta}
        let (d1, d2) = (r.per_branch[99].1, r.per_branch[199].1);
        let slope = (d2 / d1).ln() / 2f64.ln();
        assert!((slope - 1.75).abs() < 0.15, "{slope}");
    }

    #[test]
    fn refinement_stability_for_smooth_h() {
        let f = |x: f64, y: f64| (1.0 + x) * (1.0 + 0.5 * (3.0 * y).cos());
        let a = LeafFunction::from_fn(32, 256, f).unwrap();
        let b = LeafFunction::from_fn(32, 512, f).unwrap();
        let ea = estimate_norms(&a, &TestFamily::new(DEFAULT_BASIS, 256, 0.5).unwrap(), 2).unwrap();
        let eb = estimate_norms(&b, &TestFamily::new(DEFAULT_BASIS, 512, 0.5).unwrap(), 2).unwrap();
        for (u, v) in [(ea.weak, eb.weak), (ea.strong_stable, eb.strong_stable), (ea.unstable, eb.unstable)] {
            assert!((u - v).abs() < 0.01 * v, "{u} {v}");
        }
    }
}
