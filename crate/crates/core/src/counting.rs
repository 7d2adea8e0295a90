//! Differentiable graph-based counting with duplicate suppression.
//!
//! Given per-proposal attention `a` and pairwise box distances `D`, the
//! module builds the attention graph `A = a aᵀ`, removes intra-object edges
//! with `A' = f1(A) ∘ f2(D)`, and then measures for every pair how much the
//! two proposals look like the same object:
//!
//! ```text
//! sim_ij = f3(1 - |a_i - a_j|) · (1 - A'_ij) · rowsim_ij        (i ≠ j)
//! rowsim_ij = 1 - mean_{k ∉ {i,j}} |A'_ik - A'_jk|               (1 when n = 2)
//! d_i = 1 + Σ_{j≠i} sim_ij,   C_i = a_i / d_i,   ĉ = Σ_i C_i
//! ```
//!
//! `f1`, `f2`, `f3` are monotone piecewise-linear maps of `[0, 1]` onto
//! itself. All three start as the identity, which makes the two reference
//! cases exact: `m` coincident proposals count as one, `m` disjoint ones
//! count as `m`.
//!
//! Derivatives of `|x|` use `sign(0) = +1` and piecewise-linear slopes are
//! taken from the piece to the right of a breakpoint. Gradient checks must
//! skip the finitely many inputs sitting on those kinks; [`CountTape::kink_signature`]
//! fingerprints which side of every kink the forward pass landed on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const DEFAULT_PIECES: usize = 8;

/// Monotone piecewise-linear map with `f(0) = 0` and `f(1) = 1`.
///
/// The `k` increments are a softmax of the raw weights, so they stay
/// positive and sum to one; breakpoints sit at `i / k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearFn {
    raw: Vec<f64>,
}

impl PiecewiseLinearFn {
    pub fn identity(pieces: usize) -> Self {
        Self { raw: vec![0.0; pieces.max(1)] }
    }

    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyInput("piecewise-linear function needs at least one piece"));
        }
        if raw.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite { tensor: "piecewise-linear raw weights".into() });
        }
        Ok(Self { raw })
    }

    pub fn pieces(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn eval(&self, x: f64) -> f64 {
        PlTable::new(&self.raw).eval(x).value
    }
}

/// Result of evaluating a piecewise-linear map at one point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PlPoint {
    pub value: f64,
    pub slope: f64,
    pub piece: usize,
    /// Position inside the piece, in `[0, 1]`.
    pub frac: f64,
}

/// Increments and cumulative sums, computed once per forward pass.
#[derive(Debug, Clone)]
pub(crate) struct PlTable {
    inc: Vec<f64>,
    cum: Vec<f64>,
}

impl PlTable {
    pub fn new(raw: &[f64]) -> Self {
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = raw.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        let inc: Vec<f64> = exp.iter().map(|e| e / total).collect();
        let mut cum = Vec::with_capacity(inc.len());
        let mut acc = 0.0;
        for v in &inc {
            cum.push(acc);
            acc += v;
        }
        Self { inc, cum }
    }

    pub fn eval(&self, x: f64) -> PlPoint {
        let k = self.inc.len();
        let x = x.clamp(0.0, 1.0);
        let scaled = x * k as f64;
        let piece = (scaled.floor() as usize).min(k - 1);
        let frac = scaled - piece as f64;
        PlPoint {
            value: self.cum[piece] + self.inc[piece] * frac,
            slope: self.inc[piece] * k as f64,
            piece,
            frac,
        }
    }

    /// Adds `upstream · ∂f(x)/∂inc` for the point `p` into `g_inc`.
    pub fn accumulate(&self, p: &PlPoint, upstream: f64, g_inc: &mut [f64]) {
        for g in &mut g_inc[..p.piece] {
            *g += upstream;
        }
        g_inc[p.piece] += upstream * p.frac;
    }

    /// Maps increment gradients back through the softmax onto raw weights.
    pub fn raw_grad(&self, g_inc: &[f64], out: &mut [f64]) {
        let dot: f64 = self.inc.iter().zip(g_inc).map(|(p, g)| p * g).sum();
        for ((o, p), g) in out.iter_mut().zip(&self.inc).zip(g_inc) {
            *o += p * (g - dot);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountModuleParams {
    pub f1: PiecewiseLinearFn,
    pub f2: PiecewiseLinearFn,
    pub f3: PiecewiseLinearFn,
}

impl CountModuleParams {
    pub fn identity(pieces: usize) -> Self {
        Self {
            f1: PiecewiseLinearFn::identity(pieces),
            f2: PiecewiseLinearFn::identity(pieces),
            f3: PiecewiseLinearFn::identity(pieces),
        }
    }
}

impl Default for CountModuleParams {
    fn default() -> Self {
        Self::identity(DEFAULT_PIECES)
    }
}

/// A proposal box tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedBox {
    pub image_idx: usize,
    pub bbox: BBox,
}

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Rows and columns restricted to `keep`, in order.
    pub fn select(&self, keep: &[usize]) -> SquareMatrix {
        let mut out = SquareMatrix::zeros(keep.len());
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

fn check_attention(a: &[f64]) -> Result<()> {
    match a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::OutOfRange(format!("attention value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// `A_ij = a_i a_j`.
pub fn adjacency(a: &[f64]) -> Result<SquareMatrix> {
    check_attention(a)?;
    let n = a.len();
    let mut m = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, a[i] * a[j]);
        }
    }
    Ok(m)
}

/// `D_ij = 1 - IoU(b_i, b_j)`; proposals from different images never overlap.
pub fn distance_matrix(boxes: &[PlacedBox]) -> SquareMatrix {
    let n = boxes.len();
    let mut d = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = if boxes[i].image_idx == boxes[j].image_idx {
                1.0 - iou(&boxes[i].bbox, &boxes[j].bbox)
            } else {
                1.0
            };
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// `A'_ij = f1(A_ij) · f2(D_ij)`.
pub fn prune_intra(adj: &SquareMatrix, dist: &SquareMatrix, params: &CountModuleParams) -> Result<SquareMatrix> {
    if adj.n != dist.n {
        return Err(Error::ShapeMismatch(format!("A is {0}x{0} but D is {1}x{1}", adj.n, dist.n)));
    }
    let (t1, t2) = (PlTable::new(params.f1.raw()), PlTable::new(params.f2.raw()));
    let mut out = SquareMatrix::zeros(adj.n);
    for (o, (a, d)) in out.data.iter_mut().zip(adj.data.iter().zip(&dist.data)) {
        *o = t1.eval(*a).value * t2.eval(*d).value;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountOutput {
    pub adjacency: SquareMatrix,
    pub distance: SquareMatrix,
    pub pruned: SquareMatrix,
    pub similarity: SquareMatrix,
    pub scores: Vec<f64>,
    pub count: f64,
}

/// Gradients w.r.t. the module inputs and all three shaping functions.
#[derive(Debug, Clone, PartialEq)]
pub struct CountGrads {
    pub attention: Vec<f64>,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
}

/// Forward intermediates kept for the backward pass.
///
/// `backward` consumes the tape, so each recorded forward pass can be
/// differentiated exactly once.
#[derive(Debug, Clone)]
pub struct CountTape {
    a: Vec<f64>,
    dist: SquareMatrix,
    t1: PlTable,
    t2: PlTable,
    t3: PlTable,
    f1a: Vec<PlPoint>,
    f2d: Vec<f64>,
    pruned: Vec<f64>,
    gap: Vec<PlPoint>,
    rowsim: Vec<f64>,
    sim: Vec<f64>,
    mass: Vec<f64>,
    scores: Vec<f64>,
    count: f64,
}

#[inline]
fn sign_right(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl CountTape {
    pub fn forward(a: &[f64], dist: &SquareMatrix, params: &CountModuleParams) -> Result<Self> {
        check_attention(a)?;
        let n = a.len();
        if dist.n != n {
            return Err(Error::ShapeMismatch(format!("{n} attention values but D is {0}x{0}", dist.n)));
        }
        let t1 = PlTable::new(params.f1.raw());
        let t2 = PlTable::new(params.f2.raw());
        let t3 = PlTable::new(params.f3.raw());

        let mut f1a = Vec::with_capacity(n * n);
        let mut f2d = Vec::with_capacity(n * n);
        let mut pruned = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let p1 = t1.eval(a[i] * a[j]);
                let v2 = t2.eval(dist.get(i, j)).value;
                pruned.push(p1.value * v2);
                f1a.push(p1);
                f2d.push(v2);
            }
        }

        let scale = 1.0 / (n.saturating_sub(2).max(1)) as f64;
        let mut gap = vec![PlPoint { value: 0.0, slope: 0.0, piece: 0, frac: 0.0 }; n * n];
        let mut rowsim = vec![1.0; n * n];
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            sim[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let g = t3.eval(1.0 - (a[i] - a[j]).abs());
                let r = if n > 2 {
                    let spread: f64 = (0..n)
                        .filter(|&k| k != i && k != j)
                        .map(|k| (pruned[i * n + k] - pruned[j * n + k]).abs())
                        .sum();
                    1.0 - scale * spread
                } else {
                    1.0
                };
                let s = g.value * (1.0 - pruned[i * n + j]) * r;
                for (x, y) in [(i, j), (j, i)] {
                    gap[x * n + y] = g;
                    rowsim[x * n + y] = r;
                    sim[x * n + y] = s;
                }
            }
        }
        let mass: Vec<f64> = (0..n).map(|i| sim[i * n..(i + 1) * n].iter().sum()).collect();
        let scores: Vec<f64> = a.iter().zip(&mass).map(|(ai, di)| ai / di).collect();
        let count = scores.iter().sum();

        Ok(Self {
            a: a.to_vec(),
            dist: dist.clone(),
            t1,
            t2,
            t3,
            f1a,
            f2d,
            pruned,
            gap,
            rowsim,
            sim,
            mass,
            scores,
            count,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn output(&self) -> CountOutput {
        let n = self.n();
        CountOutput {
            adjacency: adjacency(&self.a).expect("attention validated in forward"),
            distance: self.dist.clone(),
            pruned: SquareMatrix { n, data: self.pruned.clone() },
            similarity: SquareMatrix { n, data: self.sim.clone() },
            scores: self.scores.clone(),
            count: self.count,
        }
    }

    /// Hash of every branch taken: pieces of each piecewise-linear
    /// evaluation and signs of each absolute value.
    pub fn kink_signature(&self) -> u64 {
        let n = self.n();
        let mut h = Fnv::default();
        for p in &self.f1a {
            h.write(p.piece as u64);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                h.write(self.gap[i * n + j].piece as u64);
                h.write((self.a[i] - self.a[j] >= 0.0) as u64);
                for k in 0..n {
                    if k != i && k != j {
                        h.write((self.pruned[i * n + k] - self.pruned[j * n + k] >= 0.0) as u64);
                    }
                }
            }
        }
        h.finish()
    }

    /// Backpropagates `∂L/∂C` and `∂L/∂ĉ`.
    pub fn backward(self, g_scores: &[f64], g_count: f64) -> Result<CountGrads> {
        let n = self.n();
        if g_scores.len() != n {
            return Err(Error::ShapeMismatch(format!("{} score gradients for {n} proposals", g_scores.len())));
        }
        let k1 = self.t1.inc.len();
        let (mut g1, mut g2, mut g3) = (vec![0.0; k1], vec![0.0; self.t2.inc.len()], vec![0.0; self.t3.inc.len()]);
        let mut ga = vec![0.0; n];
        let mut g_pruned = vec![0.0; n * n];

        // C_i = a_i / d_i
        let mut g_mass = vec![0.0; n];
        for i in 0..n {
            let gc = g_scores[i] + g_count;
            ga[i] += gc / self.mass[i];
            g_mass[i] = -gc * self.a[i] / (self.mass[i] * self.mass[i]);
        }

        let scale = 1.0 / (n.saturating_sub(2).max(1)) as f64;
        for i in 0..n {
            for j in (i + 1)..n {
                // sim_ij and sim_ji are one quantity feeding d_i and d_j
                let gs = g_mass[i] + g_mass[j];
                if gs == 0.0 {
                    continue;
                }
                let ij = i * n + j;
                let (g, p, r) = (self.gap[ij], 1.0 - self.pruned[ij], self.rowsim[ij]);

                // gap factor: f3(1 - |a_i - a_j|)
                let g_gap = gs * p * r;
                self.t3.accumulate(&g, g_gap, &mut g3);
                let g_u = g_gap * g.slope;
                let s = sign_right(self.a[i] - self.a[j]);
                ga[i] -= g_u * s;
                ga[j] += g_u * s;

                // 1 - A'_ij
                g_pruned[ij] -= gs * g.value * r;

                if n > 2 {
                    let g_r = gs * g.value * p;
                    for k in 0..n {
                        if k == i || k == j {
                            continue;
                        }
                        let (ik, jk) = (i * n + k, j * n + k);
                        let sk = sign_right(self.pruned[ik] - self.pruned[jk]);
                        g_pruned[ik] -= g_r * scale * sk;
                        g_pruned[jk] += g_r * scale * sk;
                    }
                }
            }
        }

        // A'_ij = f1(a_i a_j) f2(D_ij)
        for i in 0..n {
            for j in 0..n {
                let ij = i * n + j;
                let gp = g_pruned[ij];
                if gp == 0.0 {
                    continue;
                }
                let p1 = &self.f1a[ij];
                self.t1.accumulate(p1, gp * self.f2d[ij], &mut g1);
                let p2 = self.t2.eval(self.dist.get(i, j));
                self.t2.accumulate(&p2, gp * p1.value, &mut g2);
                let g_adj = gp * self.f2d[ij] * p1.slope;
                ga[i] += g_adj * self.a[j];
                ga[j] += g_adj * self.a[i];
            }
        }

        let mut grads = CountGrads { attention: ga, f1: vec![0.0; k1], f2: vec![0.0; g2.len()], f3: vec![0.0; g3.len()] };
        self.t1.raw_grad(&g1, &mut grads.f1);
        self.t2.raw_grad(&g2, &mut grads.f2);
        self.t3.raw_grad(&g3, &mut grads.f3);
        Ok(grads)
    }
}

/// Runs the full module and returns every intermediate matrix.
pub fn dedup_count(a: &[f64], dist: &SquareMatrix, params: &CountModuleParams) -> Result<CountOutput> {
    Ok(CountTape::forward(a, dist, params)?.output())
}

/// Scales row `i` of a row-major `(n, dim)` feature block by `scores[i]`.
pub fn count_aware_features(features: &[f64], dim: usize, scores: &[f64]) -> Result<Vec<f64>> {
    if dim == 0 || features.len() != scores.len() * dim {
        return Err(Error::ShapeMismatch(format!(
            "{} feature values cannot be split into {} rows of {dim}",
            features.len(),
            scores.len()
        )));
    }
    Ok(features.chunks(dim).zip(scores).flat_map(|(row, c)| row.iter().map(move |v| v * c)).collect())
}

/// 64-bit FNV-1a over u64 words.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
