//! Local objectives for distributed linear regression over a box.
//!
//! Node `i` holds one sample `(a_i, b_i)` and either the squared loss
//! `(a_i^T x - b_i)^2` or the absolute loss `|a_i^T x - b_i|`, optionally plus
//! `reg * ||x||^2`. Each objective carries a subgradient bound over the box and
//! its strong convexity constant.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::rng::{stream_rng, Stream};

/// Iteration cap of the reference solver.
pub const REFERENCE_MAX_ITERS: usize = 10_000_000;
/// The reference solver stops once its best value improved by less than the
/// tolerance over this many iterations.
pub const REFERENCE_WINDOW: usize = 1000;

/// Axis-aligned box `[lower, upper]`, used both as the constraint set and as
/// the initial quantization rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::ConfigMismatch(format!(
                "box bounds have {} and {} coordinates",
                lower.len(),
                upper.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(Error::Malformed("box needs finite lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[-r, r]^d`
    pub fn symmetric(dim: usize, r: f64) -> Result<Self> {
        Self::new(vec![-r; dim], vec![r; dim])
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.project_in_place(&mut out);
        out
    }

    pub fn project_in_place(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// `sup ||x||` over the box.
    pub fn max_norm(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (lo * lo).max(hi * hi))
            .sum::<f64>()
            .sqrt()
    }

    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect()
    }
}

/// `project_box` as a free function.
pub fn project_box(x: &[f64], bx: &BoxSet) -> Vec<f64> {
    bx.project(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Quadratic,
    Absolute,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Quadratic => "quadratic",
            LossKind::Absolute => "absolute",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    kind: LossKind,
    features: Vec<f64>,
    label: f64,
    reg: f64,
    lipschitz: f64,
    strong_convexity: f64,
}

impl Objective {
    pub fn new(kind: LossKind, features: Vec<f64>, label: f64, reg: f64, bx: &BoxSet) -> Result<Self> {
        if features.len() != bx.dim() {
            return Err(Error::ConfigMismatch(format!(
                "sample has {} features but the box has {} coordinates",
                features.len(),
                bx.dim()
            )));
        }
        if reg.is_nan() || reg < 0.0 {
            return Err(Error::validation("lambda", format!("must be nonnegative, got {reg}")));
        }
        let lipschitz = lipschitz_bound(kind, &features, label, reg, bx);
        Ok(Self {
            kind,
            features,
            label,
            reg,
            lipschitz,
            strong_convexity: 2.0 * reg,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn label(&self) -> f64 {
        self.label
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// Bound on `||g(x)||` over the box the objective was built with.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn strong_convexity(&self) -> f64 {
        self.strong_convexity
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        dot(&self.features, x) - self.label
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r = self.residual(x);
        let loss = match self.kind {
            LossKind::Quadratic => r * r,
            LossKind::Absolute => r.abs(),
        };
        if self.reg == 0.0 {
            loss
        } else {
            loss + self.reg * dot(x, x)
        }
    }

    pub fn subgrad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.subgrad_into(x, &mut g);
        g
    }

    /// Writes a subgradient at `x` into `out`. At the kink of the absolute
    /// loss the zero selection is used.
    pub fn subgrad_into(&self, x: &[f64], out: &mut [f64]) {
        let r = self.residual(x);
        let scale = match self.kind {
            LossKind::Quadratic => 2.0 * r,
            LossKind::Absolute => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        };
        for ((o, a), xi) in out.iter_mut().zip(&self.features).zip(x) {
            *o = scale * a + 2.0 * self.reg * xi;
        }
    }
}

/// Upper bound on the subgradient norm over `bx`. For the squared loss the
/// largest residual is attained at the box corner picked by the signs of `a`.
pub fn lipschitz_bound(kind: LossKind, features: &[f64], label: f64, reg: f64, bx: &BoxSet) -> f64 {
    let a_norm = norm(features);
    let reg_term = 2.0 * reg * bx.max_norm();
    match kind {
        LossKind::Absolute => a_norm + reg_term,
        LossKind::Quadratic => {
            let (mut hi, mut lo) = (0.0, 0.0);
            for ((a, l), u) in features.iter().zip(bx.lower()).zip(bx.upper()) {
                hi += if *a >= 0.0 { a * u } else { a * l };
                lo += if *a >= 0.0 { a * l } else { a * u };
            }
            let max_residual = (hi - label).abs().max((lo - label).abs());
            2.0 * max_residual * a_norm + reg_term
        }
    }
}

pub fn total_value(objectives: &[Objective], x: &[f64]) -> f64 {
    objectives.iter().map(|o| o.eval(x)).sum()
}

fn total_subgrad(objectives: &[Objective], x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let mut g = vec![0.0; x.len()];
    for o in objectives {
        o.subgrad_into(x, &mut g);
        axpy(1.0, &g, out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

/// `n` samples with every feature and label uniform on `[0, 1)`.
pub fn generate_dataset(n: usize, d: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream_rng(seed, Stream::Dataset);
    (0..n)
        .map(|_| {
            let features = (0..d).map(|_| rng.gen::<f64>()).collect();
            Sample {
                features,
                label: rng.gen::<f64>(),
            }
        })
        .collect()
}

pub fn build_objectives(samples: &[Sample], kind: LossKind, reg: f64, bx: &BoxSet) -> Result<Vec<Objective>> {
    samples
        .iter()
        .map(|s| Objective::new(kind, s.features.clone(), s.label, reg, bx))
        .collect()
}

/// One line per sample, `a_1 ... a_d b`, 17 significant digits.
pub fn write_dataset<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        let fields: Vec<String> = s
            .features
            .iter()
            .chain(std::iter::once(&s.label))
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", fields.join(" "))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut samples: Vec<Sample> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed(format!("line {}: {e}", lineno + 1)))?;
        if values.len() < 2 {
            return Err(Error::Malformed(format!("line {}: need features and a label", lineno + 1)));
        }
        if let Some(first) = samples.first() {
            if first.features.len() + 1 != values.len() {
                return Err(Error::Malformed(format!("line {}: inconsistent width", lineno + 1)));
            }
        }
        let label = values.pop().unwrap();
        samples.push(Sample {
            features: values,
            label,
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub tol: f64,
    pub iterations: usize,
}

/// Centralized minimizer of `sum_i f_i` over the box.
///
/// Smooth problems (all losses quadratic) use projected gradient with
/// backtracking; anything else uses projected subgradient steps
/// `c / sqrt(k + 1)`. Both keep the best iterate seen and stop once it has
/// improved by less than `tol` over [`REFERENCE_WINDOW`] iterations. Pure
/// absolute-loss problems are piecewise linear, so the result is finished by
/// a vertex search around the active constraints.
pub fn solve_reference(objectives: &[Objective], bx: &BoxSet, tol: f64) -> Result<ReferenceSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::validation("tol", format!("must be positive, got {tol}")));
    }
    if objectives.is_empty() {
        return Err(Error::ConfigMismatch("no objectives".into()));
    }
    if objectives.iter().any(|o| o.dim() != bx.dim()) {
        return Err(Error::ConfigMismatch("objective and box dimensions differ".into()));
    }
    let smooth = objectives.iter().all(|o| o.kind == LossKind::Quadratic);
    let (mut x_star, f_best, iterations) = if smooth {
        projected_gradient(objectives, bx, tol)?
    } else {
        projected_subgradient(objectives, bx, tol)?
    };
    let piecewise_linear = objectives
        .iter()
        .all(|o| o.kind == LossKind::Absolute && o.reg == 0.0);
    if piecewise_linear {
        if let Some((x, f)) = polish_vertex(objectives, bx, &x_star) {
            if f < f_best {
                x_star = x;
            }
        }
    }
    Ok(ReferenceSolution {
        f_star: total_value(objectives, &x_star),
        x_star,
        tol,
        iterations,
    })
}

/// Tracks the best value and whether it stalled over the trailing window.
struct BestTracker {
    x: Vec<f64>,
    f: f64,
    history: std::collections::VecDeque<f64>,
}

impl BestTracker {
    fn new(x: Vec<f64>, f: f64) -> Self {
        Self {
            x,
            f,
            history: std::collections::VecDeque::from([f]),
        }
    }

    fn offer(&mut self, x: &[f64], f: f64) {
        if f < self.f {
            self.f = f;
            self.x.copy_from_slice(x);
        }
        self.history.push_back(self.f);
        if self.history.len() > REFERENCE_WINDOW + 1 {
            self.history.pop_front();
        }
    }

    fn stalled(&self, tol: f64) -> bool {
        self.history.len() == REFERENCE_WINDOW + 1 && self.history[0] - self.f < tol
    }
}

fn projected_gradient(objectives: &[Objective], bx: &BoxSet, tol: f64) -> Result<(Vec<f64>, f64, usize)> {
    let d = bx.dim();
    let mut x = bx.project(&vec![0.0; d]);
    let mut fx = total_value(objectives, &x);
    let mut best = BestTracker::new(x.clone(), fx);
    let mut grad = vec![0.0; d];
    let mut step = 1.0;
    for k in 1..=REFERENCE_MAX_ITERS {
        total_subgrad(objectives, &x, &mut grad);
        let (next, f_next) = loop {
            let mut cand = x.clone();
            axpy(-step, &grad, &mut cand);
            bx.project_in_place(&mut cand);
            let f_cand = total_value(objectives, &cand);
            let diff: Vec<f64> = cand.iter().zip(&x).map(|(c, v)| c - v).collect();
            let model = fx + dot(&grad, &diff) + dot(&diff, &diff) / (2.0 * step);
            if f_cand <= model || step < 1e-300 {
                break (cand, f_cand);
            }
            step *= 0.5;
        };
        x = next;
        fx = f_next;
        best.offer(&x, fx);
        if best.stalled(tol) {
            return Ok((best.x, best.f, k));
        }
        step = (step * 2.0).min(1e12);
    }
    Err(Error::NoProgress {
        iterations: REFERENCE_MAX_ITERS,
    })
}

fn projected_subgradient(objectives: &[Objective], bx: &BoxSet, tol: f64) -> Result<(Vec<f64>, f64, usize)> {
    let d = bx.dim();
    let total_lipschitz: f64 = objectives.iter().map(Objective::lipschitz).sum();
    let scale = if total_lipschitz > 0.0 {
        bx.diameter() / total_lipschitz
    } else {
        1.0
    };
    let mut x = bx.center();
    let mut best = BestTracker::new(x.clone(), total_value(objectives, &x));
    let mut grad = vec![0.0; d];
    for k in 0..REFERENCE_MAX_ITERS {
        total_subgrad(objectives, &x, &mut grad);
        axpy(-scale / ((k + 1) as f64).sqrt(), &grad, &mut x);
        bx.project_in_place(&mut x);
        best.offer(&x, total_value(objectives, &x));
        if best.stalled(tol) {
            return Ok((best.x, best.f, k + 1));
        }
    }
    Err(Error::NoProgress {
        iterations: REFERENCE_MAX_ITERS,
    })
}

/// A linear constraint `normal^T x = offset` that may be active at a vertex.
struct Facet {
    normal: Vec<f64>,
    offset: f64,
    distance: f64,
}

fn facets_near(objectives: &[Objective], bx: &BoxSet, x: &[f64]) -> Vec<Facet> {
    let d = bx.dim();
    let mut facets: Vec<Facet> = objectives
        .iter()
        .filter(|o| norm(&o.features) > 0.0)
        .map(|o| Facet {
            normal: o.features.clone(),
            offset: o.label,
            distance: o.residual(x).abs() / norm(&o.features),
        })
        .collect();
    for c in 0..d {
        let mut e = vec![0.0; d];
        e[c] = 1.0;
        for bound in [bx.lower()[c], bx.upper()[c]] {
            facets.push(Facet {
                normal: e.clone(),
                offset: bound,
                distance: (x[c] - bound).abs(),
            });
        }
    }
    facets.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    facets
}

/// Tries every `d`-subset of the `d + 2` constraints closest to `x`, solving
/// for the vertex they define, and repeats from any improvement.
fn polish_vertex(objectives: &[Objective], bx: &BoxSet, start: &[f64]) -> Option<(Vec<f64>, f64)> {
    let d = bx.dim();
    let mut best_x = start.to_vec();
    let mut best_f = total_value(objectives, start);
    let mut found = false;
    for _ in 0..50 {
        let facets = facets_near(objectives, bx, &best_x);
        let pool = &facets[..facets.len().min(d + 2)];
        let mut improved = false;
        for subset in combinations(pool.len(), d) {
            let rows = DMatrix::from_fn(d, d, |r, c| pool[subset[r]].normal[c]);
            let rhs = DVector::from_fn(d, |r, _| pool[subset[r]].offset);
            let Some(sol) = rows.lu().solve(&rhs) else {
                continue;
            };
            let cand = bx.project(sol.as_slice());
            if cand.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let f = total_value(objectives, &cand);
            if f < best_f {
                best_f = f;
                best_x = cand;
                improved = true;
                found = true;
            }
        }
        if !improved {
            break;
        }
    }
    found.then_some((best_x, best_f))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        go(0, n, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}
