//! Classical classifiers over dense feature rows: z-scoring, k-nearest
//! neighbours, CART trees, bagged trees and one-vs-rest SVMs.
//!
//! Rows are stored flat (row-major) with an explicit dimension; class labels
//! are indices into a vocabulary owned by the caller.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn row(x: &[f64], dim: usize, i: usize) -> &[f64] {
    &x[i * dim..(i + 1) * dim]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// First index of the maximum; ties resolve to the lowest index.
fn argmax_counts<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Per-dimension z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Zero-variance dimensions keep scale 1 and collapse to 0 after centring.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], dim: usize) -> Result<Self> {
        let n = if dim == 0 { 0 } else { x.len() / dim };
        if n == 0 {
            return Err(Error::EmptyMatrix);
        }
        let mut mean = vec![0.0; dim];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(row(x, dim, i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(row(x, dim, i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        if var.iter().all(|&v| v <= f64::EPSILON * n as f64) {
            return Err(Error::DegenerateFeatures);
        }
        let scale = var.iter().map(|&v| if v > 0.0 { (v / n as f64).sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn transform_row(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        x.chunks(dim.max(1)).flat_map(|r| self.transform_row(r)).collect()
    }
}

/// Majority vote among the k nearest training rows (Euclidean). A tied vote
/// goes to the tied class whose member is nearest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knn {
    pub k: usize,
    pub dim: usize,
    pub n_classes: usize,
    rows: Vec<f64>,
    labels: Vec<usize>,
}

impl Knn {
    pub fn fit(x: &[f64], dim: usize, y: &[usize], n_classes: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidHyperparams("knn k must be at least 1".into()));
        }
        Ok(Knn { k, dim, n_classes, rows: x.to_vec(), labels: y.to_vec() })
    }

    pub fn predict_one(&self, q: &[f64]) -> usize {
        let mut d: Vec<(f64, usize)> =
            (0..self.labels.len()).map(|i| (sq_dist(row(&self.rows, self.dim, i), q), i)).collect();
        let k = self.k.min(d.len());
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; self.n_classes];
        for &(_, i) in &d[..k] {
            votes[self.labels[i]] += 1;
        }
        let top = *votes.iter().max().unwrap_or(&0);
        d[..k].iter().map(|&(_, i)| self.labels[i]).find(|&c| votes[c] == top).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features examined per split; all when `None`.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { max_depth: None, min_samples_split: 2, min_samples_leaf: 1, max_features: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf { class: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// CART classification tree with Gini impurity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    pub dim: usize,
    pub n_classes: usize,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    dim: usize,
    y: &'a [usize],
    n_classes: usize,
    cfg: &'a TreeConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn best_split(&mut self, idx: &[usize], parent: f64) -> Option<(usize, f64)> {
        let mut features: Vec<usize> = (0..self.dim).collect();
        if let Some(m) = self.cfg.max_features {
            features.shuffle(&mut self.rng);
            features.truncate(m.clamp(1, self.dim));
            features.sort_unstable();
        }
        let n = idx.len();
        let leaf = self.cfg.min_samples_leaf.max(1);
        let total = self.counts(idx);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(n);
        for f in features {
            sorted.clear();
            sorted.extend(idx.iter().map(|&i| (self.x[i * self.dim + f], self.y[i])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0usize; self.n_classes];
            for pos in 0..n - 1 {
                left[sorted[pos].1] += 1;
                let nl = pos + 1;
                if sorted[pos].0 == sorted[pos + 1].0 || nl < leaf || n - nl < leaf {
                    continue;
                }
                let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let impurity = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.as_ref().is_none_or(|b| impurity < b.0) {
                    best = Some((impurity, f, 0.5 * (sorted[pos].0 + sorted[pos + 1].0)));
                }
            }
        }
        best.filter(|b| b.0 < parent - 1e-12).map(|(_, f, t)| (f, t))
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&idx);
        let impurity = gini(&counts, idx.len());
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { class: argmax_counts(&counts) });
        let stop = impurity == 0.0
            || idx.len() < self.cfg.min_samples_split.max(2)
            || self.cfg.max_depth.is_some_and(|d| depth >= d);
        if stop {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(&idx, impurity) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i * self.dim + feature] <= threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }
}

impl DecisionTree {
    pub fn fit(x: &[f64], dim: usize, y: &[usize], n_classes: usize, cfg: &TreeConfig, seed: u64) -> Result<Self> {
        Self::fit_indices(x, dim, y, n_classes, (0..y.len()).collect(), cfg, seed)
    }

    /// Fits on the (possibly repeated) rows listed in `idx`.
    pub fn fit_indices(
        x: &[f64],
        dim: usize,
        y: &[usize],
        n_classes: usize,
        idx: Vec<usize>,
        cfg: &TreeConfig,
        seed: u64,
    ) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptyMatrix);
        }
        let mut b = TreeBuilder { x, dim, y, n_classes, cfg, rng: ChaCha8Rng::seed_from_u64(seed), nodes: Vec::new() };
        b.build(idx, 0);
        Ok(DecisionTree { nodes: b.nodes, dim, n_classes })
    }

    pub fn predict_one(&self, q: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class } => return *class,
                Node::Split { feature, threshold, left, right } => {
                    at = if q[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Bootstrap-aggregated decision trees with majority voting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaggedTrees {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
}

impl BaggedTrees {
    pub fn fit(x: &[f64], dim: usize, y: &[usize], n_classes: usize, n_trees: usize, cfg: &TreeConfig, seed: u64) -> Result<Self> {
        if n_trees == 0 {
            return Err(Error::InvalidHyperparams("ensemble needs at least one tree".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = y.len();
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            trees.push(DecisionTree::fit_indices(x, dim, y, n_classes, idx, cfg, rng.random())?);
        }
        Ok(BaggedTrees { trees, n_classes })
    }

    pub fn predict_one(&self, q: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict_one(q)] += 1;
        }
        argmax_counts(&votes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Kernel {
    #[default]
    Linear,
    /// exp(−γ‖a − b‖²); γ defaults to 1 / dim.
    Rbf { gamma: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Box constraint.
    pub c: f64,
    pub kernel: Kernel,
    pub max_iter: usize,
    /// Stop once the projected-gradient spread falls below this.
    pub tol: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig { c: 1.0, kernel: Kernel::Linear, max_iter: 1000, tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum SvmModel {
    /// One weight row per class, bias last.
    Linear { weights: Vec<Vec<f64>> },
    Rbf { gamma: f64, rows: Vec<f64>, coef: Vec<Vec<f64>> },
}

/// One-vs-rest soft-margin SVM (hinge loss) trained by dual coordinate descent.
/// The bias is learned as the weight of a constant unit feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svm {
    pub dim: usize,
    pub n_classes: usize,
    /// Classes without positive training rows are never predicted.
    present: Vec<bool>,
    model: SvmModel,
}

/// Margin bookkeeping for the binary dual solver.
trait DualState {
    /// Current decision value of training row `i`.
    fn f(&self, i: usize) -> f64;
    /// Applies a change of `delta` to αᵢsᵢ.
    fn update(&mut self, i: usize, delta: f64);
}

struct LinearState<'a> {
    aug: &'a [f64],
    d1: usize,
    w: Vec<f64>,
}

impl DualState for LinearState<'_> {
    fn f(&self, i: usize) -> f64 {
        dot(&self.w, row(self.aug, self.d1, i))
    }

    fn update(&mut self, i: usize, delta: f64) {
        for (w, v) in self.w.iter_mut().zip(row(self.aug, self.d1, i)) {
            *w += delta * v;
        }
    }
}

struct KernelState<'a> {
    gram: &'a [f64],
    f: Vec<f64>,
}

impl DualState for KernelState<'_> {
    fn f(&self, i: usize) -> f64 {
        self.f[i]
    }

    fn update(&mut self, i: usize, delta: f64) {
        let n = self.f.len();
        for (fj, kj) in self.f.iter_mut().zip(&self.gram[i * n..(i + 1) * n]) {
            *fj += delta * kj;
        }
    }
}

/// Dual coordinate descent for labels `s` (±1); returns α.
fn dual_cd(s: &[f64], q_diag: &[f64], state: &mut dyn DualState, cfg: &SvmConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = s.len();
    let mut alpha = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.max_iter {
        order.shuffle(rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let g = s[i] * state.f(i) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= cfg.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 && q_diag[i] > 0.0 {
                let new = (alpha[i] - g / q_diag[i]).clamp(0.0, cfg.c);
                let delta = (new - alpha[i]) * s[i];
                alpha[i] = new;
                if delta != 0.0 {
                    state.update(i, delta);
                }
            }
        }
        if pg_max - pg_min < cfg.tol {
            break;
        }
    }
    alpha
}

impl Svm {
    pub fn fit(x: &[f64], dim: usize, y: &[usize], n_classes: usize, cfg: &SvmConfig, seed: u64) -> Result<Self> {
        if !(cfg.c > 0.0) {
            return Err(Error::InvalidHyperparams("svm c must be positive".into()));
        }
        let n = y.len();
        let mut present = vec![false; n_classes];
        for &c in y {
            present[c] = true;
        }
        if present.iter().filter(|p| **p).count() < 2 {
            return Err(Error::SingleClassInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = match cfg.kernel {
            Kernel::Linear => {
                let aug: Vec<f64> = (0..n).flat_map(|i| row(x, dim, i).iter().copied().chain([1.0])).collect();
                let d1 = dim + 1;
                let q_diag: Vec<f64> = (0..n).map(|i| dot(row(&aug, d1, i), row(&aug, d1, i))).collect();
                let mut weights = vec![vec![0.0; d1]; n_classes];
                for c in (0..n_classes).filter(|&c| present[c]) {
                    let s: Vec<f64> = y.iter().map(|&t| if t == c { 1.0 } else { -1.0 }).collect();
                    let mut state = LinearState { aug: &aug, d1, w: vec![0.0; d1] };
                    dual_cd(&s, &q_diag, &mut state, cfg, &mut rng);
                    weights[c] = state.w;
                }
                SvmModel::Linear { weights }
            }
            Kernel::Rbf { gamma } => {
                let gamma = gamma.unwrap_or(1.0 / dim.max(1) as f64);
                let mut gram = vec![0.0; n * n];
                for i in 0..n {
                    for j in i..n {
                        let k = (-gamma * sq_dist(row(x, dim, i), row(x, dim, j))).exp() + 1.0;
                        gram[i * n + j] = k;
                        gram[j * n + i] = k;
                    }
                }
                let q_diag: Vec<f64> = (0..n).map(|i| gram[i * n + i]).collect();
                let mut coef = vec![vec![0.0; n]; n_classes];
                for c in (0..n_classes).filter(|&c| present[c]) {
                    let s: Vec<f64> = y.iter().map(|&t| if t == c { 1.0 } else { -1.0 }).collect();
                    let mut state = KernelState { gram: &gram, f: vec![0.0; n] };
                    let alpha = dual_cd(&s, &q_diag, &mut state, cfg, &mut rng);
                    coef[c] = alpha.iter().zip(&s).map(|(a, s)| a * s).collect();
                }
                SvmModel::Rbf { gamma, rows: x.to_vec(), coef }
            }
        };
        Ok(Svm { dim, n_classes, present, model })
    }

    /// One-vs-rest decision values; absent classes score −∞.
    pub fn decision(&self, q: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = match &self.model {
            SvmModel::Linear { weights } => weights.iter().map(|w| dot(&w[..self.dim], q) + w[self.dim]).collect(),
            SvmModel::Rbf { gamma, rows, coef } => {
                let k: Vec<f64> = rows.chunks(self.dim.max(1)).map(|r| (-gamma * sq_dist(r, q)).exp() + 1.0).collect();
                coef.iter().map(|c| dot(c, &k)).collect()
            }
        };
        raw.into_iter().zip(&self.present).map(|(v, &p)| if p { v } else { f64::NEG_INFINITY }).collect()
    }

    pub fn predict_one(&self, q: &[f64]) -> usize {
        argmax_counts(&self.decision(q))
    }
}
