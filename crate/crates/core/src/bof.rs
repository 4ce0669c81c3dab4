//! Bag-of-features baseline: Fast-Hessian keypoints with 64-d SURF-style
//! descriptors, a k-means visual vocabulary, kd-tree word assignment and a
//! linear SVM over word histograms.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classical::{Standardizer, Svm, SvmConfig};
use crate::dataset::{FoldPlan, ImageTensor};
use crate::error::{Error, Result};

pub const DESCRIPTOR_DIM: usize = 64;
/// Recorded with every vocabulary so runs state which descriptor was used.
pub const DESCRIPTOR_TAG: &str = "fast-hessian/surf64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub octaves: usize,
    /// Minimum determinant-of-Hessian response (intensities in [0, 1]).
    pub threshold: f64,
    /// Strongest keypoints kept per image.
    pub max_keypoints: usize,
    /// Skip orientation assignment (U-SURF).
    pub upright: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { octaves: 3, threshold: 4e-4, max_keypoints: 300, upright: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub orientation: f64,
    pub response: f64,
    /// Sign of the Laplacian (bright-on-dark vs dark-on-bright blob).
    pub laplacian: bool,
}

/// Keypoints and their row-major 64-d descriptors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub keypoints: Vec<Keypoint>,
    pub data: Vec<f64>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.data.len() / DESCRIPTOR_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.data[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM]
    }

    /// Wraps raw rows (no keypoint geometry), mainly for tests and caches.
    pub fn from_rows(data: Vec<f64>) -> Result<Self> {
        if data.len() % DESCRIPTOR_DIM != 0 {
            return Err(Error::DimensionMismatch { expected: DESCRIPTOR_DIM, got: data.len() % DESCRIPTOR_DIM });
        }
        Ok(DescriptorSet { keypoints: Vec::new(), data })
    }
}

struct Integral {
    w: usize,
    h: usize,
    /// (h + 1) × (w + 1) cumulative sums.
    sum: Vec<f64>,
}

impl Integral {
    fn new(gray: &[f32], w: usize, h: usize) -> Self {
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f64::from(gray[y * w + x]);
                sum[(y + 1) * (w + 1) + x + 1] = sum[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { w, h, sum }
    }

    /// Sum over rows [r, r + rows) and columns [c, c + cols), clipped to the image.
    fn boxsum(&self, r: i64, c: i64, rows: i64, cols: i64) -> f64 {
        let r0 = r.clamp(0, self.h as i64) as usize;
        let c0 = c.clamp(0, self.w as i64) as usize;
        let r1 = (r + rows).clamp(0, self.h as i64) as usize;
        let c1 = (c + cols).clamp(0, self.w as i64) as usize;
        if r1 <= r0 || c1 <= c0 {
            return 0.0;
        }
        let s = |y: usize, x: usize| self.sum[y * (self.w + 1) + x];
        s(r1, c1) - s(r0, c1) - s(r1, c0) + s(r0, c0)
    }

    fn haar_x(&self, r: i64, c: i64, s: i64) -> f64 {
        self.boxsum(r - s / 2, c, s, s / 2) - self.boxsum(r - s / 2, c - s / 2, s, s / 2)
    }

    fn haar_y(&self, r: i64, c: i64, s: i64) -> f64 {
        self.boxsum(r, c - s / 2, s / 2, s) - self.boxsum(r - s / 2, c - s / 2, s / 2, s)
    }
}

struct Layer {
    filter: usize,
    step: usize,
    /// Responses on the sampling grid, (h / step) × (w / step).
    response: Vec<f64>,
    laplacian: Vec<bool>,
    cols: usize,
    rows: usize,
}

fn hessian_layer(ii: &Integral, filter: usize, step: usize) -> Layer {
    let cols = ii.w / step;
    let rows = ii.h / step;
    let b = ((filter - 1) / 2) as i64;
    let l = (filter / 3) as i64;
    let w = filter as i64;
    let inv_area = 1.0 / (w * w) as f64;
    let mut response = vec![0.0; rows * cols];
    let mut laplacian = vec![false; rows * cols];
    for ar in 0..rows {
        for ac in 0..cols {
            let r = (ar * step) as i64;
            let c = (ac * step) as i64;
            let dxx = ii.boxsum(r - l + 1, c - b, 2 * l - 1, w) - 3.0 * ii.boxsum(r - l + 1, c - l / 2, 2 * l - 1, l);
            let dyy = ii.boxsum(r - b, c - l + 1, w, 2 * l - 1) - 3.0 * ii.boxsum(r - l / 2, c - l + 1, l, 2 * l - 1);
            let dxy = ii.boxsum(r - l, c + 1, l, l) + ii.boxsum(r + 1, c - l, l, l)
                - ii.boxsum(r - l, c - l, l, l)
                - ii.boxsum(r + 1, c + 1, l, l);
            let (dxx, dyy, dxy) = (dxx * inv_area, dyy * inv_area, dxy * inv_area);
            response[ar * cols + ac] = dxx * dyy - 0.81 * dxy * dxy;
            laplacian[ar * cols + ac] = dxx + dyy >= 0.0;
        }
    }
    Layer { filter, step, response, laplacian, cols, rows }
}

impl Layer {
    /// Response at this layer's grid point nearest to image position (r, c).
    fn at(&self, r: usize, c: usize) -> f64 {
        let ar = (r / self.step).min(self.rows.saturating_sub(1));
        let ac = (c / self.step).min(self.cols.saturating_sub(1));
        self.response[ar * self.cols + ac]
    }
}

fn detect(ii: &Integral, cfg: &DetectorConfig) -> Vec<Keypoint> {
    let mut found = Vec::new();
    for o in 0..cfg.octaves {
        let step = 1usize << o;
        let layers: Vec<Layer> = (0..4).map(|i| hessian_layer(ii, 3 * ((2usize << o) * (i + 1) + 1), step)).collect();
        for m in 1..3 {
            let (below, mid, above) = (&layers[m - 1], &layers[m], &layers[m + 1]);
            // keep clear of the border where the largest filter would be clipped
            let border = above.filter / 2 + 1;
            for ar in 0..mid.rows {
                for ac in 0..mid.cols {
                    let (r, c) = (ar * step, ac * step);
                    if r < border || c < border || r + border >= ii.h || c + border >= ii.w {
                        continue;
                    }
                    let v = mid.response[ar * mid.cols + ac];
                    if v < cfg.threshold {
                        continue;
                    }
                    let mut is_max = true;
                    'scan: for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let rr = (r as i64 + dr * step as i64) as usize;
                            let cc = (c as i64 + dc * step as i64) as usize;
                            let neighbours = [below.at(rr, cc), above.at(rr, cc)];
                            let same = if dr == 0 && dc == 0 { f64::NEG_INFINITY } else { mid.at(rr, cc) };
                            if neighbours.iter().chain([&same]).any(|&n| n >= v) {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                    if is_max {
                        found.push(Keypoint {
                            x: c as f64,
                            y: r as f64,
                            scale: 1.2 * mid.filter as f64 / 9.0,
                            orientation: 0.0,
                            response: v,
                            laplacian: mid.laplacian[ar * mid.cols + ac],
                        });
                    }
                }
            }
        }
    }
    found.sort_by(|a, b| b.response.total_cmp(&a.response).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x)));
    found.truncate(cfg.max_keypoints);
    found
}

fn gaussian(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
}

fn orientation(ii: &Integral, kp: &Keypoint) -> f64 {
    let s = kp.scale;
    let haar = (4.0 * s).round().max(2.0) as i64;
    let mut samples = Vec::new();
    for i in -6i64..=6 {
        for j in -6i64..=6 {
            if i * i + j * j >= 36 {
                continue;
            }
            let g = gaussian(i as f64, j as f64, 2.0);
            let r = (kp.y + j as f64 * s).round() as i64;
            let c = (kp.x + i as f64 * s).round() as i64;
            let dx = g * ii.haar_x(r, c, haar);
            let dy = g * ii.haar_y(r, c, haar);
            samples.push((dy.atan2(dx), dx, dy));
        }
    }
    let mut best = (0.0, 0.0);
    let mut window = 0.0;
    while window < 2.0 * PI {
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(angle, dx, dy) in &samples {
            let mut d = angle - window;
            if d < 0.0 {
                d += 2.0 * PI;
            }
            if d < PI / 3.0 {
                sx += dx;
                sy += dy;
            }
        }
        let mag = sx * sx + sy * sy;
        if mag > best.0 {
            best = (mag, f64::atan2(sy, sx));
        }
        window += 0.15;
    }
    best.1
}

fn describe(ii: &Integral, kp: &Keypoint, out: &mut Vec<f64>) {
    let s = kp.scale;
    let (sin, cos) = kp.orientation.sin_cos();
    let haar = (2.0 * s).round().max(2.0) as i64;
    let start = out.len();
    for bi in 0..4 {
        for bj in 0..4 {
            let (mut sdx, mut sdy, mut adx, mut ady) = (0.0, 0.0, 0.0, 0.0);
            for u in 0..5 {
                for v in 0..5 {
                    // sample offset in the keypoint frame, units of scale
                    let fu = (bi * 5 + u) as f64 - 9.5;
                    let fv = (bj * 5 + v) as f64 - 9.5;
                    let x = kp.x + s * (fu * cos - fv * sin);
                    let y = kp.y + s * (fu * sin + fv * cos);
                    let g = gaussian(fu, fv, 3.3);
                    let dx = ii.haar_x(y.round() as i64, x.round() as i64, haar);
                    let dy = ii.haar_y(y.round() as i64, x.round() as i64, haar);
                    let rx = g * (dx * cos + dy * sin);
                    let ry = g * (-dx * sin + dy * cos);
                    sdx += rx;
                    sdy += ry;
                    adx += rx.abs();
                    ady += ry.abs();
                }
            }
            out.extend([sdx, sdy, adx, ady]);
        }
    }
    let norm = out[start..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out[start..].iter_mut().for_each(|v| *v /= norm);
    }
}

/// Keypoints and descriptors of the grayscale version of `image`.
pub fn extract_descriptors(image: &ImageTensor, cfg: &DetectorConfig) -> DescriptorSet {
    let gray = image.grayscale();
    let ii = Integral::new(&gray, image.size, image.size);
    let mut keypoints = detect(&ii, cfg);
    let mut data = Vec::with_capacity(keypoints.len() * DESCRIPTOR_DIM);
    for kp in keypoints.iter_mut() {
        if !cfg.upright {
            kp.orientation = orientation(&ii, kp);
        }
        describe(&ii, kp, &mut data);
    }
    DescriptorSet { keypoints, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Relative objective decrease below which iteration stops.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { max_iter: 300, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualVocabulary {
    pub k: usize,
    pub dim: usize,
    /// Row-major k × dim.
    pub centroids: Vec<f64>,
    pub seed: u64,
    pub descriptor: String,
    pub iterations: usize,
    pub inertia: f64,
    /// Within-cluster sum of squares after every assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn nearest(centroids: &[f64], dim: usize, q: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(c, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means with k-means++ seeding over row-major `points` of width `dim`.
pub fn kmeans(points: &[f64], dim: usize, k: usize, cfg: &KMeansConfig, seed: u64) -> Result<VisualVocabulary> {
    let n = if dim == 0 { 0 } else { points.len() / dim };
    if k == 0 || n < k {
        return Err(Error::TooFewDescriptors { have: n, k });
    }
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(pt(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = pt(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &c));
        }
        centroids.extend(c);
    }

    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        for i in 0..n {
            let (j, d) = nearest(&centroids, dim, pt(i));
            assign[i] = j;
            dist[i] = d;
        }
        // an empty cluster takes over the point farthest from its centroid
        let mut counts = vec![0usize; k];
        assign.iter().for_each(|&j| counts[j] += 1);
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n).filter(|&i| counts[assign[i]] > 1).max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    counts[assign[i]] -= 1;
                    counts[j] = 1;
                    assign[i] = j;
                    dist[i] = 0.0;
                    centroids[j * dim..(j + 1) * dim].copy_from_slice(pt(i));
                }
            }
        }
        let inertia: f64 = dist.iter().sum();
        let prev = objective.last().copied();
        objective.push(inertia);
        iterations += 1;
        let converged = prev.is_some_and(|p: f64| p - inertia <= cfg.tol * p);
        if converged || iterations >= cfg.max_iter {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        for i in 0..n {
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            for d in 0..dim {
                centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
            }
        }
    }
    let inertia = *objective.last().unwrap_or(&0.0);
    Ok(VisualVocabulary { k, dim, centroids, seed, descriptor: DESCRIPTOR_TAG.into(), iterations, inertia, objective })
}

/// Pools descriptors (optionally subsampled, seeded) and clusters them into `k` words.
pub fn build_vocabulary(
    sets: &[&DescriptorSet],
    k: usize,
    max_descriptors: Option<usize>,
    cfg: &KMeansConfig,
    seed: u64,
) -> Result<VisualVocabulary> {
    let mut pooled: Vec<&[f64]> = sets.iter().flat_map(|s| s.data.chunks(DESCRIPTOR_DIM)).collect();
    if let Some(cap) = max_descriptors {
        if pooled.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let picked = rand::seq::index::sample(&mut rng, pooled.len(), cap).into_vec();
            let mut picked = picked;
            picked.sort_unstable();
            pooled = picked.into_iter().map(|i| pooled[i]).collect();
        }
    }
    let flat: Vec<f64> = pooled.concat();
    kmeans(&flat, DESCRIPTOR_DIM, k, cfg, seed)
}

impl VisualVocabulary {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.descriptor.as_bytes());
        for v in &self.centroids {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf(Vec<usize>),
    Split { dim: usize, value: f64, left: Box<KdNode>, right: Box<KdNode> },
}

/// Best-bin-first kd-tree over vocabulary centroids.
#[derive(Debug, Clone)]
pub struct WordMatcher {
    dim: usize,
    centroids: Vec<f64>,
    root: KdNode,
    /// Leaves examined per query; `None` searches exactly.
    max_checks: Option<usize>,
}

struct Pending<'a>(f64, &'a KdNode);

impl PartialEq for Pending<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl Eq for Pending<'_> {}

impl PartialOrd for Pending<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0)
    }
}

const LEAF_SIZE: usize = 4;

fn build_kd(centroids: &[f64], dim: usize, mut idx: Vec<usize>) -> KdNode {
    if idx.len() <= LEAF_SIZE {
        return KdNode::Leaf(idx);
    }
    let n = idx.len() as f64;
    let spread = |d: usize| {
        let mean = idx.iter().map(|&i| centroids[i * dim + d]).sum::<f64>() / n;
        idx.iter().map(|&i| (centroids[i * dim + d] - mean).powi(2)).sum::<f64>()
    };
    let split = (0..dim).max_by(|&a, &b| spread(a).total_cmp(&spread(b)).then(b.cmp(&a))).unwrap_or(0);
    idx.sort_by(|&a, &b| centroids[a * dim + split].total_cmp(&centroids[b * dim + split]).then(a.cmp(&b)));
    let mid = idx.len() / 2;
    let value = centroids[idx[mid] * dim + split];
    let right = idx.split_off(mid);
    KdNode::Split {
        dim: split,
        value,
        left: Box::new(build_kd(centroids, dim, idx)),
        right: Box::new(build_kd(centroids, dim, right)),
    }
}

impl WordMatcher {
    pub fn new(vocab: &VisualVocabulary, max_checks: Option<usize>) -> Self {
        let root = build_kd(&vocab.centroids, vocab.dim, (0..vocab.k).collect());
        WordMatcher { dim: vocab.dim, centroids: vocab.centroids.clone(), root, max_checks }
    }

    pub fn exact(vocab: &VisualVocabulary) -> Self {
        Self::new(vocab, None)
    }

    /// Nearest word; equal distances resolve to the lowest index.
    pub fn nearest(&self, q: &[f64]) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        let mut heap = BinaryHeap::new();
        heap.push(Pending(0.0, &self.root));
        let mut checks = 0;
        while let Some(Pending(bound, node)) = heap.pop() {
            if bound > best.0 {
                break;
            }
            if self.max_checks.is_some_and(|m| checks >= m) {
                break;
            }
            let mut node = node;
            loop {
                match node {
                    KdNode::Leaf(items) => {
                        checks += 1;
                        for &j in items {
                            let d = sq_dist(&self.centroids[j * self.dim..(j + 1) * self.dim], q);
                            if d < best.0 || (d == best.0 && j < best.1) {
                                best = (d, j);
                            }
                        }
                        break;
                    }
                    KdNode::Split { dim, value, left, right } => {
                        let diff = q[*dim] - value;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        heap.push(Pending(bound.max(diff * diff), far));
                        node = near;
                    }
                }
            }
        }
        best.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramNorm {
    #[default]
    L1,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BofHistogram {
    pub values: Vec<f64>,
    /// Set when the image produced no descriptors.
    pub empty: bool,
}

pub fn encode(descriptors: &DescriptorSet, matcher: &WordMatcher, k: usize, norm: HistogramNorm) -> Result<BofHistogram> {
    if matcher.dim != DESCRIPTOR_DIM && !descriptors.is_empty() {
        return Err(Error::DimensionMismatch { expected: matcher.dim, got: DESCRIPTOR_DIM });
    }
    let mut values = vec![0.0; k];
    for q in descriptors.data.chunks(DESCRIPTOR_DIM) {
        values[matcher.nearest(q)] += 1.0;
    }
    let n = descriptors.len();
    if n == 0 {
        log::warn!("image has no descriptors; histogram left at zero");
    } else if norm == HistogramNorm::L1 {
        values.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(BofHistogram { values, empty: n == 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BofConfig {
    pub vocabulary_size: usize,
    pub detector: DetectorConfig,
    pub kmeans: KMeansConfig,
    /// Descriptors sampled for clustering; all when `None`.
    pub max_vocabulary_descriptors: Option<usize>,
    /// Leaves checked per word lookup; exact search when `None`.
    pub matcher_checks: Option<usize>,
    pub normalisation: HistogramNorm,
    pub svm: SvmConfig,
    /// Z-score histogram dimensions before the SVM.
    pub standardise: bool,
}

impl Default for BofConfig {
    fn default() -> Self {
        BofConfig {
            vocabulary_size: 500,
            detector: DetectorConfig::default(),
            kmeans: KMeansConfig::default(),
            max_vocabulary_descriptors: Some(50_000),
            matcher_checks: Some(32),
            normalisation: HistogramNorm::L1,
            svm: SvmConfig::default(),
            standardise: true,
        }
    }
}

/// Linear SVM over word histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BofClassifier {
    pub classes: Vec<String>,
    pub vocabulary: String,
    scaler: Option<Standardizer>,
    svm: Svm,
}

pub fn train_bof(
    histograms: &[BofHistogram],
    labels: &[String],
    classes: &[String],
    config: &BofConfig,
    vocabulary: &VisualVocabulary,
    seed: u64,
) -> Result<BofClassifier> {
    if histograms.len() != labels.len() {
        return Err(Error::LengthMismatch(histograms.len(), labels.len()));
    }
    let y = labels
        .iter()
        .map(|l| {
            classes.iter().position(|c| c == l).ok_or_else(|| Error::UnknownLabel {
                target: "class vocabulary".into(),
                value: l.clone(),
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    if y.iter().all(|&c| Some(&c) == y.first()) {
        return Err(Error::SingleClassInput);
    }
    let k = vocabulary.k;
    if let Some(h) = histograms.iter().find(|h| h.values.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, got: h.values.len() });
    }
    let x: Vec<f64> = histograms.iter().flat_map(|h| h.values.iter().copied()).collect();
    let scaler = if config.standardise { Some(Standardizer::fit(&x, k)?) } else { None };
    let x = scaler.as_ref().map_or(x.clone(), |s| s.transform(&x));
    let svm = Svm::fit(&x, k, &y, classes.len(), &config.svm, seed)?;
    Ok(BofClassifier { classes: classes.to_vec(), vocabulary: vocabulary.fingerprint(), scaler, svm })
}

impl BofClassifier {
    pub fn predict(&self, histogram: &BofHistogram) -> Result<String> {
        if histogram.values.len() != self.svm.dim {
            return Err(Error::DimensionMismatch { expected: self.svm.dim, got: histogram.values.len() });
        }
        let c = match &self.scaler {
            Some(s) => self.svm.predict_one(&s.transform_row(&histogram.values)),
            None => self.svm.predict_one(&histogram.values),
        };
        Ok(self.classes[c].clone())
    }
}

/// A fold's vocabulary, matcher settings and classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BofModel {
    pub fold: usize,
    pub seed: u64,
    pub vocabulary: VisualVocabulary,
    pub classifier: BofClassifier,
    pub config: BofConfig,
}

impl BofModel {
    pub fn histogram(&self, descriptors: &DescriptorSet) -> Result<BofHistogram> {
        let matcher = WordMatcher::new(&self.vocabulary, self.config.matcher_checks);
        encode(descriptors, &matcher, self.vocabulary.k, self.config.normalisation)
    }

    pub fn predict(&self, descriptors: &[&DescriptorSet]) -> Result<Vec<String>> {
        let matcher = WordMatcher::new(&self.vocabulary, self.config.matcher_checks);
        descriptors
            .iter()
            .map(|d| self.classifier.predict(&encode(d, &matcher, self.vocabulary.k, self.config.normalisation)?))
            .collect()
    }
}

/// Vocabulary and classifier per fold from that fold's training images; fold `i` uses seed `seed + i`.
///
/// `descriptors` is looked up by sample id.
pub fn run_bof_repetitions(
    descriptors: &std::collections::HashMap<String, DescriptorSet>,
    labels: &std::collections::HashMap<String, String>,
    classes: &[String],
    plan: &FoldPlan,
    config: &BofConfig,
    seed: u64,
) -> Result<Vec<BofModel>> {
    let get = |id: &String| {
        descriptors.get(id).ok_or_else(|| Error::Manifest(format!("no descriptors for `{id}`")))
    };
    plan.folds
        .iter()
        .map(|fold| {
            let fold_seed = seed.wrapping_add(fold.index as u64);
            let sets = fold.train.iter().map(get).collect::<Result<Vec<_>>>()?;
            let vocabulary =
                build_vocabulary(&sets, config.vocabulary_size, config.max_vocabulary_descriptors, &config.kmeans, fold_seed)?;
            let matcher = WordMatcher::new(&vocabulary, config.matcher_checks);
            let hists = sets
                .iter()
                .map(|s| encode(s, &matcher, vocabulary.k, config.normalisation))
                .collect::<Result<Vec<_>>>()?;
            let y: Vec<String> = fold
                .train
                .iter()
                .map(|id| labels.get(id).cloned().ok_or_else(|| Error::Manifest(format!("no label for `{id}`"))))
                .collect::<Result<_>>()?;
            let classifier = train_bof(&hists, &y, classes, config, &vocabulary, fold_seed)?;
            Ok(BofModel { fold: fold.index, seed: fold_seed, vocabulary, classifier, config: config.clone() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn image(size: usize, f: impl Fn(usize, usize) -> f32) -> ImageTensor {
        let plane: Vec<f32> = (0..size * size).map(|i| f(i / size, i % size)).collect();
        let data = [plane.clone(), plane.clone(), plane].concat();
        ImageTensor { size, data, converted_from: None }
    }

    fn checkerboard(size: usize, cell: usize) -> ImageTensor {
        image(size, |y, x| if (y / cell + x / cell) % 2 == 0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn uniform_image_has_no_keypoints() {
        let d = extract_descriptors(&image(128, |_, _| 0.5), &DetectorConfig::default());
        assert!(d.is_empty());
    }

    #[test]
    fn checkerboard_has_keypoints_and_is_deterministic() {
        let img = checkerboard(128, 12);
        let a = extract_descriptors(&img, &DetectorConfig::default());
        let b = extract_descriptors(&img, &DetectorConfig::default());
        assert!(!a.is_empty());
        assert_eq!(a, b);
        for i in 0..a.len() {
            let norm: f64 = a.descriptor(i).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-9 || norm == 0.0);
        }
    }

    #[test]
    fn integral_box_sums_match_direct_sums() {
        let img = image(17, |y, x| ((y * 31 + x * 7) % 13) as f32 / 13.0);
        let gray = img.grayscale();
        let ii = Integral::new(&gray, 17, 17);
        let direct = |r: usize, c: usize, rows: usize, cols: usize| {
            let mut s = 0.0;
            for y in r..r + rows {
                for x in c..c + cols {
                    s += f64::from(gray[y * 17 + x]);
                }
            }
            s
        };
        for (r, c, rows, cols) in [(0, 0, 17, 17), (3, 4, 5, 2), (16, 16, 1, 1), (2, 9, 7, 8)] {
            assert!((ii.boxsum(r as i64, c as i64, rows as i64, cols as i64) - direct(r, c, rows, cols)).abs() < 1e-9);
        }
        assert_eq!(ii.boxsum(-5, -5, 5, 5), 0.0);
    }

    fn clustered(seed: u64) -> (Vec<f64>, [Vec<f64>; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let centres = [vec![0.0; 4], vec![5.0; 4], vec![-5.0, 5.0, -5.0, 5.0]];
        let mut pts = Vec::new();
        for c in &centres {
            for _ in 0..40 {
                pts.extend(c.iter().map(|v| v + noise.sample(&mut rng)));
            }
        }
        (pts, centres)
    }

    #[test]
    fn kmeans_recovers_generating_points() {
        let (pts, centres) = clustered(1);
        let v = kmeans(&pts, 4, 3, &KMeansConfig::default(), 7).unwrap();
        for c in &centres {
            let best = (0..3).map(|j| sq_dist(v.centroid(j), c)).fold(f64::INFINITY, f64::min);
            assert!(best.sqrt() < 0.01, "centre {c:?} missed");
        }
        for w in v.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean_and_rejects_small_input() {
        let (pts, _) = clustered(2);
        let v = kmeans(&pts, 4, 1, &KMeansConfig::default(), 0).unwrap();
        let n = pts.len() / 4;
        for d in 0..4 {
            let mean = (0..n).map(|i| pts[i * 4 + d]).sum::<f64>() / n as f64;
            assert!((v.centroids[d] - mean).abs() < 1e-6);
        }
        assert!(matches!(kmeans(&pts[..8], 4, 3, &KMeansConfig::default(), 0), Err(Error::TooFewDescriptors { have: 2, k: 3 })));
    }

    fn random_vocab(k: usize, seed: u64) -> VisualVocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centroids = (0..k * DESCRIPTOR_DIM).map(|_| rng.random::<f64>()).collect();
        VisualVocabulary {
            k,
            dim: DESCRIPTOR_DIM,
            centroids,
            seed,
            descriptor: DESCRIPTOR_TAG.into(),
            iterations: 0,
            inertia: 0.0,
            objective: vec![],
        }
    }

    #[test]
    fn exact_matcher_equals_brute_force() {
        let vocab = random_vocab(60, 3);
        let exact = WordMatcher::exact(&vocab);
        let approx = WordMatcher::new(&vocab, Some(8));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agree = 0;
        let trials = 500;
        for _ in 0..trials {
            let q: Vec<f64> = (0..DESCRIPTOR_DIM).map(|_| rng.random::<f64>()).collect();
            let oracle = nearest(&vocab.centroids, DESCRIPTOR_DIM, &q).0;
            assert_eq!(exact.nearest(&q), oracle);
            agree += usize::from(approx.nearest(&q) == oracle);
        }
        assert!(agree > 0);
    }

    #[test]
    fn histogram_counts_and_normalises() {
        let vocab = random_vocab(10, 5);
        let m = WordMatcher::exact(&vocab);
        let set = DescriptorSet::from_rows([vocab.centroid(3), vocab.centroid(3), vocab.centroid(3)].concat()).unwrap();
        let raw = encode(&set, &m, 10, HistogramNorm::Raw).unwrap();
        assert_eq!(raw.values[3], 3.0);
        assert_eq!(raw.values.iter().sum::<f64>(), 3.0);
        let l1 = encode(&set, &m, 10, HistogramNorm::L1).unwrap();
        assert_eq!(l1.values[3], 1.0);
        let empty = encode(&DescriptorSet::default(), &m, 10, HistogramNorm::L1).unwrap();
        assert!(empty.empty);
        assert_eq!(empty.values, vec![0.0; 10]);
    }

    #[test]
    fn svm_separates_one_hot_histograms() {
        let vocab = random_vocab(6, 0);
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut hists = Vec::new();
        let mut labels = Vec::new();
        for i in 0..12 {
            let mut v = vec![0.0; 6];
            v[(i % 3) * 2 + (i / 3) % 2] = 1.0;
            hists.push(BofHistogram { values: v, empty: false });
            labels.push(classes[i % 3].clone());
        }
        for standardise in [false, true] {
            let cfg = BofConfig { standardise, ..Default::default() };
            let clf = train_bof(&hists, &labels, &classes, &cfg, &vocab, 0).unwrap();
            for (h, l) in hists.iter().zip(&labels) {
                assert_eq!(&clf.predict(h).unwrap(), l);
            }
        }
        let single = vec!["a".to_string(); 12];
        assert!(matches!(train_bof(&hists, &single, &classes, &BofConfig::default(), &vocab, 0), Err(Error::SingleClassInput)));
    }
}
