//! Honest midpoint forests with empirical score-window splits.
//!
//! Trees are grown on a split sample: at each node a fresh mask of
//! `ceil(gamma d)` coordinates is drawn, every candidate gets its empirical
//! midpoint impurity decrease, and the split coordinate is drawn uniformly from
//! the window `{j : G_j >= 2^{-2w} G_max}`. Leaf values are then fitted on a
//! separate estimation sample.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dynamics::mean_se;
use crate::environment::{sample_mask, ModelConfig};
use crate::error::{invalid, Result};
use crate::scalar::REL_TIE_TOL;
use crate::seed::{stream_rng, SimRng};

/// Row-major `n x d` design with responses and the noise-free signal.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

/// `X ~ U[0,1]^d`, `y = X beta + N(0, sigma0^2)` with `beta` zero-padded to `d`.
pub fn generate_data<R: Rng + ?Sized>(model: &ModelConfig, n: usize, rng: &mut R) -> Result<Dataset> {
    model.validate()?;
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let d = model.d;
    let noise = Normal::new(0.0, model.sigma0_sq.sqrt()).map_err(|e| invalid(e.to_string()))?;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut mu = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        x.extend((0..d).map(|_| rng.random::<f64>()));
        let m: f64 = model.beta.iter().zip(&x[start..]).map(|(b, v)| b * v).sum();
        mu.push(m);
        y.push(if model.sigma0_sq > 0.0 { m + noise.sample(rng) } else { m });
    }
    Ok(Dataset { d, x, y, mu })
}

/// Product of dyadic intervals `(k_j 2^{-m_j}, (k_j + 1) 2^{-m_j})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cell {
    pub index: Vec<u64>,
    pub level: Vec<u32>,
}

impl Cell {
    pub fn root(d: usize) -> Self {
        Cell {
            index: vec![0; d],
            level: vec![0; d],
        }
    }

    pub fn bounds(&self, j: usize) -> (f64, f64) {
        let w = (-(self.level[j] as f64)).exp2();
        (self.index[j] as f64 * w, (self.index[j] + 1) as f64 * w)
    }

    pub fn midpoint(&self, j: usize) -> f64 {
        let (a, b) = self.bounds(j);
        0.5 * (a + b)
    }

    pub fn side(&self, j: usize) -> f64 {
        (-(self.level[j] as f64)).exp2()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.index.len()).all(|j| {
            let (a, b) = self.bounds(j);
            // [a, b), matching the `x < midpoint` routing; 1 belongs to the last cell
            x[j] >= a && (x[j] < b || (b == 1.0 && x[j] == 1.0))
        })
    }

    pub fn children(&self, j: usize) -> (Cell, Cell) {
        let mut left = self.clone();
        left.level[j] += 1;
        left.index[j] *= 2;
        let mut right = left.clone();
        right.index[j] += 1;
        (left, right)
    }
}

fn goes_left(cell: &Cell, j: usize, x: &[f64]) -> bool {
    x[j] < cell.midpoint(j)
}

/// Biased-variance impurity decrease of splitting `cell` at the midpoint of
/// `j`, on the sample points listed in `idx`. Returns `-inf` when the cell is
/// empty or either child has fewer than `min_leaf` points.
pub fn empirical_gain(data: &Dataset, idx: &[usize], cell: &Cell, j: usize, min_leaf: usize) -> f64 {
    let n = idx.len();
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    let mean = idx.iter().map(|&i| data.y[i]).sum::<f64>() / n as f64;
    let (mut nl, mut sl, mut sr) = (0usize, 0.0, 0.0);
    for &i in idx {
        let c = data.y[i] - mean;
        if goes_left(cell, j, data.row(i)) {
            nl += 1;
            sl += c;
        } else {
            sr += c;
        }
    }
    let nr = n - nl;
    if nl < min_leaf.max(1) || nr < min_leaf.max(1) {
        return f64::NEG_INFINITY;
    }
    // centred: Var - pL VarL - pR VarR = (sl^2/nl + sr^2/nr) / n
    (sl * sl / nl as f64 + sr * sr / nr as f64) / n as f64
}

/// Score-window width; `Infinite` keeps every positive-gain member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    Finite(f64),
    Infinite,
}

impl Window {
    pub fn new(w: f64) -> Result<Self> {
        if w == f64::INFINITY {
            Ok(Window::Infinite)
        } else if w >= 0.0 && w.is_finite() {
            Ok(Window::Finite(w))
        } else {
            Err(invalid(format!("window must be >= 0, got {w}")))
        }
    }

    /// Members of `mask` admitted by the window given their gains.
    pub fn action_set(&self, mask: &[usize], gains: &[f64]) -> Vec<usize> {
        let gmax = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if gmax > 0.0 {
            let keep = |g: f64| match *self {
                Window::Finite(w) => g >= (-2.0 * w).exp2() * gmax - REL_TIE_TOL * gmax,
                Window::Infinite => g > 0.0,
            };
            mask.iter().zip(gains).filter(|(_, &g)| keep(g)).map(|(&j, _)| j).collect()
        } else {
            // no positive gain: every split that respects the leaf size
            mask.iter().zip(gains).filter(|(_, g)| g.is_finite()).map(|(&j, _)| j).collect()
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Finite(w) => write!(f, "{w}"),
            Window::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for Window {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Window::Infinite);
        }
        Window::new(t.parse::<f64>().map_err(|_| invalid(format!("bad window '{s}'")))?)
    }
}

impl Serialize for Window {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::Finite(w) => ser.serialize_f64(*w),
            Window::Infinite => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let w = match Raw::deserialize(de)? {
            Raw::Num(w) => Window::new(w),
            Raw::Text(s) => s.parse(),
        };
        w.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeNode {
    pub cell: Cell,
    pub depth: usize,
    /// `(coordinate, left child, right child)`; `None` for leaves.
    pub split: Option<(usize, usize, usize)>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut k = 0;
        while let Some((j, l, r)) = self.nodes[k].split {
            k = if goes_left(&self.nodes[k].cell, j, x) { l } else { r };
        }
        k
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&k| self.nodes[k].split.is_none())
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Honest leaf means from `est`; empty leaves get 0.
    pub fn fit(&mut self, est: &Dataset) {
        let mut sum = vec![0.0; self.nodes.len()];
        let mut cnt = vec![0usize; self.nodes.len()];
        for i in 0..est.len() {
            let k = self.leaf_of(est.row(i));
            sum[k] += est.y[i];
            cnt[k] += 1;
        }
        for (k, node) in self.nodes.iter_mut().enumerate() {
            node.value = if cnt[k] > 0 { sum[k] / cnt[k] as f64 } else { 0.0 };
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.nodes[self.leaf_of(x)].value
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub gamma: f64,
    pub window: Window,
    pub depth: usize,
    pub min_leaf: usize,
}

impl GrowParams {
    pub fn mask_size(&self, d: usize) -> Result<usize> {
        ModelConfig::m_from_gamma(d, self.gamma)
    }
}

/// Grow one tree on `split`; leaf values are left at 0 until [`Tree::fit`].
pub fn grow_tree<R: Rng + ?Sized>(split: &Dataset, params: &GrowParams, rng: &mut R) -> Result<Tree> {
    let d = split.d;
    let m = params.mask_size(d)?;
    let mut nodes = vec![TreeNode {
        cell: Cell::root(d),
        depth: 0,
        split: None,
        value: 0.0,
    }];
    let mut stack = vec![(0usize, (0..split.len()).collect::<Vec<_>>())];
    while let Some((k, idx)) = stack.pop() {
        if nodes[k].depth >= params.depth {
            continue;
        }
        let mask = sample_mask(rng, d, m)?;
        let cell = nodes[k].cell.clone();
        let gains: Vec<f64> = mask
            .members()
            .iter()
            .map(|&j| empirical_gain(split, &idx, &cell, j, params.min_leaf))
            .collect();
        let actions = params.window.action_set(mask.members(), &gains);
        let Some(&j) = actions.choose(rng) else {
            continue;
        };
        let (lc, rc) = cell.children(j);
        let (li, ri): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| goes_left(&cell, j, split.row(i)));
        let depth = nodes[k].depth + 1;
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(TreeNode {
            cell: lc,
            depth,
            split: None,
            value: 0.0,
        });
        nodes.push(TreeNode {
            cell: rc,
            depth,
            split: None,
            value: 0.0,
        });
        nodes[k].split = Some((j, l, r));
        stack.push((r, ri));
        stack.push((l, li));
    }
    Ok(Tree { nodes })
}

/// Fit every tree honestly on `est` and average their predictions on `test`.
pub fn fit_and_predict(trees: &mut [Tree], est: &Dataset, test: &[Vec<f64>]) -> Vec<f64> {
    for t in trees.iter_mut() {
        t.fit(est);
    }
    let b = trees.len() as f64;
    test.iter()
        .map(|x| trees.iter().map(|t| t.predict(x)).sum::<f64>() / b)
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    pub d: usize,
    pub s: usize,
    /// Informative coefficients; all ones when empty.
    pub beta: Vec<f64>,
    pub n0: usize,
    pub n_test: usize,
    pub depth: usize,
    pub min_leaf: usize,
    pub trees: usize,
    pub reps: usize,
    pub gamma_grid: Vec<f64>,
    pub w_grid: Vec<Window>,
    /// `||beta||_2 / sigma0`.
    pub snr_grid: Vec<f64>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            d: 100,
            s: 5,
            beta: vec![],
            n0: 500,
            n_test: 100,
            depth: 5,
            min_leaf: 5,
            trees: 200,
            reps: 20,
            gamma_grid: vec![0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            w_grid: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0]
                .into_iter()
                .map(Window::Finite)
                .chain([Window::Infinite])
                .collect(),
            snr_grid: vec![0.5, 2.0],
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() || self.w_grid.is_empty() || self.snr_grid.is_empty() {
            return Err(invalid("grids must be nonempty"));
        }
        if let Some(g) = self.gamma_grid.iter().find(|&&g| !(g > 0.0 && g <= 1.0)) {
            return Err(invalid(format!("gamma must lie in (0, 1], got {g}")));
        }
        if let Some(r) = self.snr_grid.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
            return Err(invalid(format!("snr must be positive and finite, got {r}")));
        }
        if self.reps < 2 || self.trees == 0 || self.n0 == 0 || self.n_test == 0 {
            return Err(invalid("reps >= 2 and positive trees, n0, n_test are required"));
        }
        self.model(self.snr_grid[0]).map(|_| ())
    }

    pub fn beta(&self) -> Vec<f64> {
        if self.beta.is_empty() {
            vec![1.0; self.s]
        } else {
            self.beta.clone()
        }
    }

    /// Model with `sigma0 = ||beta||_2 / snr`; `m` is irrelevant here.
    pub fn model(&self, snr: f64) -> Result<ModelConfig> {
        let beta = self.beta();
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        let sigma0 = norm / snr;
        ModelConfig::new(self.d, self.s, self.d, beta, sigma0 * sigma0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapRow {
    pub gamma: f64,
    pub w: Window,
    pub snr: f64,
    pub rep_count: usize,
    pub mean_mse: f64,
    pub se: f64,
}

/// Test MSE `mean (mu(x') - forest(x'))^2` of one forest.
pub fn forest_mse(grid: &ExperimentGrid, params: &GrowParams, data: &ReplicateData, tree_seed: u64) -> Result<f64> {
    let mut trees = (0..grid.trees)
        .map(|b| grow_tree(&data.split, params, &mut stream_rng(tree_seed, &[b as u64])))
        .collect::<Result<Vec<_>>>()?;
    let pred = fit_and_predict(&mut trees, &data.est, &data.test_x);
    Ok(pred
        .iter()
        .zip(&data.test_mu)
        .map(|(p, m)| (p - m) * (p - m))
        .sum::<f64>()
        / pred.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub split: Dataset,
    pub est: Dataset,
    pub test_x: Vec<Vec<f64>>,
    pub test_mu: Vec<f64>,
}

/// Split, estimation and test samples for replicate `rep`; shared by every
/// grid cell at the same SNR.
pub fn replicate_data(grid: &ExperimentGrid, model: &ModelConfig, seed: u64, snr_idx: usize, rep: usize) -> Result<ReplicateData> {
    let mut rng: SimRng = stream_rng(seed, &[0xDA7A, snr_idx as u64, rep as u64]);
    let split = generate_data(model, grid.n0, &mut rng)?;
    let est = generate_data(model, grid.n0, &mut rng)?;
    let test = generate_data(model, grid.n_test, &mut rng)?;
    let test_x = (0..test.len()).map(|i| test.row(i).to_vec()).collect();
    Ok(ReplicateData {
        split,
        est,
        test_x,
        test_mu: test.mu,
    })
}

/// Mean test MSE for every `(snr, gamma, w)` cell.
///
/// Replicate `r` uses the same data in every cell of one SNR, and tree `b`
/// uses the same random stream in every cell, so cell contrasts are paired.
pub fn heatmap_experiment(grid: &ExperimentGrid, seed: u64) -> Result<Vec<HeatmapRow>> {
    grid.validate()?;
    let mut cells = Vec::new();
    for (si, &snr) in grid.snr_grid.iter().enumerate() {
        for &gamma in &grid.gamma_grid {
            for &w in &grid.w_grid {
                cells.push((si, snr, gamma, w));
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..grid.reps).map(move |r| (c, r)))
        .collect();
    let mses = jobs
        .par_iter()
        .map(|&(c, rep)| {
            let (si, snr, gamma, window) = cells[c];
            let model = grid.model(snr)?;
            let data = replicate_data(grid, &model, seed, si, rep)?;
            let params = GrowParams {
                gamma,
                window,
                depth: grid.depth,
                min_leaf: grid.min_leaf,
            };
            let tree_seed = crate::seed::derive_seed(seed, &[0x7EE5, si as u64, rep as u64]);
            forest_mse(grid, &params, &data, tree_seed)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(c, &(_, snr, gamma, w))| {
            let vals = &mses[c * grid.reps..(c + 1) * grid.reps];
            let (sum, sumsq) = vals.iter().fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
            let (mean_mse, se) = mean_se(grid.reps, sum, sumsq);
            HeatmapRow {
                gamma,
                w,
                snr,
                rep_count: grid.reps,
                mean_mse,
                se,
            }
        })
        .collect())
}
