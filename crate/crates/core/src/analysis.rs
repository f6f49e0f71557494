//! Cross-run statistics: correlation of circuit metrics with accuracy,
//! random-forest prediction of final accuracy from metrics, representation
//! alignment (linear CKA, paired L2), and the data-complexity threshold.
//!
//! The forest is a small CART implementation: variance-reduction splits at
//! midpoints between distinct feature values, mean-leaf prediction, optional
//! bootstrap and per-node feature subsampling. Rows are canonicalized before
//! fitting so results do not depend on input order, and every tree draws
//! from a seed derived from (forest seed, tree index), so a fit is
//! reproducible coordinate for coordinate.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Product-moment correlation. Undefined when either argument has zero
/// variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::config(format!(
            "pearson needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::config("pearson needs at least 2 points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::undefined("pearson undefined: zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Random-forest hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// None = grow until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Fraction of features considered per split.
    pub feature_subsample: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 2,
            feature_subsample: 1.0 / 3.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Bagged regression trees.
#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
}

impl Forest {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::config(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(Array1::from_iter(
            x.outer_iter()
                .map(|r| self.predict_row(r.as_slice().expect("contiguous"))),
        ))
    }
}

/// Fits a forest of variance-reduction CART trees.
pub fn forest_fit(x: &Array2<f64>, y: &[f64], cfg: &ForestConfig) -> Result<Forest> {
    let n = x.nrows();
    let p = x.ncols();
    if n != y.len() {
        return Err(Error::config("feature/target row counts differ"));
    }
    if n < 2 || p == 0 {
        return Err(Error::config("forest needs >= 2 rows and >= 1 feature"));
    }
    if cfg.n_trees == 0 {
        return Err(Error::config("n_trees must be >= 1"));
    }
    if cfg.min_samples_leaf == 0 {
        return Err(Error::config("min_samples_leaf must be >= 1"));
    }

    // Canonical row order, so fits ignore input permutation.
    let mut canon: Vec<usize> = (0..n).collect();
    canon.sort_by(|&a, &b| {
        let ra = x.row(a);
        let rb = x.row(b);
        for j in 0..p {
            match ra[j].partial_cmp(&rb[j]) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(ord) => return ord,
            }
        }
        y[a].partial_cmp(&y[b]).unwrap_or(std::cmp::Ordering::Equal)
    });

    let mtry = ((p as f64 * cfg.feature_subsample).ceil() as usize).clamp(1, p);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for ti in 0..cfg.n_trees {
        let mut tree_rng = rng::rng_for(cfg.seed, 0x4000 + ti as u64);
        let indices: Vec<usize> = if cfg.bootstrap {
            (0..n).map(|_| canon[tree_rng.random_range(0..n)]).collect()
        } else {
            canon.clone()
        };
        let mut nodes = Vec::new();
        grow(x, y, indices, 0, cfg, mtry, &mut tree_rng, &mut nodes);
        trees.push(Tree { nodes });
    }
    Ok(Forest { trees, n_features: p })
}

/// Recursively grows one subtree; returns its root index in `nodes`.
fn grow(
    x: &Array2<f64>,
    y: &[f64],
    indices: Vec<usize>,
    depth: usize,
    cfg: &ForestConfig,
    mtry: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let mean = indices.iter().map(|&i| y[i]).sum::<f64>() / indices.len() as f64;
    let pure = indices.iter().all(|&i| y[i] == y[indices[0]]);
    let too_small = indices.len() < 2 * cfg.min_samples_leaf;
    let too_deep = cfg.max_depth.is_some_and(|d| depth >= d);
    if pure || too_small || too_deep {
        nodes.push(Node::Leaf(mean));
        return nodes.len() - 1;
    }

    let p = x.ncols();
    let mut features: Vec<usize> = rand::seq::index::sample(rng, p, mtry).into_iter().collect();
    features.sort_unstable();

    let mut best: Option<(f64, usize, f64)> = None; // (sse, feature, threshold)
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(indices.len());
    for &f in &features {
        pairs.clear();
        pairs.extend(indices.iter().map(|&i| (x[(i, f)], y[i])));
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let m = pairs.len();
        // Prefix sums let each candidate split evaluate in O(1).
        let mut sum_l = 0.0;
        let mut sq_l = 0.0;
        let total_sum: f64 = pairs.iter().map(|p| p.1).sum();
        let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        for i in 1..m {
            sum_l += pairs[i - 1].1;
            sq_l += pairs[i - 1].1 * pairs[i - 1].1;
            if pairs[i - 1].0 == pairs[i].0 {
                continue; // no threshold separates equal values
            }
            if i < cfg.min_samples_leaf || m - i < cfg.min_samples_leaf {
                continue;
            }
            let nl = i as f64;
            let nr = (m - i) as f64;
            let sse_l = sq_l - sum_l * sum_l / nl;
            let sum_r = total_sum - sum_l;
            let sse_r = (total_sq - sq_l) - sum_r * sum_r / nr;
            let sse = sse_l + sse_r;
            if best.map_or(true, |(b, _, _)| sse < b) {
                best = Some((sse, f, 0.5 * (pairs[i - 1].0 + pairs[i].0)));
            }
        }
    }

    let Some((_, feature, threshold)) = best else {
        nodes.push(Node::Leaf(mean));
        return nodes.len() - 1;
    };

    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        indices.iter().partition(|&&i| x[(i, feature)] <= threshold);
    let slot = nodes.len();
    nodes.push(Node::Leaf(f64::NAN)); // placeholder until children exist
    let left = grow(x, y, left_idx, depth + 1, cfg, mtry, rng, nodes);
    let right = grow(x, y, right_idx, depth + 1, cfg, mtry, rng, nodes);
    nodes[slot] = Node::Split { feature, threshold, left, right };
    slot
}

/// Coefficient of determination, 1 - SS_res / SS_tot. Undefined for a
/// constant target.
pub fn r2_score(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::config("r2 needs matching nonempty slices"));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::undefined("r2 undefined: constant target"));
    }
    let ss_res: f64 = pred.iter().zip(y).map(|(&p, &v)| (p - v) * (p - v)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Held-out R2 of a fitted forest.
pub fn forest_r2(model: &Forest, x: &Array2<f64>, y: &[f64]) -> Result<f64> {
    let pred = model.predict(x)?;
    r2_score(pred.as_slice().expect("contiguous"), y)
}

/// Repeated random train/validation splits grouped by record id. Returns
/// per-split held-out R2 values.
pub fn forest_cv_r2(
    x: &Array2<f64>,
    y: &[f64],
    ids: &[u64],
    cfg: &ForestConfig,
    n_splits: usize,
    train_frac: f64,
    split_seed: u64,
) -> Result<Vec<f64>> {
    if ids.len() != x.nrows() {
        return Err(Error::config("id/row counts differ"));
    }
    if !(0.0..1.0).contains(&train_frac) || train_frac == 0.0 {
        return Err(Error::config("train_frac must be in (0, 1)"));
    }
    // Group rows by id so a run never straddles the split.
    let mut unique: Vec<u64> = Vec::new();
    for &id in ids {
        if !unique.contains(&id) {
            unique.push(id);
        }
    }
    unique.sort_unstable();
    let mut out = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let mut rng = rng::rng_for(split_seed, 0x5000 + s as u64);
        let mut order = unique.clone();
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let n_train = ((order.len() as f64) * train_frac).round() as usize;
        let n_train = n_train.clamp(1, order.len() - 1);
        let train_ids = &order[..n_train];
        let (mut xi_train, mut y_train, mut xi_val, mut y_val) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, &id) in ids.iter().enumerate() {
            if train_ids.contains(&id) {
                xi_train.push(i);
                y_train.push(y[i]);
            } else {
                xi_val.push(i);
                y_val.push(y[i]);
            }
        }
        let x_train = select_rows(x, &xi_train);
        let x_val = select_rows(x, &xi_val);
        let model = forest_fit(&x_train, &y_train, cfg)?;
        out.push(forest_r2(&model, &x_val, &y_val)?);
    }
    Ok(out)
}

fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}

/// Mean and sample standard deviation of a slice.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Linear centered kernel alignment between two feature matrices with the
/// same row count: ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F).
/// Invariant to orthogonal transforms and isotropic scaling of either side.
pub fn cka_linear(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::config("cka needs equal row counts"));
    }
    if x.nrows() < 2 {
        return Err(Error::config("cka needs at least 2 rows"));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let cross = yc.t().dot(&xc);
    let num: f64 = cross.iter().map(|v| v * v).sum();
    let xx = xc.t().dot(&xc);
    let yy = yc.t().dot(&yc);
    let nx: f64 = xx.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny: f64 = yy.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::undefined("cka undefined: zero-variance features"));
    }
    Ok(num / (nx * ny))
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / col.len() as f64;
        col.mapv_inplace(|v| v - mean);
    }
    out
}

/// Mean Euclidean distance between paired rows. Zero iff the inputs are
/// identical.
pub fn paired_l2(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::config(format!(
            "paired_l2 shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::config("paired_l2 needs at least one pair"));
    }
    let mut total = 0.0;
    for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
        let d2: f64 = ra.iter().zip(rb.iter()).map(|(&u, &v)| (u - v) * (u - v)).sum();
        total += d2.sqrt();
    }
    Ok(total / a.nrows() as f64)
}

/// Seed-aggregated ICL for one (K, B) grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k: f64,
    pub b: f64,
    pub icl_mean: f64,
    pub n_seeds: usize,
}

/// Minimal K*sqrt(B) among cells whose seed-mean ICL clears `icl_threshold`
/// with at least `min_seeds` seeds. None when no cell qualifies.
pub fn complexity_threshold(
    cells: &[GridCell],
    icl_threshold: f64,
    min_seeds: usize,
) -> Result<Option<f64>> {
    if cells.is_empty() {
        return Err(Error::config("complexity threshold needs a nonempty grid"));
    }
    Ok(cells
        .iter()
        .filter(|c| c.icl_mean >= icl_threshold && c.n_seeds >= min_seeds)
        .map(|c| c.k * c.b.sqrt())
        .fold(None, |acc: Option<f64>, v| {
            Some(match acc {
                None => v,
                Some(m) => m.min(v),
            })
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand_distr::StandardNormal;

    #[test]
    fn pearson_endpoints_and_oracle() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let same = pearson(&xs, &xs).unwrap();
        assert!((same - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);

        // Hand computation: cov = 5, var_x = 2, var_y = 114/9,
        // rho = 5 / sqrt(2 * 114/9) = 15 / sqrt(228).
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 7.0]).unwrap();
        assert!((r - 15.0 / 228.0f64.sqrt()).abs() < 1e-12, "rho {r}");
        assert!((r - 0.9933992677987828).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant() {
        let mut rng = rng_for(1, 1);
        let xs: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ys: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let a = pearson(&xs, &ys).unwrap();
        let b = pearson(&ys, &xs).unwrap();
        assert!((a - b).abs() < 1e-12);
        let scaled: Vec<f64> = xs.iter().map(|v| 3.5 * v + 11.0).collect();
        let c = pearson(&scaled, &ys).unwrap();
        assert!((a - c).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn pearson_rejects_zero_variance() {
        let err = pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::Undefined(_)));
    }

    fn toy_data(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = rng_for(seed, 2);
        let mut x = Array2::zeros((n, 3));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample(StandardNormal);
            x[(i, 0)] = a;
            x[(i, 1)] = b;
            x[(i, 2)] = c;
            y.push(a + b * b);
        }
        (x, y)
    }

    #[test]
    fn single_unbounded_tree_memorizes_training_set_exactly() {
        let (x, y) = toy_data(50, 3);
        let cfg = ForestConfig {
            n_trees: 1,
            min_samples_leaf: 1,
            feature_subsample: 1.0,
            bootstrap: false,
            ..ForestConfig::default()
        };
        let model = forest_fit(&x, &y, &cfg).unwrap();
        let r2 = forest_r2(&model, &x, &y).unwrap();
        assert_eq!(r2, 1.0);
    }

    #[test]
    fn mean_predictor_scores_zero() {
        let y = [1.0, 2.0, 3.0, 10.0];
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let pred = vec![mean; y.len()];
        assert_eq!(r2_score(&pred, &y).unwrap(), 0.0);
    }

    #[test]
    fn constant_target_is_undefined() {
        let pred = [0.5, 0.5];
        let err = r2_score(&pred, &[2.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Undefined(_)));
    }

    #[test]
    fn forest_generalizes_on_smooth_function() {
        let (x_train, y_train) = toy_data(300, 4);
        let (x_val, y_val) = toy_data(100, 5);
        // With only 3 features, let every split see all of them.
        let cfg = ForestConfig { feature_subsample: 1.0, ..ForestConfig::default() };
        let model = forest_fit(&x_train, &y_train, &cfg).unwrap();
        let r2 = forest_r2(&model, &x_val, &y_val).unwrap();
        assert!(r2 > 0.75, "held-out r2 {r2}");
    }

    #[test]
    fn fit_ignores_row_order() {
        let (x, y) = toy_data(60, 6);
        let cfg = ForestConfig { n_trees: 10, ..ForestConfig::default() };
        let model_a = forest_fit(&x, &y, &cfg).unwrap();

        // Reverse the rows; predictions must agree bitwise.
        let n = x.nrows();
        let mut xr = Array2::zeros(x.dim());
        let mut yr = vec![0.0; n];
        for i in 0..n {
            xr.row_mut(i).assign(&x.row(n - 1 - i));
            yr[i] = y[n - 1 - i];
        }
        let model_b = forest_fit(&xr, &yr, &cfg).unwrap();
        let (probe, _) = toy_data(20, 7);
        let pa = model_a.predict(&probe).unwrap();
        let pb = model_b.predict(&probe).unwrap();
        for (a, b) in pa.iter().zip(pb.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn single_tree_train_r2_monotone_in_depth() {
        let (x, y) = toy_data(80, 8);
        let mut prev = f64::MIN;
        for depth in [1, 2, 4, 8] {
            let cfg = ForestConfig {
                n_trees: 1,
                max_depth: Some(depth),
                min_samples_leaf: 1,
                feature_subsample: 1.0,
                bootstrap: false,
                ..ForestConfig::default()
            };
            let model = forest_fit(&x, &y, &cfg).unwrap();
            let r2 = forest_r2(&model, &x, &y).unwrap();
            assert!(r2 >= prev - 1e-12, "depth {depth}: {r2} < {prev}");
            prev = r2;
        }
    }

    #[test]
    fn cv_splits_are_reasonable_and_deterministic() {
        let (x, y) = toy_data(120, 9);
        let ids: Vec<u64> = (0..120).collect();
        let cfg = ForestConfig::default();
        let a = forest_cv_r2(&x, &y, &ids, &cfg, 5, 0.8, 42).unwrap();
        let b = forest_cv_r2(&x, &y, &ids, &cfg, 5, 0.8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let (mean, std) = mean_std(&a);
        assert!(mean > 0.5, "cv mean {mean}");
        assert!(std >= 0.0);
    }

    fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, 10);
        let mut x = Array2::zeros((n, p));
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        x
    }

    /// Householder reflection: exactly orthogonal by construction.
    fn reflection(p: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, 11);
        let v: Array1<f64> =
            Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let vn = v.dot(&v);
        let mut r = Array2::eye(p);
        for i in 0..p {
            for j in 0..p {
                r[(i, j)] -= 2.0 * v[i] * v[j] / vn;
            }
        }
        r
    }

    #[test]
    fn cka_invariances_hold_to_1e9() {
        let x = random_matrix(36, 7, 12);
        assert!((cka_linear(&x, &x).unwrap() - 1.0).abs() < 1e-9);

        let r = reflection(7, 13);
        let xr = x.dot(&r);
        assert!((cka_linear(&x, &xr).unwrap() - 1.0).abs() < 1e-9);

        let scaled = x.mapv(|v| v * 2.5);
        assert!((cka_linear(&x, &scaled).unwrap() - 1.0).abs() < 1e-9);

        // Independent features have low alignment.
        let yind = random_matrix(36, 7, 14);
        let low = cka_linear(&x, &yind).unwrap();
        assert!(low < 0.5, "independent cka {low}");
    }

    #[test]
    fn cka_rejects_degenerate_inputs() {
        let x = random_matrix(10, 3, 15);
        let zeros = Array2::<f64>::zeros((10, 3));
        assert!(matches!(cka_linear(&x, &zeros).unwrap_err(), Error::Undefined(_)));
        let y = random_matrix(9, 3, 16);
        assert!(cka_linear(&x, &y).is_err());
    }

    #[test]
    fn paired_l2_examples() {
        let a = random_matrix(12, 5, 17);
        assert_eq!(paired_l2(&a, &a).unwrap(), 0.0);

        // Offset every row by a unit vector.
        let mut b = a.clone();
        for mut row in b.rows_mut() {
            row[0] += 1.0;
        }
        assert!((paired_l2(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        // Any single differing element makes the distance positive.
        let mut c = a.clone();
        c[(3, 2)] += 1e-8;
        assert!(paired_l2(&a, &c).unwrap() > 0.0);

        let short = random_matrix(12, 4, 18);
        assert!(paired_l2(&a, &short).is_err());
    }

    #[test]
    fn complexity_threshold_examples() {
        let all_pass = vec![
            GridCell { k: 128.0, b: 1.0, icl_mean: 1.0, n_seeds: 3 },
            GridCell { k: 2048.0, b: 4.0, icl_mean: 1.0, n_seeds: 3 },
            GridCell { k: 512.0, b: 2.0, icl_mean: 1.0, n_seeds: 3 },
        ];
        let v = complexity_threshold(&all_pass, 0.95, 3).unwrap().unwrap();
        assert_eq!(v, 128.0);

        // 2048 * sqrt(4) = 4096.
        let one = vec![GridCell { k: 2048.0, b: 4.0, icl_mean: 0.97, n_seeds: 3 }];
        assert_eq!(complexity_threshold(&one, 0.95, 3).unwrap(), Some(4096.0));

        let none = vec![GridCell { k: 128.0, b: 1.0, icl_mean: 0.5, n_seeds: 3 }];
        assert_eq!(complexity_threshold(&none, 0.95, 3).unwrap(), None);

        // Enlarging the qualifying set can only lower the minimum.
        let mut grid = one.clone();
        grid.push(GridCell { k: 256.0, b: 1.0, icl_mean: 0.99, n_seeds: 3 });
        let v2 = complexity_threshold(&grid, 0.95, 3).unwrap().unwrap();
        assert!(v2 <= 4096.0);
        assert_eq!(v2, 256.0);

        assert!(complexity_threshold(&[], 0.95, 3).is_err());

        // Cells with too few seeds never qualify.
        let thin = vec![GridCell { k: 64.0, b: 1.0, icl_mean: 1.0, n_seeds: 2 }];
        assert_eq!(complexity_threshold(&thin, 0.95, 3).unwrap(), None);
    }
}
