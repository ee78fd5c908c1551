//! Diagonal-covariance Gaussian mixture: EM fitting, log-density, score and
//! responsibilities.
//!
//! Every density evaluation goes through log-sum-exp; raw component
//! densities are never exponentiated on their own.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Floor applied when a data column has zero variance.
const MIN_VARIANCE: f64 = 1e-12;
/// A component whose total responsibility falls below this is re-seeded.
const EMPTY_COMPONENT_MASS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    #[serde(with = "crate::serde_matrix")]
    means: Array2<f64>,
    #[serde(with = "crate::serde_matrix")]
    variances: Array2<f64>,
    #[serde(with = "crate::serde_matrix::vector")]
    weights: Array1<f64>,
}

impl GmmParams {
    pub fn new(means: Array2<f64>, variances: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        let params = Self {
            means,
            variances,
            weights,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks shapes, positivity of variances and that weights form a simplex.
    pub fn validate(&self) -> Result<()> {
        let (k, d) = self.means.dim();
        if k == 0 || d == 0 {
            return Err(Error::InvalidConfig(
                "mixture needs at least one component and dimension".into(),
            ));
        }
        if self.variances.dim() != (k, d) {
            return Err(Error::Inconsistent(format!(
                "variances shape {:?} does not match means {:?}",
                self.variances.dim(),
                (k, d)
            )));
        }
        if self.weights.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: self.weights.len(),
            });
        }
        if self.means.iter().any(|v| !v.is_finite()) {
            return Err(Error::Inconsistent("non-finite component mean".into()));
        }
        if self.variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Inconsistent(
                "variances must be finite and positive".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Inconsistent("negative mixture weight".into()));
        }
        let total = self.weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Inconsistent(format!(
                "mixture weights sum to {total}"
            )));
        }
        Ok(())
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn n_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Same mixture with components reordered: component `i` of the result is
    /// component `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> GmmParams {
        GmmParams {
            means: self.means.select(Axis(0), order),
            variances: self.variances.select(Axis(0), order),
            weights: order.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    fn check_dim(&self, z: ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Per-component `ln pi_c + ln N(z; mu_c, diag var_c)`.
    /// `sum_d ln(2 pi var_cd)` for every component.
    fn log_dets(&self) -> Vec<f64> {
        self.variances
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&var| (2.0 * PI * var).ln()).sum())
            .collect()
    }

    fn joint_log_terms(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.joint_log_terms_with(z, &self.log_dets())
    }

    fn joint_log_terms_with(&self, z: ArrayView1<f64>, log_dets: &[f64]) -> Array1<f64> {
        let mut out = Array1::zeros(self.n_components());
        for (c, term) in out.iter_mut().enumerate() {
            let w = self.weights[c];
            if w <= 0.0 {
                *term = f64::NEG_INFINITY;
                continue;
            }
            let quad = sum4(
                z.iter()
                    .zip(self.means.row(c))
                    .zip(self.variances.row(c))
                    .map(|((&x, &mu), &var)| (x - mu) * (x - mu) / var),
            );
            *term = w.ln() - 0.5 * (log_dets[c] + quad);
        }
        out
    }

    /// Score function with the per-component normalizers computed once, for
    /// callers that evaluate it at many points.
    pub fn score_fn(&self) -> impl Fn(ArrayView1<f64>) -> Result<Array1<f64>> + Sync + '_ {
        let log_dets = self.log_dets();
        move |z| {
            self.check_dim(z)?;
            let resp = normalize_log_terms(self.joint_log_terms_with(z, &log_dets)).1;
            Ok(self.score_from_resp(z, &resp))
        }
    }

    /// `log sum_c pi_c N(z; mu_c, diag var_c)`.
    pub fn log_density(&self, z: ArrayView1<f64>) -> Result<f64> {
        self.check_dim(z)?;
        Ok(log_sum_exp(self.joint_log_terms(z).view()))
    }

    /// Posterior component probabilities at `z`, normalized in log space.
    pub fn responsibilities(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_dim(z)?;
        Ok(normalize_log_terms(self.joint_log_terms(z)).1)
    }

    /// Gradient of [`log_density`](Self::log_density):
    /// `sum_c r_c(z) (mu_c - z) / var_c`.
    pub fn score(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        let resp = self.responsibilities(z)?;
        Ok(self.score_from_resp(z, &resp))
    }

    fn score_from_resp(&self, z: ArrayView1<f64>, resp: &Array1<f64>) -> Array1<f64> {
        let mut grad = Array1::zeros(self.dim());
        for (c, &r) in resp.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            for (((g, &x), &mu), &var) in grad
                .iter_mut()
                .zip(z)
                .zip(self.means.row(c))
                .zip(self.variances.row(c))
            {
                *g += r * (mu - x) / var;
            }
        }
        grad
    }
}

pub fn gmm_log_density(params: &GmmParams, z: ArrayView1<f64>) -> Result<f64> {
    params.log_density(z)
}

pub fn gmm_score(params: &GmmParams, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    params.score(z)
}

pub fn gmm_responsibilities(params: &GmmParams, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    params.responsibilities(z)
}

fn log_sum_exp(terms: ArrayView1<f64>) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Returns `(log normalizer, normalized probabilities)`.
fn normalize_log_terms(terms: Array1<f64>) -> (f64, Array1<f64>) {
    let lse = log_sum_exp(terms.view());
    let probs = terms.mapv(|t| (t - lse).exp());
    (lse, probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GmmInit {
    /// Component `c` starts from the labeled examples of class `c`. Falls
    /// back to k-means++ when the component count differs from the class count.
    #[default]
    ClassMeans,
    #[serde(rename = "kmeans++")]
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood change that stops the iteration.
    pub tol: f64,
    /// Variance floor as a fraction of each column's data variance.
    pub variance_floor: f64,
    pub init: GmmInit,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            variance_floor: 1e-6,
            init: GmmInit::ClassMeans,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::InvalidConfig(
                "variance_floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub params: GmmParams,
    /// Data log-likelihood evaluated at the start of every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Components re-seeded after losing all responsibility mass.
    pub reseeds: usize,
}

/// Fits an `n_components` diagonal mixture to the rows of `data` by EM.
pub fn fit_gmm(data: &EmbeddingSet, n_components: usize, config: &EmConfig) -> Result<GmmFit> {
    config.validate()?;
    if n_components < 1 {
        return Err(Error::InvalidConfig("need at least one component".into()));
    }
    let x = data.vectors();
    let m = x.nrows();
    if m < n_components {
        return Err(Error::TooFewSamples {
            samples: m,
            components: n_components,
        });
    }

    let column_var = x.var_axis(Axis(0), 0.0);
    let floor: Array1<f64> = column_var.mapv(|v| (config.variance_floor * v).max(MIN_VARIANCE));
    let init_var: Array1<f64> = column_var
        .iter()
        .zip(&floor)
        .map(|(&v, &f)| v.max(f))
        .collect();

    let mut params = match config.init {
        GmmInit::ClassMeans if n_components == data.n_relations() => {
            class_mean_init(data, &init_var)
        }
        GmmInit::ClassMeans => {
            log::warn!(
                "class-means init needs {} components, got {n_components}; using kmeans++",
                data.n_relations()
            );
            kmeans_pp_init(x, n_components, &init_var, config.seed)
        }
        GmmInit::KMeansPlusPlus => kmeans_pp_init(x, n_components, &init_var, config.seed),
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeds = 0;
    let mut iterations = 0;
    // reseeding can happen at init when a class has no rows
    let mut resp = Array2::zeros((m, n_components));
    let mut row_ll = Array1::zeros(m);

    while iterations < config.max_iters {
        e_step(&params, x, &mut resp, &mut row_ll);
        let ll: f64 = row_ll.iter().sum();
        if let Some(&prev) = trace.last() {
            let change: f64 = (ll - prev) / f64::abs(prev).max(f64::MIN_POSITIVE);
            trace.push(ll);
            if change.abs() < config.tol {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        reseeds += m_step(&mut params, x, &resp, &row_ll, &floor, &init_var);
        iterations += 1;
    }

    params.validate()?;
    Ok(GmmFit {
        params,
        log_likelihood: trace,
        iterations,
        converged,
        reseeds,
    })
}

fn class_mean_init(data: &EmbeddingSet, init_var: &Array1<f64>) -> GmmParams {
    let x = data.vectors();
    let k = data.n_relations();
    let d = x.ncols();
    let groups = data.class_indices();
    let mut means = Array2::zeros((k, d));
    let mut weights = Array1::zeros(k);
    for (c, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            // filled by the first M-step's re-seeding
            continue;
        }
        means
            .row_mut(c)
            .assign(&x.select(Axis(0), rows).mean_axis(Axis(0)).unwrap());
        weights[c] = rows.len() as f64 / x.nrows() as f64;
    }
    let variances = Array2::from_shape_fn((k, d), |(_, j)| init_var[j]);
    GmmParams {
        means,
        variances,
        weights,
    }
}

fn kmeans_pp_init(x: &Array2<f64>, k: usize, init_var: &Array1<f64>, seed: u64) -> GmmParams {
    let mut rng = rng_from_seed(seed);
    let (m, d) = x.dim();
    let mut centers: Vec<usize> = vec![rng.random_range(0..m)];
    let mut nearest: Vec<f64> = (0..m)
        .map(|i| squared_distance(x.row(i), x.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centers.push(next);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    GmmParams {
        means: x.select(Axis(0), &centers),
        variances: Array2::from_shape_fn((k, d), |(_, j)| init_var[j]),
        weights: Array1::from_elem(k, 1.0 / k as f64),
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    sum4(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

/// Sum with four interleaved accumulators, which shortens the dependency
/// chain in hot inner loops. The summation order is fixed.
#[inline]
pub(crate) fn sum4(values: impl Iterator<Item = f64>) -> f64 {
    let mut acc = [0.0f64; 4];
    for (i, v) in values.enumerate() {
        acc[i & 3] += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn e_step(params: &GmmParams, x: &Array2<f64>, resp: &mut Array2<f64>, row_ll: &mut Array1<f64>) {
    let log_dets = params.log_dets();
    let rows: Vec<(f64, Array1<f64>)> = (0..x.nrows())
        .into_par_iter()
        .map(|i| normalize_log_terms(params.joint_log_terms_with(x.row(i), &log_dets)))
        .collect();
    for (i, (ll, r)) in rows.into_iter().enumerate() {
        row_ll[i] = ll;
        resp.row_mut(i).assign(&r);
    }
}

/// Returns the number of re-seeded components.
fn m_step(
    params: &mut GmmParams,
    x: &Array2<f64>,
    resp: &Array2<f64>,
    row_ll: &Array1<f64>,
    floor: &Array1<f64>,
    init_var: &Array1<f64>,
) -> usize {
    let (m, d) = x.dim();
    let k = params.n_components();
    let mass = resp.sum_axis(Axis(0));
    let mut reseeded = 0;
    let mut taken: Vec<usize> = Vec::new();

    for c in 0..k {
        let n_c = mass[c];
        if n_c < EMPTY_COMPONENT_MASS * m as f64 {
            // re-seed at the worst-explained row not already used
            let row = (0..m)
                .filter(|i| !taken.contains(i))
                .min_by(|&a, &b| row_ll[a].total_cmp(&row_ll[b]))
                .unwrap_or(0);
            taken.push(row);
            params.means.row_mut(c).assign(&x.row(row));
            params.variances.row_mut(c).assign(init_var);
            params.weights[c] = 1.0 / m as f64;
            reseeded += 1;
            continue;
        }
        let r = resp.column(c);
        let mut mean = Array1::zeros(d);
        for (row, &w) in x.outer_iter().zip(r) {
            mean.scaled_add(w, &row);
        }
        mean /= n_c;
        let mut var = Array1::<f64>::zeros(d);
        for (row, &w) in x.outer_iter().zip(r) {
            for ((v, &xi), &mu) in var.iter_mut().zip(row).zip(&mean) {
                *v += w * (xi - mu) * (xi - mu);
            }
        }
        var /= n_c;
        for (v, &f) in var.iter_mut().zip(floor) {
            *v = v.max(f);
        }
        params.means.row_mut(c).assign(&mean);
        params.variances.row_mut(c).assign(&var);
        params.weights[c] = n_c / m as f64;
    }
    let total = params.weights.sum();
    params.weights /= total;
    reseeded
}
