//! Stein variational gradient descent toward a Gaussian-mixture target.
//!
//! One step moves every particle by `eps * phi(theta_m)` with
//!
//! ```text
//! phi(theta) = 1/M * sum_j [ k(theta_j, theta) * score(theta_j) + grad_{theta_j} k(theta_j, theta) ]
//! ```
//!
//! computed from the pre-step particle set. The kernel is
//! `k(a, b) = exp(-|a - b|^2 / h)`, with `h` taken from the median heuristic
//! unless fixed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{sum4, GmmParams};
use crate::seed::rng_from_seed;

const ADAGRAD_FUDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    particles: Array2<f64>,
    iteration: usize,
}

impl ParticleSet {
    pub fn new(particles: Array2<f64>) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(Error::EmptyParticleSet);
        }
        if let Some(((row, col), _)) = particles.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row, col });
        }
        Ok(Self {
            particles,
            iteration: 0,
        })
    }

    pub fn particles(&self) -> &Array2<f64> {
        &self.particles
    }

    pub fn into_particles(self) -> Array2<f64> {
        self.particles
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }
}

fn check_pair(a: ArrayView1<f64>, b: ArrayView1<f64>, h: f64) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(h > 0.0) {
        return Err(Error::NonPositiveBandwidth(h));
    }
    Ok(())
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    sum4(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
}

#[inline]
fn kernel_unchecked(a: ArrayView1<f64>, b: ArrayView1<f64>, h: f64) -> f64 {
    (-squared_distance(a, b) / h).exp()
}

/// `exp(-|a - b|^2 / h)`.
pub fn rbf_kernel(a: ArrayView1<f64>, b: ArrayView1<f64>, h: f64) -> Result<f64> {
    check_pair(a, b, h)?;
    Ok(kernel_unchecked(a, b, h))
}

/// Gradient of [`rbf_kernel`] with respect to its first argument:
/// `(-2 / h) * (a - b) * k(a, b)`.
pub fn rbf_kernel_grad(a: ArrayView1<f64>, b: ArrayView1<f64>, h: f64) -> Result<Array1<f64>> {
    check_pair(a, b, h)?;
    let k = kernel_unchecked(a, b, h);
    Ok(Zip::from(a)
        .and(b)
        .map_collect(|x, y| (-2.0 / h) * (x - y) * k))
}

/// Median of squared pairwise distances divided by `ln(M + 1)`.
///
/// Falls back to 1.0 for a single particle or when all particles coincide.
pub fn median_bandwidth(particles: &ParticleSet) -> f64 {
    median_bandwidth_of(particles.particles.view())
}

fn median_bandwidth_of(x: ArrayView2<f64>) -> f64 {
    median_from_distances(&pairwise_sq_distances(x))
}

/// Symmetric matrix of squared distances between rows.
fn pairwise_sq_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let m = x.nrows();
    let upper: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i + 1..m)
                .map(|j| squared_distance(x.row(i), x.row(j)))
                .collect()
        })
        .collect();
    let mut d2 = Array2::zeros((m, m));
    for (i, row) in upper.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            d2[[i, i + 1 + off]] = v;
            d2[[i + 1 + off, i]] = v;
        }
    }
    d2
}

fn median_from_distances(d2: &Array2<f64>) -> f64 {
    let m = d2.nrows();
    if m < 2 {
        log::warn!("median bandwidth needs two particles; using 1.0");
        return 1.0;
    }
    let mut dists: Vec<f64> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| d2[[i, j]]))
        .collect();
    let n = dists.len();
    let (lower, &mut upper_mid, _) = dists.select_nth_unstable_by(n / 2, f64::total_cmp);
    let median = if n % 2 == 1 {
        upper_mid
    } else {
        let lower_mid = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_mid + upper_mid)
    };
    if median <= 0.0 {
        return 1.0;
    }
    median / ((m + 1) as f64).ln()
}

/// The Stein direction `phi(theta_m)` for every particle, given the squared
/// distance matrix of `x`.
fn stein_direction(
    x: ArrayView2<f64>,
    d2: &Array2<f64>,
    scores: ArrayView2<f64>,
    h: f64,
) -> Array2<f64> {
    let m = x.nrows();
    let k = d2.mapv(|v| (-v / h).exp());
    // sum_j k_ij s_j + (2/h) (x_i sum_j k_ij - sum_j k_ij x_j)
    let mut phi = k.dot(&scores);
    let kx = k.dot(&x);
    let row_sums = k.sum_axis(ndarray::Axis(1));
    Zip::from(phi.rows_mut())
        .and(x.rows())
        .and(kx.rows())
        .and(&row_sums)
        .for_each(|mut p, xi, kxi, &ks| {
            Zip::from(&mut p)
                .and(&xi)
                .and(&kxi)
                .for_each(|p, &xv, &kxv| *p += (2.0 / h) * (xv * ks - kxv));
        });
    phi / m as f64
}

fn scores_of<F>(x: ArrayView2<f64>, score: &F) -> Result<Array2<f64>>
where
    F: Fn(ArrayView1<f64>) -> Result<Array1<f64>> + Sync,
{
    let rows: Vec<Array1<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| score(x.row(i)))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(x.dim());
    for (mut row, s) in out.outer_iter_mut().zip(rows) {
        if s.len() != row.len() {
            return Err(Error::DimensionMismatch {
                expected: row.len(),
                got: s.len(),
            });
        }
        row.assign(&s);
    }
    Ok(out)
}

fn commit(particles: &mut Array2<f64>, delta: &Array2<f64>, iteration: usize) -> Result<()> {
    let mut next = particles.clone();
    next += delta;
    for (m, row) in next.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate {
                particle: m,
                iteration,
            });
        }
    }
    *particles = next;
    Ok(())
}

/// One synchronous update with a fixed step `eps`.
pub fn svgd_step<F>(particles: &ParticleSet, score: F, h: f64, eps: f64) -> Result<ParticleSet>
where
    F: Fn(ArrayView1<f64>) -> Result<Array1<f64>> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::NonPositiveBandwidth(h));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step size must be positive, got {eps}"
        )));
    }
    let x = particles.particles.view();
    let scores = scores_of(x, &score)?;
    let phi = stein_direction(x, &pairwise_sq_distances(x), scores.view(), h);
    let mut next = particles.clone();
    commit(&mut next.particles, &(phi * eps), particles.iteration)?;
    next.iteration += 1;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Fixed,
    /// Per-coordinate scaling by a decayed running mean of squared directions.
    #[default]
    Adagrad,
}

impl FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StepMode::Fixed),
            "adagrad" => Ok(StepMode::Adagrad),
            other => Err(Error::InvalidConfig(format!("unknown step mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum Bandwidth {
    /// Median heuristic, recomputed every iteration.
    #[default]
    AutoMedian,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Name(String),
    Value(f64),
}

impl TryFrom<BandwidthRepr> for Bandwidth {
    type Error = Error;

    fn try_from(repr: BandwidthRepr) -> Result<Self> {
        match repr {
            BandwidthRepr::Name(s) => s.parse(),
            BandwidthRepr::Value(v) => Ok(Bandwidth::Fixed(v)),
        }
    }
}

impl From<Bandwidth> for BandwidthRepr {
    fn from(b: Bandwidth) -> Self {
        match b {
            Bandwidth::AutoMedian => BandwidthRepr::Name("auto-median".into()),
            Bandwidth::Fixed(v) => BandwidthRepr::Value(v),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" | "auto-median" | "median" => Ok(Bandwidth::AutoMedian),
            other => other
                .parse::<f64>()
                .map(Bandwidth::Fixed)
                .map_err(|_| Error::InvalidConfig(format!("bad bandwidth {other:?}"))),
        }
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::AutoMedian => f.write_str("auto-median"),
            Bandwidth::Fixed(h) => write!(f, "{h}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvgdConfig {
    pub n_iters: usize,
    pub base_step: f64,
    pub step_mode: StepMode,
    pub adagrad_decay: f64,
    pub bandwidth: Bandwidth,
    /// Seeds the tie-breaking jitter applied to exactly duplicated particles.
    pub seed: u64,
    /// Interval between MMD evaluations when a reference sample is supplied.
    pub mmd_every: usize,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        Self {
            n_iters: 500,
            base_step: 0.1,
            step_mode: StepMode::Adagrad,
            adagrad_decay: 0.9,
            bandwidth: Bandwidth::AutoMedian,
            seed: 0,
            mmd_every: 50,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_step > 0.0) || !self.base_step.is_finite() {
            return Err(Error::InvalidConfig("base_step must be positive".into()));
        }
        if !(self.adagrad_decay > 0.0 && self.adagrad_decay <= 1.0) {
            return Err(Error::InvalidConfig(
                "adagrad_decay must be in (0, 1]".into(),
            ));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::NonPositiveBandwidth(h));
            }
        }
        if self.mmd_every == 0 {
            return Err(Error::InvalidConfig("mmd_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub mean_phi_norm: f64,
    pub bandwidth: f64,
    pub mmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgdRun {
    pub particles: ParticleSet,
    /// One row per iteration, describing the state the update started from.
    pub trace: Vec<TraceRow>,
    /// MMD of the returned particles, when a reference was supplied.
    pub final_mmd: Option<f64>,
}

/// Transports `init` toward `target` for `config.n_iters` synchronous steps.
pub fn svgd_run(
    init: &ParticleSet,
    target: &GmmParams,
    config: &SvgdConfig,
    reference: Option<&MmdReference>,
) -> Result<SvgdRun> {
    config.validate()?;
    if init.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: init.dim(),
        });
    }
    let mut x = init.particles.clone();
    if config.n_iters > 0 {
        break_ties(&mut x, config.seed);
    }
    let (m, d) = x.dim();
    let mut history = Array2::<f64>::zeros((m, d));
    let mut trace = Vec::with_capacity(config.n_iters);
    let score = target.score_fn();

    for iter in 0..config.n_iters {
        let d2 = pairwise_sq_distances(x.view());
        let h = match config.bandwidth {
            Bandwidth::AutoMedian => median_from_distances(&d2),
            Bandwidth::Fixed(h) => h,
        };
        let mmd = match reference {
            Some(r) if iter % config.mmd_every == 0 => Some(r.mmd(x.view())?),
            _ => None,
        };
        let scores = scores_of(x.view(), &score)?;
        let phi = stein_direction(x.view(), &d2, scores.view(), h);
        let mean_phi_norm = phi.outer_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / m as f64;
        trace.push(TraceRow {
            iter,
            mean_phi_norm,
            bandwidth: h,
            mmd,
        });

        let delta = match config.step_mode {
            StepMode::Fixed => phi * config.base_step,
            StepMode::Adagrad => {
                let decay = config.adagrad_decay;
                if iter == 0 {
                    history = phi.mapv(|g| g * g);
                } else {
                    Zip::from(&mut history)
                        .and(&phi)
                        .for_each(|hst, &g| *hst = decay * *hst + (1.0 - decay) * g * g);
                }
                Zip::from(&phi)
                    .and(&history)
                    .map_collect(|&g, &hst| config.base_step * g / (ADAGRAD_FUDGE + hst.sqrt()))
            }
        };
        commit(&mut x, &delta, init.iteration + iter)?;
    }

    let final_mmd = reference.map(|r| r.mmd(x.view())).transpose()?;
    Ok(SvgdRun {
        particles: ParticleSet {
            particles: x,
            iteration: init.iteration + config.n_iters,
        },
        trace,
        final_mmd,
    })
}

/// Exactly coincident particles receive identical updates forever; nudge
/// every later copy by a tiny seeded offset.
fn break_ties(x: &mut Array2<f64>, seed: u64) {
    let m = x.nrows();
    let mut rng = rng_from_seed(seed);
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0) * 1e-6;
    for i in 1..m {
        let duplicate = (0..i).any(|j| x.row(i) == x.row(j));
        if duplicate {
            for v in x.row_mut(i) {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += scale * n;
            }
        }
    }
}

pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["iter", "mean_phi_norm", "bandwidth", "mmd"])
        .map_err(to_err)?;
    for row in trace {
        w.write_record([
            row.iter.to_string(),
            row.mean_phi_norm.to_string(),
            row.bandwidth.to_string(),
            row.mmd.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// --- maximum mean discrepancy ---------------------------------------------

fn check_mmd_inputs(a: ArrayView2<f64>, b: ArrayView2<f64>, h: f64) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::EmptyParticleSet);
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    if !(h > 0.0) {
        return Err(Error::NonPositiveBandwidth(h));
    }
    Ok(())
}

/// Sum of kernel values over ordered pairs `i != j`, doubled from `i < j`.
fn within_sum(x: ArrayView2<f64>, h: f64) -> f64 {
    let m = x.nrows();
    let partial: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            (i + 1..m)
                .map(|j| kernel_unchecked(x.row(i), x.row(j), h))
                .sum()
        })
        .collect();
    2.0 * partial.iter().sum::<f64>()
}

fn cross_sum(x: ArrayView2<f64>, y: ArrayView2<f64>, h: f64) -> f64 {
    let partial: Vec<f64> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            y.outer_iter()
                .map(|yj| kernel_unchecked(x.row(i), yj, h))
                .sum()
        })
        .collect();
    partial.iter().sum()
}

/// Mean kernel value over distinct pairs; a single row falls back to `k(x, x) = 1`.
fn within_mean(x: ArrayView2<f64>, h: f64) -> f64 {
    let m = x.nrows();
    if m < 2 {
        return 1.0;
    }
    within_sum(x, h) / (m * (m - 1)) as f64
}

fn canonical_first(a: ArrayView2<f64>, b: ArrayView2<f64>) -> bool {
    match a.nrows().cmp(&b.nrows()) {
        std::cmp::Ordering::Equal => {
            for (x, y) in a.iter().zip(b.iter()) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o.is_lt(),
                }
            }
            true
        }
        o => o.is_lt(),
    }
}

/// Unbiased MMD^2 estimate with the RBF kernel. Can be slightly negative.
pub fn mmd(a: &ParticleSet, b: &ParticleSet, h: f64) -> Result<f64> {
    mmd_rows(a.particles.view(), b.particles.view(), h)
}

pub fn mmd_rows(a: ArrayView2<f64>, b: ArrayView2<f64>, h: f64) -> Result<f64> {
    check_mmd_inputs(a, b, h)?;
    let (x, y) = if canonical_first(a, b) {
        (a, b)
    } else {
        (b, a)
    };
    let cross = cross_sum(x, y, h) / (x.nrows() * y.nrows()) as f64;
    Ok(within_mean(x, h) + within_mean(y, h) - 2.0 * cross)
}

/// Biased (V-statistic) MMD^2; zero for identical samples.
pub fn mmd_biased(a: &ParticleSet, b: &ParticleSet, h: f64) -> Result<f64> {
    let (a, b) = (a.particles.view(), b.particles.view());
    check_mmd_inputs(a, b, h)?;
    let (x, y) = if canonical_first(a, b) {
        (a, b)
    } else {
        (b, a)
    };
    let (m, n) = (x.nrows() as f64, y.nrows() as f64);
    let xx = (within_sum(x, h) + m) / (m * m);
    let yy = (within_sum(y, h) + n) / (n * n);
    Ok(xx + yy - 2.0 * cross_sum(x, y, h) / (m * n))
}

/// A fixed reference sample with its within-sample kernel mean cached, for
/// repeated MMD checks against a moving particle set.
#[derive(Debug, Clone)]
pub struct MmdReference {
    samples: Array2<f64>,
    bandwidth: f64,
    within: f64,
}

impl MmdReference {
    pub fn new(samples: Array2<f64>, bandwidth: f64) -> Result<Self> {
        check_mmd_inputs(samples.view(), samples.view(), bandwidth)?;
        let within = within_mean(samples.view(), bandwidth);
        Ok(Self {
            samples,
            bandwidth,
            within,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    /// Unbiased MMD^2 between `particles` and the reference.
    pub fn mmd(&self, particles: ArrayView2<f64>) -> Result<f64> {
        let y = self.samples.view();
        check_mmd_inputs(particles, y, self.bandwidth)?;
        let cross =
            cross_sum(particles, y, self.bandwidth) / (particles.nrows() * y.nrows()) as f64;
        Ok(within_mean(particles, self.bandwidth) + self.within - 2.0 * cross)
    }
}

/// Draws `n` samples from a diagonal mixture.
pub fn sample_gmm(params: &GmmParams, n: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let d = params.dim();
    let weights = params.weights();
    let mut out = Array2::zeros((n, d));
    for mut row in out.outer_iter_mut() {
        let mut u: f64 = rng.random();
        let mut c = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                c = i;
                break;
            }
            u -= w;
        }
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = params.means()[[c, j]] + params.variances()[[c, j]].sqrt() * z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s, Axis};
    use proptest::prelude::*;

    fn flat(z: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(Array1::zeros(z.len()))
    }

    #[test]
    fn kernel_values() {
        let a = array![0.3, -1.2];
        assert_eq!(rbf_kernel(a.view(), a.view(), 0.7).unwrap(), 1.0);
        let k = rbf_kernel(array![0.0].view(), array![1.0].view(), 1.0).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn kernel_errors() {
        let a = array![0.0];
        assert!(matches!(
            rbf_kernel(a.view(), a.view(), 0.0),
            Err(Error::NonPositiveBandwidth(_))
        ));
        assert!(matches!(
            rbf_kernel_grad(a.view(), array![1.0, 2.0].view(), 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kernel_grad_values() {
        let a = array![1.0, 2.0];
        assert!(rbf_kernel_grad(a.view(), a.view(), 3.0)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        let g = rbf_kernel_grad(array![0.0].view(), array![1.0].view(), 1.0).unwrap();
        assert!((g[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((g[0] - 0.735759).abs() < 1e-6);
    }

    #[test]
    fn median_bandwidth_hand_enumeration() {
        let p = ParticleSet::new(array![[0.0], [1.0], [3.0]]).unwrap();
        let h = median_bandwidth(&p);
        assert!((h - 4.0 / 4.0f64.ln()).abs() < 1e-12);
        assert!((h - 2.885390).abs() < 1e-6);
    }

    #[test]
    fn median_bandwidth_fallbacks() {
        let same = ParticleSet::new(array![[2.0, 1.0], [2.0, 1.0], [2.0, 1.0]]).unwrap();
        assert_eq!(median_bandwidth(&same), 1.0);
        let single = ParticleSet::new(array![[5.0]]).unwrap();
        assert_eq!(median_bandwidth(&single), 1.0);
        let doubled = ParticleSet::new(array![[0.0], [0.0], [1.0], [1.0], [3.0], [3.0]]).unwrap();
        assert_eq!(median_bandwidth(&doubled), median_bandwidth(&doubled));
    }

    #[test]
    fn single_particle_is_gradient_ascent() {
        let target = GmmParams::new(array![[1.0, -2.0]], array![[0.5, 2.0]], array![1.0]).unwrap();
        let p = ParticleSet::new(array![[3.0, 0.5]]).unwrap();
        let eps = 0.05;
        let next = svgd_step(&p, |z| target.score(z), 0.8, eps).unwrap();
        let expected = target.score(p.particles().row(0)).unwrap() * eps;
        let moved = &next.particles().row(0) - &p.particles().row(0);
        for (a, b) in moved.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(next.iteration(), 1);
    }

    #[test]
    fn flat_target_repels_two_particles() {
        let mut p = ParticleSet::new(array![[0.0, 0.0], [0.5, 0.2]]).unwrap();
        let dist = |p: &ParticleSet| {
            let d = &p.particles().row(0) - &p.particles().row(1);
            d.dot(&d).sqrt()
        };
        let mut last = dist(&p);
        for _ in 0..20 {
            p = svgd_step(&p, flat, 1.0, 0.1).unwrap();
            let now = dist(&p);
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn step_is_permutation_equivariant() {
        let target = GmmParams::new(
            array![[0.0, 0.0], [3.0, 1.0]],
            array![[1.0, 1.0], [0.5, 2.0]],
            array![0.4, 0.6],
        )
        .unwrap();
        let x = array![[0.1, 0.2], [1.5, -0.3], [2.0, 2.0], [-1.0, 0.7]];
        let order = [2usize, 0, 3, 1];
        let a = svgd_step(
            &ParticleSet::new(x.clone()).unwrap(),
            |z| target.score(z),
            1.3,
            0.1,
        )
        .unwrap();
        let b = svgd_step(
            &ParticleSet::new(x.select(Axis(0), &order)).unwrap(),
            |z| target.score(z),
            1.3,
            0.1,
        )
        .unwrap();
        let a_perm = a.particles().select(Axis(0), &order);
        for (u, v) in a_perm.iter().zip(b.particles().iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_update_names_particle() {
        let p = ParticleSet::new(array![[0.0], [10.0]]).unwrap();
        let bad = |z: ArrayView1<f64>| {
            Ok(if z[0] > 5.0 {
                array![1e308]
            } else {
                array![0.0]
            })
        };
        // the kernel between the two is exactly zero, so only particle 1 overflows
        let err = svgd_step(&p, bad, 1e-3, 10.0).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteUpdate {
                particle: 1,
                iteration: 0
            }
        ));
    }

    #[test]
    fn zero_iterations_is_identity() {
        let target = GmmParams::new(array![[0.0]], array![[1.0]], array![1.0]).unwrap();
        let init = ParticleSet::new(array![[1.0], [1.0], [4.0]]).unwrap();
        let config = SvgdConfig {
            n_iters: 0,
            ..SvgdConfig::default()
        };
        let run = svgd_run(&init, &target, &config, None).unwrap();
        assert_eq!(run.particles, init);
        assert!(run.trace.is_empty());
    }

    #[test]
    fn run_is_deterministic_and_traced() {
        let target =
            GmmParams::new(array![[0.0], [4.0]], array![[1.0], [0.5]], array![0.5, 0.5]).unwrap();
        let init =
            ParticleSet::new(Array2::from_shape_fn((20, 1), |(i, _)| i as f64 * 0.3)).unwrap();
        let config = SvgdConfig {
            n_iters: 30,
            ..SvgdConfig::default()
        };
        let a = svgd_run(&init, &target, &config, None).unwrap();
        let b = svgd_run(&init, &target, &config, None).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.trace.len(), 30);
        assert_eq!(a.particles.iteration(), 30);
    }

    #[test]
    fn trace_csv_has_one_row_per_iteration() {
        let target = GmmParams::new(array![[0.0]], array![[1.0]], array![1.0]).unwrap();
        let init = ParticleSet::new(array![[1.0], [2.0], [3.0]]).unwrap();
        let reference = MmdReference::new(sample_gmm(&target, 200, 1), 1.0).unwrap();
        let config = SvgdConfig {
            n_iters: 12,
            mmd_every: 5,
            ..SvgdConfig::default()
        };
        let run = svgd_run(&init, &target, &config, Some(&reference)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&run.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,mean_phi_norm,bandwidth,mmd");
        assert_eq!(lines.len(), 13);
        assert!(!lines[1].ends_with(','));
        assert!(lines[2].ends_with(','));
        assert!(run.final_mmd.is_some());
    }

    #[test]
    fn mmd_identical_and_symmetric() {
        let a = ParticleSet::new(array![[0.0, 1.0], [2.0, 0.5], [1.0, 1.0]]).unwrap();
        let b = ParticleSet::new(array![[0.2, 0.9], [5.0, 1.5]]).unwrap();
        assert!(mmd_biased(&a, &a, 1.0).unwrap().abs() <= 1e-12);
        assert!(mmd(&a, &a, 1.0).unwrap() <= 0.0);
        assert_eq!(mmd(&a, &b, 1.3).unwrap(), mmd(&b, &a, 1.3).unwrap());
        assert_eq!(
            mmd_biased(&a, &b, 1.3).unwrap(),
            mmd_biased(&b, &a, 1.3).unwrap()
        );
    }

    #[test]
    fn mmd_orders_near_and_far_samples() {
        let std_normal = GmmParams::new(array![[0.0]], array![[1.0]], array![1.0]).unwrap();
        let shifted = GmmParams::new(array![[10.0]], array![[1.0]], array![1.0]).unwrap();
        for seed in 0..10u64 {
            let x = ParticleSet::new(sample_gmm(&std_normal, 100, seed)).unwrap();
            let y = ParticleSet::new(sample_gmm(&std_normal, 100, seed + 100)).unwrap();
            let far = ParticleSet::new(sample_gmm(&shifted, 100, seed + 200)).unwrap();
            let pooled =
                ndarray::concatenate![Axis(0), x.particles().view(), far.particles().view()];
            let h = median_bandwidth(&ParticleSet::new(pooled).unwrap());
            let near_mmd = mmd(&x, &y, h).unwrap();
            let far_mmd = mmd(&x, &far, h).unwrap();
            assert!(far_mmd > 0.5, "seed {seed}: {far_mmd}");
            assert!(far_mmd > near_mmd);
        }
    }

    #[test]
    fn cached_reference_matches_direct_mmd() {
        let target = GmmParams::new(array![[0.0, 1.0]], array![[1.0, 2.0]], array![1.0]).unwrap();
        let refs = sample_gmm(&target, 50, 3);
        let parts = sample_gmm(&target, 20, 4);
        let cached = MmdReference::new(refs.clone(), 1.7)
            .unwrap()
            .mmd(parts.view())
            .unwrap();
        let direct = mmd_rows(parts.view(), refs.view(), 1.7).unwrap();
        assert!((cached - direct).abs() < 1e-12);
        assert!(mmd_rows(parts.slice(s![..0, ..]), refs.view(), 1.0).is_err());
    }

    proptest! {
        #[test]
        fn kernel_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 3),
                            b in proptest::collection::vec(-5.0f64..5.0, 3),
                            h in 0.01f64..10.0) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            let k1 = rbf_kernel(a.view(), b.view(), h).unwrap();
            prop_assert_eq!(k1, rbf_kernel(b.view(), a.view(), h).unwrap());
            prop_assert!((0.0..=1.0).contains(&k1));
        }

        #[test]
        fn kernel_grad_matches_finite_differences(
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            h in 0.5f64..5.0,
        ) {
            let (a, b) = (Array1::from(a), Array1::from(b));
            let g = rbf_kernel_grad(a.view(), b.view(), h).unwrap();
            for j in 0..3 {
                let step = 1e-6;
                let mut up = a.clone();
                let mut dn = a.clone();
                up[j] += step;
                dn[j] -= step;
                let fd = (rbf_kernel(up.view(), b.view(), h).unwrap()
                    - rbf_kernel(dn.view(), b.view(), h).unwrap()) / (2.0 * step);
                prop_assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-3));
            }
        }
    }
}
