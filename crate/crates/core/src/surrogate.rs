//! Gaussian-Process regression over encoded hyper-parameter points.
//!
//! The surrogate regresses validation loss on [0,1]-encoded points with an
//! ARD squared-exponential kernel: one length-scale per dimension, chosen by
//! maximizing log-marginal-likelihood over a log-spaced candidate grid with
//! coordinate ascent and random restarts. Targets are standardized before
//! fitting; the signal variance is pinned to 1 on that scale and the noise
//! variance is searched on the same grid as a ninth coordinate.

use crate::space::EncodedPoint;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("GP fit needs at least 2 training points, got {0}")]
    TooFewPoints(usize),
    #[error("training losses must be finite")]
    NonFiniteLoss,
    #[error("point has {got} dims, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training points have inconsistent dimensionality")]
    RaggedInput,
    #[error("kernel matrix not factorizable (jitter escalated to {max_jitter:e})")]
    Factorization { max_jitter: f64 },
    #[error("invalid hyper-parameter: {0}")]
    BadHyper(String),
    #[error("model text: {0}")]
    Parse(String),
}

/// Kernel scale settings and the length-scale search budget.
#[derive(Debug, Clone)]
pub struct GPConfig {
    /// Kernel amplitude on the standardized-target scale.
    pub signal_variance: f64,
    /// Observation noise variance (standardized scale). Starting value when
    /// `fit_noise` is set, fixed value otherwise.
    pub noise_variance: f64,
    /// When set, the noise variance is searched on `lengthscale_grid` as an
    /// extra coordinate of the ascent.
    pub fit_noise: bool,
    /// Diagonal stabilizer added to the kernel matrix before factorization.
    /// Escalates by 10x on failure, up to [`MAX_JITTER`].
    pub jitter: f64,
    /// Candidate length-scales for the log-marginal-likelihood search.
    pub lengthscale_grid: Vec<f64>,
    /// Random restarts of the coordinate ascent beyond the all-ones start.
    pub lml_restarts: usize,
    /// Seed for the restart draws.
    pub restart_seed: u64,
}

pub const MIN_JITTER: f64 = 1e-12;
pub const MAX_JITTER: f64 = 1e-4;

/// 16 log-spaced candidates spanning [0.05, 5], with 1.0 pinned into the
/// grid so the all-ones start is itself a grid point.
pub fn default_lengthscale_grid() -> Vec<f64> {
    let lo = 0.05f64.ln();
    let hi = 5.0f64.ln();
    let mut grid: Vec<f64> = (0..15)
        .map(|i| (lo + (hi - lo) * i as f64 / 14.0).exp())
        .collect();
    grid.push(1.0);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid
}

impl Default for GPConfig {
    fn default() -> Self {
        GPConfig {
            signal_variance: 1.0,
            noise_variance: 0.05,
            fit_noise: true,
            jitter: 1e-10,
            lengthscale_grid: default_lengthscale_grid(),
            lml_restarts: 2,
            restart_seed: 0,
        }
    }
}

impl GPConfig {
    fn validate(&self) -> Result<(), GpError> {
        if self.signal_variance <= 0.0 {
            return Err(GpError::BadHyper("signal_variance must be > 0".into()));
        }
        if self.noise_variance < 0.0 {
            return Err(GpError::BadHyper("noise_variance must be >= 0".into()));
        }
        if !(MIN_JITTER..=MAX_JITTER).contains(&self.jitter) {
            return Err(GpError::BadHyper(format!(
                "jitter must lie in [{MIN_JITTER:e}, {MAX_JITTER:e}]"
            )));
        }
        if self.lengthscale_grid.is_empty() || self.lengthscale_grid.iter().any(|&l| l <= 0.0) {
            return Err(GpError::BadHyper(
                "lengthscale grid must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// ARD squared-exponential kernel value between two encoded points.
///
/// `signal_variance * exp(-0.5 * sum_d ((x1_d - x2_d) / l_d)^2)`.
pub fn kernel(
    x1: &EncodedPoint,
    x2: &EncodedPoint,
    lengthscales: &[f64],
    signal_variance: f64,
) -> Result<f64, GpError> {
    if x1.len() != x2.len() || x1.len() != lengthscales.len() {
        return Err(GpError::DimMismatch {
            expected: lengthscales.len(),
            got: if x1.len() != lengthscales.len() {
                x1.len()
            } else {
                x2.len()
            },
        });
    }
    Ok(signal_variance * kernel_from_sq(sq_distance(&x1.coords, &x2.coords, lengthscales)))
}

fn sq_distance(a: &[f64], b: &[f64], lengthscales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((&p, &q), &l)| {
            let d = (p - q) / l;
            d * d
        })
        .sum()
}

fn kernel_from_sq(sq: f64) -> f64 {
    (-0.5 * sq).exp()
}

/// Gaussian loss estimate at a point: mean and variance on the raw loss scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn std_dev(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }
}

/// A fitted Gaussian-Process surrogate. Immutable; `predict` is safe to call
/// from many threads.
#[derive(Debug, Clone)]
pub struct GPModel {
    train_x: Vec<EncodedPoint>,
    train_y_raw: Vec<f64>,
    y_shift: f64,
    y_scale: f64,
    lengthscales: Vec<f64>,
    signal_variance: f64,
    noise_variance: f64,
    jitter_used: f64,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    lml: f64,
}

/// Reusable buffers for the hot prediction path.
#[derive(Debug, Default, Clone)]
pub struct PredictScratch {
    kstar: Vec<f64>,
}

fn standardize(losses: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = losses.len() as f64;
    let shift = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|y| (y - shift) * (y - shift)).sum::<f64>() / n;
    let scale = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
    let std: Vec<f64> = losses.iter().map(|y| (y - shift) / scale).collect();
    (std, shift, scale)
}

/// Per-dim squared distances, cached once per fit so each candidate
/// hyper-parameter evaluation only rescales and exponentiates.
struct DistanceCache {
    n: usize,
    ndims: usize,
    // d2[d][i * n + j] = (x_i[d] - x_j[d])^2
    d2: Vec<Vec<f64>>,
}

impl DistanceCache {
    fn new(points: &[EncodedPoint]) -> Self {
        let n = points.len();
        let ndims = points[0].len();
        let mut d2 = vec![vec![0.0; n * n]; ndims];
        for d in 0..ndims {
            for i in 0..n {
                for j in 0..n {
                    let diff = points[i].coords[d] - points[j].coords[d];
                    d2[d][i * n + j] = diff * diff;
                }
            }
        }
        DistanceCache { n, ndims, d2 }
    }

    fn kernel_matrix(&self, lengthscales: &[f64], signal_variance: f64, diag: f64) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut sq = 0.0;
                for d in 0..self.ndims {
                    sq += self.d2[d][i * n + j] / (lengthscales[d] * lengthscales[d]);
                }
                m[(i, j)] = signal_variance * kernel_from_sq(sq);
            }
            m[(i, i)] += diag;
        }
        m
    }
}

/// Lower Cholesky factor of the regularized kernel matrix, escalating the
/// jitter by 10x up to [`MAX_JITTER`] when factorization fails.
fn chol_with_escalation(
    cache: &DistanceCache,
    lengthscales: &[f64],
    signal_variance: f64,
    noise: f64,
    jitter0: f64,
) -> Result<(DMatrix<f64>, f64), GpError> {
    let mut jitter = jitter0;
    loop {
        let k = cache.kernel_matrix(lengthscales, signal_variance, noise + jitter);
        if let Some(chol) = k.cholesky() {
            return Ok((chol.unpack(), jitter));
        }
        if jitter >= MAX_JITTER {
            return Err(GpError::Factorization { max_jitter: jitter });
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    }
}

fn lml_of(chol_l: &DMatrix<f64>, alpha: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let data_fit = -0.5 * y.dot(alpha);
    let log_det = chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    data_fit - log_det - 0.5 * n * (2.0 * PI).ln()
}

struct Fitted {
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn evaluate(
    cache: &DistanceCache,
    y: &DVector<f64>,
    lengthscales: &[f64],
    signal_variance: f64,
    noise: f64,
    jitter0: f64,
) -> Option<Fitted> {
    let (chol_l, jitter) =
        chol_with_escalation(cache, lengthscales, signal_variance, noise, jitter0).ok()?;
    let mut alpha = y.clone();
    chol_l.solve_lower_triangular_mut(&mut alpha);
    chol_l.tr_solve_lower_triangular_mut(&mut alpha);
    let lml = lml_of(&chol_l, &alpha, y);
    lml.is_finite().then_some(Fitted {
        chol_l,
        alpha,
        jitter,
        lml,
    })
}

impl GPModel {
    /// Fits length-scales (and optionally noise) by maximizing the
    /// log-marginal-likelihood over the candidate grid with coordinate
    /// ascent from the all-ones start plus `lml_restarts` random starts.
    pub fn fit(
        points: &[EncodedPoint],
        losses: &[f64],
        cfg: &GPConfig,
    ) -> Result<GPModel, GpError> {
        cfg.validate()?;
        if points.len() < 2 {
            return Err(GpError::TooFewPoints(points.len()));
        }
        if points.len() != losses.len() {
            return Err(GpError::RaggedInput);
        }
        if losses.iter().any(|y| !y.is_finite()) {
            return Err(GpError::NonFiniteLoss);
        }
        let ndims = points[0].len();
        if points.iter().any(|p| p.len() != ndims) {
            return Err(GpError::RaggedInput);
        }

        let (y_std, y_shift, y_scale) = standardize(losses);
        let y = DVector::from_vec(y_std);
        let cache = DistanceCache::new(points);

        let grid = &cfg.lengthscale_grid;
        let mut rng = crate::seeds::rng(cfg.restart_seed, crate::seeds::stream::GP_FIT, 0);

        let mut starts: Vec<(Vec<f64>, f64)> =
            vec![(vec![1.0; ndims], cfg.noise_variance)];
        for _ in 0..cfg.lml_restarts {
            let ls: Vec<f64> = (0..ndims)
                .map(|_| grid[rng.gen_range(0..grid.len())])
                .collect();
            let noise = if cfg.fit_noise {
                grid[rng.gen_range(0..grid.len())]
            } else {
                cfg.noise_variance
            };
            starts.push((ls, noise));
        }

        let mut best: Option<(Vec<f64>, f64, Fitted)> = None;
        for (mut ls, mut noise) in starts {
            let Some(mut cur) = evaluate(&cache, &y, &ls, cfg.signal_variance, noise, cfg.jitter)
            else {
                continue;
            };
            // Coordinate ascent: sweep every coordinate over the grid until
            // a full sweep makes no move.
            const MAX_SWEEPS: usize = 12;
            for _ in 0..MAX_SWEEPS {
                let mut moved = false;
                let ncoords = if cfg.fit_noise { ndims + 1 } else { ndims };
                for c in 0..ncoords {
                    let mut local_best = cur.lml;
                    let mut local_choice = None;
                    for &g in grid {
                        let (cand_ls, cand_noise) = if c < ndims {
                            if ls[c] == g {
                                continue;
                            }
                            let mut t = ls.clone();
                            t[c] = g;
                            (t, noise)
                        } else {
                            if noise == g {
                                continue;
                            }
                            (ls.clone(), g)
                        };
                        if let Some(f) = evaluate(
                            &cache,
                            &y,
                            &cand_ls,
                            cfg.signal_variance,
                            cand_noise,
                            cfg.jitter,
                        ) {
                            if f.lml > local_best + 1e-12 {
                                local_best = f.lml;
                                local_choice = Some((cand_ls, cand_noise, f));
                            }
                        }
                    }
                    if let Some((cand_ls, cand_noise, f)) = local_choice {
                        ls = cand_ls;
                        noise = cand_noise;
                        cur = f;
                        moved = true;
                    }
                }
                if !moved {
                    break;
                }
            }
            let better = match &best {
                None => true,
                Some((_, _, b)) => cur.lml > b.lml,
            };
            if better {
                best = Some((ls, noise, cur));
            }
        }

        let (lengthscales, noise, fitted) =
            best.ok_or(GpError::Factorization { max_jitter: MAX_JITTER })?;
        Ok(GPModel {
            train_x: points.to_vec(),
            train_y_raw: losses.to_vec(),
            y_shift,
            y_scale,
            lengthscales,
            signal_variance: cfg.signal_variance,
            noise_variance: noise,
            jitter_used: fitted.jitter,
            chol_l: fitted.chol_l,
            alpha: fitted.alpha,
            lml: fitted.lml,
        })
    }

    /// Builds a model with the given length-scales and noise, skipping the
    /// likelihood search. Targets are still standardized.
    pub fn with_hyperparams(
        points: &[EncodedPoint],
        losses: &[f64],
        lengthscales: &[f64],
        noise_variance: f64,
        cfg: &GPConfig,
    ) -> Result<GPModel, GpError> {
        cfg.validate()?;
        if points.len() < 2 {
            return Err(GpError::TooFewPoints(points.len()));
        }
        if points.len() != losses.len() {
            return Err(GpError::RaggedInput);
        }
        if losses.iter().any(|y| !y.is_finite()) {
            return Err(GpError::NonFiniteLoss);
        }
        let ndims = points[0].len();
        if points.iter().any(|p| p.len() != ndims) || lengthscales.len() != ndims {
            return Err(GpError::RaggedInput);
        }
        if lengthscales.iter().any(|&l| l <= 0.0) {
            return Err(GpError::BadHyper("lengthscales must be positive".into()));
        }
        if noise_variance < 0.0 {
            return Err(GpError::BadHyper("noise_variance must be >= 0".into()));
        }

        let (y_std, y_shift, y_scale) = standardize(losses);
        let y = DVector::from_vec(y_std);
        let cache = DistanceCache::new(points);
        let fitted = evaluate(
            &cache,
            &y,
            lengthscales,
            cfg.signal_variance,
            noise_variance,
            cfg.jitter,
        )
        .ok_or(GpError::Factorization { max_jitter: MAX_JITTER })?;
        Ok(GPModel {
            train_x: points.to_vec(),
            train_y_raw: losses.to_vec(),
            y_shift,
            y_scale,
            lengthscales: lengthscales.to_vec(),
            signal_variance: cfg.signal_variance,
            noise_variance,
            jitter_used: fitted.jitter,
            chol_l: fitted.chol_l,
            alpha: fitted.alpha,
            lml: fitted.lml,
        })
    }

    pub fn ndims(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn train_len(&self) -> usize {
        self.train_x.len()
    }

    pub fn train_x(&self) -> &[EncodedPoint] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y_raw
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Mean and standard deviation used to standardize the targets;
    /// raw = standardized * scale + shift.
    pub fn y_standardization(&self) -> (f64, f64) {
        (self.y_shift, self.y_scale)
    }

    /// Lower Cholesky factor of the regularized kernel matrix.
    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    /// Log-marginal-likelihood of the fitted model (standardized targets).
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// GP posterior at a point, de-standardized to the raw loss scale.
    ///
    /// The variance is the predictive variance of an observation:
    /// `signal + noise - |v|^2` with `v = L^-1 k*`, clamped at zero.
    pub fn predict(&self, x: &EncodedPoint) -> Result<Posterior, GpError> {
        if x.len() != self.ndims() {
            return Err(GpError::DimMismatch {
                expected: self.ndims(),
                got: x.len(),
            });
        }
        let mut scratch = PredictScratch::default();
        Ok(self.predict_coords(&x.coords, &mut scratch))
    }

    /// `predict` on a raw coordinate slice with caller-owned scratch buffers.
    /// The hot path for candidate scans; the slice length must equal
    /// [`GPModel::ndims`].
    pub fn predict_coords(&self, coords: &[f64], scratch: &mut PredictScratch) -> Posterior {
        debug_assert_eq!(coords.len(), self.ndims());
        let n = self.train_len();
        scratch.kstar.clear();
        scratch.kstar.extend(self.train_x.iter().map(|xi| {
            self.signal_variance
                * kernel_from_sq(sq_distance(&xi.coords, coords, &self.lengthscales))
        }));

        let mean_std: f64 = scratch
            .kstar
            .iter()
            .zip(self.alpha.iter())
            .map(|(k, a)| k * a)
            .sum();

        // v = L^-1 k*, computed in place by forward substitution.
        let l = &self.chol_l;
        let v = &mut scratch.kstar;
        for i in 0..n {
            let mut s = v[i];
            for j in 0..i {
                s -= l[(i, j)] * v[j];
            }
            v[i] = s / l[(i, i)];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        let var_std = (self.signal_variance + self.noise_variance - vtv).max(0.0);

        Posterior {
            mean: mean_std * self.y_scale + self.y_shift,
            variance: var_std * self.y_scale * self.y_scale,
        }
    }

    /// Serializes the model to its line-oriented text form (dims,
    /// hyper-parameters, standardization constants, training set).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "gpmodel v1");
        let _ = writeln!(out, "dims {}", self.ndims());
        let _ = writeln!(out, "signal_variance {:?}", self.signal_variance);
        let _ = writeln!(out, "noise_variance {:?}", self.noise_variance);
        let _ = writeln!(out, "jitter {:?}", self.jitter_used);
        let _ = writeln!(out, "lengthscales {}", join_floats(&self.lengthscales));
        let _ = writeln!(out, "n {}", self.train_len());
        for (x, y) in self.train_x.iter().zip(&self.train_y_raw) {
            let _ = writeln!(out, "{} {:?}", join_floats(&x.coords), y);
        }
        out
    }

    /// Parses [`GPModel::to_text`] output and rebuilds the factorization.
    pub fn from_text(text: &str) -> Result<GPModel, GpError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| GpError::Parse("empty".into()))?;
        if header.trim() != "gpmodel v1" {
            return Err(GpError::Parse(format!("unexpected header `{header}`")));
        }
        let mut dims = None;
        let mut signal = None;
        let mut noise = None;
        let mut jitter = None;
        let mut lengthscales: Option<Vec<f64>> = None;
        let mut n = None;
        for line in lines.by_ref() {
            let mut parts = line.split_whitespace();
            let key = parts.next().ok_or_else(|| GpError::Parse("blank line".into()))?;
            match key {
                "dims" => dims = Some(parse_usize(parts.next())?),
                "signal_variance" => signal = Some(parse_f64(parts.next())?),
                "noise_variance" => noise = Some(parse_f64(parts.next())?),
                "jitter" => jitter = Some(parse_f64(parts.next())?),
                "lengthscales" => {
                    lengthscales =
                        Some(parts.map(|t| parse_f64(Some(t))).collect::<Result<_, _>>()?)
                }
                "n" => {
                    n = Some(parse_usize(parts.next())?);
                    break;
                }
                other => return Err(GpError::Parse(format!("unexpected key `{other}`"))),
            }
        }
        let dims = dims.ok_or_else(|| GpError::Parse("missing dims".into()))?;
        let signal = signal.ok_or_else(|| GpError::Parse("missing signal_variance".into()))?;
        let noise = noise.ok_or_else(|| GpError::Parse("missing noise_variance".into()))?;
        let jitter = jitter.ok_or_else(|| GpError::Parse("missing jitter".into()))?;
        let lengthscales =
            lengthscales.ok_or_else(|| GpError::Parse("missing lengthscales".into()))?;
        let n = n.ok_or_else(|| GpError::Parse("missing n".into()))?;
        if lengthscales.len() != dims {
            return Err(GpError::Parse("lengthscale count != dims".into()));
        }
        let mut points = Vec::with_capacity(n);
        let mut losses = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| parse_f64(Some(t)))
                .collect::<Result<_, _>>()?;
            if vals.len() != dims + 1 {
                return Err(GpError::Parse(format!("row {i}: expected {} fields", dims + 1)));
            }
            points.push(EncodedPoint::new(vals[..dims].to_vec()));
            losses.push(vals[dims]);
        }
        if points.len() != n {
            return Err(GpError::Parse(format!(
                "expected {n} rows, found {}",
                points.len()
            )));
        }
        let cfg = GPConfig {
            signal_variance: signal,
            noise_variance: noise,
            fit_noise: false,
            jitter: jitter.clamp(MIN_JITTER, MAX_JITTER),
            ..GPConfig::default()
        };
        GPModel::with_hyperparams(&points, &losses, &lengthscales, noise, &cfg)
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_usize(tok: Option<&str>) -> Result<usize, GpError> {
    tok.ok_or_else(|| GpError::Parse("missing field".into()))?
        .parse()
        .map_err(|e| GpError::Parse(format!("bad integer: {e}")))
}

fn parse_f64(tok: Option<&str>) -> Result<f64, GpError> {
    tok.ok_or_else(|| GpError::Parse("missing field".into()))?
        .parse()
        .map_err(|e| GpError::Parse(format!("bad float: {e}")))
}
