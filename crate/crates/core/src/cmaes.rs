//! Covariance Matrix Adaptation Evolution Strategy with an ask/tell
//! interface.
//!
//! The strategy maximizes: candidates are ranked by descending fitness, with
//! ties broken by sampling order. Only ranks reach the update, so any strictly
//! monotone transform of the fitness values leaves the trajectory unchanged.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, sym_eig, Matrix, SymEigen};
use crate::types::LatentVector;

/// Random stream used for sampling. Seeded, reproducible and resumable.
pub type CmaRng = ChaCha8Rng;

const CONDITION_LIMIT: f64 = 1e14;
const STEP_COLLAPSE_LIMIT: f64 = 1e-12;

/// Strategy constants. Build with [`CmaParams::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub dim: usize,
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub sigma0: f64,
    /// E‖N(0, I)‖
    pub chi_n: f64,
}

impl CmaParams {
    /// Standard constants for dimension `dim` and population `lambda`.
    pub fn new(dim: usize, lambda: usize, sigma0: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::structural("CMA-ES dimension must be at least 1"));
        }
        if lambda < 2 {
            return Err(Error::structural(format!(
                "CMA-ES population must be at least 2, got {lambda}"
            )));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::structural(format!(
                "sigma0 must be positive, got {sigma0}"
            )));
        }
        let d = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (d + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (d + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / d) / (d + 4.0 + 2.0 * mu_eff / d);
        let c_1 = 2.0 / ((d + 1.3).powi(2) + mu_eff);
        let c_mu =
            (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((d + 2.0).powi(2) + mu_eff));
        let chi_n = d.sqrt() * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d));

        Ok(CmaParams {
            dim,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            sigma0,
            chi_n,
        })
    }

    /// The textbook population size 4 + ⌊3 ln d⌋.
    pub fn default_lambda(dim: usize) -> usize {
        4 + (3.0 * (dim.max(1) as f64).ln()).floor() as usize
    }

    /// Generations between eigendecompositions of the covariance.
    pub fn eigen_refresh_interval(&self) -> u64 {
        let rate = 10.0 * self.dim as f64 * (self.c_1 + self.c_mu);
        (1.0 / rate).ceil().max(1.0) as u64
    }
}

/// One sampled point and, once evaluated, its fitness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub latent: LatentVector,
    pub fitness: Option<f64>,
}

/// Why [`CmaState::should_restart`] fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestartReason {
    Condition,
    StepSizeCollapse,
}

impl std::fmt::Display for RestartReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RestartReason::Condition => "condition",
            RestartReason::StepSizeCollapse => "step-size collapse",
        })
    }
}

/// Full search-distribution state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaState {
    params: CmaParams,
    mean: Vec<f64>,
    sigma: f64,
    cov: Matrix,
    p_sigma: Vec<f64>,
    p_c: Vec<f64>,
    generation: u64,
    eigen: SymEigen,
    /// Generation at which `eigen` was computed.
    eigen_generation: u64,
}

impl CmaState {
    pub fn new(params: CmaParams, mean0: Vec<f64>) -> Result<Self> {
        if mean0.len() != params.dim {
            return Err(Error::structural(format!(
                "initial mean has length {}, expected {}",
                mean0.len(),
                params.dim
            )));
        }
        if mean0.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("initial mean has non-finite entries"));
        }
        let d = params.dim;
        Ok(CmaState {
            sigma: params.sigma0,
            cov: Matrix::identity(d),
            p_sigma: vec![0.0; d],
            p_c: vec![0.0; d],
            generation: 0,
            eigen: SymEigen {
                values: vec![1.0; d],
                vectors: Matrix::identity(d),
            },
            eigen_generation: 0,
            params,
            mean: mean0,
        })
    }

    pub fn params(&self) -> &CmaParams {
        &self.params
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &Matrix {
        &self.cov
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn p_sigma(&self) -> &[f64] {
        &self.p_sigma
    }

    pub fn p_c(&self) -> &[f64] {
        &self.p_c
    }

    /// The cached decomposition of the covariance used for sampling.
    pub fn eigen(&self) -> &SymEigen {
        &self.eigen
    }

    /// Replaces the covariance, e.g. to construct test states. The eigen cache
    /// is refreshed immediately.
    pub fn set_covariance(&mut self, cov: Matrix) -> Result<()> {
        if cov.rows() != self.params.dim || !cov.is_square() {
            return Err(Error::structural(
                "covariance shape does not match dimension",
            ));
        }
        self.cov = cov;
        self.refresh_eigen()
    }

    pub fn set_sigma(&mut self, sigma: f64) -> Result<()> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::structural(format!("invalid step size {sigma}")));
        }
        self.sigma = sigma;
        Ok(())
    }

    fn eigen_is_stale(&self) -> bool {
        self.generation - self.eigen_generation >= self.params.eigen_refresh_interval()
    }

    fn refresh_eigen(&mut self) -> Result<()> {
        self.cov.symmetrize();
        if !self.cov.is_finite() {
            return Err(Error::numerical(format!(
                "covariance became non-finite at generation {}",
                self.generation
            )));
        }
        let mut eig = sym_eig(&self.cov)?;
        let min = *eig.values.last().unwrap_or(&1.0);
        let max = eig.values.first().copied().unwrap_or(1.0);
        if min <= 0.0 {
            // Lift the spectrum just above zero and retry once.
            let shift = -min + max.abs().max(f64::MIN_POSITIVE) * 1e-14;
            for i in 0..self.params.dim {
                self.cov[(i, i)] += shift;
            }
            eig = sym_eig(&self.cov)?;
            let repaired = *eig.values.last().unwrap_or(&1.0);
            if repaired <= 0.0 {
                return Err(Error::numerical(format!(
                    "covariance is not positive definite after repair \
                     (smallest eigenvalue {repaired:e})"
                )));
            }
        }
        self.eigen = eig;
        self.eigen_generation = self.generation;
        Ok(())
    }

    /// Samples λ candidates `mean + σ·B·D·ξ`, ξ ~ N(0, I).
    pub fn ask<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<Candidate>> {
        if self.eigen_is_stale() {
            self.refresh_eigen()?;
        }
        let d = self.params.dim;
        let scales: Vec<f64> = self.eigen.values.iter().map(|v| v.sqrt()).collect();
        let mut out = Vec::with_capacity(self.params.lambda);
        for _ in 0..self.params.lambda {
            let z: Vec<f64> = (0..d)
                .map(|i| scales[i] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let y = self.eigen.vectors.matvec(&z)?;
            let x = self
                .mean
                .iter()
                .zip(&y)
                .map(|(m, yi)| m + self.sigma * yi)
                .collect();
            out.push(Candidate {
                latent: LatentVector::new(x)?,
                fitness: None,
            });
        }
        Ok(out)
    }

    /// Ranks candidates by fitness (descending, ties by index) and updates
    /// mean, evolution paths, covariance and step size.
    pub fn tell(&mut self, candidates: &[Candidate]) -> Result<()> {
        let p = &self.params;
        if candidates.len() != p.lambda {
            return Err(Error::structural(format!(
                "tell received {} candidates, expected {}",
                candidates.len(),
                p.lambda
            )));
        }
        let mut fitness = Vec::with_capacity(p.lambda);
        for (i, c) in candidates.iter().enumerate() {
            match c.fitness {
                Some(f) if f.is_finite() => fitness.push(f),
                Some(f) => {
                    return Err(Error::structural(format!(
                        "candidate {i} has non-finite fitness {f}"
                    )))
                }
                None => return Err(Error::structural(format!("candidate {i} has no fitness"))),
            }
            if c.latent.len() != p.dim {
                return Err(Error::structural(format!(
                    "candidate {i} has dimension {}, expected {}",
                    c.latent.len(),
                    p.dim
                )));
            }
        }

        let mut order: Vec<usize> = (0..p.lambda).collect();
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]));

        let d = p.dim;
        let n = d as f64;
        let steps: Vec<Vec<f64>> = order[..p.mu]
            .iter()
            .map(|&i| {
                candidates[i]
                    .latent
                    .as_slice()
                    .iter()
                    .zip(&self.mean)
                    .map(|(x, m)| (x - m) / self.sigma)
                    .collect()
            })
            .collect();
        let mut y_w = vec![0.0; d];
        for (w, y) in p.weights.iter().zip(&steps) {
            for (acc, yi) in y_w.iter_mut().zip(y) {
                *acc += w * yi;
            }
        }
        for (m, yi) in self.mean.iter_mut().zip(&y_w) {
            *m += self.sigma * yi;
        }

        // C^{-1/2}·y_w = B·D⁻¹·Bᵀ·y_w
        let b = &self.eigen.vectors;
        let mut whitened = vec![0.0; d];
        for k in 0..d {
            let coeff = dot(&b.column(k), &y_w) / self.eigen.values[k].sqrt();
            for (i, w) in whitened.iter_mut().enumerate() {
                *w += b[(i, k)] * coeff;
            }
        }
        let cs = p.c_sigma;
        let ps_gain = (cs * (2.0 - cs) * p.mu_eff).sqrt();
        for (ps, w) in self.p_sigma.iter_mut().zip(&whitened) {
            *ps = (1.0 - cs) * *ps + ps_gain * w;
        }

        let ps_norm = norm(&self.p_sigma);
        let decay = 1.0 - (1.0 - cs).powi(2 * (self.generation as i32 + 1));
        let h_sigma = ps_norm / decay.sqrt() < (1.4 + 2.0 / (n + 1.0)) * p.chi_n;
        let cc = p.c_c;
        let pc_gain = (cc * (2.0 - cc) * p.mu_eff).sqrt();
        for (pc, yi) in self.p_c.iter_mut().zip(&y_w) {
            *pc = (1.0 - cc) * *pc + if h_sigma { pc_gain * yi } else { 0.0 };
        }
        let stall = if h_sigma { 0.0 } else { cc * (2.0 - cc) };

        let keep = 1.0 - p.c_1 - p.c_mu + p.c_1 * stall;
        for i in 0..d {
            for j in i..d {
                let rank_mu: f64 = p
                    .weights
                    .iter()
                    .zip(&steps)
                    .map(|(w, y)| w * y[i] * y[j])
                    .sum();
                let v =
                    keep * self.cov[(i, j)] + p.c_1 * self.p_c[i] * self.p_c[j] + p.c_mu * rank_mu;
                self.cov[(i, j)] = v;
                self.cov[(j, i)] = v;
            }
        }

        self.sigma *= ((cs / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.generation += 1;
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::numerical(format!(
                "step size degenerated to {} at generation {}",
                self.sigma, self.generation
            )));
        }
        Ok(())
    }

    /// Signals an ill-conditioned covariance (> 1e14) or a collapsed step
    /// size (σ·√λ_max < 1e-12).
    pub fn should_restart(&self) -> Option<RestartReason> {
        let eig = match sym_eig(&self.cov) {
            Ok(e) => e,
            Err(_) => return Some(RestartReason::Condition),
        };
        let max = eig.values.first().copied().unwrap_or(0.0);
        let min = eig.values.last().copied().unwrap_or(0.0);
        if min <= 0.0 || max / min > CONDITION_LIMIT {
            return Some(RestartReason::Condition);
        }
        if self.sigma * max.sqrt() < STEP_COLLAPSE_LIMIT {
            return Some(RestartReason::StepSizeCollapse);
        }
        None
    }
}

/// Position of a [`CmaRng`] stream: enough to continue it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha key.
    pub key: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &CmaRng) -> Self {
        RngState {
            key: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<CmaRng> {
        let bytes =
            hex::decode(&self.key).map_err(|e| Error::structural(format!("bad rng key: {e}")))?;
        let key: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::structural("rng key must be 32 bytes"))?;
        let mut rng = CmaRng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

/// Serializable snapshot of a run in progress: state plus random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaSnapshot {
    pub seed: u64,
    pub rng: RngState,
    pub state: CmaState,
}

impl CmaSnapshot {
    pub fn capture(seed: u64, state: &CmaState, rng: &CmaRng) -> Self {
        CmaSnapshot {
            seed,
            rng: RngState::capture(rng),
            state: state.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
