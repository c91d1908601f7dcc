//! Binary observations from mixtures of threshold-step Bernoulli models.
//!
//! A scalar latent `z` drives `n` bits. Under component `l`, bit `j` fires
//! with probability `alpha_lj + beta_lj * 1{z >= c_j}` where the thresholds
//! `c_0 <= ... <= c_{n-1}` also partition the line into `n` cells. Within a
//! cell the likelihood of a bit vector is constant, so with a standard-normal
//! prior the posterior is a cell-reweighted normal and its moments reduce to
//! precomputed truncated-normal integrals.
//!
//! [`BernoulliMixtureObs`] applies one such scalar model independently per
//! state coordinate and concatenates the bit blocks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CoreError, Result};

use super::ObservationModel;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_pdf(z: f64) -> f64 {
    if z.is_finite() {
        INV_SQRT_2PI * (-0.5 * z * z).exp()
    } else {
        0.0
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    if z == f64::NEG_INFINITY {
        0.0
    } else if z == f64::INFINITY {
        1.0
    } else {
        Normal::standard().cdf(z)
    }
}

/// Mixture of step Bernoulli observation models for a scalar state with a
/// standard-normal stationary prior.
#[derive(Debug, Clone)]
pub struct BernoulliMixture1d {
    pi: Vec<f64>,
    log_pi: Vec<f64>,
    /// Cell boundaries including the `-inf` / `+inf` sentinels; bit `j`
    /// steps at `cuts[j]` and cell `i` is `[cuts[i], cuts[i+1])`.
    cuts: Vec<f64>,
    alphas: DMatrix<f64>,
    betas: DMatrix<f64>,
    log_hi: DMatrix<f64>,
    log_hi_c: DMatrix<f64>,
    log_lo: DMatrix<f64>,
    log_lo_c: DMatrix<f64>,
    cell_mass: Vec<f64>,
    cell_first: Vec<f64>,
    cell_second: Vec<f64>,
}

impl BernoulliMixture1d {
    /// `alphas` and `betas` are component-by-bit matrices; `cuts` must start
    /// at `-inf`, end at `+inf`, and increase strictly in between.
    pub fn new(pi: &[f64], cuts: Vec<f64>, alphas: DMatrix<f64>, betas: DMatrix<f64>) -> Result<Self> {
        let components = pi.len();
        if components == 0 {
            return Err(CoreError::InvalidArgument(
                "bernoulli mixture needs at least one component".into(),
            ));
        }
        if pi.iter().any(|&p| p <= 0.0) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidArgument(
                "mixture weights must be positive and sum to one".into(),
            ));
        }
        if cuts.len() < 2
            || cuts[0] != f64::NEG_INFINITY
            || *cuts.last().unwrap() != f64::INFINITY
            || cuts.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CoreError::InvalidArgument(
                "cuts must run from -inf to +inf and increase strictly".into(),
            ));
        }
        let bits = cuts.len() - 1;
        for m in [&alphas, &betas] {
            if m.nrows() != components || m.ncols() != bits {
                return Err(CoreError::DimensionMismatch {
                    context: "bernoulli rate matrix",
                    expected: components * bits,
                    got: m.nrows() * m.ncols(),
                });
            }
        }
        for l in 0..components {
            for j in 0..bits {
                let a = alphas[(l, j)];
                let ab = a + betas[(l, j)];
                if !(0.0..=1.0).contains(&a) || !(-1e-12..=1.0 + 1e-12).contains(&ab) {
                    return Err(CoreError::InvalidArgument(format!(
                        "bit {j} of component {l} has success probability outside [0, 1]"
                    )));
                }
            }
        }
        let log_or_neg_inf = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let log_hi = DMatrix::from_fn(components, bits, |l, j| {
            log_or_neg_inf(alphas[(l, j)] + betas[(l, j)])
        });
        let log_hi_c = DMatrix::from_fn(components, bits, |l, j| {
            log_or_neg_inf(1.0 - alphas[(l, j)] - betas[(l, j)])
        });
        let log_lo = DMatrix::from_fn(components, bits, |l, j| log_or_neg_inf(alphas[(l, j)]));
        let log_lo_c =
            DMatrix::from_fn(components, bits, |l, j| log_or_neg_inf(1.0 - alphas[(l, j)]));
        // Truncated standard-normal integrals of 1, z, z^2 over each cell.
        let mut cell_mass = Vec::with_capacity(bits);
        let mut cell_first = Vec::with_capacity(bits);
        let mut cell_second = Vec::with_capacity(bits);
        for i in 0..bits {
            let (a, b) = (cuts[i], cuts[i + 1]);
            let mass = std_normal_cdf(b) - std_normal_cdf(a);
            let a_pdf = std_normal_pdf(a);
            let b_pdf = std_normal_pdf(b);
            cell_mass.push(mass);
            cell_first.push(a_pdf - b_pdf);
            let a_term = if a.is_finite() { a * a_pdf } else { 0.0 };
            let b_term = if b.is_finite() { b * b_pdf } else { 0.0 };
            cell_second.push(mass + a_term - b_term);
        }
        Ok(Self {
            pi: pi.to_vec(),
            log_pi: pi.iter().map(|p| p.ln()).collect(),
            cuts,
            alphas,
            betas,
            log_hi,
            log_hi_c,
            log_lo,
            log_lo_c,
            cell_mass,
            cell_first,
            cell_second,
        })
    }

    /// Cuts at standard-normal quantiles `i/n`, so every cell is a priori
    /// equally likely.
    pub fn equal_mass_cuts(bits: usize) -> Vec<f64> {
        let normal = Normal::standard();
        let mut cuts = Vec::with_capacity(bits + 1);
        cuts.push(f64::NEG_INFINITY);
        for i in 1..bits {
            cuts.push(normal.inverse_cdf(i as f64 / bits as f64));
        }
        cuts.push(f64::INFINITY);
        cuts
    }

    /// The default two-component contrast: one component's bits step up from
    /// 0.001 to 0.999 at their thresholds, the other's mirror image steps
    /// down, so every bit is marginally a fair coin at every state value.
    pub fn step_contrast_pair(bits: usize) -> Result<Self> {
        let alphas = DMatrix::from_fn(2, bits, |l, _| if l == 0 { 0.001 } else { 0.999 });
        let betas = DMatrix::from_fn(2, bits, |l, _| if l == 0 { 0.998 } else { -0.998 });
        Self::new(&[0.5, 0.5], Self::equal_mass_cuts(bits), alphas, betas)
    }

    pub fn bits(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn components(&self) -> usize {
        self.pi.len()
    }

    /// Success probability of bit `j` under component `l` at state `z`.
    pub fn success_prob(&self, l: usize, j: usize, z: f64) -> f64 {
        let step = if z >= self.cuts[j] { self.betas[(l, j)] } else { 0.0 };
        self.alphas[(l, j)] + step
    }

    /// Index of the cell containing `z`.
    pub fn cell_index(&self, z: f64) -> usize {
        let interior = &self.cuts[1..self.cuts.len() - 1];
        interior.partition_point(|&c| z >= c)
    }

    /// `log p(x | z in C_i)` for every cell `i`, mixed over components.
    ///
    /// For `z` in cell `i` exactly the bits up to `i` sit above their
    /// thresholds, so the per-component log likelihood is a prefix sum of the
    /// stepped-rate terms plus a suffix sum of the base-rate terms.
    pub fn log_likelihood_by_cell(&self, bits: &[f64]) -> Result<Vec<f64>> {
        let n = self.bits();
        if bits.len() != n {
            return Err(CoreError::DimensionMismatch {
                context: "bernoulli bit vector",
                expected: n,
                got: bits.len(),
            });
        }
        let lse2 = |a: f64, b: f64| {
            let hi = a.max(b);
            if hi == f64::NEG_INFINITY {
                hi
            } else {
                hi + ((a - hi).exp() + (b - hi).exp()).ln()
            }
        };
        let mut per_cell = vec![f64::NEG_INFINITY; n];
        let mut suffix = vec![0.0; n + 1];
        for l in 0..self.components() {
            for j in (0..n).rev() {
                let term = if bits[j] > 0.5 {
                    self.log_lo[(l, j)]
                } else {
                    self.log_lo_c[(l, j)]
                };
                suffix[j] = suffix[j + 1] + term;
            }
            let mut prefix = 0.0;
            for i in 0..n {
                prefix += if bits[i] > 0.5 {
                    self.log_hi[(l, i)]
                } else {
                    self.log_hi_c[(l, i)]
                };
                let v = self.log_pi[l] + prefix + suffix[i + 1];
                per_cell[i] = if l == 0 { v } else { lse2(per_cell[i], v) };
            }
        }
        Ok(per_cell)
    }

    /// Exact posterior mean and variance of `z` given the bit vector, under
    /// the standard-normal prior.
    pub fn posterior_moments(&self, bits: &[f64]) -> Result<(f64, f64)> {
        let log_w = self.log_likelihood_by_cell(bits)?;
        let peak = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if peak == f64::NEG_INFINITY {
            return Err(CoreError::DegenerateModel(
                "bit vector has zero likelihood in every cell".into(),
            ));
        }
        let mut mass = 0.0;
        let mut first = 0.0;
        let mut second = 0.0;
        for (i, lw) in log_w.iter().enumerate() {
            let w = (lw - peak).exp();
            mass += w * self.cell_mass[i];
            first += w * self.cell_first[i];
            second += w * self.cell_second[i];
        }
        if !(mass.is_finite() && mass > 0.0) {
            return Err(CoreError::DegenerateModel(
                "posterior mass is not positive".into(),
            ));
        }
        let mean = first / mass;
        let var = second / mass - mean * mean;
        if !(var.is_finite() && var > 0.0) {
            return Err(CoreError::NumericalFailure(
                "posterior variance collapsed to zero".into(),
            ));
        }
        Ok((mean, var))
    }

    /// Draws a component, then the bit vector, given the state value.
    pub fn sample_bits(&self, z: f64, rng: &mut dyn RngCore, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut component = self.components() - 1;
        for (l, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                component = l;
                break;
            }
        }
        for (j, slot) in out.iter_mut().enumerate() {
            let p = self.success_prob(component, j, z);
            *slot = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        }
    }
}

/// Independent copies of a scalar Bernoulli mixture, one per state
/// coordinate, with the bit blocks concatenated in coordinate order.
#[derive(Debug, Clone)]
pub struct BernoulliMixtureObs {
    per_coord: BernoulliMixture1d,
    state_dim: usize,
}

impl BernoulliMixtureObs {
    pub fn new(per_coord: BernoulliMixture1d, state_dim: usize) -> Result<Self> {
        if state_dim == 0 {
            return Err(CoreError::InvalidArgument(
                "state dimension must be positive".into(),
            ));
        }
        Ok(Self {
            per_coord,
            state_dim,
        })
    }

    pub fn per_coord(&self) -> &BernoulliMixture1d {
        &self.per_coord
    }

    pub fn bits_per_coord(&self) -> usize {
        self.per_coord.bits()
    }

    fn block<'a>(&self, x: &'a DVector<f64>, k: usize) -> &'a [f64] {
        let n = self.bits_per_coord();
        &x.as_slice()[k * n..(k + 1) * n]
    }

    /// Exact posterior mean vector and (diagonal) covariance of the state
    /// given the concatenated bits, under the standard-normal prior that the
    /// per-coordinate model assumes.
    pub fn posterior_moments(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if x.len() != self.obs_dim() {
            return Err(CoreError::DimensionMismatch {
                context: "bernoulli observation",
                expected: self.obs_dim(),
                got: x.len(),
            });
        }
        let d = self.state_dim;
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for k in 0..d {
            let (m, v) = self.per_coord.posterior_moments(self.block(x, k))?;
            mean[k] = m;
            cov[(k, k)] = v;
        }
        Ok((mean, cov))
    }
}

impl ObservationModel for BernoulliMixtureObs {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn obs_dim(&self) -> usize {
        self.state_dim * self.bits_per_coord()
    }

    fn sample(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let n = self.bits_per_coord();
        let mut out = DVector::zeros(self.obs_dim());
        for k in 0..self.state_dim {
            self.per_coord
                .sample_bits(z[k], rng, &mut out.as_mut_slice()[k * n..(k + 1) * n]);
        }
        out
    }

    fn log_likelihood(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        (0..self.state_dim)
            .map(|k| {
                let table = self
                    .per_coord
                    .log_likelihood_by_cell(self.block(x, k))
                    .expect("observation width checked by caller");
                table[self.per_coord.cell_index(z[k])]
            })
            .sum()
    }

    fn bound_log_likelihood<'a>(&'a self, x: &DVector<f64>) -> super::BoundLogLik<'a> {
        // One table per coordinate turns each state evaluation into a cell
        // lookup instead of a pass over every bit.
        let tables: Vec<Vec<f64>> = (0..self.state_dim)
            .map(|k| {
                self.per_coord
                    .log_likelihood_by_cell(self.block(x, k))
                    .expect("observation width checked by caller")
            })
            .collect();
        Box::new(move |z: &DVector<f64>| {
            tables
                .iter()
                .zip(z.iter())
                .map(|(table, &zk)| table[self.per_coord.cell_index(zk)])
                .sum()
        })
    }
}
