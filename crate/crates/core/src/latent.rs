//! Per-rater Gaussian posteriors over the latent labelling code.
//!
//! Each rater `r` owns `q(z | r) = N(mu_r, L_r L_r^T)`. The factor `L_r` is
//! stored unconstrained: entries above the diagonal are ignored, the
//! diagonal goes through `ln(1 + e^x)` so it stays positive. The last slot of
//! the bank (index `num_raters`) is the gold rater. The prior is fixed at
//! `N(0, prior_var * I)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default latent dimension.
pub const DEFAULT_DIM: usize = 8;
/// Default prior variance.
pub const DEFAULT_PRIOR_VAR: f64 = 2.0;
/// Default variance of the initial mean draws.
pub const DEFAULT_POST_VAR: f64 = 8.0;

/// Condition number above which the averaged covariance in
/// [`RaterBank::pairwise_overlap`] is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// One rater's Gaussian: mean and unconstrained Cholesky parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T: Scalar = f32> {
    pub mu: Tensor<T>,
    pub chol_raw: Tensor<T>,
}

impl<T: Scalar> GaussianLatent<T> {
    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mu.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Lower-triangular factor `L` (row-major `D x D`).
    pub fn chol(&self) -> Vec<f64> {
        let d = self.dim();
        let raw = self.chol_raw.data();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..i {
                l[i * d + j] = raw[i * d + j].as_f64();
            }
            l[i * d + i] = autodiff::positive_diag(raw[i * d + i].as_f64());
        }
        l
    }

    /// `Sigma = L L^T` (row-major `D x D`).
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let l = self.chol();
        let mut s = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] = (0..=i.min(j)).map(|k| l[i * d + k] * l[j * d + k]).sum();
            }
        }
        s
    }

    /// Reparameterized draw `mu + L eps`.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if eps.len() != d {
            return Err(Error::shape(
                "sample",
                format!("noise has {} entries, latent has {d}", eps.len()),
            ));
        }
        let l = self.chol();
        let mu = self.mean();
        Ok((0..d)
            .map(|i| mu[i] + (0..=i).map(|j| l[i * d + j] * eps[j]).sum::<f64>())
            .collect())
    }

    /// Multiplies the factor by `factor`, keeping the mean.
    pub fn scale_chol(&mut self, factor: f64) {
        let d = self.dim();
        let l = self.chol();
        let raw = self.chol_raw.data_mut();
        for i in 0..d {
            for j in 0..i {
                raw[i * d + j] = T::from_f64(l[i * d + j] * factor);
            }
            raw[i * d + i] = T::from_f64(autodiff::positive_diag_inv(l[i * d + i] * factor));
        }
    }
}

/// All rater posteriors plus the gold slot and the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterBank<T: Scalar = f32> {
    latents: Vec<GaussianLatent<T>>,
    dim: usize,
    prior_var: f64,
}

/// Graph handles for one rater's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLatent {
    pub mu: Var,
    pub chol_raw: Var,
}

impl<T: Scalar> RaterBank<T> {
    /// `num_raters` human raters plus the gold rater. Means are drawn i.i.d.
    /// from `N(0, post_var)`; every covariance starts at `prior_var * I`.
    pub fn init(
        num_raters: usize,
        dim: usize,
        prior_var: f64,
        post_var: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_raters == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "need at least one rater and one latent dimension".into(),
            ));
        }
        if !(prior_var > 0.0 && prior_var.is_finite()) || !(post_var > 0.0 && post_var.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "variances must be positive (prior {prior_var}, posterior init {post_var})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = post_var.sqrt();
        let diag = autodiff::positive_diag_inv(prior_var.sqrt());
        let latents = (0..=num_raters)
            .map(|_| {
                let mu = (0..dim)
                    .map(|_| T::from_f64(sd * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                let mut raw = vec![T::zero(); dim * dim];
                for i in 0..dim {
                    raw[i * dim + i] = T::from_f64(diag);
                }
                GaussianLatent {
                    mu: Tensor::from_vec(mu),
                    chol_raw: Tensor::from_parts(vec![dim, dim], raw),
                }
            })
            .collect();
        Ok(RaterBank {
            latents,
            dim,
            prior_var,
        })
    }

    /// Rebuilds a bank from stored latents (the last one is gold).
    pub fn from_latents(latents: Vec<GaussianLatent<T>>, prior_var: f64) -> Result<Self> {
        let dim = latents.first().map(|l| l.dim()).unwrap_or(0);
        if latents.len() < 2 || dim == 0 {
            return Err(Error::InvalidArgument(
                "a bank needs at least one rater and the gold slot".into(),
            ));
        }
        if latents
            .iter()
            .any(|l| l.dim() != dim || l.chol_raw.shape() != [dim, dim])
        {
            return Err(Error::InvalidArgument(
                "latents disagree on dimension".into(),
            ));
        }
        if !(prior_var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prior variance {prior_var} must be positive"
            )));
        }
        Ok(RaterBank {
            latents,
            dim,
            prior_var,
        })
    }

    /// Human raters, excluding the gold slot.
    pub fn num_raters(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn gold(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn latents(&self) -> &[GaussianLatent<T>] {
        &self.latents
    }

    pub fn latents_mut(&mut self) -> &mut [GaussianLatent<T>] {
        &mut self.latents
    }

    pub fn latent(&self, r: usize) -> Result<&GaussianLatent<T>> {
        self.latents.get(r).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "rater {r} out of range (0..={}, {} is gold)",
                self.gold(),
                self.gold()
            ))
        })
    }

    pub fn latent_mut(&mut self, r: usize) -> Result<&mut GaussianLatent<T>> {
        let gold = self.gold();
        self.latents
            .get_mut(r)
            .ok_or_else(|| Error::InvalidArgument(format!("rater {r} out of range (0..={gold})")))
    }

    pub fn cast<U: Scalar>(&self) -> RaterBank<U> {
        RaterBank {
            latents: self
                .latents
                .iter()
                .map(|l| GaussianLatent {
                    mu: l.mu.cast(),
                    chol_raw: l.chol_raw.cast(),
                })
                .collect(),
            dim: self.dim,
            prior_var: self.prior_var,
        }
    }

    /// `z = mu_r + L_r eps`.
    pub fn sample(&self, r: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.latent(r)?.sample(eps)
    }

    /// Closed-form `KL(q(z | r) || p(z))`.
    pub fn kl_to_prior(&self, r: usize) -> Result<f64> {
        let lat = self.latent(r)?;
        let (v, _, _) = autodiff::kl_with_grads(&lat.mean(), &lat.chol(), self.prior_var)?;
        Ok(v)
    }

    /// Symmetric matrix of Bhattacharyya distances between all latents
    /// (gold included, last row/column).
    pub fn pairwise_overlap(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.latents.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let d = bhattacharyya(&self.latents[i], &self.latents[j])?;
                out[i][j] = d;
                out[j][i] = d;
            }
        }
        Ok(out)
    }

    /// Adds rater `r`'s parameters to a graph as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>, r: usize) -> Result<BoundLatent> {
        let lat = self.latent(r)?;
        Ok(BoundLatent {
            mu: g.param(lat.mu.clone()),
            chol_raw: g.param(lat.chol_raw.clone()),
        })
    }
}

impl BoundLatent {
    /// Lower-triangular factor node.
    pub fn chol<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.lower_cholesky(self.chol_raw)
    }

    /// Reparameterized sample node `mu + L eps`.
    pub fn sample<T: Scalar>(&self, g: &mut Graph<T>, chol: Var, eps: &[f64]) -> Result<Var> {
        let e = g.constant(Tensor::from_vec(
            eps.iter().map(|&v| T::from_f64(v)).collect(),
        ));
        let lz = g.matvec(chol, e)?;
        g.add(self.mu, lz)
    }

    pub fn kl<T: Scalar>(&self, g: &mut Graph<T>, chol: Var, prior_var: f64) -> Result<Var> {
        g.kl_gaussian(self.mu, chol, prior_var)
    }
}

/// Standard normal noise vector.
pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// In-place Cholesky factorization of a symmetric matrix; returns the lower
/// factor or the index of the first non-positive pivot.
pub fn cholesky(a: &[f64], d: usize) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = a[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(i);
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(l)
}

fn log_det_from_chol(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| 2.0 * l[i * d + i].ln()).sum()
}

/// Bhattacharyya distance between two Gaussians.
pub fn bhattacharyya<T: Scalar>(a: &GaussianLatent<T>, b: &GaussianLatent<T>) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape(
            "bhattacharyya",
            format!("dims {d} vs {}", b.dim()),
        ));
    }
    let (sa, sb) = (a.covariance(), b.covariance());
    let avg: Vec<f64> = sa.iter().zip(&sb).map(|(x, y)| 0.5 * (x + y)).collect();
    let max_diag = (0..d).map(|i| avg[i * d + i]).fold(0.0, f64::max);
    let l = cholesky(&avg, d).map_err(|pivot| {
        Error::Numerical(format!(
            "averaged covariance is singular (pivot {pivot} not positive, largest variance {max_diag:e})"
        ))
    })?;
    let diag: Vec<f64> = (0..d).map(|i| l[i * d + i]).collect();
    let cond = (diag.iter().cloned().fold(0.0, f64::max)
        / diag.iter().cloned().fold(f64::INFINITY, f64::min))
    .powi(2);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Numerical(format!(
            "averaged covariance is numerically singular (condition estimate {cond:.3e})"
        )));
    }
    // Mahalanobis term via forward substitution: y = L^-1 (mu_a - mu_b)
    let (ma, mb) = (a.mean(), b.mean());
    let mut y = vec![0.0; d];
    for i in 0..d {
        let s: f64 = (ma[i] - mb[i]) - (0..i).map(|k| l[i * d + k] * y[k]).sum::<f64>();
        y[i] = s / l[i * d + i];
    }
    let maha: f64 = y.iter().map(|v| v * v).sum();
    let la = a.chol();
    let lb = b.chol();
    let ld_avg = log_det_from_chol(&l, d);
    let ld_a = log_det_from_chol(&la, d);
    let ld_b = log_det_from_chol(&lb, d);
    Ok(maha / 8.0 + 0.5 * (ld_avg - 0.5 * (ld_a + ld_b)))
}
