//! Integrity analysis for scalar-multiple attacks.
//!
//! Cosine matching cannot distinguish a neuron from a scaled copy of itself,
//! so a per-neuron l2-norm verification backs it up. The behavioral impact of
//! the scaling is quantified by closed-form KL divergences over the
//! post-synaptic Gaussian, each paired with a seeded Monte-Carlo estimator
//! that samples the same quantity through an independent path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::resync::neuron_vectors;
use crate::tensor::{cosine, l2_norm};

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

/// Gaussian model of a layer's input: mean vector and PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGaussianSpec {
    mean: Vec<f64>,
    cov: Covariance,
}

const PSD_TOL: f64 = 1e-9;

/// Cholesky factor of a symmetric PSD matrix; semidefinite directions get a
/// zero column. Fails when a pivot is negative beyond tolerance.
fn cholesky_psd(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let scale = a
        .iter()
        .enumerate()
        .map(|(i, row)| row[i].abs())
        .fold(1.0f64, f64::max);
    let tol = PSD_TOL * scale;
    let mut l = vec![vec![0.0f64; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d < -tol {
            return Err(Error::Domain(format!(
                "covariance is not positive semidefinite (pivot {d} at {j})"
            )));
        }
        l[j][j] = d.max(0.0).sqrt();
        for i in (j + 1)..n {
            if l[j][j] > 0.0 {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

impl InputGaussianSpec {
    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::Shape(format!(
                "mean dim {} vs variance dim {}",
                mean.len(),
                variances.len()
            )));
        }
        if let Some(v) = variances.iter().find(|&&v| v < -PSD_TOL) {
            return Err(Error::Domain(format!("negative variance {v}")));
        }
        Ok(InputGaussianSpec {
            mean,
            cov: Covariance::Diagonal(variances),
        })
    }

    pub fn full(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let n = mean.len();
        if cov.len() != n || cov.iter().any(|row| row.len() != n) {
            return Err(Error::Shape(format!("covariance must be {n}x{n}")));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (cov[i][j] - cov[j][i]).abs();
                if gap > PSD_TOL * cov[i][j].abs().max(cov[j][i].abs()).max(1.0) {
                    return Err(Error::Validation(format!(
                        "covariance not symmetric at ({i},{j}): gap {gap}"
                    )));
                }
            }
        }
        cholesky_psd(&cov)?;
        Ok(InputGaussianSpec {
            mean,
            cov: Covariance::Full(cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    fn factor(&self) -> Result<Vec<Vec<f64>>> {
        match &self.cov {
            Covariance::Diagonal(v) => {
                let n = v.len();
                let mut l = vec![vec![0.0; n]; n];
                for i in 0..n {
                    l[i][i] = v[i].max(0.0).sqrt();
                }
                Ok(l)
            }
            Covariance::Full(rows) => cholesky_psd(rows),
        }
    }
}

/// Exact moments of the post-synaptic potential `z = w . x` for Gaussian
/// input: `mu_z = w . mu`, `sigma_z^2 = w^T Sigma w`.
pub fn post_synaptic_stats(w: &[f64], g: &InputGaussianSpec) -> Result<(f64, f64)> {
    if w.len() != g.dim() {
        return Err(Error::Shape(format!(
            "weight dim {} vs input dim {}",
            w.len(),
            g.dim()
        )));
    }
    let mu_z: f64 = w.iter().zip(g.mean()).map(|(&a, &b)| a * b).sum();
    let var = match &g.cov {
        Covariance::Diagonal(v) => w.iter().zip(v).map(|(&wi, &vi)| wi * wi * vi).sum::<f64>(),
        Covariance::Full(rows) => {
            let mut acc = 0.0;
            for (i, &wi) in w.iter().enumerate() {
                for (j, &wj) in w.iter().enumerate() {
                    acc += wi * rows[i][j] * wj;
                }
            }
            acc
        }
    };
    if var < -PSD_TOL * l2_norm_f64(w).powi(2).max(1.0) {
        return Err(Error::Domain(format!("quadratic form is negative: {var}")));
    }
    Ok((mu_z, var.max(0.0)))
}

fn l2_norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn check_scale_domain(k: f64) -> Result<()> {
    if k <= -1.0 {
        return Err(Error::Domain(format!(
            "scaling factor 1+k must be positive, got k = {k}"
        )));
    }
    Ok(())
}

/// KL divergence between the post-synaptic Gaussian `N(mu_z, sigma_z^2)` and
/// its scaled counterpart `N((1+k) mu_z, (1+k)^2 sigma_z^2)`:
///
/// `log(1+k) + (sigma_z^2 + k^2 mu_z^2) / (2 (1+k)^2 sigma_z^2) - 1/2`
pub fn kl_gaussian_scaled(k: f64, mu_z: f64, sigma_z: f64) -> Result<f64> {
    check_scale_domain(k)?;
    if sigma_z <= 0.0 {
        return Err(Error::Domain(format!(
            "sigma_z must be positive, got {sigma_z}"
        )));
    }
    let s2 = sigma_z * sigma_z;
    let f = 1.0 + k;
    Ok(f.ln() + (s2 + k * k * mu_z * mu_z) / (2.0 * f * f * s2) - 0.5)
}

/// Divergence of the ReLU outputs under the same neuron scaling, for a
/// zero-mean post-synaptic potential:
///
/// `[2 (k+1)^2 log(k+1) - k (k+2)] / (k+1)^2`
///
/// The shared point mass at zero cancels between the two output
/// distributions; the value equals four times the positive-branch integral of
/// the pre-activation log density ratio (and does not depend on sigma_z).
pub fn kl_relu_scaled(k: f64) -> Result<f64> {
    check_scale_domain(k)?;
    let f = 1.0 + k;
    Ok((2.0 * f * f * f.ln() - k * (k + 2.0)) / (f * f))
}

/// Seeded Monte-Carlo estimators for the closed forms above. Both use the
/// analytic density ratio of the two Gaussians, never density estimation,
/// and stay independent of the closed-form code paths they check.
pub mod mc {
    use super::*;
    use crate::rng::{streams, CounterRng};

    fn log_density_ratio(z: f64, k: f64, mu: f64, sigma: f64) -> f64 {
        let f = 1.0 + k;
        let s2 = sigma * sigma;
        let dp = z - mu;
        let dq = z - f * mu;
        f.ln() - dp * dp / (2.0 * s2) + dq * dq / (2.0 * f * f * s2)
    }

    /// Sample mean of the log density ratio under `N(mu_z, sigma_z^2)`.
    pub fn kl_gaussian_scaled(
        k: f64,
        mu_z: f64,
        sigma_z: f64,
        samples: usize,
        seed: u64,
    ) -> Result<f64> {
        super::check_scale_domain(k)?;
        if sigma_z <= 0.0 || samples == 0 {
            return Err(Error::Domain("need sigma_z > 0 and samples > 0".into()));
        }
        let mut rng = CounterRng::new(seed, streams::MONTE_CARLO);
        let mut acc = 0.0;
        for _ in 0..samples {
            let z = mu_z + sigma_z * rng.normal();
            acc += log_density_ratio(z, k, mu_z, sigma_z);
        }
        Ok(acc / samples as f64)
    }

    /// Positive-branch estimate for the ReLU case at `mu_z = 0`.
    ///
    /// Samples the standard post-synaptic Gaussian and averages the log
    /// density ratio over the positive branch only (the point masses at zero
    /// are equal and cancel); the divergence is four times that half-line
    /// integral.
    pub fn kl_relu_scaled(k: f64, samples: usize, seed: u64) -> Result<f64> {
        super::check_scale_domain(k)?;
        if samples == 0 {
            return Err(Error::Domain("need samples > 0".into()));
        }
        let mut rng = CounterRng::new(seed, streams::MONTE_CARLO);
        let mut acc = 0.0;
        for _ in 0..samples {
            let z = rng.normal();
            if z > 0.0 {
                acc += log_density_ratio(z, k, 0.0, 1.0);
            }
        }
        Ok(4.0 * acc / samples as f64)
    }

    /// Sample mean and variance of `w . x` for `x ~ N(mu, Sigma)`.
    pub fn linear_output_stats(
        w: &[f64],
        g: &InputGaussianSpec,
        samples: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        if w.len() != g.dim() {
            return Err(Error::Shape(format!(
                "weight dim {} vs input dim {}",
                w.len(),
                g.dim()
            )));
        }
        if samples < 2 {
            return Err(Error::Domain("need at least 2 samples".into()));
        }
        let l = g.factor()?;
        let n = g.dim();
        let mut rng = CounterRng::new(seed, streams::MONTE_CARLO);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut u = vec![0.0f64; n];
        for _ in 0..samples {
            for ui in u.iter_mut() {
                *ui = rng.normal();
            }
            let mut z = 0.0;
            for (i, &wi) in w.iter().enumerate() {
                let mut xi = g.mean()[i];
                for (j, &uj) in u.iter().enumerate().take(i + 1) {
                    xi += l[i][j] * uj;
                }
                z += wi * xi;
            }
            sum += z;
            sq += z * z;
        }
        let mean = sum / samples as f64;
        let var = sq / samples as f64 - mean * mean;
        Ok((mean, var))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NeuronFlag {
    Clean,
    ScaledNeuron,
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NeuronVerdict {
    pub index: usize,
    pub cosine_to_reference: f64,
    /// `||suspect|| / ||reference||`; -1 when the reference neuron is zero.
    pub norm_ratio: f64,
    pub flag: NeuronFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IntegrityVerdict {
    pub layer: usize,
    pub per_neuron: Vec<NeuronVerdict>,
    pub layer_verdict: NeuronFlag,
}

/// Detection thresholds: a neuron is a scaled copy when its direction is
/// preserved within `cosine_eps` but its norm moved by more than `norm_eps`.
/// Defaults are loose enough that 16-bit quantization does not false-positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrityThresholds {
    pub cosine_eps: f64,
    pub norm_eps: f64,
}

impl Default for IntegrityThresholds {
    fn default() -> Self {
        IntegrityThresholds {
            cosine_eps: 1e-4,
            norm_eps: 1e-3,
        }
    }
}

/// Per-neuron cosine and norm-ratio verification of one layer; the suspect is
/// assumed to be re-synchronized already.
pub fn verify_integrity(
    reference: &ModelBundle,
    suspect: &ModelBundle,
    layer: usize,
    thresholds: &IntegrityThresholds,
) -> Result<IntegrityVerdict> {
    if reference.layers != suspect.layers || reference.input_shape != suspect.input_shape {
        return Err(Error::Validation(
            "reference and suspect architectures differ".into(),
        ));
    }
    if layer >= reference.depth() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range for depth {}",
            reference.depth()
        )));
    }
    let spec = &reference.layers[layer];
    let ref_vecs = neuron_vectors(spec, &reference.weights[layer].weight)?;
    let sus_vecs = neuron_vectors(spec, &suspect.weights[layer].weight)?;
    let mut per_neuron = Vec::with_capacity(ref_vecs.len());
    let mut layer_verdict = NeuronFlag::Clean;
    for (index, (r, s)) in ref_vecs.iter().zip(&sus_vecs).enumerate() {
        let rn = l2_norm(r);
        let sn = l2_norm(s);
        let (cos, ratio, flag) = if rn == 0.0 {
            if sn == 0.0 {
                (1.0, 1.0, NeuronFlag::Clean)
            } else {
                (0.0, -1.0, NeuronFlag::Modified)
            }
        } else {
            let cos = cosine(r, s)?;
            let ratio = sn / rn;
            let flag = if cos < 1.0 - thresholds.cosine_eps {
                NeuronFlag::Modified
            } else if (ratio - 1.0).abs() > thresholds.norm_eps {
                NeuronFlag::ScaledNeuron
            } else {
                NeuronFlag::Clean
            };
            (cos, ratio, flag)
        };
        layer_verdict = layer_verdict.max(flag);
        per_neuron.push(NeuronVerdict {
            index,
            cosine_to_reference: cos,
            norm_ratio: ratio,
            flag,
        });
    }
    Ok(IntegrityVerdict {
        layer,
        per_neuron,
        layer_verdict,
    })
}

/// Rescales every flagged scaled neuron by the inverse of its measured norm
/// ratio (weight column plus its bias/shift), undoing a pure scaling attack.
pub fn correct_scaled_neurons(
    suspect: &ModelBundle,
    verdict: &IntegrityVerdict,
) -> Result<ModelBundle> {
    let layer = verdict.layer;
    if layer >= suspect.depth() {
        return Err(Error::Validation(format!(
            "verdict layer {layer} out of range"
        )));
    }
    let mut out = suspect.clone();
    for nv in &verdict.per_neuron {
        if nv.flag != NeuronFlag::ScaledNeuron || nv.norm_ratio <= 0.0 {
            continue;
        }
        let k = 1.0 / nv.norm_ratio - 1.0;
        out = crate::attack::scalar_attack(&out, layer, nv.index, k)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CollinearityCheck {
    ExactlyCollinear,
    NotCollinear { similarity: f64 },
}

/// Equality case of the Cauchy-Schwarz bound: the suspect vector attains
/// cosine 1 against the reference only when it is a positive scalar multiple
/// of it.
pub fn check_cauchy_schwarz(w: &[f32], w_tilde: &[f32]) -> Result<CollinearityCheck> {
    if l2_norm(w) == 0.0 {
        return Err(Error::Validation("reference vector is zero".into()));
    }
    let similarity = cosine(w, w_tilde)?;
    if similarity >= 1.0 - 1e-9 {
        Ok(CollinearityCheck::ExactlyCollinear)
    } else {
        Ok(CollinearityCheck::NotCollinear { similarity })
    }
}
