//! Diagonal Gaussians, their analytic KL, and mixtures of them.

use std::f64::consts::PI;

use crate::autodiff::{Scalar, Tensor, TensorError, Var};
use crate::rng::{self, Rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("standard deviation must be positive and finite, got {0}")]
    NonPositiveStd(f64),
    #[error("mixture weights must be non-negative and sum to 1 within 1e-6 (sum = {sum})")]
    Weights { sum: f64 },
    #[error("mixture needs at least one component")]
    EmptyMixture,
    #[error("domain index {index} out of range for style dimension {dim}")]
    DomainIndex { index: usize, dim: usize },
    #[error("separation must be positive, got {0}")]
    Separation(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const WEIGHT_TOLERANCE: f64 = 1e-6;

/// Gaussian with diagonal covariance, parameterized by per-dimension std.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, DistError> {
        if mean.len() != std.len() {
            return Err(DistError::Dimension { expected: mean.len(), got: std.len() });
        }
        if let Some(&s) = std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(DistError::NonPositiveStd(s));
        }
        Ok(Self { mean, std })
    }

    /// Posterior head output: std = exp(½·logvar).
    pub fn from_log_var(mean: Vec<f64>, log_var: &[f64]) -> Result<Self, DistError> {
        let std = log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
        Self::new(mean, std)
    }

    /// N(mean, I).
    pub fn unit(mean: Vec<f64>) -> Self {
        let std = vec![1.0; mean.len()];
        Self { mean, std }
    }

    pub fn standard(dim: usize) -> Self {
        Self::unit(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn check_dim(&self, got: usize) -> Result<(), DistError> {
        if got == self.dim() {
            Ok(())
        } else {
            Err(DistError::Dimension { expected: self.dim(), got })
        }
    }

    /// `mean + std ⊙ eps`.
    pub fn rsample(&self, eps: &[f64]) -> Result<Vec<f64>, DistError> {
        self.check_dim(eps.len())?;
        Ok(self.mean.iter().zip(&self.std).zip(eps).map(|((m, s), e)| m + s * e).collect())
    }

    /// Draws standard-normal noise from `rng` and reparameterizes.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps = rng::normals(rng, self.dim());
        self.rsample(&eps).expect("noise has matching dimension")
    }

    /// KL(self ‖ p) in closed form.
    pub fn kl_to(&self, p: &DiagGaussian) -> Result<f64, DistError> {
        p.check_dim(self.dim())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(p.mean.iter().zip(&p.std))
            .map(|((qm, qs), (pm, ps))| (ps / qs).ln() + (qs * qs + (qm - pm).powi(2)) / (2.0 * ps * ps) - 0.5)
            .sum())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64, DistError> {
        self.check_dim(x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.std)
            .zip(x)
            .map(|((m, s), x)| -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * ((x - m) / s).powi(2))
            .sum())
    }
}

/// Graph form of [`DiagGaussian::rsample`] over a batch: `mean + std ⊙ eps`.
///
/// `eps` is a constant, so gradients reach `mean` and `std` only.
pub fn rsample_var<'t, T: Scalar>(
    mean: &Var<'t, T>,
    std: &Var<'t, T>,
    eps: &Var<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    if mean.shape() != std.shape() || mean.shape() != eps.shape() {
        return Err(TensorError::Shape {
            op: "rsample",
            detail: format!("mean {:?}, std {:?}, eps {:?}", mean.shape(), std.shape(), eps.shape()),
        });
    }
    mean.add(&std.mul(eps)?)
}

/// Per-row KL(N(mean, exp(log_var)) ‖ p) for `[batch, dim]` posterior heads.
///
/// Same closed form as [`DiagGaussian::kl_to`], written with graph ops so it
/// can be differentiated. Returns shape `[batch]`.
pub fn kl_to_var<'t, T: Scalar>(
    mean: &Var<'t, T>,
    log_var: &Var<'t, T>,
    p: &DiagGaussian,
) -> Result<Var<'t, T>, DistError> {
    let shape = mean.shape();
    if shape.len() != 2 || log_var.shape() != shape {
        return Err(TensorError::Shape {
            op: "kl",
            detail: format!("mean {shape:?}, log_var {:?}", log_var.shape()),
        }
        .into());
    }
    p.check_dim(shape[1])?;
    let tape = mean.tape();
    let vec_const = |f: &dyn Fn(usize) -> f64| {
        tape.constant(Tensor::vector((0..p.dim()).map(|i| T::lit(f(i))).collect()))
    };
    let p_mean = vec_const(&|i| p.mean[i]);
    let inv_two_var = vec_const(&|i| 1.0 / (2.0 * p.std[i] * p.std[i]));
    let offset = vec_const(&|i| p.std[i].ln() - 0.5);
    let spread = log_var.exp().add(&mean.sub(&p_mean)?.square())?.mul(&inv_two_var)?;
    let per_dim = log_var.scale(T::lit(-0.5)).add(&spread)?.add(&offset)?;
    Ok(per_dim.sum_axis(1)?)
}

/// Weighted mixture of diagonal Gaussians sharing one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrior {
    components: Vec<DiagGaussian>,
    weights: Vec<f64>,
}

/// One ancestral draw: the chosen component and the sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDraw {
    pub component: usize,
    pub value: Vec<f64>,
}

pub fn validate_weights(weights: &[f64]) -> Result<(), DistError> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(DistError::Weights { sum });
    }
    Ok(())
}

impl MixturePrior {
    pub fn new(components: Vec<DiagGaussian>, weights: Vec<f64>) -> Result<Self, DistError> {
        let first = components.first().ok_or(DistError::EmptyMixture)?;
        if weights.len() != components.len() {
            return Err(DistError::Dimension { expected: components.len(), got: weights.len() });
        }
        for c in &components {
            first.check_dim(c.dim())?;
        }
        validate_weights(&weights)?;
        Ok(Self { components, weights })
    }

    pub fn single(component: DiagGaussian) -> Self {
        Self { components: vec![component], weights: vec![1.0] }
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Component with the largest weight; ties go to the lowest index.
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    /// Ancestral sampling: one uniform draw picks the component, then
    /// `dim` normal draws reparameterize it.
    pub fn sample(&self, rng: &mut Rng) -> MixtureDraw {
        let u = rng::uniform(rng);
        let component = self.pick(u);
        MixtureDraw { component, value: self.components[component].sample(rng) }
    }

    fn pick(&self, u: f64) -> usize {
        let total: f64 = self.weights.iter().sum();
        let target = u * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
        last
    }
}

/// Style descriptor of one domain.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub alpha: Vec<f64>,
    pub is_source: bool,
}

impl DomainSpec {
    /// Style prior N(α, I).
    pub fn style_prior(&self) -> DiagGaussian {
        DiagGaussian::unit(self.alpha.clone())
    }
}

/// `separation · e_index` in `R^style_dim`.
pub fn make_alpha(index: usize, style_dim: usize, separation: f64) -> Result<Vec<f64>, DistError> {
    if index >= style_dim {
        return Err(DistError::DomainIndex { index, dim: style_dim });
    }
    if !(separation > 0.0) {
        return Err(DistError::Separation(separation));
    }
    let mut alpha = vec![0.0; style_dim];
    alpha[index] = separation;
    Ok(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_rel_error, Tape};

    #[test]
    fn rsample_zero_noise_is_mean() {
        let q = DiagGaussian::new(vec![1.5, -0.25], vec![0.3, 2.0]).unwrap();
        assert_eq!(q.rsample(&[0.0, 0.0]).unwrap(), vec![1.5, -0.25]);
        let std = DiagGaussian::standard(3);
        assert_eq!(std.rsample(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(q.rsample(&[0.0]), Err(DistError::Dimension { .. })));
    }

    #[test]
    fn rsample_moments() {
        let q = DiagGaussian::new(vec![1.0, -1.0], vec![0.5, 2.0]).unwrap();
        let mut rng = rng::stream(42, "test", 0);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let s = q.sample(&mut rng);
            sum[0] += s[0];
            sum[1] += s[1];
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            assert!((mean - q.mean()[d]).abs() < 3.0 * q.std()[d] / (n as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let p = DiagGaussian::standard(1);
        assert_eq!(p.kl_to(&p).unwrap(), 0.0);
        let q = DiagGaussian::unit(vec![1.0]);
        assert!((q.kl_to(&p).unwrap() - 0.5).abs() < 1e-15);
        let wide = DiagGaussian::new(vec![0.0], vec![2.0]).unwrap();
        assert!((wide.kl_to(&p).unwrap() - (1.5 - 2f64.ln())).abs() < 1e-15);
        assert!((wide.kl_to(&p).unwrap() - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn nonpositive_std_rejected() {
        assert!(matches!(DiagGaussian::new(vec![0.0], vec![0.0]), Err(DistError::NonPositiveStd(_))));
        assert!(matches!(DiagGaussian::new(vec![0.0], vec![-1.0]), Err(DistError::NonPositiveStd(_))));
    }

    #[test]
    fn log_prob_values() {
        let p = DiagGaussian::standard(1);
        let c = -0.5 * (2.0 * PI).ln();
        assert!((p.log_prob(&[0.0]).unwrap() - c).abs() < 1e-15);
        assert!((p.log_prob(&[0.0]).unwrap() + 0.9189).abs() < 1e-4);
        assert!((p.log_prob(&[1.0]).unwrap() - (c - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one() {
        let p = DiagGaussian::new(vec![0.7], vec![1.3]).unwrap();
        let (lo, hi, n) = (-12.0, 12.0, 20_000);
        let h = (hi - lo) / n as f64;
        // trapezoid rule
        let total: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * p.log_prob(&[lo + i as f64 * h]).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn kl_var_matches_closed_form_per_row() {
        let p = DiagGaussian::new(vec![3.0, 0.0, -1.0], vec![1.0, 0.5, 2.0]).unwrap();
        let mean = [0.2, -0.4, 1.1, 2.0, 0.1, -0.3];
        let log_var = [0.1, -0.5, 0.3, -1.0, 0.0, 0.7];
        let tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::new(vec![2, 3], mean.to_vec()).unwrap());
        let lv = tape.constant(Tensor::new(vec![2, 3], log_var.to_vec()).unwrap());
        let kl = kl_to_var(&m, &lv, &p).unwrap().tensor();
        for row in 0..2 {
            let q = DiagGaussian::from_log_var(mean[row * 3..row * 3 + 3].to_vec(), &log_var[row * 3..row * 3 + 3]).unwrap();
            assert!((kl.data()[row] - q.kl_to(&p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn rsample_gradient_is_identity_and_noise() {
        let eps = Tensor::<f64>::vector(vec![0.5, -1.2, 2.0]);
        let mean = Tensor::<f64>::vector(vec![0.1, 0.2, 0.3]);
        let std = Tensor::<f64>::vector(vec![1.0, 0.4, 2.2]);
        for d in 0..3 {
            let pick = |m: &Tensor<f64>, s: &Tensor<f64>| {
                let tape = Tape::new();
                let (mv, sv) = (tape.param(m.clone()), tape.param(s.clone()));
                let y = rsample_var(&mv, &sv, &tape.constant(eps.clone())).unwrap().slice(0, d, 1).unwrap().sum();
                let g = tape.backward(y).unwrap();
                (y.item(), g.get(mv).unwrap().clone(), g.get(sv).unwrap().clone())
            };
            let (_, gm, gs) = pick(&mean, &std);
            let mut unit = vec![0.0; 3];
            unit[d] = 1.0;
            assert_eq!(gm.data(), &unit[..]);
            let mut diag = vec![0.0; 3];
            diag[d] = eps.data()[d];
            assert_eq!(gs.data(), &diag[..]);
            let numeric = finite_diff_grad(|s| pick(&mean, s).0, &std, 1e-3);
            assert!(max_rel_error(&gs, &numeric) < 1e-6);
        }
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let c = || DiagGaussian::standard(2);
        assert!(matches!(MixturePrior::new(vec![c(), c()], vec![0.6, 0.6]), Err(DistError::Weights { .. })));
        assert!(matches!(MixturePrior::new(vec![c(), c()], vec![1.5, -0.5]), Err(DistError::Weights { .. })));
        assert!(MixturePrior::new(vec![c(), c()], vec![0.5, 0.5 + 5e-7]).is_ok());
        assert!(matches!(MixturePrior::new(vec![], vec![]), Err(DistError::EmptyMixture)));
        assert!(matches!(
            MixturePrior::new(vec![c(), DiagGaussian::standard(3)], vec![0.5, 0.5]),
            Err(DistError::Dimension { .. })
        ));
    }

    #[test]
    fn degenerate_mixture_always_picks_its_component() {
        let m = MixturePrior::new(
            vec![DiagGaussian::unit(vec![-3.0]), DiagGaussian::unit(vec![3.0])],
            vec![1.0, 0.0],
        )
        .unwrap();
        let mut rng = rng::stream(1, "mix", 0);
        for _ in 0..2000 {
            assert_eq!(m.sample(&mut rng).component, 0);
        }
        let m = MixturePrior::new(
            vec![DiagGaussian::unit(vec![-3.0]), DiagGaussian::unit(vec![3.0])],
            vec![0.0, 1.0],
        )
        .unwrap();
        for _ in 0..2000 {
            assert_eq!(m.sample(&mut rng).component, 1);
        }
    }

    #[test]
    fn balanced_mixture_mean_near_zero() {
        let m = MixturePrior::new(
            vec![DiagGaussian::unit(vec![-3.0]), DiagGaussian::unit(vec![3.0])],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut rng = rng::stream(2, "mix", 0);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| m.sample(&mut rng).value[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "{mean}");
    }

    #[test]
    fn component_frequencies_are_binomial() {
        let weights = vec![0.2, 0.5, 0.3];
        let m = MixturePrior::new((0..3).map(|i| DiagGaussian::unit(vec![i as f64])).collect(), weights.clone()).unwrap();
        let mut rng = rng::stream(3, "mix", 0);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[m.sample(&mut rng).component] += 1;
        }
        for (c, w) in counts.iter().zip(&weights) {
            let f = *c as f64 / n as f64;
            assert!((f - w).abs() <= 3.0 * (w * (1.0 - w) / n as f64).sqrt(), "{f} vs {w}");
        }
    }

    /// Two-sample Kolmogorov–Smirnov statistic.
    fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    #[test]
    fn single_component_mixture_matches_rsample() {
        let q = DiagGaussian::new(vec![0.5, -2.0], vec![1.5, 0.3]).unwrap();
        let m = MixturePrior::single(q.clone());
        let n = 10_000;
        let mut r1 = rng::stream(4, "mix", 0);
        let mut r2 = rng::stream(4, "direct", 0);
        let a: Vec<Vec<f64>> = (0..n).map(|_| m.sample(&mut r1).value).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| q.sample(&mut r2)).collect();
        // critical value for alpha = 0.01, equal sample sizes
        let crit = 1.628 * ((2 * n) as f64 / (n * n) as f64).sqrt();
        for d in 0..2 {
            let stat = ks_statistic(a.iter().map(|v| v[d]).collect(), b.iter().map(|v| v[d]).collect());
            assert!(stat < crit, "coordinate {d}: D = {stat}, critical {crit}");
        }
    }

    #[test]
    fn dominant_breaks_ties_low() {
        let c = || DiagGaussian::standard(1);
        let m = MixturePrior::new(vec![c(), c(), c()], vec![0.25, 0.375, 0.375]).unwrap();
        assert_eq!(m.dominant(), 1);
    }

    #[test]
    fn alpha_is_scaled_basis() {
        assert_eq!(make_alpha(0, 4, 3.0).unwrap(), vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(make_alpha(1, 4, 3.0).unwrap(), vec![0.0, 3.0, 0.0, 0.0]);
        assert!(matches!(make_alpha(4, 4, 3.0), Err(DistError::DomainIndex { .. })));
        assert!(matches!(make_alpha(0, 4, 0.0), Err(DistError::Separation(_))));
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (a, b) = (make_alpha(i, 4, 3.0).unwrap(), make_alpha(j, 4, 3.0).unwrap());
                let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 3.0 * 2f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_diagonal(
            qm in proptest::collection::vec(-3.0f64..3.0, 4),
            qs in proptest::collection::vec(0.1f64..3.0, 4),
            pm in proptest::collection::vec(-3.0f64..3.0, 4),
            ps in proptest::collection::vec(0.1f64..3.0, 4),
        ) {
            let q = DiagGaussian::new(qm, qs).unwrap();
            let p = DiagGaussian::new(pm, ps).unwrap();
            proptest::prop_assert!(q.kl_to(&p).unwrap() >= -1e-12);
            proptest::prop_assert!(q.kl_to(&q).unwrap().abs() < 1e-7);
        }
    }
}
