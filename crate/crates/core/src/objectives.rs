//! ELBO and the compound training objective.
//!
//! Everything here is built from graph ops, so each term is differentiable
//! with respect to whichever parameters were bound as trainable.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::distributions::{kl_to_var, rsample_var, DiagGaussian};
use crate::error::{Error, Result};
use crate::networks::{decode_graph, discriminate_graph, encode_graph, ArchConfig, Bound, EncoderOutput, Role};
use crate::rng::{self, Rng};

/// Clamp applied to discriminator outputs before taking logs.
pub const PROB_EPS: f64 = 1e-6;

/// Per-batch means of the ELBO terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_loglik: f64,
    pub kl_style: f64,
    pub kl_content: f64,
    pub elbo: f64,
}

impl ElboBreakdown {
    pub fn from_terms(recon_loglik: f64, kl_style: f64, kl_content: f64) -> Self {
        Self { recon_loglik, kl_style, kl_content, elbo: recon_loglik - kl_style - kl_content }
    }
}

/// Per-sample ELBO terms on the tape, each of shape `[B]`.
pub struct ElboGraph<'t, T: Scalar> {
    pub recon_loglik: Var<'t, T>,
    pub kl_style: Var<'t, T>,
    pub kl_content: Var<'t, T>,
    pub elbo: Var<'t, T>,
    pub posterior: EncoderOutput<'t, T>,
    /// Content draw used by the first Monte Carlo sample.
    pub content_sample: Var<'t, T>,
}

impl<T: Scalar> ElboGraph<'_, T> {
    pub fn breakdown(&self) -> ElboBreakdown {
        let mean = |v: &Var<'_, T>| {
            let t = v.tensor();
            t.data().iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / t.numel() as f64
        };
        ElboBreakdown::from_terms(mean(&self.recon_loglik), mean(&self.kl_style), mean(&self.kl_content))
    }
}

/// Fixed-variance Gaussian log-likelihood per sample: `[B, ...]` → `[B]`.
pub fn gaussian_loglik<'t, T: Scalar>(x: &Var<'t, T>, mean: &Var<'t, T>, sigma_x: f64) -> Result<Var<'t, T>> {
    let pixels = x.numel() / x.shape()[0];
    let sq = x.sub(mean)?.square().sum_per_row()?;
    let norm = -0.5 * pixels as f64 * (2.0 * PI * sigma_x * sigma_x).ln();
    Ok(sq.scale(T::lit(-1.0 / (2.0 * sigma_x * sigma_x))).add_scalar(T::lit(norm)))
}

/// Standard-normal noise `[rows, dim]` as a constant.
pub fn noise<'t, T: Scalar>(tape: &'t crate::autodiff::Tape<T>, rng: &mut Rng, rows: usize, dim: usize) -> Var<'t, T> {
    let data = rng::normals(rng, rows * dim).into_iter().map(T::lit).collect();
    tape.constant(Tensor::new(vec![rows, dim], data).expect("shape matches"))
}

/// Reparameterized draw from a `[B, D]` posterior head.
pub fn sample_head<'t, T: Scalar>(mean: &Var<'t, T>, log_var: &Var<'t, T>, rng: &mut Rng) -> Result<Var<'t, T>> {
    let s = mean.shape();
    let std = log_var.scale(T::lit(0.5)).exp();
    let eps = noise(mean.tape(), rng, s[0], s[1]);
    Ok(rsample_var(mean, &std, &eps)?)
}

/// ELBO of a batch under one domain's encoder/decoder and priors.
///
/// Noise is drawn style-then-content for each of the `samples` Monte Carlo
/// draws.
#[allow(clippy::too_many_arguments)]
pub fn elbo_graph<'t, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    domain: &str,
    x: &Var<'t, T>,
    prior_y: &DiagGaussian,
    prior_z: &DiagGaussian,
    samples: usize,
    sigma_x: f64,
    rng: &mut Rng,
) -> Result<ElboGraph<'t, T>> {
    if samples == 0 {
        return Err(Error::Invalid("ELBO needs at least one sample".into()));
    }
    let posterior = encode_graph(arch, params, domain, x)?;
    let kl_style = kl_to_var(&posterior.style_mean, &posterior.style_log_var, prior_y)?;
    let kl_content = kl_to_var(&posterior.content_mean, &posterior.content_log_var, prior_z)?;
    let mut recon: Option<Var<'t, T>> = None;
    let mut content_sample = None;
    for _ in 0..samples {
        let y = sample_head(&posterior.style_mean, &posterior.style_log_var, rng)?;
        let z = sample_head(&posterior.content_mean, &posterior.content_log_var, rng)?;
        let xhat = decode_graph(arch, params, domain, &y, &z)?;
        let ll = gaussian_loglik(x, &xhat, sigma_x)?;
        recon = Some(match recon {
            Some(acc) => acc.add(&ll)?,
            None => ll,
        });
        content_sample.get_or_insert(z);
    }
    let recon_loglik = recon.expect("samples >= 1").scale(T::lit(1.0 / samples as f64));
    let elbo = recon_loglik.sub(&kl_style)?.sub(&kl_content)?;
    Ok(ElboGraph { recon_loglik, kl_style, kl_content, elbo, posterior, content_sample: content_sample.expect("samples >= 1") })
}

/// Domain-indexed batch for [`loss_ind`].
pub struct DomainBatch<'a, 't, T: Scalar> {
    pub domain: &'a str,
    pub images: Var<'t, T>,
    pub style_prior: DiagGaussian,
}

/// Sum over domains of the batch-mean negative ELBO.
///
/// Returns the scalar loss and each domain's graph (in input order) so the
/// caller can reuse posteriors and content draws.
pub fn loss_ind<'a, 't, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    batches: &[DomainBatch<'a, 't, T>],
    samples: usize,
    sigma_x: f64,
    rng: &mut Rng,
) -> Result<(Var<'t, T>, Vec<ElboGraph<'t, T>>)> {
    if batches.is_empty() {
        return Err(Error::Invalid("loss_ind needs at least one domain batch".into()));
    }
    let prior_z = DiagGaussian::standard(arch.content_dim);
    let mut total: Option<Var<'t, T>> = None;
    let mut graphs = Vec::with_capacity(batches.len());
    for b in batches {
        let g = elbo_graph(arch, params, b.domain, &b.images, &b.style_prior, &prior_z, samples, sigma_x, rng)?;
        let term = g.elbo.mean().neg();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
        graphs.push(g);
    }
    Ok((total.expect("non-empty"), graphs))
}

/// One translated batch and the latents that produced it.
pub struct TranslatedBatch<'a, 't, T: Scalar> {
    pub target: &'a str,
    pub images: Var<'t, T>,
    pub style: Var<'t, T>,
    pub content: Var<'t, T>,
}

/// Latent reconstruction: re-encode each translated batch with the source
/// content head and the target style head and penalize squared distance to
/// the latents that generated it.
pub fn loss_rec<'a, 't, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    source: &str,
    translated: &[TranslatedBatch<'a, 't, T>],
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for t in translated {
        let b = t.images.shape()[0];
        if t.style.shape() != [b, arch.style_dim] || t.content.shape() != [b, arch.content_dim] {
            return Err(Error::Invalid(format!(
                "loss_rec: {b} images for `{}` but latents {:?} / {:?}",
                t.target,
                t.style.shape(),
                t.content.shape()
            )));
        }
        let src = encode_graph(arch, params, source, &t.images)?;
        let tgt = encode_graph(arch, params, t.target, &t.images)?;
        let z = sample_head(&src.content_mean, &src.content_log_var, rng)?;
        let y = sample_head(&tgt.style_mean, &tgt.style_log_var, rng)?;
        let content_err = z.sub(&t.content.detach())?.square().sum_per_row()?.mean();
        let style_err = y.sub(&t.style.detach())?.square().sum_per_row()?.mean();
        let term = content_err.add(&style_err)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invalid("loss_rec needs at least one translated batch".into()))
}

fn nonempty<T: Scalar>(v: &Var<'_, T>, what: &str) -> Result<()> {
    if v.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid(format!("empty {what} batch")));
    }
    Ok(())
}

/// Non-saturating generator term `mean(-log D(fake))` for one target.
///
/// The discriminator parameters are detached, so this term never produces
/// discriminator gradients.
pub fn adv_generator_term<'t, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    target: &str,
    fake: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    nonempty(fake, "fake")?;
    let frozen = params.detached(|n| Role::of(n) == Some(Role::Discriminator));
    let d = clamp_prob(discriminate_graph(arch, &frozen, target, fake)?);
    Ok(d.log()?.mean().neg())
}

/// `mean(-log D(real)) + mean(-log(1 - D(fake)))` for one target.
///
/// `fake` is detached, so this term never produces generator gradients.
pub fn adv_discriminator_term<'t, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    target: &str,
    real: &Var<'t, T>,
    fake: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    nonempty(real, "real")?;
    nonempty(fake, "fake")?;
    let d_real = clamp_prob(discriminate_graph(arch, params, target, real)?);
    let d_fake = clamp_prob(discriminate_graph(arch, params, target, &fake.detach())?);
    let real_term = d_real.log()?.mean().neg();
    let fake_term = d_fake.neg().add_scalar(T::one()).log()?.mean().neg();
    Ok(real_term.add(&fake_term)?)
}

fn clamp_prob<'t, T: Scalar>(d: Var<'t, T>) -> Var<'t, T> {
    d.clamp(T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS))
}

/// Per-target real and translated batches for [`loss_adv`].
pub struct AdvPair<'a, 't, T: Scalar> {
    pub target: &'a str,
    pub real: Var<'t, T>,
    pub fake: Var<'t, T>,
}

/// `(gen_term, disc_term)` summed over targets.
pub fn loss_adv<'a, 't, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    pairs: &[AdvPair<'a, 't, T>],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let mut gen: Option<Var<'t, T>> = None;
    let mut disc: Option<Var<'t, T>> = None;
    for p in pairs {
        let g = adv_generator_term(arch, params, p.target, &p.fake)?;
        let d = adv_discriminator_term(arch, params, p.target, &p.real, &p.fake)?;
        gen = Some(match gen {
            Some(acc) => acc.add(&g)?,
            None => g,
        });
        disc = Some(match disc {
            Some(acc) => acc.add(&d)?,
            None => d,
        });
    }
    match (gen, disc) {
        (Some(g), Some(d)) => Ok((g, d)),
        _ => Err(Error::Invalid("loss_adv needs at least one target".into())),
    }
}

/// Weights of the three generator-side terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ind: f64,
    pub rec: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ind: 1.0, rec: 10.0, adv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ind", self.ind), ("rec", self.rec), ("adv", self.adv)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Invalid(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ind: f64,
    pub l_rec: f64,
    pub l_adv_gen: f64,
    pub l_adv_disc: f64,
    pub total_gen: f64,
    pub weights: LossWeights,
}

impl LossReport {
    /// `γ_ind·l_ind + γ_rec·l_rec + γ_adv·l_adv_gen` recomputed from the fields.
    pub fn recombined(&self) -> f64 {
        self.weights.ind * self.l_ind + self.weights.rec * self.l_rec + self.weights.adv * self.l_adv_gen
    }
}

/// Weighted generator objective. Terms whose weight is zero may be `None`
/// (not computed); they contribute nothing and report as 0.
pub fn total_generator_loss<'t, T: Scalar>(
    weights: LossWeights,
    l_ind: Option<Var<'t, T>>,
    l_rec: Option<Var<'t, T>>,
    l_adv_gen: Option<Var<'t, T>>,
) -> Result<(Option<Var<'t, T>>, LossReport)> {
    weights.validate()?;
    let mut total: Option<Var<'t, T>> = None;
    let mut values = [0.0; 3];
    for (i, (w, term)) in [(weights.ind, l_ind), (weights.rec, l_rec), (weights.adv, l_adv_gen)].into_iter().enumerate() {
        let Some(term) = term else {
            if w > 0.0 {
                return Err(Error::Invalid("a loss term with positive weight was not computed".into()));
            }
            continue;
        };
        values[i] = term.item().to_f64().unwrap();
        if w == 0.0 {
            continue;
        }
        let scaled = term.scale(T::lit(w));
        total = Some(match total {
            Some(acc) => acc.add(&scaled)?,
            None => scaled,
        });
    }
    let total_gen = total.as_ref().map_or(0.0, |t| t.item().to_f64().unwrap());
    let report = LossReport { l_ind: values[0], l_rec: values[1], l_adv_gen: values[2], l_adv_disc: 0.0, total_gen, weights };
    Ok((total, report))
}
