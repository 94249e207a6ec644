//! Source-to-target translation and its multi-style, multi-content and
//! mixed-domain variants.
//!
//! Every operation draws from the caller's rng in one fixed order: all
//! style draws first (one uniform to pick a mixture component, then
//! `D_s` normals each), then all content draws (`D_c` normals each). A
//! single-domain target is a one-hot mixture, so `translate` and a one-hot
//! `mixed_translate` consume identical draws.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::distributions::{validate_weights, DiagGaussian, MixturePrior};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StyleSource {
    Prior { domain: String },
    Mixture { weights: Vec<(String, f64)>, component: String },
    Posterior { image: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ContentSource {
    Posterior { image: usize },
    Prior,
}

/// The latents behind one output image and where they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub y_source: StyleSource,
    pub z_source: ContentSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Domain(String),
    /// One weight per target domain, in bundle order.
    Weights(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub target: Target,
    pub n_style_samples: usize,
    pub n_content_samples: usize,
    pub seed: u64,
}

impl TranslationRequest {
    pub fn validate(&self, bundle: &ModelBundle) -> Result<()> {
        if self.n_style_samples == 0 || self.n_content_samples == 0 {
            return Err(Error::Invalid("sample counts must be at least 1".into()));
        }
        style_prior(bundle, &self.target).map(|_| ())
    }
}

/// One decoded image with its latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    /// `[H, W, C]` in [0, 1].
    pub image: Tensor<f32>,
    pub latents: LatentPair,
    /// Domain whose decoder rendered the image.
    pub decoder: String,
}

/// Mixture over target style priors plus the provenance of its weights.
/// Weights with a single nonzero entry are tagged as a plain prior draw.
struct StylePrior {
    mixture: MixturePrior,
    ids: Vec<String>,
    one_hot: bool,
}

fn style_prior(bundle: &ModelBundle, target: &Target) -> Result<StylePrior> {
    let targets = bundle.targets();
    let weights = match target {
        Target::Domain(id) => {
            bundle.target(id)?;
            targets.iter().map(|d| if &d.id == id { 1.0 } else { 0.0 }).collect()
        }
        Target::Weights(w) => {
            if w.len() != targets.len() {
                return Err(Error::Invalid(format!("expected {} weights (one per target), got {}", targets.len(), w.len())));
            }
            w.clone()
        }
    };
    validate_weights(&weights)?;
    let one_hot = weights.iter().filter(|w| **w > 0.0).count() == 1;
    let components = targets.iter().map(|d| d.style_prior()).collect();
    Ok(StylePrior {
        mixture: MixturePrior::new(components, weights)?,
        ids: targets.iter().map(|d| d.id.clone()).collect(),
        one_hot,
    })
}

/// Dense target weights from `(domain, weight)` pairs; unnamed targets get 0.
pub fn weights_for(bundle: &ModelBundle, pairs: &[(String, f64)]) -> Result<Vec<f64>> {
    let mut w = vec![0.0; bundle.targets().len()];
    for (id, v) in pairs {
        let i = bundle.targets().iter().position(|d| &d.id == id).ok_or_else(|| Error::UnknownDomain(id.clone()))?;
        w[i] += v;
    }
    validate_weights(&w)?;
    Ok(w)
}

impl StylePrior {
    fn draw(&self, rng: &mut Rng) -> (Vec<f64>, StyleSource) {
        let d = self.mixture.sample(rng);
        let source = if self.one_hot {
            StyleSource::Prior { domain: self.ids[d.component].clone() }
        } else {
            StyleSource::Mixture {
                weights: self.ids.iter().cloned().zip(self.mixture.weights().iter().copied()).collect(),
                component: self.ids[d.component].clone(),
            }
        };
        (d.value, source)
    }

    fn decoder(&self) -> &str {
        &self.ids[self.mixture.dominant()]
    }
}

fn source_content(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<DiagGaussian> {
    let shape = bundle.arch.image_shape(1);
    let x = match x.shape() {
        s if s == shape => x.clone(),
        s if s == &shape[1..] => x.clone().reshaped(shape.to_vec())?,
        s => return Err(Error::Invalid(format!("expected one image of shape {:?}, got {s:?}", &shape[1..]))),
    };
    Ok(bundle.encode(&bundle.source().id, &x)?.remove(0).content)
}

fn rows(v: &[Vec<f64>]) -> Result<Tensor<f32>> {
    let d = v[0].len();
    Ok(Tensor::new(vec![v.len(), d], v.iter().flatten().map(|x| *x as f32).collect())?)
}

/// Draws `l` styles, then `m` contents, and decodes the `l·m` pairs (style-major).
fn generate(bundle: &ModelBundle, x: &Tensor<f32>, target: &Target, l: usize, m: usize, rng: &mut Rng) -> Result<Vec<Translation>> {
    if l == 0 || m == 0 {
        return Err(Error::Invalid("sample counts must be at least 1".into()));
    }
    let prior = style_prior(bundle, target)?;
    let content = source_content(bundle, x)?;
    let styles: Vec<_> = (0..l).map(|_| prior.draw(rng)).collect();
    let contents: Vec<_> = (0..m).map(|_| content.sample(rng)).collect();
    let mut ys = Vec::with_capacity(l * m);
    let mut zs = Vec::with_capacity(l * m);
    for (y, _) in &styles {
        for z in &contents {
            ys.push(y.clone());
            zs.push(z.clone());
        }
    }
    let decoder = prior.decoder().to_string();
    let images = bundle.decode(&decoder, &rows(&ys)?, &rows(&zs)?)?;
    let [_, h, w, c] = bundle.arch.image_shape(1);
    let mut out = Vec::with_capacity(l * m);
    for (i, (y, z)) in ys.into_iter().zip(zs).enumerate() {
        out.push(Translation {
            image: images.rows(i, 1)?.reshaped(vec![h, w, c])?,
            latents: LatentPair { y, z, y_source: styles[i / m].1.clone(), z_source: ContentSource::Posterior { image: 0 } },
            decoder: decoder.clone(),
        });
    }
    Ok(out)
}

/// `g_T(y_T, z_S)` with `y_T ~ N(α_T, I)` and `z_S ~ q_S(z | x_S)`.
pub fn translate(bundle: &ModelBundle, x: &Tensor<f32>, target: &str, rng: &mut Rng) -> Result<Translation> {
    Ok(generate(bundle, x, &Target::Domain(target.to_string()), 1, 1, rng)?.remove(0))
}

/// `l` independent styles over one shared content draw.
pub fn edit_styles(bundle: &ModelBundle, x: &Tensor<f32>, target: &str, l: usize, rng: &mut Rng) -> Result<Vec<Translation>> {
    generate(bundle, x, &Target::Domain(target.to_string()), l, 1, rng)
}

/// `m` independent content draws under one shared style.
pub fn edit_contents(bundle: &ModelBundle, x: &Tensor<f32>, target: &str, m: usize, rng: &mut Rng) -> Result<Vec<Translation>> {
    generate(bundle, x, &Target::Domain(target.to_string()), 1, m, rng)
}

/// Style drawn from the weighted mixture of target priors, rendered by the
/// decoder of the largest weight (lowest target index on ties).
pub fn mixed_translate(bundle: &ModelBundle, x: &Tensor<f32>, weights: &[f64], rng: &mut Rng) -> Result<Translation> {
    Ok(generate(bundle, x, &Target::Weights(weights.to_vec()), 1, 1, rng)?.remove(0))
}

/// Runs a request with the rng it names: `l` styles × `m` contents.
pub fn run_request(bundle: &ModelBundle, x: &Tensor<f32>, req: &TranslationRequest) -> Result<Vec<Translation>> {
    req.validate(bundle)?;
    let mut rng = request_rng(req.seed);
    generate(bundle, x, &req.target, req.n_style_samples, req.n_content_samples, &mut rng)
}

/// The stream every request-level entry point samples from.
pub fn request_rng(seed: u64) -> Rng {
    crate::rng::stream(seed, "translate", 0)
}
