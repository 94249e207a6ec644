//! End-to-end evaluation of a trained bundle on held-out images.

use crate::autodiff::Tensor;
use crate::data_synth::ImageBatch;
use crate::error::{Error, Result};
use crate::metrics::{content_iou, diversity, domain_score, DomainClassifier, EvalReport, MaskExtractor};
use crate::networks::ModelBundle;
use crate::rng;
use crate::trainer::held_out_neg_elbo;
use crate::translation::{edit_styles, translate};

/// Style samples per source image when measuring diversity.
pub const DIVERSITY_SAMPLES: usize = 4;
/// Source images used for the diversity estimate.
pub const DIVERSITY_SOURCES: usize = 16;
/// Monte Carlo draws for the held-out ELBO.
pub const ELBO_SAMPLES: usize = 16;

/// Metric instruments plus how well each passed its own calibration check.
#[derive(Clone, Debug)]
pub struct Instruments {
    pub classifier: DomainClassifier,
    pub extractor: MaskExtractor,
    /// Classifier accuracy on the `check` batches.
    pub classifier_accuracy: f64,
    /// Extractor mean IoU against ground truth on the `check` batches.
    pub extractor_iou: f64,
}

impl Instruments {
    /// Fits the classifier and extractor on `fit` and scores them on `check`.
    pub fn calibrate(fit: &[&ImageBatch], check: &[&ImageBatch]) -> Result<Self> {
        let classifier = DomainClassifier::fit(fit)?;
        let (extractor, _) = MaskExtractor::calibrate(fit)?;
        let classifier_accuracy = classifier_accuracy(&classifier, check)?;
        let mut total = 0.0;
        let mut n = 0usize;
        for b in check {
            let masks = b.masks.as_ref().ok_or_else(|| Error::Invalid("extractor check needs ground-truth masks".into()))?;
            total += content_iou(&b.images, masks, &extractor)? * b.len() as f64;
            n += b.len();
        }
        Ok(Self { classifier, extractor, classifier_accuracy, extractor_iou: total / n.max(1) as f64 })
    }
}

/// Fraction of images whose predicted domain matches their label.
pub fn classifier_accuracy(classifier: &DomainClassifier, batches: &[&ImageBatch]) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for b in batches {
        for i in 0..b.len() {
            hits += (classifier.predict(&b.image(i))? == b.domains[i]) as usize;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no images to classify".into()));
    }
    Ok(hits as f64 / n as f64)
}

/// Translates the first `n` images of `source` (which must carry masks) to
/// `target`, each with its own stream `(seed, "eval/translate", i)`.
pub fn translate_all(bundle: &ModelBundle, source: &ImageBatch, target: &str, n: usize, seed: u64) -> Result<Tensor<f32>> {
    if n == 0 || n > source.len() {
        return Err(Error::Invalid(format!("cannot evaluate {n} of {} source images", source.len())));
    }
    let [_, h, w, c] = bundle.arch.image_shape(1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, "eval/translate", i as u64);
        out.push(translate(bundle, &source.image(i), target, &mut r)?.image.reshaped(vec![1, h, w, c])?);
    }
    Tensor::stack_rows(&out).map_err(Into::into)
}

/// Full report for one target. `target_test` enables the held-out ELBO of the
/// target domain's own autoencoder.
pub fn evaluate(
    bundle: &ModelBundle,
    instruments: &Instruments,
    source: &ImageBatch,
    target: &str,
    n: usize,
    seed: u64,
    target_test: Option<(&ImageBatch, f64)>,
) -> Result<EvalReport> {
    bundle.target(target)?;
    let masks = source.masks.as_ref().ok_or_else(|| Error::Invalid("source images need ground-truth masks".into()))?;
    let translated = translate_all(bundle, source, target, n, seed)?;
    let score = domain_score(&translated, target, &instruments.classifier)?;
    let iou = content_iou(&translated, &masks[..n], &instruments.extractor)?;

    let k = n.min(DIVERSITY_SOURCES);
    let mut spread = 0.0;
    for i in 0..k {
        let mut r = rng::stream(seed, "eval/styles", i as u64);
        let set: Vec<_> = edit_styles(bundle, &source.image(i), target, DIVERSITY_SAMPLES, &mut r)?.into_iter().map(|t| t.image).collect();
        spread += diversity(&set)?;
    }

    let elbo_test = match target_test {
        Some((batch, sigma_x)) => Some(-held_out_neg_elbo(bundle, target, &batch.images, ELBO_SAMPLES, sigma_x, seed)?),
        None => None,
    };
    Ok(EvalReport { target: target.to_string(), diversity: spread / k as f64, domain_score: score, content_iou: iou, elbo_test, n })
}
