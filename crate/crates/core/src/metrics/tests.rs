use super::*;
use crate::data_synth::{generate_dataset, render, SceneSpec, ShapeKind, StyleFamily, StyleSpec, Texture};
use crate::testutil::random_images;

const SIZE: usize = 32;

fn solid(v: f32) -> Tensor<f32> {
    Tensor::full(vec![SIZE, SIZE, 3], v)
}

fn batches(n: usize, seed: u64) -> Vec<ImageBatch> {
    StyleFamily::ALL.iter().map(|f| generate_dataset(*f, n, seed, SIZE).unwrap()).collect()
}

#[test]
fn diversity_of_identical_images_is_zero() {
    let img = random_images(1, SIZE, 1);
    assert_eq!(diversity(&[img.clone(), img.clone(), img]).unwrap(), 0.0);
}

#[test]
fn black_white_pair_has_maximal_diversity() {
    let d = diversity(&[solid(0.0), solid(1.0)]).unwrap();
    assert!((d - 1.0).abs() < 1e-12, "{d}");
}

#[test]
fn diversity_is_permutation_invariant() {
    let imgs: Vec<_> = (0..6).map(|i| random_images(1, SIZE, i)).collect();
    let mut rev = imgs.clone();
    rev.reverse();
    rev.swap(1, 4);
    let (a, b) = (diversity(&imgs).unwrap(), diversity(&rev).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!(a > 0.0 && a <= 1.0);
}

#[test]
fn diversity_matches_a_direct_pair_oracle() {
    let (a, b) = (random_images(1, SIZE, 3), random_images(1, SIZE, 4));
    // 4×4 block means of luminance, then RMS difference over the 64 cells.
    let grid = |t: &Tensor<f32>| {
        let d = t.data();
        let mut g = [0.0f64; 64];
        for r in 0..SIZE {
            for c in 0..SIZE {
                let p = &d[(r * SIZE + c) * 3..];
                g[(r / 4) * 8 + c / 4] += (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 16.0;
            }
        }
        g
    };
    let (ga, gb) = (grid(&a), grid(&b));
    let want = (ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 64.0).sqrt();
    assert!((diversity(&[a, b]).unwrap() - want).abs() < 1e-12);
}

#[test]
fn diversity_needs_two_images() {
    assert!(diversity(&[solid(0.5)]).is_err());
    assert!(diversity(&[]).is_err());
}

#[test]
fn real_images_score_as_their_domain() {
    let train = batches(300, 31);
    let clf = DomainClassifier::fit(&train.iter().collect::<Vec<_>>()).unwrap();
    let test = batches(200, 32);
    for b in &test {
        let own = domain_score(&b.images, &b.domains[0], &clf).unwrap();
        assert!(own >= 0.99, "{}: {own}", b.domains[0]);
    }
    let ink_as_paint = domain_score(&test[0].images, "paint", &clf).unwrap();
    assert!(ink_as_paint <= 0.01, "{ink_as_paint}");
}

#[test]
fn gray_images_get_a_fixed_label() {
    let train = batches(100, 5);
    let clf = DomainClassifier::fit(&train.iter().collect::<Vec<_>>()).unwrap();
    let labels: Vec<_> = (0..=10).map(|i| clf.predict(&solid(i as f32 / 10.0)).unwrap().to_string()).collect();
    // Light grays sit near the ink ground; dark ones are closer in luma to
    // the darkest chromatic ground than to ink.
    let want: Vec<_> = (0..=10).map(|i| if i >= 7 { "ink" } else { "neon" }).collect();
    assert_eq!(labels, want);
    let again: Vec<_> = (0..=10).map(|i| clf.predict(&solid(i as f32 / 10.0)).unwrap().to_string()).collect();
    assert_eq!(labels, again);
}

#[test]
fn untrained_classifier_is_rejected() {
    let clf = DomainClassifier::default();
    assert!(domain_score(&solid(0.5), "ink", &clf).is_err());
    let train = batches(20, 5);
    let clf = DomainClassifier::fit(&train.iter().collect::<Vec<_>>()).unwrap();
    assert!(matches!(domain_score(&solid(0.5), "sepia", &clf), Err(Error::UnknownDomain(_))));
    assert!(DomainClassifier::fit(&[&train[0]]).is_err());
    assert!(DomainClassifier::fit(&[&train[0], &train[0]]).is_err());
}

#[test]
fn recolored_source_has_unit_iou() {
    let scene = SceneSpec { shape: ShapeKind::Square, center: (14.0, 18.0), radius: 8.0, rotation: 0.4 };
    let style = StyleSpec {
        domain_id: "paint".into(),
        foreground: [0.95, 0.4, 0.1],
        background: [0.1, 0.15, 0.4],
        outline: [0.95, 0.4, 0.1],
        texture: Texture::Flat,
        stroke: 0.0,
    };
    let r = render(&scene, &style, SIZE).unwrap();
    let img = Tensor::new(vec![1, SIZE, SIZE, 3], r.pixels).unwrap();
    assert_eq!(content_iou(&img, &[r.mask], &MaskExtractor::default()).unwrap(), 1.0);
}

#[test]
fn disjoint_masks_have_zero_iou() {
    let mut a = vec![0u8; 16];
    let mut b = vec![0u8; 16];
    a[..8].fill(1);
    b[8..].fill(1);
    assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
    assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
    assert!(mask_iou(&a, &b[..4]).is_err());
}

#[test]
fn content_iou_rejects_shape_mismatch() {
    let imgs = random_images(2, SIZE, 0);
    let e = MaskExtractor::default();
    assert!(content_iou(&imgs, &[vec![0; SIZE * SIZE]], &e).is_err());
    assert!(content_iou(&imgs, &[vec![0; 10], vec![0; 10]], &e).is_err());
}

#[test]
fn calibrated_extractor_recovers_real_masks() {
    let cal = batches(100, 41);
    let (e, cal_iou) = MaskExtractor::calibrate(&cal.iter().collect::<Vec<_>>()).unwrap();
    assert!(cal_iou >= 0.9, "{cal_iou}");
    for b in batches(100, 42) {
        let iou = content_iou(&b.images, b.masks.as_ref().unwrap(), &e).unwrap();
        assert!(iou >= 0.9, "{}: {iou}", b.domains[0]);
    }
}

#[test]
fn uniform_image_yields_empty_mask() {
    assert!(MaskExtractor::default().extract(&solid(0.4)).unwrap().iter().all(|m| *m == 0));
}

#[test]
fn report_labels_the_proxy() {
    let r = EvalReport { target: "paint".into(), diversity: 0.1, domain_score: 0.95, content_iou: 0.8, elbo_test: None, n: 200 };
    assert!(r.to_text().contains("diversity-proxy = 0.100000"));
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"diversity-proxy\":0.1"));
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
}
