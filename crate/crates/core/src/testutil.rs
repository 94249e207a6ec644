use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::distributions::{make_alpha, DomainSpec};
use crate::networks::{ArchConfig, ModelBundle};
use crate::rng;

pub fn tiny_arch(size: usize) -> ArchConfig {
    ArchConfig { image_size: size, widths: vec![4, 6], disc_widths: vec![4, 4], style_dim: 3, content_dim: 4, ..Default::default() }
}

pub fn domains(ids: &[&str], style_dim: usize) -> Vec<DomainSpec> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| DomainSpec { id: id.to_string(), alpha: make_alpha(i, style_dim, 3.0).unwrap(), is_source: i == 0 })
        .collect()
}

pub fn tiny_bundle(size: usize, ids: &[&str], seed: u64) -> ModelBundle {
    let arch = tiny_arch(size);
    let d = domains(ids, arch.style_dim);
    ModelBundle::init(arch, d, seed).unwrap()
}

pub fn random_images(b: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, "test-images", 0);
    let n = b * size * size * 3;
    Tensor::new(vec![b, size, size, 3], (0..n).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Pushes every encoder log-variance bias to `value`, making posteriors
/// (nearly) point masses when `value` is very negative.
pub fn set_log_var_bias(bundle: &mut ModelBundle, value: f32) {
    let (ds, dc) = (bundle.arch.style_dim, bundle.arch.content_dim);
    let names: Vec<String> = bundle.params.names().filter(|n| n.ends_with("/style/b") || n.ends_with("/content/b")).cloned().collect();
    for n in names {
        let d = if n.ends_with("/style/b") { ds } else { dc };
        let t = bundle.params.get_mut(&n).unwrap();
        for v in &mut t.data_mut()[d..] {
            *v = value;
        }
    }
}
