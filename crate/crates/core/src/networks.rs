//! Per-domain encoders and decoders, per-target discriminators.
//!
//! Parameters live in a [`ParamStore`] keyed `"{domain}/{enc|dec|disc}/{layer}/{w|b}"`.
//! Each forward pass binds the store onto a fresh tape, choosing which
//! parameters are differentiable for that pass.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::distributions::{DiagGaussian, DomainSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Layer sizes shared by every network in a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Feature widths of the stride-2 blocks; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    pub style_dim: usize,
    pub content_dim: usize,
    /// Start every domain's encoder (and decoder) from the same weights.
    pub shared_init: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            widths: vec![16, 32, 32],
            disc_widths: vec![16, 32, 32],
            style_dim: 8,
            content_dim: 16,
            shared_init: false,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.style_dim == 0 || self.content_dim == 0 || self.image_size == 0 {
            return Err(Error::Invalid("zero-sized architecture".into()));
        }
        // stride-2 blocks either divide the image evenly or bottom out at 1x1
        if !self.image_size.is_power_of_two() {
            return Err(Error::Invalid(format!("image size {} is not a power of two", self.image_size)));
        }
        for widths in [&self.widths, &self.disc_widths] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::Invalid(format!("block widths {widths:?}")));
            }
        }
        Ok(())
    }

    /// Spatial extent after the encoder's stride-2 blocks.
    fn base(&self, blocks: usize) -> usize {
        (self.image_size >> blocks).max(1)
    }

    pub fn image_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.image_size, self.image_size, self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Which parameter family a name belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
    Discriminator,
}

impl Role {
    fn tag(self) -> &'static str {
        match self {
            Role::Encoder => "enc",
            Role::Decoder => "dec",
            Role::Discriminator => "disc",
        }
    }

    pub fn of(name: &str) -> Option<Role> {
        match name.split('/').nth(1)? {
            "enc" => Some(Role::Encoder),
            "dec" => Some(Role::Decoder),
            "disc" => Some(Role::Discriminator),
            _ => None,
        }
    }

    pub fn is_generator(self) -> bool {
        !matches!(self, Role::Discriminator)
    }
}

fn pname(domain: &str, role: Role, layer: &str, kind: &str) -> String {
    format!("{domain}/{}/{layer}/{kind}", role.tag())
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Binds every parameter onto `tape`; those for which `trainable`
    /// returns true become differentiable leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Order-sensitive hash of every value, for change detection.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.tensors {
            if !filter(name) {
                continue;
            }
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.to_f64().unwrap().to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

/// A [`ParamStore`] bound to one tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }

    /// Same bindings with the selected parameters cut off from the graph.
    pub fn detached(&self, filter: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), if filter(k) { v.detach() } else { *v }))
            .collect();
        Bound { vars }
    }

    fn layer(&self, domain: &str, role: Role, layer: &str) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((self.var(&pname(domain, role, layer, "w"))?, self.var(&pname(domain, role, layer, "b"))?))
    }
}

fn glorot<T: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn add_conv<T: Scalar>(store: &mut ParamStore<T>, prefix: (&str, Role), layer: &str, cin: usize, cout: usize, rng: &mut Rng) {
    let w = glorot(vec![3, 3, cin, cout], 9 * cin, 9 * cout, rng);
    store.insert(pname(prefix.0, prefix.1, layer, "w"), w);
    store.insert(pname(prefix.0, prefix.1, layer, "b"), Tensor::zeros(vec![cout]));
}

fn add_linear<T: Scalar>(store: &mut ParamStore<T>, prefix: (&str, Role), layer: &str, fin: usize, fout: usize, rng: &mut Rng) {
    store.insert(pname(prefix.0, prefix.1, layer, "w"), glorot(vec![fin, fout], fin, fout, rng));
    store.insert(pname(prefix.0, prefix.1, layer, "b"), Tensor::zeros(vec![fout]));
}

/// Fresh encoder parameters for `domain`.
pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, arch: &ArchConfig, domain: &str, rng: &mut Rng) {
    let p = (domain, Role::Encoder);
    let mut cin = arch.channels;
    for (i, &w) in arch.widths.iter().enumerate() {
        add_conv(store, p, &format!("conv{i}"), cin, w, rng);
        cin = w;
    }
    let base = arch.base(arch.widths.len());
    let flat = base * base * cin;
    add_linear(store, p, "style", flat, 2 * arch.style_dim, rng);
    add_linear(store, p, "content", flat, 2 * arch.content_dim, rng);
}

pub fn init_decoder<T: Scalar>(store: &mut ParamStore<T>, arch: &ArchConfig, domain: &str, rng: &mut Rng) {
    let p = (domain, Role::Decoder);
    let blocks = arch.widths.len();
    let base = arch.base(blocks);
    let top = arch.widths[blocks - 1];
    add_linear(store, p, "fc", arch.style_dim + arch.content_dim, base * base * top, rng);
    for i in (0..blocks).rev() {
        let cout = if i == 0 { arch.channels } else { arch.widths[i - 1] };
        add_conv(store, p, &format!("up{i}"), arch.widths[i], cout, rng);
    }
}

pub fn init_discriminator<T: Scalar>(store: &mut ParamStore<T>, arch: &ArchConfig, domain: &str, rng: &mut Rng) {
    let p = (domain, Role::Discriminator);
    let mut cin = arch.channels;
    for (i, &w) in arch.disc_widths.iter().enumerate() {
        add_conv(store, p, &format!("conv{i}"), cin, w, rng);
        cin = w;
    }
    let base = arch.base(arch.disc_widths.len());
    add_linear(store, p, "out", base * base * cin, 1, rng);
}

/// Graph-level posterior heads for a batch.
pub struct EncoderOutput<'t, T: Scalar> {
    pub style_mean: Var<'t, T>,
    pub style_log_var: Var<'t, T>,
    pub content_mean: Var<'t, T>,
    pub content_log_var: Var<'t, T>,
}

fn check_images<T: Scalar>(arch: &ArchConfig, x: &Var<'_, T>, op: &str) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != arch.image_shape(1)[1..] {
        return Err(Error::Invalid(format!(
            "{op}: expected images [B, {}, {}, {}], got {s:?}",
            arch.image_size, arch.image_size, arch.channels
        )));
    }
    Ok(s[0])
}

fn trunk<'t, T: Scalar>(params: &Bound<'t, T>, domain: &str, role: Role, blocks: usize, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let slope = T::lit(LEAKY_SLOPE);
    let mut h = *x;
    for i in 0..blocks {
        let (w, b) = params.layer(domain, role, &format!("conv{i}"))?;
        h = h.conv2d(&w, Some(&b), 2, 1)?.leaky_relu(slope);
    }
    let batch = h.shape()[0];
    let flat = h.numel() / batch;
    Ok(h.reshape(&[batch, flat])?)
}

fn linear<'t, T: Scalar>(params: &Bound<'t, T>, domain: &str, role: Role, layer: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (w, b) = params.layer(domain, role, layer)?;
    Ok(x.matmul(&w)?.add(&b)?)
}

/// Posterior heads q(y|x), q(z|x) as `[B, D]` mean and log-variance.
pub fn encode_graph<'t, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    domain: &str,
    x: &Var<'t, T>,
) -> Result<EncoderOutput<'t, T>> {
    check_images(arch, x, "encode")?;
    let h = trunk(params, domain, Role::Encoder, arch.widths.len(), x)?;
    let style = linear(params, domain, Role::Encoder, "style", &h)?;
    let content = linear(params, domain, Role::Encoder, "content", &h)?;
    let (ds, dc) = (arch.style_dim, arch.content_dim);
    Ok(EncoderOutput {
        style_mean: style.slice(1, 0, ds)?,
        style_log_var: style.slice(1, ds, ds)?,
        content_mean: content.slice(1, 0, dc)?,
        content_log_var: content.slice(1, dc, dc)?,
    })
}

/// g(y, z): `[B, D_s]`, `[B, D_c]` → `[B, H, W, C]` in (0, 1).
pub fn decode_graph<'t, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    domain: &str,
    y: &Var<'t, T>,
    z: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ys, zs) = (y.shape(), z.shape());
    if ys.len() != 2 || zs.len() != 2 || ys[1] != arch.style_dim || zs[1] != arch.content_dim || ys[0] != zs[0] {
        return Err(Error::Invalid(format!(
            "decode: expected y [B, {}] and z [B, {}], got {ys:?} and {zs:?}",
            arch.style_dim, arch.content_dim
        )));
    }
    let slope = T::lit(LEAKY_SLOPE);
    let blocks = arch.widths.len();
    let base = arch.base(blocks);
    let latent = Var::concat(&[*y, *z], 1)?;
    let mut h = linear(params, domain, Role::Decoder, "fc", &latent)?
        .leaky_relu(slope)
        .reshape(&[ys[0], base, base, arch.widths[blocks - 1]])?;
    for i in (0..blocks).rev() {
        let (w, b) = params.layer(domain, Role::Decoder, &format!("up{i}"))?;
        if h.shape()[1] < arch.image_size {
            h = h.upsample2x()?;
        }
        h = h.conv2d(&w, Some(&b), 1, 1)?;
        h = if i == 0 { h.sigmoid() } else { h.leaky_relu(slope) };
    }
    Ok(h)
}

/// D(x) ∈ (0, 1) per sample, shape `[B]`.
pub fn discriminate_graph<'t, T: Scalar>(
    arch: &ArchConfig,
    params: &Bound<'t, T>,
    domain: &str,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let batch = check_images(arch, x, "discriminate")?;
    let h = trunk(params, domain, Role::Discriminator, arch.disc_widths.len(), x)?;
    Ok(linear(params, domain, Role::Discriminator, "out", &h)?.sigmoid().reshape(&[batch])?)
}

/// All parameters plus domain descriptors.
///
/// `domains[0]` is the source; every other domain is a translation target
/// and owns a discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub domains: Vec<DomainSpec>,
    pub params: ParamStore<f32>,
}

impl ModelBundle {
    /// Freshly initialized bundle; every network draws from its own stream.
    pub fn init(arch: ArchConfig, domains: Vec<DomainSpec>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if domains.len() < 2 || !domains[0].is_source || domains[1..].iter().any(|d| d.is_source) {
            return Err(Error::Invalid("need one source domain first, then at least one target".into()));
        }
        for (i, d) in domains.iter().enumerate() {
            if d.alpha.len() != arch.style_dim {
                return Err(Error::Invalid(format!("alpha of `{}` has dimension {}", d.id, d.alpha.len())));
            }
            if d.id.is_empty() || d.id.contains('/') {
                return Err(Error::Invalid(format!("bad domain id `{}`", d.id)));
            }
            for other in &domains[..i] {
                if other.id == d.id {
                    return Err(Error::Invalid(format!("duplicate domain `{}`", d.id)));
                }
                if other.alpha == d.alpha {
                    return Err(Error::Invalid(format!("domains `{}` and `{}` share alpha", other.id, d.id)));
                }
            }
        }
        let mut params = ParamStore::new();
        for d in &domains {
            let key = |net: &str| if arch.shared_init { format!("init/{net}") } else { format!("init/{}/{net}", d.id) };
            init_encoder(&mut params, &arch, &d.id, &mut rng::stream(seed, &key("enc"), 0));
            init_decoder(&mut params, &arch, &d.id, &mut rng::stream(seed, &key("dec"), 0));
            if !d.is_source {
                init_discriminator(&mut params, &arch, &d.id, &mut rng::stream(seed, &format!("init/{}/disc", d.id), 0));
            }
        }
        Ok(Self { arch, domains, params })
    }

    pub fn source(&self) -> &DomainSpec {
        &self.domains[0]
    }

    pub fn targets(&self) -> &[DomainSpec] {
        &self.domains[1..]
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id).ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn target(&self, id: &str) -> Result<&DomainSpec> {
        self.targets().iter().find(|d| d.id == id).ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    /// Value-level posteriors for a batch of images `[B, H, W, C]`.
    pub fn encode(&self, domain: &str, images: &Tensor<f32>) -> Result<Vec<Posterior>> {
        self.domain(domain)?;
        let tape = Tape::new();
        let params = self.params.bind(&tape, |_| false);
        let out = encode_graph(&self.arch, &params, domain, &tape.constant(images.clone()))?;
        let rows = |v: &Var<'_, f32>| -> Vec<Vec<f64>> {
            let t = v.tensor();
            let d = t.shape()[1];
            t.data().chunks(d).map(|r| r.iter().map(|x| *x as f64).collect()).collect()
        };
        let (sm, sl, cm, cl) = (rows(&out.style_mean), rows(&out.style_log_var), rows(&out.content_mean), rows(&out.content_log_var));
        (0..sm.len())
            .map(|i| {
                Ok(Posterior {
                    style: DiagGaussian::from_log_var(sm[i].clone(), &sl[i])?,
                    content: DiagGaussian::from_log_var(cm[i].clone(), &cl[i])?,
                })
            })
            .collect()
    }

    /// Value-level decode of latent rows.
    pub fn decode(&self, domain: &str, y: &Tensor<f32>, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.domain(domain)?;
        let tape = Tape::new();
        let params = self.params.bind(&tape, |_| false);
        let out = decode_graph(&self.arch, &params, domain, &tape.constant(y.clone()), &tape.constant(z.clone()))?;
        Ok(out.tensor())
    }

    pub fn discriminate(&self, target: &str, images: &Tensor<f32>) -> Result<Vec<f32>> {
        self.target(target)?;
        let tape = Tape::new();
        let params = self.params.bind(&tape, |_| false);
        let out = discriminate_graph(&self.arch, &params, target, &tape.constant(images.clone()))?;
        Ok(out.tensor().into_data())
    }
}

/// q(y|x) and q(z|x) for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub style: DiagGaussian,
    pub content: DiagGaussian,
}
