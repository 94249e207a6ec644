//! Alternating generator / discriminator optimization with Adam.
//!
//! Step `s` draws all of its randomness from streams keyed by
//! `(seed, role, s)` and its minibatches from per-epoch permutations keyed
//! by `(seed, "shuffle/{domain}", epoch)`, so a run restarted from a
//! checkpoint at step `k` continues exactly as if it had never stopped.

mod adam;
mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{DataConfig, LossConfig, Schedule, TrainConfig};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::data_synth::ImageBatch;
use crate::error::{Error, Result};
use crate::networks::{decode_graph, discriminate_graph, ModelBundle, Role};
use crate::objectives::{
    adv_discriminator_term, adv_generator_term, loss_ind, loss_rec, noise, total_generator_loss, DomainBatch, ElboBreakdown,
    LossReport, TranslatedBatch,
};
use crate::rng;

fn is_gen(name: &str) -> bool {
    Role::of(name).is_some_and(Role::is_generator)
}

fn is_disc(name: &str) -> bool {
    Role::of(name) == Some(Role::Discriminator)
}

/// Fraction of real images a discriminator scores above ½ and of fakes below.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscAccuracy {
    pub real: f64,
    pub fake: f64,
}

/// One line of `log.ndjson`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub losses: LossReport,
    /// Batch-mean ELBO terms per domain.
    pub elbo: BTreeMap<String, ElboBreakdown>,
    pub disc_accuracy: BTreeMap<String, DiscAccuracy>,
    /// Milliseconds since the trainer was constructed.
    pub wall_ms: f64,
}

impl TrainLogRecord {
    /// Equality ignoring the wall clock.
    pub fn same_run(&self, other: &Self) -> bool {
        Self { wall_ms: 0.0, ..self.clone() } == Self { wall_ms: 0.0, ..other.clone() }
    }
}

/// A record written when training stops on a non-finite value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub step: u64,
    pub aborted: String,
    pub last_checkpoint: Option<PathBuf>,
}

pub struct Trainer {
    config: TrainConfig,
    config_text: String,
    bundle: ModelBundle,
    gen_optim: AdamState,
    disc_optim: AdamState,
    step: u64,
    data: Vec<ImageBatch>,
    perms: Vec<Option<(u64, Vec<usize>)>>,
    started: Instant,
}

impl Trainer {
    /// `data` holds one training batch per configured domain, in order.
    pub fn new(config: TrainConfig, data: Vec<ImageBatch>) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.model.clone(), config.domain_specs()?, config.train.seed)?;
        let config_text = config.to_toml();
        Self::assemble(config, config_text, bundle, AdamState::default(), AdamState::default(), 0, data)
    }

    pub fn resume(ckpt: Checkpoint, data: Vec<ImageBatch>) -> Result<Self> {
        let bundle = ckpt.bundle()?;
        Self::assemble(ckpt.config, ckpt.config_text, bundle, ckpt.gen_optim, ckpt.disc_optim, ckpt.step, data)
    }

    fn assemble(
        config: TrainConfig,
        config_text: String,
        bundle: ModelBundle,
        gen_optim: AdamState,
        disc_optim: AdamState,
        step: u64,
        data: Vec<ImageBatch>,
    ) -> Result<Self> {
        let ids = &config.data.domains;
        if data.len() != ids.len() {
            return Err(Error::Invalid(format!("{} datasets for {} domains", data.len(), ids.len())));
        }
        let shape = config.model.image_shape(1);
        for (d, id) in data.iter().zip(ids) {
            if d.images.shape()[1..] != shape[1..] || d.domains.iter().any(|x| x != id) {
                return Err(Error::Invalid(format!("dataset for `{id}` has shape {:?} / wrong labels", d.images.shape())));
            }
            if d.len() < config.train.batch_size {
                return Err(Error::Invalid(format!("`{id}` has {} images, fewer than one batch", d.len())));
            }
        }
        let n = data.len();
        Ok(Self { config, config_text, bundle, gen_optim, disc_optim, step, data, perms: vec![None; n], started: Instant::now() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        let n = self.data.iter().map(ImageBatch::len).min().unwrap_or(0);
        (n / self.config.train.batch_size).max(1) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.max_steps.unwrap_or(self.config.train.epochs * self.steps_per_epoch())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config_text: self.config_text.clone(),
            config: self.config.clone(),
            params: self.bundle.params.clone(),
            gen_optim: self.gen_optim.clone(),
            disc_optim: self.disc_optim.clone(),
        }
    }

    fn minibatch(&mut self, domain: usize) -> Result<Tensor<f32>> {
        let b = self.config.train.batch_size;
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (self.step / spe, (self.step % spe) as usize);
        let fresh = !matches!(&self.perms[domain], Some((e, _)) if *e == epoch);
        if fresh {
            let mut p: Vec<usize> = (0..self.data[domain].len()).collect();
            let id = &self.config.data.domains[domain];
            p.shuffle(&mut rng::stream(self.config.train.seed, &format!("shuffle/{id}"), epoch));
            self.perms[domain] = Some((epoch, p));
        }
        let perm = &self.perms[domain].as_ref().expect("filled").1;
        Ok(self.data[domain].select(&perm[pos * b..(pos + 1) * b])?.images)
    }

    /// Runs one generator update and, when the adversarial weight is
    /// positive, `disc_updates` discriminator updates. On a non-finite loss
    /// or gradient nothing is modified and an error is returned.
    pub fn train_step(&mut self) -> Result<TrainLogRecord> {
        let step = self.step;
        let batches = (0..self.data.len()).map(|d| self.minibatch(d)).collect::<Result<Vec<_>>>()?;
        let (mut losses, elbo, fakes) = self.gen_update(&batches)?;
        let mut disc_accuracy = BTreeMap::new();
        if self.config.loss.adv > 0.0 {
            for round in 0..self.config.train.disc_updates {
                let (l_disc, acc) = self.disc_update(&batches, &fakes, round == 0)?;
                if round == 0 {
                    losses.l_adv_disc = l_disc;
                    disc_accuracy = acc;
                }
            }
        }
        self.step += 1;
        Ok(TrainLogRecord { step, losses, elbo, disc_accuracy, wall_ms: self.started.elapsed().as_secs_f64() * 1e3 })
    }

    /// Generator-side update; returns the loss report, per-domain ELBO terms
    /// and the translated batches (pre-update) for the discriminator.
    #[allow(clippy::type_complexity)]
    fn gen_update(&mut self, batches: &[Tensor<f32>]) -> Result<(LossReport, BTreeMap<String, ElboBreakdown>, Vec<(String, Tensor<f32>)>)> {
        let step = self.step;
        let cfg = &self.config;
        let weights = cfg.loss.weights();
        let arch = &self.bundle.arch;
        let ids = &cfg.data.domains;

        let tape = Tape::<f32>::new();
        let params = self.bundle.params.bind(&tape, is_gen);
        let mut rng = rng::stream(cfg.train.seed, "step/gen", step);
        let inputs: Vec<_> = self
            .bundle
            .domains
            .iter()
            .zip(batches)
            .map(|(d, x)| DomainBatch { domain: &d.id, images: tape.constant(x.clone()), style_prior: d.style_prior() })
            .collect();
        let (l_ind, graphs) = loss_ind(arch, &params, &inputs, cfg.loss.mc_samples, cfg.loss.sigma_x, &mut rng)?;
        let mut translated = Vec::new();
        if weights.rec > 0.0 || weights.adv > 0.0 {
            let z = graphs[0].content_sample;
            let b = z.shape()[0];
            for t in self.bundle.targets() {
                let alpha = Tensor::new(vec![arch.style_dim], t.alpha.iter().map(|a| *a as f32).collect())?;
                let y = noise(&tape, &mut rng, b, arch.style_dim).add(&tape.constant(alpha))?;
                let x = decode_graph(arch, &params, &t.id, &y, &z)?;
                translated.push(TranslatedBatch { target: &t.id, images: x, style: y, content: z });
            }
        }
        let l_rec = if weights.rec > 0.0 { Some(loss_rec(arch, &params, &ids[0], &translated, &mut rng)?) } else { None };
        let mut l_adv: Option<Var<'_, f32>> = None;
        if weights.adv > 0.0 {
            for t in &translated {
                let g = adv_generator_term(arch, &params, t.target, &t.images)?;
                l_adv = Some(match l_adv {
                    Some(a) => a.add(&g)?,
                    None => g,
                });
            }
        }
        let (total, report) = total_generator_loss(weights, Some(l_ind), l_rec, l_adv)?;
        let elbo: BTreeMap<String, ElboBreakdown> = ids.iter().cloned().zip(graphs.iter().map(|g| g.breakdown())).collect();
        if !report.total_gen.is_finite() || elbo.values().any(|e| !e.elbo.is_finite()) {
            return Err(Error::NonFinite { what: "generator loss".into(), step });
        }
        let fakes: Vec<(String, Tensor<f32>)> = translated.iter().map(|t| (t.target.to_string(), t.images.tensor())).collect();
        if let Some(total) = total {
            let mut grads = tape.backward(total)?;
            let named: Vec<(String, Tensor<f32>)> = params
                .iter()
                .filter(|(n, _)| is_gen(n))
                .map(|(n, v)| (n.clone(), grads.take(*v).unwrap_or_else(|| Tensor::zeros(v.shape()))))
                .collect();
            drop(params);
            self.gen_optim.update(&mut self.bundle.params, &named, &self.config.optim, step)?;
        }
        Ok((report, elbo, fakes))
    }

    fn disc_update(
        &mut self,
        batches: &[Tensor<f32>],
        fakes: &[(String, Tensor<f32>)],
        measure: bool,
    ) -> Result<(f64, BTreeMap<String, DiscAccuracy>)> {
        let step = self.step;
        let arch = &self.bundle.arch;
        let tape = Tape::<f32>::new();
        let params = self.bundle.params.bind(&tape, is_disc);
        let mut total: Option<Var<'_, f32>> = None;
        let mut accuracy = BTreeMap::new();
        for (i, (target, fake)) in fakes.iter().enumerate() {
            let real = tape.constant(batches[i + 1].clone());
            let fake = tape.constant(fake.clone());
            let term = adv_discriminator_term(arch, &params, target, &real, &fake)?;
            total = Some(match total {
                Some(a) => a.add(&term)?,
                None => term,
            });
            if measure {
                let frac = |v: Var<'_, f32>, real: bool| {
                    let d = v.tensor();
                    d.data().iter().filter(|p| (**p > 0.5) == real).count() as f64 / d.numel() as f64
                };
                let frozen = params.detached(|_| true);
                let dr = discriminate_graph(arch, &frozen, target, &real)?;
                let df = discriminate_graph(arch, &frozen, target, &fake)?;
                accuracy.insert(target.clone(), DiscAccuracy { real: frac(dr, true), fake: frac(df, false) });
            }
        }
        let total = total.ok_or_else(|| Error::Invalid("no target domains".into()))?;
        let value = total.item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "discriminator loss".into(), step });
        }
        let mut grads = tape.backward(total)?;
        let named: Vec<(String, Tensor<f32>)> = params
            .iter()
            .filter(|(n, _)| is_disc(n))
            .map(|(n, v)| (n.clone(), grads.take(*v).unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect();
        drop(params);
        self.disc_optim.update(&mut self.bundle.params, &named, &self.config.optim, step)?;
        Ok((value, accuracy))
    }
}

/// Mean negative ELBO of `images` under `domain`, evaluated in chunks with
/// `samples` Monte Carlo draws from stream `(seed, "eval/{domain}", 0)`.
pub fn held_out_neg_elbo(bundle: &ModelBundle, domain: &str, images: &Tensor<f32>, samples: usize, sigma_x: f64, seed: u64) -> Result<f64> {
    let spec = bundle.domain(domain)?.clone();
    let n = images.shape()[0];
    let mut rng = rng::stream(seed, &format!("eval/{domain}"), 0);
    let mut total = 0.0;
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let tape = Tape::<f32>::new();
        let params = bundle.params.bind(&tape, |_| false);
        let x = tape.constant(images.rows(start, len)?);
        let b = [DomainBatch { domain: &spec.id, images: x, style_prior: spec.style_prior() }];
        let (loss, _) = loss_ind(&bundle.arch, &params, &b, samples, sigma_x, &mut rng)?;
        total += loss.item() as f64 * len as f64;
        start += len;
    }
    Ok(total / n as f64)
}

/// Output of [`train`].
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<TrainLogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Files of one run: `{root}/{run_id}/log.ndjson` and `ckpt-{step}.vbit`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, run_id: &str) -> Result<Self> {
        let path = root.join(run_id);
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn log_path(&self) -> PathBuf {
        self.path.join("log.ndjson")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path.join(format!("ckpt-{step}.vbit"))
    }

    /// Appends one JSON object as a line.
    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        let path = self.log_path();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

/// Trains until the configured step budget is used up, logging every step
/// and checkpointing on the configured cadence and at the end.
///
/// When a step produces a non-finite value the run stops: an
/// [`AbortRecord`] goes to the log, earlier checkpoints stay on disk, and
/// the error is returned.
pub fn run(trainer: &mut Trainer, run_dir: Option<&RunDir>, mut on_step: impl FnMut(&TrainLogRecord)) -> Result<TrainOutcome> {
    let total = trainer.total_steps();
    let every = trainer.config.train.checkpoint_every;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step() < total {
        let rec = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = run_dir {
                    dir.append(&AbortRecord { step: trainer.step(), aborted: e.to_string(), last_checkpoint: checkpoints.last().cloned() })?;
                }
                return Err(e);
            }
        };
        if let Some(dir) = run_dir {
            dir.append(&rec)?;
        }
        on_step(&rec);
        log.push(rec);
        let done = trainer.step();
        if let Some(dir) = run_dir {
            if (every > 0 && done % every == 0) || done == total {
                let path = dir.checkpoint_path(done);
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { bundle: trainer.bundle.clone(), log, checkpoints })
}

/// Fresh run from `config` over in-memory datasets.
pub fn train(config: TrainConfig, data: Vec<ImageBatch>, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, data)?;
    run(&mut t, run_dir, |_| {})
}

#[cfg(test)]
mod tests;
