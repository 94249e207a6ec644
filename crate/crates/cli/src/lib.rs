//! The `vbitn` command line: dataset generation, training, translation,
//! evaluation and serving.
//!
//! Failures print one JSON line `{"error": kind, "message": text}` on stderr
//! and exit nonzero (2 for usage errors, 1 otherwise).

use std::ffi::OsString;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vbitn_core::checkpoint::Checkpoint;
use vbitn_core::data_synth::{load_image, load_split, save_image, write_dataset, SplitCounts, StyleFamily};
use vbitn_core::distributions::validate_weights;
use vbitn_core::evaluation::{evaluate, Instruments};
use vbitn_core::networks::ModelBundle;
use vbitn_core::rng::entropy_seed;
use vbitn_core::trainer::{run as run_training, RunDir, TrainConfig, Trainer};
use vbitn_core::translation::{run_request, LatentPair, Target, TranslationRequest};
use vbitn_core::Error as CoreError;
use vbitn_service::{sha256_hex, AppState, ServiceConfig};

/// Environment variable overriding the run-directory root.
pub const RUN_DIR_ENV: &str = "VBITN_RUN_DIR";
/// Run-directory root when [`RUN_DIR_ENV`] is unset.
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "vbitn", version, about = "Variational two-latent image translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset tree.
    GenData(GenData),
    /// Train a model and write a run directory.
    Train(Train),
    /// Translate one source image to a target domain.
    Translate(TranslateCmd),
    /// Several styles over one content draw.
    EditStyle(EditStyle),
    /// Several content draws under one style.
    EditContent(EditContent),
    /// Translate with a style drawn from a weighted mixture of targets.
    Mix(Mix),
    /// Score translations of held-out source images.
    Eval(Eval),
    /// Serve the HTTP API.
    Serve(Serve),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root; defaults to the config's `data.root`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root; defaults to the config's `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory name under the run root; defaults to `seed-{seed}`.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct SourceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Source PNG.
    #[arg(long, conflicts_with = "index")]
    pub image: Option<PathBuf>,
    /// Index into the source domain's test split.
    #[arg(long)]
    pub index: Option<usize>,
    /// Dataset root for `--index`; defaults to the checkpoint config's `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TranslateCmd {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub target: String,
}

#[derive(Args, Debug)]
pub struct EditStyle {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub target: String,
    #[arg(long = "l", default_value_t = 8)]
    pub l: usize,
}

#[derive(Args, Debug)]
pub struct EditContent {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub target: String,
    #[arg(long = "m", default_value_t = 8)]
    pub m: usize,
}

#[derive(Args, Debug)]
pub struct Mix {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Comma-separated weights, one per target domain.
    #[arg(long)]
    pub weights: String,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to the first target domain.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for `eval.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Serve {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Dataset root whose source test split backs `dataset_index` sessions.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Static files served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    fn exit_code(&self) -> i32 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = serde_json::json!({ "error": self.kind, "message": self.message });
        write!(f, "{line}")
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Config(_) => "config",
            CoreError::Io { .. } => "io",
            CoreError::Format(_) => "checkpoint",
            CoreError::Image(_) => "image",
            CoreError::NonFinite { .. } => "diverged",
            _ => "invalid",
        };
        Self::new(kind, e.to_string().replace('\n', " "))
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let err = CliError::new("usage", first);
            eprintln!("{err}");
            return err.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => {
            let target = Target::Domain(a.target.clone());
            generate(&a.source, "translate", &a.target, target, 1, 1)
        }
        Command::EditStyle(a) => {
            let target = Target::Domain(a.target.clone());
            generate(&a.source, "edit-style", &a.target, target, a.l, 1)
        }
        Command::EditContent(a) => {
            let target = Target::Domain(a.target.clone());
            generate(&a.source, "edit-content", &a.target, target, 1, a.m)
        }
        Command::Mix(a) => {
            let w = parse_weights(&a.weights)?;
            let label = format!("w{}", w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("_"));
            generate(&a.source, "mix", &label, Target::Weights(w), 1, 1)
        }
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

/// Comma-separated decimals that sum to 1 within 1e-6, rescaled to sum to 1
/// exactly; anything further off is rejected.
pub fn parse_weights(text: &str) -> CliResult<Vec<f64>> {
    let w = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::new("usage", format!("--weights: `{s}` is not a number"))))
        .collect::<CliResult<Vec<_>>>()?;
    validate_weights(&w).map_err(|e| CliError::new("usage", format!("--weights: {e}")))?;
    let sum: f64 = w.iter().sum();
    Ok(if sum == 1.0 { w } else { w.iter().map(|v| v / sum).collect() })
}

fn choose_seed(flag: Option<u64>, configured: Option<u64>) -> u64 {
    flag.or(configured).unwrap_or_else(|| {
        let s = entropy_seed();
        eprintln!("seed: {s}");
        s
    })
}

/// The config plus any seed it sets explicitly under `[section]`.
fn load_config(path: Option<&Path>, section: &str) -> CliResult<(TrainConfig, Option<u64>)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), None));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from(CoreError::io(path, e)))?;
    let config = TrainConfig::from_toml(&text)?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::new("config", e.to_string().replace('\n', " ")))?;
    let seed = table.get(section).and_then(|s| s.get("seed")).and_then(|v| v.as_integer()).map(|v| v as u64);
    Ok((config, seed))
}

fn gen_data(a: GenData) -> CliResult<()> {
    let (config, configured) = load_config(a.config.as_deref(), "data")?;
    let families = config.data.domains.iter().map(|d| StyleFamily::from_id(d)).collect::<Result<Vec<_>, _>>()?;
    let seed = choose_seed(a.seed, configured);
    let root = a.out.unwrap_or_else(|| PathBuf::from(&config.data.root));
    let counts = SplitCounts { train: config.data.train_size, test: config.data.test_size };
    write_dataset(&root, &families, &counts, seed, config.model.image_size)?;
    println!("dataset: {}", root.display());
    Ok(())
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

fn train(a: Train) -> CliResult<()> {
    let (mut config, configured) = load_config(a.config.as_deref(), "train")?;
    config.train.seed = choose_seed(a.seed, configured);
    config.validate()?;
    let root = a.data.unwrap_or_else(|| PathBuf::from(&config.data.root));
    let data = config
        .data
        .domains
        .iter()
        .map(|d| load_split(&root, d, "train", Some(config.data.train_size)))
        .collect::<Result<Vec<_>, _>>()?;
    let run_id = a.run_id.unwrap_or_else(|| format!("seed-{}", config.train.seed));
    let dir_path = run_root().join(&run_id);
    if dir_path.join("log.ndjson").exists() {
        return Err(CliError::new("io", format!("{}: run directory already holds a log", dir_path.display())));
    }
    let mut trainer = Trainer::new(config, data)?;
    let dir = RunDir::create(&run_root(), &run_id)?;
    let total = trainer.total_steps();
    let outcome = run_training(&mut trainer, Some(&dir), |r| {
        if r.step % 100 == 0 {
            eprintln!("step {}/{total} total_gen {:.3}", r.step, r.losses.total_gen);
        }
    })?;
    println!("run: {}", dir.path.display());
    if let Some(last) = outcome.checkpoints.last() {
        println!("checkpoint: {}", last.display());
    }
    Ok(())
}

fn load_bundle(path: &Path) -> CliResult<(Checkpoint, ModelBundle, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new("missing_checkpoint", format!("{}: {e}", path.display())))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let bundle = ckpt.bundle()?;
    Ok((ckpt, bundle, sha256_hex(&bytes)))
}

#[derive(Serialize)]
struct Tile {
    file: String,
    style_index: usize,
    content_index: usize,
    latents: LatentPair,
}

#[derive(Serialize)]
struct Provenance {
    command: String,
    checkpoint: String,
    checkpoint_sha256: String,
    source: String,
    target: Target,
    seed: u64,
    l: usize,
    m: usize,
    decoder: String,
    tiles: Vec<Tile>,
}

fn generate(a: &SourceArgs, command: &str, label: &str, target: Target, l: usize, m: usize) -> CliResult<()> {
    let (ckpt, bundle, hash) = load_bundle(&a.ckpt)?;
    let req = TranslationRequest { target, n_style_samples: l, n_content_samples: m, seed: 0 };
    req.validate(&bundle)?;
    let (image, source, tag) = match (&a.image, a.index) {
        (Some(p), None) => {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            (load_image(p)?, p.display().to_string(), stem)
        }
        (None, Some(i)) => {
            let root = a.data.clone().unwrap_or_else(|| PathBuf::from(&ckpt.config.data.root));
            let batch = load_split(&root, &bundle.source().id, "test", Some(i + 1))?;
            if i >= batch.len() {
                return Err(CliError::new("usage", format!("--index {i} out of range 0..{}", batch.len())));
            }
            (batch.image(i), format!("{}#test/{i}", root.join(&bundle.source().id).display()), format!("i{i}"))
        }
        _ => return Err(CliError::new("usage", "give exactly one of --image or --index")),
    };
    let seed = choose_seed(a.seed, None);
    let req = TranslationRequest { seed, ..req };
    let out = run_request(&bundle, &image, &req)?;

    let dir = a.out.join(format!("{command}-{tag}-{label}-{l}x{m}-seed{seed}"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::from(CoreError::io(&dir, e)))?;
    let mut tiles = Vec::with_capacity(out.len());
    for (k, t) in out.iter().enumerate() {
        let (r, c) = (k / m, k % m);
        let file = format!("y{r}-z{c}.png");
        save_image(dir.join(&file), &t.image)?;
        tiles.push(Tile { file, style_index: r, content_index: c, latents: t.latents.clone() });
    }
    let record = Provenance {
        command: command.to_string(),
        checkpoint: a.ckpt.display().to_string(),
        checkpoint_sha256: hash,
        source,
        target: req.target.clone(),
        seed,
        l,
        m,
        decoder: out[0].decoder.clone(),
        tiles,
    };
    let path = dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::new("io", e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| CliError::from(CoreError::io(&path, e)))?;
    println!("{}", dir.display());
    Ok(())
}

fn eval(a: Eval) -> CliResult<()> {
    let (ckpt, bundle, _) = load_bundle(&a.ckpt)?;
    let target = match a.target {
        Some(t) => t,
        None => bundle.targets().first().map(|d| d.id.clone()).ok_or_else(|| CliError::new("invalid", "model has no target domain"))?,
    };
    bundle.target(&target)?;
    let seed = choose_seed(a.seed, None);
    let root = a.data.unwrap_or_else(|| PathBuf::from(&ckpt.config.data.root));
    let ids: Vec<String> = bundle.domains.iter().map(|d| d.id.clone()).collect();
    let cap = Some(512);
    let fit = ids.iter().map(|d| load_split(&root, d, "train", cap)).collect::<Result<Vec<_>, _>>()?;
    let check = ids.iter().map(|d| load_split(&root, d, "test", cap)).collect::<Result<Vec<_>, _>>()?;
    let inst = Instruments::calibrate(&fit.iter().collect::<Vec<_>>(), &check.iter().collect::<Vec<_>>())?;
    let source = load_split(&root, &bundle.source().id, "test", Some(a.n))?;
    let target_test = &check[ids.iter().position(|d| *d == target).expect("target is a domain")];
    let report = evaluate(&bundle, &inst, &source, &target, a.n, seed, Some((target_test, ckpt.config.loss.sigma_x)))?;
    print!("{}", report.to_text());
    println!("classifier_accuracy = {:.4}\nextractor_iou = {:.4}", inst.classifier_accuracy, inst.extractor_iou);
    if let Some(dir) = a.out {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::from(CoreError::io(&dir, e)))?;
        let path = dir.join("eval.json");
        let body = serde_json::json!({
            "report": report,
            "classifier_accuracy": inst.classifier_accuracy,
            "extractor_iou": inst.extractor_iou,
            "seed": seed,
        });
        std::fs::write(&path, body.to_string()).map_err(|e| CliError::from(CoreError::io(&path, e)))?;
    }
    Ok(())
}

fn serve(a: Serve) -> CliResult<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().map_err(|_| CliError::new("usage", format!("bad address {}:{}", a.host, a.port)))?;
    let (ckpt, _, _) = load_bundle(&a.ckpt)?;
    let dataset = match &a.data {
        Some(root) => Some(load_split(root, &ckpt.config.data.domains[0], "test", None)?),
        None => None,
    };
    let config = ServiceConfig { static_dir: a.static_dir, cors_origin: a.cors_origin, ..Default::default() };
    let state = AppState::from_checkpoint(&a.ckpt, dataset, config)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("io", e.to_string()))?;
    eprintln!("listening on http://{addr}");
    rt.block_on(vbitn_service::serve(state, addr)).map_err(|e| CliError::new("io", format!("{addr}: {e}")))
}
