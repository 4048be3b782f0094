//! Command-line front end: weight conversion, training, segmentation, evaluation
//! and self-checks. [`main_with_args`] parses arguments and maps errors to exit codes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use planar3d::metrics::{aggregate, ScanEntry};
use planar3d::model::{synthetic_encoder_2d, Network, NetworkSpec, WidthScale};
use planar3d::pipeline::{
    self, binarize, compose, decompose, normalize_scan, read_mask, read_volume, resample, write_mask,
    write_volume, MaskVolume, ThresholdMode, Volume,
};
use planar3d::training::{fit, gen_synthetic, make_folds, prepare_samples, Sample, ScanId, TrainConfig, TrainLog};
use planar3d::transfer::{self, count_params, load_manifest, map_weightset, save_manifest, LayerKind, WeightManifest};
use planar3d::Error;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "PLANAR3D_THREADS";
pub const RUN_MANIFEST: &str = "run.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCH_TIMES: &str = "epoch_times.csv";
pub const MASK_SUFFIX: &str = ".mask.pv3d";
pub const VOLUME_SUFFIX: &str = ".pv3d";

#[derive(Parser, Debug)]
#[command(name = "planar3d", version, about = "Planar 3D U-Net toolkit for lesion segmentation")]
pub struct Cli {
    /// Worker threads (defaults to PLANAR3D_THREADS, then the core count).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Map a 2D convolution manifest to planar 3D kernels.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume with a saved network.
    Segment(SegmentArgs),
    /// Train a network on paired volume/mask files.
    Train(TrainArgs),
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// TOML table mapping scan name to center name.
        #[arg(long)]
        centers: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a freshly initialized network and save it.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1/8")]
        width: String,
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [16, 64, 64])]
        window: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Encoder weights (2D manifests are mapped on load).
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Write synthetic scan/mask pairs.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, num_args = 3, value_names = ["D", "H", "W"], default_values_t = [16, 64, 64])]
        extents: Vec<usize>,
        #[arg(long, default_value_t = 0.002)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a random 2D VGG encoder manifest.
    SynthEncoder {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1/8")]
        width: String,
        /// Keep only the first N layers.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run quick roundtrip checks of windowing, weight files and volume files.
    Selfcheck,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the composed probability volume.
    #[arg(long)]
    pub prob: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ThresholdArg::Fixed)]
    pub threshold_mode: ThresholdArg,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Debug mode: replace the network by a pass-through so probabilities equal the normalized input.
    #[arg(long)]
    pub identity_probe: bool,
    #[arg(long, default_value_t = pipeline::DEFAULT_STRIDE)]
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ThresholdArg {
    /// Rescale each scan to [0, 256] and keep voxels at or above 16.
    Literal,
    /// Keep voxels with probability at least `--threshold`.
    Fixed,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train one network per cross-validation fold.
    #[arg(long)]
    pub folds: bool,
    /// TOML table mapping scan name to center name (used by --folds).
    #[arg(long)]
    pub centers: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<String>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub freeze_encoder: bool,
}

/// Everything `train` needs besides the data; read from TOML, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Channel width factor such as `"1/8"`.
    pub width: String,
    pub window: [usize; 3],
    pub stride: usize,
    /// Network initialization seed; the training seed when absent.
    pub init_seed: Option<u64>,
    /// Pretrained encoder manifest.
    pub encoder: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            width: "1/8".into(),
            window: [pipeline::DEFAULT_WINDOW, 64, 64],
            stride: pipeline::DEFAULT_STRIDE,
            init_seed: None,
            encoder: None,
            train: TrainConfig::default(),
        }
    }
}

/// Record written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub wall_seconds: f64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: toml::Table,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            wall_seconds: 0.0,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: toml::Table::new(),
        }
    }

    fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.into(), path.display().to_string());
        self
    }

    fn output(mut self, key: &str, path: &Path) -> Self {
        self.outputs.insert(key.into(), path.display().to_string());
        self
    }

    fn config(mut self, value: &impl Serialize) -> anyhow::Result<Self> {
        self.config = toml::Table::try_from(value)?;
        Ok(self)
    }

    fn write(mut self, path: &Path, started: Instant) -> anyhow::Result<()> {
        self.wall_seconds = started.elapsed().as_secs_f64();
        transfer::write_atomic(path, toml::to_string(&self)?.as_bytes())?;
        Ok(())
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for format, geometry and matching errors, 3 for integrity, 4 for non-finite
/// network output, 5 for training divergence, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Integrity(_)) => 3,
        Some(Error::NonFinite(_)) => 4,
        Some(Error::Divergence { .. }) => 5,
        Some(Error::Io(_)) | Some(Error::Unsupported(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Convert { input, out } => cmd_convert(&input, &out),
        Command::Segment(a) => cmd_segment(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate { pred, truth, centers, out } => cmd_evaluate(&pred, &truth, centers.as_deref(), &out),
        Command::Init {
            out,
            width,
            window,
            seed,
            encoder,
        } => cmd_init(&out, &width, triple(&window), seed, encoder.as_deref()),
        Command::SynthData {
            out,
            count,
            extents,
            ratio,
            seed,
        } => cmd_synth_data(&out, count, triple(&extents), ratio, seed),
        Command::SynthEncoder { out, width, layers, seed } => cmd_synth_encoder(&out, &width, layers, seed),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn triple(v: &[usize]) -> [usize; 3] {
    [v[0], v[1], v[2]]
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(s.trim().parse().with_context(|| format!("{THREADS_ENV}={s:?} is not a thread count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // A pool may already exist when called twice in one process; keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn parse_width(s: &str) -> anyhow::Result<WidthScale> {
    let (n, d) = s.split_once('/').unwrap_or((s, "1"));
    let (n, d): (u32, u32) = (n.trim().parse()?, d.trim().parse()?);
    if n == 0 || d == 0 {
        bail!("width scale {s:?} must be positive");
    }
    Ok(WidthScale::new(n, d))
}

/// Loads an encoder manifest, mapping 2D layers to planar 3D ones.
fn load_encoder(dir: &Path) -> anyhow::Result<WeightManifest> {
    let m = load_manifest(dir).with_context(|| format!("loading encoder weights from {}", dir.display()))?;
    if m.layers().iter().all(|l| l.kind == LayerKind::Conv2d) && !m.is_empty() {
        Ok(map_weightset(&m)?)
    } else {
        Ok(m)
    }
}

fn cmd_convert(input: &Path, out: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let m = load_manifest(input).with_context(|| format!("reading {}", input.display()))?;
    let mapped = map_weightset(&m)?;
    let (before, after) = (count_params(&m), count_params(&mapped));
    if before != after {
        bail!("parameter count changed from {before} to {after}");
    }
    save_manifest(&mapped, out)?;
    let reread = load_manifest(out)?;
    if reread != mapped {
        return Err(Error::Integrity("written manifest does not read back identically".into()).into());
    }
    println!("converted {} layers; params in = params out ({before})", m.len());
    RunManifest::new("convert", None)
        .input("manifest", input)
        .output("manifest", out)
        .write(&out.join(RUN_MANIFEST), started)
}

/// Smallest extents at or above `extents` that windowing and the encoder accept.
pub fn compatible_extents(extents: [usize; 3], window: usize, stride: usize, reduction: [usize; 3]) -> [usize; 3] {
    let depth = if extents[0] <= window {
        window
    } else {
        window + (extents[0] - window).div_ceil(stride) * stride
    };
    let depth = depth.div_ceil(reduction[0]) * reduction[0];
    [depth, extents[1].div_ceil(reduction[1]) * reduction[1], extents[2].div_ceil(reduction[2]) * reduction[2]]
}

/// Composed per-voxel probabilities for `scan`. `net == None` is the identity probe.
pub fn infer(net: Option<&Network>, scan: &Volume, stride: usize) -> anyhow::Result<Volume> {
    let window = net.map_or(pipeline::DEFAULT_WINDOW, |n| n.spec().window[0]);
    let reduction = net.map_or([1; 3], |n| n.spec().reduction());
    let original = scan.extents();
    let target = compatible_extents(original, window, stride, reduction);
    let input = if target != original {
        eprintln!("resampling {original:?} to {target:?} to fit the window geometry");
        resample(scan, target)?
    } else {
        scan.clone()
    };
    let ws = decompose(&normalize_scan(&input)?, window, stride)?;
    println!("decomposed {} slices into {} windows of {window} (stride {stride})", target[0], ws.len());
    let probs = match net {
        None => ws,
        Some(net) => ws.map_slabs(|w| {
            let [_, h, wd] = target;
            let x = pipeline::replicate_channels(&w.slab.clone().reshape(&[1, 1, window, h, wd])?)?;
            let y = net.forward(&x)?;
            if let Some(v) = y.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("window {} produced {v}", w.index)));
            }
            y.reshape(&[window, h, wd])
        })?,
    };
    let out = compose(&probs)?;
    if target != original {
        let back = resample(&out, original)?;
        return Ok(if net.is_some() {
            Volume::new(original, back.data().iter().map(|p| p.clamp(0.0, 1.0)).collect())?
        } else {
            back
        });
    }
    Ok(out)
}

fn cmd_segment(a: &SegmentArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let net = match (&a.net, a.identity_probe) {
        (_, true) => None,
        (Some(dir), false) => Some(Network::load(dir).with_context(|| format!("loading network from {}", dir.display()))?),
        (None, false) => bail!("--net is required unless --identity-probe is given"),
    };
    let scan = read_volume(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let probs = infer(net.as_ref(), &scan, a.stride)?;
    let mode = match a.threshold_mode {
        ThresholdArg::Literal => ThresholdMode::Literal,
        ThresholdArg::Fixed => ThresholdMode::Fixed(a.threshold),
    };
    let mask = binarize(&probs, mode)?;
    write_mask(&a.out, &mask)?;
    let mut rm = RunManifest::new("segment", None).input("volume", &a.input).output("mask", &a.out);
    if let Some(p) = &a.prob {
        write_volume(p, &probs)?;
        rm = rm.output("probabilities", p);
    }
    if let Some(n) = &a.net {
        rm = rm.input("network", n);
    }
    println!(
        "segmented {} in {:.2} s: {} positive voxels",
        a.input.display(),
        started.elapsed().as_secs_f64(),
        mask.positives()
    );
    #[derive(Serialize)]
    struct SegmentConfig {
        threshold_mode: String,
        threshold: f32,
        identity_probe: bool,
        stride: usize,
    }
    rm.config(&SegmentConfig {
        threshold_mode: format!("{:?}", a.threshold_mode).to_lowercase(),
        threshold: a.threshold,
        identity_probe: a.identity_probe,
        stride: a.stride,
    })?
    .write(&sibling(&a.out, ".run.toml"), started)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Scan name and the paths of its volume and mask.
type Pair = (String, PathBuf, PathBuf);

/// Pairs `NAME.pv3d` with `NAME.mask.pv3d`, sorted by name.
pub fn find_pairs(dir: &Path) -> anyhow::Result<Vec<Pair>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(MASK_SUFFIX) {
            continue;
        }
        if let Some(stem) = name.strip_suffix(VOLUME_SUFFIX) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Contract(format!("no {VOLUME_SUFFIX} volumes in {}", dir.display())).into());
    }
    names
        .into_iter()
        .map(|n| {
            let mask = dir.join(format!("{n}{MASK_SUFFIX}"));
            if !mask.exists() {
                return Err(Error::Contract(format!("volume {n} has no mask {}", mask.display())).into());
            }
            Ok((n.clone(), dir.join(format!("{n}{VOLUME_SUFFIX}")), mask))
        })
        .collect()
}

fn read_centers(path: Option<&Path>) -> anyhow::Result<BTreeMap<String, String>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())).into())
        }
    }
}

pub fn load_run_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.freeze_encoder {
        t.encoder_trainable = false;
    }
    if let Some(v) = &a.width {
        cfg.width = v.clone();
    }
    if let Some(v) = &a.encoder {
        cfg.encoder = Some(v.clone());
    }
    cfg.train.validate()?;
    parse_width(&cfg.width)?;
    Ok(cfg)
}

fn build_network(cfg: &RunConfig) -> anyhow::Result<Network> {
    let spec = NetworkSpec::vgg16_unet(parse_width(&cfg.width)?, cfg.window);
    let encoder = cfg.encoder.as_deref().map(load_encoder).transpose()?;
    Ok(Network::build(&spec, cfg.init_seed.unwrap_or(cfg.train.seed), encoder.as_ref())?)
}

fn load_samples(pair: &Pair, cfg: &RunConfig, reduction: [usize; 3]) -> anyhow::Result<Vec<Sample>> {
    let (name, vol, mask) = pair;
    let mut scan = read_volume(vol).with_context(|| format!("reading {}", vol.display()))?;
    let mut truth = read_mask(mask).with_context(|| format!("reading {}", mask.display()))?;
    if scan.extents() != truth.extents() {
        return Err(Error::Contract(format!("{name}: volume {:?} and mask {:?} differ", scan.extents(), truth.extents())).into());
    }
    let target = compatible_extents(scan.extents(), cfg.window[0], cfg.stride, reduction);
    if target != scan.extents() {
        eprintln!("{name}: resampling {:?} to {target:?}", scan.extents());
        scan = resample(&scan, target)?;
        truth = truth.resample_nearest(target);
    }
    Ok(prepare_samples(&scan, &truth, cfg.window[0], cfg.stride)?)
}

fn train_one(
    cfg: &RunConfig,
    pairs: &[Pair],
    train: &[&Pair],
    val: &Pair,
    out: &Path,
) -> anyhow::Result<TrainLog> {
    let net = build_network(cfg)?;
    let reduction = net.spec().reduction();
    let mut train_samples = Vec::new();
    for p in train {
        train_samples.extend(load_samples(p, cfg, reduction)?);
    }
    let val_samples = load_samples(val, cfg, reduction)?;
    println!(
        "training on {} scans ({} windows), validating on {} ({} windows); {} scans in the data set",
        train.len(),
        train_samples.len(),
        val.0,
        val_samples.len(),
        pairs.len()
    );
    let (best, log) = fit(net, &train_samples, &val_samples, &cfg.train)?;
    fs::create_dir_all(out)?;
    best.save(&out.join("net"))?;
    transfer::write_atomic(&out.join(TRAIN_LOG), log.to_csv_untimed().as_bytes())?;
    let mut times = String::from("epoch,seconds\n");
    for r in &log.epochs {
        times.push_str(&format!("{},{:.3}\n", r.epoch, r.seconds));
    }
    transfer::write_atomic(&out.join(EPOCH_TIMES), times.as_bytes())?;
    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "stopped after {} epochs ({:?}); best epoch {} with validation loss {:.5}; final training soft Dice {:.4}",
        log.epochs.len(),
        log.stop_reason,
        log.best_epoch,
        log.best_val_loss(),
        last.train_dice
    );
    Ok(log)
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = load_run_config(a)?;
    let pairs = find_pairs(&a.data)?;
    fs::create_dir_all(&a.out)?;
    transfer::write_atomic(&a.out.join("config.toml"), toml::to_string(&cfg)?.as_bytes())?;
    let mut rm = RunManifest::new("train", Some(cfg.train.seed)).input("data", &a.data);
    if let Some(c) = &a.config {
        rm = rm.input("config", c);
    }
    if a.folds {
        let centers = read_centers(a.centers.as_deref())?;
        let ids: Vec<ScanId> = pairs
            .iter()
            .map(|(n, _, _)| ScanId::new(centers.get(n).cloned().unwrap_or_else(|| "all".into()), n.clone()))
            .collect();
        let plan = make_folds(&ids, cfg.train.seed)?;
        transfer::write_atomic(&a.out.join("folds.toml"), plan.to_toml()?.as_bytes())?;
        let by_name = |id: &ScanId| pairs.iter().find(|p| p.0 == id.name).expect("fold scans come from the data set");
        for (k, fold) in plan.folds.iter().enumerate() {
            println!("fold {k}: testing on {:?}", fold.test.iter().map(|s| &s.name).collect::<Vec<_>>());
            let train: Vec<&Pair> = fold.train.iter().map(by_name).collect();
            let dir = a.out.join(format!("fold{k}"));
            train_one(&cfg, &pairs, &train, by_name(&fold.validation), &dir)?;
            rm = rm.output(&format!("fold{k}"), &dir);
        }
    } else {
        let (train, val): (Vec<&Pair>, &Pair) = if pairs.len() == 1 {
            eprintln!("only one scan: validating on the training scan");
            (vec![&pairs[0]], &pairs[0])
        } else {
            (pairs[..pairs.len() - 1].iter().collect(), &pairs[pairs.len() - 1])
        };
        train_one(&cfg, &pairs, &train, val, &a.out)?;
        rm = rm.output("network", &a.out.join("net")).output("log", &a.out.join(TRAIN_LOG));
    }
    rm.config(&cfg)?.write(&a.out.join(RUN_MANIFEST), started)
}

fn list_masks(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        // `NAME.mask.pv3d` wins over a scalar `NAME.pv3d` in the same directory.
        if let Some(stem) = name.strip_suffix(MASK_SUFFIX) {
            out.insert(stem.to_string(), path);
        } else if let Some(stem) = name.strip_suffix(VOLUME_SUFFIX) {
            out.entry(stem.to_string()).or_insert(path);
        }
    }
    Ok(out)
}

fn cmd_evaluate(pred: &Path, truth: &Path, centers: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let started = Instant::now();
    let preds = list_masks(pred)?;
    let truths = list_masks(truth)?;
    let unmatched: Vec<&String> = preds.keys().filter(|k| !truths.contains_key(*k)).chain(truths.keys().filter(|k| !preds.contains_key(*k))).collect();
    if !unmatched.is_empty() {
        return Err(Error::Contract(format!("unmatched scans: {unmatched:?}")).into());
    }
    let centers = read_centers(centers)?;
    let mut entries = Vec::new();
    for (name, p) in &preds {
        let pm = read_mask(p).with_context(|| format!("reading {}", p.display()))?;
        let tm = read_mask(&truths[name]).with_context(|| format!("reading {}", truths[name].display()))?;
        if pm.extents() != tm.extents() {
            return Err(Error::Contract(format!("{name}: prediction {:?} and truth {:?} differ", pm.extents(), tm.extents())).into());
        }
        let center = centers.get(name).cloned().unwrap_or_else(|| "all".into());
        entries.push(ScanEntry::measure(name.clone(), center, &pm, &tm)?);
    }
    let report = aggregate(&entries)?;
    fs::create_dir_all(out)?;
    transfer::write_atomic(&out.join("report.toml"), report.to_toml()?.as_bytes())?;
    transfer::write_atomic(&out.join("summary.csv"), report.summary_csv().as_bytes())?;
    transfer::write_atomic(&out.join("scans.csv"), report.scans_csv().as_bytes())?;
    for (name, s) in &report.centers {
        println!("{name}: dice {:.4} ± {:.4}, sensitivity {:.4} ± {:.4}", s.dice.mean, s.dice.std, s.sensitivity.mean, s.sensitivity.std);
    }
    let (o, c) = (&report.overall, &report.center_average);
    println!("scan average: dice {:.4} ± {:.4}, sensitivity {:.4} ± {:.4}", o.dice.mean, o.dice.std, o.sensitivity.mean, o.sensitivity.std);
    println!("center average: dice {:.4} ± {:.4}, sensitivity {:.4} ± {:.4}", c.dice.mean, c.dice.std, c.sensitivity.mean, c.sensitivity.std);
    RunManifest::new("evaluate", None)
        .input("pred", pred)
        .input("truth", truth)
        .output("report", &out.join("report.toml"))
        .output("summary", &out.join("summary.csv"))
        .output("plot_data", &out.join("scans.csv"))
        .write(&out.join(RUN_MANIFEST), started)
}

fn cmd_init(out: &Path, width: &str, window: [usize; 3], seed: u64, encoder: Option<&Path>) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = RunConfig {
        width: width.into(),
        window,
        init_seed: Some(seed),
        encoder: encoder.map(Path::to_path_buf),
        ..RunConfig::default()
    };
    let net = build_network(&cfg)?;
    net.save(out)?;
    println!("saved network with {} parameters to {}", net.parameters().iter().map(|p| p.value.numel()).sum::<usize>(), out.display());
    RunManifest::new("init", Some(seed)).output("network", out).config(&cfg)?.write(&out.join(RUN_MANIFEST), started)
}

fn cmd_synth_data(out: &Path, count: usize, extents: [usize; 3], ratio: f64, seed: u64) -> anyhow::Result<()> {
    let started = Instant::now();
    fs::create_dir_all(out)?;
    for (i, (v, m)) in gen_synthetic(seed, count, extents, ratio)?.iter().enumerate() {
        write_volume(&out.join(format!("scan{i:02}{VOLUME_SUFFIX}")), v)?;
        write_mask(&out.join(format!("scan{i:02}{MASK_SUFFIX}")), m)?;
    }
    println!("wrote {count} synthetic scans to {}", out.display());
    RunManifest::new("synth-data", Some(seed)).output("data", out).write(&out.join(RUN_MANIFEST), started)
}

fn cmd_synth_encoder(out: &Path, width: &str, layers: Option<usize>, seed: u64) -> anyhow::Result<()> {
    let started = Instant::now();
    let spec = NetworkSpec::vgg16_unet(parse_width(width)?, [pipeline::DEFAULT_WINDOW, 64, 64]);
    let mut m = synthetic_encoder_2d(&spec, seed)?;
    if let Some(n) = layers {
        m = WeightManifest::from_layers(m.layers().iter().take(n).cloned().collect())?;
    }
    save_manifest(&m, out)?;
    println!("wrote {} 2D layers ({} params) to {}", m.len(), count_params(&m), out.display());
    RunManifest::new("synth-encoder", Some(seed)).output("manifest", out).write(&out.join(RUN_MANIFEST), started)
}

fn cmd_selfcheck() -> anyhow::Result<()> {
    let mut failures = 0;
    let mut report = |name: &str, ok: anyhow::Result<bool>| match ok {
        Ok(true) => println!("PASS {name}"),
        Ok(false) => {
            failures += 1;
            println!("FAIL {name}");
        }
        Err(e) => {
            failures += 1;
            println!("FAIL {name}: {e:#}");
        }
    };
    report("window roundtrip", (|| {
        let v = Volume::from_fn([256, 4, 4], |d, h, w| (d * 16 + h * 4 + w) as f32);
        let ws = decompose(&v, 16, 8)?;
        Ok(ws.len() == 31 && compose(&ws)? == v)
    })());
    report("identity probe", (|| {
        let v = Volume::from_fn([40, 3, 5], |d, h, w| ((d * 7 + h * 3 + w) % 11) as f32);
        Ok(infer(None, &v, 8)?.data() == normalize_scan(&v)?.data())
    })());
    let dir = tempfile::tempdir()?;
    report("weight file roundtrip", (|| {
        let spec = NetworkSpec::toy();
        let m = map_weightset(&synthetic_encoder_2d(&spec, 1)?)?;
        save_manifest(&m, dir.path())?;
        Ok(load_manifest(dir.path())? == m)
    })());
    report("volume file roundtrip", (|| {
        let v = Volume::from_fn([3, 4, 5], |d, h, w| d as f32 - 0.5 * h as f32 + 0.25 * w as f32);
        let m = MaskVolume::new([3, 4, 5], (0..60).map(|i| (i % 3 == 0) as u8).collect())?;
        let (pv, pm) = (dir.path().join("v.pv3d"), dir.path().join("m.pv3d"));
        write_volume(&pv, &v)?;
        write_mask(&pm, &m)?;
        let back = read_volume(&pv)?;
        Ok(back.extents() == v.extents() && back.data() == v.data() && read_mask(&pm)? == m)
    })());
    if failures > 0 {
        return Err(anyhow!("{failures} self-checks failed"));
    }
    Ok(())
}
