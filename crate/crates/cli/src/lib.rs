//! Command-line front end: dataset synthesis, training, reconstruction,
//! evaluation, gradient checks and MAC counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mdae::data::{
    denormalize, import_pgm_stack, load_labels, load_volume, normalize_01, save_volume,
    split_subjects, synth_generate, write_dataset, write_pgm8, Manifest, SliceSet, SplitSpec,
    SynthParams, Volume,
};
use mdae::graph::ModelSpec;
use mdae::metrics::{evaluate_volume, float_str, EvalOptions, MetricReport};
use mdae::model::{conv_macs, count_macs, MergedAutoencoder};
use mdae::tensor::gradcheck;
use mdae::trainer::{fit, history_csv, Checkpoint, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Error carrying the process exit code.
#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            msg: msg.into(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

trait Ctx<T> {
    fn usage(self, what: &str) -> CliResult<T>;
    fn runtime(self, what: &str) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> Ctx<T> for std::result::Result<T, E> {
    fn usage(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::usage(format!("{what}: {e}")))
    }

    fn runtime(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::runtime(format!("{what}: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mdae",
    version,
    about = "Merged multi-decoder convolutional autoencoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired LF/HF dataset.
    Synth(SynthArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Run averaged-decoder inference on every subject of a manifest.
    Reconstruct(ReconstructArgs),
    /// Score predictions against a manifest's HF volumes.
    Evaluate(EvaluateArgs),
    /// Finite-difference and adjoint checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Multiply-accumulate counts per layer.
    Macs(MacsArgs),
    /// Stack 8/16-bit binary PGM slices into one volume file.
    ImportPgm(ImportPgmArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub slices: usize,
    #[arg(long, default_value_t = 1.5)]
    pub blur: f64,
    #[arg(long, default_value_t = 0.7)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// RunConfig JSON; flags below override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decoders: Option<usize>,
    /// Drop the encoder-to-decoder merge connections.
    #[arg(long)]
    pub no_merge: bool,
    /// Channel width of the first encoder block (32 is full size).
    #[arg(long)]
    pub base: Option<usize>,
    /// Subject counts as TRAIN,VAL,TEST.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<[usize; 3]>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Train and validate on the central KEEP slices of each volume only.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest whose LF volumes are reconstructed.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these subject ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Option<Vec<String>>,
    /// Also write 8-bit PGM images of every predicted slice.
    #[arg(long)]
    pub dump_pgm: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<id>.mvol` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Manifest with the ground-truth HF volumes.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram-match each prediction to its LF volume first.
    #[arg(long)]
    pub hm: bool,
    /// Directory of `<id>_labels.mvol` segmentations of the predictions,
    /// scored against the manifest's label maps.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    /// Input height and width.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 32)]
    pub base: usize,
    #[arg(long)]
    pub decoders: Option<usize>,
    #[arg(long)]
    pub no_merge: bool,
    /// Count one convolution instead of the model: IN,OUT,K (on SIZE x SIZE).
    #[arg(long, value_delimiter = ',')]
    pub conv: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ImportPgmArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Output file name, without extension.
    #[arg(long)]
    pub name: String,
    /// Slice images in stacking order.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn parse_split(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| "expected TRAIN,VAL,TEST".to_string())
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Subject counts; `None` splits roughly 56/16/28 percent.
    pub split: Option<[usize; 3]>,
    pub split_seed: u64,
    pub keep: Option<usize>,
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

/// Default train/val/test subject counts for `n` subjects, about 56/16/28 percent.
pub fn default_split(n: usize) -> [usize; 3] {
    let val = ((n * 6) as f64 / 39.0).round().max(1.0) as usize;
    let test = ((n * 11) as f64 / 39.0).round().max(1.0) as usize;
    [n.saturating_sub(val + test), val, test]
}

/// Loads the JSON config (if any) and applies flag overrides. Returns the
/// resolved config and where each overridden key came from.
pub fn resolve_config(
    a: &TrainArgs,
) -> CliResult<(RunConfig, BTreeMap<&'static str, &'static str>)> {
    let mut src = BTreeMap::new();
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).usage(&format!("reading {}", p.display()))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).usage(&format!("parsing {}", p.display()))?;
            if let Some(o) = v.as_object() {
                for k in o.keys() {
                    if let Some(k) = KEYS.iter().find(|&&s| s == k) {
                        src.insert(*k, "json");
                    }
                }
            }
            let mut c: RunConfig =
                serde_json::from_value(v).usage(&format!("config {}", p.display()))?;
            // relative paths in the file are relative to the file
            let dir = p.parent().unwrap_or(Path::new(""));
            for q in [&mut c.manifest, &mut c.out].into_iter().flatten() {
                if q.is_relative() {
                    *q = dir.join(&*q);
                }
            }
            c
        }
        None => RunConfig::default(),
    };
    let mut set = |k: &'static str| {
        src.insert(k, "flag");
    };
    if let Some(v) = &a.manifest {
        cfg.manifest = Some(v.clone());
        set("manifest");
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
        set("out");
    }
    if let Some(v) = a.split {
        cfg.split = Some(v);
        set("split");
    }
    if let Some(v) = a.split_seed {
        cfg.split_seed = v;
        set("split_seed");
    }
    if let Some(v) = a.keep {
        cfg.keep = Some(v);
        set("keep");
    }
    if let Some(b) = a.base {
        let keep = (cfg.spec.decoders, cfg.spec.merge);
        cfg.spec = ModelSpec::with_base(b);
        (cfg.spec.decoders, cfg.spec.merge) = keep;
        set("spec");
    }
    if let Some(v) = a.decoders {
        cfg.spec.decoders = v;
        set("spec");
    }
    if a.no_merge {
        cfg.spec.merge = false;
        set("spec");
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
        set("train");
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
        set("train");
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
        set("train");
    }
    if let Some(v) = a.lr {
        cfg.train.lr0 = v;
        set("train");
    }
    if a.no_shuffle {
        cfg.train.shuffle = false;
        set("train");
    }
    cfg.spec.validate().usage("model spec")?;
    cfg.train.validate().usage("training config")?;
    Ok((cfg, src))
}

const KEYS: [&str; 7] = [
    "manifest",
    "out",
    "split",
    "split_seed",
    "keep",
    "spec",
    "train",
];

/// Written next to the checkpoint after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: Option<usize>,
    #[serde(with = "float_str")]
    pub best_val_psnr: f64,
    pub epochs_run: usize,
    /// Batches on which each decoder had the lowest loss, over the whole run.
    pub selections: Vec<usize>,
    pub aborted: Option<String>,
    pub split: SplitSpec,
    pub config: RunConfig,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.mdae";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).runtime(&format!("writing {}", path.display()))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult {
    let p = SynthParams {
        blur_sigma: a.blur,
        gamma: a.gamma,
        noise_sigma: a.noise,
        size: a.size,
        slices: a.slices,
        count: a.count,
        seed: a.seed,
    };
    let subjects = synth_generate(&p).usage("synthetic parameters")?;
    let m = write_dataset(&a.out, &p, &subjects).runtime("writing dataset")?;
    log::info!(
        "wrote {} subjects of {}x{}x{} to {}",
        m.entries.len(),
        p.slices,
        p.size,
        p.size,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<TrainSummary> {
    let (cfg, src) = resolve_config(a)?;
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    log::info!("resolved config (flag > json > default; non-default sources {src:?}):\n{json}");
    let Some(manifest_path) = &cfg.manifest else {
        return Err(CliError::usage(
            "no manifest given (--manifest or config key \"manifest\")",
        ));
    };
    let Some(out) = cfg.out.clone() else {
        return Err(CliError::usage(
            "no output directory given (--out or config key \"out\")",
        ));
    };
    let manifest =
        Manifest::load(manifest_path).usage(&format!("manifest {}", manifest_path.display()))?;
    let ids = manifest.ids();
    let counts = cfg.split.unwrap_or_else(|| default_split(ids.len()));
    let split =
        split_subjects(&ids, (counts[0], counts[1], counts[2]), cfg.split_seed).usage("split")?;
    let mult = cfg.spec.size_multiple();
    let load = |ids: &[String]| -> CliResult<SliceSet> {
        let subs = manifest.load_subjects(ids).usage("loading subjects")?;
        SliceSet::from_subjects(&subs, cfg.keep, mult).usage("building slices")
    };
    let train = load(&split.train)?;
    let val = load(&split.val)?;
    log::info!(
        "{} train / {} val slices ({} / {} subjects), padded {}x{}",
        train.len(),
        val.len(),
        split.train.len(),
        split.val.len(),
        train.h,
        train.w
    );

    fs::create_dir_all(&out).runtime(&format!("creating {}", out.display()))?;
    write(&out.join("config.json"), json.as_bytes())?;
    let d = cfg.spec.decoders;
    let mut model =
        MergedAutoencoder::<f32>::new(cfg.spec.clone(), cfg.train.seed).usage("model")?;
    log::info!("{} trainable parameters", model.trainable_params());
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let hist_path = out.join(HISTORY_FILE);
    let mut seen = Vec::new();
    let outcome = fit(&mut model, &train, &val, &cfg.train, &mut |rec, best| {
        seen.push(rec.clone());
        if let Some(b) = best {
            b.save(&ckpt_path)?;
        }
        fs::write(&hist_path, history_csv(&seen, d))?;
        Ok(())
    })
    .runtime("training")?;

    fs::write(&hist_path, history_csv(&outcome.history, d)).runtime("writing history")?;
    let mut selections = vec![0; d];
    for r in &outcome.history {
        for (s, n) in selections.iter_mut().zip(&r.selections) {
            *s += n;
        }
    }
    let summary = TrainSummary {
        best_epoch: outcome.best.as_ref().map(|b| b.epoch),
        best_val_psnr: outcome.best.as_ref().map_or(f64::NAN, |b| b.val_psnr),
        epochs_run: outcome.history.len(),
        selections,
        aborted: outcome.abort.as_ref().map(|e| e.to_string()),
        split,
        config: cfg,
    };
    let s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&out.join(SUMMARY_FILE), s.as_bytes())?;
    if let Some(e) = outcome.abort {
        return Err(CliError::runtime(format!(
            "training aborted: {e}; last good checkpoint kept at {}",
            ckpt_path.display()
        )));
    }
    log::info!(
        "best epoch {:?}, val PSNR {:.3} dB",
        summary.best_epoch,
        summary.best_val_psnr
    );
    Ok(summary)
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> CliResult {
    let ck =
        Checkpoint::load(&a.checkpoint).usage(&format!("checkpoint {}", a.checkpoint.display()))?;
    let manifest = Manifest::load(&a.input).usage(&format!("manifest {}", a.input.display()))?;
    let ids = a.subjects.clone().unwrap_or_else(|| manifest.ids());
    let spec = ck.model.spec();
    fs::create_dir_all(&a.out).runtime(&format!("creating {}", a.out.display()))?;
    for id in &ids {
        let e = manifest
            .entry(id)
            .ok_or_else(|| CliError::usage(format!("subject {id} not in manifest")))?;
        let lf = load_volume(&manifest.resolve(&e.lf_path)).usage(&format!("{id} LF volume"))?;
        if spec.in_channels != 1 {
            return Err(CliError::usage(format!(
                "checkpoint expects {} input channels, volume {id} has 1 (dims {:?})",
                spec.in_channels,
                lf.dims()
            )));
        }
        let t = Instant::now();
        let (h, w) = lf.slice_dims();
        let (norm, rec) = normalize_01(&lf);
        let slices: Vec<Vec<f32>> = (0..norm.slices()).map(|i| norm.slice(i).to_vec()).collect();
        let set = SliceSet::from_pairs(h, w, slices.clone(), slices, spec.size_multiple()).usage(
            &format!("{id}: slices {h}x{w} incompatible with checkpoint"),
        )?;
        let pred = mdae::trainer::predict_slices(&ck.model, &set, 16)
            .runtime(&format!("{id}: inference"))?;
        let pv = Volume::from_slices(h, w, &pred).runtime("assembling volume")?;
        save_volume(&a.out.join(format!("{id}.mvol")), &denormalize(&pv, rec))
            .runtime("saving prediction")?;
        if a.dump_pgm {
            let dir = a.out.join("pgm");
            fs::create_dir_all(&dir).runtime("creating pgm directory")?;
            for (i, s) in pred.iter().enumerate() {
                write_pgm8(&dir.join(format!("{id}_{i:03}.pgm")), s, h, w)
                    .runtime("writing pgm")?;
            }
        }
        log::info!(
            "{id}: {} slices of {h}x{w} in {:.3} s",
            lf.slices(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<MetricReport> {
    let manifest = Manifest::load(&a.truth).usage(&format!("manifest {}", a.truth.display()))?;
    let mut ids: Vec<String> = fs::read_dir(&a.pred)
        .usage(&format!("prediction directory {}", a.pred.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let id = name.strip_suffix(".mvol")?;
            (!id.ends_with("_labels")).then(|| id.to_string())
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::usage(format!(
            "no .mvol predictions in {}",
            a.pred.display()
        )));
    }
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| {
            manifest
                .entry(id)
                .is_none_or(|e| a.labels.is_some() && e.labels_path.is_none())
        })
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(CliError::usage(format!(
            "no ground truth for subjects: {}",
            missing.join(", ")
        )));
    }
    let mut volumes = Vec::new();
    for id in &ids {
        let e = manifest.entry(id).expect("checked above");
        let pred =
            load_volume(&a.pred.join(format!("{id}.mvol"))).usage(&format!("{id} prediction"))?;
        let truth = load_volume(&manifest.resolve(&e.hf_path)).usage(&format!("{id} HF volume"))?;
        let lf = if a.hm {
            Some(load_volume(&manifest.resolve(&e.lf_path)).usage(&format!("{id} LF volume"))?)
        } else {
            None
        };
        let labels = match (&a.labels, &e.labels_path) {
            (Some(dir), Some(tp)) => Some((
                load_labels(&dir.join(format!("{id}_labels.mvol")))
                    .usage(&format!("{id} predicted labels"))?,
                load_labels(&manifest.resolve(tp)).usage(&format!("{id} reference labels"))?,
            )),
            _ => None,
        };
        let vm = evaluate_volume(
            id,
            &pred,
            &truth,
            lf.as_ref(),
            EvalOptions { apply_hm: a.hm },
            labels.as_ref().map(|(p, t)| (p, t)),
        )
        .usage(&format!("evaluating {id}"))?;
        log::info!(
            "{id}: PSNR {} dB, SSIM {:.4}",
            float_str::display(vm.psnr),
            vm.ssim
        );
        volumes.push(vm);
    }
    let report = MetricReport::aggregate(volumes, a.hm);
    fs::create_dir_all(&a.out).runtime(&format!("creating {}", a.out.display()))?;
    write(
        &a.out.join("report.json"),
        report.to_json().runtime("report")?.as_bytes(),
    )?;
    write(&a.out.join("report.csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let grads = gradcheck::suite(a.seed).runtime("gradient check")?;
    let adj = gradcheck::adjoint_suite(a.seed).runtime("adjoint check")?;
    let mut failed = Vec::new();
    for r in &grads {
        let ok = r.passed();
        println!(
            "{} {:<32} {:<16} max rel err {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.op,
            r.dims,
            r.max_rel_err()
        );
        if !ok {
            failed.push(r.op.clone());
        }
    }
    for r in &adj {
        let ok = r.passed();
        println!(
            "{} {:<32} adjoint          rel err {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.op,
            r.rel_err()
        );
        if !ok {
            failed.push(format!("{} (adjoint)", r.op));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient checks failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_macs(a: &MacsArgs) -> CliResult<u64> {
    if let Some(c) = &a.conv {
        if c.len() != 3 {
            return Err(CliError::usage(format!(
                "--conv takes IN,OUT,K, got {} values",
                c.len()
            )));
        }
        let n = conv_macs(c[0], c[1], c[2], a.size, a.size);
        println!("{n}");
        return Ok(n);
    }
    let mut spec = ModelSpec::with_base(a.base);
    if let Some(d) = a.decoders {
        spec.decoders = d;
    }
    spec.merge = !a.no_merge;
    let r = count_macs(&spec, a.size, a.size).usage("mac count")?;
    for l in &r.layers {
        println!(
            "{:<28} {:>4} -> {:<4} {}x{} {:>14}",
            l.name, l.in_channels, l.out_channels, l.height, l.width, l.macs
        );
    }
    println!("total {}", r.total);
    Ok(r.total)
}

pub fn cmd_import_pgm(a: &ImportPgmArgs) -> CliResult {
    let vol = import_pgm_stack(&a.inputs).usage("importing pgm")?;
    fs::create_dir_all(&a.out).runtime(&format!("creating {}", a.out.display()))?;
    let path = a.out.join(format!("{}.mvol", a.name));
    save_volume(&path, &vol).runtime("saving volume")?;
    log::info!("wrote {:?} volume to {}", vol.dims(), path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(drop),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Macs(a) => cmd_macs(a).map(drop),
        Command::ImportPgm(a) => cmd_import_pgm(a),
    }
}
