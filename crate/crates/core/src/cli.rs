//! The `hsunmix` command line: `synth`, `train`, `eval` and `gradcheck`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradsuite;
use crate::init::{initialize, InitMethod};
use crate::io::{self, DatasetMeta, RunConfig};
use crate::metrics::{b_histogram, evaluate};
use crate::mixing::{gen_dataset, MixingModel};
use crate::model::UnmixingNet;
use crate::training::{config_hash, save_checkpoint, train_with};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "losses.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const INIT_ENDMEMBER_FILE: &str = "init_endmembers.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const B_HIST_FILE: &str = "b_hist.csv";

#[derive(Debug, Parser)]
#[command(name = "hsunmix", version, about = "Nonlinear hyperspectral unmixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train on a dataset directory and write a run directory.
    Train(TrainArgs),
    /// Score a run directory against a dataset's ground truth.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// `clean` or a value in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr(pub Option<f64>);

impl FromStr for Snr {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "clean" {
            return Ok(Self(None));
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Self(Some(v))),
            _ => Err(format!("expected a number of dB or `clean`, got {s:?}")),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// lmm, ppnmm or gbm.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    /// Endmember count.
    #[arg(short = 'R')]
    pub endmembers: usize,
    /// Band count.
    #[arg(short = 'L')]
    pub bands: usize,
    /// Noise level in dB, or `clean`.
    #[arg(long, default_value = "clean")]
    pub snr: Snr,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding `cube.bin`.
    #[arg(short = 'd', long = "data")]
    pub data: PathBuf,
    /// `key = value` configuration file.
    #[arg(short = 'c', long = "config")]
    pub config: Option<PathBuf>,
    /// Output run directory.
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
    /// Endmember count; read from the dataset's meta.json when omitted.
    #[arg(short = 'R')]
    pub endmembers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// vca or farthest_point.
    #[arg(long)]
    pub init: Option<String>,
    /// Zero one encoder branch: spatial or spectral.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print losses every this many epochs; 0 for none.
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory with the ground truth.
    #[arg(short = 'd', long = "truth")]
    pub truth: PathBuf,
    /// Report path; defaults to `<run>/eval.json`.
    #[arg(short = 'o', long = "out")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run only this case.
    #[arg(long)]
    pub op: Option<String>,
    /// Finite-difference step replacing each case's default.
    #[arg(long)]
    pub eps: Option<f32>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let model: MixingModel = a.model.parse()?;
    if a.rows == 0 || a.cols == 0 || a.endmembers == 0 || a.bands == 0 {
        return Err(Error::Config("rows, cols, R and L must be positive".into()));
    }
    let snr_db = a.snr.0.unwrap_or(f64::INFINITY);
    let data = gen_dataset(model, a.rows, a.cols, a.endmembers, a.bands, snr_db, a.seed)?;
    let meta = DatasetMeta {
        model: model.to_string(),
        rows: a.rows,
        cols: a.cols,
        endmembers: a.endmembers,
        bands: a.bands,
        snr_db: a.snr.0,
        seed: a.seed,
    };
    io::save_dataset(&a.out, &data, &meta)?;
    println!("wrote {} ({model}, {}x{}x{}, R={})", a.out.display(), a.rows, a.cols, a.bands, a.endmembers);
    Ok(())
}

/// File configuration, then `--set` overrides, then dedicated flags.
pub fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(init) = &a.init {
        cfg.init = InitMethod::from_str(init)?;
    }
    if let Some(ablate) = &a.ablate {
        cfg.ablation = io::parse_ablation(ablate)?;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn endmember_count(a: &TrainArgs) -> Result<usize> {
    if let Some(r) = a.endmembers {
        return Ok(r);
    }
    let path = a.data.join(io::META_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::Config(format!("no -R given and no readable {}", path.display())))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok(meta.endmembers)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let r = endmember_count(a)?;
    let cube = io::load_dataset_cube(&a.data)?;
    let m0 = initialize(&cube, r, &cfg.init_config())?;
    let mut net = UnmixingNet::new(&cfg.encoder, cube.bands(), &m0, cfg.train.seed)?;
    net.set_ablation(cfg.ablation);
    net.set_nonlinear(cfg.nonlinear);

    io::create_dir(&a.out)?;
    let text = cfg.to_text();
    write(&a.out.join(CONFIG_FILE), &text)?;
    io::save_endmembers(&a.out.join(INIT_ENDMEMBER_FILE), &m0)?;

    let every = a.log_every;
    let record = train_with(&mut net, &cube, &cfg.train, |s, _| {
        if every > 0 && (s.epoch % every == 0 || s.epoch == 1) {
            eprintln!("epoch {:>5}  total {:.6}  re {:.6}  sad {:.6}", s.epoch, s.total, s.re, s.sad);
        }
        Ok(())
    })?;

    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &net.store, record.epochs.len(), &config_hash(&text))?;
    write(&a.out.join(LOSS_FILE), &record.loss_csv())?;
    write(&a.out.join(TIMING_FILE), &record.timing_csv())?;
    let pred = net.predict(&cube)?;
    io::save_endmembers(&a.out.join(io::ENDMEMBER_FILE), &net.endmembers()?)?;
    io::save_tensor(&a.out.join(io::ABUNDANCE_FILE), pred.abundances.tensor())?;
    io::save_tensor(&a.out.join(io::BFIELD_FILE), pred.bfield.tensor())?;
    io::save_abundance_pgms(&a.out, &pred.abundances)?;
    if let Some(last) = record.last() {
        println!("trained {} epochs, final loss {:.6}; wrote {}", last.epoch, last.total, a.out.display());
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let est = io::load_estimates(&a.run)?;
    let truth = io::load_estimates(&a.truth)?;
    if est.endmembers.count() != truth.endmembers.count() {
        return Err(Error::data(format!(
            "run has R={} endmembers, truth has R={}",
            est.endmembers.count(),
            truth.endmembers.count()
        )));
    }
    let report = evaluate(
        &est.endmembers,
        &est.abundances,
        est.bfield.as_ref(),
        &truth.endmembers,
        &truth.abundances,
        truth.bfield.as_ref(),
    )?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join(EVAL_FILE));
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::data(e.to_string()))?;
    write(&out, &(json.clone() + "\n"))?;
    if let Some(b) = &est.bfield {
        let hist = b_histogram(b, a.bins)?;
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        write(&dir.join(B_HIST_FILE), &hist.to_csv())?;
    }
    println!("{json}");
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if let Some(op) = &a.op {
        if !gradsuite::case_names().contains(&op.as_str()) {
            return Err(Error::Config(format!(
                "unknown op {op:?}; known: {}",
                gradsuite::case_names().join(", ")
            )));
        }
    }
    if let Some(eps) = a.eps {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {eps}")));
        }
    }
    let outcomes = gradsuite::run_suite(a.op.as_deref(), a.eps);
    let mut failed = Vec::new();
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        match &o.result {
            Ok(r) => println!(
                "{status} {:<20} eps {:<8} max rel err {:.3e} ({} entries)",
                o.name, o.eps, r.max_rel_err, r.checked
            ),
            Err(e) => println!("{status} {:<20} eps {:<8} error: {e}", o.name, o.eps),
        }
        if !o.passed() {
            failed.push(o.name);
        }
    }
    let worst = outcomes.iter().filter_map(|o| o.max_rel_err()).fold(0.0, f64::max);
    println!(
        "{} of {} cases passed, worst {worst:.3e}, tolerance {:.0e}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        gradsuite::TOLERANCE
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
