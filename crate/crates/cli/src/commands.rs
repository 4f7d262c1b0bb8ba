//! Subcommand implementations. Each returns the text it printed so tests can
//! inspect it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use patchlab::autodiff::Real;
use patchlab::data::{read_descriptors, read_ubc, synth_generate, write_descriptors, write_ubc, DescriptorSet, PatchBatch, UBC_PATCH, UNLABELED};
use patchlab::gradlab::{decomposition_audit, magnitude_curves, theta_histogram};
use patchlab::metrics::{evaluate, fpr_at_recall, matching_map, matching_split, retrieval_map, verification_scores, Metrics, Polarity};
use patchlab::net::{load_checkpoint, NetworkParams, NormScheme, Scale, Topology};
use patchlab::simgeo::MeasureKind;
use patchlab::train::{self, load_run, RunOutput, RunState, METRICS_FILE};
use patchlab::{seed, Error};

use crate::config::RunConfigFile;
use crate::verify::{self, Fault};
use crate::CliError;

pub type CmdResult = Result<String, CliError>;

pub const CONFIG_FILE: &str = "config.toml";

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn check_precision(bits: u32) -> Result<(), CliError> {
    match bits {
        32 | 64 => Ok(()),
        _ => Err(CliError::Config(format!("precision must be 32 or 64, got {bits}"))),
    }
}

/// The dataset a run config names. Synthetic data is seeded from the run seed.
pub fn load_dataset(cfg: &RunConfigFile) -> Result<PatchBatch, CliError> {
    let d = &cfg.data;
    Ok(match d.source.as_str() {
        "ubc" => {
            let path = d.path.as_ref().ok_or_else(|| CliError::Config("data.path is required".into()))?;
            read_ubc(path)?
        }
        _ => {
            let size = Topology::for_scale(Scale::parse(&cfg.train.scale)?).input_size;
            synth_generate(
                seed::derive(cfg.train.seed, "data"),
                d.identities,
                d.patches_per_identity,
                size,
            )?
        }
    })
}

/// `train`: runs (or resumes) a training run into `cfg.output.dir`.
pub fn train_cmd(cfg: &RunConfigFile, resume: bool) -> CmdResult {
    let tc = cfg.train_config()?;
    let dataset = load_dataset(cfg)?;
    let out = RunOutput::new(&cfg.output.dir)?;
    write_file(&out.dir.join(CONFIG_FILE), &cfg.to_toml())?;
    match cfg.output.precision {
        64 => train_typed::<f64>(&tc, &dataset, &out, resume),
        _ => train_typed::<f32>(&tc, &dataset, &out, resume),
    }
}

fn train_typed<T: Real>(tc: &train::TrainConfig, dataset: &PatchBatch, out: &RunOutput, resume: bool) -> CmdResult {
    let state: RunState<T> = if resume && out.dir.join(train::STATE_FILE).is_file() {
        let st = load_run::<T>(&out.dir)?;
        train::resume(tc, dataset, st, Some(out))?
    } else {
        train::train(tc, dataset, Some(out))?
    };
    let mut s = String::new();
    let _ = writeln!(s, "steps: {}", state.step);
    if let Some(last) = state.history.last() {
        let _ = writeln!(s, "final loss_total: {}", last.loss_total);
    }
    if let Some(v) = state.history.iter().rev().find_map(|r| r.val_fpr95) {
        let _ = writeln!(s, "final val_fpr95: {v}");
    }
    let _ = writeln!(s, "wrote {}", out.dir.join(METRICS_FILE).display());
    Ok(s)
}

/// Expected topology from optional `--scale`/`--norm` flags; both are
/// needed to pin a census.
fn expected(scale: Option<&str>, norm: Option<&str>, stored: &Path) -> Result<Option<(Topology, NormScheme)>, CliError> {
    match (scale, norm) {
        (None, None) => Ok(None),
        (s, n) => {
            // Fill the missing half from the checkpoint itself.
            let probe = load_checkpoint::<f32>(stored, None)?;
            let topo = match s {
                Some(s) => Topology::for_scale(Scale::parse(s)?),
                None => probe.topology.clone(),
            };
            let norm = match n {
                Some(n) => NormScheme::parse(n)?,
                None => probe.norm,
            };
            Ok(Some((topo, norm)))
        }
    }
}

fn load_net<T: Real>(path: &Path, scale: Option<&str>, norm: Option<&str>) -> Result<NetworkParams<T>, CliError> {
    let exp = expected(scale, norm, path)?;
    Ok(load_checkpoint::<T>(path, exp.as_ref().map(|(t, n)| (t, *n)))?)
}

fn describe_all<T: Real>(net: &NetworkParams<T>, patches: &PatchBatch) -> Result<DescriptorSet, CliError> {
    if patches.size != net.topology.input_size {
        return Err(Error::InvalidArgument(format!(
            "patches are {0}x{0}, network expects {1}x{1}",
            patches.size, net.topology.input_size
        ))
        .into());
    }
    let idx: Vec<usize> = (0..patches.len()).collect();
    Ok(train::descriptor_set(net, patches, &idx)?)
}

pub struct ExtractArgs<'a> {
    pub checkpoint: &'a Path,
    pub patches: &'a Path,
    pub out: &'a Path,
    pub scale: Option<&'a str>,
    pub norm: Option<&'a str>,
    pub precision: u32,
}

/// `extract`: descriptors of every patch in a container.
pub fn extract_cmd(a: &ExtractArgs) -> CmdResult {
    check_precision(a.precision)?;
    let set = match a.precision {
        64 => describe_all(&load_net::<f64>(a.checkpoint, a.scale, a.norm)?, &read_ubc(a.patches)?)?,
        _ => describe_all(&load_net::<f32>(a.checkpoint, a.scale, a.norm)?, &read_ubc(a.patches)?)?,
    };
    write_descriptors(a.out, &set)?;
    Ok(format!("wrote {} descriptors of dimension {} to {}\n", set.len(), set.dim, a.out.display()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Verification,
    Matching,
    Retrieval,
    All,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task, CliError> {
        match s {
            "verification" => Ok(Task::Verification),
            "matching" => Ok(Task::Matching),
            "retrieval" => Ok(Task::Retrieval),
            "all" => Ok(Task::All),
            _ => Err(CliError::Config(format!(
                "task must be verification, matching, retrieval or all, got {s:?}"
            ))),
        }
    }
}

pub enum EvalInput<'a> {
    Descriptors(&'a Path),
    Network {
        checkpoint: &'a Path,
        patches: &'a Path,
        precision: u32,
    },
}

/// Metrics for one task. Unrequested fields are NaN (counts 0).
pub fn evaluate_set(set: &DescriptorSet, task: Task) -> Result<Metrics, CliError> {
    if set.labels.contains(&UNLABELED) {
        return Err(Error::InvalidArgument("evaluation needs identity labels on every descriptor".into()).into());
    }
    if task == Task::All {
        return Ok(evaluate(set)?);
    }
    let mut m = Metrics {
        fpr95: f64::NAN,
        map_matching: f64::NAN,
        map_retrieval: f64::NAN,
        positives: 0,
        negatives: 0,
        queries: 0,
    };
    match task {
        Task::Verification => {
            let (pos, neg) = verification_scores(set)?;
            m.fpr95 = fpr_at_recall(&pos, &neg, 0.95, Polarity::SmallerIsSimilar)?;
            m.positives = pos.len();
            m.negatives = neg.len();
        }
        Task::Matching => {
            let (q, g) = matching_split(set);
            if q.is_empty() {
                return Err(Error::InvalidArgument("no identity has two descriptors".into()).into());
            }
            m.map_matching = matching_map(&set.subset(&q), &set.subset(&g))?;
            m.queries = q.len();
        }
        Task::Retrieval => m.map_retrieval = retrieval_map(set)?,
        Task::All => unreachable!(),
    }
    Ok(m)
}

/// `evaluate`: prints the metrics CSV and optionally writes it.
pub fn evaluate_cmd(input: EvalInput, task: Task, out: Option<&Path>) -> CmdResult {
    let set = match input {
        EvalInput::Descriptors(p) => read_descriptors(p)?,
        EvalInput::Network {
            checkpoint,
            patches,
            precision,
        } => {
            check_precision(precision)?;
            let batch = read_ubc(patches)?;
            match precision {
                64 => describe_all(&load_net::<f64>(checkpoint, None, None)?, &batch)?,
                _ => describe_all(&load_net::<f32>(checkpoint, None, None)?, &batch)?,
            }
        }
    };
    let m = evaluate_set(&set, task)?;
    let text = format!("{}\n{}\n", Metrics::CSV_HEADER, m.csv_row());
    if let Some(p) = out {
        write_file(p, &text)?;
    }
    Ok(text)
}

fn parse_alphas(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad alpha {a:?} in --alphas")))
        })
        .collect()
}

/// `analyze curves`
pub fn curves_cmd(alphas: &str, resolution: usize, out: Option<&Path>) -> CmdResult {
    let c = magnitude_curves(&parse_alphas(alphas)?, resolution)?;
    let text = c.to_csv();
    if let Some(p) = out {
        write_file(p, &text)?;
        return Ok(format!("{}\nwrote {} rows to {}\n", c.header(), c.theta.len(), p.display()));
    }
    Ok(text)
}

pub struct HistogramArgs<'a> {
    pub checkpoint: &'a Path,
    /// UBC container; synthetic data when absent.
    pub patches: Option<&'a Path>,
    pub identities: usize,
    pub batches: usize,
    pub batch_identities: usize,
    pub bins: usize,
    pub seed: u64,
    pub out: Option<&'a Path>,
}

/// `analyze histogram`
pub fn histogram_cmd(a: &HistogramArgs) -> CmdResult {
    let net = load_checkpoint::<f32>(a.checkpoint, None)?;
    let data = match a.patches {
        Some(p) => read_ubc(p)?,
        None => synth_generate(seed::derive(a.seed, "data"), a.identities, 2, net.topology.input_size)?,
    };
    let h = theta_histogram(&net, &data, a.batches, a.batch_identities, a.bins, a.seed)?;
    let text = h.to_csv();
    let half = std::f64::consts::FRAC_PI_2;
    let summary = format!(
        "# {}\n# samples: {} positive, {} negative; fraction with theta <= pi/2: {:.4}; KS separation {:.4}\n",
        h.source,
        h.theta_pos.len(),
        h.theta_neg.len(),
        h.fraction_at_most(half),
        h.separation()
    );
    if let Some(p) = a.out {
        write_file(p, &text)?;
        return Ok(summary);
    }
    Ok(format!("{summary}{text}"))
}

/// `analyze decompose`: parallel-component audit for every measure kind.
pub fn decompose_cmd(pairs: usize, dim: usize, alpha: f64, seed: u64) -> CmdResult {
    let mut s = String::from("kind,pairs,max_parallel_ratio,mean_parallel_ratio\n");
    let mut worst_normalized = 0f64;
    for kind in MeasureKind::all(alpha)? {
        let a = decomposition_audit(kind, pairs, dim, seed)?;
        let _ = writeln!(s, "{},{},{:e},{:e}", kind.name(), a.pairs, a.max_ratio, a.mean_ratio);
        if kind.is_normalized() {
            worst_normalized = worst_normalized.max(a.max_ratio);
        }
    }
    let _ = writeln!(
        s,
        "# normalized measures: max parallel ratio {worst_normalized:e} over {pairs} pairs"
    );
    Ok(s)
}

/// `verify`: the oracle table; fails naming the failing checks.
pub fn verify_cmd(fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        None => None,
        Some(f) => Some(Fault::parse(f).ok_or_else(|| CliError::Config(format!("unknown fault {f:?} (norm-inner-sign)")))?),
    };
    let report = verify::run(fault);
    let mut s = report.table();
    let _ = writeln!(s, "{} checks in {:.1} s", report.rows.len(), report.seconds);
    if report.all_pass() {
        Ok(s)
    } else {
        print!("{s}");
        Err(CliError::VerifyFailed(report.failures().join(", ")))
    }
}

/// `generate`: writes a synthetic dataset as a UBC-format container.
pub fn generate_cmd(out: &Path, identities: usize, per_identity: usize, seed_value: u64) -> CmdResult {
    let batch = synth_generate(seed::derive(seed_value, "data"), identities, per_identity, UBC_PATCH)?;
    write_ubc(out, &batch)?;
    Ok(format!("wrote {} patches of {identities} identities to {}\n", batch.len(), out.display()))
}
