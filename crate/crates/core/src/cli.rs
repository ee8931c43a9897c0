// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface: `gen-data`, `train`, `eval`, `steer`, `code` and
//! `inspect`, plus the `concept` and `pairs` helpers that feed `steer`.
//!
//! Usage errors (bad flags, schema violations, missing inputs) exit with
//! status 2; runtime failures exit with status 1.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::coding::{sparse_code, CoderConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::metrics::{
    both_sign_coverage, dictionary_recovery, encode_rows, loss_recovered, model_nmse,
    probe_accuracy, LossRecoveredReport, ToyHead,
};
use crate::model::{encode, SaeVariant};
use crate::steering::{dim_extract, steer, ConceptVector, SteerRequest};
use crate::storage::{write_exclusive, ActivationStore, Checkpoint, Container};
use crate::synth::{generate, make_contrast_pairs, GroundTruth, SignMode};
use crate::trainer::{train, TrainOutcome};

/// Exit status for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for runtime failures.
pub const EXIT_RUNTIME: i32 = 1;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "PROXSAE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "proxsae",
    version,
    about = "Proximal-operator sparse autoencoder lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic activation store and its ground-truth sidecar.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth sidecar path (default: `<out>.truth`).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train an SAE on an activation store.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output.
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON training report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a table and writes JSON.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed` when recomputing the config hash.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth sidecar enabling recovery, probing and loss recovered.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate even if the checkpoint was trained under another config.
        #[arg(long)]
        force: bool,
    },
    /// Apply an intervention to every row of a store.
    Steer {
        #[arg(long, value_enum)]
        mode: SteerMode,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long)]
        latent: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        clamp_value: Option<f64>,
        /// Clamp by patching `x + D(z_c − z)` instead of returning `x̂`.
        #[arg(long)]
        additive: bool,
        #[arg(long)]
        concept_file: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a concept vector from class stores (DiM) or a decoder atom.
    Concept {
        /// Positive-class store.
        #[arg(long, requires = "neg")]
        pos: Option<PathBuf>,
        /// Negative-class store.
        #[arg(long)]
        neg: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["pos", "neg"], requires = "atom")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        atom: Option<usize>,
        #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
        sign: i8,
        #[arg(long, default_value = "")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit contrast-pair stores for one planted concept.
    Pairs {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        concept: usize,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pos: PathBuf,
        #[arg(long)]
        neg: PathBuf,
    },
    /// Iterative proximal-gradient coding against a checkpoint's decoder.
    Code {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Leading rows to code (default: all).
        #[arg(long)]
        rows: Option<usize>,
        /// Regularizer weight λ for relu and jumprelu objectives.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 500)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Print the header and metadata of any container file.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SteerMode {
    Add,
    Ablate,
    Clamp,
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage()
                || matches!(e, Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound)
            {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.train.threads = threads_from_env()?;
    Ok(cfg)
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(1),
    }
}

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "input file {} does not exist",
            path.display()
        )))
    }
}

fn truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".truth");
    PathBuf::from(s)
}

/// Runs one command and returns its standard output.
pub fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::GenData {
            config,
            seed,
            out,
            truth,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.validate()?;
            let (store, gt) = generate(&cfg.synth)?;
            store.write(&out)?;
            let tpath = truth.unwrap_or_else(|| truth_path(&out));
            gt.write(&tpath)?;
            Ok(format!(
                "wrote {} rows x {} dims to {}\nwrote ground truth to {}\n",
                store.n_rows(),
                store.dim(),
                out.display(),
                tpath.display()
            ))
        }
        Command::Train {
            config,
            seed,
            data,
            out,
            report,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            require_input(&data)?;
            let store = ActivationStore::read(&data)?;
            if store.dim() != cfg.synth.d {
                return Err(Error::Config(format!(
                    "store dimension {} does not match config synth.d = {}",
                    store.dim(),
                    cfg.synth.d
                )));
            }
            let variant = cfg.model.variant();
            let outcome = match train(&store, &cfg.train, &variant, cfg.latents()) {
                Ok(o) => o,
                Err(Error::TrainDiverged { step, last_good }) => {
                    let ck = Checkpoint {
                        params: (*last_good).clone(),
                        variant,
                        step: step as u64,
                        config_hash: cfg.hash(),
                        rng: crate::linalg::Rng::from_seed(cfg.train.seed).state(),
                    };
                    let mut p = out.as_os_str().to_owned();
                    p.push(".last_good");
                    ck.write(Path::new(&p))?;
                    return Err(Error::TrainDiverged { step, last_good });
                }
                Err(e) => return Err(e),
            };
            write_outcome(&outcome, &cfg, &variant, &out, report.as_deref())
        }
        Command::Eval {
            config,
            seed,
            checkpoint,
            data,
            truth,
            out,
            force,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            require_input(&checkpoint)?;
            require_input(&data)?;
            let ck = Checkpoint::read(&checkpoint)?;
            if ck.config_hash != cfg.hash() && !force {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match the current config {}; pass --force to evaluate anyway",
                    ck.config_hash,
                    cfg.hash()
                )));
            }
            let store = ActivationStore::read(&data)?;
            let gt = match truth {
                Some(p) => {
                    require_input(&p)?;
                    Some(GroundTruth::read(&p)?)
                }
                None => None,
            };
            let report = evaluate(&ck, &store, gt.as_ref(), &cfg)?;
            if let Some(p) = out {
                let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
                json.push('\n');
                write_exclusive(&p, json.as_bytes())?;
            }
            Ok(report.table())
        }
        Command::Steer {
            mode,
            alpha,
            latent,
            clamp_value,
            additive,
            concept_file,
            checkpoint,
            input,
            output,
        } => {
            let req = match mode {
                SteerMode::Add => SteerRequest::Add { alpha },
                SteerMode::Ablate => SteerRequest::Ablate { alpha },
                SteerMode::Clamp => SteerRequest::Clamp {
                    latent: latent
                        .ok_or_else(|| Error::Config("--latent is required for clamp".into()))?,
                    value: clamp_value.ok_or_else(|| {
                        Error::Config("--clamp-value is required for clamp".into())
                    })?,
                    additive,
                },
            };
            let cv = match (&req, concept_file) {
                (SteerRequest::Clamp { .. }, _) => None,
                (_, Some(p)) => {
                    require_input(&p)?;
                    Some(ConceptVector::read(&p)?)
                }
                (_, None) => {
                    return Err(Error::Config(
                        "--concept-file is required for add and ablate".into(),
                    ))
                }
            };
            let ck = match (&req, checkpoint) {
                (SteerRequest::Clamp { .. }, Some(p)) => {
                    require_input(&p)?;
                    Some(Checkpoint::read(&p)?)
                }
                (SteerRequest::Clamp { .. }, None) => {
                    return Err(Error::Config("--checkpoint is required for clamp".into()))
                }
                _ => None,
            };
            require_input(&input)?;
            let store = ActivationStore::read(&input)?;
            let model = ck.as_ref().map(|c| (&c.params, &c.variant));
            let mut rows = Vec::with_capacity(store.n_rows() * store.dim());
            for r in 0..store.n_rows() {
                rows.extend(steer(&store.row_vec(r), &req, cv.as_ref(), model)?.into_vec());
            }
            let mut meta = store.meta.clone();
            meta.extra.insert(
                "steer".into(),
                serde_json::to_value(req).expect("request serializes"),
            );
            let steered = ActivationStore::from_matrix(
                &Matrix::new(store.n_rows(), store.dim(), rows)?,
                meta,
            )?;
            steered.write(&output)?;
            Ok(format!(
                "steered {} rows into {}\n",
                steered.n_rows(),
                output.display()
            ))
        }
        Command::Concept {
            pos,
            neg,
            checkpoint,
            atom,
            sign,
            layer,
            out,
        } => {
            let cv = match (pos, neg, checkpoint, atom) {
                (Some(p), Some(n), None, _) => {
                    require_input(&p)?;
                    require_input(&n)?;
                    let rows = |s: ActivationStore| {
                        (0..s.n_rows()).map(|r| s.row_vec(r)).collect::<Vec<_>>()
                    };
                    let res = dim_extract(
                        &rows(ActivationStore::read(&p)?),
                        &rows(ActivationStore::read(&n)?),
                    )?;
                    let mut cv = res.concept;
                    cv.layer = layer;
                    cv
                }
                (None, None, Some(c), Some(i)) => {
                    require_input(&c)?;
                    ConceptVector::from_atom(&Checkpoint::read(&c)?.params, i, sign, layer)?
                }
                _ => {
                    return Err(Error::Config(
                        "give either --pos and --neg, or --checkpoint and --atom".into(),
                    ))
                }
            };
            cv.write(&out)?;
            Ok(format!("wrote concept vector to {}\n", out.display()))
        }
        Command::Pairs {
            truth,
            concept,
            n,
            magnitude,
            seed,
            pos,
            neg,
        } => {
            require_input(&truth)?;
            let gt = GroundTruth::read(&truth)?;
            let pairs = make_contrast_pairs(&gt, concept, n, magnitude, seed)?;
            for (set, path, side) in [
                (&pairs.positive, &pos, "positive"),
                (&pairs.negative, &neg, "negative"),
            ] {
                let rows: Vec<Vec<f64>> = set.iter().map(|v| v.as_slice().to_vec()).collect();
                let mut meta = crate::storage::StoreMeta::synthetic(format!(
                    "contrast pairs, concept {concept}, {side}"
                ));
                meta.extra.insert("concept".into(), concept.into());
                ActivationStore::from_matrix(&Matrix::from_rows(&rows)?, meta)?.write(path)?;
            }
            Ok(format!("wrote {n} contrast pairs for concept {concept}\n"))
        }
        Command::Code {
            checkpoint,
            data,
            out,
            rows,
            lambda,
            max_iters,
            tol,
        } => {
            require_input(&checkpoint)?;
            require_input(&data)?;
            let ck = Checkpoint::read(&checkpoint)?;
            let store = ActivationStore::read(&data)?;
            if store.dim() != ck.params.d() {
                return Err(Error::Config(format!(
                    "store dimension {} does not match checkpoint d = {}",
                    store.dim(),
                    ck.params.d()
                )));
            }
            let dict = &ck.params.dict;
            let spec = ck.variant.spec;
            let default_weight = CoderConfig::one_step(spec).lambda_weight;
            let mut cfg = CoderConfig::for_dictionary(dict, spec, lambda.unwrap_or(default_weight));
            cfg.max_iters = max_iters;
            cfg.tol = tol;
            let n = rows.unwrap_or(store.n_rows()).min(store.n_rows());
            let mut codes = Vec::with_capacity(n * ck.params.p());
            let (mut iters, mut obj) = (0usize, 0.0);
            for r in 0..n {
                let sc = sparse_code(&store.row_vec(r), dict, &ck.params.b_dec, &cfg)?;
                iters += sc.iterations;
                obj += sc.objective;
                codes.extend(sc.code.into_vec());
            }
            let mut meta = crate::storage::StoreMeta::synthetic("iterative sparse codes");
            meta.extra.insert(
                "coder".into(),
                serde_json::to_value(spec).expect("spec serializes"),
            );
            ActivationStore::from_matrix(&Matrix::new(n, ck.params.p(), codes)?, meta)?
                .write(&out)?;
            let denom = n.max(1) as f64;
            Ok(format!(
                "coded {n} rows: mean iterations {:.1}, mean objective {:.6}\n",
                iters as f64 / denom,
                obj / denom
            ))
        }
        Command::Inspect { path } => {
            require_input(&path)?;
            inspect(&path)
        }
    }
}

fn write_outcome(
    outcome: &TrainOutcome,
    cfg: &RunConfig,
    variant: &SaeVariant,
    out: &Path,
    report: Option<&Path>,
) -> Result<String> {
    let ck = Checkpoint {
        params: outcome.params.clone(),
        variant: *variant,
        step: outcome.steps as u64,
        config_hash: cfg.hash(),
        rng: outcome.rng,
    };
    ck.write(out)?;
    let mut msg = format!("wrote checkpoint to {}\n", out.display());
    if let Some(p) = report {
        write_exclusive(p, outcome.report.to_jsonl().as_bytes())?;
        let _ = writeln!(msg, "wrote report to {}", p.display());
    }
    if let Some(last) = outcome.report.records.last() {
        let _ = writeln!(
            msg,
            "final step {}: mse {:.6e} nmse {:.6}",
            last.step, last.mse, last.nmse
        );
    }
    Ok(msg)
}

fn inspect(path: &Path) -> Result<String> {
    let c = Container::read(path)?;
    let kind = c.kind(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "kind: {kind}");
    match kind.as_str() {
        "checkpoint" => {
            let ck = Checkpoint::from_container(c, path)?;
            let _ = writeln!(s, "d: {}", ck.params.d());
            let _ = writeln!(s, "p: {}", ck.params.p());
            let _ = writeln!(
                s,
                "variant: {}",
                serde_json::to_string(&ck.variant).expect("variant serializes")
            );
            let _ = writeln!(s, "step: {}", ck.step);
            let _ = writeln!(s, "config_hash: {}", ck.config_hash);
        }
        "ground_truth" => {
            let gt = GroundTruth::from_container(c, path)?;
            let _ = writeln!(s, "d: {}", gt.atoms.rows());
            let _ = writeln!(s, "p_true: {}", gt.atoms.cols());
            let _ = writeln!(s, "n_samples: {}", gt.codes.rows());
            let _ = writeln!(
                s,
                "spec: {}",
                serde_json::to_string(&gt.spec).expect("spec serializes")
            );
        }
        _ => {
            let store = ActivationStore::from_container(c, path)?;
            let _ = writeln!(s, "n_rows: {}", store.n_rows());
            let _ = writeln!(s, "dim: {}", store.dim());
            let _ = writeln!(s, "model: {}", store.meta.model);
            let layer = store
                .meta
                .layer
                .map_or_else(|| "-".to_string(), |l| l.to_string());
            let _ = writeln!(s, "layer: {layer}");
            let _ = writeln!(s, "source: {}", store.meta.source);
            for (k, v) in &store.meta.extra {
                let _ = writeln!(s, "{k}: {v}");
            }
        }
    }
    Ok(s)
}

/// Metrics written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub d: usize,
    pub p: usize,
    pub step: u64,
    pub eval_rows: usize,
    pub nmse: f64,
    pub l0_mean: f64,
    pub dead_latents: usize,
    pub negative_fraction: f64,
    pub truth: Option<TruthMetrics>,
}

/// Metrics that need the planted ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthMetrics {
    pub loss_recovered: LossRecoveredReport,
    pub recovered: usize,
    pub p_true: usize,
    pub fragmentation_pairs: usize,
    /// Mean held-out accuracy over concepts of the sign probe on SAE codes.
    pub probe_codes: Option<f64>,
    /// Same probe on raw activations.
    pub probe_raw: Option<f64>,
    /// Mean over concepts of the best latent's both-sign coverage.
    pub coverage_mean: f64,
    pub coverage_max: f64,
}

impl EvalReport {
    /// Fixed-order, human-readable table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("variant", self.variant.clone()),
            ("d", self.d.to_string()),
            ("latents", self.p.to_string()),
            ("step", self.step.to_string()),
            ("eval_rows", self.eval_rows.to_string()),
            ("nmse", format!("{:.6}", self.nmse)),
            ("l0_mean", format!("{:.3}", self.l0_mean)),
            ("dead_latents", self.dead_latents.to_string()),
            (
                "negative_fraction",
                format!("{:.4}", self.negative_fraction),
            ),
        ];
        if let Some(t) = &self.truth {
            let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            rows.extend([
                ("loss_recovered", format!("{:.6}", t.loss_recovered.score)),
                ("h_orig", format!("{:.6}", t.loss_recovered.h_orig)),
                ("h_star", format!("{:.6}", t.loss_recovered.h_star)),
                ("h_zero", format!("{:.6}", t.loss_recovered.h_zero)),
                ("recovered", format!("{}/{}", t.recovered, t.p_true)),
                ("fragmentation_pairs", t.fragmentation_pairs.to_string()),
                ("probe_codes", opt(t.probe_codes)),
                ("probe_raw", opt(t.probe_raw)),
                ("coverage_mean", format!("{:.4}", t.coverage_mean)),
                ("coverage_max", format!("{:.4}", t.coverage_max)),
            ]);
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v}\n"))
            .collect()
    }
}

/// Computes the eval metrics on the leading `metrics.eval_rows` rows.
pub fn evaluate(
    ck: &Checkpoint,
    store: &ActivationStore,
    gt: Option<&GroundTruth>,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let (params, variant) = (&ck.params, &ck.variant);
    if store.dim() != params.d() {
        return Err(Error::Config(format!(
            "store dimension {} does not match checkpoint d = {}",
            store.dim(),
            params.d()
        )));
    }
    let m = &cfg.metrics;
    let n = m.eval_rows.min(store.n_rows());
    let rows: Vec<usize> = (0..n).collect();
    let x = store.select_rows(&rows).to_matrix()?;
    let codes = encode_rows(&x, params, variant)?;
    let nmse = model_nmse(&x, params, variant)?;
    let mut fired = vec![false; params.p()];
    let (mut nnz, mut neg) = (0usize, 0usize);
    for r in 0..n {
        for (i, &z) in codes.row(r).iter().enumerate() {
            if z != 0.0 {
                nnz += 1;
                fired[i] = true;
                neg += usize::from(z < 0.0);
            }
        }
    }
    let truth = match gt {
        Some(gt) => Some(truth_metrics(gt, &x, &rows, ck, cfg)?),
        None => None,
    };
    Ok(EvalReport {
        variant: variant.name().into(),
        d: params.d(),
        p: params.p(),
        step: ck.step,
        eval_rows: n,
        nmse,
        l0_mean: nnz as f64 / n.max(1) as f64,
        dead_latents: fired.iter().filter(|f| !**f).count(),
        negative_fraction: if nnz == 0 {
            0.0
        } else {
            neg as f64 / nnz as f64
        },
        truth,
    })
}

fn truth_metrics(
    gt: &GroundTruth,
    x: &Matrix,
    rows: &[usize],
    ck: &Checkpoint,
    cfg: &RunConfig,
) -> Result<TruthMetrics> {
    let (params, variant) = (&ck.params, &ck.variant);
    let m = &cfg.metrics;
    if gt.atoms.rows() != params.d() || gt.codes.rows() < rows.len() {
        return Err(Error::Config(
            "ground truth does not match the store".into(),
        ));
    }
    let (all_labels, classes) = gt.dominant_concept_labels();
    let labels: Vec<usize> = rows.iter().map(|&r| all_labels[r]).collect();
    let head = ToyHead::fit(x, &labels, classes, &m.head)?;
    let lr = loss_recovered(x, &labels, params, variant, &head)?;
    let rec = dictionary_recovery(&params.dict, &gt.atoms, m.tau_rec)?;

    let (mut probe_codes, mut probe_raw) = (None, None);
    if gt.spec.sign_mode == SignMode::Bipolar {
        let codes = encode_rows(x, params, variant)?;
        let (mut pc, mut pr, mut count) = (0.0, 0.0, 0usize);
        for p in 0..gt.spec.p_true {
            let active: Vec<usize> = rows
                .iter()
                .copied()
                .filter(|&r| gt.codes.get(r, p) != 0.0)
                .collect();
            let lab: Vec<bool> = active.iter().map(|&r| gt.codes.get(r, p) > 0.0).collect();
            let npos = lab.iter().filter(|l| **l).count();
            if active.len() < 10 || npos == 0 || npos == lab.len() {
                continue;
            }
            let sub = |mat: &Matrix| -> Result<Matrix> {
                let data: Vec<Vec<f64>> = active.iter().map(|&r| mat.row(r).to_vec()).collect();
                Matrix::from_rows(&data)
            };
            pc += probe_accuracy(&sub(&codes)?, &lab, m.probe_top_k, m.seed)?.accuracy;
            pr += probe_accuracy(&sub(x)?, &lab, m.probe_top_k, m.seed)?.accuracy;
            count += 1;
        }
        if count > 0 {
            probe_codes = Some(pc / count as f64);
            probe_raw = Some(pr / count as f64);
        }
    }

    let (mut cov_sum, mut cov_max) = (0.0, 0.0_f64);
    for p in 0..gt.spec.p_true {
        let pairs = make_contrast_pairs(
            gt,
            p,
            m.contrast_pairs,
            m.contrast_magnitude,
            m.seed.wrapping_add(p as u64),
        )?;
        let enc = |set: &[Vector]| -> Result<Matrix> {
            let rows: Result<Vec<Vec<f64>>> = set
                .iter()
                .map(|v| Ok(encode(v, params, variant)?.into_vec()))
                .collect();
            Matrix::from_rows(&rows?)
        };
        let c = both_sign_coverage(&enc(&pairs.positive)?, &enc(&pairs.negative)?)?.coverage;
        cov_sum += c;
        cov_max = cov_max.max(c);
    }
    Ok(TruthMetrics {
        loss_recovered: lr,
        recovered: rec.recovered,
        p_true: gt.spec.p_true,
        fragmentation_pairs: rec.fragmentation.len(),
        probe_codes,
        probe_raw,
        coverage_mean: cov_sum / gt.spec.p_true as f64,
        coverage_max: cov_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_are_usage_errors() {
        assert_eq!(run(["proxsae", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["proxsae", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(
            run(["proxsae", "inspect", "/nonexistent/file.bin"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn steer_modes_validate_flags() {
        let cmd = Command::Steer {
            mode: SteerMode::Clamp,
            alpha: 1.0,
            latent: None,
            clamp_value: Some(1.0),
            additive: false,
            concept_file: None,
            checkpoint: None,
            input: "x".into(),
            output: "y".into(),
        };
        assert!(matches!(dispatch(cmd), Err(Error::Config(_))));
    }
}
