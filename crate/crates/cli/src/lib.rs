//! Command-line driver: argument parsing, subcommand wiring and exit codes.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid data, 3 I/O failure. On
//! failure a single JSON object is printed on standard error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use histovote::augment::{execute_plan, load_plan, plan_balance, render_plan};
use histovote::ensemble::{
    EnsembleConfig, GridStep, VoteMode, VoteOutput, WeightVector, combine, prune, search_weights, weighted_soft_vote,
};
use histovote::manifest::{Manifest, Split, SplitRatios, load_manifest, render_manifest, stratified_split};
use histovote::metrics::{MetricsReport, evaluate};
use histovote::predictions::{AlignedPredictions, PredictionTable, align, load_predictions, render_predictions};
use histovote::report::{MetricsDoc, ReportDoc, SearchDoc, WeightDoc, file_digest, grid_weights, merge_reports, render_table};
use histovote::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "histovote", version, about = "Split, balance, vote and report over classifier predictions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign every original record to train, val or test, stratified by class.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Proportions as a:b:c, for example 7:1:2 or 0.7:0.1:0.2.
        #[arg(long)]
        ratios: SplitRatios,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan the flips that balance both classes within every split.
    PlanAugment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the planned flips and the extended manifest.
    ApplyAugment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Root that manifest paths are relative to.
        #[arg(long)]
        src_dir: PathBuf,
        /// Root for the flipped images (defaults to --src-dir).
        #[arg(long)]
        dst_dir: Option<PathBuf>,
        /// Extended manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check prediction files against a manifest.
    ValidatePreds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Metrics of a single prediction table.
    Evaluate {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine several prediction tables with a fixed rule.
    Vote {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, required = true, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value = "soft")]
        mode: VoteMode,
        /// Comma-separated weights summing to 1; uniform when omitted.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Comma-separated class priors (bayes mode).
        #[arg(long, value_delimiter = ',')]
        priors: Option<Vec<f64>>,
        /// Comma-separated per-classifier accuracies in (0, 1) (bayes mode).
        #[arg(long, value_delimiter = ',')]
        accuracies: Option<Vec<f64>>,
        /// Combined prediction table.
        #[arg(long)]
        preds_out: Option<PathBuf>,
        /// Report document.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search soft-vote weights on one split and report on another.
    Search {
        #[command(flatten)]
        common: EvalArgs,
        #[arg(long, required = true, num_args = 1..)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "0.01")]
        step: GridStep,
        /// Keep only the N classifiers with the best search-split accuracy.
        #[arg(long)]
        keep: Option<usize>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, default_value = "val")]
        search_split: Split,
        #[arg(long, default_value = "test")]
        eval_split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report documents into one comparison table.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Table file; printed to standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Class treated as positive for precision, recall and F-scores
    /// (defaults to the first class).
    #[arg(long)]
    positive_class: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let message = e.render().to_string();
            report_error("usage", EXIT_USAGE, message.lines().next().unwrap_or_default());
            eprint!("{message}");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) if e.is_io() => {
            report_error("io", EXIT_IO, &e.to_string());
            EXIT_IO
        }
        Err(e) => {
            report_error("validation", EXIT_INVALID, &e.to_string());
            EXIT_INVALID
        }
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Split {
            manifest,
            ratios,
            seed,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let split = stratified_split(&m, &ratios, seed)?;
            write(&out, &render_manifest(&split))?;
            print_split_counts(&split);
            Ok(())
        }
        Command::PlanAugment { manifest, seed, out } => {
            let m = load_manifest(&manifest)?;
            let plan = plan_balance(&m, seed)?;
            write(&out, &render_plan(&plan))?;
            for (split, [h, v]) in Split::ALL.iter().zip(plan.counts()) {
                println!("{split}: {h} hflip, {v} vflip");
            }
            Ok(())
        }
        Command::ApplyAugment {
            manifest,
            plan,
            src_dir,
            dst_dir,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let plan = load_plan(&plan)?;
            let dst_dir = dst_dir.unwrap_or_else(|| src_dir.clone());
            let extended = execute_plan(&plan, &m, &src_dir, &dst_dir)?;
            write(&out, &render_manifest(&extended))?;
            print_split_counts(&extended);
            Ok(())
        }
        Command::ValidatePreds { manifest, preds, split } => {
            let m = load_manifest(&manifest)?;
            check_split(&m, split)?;
            let tables = load_tables(&preds, &m, split)?;
            align(&tables, &m, split)?;
            for (path, t) in preds.iter().zip(&tables) {
                println!("ok {} model_id={} rows={}", path.display(), t.model_id, t.len());
            }
            Ok(())
        }
        Command::Evaluate {
            common,
            preds,
            split,
            out,
        } => {
            let m = load_manifest(&common.manifest)?;
            check_split(&m, split)?;
            let positive = positive_index(&m, common.positive_class.as_deref())?;
            let tables = load_tables(std::slice::from_ref(&preds), &m, split)?;
            let ap = align(&tables, &m, split)?;
            let mut doc = ReportDoc::new("evaluate", m.classes());
            doc.split = split.map(|s| s.to_string());
            add_model_metrics(&mut doc, &ap, positive, common.beta)?;
            add_digests(&mut doc, std::iter::once(&common.manifest).chain([&preds]))?;
            write(&out, &doc.to_json())
        }
        Command::Vote {
            common,
            preds,
            split,
            mode,
            weights,
            priors,
            accuracies,
            preds_out,
            out,
        } => {
            let m = load_manifest(&common.manifest)?;
            check_split(&m, split)?;
            let positive = positive_index(&m, common.positive_class.as_deref())?;
            let tables = load_tables(&preds, &m, split)?;
            let ap = align(&tables, &m, split)?;
            let weights = match (mode, weights) {
                (VoteMode::SoftWeighted | VoteMode::HardWeighted, None) => Some(WeightVector::uniform(ap.n_models())?),
                (_, w) => w.map(WeightVector::new).transpose()?,
            };
            let config = EnsembleConfig {
                mode,
                weights,
                priors,
                accuracies,
            };
            let vote = combine(&ap, &config)?;
            let ensemble = ensemble_report(&ap, &vote, positive, common.beta)?;

            let mut doc = ReportDoc::new("vote", m.classes());
            doc.split = split.map(|s| s.to_string());
            add_model_metrics(&mut doc, &ap, positive, common.beta)?;
            doc.ensemble_mode = Some(mode.to_string());
            doc.ensemble_metrics = Some(MetricsDoc::from(&ensemble));
            if let Some(w) = &config.weights {
                doc.weights = ap
                    .model_ids()
                    .iter()
                    .zip(w.as_slice())
                    .map(|(id, &value)| WeightDoc {
                        model_id: id.clone(),
                        value,
                        fraction: None,
                    })
                    .collect();
            }
            add_digests(&mut doc, std::iter::once(&common.manifest).chain(&preds))?;

            let combined = preds_out
                .as_ref()
                .map(|_| combined_table(&ap, &vote, mode))
                .transpose()?;
            if let (Some(path), Some(table)) = (&preds_out, &combined) {
                write(path, &render_predictions(table))?;
            }
            write(&out, &doc.to_json())
        }
        Command::Search {
            common,
            preds,
            seed,
            step,
            keep,
            workers,
            search_split,
            eval_split,
            out,
        } => {
            let m = load_manifest(&common.manifest)?;
            if !m.is_split() {
                return Err(Error::InvalidManifest("search needs a split manifest".into()));
            }
            if search_split == eval_split {
                return Err(Error::InvalidManifest(format!(
                    "search and evaluation both use split `{search_split}`"
                )));
            }
            let positive = positive_index(&m, common.positive_class.as_deref())?;
            let search_tables = load_tables(&preds, &m, Some(search_split))?;
            let eval_tables = load_tables(&preds, &m, Some(eval_split))?;
            let search_ap = align(&search_tables, &m, Some(search_split))?;
            let eval_ap = align(&eval_tables, &m, Some(eval_split))?;

            let kept: Vec<usize> = match keep {
                Some(k) => {
                    let accuracy: Vec<f64> = (0..search_ap.n_models())
                        .map(|i| Ok(single_model_report(&search_ap, i, positive, common.beta)?.accuracy))
                        .collect::<Result<_>>()?;
                    prune(search_ap.model_ids(), &accuracy, k)?
                }
                None => (0..search_ap.n_models()).collect(),
            };
            let search_ap_kept = search_ap.select(&kept)?;
            let eval_ap_kept = eval_ap.select(&kept)?;
            let result = search_weights(&search_ap_kept, step, workers)?;
            let (labels, scores) = weighted_soft_vote(&eval_ap_kept, &result.best_weights)?;
            let vote = VoteOutput {
                decisions: labels.into_iter().map(Some).collect(),
                scores,
            };
            let ensemble = ensemble_report(&eval_ap_kept, &vote, positive, common.beta)?;

            let mut doc = ReportDoc::new("search", m.classes());
            doc.split = Some(eval_split.to_string());
            add_model_metrics(&mut doc, &eval_ap, positive, common.beta)?;
            doc.ensemble_mode = Some(VoteMode::SoftWeighted.to_string());
            doc.ensemble_metrics = Some(MetricsDoc::from(&ensemble));
            doc.weights = grid_weights(eval_ap_kept.model_ids(), &result);
            doc.search = Some(SearchDoc::new(&result));
            doc.seeds.insert("search".into(), seed);
            add_digests(&mut doc, std::iter::once(&common.manifest).chain(&preds))?;
            write(&out, &doc.to_json())?;
            println!(
                "best weights {} (validation accuracy {:.4}, {} grid points, {} ties)",
                doc.weights
                    .iter()
                    .map(|w| format!("{}={}", w.model_id, w.fraction.as_deref().unwrap_or_default()))
                    .collect::<Vec<_>>()
                    .join(" "),
                result.best_objective,
                result.evaluated_count,
                result.tie_count
            );
            Ok(())
        }
        Command::Report { reports, out } => {
            let docs = reports.iter().map(ReportDoc::load).collect::<Result<Vec<_>>>()?;
            let table = render_table(&merge_reports(&docs)?);
            match out {
                Some(path) => write(&path, &table),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn print_split_counts(m: &Manifest) {
    let counts = m.split_counts();
    for (class, row) in m.classes().iter().zip(&counts) {
        println!("{class}: train {} val {} test {}", row[0], row[1], row[2]);
    }
}

fn check_split(m: &Manifest, split: Option<Split>) -> Result<()> {
    if split.is_some() && !m.is_split() {
        return Err(Error::InvalidManifest("--split given but the manifest is not split".into()));
    }
    Ok(())
}

fn positive_index(m: &Manifest, name: Option<&str>) -> Result<usize> {
    match name {
        None => Ok(0),
        Some(n) => m.class_index(n).ok_or_else(|| Error::UnknownClass(n.to_string())),
    }
}

fn load_tables(paths: &[PathBuf], m: &Manifest, split: Option<Split>) -> Result<Vec<PredictionTable>> {
    let tables = paths
        .iter()
        .map(|p| load_predictions(p, m, split))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    if let Some(t) = tables.iter().find(|t| !seen.insert(t.model_id.as_str())) {
        return Err(Error::Misaligned(format!("model id `{}` appears more than once", t.model_id)));
    }
    Ok(tables)
}

fn single_model_report(ap: &AlignedPredictions, model: usize, positive: usize, beta: f64) -> Result<MetricsReport> {
    let one = ap.select(&[model])?;
    let (labels, scores) = weighted_soft_vote(&one, &WeightVector::uniform(1)?)?;
    let decisions: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    evaluate(&decisions, &scores, one.truth(), one.sample_ids(), one.classes(), positive, beta)
}

fn ensemble_report(ap: &AlignedPredictions, vote: &VoteOutput, positive: usize, beta: f64) -> Result<MetricsReport> {
    evaluate(&vote.decisions, &vote.scores, ap.truth(), ap.sample_ids(), ap.classes(), positive, beta)
}

fn add_model_metrics(doc: &mut ReportDoc, ap: &AlignedPredictions, positive: usize, beta: f64) -> Result<()> {
    for (i, id) in ap.model_ids().iter().enumerate() {
        let r = single_model_report(ap, i, positive, beta)?;
        doc.models.push(id.clone());
        doc.per_model_metrics.insert(id.clone(), MetricsDoc::from(&r));
    }
    Ok(())
}

fn add_digests<'a>(doc: &mut ReportDoc, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<()> {
    for p in paths {
        doc.input_digests.insert(p.display().to_string(), file_digest(p)?);
    }
    Ok(())
}

/// The combined scores as a prediction table. Bayes scores are log
/// posteriors up to a constant and are turned into probabilities.
fn combined_table(ap: &AlignedPredictions, vote: &VoteOutput, mode: VoteMode) -> Result<PredictionTable> {
    let rows: BTreeMap<String, Vec<f64>> = ap
        .sample_ids()
        .iter()
        .zip(&vote.scores)
        .map(|(id, s)| {
            let probs = match mode {
                VoteMode::BayesLogOdds => softmax(s),
                _ => s.clone(),
            };
            (id.clone(), probs)
        })
        .collect();
    PredictionTable::new(format!("ensemble-{mode}"), ap.classes().to_vec(), rows)
}

fn softmax(h: &[f64]) -> Vec<f64> {
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = h.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}
