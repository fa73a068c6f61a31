//! Combination of several classifiers' outputs.
//!
//! Weighted voting scores class `j` for sample `x` as `sum_i w_i * h_i^j(x)`
//! and picks the argmax, where `h_i(x)` is classifier `i`'s probability
//! vector (soft mode) or the one-hot vector of its argmax (hard mode). The
//! plain majority rules, the Bayes log-odds combiner, weight derivation from
//! validation metrics, pruning, and the exhaustive weight search over the
//! quantized simplex live here too.
//!
//! Every argmax in this module resolves ties toward the lowest class index.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::parse_rational;
use crate::predictions::AlignedPredictions;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Non-negative per-classifier weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeights("no weights".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    /// Scales arbitrary non-negative values to sum to one.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        if let Some(w) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {w} is negative or not finite")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidWeights("weights sum to zero".into()));
        }
        Self::new(raw.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::normalized(&vec![1.0; n])
    }

    /// All weight on classifier `i`.
    pub fn basis(n: usize, i: usize) -> Result<Self> {
        let mut w = vec![0.0; n];
        *w.get_mut(i).ok_or_else(|| Error::InvalidWeights(format!("index {i} out of {n}")))? = 1.0;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How per-classifier outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteMode {
    /// Weighted sum of probability vectors.
    #[default]
    SoftWeighted,
    /// Weighted sum of one-hot argmax vectors.
    HardWeighted,
    /// A class needs more than half of the votes, otherwise the forecast is rejected.
    AbsoluteMajority,
    /// Plurality of votes.
    RelativeMajority,
    /// Log prior plus log-odds of every classifier that voted for the class.
    BayesLogOdds,
}

impl VoteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VoteMode::SoftWeighted => "soft",
            VoteMode::HardWeighted => "hard",
            VoteMode::AbsoluteMajority => "abs",
            VoteMode::RelativeMajority => "rel",
            VoteMode::BayesLogOdds => "bayes",
        }
    }
}

impl fmt::Display for VoteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VoteMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "soft" => Ok(VoteMode::SoftWeighted),
            "hard" => Ok(VoteMode::HardWeighted),
            "abs" => Ok(VoteMode::AbsoluteMajority),
            "rel" => Ok(VoteMode::RelativeMajority),
            "bayes" => Ok(VoteMode::BayesLogOdds),
            _ => Err(format!("unknown mode `{s}` (expected soft, hard, abs, rel or bayes)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnsembleConfig {
    pub mode: VoteMode,
    /// Required by the weighted modes.
    pub weights: Option<WeightVector>,
    /// Class priors, required by [`VoteMode::BayesLogOdds`].
    pub priors: Option<Vec<f64>>,
    /// Per-classifier accuracies in (0, 1), required by [`VoteMode::BayesLogOdds`].
    pub accuracies: Option<Vec<f64>>,
}

impl EnsembleConfig {
    pub fn validate(&self, n_models: usize, n_classes: usize) -> Result<()> {
        match self.mode {
            VoteMode::SoftWeighted | VoteMode::HardWeighted => {
                let w = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::InvalidWeights(format!("mode {} needs weights", self.mode)))?;
                check_weight_count(w.len(), n_models)
            }
            VoteMode::BayesLogOdds => {
                let priors = self
                    .priors
                    .as_ref()
                    .ok_or_else(|| Error::InvalidPriors("mode bayes needs class priors".into()))?;
                let acc = self
                    .accuracies
                    .as_ref()
                    .ok_or_else(|| Error::InvalidWeights("mode bayes needs per-classifier accuracies".into()))?;
                check_priors(priors, n_classes)?;
                check_weight_count(acc.len(), n_models)?;
                log_odds(acc).map(|_| ())
            }
            VoteMode::AbsoluteMajority | VoteMode::RelativeMajority => Ok(()),
        }
    }
}

/// Per-sample decisions and the scores behind them.
///
/// `decisions[i] == None` is a rejected forecast (absolute majority only).
/// `scores[i]` ranks sample `i` per class: combined weights for the weighted
/// modes, vote fractions for the majority rules, `H^j(x)` for Bayes.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutput {
    pub decisions: Vec<Option<usize>>,
    pub scores: Vec<Vec<f64>>,
}

impl VoteOutput {
    pub fn rejected(&self) -> usize {
        self.decisions.iter().filter(|d| d.is_none()).count()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_weight_count(weights: usize, models: usize) -> Result<()> {
    if weights != models {
        return Err(Error::InvalidWeights(format!("{weights} weights for {models} classifiers")));
    }
    Ok(())
}

fn check_priors(priors: &[f64], n_classes: usize) -> Result<()> {
    if priors.len() != n_classes {
        return Err(Error::InvalidPriors(format!("{} priors for {n_classes} classes", priors.len())));
    }
    if let Some(p) = priors.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::InvalidPriors(format!("prior {p} must be positive")));
    }
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidPriors(format!("priors sum to {sum}, expected 1")));
    }
    Ok(())
}

/// `out[j] = sum_i weights[i] * block[i * C + j]`, accumulated in classifier order.
#[inline]
fn combine_into(block: &[f64], weights: &[f64], out: &mut [f64]) {
    let c = out.len();
    out.fill(0.0);
    for (w, row) in weights.iter().zip(block.chunks_exact(c)) {
        for (o, h) in out.iter_mut().zip(row) {
            *o += w * h;
        }
    }
}

/// Weighted vote with arbitrary finite weights, one per classifier.
///
/// [`weighted_soft_vote`] is this with a validated [`WeightVector`]; the raw
/// form exists for unnormalized weights such as raw log-odds.
pub fn weighted_vote_raw(ap: &AlignedPredictions, weights: &[f64]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    check_weight_count(weights.len(), ap.n_models())?;
    if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::InvalidWeights(format!("weight {w} is not finite")));
    }
    let c = ap.n_classes();
    let mut labels = Vec::with_capacity(ap.n_samples());
    let mut combined = Vec::with_capacity(ap.n_samples());
    for i in 0..ap.n_samples() {
        let mut out = vec![0.0; c];
        combine_into(ap.sample_block(i), weights, &mut out);
        labels.push(argmax(&out));
        combined.push(out);
    }
    Ok((labels, combined))
}

/// Weighted vote over the classifiers' probability vectors.
pub fn weighted_soft_vote(ap: &AlignedPredictions, w: &WeightVector) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    weighted_vote_raw(ap, w.as_slice())
}

/// Replaces every score vector with the one-hot vector of its argmax.
pub fn to_one_hot(ap: &AlignedPredictions) -> AlignedPredictions {
    let c = ap.n_classes();
    let per_model: Vec<Vec<Vec<f64>>> = (0..ap.n_models())
        .map(|m| {
            (0..ap.n_samples())
                .map(|i| {
                    let mut v = vec![0.0; c];
                    v[argmax(ap.scores(i, m))] = 1.0;
                    v
                })
                .collect()
        })
        .collect();
    AlignedPredictions::from_parts(
        ap.classes().to_vec(),
        ap.model_ids().to_vec(),
        ap.sample_ids().to_vec(),
        ap.truth().to_vec(),
        &per_model,
    )
    .expect("one-hot rows of a valid alignment are valid")
}

/// Weighted vote over the classifiers' one-hot argmax vectors.
pub fn weighted_hard_vote(ap: &AlignedPredictions, w: &WeightVector) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    weighted_soft_vote(&to_one_hot(ap), w)
}

/// Argmax label of every classifier, indexed `[sample][model]`.
pub fn model_labels(ap: &AlignedPredictions) -> Vec<Vec<usize>> {
    (0..ap.n_samples())
        .map(|i| (0..ap.n_models()).map(|m| argmax(ap.scores(i, m))).collect())
        .collect()
}

fn tally(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut votes = vec![0; n_classes];
    for &l in labels {
        votes[l] += 1;
    }
    votes
}

fn vote_fractions(votes: &[usize], voters: usize) -> Vec<f64> {
    votes.iter().map(|&v| v as f64 / voters as f64).collect()
}

/// Each classifier votes for its argmax; a class wins only with more than
/// half of the votes, otherwise the forecast is rejected (`None`).
pub fn hard_vote_absolute(ap: &AlignedPredictions) -> VoteOutput {
    let t = ap.n_models();
    let mut out = VoteOutput {
        decisions: Vec::with_capacity(ap.n_samples()),
        scores: Vec::with_capacity(ap.n_samples()),
    };
    for labels in model_labels(ap) {
        let votes = tally(&labels, ap.n_classes());
        out.decisions.push(votes.iter().position(|&v| 2 * v > t));
        out.scores.push(vote_fractions(&votes, t));
    }
    out
}

/// Plurality vote; ties go to the lowest class index.
pub fn hard_vote_relative(ap: &AlignedPredictions) -> VoteOutput {
    let t = ap.n_models();
    let mut out = VoteOutput {
        decisions: Vec::with_capacity(ap.n_samples()),
        scores: Vec::with_capacity(ap.n_samples()),
    };
    for labels in model_labels(ap) {
        let votes = tally(&labels, ap.n_classes());
        let fractions = vote_fractions(&votes, t);
        let mut best = 0;
        for (j, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = j;
            }
        }
        out.decisions.push(Some(best));
        out.scores.push(fractions);
    }
    out
}

fn log_odds(accuracies: &[f64]) -> Result<Vec<f64>> {
    accuracies
        .iter()
        .map(|&p| {
            if p.is_finite() && p > 0.0 && p < 1.0 {
                Ok((p / (1.0 - p)).ln())
            } else {
                Err(Error::InvalidAccuracy(p))
            }
        })
        .collect()
}

/// Weights proportional to `log(p_i / (1 - p_i))`, negatives clamped to zero.
pub fn logodds_weights(accuracies: &[f64]) -> Result<WeightVector> {
    let raw: Vec<f64> = log_odds(accuracies)?.into_iter().map(|w| w.max(0.0)).collect();
    if raw.iter().all(|&w| w <= 0.0) {
        return Err(Error::InvalidWeights(
            "every classifier is at or below chance; log-odds weights cannot be normalized".into(),
        ));
    }
    WeightVector::normalized(&raw)
}

/// `H^j = log P(c_j) + sum_i [label_i == j] * log(p_i / (1 - p_i))` for one
/// sample, with its argmax.
pub fn bayes_combined_score(labels: &[usize], priors: &[f64], accuracies: &[f64]) -> Result<(Vec<f64>, usize)> {
    check_priors(priors, priors.len())?;
    check_weight_count(labels.len(), accuracies.len())?;
    let odds = log_odds(accuracies)?;
    let mut h: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
    for (&l, w) in labels.iter().zip(&odds) {
        let slot = h.get_mut(l).ok_or(Error::LabelOutOfRange {
            label: l,
            n_classes: priors.len(),
        })?;
        *slot += w;
    }
    let best = argmax(&h);
    Ok((h, best))
}

/// [`bayes_combined_score`] over every aligned sample.
pub fn bayes_vote(ap: &AlignedPredictions, priors: &[f64], accuracies: &[f64]) -> Result<VoteOutput> {
    check_priors(priors, ap.n_classes())?;
    check_weight_count(accuracies.len(), ap.n_models())?;
    let mut out = VoteOutput {
        decisions: Vec::with_capacity(ap.n_samples()),
        scores: Vec::with_capacity(ap.n_samples()),
    };
    for labels in model_labels(ap) {
        let (h, best) = bayes_combined_score(&labels, priors, accuracies)?;
        out.decisions.push(Some(best));
        out.scores.push(h);
    }
    Ok(out)
}

/// Runs the combiner selected by `config`.
pub fn combine(ap: &AlignedPredictions, config: &EnsembleConfig) -> Result<VoteOutput> {
    config.validate(ap.n_models(), ap.n_classes())?;
    let weighted = |(labels, scores): (Vec<usize>, Vec<Vec<f64>>)| VoteOutput {
        decisions: labels.into_iter().map(Some).collect(),
        scores,
    };
    match config.mode {
        VoteMode::SoftWeighted => weighted_soft_vote(ap, config.weights.as_ref().expect("validated")).map(weighted),
        VoteMode::HardWeighted => weighted_hard_vote(ap, config.weights.as_ref().expect("validated")).map(weighted),
        VoteMode::AbsoluteMajority => Ok(hard_vote_absolute(ap)),
        VoteMode::RelativeMajority => Ok(hard_vote_relative(ap)),
        VoteMode::BayesLogOdds => bayes_vote(
            ap,
            config.priors.as_deref().expect("validated"),
            config.accuracies.as_deref().expect("validated"),
        ),
    }
}

/// Weights proportional to a positive per-classifier metric such as
/// validation accuracy.
pub fn metric_weights(values: &[f64]) -> Result<WeightVector> {
    if values.is_empty() {
        return Err(Error::InvalidWeights("no metric values".into()));
    }
    if let Some(&v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::NonPositiveMetric(v));
    }
    WeightVector::normalized(values)
}

/// Indices of the `keep` classifiers with the highest metric, in input order.
///
/// Equal metrics are ranked by model id, so at the cut the lexicographically
/// first id survives.
pub fn prune(model_ids: &[String], metrics: &[f64], keep: usize) -> Result<Vec<usize>> {
    if model_ids.len() != metrics.len() {
        return Err(Error::InvalidWeights(format!(
            "{} metric values for {} classifiers",
            metrics.len(),
            model_ids.len()
        )));
    }
    if keep == 0 || keep > model_ids.len() {
        return Err(Error::KeepOutOfRange {
            keep,
            available: model_ids.len(),
        });
    }
    if let Some(&v) = metrics.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidWeights(format!("metric value {v} is not finite")));
    }
    let mut order: Vec<usize> = (0..model_ids.len()).collect();
    order.sort_by(|&a, &b| metrics[b].total_cmp(&metrics[a]).then_with(|| model_ids[a].cmp(&model_ids[b])));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// A grid step of `1/K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridStep {
    divisions: u32,
}

impl GridStep {
    pub fn new(divisions: u32) -> Result<Self> {
        if divisions == 0 {
            return Err(Error::InvalidStep("1/0".into()));
        }
        Ok(Self { divisions })
    }

    /// Number of steps that make up 1.
    pub fn divisions(self) -> u32 {
        self.divisions
    }

    pub fn value(self) -> f64 {
        1.0 / self.divisions as f64
    }

    /// Weight of `k` grid units.
    pub fn weight(self, k: u32) -> f64 {
        k as f64 / self.divisions as f64
    }
}

impl Default for GridStep {
    fn default() -> Self {
        Self { divisions: 100 }
    }
}

impl fmt::Display for GridStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1/{}", self.divisions)
    }
}

impl FromStr for GridStep {
    type Err = Error;

    /// Accepts decimals (`0.01`) and fractions (`1/100`); the step must divide 1.
    fn from_str(s: &str) -> Result<Self> {
        let step = parse_rational(s).ok_or_else(|| Error::InvalidStep(s.to_string()))?;
        if step == Ratio::from_integer(0) || step > Ratio::from_integer(1) {
            return Err(Error::InvalidStep(s.to_string()));
        }
        let inverse = step.recip();
        if !inverse.is_integer() {
            return Err(Error::InvalidStep(s.to_string()));
        }
        let divisions = u32::try_from(inverse.to_integer()).map_err(|_| Error::InvalidStep(s.to_string()))?;
        Self::new(divisions)
    }
}

/// Number of ways to write `total` as an ordered sum of `parts` non-negative
/// integers: `C(total + parts - 1, parts - 1)`.
pub fn composition_count(total: u32, parts: u32) -> u128 {
    if parts == 0 {
        return u128::from(total == 0);
    }
    let (n, k) = (u128::from(total) + u128::from(parts) - 1, u128::from(parts) - 1);
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Advances `v[from..]` to the next composition of its sum in lexicographic
/// order. Returns false after the last one.
fn next_composition(v: &mut [u32], from: usize) -> bool {
    let tail = &mut v[from..];
    let n = tail.len();
    // Move one unit from the rightmost non-empty part (past the first) to its
    // left neighbour and put the rest of that part at the end.
    let Some(j) = (1..n).rev().find(|&j| tail[j] > 0) else {
        return false;
    };
    let moved = tail[j];
    tail[j] = 0;
    tail[j - 1] += 1;
    tail[n - 1] = moved - 1;
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub step: GridStep,
    /// Winning weights in grid units; `best_weights[i] = best_units[i] / K`.
    pub best_units: Vec<u32>,
    pub best_weights: WeightVector,
    /// Validation accuracy of the winning weights.
    pub best_objective: f64,
    /// Number of grid points attaining `best_objective`.
    pub tie_count: u64,
    pub evaluated_count: u64,
}

/// Best grid point found in a contiguous run of the lexicographic grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Partial {
    correct: usize,
    task: usize,
    offset: usize,
    ties: u64,
    evaluated: u64,
}

impl Partial {
    /// Combines with a run that comes later in grid order; equal scores keep
    /// the earlier point.
    fn merge(self, later: Partial) -> Partial {
        let evaluated = self.evaluated + later.evaluated;
        match later.correct.cmp(&self.correct) {
            std::cmp::Ordering::Greater => Partial { evaluated, ..later },
            std::cmp::Ordering::Less => Partial { evaluated, ..self },
            std::cmp::Ordering::Equal => Partial {
                ties: self.ties + later.ties,
                evaluated,
                ..self
            },
        }
    }
}

/// Exhaustive search over every weight vector whose entries are multiples of
/// `step` and sum to one, maximizing soft-vote accuracy on `ap`.
///
/// Ties go to the lexicographically smallest weight vector. The grid is
/// partitioned by the leading coordinates and scored on `workers` threads
/// (`0` uses the global pool); partial results are merged in grid order, so
/// the outcome does not depend on the worker count.
pub fn search_weights(ap: &AlignedPredictions, step: GridStep, workers: usize) -> Result<SearchResult> {
    if ap.n_samples() == 0 {
        return Err(Error::EmptyValidation);
    }
    let t = ap.n_models();
    let k = step.divisions();
    let unit_weights: Vec<f64> = (0..=k).map(|u| step.weight(u)).collect();

    // Leading coordinates fixed per task; the rest is enumerated inside it.
    let fixed = (t - 1).min(2);
    let mut prefixes = Vec::new();
    let mut v = vec![0u32; t];
    v[t - 1] = k;
    if fixed == 0 {
        prefixes.push(v.clone());
    } else {
        let mut head = vec![0u32; fixed + 1];
        head[fixed] = k;
        loop {
            let mut p = vec![0u32; t];
            p[..fixed].copy_from_slice(&head[..fixed]);
            p[t - 1] = head[fixed];
            prefixes.push(p);
            if !next_composition(&mut head, 0) {
                break;
            }
        }
    }

    let score_task = |(task, start): (usize, &Vec<u32>)| -> Partial {
        let mut v = start.clone();
        let mut weights = vec![0.0; t];
        let mut out = vec![0.0; ap.n_classes()];
        let mut best: Option<Partial> = None;
        let mut offset = 0usize;
        loop {
            for (w, &u) in weights.iter_mut().zip(&v) {
                *w = unit_weights[u as usize];
            }
            let mut correct = 0;
            for (i, &truth) in ap.truth().iter().enumerate() {
                combine_into(ap.sample_block(i), &weights, &mut out);
                correct += usize::from(argmax(&out) == truth);
            }
            let here = Partial {
                correct,
                task,
                offset,
                ties: 1,
                evaluated: 1,
            };
            best = Some(best.map_or(here, |b| b.merge(here)));
            offset += 1;
            if !next_composition(&mut v, fixed) {
                break;
            }
        }
        best.expect("every task scores at least one grid point")
    };

    let run = || -> Vec<Partial> { prefixes.par_iter().enumerate().map(score_task).collect() };
    let partials = if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidWeights(format!("cannot start {workers} workers: {e}")))?
            .install(run)
    };
    let total = partials
        .into_iter()
        .reduce(Partial::merge)
        .expect("at least one grid task");

    // Replay the winning task up to the winning offset.
    let mut best_units = prefixes[total.task].clone();
    for _ in 0..total.offset {
        next_composition(&mut best_units, fixed);
    }
    let best_weights = WeightVector::new(best_units.iter().map(|&u| step.weight(u)).collect())?;
    Ok(SearchResult {
        step,
        best_units,
        best_weights,
        best_objective: total.correct as f64 / ap.n_samples() as f64,
        tie_count: total.ties,
        evaluated_count: total.evaluated,
    })
}
