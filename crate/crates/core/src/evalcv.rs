//! Stratified k-fold cross-validation with logarithmic and spherical losses.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_mle, FitOptions};
use crate::kernel::KernelFamily;
use crate::laplace::Dataset;
use crate::link::{Link, PROB_FLOOR};

fn check_distribution(probs: &[f64], realized: usize) -> Result<()> {
    if realized == 0 || realized > probs.len() {
        return Err(Error::Data(format!("class {realized} outside 1..={}", probs.len())));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-8 {
        return Err(Error::Data(format!("not a probability distribution: {probs:?}")));
    }
    Ok(())
}

/// `-log π_{j'}` for the realized class `j'` (1-based).
pub fn log_loss(probs: &[f64], realized: usize) -> Result<f64> {
    check_distribution(probs, realized)?;
    Ok(-probs[realized - 1].max(PROB_FLOOR).ln())
}

/// `-π_{j'} / ‖π‖₂`.
pub fn spherical_loss(probs: &[f64], realized: usize) -> Result<f64> {
    check_distribution(probs, realized)?;
    let norm = probs.iter().map(|p| p * p).sum::<f64>().sqrt();
    Ok(-probs[realized - 1] / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub link: Link,
    pub kernel: KernelFamily,
}

impl ModelSpec {
    pub fn label(&self) -> String {
        format!("{} {}", self.link, self.kernel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub log_loss: f64,
    pub spherical_loss: f64,
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub spec: ModelSpec,
    pub folds: Vec<FoldScore>,
    pub log_loss_mean: f64,
    pub log_loss_sd: f64,
    pub spherical_mean: f64,
    pub spherical_sd: f64,
    pub fit_seconds_mean: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Fold index of every row. Rows of each class are shuffled and dealt
/// round-robin, so per-class fold counts differ by at most one. With
/// `folds == n` every row is its own fold.
pub fn stratified_folds(data: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("need 2 <= folds <= {n}, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if folds == n {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut out = vec![0; n];
        for (f, &i) in order.iter().enumerate() {
            out[i] = f;
        }
        return Ok(out);
    }
    let counts = data.class_counts();
    for (j, &count) in counts.iter().enumerate() {
        if count > 0 && count < folds {
            return Err(Error::Stratification {
                class: j + 1,
                count,
                folds,
            });
        }
    }
    let mut out = vec![0; n];
    let mut next = 0;
    for class in 1..=data.n_classes() {
        let mut rows: Vec<usize> = (0..n).filter(|&i| data.y()[i] == class).collect();
        rows.shuffle(&mut rng);
        for i in rows {
            out[i] = next % folds;
            next += 1;
        }
    }
    Ok(out)
}

/// Scores one fitted fold on its held-out rows.
fn score_fold(train: &Dataset, test_rows: &[usize], full: &Dataset, spec: ModelSpec, options: &FitOptions) -> Result<(f64, f64, f64)> {
    let start = Instant::now();
    let model = fit_mle(train, spec.kernel, spec.link, None, options)?;
    let seconds = start.elapsed().as_secs_f64();
    let post = model.posterior();
    let (mut ll, mut sl) = (0.0, 0.0);
    for &i in test_rows {
        let fp = full.space().compound(full.compound_index()[i]);
        let probs = post.class_probabilities(fp, &full.x_row(i))?;
        ll += log_loss(&probs, full.y()[i])?;
        sl += spherical_loss(&probs, full.y()[i])?;
    }
    let k = test_rows.len() as f64;
    Ok((ll / k, sl / k, seconds))
}

pub fn cross_validate(
    data: &Dataset,
    specs: &[ModelSpec],
    folds: usize,
    seed: u64,
    options: &FitOptions,
) -> Result<Vec<CVReport>> {
    let assignment = stratified_folds(data, folds, seed)?;
    let fold_sets: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| {
            let test = (0..data.n()).filter(|&i| assignment[i] == f).collect();
            let train = (0..data.n()).filter(|&i| assignment[i] != f).collect();
            (test, train)
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..folds).map(move |f| (s, f)))
        .collect();
    let results: Vec<Result<FoldScore>> = jobs
        .par_iter()
        .map(|&(s, f)| {
            let (test, train) = &fold_sets[f];
            let train_data = data.subset(train)?;
            let (ll, sl, secs) = score_fold(&train_data, test, data, specs[s], options)?;
            Ok(FoldScore {
                fold: f,
                log_loss: ll,
                spherical_loss: sl,
                fit_seconds: secs,
            })
        })
        .collect();

    let mut reports = Vec::with_capacity(specs.len());
    let mut it = results.into_iter();
    for &spec in specs {
        let scores: Vec<FoldScore> = it.by_ref().take(folds).collect::<Result<_>>()?;
        let (log_loss_mean, log_loss_sd) = mean_sd(&scores.iter().map(|s| s.log_loss).collect::<Vec<_>>());
        let (spherical_mean, spherical_sd) =
            mean_sd(&scores.iter().map(|s| s.spherical_loss).collect::<Vec<_>>());
        let fit_seconds_mean = scores.iter().map(|s| s.fit_seconds).sum::<f64>() / folds as f64;
        reports.push(CVReport {
            spec,
            folds: scores,
            log_loss_mean,
            log_loss_sd,
            spherical_mean,
            spherical_sd,
            fit_seconds_mean,
        });
    }
    Ok(reports)
}

/// `model,log_loss_mean,log_loss_sd,spherical_mean,spherical_sd,fit_seconds`.
pub fn report_csv(reports: &[CVReport]) -> String {
    let mut out = String::from("model,log_loss_mean,log_loss_sd,spherical_mean,spherical_sd,fit_seconds\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.spec.label(),
            r.log_loss_mean,
            r.log_loss_sd,
            r.spherical_mean,
            r.spherical_sd,
            r.fit_seconds_mean
        ));
    }
    out
}
