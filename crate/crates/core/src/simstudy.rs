//! Simulation studies: parameter recovery, accuracy of the predictive
//! variance with and without the correction, and how well the genetic
//! search ranks against exhaustive enumeration.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chemspace::{build_space, Bits, Fingerprint};
use crate::discover::{exhaustive_fitness, rank_among, run_ga, FitnessKind, GAConfig};
use crate::error::{Error, Result};
use crate::fit::{fit_mle, FitOptions, FittedModel};
use crate::kernel::{covariance_matrix, KernelFamily, KernelSpec};
use crate::laplace::Dataset;
use crate::link::Link;
use crate::params::ModelParams;
use crate::predict::corrected_variance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub kappa: usize,
    /// Number of compounds observed; `None` uses all `2^κ - 1`.
    pub m: Option<usize>,
    /// Covariate values; every compound is tested once at each.
    pub x_grid: Vec<f64>,
    pub true_params: ModelParams,
    pub replications: usize,
    pub seed: u64,
}

/// `x_i = (i-1)/10` for `i = 1..=11`.
pub fn default_grid() -> Vec<f64> {
    (0..11).map(|i| i as f64 / 10.0).collect()
}

impl SimDesign {
    /// Five features, all 31 compounds, eleven conditions, logit link and
    /// Gaussian kernel with `α = (-1, 0)`, `β = 1`, `σ² = 0.5`, `φ = 0.5`.
    pub fn recovery_gaussian(replications: usize, seed: u64) -> Self {
        SimDesign {
            kappa: 5,
            m: None,
            x_grid: default_grid(),
            true_params: ModelParams {
                alphas: vec![-1.0, 0.0],
                beta: vec![1.0],
                kernel: KernelSpec {
                    family: KernelFamily::Gaussian,
                    sigma2: 0.5,
                    phi: 0.5,
                },
                link: Link::Logit,
            },
            replications,
            seed,
        }
    }

    /// Ten features with 90 of the 1023 compounds observed.
    pub fn ga_gaussian(replications: usize, seed: u64) -> Self {
        SimDesign {
            kappa: 10,
            m: Some(90),
            ..SimDesign::recovery_gaussian(replications, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.true_params.validate()?;
        if self.true_params.beta.len() != 1 {
            return Err(Error::Config("simulation designs use a single covariate".into()));
        }
        if self.kappa == 0 || self.kappa > 24 {
            return Err(Error::Config(format!("kappa {} outside 1..=24", self.kappa)));
        }
        let total = (1usize << self.kappa) - 1;
        if let Some(m) = self.m {
            if m == 0 || m > total {
                return Err(Error::Config(format!("m = {m} outside 1..={total}")));
            }
        }
        if self.x_grid.is_empty() {
            return Err(Error::Config("covariate grid is empty".into()));
        }
        Ok(())
    }

    /// Independent generator for replication `r`.
    pub fn replication_rng(&self, r: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r as u64 + 1);
        rng
    }
}

/// Draws compounds, effects `u ~ N(0, K)` and outcomes. Rows are ordered
/// by compound, then by covariate value.
pub fn simulate_dataset<R: Rng>(design: &SimDesign, rng: &mut R) -> Result<(Dataset, DVector<f64>)> {
    design.validate()?;
    let total = (1usize << design.kappa) - 1;
    let codes: Vec<u64> = match design.m {
        None => (1..=total as u64).collect(),
        Some(m) => {
            let mut idx: Vec<usize> = sample(rng, total, m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| i as u64 + 1).collect()
        }
    };
    let compounds: Vec<Fingerprint> = codes
        .iter()
        .map(|&c| Fingerprint::new(Bits::from_index(c, design.kappa)))
        .collect::<Result<_>>()?;
    let space = std::sync::Arc::new(build_space(compounds)?);
    let m = space.len();

    let p = &design.true_params;
    let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let u = if p.kernel.sigma2 > 0.0 {
        covariance_matrix(&p.kernel, &space)?.mul_lower(&z)
    } else {
        DVector::zeros(m)
    };

    let c = p.n_classes();
    let g = design.x_grid.len();
    let mut y = Vec::with_capacity(m * g);
    let mut x = Vec::with_capacity(m * g);
    let mut compound = Vec::with_capacity(m * g);
    for k in 0..m {
        for &xi in &design.x_grid {
            let draw: f64 = rng.random();
            let base = p.beta[0] * xi + u[k];
            let class = (0..c - 1)
                .find(|&j| draw < p.link.cdf(p.alphas[j] + base))
                .map_or(c, |j| j + 1);
            y.push(class);
            x.push(xi);
            compound.push(k);
        }
    }
    let n = y.len();
    let data = Dataset::new(y, nalgebra::DMatrix::from_vec(n, 1, x), compound, space, c)?;
    Ok((data, u))
}

/// One simulated data set and what was estimated from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    /// Natural-scale estimates in layout order.
    pub estimates: Vec<f64>,
    pub standard_errors: Option<Vec<f64>>,
    pub u_true: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub var_u: Vec<f64>,
    pub var_u_corrected: Option<Vec<f64>>,
    pub converged: bool,
}

fn fit_replicate(design: &SimDesign, r: usize, options: &FitOptions) -> Result<(Dataset, DVector<f64>, FittedModel)> {
    let mut rng = design.replication_rng(r);
    let (data, u) = simulate_dataset(design, &mut rng)?;
    let opts = FitOptions {
        seed: rng.random(),
        ..options.clone()
    };
    let p = &design.true_params;
    let model = fit_mle(&data, p.kernel.family, p.link, None, &opts)?;
    Ok((data, u, model))
}

/// Simulates and fits every replication; failed fits are logged and
/// skipped.
pub fn run_replications(design: &SimDesign, options: &FitOptions) -> Result<Vec<Replicate>> {
    design.validate()?;
    let out: Vec<Option<Replicate>> = (0..design.replications)
        .into_par_iter()
        .map(|r| match replicate(design, r, options) {
            Ok(rep) => Some(rep),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                None
            }
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

fn replicate(design: &SimDesign, r: usize, options: &FitOptions) -> Result<Replicate> {
    let (data, u, model) = fit_replicate(design, r, options)?;
    let post = model.posterior();
    let space = data.space();
    let mut var_u = Vec::with_capacity(space.len());
    let mut var_c = Vec::with_capacity(space.len());
    let mut corrected_ok = true;
    for fp in space.compounds() {
        let (_, v) = post.posterior_u(fp)?;
        var_u.push(v);
        let (vc, ok) = corrected_variance(&model, fp)?;
        corrected_ok &= ok;
        var_c.push(vc);
    }
    Ok(Replicate {
        index: r,
        estimates: model.params.natural_vector(),
        standard_errors: model.standard_errors(),
        u_true: u.iter().copied().collect(),
        u_hat: model.state.u_hat.iter().copied().collect(),
        var_u,
        var_u_corrected: corrected_ok.then_some(var_c),
        converged: model.diagnostics.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub empirical_sd: f64,
    /// Mean of the estimated SDs over replications that have them.
    pub mean_estimated_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub replications: usize,
    pub rows: Vec<ParameterSummary>,
}

fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Mean estimate, empirical SD and mean estimated SD of every parameter.
pub fn summarize_estimation(design: &SimDesign, reps: &[Replicate]) -> EstimationReport {
    let names = design.true_params.layout().names();
    let truth = design.true_params.natural_vector();
    if reps.is_empty() {
        return EstimationReport {
            replications: 0,
            rows: Vec::new(),
        };
    }
    let rows = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let est: Vec<f64> = reps.iter().map(|r| r.estimates[k]).collect();
            let ses: Vec<f64> = reps
                .iter()
                .filter_map(|r| r.standard_errors.as_ref().map(|s| s[k]))
                .collect();
            ParameterSummary {
                name: name.clone(),
                truth: truth[k],
                mean_estimate: est.iter().sum::<f64>() / est.len() as f64,
                empirical_sd: sample_sd(&est),
                mean_estimated_sd: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
            }
        })
        .collect();
    EstimationReport {
        replications: reps.len(),
        rows,
    }
}

pub fn study_estimation(design: &SimDesign, options: &FitOptions) -> Result<(EstimationReport, Vec<Replicate>)> {
    let reps = run_replications(design, options)?;
    Ok((summarize_estimation(design, &reps), reps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub replications: usize,
    /// Per-compound empirical variance of the prediction error `û - u`.
    pub empirical: Vec<f64>,
    pub mean_uncorrected: Vec<f64>,
    pub mean_corrected: Vec<f64>,
    pub uncorrected_msd: f64,
    pub corrected_msd: f64,
}

/// Compares the average predictive variances with the empirical variance
/// of `û_r - u_r` across replications, compound by compound.
pub fn summarize_variance(reps: &[Replicate]) -> Result<VarianceReport> {
    let reps: Vec<&Replicate> = reps.iter().filter(|r| r.var_u_corrected.is_some()).collect();
    if reps.len() < 2 {
        return Err(Error::Data(
            "empirical variance needs at least two replications with corrected variances".into(),
        ));
    }
    let m = reps[0].u_hat.len();
    let n = reps.len() as f64;
    let mut empirical = Vec::with_capacity(m);
    let mut mu = Vec::with_capacity(m);
    let mut mc = Vec::with_capacity(m);
    for r in 0..m {
        let err: Vec<f64> = reps.iter().map(|rep| rep.u_hat[r] - rep.u_true[r]).collect();
        empirical.push(sample_sd(&err).powi(2));
        mu.push(reps.iter().map(|rep| rep.var_u[r]).sum::<f64>() / n);
        mc.push(
            reps.iter()
                .map(|rep| rep.var_u_corrected.as_ref().expect("filtered")[r])
                .sum::<f64>()
                / n,
        );
    }
    let msd = |est: &[f64]| empirical.iter().zip(est).map(|(e, v)| (e - v).powi(2)).sum::<f64>() / m as f64;
    Ok(VarianceReport {
        replications: reps.len(),
        uncorrected_msd: msd(&mu),
        corrected_msd: msd(&mc),
        empirical,
        mean_uncorrected: mu,
        mean_corrected: mc,
    })
}

pub fn study_variance(design: &SimDesign, options: &FitOptions) -> Result<VarianceReport> {
    if design.replications < 2 {
        return Err(Error::Data("empirical variance needs at least two replications".into()));
    }
    summarize_variance(&run_replications(design, options)?)
}

/// Counts of GA picks at rank 1, 2, 3 and 4 or worse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub counts: [usize; 4],
}

impl RankHistogram {
    pub fn add(&mut self, rank: usize) {
        self.counts[rank.clamp(1, 4) - 1] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn top1_fraction(&self) -> f64 {
        self.counts[0] as f64 / self.total().max(1) as f64
    }

    pub fn top2_fraction(&self) -> f64 {
        (self.counts[0] + self.counts[1]) as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GAStudyReport {
    pub replications: usize,
    pub min_gp_mean: RankHistogram,
    pub max_top_class_prob: RankHistogram,
    /// Ranks per replication, `(gp mean, top-class probability)`.
    pub ranks: Vec<(usize, usize)>,
}

/// Fits each replication, runs the GA under both criteria and ranks its pick
/// among all `2^κ - 1` compounds. `ga.x_star` defaults to `x = 1`.
pub fn study_ga(design: &SimDesign, ga: &GAConfig, options: &FitOptions) -> Result<GAStudyReport> {
    design.validate()?;
    if design.kappa > 16 {
        return Err(Error::Config("GA study enumerates the space; kappa must be at most 16".into()));
    }
    let x_star = ga.x_star.clone().unwrap_or_else(|| vec![1.0]);
    let ranks: Vec<Option<(usize, usize)>> = (0..design.replications)
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<(usize, usize)> {
                let (_, _, model) = fit_replicate(design, r, options)?;
                let mut out = [0usize; 2];
                for (slot, kind) in [FitnessKind::MinGpMean, FitnessKind::MaxTopClassProb].into_iter().enumerate() {
                    let cfg = GAConfig {
                        fitness: kind,
                        x_star: Some(x_star.clone()),
                        seed: ga.seed ^ ((r as u64) << 8 | slot as u64),
                        ..ga.clone()
                    };
                    let result = run_ga(&model, &cfg)?;
                    let scores = exhaustive_fitness(&model, &cfg)?;
                    out[slot] = rank_among(&scores, result.best.fitness);
                }
                Ok((out[0], out[1]))
            };
            match run() {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("GA replication {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let ranks: Vec<(usize, usize)> = ranks.into_iter().flatten().collect();
    let mut gp = RankHistogram::default();
    let mut pr = RankHistogram::default();
    for &(a, b) in &ranks {
        gp.add(a);
        pr.add(b);
    }
    Ok(GAStudyReport {
        replications: ranks.len(),
        min_gp_mean: gp,
        max_top_class_prob: pr,
        ranks,
    })
}

pub fn estimation_csv(report: &EstimationReport) -> String {
    let mut s = String::from("parameter,true,estimate,stdev,est_stdev\n");
    for row in &report.rows {
        let est_sd = row.mean_estimated_sd.map_or("NA".to_string(), |v| format!("{v}"));
        let _ = writeln!(s, "{},{},{},{},{}", row.name, row.truth, row.mean_estimate, row.empirical_sd, est_sd);
    }
    s
}

pub fn variance_csv(report: &VarianceReport) -> String {
    let mut s = String::from("compound,empirical,uncorrected,corrected\n");
    for r in 0..report.empirical.len() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r + 1,
            report.empirical[r],
            report.mean_uncorrected[r],
            report.mean_corrected[r]
        );
    }
    let _ = writeln!(s, "msd,,{},{}", report.uncorrected_msd, report.corrected_msd);
    s
}

pub fn ga_csv(report: &GAStudyReport) -> String {
    let mut s = String::from("criterion,rank1,rank2,rank3,rank4plus\n");
    for (name, h) in [("gp_mean", &report.min_gp_mean), ("top_class_prob", &report.max_top_class_prob)] {
        let c = h.counts;
        let _ = writeln!(s, "{name},{},{},{},{}", c[0], c[1], c[2], c[3]);
    }
    s
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plots of each parameter's estimates across replications, one panel
/// per parameter, with the true value marked in red.
pub fn boxplot_svg(design: &SimDesign, reps: &[Replicate]) -> String {
    let names = design.true_params.layout().names();
    let truth = design.true_params.natural_vector();
    let (w, h, pad) = (120.0, 300.0, 30.0);
    let width = w * names.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    for (k, name) in names.iter().enumerate() {
        let mut xs: Vec<f64> = reps.iter().map(|r| r.estimates[k]).filter(|v| v.is_finite()).collect();
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        let (q1, med, q3) = (quantile(&xs, 0.25), quantile(&xs, 0.5), quantile(&xs, 0.75));
        let iqr = q3 - q1;
        let lo_fence = q1 - 1.5 * iqr;
        let hi_fence = q3 + 1.5 * iqr;
        let whisk_lo = xs.iter().copied().find(|&v| v >= lo_fence).unwrap_or(q1);
        let whisk_hi = xs.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(q3);
        let vmin = xs[0].min(truth[k]);
        let vmax = xs[xs.len() - 1].max(truth[k]);
        let span = if vmax > vmin { vmax - vmin } else { 1.0 };
        let y = |v: f64| h - pad - (v - vmin) / span * (h - 2.0 * pad);
        let x0 = w * k as f64;
        let cx = x0 + w / 2.0;
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{name}</text>"#, h - 8.0);
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
            y(whisk_lo),
            y(whisk_hi)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="40" height="{}" fill="lightgray" stroke="black"/>"#,
            cx - 20.0,
            y(q3),
            (y(q1) - y(q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{m}" x2="{}" y2="{m}" stroke="black" stroke-width="2"/>"#,
            cx - 20.0,
            cx + 20.0,
            m = y(med)
        );
        for &v in xs.iter().filter(|&&v| v < whisk_lo || v > whisk_hi) {
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{}" r="2" fill="none" stroke="black"/>"#, y(v));
        }
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{t}" x2="{}" y2="{t}" stroke="red" stroke-dasharray="4 2"/>"#,
            x0 + 10.0,
            x0 + w - 10.0,
            t = y(truth[k])
        );
    }
    s.push_str("</svg>\n");
    s
}
