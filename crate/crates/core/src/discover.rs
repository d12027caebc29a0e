//! Genetic search over fingerprint space for compounds the fitted model
//! rates highly.
//!
//! Each generation draws its random numbers from a single ChaCha stream in a
//! fixed order: `k` selection draws, then per pair a crossover coin and a cut
//! point, then per member a mutation coin and a feature index. Fitness
//! evaluation uses no randomness and may run in parallel.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chemspace::{Bits, Fingerprint};
use crate::error::{Error, Result};
use crate::fit::FittedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessKind {
    /// `Pr(y* = C | y)` at the configured covariates.
    MaxTopClassProb,
    /// `-E[u* | y]`.
    MinGpMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GAConfig {
    /// Population size; must be even.
    pub k: usize,
    pub generations: usize,
    pub a: f64,
    pub b: f64,
    pub p_c: f64,
    pub p_m: f64,
    pub fitness: FitnessKind,
    /// Covariates for the probability criterion.
    pub x_star: Option<Vec<f64>>,
    pub seed: u64,
    /// Features the search may change; the rest stay at 0.
    pub feature_mask: Option<Vec<usize>>,
    /// Extension: carry the best member into the next generation.
    pub elitism: bool,
    /// Extension: replace duplicate members with fresh random ones.
    pub dedup: bool,
}

impl Default for GAConfig {
    fn default() -> Self {
        GAConfig {
            k: 10,
            generations: 100,
            a: 10.0,
            b: 1.0,
            p_c: 0.8,
            p_m: 0.1,
            fitness: FitnessKind::MinGpMean,
            x_star: None,
            seed: 0,
            feature_mask: None,
            elitism: false,
            dedup: false,
        }
    }
}

impl GAConfig {
    pub fn validate(&self, kappa: usize) -> Result<()> {
        if self.k == 0 || self.k % 2 != 0 {
            return Err(Error::Config(format!("population size {} must be even and positive", self.k)));
        }
        if !(self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::Config("selection weights a and b must be positive".into()));
        }
        for (name, p) in [("p_c", self.p_c), ("p_m", self.p_m)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if let Some(mask) = &self.feature_mask {
            if mask.is_empty() {
                return Err(Error::Config("feature mask selects no features".into()));
            }
            if let Some(&bad) = mask.iter().find(|&&i| i >= kappa) {
                return Err(Error::Config(format!("feature {bad} outside 0..{kappa}")));
            }
        }
        Ok(())
    }

    fn mutable_features(&self, kappa: usize) -> Vec<usize> {
        match &self.feature_mask {
            Some(mask) => {
                let mut m = mask.clone();
                m.sort_unstable();
                m.dedup();
                m
            }
            None => (0..kappa).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub bits: Bits,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GAResult {
    pub final_population: Vec<Member>,
    pub best: Member,
    pub feature_frequency: Vec<f64>,
    /// Best fitness in each generation, starting with the initial population.
    pub history: Vec<f64>,
}

/// Model-derived fitness; higher is better, and the all-zero compound
/// scores `-∞`.
pub fn fitness(model: &FittedModel, candidate: &Bits, config: &GAConfig) -> Result<f64> {
    if candidate.len() != model.data.space().kappa() {
        return Err(Error::InvalidFingerprint(format!(
            "candidate has {} features, model space has {}",
            candidate.len(),
            model.data.space().kappa()
        )));
    }
    if candidate.is_zero() {
        return Ok(f64::NEG_INFINITY);
    }
    let fp = Fingerprint::new(candidate.clone())?;
    let post = model.posterior();
    match config.fitness {
        FitnessKind::MinGpMean => Ok(-post.posterior_u(&fp)?.0),
        FitnessKind::MaxTopClassProb => {
            let x = config
                .x_star
                .as_ref()
                .ok_or_else(|| Error::Config("probability fitness needs x_star".into()))?;
            let probs = post.class_probabilities(&fp, x)?;
            Ok(*probs.last().expect("at least two classes"))
        }
    }
}

fn evaluate(model: &FittedModel, pop: &[Bits], config: &GAConfig) -> Result<Vec<f64>> {
    pop.par_iter().map(|b| fitness(model, b, config)).collect()
}

/// `ρ_r`: the number of members with strictly lower fitness.
pub fn ranks(fitnesses: &[f64]) -> Vec<usize> {
    fitnesses
        .iter()
        .map(|f| fitnesses.iter().filter(|g| *g < f).count())
        .collect()
}

/// Selection probabilities proportional to `a + b ρ_r`.
pub fn selection_weights(fitnesses: &[f64], a: f64, b: f64) -> Vec<f64> {
    let w: Vec<f64> = ranks(fitnesses).iter().map(|&r| a + b * r as f64).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Samples `k` members with replacement, weighted by `a + b ρ_r`.
pub fn selection_step<R: Rng>(population: &[Bits], fitnesses: &[f64], a: f64, b: f64, rng: &mut R) -> Vec<Bits> {
    let weights: Vec<f64> = ranks(fitnesses).iter().map(|&r| a + b * r as f64).collect();
    let dist = WeightedIndex::new(&weights).expect("positive weights");
    (0..population.len())
        .map(|_| population[dist.sample(rng)].clone())
        .collect()
}

/// Exchanges the suffixes of the cut point `λ` of a pair of members.
pub fn crossover_pair(a: &mut Bits, b: &mut Bits, lambda: usize) {
    a.swap_suffix(b, lambda);
}

/// For each pair `(1,2), (3,4), …`, with probability `p_c` draws `λ` uniformly
/// in `1..=κ` and swaps every position after `λ`.
pub fn crossover_step<R: Rng>(population: &mut [Bits], p_c: f64, rng: &mut R) {
    for pair in population.chunks_exact_mut(2) {
        let coin: f64 = rng.random();
        let lambda = rng.random_range(1..=pair[0].len());
        if coin < p_c {
            let (a, b) = pair.split_at_mut(1);
            crossover_pair(&mut a[0], &mut b[0], lambda);
        }
    }
}

/// With probability `p_m` per member, flips one feature drawn uniformly from
/// `features`.
pub fn mutation_step<R: Rng>(population: &mut [Bits], p_m: f64, features: &[usize], rng: &mut R) {
    for member in population.iter_mut() {
        let coin: f64 = rng.random();
        let delta = features[rng.random_range(0..features.len())];
        if coin < p_m {
            member.flip(delta);
        }
    }
}

fn random_member<R: Rng>(kappa: usize, features: &[usize], rng: &mut R) -> Bits {
    loop {
        let mut b = Bits::zeros(kappa);
        for &i in features {
            if rng.random::<bool>() {
                b.set(i, true);
            }
        }
        if !b.is_zero() {
            return b;
        }
    }
}

fn best_of(fitnesses: &[f64]) -> usize {
    // First maximum, so ties resolve to the lowest index.
    let mut best = 0;
    for (i, &f) in fitnesses.iter().enumerate() {
        if f > fitnesses[best] {
            best = i;
        }
    }
    best
}

pub fn run_ga(model: &FittedModel, config: &GAConfig) -> Result<GAResult> {
    let kappa = model.data.space().kappa();
    config.validate(kappa)?;
    if config.fitness == FitnessKind::MaxTopClassProb && config.x_star.is_none() {
        return Err(Error::Config("probability fitness needs x_star".into()));
    }
    let features = config.mutable_features(kappa);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut pop: Vec<Bits> = (0..config.k).map(|_| random_member(kappa, &features, &mut rng)).collect();
    let mut fit = evaluate(model, &pop, config)?;
    let mut history = vec![fit[best_of(&fit)]];

    for _ in 0..config.generations {
        let elite = config.elitism.then(|| {
            let i = best_of(&fit);
            (pop[i].clone(), fit[i])
        });
        let mut next = selection_step(&pop, &fit, config.a, config.b, &mut rng);
        crossover_step(&mut next, config.p_c, &mut rng);
        mutation_step(&mut next, config.p_m, &features, &mut rng);
        if config.dedup {
            for i in 1..next.len() {
                while next[..i].contains(&next[i]) {
                    next[i] = random_member(kappa, &features, &mut rng);
                }
            }
        }
        pop = next;
        fit = evaluate(model, &pop, config)?;
        if let Some((bits, f)) = elite {
            let worst = (0..fit.len())
                .min_by(|&a, &b| fit[a].total_cmp(&fit[b]))
                .expect("non-empty population");
            if f > fit[best_of(&fit)] {
                pop[worst] = bits;
                fit[worst] = f;
            }
        }
        history.push(fit[best_of(&fit)]);
    }

    let b = best_of(&fit);
    let n = pop.len() as f64;
    let feature_frequency = (0..kappa)
        .map(|j| pop.iter().filter(|m| m.get(j)).count() as f64 / n)
        .collect();
    let final_population: Vec<Member> = pop
        .into_iter()
        .zip(fit)
        .map(|(bits, fitness)| Member { bits, fitness })
        .collect();
    Ok(GAResult {
        best: final_population[b].clone(),
        final_population,
        feature_frequency,
        history,
    })
}

/// Every non-zero fingerprint of length `kappa`, in binary-code order.
pub fn enumerate_space(kappa: usize) -> Vec<Bits> {
    assert!(kappa <= 24, "exhaustive enumeration limited to 24 features");
    (1u64..(1u64 << kappa)).map(|c| Bits::from_index(c, kappa)).collect()
}

/// Fitness of every non-zero fingerprint.
pub fn exhaustive_fitness(model: &FittedModel, config: &GAConfig) -> Result<Vec<(Bits, f64)>> {
    let all = enumerate_space(model.data.space().kappa());
    let fit = evaluate(model, &all, config)?;
    Ok(all.into_iter().zip(fit).collect())
}

/// 1 + the number of candidates with strictly higher fitness than `value`.
pub fn rank_among(scores: &[(Bits, f64)], value: f64) -> usize {
    1 + scores.iter().filter(|(_, f)| *f > value).count()
}
