//! Cut-point search: a genetic algorithm over per-client quadruples, run on a
//! proportionally reduced fleet, and an exact search that exploits identical
//! device profiles.

mod reduce;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use reduce::{reduce_fleet, Reduction};

use crate::error::{Error, Result};
use crate::graph::{ModelProfile, Net};
use crate::latency::{CutAssignment, Cuts, Evaluator, Fleet};

/// Largest search space `exhaustive_search` accepts.
pub const EXHAUSTIVE_LIMIT: u128 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    /// Per-client probability of moving one cut.
    pub mutation_rate: f64,
    pub elites: usize,
    /// Fleet size the search runs on; `None` keeps every client.
    pub reduced_target: Option<usize>,
    /// Stop after this many generations without a new best.
    pub stagnation: Option<usize>,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 1000,
            generations: 200,
            tournament: 5,
            mutation_rate: 0.1,
            elites: 2,
            reduced_target: Some(20),
            stagnation: Some(30),
            seed: 0,
        }
    }
}

impl GaConfig {
    /// Smaller population for quick runs.
    pub fn desk() -> Self {
        Self {
            population: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < self.elites + 2 {
            return Err(Error::config(
                "ga.population",
                format!(
                    "population {} must be at least elites + 2 = {}",
                    self.population,
                    self.elites + 2
                ),
            ));
        }
        if self.tournament == 0 || self.tournament > self.population {
            return Err(Error::config(
                "ga.tournament",
                format!("tournament size {} outside 1..={}", self.tournament, self.population),
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::config("ga.mutation_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    /// Quadruples over the reduced fleet.
    pub cuts: Vec<Cuts>,
    /// `-L_T` on the full fleet.
    pub fitness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    /// Best fitness seen so far.
    pub best: f64,
    /// Best fitness in this generation.
    pub current: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaOutcome {
    /// Best assignment expanded to the full fleet.
    pub assignment: CutAssignment,
    pub latency: f64,
    pub best: Individual,
    pub history: Vec<GenerationStats>,
    pub evaluations: u64,
}

/// Search state shared by the GA operators.
pub struct Problem<'a> {
    pub fleet: &'a Fleet,
    pub reduction: Reduction,
    evaluator: Evaluator,
    pairs: [Vec<(usize, usize)>; 2],
}

impl<'a> Problem<'a> {
    pub fn new(fleet: &'a Fleet, profile: &ModelProfile, target: Option<usize>) -> Result<Self> {
        profile.validate()?;
        let reduction = reduce_fleet(fleet, target.unwrap_or(fleet.len()).min(fleet.len()))?;
        Ok(Self {
            fleet,
            reduction,
            evaluator: Evaluator::new(fleet, profile)?,
            pairs: [
                Cuts::pairs(profile.generator.major_count()),
                Cuts::pairs(profile.discriminator.major_count()),
            ],
        })
    }

    pub fn reduced_len(&self) -> usize {
        self.reduction.fleet.len()
    }

    /// `-L_T` after expanding to the full fleet.
    pub fn fitness(&self, cuts: &[Cuts]) -> f64 {
        -self.evaluator.latency(&self.reduction.expand(cuts).cuts)
    }

    pub fn random_cuts<R: Rng>(&self, rng: &mut R) -> Cuts {
        let (gh, gt) = *self.pairs[0].choose(rng).expect("valid G cut exists");
        let (dh, dt) = *self.pairs[1].choose(rng).expect("valid D cut exists");
        Cuts::new(gh, gt, dh, dt)
    }

    fn random_individual<R: Rng>(&self, rng: &mut R) -> Vec<Cuts> {
        (0..self.reduced_len()).map(|_| self.random_cuts(rng)).collect()
    }

    /// Valid values for one of the four slots given the other cuts.
    fn slot_values(&self, slot: usize) -> Vec<usize> {
        let pairs = &self.pairs[slot / 2];
        let mut v: Vec<usize> = pairs
            .iter()
            .map(|&(h, t)| if slot % 2 == 0 { h } else { t })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Move one random cut of `c` to a different valid value. Gives up after
    /// a few draws when the slot has a single valid value.
    pub fn mutate_one<R: Rng>(&self, c: &mut Cuts, rng: &mut R) {
        for _ in 0..8 {
            let slot = rng.gen_range(0..4);
            let values = self.slot_values(slot);
            let others: Vec<usize> = values.into_iter().filter(|&v| v != c.get(slot)).collect();
            if let Some(&v) = others.choose(rng) {
                c.set(slot, v);
                return;
            }
        }
    }
}

fn tournament<'p, R: Rng>(pop: &'p [Individual], size: usize, rng: &mut R) -> &'p Individual {
    let mut best: Option<&Individual> = None;
    for _ in 0..size {
        let cand = &pop[rng.gen_range(0..pop.len())];
        if best.is_none_or(|b| cand.fitness > b.fitness) {
            best = Some(cand);
        }
    }
    best.expect("tournament size >= 1")
}

fn crossover<R: Rng>(a: &[Cuts], b: &[Cuts], rng: &mut R) -> (Vec<Cuts>, Vec<Cuts>) {
    let n = a.len();
    if rng.gen_bool(0.5) {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            if rng.gen_bool(0.5) {
                x.push(a[i]);
                y.push(b[i]);
            } else {
                x.push(b[i]);
                y.push(a[i]);
            }
        }
        (x, y)
    } else {
        let mut p = rng.gen_range(0..=n);
        let mut q = rng.gen_range(0..=n);
        if p > q {
            std::mem::swap(&mut p, &mut q);
        }
        let mut x = a.to_vec();
        let mut y = b.to_vec();
        x[p..q].copy_from_slice(&b[p..q]);
        y[p..q].copy_from_slice(&a[p..q]);
        (x, y)
    }
}

fn evaluate(problem: &Problem, genomes: Vec<Vec<Cuts>>) -> Vec<Individual> {
    genomes
        .into_par_iter()
        .map(|cuts| Individual {
            fitness: problem.fitness(&cuts),
            cuts,
        })
        .collect()
}

/// Sort by fitness, best first; ties keep their order.
fn rank(pop: &mut [Individual]) {
    pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
}

pub fn evolve(cfg: &GaConfig, fleet: &Fleet, profile: &ModelProfile) -> Result<GaOutcome> {
    cfg.validate()?;
    let problem = Problem::new(fleet, profile, cfg.reduced_target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = (0..cfg.population)
        .map(|_| problem.random_individual(&mut rng))
        .collect();
    evolve_from(cfg, &problem, initial)
}

/// Run the GA from a given initial population of reduced-fleet genomes.
pub fn evolve_from(
    cfg: &GaConfig,
    problem: &Problem,
    initial: Vec<Vec<Cuts>>,
) -> Result<GaOutcome> {
    cfg.validate()?;
    if initial.is_empty() {
        return Err(Error::Usage("empty initial population".into()));
    }
    let mut evaluations = initial.len() as u64;
    let mut pop = evaluate(problem, initial);
    rank(&mut pop);
    let mut best = pop[0].clone();
    let mut history = Vec::new();
    let mut stale = 0usize;
    let record = |generation: usize, pop: &[Individual], best: &Individual| GenerationStats {
        generation,
        best: best.fitness,
        current: pop[0].fitness,
        mean: pop.iter().map(|i| i.fitness).sum::<f64>() / pop.len() as f64,
    };
    history.push(record(0, &pop, &best));

    for generation in 1..=cfg.generations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(generation as u64);

        let size = pop.len();
        let mut next: Vec<Vec<Cuts>> = pop
            .iter()
            .take(cfg.elites.min(size))
            .map(|i| i.cuts.clone())
            .collect();
        let elites = next.len();
        while next.len() < size {
            let a = tournament(&pop, cfg.tournament, &mut rng);
            let b = tournament(&pop, cfg.tournament, &mut rng);
            let (x, y) = crossover(&a.cuts, &b.cuts, &mut rng);
            for mut child in [x, y] {
                if next.len() == size {
                    break;
                }
                for c in child.iter_mut() {
                    if rng.gen_bool(cfg.mutation_rate) {
                        problem.mutate_one(c, &mut rng);
                    }
                }
                next.push(child);
            }
        }
        let children = next.split_off(elites);
        evaluations += children.len() as u64;
        let mut fresh: Vec<Individual> = pop.drain(..elites).collect();
        fresh.extend(evaluate(problem, children));
        pop = fresh;
        rank(&mut pop);

        if pop[0].fitness > best.fitness {
            best = pop[0].clone();
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(record(generation, &pop, &best));
        if cfg.stagnation.is_some_and(|s| stale >= s) {
            break;
        }
    }

    let assignment = problem.reduction.expand(&best.cuts);
    Ok(GaOutcome {
        latency: -best.fitness,
        assignment,
        best,
        history,
        evaluations,
    })
}

/// Result of the exact search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exhaustive {
    pub assignment: CutAssignment,
    pub latency: f64,
    /// Assignments evaluated (multisets per identical-profile group).
    pub evaluated: u64,
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) / (i + 1);
    }
    r
}

/// Non-decreasing sequences of length `m` over `0..q`.
fn multisets(q: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; m];
    loop {
        out.push(cur.clone());
        let Some(pos) = (0..m).rev().find(|&i| cur[i] + 1 < q) else {
            return out;
        };
        let v = cur[pos] + 1;
        for c in &mut cur[pos..] {
            *c = v;
        }
    }
}

/// Size of the multiset search space.
pub fn search_space(fleet: &Fleet, profile: &ModelProfile) -> u128 {
    let q = Cuts::all(
        profile.generator.major_count(),
        profile.discriminator.major_count(),
    )
    .len() as u128;
    reduce::profile_groups(fleet)
        .iter()
        .map(|g| binomial(q + g.len() as u128 - 1, g.len() as u128))
        .fold(1u128, |a, b| a.saturating_mul(b))
}

/// Global minimiser of `L_T`. Clients with identical profiles are
/// interchangeable, so each group only needs its multiset of quadruples.
pub fn exhaustive_search(fleet: &Fleet, profile: &ModelProfile) -> Result<Exhaustive> {
    exhaustive_search_limited(fleet, profile, EXHAUSTIVE_LIMIT)
}

pub fn exhaustive_search_limited(
    fleet: &Fleet,
    profile: &ModelProfile,
    limit: u128,
) -> Result<Exhaustive> {
    profile.validate()?;
    let size = search_space(fleet, profile);
    if size > limit {
        return Err(Error::SearchSpace { size, limit });
    }
    let evaluator = Evaluator::new(fleet, profile)?;
    let all = Cuts::all(
        profile.generator.major_count(),
        profile.discriminator.major_count(),
    );
    let groups = reduce::profile_groups(fleet);
    let choices: Vec<Vec<Vec<usize>>> = groups
        .iter()
        .map(|g| multisets(all.len(), g.len()))
        .collect();
    let total = size as u64;

    let decode = |mut idx: u64| -> Vec<Cuts> {
        let mut cuts = vec![all[0]; fleet.len()];
        for (g, opts) in groups.iter().zip(&choices) {
            let pick = &opts[(idx % opts.len() as u64) as usize];
            idx /= opts.len() as u64;
            for (&client, &q) in g.iter().zip(pick) {
                cuts[client] = all[q];
            }
        }
        cuts
    };
    let (latency, best) = (0..total)
        .into_par_iter()
        .map(|i| (evaluator.latency(&decode(i)), i))
        .reduce(
            || (f64::INFINITY, u64::MAX),
            |a, b| match a.0.total_cmp(&b.0) {
                std::cmp::Ordering::Less => a,
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Equal => (a.0, a.1.min(b.1)),
            },
        );
    Ok(Exhaustive {
        assignment: CutAssignment::new(decode(best)),
        latency,
        evaluated: total,
    })
}

/// Client-side major layers per network for a reporting table.
pub fn client_layers(cuts: &Cuts, profile: &ModelProfile) -> (usize, usize) {
    let n_g = profile.net(Net::Generator).major_count();
    let n_d = profile.net(Net::Discriminator).major_count();
    (
        cuts.g_head + n_g + 1 - cuts.g_tail,
        cuts.d_head + n_d + 1 - cuts.d_tail,
    )
}

#[cfg(test)]
mod tests;
