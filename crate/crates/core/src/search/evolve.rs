//! Evolutionary and random search over update schemes under a byte budget.
//!
//! Candidates outside the budget carry criterion -inf. Mutation perturbs k
//! by +-1, toggles a weight layer, or steps a ratio; crossover mixes the
//! parents' weight sets uniformly and averages k. Schemes are repaired
//! structurally so weight updates always lie within the last k layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{Ratio, UpdateScheme, WeightUpdate};

use super::ContributionTable;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_prob: f64,
    /// Number of top candidates kept as parents each generation.
    pub parents: usize,
    pub budget_bytes: u64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 32,
            generations: 64,
            mutation_prob: 0.3,
            parents: 8,
            budget_bytes: u64::MAX,
            seed: 0,
        }
    }
}

impl SearchConfig {
    fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("population must be >= 2".into()));
        }
        if self.budget_bytes == 0 {
            return Err(Error::Config("budget must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub scheme: UpdateScheme,
    pub criterion: f64,
    pub memory: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchOutcome {
    pub best: Candidate,
    /// Best-so-far criterion after each evaluation (monotone).
    pub history: Vec<(usize, f64)>,
    pub evaluations: usize,
}

/// Memory model used as the search constraint, typically
/// [`crate::memplan::analytic_extra_memory`] curried over a graph.
pub type MemModel<'a> = dyn Fn(&UpdateScheme) -> Result<u64> + 'a;

fn evaluate(
    table: &ContributionTable,
    mem_model: &MemModel,
    budget: u64,
    scheme: UpdateScheme,
) -> Result<Candidate> {
    let memory = mem_model(&scheme)?;
    let criterion = if memory > budget {
        f64::NEG_INFINITY
    } else {
        table.criterion(&scheme)
    };
    Ok(Candidate {
        scheme,
        criterion,
        memory,
    })
}

fn random_scheme(rng: &mut ChaCha8Rng, table: &ContributionTable) -> UpdateScheme {
    let layers = table.layer_count();
    let k = rng.gen_range(0..=layers);
    let mut weight_updates = Vec::new();
    for layer in layers.saturating_sub(k)..layers {
        if rng.gen_bool(0.3) {
            let options = table.ratio_options(layer);
            if options.is_empty() {
                continue;
            }
            let ratio = options[rng.gen_range(0..options.len())];
            weight_updates.push(WeightUpdate { layer, ratio });
        }
    }
    UpdateScheme {
        bias_depth_k: k,
        weight_updates,
        classifier_trainable: true,
    }
}

/// Drop weight updates outside the last-k window or outside the measured
/// ratio space, and re-sort; backpropagation reachability and slicing
/// support are enforced structurally rather than penalized.
fn repair(mut scheme: UpdateScheme, table: &ContributionTable) -> UpdateScheme {
    let layers = table.layer_count();
    scheme.bias_depth_k = scheme.bias_depth_k.min(layers);
    scheme.weight_updates.retain(|wu| {
        wu.layer < layers
            && wu.layer + scheme.bias_depth_k >= layers
            && table.ratio_options(wu.layer).contains(&wu.ratio)
    });
    scheme.weight_updates.sort_by_key(|wu| wu.layer);
    scheme.weight_updates.dedup_by_key(|wu| wu.layer);
    scheme
}

fn mutate(
    rng: &mut ChaCha8Rng,
    scheme: &UpdateScheme,
    table: &ContributionTable,
    prob: f64,
) -> UpdateScheme {
    let layers = table.layer_count();
    let mut out = scheme.clone();
    if rng.gen_bool(prob) {
        // perturb k by +-1
        if rng.gen_bool(0.5) {
            out.bias_depth_k = (out.bias_depth_k + 1).min(layers);
        } else {
            out.bias_depth_k = out.bias_depth_k.saturating_sub(1);
        }
    }
    if rng.gen_bool(prob) && layers > 0 {
        // toggle a weight layer within the window
        let window = layers.saturating_sub(out.bias_depth_k)..layers;
        if !window.is_empty() {
            let layer = rng.gen_range(window);
            if let Some(pos) = out.weight_updates.iter().position(|wu| wu.layer == layer) {
                out.weight_updates.remove(pos);
            } else {
                let options = table.ratio_options(layer);
                if !options.is_empty() {
                    let ratio = options[rng.gen_range(0..options.len())];
                    out.weight_updates.push(WeightUpdate { layer, ratio });
                }
            }
        }
    }
    if rng.gen_bool(prob) && !out.weight_updates.is_empty() {
        // step one ratio up or down within the measured options
        let idx = rng.gen_range(0..out.weight_updates.len());
        let options = table.ratio_options(out.weight_updates[idx].layer);
        let cur = options
            .iter()
            .position(|&r| r == out.weight_updates[idx].ratio)
            .unwrap_or(0);
        let next = if rng.gen_bool(0.5) {
            (cur + 1).min(options.len() - 1)
        } else {
            cur.saturating_sub(1)
        };
        out.weight_updates[idx].ratio = options[next];
    }
    repair(out, table)
}

fn crossover(
    rng: &mut ChaCha8Rng,
    a: &UpdateScheme,
    b: &UpdateScheme,
    table: &ContributionTable,
) -> UpdateScheme {
    let layers = table.layer_count();
    let k = (a.bias_depth_k + b.bias_depth_k).div_ceil(2);
    let mut weight_updates = Vec::new();
    for layer in 0..layers {
        let from_a = a.ratio_for(layer);
        let from_b = b.ratio_for(layer);
        let pick = if rng.gen_bool(0.5) { from_a } else { from_b };
        if let Some(ratio) = pick {
            weight_updates.push(WeightUpdate { layer, ratio });
        }
    }
    repair(
        UpdateScheme {
            bias_depth_k: k,
            weight_updates,
            classifier_trainable: true,
        },
        table,
    )
}

fn finish(
    mut best: Option<Candidate>,
    history: Vec<(usize, f64)>,
    evaluations: usize,
) -> Result<SearchOutcome> {
    let best = best
        .take()
        .filter(|c| c.criterion.is_finite())
        .ok_or_else(|| {
            Error::Infeasible("no feasible candidate: budget below the classifier-only floor".into())
        })?;
    Ok(SearchOutcome {
        best,
        history,
        evaluations,
    })
}

/// Maximize the summed contribution subject to the memory budget.
pub fn evolutionary_search(
    table: &ContributionTable,
    cfg: &SearchConfig,
    mem_model: &MemModel,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    table.validate()?;
    let layers = table.layer_count();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = Vec::new();
    let mut evaluations = 0usize;
    let mut best: Option<Candidate> = None;
    let track = |cand: &Candidate, best: &mut Option<Candidate>, evaluations: &mut usize,
                     history: &mut Vec<(usize, f64)>| {
        *evaluations += 1;
        let better = match best.as_ref() {
            None => cand.criterion.is_finite(),
            Some(b) => cand.criterion > b.criterion,
        };
        if better {
            *best = Some(cand.clone());
        }
        let cur = best.as_ref().map(|b| b.criterion).unwrap_or(f64::NEG_INFINITY);
        history.push((*evaluations, cur));
    };

    // seed population: classifier-only, bias-only depths, random schemes
    let mut population: Vec<Candidate> = Vec::new();
    let mut seeds = vec![UpdateScheme::classifier_only(), UpdateScheme::bias_only(layers)];
    while seeds.len() < cfg.population {
        seeds.push(random_scheme(&mut rng, table));
    }
    for scheme in seeds {
        let cand = evaluate(table, mem_model, cfg.budget_bytes, scheme)?;
        track(&cand, &mut best, &mut evaluations, &mut history);
        population.push(cand);
    }

    for _gen in 0..cfg.generations {
        population.sort_by(|a, b| b.criterion.partial_cmp(&a.criterion).unwrap());
        population.truncate(cfg.parents.max(2).min(population.len()));
        let parents = population.clone();
        while population.len() < cfg.population {
            let pa = &parents[rng.gen_range(0..parents.len())].scheme;
            let pb = &parents[rng.gen_range(0..parents.len())].scheme;
            let child = crossover(&mut rng, pa, pb, table);
            let child = mutate(&mut rng, &child, table, cfg.mutation_prob);
            let cand = evaluate(table, mem_model, cfg.budget_bytes, child)?;
            track(&cand, &mut best, &mut evaluations, &mut history);
            population.push(cand);
        }
    }
    finish(best, history, evaluations)
}

/// Uniform sampling over the scheme space with the same feasibility filter
/// and history format.
pub fn random_search(
    table: &ContributionTable,
    cfg: &SearchConfig,
    mem_model: &MemModel,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    table.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.population + cfg.population * cfg.generations;

    let mut history = Vec::new();
    let mut best: Option<Candidate> = None;
    for eval in 1..=total {
        let cand = evaluate(table, mem_model, cfg.budget_bytes, random_scheme(&mut rng, table))?;
        let better = match best.as_ref() {
            None => cand.criterion.is_finite(),
            Some(b) => cand.criterion > b.criterion,
        };
        if better {
            best = Some(cand);
        }
        let cur = best.as_ref().map(|b| b.criterion).unwrap_or(f64::NEG_INFINITY);
        history.push((eval, cur));
    }
    finish(best, history, total)
}

/// Exhaustive enumeration for small spaces; the oracle for search tests.
pub fn exhaustive_best(
    table: &ContributionTable,
    budget: u64,
    mem_model: &MemModel,
) -> Result<Candidate> {
    let layers = table.layer_count();
    let mut best: Option<Candidate> = None;
    for k in 0..=layers {
        let window: Vec<usize> = (layers - k..layers).collect();
        // each layer in the window: none or one of its measured ratios
        let per_layer: Vec<Vec<Ratio>> = window.iter().map(|&l| table.ratio_options(l)).collect();
        let combos: usize = per_layer.iter().map(|o| o.len() + 1).product();
        for combo in 0..combos {
            let mut weight_updates = Vec::new();
            let mut c = combo;
            for (wi, &layer) in window.iter().enumerate() {
                let options = per_layer[wi].len() + 1;
                let pick = c % options;
                c /= options;
                if pick > 0 {
                    weight_updates.push(WeightUpdate {
                        layer,
                        ratio: per_layer[wi][pick - 1],
                    });
                }
            }
            let scheme = UpdateScheme {
                bias_depth_k: k,
                weight_updates,
                classifier_trainable: true,
            };
            let cand = evaluate(table, mem_model, budget, scheme)?;
            if cand.criterion.is_finite()
                && best.as_ref().map(|b| cand.criterion > b.criterion).unwrap_or(true)
            {
                best = Some(cand);
            }
        }
    }
    best.ok_or_else(|| Error::Infeasible("no feasible candidate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::tests::synthetic_table;

    fn flat_mem(scheme: &UpdateScheme) -> Result<u64> {
        // classifier floor 8 bytes; each weight update costs by ratio
        let mut bytes = 8u64;
        bytes += 4 * scheme.bias_depth_k as u64;
        for wu in &scheme.weight_updates {
            bytes += (64.0 * wu.ratio.value()) as u64;
        }
        Ok(bytes)
    }

    #[test]
    fn unconstrained_argmax_is_full_k_with_best_ratios() {
        let table = synthetic_table(5, 11);
        let cfg = SearchConfig {
            population: 16,
            generations: 40,
            seed: 5,
            ..Default::default()
        };
        let out = evolutionary_search(&table, &cfg, &flat_mem).unwrap();
        let brute = exhaustive_best(&table, u64::MAX, &flat_mem).unwrap();
        assert_eq!(out.best.criterion, brute.criterion);
        // synthetic tables are monotone, so the optimum takes every layer at
        // the largest ratio with k = L
        assert_eq!(out.best.scheme.bias_depth_k, 5);
        assert_eq!(out.best.scheme.weight_updates.len(), 5);
        assert!(out
            .best
            .scheme
            .weight_updates
            .iter()
            .all(|wu| wu.ratio == Ratio::Full));
    }

    #[test]
    fn histories_are_monotone_and_deterministic() {
        let table = synthetic_table(6, 2);
        let cfg = SearchConfig {
            population: 8,
            generations: 10,
            budget_bytes: 200,
            seed: 9,
            ..Default::default()
        };
        for search in [evolutionary_search, random_search] {
            let a = search(&table, &cfg, &flat_mem).unwrap();
            let b = search(&table, &cfg, &flat_mem).unwrap();
            assert_eq!(a.best, b.best);
            assert!(a.history.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn infeasible_budget_is_an_error() {
        let table = synthetic_table(4, 3);
        let cfg = SearchConfig {
            population: 4,
            generations: 2,
            budget_bytes: 1,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(
            evolutionary_search(&table, &cfg, &flat_mem),
            Err(crate::error::Error::Infeasible(_))
        ));
    }

    #[test]
    fn feasibility_of_returned_candidates() {
        let table = synthetic_table(6, 8);
        for budget in [30u64, 60, 120, 500] {
            let cfg = SearchConfig {
                population: 12,
                generations: 15,
                budget_bytes: budget,
                seed: 3,
                ..Default::default()
            };
            if let Ok(out) = evolutionary_search(&table, &cfg, &flat_mem) {
                assert!(out.best.memory <= budget);
                assert_eq!(out.best.memory, flat_mem(&out.best.scheme).unwrap());
            }
        }
    }

    #[test]
    fn single_random_sample_is_reproducible() {
        let table = synthetic_table(4, 1);
        let cfg = SearchConfig {
            population: 2,
            generations: 0,
            seed: 77,
            ..Default::default()
        };
        let a = random_search(&table, &cfg, &flat_mem).unwrap();
        let b = random_search(&table, &cfg, &flat_mem).unwrap();
        assert_eq!(a.best.scheme, b.best.scheme);
    }
}
