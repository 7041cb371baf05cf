//! Discrete Bayes filter over loop closure hypotheses.
//!
//! The state space is the virtual "new place" state plus every WM location.
//! Each iteration predicts the belief with a fixed transition model, weighs
//! it with a likelihood built from signature similarities and renormalizes.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{CompactGraph, LocationGraph};
use crate::memory::{similarity, Signature};
use crate::LocationId;

/// Parameters of the transition model.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionParams {
    pub p_new_given_new: f64,
    /// Total mass flowing from "new place" to the WM states, split evenly.
    pub p_loop_given_new: f64,
    pub p_new_given_loop: f64,
    /// Mass spread around the previous loop state.
    pub neighbor_mass: f64,
    pub gaussian_sigma: f64,
    /// Largest graph offset receiving neighbour mass.
    pub radius: usize,
}

impl Default for TransitionParams {
    fn default() -> Self {
        Self {
            p_new_given_new: 0.9,
            p_loop_given_new: 0.1,
            p_new_given_loop: 0.1,
            neighbor_mass: 0.9,
            gaussian_sigma: 1.6,
            radius: 4,
        }
    }
}

impl TransitionParams {
    /// Weights for offsets `-radius..=radius`, indexed by `offset + radius`,
    /// summing to `neighbor_mass`.
    pub fn gaussian_weights(&self) -> Vec<f64> {
        let r = self.radius as i64;
        let raw: Vec<f64> = (-r..=r)
            .map(|k| (-((k * k) as f64) / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w * self.neighbor_mass / total).collect()
    }
}

/// A probability (or unnormalized belief) over the new-place state and
/// WM locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub new_place: f64,
    pub locations: BTreeMap<LocationId, f64>,
}

impl Default for Posterior {
    fn default() -> Self {
        Self::initial()
    }
}

impl Posterior {
    /// All mass on "new place".
    pub fn initial() -> Self {
        Self {
            new_place: 1.0,
            locations: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: LocationId) -> f64 {
        self.locations.get(&id).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.new_place + self.locations.values().sum::<f64>()
    }

    pub fn states(&self) -> impl Iterator<Item = LocationId> + '_ {
        self.locations.keys().copied()
    }

    fn normalize(&mut self) -> bool {
        let total = self.total();
        if !(total > 0.0 && total.is_finite()) {
            return false;
        }
        self.new_place /= total;
        for p in self.locations.values_mut() {
            *p /= total;
        }
        true
    }

    /// Drops `removed` states, adds `added` ones with zero mass and
    /// renormalizes. With nothing left, all mass returns to "new place".
    pub fn adjust_states(&mut self, removed: &[LocationId], added: &[LocationId]) {
        let mut changed = false;
        for id in removed {
            if let Some(p) = self.locations.remove(id) {
                changed |= p != 0.0;
            }
        }
        for &id in added {
            self.locations.entry(id).or_insert(0.0);
        }
        if !changed {
            return;
        }
        if !self.normalize() {
            self.new_place = 1.0;
            self.locations.values_mut().for_each(|p| *p = 0.0);
        }
    }
}

/// Observation model for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Likelihood {
    /// Similarity of the current signature to each WM location.
    pub scores: BTreeMap<LocationId, f64>,
    /// Mean of the non-null scores (0 when there are none).
    pub mu: f64,
    /// Population standard deviation of the non-null scores.
    pub sigma: f64,
    pub new_place: f64,
    pub locations: BTreeMap<LocationId, f64>,
}

/// Builds the likelihood from precomputed similarity scores.
pub fn likelihood_from_scores(scores: BTreeMap<LocationId, f64>) -> Likelihood {
    let nonnull: Vec<f64> = scores.values().copied().filter(|&s| s > 0.0).collect();
    let (mu, sigma, flat) = if nonnull.is_empty() {
        (0.0, 0.0, true)
    } else {
        let n = nonnull.len() as f64;
        let mu = nonnull.iter().sum::<f64>() / n;
        let var = nonnull.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / n;
        let max = nonnull.iter().copied().fold(f64::MIN, f64::max);
        let min = nonnull.iter().copied().fold(f64::MAX, f64::min);
        // Equal scores would leave rounding noise in `var`.
        if max == min {
            (mu, 0.0, true)
        } else {
            (mu, var.sqrt(), false)
        }
    };
    let locations = scores
        .iter()
        .map(|(&id, &s)| {
            let l = if mu > 0.0 && s >= mu + sigma {
                (s - sigma) / mu
            } else {
                1.0
            };
            (id, l)
        })
        .collect();
    let new_place = if mu == 0.0 {
        1.0
    } else if flat {
        10.0 * (scores.len() + 1) as f64
    } else {
        mu / sigma + 1.0
    };
    Likelihood {
        scores,
        mu,
        sigma,
        new_place,
        locations,
    }
}

/// Scores `current` against every WM signature.
pub fn compute_likelihood(current: &Signature, wm: &[(LocationId, &Signature)]) -> Likelihood {
    likelihood_from_scores(
        wm.iter()
            .map(|(id, sig)| (*id, similarity(current, sig)))
            .collect(),
    )
}

/// Signed graph offsets around `center` within `radius`: BFS distance,
/// negative for locations with a smaller id. Returns, per offset index
/// (`offset + radius`), the locations at that offset.
pub fn signed_offsets(
    graph: &LocationGraph,
    center: LocationId,
    radius: usize,
) -> Vec<Vec<LocationId>> {
    bucket_offsets(center, radius, graph.within(center, radius))
}

fn bucket_offsets(
    center: LocationId,
    radius: usize,
    near: Vec<(LocationId, usize)>,
) -> Vec<Vec<LocationId>> {
    let mut buckets = vec![Vec::new(); 2 * radius + 1];
    for (id, d) in near {
        let idx = if id < center { radius - d } else { radius + d };
        buckets[idx].push(id);
    }
    buckets
}

/// Propagates `prev` through the transition model onto `states` (the
/// current WM). The result is not normalized: mass addressed to locations
/// outside `states` is dropped.
pub fn predict(
    prev: &Posterior,
    states: &BTreeSet<LocationId>,
    graph: &LocationGraph,
    params: &TransitionParams,
) -> Posterior {
    let mut belief = Posterior {
        new_place: params.p_new_given_new * prev.new_place,
        locations: states.iter().map(|&id| (id, 0.0)).collect(),
    };
    if !states.is_empty() {
        let share = params.p_loop_given_new / states.len() as f64 * prev.new_place;
        belief.locations.values_mut().for_each(|p| *p += share);
    }
    let weights = params.gaussian_weights();
    let radius = params.radius;
    let mut compact = CompactGraph::new(graph);
    let mut incoming = vec![0.0; compact.len()];
    for (&j, &pj) in &prev.locations {
        if pj == 0.0 {
            continue;
        }
        belief.new_place += params.p_new_given_loop * pj;
        let near = compact.within_indices(j, radius);
        let slot = |i: u32, d: usize| {
            if compact.id_at(i as usize) < j {
                radius - d
            } else {
                radius + d
            }
        };
        let mut counts = vec![0usize; 2 * radius + 1];
        for &(i, d) in &near {
            counts[slot(i, d)] += 1;
        }
        for &(i, d) in &near {
            let k = slot(i, d);
            incoming[i as usize] += weights[k] * pj / counts[k] as f64;
        }
    }
    for (id, p) in belief.locations.iter_mut() {
        if let Some(i) = compact.index_of(*id) {
            *p += incoming[i];
        }
    }
    belief
}

/// Weighs `prior` by `likelihood` and normalizes. States missing from the
/// likelihood keep a likelihood of 1.
pub fn update(prior: &Posterior, likelihood: &Likelihood) -> Posterior {
    let mut post = Posterior {
        new_place: prior.new_place * likelihood.new_place,
        locations: prior
            .locations
            .iter()
            .map(|(id, p)| (*id, p * likelihood.locations.get(id).copied().unwrap_or(1.0)))
            .collect(),
    };
    if !post.normalize() {
        log::warn!("posterior vanished; falling back to uniform");
        let n = (post.locations.len() + 1) as f64;
        post.new_place = 1.0 / n;
        post.locations.values_mut().for_each(|p| *p = 1.0 / n);
    }
    post
}

/// A loop closure hypothesis with its neighbourhood-summed probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hypothesis {
    pub location: LocationId,
    pub probability: f64,
}

/// The most probable location, ties to the smallest id, scored with the
/// posterior mass of its neighbourhood (within `radius` hops, itself
/// included).
pub fn best_candidate(post: &Posterior, graph: &LocationGraph, radius: usize) -> Option<Hypothesis> {
    let mut top: Option<(LocationId, f64)> = None;
    for (&i, &p) in &post.locations {
        if top.is_none_or(|(_, best)| p > best) {
            top = Some((i, p));
        }
    }
    let (location, p) = top?;
    let probability = if graph.contains(location) {
        graph
            .within(location, radius)
            .into_iter()
            .map(|(id, _)| post.get(id))
            .sum()
    } else {
        p
    };
    Some(Hypothesis {
        location,
        probability,
    })
}

/// Accepts the best candidate when its summed probability exceeds `t_loop`
/// and the WM holds at least `t_min_hyp` locations.
pub fn select_hypothesis(
    post: &Posterior,
    graph: &LocationGraph,
    n_wm: usize,
    t_loop: f64,
    t_min_hyp: usize,
    radius: usize,
) -> Option<Hypothesis> {
    if n_wm < t_min_hyp {
        return None;
    }
    best_candidate(post, graph, radius).filter(|h| h.probability > t_loop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(ids: impl IntoIterator<Item = LocationId>) -> LocationGraph {
        let mut g = LocationGraph::new();
        let ids: Vec<_> = ids.into_iter().collect();
        for &i in &ids {
            g.add_node(i);
        }
        for w in ids.windows(2) {
            g.link(w[0], w[1]);
        }
        g
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn likelihood_worked_example() {
        let lik = likelihood_from_scores(BTreeMap::from([(0, 0.2), (1, 0.4), (2, 0.6)]));
        let sigma = (0.08f64 / 3.0).sqrt();
        assert!(close(lik.mu, 0.4, 1e-12));
        assert!(close(lik.sigma, sigma, 1e-12));
        assert!(close(lik.locations[&2], (0.6 - sigma) / 0.4, 1e-12));
        assert_eq!(lik.locations[&0], 1.0);
        assert_eq!(lik.locations[&1], 1.0);
        assert!(close(lik.new_place, 0.4 / sigma + 1.0, 1e-12));
    }

    #[test]
    fn likelihood_degenerate_cases() {
        let zero = likelihood_from_scores(BTreeMap::from([(0, 0.0), (1, 0.0)]));
        assert_eq!(zero.new_place, 1.0);
        assert!(zero.locations.values().all(|&l| l == 1.0));

        let flat = likelihood_from_scores(BTreeMap::from([(0, 0.3), (1, 0.3), (2, 0.3)]));
        assert_eq!(flat.sigma, 0.0);
        assert!(flat.locations.values().all(|&l| l == 1.0));
        assert_eq!(flat.new_place, 40.0);

        let single = likelihood_from_scores(BTreeMap::from([(0, 0.5), (1, 0.0)]));
        assert_eq!(single.new_place, 30.0);
        assert_eq!(single.locations[&0], 1.0);
    }

    #[test]
    fn new_place_likelihood_grows_with_mean() {
        // Shift all scores: sigma stays, mu grows.
        let mut last = 0.0;
        for step in 0..10 {
            let base = 0.05 * step as f64;
            let lik = likelihood_from_scores(BTreeMap::from([(0, base + 0.1), (1, base + 0.3)]));
            assert!(lik.new_place > last);
            last = lik.new_place;
        }
    }

    #[test]
    fn gaussian_mass() {
        let w = TransitionParams::default().gaussian_weights();
        assert_eq!(w.len(), 9);
        assert!(close(w.iter().sum::<f64>(), 0.9, 1e-12));
        assert!(w[4] > w[3] && w[3] > w[2]);
        assert!(close(w[0], w[8], 1e-15));
    }

    #[test]
    fn predict_from_new_place() {
        let states: BTreeSet<LocationId> = (0..5).collect();
        let prior = predict(&Posterior::initial(), &states, &chain(0..5), &TransitionParams::default());
        assert!(close(prior.new_place, 0.9, 1e-15));
        assert!(prior.locations.values().all(|&p| close(p, 0.02, 1e-15)));
    }

    #[test]
    fn predict_from_interior_state() {
        let states: BTreeSet<LocationId> = (0..20).collect();
        let prev = Posterior {
            new_place: 0.0,
            locations: states.iter().map(|&i| (i, if i == 10 { 1.0 } else { 0.0 })).collect(),
        };
        let prior = predict(&prev, &states, &chain(0..20), &TransitionParams::default());
        assert!(close(prior.new_place, 0.1, 1e-15));
        let window: f64 = (6..=14).map(|i| prior.get(i)).sum();
        assert!(close(window, 0.9, 1e-12));
        assert!(close(prior.total(), 1.0, 1e-12));
        let peak = prior.locations.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(*peak.0, 10);
    }

    #[test]
    fn update_examples() {
        let prior = Posterior {
            new_place: 0.5,
            locations: BTreeMap::from([(3, 0.5)]),
        };
        let lik = Likelihood {
            scores: BTreeMap::new(),
            mu: 0.0,
            sigma: 0.0,
            new_place: 2.0,
            locations: BTreeMap::from([(3, 1.0)]),
        };
        let post = update(&prior, &lik);
        assert!(close(post.new_place, 2.0 / 3.0, 1e-15));
        assert!(close(post.get(3), 1.0 / 3.0, 1e-15));

        let ones = Likelihood {
            new_place: 1.0,
            ..lik
        };
        assert_eq!(update(&prior, &ones), prior);
    }

    #[test]
    fn adjust_states_renormalizes() {
        let mut p = Posterior {
            new_place: 0.4,
            locations: BTreeMap::from([(1, 0.2), (2, 0.4), (3, 0.0)]),
        };
        let before = p.clone();
        p.adjust_states(&[3], &[]);
        assert_eq!(p.new_place, before.new_place);
        p.adjust_states(&[1], &[7]);
        assert!(close(p.new_place, 0.5, 1e-15));
        assert!(close(p.get(2), 0.5, 1e-15));
        assert_eq!(p.get(7), 0.0);
        let mut only = Posterior {
            new_place: 0.0,
            locations: BTreeMap::from([(1, 1.0)]),
        };
        only.adjust_states(&[1], &[]);
        assert_eq!(only.new_place, 1.0);
    }

    #[test]
    fn hypothesis_gating() {
        let g = chain(0..20);
        let mut post = Posterior {
            new_place: 0.5,
            locations: (0..20).map(|i| (i, 0.0)).collect(),
        };
        post.locations.insert(15, 0.5);
        assert_eq!(select_hypothesis(&post, &g, 10, 0.1, 15, 4), None);
        let h = select_hypothesis(&post, &g, 20, 0.1, 15, 4).unwrap();
        assert_eq!(h.location, 15);
        assert!(close(h.probability, 0.5, 1e-15));
        post.locations.insert(15, 0.05);
        post.locations.insert(18, 0.04);
        post.new_place = 0.91;
        assert_eq!(select_hypothesis(&post, &g, 20, 0.1, 15, 4), None);
        post.locations.insert(3, 0.05);
        // Equal maxima: the smaller id wins.
        let h = best_candidate(&post, &g, 4).unwrap();
        assert_eq!(h.location, 3);
        assert!(close(h.probability, 0.05, 1e-15));
    }

    #[test]
    fn window_sums_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = chain(0..30);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum::<f64>() + 1.0;
            let post = Posterior {
                new_place: 1.0 / total,
                locations: raw.iter().enumerate().map(|(i, p)| (i as u64, p / total)).collect(),
            };
            let argmax = (0..30).fold(0, |b, i| if raw[i] > raw[b] { i } else { b }) as i64;
            let window: f64 = (argmax - 4..=argmax + 4)
                .filter(|j| (0..30).contains(j))
                .map(|j| raw[j as usize] / total)
                .sum();
            let best = (argmax as u64, window);
            let h = best_candidate(&post, &g, 4).unwrap();
            assert_eq!(h.location, best.0);
            assert!(close(h.probability, best.1, 1e-12));
        }
    }
}
