//! Dispatch policies as interchangeable strategies.
//!
//! Each policy implements [`DispatchPolicy`] and is addressed by its
//! registered name (`scheme1`, `scheme2`, `state_independent`, `hybrid_sqd`);
//! the simulator, the CLI, and the analysis sweeps all select policies
//! through [`make_policy`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterSpec, Scheme};

use super::engine::SamplingState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchKind {
    Scheme1,
    Scheme2,
    StateIndependent,
    HybridSqd,
}

impl DispatchKind {
    pub const ALL: [DispatchKind; 4] = [
        DispatchKind::Scheme1,
        DispatchKind::Scheme2,
        DispatchKind::StateIndependent,
        DispatchKind::HybridSqd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DispatchKind::Scheme1 => "scheme1",
            DispatchKind::Scheme2 => "scheme2",
            DispatchKind::StateIndependent => "state_independent",
            DispatchKind::HybridSqd => "hybrid_sqd",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// True for the two policies that sample every type and have a
    /// mean-field counterpart.
    pub fn mean_field_scheme(&self) -> Option<Scheme> {
        match self {
            DispatchKind::Scheme1 => Some(Scheme::One),
            DispatchKind::Scheme2 => Some(Scheme::Two),
            _ => None,
        }
    }
}

impl From<Scheme> for DispatchKind {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::One => DispatchKind::Scheme1,
            Scheme::Two => DispatchKind::Scheme2,
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy `{0}` requires routing probabilities")]
    MissingRoutingProbs(&'static str),
    #[error("routing probabilities must be {expected} nonnegative values summing to 1")]
    BadRoutingProbs { expected: usize },
}

/// A dispatch strategy: given the live occupancies and this arrival's
/// decision stream, pick the target server.
pub trait DispatchPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(&self, state: &mut SamplingState<'_>, rng: &mut ChaCha8Rng) -> u32;
}

/// Builds the named policy. `routing_probs` is consulted only by the two
/// probability-routed baselines.
pub fn make_policy(
    kind: DispatchKind,
    spec: &ClusterSpec,
    routing_probs: Option<&[f64]>,
) -> Result<Box<dyn DispatchPolicy>, PolicyError> {
    let routed = |name: &'static str| -> Result<Vec<f64>, PolicyError> {
        let p = routing_probs.ok_or(PolicyError::MissingRoutingProbs(name))?;
        let m = spec.num_types();
        let ok = p.len() == m
            && p.iter().all(|&x| x >= 0.0)
            && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(PolicyError::BadRoutingProbs { expected: m });
        }
        Ok(p.to_vec())
    };
    Ok(match kind {
        DispatchKind::Scheme1 => Box::new(Scheme1Policy),
        DispatchKind::Scheme2 => Box::new(Scheme2Policy),
        DispatchKind::StateIndependent => Box::new(StateIndependentPolicy {
            probs: routed("state_independent")?,
        }),
        DispatchKind::HybridSqd => Box::new(HybridSqdPolicy {
            probs: routed("hybrid_sqd")?,
        }),
    })
}

/// Uniform draw from a discrete distribution given as probabilities.
fn sample_type(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

/// Minimum-occupancy server among `d_j` fresh samples of type `j`, ties
/// within the type broken uniformly at random.
fn sampled_min_of_type(
    state: &mut SamplingState<'_>,
    j: usize,
    rng: &mut ChaCha8Rng,
) -> (u32, u32) {
    let d = state.cluster().spec.samples()[j];
    let mut best_server = u32::MAX;
    let mut best_occ = u32::MAX;
    let mut ties = 0u32;
    for r in 0..d {
        let server = state.sample_server(j, r, rng);
        let occ = state.occupancy(server);
        if occ < best_occ {
            best_occ = occ;
            best_server = server;
            ties = 1;
        } else if occ == best_occ {
            ties += 1;
            if rng.gen_range(0..ties) == 0 {
                best_server = server;
            }
        }
    }
    (best_server, best_occ)
}

/// Least sampled occupancy across all types; cross-type ties go to the
/// highest capacity (the highest type index under the nondecreasing
/// capacity ordering).
pub struct Scheme1Policy;

impl DispatchPolicy for Scheme1Policy {
    fn name(&self) -> &'static str {
        "scheme1"
    }

    fn select(&self, state: &mut SamplingState<'_>, rng: &mut ChaCha8Rng) -> u32 {
        let m = state.cluster().spec.num_types();
        let mut chosen = u32::MAX;
        let mut chosen_occ = u32::MAX;
        for j in 0..m {
            let (server, occ) = sampled_min_of_type(state, j, rng);
            if occ <= chosen_occ {
                // equal occupancy resolves to the later (faster) type
                chosen = server;
                chosen_occ = occ;
            }
        }
        chosen
    }
}

/// Highest capacity-per-job among the per-type minima; an idle sampled
/// server offers an infinite rate and wins, idle ties resolving to the
/// highest capacity.
pub struct Scheme2Policy;

impl DispatchPolicy for Scheme2Policy {
    fn name(&self) -> &'static str {
        "scheme2"
    }

    fn select(&self, state: &mut SamplingState<'_>, rng: &mut ChaCha8Rng) -> u32 {
        let m = state.cluster().spec.num_types();
        let mut chosen = u32::MAX;
        let mut chosen_occ = u32::MAX;
        let mut chosen_cap = 0.0f64;
        for j in 0..m {
            let cap = state.cluster().spec.capacity()[j];
            let (server, occ) = sampled_min_of_type(state, j, rng);
            let better = if chosen == u32::MAX {
                true
            } else if occ == 0 || chosen_occ == 0 {
                // rate-per-job is infinite on an idle server; idle beats
                // busy, and idle-vs-idle falls to the capacity ordering
                occ == 0 && (chosen_occ != 0 || cap >= chosen_cap)
            } else {
                // C_j / occ >= C_chosen / chosen_occ, cross-multiplied
                cap * chosen_occ as f64 >= chosen_cap * occ as f64
            };
            if better {
                chosen = server;
                chosen_occ = occ;
                chosen_cap = cap;
            }
        }
        chosen
    }
}

/// Fixed-probability routing to a type, then a uniform server of that type;
/// no state is read at all.
pub struct StateIndependentPolicy {
    probs: Vec<f64>,
}

impl DispatchPolicy for StateIndependentPolicy {
    fn name(&self) -> &'static str {
        "state_independent"
    }

    fn select(&self, state: &mut SamplingState<'_>, rng: &mut ChaCha8Rng) -> u32 {
        let j = sample_type(&self.probs, rng);
        // one uniform sample; same primitive as the sampling policies, so a
        // d_j = 1 hybrid run consumes an identical decision stream
        state.sample_server(j, 0, rng)
    }
}

/// Fixed-probability routing to a type, then shortest of `d_j` samples
/// within that type.
pub struct HybridSqdPolicy {
    probs: Vec<f64>,
}

impl DispatchPolicy for HybridSqdPolicy {
    fn name(&self) -> &'static str {
        "hybrid_sqd"
    }

    fn select(&self, state: &mut SamplingState<'_>, rng: &mut ChaCha8Rng) -> u32 {
        let j = sample_type(&self.probs, rng);
        sampled_min_of_type(state, j, rng).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::engine::Cluster;
    use rand::SeedableRng;

    /// Two types, two servers each, full sampling (d_j = cohort), so the
    /// sampled sets are deterministic and the selection rules can be checked
    /// directly against fixed occupancy patterns.
    fn tiny_cluster(c1: f64, c2: f64) -> Cluster {
        let spec = ClusterSpec::new(vec![0.5, 0.5], vec![c1, c2], vec![2, 2], 0.5, 1.0).unwrap();
        Cluster::new(&spec, 4).unwrap()
    }

    fn select_with(
        cluster: &Cluster,
        policy: &dyn DispatchPolicy,
        occupancy: &[u32],
        seed: u64,
    ) -> u32 {
        let mut pools: Vec<Vec<u32>> = (0..2).map(|j| cluster.cohort(j).collect()).collect();
        let mut state = SamplingState::new(cluster, occupancy, &mut pools);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        policy.select(&mut state, &mut rng)
    }

    fn frequency(
        cluster: &Cluster,
        policy: &dyn DispatchPolicy,
        occupancy: &[u32],
        target: impl Fn(u32) -> bool,
        draws: u32,
    ) -> f64 {
        let mut pools: Vec<Vec<u32>> = (0..2).map(|j| cluster.cohort(j).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut hits = 0u32;
        for _ in 0..draws {
            let mut state = SamplingState::new(cluster, occupancy, &mut pools);
            if target(policy.select(&mut state, &mut rng)) {
                hits += 1;
            }
        }
        hits as f64 / draws as f64
    }

    #[test]
    fn scheme1_picks_unique_minimum() {
        let cluster = tiny_cluster(0.5, 1.5);
        // type 0: occupancies [3, 5]; type 1: [2, 4] -> the type-1 server at 2
        let occ = [3, 5, 2, 4];
        for seed in 0..20 {
            assert_eq!(select_with(&cluster, &Scheme1Policy, &occ, seed), 2);
        }
    }

    #[test]
    fn scheme1_cross_type_tie_goes_to_capacity() {
        let cluster = tiny_cluster(0.5, 1.5);
        // both types have minimum 2; the faster type must win every time
        let occ = [2, 5, 2, 4];
        for seed in 0..20 {
            assert_eq!(select_with(&cluster, &Scheme1Policy, &occ, seed), 2);
        }
    }

    #[test]
    fn scheme1_within_type_tie_is_uniform() {
        let cluster = tiny_cluster(0.5, 1.5);
        // type 0 offers the unique minimum but both its servers tie at 2
        let occ = [2, 2, 7, 9];
        let p = frequency(&cluster, &Scheme1Policy, &occ, |s| s == 0, 40_000);
        let sigma = (0.25f64 / 40_000.0).sqrt();
        assert!((p - 0.5).abs() < 3.0 * sigma, "p = {p}");
    }

    #[test]
    fn scheme2_prefers_rate_per_job_over_occupancy() {
        // C = (1/5, 9/5): a type-1 server with 8 jobs offers 0.225 per job,
        // beating the type-0 server with 1 job at 0.2
        let cluster = tiny_cluster(0.2, 1.8);
        let occ = [1, 30, 8, 30];
        for seed in 0..20 {
            assert_eq!(select_with(&cluster, &Scheme2Policy, &occ, seed), 2);
        }
        // scheme 1 on the same state picks the occupancy minimum instead
        assert_eq!(select_with(&cluster, &Scheme1Policy, &occ, 1), 0);
    }

    #[test]
    fn scheme2_idle_server_always_wins() {
        let cluster = tiny_cluster(0.2, 1.8);
        let occ = [0, 30, 8, 30]; // slow idle server beats everything busy
        for seed in 0..20 {
            assert_eq!(select_with(&cluster, &Scheme2Policy, &occ, seed), 0);
        }
        // idle-vs-idle resolves to the higher capacity
        let occ = [0, 30, 0, 30];
        for seed in 0..20 {
            assert_eq!(select_with(&cluster, &Scheme2Policy, &occ, seed), 2);
        }
    }

    #[test]
    fn schemes_coincide_on_homogeneous_capacities() {
        let cluster = tiny_cluster(1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200u64 {
            let occ: Vec<u32> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            let a = select_with(&cluster, &Scheme1Policy, &occ, trial);
            let b = select_with(&cluster, &Scheme2Policy, &occ, trial);
            assert_eq!(a, b, "occ {occ:?}");
        }
    }

    #[test]
    fn state_independent_routes_by_probability() {
        let cluster = tiny_cluster(0.2, 1.8);
        let occ = [9, 9, 9, 9];
        let always_first = StateIndependentPolicy {
            probs: vec![1.0, 0.0],
        };
        for seed in 0..20 {
            assert!(select_with(&cluster, &always_first, &occ, seed) < 2);
        }
        let weighted = StateIndependentPolicy {
            probs: vec![0.3, 0.7],
        };
        let p = frequency(&cluster, &weighted, &occ, |s| s >= 2, 40_000);
        let sigma = (0.3f64 * 0.7 / 40_000.0).sqrt();
        assert!((p - 0.7).abs() < 3.0 * sigma, "p = {p}");
    }

    #[test]
    fn hybrid_reduces_to_sq_d_within_the_routed_type() {
        let cluster = tiny_cluster(0.2, 1.8);
        let hybrid = HybridSqdPolicy {
            probs: vec![1.0, 0.0],
        };
        // always type 0, shortest of its two servers
        let occ = [4, 1, 0, 0];
        for seed in 0..20 {
            assert_eq!(select_with(&cluster, &hybrid, &occ, seed), 1);
        }
    }

    #[test]
    fn hybrid_single_type_matches_scheme1_law() {
        // with one type, hybrid SQ(d) and scheme 1 induce the same selection
        // distribution (they differ only in stream consumption)
        let spec = ClusterSpec::single(1.0, 2, 0.5, 1.0).unwrap();
        let cluster = Cluster::new(&spec, 4).unwrap();
        let occ = [3, 1, 1, 2];
        let hybrid = HybridSqdPolicy { probs: vec![1.0] };
        let mut pools: Vec<Vec<u32>> = vec![cluster.cohort(0).collect()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0u32; 2];
        let draws = 60_000;
        for _ in 0..draws {
            let mut state = SamplingState::new(&cluster, &occ, &mut pools);
            let s = hybrid.select(&mut state, &mut rng) as usize;
            if s == 1 || s == 2 {
                counts[s - 1] += 1;
            }
        }
        // servers 1 and 2 hold the two minimum occupancies (both 1); under
        // d = 2 sampling each is selected iff sampled and tie-split:
        // P(select server 1) = P(select server 2) by symmetry
        let p1 = counts[0] as f64 / draws as f64;
        let p2 = counts[1] as f64 / draws as f64;
        assert!((p1 - p2).abs() < 0.02, "{p1} vs {p2}");

        let mut pools2: Vec<Vec<u32>> = vec![cluster.cohort(0).collect()];
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let mut counts2 = [0u32; 2];
        for _ in 0..draws {
            let mut state = SamplingState::new(&cluster, &occ, &mut pools2);
            let s = Scheme1Policy.select(&mut state, &mut rng2) as usize;
            if s == 1 || s == 2 {
                counts2[s - 1] += 1;
            }
        }
        for i in 0..2 {
            let a = counts[i] as f64 / draws as f64;
            let b = counts2[i] as f64 / draws as f64;
            assert!((a - b).abs() < 0.02, "server {}: {a} vs {b}", i + 1);
        }
    }

    #[test]
    fn registry_round_trips_names() {
        for kind in DispatchKind::ALL {
            assert_eq!(DispatchKind::from_name(kind.name()), Some(kind));
        }
        assert_eq!(DispatchKind::from_name("nope"), None);
        let spec = ClusterSpec::single(1.0, 2, 0.5, 1.0).unwrap();
        assert!(make_policy(DispatchKind::Scheme1, &spec, None).is_ok());
        assert!(matches!(
            make_policy(DispatchKind::HybridSqd, &spec, None),
            Err(PolicyError::MissingRoutingProbs(_))
        ));
        assert!(matches!(
            make_policy(DispatchKind::StateIndependent, &spec, Some(&[0.4, 0.4])),
            Err(PolicyError::BadRoutingProbs { .. })
        ));
    }
}
