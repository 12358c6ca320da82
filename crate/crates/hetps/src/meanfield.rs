//! Large-system ODE limits of the two dispatch schemes and a projected
//! fixed-step RK4 integrator.
//!
//! For scheme 1 the drift of the level-`k` tail of type `j` is
//!
//! ```text
//! l_k^(j)(u) = (lambda/gamma_j) (u_(k-1)^(j)^d_j - u_k^(j)^d_j)
//!              * prod_(i<j) u_(k-1)^(i)^d_i * prod_(i>j) u_k^(i)^d_i
//!              - mu C_j (u_k^(j) - u_(k+1)^(j))
//! ```
//!
//! Scheme 2 replaces the cross-type indices `k-1` by the capacity-ratio maps
//! `k_tilde(k-1)` (types below `j`) and `k_under(k-1)` (types above `j`),
//! reflecting the rate-per-job comparison. Inputs are clamped to `[0, 1]` and
//! the bracketed differences floored at zero inside the evaluation, so the
//! right-hand side coincides with the exact drift on the invariant set and
//! stays well-behaved on integrator overshoots just outside it.

use std::io::{self, Write};

use thiserror::Error;

use crate::cluster::{k_tilde, k_under, ClusterSpec, Scheme, TailState};

/// Time derivative of a [`TailState`]; entry `dudt[j][k]` in 1/sec.
/// Level 0 is identically zero.
#[derive(Debug, Clone)]
pub struct Derivative {
    pub dudt: Vec<Vec<f64>>,
}

impl Derivative {
    /// Weighted sup norm `sup_(j,k) |dudt[j][k]| / (k+1)`, the same weighting
    /// as the state metric.
    pub fn weighted_norm(&self) -> f64 {
        let mut sup = 0.0f64;
        for seq in &self.dudt {
            for (k, x) in seq.iter().enumerate() {
                sup = sup.max(x.abs() / (k + 1) as f64);
            }
        }
        sup
    }
}

#[inline]
fn theta(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[inline]
fn at(u: &[Vec<f64>], j: usize, n: usize) -> f64 {
    u[j].get(n).copied().unwrap_or(0.0)
}

/// RHS on raw sequences; used by the integrator whose RK4 stages may sit
/// slightly outside the invariant set.
fn rhs_raw(u: &[Vec<f64>], spec: &ClusterSpec, scheme: Scheme, out: &mut [Vec<f64>]) {
    let m = spec.num_types();
    let depth = u[0].len() - 1;
    for j in 0..m {
        out[j][0] = 0.0;
        let rate = spec.lambda() / spec.gamma()[j];
        let muc = spec.mu() * spec.capacity()[j];
        let dj = spec.samples()[j] as i32;
        for k in 1..=depth {
            let head = theta(at(u, j, k - 1)).powi(dj) - theta(at(u, j, k)).powi(dj);
            let mut arrival = head.max(0.0) * rate;
            if arrival > 0.0 {
                for i in 0..m {
                    if i == j {
                        continue;
                    }
                    let idx = match scheme {
                        Scheme::One => {
                            if i < j {
                                k - 1
                            } else {
                                k
                            }
                        }
                        Scheme::Two => {
                            if i < j {
                                k_tilde(k - 1, j, i, spec)
                            } else {
                                k_under(k - 1, j, i, spec)
                            }
                        }
                    };
                    arrival *= theta(at(u, i, idx)).powi(spec.samples()[i] as i32);
                }
            }
            let departure = (theta(at(u, j, k)) - theta(at(u, j, k + 1))).max(0.0) * muc;
            out[j][k] = arrival - departure;
        }
    }
}

pub fn rhs(u: &TailState, spec: &ClusterSpec, scheme: Scheme) -> Derivative {
    let mut out = vec![vec![0.0; u.depth() + 1]; u.num_types()];
    rhs_raw(u.sequences(), spec, scheme, &mut out);
    Derivative { dudt: out }
}

pub fn rhs_scheme1(u: &TailState, spec: &ClusterSpec) -> Derivative {
    rhs(u, spec, Scheme::One)
}

pub fn rhs_scheme2(u: &TailState, spec: &ClusterSpec) -> Derivative {
    rhs(u, spec, Scheme::Two)
}

/// `sum_j gamma_j sum_(k>=n) u_k^(j)` over the truncated range; `n = 1` is
/// the mean occupancy per server.
pub fn v_aggregate(u: &TailState, n: usize, spec: &ClusterSpec) -> f64 {
    assert!(n >= 1 && n <= u.depth(), "n must be in 1..=K");
    spec.gamma()
        .iter()
        .enumerate()
        .map(|(j, g)| g * u.sequences()[j][n..].iter().sum::<f64>())
        .sum()
}

/// Sup-norm bound `K_1 = lambda/min gamma_j + mu max C_j` on the drift.
pub fn bound_k1(spec: &ClusterSpec) -> f64 {
    let min_gamma = spec.gamma().iter().cloned().fold(f64::INFINITY, f64::min);
    let max_c = spec.capacity().iter().cloned().fold(0.0, f64::max);
    spec.lambda() / min_gamma + spec.mu() * max_c
}

/// Lipschitz bound `K_2 = 4 M lambda max(d_j)/min(gamma_j) + 3 mu max(C_j)`
/// for the scheme-1 drift under the weighted metric.
pub fn bound_k2(spec: &ClusterSpec) -> f64 {
    let min_gamma = spec.gamma().iter().cloned().fold(f64::INFINITY, f64::min);
    let max_c = spec.capacity().iter().cloned().fold(0.0, f64::max);
    let max_d = *spec.samples().iter().max().unwrap() as f64;
    4.0 * spec.num_types() as f64 * spec.lambda() * max_d / min_gamma + 3.0 * spec.mu() * max_c
}

/// Ratio `||l(a) - l(b)|| / ||a - b||` used by the Lipschitz property tests.
pub fn lipschitz_ratio(a: &TailState, b: &TailState, spec: &ClusterSpec, scheme: Scheme) -> f64 {
    let dist = a.metric_distance(b).expect("states must share dimensions");
    assert!(dist > 0.0, "states must differ");
    let da = rhs(a, spec, scheme);
    let db = rhs(b, spec, scheme);
    let mut sup = 0.0f64;
    for j in 0..a.num_types() {
        for k in 0..=a.depth() {
            sup = sup.max((da.dudt[j][k] - db.dudt[j][k]).abs() / (k + 1) as f64);
        }
    }
    sup / dist
}

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("dt must be positive and t_end nonnegative")]
    BadStep,
    #[error(
        "projection displacement {displacement:.3e} exceeded {bound:.3e} at t={t:.6} (step too large)"
    )]
    ProjectionExceeded {
        t: f64,
        displacement: f64,
        bound: f64,
    },
}

#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    pub t_end: f64,
    /// Step size; defaults to `0.01 / K_1` so one step moves the state by
    /// at most about 1% of the drift bound.
    pub dt: Option<f64>,
    /// Keep every `stride`-th step in the trajectory (the final state is
    /// always kept).
    pub stride: usize,
}

impl IntegrateOptions {
    pub fn to_time(t_end: f64) -> Self {
        Self {
            t_end,
            dt: None,
            stride: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<TailState>,
    /// Largest per-step metric displacement introduced by the projection
    /// back onto the invariant set. The exact flow preserves the set, so this
    /// is bounded by the local truncation error.
    pub max_projection_displacement: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &TailState {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Classic fixed-step RK4 on the chosen scheme's drift. After each step the
/// state is projected back onto the invariant set (clamp to `[0,1]`, running
/// max from the tail, pin `u_0 = 1`); a projection displacement above
/// `10 dt^5` aborts, since the exact flow never leaves the set.
pub fn integrate(
    u0: &TailState,
    spec: &ClusterSpec,
    scheme: Scheme,
    opts: &IntegrateOptions,
) -> Result<Trajectory, IntegrateError> {
    let dt = opts.dt.unwrap_or(0.01 / bound_k1(spec));
    if !(dt > 0.0) || opts.t_end < 0.0 {
        return Err(IntegrateError::BadStep);
    }
    let stride = opts.stride.max(1);
    let m = u0.num_types();
    let depth = u0.depth();
    let displacement_bound = 10.0 * dt.powi(5);

    let mut u: Vec<Vec<f64>> = u0.sequences().to_vec();
    let mut k1 = vec![vec![0.0; depth + 1]; m];
    let mut k2 = k1.clone();
    let mut k3 = k1.clone();
    let mut k4 = k1.clone();
    let mut stage = k1.clone();

    let steps = (opts.t_end / dt).ceil() as usize;
    let mut times = Vec::with_capacity(steps / stride + 2);
    let mut states = Vec::with_capacity(steps / stride + 2);
    times.push(0.0);
    states.push(u0.clone());

    let mut max_disp = 0.0f64;
    let mut t = 0.0;
    for step in 1..=steps {
        let h = if t + dt > opts.t_end {
            opts.t_end - t
        } else {
            dt
        };
        rhs_raw(&u, spec, scheme, &mut k1);
        combine(&u, &k1, 0.5 * h, &mut stage);
        rhs_raw(&stage, spec, scheme, &mut k2);
        combine(&u, &k2, 0.5 * h, &mut stage);
        rhs_raw(&stage, spec, scheme, &mut k3);
        combine(&u, &k3, h, &mut stage);
        rhs_raw(&stage, spec, scheme, &mut k4);

        for j in 0..m {
            for n in 0..=depth {
                u[j][n] += h / 6.0 * (k1[j][n] + 2.0 * k2[j][n] + 2.0 * k3[j][n] + k4[j][n]);
            }
        }

        // project back onto the invariant set and measure the displacement
        let mut disp = 0.0f64;
        for seq in u.iter_mut() {
            let mut running = 0.0f64;
            for n in (0..=depth).rev() {
                let fixed = seq[n].clamp(0.0, 1.0).max(running);
                disp = disp.max((fixed - seq[n]).abs() / (n + 1) as f64);
                seq[n] = fixed;
                running = fixed;
            }
            disp = disp.max((seq[0] - 1.0).abs());
            seq[0] = 1.0;
        }
        max_disp = max_disp.max(disp);
        t += h;
        if disp > displacement_bound {
            return Err(IntegrateError::ProjectionExceeded {
                t,
                displacement: disp,
                bound: displacement_bound,
            });
        }

        if step % stride == 0 || step == steps {
            times.push(t);
            states.push(TailState::from_projected(u.clone()));
        }
    }

    Ok(Trajectory {
        times,
        states,
        max_projection_displacement: max_disp,
    })
}

fn combine(u: &[Vec<f64>], k: &[Vec<f64>], h: f64, out: &mut [Vec<f64>]) {
    for j in 0..u.len() {
        for n in 0..u[j].len() {
            out[j][n] = u[j][n] + h * k[j][n];
        }
    }
}

/// CSV export: columns `t`, then `u[j][n]` with `j` outer.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> io::Result<()> {
    let m = traj.states[0].num_types();
    let depth = traj.states[0].depth();
    write!(w, "t")?;
    for j in 0..m {
        for n in 0..=depth {
            write!(w, ",u[{j}][{n}]")?;
        }
    }
    writeln!(w)?;
    for (t, state) in traj.times.iter().zip(&traj.states) {
        write!(w, "{t}")?;
        for j in 0..m {
            for n in 0..=depth {
                write!(w, ",{}", state.get(j, n))?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::DEFAULT_DEPTH;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1_spec(lambda: f64, d: usize) -> ClusterSpec {
        ClusterSpec::single(1.0, d, lambda, 1.0).unwrap()
    }

    fn sec6(lambda: f64) -> ClusterSpec {
        ClusterSpec::new(vec![0.5, 0.5], vec![0.2, 1.8], vec![2, 2], lambda, 1.0).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, m: usize, depth: usize) -> TailState {
        // random monotone tails with roughly geometric envelope
        let mut u = Vec::with_capacity(m);
        for _ in 0..m {
            let mut seq = vec![1.0];
            let mut level = 1.0f64;
            for _ in 1..=depth {
                level *= rng.gen_range(0.0..1.0);
                seq.push(level);
            }
            u.push(seq);
        }
        TailState::new(u).unwrap()
    }

    #[test]
    fn empty_system_drift_is_pure_arrivals() {
        let spec = m1_spec(0.7, 2);
        let u = TailState::empty(1, 8);
        let d = rhs_scheme1(&u, &spec);
        assert_eq!(d.dudt[0][0], 0.0);
        assert!((d.dudt[0][1] - 0.7).abs() < 1e-15);
        for k in 2..=8 {
            assert_eq!(d.dudt[0][k], 0.0);
        }
    }

    #[test]
    fn single_type_schemes_coincide() {
        let spec = m1_spec(0.9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let u = random_state(&mut rng, 1, 16);
            let a = rhs_scheme1(&u, &spec);
            let b = rhs_scheme2(&u, &spec);
            assert_eq!(a.dudt, b.dudt);
        }
    }

    #[test]
    fn equal_capacities_reduce_scheme2_to_scheme1() {
        let spec = ClusterSpec::new(vec![0.3, 0.7], vec![1.0, 1.0], vec![2, 3], 0.8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let u = random_state(&mut rng, 2, 16);
            let a = rhs_scheme1(&u, &spec);
            let b = rhs_scheme2(&u, &spec);
            for j in 0..2 {
                for k in 0..=16 {
                    assert!(
                        (a.dudt[j][k] - b.dudt[j][k]).abs() < 1e-14,
                        "j={j} k={k}: {} vs {}",
                        a.dudt[j][k],
                        b.dudt[j][k]
                    );
                }
            }
        }
    }

    #[test]
    fn symmetric_types_differ_only_through_tie_bias() {
        // identical per-type tails and parameters: the only asymmetry left is
        // that the cross product reads level k-1 for lower types and level k
        // for upper types, so the lower type's drift can only be smaller.
        let spec = ClusterSpec::new(vec![0.5, 0.5], vec![1.0, 1.0], vec![2, 2], 0.8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shared: Vec<f64> = {
            let s = random_state(&mut rng, 1, 16);
            s.sequences()[0].clone()
        };
        let u = TailState::new(vec![shared.clone(), shared.clone()]).unwrap();
        let d = rhs_scheme1(&u, &spec);
        for k in 1..=16 {
            let arr = |idx: usize| {
                0.8 / 0.5 * (shared[k - 1].powi(2) - shared[k].powi(2)) * shared[idx].powi(2)
            };
            let dep = shared[k] - *shared.get(k + 1).unwrap_or(&0.0);
            assert!((d.dudt[0][k] - (arr(k) - dep)).abs() < 1e-14);
            assert!((d.dudt[1][k] - (arr(k - 1) - dep)).abs() < 1e-14);
            assert!(d.dudt[0][k] <= d.dudt[1][k] + 1e-15);
        }
    }

    #[test]
    fn v_aggregate_examples() {
        let spec = sec6(0.9);
        let u = TailState::empty(2, 8);
        assert_eq!(v_aggregate(&u, 1, &spec), 0.0);

        let mut seq = vec![0.0; 9];
        for n in 0..=3 {
            seq[n] = 1.0;
        }
        let u = TailState::new(vec![seq.clone(), seq]).unwrap();
        assert!((v_aggregate(&u, 1, &spec) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn integrator_reaches_m1_fixed_point_from_empty() {
        // single type, d = 2, lambda = 0.9: equilibrium tails 0.9^(2^k - 1)
        let spec = m1_spec(0.9, 2);
        let u0 = TailState::empty(1, DEFAULT_DEPTH);
        let traj = integrate(&u0, &spec, Scheme::One, &IntegrateOptions::to_time(200.0)).unwrap();
        let closed: Vec<f64> = (0..=DEFAULT_DEPTH)
            .map(|k| 0.9f64.powf((2f64.powi(k as i32) - 1.0).min(1e6)))
            .collect();
        let target = TailState::from_projected(vec![closed]);
        let dist = traj.final_state().metric_distance(&target).unwrap();
        assert!(dist < 1e-6, "distance {dist}");
        // v_1 approaches sum_k lambda^(2^k - 1) monotonically from below
        let v_inf: f64 = target.sequences()[0][1..].iter().sum();
        let mut prev = -1.0;
        for s in &traj.states {
            let v = v_aggregate(s, 1, &spec);
            assert!(v >= prev - 1e-9);
            prev = v;
        }
        assert!((prev - v_inf).abs() < 1e-5);
    }

    #[test]
    fn projection_displacement_stays_within_diagnostic_bound() {
        let spec = sec6(0.9);
        let u0 = TailState::geometric(2, DEFAULT_DEPTH, 0.9);
        let traj = integrate(&u0, &spec, Scheme::Two, &IntegrateOptions::to_time(30.0)).unwrap();
        let dt = 0.01 / bound_k1(&spec);
        assert!(traj.max_projection_displacement <= 10.0 * dt.powi(5));
    }

    #[test]
    fn v1_derivative_identity_along_trajectory() {
        for scheme in [Scheme::One, Scheme::Two] {
            let spec = sec6(0.8);
            let u0 = TailState::geometric(2, DEFAULT_DEPTH, 0.5);
            let dt = 0.005;
            let opts = IntegrateOptions {
                t_end: 2.0,
                dt: Some(dt),
                stride: 1,
            };
            let traj = integrate(&u0, &spec, scheme, &opts).unwrap();
            for w in traj.states.windows(2) {
                let fd = (v_aggregate(&w[1], 1, &spec) - v_aggregate(&w[0], 1, &spec)) / dt;
                let mid: f64 = (0..2)
                    .map(|j| (w[0].get(j, 1) + w[1].get(j, 1)) / 2.0 / spec.delta(j))
                    .sum();
                let expected = spec.lambda() * (1.0 - mid);
                assert!(
                    (fd - expected).abs() < 20.0 * dt * dt,
                    "fd={fd} expected={expected}"
                );
            }
        }
    }

    #[test]
    fn monotone_semiflow_smoke() {
        let spec = sec6(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let hi = random_state(&mut rng, 2, DEFAULT_DEPTH);
            // lower state: scale tails down
            let lo = TailState::from_projected(
                hi.sequences()
                    .iter()
                    .map(|s| s.iter().map(|x| x * 0.7).collect())
                    .collect(),
            );
            let opts = IntegrateOptions {
                t_end: 5.0,
                dt: None,
                stride: 64,
            };
            let ta = integrate(&lo, &spec, Scheme::One, &opts).unwrap();
            let tb = integrate(&hi, &spec, Scheme::One, &opts).unwrap();
            for (a, b) in ta.states.iter().zip(&tb.states) {
                assert!(a.le_componentwise(b, 1e-8));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn boundary_and_sign_structure(seed in 0u64..1000) {
            let spec = sec6(0.9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut u = random_state(&mut rng, 2, 12).sequences().to_vec();
            // plant a plateau and a zero to exercise the tangency cases
            let j = rng.gen_range(0..2);
            let n = rng.gen_range(1..11);
            u[j][n + 1] = u[j][n];
            let mut seq = u[(j + 1) % 2].clone();
            let z = rng.gen_range(2..12);
            for x in seq[z..].iter_mut() {
                *x = 0.0;
            }
            u[(j + 1) % 2] = seq;
            let state = TailState::from_projected(u);

            for scheme in [Scheme::One, Scheme::Two] {
                let d = rhs(&state, &spec, scheme);
                for jj in 0..2 {
                    prop_assert_eq!(d.dudt[jj][0], 0.0);
                    for k in 1..=12usize {
                        if state.get(jj, k) == state.get(jj, k.wrapping_sub(1)) && k >= 1 {
                            // u_(k-1) = u_k: level k drift has no arrival part
                            prop_assert!(d.dudt[jj][k] <= 1e-15);
                        }
                        if k < 12 && state.get(jj, k) == state.get(jj, k + 1) {
                            prop_assert!(d.dudt[jj][k] >= -1e-15);
                        }
                        if state.get(jj, k) == 0.0 {
                            prop_assert!(d.dudt[jj][k] >= -1e-15);
                        }
                    }
                }
            }
        }

        #[test]
        fn drift_bounded_by_k1(seed in 0u64..1000) {
            let spec = sec6(0.9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_state(&mut rng, 2, 24);
            for scheme in [Scheme::One, Scheme::Two] {
                let d = rhs(&u, &spec, scheme);
                prop_assert!(d.weighted_norm() <= bound_k1(&spec) + 1e-12);
            }
        }
    }
}
