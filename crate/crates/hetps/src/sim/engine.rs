//! The two discrete-event engines.
//!
//! * Markov-rate engine — exponential job sizes only. A busy processor-sharing
//!   server of capacity `C` completes jobs at total rate `mu C` regardless of
//!   its occupancy, so the cluster is simulated as a CTMC with per-type
//!   departure races and no per-job bookkeeping beyond arrival stamps.
//! * Residual-work engine — any size distribution. Each server tracks a
//!   virtual service time `v` advancing at rate `C/q`; a job arriving at
//!   virtual time `v0` with size `s` departs when `v` reaches `v0 + s`, so the
//!   next departure of a server is always its smallest virtual target.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{ClusterSpec, TailState, DEFAULT_DEPTH};

use super::policy::DispatchPolicy;
use super::rng::StreamFactory;
use super::{JobDist, RepResult, SimConfig, SimError};

/// Immutable description of the simulated fleet: servers are numbered
/// contiguously by type, type `j` occupying `type_start[j]..type_start[j+1]`.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub(crate) spec: ClusterSpec,
    n: usize,
    type_start: Vec<usize>,
    type_of: Vec<u8>,
}

impl Cluster {
    pub fn new(spec: &ClusterSpec, n: usize) -> Result<Self, SimError> {
        if n == 0 {
            return Err(SimError::BadServerCount(n));
        }
        let m = spec.num_types();
        let mut type_start = Vec::with_capacity(m + 1);
        type_start.push(0usize);
        for j in 0..m {
            let exact = spec.gamma()[j] * n as f64;
            let count = exact.round();
            if (exact - count).abs() > 1e-9 || count < 1.0 {
                return Err(SimError::FractionalCohort { j, exact });
            }
            if spec.samples()[j] > count as usize {
                return Err(SimError::SampleExceedsCohort {
                    j,
                    d: spec.samples()[j],
                    cohort: count as usize,
                });
            }
            type_start.push(type_start[j] + count as usize);
        }
        if type_start[m] != n {
            return Err(SimError::BadServerCount(n));
        }
        let mut type_of = vec![0u8; n];
        for j in 0..m {
            for s in type_start[j]..type_start[j + 1] {
                type_of[s] = j as u8;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            n,
            type_start,
            type_of,
        })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn num_servers(&self) -> usize {
        self.n
    }

    pub fn type_of(&self, server: u32) -> usize {
        self.type_of[server as usize] as usize
    }

    pub fn cohort(&self, j: usize) -> std::ops::Range<u32> {
        self.type_start[j] as u32..self.type_start[j + 1] as u32
    }

    pub fn cohort_size(&self, j: usize) -> usize {
        self.type_start[j + 1] - self.type_start[j]
    }

    fn capacity_of(&self, server: u32) -> f64 {
        self.spec.capacity()[self.type_of(server)]
    }
}

/// What a dispatch policy may touch: live occupancies plus per-type sampling
/// pools. Sampling runs a partial Fisher-Yates walk over the pool, so the
/// `d_j` draws of one arrival are distinct and uniform.
pub struct SamplingState<'a> {
    cluster: &'a Cluster,
    occupancy: &'a [u32],
    pools: &'a mut [Vec<u32>],
}

impl<'a> SamplingState<'a> {
    pub fn new(cluster: &'a Cluster, occupancy: &'a [u32], pools: &'a mut [Vec<u32>]) -> Self {
        Self {
            cluster,
            occupancy,
            pools,
        }
    }

    pub fn cluster(&self) -> &Cluster {
        self.cluster
    }

    pub fn occupancy(&self, server: u32) -> u32 {
        self.occupancy[server as usize]
    }

    /// The `r`-th (0-based) distinct uniform sample of type `j` for the
    /// current arrival. Callers must use `r = 0, 1, ..` in order.
    pub fn sample_server(&mut self, j: usize, r: usize, rng: &mut ChaCha8Rng) -> u32 {
        let pool = &mut self.pools[j];
        let pick = rng.gen_range(r..pool.len());
        pool.swap(r, pick);
        pool[r]
    }
}

/// Uniform per-type sample lists, the raw sampling step shared by the
/// scheme policies.
pub fn sample_servers(state: &mut SamplingState<'_>, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let m = state.cluster().spec.num_types();
    (0..m)
        .map(|j| {
            let d = state.cluster().spec.samples()[j];
            (0..d).map(|r| state.sample_server(j, r, rng)).collect()
        })
        .collect()
}

/// Passive hooks driven by both engines. `interval` sees the pre-event state
/// for the span `[t0, t1)` over which it was constant; `event` sees each
/// completed transition.
pub trait EventObserver {
    fn interval(&mut self, _t0: f64, _t1: f64, _occupancy: &[u32], _total: u64) {}
    fn event(&mut self, _t: f64, _arrival: bool, _total: u64) {}
}

pub struct NoopObserver;

impl EventObserver for NoopObserver {}

/// Post-warmup accumulators shared by both engines.
struct StatsAccum {
    warmup: f64,
    sojourn_sum: f64,
    jobs_counted: u64,
    occ_time: Vec<f64>,
}

impl StatsAccum {
    fn new(m: usize, warmup: f64) -> Self {
        Self {
            warmup,
            sojourn_sum: 0.0,
            jobs_counted: 0,
            occ_time: vec![0.0; m],
        }
    }

    fn interval(&mut self, t0: f64, t1: f64, occ_by_type: &[u64]) {
        if t1 > self.warmup {
            let dt = t1 - t0.max(self.warmup);
            for (acc, &occ) in self.occ_time.iter_mut().zip(occ_by_type) {
                *acc += occ as f64 * dt;
            }
        }
    }

    fn departure(&mut self, t: f64, arrived: f64) {
        if arrived >= self.warmup {
            self.sojourn_sum += t - arrived;
            self.jobs_counted += 1;
        }
    }

    fn finish(self, cluster: &Cluster, horizon: f64, occupancy: &[u32]) -> RepResult {
        let m = cluster.spec.num_types();
        let span = (horizon - self.warmup).max(f64::MIN_POSITIVE);
        let per_type = (0..m)
            .map(|j| self.occ_time[j] / span / cluster.cohort_size(j) as f64)
            .collect();
        RepResult {
            mean_sojourn: self.sojourn_sum / self.jobs_counted.max(1) as f64,
            jobs_counted: self.jobs_counted,
            per_type_mean_occupancy: per_type,
            final_tails: empirical_tails(cluster, occupancy),
        }
    }
}

/// Empirical per-type tail fractions of an occupancy vector, truncated at the
/// standard depth.
pub fn empirical_tails(cluster: &Cluster, occupancy: &[u32]) -> TailState {
    let m = cluster.spec.num_types();
    let mut tails = vec![vec![0.0f64; DEFAULT_DEPTH + 1]; m];
    for (s, &q) in occupancy.iter().enumerate() {
        let j = cluster.type_of[s] as usize;
        let top = (q as usize).min(DEFAULT_DEPTH);
        for n in 1..=top {
            tails[j][n] += 1.0;
        }
    }
    for (j, seq) in tails.iter_mut().enumerate() {
        let count = cluster.cohort_size(j) as f64;
        for x in seq.iter_mut() {
            *x /= count;
        }
        seq[0] = 1.0;
    }
    TailState::new(tails).expect("empirical tails are monotone by construction")
}

fn exp_gap(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln().max(f64::MIN_POSITIVE.ln()) / rate
}

struct ArrivalStream {
    rng: ChaCha8Rng,
    rate: f64,
    next_t: f64,
    next_size_uniform: f64,
    index: u64,
}

impl ArrivalStream {
    fn new(mut rng: ChaCha8Rng, rate: f64) -> Self {
        let t = exp_gap(&mut rng, rate);
        let u = rng.gen();
        Self {
            rng,
            rate,
            next_t: t,
            next_size_uniform: u,
            index: 0,
        }
    }

    /// Consumes the pending arrival, returning `(t, size_uniform, index)`.
    fn pop(&mut self) -> (f64, f64, u64) {
        let out = (self.next_t, self.next_size_uniform, self.index);
        self.next_t += exp_gap(&mut self.rng, self.rate);
        self.next_size_uniform = self.rng.gen();
        self.index += 1;
        out
    }
}

/// CTMC engine for exponential sizes.
pub fn run_markov(
    cluster: &Cluster,
    policy: &dyn DispatchPolicy,
    cfg: &SimConfig,
    rep: u64,
    obs: &mut impl EventObserver,
) -> RepResult {
    let m = cluster.spec.num_types();
    let n = cluster.num_servers();
    let factory = StreamFactory::new(cfg.seed);
    let mut arrivals = ArrivalStream::new(factory.arrival(rep), n as f64 * cluster.spec.lambda());
    let mut dep_rng = factory.departure(rep);

    let mut occupancy = vec![0u32; n];
    let mut pools: Vec<Vec<u32>> = (0..m).map(|j| cluster.cohort(j).collect()).collect();
    let mut busy: Vec<Vec<u32>> = vec![Vec::new(); m];
    let mut busy_pos = vec![u32::MAX; n];
    let mut jobs: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut occ_by_type = vec![0u64; m];
    let mut total: u64 = 0;
    let mut stats = StatsAccum::new(m, cfg.warmup);

    let mut t = 0.0f64;
    loop {
        let dep_rate: f64 = cluster.spec.mu()
            * (0..m)
                .map(|j| cluster.spec.capacity()[j] * busy[j].len() as f64)
                .sum::<f64>();
        let t_dep = if dep_rate > 0.0 {
            t + exp_gap(&mut dep_rng, dep_rate)
        } else {
            f64::INFINITY
        };

        if arrivals.next_t <= t_dep {
            let (ta, _size_u, idx) = if arrivals.next_t > cfg.horizon {
                obs.interval(t, cfg.horizon, &occupancy, total);
                stats.interval(t, cfg.horizon, &occ_by_type);
                break;
            } else {
                arrivals.pop()
            };
            obs.interval(t, ta, &occupancy, total);
            stats.interval(t, ta, &occ_by_type);
            t = ta;

            let server = {
                let mut ss = SamplingState {
                    cluster,
                    occupancy: &occupancy,
                    pools: &mut pools,
                };
                let mut dec = factory.decision(rep, idx);
                policy.select(&mut ss, &mut dec)
            };
            let j = cluster.type_of(server);
            if occupancy[server as usize] == 0 {
                busy_pos[server as usize] = busy[j].len() as u32;
                busy[j].push(server);
            }
            occupancy[server as usize] += 1;
            occ_by_type[j] += 1;
            total += 1;
            jobs[server as usize].push(t);
            obs.event(t, true, total);
        } else {
            if t_dep > cfg.horizon {
                obs.interval(t, cfg.horizon, &occupancy, total);
                stats.interval(t, cfg.horizon, &occ_by_type);
                break;
            }
            obs.interval(t, t_dep, &occupancy, total);
            stats.interval(t, t_dep, &occ_by_type);
            t = t_dep;

            // departing type with probability proportional to C_j * busy_j
            let mut pick = dep_rng.gen::<f64>() * dep_rate / cluster.spec.mu();
            let mut j = m - 1;
            for jj in 0..m {
                let w = cluster.spec.capacity()[jj] * busy[jj].len() as f64;
                if pick < w {
                    j = jj;
                    break;
                }
                pick -= w;
            }
            let bi = dep_rng.gen_range(0..busy[j].len());
            let server = busy[j][bi];
            let sq = &mut jobs[server as usize];
            let ji = dep_rng.gen_range(0..sq.len());
            let arrived = sq.swap_remove(ji);
            stats.departure(t, arrived);

            occupancy[server as usize] -= 1;
            occ_by_type[j] -= 1;
            total -= 1;
            if occupancy[server as usize] == 0 {
                let last = *busy[j].last().unwrap();
                let pos = busy_pos[server as usize] as usize;
                busy[j].swap_remove(pos);
                if pos < busy[j].len() {
                    busy_pos[last as usize] = pos as u32;
                }
                busy_pos[server as usize] = u32::MAX;
            }
            obs.event(t, false, total);
        }
    }
    stats.finish(cluster, cfg.horizon, &occupancy)
}

#[derive(Debug, Clone, Copy)]
struct ResidentJob {
    v_target: f64,
    arrived: f64,
}

#[derive(Debug, Clone)]
struct PsServer {
    v_now: f64,
    t_last: f64,
    jobs: Vec<ResidentJob>,
}

impl PsServer {
    fn advance(&mut self, t: f64, capacity: f64) {
        if !self.jobs.is_empty() {
            self.v_now += capacity * (t - self.t_last) / self.jobs.len() as f64;
        }
        self.t_last = t;
    }

    fn next_departure(&self, capacity: f64) -> f64 {
        if self.jobs.is_empty() {
            return f64::INFINITY;
        }
        let vmin = self
            .jobs
            .iter()
            .map(|j| j.v_target)
            .fold(f64::INFINITY, f64::min);
        self.t_last + (vmin - self.v_now).max(0.0) * self.jobs.len() as f64 / capacity
    }
}

#[derive(PartialEq)]
struct HeapItem {
    time: f64,
    server: u32,
    generation: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // reversed: BinaryHeap is a max-heap, we want earliest time on top
        other
            .time
            .partial_cmp(&self.time)
            .expect("event times are never NaN")
            .then_with(|| other.server.cmp(&self.server))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Residual-work engine for arbitrary size distributions.
pub fn run_residual(
    cluster: &Cluster,
    policy: &dyn DispatchPolicy,
    cfg: &SimConfig,
    rep: u64,
    obs: &mut impl EventObserver,
) -> RepResult {
    let m = cluster.spec.num_types();
    let n = cluster.num_servers();
    let factory = StreamFactory::new(cfg.seed);
    let mut arrivals = ArrivalStream::new(factory.arrival(rep), n as f64 * cluster.spec.lambda());

    let mut occupancy = vec![0u32; n];
    let mut pools: Vec<Vec<u32>> = (0..m).map(|j| cluster.cohort(j).collect()).collect();
    let mut servers: Vec<PsServer> = vec![
        PsServer {
            v_now: 0.0,
            t_last: 0.0,
            jobs: Vec::new(),
        };
        n
    ];
    let mut generation = vec![0u32; n];
    let mut heap = std::collections::BinaryHeap::<HeapItem>::new();
    let mut occ_by_type = vec![0u64; m];
    let mut total: u64 = 0;
    let mut stats = StatsAccum::new(m, cfg.warmup);

    let mut t = 0.0f64;
    loop {
        // next valid departure
        let t_dep = loop {
            match heap.peek() {
                None => break f64::INFINITY,
                Some(item) if generation[item.server as usize] != item.generation => {
                    heap.pop();
                }
                Some(item) => break item.time,
            }
        };

        if arrivals.next_t <= t_dep {
            if arrivals.next_t > cfg.horizon {
                obs.interval(t, cfg.horizon, &occupancy, total);
                stats.interval(t, cfg.horizon, &occ_by_type);
                break;
            }
            let (ta, size_u, idx) = arrivals.pop();
            obs.interval(t, ta, &occupancy, total);
            stats.interval(t, ta, &occ_by_type);
            t = ta;

            let server = {
                let mut ss = SamplingState {
                    cluster,
                    occupancy: &occupancy,
                    pools: &mut pools,
                };
                let mut dec = factory.decision(rep, idx);
                policy.select(&mut ss, &mut dec)
            };
            let size = cfg.job_dist.size_from_uniform(size_u, cluster.spec.mu());
            let j = cluster.type_of(server);
            let srv = &mut servers[server as usize];
            srv.advance(t, cluster.capacity_of(server));
            srv.jobs.push(ResidentJob {
                v_target: srv.v_now + size,
                arrived: t,
            });
            occupancy[server as usize] += 1;
            occ_by_type[j] += 1;
            total += 1;
            generation[server as usize] += 1;
            heap.push(HeapItem {
                time: srv.next_departure(cluster.capacity_of(server)),
                server,
                generation: generation[server as usize],
            });
            obs.event(t, true, total);
        } else {
            if t_dep > cfg.horizon {
                obs.interval(t, cfg.horizon, &occupancy, total);
                stats.interval(t, cfg.horizon, &occ_by_type);
                break;
            }
            let item = heap.pop().expect("a departure was scheduled");
            let server = item.server;
            obs.interval(t, item.time, &occupancy, total);
            stats.interval(t, item.time, &occ_by_type);
            t = item.time;

            let capacity = cluster.capacity_of(server);
            let j = cluster.type_of(server);
            let srv = &mut servers[server as usize];
            srv.advance(t, capacity);
            let (mi, _) = srv
                .jobs
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.v_target.partial_cmp(&b.1.v_target).unwrap())
                .expect("departing server holds a job");
            let job = srv.jobs.swap_remove(mi);
            // absorb the O(eps) virtual-time round-off at the departure epoch
            srv.v_now = srv.v_now.max(job.v_target);
            stats.departure(t, job.arrived);

            occupancy[server as usize] -= 1;
            occ_by_type[j] -= 1;
            total -= 1;
            generation[server as usize] += 1;
            if !srv.jobs.is_empty() {
                heap.push(HeapItem {
                    time: srv.next_departure(capacity),
                    server,
                    generation: generation[server as usize],
                });
            }
            obs.event(t, false, total);
        }
    }
    stats.finish(cluster, cfg.horizon, &occupancy)
}

impl JobDist {
    /// Maps one uniform draw to a job size with mean `1/mu`. All
    /// distributions consume exactly one uniform per arrival so that runs
    /// differing only in the distribution share every other stream.
    pub fn size_from_uniform(&self, u: f64, mu: f64) -> f64 {
        match self {
            JobDist::Exponential => (-(1.0 - u).ln() / mu).max(1e-300),
            JobDist::Constant => 1.0 / mu,
            JobDist::PowerLaw => 1.0 / (2.0 * mu * (1.0 - u).sqrt()),
        }
    }
}
