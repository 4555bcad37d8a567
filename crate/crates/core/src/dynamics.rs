//! Continuous-time zero-temperature single-spin-flip dynamics.
//!
//! Every site carries a rate-1 Poisson clock. When the clock at `x` rings,
//! the flip rule picks a new value among the moves that do not raise the
//! energy (possibly keeping the current one). A site is *active* when some
//! other value is within [`TAU_ZERO`] of not raising the energy; rings at
//! inactive sites never change anything, and whether a site is active only
//! depends on its closed neighborhood. The default scheduler therefore races
//! only the active clocks (`Exp(|A|)` gap, uniform active site), which has
//! the same law as racing all `N` clocks and discarding the idle rings.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::disorder::exact;
use crate::error::{Error, Result};
use crate::hamiltonian::{Hamiltonian, Spin, SpinConfig, SpinSpace};
use crate::lattice::{Site, TorusLattice};
use crate::numeric::{CompensatedSum, TAU_ZERO};
use crate::rng::{self, Domain};

pub const DEFAULT_EVENT_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipRule {
    /// Propose a uniformly chosen other value; accept with probability
    /// 1, 1/2 or 0 as the energy change is negative, zero or positive.
    GlauberZeroT,
    /// Uniform choice among the values minimizing the energy change,
    /// the current value included.
    UniformMinimizer,
    /// Choice among non-increasing values with weight
    /// `occupation fraction + 1/|S0|`; history dependent.
    OccupationWeighted,
}

impl fmt::Display for FlipRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipRule::GlauberZeroT => "glauber",
            FlipRule::UniformMinimizer => "uniform-minimizer",
            FlipRule::OccupationWeighted => "occupation-weighted",
        })
    }
}

impl FromStr for FlipRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "glauber" | "glauber-zero-t" => Ok(FlipRule::GlauberZeroT),
            "uniform-minimizer" => Ok(FlipRule::UniformMinimizer),
            "occupation-weighted" => Ok(FlipRule::OccupationWeighted),
            other => Err(Error::Parse(format!("unknown flip rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheduler {
    /// Race only the active clocks.
    #[default]
    ActiveSites,
    /// Race all `N` clocks; idle rings are drawn and discarded.
    AllSites,
}

/// Product measure for the initial configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialLaw {
    /// Ising only: `P(S_x = +1) = lambda`.
    Lambda(f64),
    /// One weight per spin index.
    Weights(Vec<f64>),
}

impl InitialLaw {
    fn weights(&self, space: SpinSpace) -> Result<Vec<f64>> {
        let w = match self {
            InitialLaw::Lambda(l) => {
                if space != SpinSpace::Ising {
                    return Err(Error::InvalidSpec("lambda initial law needs Ising spins".into()));
                }
                vec![1.0 - l, *l]
            }
            InitialLaw::Weights(w) => w.clone(),
        };
        if w.len() != space.cardinality() {
            return Err(Error::InvalidSpec(format!(
                "{} weights given for {} spin values",
                w.len(),
                space.cardinality()
            )));
        }
        if w.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("initial weights {w:?} are not a probability vector")));
        }
        Ok(w)
    }
}

fn pick_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

/// I.i.d. initial spins, one counter-based stream per site.
pub fn init_config(lattice: &TorusLattice, space: SpinSpace, law: &InitialLaw, seed: u64) -> Result<SpinConfig> {
    let w = law.weights(space)?;
    let spins = (0..lattice.num_sites())
        .map(|x| pick_weighted(&mut rng::stream(seed, Domain::InitialSpin, x as u64), &w) as Spin)
        .collect();
    SpinConfig::new(space, spins)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipEvent {
    pub time: f64,
    pub site: Site,
    pub old: Spin,
    pub new: Spin,
    pub delta_h: f64,
    /// Lyapunov change, filled in by an audit.
    pub delta_l: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndReason {
    Absorbed,
    TMax,
    EventCap,
}

impl fmt::Display for EndReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndReason::Absorbed => "absorbed",
            EndReason::TMax => "t_max",
            EndReason::EventCap => "event_cap",
        })
    }
}

impl FromStr for EndReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absorbed" => Ok(EndReason::Absorbed),
            "t_max" => Ok(EndReason::TMax),
            "event_cap" => Ok(EndReason::EventCap),
            other => Err(Error::Parse(format!("unknown end reason `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial: SpinConfig,
    pub events: Vec<FlipEvent>,
    /// Time of absorption (last event), `t_max`, or time of the capping event.
    pub end_time: f64,
    pub end_reason: EndReason,
}

impl Trajectory {
    pub fn final_config(&self) -> SpinConfig {
        let mut c = self.initial.clone();
        for e in &self.events {
            c.set(e.site, e.new);
        }
        c
    }

    /// Number of events with `time <= t`.
    pub fn events_until(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.time <= t)
    }

    pub fn write_events_csv<W: Write>(&self, space: SpinSpace, mut out: W) -> Result<()> {
        writeln!(out, "t,site,old,new,delta_h,delta_l")?;
        for e in &self.events {
            let dl = e.delta_l.map(exact).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                exact(e.time),
                e.site,
                space.value(e.old),
                space.value(e.new),
                exact(e.delta_h),
                dl
            )?;
        }
        Ok(())
    }
}

/// Residence time of each site in each spin value, kept lazily: the
/// current value's open interval is added on demand.
#[derive(Debug, Clone)]
pub struct OccupationClock {
    q: usize,
    closed: Vec<f64>,
    since: Vec<f64>,
    changed: Vec<bool>,
}

impl OccupationClock {
    pub fn new(n: usize, q: usize) -> Self {
        OccupationClock {
            q,
            closed: vec![0.0; n * q],
            since: vec![0.0; n],
            changed: vec![false; n],
        }
    }

    pub fn record_change(&mut self, x: Site, old: Spin, t: f64) {
        self.closed[x * self.q + old as usize] += t - self.since[x];
        self.since[x] = t;
        self.changed[x] = true;
    }

    /// Time spent by `x` in value `v` during `[0, t]`, given current value `current`.
    pub fn residence(&self, x: Site, v: Spin, current: Spin, t: f64) -> f64 {
        let mut r = self.closed[x * self.q + v as usize];
        if v == current {
            r += t - self.since[x];
        }
        r
    }

    /// Whether `x` has changed value since time zero.
    pub fn has_changed(&self, x: Site) -> bool {
        self.changed[x]
    }
}

struct ActiveSet {
    pos: Vec<usize>,
    items: Vec<Site>,
}

impl ActiveSet {
    const ABSENT: usize = usize::MAX;

    fn new(n: usize) -> Self {
        ActiveSet { pos: vec![Self::ABSENT; n], items: Vec::new() }
    }

    fn set(&mut self, x: Site, active: bool) {
        let present = self.pos[x] != Self::ABSENT;
        if active && !present {
            self.pos[x] = self.items.len();
            self.items.push(x);
        } else if !active && present {
            let i = self.pos[x];
            let last = *self.items.last().unwrap();
            self.items.swap_remove(i);
            if last != x {
                self.pos[last] = i;
            }
            self.pos[x] = Self::ABSENT;
        }
    }

    fn contains(&self, x: Site) -> bool {
        self.pos[x] != Self::ABSENT
    }

    fn len(&self) -> usize {
        self.items.len()
    }
}

/// Whether some other value at `x` does not raise the energy.
pub fn site_is_active(ham: &Hamiltonian, x: Site, config: &SpinConfig, scratch: &mut [f64]) -> bool {
    let current = config.get(x);
    if ham.space() == SpinSpace::Ising {
        return ham.delta_h(x, config, 1 - current) <= TAU_ZERO;
    }
    ham.delta_h_all(x, config, scratch);
    scratch
        .iter()
        .enumerate()
        .any(|(eta, &d)| eta != current as usize && d <= TAU_ZERO)
}

/// True iff no site can change under `rule`. All three rules share the same
/// set of reachable moves (any other value with `dH <= TAU_ZERO`), so the
/// rule does not change the answer.
pub fn is_absorbing(ham: &Hamiltonian, _rule: FlipRule, config: &SpinConfig) -> bool {
    let mut scratch = vec![0.0; ham.space().cardinality()];
    (0..ham.lattice().num_sites()).all(|x| !site_is_active(ham, x, config, &mut scratch))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunParams {
    pub t_max: f64,
    pub event_cap: u64,
    pub seed: u64,
    pub scheduler: Scheduler,
}

impl RunParams {
    pub fn new(t_max: f64, seed: u64) -> Self {
        RunParams { t_max, event_cap: DEFAULT_EVENT_CAP, seed, scheduler: Scheduler::ActiveSites }
    }

    pub fn with_event_cap(mut self, cap: u64) -> Self {
        self.event_cap = cap;
        self
    }

    pub fn with_scheduler(mut self, scheduler: Scheduler) -> Self {
        self.scheduler = scheduler;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0) {
            return Err(Error::InvalidSpec(format!("t_max must be positive, got {}", self.t_max)));
        }
        if self.event_cap == 0 {
            return Err(Error::InvalidSpec("event_cap must be at least 1".into()));
        }
        Ok(())
    }
}

struct Selector<'a> {
    ham: &'a Hamiltonian,
    rule: FlipRule,
    deltas: Vec<f64>,
    weights: Vec<f64>,
    clock: Option<OccupationClock>,
}

impl Selector<'_> {
    /// New value at `x` after a ring at time `t`, with its energy change.
    fn select(&mut self, rng: &mut ChaCha8Rng, x: Site, config: &SpinConfig, t: f64) -> (Spin, f64) {
        let ham = self.ham;
        let current = config.get(x);
        let q = ham.space().cardinality();
        match self.rule {
            FlipRule::GlauberZeroT => {
                let proposal = if q == 2 {
                    1 - current
                } else {
                    let k = rng.random_range(0..q - 1) as Spin;
                    if k >= current {
                        k + 1
                    } else {
                        k
                    }
                };
                let d = ham.delta_h(x, config, proposal);
                let accept = if d < -TAU_ZERO {
                    true
                } else if d <= TAU_ZERO {
                    rng.random::<bool>()
                } else {
                    false
                };
                if accept {
                    (proposal, d)
                } else {
                    (current, 0.0)
                }
            }
            FlipRule::UniformMinimizer => {
                ham.delta_h_all(x, config, &mut self.deltas);
                let min = self.deltas.iter().cloned().fold(f64::INFINITY, f64::min);
                for (w, &d) in self.weights.iter_mut().zip(&self.deltas) {
                    *w = if d <= min + TAU_ZERO { 1.0 } else { 0.0 };
                }
                let eta = pick_weighted(rng, &self.weights);
                (eta as Spin, self.deltas[eta])
            }
            FlipRule::OccupationWeighted => {
                ham.delta_h_all(x, config, &mut self.deltas);
                let clock = self.clock.as_ref().expect("occupation clock");
                let smoothing = 1.0 / q as f64;
                for eta in 0..q {
                    self.weights[eta] = if self.deltas[eta] <= TAU_ZERO {
                        let frac = if clock.has_changed(x) && t > 0.0 {
                            clock.residence(x, eta as Spin, current, t) / t
                        } else {
                            0.0
                        };
                        frac + smoothing
                    } else {
                        0.0
                    };
                }
                let eta = pick_weighted(rng, &self.weights);
                (eta as Spin, self.deltas[eta])
            }
        }
    }
}

/// Simulates until absorption, `t_max`, or `event_cap` recorded flips.
pub fn run(ham: &Hamiltonian, rule: FlipRule, initial: &SpinConfig, params: RunParams) -> Result<Trajectory> {
    params.validate()?;
    let lattice = ham.lattice();
    let n = lattice.num_sites();
    if initial.len() != n || initial.space() != ham.space() {
        return Err(Error::InvalidSpec("initial configuration does not match the Hamiltonian".into()));
    }
    let q = ham.space().cardinality();
    let mut rng = rng::stream(params.seed, Domain::Dynamics, 0);
    let mut config = initial.clone();
    let mut scratch = vec![0.0; q];
    let mut active = ActiveSet::new(n);
    for x in 0..n {
        let a = site_is_active(ham, x, &config, &mut scratch);
        active.set(x, a);
    }
    let mut selector = Selector {
        ham,
        rule,
        deltas: vec![0.0; q],
        weights: vec![0.0; q],
        clock: (rule == FlipRule::OccupationWeighted).then(|| OccupationClock::new(n, q)),
    };

    let mut events = Vec::new();
    let mut t = 0.0;
    let (end_time, end_reason) = loop {
        if active.len() == 0 {
            break (t, EndReason::Absorbed);
        }
        let (rate, x) = match params.scheduler {
            Scheduler::ActiveSites => (active.len(), None),
            Scheduler::AllSites => (n, Some(rng.random_range(0..n))),
        };
        let gap: f64 = Exp1.sample(&mut rng);
        let ring = t + gap / rate as f64;
        if ring > params.t_max {
            break (params.t_max, EndReason::TMax);
        }
        let x = match x {
            Some(x) if !active.contains(x) => {
                t = ring;
                continue;
            }
            Some(x) => x,
            None => active.items[rng.random_range(0..active.len())],
        };
        let (new, delta_h) = selector.select(&mut rng, x, &config, ring);
        if new == config.get(x) {
            t = ring;
            continue;
        }
        let old = config.get(x);
        t = ring;
        config.set(x, new);
        if let Some(clock) = selector.clock.as_mut() {
            clock.record_change(x, old, t);
        }
        events.push(FlipEvent { time: t, site: x, old, new, delta_h, delta_l: None });
        let a = site_is_active(ham, x, &config, &mut scratch);
        active.set(x, a);
        for &z in lattice.neighbors(x) {
            let a = site_is_active(ham, z, &config, &mut scratch);
            active.set(z, a);
        }
        if events.len() as u64 >= params.event_cap {
            break (t, EndReason::EventCap);
        }
    };
    let end_reason = if end_reason == EndReason::EventCap && active.len() == 0 {
        EndReason::Absorbed
    } else {
        end_reason
    };
    Ok(Trajectory { initial: initial.clone(), events, end_time, end_reason })
}

/// Flip-count threshold: `Value(e)` counts `dH <= -e`; `ZeroPlus` counts
/// strictly lowering flips, `dH < -TAU_ZERO`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Epsilon {
    ZeroPlus,
    Value(f64),
}

impl Epsilon {
    #[inline]
    pub fn counts(&self, delta_h: f64) -> bool {
        match *self {
            Epsilon::ZeroPlus => delta_h < -TAU_ZERO,
            Epsilon::Value(e) => delta_h <= -e,
        }
    }

    /// Numeric size of the threshold; `0+` contributes nothing to `-e * N`.
    pub fn magnitude(&self) -> f64 {
        match *self {
            Epsilon::ZeroPlus => 0.0,
            Epsilon::Value(e) => e,
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::ZeroPlus => f.write_str("0+"),
            Epsilon::Value(e) => write!(f, "{e}"),
        }
    }
}

impl FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "0+" {
            return Ok(Epsilon::ZeroPlus);
        }
        match s.parse::<f64>() {
            Ok(e) if e >= 0.0 && e.is_finite() => Ok(Epsilon::Value(e)),
            _ => Err(Error::Parse(format!("bad epsilon `{s}` (want a number >= 0 or `0+`)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipStats {
    pub thresholds: Vec<Epsilon>,
    /// `per_site[k][x]` is the number of flips at `x` counted by threshold `k`.
    pub per_site: Vec<Vec<u64>>,
    pub totals: Vec<u64>,
}

/// Flip counts per site for events with `time <= t`.
pub fn flip_statistics_until(traj: &Trajectory, thresholds: &[Epsilon], t: f64) -> FlipStats {
    let n = traj.initial.len();
    let upto = traj.events_until(t);
    let mut per_site = vec![vec![0u64; n]; thresholds.len()];
    for e in &traj.events[..upto] {
        for (k, eps) in thresholds.iter().enumerate() {
            if eps.counts(e.delta_h) {
                per_site[k][e.site] += 1;
            }
        }
    }
    let totals = per_site.iter().map(|c| c.iter().sum()).collect();
    FlipStats { thresholds: thresholds.to_vec(), per_site, totals }
}

pub fn flip_statistics(traj: &Trajectory, thresholds: &[Epsilon]) -> FlipStats {
    flip_statistics_until(traj, thresholds, f64::INFINITY)
}

/// Per-site count of every flip, zero-energy ones included.
pub fn flips_per_site(traj: &Trajectory) -> Vec<u64> {
    let mut counts = vec![0; traj.initial.len()];
    for e in &traj.events {
        counts[e.site] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TypeLabel {
    FLike,
    ILike,
    MLike,
    Inconclusive,
}

impl fmt::Display for TypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TypeLabel::FLike => "F-like",
            TypeLabel::ILike => "I-like",
            TypeLabel::MLike => "M-like",
            TypeLabel::Inconclusive => "inconclusive",
        })
    }
}

/// Doubling windows `[T_k / 2, T_k]` with `T_k = horizon / 2^k`, newest first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowScheme {
    pub horizon: f64,
    pub windows: usize,
}

impl WindowScheme {
    pub fn new(horizon: f64, windows: usize) -> Self {
        WindowScheme { horizon, windows }
    }

    /// `(start, end)` of window `k`, newest (`k = 0`) first.
    pub fn window(&self, k: usize) -> (f64, f64) {
        let end = self.horizon / f64::powi(2.0, k as i32);
        (end / 2.0, end)
    }
}

/// Fraction of sites flipping at least once in `(start, end]`.
pub fn window_fraction(traj: &Trajectory, start: f64, end: f64) -> f64 {
    let n = traj.initial.len();
    let mut hit = vec![false; n];
    let lo = traj.events.partition_point(|e| e.time <= start);
    let hi = traj.events.partition_point(|e| e.time <= end);
    for e in &traj.events[lo..hi] {
        hit[e.site] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / n as f64
}

/// Window fractions for one trajectory, newest window first.
pub fn window_fractions(traj: &Trajectory, scheme: &WindowScheme) -> Vec<f64> {
    (0..scheme.windows)
        .map(|k| {
            let (a, b) = scheme.window(k);
            window_fraction(traj, a, b)
        })
        .collect()
}

/// Fraction of sites flipping anywhere in the span covered by all windows.
pub fn span_fraction(traj: &Trajectory, scheme: &WindowScheme) -> f64 {
    if scheme.windows == 0 {
        return 0.0;
    }
    window_fraction(traj, scheme.window(scheme.windows - 1).0, scheme.horizon)
}

/// Below this the newest window counts as "no flips".
pub const CLASSIFY_ZERO: f64 = 0.01;
/// The newest window must keep at least this share of the previous one to count as stable.
pub const CLASSIFY_STABLE: f64 = 0.6;
/// At or above this span fraction almost every site keeps flipping.
pub const CLASSIFY_SPAN: f64 = 0.5;

/// Heuristic type label from mean window fractions (newest first), the
/// mean span fraction, and whether every run was absorbed before the
/// newest window opened.
pub fn classify_fractions(mean_fractions: &[f64], mean_span: f64, all_absorbed_early: bool) -> TypeLabel {
    if all_absorbed_early {
        return TypeLabel::FLike;
    }
    let Some(&last) = mean_fractions.first() else {
        return TypeLabel::Inconclusive;
    };
    let prev = mean_fractions.get(1).copied().unwrap_or(last);
    if last <= CLASSIFY_ZERO {
        return TypeLabel::FLike;
    }
    if last < CLASSIFY_STABLE * prev {
        return TypeLabel::Inconclusive;
    }
    if mean_span >= CLASSIFY_SPAN {
        TypeLabel::ILike
    } else {
        TypeLabel::MLike
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: TypeLabel,
    /// Mean over trajectories, newest window first.
    pub fractions: Vec<f64>,
    pub span: f64,
}

pub fn classify_type(trajectories: &[Trajectory], scheme: &WindowScheme) -> Classification {
    if trajectories.is_empty() {
        return Classification { label: TypeLabel::Inconclusive, fractions: Vec::new(), span: 0.0 };
    }
    let n = trajectories.len() as f64;
    let mut mean = vec![0.0; scheme.windows];
    let mut span = 0.0;
    for traj in trajectories {
        for (m, f) in mean.iter_mut().zip(window_fractions(traj, scheme)) {
            *m += f / n;
        }
        span += span_fraction(traj, scheme) / n;
    }
    let early = scheme.window(0).0;
    let all_absorbed_early = trajectories
        .iter()
        .all(|t| t.end_reason == EndReason::Absorbed && t.end_time < early);
    Classification { label: classify_fractions(&mean, span, all_absorbed_early), fractions: mean, span }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub energy_density: f64,
    pub lyapunov_density: Option<f64>,
    pub active_fraction: f64,
}

/// Replays `traj`, sampling a row at time 0, after every `stride` events
/// and after the last event. `initial_lyapunov` enables the Lyapunov column
/// from the audited `delta_l` values.
pub fn trace(
    ham: &Hamiltonian,
    traj: &Trajectory,
    stride: usize,
    initial_lyapunov: Option<f64>,
) -> Vec<TraceRow> {
    let n = ham.lattice().num_sites();
    let stride = stride.max(1);
    let mut config = traj.initial.clone();
    let mut scratch = vec![0.0; ham.space().cardinality()];
    let mut active: Vec<bool> = (0..n)
        .map(|x| site_is_active(ham, x, &config, &mut scratch))
        .collect();
    let mut active_count = active.iter().filter(|&&a| a).count();
    let mut energy = CompensatedSum::new();
    energy.add(ham.total_energy(&config));
    let mut lyap = initial_lyapunov.map(|l0| {
        let mut acc = CompensatedSum::new();
        acc.add(l0);
        acc
    });
    let row = |t: f64, e: &CompensatedSum, l: &Option<CompensatedSum>, a: usize| TraceRow {
        t,
        energy_density: e.value() / n as f64,
        lyapunov_density: l.as_ref().map(|l| l.value() / n as f64),
        active_fraction: a as f64 / n as f64,
    };
    let mut rows = vec![row(0.0, &energy, &lyap, active_count)];
    for (i, e) in traj.events.iter().enumerate() {
        config.set(e.site, e.new);
        energy.add(e.delta_h);
        if let Some(l) = lyap.as_mut() {
            l.add(e.delta_l.unwrap_or(0.0));
        }
        for z in std::iter::once(e.site).chain(ham.lattice().neighbors(e.site).iter().copied()) {
            let a = site_is_active(ham, z, &config, &mut scratch);
            if a != active[z] {
                active[z] = a;
                if a {
                    active_count += 1;
                } else {
                    active_count -= 1;
                }
            }
        }
        if (i + 1) % stride == 0 || i + 1 == traj.events.len() {
            rows.push(row(e.time, &energy, &lyap, active_count));
        }
    }
    rows
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "t,energy_density,lyapunov_density,active_fraction")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            exact(r.t),
            exact(r.energy_density),
            r.lyapunov_density.map(exact).unwrap_or_default(),
            exact(r.active_fraction)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::DisorderRealization;

    fn ferro(dims: &[usize], h: f64) -> Hamiltonian {
        let lat = TorusLattice::new(dims).unwrap();
        let dis = DisorderRealization::homogeneous(&lat, 1.0, h).unwrap();
        Hamiltonian::new(lat, dis, SpinSpace::Ising).unwrap()
    }

    #[test]
    fn init_extremes() {
        let lat = TorusLattice::new(&[10, 10]).unwrap();
        let up = init_config(&lat, SpinSpace::Ising, &InitialLaw::Lambda(1.0), 3).unwrap();
        assert!(up.values().iter().all(|&v| v == 1));
        let down = init_config(&lat, SpinSpace::Ising, &InitialLaw::Lambda(0.0), 3).unwrap();
        assert!(down.values().iter().all(|&v| v == -1));
    }

    #[test]
    fn init_half_is_binomial() {
        let lat = TorusLattice::new(&[100, 100]).unwrap();
        let c = init_config(&lat, SpinSpace::Ising, &InitialLaw::Lambda(0.5), 8).unwrap();
        let frac = c.values().iter().filter(|&&v| v == 1).count() as f64 / 1e4;
        assert!((frac - 0.5).abs() <= 3.0 * (0.25f64 / 1e4).sqrt());
    }

    #[test]
    fn init_rejects_bad_weights() {
        let lat = TorusLattice::new(&[4]).unwrap();
        let bad = InitialLaw::Weights(vec![0.5, 0.6]);
        assert!(init_config(&lat, SpinSpace::Ising, &bad, 0).is_err());
        assert!(init_config(&lat, SpinSpace::Potts(3), &InitialLaw::Lambda(0.5), 0).is_err());
        let ok = InitialLaw::Weights(vec![0.2, 0.3, 0.5]);
        assert!(init_config(&lat, SpinSpace::Potts(3), &ok, 0).is_ok());
    }

    #[test]
    fn ground_state_is_absorbed_immediately() {
        let hm = ferro(&[8, 8], 0.0);
        let up = SpinConfig::uniform(SpinSpace::Ising, 64, 1).unwrap();
        let traj = run(&hm, FlipRule::GlauberZeroT, &up, RunParams::new(100.0, 1)).unwrap();
        assert_eq!(traj.end_reason, EndReason::Absorbed);
        assert_eq!(traj.end_time, 0.0);
        assert!(traj.events.is_empty());
    }

    #[test]
    fn domain_walls_are_not_absorbing() {
        let hm = ferro(&[4], 0.0);
        let c = SpinConfig::from_values(SpinSpace::Ising, &[1, 1, -1, -1]).unwrap();
        assert!(!is_absorbing(&hm, FlipRule::GlauberZeroT, &c));
        let up = SpinConfig::uniform(SpinSpace::Ising, 4, 1).unwrap();
        assert!(is_absorbing(&hm, FlipRule::GlauberZeroT, &up));
    }

    #[test]
    fn no_zero_flips_means_absorbed_states_stay_put() {
        let hm = ferro(&[50], 0.5);
        let lat = hm.lattice().clone();
        for seed in 0..10 {
            let c = init_config(&lat, SpinSpace::Ising, &InitialLaw::Lambda(0.5), seed).unwrap();
            let traj = run(&hm, FlipRule::GlauberZeroT, &c, RunParams::new(1e6, seed)).unwrap();
            assert_eq!(traj.end_reason, EndReason::Absorbed);
            let fin = traj.final_config();
            assert!(is_absorbing(&hm, FlipRule::GlauberZeroT, &fin));
            let again = run(&hm, FlipRule::GlauberZeroT, &fin, RunParams::new(1e3, seed + 1)).unwrap();
            assert!(again.events.is_empty());
        }
    }

    #[test]
    fn event_cap_stops_the_run() {
        let hm = ferro(&[200], 0.0);
        let c = init_config(hm.lattice(), SpinSpace::Ising, &InitialLaw::Lambda(0.5), 2).unwrap();
        let traj = run(&hm, FlipRule::GlauberZeroT, &c, RunParams::new(1e9, 2).with_event_cap(10)).unwrap();
        assert_eq!(traj.events.len(), 10);
        assert_eq!(traj.end_reason, EndReason::EventCap);
        assert!(run(&hm, FlipRule::GlauberZeroT, &c, RunParams::new(0.0, 2)).is_err());
        assert!(run(&hm, FlipRule::GlauberZeroT, &c, RunParams::new(1.0, 2).with_event_cap(0)).is_err());
    }

    #[test]
    fn flip_counting() {
        let space = SpinSpace::Ising;
        let initial = SpinConfig::uniform(space, 3, 1).unwrap();
        let ev = |time, delta_h| FlipEvent { time, site: 0, old: 1, new: 0, delta_h, delta_l: None };
        let traj = Trajectory {
            initial,
            events: vec![ev(1.0, -3.0), ev(2.0, 0.0), ev(3.0, -0.5)],
            end_time: 3.0,
            end_reason: EndReason::TMax,
        };
        let th = [Epsilon::Value(1.0), Epsilon::Value(0.1), Epsilon::ZeroPlus];
        let s = flip_statistics(&traj, &th);
        assert_eq!(s.per_site[0][0], 1);
        assert_eq!(s.per_site[1][0], 2);
        assert_eq!(s.per_site[2][0], 2);
        assert_eq!(s.totals, vec![1, 2, 2]);

        let empty = Trajectory { events: vec![], ..traj };
        assert!(flip_statistics(&empty, &th).totals.iter().all(|&c| c == 0));
    }

    #[test]
    fn epsilon_parsing() {
        assert_eq!("0+".parse::<Epsilon>().unwrap(), Epsilon::ZeroPlus);
        assert_eq!("0.5".parse::<Epsilon>().unwrap(), Epsilon::Value(0.5));
        assert!("-1".parse::<Epsilon>().is_err());
        assert_eq!(Epsilon::ZeroPlus.to_string(), "0+");
    }

    #[test]
    fn absorbed_runs_classify_as_f_like() {
        let lat = TorusLattice::new(&[30]).unwrap();
        let spec = crate::disorder::DisorderSpec::new(
            crate::disorder::CouplingLaw::Gaussian { mean: 0.0, sd: 1.0 },
            crate::disorder::FieldLaw::Zero,
            4,
        );
        let dis = crate::disorder::sample(&lat, &spec).unwrap();
        let hm = Hamiltonian::new(lat.clone(), dis, SpinSpace::Ising).unwrap();
        let trajs: Vec<_> = (0..4)
            .map(|s| {
                let c = init_config(&lat, SpinSpace::Ising, &InitialLaw::Lambda(0.5), s).unwrap();
                run(&hm, FlipRule::GlauberZeroT, &c, RunParams::new(1e4, s)).unwrap()
            })
            .collect();
        let c = classify_type(&trajs, &WindowScheme::new(1e4, 4));
        assert_eq!(c.label, TypeLabel::FLike);
        assert!(c.fractions.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn classification_rule() {
        assert_eq!(classify_fractions(&[0.0, 0.1], 0.3, false), TypeLabel::FLike);
        assert_eq!(classify_fractions(&[0.3, 0.32], 0.7, false), TypeLabel::ILike);
        assert_eq!(classify_fractions(&[0.25, 0.26], 0.35, false), TypeLabel::MLike);
        assert_eq!(classify_fractions(&[0.1, 0.5], 0.9, false), TypeLabel::Inconclusive);
        assert_eq!(classify_fractions(&[0.5, 0.5], 0.9, true), TypeLabel::FLike);
        assert_eq!(classify_fractions(&[], 0.0, false), TypeLabel::Inconclusive);
    }

    #[test]
    fn occupation_clock_sums_to_elapsed_time() {
        let mut clock = OccupationClock::new(2, 3);
        let mut current = [0u8, 2u8];
        let changes = [(0.5, 0, 1u8), (1.25, 1, 0), (2.0, 0, 2), (3.5, 0, 0)];
        for &(t, x, new) in &changes {
            clock.record_change(x, current[x], t);
            current[x] = new;
        }
        for t in [3.5, 4.0, 10.0] {
            for x in 0..2 {
                let total: f64 = (0..3).map(|v| clock.residence(x, v, current[x], t)).sum();
                assert!((total - t).abs() <= 1e-9 * t);
            }
        }
        assert_eq!(clock.residence(0, 1, current[0], 4.0), 1.5);
    }

    #[test]
    fn trace_tracks_energy_and_activity() {
        let hm = ferro(&[40], 0.0);
        let c = init_config(hm.lattice(), SpinSpace::Ising, &InitialLaw::Lambda(0.5), 6).unwrap();
        let traj = run(&hm, FlipRule::GlauberZeroT, &c, RunParams::new(50.0, 6)).unwrap();
        let rows = trace(&hm, &traj, 7, None);
        assert_eq!(rows[0].t, 0.0);
        let last = rows.last().unwrap();
        let e_final = hm.total_energy(&traj.final_config()) / 40.0;
        assert!((last.energy_density - e_final).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.lyapunov_density.is_none()));
        assert!(rows.windows(2).all(|w| w[0].energy_density >= w[1].energy_density - 1e-12));
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,energy_density,lyapunov_density,active_fraction\n"));
    }
}
