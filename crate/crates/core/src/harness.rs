//! Experiment configs, replicate runs, aggregation and file emission.
//!
//! A config is a flat text file of `key = value` lines with dotted keys and
//! `#` comments. Replicate `r` draws its disorder, initial spins and clocks
//! from seeds derived from `(run.seed, r)`, so every artifact is a function
//! of the config alone.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::disorder::{self, exact, CouplingLaw, DisorderSpec, FieldLaw};
use crate::dynamics::{
    self, classify_fractions, flip_statistics, flips_per_site, init_config, span_fraction, window_fractions,
    Classification,
    EndReason, Epsilon, FlipRule, InitialLaw, RunParams, Scheduler, Trajectory, WindowScheme, DEFAULT_EVENT_CAP,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{Hamiltonian, SpinSpace};
use crate::lattice::TorusLattice;
use crate::numeric::CompensatedSum;
use crate::percolyap::{
    self, audit_trajectory, open_clusters, BondWeights, KPolicy, LyapunovSystem, TailReport, TrajectoryAudit,
    DEFAULT_ENUMERATION_CAP,
};
use crate::rng::{derive_seed, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dims: Vec<usize>,
    pub space: SpinSpace,
    pub coupling: CouplingLaw,
    pub field: FieldLaw,
    pub rule: FlipRule,
    pub scheduler: Scheduler,
    pub init: InitialLaw,
    pub t_max: f64,
    pub event_cap: u64,
    pub replicates: usize,
    pub seed: u64,
    pub eps: Vec<Epsilon>,
    pub audit: bool,
    pub k_policy: KPolicy,
    pub enumeration_cap: u128,
    /// Classification horizon; `None` means `t_max`.
    pub horizon: Option<f64>,
    pub windows: usize,
    pub k_list: Vec<f64>,
    pub tail_samples: usize,
    /// Empty means nothing is written.
    pub output_dir: PathBuf,
    pub trace_stride: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dims: vec![16, 16],
            space: SpinSpace::Ising,
            coupling: CouplingLaw::Gaussian { mean: 0.0, sd: 1.0 },
            field: FieldLaw::Zero,
            rule: FlipRule::GlauberZeroT,
            scheduler: Scheduler::ActiveSites,
            init: InitialLaw::Lambda(0.5),
            t_max: 100.0,
            event_cap: DEFAULT_EVENT_CAP,
            replicates: 1,
            seed: 0,
            eps: vec![Epsilon::ZeroPlus],
            audit: false,
            k_policy: KPolicy::default(),
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            horizon: None,
            windows: 4,
            k_list: Vec::new(),
            tail_samples: 100,
            output_dir: PathBuf::from("out"),
            trace_stride: 1000,
        }
    }
}

fn scheduler_name(s: Scheduler) -> &'static str {
    match s {
        Scheduler::ActiveSites => "active",
        Scheduler::AllSites => "all",
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Parse(format!("{key}: bad list item `{}`", s.trim()))))
        .collect()
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse(format!("{key}: cannot parse `{v}`")))
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lattice.dims = {}", join(&self.dims))?;
        writeln!(f, "spins = {}", self.space)?;
        writeln!(f, "disorder.coupling = {}", self.coupling)?;
        writeln!(f, "disorder.field = {}", self.field)?;
        writeln!(f, "dynamics.rule = {}", self.rule)?;
        writeln!(f, "dynamics.scheduler = {}", scheduler_name(self.scheduler))?;
        match &self.init {
            InitialLaw::Lambda(l) => writeln!(f, "init.lambda = {l}")?,
            InitialLaw::Weights(w) => writeln!(f, "init.weights = {}", join(w))?,
        }
        writeln!(f, "run.t_max = {}", self.t_max)?;
        writeln!(f, "run.event_cap = {}", self.event_cap)?;
        writeln!(f, "run.replicates = {}", self.replicates)?;
        writeln!(f, "run.seed = {}", self.seed)?;
        writeln!(f, "stats.eps = {}", join(&self.eps))?;
        writeln!(f, "lyapunov.audit = {}", self.audit)?;
        writeln!(f, "lyapunov.k = {}", self.k_policy)?;
        writeln!(f, "lyapunov.enumeration_cap = {}", self.enumeration_cap)?;
        if let Some(h) = self.horizon {
            writeln!(f, "classify.horizon = {h}")?;
        }
        writeln!(f, "classify.windows = {}", self.windows)?;
        writeln!(f, "percolation.k_list = {}", join(&self.k_list))?;
        writeln!(f, "percolation.samples = {}", self.tail_samples)?;
        writeln!(f, "output.dir = {}", self.output_dir.display())?;
        writeln!(f, "output.trace_stride = {}", self.trace_stride)
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut init_keys = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            match key {
                "lattice.dims" => cfg.dims = parse_list(key, v)?,
                "spins" => cfg.space = v.parse()?,
                "disorder.coupling" => cfg.coupling = v.parse()?,
                "disorder.field" => cfg.field = v.parse()?,
                "dynamics.rule" => cfg.rule = v.parse()?,
                "dynamics.scheduler" => {
                    cfg.scheduler = match v {
                        "active" => Scheduler::ActiveSites,
                        "all" => Scheduler::AllSites,
                        _ => return Err(Error::Parse(format!("{key}: want `active` or `all`, got `{v}`"))),
                    }
                }
                "init.lambda" => {
                    init_keys += 1;
                    cfg.init = InitialLaw::Lambda(parse_num(key, v)?);
                }
                "init.weights" => {
                    init_keys += 1;
                    cfg.init = InitialLaw::Weights(parse_list(key, v)?);
                }
                "run.t_max" => cfg.t_max = parse_num(key, v)?,
                "run.event_cap" => cfg.event_cap = parse_num(key, v)?,
                "run.replicates" => cfg.replicates = parse_num(key, v)?,
                "run.seed" => cfg.seed = parse_num(key, v)?,
                "stats.eps" => cfg.eps = parse_list(key, v)?,
                "lyapunov.audit" => cfg.audit = parse_num(key, v)?,
                "lyapunov.k" => cfg.k_policy = v.parse()?,
                "lyapunov.enumeration_cap" => cfg.enumeration_cap = parse_num(key, v)?,
                "classify.horizon" => cfg.horizon = Some(parse_num(key, v)?),
                "classify.windows" => cfg.windows = parse_num(key, v)?,
                "percolation.k_list" => cfg.k_list = parse_list(key, v)?,
                "percolation.samples" => cfg.tail_samples = parse_num(key, v)?,
                "output.dir" => cfg.output_dir = PathBuf::from(v),
                "output.trace_stride" => cfg.trace_stride = parse_num(key, v)?,
                other => return Err(Error::Parse(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        if init_keys > 1 {
            return Err(Error::Parse("give either init.lambda or init.weights, not both".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    pub fn lattice(&self) -> Result<TorusLattice> {
        TorusLattice::new(&self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        let lattice = self.lattice()?;
        DisorderSpec::new(self.coupling, self.field, 0).validate()?;
        init_config(&TorusLattice::new(&[3])?, self.space, &self.init, 0)?;
        if !(self.t_max > 0.0) {
            return Err(Error::InvalidSpec(format!("run.t_max must be > 0, got {}", self.t_max)));
        }
        if self.windows > 0 && !self.horizon().is_finite() {
            return Err(Error::InvalidSpec("classification needs a finite horizon".into()));
        }
        if let Some(h) = self.horizon {
            if !(h > 0.0) {
                return Err(Error::InvalidSpec(format!("classify.horizon must be > 0, got {h}")));
            }
        }
        if self.k_list.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return Err(Error::InvalidSpec("percolation.k_list entries must be finite and >= 0".into()));
        }
        if self.trace_stride == 0 {
            return Err(Error::InvalidSpec("output.trace_stride must be >= 1".into()));
        }
        if lattice.num_sites() == 0 {
            return Err(Error::InvalidLattice("empty lattice".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon.unwrap_or(self.t_max)
    }

    pub fn window_scheme(&self) -> WindowScheme {
        WindowScheme::new(self.horizon(), self.windows)
    }

    /// Disorder law with the seed of replicate `r`.
    pub fn disorder_spec(&self, r: usize) -> DisorderSpec {
        DisorderSpec::new(self.coupling, self.field, derive_seed(self.seed, Domain::ReplicateDisorder, r as u64))
    }

    pub fn init_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, Domain::ReplicateInit, r as u64)
    }

    pub fn dynamics_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, Domain::ReplicateDynamics, r as u64)
    }
}

/// One replicate row; every aggregate is a function of these rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub disorder_seed: u64,
    pub init_seed: u64,
    pub dynamics_seed: u64,
    pub end_reason: EndReason,
    pub end_time: f64,
    pub events: u64,
    pub sites_flipped: u64,
    pub max_site_flips: u64,
    /// Total `N(eps)` over sites, one per configured threshold.
    pub n_eps: Vec<u64>,
    pub h_initial: f64,
    pub h_final: f64,
    /// `|H(final) - H(initial) - sum dH|`.
    pub energy_residual: f64,
    /// `H(t) - H(0) <= -eps * N^t(eps)` held after every event for every threshold.
    pub energy_counting_ok: bool,
    pub k: Option<f64>,
    pub l_initial: Option<f64>,
    pub l_final: Option<f64>,
    /// Same bound for `L`, for thresholds up to `2dK`.
    pub lyapunov_counting_ok: Option<bool>,
    pub audit_violations: Option<u64>,
    pub linear_events: Option<u64>,
    pub capped_events: Option<u64>,
    /// Fraction of sites flipping anywhere in the classification span.
    pub span_fraction: f64,
    /// Newest window first.
    pub window_fractions: Vec<f64>,
}

/// Everything produced by one replicate, for callers that need more than the row.
#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub hamiltonian: Hamiltonian,
    pub trajectory: Trajectory,
    pub audit: Option<(LyapunovSystem, TrajectoryAudit)>,
    pub row: ReplicateRow,
}

fn counting_ok(
    traj: &Trajectory,
    eps: &[Epsilon],
    increments: impl Iterator<Item = f64>,
    scale: f64,
) -> bool {
    let mut counts = vec![0u64; eps.len()];
    let mut acc = CompensatedSum::new();
    let mut abs_sum = scale.abs();
    for (e, inc) in traj.events.iter().zip(increments) {
        acc.add(inc);
        abs_sum += inc.abs();
        for (c, th) in counts.iter_mut().zip(eps) {
            *c += u64::from(th.counts(e.delta_h));
        }
        let tol = 1e-9 * (1.0 + abs_sum);
        let change = acc.value();
        if eps.iter().zip(&counts).any(|(th, &c)| change > -th.magnitude() * c as f64 + tol) {
            return false;
        }
    }
    true
}

/// Runs replicate `r`: quenched disorder, initial spins, trajectory and,
/// when enabled, the Lyapunov audit.
pub fn run_replicate(cfg: &ExperimentConfig, r: usize) -> Result<ReplicateRun> {
    let wrap = |e: Error| Error::Replicate { replicate: r, source: Box::new(e) };
    let lattice = cfg.lattice()?;
    let spec = cfg.disorder_spec(r);
    let dis = disorder::sample(&lattice, &spec).map_err(wrap)?;
    let ham = Hamiltonian::new(lattice.clone(), dis, cfg.space).map_err(wrap)?;
    let initial = init_config(&lattice, cfg.space, &cfg.init, cfg.init_seed(r)).map_err(wrap)?;
    let params = RunParams::new(cfg.t_max, cfg.dynamics_seed(r))
        .with_event_cap(cfg.event_cap)
        .with_scheduler(cfg.scheduler);
    let mut traj = dynamics::run(&ham, cfg.rule, &initial, params).map_err(wrap)?;

    let audit = if cfg.audit {
        let weights = BondWeights::for_hamiltonian(&ham);
        let k = cfg.k_policy.resolve(&weights);
        let sys = LyapunovSystem::build(&ham, open_clusters(&lattice, &weights, k), cfg.enumeration_cap)
            .map_err(wrap)?;
        let a = audit_trajectory(&ham, &sys, &mut traj).map_err(wrap)?;
        Some((sys, a))
    } else {
        None
    };

    let h_initial = ham.total_energy(&traj.initial);
    let h_final = ham.total_energy(&traj.final_config());
    let mut sum_dh = CompensatedSum::new();
    sum_dh.extend(traj.events.iter().map(|e| e.delta_h));
    let energy_residual = (h_final - h_initial - sum_dh.value()).abs();
    let energy_counting_ok = counting_ok(&traj, &cfg.eps, traj.events.iter().map(|e| e.delta_h), h_initial);

    let per_site = flips_per_site(&traj);
    let stats = flip_statistics(&traj, &cfg.eps);
    let (k, l_initial, l_final, lyapunov_counting_ok, audit_violations, linear_events, capped_events) = match &audit {
        Some((sys, a)) => {
            let kbar = sys.kbar();
            let eligible: Vec<Epsilon> = cfg.eps.iter().copied().filter(|e| e.magnitude() <= kbar).collect();
            let ok = counting_ok(&traj, &eligible, a.records.iter().map(|r| r.audit.delta_l), a.l_initial);
            (
                Some(sys.partition().k()),
                Some(a.l_initial),
                Some(a.l_final()),
                Some(ok),
                Some(a.violations.total()),
                Some(a.linear_events),
                Some(a.capped_events),
            )
        }
        None => (None, None, None, None, None, None, None),
    };
    let row = ReplicateRow {
        replicate: r,
        disorder_seed: spec.seed,
        init_seed: cfg.init_seed(r),
        dynamics_seed: cfg.dynamics_seed(r),
        end_reason: traj.end_reason,
        end_time: traj.end_time,
        events: traj.events.len() as u64,
        sites_flipped: per_site.iter().filter(|&&c| c > 0).count() as u64,
        max_site_flips: per_site.iter().copied().max().unwrap_or(0),
        n_eps: stats.totals.clone(),
        h_initial,
        h_final,
        energy_residual,
        energy_counting_ok,
        k,
        l_initial,
        l_final,
        lyapunov_counting_ok,
        audit_violations,
        linear_events,
        capped_events,
        span_fraction: span_fraction(&traj, &cfg.window_scheme()),
        window_fractions: window_fractions(&traj, &cfg.window_scheme()),
    };
    Ok(ReplicateRun { hamiltonian: ham, trajectory: traj, audit, row })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub replicates: usize,
    pub absorbed_fraction: f64,
    pub mean_events: f64,
    pub max_energy_residual: f64,
    pub energy_counting_ok: bool,
    pub lyapunov_counting_ok: Option<bool>,
    pub audit_violations: Option<u64>,
    pub classification: Classification,
}

impl Aggregate {
    /// Aggregates from replicate rows in replicate order.
    pub fn from_rows(rows: &[ReplicateRow], scheme: &WindowScheme) -> Self {
        let n = rows.len();
        let absorbed = rows.iter().filter(|r| r.end_reason == EndReason::Absorbed).count();
        let classification = if n == 0 {
            Classification { label: dynamics::TypeLabel::Inconclusive, fractions: Vec::new(), span: 0.0 }
        } else {
            let mut mean = vec![0.0; scheme.windows];
            let mut span = 0.0;
            for r in rows {
                for (m, f) in mean.iter_mut().zip(&r.window_fractions) {
                    *m += f / n as f64;
                }
                span += r.span_fraction / n as f64;
            }
            let early = scheme.window(0).0;
            let all_early = rows.iter().all(|r| r.end_reason == EndReason::Absorbed && r.end_time < early);
            Classification { label: classify_fractions(&mean, span, all_early), fractions: mean, span }
        };
        let audited: Vec<&ReplicateRow> = rows.iter().filter(|r| r.audit_violations.is_some()).collect();
        Aggregate {
            replicates: n,
            absorbed_fraction: if n == 0 { 0.0 } else { absorbed as f64 / n as f64 },
            mean_events: if n == 0 { 0.0 } else { rows.iter().map(|r| r.events as f64).sum::<f64>() / n as f64 },
            max_energy_residual: rows.iter().map(|r| r.energy_residual).fold(0.0, f64::max),
            energy_counting_ok: rows.iter().all(|r| r.energy_counting_ok),
            lyapunov_counting_ok: (!audited.is_empty())
                .then(|| audited.iter().all(|r| r.lyapunov_counting_ok == Some(true))),
            audit_violations: (!audited.is_empty())
                .then(|| audited.iter().map(|r| r.audit_violations.unwrap_or(0)).sum()),
            classification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: String,
    pub aggregate: Aggregate,
    pub rows: Vec<ReplicateRow>,
}

fn replicate_dir(root: &Path, r: usize) -> PathBuf {
    root.join(format!("replicate_{r:04}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_replicate_files(cfg: &ExperimentConfig, run: &ReplicateRun) -> Result<()> {
    let dir = replicate_dir(&cfg.output_dir, run.row.replicate);
    fs::create_dir_all(&dir)?;
    let ham = &run.hamiltonian;
    let traj = &run.trajectory;
    traj.write_events_csv(cfg.space, create(&dir.join("events.csv"))?)?;
    let l0 = run.audit.as_ref().map(|(_, a)| a.l_initial);
    dynamics::write_trace_csv(&dynamics::trace(ham, traj, cfg.trace_stride, l0), create(&dir.join("trace.csv"))?)?;

    let per_site = flips_per_site(traj);
    let stats = flip_statistics(traj, &cfg.eps);
    let mut out = create(&dir.join("flips.csv"))?;
    write!(out, "site,total")?;
    for e in &cfg.eps {
        write!(out, ",n_eps[{e}]")?;
    }
    writeln!(out)?;
    for (x, total) in per_site.iter().enumerate() {
        write!(out, "{x},{total}")?;
        for counts in &stats.per_site {
            write!(out, ",{}", counts[x])?;
        }
        writeln!(out)?;
    }
    out.flush()?;

    if let Some((sys, a)) = &run.audit {
        a.write_csv(create(&dir.join("audit.csv"))?)?;
        sys.partition().write_csv(create(&dir.join("clusters.csv"))?, true)?;
    }
    Ok(())
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(exact).unwrap_or_default()
}

const ROW_FIXED: [&str; 21] = [
    "replicate",
    "disorder_seed",
    "init_seed",
    "dynamics_seed",
    "end_reason",
    "end_time",
    "events",
    "sites_flipped",
    "max_site_flips",
    "h_initial",
    "h_final",
    "energy_residual",
    "energy_counting_ok",
    "k",
    "l_initial",
    "l_final",
    "lyapunov_counting_ok",
    "audit_violations",
    "linear_events",
    "capped_events",
    "span_fraction",
];

/// Writes `replicates.csv`; floats are written exactly so that
/// [`read_replicates_csv`] reproduces the rows bit for bit.
pub fn write_replicates_csv<W: Write>(rows: &[ReplicateRow], eps: &[Epsilon], windows: usize, mut out: W) -> Result<()> {
    write!(out, "{}", ROW_FIXED.join(","))?;
    for e in eps {
        write!(out, ",n_eps[{e}]")?;
    }
    for k in 0..windows {
        write!(out, ",window_{k}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.replicate,
            r.disorder_seed,
            r.init_seed,
            r.dynamics_seed,
            r.end_reason,
            exact(r.end_time),
            r.events,
            r.sites_flipped,
            r.max_site_flips,
            exact(r.h_initial),
            exact(r.h_final),
            exact(r.energy_residual),
            r.energy_counting_ok,
            opt_f(r.k),
            opt_f(r.l_initial),
            opt_f(r.l_final),
            opt(&r.lyapunov_counting_ok),
            opt(&r.audit_violations),
            opt(&r.linear_events),
            opt(&r.capped_events),
            exact(r.span_fraction),
        )?;
        for n in &r.n_eps {
            write!(out, ",{n}")?;
        }
        for f in &r.window_fractions {
            write!(out, ",{}", exact(*f))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn field<T: FromStr>(cols: &[&str], i: usize) -> Result<T> {
    let s = cols.get(i).ok_or_else(|| Error::Parse(format!("missing column {i}")))?;
    s.parse().map_err(|_| Error::Parse(format!("column {i}: cannot parse `{s}`")))
}

fn opt_field<T: FromStr>(cols: &[&str], i: usize) -> Result<Option<T>> {
    match cols.get(i) {
        Some(&"") => Ok(None),
        _ => field(cols, i).map(Some),
    }
}

/// Parses `replicates.csv` back into rows.
pub fn read_replicates_csv<R: BufRead>(input: R) -> Result<Vec<ReplicateRow>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty replicates file".into()))??;
    let head: Vec<&str> = header.split(',').collect();
    let n_eps = head.iter().filter(|h| h.starts_with("n_eps[")).count();
    let windows = head.iter().filter(|h| h.starts_with("window_")).count();
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != ROW_FIXED.len() + n_eps + windows {
            return Err(Error::Parse(format!("replicate row has {} columns, want {}", c.len(), ROW_FIXED.len() + n_eps + windows)));
        }
        rows.push(ReplicateRow {
            replicate: field(&c, 0)?,
            disorder_seed: field(&c, 1)?,
            init_seed: field(&c, 2)?,
            dynamics_seed: field(&c, 3)?,
            end_reason: field(&c, 4)?,
            end_time: field(&c, 5)?,
            events: field(&c, 6)?,
            sites_flipped: field(&c, 7)?,
            max_site_flips: field(&c, 8)?,
            h_initial: field(&c, 9)?,
            h_final: field(&c, 10)?,
            energy_residual: field(&c, 11)?,
            energy_counting_ok: field(&c, 12)?,
            k: opt_field(&c, 13)?,
            l_initial: opt_field(&c, 14)?,
            l_final: opt_field(&c, 15)?,
            lyapunov_counting_ok: opt_field(&c, 16)?,
            audit_violations: opt_field(&c, 17)?,
            linear_events: opt_field(&c, 18)?,
            capped_events: opt_field(&c, 19)?,
            span_fraction: field(&c, 20)?,
            n_eps: (21..21 + n_eps).map(|i| field(&c, i)).collect::<Result<_>>()?,
            window_fractions: (21 + n_eps..c.len()).map(|i| field(&c, i)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// First error in replicate order, so failures do not depend on scheduling.
fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Runs every replicate in parallel, writes per-replicate CSVs plus
/// `replicates.csv` and `report.json`, and aggregates. Zero replicates
/// give an empty report and write nothing.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let write = !cfg.output_dir.as_os_str().is_empty() && cfg.replicates > 0;
    let results: Vec<Result<ReplicateRow>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let run = run_replicate(cfg, r)?;
            if write {
                write_replicate_files(cfg, &run)
                    .map_err(|e| Error::Replicate { replicate: r, source: Box::new(e) })?;
            }
            Ok(run.row)
        })
        .collect();
    let rows = first_error(results)?;
    let report = ExperimentReport {
        config: cfg.to_string(),
        aggregate: Aggregate::from_rows(&rows, &cfg.window_scheme()),
        rows,
    };
    if write {
        let root = &cfg.output_dir;
        let mut out = create(&root.join("replicates.csv"))?;
        write_replicates_csv(&report.rows, &cfg.eps, cfg.windows, &mut out)?;
        out.flush()?;
        write_json(&root.join("report.json"), &report)?;
    }
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// Re-reads `replicates.csv` from an output directory and aggregates it.
pub fn aggregate_from_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<Aggregate> {
    let rows = read_replicates_csv(BufReader::new(File::open(dir.join("replicates.csv"))?))?;
    Ok(Aggregate::from_rows(&rows, &cfg.window_scheme()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercolationRow {
    pub replicate: usize,
    pub k: f64,
    pub clusters: usize,
    pub largest_cluster: usize,
    pub spans_side: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpMomentRow {
    pub k: f64,
    pub report: percolyap::ExpMomentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercolationReport {
    pub config: String,
    pub rows: Vec<PercolationRow>,
    pub tail: Option<TailReport>,
    pub exp_moment: Vec<ExpMomentRow>,
}

/// Bond weights and clusters for every replicate's disorder, plus the
/// cluster-tail estimate and exp-moment diagnostic over `percolation.k_list`.
pub fn run_percolation(cfg: &ExperimentConfig) -> Result<PercolationReport> {
    cfg.validate()?;
    let lattice = cfg.lattice()?;
    let write = !cfg.output_dir.as_os_str().is_empty();
    let results: Vec<Result<PercolationRow>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let wrap = |e: Error| Error::Replicate { replicate: r, source: Box::new(e) };
            let dis = disorder::sample(&lattice, &cfg.disorder_spec(r)).map_err(wrap)?;
            let weights = BondWeights::pair_form(&lattice, &dis, cfg.space);
            let k = cfg.k_policy.resolve(&weights);
            let part = open_clusters(&lattice, &weights, k);
            if write {
                let dir = replicate_dir(&cfg.output_dir, r);
                fs::create_dir_all(&dir)?;
                let mut out = create(&dir.join("kstar.csv"))?;
                writeln!(out, "bond,a,b,k_star")?;
                for (b, w) in weights.star().iter().enumerate() {
                    let bond = lattice.bond(b);
                    writeln!(out, "{b},{},{},{}", bond.a, bond.b, exact(*w))?;
                }
                out.flush()?;
                part.write_csv(create(&dir.join("clusters.csv"))?, true)?;
            }
            Ok(PercolationRow {
                replicate: r,
                k,
                clusters: part.len(),
                largest_cluster: (0..part.len()).map(|c| part.members(c).len()).max().unwrap_or(0),
                spans_side: part.any_spanning(),
            })
        })
        .collect();
    let rows = first_error(results)?;
    let spec = DisorderSpec::new(cfg.coupling, cfg.field, cfg.seed);
    let (tail, exp_moment) = if cfg.k_list.is_empty() || cfg.tail_samples == 0 {
        (None, Vec::new())
    } else {
        let tail = percolyap::cluster_tail(&lattice, &spec, cfg.space, &cfg.k_list, cfg.tail_samples)?;
        let mut moments = Vec::new();
        if cfg.tail_samples >= percolyap::MIN_EXP_MOMENT_SAMPLES {
            let alpha = percolyap::exp_moment_alpha(lattice.dim(), cfg.space);
            for &k in &cfg.k_list {
                let parts = percolyap::sample_partitions(&lattice, &spec, cfg.space, k, cfg.tail_samples)?;
                moments.push(ExpMomentRow { k, report: percolyap::exp_moment_diagnostic(&parts, alpha)? });
            }
        }
        (Some(tail), moments)
    };
    let report = PercolationReport { config: cfg.to_string(), rows, tail, exp_moment };
    if write {
        fs::create_dir_all(&cfg.output_dir)?;
        if let Some(tail) = &report.tail {
            let mut out = create(&cfg.output_dir.join("tail.csv"))?;
            writeln!(out, "K,n,survival")?;
            for est in &tail.estimates {
                for (n, p) in est.survival.iter().enumerate() {
                    writeln!(out, "{},{n},{}", exact(est.k), exact(*p))?;
                }
            }
            out.flush()?;
        }
        write_json(&cfg.output_dir.join("percolation.json"), &report)?;
    }
    Ok(report)
}
