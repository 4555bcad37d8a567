//! Dependent bond percolation on influence weights and the percolation
//! Lyapunov function built on its clusters.
//!
//! `K_{x,y}` is the largest change of `V_y` that `S_x` alone can cause, and
//! `K*` symmetrizes it per bond. For a threshold `K`, bonds with `K* > K`
//! are open and their connected components are the clusters `C`. For every
//! cluster the table [`LyapunovTable`] re-parameterizes the cluster energy
//! `V_C = sum_{z in C} V_z` by a nondecreasing map whose increments between
//! consecutive attainable values are capped at `4dK`. The Lyapunov function
//! is the sum of these maps over all clusters.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disorder::{self, exact, DisorderRealization, DisorderSpec};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::hamiltonian::{for_each_assignment, Hamiltonian, Spin, SpinConfig, SpinSpace};
use crate::lattice::{Site, TorusLattice};
use crate::numeric::{slack, CompensatedSum, TAU_ZERO};
use crate::rng::{self, Domain};
use crate::unionfind::UnionFind;

/// Default limit on local configurations enumerated per brute-force `K_{x,y}`.
pub const DEFAULT_K_BUDGET: u128 = 1 << 20;
/// Default limit on configurations enumerated per cluster table.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 20;

fn configurations(space: SpinSpace, sites: usize) -> u128 {
    (space.cardinality() as u128).checked_pow(sites as u32).unwrap_or(u128::MAX)
}

/// Brute-force `K_{x,y}`: the largest `|V_y(S_x = a) - V_y(S_x = b)|` over
/// every assignment of `y` and its other neighbors.
pub fn k_bond(ham: &Hamiltonian, x: Site, y: Site, budget: u128) -> Result<f64> {
    let lattice = ham.lattice();
    lattice.check_site(x)?;
    lattice.check_site(y)?;
    if !lattice.neighbors(y).contains(&x) {
        return Err(Error::InvalidSpec(format!("sites {x} and {y} are not neighbors")));
    }
    let space = ham.space();
    let needed = configurations(space, 2 * lattice.dim() + 1);
    if needed > budget {
        return Err(Error::CostGuard { needed, budget });
    }
    let context: Vec<Site> = std::iter::once(y)
        .chain(lattice.neighbors(y).iter().copied().filter(|&z| z != x))
        .collect();
    let mut best: f64 = 0.0;
    for_each_assignment(space, context.len(), |assign| {
        let spin_of = |z: Site, eta: Spin| {
            if z == x {
                eta
            } else {
                assign[context.iter().position(|&c| c == z).unwrap()]
            }
        };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for eta in space.spins() {
            let v = ham.local_energy_with(y, |z| spin_of(z, eta));
            lo = lo.min(v);
            hi = hi.max(v);
        }
        best = best.max(hi - lo);
    });
    Ok(best)
}

/// Directed influences `K_{x,y}` and per-bond `K*`.
#[derive(Debug, Clone, PartialEq)]
pub struct BondWeights {
    /// `directed[x * 2d + slot]` is `K_{x, y}` for `y = neighbors(x)[slot]`.
    directed: Vec<f64>,
    star: Vec<f64>,
}

impl BondWeights {
    fn from_directed(lattice: &TorusLattice, directed: Vec<f64>) -> Self {
        let deg = lattice.degree();
        let mut star = vec![0.0f64; lattice.num_bonds()];
        for x in 0..lattice.num_sites() {
            for (slot, &b) in lattice.neighbor_bonds(x).iter().enumerate() {
                star[b] = star[b].max(directed[x * deg + slot]);
            }
        }
        BondWeights { directed, star }
    }

    /// Every `K_{x,y}` by brute force.
    pub fn brute_force(ham: &Hamiltonian, budget: u128) -> Result<Self> {
        let lattice = ham.lattice();
        let directed = (0..lattice.num_sites())
            .into_par_iter()
            .map(|x| {
                lattice
                    .neighbors(x)
                    .iter()
                    .map(|&y| k_bond(ham, x, y, budget))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .concat();
        Ok(Self::from_directed(lattice, directed))
    }

    /// Closed form for the pair potentials: `|J|` for Ising, `|J| / 2` for Potts.
    pub fn pair_form(lattice: &TorusLattice, disorder: &DisorderRealization, space: SpinSpace) -> Self {
        let scale = match space {
            SpinSpace::Ising => 1.0,
            SpinSpace::Potts(_) => 0.5,
        };
        let directed = (0..lattice.num_sites())
            .flat_map(|x| {
                lattice
                    .neighbor_bonds(x)
                    .iter()
                    .map(move |&b| scale * disorder.coupling(b).abs())
            })
            .collect();
        Self::from_directed(lattice, directed)
    }

    pub fn for_hamiltonian(ham: &Hamiltonian) -> Self {
        Self::pair_form(ham.lattice(), ham.disorder(), ham.space())
    }

    /// Symmetric weights given directly per bond id.
    pub fn from_star(lattice: &TorusLattice, star: Vec<f64>) -> Result<Self> {
        if star.len() != lattice.num_bonds() || star.iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::InvalidSpec("need one non-negative weight per bond".into()));
        }
        let directed = (0..lattice.num_sites())
            .flat_map(|x| lattice.neighbor_bonds(x).iter().map(|&b| star[b]).collect::<Vec<_>>())
            .collect();
        Ok(BondWeights { directed, star })
    }

    pub fn star(&self) -> &[f64] {
        &self.star
    }

    pub fn directed(&self, lattice: &TorusLattice, x: Site, slot: usize) -> f64 {
        self.directed[x * lattice.degree() + slot]
    }

    /// Empirical `q`-quantile of `K*`: the smallest weight with at least a
    /// fraction `q` of all bonds at or below it.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut sorted = self.star.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        sorted[idx]
    }
}

/// How the percolation threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KPolicy {
    Value(f64),
    Quantile(f64),
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::Quantile(0.95)
    }
}

impl KPolicy {
    pub fn resolve(&self, weights: &BondWeights) -> f64 {
        match *self {
            KPolicy::Value(k) => k,
            KPolicy::Quantile(q) => weights.quantile(q),
        }
    }
}

impl fmt::Display for KPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KPolicy::Value(k) => write!(f, "value({k})"),
            KPolicy::Quantile(q) => write!(f, "quantile({q})"),
        }
    }
}

impl FromStr for KPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let inner = |prefix: &str| {
            s.strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(')'))
                .map(|v| v.trim().parse::<f64>())
        };
        let policy = if let Some(v) = inner("quantile(") {
            KPolicy::Quantile(v.map_err(|_| Error::Parse(format!("bad K policy `{s}`")))?)
        } else if let Some(v) = inner("value(") {
            KPolicy::Value(v.map_err(|_| Error::Parse(format!("bad K policy `{s}`")))?)
        } else {
            KPolicy::Value(s.parse().map_err(|_| Error::Parse(format!("bad K policy `{s}`")))?)
        };
        match policy {
            KPolicy::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::InvalidSpec(format!("quantile must lie in [0, 1], got {q}")))
            }
            KPolicy::Value(k) if !(k >= 0.0 && k.is_finite()) => {
                Err(Error::InvalidSpec(format!("K must be finite and >= 0, got {k}")))
            }
            p => Ok(p),
        }
    }
}

/// Open clusters for one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    k: f64,
    cluster_of: Vec<usize>,
    members: Vec<Vec<Site>>,
    closures: Vec<Vec<Site>>,
    spans: Vec<bool>,
}

/// Clusters of the graph whose open bonds have `K* > k`. Cluster ids follow
/// the smallest member site.
pub fn open_clusters(lattice: &TorusLattice, weights: &BondWeights, k: f64) -> ClusterPartition {
    let n = lattice.num_sites();
    let mut uf = UnionFind::new(n);
    for (b, &w) in weights.star.iter().enumerate() {
        if w > k {
            let bond = lattice.bond(b);
            uf.union(bond.a, bond.b);
        }
    }
    let mut id_of_root = vec![usize::MAX; n];
    let mut cluster_of = vec![0; n];
    let mut members: Vec<Vec<Site>> = Vec::new();
    for x in 0..n {
        let r = uf.find(x);
        if id_of_root[r] == usize::MAX {
            id_of_root[r] = members.len();
            members.push(Vec::new());
        }
        cluster_of[x] = id_of_root[r];
        members[id_of_root[r]].push(x);
    }
    let closures = members
        .iter()
        .map(|c| {
            let mut cl: Vec<Site> = c
                .iter()
                .flat_map(|&x| std::iter::once(x).chain(lattice.neighbors(x).iter().copied()))
                .collect();
            cl.sort_unstable();
            cl.dedup();
            cl
        })
        .collect();
    let spans = members.iter().map(|c| spans_a_side(lattice, c)).collect();
    ClusterPartition { k, cluster_of, members, closures, spans }
}

fn spans_a_side(lattice: &TorusLattice, cluster: &[Site]) -> bool {
    let dims = lattice.dims();
    if cluster.len() < *dims.iter().min().unwrap() {
        return false;
    }
    (0..dims.len()).any(|axis| {
        let mut seen = vec![false; dims[axis]];
        for &x in cluster {
            seen[lattice.coords(x)[axis]] = true;
        }
        seen.iter().all(|&s| s)
    })
}

impl ClusterPartition {
    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn cluster_of(&self, x: Site) -> usize {
        self.cluster_of[x]
    }

    pub fn members(&self, c: usize) -> &[Site] {
        &self.members[c]
    }

    pub fn closure(&self, c: usize) -> &[Site] {
        &self.closures[c]
    }

    pub fn size_of_cluster_at(&self, x: Site) -> usize {
        self.members[self.cluster_of[x]].len()
    }

    /// Whether cluster `c` covers every coordinate along some axis.
    pub fn spans_side(&self, c: usize) -> bool {
        self.spans[c]
    }

    pub fn any_spanning(&self) -> bool {
        self.spans.iter().any(|&s| s)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "K,cluster_id,size,closure_size")?;
        }
        for c in 0..self.len() {
            writeln!(out, "{},{c},{},{}", exact(self.k), self.members[c].len(), self.closures[c].len())?;
        }
        Ok(())
    }
}

/// Capped monotone re-parameterization of one cluster's energy.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovTable {
    /// Distinct attainable `V_C` levels, ascending; values within
    /// [`TAU_ZERO`] of a level's first value share that level.
    levels: Vec<f64>,
    values: Vec<f64>,
    cap: f64,
    configurations: u128,
}

impl LyapunovTable {
    /// Builds the table from every attainable energy (with repetitions):
    /// the lowest level maps to 0 and each next level adds
    /// `min(gap, cap)`.
    pub fn from_energies(mut energies: Vec<f64>, cap: f64) -> Self {
        assert!(!energies.is_empty(), "a table needs at least one configuration");
        let configurations = energies.len() as u128;
        energies.sort_by(f64::total_cmp);
        let mut levels = vec![energies[0]];
        let mut values = vec![0.0];
        let mut acc = CompensatedSum::new();
        for &v in &energies[1..] {
            let start = *levels.last().unwrap();
            if v - start <= TAU_ZERO {
                continue;
            }
            let prev_level_max = v_max_of_level(&energies, start);
            let gap = v - prev_level_max;
            acc.add(gap.min(cap));
            levels.push(v);
            values.push(acc.value());
        }
        LyapunovTable { levels, values, cap, configurations }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Number of configurations enumerated, `M`.
    pub fn configurations(&self) -> u128 {
        self.configurations
    }

    /// Upper bound `cap * (M - 1)` on every table value.
    pub fn bound(&self) -> f64 {
        self.cap * (self.configurations.saturating_sub(1)) as f64
    }

    /// Table value for an attainable cluster energy `v`.
    pub fn lookup(&self, v: f64) -> Option<f64> {
        let tol = slack(v);
        let idx = self.levels.partition_point(|&l| l <= v + tol);
        if idx == 0 {
            return None;
        }
        let level = self.levels[idx - 1];
        (v - level <= TAU_ZERO + tol).then(|| self.values[idx - 1])
    }
}

/// Largest energy merged into the level starting at `start`.
fn v_max_of_level(sorted: &[f64], start: f64) -> f64 {
    let hi = sorted.partition_point(|&v| v - start <= TAU_ZERO);
    sorted[hi - 1]
}

/// `V_C(S)`, summed over members in ascending site order.
pub fn cluster_energy_with(ham: &Hamiltonian, members: &[Site], spin: impl Fn(Site) -> Spin + Copy) -> f64 {
    members.iter().map(|&z| ham.local_energy_with(z, spin)).sum()
}

pub fn cluster_energy(ham: &Hamiltonian, members: &[Site], config: &SpinConfig) -> f64 {
    cluster_energy_with(ham, members, |z| config.get(z))
}

/// Enumerates `S0^{closure}` and builds the cluster's table.
pub fn build_lyapunov(
    ham: &Hamiltonian,
    partition: &ClusterPartition,
    cluster: usize,
    enumeration_cap: u128,
) -> Result<LyapunovTable> {
    let members = partition.members(cluster);
    let closure = partition.closure(cluster);
    let needed = configurations(ham.space(), closure.len());
    if needed > enumeration_cap {
        return Err(Error::EnumerationCap {
            cluster,
            size: members.len(),
            closure_size: closure.len(),
            needed,
            cap: enumeration_cap,
        });
    }
    let mut energies = Vec::with_capacity(needed as usize);
    for_each_assignment(ham.space(), closure.len(), |assign| {
        let spin = |z: Site| assign[closure.binary_search(&z).unwrap()];
        energies.push(cluster_energy_with(ham, members, spin));
    });
    let cap = 4.0 * ham.lattice().dim() as f64 * partition.k();
    Ok(LyapunovTable::from_energies(energies, cap))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Home-cluster energy change within `4dK`: the Lyapunov change equals the energy change.
    Linear,
    Capped,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Linear => "linear",
            Regime::Capped => "capped",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Verdicts {
    /// Other clusters change by exactly the energy outside the home
    /// cluster, and by at most `2dK`.
    pub star_bound: bool,
    /// Linear regime implies `dL = dH`.
    pub linear_exact: bool,
    /// `dL <= dH` for `-2dK <= dH <= 0`, `dL <= -2dK` below.
    pub contract: bool,
    /// Zero-energy flips leave `L` unchanged.
    pub zero_to_zero: bool,
}

impl Verdicts {
    pub fn all(&self) -> bool {
        self.star_bound && self.linear_exact && self.contract && self.zero_to_zero
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlipAudit {
    pub delta_h: f64,
    pub delta_l: f64,
    pub delta_l_home: f64,
    pub delta_l_star: f64,
    pub delta_v_home: f64,
    pub regime: Regime,
    pub verdicts: Verdicts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub cluster_sum: f64,
    pub total_energy: f64,
    pub ok: bool,
}

/// Clusters, their tables, and per-site lists of neighboring clusters.
#[derive(Debug, Clone)]
pub struct LyapunovSystem {
    partition: ClusterPartition,
    tables: Vec<Option<LyapunovTable>>,
    /// Clusters `C` with `x` in the closure of `C` but not in `C`.
    foreign: Vec<Vec<usize>>,
    cap: f64,
    kbar: f64,
}

impl LyapunovSystem {
    /// Builds every cluster table; fails on the first cluster over the cap.
    pub fn build(ham: &Hamiltonian, partition: ClusterPartition, enumeration_cap: u128) -> Result<Self> {
        // Report the largest offending cluster so the message is deterministic.
        let worst = (0..partition.len())
            .filter(|&c| configurations(ham.space(), partition.closure(c).len()) > enumeration_cap)
            .max_by_key(|&c| (partition.closure(c).len(), std::cmp::Reverse(c)));
        if let Some(c) = worst {
            return build_lyapunov(ham, &partition, c, enumeration_cap).map(|_| unreachable!());
        }
        let tables = (0..partition.len())
            .into_par_iter()
            .map(|c| build_lyapunov(ham, &partition, c, enumeration_cap).map(Some))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_tables(ham, partition, tables))
    }

    /// Assemble from prebuilt tables; clusters without a table make
    /// evaluation fail with [`Error::MissingTable`].
    pub fn with_tables(ham: &Hamiltonian, partition: ClusterPartition, tables: Vec<Option<LyapunovTable>>) -> Self {
        let lattice = ham.lattice();
        let foreign = (0..lattice.num_sites())
            .map(|x| {
                let home = partition.cluster_of(x);
                let mut cs: Vec<usize> = lattice
                    .neighbors(x)
                    .iter()
                    .map(|&z| partition.cluster_of(z))
                    .filter(|&c| c != home)
                    .collect();
                cs.sort_unstable();
                cs.dedup();
                cs
            })
            .collect();
        let d = lattice.dim() as f64;
        LyapunovSystem { cap: 4.0 * d * partition.k(), kbar: 2.0 * d * partition.k(), partition, tables, foreign }
    }

    pub fn partition(&self) -> &ClusterPartition {
        &self.partition
    }

    pub fn table(&self, c: usize) -> Result<&LyapunovTable> {
        self.tables.get(c).and_then(|t| t.as_ref()).ok_or(Error::MissingTable(c))
    }

    /// `4dK`.
    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// `2dK`.
    pub fn kbar(&self) -> f64 {
        self.kbar
    }

    /// Sites `x` whose closure-membership sets are `C_x` plus these clusters.
    pub fn foreign_clusters(&self, x: Site) -> &[usize] {
        &self.foreign[x]
    }

    fn table_value(&self, c: usize, v: f64) -> Result<f64> {
        self.table(c)?.lookup(v).ok_or_else(|| {
            Error::InvalidSpec(format!("cluster {c}: energy {v} is not an attainable level"))
        })
    }

    pub fn cluster_lyapunov(&self, ham: &Hamiltonian, c: usize, config: &SpinConfig) -> Result<f64> {
        self.table_value(c, cluster_energy(ham, self.partition.members(c), config))
    }

    /// `L(S)`: sum of every cluster's table value.
    pub fn eval_l(&self, ham: &Hamiltonian, config: &SpinConfig) -> Result<f64> {
        let mut acc = CompensatedSum::new();
        for c in 0..self.partition.len() {
            acc.add(self.cluster_lyapunov(ham, c, config)?);
        }
        Ok(acc.value())
    }

    /// Sum of the table bounds `4dK (M_C - 1)`.
    pub fn l_bound(&self) -> Result<f64> {
        let mut acc = CompensatedSum::new();
        for c in 0..self.partition.len() {
            acc.add(self.table(c)?.bound());
        }
        Ok(acc.value())
    }

    /// Checks that the cluster energies add up to the total energy.
    pub fn decomposition_check(&self, ham: &Hamiltonian, config: &SpinConfig) -> DecompositionReport {
        let mut acc = CompensatedSum::new();
        for c in 0..self.partition.len() {
            acc.add(cluster_energy(ham, self.partition.members(c), config));
        }
        let cluster_sum = acc.value();
        let total_energy = ham.total_energy(config);
        let ok = (cluster_sum - total_energy).abs() <= 1e-9 * total_energy.abs().max(1.0);
        DecompositionReport { cluster_sum, total_energy, ok }
    }

    /// Lyapunov change of the flip `S_x -> new`, split into the home
    /// cluster and the clusters whose closure holds `x`, with the verdicts
    /// of every per-flip inequality.
    pub fn audit_flip(&self, ham: &Hamiltonian, config: &SpinConfig, x: Site, new: Spin) -> Result<FlipAudit> {
        let before = |z: Site| config.get(z);
        let after = |z: Site| if z == x { new } else { config.get(z) };
        let delta_h = ham.delta_h(x, config, new);

        let home = self.partition.cluster_of(x);
        let members = self.partition.members(home);
        let v0 = cluster_energy_with(ham, members, before);
        let v1 = cluster_energy_with(ham, members, after);
        let l0 = self.table_value(home, v0)?;
        let l1 = self.table_value(home, v1)?;
        let delta_v_home = v1 - v0;
        let delta_l_home = l1 - l0;
        let mut scale = v0.abs().max(v1.abs()).max(l0.abs()).max(l1.abs()).max(delta_h.abs());

        let mut star = CompensatedSum::new();
        let mut star_v = CompensatedSum::new();
        for &c in &self.foreign[x] {
            let m = self.partition.members(c);
            let (w0, w1) = (cluster_energy_with(ham, m, before), cluster_energy_with(ham, m, after));
            let (a, b) = (self.table_value(c, w0)?, self.table_value(c, w1)?);
            star.add(b - a);
            star_v.add(w1 - w0);
            scale = scale.max(w0.abs()).max(w1.abs()).max(a.abs()).max(b.abs());
        }
        let delta_l_star = star.value();
        let delta_l = delta_l_home + delta_l_star;
        let tol = slack(scale);

        let outside = delta_h - delta_v_home;
        let star_bound = delta_l_star.abs() <= self.kbar + tol
            && (delta_l_star - outside).abs() <= tol
            && (star_v.value() - outside).abs() <= tol;
        let regime = if delta_v_home.abs() <= self.cap {
            Regime::Linear
        } else {
            Regime::Capped
        };
        let linear_exact = regime == Regime::Capped || (delta_l - delta_h).abs() <= tol;
        let contract = if delta_h >= -self.kbar {
            delta_l <= delta_h + tol
        } else {
            delta_l <= -self.kbar + tol
        };
        let zero_to_zero = delta_h.abs() > TAU_ZERO || delta_l.abs() <= tol;
        Ok(FlipAudit {
            delta_h,
            delta_l,
            delta_l_home,
            delta_l_star,
            delta_v_home,
            regime,
            verdicts: Verdicts { star_bound, linear_exact, contract, zero_to_zero },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub star_bound: u64,
    pub linear_exact: u64,
    pub contract: u64,
    pub zero_to_zero: u64,
    /// Events where the running `L` increased.
    pub monotonicity: u64,
}

impl ViolationCounts {
    pub fn total(&self) -> u64 {
        self.star_bound + self.linear_exact + self.contract + self.zero_to_zero + self.monotonicity
    }

    fn record(&mut self, v: &Verdicts) {
        self.star_bound += u64::from(!v.star_bound);
        self.linear_exact += u64::from(!v.linear_exact);
        self.contract += u64::from(!v.contract);
        self.zero_to_zero += u64::from(!v.zero_to_zero);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub time: f64,
    pub site: Site,
    pub audit: FlipAudit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryAudit {
    pub records: Vec<AuditRecord>,
    pub violations: ViolationCounts,
    pub l_initial: f64,
    /// Running `L` after each event.
    pub l_path: Vec<f64>,
    /// `L` of the final configuration, recomputed from scratch.
    pub l_final_direct: f64,
    pub linear_events: u64,
    pub capped_events: u64,
}

impl TrajectoryAudit {
    pub fn l_final(&self) -> f64 {
        self.l_path.last().copied().unwrap_or(self.l_initial)
    }

    /// `L` after the events with `time <= t`.
    pub fn l_at(&self, traj: &Trajectory, t: f64) -> f64 {
        match traj.events_until(t) {
            0 => self.l_initial,
            k => self.l_path[k - 1],
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,site,delta_h,delta_l,delta_l_star,regime")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                exact(r.time),
                r.site,
                exact(r.audit.delta_h),
                exact(r.audit.delta_l),
                exact(r.audit.delta_l_star),
                r.audit.regime
            )?;
        }
        Ok(())
    }
}

/// Audits every event of `traj` and stores `delta_l` on the events.
pub fn audit_trajectory(ham: &Hamiltonian, sys: &LyapunovSystem, traj: &mut Trajectory) -> Result<TrajectoryAudit> {
    let mut config = traj.initial.clone();
    let l_initial = sys.eval_l(ham, &config)?;
    let mut running = CompensatedSum::new();
    running.add(l_initial);
    let mut violations = ViolationCounts::default();
    let mut records = Vec::with_capacity(traj.events.len());
    let mut l_path = Vec::with_capacity(traj.events.len());
    let (mut linear_events, mut capped_events) = (0, 0);
    for e in traj.events.iter_mut() {
        let audit = sys.audit_flip(ham, &config, e.site, e.new)?;
        violations.record(&audit.verdicts);
        let prev = running.value();
        running.add(audit.delta_l);
        if running.value() > prev + slack(prev) {
            violations.monotonicity += 1;
        }
        match audit.regime {
            Regime::Linear => linear_events += 1,
            Regime::Capped => capped_events += 1,
        }
        l_path.push(running.value());
        e.delta_l = Some(audit.delta_l);
        records.push(AuditRecord { time: e.time, site: e.site, audit });
        config.set(e.site, e.new);
    }
    let l_final_direct = sys.eval_l(ham, &config)?;
    Ok(TrajectoryAudit { records, violations, l_initial, l_path, l_final_direct, linear_events, capped_events })
}

/// Threshold `(2d + 1) ln |S0|` that the tail decay rate has to beat.
pub fn exp_moment_alpha(d: usize, space: SpinSpace) -> f64 {
    (2 * d + 1) as f64 * (space.cardinality() as f64).ln()
}

/// Disorder realization used for tail sample `index`.
pub fn tail_sample_spec(spec: &DisorderSpec, index: usize) -> DisorderSpec {
    DisorderSpec { seed: rng::derive_seed(spec.seed, Domain::TailSample, index as u64), ..*spec }
}

/// Cluster partitions at threshold `k` for `count` independent realizations.
pub fn sample_partitions(
    lattice: &TorusLattice,
    spec: &DisorderSpec,
    space: SpinSpace,
    k: f64,
    count: usize,
) -> Result<Vec<ClusterPartition>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let dis = disorder::sample(lattice, &tail_sample_spec(spec, i))?;
            let w = BondWeights::pair_form(lattice, &dis, space);
            Ok(open_clusters(lattice, &w, k))
        })
        .collect()
}

/// Tail points need at least this many sites in clusters larger than `n`.
pub const MIN_TAIL_COUNT: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    /// Fitted decay rate of `P(|C_0| > n)`.
    pub lambda: f64,
    /// Fitted prefactor `M_K`.
    pub prefactor: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub k: f64,
    /// `survival[n] = P(|C_0| > n)`, estimated over all sites of all samples.
    pub survival: Vec<f64>,
    pub fit: Option<TailFit>,
    /// Some sampled cluster covered a full side of the torus.
    pub spanning_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReport {
    pub samples: usize,
    pub alpha: f64,
    pub estimates: Vec<TailEstimate>,
}

/// Least-squares fit of `ln P(|C_0| > n) = ln M - lambda n` over `n >= 1`
/// with at least [`MIN_TAIL_COUNT`] supporting sites; `None` below three points.
pub fn fit_tail(survival_counts: &[u64], total: u64) -> Option<TailFit> {
    let pts: Vec<(f64, f64)> = survival_counts
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(_, &c)| c >= MIN_TAIL_COUNT)
        .map(|(n, &c)| (n as f64, (c as f64 / total as f64).ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Some(TailFit { lambda: -slope, prefactor: (my - slope * mx).exp(), points: pts.len() })
}

/// Survival counts `#{sites x : |C_x| > n}` summed over partitions.
pub fn survival_counts(partitions: &[ClusterPartition]) -> (Vec<u64>, u64) {
    let mut counts: Vec<u64> = Vec::new();
    let mut total = 0;
    for p in partitions {
        total += p.cluster_of.len() as u64;
        for c in 0..p.len() {
            let s = p.members(c).len();
            if counts.len() < s {
                counts.resize(s, 0);
            }
            // every member of a size-s cluster counts for n = 0..s-1
            for slot in counts.iter_mut().take(s) {
                *slot += s as u64;
            }
        }
    }
    (counts, total)
}

/// Monte Carlo estimate of the cluster-size tail for each threshold.
pub fn cluster_tail(
    lattice: &TorusLattice,
    spec: &DisorderSpec,
    space: SpinSpace,
    k_list: &[f64],
    samples: usize,
) -> Result<TailReport> {
    spec.validate()?;
    let estimates = k_list
        .iter()
        .map(|&k| {
            let parts = sample_partitions(lattice, spec, space, k, samples)?;
            let (counts, total) = survival_counts(&parts);
            Ok(TailEstimate {
                k,
                survival: counts.iter().map(|&c| c as f64 / total as f64).collect(),
                fit: fit_tail(&counts, total),
                spanning_warning: parts.iter().any(|p| p.any_spanning()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TailReport { samples, alpha: exp_moment_alpha(lattice.dim(), space), estimates })
}

/// Minimum number of partitions for [`exp_moment_diagnostic`].
pub const MIN_EXP_MOMENT_SAMPLES: usize = 100;
/// Largest-term share of the running sum above which the estimate is unstable.
pub const EXP_MOMENT_DOMINANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpMomentReport {
    pub samples: usize,
    pub alpha: f64,
    /// `ln` of the empirical mean of `exp(alpha |C_0|)`.
    pub log_mean: f64,
    pub mean: f64,
    /// Largest single term over the sum of all terms.
    pub dominance: f64,
    pub origin_spans: bool,
    pub stable: bool,
}

/// Empirical `E exp(alpha |C_0|)` over partitions, with a stability flag:
/// unstable when one term carries more than half of the sum or when the
/// origin cluster wraps a full side of the torus.
pub fn exp_moment_diagnostic(partitions: &[ClusterPartition], alpha: f64) -> Result<ExpMomentReport> {
    if partitions.len() < MIN_EXP_MOMENT_SAMPLES {
        return Err(Error::InvalidSpec(format!(
            "exp-moment diagnostic needs at least {MIN_EXP_MOMENT_SAMPLES} partitions, got {}",
            partitions.len()
        )));
    }
    let logs: Vec<f64> = partitions
        .iter()
        .map(|p| alpha * p.size_of_cluster_at(0) as f64)
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
    let log_mean = log_sum - (logs.len() as f64).ln();
    let dominance = (top - log_sum).exp();
    let origin_spans = partitions.iter().any(|p| p.spans_side(p.cluster_of(0)));
    Ok(ExpMomentReport {
        samples: partitions.len(),
        alpha,
        log_mean,
        mean: log_mean.exp(),
        dominance,
        origin_spans,
        stable: dominance <= EXP_MOMENT_DOMINANCE && !origin_spans,
    })
}
