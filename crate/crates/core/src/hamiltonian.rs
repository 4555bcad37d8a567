//! Spin spaces, nearest-neighbor local potentials and energy changes.
//!
//! Spins are stored as indices `0..|S0|`. For Ising, index 0 is `-1` and
//! index 1 is `+1`; for Potts(Q), index `i` is color `i + 1`.
//!
//! Local potentials:
//! - Ising: `V_x = -h_x S_x - 1/2 sum_z J_xz S_x S_z`
//! - Potts: `V_x = -h_x [S_x = 1] - 1/2 sum_z J_xz [S_x = S_z]`

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::disorder::DisorderRealization;
use crate::error::{Error, Result};
use crate::lattice::{Site, TorusLattice};
use crate::numeric::{CompensatedSum, TAU_ZERO};

pub type Spin = u8;

pub const MAX_POTTS_STATES: u8 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinSpace {
    Ising,
    Potts(u8),
}

impl SpinSpace {
    pub fn potts(q: u8) -> Result<Self> {
        if (2..=MAX_POTTS_STATES).contains(&q) {
            Ok(SpinSpace::Potts(q))
        } else {
            Err(Error::InvalidSpec(format!("Potts needs 2 <= Q <= {MAX_POTTS_STATES}, got {q}")))
        }
    }

    pub fn cardinality(&self) -> usize {
        match *self {
            SpinSpace::Ising => 2,
            SpinSpace::Potts(q) => q as usize,
        }
    }

    /// Physical value of a spin index: `+-1` for Ising, `1..=Q` for Potts.
    pub fn value(&self, s: Spin) -> i32 {
        match self {
            SpinSpace::Ising => 2 * i32::from(s) - 1,
            SpinSpace::Potts(_) => i32::from(s) + 1,
        }
    }

    pub fn index_of(&self, value: i32) -> Option<Spin> {
        match *self {
            SpinSpace::Ising => match value {
                -1 => Some(0),
                1 => Some(1),
                _ => None,
            },
            SpinSpace::Potts(q) => (1..=i32::from(q)).contains(&value).then(|| (value - 1) as Spin),
        }
    }

    pub fn spins(&self) -> std::ops::Range<Spin> {
        0..self.cardinality() as Spin
    }

    /// Energy of the bond `{x, z}` for coupling `j`.
    #[inline]
    pub fn pair_energy(&self, j: f64, a: Spin, b: Spin) -> f64 {
        match self {
            SpinSpace::Ising => {
                if a == b {
                    -j
                } else {
                    j
                }
            }
            SpinSpace::Potts(_) => {
                if a == b {
                    -j
                } else {
                    0.0
                }
            }
        }
    }

    #[inline]
    pub fn field_energy(&self, h: f64, a: Spin) -> f64 {
        match self {
            SpinSpace::Ising => {
                if a == 1 {
                    -h
                } else {
                    h
                }
            }
            SpinSpace::Potts(_) => {
                if a == 0 {
                    -h
                } else {
                    0.0
                }
            }
        }
    }

    /// All the energy that depends on the spin at one site: its field term
    /// plus the full energy of its bonds.
    #[inline]
    fn site_energy(&self, h: f64, couplings: &[f64], eta: Spin, nbr_spins: &[Spin]) -> f64 {
        let mut e = self.field_energy(h, eta);
        for (&j, &s) in couplings.iter().zip(nbr_spins) {
            e += self.pair_energy(j, eta, s);
        }
        e
    }
}

impl fmt::Display for SpinSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpinSpace::Ising => write!(f, "ising"),
            SpinSpace::Potts(q) => write!(f, "potts({q})"),
        }
    }
}

impl FromStr for SpinSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "ising" {
            return Ok(SpinSpace::Ising);
        }
        let q = s
            .strip_prefix("potts(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|q| q.trim().parse::<u8>().ok())
            .ok_or_else(|| Error::Parse(format!("unknown spin space `{s}`")))?;
        SpinSpace::potts(q)
    }
}

/// Calls `f` with every assignment in `space^len`, odometer order.
pub(crate) fn for_each_assignment(space: SpinSpace, len: usize, mut f: impl FnMut(&[Spin])) {
    let q = space.cardinality() as Spin;
    let mut digits = vec![0 as Spin; len];
    loop {
        f(&digits);
        let mut k = 0;
        loop {
            if k == len {
                return;
            }
            digits[k] += 1;
            if digits[k] < q {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinConfig {
    space: SpinSpace,
    spins: Vec<Spin>,
}

impl SpinConfig {
    pub fn new(space: SpinSpace, spins: Vec<Spin>) -> Result<Self> {
        if let Some(&s) = spins.iter().find(|&&s| usize::from(s) >= space.cardinality()) {
            return Err(Error::InvalidSpec(format!("spin index {s} outside {space}")));
        }
        Ok(SpinConfig { space, spins })
    }

    pub fn uniform(space: SpinSpace, n: usize, s: Spin) -> Result<Self> {
        Self::new(space, vec![s; n])
    }

    /// Build from physical values (`+-1` or Potts colors).
    pub fn from_values(space: SpinSpace, values: &[i32]) -> Result<Self> {
        let spins = values
            .iter()
            .map(|&v| {
                space
                    .index_of(v)
                    .ok_or_else(|| Error::InvalidSpec(format!("spin value {v} outside {space}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SpinConfig { space, spins })
    }

    pub fn space(&self) -> SpinSpace {
        self.space
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    #[inline]
    pub fn get(&self, x: Site) -> Spin {
        self.spins[x]
    }

    #[inline]
    pub fn set(&mut self, x: Site, s: Spin) {
        debug_assert!(usize::from(s) < self.space.cardinality());
        self.spins[x] = s;
    }

    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    pub fn values(&self) -> Vec<i32> {
        self.spins.iter().map(|&s| self.space.value(s)).collect()
    }

    /// Same `kind,id_a,id_b,value` layout as the disorder export, kind `S`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "kind,id_a,id_b,value")?;
        for (x, &s) in self.spins.iter().enumerate() {
            writeln!(out, "S,{x},,{}", self.space.value(s))?;
        }
        Ok(())
    }
}

/// Random nearest-neighbor Hamiltonian on a torus.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    lattice: TorusLattice,
    disorder: DisorderRealization,
    space: SpinSpace,
}

impl Hamiltonian {
    pub fn new(lattice: TorusLattice, disorder: DisorderRealization, space: SpinSpace) -> Result<Self> {
        if disorder.couplings().len() != lattice.num_bonds() || disorder.fields().len() != lattice.num_sites() {
            return Err(Error::InvalidSpec("disorder does not match lattice".into()));
        }
        Ok(Hamiltonian { lattice, disorder, space })
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn disorder(&self) -> &DisorderRealization {
        &self.disorder
    }

    pub fn space(&self) -> SpinSpace {
        self.space
    }

    /// Couplings to the neighbors of `x`, slot by slot.
    pub fn neighbor_couplings(&self, x: Site) -> impl Iterator<Item = f64> + '_ {
        self.lattice
            .neighbor_bonds(x)
            .iter()
            .map(move |&b| self.disorder.coupling(b))
    }

    /// `V_x` with spins supplied by `spin`, which may describe any
    /// hypothetical configuration.
    pub fn local_energy_with(&self, x: Site, spin: impl Fn(Site) -> Spin) -> f64 {
        let sx = spin(x);
        let mut pairs = 0.0;
        for (&z, &b) in self.lattice.neighbors(x).iter().zip(self.lattice.neighbor_bonds(x)) {
            pairs += self.space.pair_energy(self.disorder.coupling(b), sx, spin(z));
        }
        self.space.field_energy(self.disorder.field(x), sx) + 0.5 * pairs
    }

    pub fn local_energy(&self, x: Site, config: &SpinConfig) -> f64 {
        self.local_energy_with(x, |z| config.get(z))
    }

    /// Field term plus full bond energies at `x` if its spin were `eta`.
    #[inline]
    fn site_energy(&self, x: Site, eta: Spin, config: &SpinConfig) -> f64 {
        let mut e = self.space.field_energy(self.disorder.field(x), eta);
        for (&z, &b) in self.lattice.neighbors(x).iter().zip(self.lattice.neighbor_bonds(x)) {
            e += self.space.pair_energy(self.disorder.coupling(b), eta, config.get(z));
        }
        e
    }

    /// Total energy change when the spin at `x` is set to `new`.
    #[inline]
    pub fn delta_h(&self, x: Site, config: &SpinConfig, new: Spin) -> f64 {
        let old = config.get(x);
        if new == old {
            return 0.0;
        }
        let h = self.disorder.field(x);
        let mut d = self.space.field_energy(h, new) - self.space.field_energy(h, old);
        for (&z, &b) in self.lattice.neighbors(x).iter().zip(self.lattice.neighbor_bonds(x)) {
            let j = self.disorder.coupling(b);
            let sz = config.get(z);
            d += self.space.pair_energy(j, new, sz) - self.space.pair_energy(j, old, sz);
        }
        d
    }

    /// Energy changes for every target value at `x`; `out[eta]` for the
    /// current value is zero.
    pub fn delta_h_all(&self, x: Site, config: &SpinConfig, out: &mut [f64]) {
        let old = config.get(x);
        let base = self.site_energy(x, old, config);
        for eta in self.space.spins() {
            out[eta as usize] = if eta == old {
                0.0
            } else {
                self.site_energy(x, eta, config) - base
            };
        }
    }

    /// Ising flip `S_x -> -S_x` in closed form: `2 h S_x + 2 sum_z J S_x S_z`.
    pub fn ising_flip_delta(&self, x: Site, config: &SpinConfig) -> f64 {
        let v = |s: Spin| f64::from(SpinSpace::Ising.value(s));
        let sx = v(config.get(x));
        let mut d = 2.0 * self.disorder.field(x) * sx;
        for (&z, &b) in self.lattice.neighbors(x).iter().zip(self.lattice.neighbor_bonds(x)) {
            d += 2.0 * self.disorder.coupling(b) * sx * v(config.get(z));
        }
        d
    }

    pub fn total_energy(&self, config: &SpinConfig) -> f64 {
        let mut acc = CompensatedSum::new();
        for x in 0..self.lattice.num_sites() {
            acc.add(self.local_energy(x, config));
        }
        acc.value()
    }

    /// Random minimal drop at `x`: the smallest strictly positive energy
    /// decrease over all neighbor configurations and value pairs, or `1.0`
    /// when no positive decrease exists.
    pub fn min_positive_drop(&self, x: Site) -> f64 {
        let couplings: Vec<f64> = self.neighbor_couplings(x).collect();
        min_positive_drop_local(self.space, self.disorder.field(x), &couplings)
    }
}

fn min_positive_drop_local(space: SpinSpace, h: f64, couplings: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    let mut energies = vec![0.0; space.cardinality()];
    for_each_assignment(space, couplings.len(), |nbrs| {
        for eta in space.spins() {
            energies[eta as usize] = space.site_energy(h, couplings, eta, nbrs);
        }
        for &from in &energies {
            for &to in &energies {
                let drop = from - to;
                if drop > TAU_ZERO && drop < best {
                    best = drop;
                }
            }
        }
    });
    if best.is_finite() {
        best
    } else {
        1.0
    }
}

/// Whether a homogeneous model (`J` on every bond, `h` on every site) on
/// `Z^d` admits a move with zero energy change, by enumerating every local
/// assignment of the site and its `2d` neighbors.
pub fn zero_energy_flip_possible(space: SpinSpace, j: f64, h: f64, d: usize) -> bool {
    let couplings = vec![j; 2 * d];
    let mut found = false;
    for_each_assignment(space, 2 * d + 1, |local| {
        if found {
            return;
        }
        let (eta, nbrs) = (local[0], &local[1..]);
        let e0 = space.site_energy(h, &couplings, eta, nbrs);
        found = space
            .spins()
            .filter(|&t| t != eta)
            .any(|t| (space.site_energy(h, &couplings, t, nbrs) - e0).abs() <= TAU_ZERO);
    });
    found
}
