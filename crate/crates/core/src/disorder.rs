//! Quenched disorder: couplings per bond and fields per site.
//!
//! Each value is drawn from its own counter-based stream keyed by
//! `(seed, entity id)`, so a realization is a pure function of the lattice
//! and the [`DisorderSpec`].

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Cauchy, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Bond, TorusLattice};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CouplingLaw {
    Constant(f64),
    Gaussian { mean: f64, sd: f64 },
    /// `+j` with probability `alpha`, `-j` otherwise.
    PmJ { j: f64, alpha: f64 },
    Uniform { lo: f64, hi: f64 },
    Cauchy { loc: f64, scale: f64 },
    /// Couplings `sum_i xi_x^i xi_y^i` from `patterns` symmetric +-1 patterns.
    Hopfield { patterns: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FieldLaw {
    Zero,
    Constant(f64),
    Gaussian { mean: f64, sd: f64 },
    Pm { h: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderSpec {
    pub coupling: CouplingLaw,
    pub field: FieldLaw,
    pub seed: u64,
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{name} must be finite, got {v}")))
    }
}

fn probability(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("alpha must lie in [0, 1], got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")))
    }
}

impl CouplingLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CouplingLaw::Constant(c) => finite("constant", c),
            CouplingLaw::Gaussian { mean, sd } => {
                finite("mean", mean)?;
                positive("sigma", sd)
            }
            CouplingLaw::PmJ { j, alpha } => {
                positive("J", j)?;
                probability(alpha)
            }
            CouplingLaw::Uniform { lo, hi } => {
                finite("a", lo)?;
                finite("b", hi)?;
                if lo < hi {
                    Ok(())
                } else {
                    Err(Error::InvalidSpec(format!("uniform needs a < b, got ({lo}, {hi})")))
                }
            }
            CouplingLaw::Cauchy { loc, scale } => {
                finite("x0", loc)?;
                positive("gamma", scale)
            }
            CouplingLaw::Hopfield { patterns } => {
                if patterns >= 1 {
                    Ok(())
                } else {
                    Err(Error::InvalidSpec("hopfield needs M >= 1".into()))
                }
            }
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            CouplingLaw::Constant(c) => c,
            CouplingLaw::Gaussian { mean, sd } => Normal::new(mean, sd).unwrap().sample(rng),
            CouplingLaw::PmJ { j, alpha } => signed(rng, j, alpha),
            CouplingLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
            CouplingLaw::Cauchy { loc, scale } => Cauchy::new(loc, scale).unwrap().sample(rng),
            CouplingLaw::Hopfield { .. } => unreachable!("hopfield couplings are not i.i.d."),
        }
    }
}

impl FieldLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FieldLaw::Zero => Ok(()),
            FieldLaw::Constant(h) => finite("h", h),
            FieldLaw::Gaussian { mean, sd } => {
                finite("mean", mean)?;
                positive("sigma", sd)
            }
            FieldLaw::Pm { h, alpha } => {
                positive("h", h)?;
                probability(alpha)
            }
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            FieldLaw::Zero => 0.0,
            FieldLaw::Constant(h) => h,
            FieldLaw::Gaussian { mean, sd } => Normal::new(mean, sd).unwrap().sample(rng),
            FieldLaw::Pm { h, alpha } => signed(rng, h, alpha),
        }
    }
}

fn signed<R: Rng>(rng: &mut R, magnitude: f64, alpha: f64) -> f64 {
    if rng.random::<f64>() < alpha {
        magnitude
    } else {
        -magnitude
    }
}

impl DisorderSpec {
    pub fn new(coupling: CouplingLaw, field: FieldLaw, seed: u64) -> Self {
        DisorderSpec { coupling, field, seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        self.field.validate()
    }
}

/// Parse `name(a,b,...)` or a bare `name`.
fn split_call(s: &str) -> Result<(String, Vec<f64>)> {
    let s = s.trim();
    let (name, args) = match s.find('(') {
        Some(open) => {
            let close = s
                .rfind(')')
                .filter(|&c| c == s.len() - 1 && c > open)
                .ok_or_else(|| Error::Parse(format!("unbalanced parentheses in `{s}`")))?;
            (&s[..open], &s[open + 1..close])
        }
        None => (s, ""),
    };
    let args = if args.trim().is_empty() {
        Vec::new()
    } else {
        args.split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad number `{}` in `{s}`", a.trim())))
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok((name.trim().to_ascii_lowercase(), args))
}

fn arity(name: &str, args: &[f64], n: usize) -> Result<()> {
    if args.len() == n {
        Ok(())
    } else {
        Err(Error::Parse(format!("`{name}` takes {n} argument(s), got {}", args.len())))
    }
}

impl FromStr for CouplingLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, a) = split_call(s)?;
        let law = match name.as_str() {
            "constant" => {
                arity(&name, &a, 1)?;
                CouplingLaw::Constant(a[0])
            }
            "gaussian" => {
                arity(&name, &a, 2)?;
                CouplingLaw::Gaussian { mean: a[0], sd: a[1] }
            }
            "pm_j" => {
                arity(&name, &a, 2)?;
                CouplingLaw::PmJ { j: a[0], alpha: a[1] }
            }
            "uniform" => {
                arity(&name, &a, 2)?;
                CouplingLaw::Uniform { lo: a[0], hi: a[1] }
            }
            "cauchy" => {
                arity(&name, &a, 2)?;
                CouplingLaw::Cauchy { loc: a[0], scale: a[1] }
            }
            "hopfield" => {
                arity(&name, &a, 1)?;
                if a[0].fract() != 0.0 || a[0] < 1.0 || a[0] > u32::MAX as f64 {
                    return Err(Error::Parse(format!("hopfield needs an integer M >= 1, got {}", a[0])));
                }
                CouplingLaw::Hopfield { patterns: a[0] as u32 }
            }
            other => return Err(Error::Parse(format!("unknown coupling law `{other}`"))),
        };
        law.validate()?;
        Ok(law)
    }
}

impl FromStr for FieldLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, a) = split_call(s)?;
        let law = match name.as_str() {
            "zero" => {
                arity(&name, &a, 0)?;
                FieldLaw::Zero
            }
            "constant" => {
                arity(&name, &a, 1)?;
                FieldLaw::Constant(a[0])
            }
            "gaussian" => {
                arity(&name, &a, 2)?;
                FieldLaw::Gaussian { mean: a[0], sd: a[1] }
            }
            "pm" => {
                arity(&name, &a, 2)?;
                FieldLaw::Pm { h: a[0], alpha: a[1] }
            }
            other => return Err(Error::Parse(format!("unknown field law `{other}`"))),
        };
        law.validate()?;
        Ok(law)
    }
}

impl fmt::Display for CouplingLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CouplingLaw::Constant(c) => write!(f, "constant({c})"),
            CouplingLaw::Gaussian { mean, sd } => write!(f, "gaussian({mean},{sd})"),
            CouplingLaw::PmJ { j, alpha } => write!(f, "pm_j({j},{alpha})"),
            CouplingLaw::Uniform { lo, hi } => write!(f, "uniform({lo},{hi})"),
            CouplingLaw::Cauchy { loc, scale } => write!(f, "cauchy({loc},{scale})"),
            CouplingLaw::Hopfield { patterns } => write!(f, "hopfield({patterns})"),
        }
    }
}

impl fmt::Display for FieldLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldLaw::Zero => write!(f, "zero"),
            FieldLaw::Constant(h) => write!(f, "constant({h})"),
            FieldLaw::Gaussian { mean, sd } => write!(f, "gaussian({mean},{sd})"),
            FieldLaw::Pm { h, alpha } => write!(f, "pm({h},{alpha})"),
        }
    }
}

/// Couplings indexed by bond id and fields indexed by site.
#[derive(Debug, Clone, PartialEq)]
pub struct DisorderRealization {
    couplings: Vec<f64>,
    fields: Vec<f64>,
    /// `None` for realizations built by hand or imported from CSV.
    spec: Option<DisorderSpec>,
}

impl DisorderRealization {
    pub fn from_values(lattice: &TorusLattice, couplings: Vec<f64>, fields: Vec<f64>) -> Result<Self> {
        if couplings.len() != lattice.num_bonds() || fields.len() != lattice.num_sites() {
            return Err(Error::InvalidSpec(format!(
                "expected {} couplings and {} fields, got {} and {}",
                lattice.num_bonds(),
                lattice.num_sites(),
                couplings.len(),
                fields.len()
            )));
        }
        if let Some(v) = couplings.iter().chain(&fields).find(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec(format!("non-finite disorder value {v}")));
        }
        Ok(DisorderRealization { couplings, fields, spec: None })
    }

    /// Uniform couplings and fields; handy for homogeneous models.
    pub fn homogeneous(lattice: &TorusLattice, j: f64, h: f64) -> Result<Self> {
        Self::from_values(lattice, vec![j; lattice.num_bonds()], vec![h; lattice.num_sites()])
    }

    pub fn couplings(&self) -> &[f64] {
        &self.couplings
    }

    pub fn fields(&self) -> &[f64] {
        &self.fields
    }

    #[inline]
    pub fn coupling(&self, bond: usize) -> f64 {
        self.couplings[bond]
    }

    #[inline]
    pub fn field(&self, site: usize) -> f64 {
        self.fields[site]
    }

    pub fn spec(&self) -> Option<&DisorderSpec> {
        self.spec.as_ref()
    }

    pub fn write_csv<W: Write>(&self, lattice: &TorusLattice, mut out: W) -> Result<()> {
        writeln!(out, "kind,id_a,id_b,value")?;
        for (id, &j) in self.couplings.iter().enumerate() {
            let Bond { a, b } = lattice.bond(id);
            writeln!(out, "J,{a},{b},{}", exact(j))?;
        }
        for (x, &h) in self.fields.iter().enumerate() {
            writeln!(out, "h,{x},,{}", exact(h))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(lattice: &TorusLattice, input: R) -> Result<Self> {
        let mut couplings = vec![None; lattice.num_bonds()];
        let mut fields = vec![None; lattice.num_sites()];
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "kind,id_a,id_b,value" => {}
            _ => return Err(Error::Parse("missing header `kind,id_a,id_b,value`".into())),
        }
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("line {}: malformed row `{line}`", lineno + 2));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad());
            }
            let a: usize = cols[1].parse().map_err(|_| bad())?;
            let value: f64 = cols[3].parse().map_err(|_| bad())?;
            lattice.check_site(a)?;
            match cols[0] {
                "J" => {
                    let b: usize = cols[2].parse().map_err(|_| bad())?;
                    lattice.check_site(b)?;
                    let id = lattice.bond_between(a, b).ok_or_else(bad)?;
                    couplings[id] = Some(value);
                }
                "h" if cols[2].is_empty() => fields[a] = Some(value),
                _ => return Err(bad()),
            }
        }
        let couplings = couplings
            .into_iter()
            .enumerate()
            .map(|(id, v)| v.ok_or_else(|| Error::Parse(format!("bond {id} has no coupling row"))))
            .collect::<Result<Vec<_>>>()?;
        let fields = fields
            .into_iter()
            .enumerate()
            .map(|(x, v)| v.ok_or_else(|| Error::Parse(format!("site {x} has no field row"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(lattice, couplings, fields)
    }
}

/// 17 significant digits: enough to round-trip any `f64` exactly.
pub fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn sample_fields(lattice: &TorusLattice, law: &FieldLaw, seed: u64) -> Vec<f64> {
    (0..lattice.num_sites())
        .map(|x| law.draw(&mut rng::stream(seed, Domain::Field, x as u64)))
        .collect()
}

/// I.i.d. couplings and fields from any non-Hopfield spec.
pub fn sample_iid(lattice: &TorusLattice, spec: &DisorderSpec) -> Result<DisorderRealization> {
    spec.validate()?;
    if matches!(spec.coupling, CouplingLaw::Hopfield { .. }) {
        return Err(Error::InvalidSpec(
            "hopfield couplings are not i.i.d.; use sample_hopfield".into(),
        ));
    }
    let couplings = (0..lattice.num_bonds())
        .map(|b| spec.coupling.draw(&mut rng::stream(spec.seed, Domain::Coupling, b as u64)))
        .collect();
    Ok(DisorderRealization {
        couplings,
        fields: sample_fields(lattice, &spec.field, spec.seed),
        spec: Some(*spec),
    })
}

/// Draws `patterns` i.i.d. symmetric +-1 values for one site.
pub fn hopfield_pattern(seed: u64, site: usize, patterns: u32) -> Vec<i8> {
    let mut rng = rng::stream(seed, Domain::Pattern, site as u64);
    (0..patterns)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect()
}

pub fn hopfield_coupling(xi_x: &[i8], xi_y: &[i8]) -> f64 {
    xi_x.iter()
        .zip(xi_y)
        .map(|(&a, &b)| i32::from(a) * i32::from(b))
        .sum::<i32>() as f64
}

pub fn sample_hopfield(
    lattice: &TorusLattice,
    patterns: u32,
    field: FieldLaw,
    seed: u64,
) -> Result<DisorderRealization> {
    let spec = DisorderSpec::new(CouplingLaw::Hopfield { patterns }, field, seed);
    spec.validate()?;
    let xi: Vec<Vec<i8>> = (0..lattice.num_sites())
        .map(|x| hopfield_pattern(seed, x, patterns))
        .collect();
    let couplings = lattice
        .bonds()
        .map(|Bond { a, b }| hopfield_coupling(&xi[a], &xi[b]))
        .collect();
    Ok(DisorderRealization {
        couplings,
        fields: sample_fields(lattice, &field, seed),
        spec: Some(spec),
    })
}

/// Dispatches to [`sample_iid`] or [`sample_hopfield`].
pub fn sample(lattice: &TorusLattice, spec: &DisorderSpec) -> Result<DisorderRealization> {
    match spec.coupling {
        CouplingLaw::Hopfield { patterns } => sample_hopfield(lattice, patterns, spec.field, spec.seed),
        _ => sample_iid(lattice, spec),
    }
}

/// Block length for the heavy-tail check in [`finite_mean_diagnostic`].
pub const TAIL_BLOCK: usize = 1000;
/// A block whose largest `|J|` exceeds this share of the block sum flags heavy tails.
pub const TAIL_DOMINANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteMeanReport {
    pub samples: usize,
    pub mean_abs: f64,
    /// Largest `max |J| / sum |J|` over consecutive blocks of [`TAIL_BLOCK`] samples.
    pub dominance: f64,
    pub heavy_tail: bool,
}

/// Empirical `E|J|` with a heavy-tail warning.
///
/// The samples are cut into consecutive blocks of [`TAIL_BLOCK`] values (a
/// short remainder joins the last block). When a single `|J|` outweighs the
/// rest of its block, the running mean at least doubles at that step, which
/// a finite-mean law essentially never does at this block length.
pub fn finite_mean_diagnostic(realizations: &[DisorderRealization]) -> FiniteMeanReport {
    let values: Vec<f64> = realizations
        .iter()
        .flat_map(|r| r.couplings.iter().map(|j| j.abs()))
        .collect();
    let n = values.len();
    if n == 0 {
        return FiniteMeanReport { samples: 0, mean_abs: 0.0, dominance: 0.0, heavy_tail: false };
    }
    let blocks = (n / TAIL_BLOCK).max(1);
    let mut dominance: f64 = 0.0;
    for k in 0..blocks {
        let end = if k + 1 == blocks { n } else { (k + 1) * TAIL_BLOCK };
        let block = &values[k * TAIL_BLOCK..end];
        let sum: f64 = block.iter().sum();
        if sum > 0.0 {
            let max = block.iter().cloned().fold(0.0, f64::max);
            dominance = dominance.max(max / sum);
        }
    }
    FiniteMeanReport {
        samples: n,
        mean_abs: crate::numeric::compensated_sum(values.iter().copied()) / n as f64,
        dominance,
        heavy_tail: dominance > TAIL_DOMINANCE,
    }
}
