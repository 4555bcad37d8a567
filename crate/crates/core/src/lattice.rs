//! Finite periodic lattice `Z_L1 x ... x Z_Ld`.
//!
//! Sites are numbered in row-major order (last coordinate fastest). Every
//! site owns one bond per axis, pointing in the positive direction, so bond
//! `site * d + axis` joins `site` and `site + e_axis`. Neighbor slots are
//! `2 * axis` for `+e_axis` and `2 * axis + 1` for `-e_axis`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Site = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bond {
    pub a: Site,
    pub b: Site,
}

impl Bond {
    pub fn new(x: Site, y: Site) -> Self {
        if x <= y {
            Bond { a: x, b: y }
        } else {
            Bond { a: y, b: x }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TorusLattice {
    dims: Vec<usize>,
    strides: Vec<usize>,
    n: usize,
    nbrs: Vec<Site>,
    nbr_bonds: Vec<usize>,
}

impl TorusLattice {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidLattice("dimension must be at least 1".into()));
        }
        if let Some(&l) = dims.iter().find(|&&l| l < 3) {
            return Err(Error::InvalidLattice(format!(
                "side length {l} < 3 would create doubled bonds"
            )));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &l| acc.checked_mul(l))
            .ok_or_else(|| Error::InvalidLattice("site count overflows".into()))?;
        let d = dims.len();
        let mut strides = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }

        let mut lattice = TorusLattice {
            dims: dims.to_vec(),
            strides,
            n,
            nbrs: Vec::with_capacity(2 * d * n),
            nbr_bonds: Vec::with_capacity(2 * d * n),
        };
        for x in 0..n {
            for k in 0..d {
                let up = lattice.shift(x, k, 1);
                let down = lattice.shift(x, k, -1);
                lattice.nbrs.push(up);
                lattice.nbr_bonds.push(x * d + k);
                lattice.nbrs.push(down);
                lattice.nbr_bonds.push(down * d + k);
            }
        }
        Ok(lattice)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_sites(&self) -> usize {
        self.n
    }

    pub fn num_bonds(&self) -> usize {
        self.n * self.dims.len()
    }

    /// Number of neighbors of every site, `2d`.
    pub fn degree(&self) -> usize {
        2 * self.dims.len()
    }

    pub fn check_site(&self, x: Site) -> Result<()> {
        if x < self.n {
            Ok(())
        } else {
            Err(Error::InvalidSite { site: x, n: self.n })
        }
    }

    /// The `2d` neighbors of `x`; panics on an out-of-range site.
    #[inline]
    pub fn neighbors(&self, x: Site) -> &[Site] {
        let deg = self.degree();
        &self.nbrs[x * deg..(x + 1) * deg]
    }

    /// Bond ids matching `neighbors(x)` slot by slot.
    #[inline]
    pub fn neighbor_bonds(&self, x: Site) -> &[usize] {
        let deg = self.degree();
        &self.nbr_bonds[x * deg..(x + 1) * deg]
    }

    pub fn try_neighbors(&self, x: Site) -> Result<&[Site]> {
        self.check_site(x)?;
        Ok(self.neighbors(x))
    }

    pub fn coords(&self, x: Site) -> Vec<usize> {
        self.dims
            .iter()
            .zip(&self.strides)
            .map(|(&l, &s)| (x / s) % l)
            .collect()
    }

    pub fn index(&self, coords: &[usize]) -> Site {
        debug_assert_eq!(coords.len(), self.dim());
        coords
            .iter()
            .zip(&self.dims)
            .zip(&self.strides)
            .map(|((&c, &l), &s)| (c % l) * s)
            .sum()
    }

    /// `x + delta * e_axis` with periodic wrap.
    pub fn shift(&self, x: Site, axis: usize, delta: isize) -> Site {
        let l = self.dims[axis] as isize;
        let s = self.strides[axis];
        let c = ((x / s) % self.dims[axis]) as isize;
        let c2 = (c + delta).rem_euclid(l) as usize;
        x - (c as usize) * s + c2 * s
    }

    /// Translate `x` by an arbitrary lattice vector.
    pub fn translate(&self, x: Site, by: &[isize]) -> Site {
        by.iter()
            .enumerate()
            .fold(x, |acc, (axis, &delta)| self.shift(acc, axis, delta))
    }

    pub fn bond(&self, id: usize) -> Bond {
        let d = self.dim();
        let x = id / d;
        Bond::new(x, self.shift(x, id % d, 1))
    }

    pub fn bond_axis(&self, id: usize) -> usize {
        id % self.dim()
    }

    /// Bond id joining two neighboring sites, if they are neighbors.
    pub fn bond_between(&self, x: Site, y: Site) -> Option<usize> {
        self.neighbors(x)
            .iter()
            .position(|&z| z == y)
            .map(|slot| self.neighbor_bonds(x)[slot])
    }

    pub fn bonds(&self) -> impl Iterator<Item = Bond> + '_ {
        (0..self.num_bonds()).map(move |id| self.bond(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn rejects_short_sides_and_empty_dims() {
        assert!(TorusLattice::new(&[]).is_err());
        assert!(TorusLattice::new(&[2, 5]).is_err());
        assert!(TorusLattice::new(&[3]).is_ok());
    }

    #[test]
    fn neighbors_in_2d_wrap() {
        let lat = TorusLattice::new(&[3, 3]).unwrap();
        let x = lat.index(&[0, 0]);
        let got: BTreeSet<_> = lat.neighbors(x).iter().map(|&y| lat.coords(y)).collect();
        let want: BTreeSet<_> = [[1, 0], [2, 0], [0, 1], [0, 2]]
            .iter()
            .map(|c| c.to_vec())
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn neighbors_in_1d() {
        let lat = TorusLattice::new(&[5]).unwrap();
        let got: BTreeSet<_> = lat.neighbors(0).iter().copied().collect();
        assert_eq!(got, BTreeSet::from([1, 4]));
    }

    #[test]
    fn degree_six_in_3d() {
        let lat = TorusLattice::new(&[3, 3, 3]).unwrap();
        for x in 0..lat.num_sites() {
            let set: BTreeSet<_> = lat.neighbors(x).iter().collect();
            assert_eq!(set.len(), 6);
        }
    }

    #[test]
    fn invalid_site_is_a_usage_error() {
        let lat = TorusLattice::new(&[4]).unwrap();
        assert!(matches!(
            lat.try_neighbors(4),
            Err(Error::InvalidSite { site: 4, n: 4 })
        ));
    }

    #[test]
    fn bond_counts() {
        let lat = TorusLattice::new(&[3, 3]).unwrap();
        assert_eq!(lat.bonds().count(), 18);
        let ring = TorusLattice::new(&[4]).unwrap();
        assert_eq!(ring.bonds().count(), 4);
        let tri = TorusLattice::new(&[3]).unwrap();
        let set: BTreeSet<_> = tri.bonds().collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn bonds_match_brute_force_pairs() {
        for dims in [vec![3], vec![4, 3], vec![3, 4, 5]] {
            let lat = TorusLattice::new(&dims).unwrap();
            let mut brute = BTreeSet::new();
            for x in 0..lat.num_sites() {
                for y in 0..lat.num_sites() {
                    let (cx, cy) = (lat.coords(x), lat.coords(y));
                    let dist: usize = cx
                        .iter()
                        .zip(&cy)
                        .zip(lat.dims())
                        .map(|((&a, &b), &l)| {
                            let d = a.abs_diff(b);
                            d.min(l - d)
                        })
                        .sum();
                    if dist == 1 && x < y {
                        brute.insert(Bond::new(x, y));
                    }
                }
            }
            let listed: Vec<_> = lat.bonds().collect();
            assert_eq!(listed.len(), lat.dim() * lat.num_sites());
            let set: BTreeSet<_> = listed.into_iter().collect();
            assert_eq!(set, brute);
        }
    }

    #[test]
    fn neighbor_bonds_agree_with_bond_table() {
        let lat = TorusLattice::new(&[3, 5]).unwrap();
        for x in 0..lat.num_sites() {
            for (&y, &b) in lat.neighbors(x).iter().zip(lat.neighbor_bonds(x)) {
                assert_eq!(lat.bond(b), Bond::new(x, y));
                assert_eq!(lat.bond_between(x, y), Some(b));
            }
        }
    }
}
