//! Small numeric helpers shared across modules.

/// Energy changes with `|dH| <= TAU_ZERO` count as zero-energy moves.
pub const TAU_ZERO: f64 = 1e-12;

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl Extend<f64> for CompensatedSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for v in iter {
            self.add(v);
        }
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::new();
    acc.extend(values);
    acc.value()
}

/// Comparison slack for quantities of magnitude `scale`: never below
/// [`TAU_ZERO`], growing with the rounding error of the operands.
#[inline]
pub fn slack(scale: f64) -> f64 {
    TAU_ZERO.max(64.0 * f64::EPSILON * scale.abs())
}
