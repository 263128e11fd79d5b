//! Integer-order Bessel functions of the first kind and truncation control for
//! the Bessel series used throughout the cavity response and slow-flow code.

use crate::error::{Error, Result};

/// Truncation of a series `sum_{n=-M}^{M}`.
///
/// `Auto` picks `ceil(3 xi) + 20`; `Fixed(m)` is checked against the minimum
/// `ceil(3 xi) + 10` and rejected below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Truncation {
    #[default]
    Auto,
    Fixed(usize),
}

impl Truncation {
    pub fn required(xi: f64) -> usize {
        (3.0 * xi.abs()).ceil() as usize + 10
    }

    pub fn default_for(xi: f64) -> usize {
        (3.0 * xi.abs()).ceil() as usize + 20
    }

    /// Resolves the truncation order for modulation index `xi`.
    pub fn resolve(self, xi: f64) -> Result<usize> {
        match self {
            Truncation::Auto => Ok(Self::default_for(xi)),
            Truncation::Fixed(m) => {
                let required = Self::required(xi);
                if m < required {
                    Err(Error::Truncation { given: m, required })
                } else {
                    Ok(m)
                }
            }
        }
    }
}

/// Table of `J_n(x)` for `0 <= n <= n_max`, built once by Miller's downward
/// recurrence and normalised with `J_0 + 2 sum_k J_2k = 1`.
#[derive(Debug, Clone)]
pub struct BesselTable {
    x: f64,
    values: Vec<f64>,
}

impl BesselTable {
    pub fn new(x: f64, n_max: usize) -> Self {
        let ax = x.abs();
        let mut values = vec![0.0; n_max + 1];
        if ax == 0.0 {
            values[0] = 1.0;
            return Self { x, values };
        }
        let top = n_max.max(ax.ceil() as usize);
        // Starting order well above both n_max and x.
        let start = top + 20 + (40.0 * top as f64).sqrt() as usize;
        let start = start + (start % 2);

        let mut next = 0.0_f64; // J_{k+1}
        let mut cur = 1e-300_f64; // J_k
        let mut norm = 0.0_f64;
        for k in (1..=start).rev() {
            let prev = 2.0 * k as f64 / ax * cur - next; // J_{k-1}
            next = cur;
            cur = prev;
            let km1 = k - 1;
            if km1 <= n_max {
                values[km1] = cur;
            }
            if km1 > 0 && km1 % 2 == 0 {
                norm += 2.0 * cur;
            }
            // Rescale to avoid overflow on the way down.
            if cur.abs() > 1e250 {
                cur *= 1e-250;
                next *= 1e-250;
                norm *= 1e-250;
                for v in values.iter_mut() {
                    *v *= 1e-250;
                }
            }
        }
        norm += cur;
        for v in values.iter_mut() {
            *v /= norm;
        }
        if x < 0.0 {
            for (n, v) in values.iter_mut().enumerate() {
                if n % 2 == 1 {
                    *v = -*v;
                }
            }
        }
        Self { x, values }
    }

    pub fn arg(&self) -> f64 {
        self.x
    }

    pub fn n_max(&self) -> usize {
        self.values.len() - 1
    }

    /// `J_n(x)` for any integer order; zero beyond the table.
    #[inline]
    pub fn get(&self, n: i64) -> f64 {
        let k = n.unsigned_abs() as usize;
        if k >= self.values.len() {
            return 0.0;
        }
        let v = self.values[k];
        if n < 0 && k % 2 == 1 {
            -v
        } else {
            v
        }
    }
}

/// Single evaluation of `J_n(x)`.
pub fn bessel_j(n: i64, x: f64) -> f64 {
    let k = n.unsigned_abs() as usize;
    BesselTable::new(x, k + 1).get(n)
}
