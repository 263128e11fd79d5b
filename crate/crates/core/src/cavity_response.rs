//! Bessel-series response of the probe cavity frequency-modulated by a large
//! mechanical oscillation at `w_1`, a small second-mode oscillation at `w_2` and
//! the phase-modulation calibration tone at `w_b`.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;

use crate::bessel::{BesselTable, Truncation};
use crate::error::Result;
use crate::model::{SystemParams, PROBE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ToneId {
    Dc,
    Omega1,
    Omega2,
    /// `2 w_1 - w_2`
    OmegaSm,
    OmegaB,
    /// `2 w_1 - w_b`
    OmegaSb,
}

impl ToneId {
    pub const ALL: [ToneId; 6] = [
        ToneId::Dc,
        ToneId::Omega1,
        ToneId::Omega2,
        ToneId::OmegaSm,
        ToneId::OmegaB,
        ToneId::OmegaSb,
    ];

    /// Angular frequency of the tone [rad/s].
    pub fn frequency(self, p: &SystemParams) -> f64 {
        let w1 = p.mechanical[0].omega;
        let w2 = p.mechanical[1].omega;
        let wb = p.modulation.omega_b;
        match self {
            ToneId::Dc => 0.0,
            ToneId::Omega1 => w1,
            ToneId::Omega2 => w2,
            ToneId::OmegaSm => 2.0 * w1 - w2,
            ToneId::OmegaB => wb,
            ToneId::OmegaSb => 2.0 * w1 - wb,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ToneId::Dc => "dc",
            ToneId::Omega1 => "w1",
            ToneId::Omega2 => "w2",
            ToneId::OmegaSm => "wsm",
            ToneId::OmegaB => "wb",
            ToneId::OmegaSb => "wsb",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Reflection coefficients `(R+, R-)` for every tone. For `Dc` the pair holds
/// `(R_DC, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectionSet {
    pairs: [(Complex64, Complex64); 6],
    pub xi: f64,
    pub g2a2: f64,
    pub mod_depth: f64,
}

impl ReflectionSet {
    pub fn get(&self, tone: ToneId) -> (Complex64, Complex64) {
        self.pairs[tone.index()]
    }

    pub fn dc(&self) -> Complex64 {
        self.pairs[ToneId::Dc.index()].0
    }
}

/// Probe-side constants shared by the series.
struct ProbeSeries {
    table: BesselTable,
    m: i64,
    w: Complex64,
    w1: f64,
}

impl ProbeSeries {
    fn new(xi: f64, p: &SystemParams, trunc: Truncation) -> Result<Self> {
        let m = trunc.resolve(xi)?;
        Ok(Self {
            // orders up to |m| + 2 appear in the sums
            table: BesselTable::new(-xi, m + 3),
            m: m as i64,
            w: p.optical[PROBE].w(),
            w1: p.mechanical[0].omega,
        })
    }

    #[inline]
    fn j(&self, n: i64) -> f64 {
        self.table.get(n)
    }

    /// `1 / (i (m w1 + shift) - W)`.
    #[inline]
    fn lorentz(&self, m: i64, shift: f64) -> Complex64 {
        1.0 / (Complex64::i() * (m as f64 * self.w1 + shift) - self.w)
    }

    /// `sum_m J_{m-n} J_m / (i (m w1 + shift) - W)`.
    fn single(&self, n: i64, shift: f64) -> Complex64 {
        (-self.m..=self.m)
            .map(|m| self.lorentz(m, shift) * (self.j(m - n) * self.j(m)))
            .sum()
    }

    /// `sum_m J_{m-n} J_m / (i m w1 - W) / (i (m w1 + shift) - W)`.
    fn double(&self, n: i64, shift: f64) -> Complex64 {
        (-self.m..=self.m)
            .map(|m| self.lorentz(m, 0.0) * self.lorentz(m, shift) * (self.j(m - n) * self.j(m)))
            .sum()
    }
}

/// Coefficient of `exp(i n (w1 t + phi1))` in `C_b(xi)`:
/// `sum_m J_{m-n}(-xi) J_m(-xi) / (i (m w1 + b w_b) - W)`.
pub fn response_harmonic(xi: f64, b: i64, n: i64, p: &SystemParams, trunc: Truncation) -> Result<Complex64> {
    let s = ProbeSeries::new(xi, p, trunc)?;
    Ok(s.single(n, b as f64 * p.modulation.omega_b))
}

/// All six tone pairs of the reflected probe field.
pub fn reflection_set(xi: f64, g2a2: f64, p: &SystemParams, trunc: Truncation) -> Result<ReflectionSet> {
    let s = ProbeSeries::new(xi, p, trunc)?;
    let beta = p.modulation.depth;
    let wb = p.modulation.omega_b;
    let w2 = p.mechanical[1].omega;
    let two_kin = 2.0 * p.optical[PROBE].kappa_in;
    let jb = BesselTable::new(-beta, 2);
    let j0b = jb.get(0);
    let pert = Complex64::i() * (g2a2 * FRAC_1_SQRT_2);
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);

    let mut pairs = [(zero, zero); 6];
    pairs[ToneId::Dc.index()] = ((-one + s.single(0, 0.0) * two_kin) * j0b, zero);

    // n = +-1 harmonics: J_m J_{m-+1}, i.e. n = +-1 in J_{m-n}
    pairs[ToneId::Omega1.index()] = (
        s.single(1, 0.0) * (two_kin * j0b),
        s.single(-1, 0.0) * (two_kin * j0b),
    );

    pairs[ToneId::Omega2.index()] = (
        s.double(0, w2) * pert * (two_kin * j0b),
        s.double(0, -w2) * pert * (two_kin * j0b),
    );

    pairs[ToneId::OmegaSm.index()] = (
        s.double(2, -w2) * pert * (two_kin * j0b),
        s.double(-2, w2) * pert * (two_kin * j0b),
    );

    pairs[ToneId::OmegaB.index()] = (
        (-one + s.single(0, wb) * two_kin) * jb.get(1),
        (-one + s.single(0, -wb) * two_kin) * jb.get(-1),
    );

    pairs[ToneId::OmegaSb.index()] = (
        s.single(2, -wb) * (two_kin * jb.get(-1)),
        s.single(-2, wb) * (two_kin * jb.get(1)),
    );

    Ok(ReflectionSet { pairs, xi, g2a2, mod_depth: beta })
}

/// Phases of the mechanical tones in the time-domain reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TonePhases {
    pub phi1: f64,
    pub phi2: f64,
    pub phi_sm: f64,
    pub phi_sb: f64,
}

/// Six-tone superposition `R(t) = R_DC + sum R+ e^{i(w t + phi)} + R- e^{-i(w t + phi)}`.
pub fn reconstruct_reflection_time_series(
    rs: &ReflectionSet,
    phases: &TonePhases,
    p: &SystemParams,
    t: &[f64],
) -> Vec<Complex64> {
    let terms: Vec<(f64, f64, Complex64, Complex64)> = [
        (ToneId::Omega1, phases.phi1),
        (ToneId::Omega2, phases.phi2),
        (ToneId::OmegaSm, phases.phi_sm),
        (ToneId::OmegaB, 0.0),
        (ToneId::OmegaSb, phases.phi_sb),
    ]
    .iter()
    .map(|&(tone, phi)| {
        let (rp, rm) = rs.get(tone);
        (tone.frequency(p), phi, rp, rm)
    })
    .collect();
    let dc = rs.dc();
    t.iter()
        .map(|&tt| {
            let mut r = dc;
            for &(w, phi, rp, rm) in &terms {
                let e = Complex64::from_polar(1.0, w * tt + phi);
                r += rp * e + rm * e.conj();
            }
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{reference_params, TWO_PI};

    fn resonant() -> SystemParams {
        reference_params().with_probe_detuning(0.0).unwrap()
    }

    #[test]
    fn bare_lorentzian() {
        let p = reference_params();
        let c = response_harmonic(0.0, 0, 0, &p, Truncation::Auto).unwrap();
        let o = p.probe();
        let expected = 1.0 / Complex64::new(o.kappa(), -o.detuning);
        assert!((c - expected).norm() < 1e-15 * expected.norm());
        for n in [-3, -1, 1, 2] {
            assert_eq!(response_harmonic(0.0, 0, n, &p, Truncation::Auto).unwrap().norm(), 0.0);
        }
    }

    #[test]
    fn resonant_dc_reflection() {
        let mut p = resonant();
        p.modulation.depth = 0.0;
        let rs = reflection_set(0.0, 0.0, &p, Truncation::Auto).unwrap();
        let o = p.probe();
        let expected = -1.0 + 2.0 * o.kappa_in / o.kappa();
        assert!((rs.dc() - expected).norm() < 1e-14);
        assert!((expected + 0.751).abs() < 1e-3);
    }

    #[test]
    fn linear_regime_w1_pair() {
        let p = resonant();
        let xi = 1e-3;
        let rs = reflection_set(xi, 0.0, &p, Truncation::Auto).unwrap();
        let (rp, rm) = rs.get(ToneId::Omega1);
        assert!((rp + rm.conj()).norm() < 1e-9 * rp.norm());
        let o = p.probe();
        let w1 = p.mechanical[0].omega;
        let j0b = crate::bessel::bessel_j(0, p.modulation.depth);
        // m = 0, 1 terms: (xi/2) 2 kin [1/kappa - 1/(kappa + i w1)]
        let formula = (xi / 2.0) * (2.0 * o.kappa_in / o.kappa())
            * (Complex64::i() * w1 / Complex64::new(o.kappa(), w1))
            * j0b;
        assert!((rp / formula - 1.0).norm() < 1e-3, "{rp} {formula}");
    }

    #[test]
    fn passivity_of_dc_reflection() {
        let base = reference_params();
        let kappa = base.probe().kappa();
        for k in 0..=10 {
            let delta = (-5.0 + k as f64) * kappa;
            let p = base.with_probe_detuning(delta).unwrap();
            for x in 0..=12 {
                let xi = 0.25 * x as f64;
                let rs = reflection_set(xi, 0.0, &p, Truncation::Auto).unwrap();
                assert!(rs.dc().norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn first_order_tones_linear_in_g2a2() {
        let p = reference_params();
        let a = reflection_set(1.05, 1.0e4, &p, Truncation::Auto).unwrap();
        let b = reflection_set(1.05, 2.0e4, &p, Truncation::Auto).unwrap();
        for tone in [ToneId::Omega2, ToneId::OmegaSm] {
            let (ap, am) = a.get(tone);
            let (bp, bm) = b.get(tone);
            assert!((bp - ap * 2.0).norm() <= 1e-15 * bp.norm());
            assert!((bm - am * 2.0).norm() <= 1e-15 * bm.norm());
        }
    }

    #[test]
    fn calibration_tone_scales_with_bessel_of_depth() {
        let mut p = reference_params();
        let mut reference = None;
        for beta in [0.005, 0.02, 0.05] {
            p.modulation.depth = beta;
            let rs = reflection_set(1.05, 0.0, &p, Truncation::Auto).unwrap();
            let (rp, rm) = rs.get(ToneId::OmegaB);
            let jp = crate::bessel::bessel_j(1, -beta);
            let jm = crate::bessel::bessel_j(-1, -beta);
            let v = (rp / jp, rm / jm);
            match reference {
                None => reference = Some(v),
                Some((a, b)) => {
                    assert!((v.0 - a).norm() < 1e-14 * a.norm());
                    assert!((v.1 - b).norm() < 1e-14 * b.norm());
                }
            }
        }
    }

    #[test]
    fn sidebands_appear_with_amplitude() {
        let p = reference_params();
        let small = reflection_set(0.0, 1e4, &p, Truncation::Auto).unwrap();
        let big = reflection_set(1.05, 1e4, &p, Truncation::Auto).unwrap();
        for tone in [ToneId::OmegaSm, ToneId::OmegaSb] {
            assert!(small.get(tone).0.norm() == 0.0 && small.get(tone).1.norm() == 0.0);
            assert!(big.get(tone).0.norm() > 0.0 && big.get(tone).1.norm() > 0.0);
        }
    }

    #[test]
    fn tone_frequencies_distinct() {
        let p = reference_params();
        let f: Vec<f64> = ToneId::ALL.iter().map(|t| t.frequency(&p)).collect();
        for i in 0..6 {
            for j in 0..i {
                assert!((f[i] - f[j]).abs() > TWO_PI * 100.0);
            }
        }
    }

    #[test]
    fn hermitian_pair_reconstruction() {
        let p = reference_params();
        let zero = Complex64::new(0.0, 0.0);
        let rp = Complex64::new(0.3, -0.4);
        let mut pairs = [(zero, zero); 6];
        pairs[ToneId::Omega1.index()] = (rp, rp.conj());
        let rs = ReflectionSet { pairs, xi: 0.0, g2a2: 0.0, mod_depth: 0.0 };
        let t: Vec<f64> = (0..2000).map(|k| k as f64 * 1e-8).collect();
        let r = reconstruct_reflection_time_series(&rs, &TonePhases::default(), &p, &t);
        assert!(r.iter().all(|z| z.im.abs() < 1e-15));
        let max = r.iter().map(|z| z.re).fold(f64::MIN, f64::max);
        assert!((max - 2.0 * rp.norm()).abs() < 1e-3);

        let mut pairs = [(zero, zero); 6];
        pairs[ToneId::Dc.index()] = (Complex64::new(-0.7, 0.1), zero);
        let rs = ReflectionSet { pairs, xi: 0.0, g2a2: 0.0, mod_depth: 0.0 };
        let r = reconstruct_reflection_time_series(&rs, &TonePhases::default(), &p, &t);
        assert!(r.iter().all(|z| *z == Complex64::new(-0.7, 0.1)));
    }

    #[test]
    fn reconstruction_spectrum_has_six_lines() {
        use rustfft::FftPlanner;
        let p = reference_params();
        let rs = reflection_set(1.05, 2e4, &p, Truncation::Auto).unwrap();
        // 1 Hz resolution over 1 s at 2 MS/s; tones are integer Hz
        let fs = 2.0e6;
        let n = 2_000_000usize;
        let t: Vec<f64> = (0..n).map(|k| k as f64 / fs).collect();
        let mut r = reconstruct_reflection_time_series(&rs, &TonePhases::default(), &p, &t);
        FftPlanner::new().plan_fft_forward(n).process(&mut r);
        let mut expected: Vec<usize> = Vec::new();
        for tone in ToneId::ALL {
            let f = (tone.frequency(&p) / TWO_PI).round() as usize;
            expected.push(f);
            if f != 0 {
                expected.push(n - f);
            }
        }
        let total: f64 = r.iter().map(|z| z.norm_sqr()).sum();
        let in_lines: f64 = expected.iter().map(|&k| r[k].norm_sqr()).sum();
        assert!(1.0 - in_lines / total < 1e-12);
        let floor = r
            .iter()
            .enumerate()
            .filter(|(k, _)| !expected.contains(k))
            .map(|(_, z)| z.norm())
            .fold(0.0, f64::max);
        let weakest = expected.iter().map(|&k| r[k].norm()).fold(f64::MAX, f64::min);
        assert!(weakest > 1e3 * floor);
    }

    /// Periodic steady state of `a' = (W - i b w_b + i xi w1 cos(w1 t)) a + 1`
    /// by RK4 and the one-period monodromy, projected onto harmonics.
    fn ode_harmonics(xi: f64, b: i64, p: &SystemParams, steps: usize, nmax: i64) -> Vec<Complex64> {
        let w1 = p.mechanical[0].omega;
        let lin = p.probe().w() - Complex64::i() * (b as f64 * p.modulation.omega_b);
        let period = TWO_PI / w1;
        let h = period / steps as f64;
        let f = |t: f64, a: Complex64, src: f64| (lin + Complex64::i() * (xi * w1 * (w1 * t).cos())) * a + src;
        let run = |a0: Complex64, src: f64, record: bool| {
            let mut a = a0;
            let mut out = Vec::new();
            for k in 0..steps {
                let t = k as f64 * h;
                if record {
                    out.push(a);
                }
                let k1 = f(t, a, src);
                let k2 = f(t + h / 2.0, a + k1 * (h / 2.0), src);
                let k3 = f(t + h / 2.0, a + k2 * (h / 2.0), src);
                let k4 = f(t + h, a + k3 * h, src);
                a += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            (a, out)
        };
        let (particular, _) = run(Complex64::new(0.0, 0.0), 1.0, false);
        let (monodromy, _) = run(Complex64::new(1.0, 0.0), 0.0, false);
        let a0 = particular / (1.0 - monodromy);
        let (_, samples) = run(a0, 1.0, true);
        (-nmax..=nmax)
            .map(|n| {
                samples
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * Complex64::from_polar(1.0, -(n as f64) * TWO_PI * k as f64 / steps as f64))
                    .sum::<Complex64>()
                    / steps as f64
            })
            .collect()
    }

    #[test]
    fn harmonics_match_direct_integration() {
        let p = reference_params();
        for &(xi, b) in &[(0.5, 0i64), (1.0, 1), (1.66, -1)] {
            let ode = ode_harmonics(xi, b, &p, 4000, 4);
            let norm: f64 = ode.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            for (k, n) in (-4..=4).enumerate() {
                let series = response_harmonic(xi, b, n, &p, Truncation::Auto).unwrap();
                assert!((series - ode[k]).norm() < 1e-6 * norm, "xi={xi} b={b} n={n}: {series} vs {}", ode[k]);
            }
        }
    }
}
