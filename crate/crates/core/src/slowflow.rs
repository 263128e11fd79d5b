//! Slowly-varying amplitude description of the two mechanical modes: auxiliary
//! functions, nonlinear coefficients, amplitude-equation integration, limit
//! cycles, thresholds, the pre-synchronized second-mode state and the
//! synchronization measure.
//!
//! Mechanical amplitudes are written `beta_j = A_j exp(-i w_ref t)`; unless
//! stated otherwise `w_ref = w_1`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::bessel::{BesselTable, Truncation};
use crate::error::{Error, Result};
use crate::langevin::ThermalNoise;
use crate::model::{SystemParams, TWO_PI};

const DIVERGENCE_LIMIT: f64 = 1e12;

/// Kernel cache beyond which weights are computed on the fly.
const KERNEL_CAP: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearCoeffs {
    pub d1: Complex64,
    pub d2: Complex64,
    pub d12: Complex64,
}

/// Bright amplitude `(g1 A1 + g2 A2) / sqrt(g1^2 + g2^2)` in polar form.
pub fn bright_amplitude(a1: Complex64, a2: Complex64, g1: f64, g2: f64) -> Result<(f64, f64)> {
    let gb = g1.hypot(g2);
    if gb == 0.0 {
        return Err(Error::invalid("bright amplitude undefined: both couplings are zero"));
    }
    let ab = (a1 * g1 + a2 * g2) / gb;
    Ok((ab.norm(), ab.arg()))
}

/// Precomputed denominators of the `Sigma` series for one optical mode:
/// `1 / ([i n w - W][-i (n+1) w - W*])`.
#[derive(Debug, Clone)]
pub struct SigmaKernel {
    omega_ref: f64,
    w: Complex64,
    weights: Vec<Complex64>,
}

impl SigmaKernel {
    pub fn new(omega_ref: f64, w: Complex64) -> Self {
        let weights = (-(KERNEL_CAP as i64)..=KERNEL_CAP as i64)
            .map(|n| Self::raw_weight(omega_ref, w, n))
            .collect();
        Self { omega_ref, w, weights }
    }

    fn raw_weight(omega_ref: f64, w: Complex64, n: i64) -> Complex64 {
        let i = Complex64::i();
        let a = i * (n as f64 * omega_ref) - w;
        let b = -i * ((n + 1) as f64 * omega_ref) - w.conj();
        1.0 / (a * b)
    }

    #[inline]
    fn weight(&self, n: i64) -> Complex64 {
        let k = n + KERNEL_CAP as i64;
        if k >= 0 && (k as usize) < self.weights.len() {
            self.weights[k as usize]
        } else {
            Self::raw_weight(self.omega_ref, self.w, n)
        }
    }

    /// `Sigma(xi) = sum_n J_n(-xi) J_{n+1}(-xi) / ([i n w - W][-i (n+1) w - W*])`.
    pub fn sigma(&self, xi: f64, trunc: Truncation) -> Result<Complex64> {
        let m = trunc.resolve(xi)?;
        let table = BesselTable::new(-xi, m + 1);
        let mut s = Complex64::new(0.0, 0.0);
        for n in -(m as i64)..=m as i64 {
            s += self.weight(n) * (table.get(n) * table.get(n + 1));
        }
        Ok(s)
    }

    /// `Sigma(xi) / xi`, finite at `xi = 0`.
    pub fn sigma_over_xi(&self, xi: f64, trunc: Truncation) -> Result<Complex64> {
        if xi.abs() < 1e-12 {
            trunc.resolve(0.0)?;
            // J_0(-x) J_1(-x) ~ -x/2 and J_{-1}(-x) J_0(-x) ~ x/2
            return Ok(-0.5 * self.weight(0) + 0.5 * self.weight(-1));
        }
        Ok(self.sigma(xi, trunc)? / xi)
    }
}

/// `Sigma(xi; kappa, Delta)` with `W = i Delta - kappa`.
pub fn sigma(xi: f64, kappa: f64, delta: f64, omega_ref: f64, trunc: Truncation) -> Result<Complex64> {
    SigmaKernel::new(omega_ref, Complex64::new(-kappa, delta)).sigma(xi, trunc)
}

/// Auxiliary function `F = (E^2 / |A^b|) Sigma(xi)` with `xi = 2 g_b |A^b| / w_ref`,
/// evaluated as `E^2 (2 g_b / w_ref) Sigma(xi)/xi` so that `|A^b| -> 0` is regular.
pub fn auxiliary_f(
    e: f64,
    ab: f64,
    omega_ref: f64,
    w: Complex64,
    g_b: f64,
    trunc: Truncation,
) -> Result<Complex64> {
    if omega_ref <= 0.0 {
        return Err(Error::invalid("reference frequency must be positive"));
    }
    let xi = 2.0 * g_b * ab / omega_ref;
    let s = SigmaKernel::new(omega_ref, w).sigma_over_xi(xi, trunc)?;
    Ok(e * e * (2.0 * g_b / omega_ref) * s)
}

/// Slow-flow model with cached per-optical-mode kernels.
#[derive(Debug, Clone)]
pub struct SlowFlow {
    pub omega_ref: f64,
    pub truncation: Truncation,
    /// `g_ij`, optical `i`, mechanical `j`.
    g: [[f64; 2]; 2],
    e2: [f64; 2],
    kernels: [SigmaKernel; 2],
    gamma: [f64; 2],
}

impl SlowFlow {
    pub fn new(p: &SystemParams, omega_ref: f64, truncation: Truncation) -> Self {
        let g = [
            [p.coupling(0, 0), p.coupling(0, 1)],
            [p.coupling(1, 0), p.coupling(1, 1)],
        ];
        let e2 = [p.optical[0].drive_rate().powi(2), p.optical[1].drive_rate().powi(2)];
        let kernels = [
            SigmaKernel::new(omega_ref, p.optical[0].w()),
            SigmaKernel::new(omega_ref, p.optical[1].w()),
        ];
        Self {
            omega_ref,
            truncation,
            g,
            e2,
            kernels,
            gamma: [p.mechanical[0].gamma, p.mechanical[1].gamma],
        }
    }

    /// `F_i / g_i^b = E_i^2 (2 / w_ref) Sigma(xi_i)/xi_i`.
    fn f_over_gb(&self, i: usize, ab: f64, gb: f64) -> Result<Complex64> {
        let xi = 2.0 * gb * ab / self.omega_ref;
        let s = self.kernels[i].sigma_over_xi(xi, self.truncation)?;
        Ok(self.e2[i] * (2.0 / self.omega_ref) * s)
    }

    /// `d1, d2, d12` at the current amplitudes.
    pub fn coeffs(&self, a1: Complex64, a2: Complex64) -> Result<NonlinearCoeffs> {
        let mut c = NonlinearCoeffs {
            d1: Complex64::new(0.0, 0.0),
            d2: Complex64::new(0.0, 0.0),
            d12: Complex64::new(0.0, 0.0),
        };
        for i in 0..2 {
            let [gi1, gi2] = self.g[i];
            let gb = gi1.hypot(gi2);
            if gb == 0.0 || self.e2[i] == 0.0 {
                continue;
            }
            let (ab, _) = bright_amplitude(a1, a2, gi1, gi2)?;
            let f = self.f_over_gb(i, ab, gb)?;
            c.d1 += f * (gi1 * gi1);
            c.d2 += f * (gi2 * gi2);
            c.d12 += f * (gi1 * gi2);
        }
        Ok(c)
    }

    /// Self coefficient `d_j` with only mode `j` excited at real amplitude `amp`.
    pub fn self_coeff(&self, mode: usize, amp: f64) -> Result<Complex64> {
        let mut d = Complex64::new(0.0, 0.0);
        for i in 0..2 {
            let gij = self.g[i][mode];
            let gb = self.g[i][0].hypot(self.g[i][1]);
            if gij == 0.0 || self.e2[i] == 0.0 {
                continue;
            }
            let ab = gij * amp / gb;
            d += self.f_over_gb(i, ab, gb)? * (gij * gij);
        }
        Ok(d)
    }

    /// Effective damping of mode `mode` when it alone oscillates with
    /// modulation index `xi = 2 g_j |A_j| / w_ref`.
    pub fn gamma_eff(&self, mode: usize, xi: f64, reference_coupling: f64) -> Result<f64> {
        let amp = xi * self.omega_ref / (2.0 * reference_coupling);
        Ok(self.gamma[mode] + self.self_coeff(mode, amp)?.im)
    }
}

/// Nonlinear coefficients with `w_ref = w_1`.
pub fn nonlinear_coeffs(
    a1: Complex64,
    a2: Complex64,
    p: &SystemParams,
    trunc: Truncation,
) -> Result<NonlinearCoeffs> {
    SlowFlow::new(p, p.mechanical[0].omega, trunc).coeffs(a1, a2)
}

/// Effective damping `gamma_1 [1 + (g_1 / gamma_1 |A_1|) Im(E_1^2 Sigma_1 + E_2^2 Sigma_2)]`.
pub fn gamma1_eff(xi: f64, p: &SystemParams, trunc: Truncation) -> Result<f64> {
    gamma_eff(p, 0, xi, trunc)
}

/// Effective damping of either mode, referenced to its own frequency.
pub fn gamma_eff(p: &SystemParams, mode: usize, xi: f64, trunc: Truncation) -> Result<f64> {
    if xi < 0.0 {
        return Err(Error::invalid("xi must be non-negative"));
    }
    let m = &p.mechanical[mode];
    SlowFlow::new(p, m.omega, trunc).gamma_eff(mode, xi, m.reference_coupling())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitCycleRoot {
    pub xi: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChosenRoot {
    pub xi: f64,
    /// Dimensionless amplitude `I^st = xi w / 2 g`.
    pub amplitude: f64,
    /// `q^st = 2 I^st x_zpf` [m].
    pub displacement: f64,
    /// `-Re d` at the root [rad/s].
    pub delta_omega_eff: f64,
    pub d: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitCycleSolution {
    pub mode: usize,
    pub roots: Vec<LimitCycleRoot>,
    /// Smallest positive stable root, if any.
    pub chosen: Option<ChosenRoot>,
}

/// Root search settings.
#[derive(Debug, Clone, Copy)]
pub struct RootSearch {
    pub xi_max: f64,
    pub grid: usize,
    pub rel_tol: f64,
    pub slope_step: f64,
}

impl Default for RootSearch {
    fn default() -> Self {
        Self { xi_max: 5.0, grid: 2000, rel_tol: 1e-8, slope_step: 1e-4 }
    }
}

/// Limit cycle of mode 1 with `w_ref = w_1`.
pub fn limit_cycle_solve(p: &SystemParams, xi_max: f64, trunc: Truncation) -> Result<LimitCycleSolution> {
    limit_cycle_solve_mode(p, 0, RootSearch { xi_max, ..RootSearch::default() }, trunc)
}

/// All sign changes of `gamma_eff(xi)` on `(0, xi_max]`, refined by bisection.
pub fn limit_cycle_solve_mode(
    p: &SystemParams,
    mode: usize,
    search: RootSearch,
    trunc: Truncation,
) -> Result<LimitCycleSolution> {
    if search.xi_max <= 0.0 || search.grid < 2 {
        return Err(Error::invalid("root search needs xi_max > 0 and at least two grid points"));
    }
    let m = &p.mechanical[mode];
    let g = m.reference_coupling();
    if g == 0.0 {
        return Ok(LimitCycleSolution { mode, roots: Vec::new(), chosen: None });
    }
    let flow = SlowFlow::new(p, m.omega, trunc);
    let f = |xi: f64| flow.gamma_eff(mode, xi, g);

    let step = search.xi_max / search.grid as f64;
    let mut roots = Vec::new();
    let mut x0 = 0.0;
    let mut f0 = f(0.0)?;
    for k in 1..=search.grid {
        let x1 = k as f64 * step;
        let f1 = f(x1)?;
        let root = if f1 == 0.0 {
            Some(x1)
        } else if f0 != 0.0 && f0.signum() != f1.signum() {
            let (mut lo, mut hi, mut flo) = (x0, x1, f0);
            while hi - lo > search.rel_tol * hi {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid)?;
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            Some(0.5 * (lo + hi))
        } else {
            None
        };
        if let Some(xi) = root {
            let h = search.slope_step;
            let slope = (f(xi + h)? - f((xi - h).max(0.0))?) / (xi + h - (xi - h).max(0.0));
            roots.push(LimitCycleRoot { xi, stable: slope > 0.0 });
        }
        x0 = x1;
        f0 = f1;
    }

    let chosen = match roots.iter().find(|r| r.stable) {
        Some(r) => {
            let amplitude = r.xi * m.omega / (2.0 * g);
            let d = flow.self_coeff(mode, amplitude)?;
            Some(ChosenRoot {
                xi: r.xi,
                amplitude,
                displacement: m.displacement(amplitude),
                delta_omega_eff: -d.re,
                d,
            })
        }
        None => None,
    };
    Ok(LimitCycleSolution { mode, roots, chosen })
}

fn root_count(p: &SystemParams, mode: usize, power: f64, search: RootSearch, trunc: Truncation) -> Result<usize> {
    let q = p.with_pump_power(power)?;
    Ok(limit_cycle_solve_mode(&q, mode, search, trunc)?.roots.len())
}

/// Smallest pump power at which mode `mode` has a limit-cycle root.
pub fn threshold_power(p: &SystemParams, mode: usize, trunc: Truncation) -> Result<f64> {
    threshold_power_with(p, mode, RootSearch::default(), trunc)
}

pub fn threshold_power_with(p: &SystemParams, mode: usize, search: RootSearch, trunc: Truncation) -> Result<f64> {
    let has_root = |pw: f64| -> Result<bool> { Ok(root_count(p, mode, pw, search, trunc)? > 0) };
    let mut hi = 1e-8;
    while !has_root(hi)? {
        hi *= 2.0;
        if hi > 1.0 {
            return Err(Error::NoSolution(format!(
                "mode {} has no limit cycle for pump powers up to 1 W",
                mode + 1
            )));
        }
    }
    let mut lo = if hi > 1e-8 { hi / 2.0 } else { 0.0 };
    while hi - lo > 1e-7 * hi {
        let mid = 0.5 * (lo + hi);
        if has_root(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest pump power in `[p_lo, p_hi]` with at least two positive roots for
/// mode 1, from a geometric scan of `n_scan` points refined by bisection to
/// `rel_tol`. `None` when no such power lies in range.
pub fn multistability_boundary(
    p: &SystemParams,
    p_lo: f64,
    p_hi: f64,
    n_scan: usize,
    rel_tol: f64,
    search: RootSearch,
    trunc: Truncation,
) -> Result<Option<f64>> {
    if !(p_lo > 0.0 && p_hi > p_lo && n_scan >= 2) {
        return Err(Error::invalid("power range must satisfy 0 < lo < hi with at least two scan points"));
    }
    let ratio = (p_hi / p_lo).powf(1.0 / (n_scan - 1) as f64);
    let powers: Vec<f64> = (0..n_scan).map(|k| p_lo * ratio.powi(k as i32)).collect();
    let counts: Vec<usize> = powers
        .par_iter()
        .map(|&pw| root_count(p, 0, pw, search, trunc))
        .collect::<Result<_>>()?;
    let Some(k) = counts.iter().position(|&c| c >= 2) else {
        return Ok(None);
    };
    if k == 0 {
        return Ok(Some(powers[0]));
    }
    let (mut lo, mut hi) = (powers[k - 1], powers[k]);
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if root_count(p, 0, mid, search, trunc)? >= 2 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Root count over a list of pump powers (mode 1), evaluated in parallel.
pub fn power_scan(
    p: &SystemParams,
    powers: &[f64],
    search: RootSearch,
    trunc: Truncation,
) -> Result<Vec<(f64, LimitCycleSolution)>> {
    powers
        .par_iter()
        .map(|&pw| {
            let q = p.with_pump_power(pw)?;
            Ok((pw, limit_cycle_solve_mode(&q, 0, search, trunc)?))
        })
        .collect()
}

/// Stationary state of the second mode driven by the first mode's limit cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondModeSteady {
    /// `|i d12 I1 / (gamma2_eff + i dw2bar_eff)|`, dimensionless.
    pub sync_amplitude: f64,
    /// Sync amplitude as a displacement `2 |A| x_zpf` [m].
    pub sync_displacement: f64,
    pub gamma2_eff: f64,
    pub delta_omega2_eff: f64,
    pub delta_omega2_bar_eff: f64,
    /// `sqrt(gamma2 / gamma2_eff)`.
    pub enhancement: f64,
    /// Thermal displacement scaled by the enhancement [m].
    pub thermal_amplitude: f64,
    pub d: NonlinearCoeffs,
    /// `|d12|^2 I1^2` against `gamma2 gamma2_eff nbar2`.
    pub criterion_lhs: f64,
    pub criterion_rhs: f64,
    /// Synchronized to thermal power ratio
    /// `|sync|^2 / ((nbar2 + 1/2) gamma2 / gamma2_eff)`.
    pub sync_to_thermal: f64,
    /// Full synchronization: the synchronized power exceeds the thermal one
    /// by at least a factor of ten.
    pub fully_synchronized: bool,
}

pub fn second_mode_steady(p: &SystemParams, lc: &LimitCycleSolution, trunc: Truncation) -> Result<SecondModeSteady> {
    let root = lc
        .chosen
        .ok_or_else(|| Error::NoSolution("no stable limit cycle of the first mode".into()))?;
    if lc.mode != 0 {
        return Err(Error::invalid("second-mode state needs the first mode's limit cycle"));
    }
    let i1 = root.amplitude;
    let flow = SlowFlow::new(p, p.mechanical[0].omega, trunc);
    let d = flow.coeffs(Complex64::new(i1, 0.0), Complex64::new(0.0, 0.0))?;
    let m2 = &p.mechanical[1];
    let gamma2_eff = m2.gamma + d.d2.im;
    if gamma2_eff <= 0.0 {
        return Err(Error::NoSolution(format!(
            "second mode unstable: gamma2_eff = {gamma2_eff:.4e} rad/s"
        )));
    }
    let dw = p.delta_omega();
    let delta_omega2_bar_eff = dw + (d.d1 - d.d2).re;
    let delta_omega2_eff = dw - d.d2.re;
    let sync = Complex64::i() * d.d12 * i1 / Complex64::new(gamma2_eff, delta_omega2_bar_eff);
    let enhancement = (m2.gamma / gamma2_eff).sqrt();
    let nbar2 = m2.nbar();
    let thermal_power = (nbar2 + 0.5) * m2.gamma / gamma2_eff;
    let sync_to_thermal = sync.norm_sqr() / thermal_power;
    Ok(SecondModeSteady {
        sync_amplitude: sync.norm(),
        sync_displacement: m2.displacement(sync.norm()),
        gamma2_eff,
        delta_omega2_eff,
        delta_omega2_bar_eff,
        enhancement,
        thermal_amplitude: m2.thermal_displacement() * enhancement,
        d,
        criterion_lhs: d.d12.norm_sqr() * i1 * i1,
        criterion_rhs: m2.gamma * gamma2_eff * nbar2,
        sync_to_thermal,
        fully_synchronized: sync_to_thermal >= 10.0,
    })
}

/// Slow amplitudes sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowTrajectory {
    pub t: Vec<f64>,
    pub a1: Vec<Complex64>,
    pub a2: Vec<Complex64>,
    pub omega_ref: f64,
    pub dt: f64,
    pub decimation: usize,
    pub seed: u64,
}

impl SlowTrajectory {
    pub fn phases(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.a1.iter().map(|a| a.arg()).collect(),
            self.a2.iter().map(|a| a.arg()).collect(),
        )
    }
}

/// Integration settings for the amplitude equations.
#[derive(Debug, Clone, Copy)]
pub struct SlowFlowSettings {
    pub dt: f64,
    pub duration: f64,
    pub truncation: Truncation,
    pub decimation: usize,
    /// Pump power switched on at `t = 0`; `None` keeps the configured power.
    pub pump_power: Option<f64>,
}

impl Default for SlowFlowSettings {
    fn default() -> Self {
        Self {
            dt: 2e-4,
            duration: 10.0,
            truncation: Truncation::Auto,
            decimation: 1,
            pump_power: None,
        }
    }
}

/// Largest admissible slow-flow step, `0.02 / max(gamma_1, gamma_2)`.
pub fn slow_dt_limit(p: &SystemParams) -> f64 {
    0.02 / p.mechanical[0].gamma.max(p.mechanical[1].gamma)
}

#[inline]
fn phi1(z: Complex64) -> Complex64 {
    // (e^z - 1) / z
    if z.norm() < 1e-6 {
        Complex64::new(1.0, 0.0) + z * 0.5 + z * z / 6.0
    } else {
        (z.exp() - 1.0) / z
    }
}

#[inline]
fn noise_gain(re_l: f64, dt: f64) -> f64 {
    // sqrt((e^{2 Re L dt} - 1) / (2 Re L dt))
    let x = 2.0 * re_l * dt;
    if x.abs() < 1e-8 {
        (1.0 + 0.5 * x).sqrt()
    } else {
        (x.exp_m1() / x).sqrt()
    }
}

/// Integrates the amplitude equations with `w_ref = w_1`, calling `observe`
/// with `(t, A1, A2)` at every step (including `t = 0`).
///
/// Each step advances the linear part `-gamma_j - i dw_j + i d_j`, with the
/// coefficients evaluated at the current amplitudes, by its exact exponential;
/// the cross coupling `i d12 A_k` is held over the step and the thermal input
/// is the exact Ornstein-Uhlenbeck increment for the frozen rate.
pub fn integrate_amplitude_eqs_with<F>(
    p: &SystemParams,
    a1_0: Complex64,
    a2_0: Complex64,
    seed: u64,
    settings: &SlowFlowSettings,
    mut observe: F,
) -> Result<()>
where
    F: FnMut(f64, Complex64, Complex64),
{
    let dt = settings.dt;
    if !(dt > 0.0) || !(settings.duration > 0.0) {
        return Err(Error::invalid("dt_slow and duration must be positive"));
    }
    let limit = slow_dt_limit(p);
    if dt > limit {
        return Err(Error::Resolution { dt, limit });
    }
    let params;
    let p = match settings.pump_power {
        Some(pw) => {
            params = p.with_pump_power(pw)?;
            &params
        }
        None => p,
    };
    let omega_ref = p.mechanical[0].omega;
    let flow = SlowFlow::new(p, omega_ref, settings.truncation);
    let dw = [0.0, p.mechanical[1].omega - omega_ref];
    let gamma = [p.mechanical[0].gamma, p.mechanical[1].gamma];
    let mut noise = [
        ThermalNoise::new(seed, 0, p.mechanical[0].nbar(), dt),
        ThermalNoise::new(seed, 1, p.mechanical[1].nbar(), dt),
    ];
    let amp = [(2.0 * gamma[0]).sqrt() * dt, (2.0 * gamma[1]).sqrt() * dt];
    let i = Complex64::i();

    let n_steps = (settings.duration / dt).round() as u64;
    let mut a = [a1_0, a2_0];
    observe(0.0, a[0], a[1]);
    for step in 1..=n_steps {
        let c = flow.coeffs(a[0], a[1])?;
        let l = [
            Complex64::new(-gamma[0], -dw[0]) + i * c.d1,
            Complex64::new(-gamma[1], -dw[1]) + i * c.d2,
        ];
        let drive = [i * c.d12 * a[1], i * c.d12 * a[0]];
        let mut next = [Complex64::new(0.0, 0.0); 2];
        for j in 0..2 {
            let z = l[j] * dt;
            next[j] = z.exp() * a[j]
                + phi1(z) * dt * drive[j]
                + noise[j].sample() * (amp[j] * noise_gain(l[j].re, dt));
        }
        a = next;
        let t = step as f64 * dt;
        if !(a[0].norm() < DIVERGENCE_LIMIT && a[1].norm() < DIVERGENCE_LIMIT) {
            return Err(Error::Divergence { time: t });
        }
        observe(t, a[0], a[1]);
    }
    Ok(())
}

/// Integrates the amplitude equations and keeps every `decimation`-th sample.
pub fn integrate_amplitude_eqs(
    p: &SystemParams,
    a1_0: Complex64,
    a2_0: Complex64,
    seed: u64,
    settings: &SlowFlowSettings,
) -> Result<SlowTrajectory> {
    let k = settings.decimation.max(1);
    let cap = ((settings.duration / settings.dt) as usize) / k + 2;
    let mut traj = SlowTrajectory {
        t: Vec::with_capacity(cap),
        a1: Vec::with_capacity(cap),
        a2: Vec::with_capacity(cap),
        omega_ref: p.mechanical[0].omega,
        dt: settings.dt,
        decimation: k,
        seed,
    };
    let mut count = 0usize;
    integrate_amplitude_eqs_with(p, a1_0, a2_0, seed, settings, |t, a1, a2| {
        if count % k == 0 {
            traj.t.push(t);
            traj.a1.push(a1);
            traj.a2.push(a2);
        }
        count += 1;
    })?;
    Ok(traj)
}

/// Sliding-window mean of `cos(theta1 - theta2)` over `window` samples,
/// centred; the output has `n - window + 1` points.
pub fn sync_measure(theta1: &[f64], theta2: &[f64], window: usize) -> Result<Vec<f64>> {
    if theta1.len() != theta2.len() {
        return Err(Error::invalid("phase series differ in length"));
    }
    if window < 10 {
        return Err(Error::invalid("synchronization window must span at least 10 samples"));
    }
    if window > theta1.len() {
        return Err(Error::invalid(format!(
            "synchronization window of {window} samples exceeds series length {}",
            theta1.len()
        )));
    }
    let c: Vec<f64> = theta1.iter().zip(theta2).map(|(a, b)| (a - b).cos()).collect();
    let mut out = Vec::with_capacity(c.len() - window + 1);
    let mut acc: f64 = c[..window].iter().sum();
    out.push(acc / window as f64);
    for k in window..c.len() {
        acc += c[k] - c[k - window];
        out.push((acc / window as f64).clamp(-1.0, 1.0));
    }
    Ok(out)
}

/// Window length in samples for a time window `dt_window` at spacing `dt`.
pub fn window_samples(dt_window: f64, dt: f64) -> usize {
    (dt_window / dt).round().max(1.0) as usize
}

/// Closed-form estimate `1 - gamma1 g2^2 / (gamma2 g1^2)` of `gamma2_eff / gamma2`.
pub fn gamma2_ratio_closed_form(p: &SystemParams) -> f64 {
    let (m1, m2) = (&p.mechanical[0], &p.mechanical[1]);
    let (g1, g2) = (m1.reference_coupling(), m2.reference_coupling());
    1.0 - m1.gamma * g2 * g2 / (m2.gamma * g1 * g1)
}

/// Frequency in Hz of an angular rate, for reports.
pub fn hz(w: f64) -> f64 {
    w / TWO_PI
}
