//! Homodyne readout of the reflected probe: LO phase lock, voltage signal,
//! normalized tone amplitudes, calibration ratios and correction factors,
//! shot-noise floor and the detuning estimate from thermal variance ratios.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::bessel::Truncation;
use crate::cavity_response::{reconstruct_reflection_time_series, reflection_set, ReflectionSet, ToneId, TonePhases};
use crate::error::{Error, Result};
use crate::model::{LoPhase, SystemParams, HBAR, PROBE, TWO_PI};
use crate::spectral::{tone_amplitude_from_psd, welch_psd, Psd, Window};

/// Proxy for the `xi -> 0` limit of the correction factors.
pub const XI_LINEAR: f64 = 1e-4;

/// Half width of the PSD integration window around each tone [Hz].
pub const TONE_HALF_WIDTH: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomodyneConfig {
    pub lo_power: f64,
    pub input_power: f64,
    pub sensitivity: f64,
    pub transimpedance: f64,
    pub termination: f64,
    pub lo_phase: LoPhase,
}

impl HomodyneConfig {
    pub fn from_params(p: &SystemParams) -> Self {
        let d = &p.detection;
        Self {
            lo_power: d.lo_power,
            input_power: p.optical[PROBE].power,
            sensitivity: d.sensitivity,
            transimpedance: d.transimpedance,
            termination: d.termination,
            lo_phase: d.lo_phase,
        }
    }

    /// `g_T S 2 sqrt(P_lo P_in)` [V].
    pub fn gain(&self) -> f64 {
        self.transimpedance * self.sensitivity * 2.0 * (self.lo_power * self.input_power).sqrt()
    }
}

/// LO phase cancelling the DC term, `Re[R_DC e^{-i phi}] = 0`, on the branch
/// `(0, pi]` so that `phi = pi/2` for real `R_DC`.
pub fn lo_phase_lock(r_dc: Complex64) -> Result<f64> {
    if r_dc.norm() == 0.0 {
        return Err(Error::invalid("LO phase undefined for vanishing DC reflection"));
    }
    if r_dc.im == 0.0 {
        return Ok(FRAC_PI_2);
    }
    // tan phi = -Re / Im
    let mut phi = (-r_dc.re / r_dc.im).atan();
    if phi <= 0.0 {
        phi += PI;
    }
    Ok(phi)
}

/// Resolved LO phase. `Auto` locks on the DC reflection of the unexcited
/// system (`xi = 0`), i.e. the lock is acquired before the pump is turned on.
pub fn resolve_lo_phase(hc: &HomodyneConfig, p: &SystemParams, trunc: Truncation) -> Result<f64> {
    match hc.lo_phase {
        LoPhase::Fixed(phi) => Ok(phi),
        LoPhase::Auto => lo_phase_lock(reflection_set(0.0, 0.0, p, trunc)?.dc()),
    }
}

/// Normalized amplitude spectral noise `|R+ - R-*| / 2`.
pub fn homodyne_asn(rp: Complex64, rm: Complex64) -> f64 {
    (rp - rm.conj()).norm() / 2.0
}

/// Half amplitude of the tone `Re[(R+ e^{iwt} + R- e^{-iwt}) e^{-i phi}]`;
/// equals [`homodyne_asn`] at `phi = pi/2`.
pub fn tone_asn(rp: Complex64, rm: Complex64, phi_lo: f64) -> f64 {
    let e = Complex64::from_polar(1.0, -phi_lo);
    (rp * e + rm.conj() * e.conj()).norm() / 2.0
}

/// `V_H(t) = g_T S 2 sqrt(P_lo P_in) Re[R(t) e^{-i phi}]`.
pub fn voltage_signal(r: &[Complex64], hc: &HomodyneConfig, phi_lo: f64) -> Vec<f64> {
    let k = hc.gain();
    let e = Complex64::from_polar(1.0, -phi_lo);
    r.iter().map(|&x| k * (x * e).re).collect()
}

/// `T1 = V(w1) beta / V(wb)`, `T2 = V(w2) beta / V(wb)`, `Tsb = V(wsm) / V(w2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    pub t1: f64,
    pub tsb: f64,
    pub t2: f64,
}

/// Which measured ratio `infer_xi` inverts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioKind {
    T1,
    Tsb,
}

impl RatioKind {
    pub fn name(self) -> &'static str {
        match self {
            RatioKind::T1 => "T1",
            RatioKind::Tsb => "Tsb",
        }
    }
}

/// Mode-2 perturbation `g2 |A2|` for a thermal-amplitude oscillation.
pub fn thermal_g2a2(p: &SystemParams) -> f64 {
    let m = &p.mechanical[1];
    m.reference_coupling() * m.thermal_displacement() / (2.0 * m.x_zpf())
}

fn ratios_of(rs: &ReflectionSet, phi_lo: f64) -> Result<Ratios> {
    let v = |tone| {
        let (rp, rm) = rs.get(tone);
        tone_asn(rp, rm, phi_lo)
    };
    let vb = v(ToneId::OmegaB);
    if !(vb > 0.0) {
        return Err(Error::invalid("calibration tone amplitude vanishes"));
    }
    let v2 = v(ToneId::Omega2);
    let beta = rs.mod_depth;
    Ok(Ratios {
        t1: v(ToneId::Omega1) * beta / vb,
        t2: v2 * beta / vb,
        tsb: if v2 > 0.0 { v(ToneId::OmegaSm) / v2 } else { f64::NAN },
    })
}

/// Ratios with the quadrature at `phi = pi/2`.
pub fn ratios(xi: f64, g2a2: f64, p: &SystemParams, trunc: Truncation) -> Result<Ratios> {
    ratios_at(xi, g2a2, p, trunc, FRAC_PI_2)
}

pub fn ratios_at(xi: f64, g2a2: f64, p: &SystemParams, trunc: Truncation, phi_lo: f64) -> Result<Ratios> {
    if !(xi >= 0.0) {
        return Err(Error::invalid("xi must be non-negative"));
    }
    ratios_of(&reflection_set(xi, g2a2, p, trunc)?, phi_lo)
}

/// Linear-regime scales `lim T1/xi` and `lim T2/(g2 |A2|)`.
fn linear_scales(p: &SystemParams, trunc: Truncation, phi_lo: f64) -> Result<(f64, f64)> {
    let r = ratios_at(XI_LINEAR, 1.0, p, trunc, phi_lo)?;
    Ok((r.t1 / XI_LINEAR, r.t2))
}

/// `N1 = (T1/xi) / lim (T1/xi)` and `N2 = T2 / lim T2`.
pub fn correction_factors(xi: f64, p: &SystemParams, trunc: Truncation) -> Result<(f64, f64)> {
    correction_factors_at(xi, p, trunc, FRAC_PI_2)
}

pub fn correction_factors_at(xi: f64, p: &SystemParams, trunc: Truncation, phi_lo: f64) -> Result<(f64, f64)> {
    if !(xi > 0.0) {
        return if xi == 0.0 { Ok((1.0, 1.0)) } else { Err(Error::invalid("xi must be non-negative")) };
    }
    let (c1, c2) = linear_scales(p, trunc, phi_lo)?;
    let r = ratios_at(xi, 1.0, p, trunc, phi_lo)?;
    Ok((r.t1 / xi / c1, r.t2 / c2))
}

/// One row of a ratio sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioRow {
    pub xi: f64,
    pub ratios: Ratios,
    pub n1: f64,
    pub n2: f64,
}

/// Ratios and correction factors over a grid of `xi`, with the thermal
/// second-mode amplitude.
pub fn ratio_sweep(xis: &[f64], p: &SystemParams, trunc: Truncation) -> Result<Vec<RatioRow>> {
    let g2a2 = thermal_g2a2(p);
    let (c1, c2) = linear_scales(p, trunc, FRAC_PI_2)?;
    xis.iter()
        .map(|&xi| {
            let ratios = ratios(xi, g2a2, p, trunc)?;
            let (n1, n2) = if xi > 0.0 {
                (ratios.t1 / xi / c1, ratios.t2 / g2a2 / c2)
            } else {
                (1.0, 1.0)
            };
            Ok(RatioRow { xi, ratios, n1, n2 })
        })
        .collect()
}

const INFER_XI_MAX: f64 = 4.0;
const INFER_GRID: usize = 800;

fn ratio_value(kind: RatioKind, xi: f64, p: &SystemParams, trunc: Truncation, phi_lo: f64) -> Result<f64> {
    let r = ratios_at(xi, 1.0, p, trunc, phi_lo)?;
    Ok(match kind {
        RatioKind::T1 => r.t1,
        RatioKind::Tsb => r.tsb,
    })
}

/// Monotone branches `[(xi_a, xi_b)]` of the ratio on `[0, INFER_XI_MAX]`,
/// with interior extrema refined by golden section.
fn monotone_branches<F>(f: &F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(f64) -> Result<f64>,
{
    let h = INFER_XI_MAX / INFER_GRID as f64;
    let vals: Vec<f64> = (0..=INFER_GRID).map(|k| f(k as f64 * h)).collect::<Result<_>>()?;
    let mut edges = vec![0.0];
    for k in 1..INFER_GRID {
        let (a, b, c) = (vals[k - 1], vals[k], vals[k + 1]);
        let is_max = b > a && b >= c;
        let is_min = b < a && b <= c;
        if is_max || is_min {
            let sign = if is_max { -1.0 } else { 1.0 };
            let (mut lo, mut hi) = ((k - 1) as f64 * h, (k + 1) as f64 * h);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            while hi - lo > 1e-9 {
                let x1 = hi - g * (hi - lo);
                let x2 = lo + g * (hi - lo);
                if sign * f(x1)? < sign * f(x2)? {
                    hi = x2;
                } else {
                    lo = x1;
                }
            }
            edges.push(0.5 * (lo + hi));
        }
    }
    edges.push(INFER_XI_MAX);
    Ok(edges.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Inverts a measured ratio for `xi` on the monotone branch containing
/// `hint`, or on the first branch when no hint is given.
pub fn infer_xi(
    measured: f64,
    kind: RatioKind,
    p: &SystemParams,
    trunc: Truncation,
    hint: Option<f64>,
) -> Result<f64> {
    infer_xi_at(measured, kind, p, trunc, hint, FRAC_PI_2)
}

pub fn infer_xi_at(
    measured: f64,
    kind: RatioKind,
    p: &SystemParams,
    trunc: Truncation,
    hint: Option<f64>,
    phi_lo: f64,
) -> Result<f64> {
    let f = |xi: f64| ratio_value(kind, xi, p, trunc, phi_lo);
    let branches = monotone_branches(&f)?;
    let (a, b) = match hint {
        None => branches[0],
        Some(h) => *branches
            .iter()
            .find(|&&(a, b)| h >= a && h <= b)
            .ok_or_else(|| Error::invalid(format!("branch hint xi = {h} outside [0, {INFER_XI_MAX}]")))?,
    };
    let (fa, fb) = (f(a)?, f(b)?);
    let (lo_v, hi_v) = (fa.min(fb), fa.max(fb));
    if !(measured >= lo_v && measured <= hi_v) {
        return Err(Error::NoSolution(format!(
            "{} = {measured:.6} outside the achievable interval [{lo_v:.6}, {hi_v:.6}] of the branch xi in [{a:.4}, {b:.4}]",
            kind.name()
        )));
    }
    let rising = fb > fa;
    let (mut lo, mut hi) = (a, b);
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if (f(mid)? < measured) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Shot-noise limited displacement density and detection efficiency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotNoise {
    /// [m / sqrt(Hz)]
    pub density: f64,
    /// `eta = (2 kappa_in / kappa) (g1 lambda / (2 FSR x_zpf))`.
    pub eta: f64,
    pub coupling_efficiency: f64,
    pub transduction: f64,
}

/// `dx = (1/sqrt(2 P_in / hbar w_L)) (lambda / F) (1 / eta) sqrt(1 + w1^2 / kappa^2)`.
pub fn shot_noise_sensitivity(p: &SystemParams, hc: &HomodyneConfig) -> Result<ShotNoise> {
    let o = &p.optical[PROBE];
    let m = &p.mechanical[0];
    let finesse = p.finesse();
    if !(hc.input_power > 0.0 && finesse > 0.0) {
        return Err(Error::invalid("shot-noise floor needs positive probe power and finesse"));
    }
    let kappa = o.kappa();
    let coupling_efficiency = 2.0 * o.kappa_in / kappa;
    let transduction = m.reference_coupling() * o.wavelength / (2.0 * p.cavity.fsr * m.x_zpf());
    let eta = coupling_efficiency * transduction;
    let flux = 2.0 * hc.input_power / (HBAR * o.omega_laser());
    let density = (1.0 / flux.sqrt()) * (o.wavelength / finesse) / eta * (1.0 + (m.omega / kappa).powi(2)).sqrt();
    Ok(ShotNoise { density, eta, coupling_efficiency, transduction })
}

/// Slope `K` of `C(Delta) = -K Delta`,
/// `K = (2 g^2 E^2 / gamma kappa) 4 w / (kappa^2 + w^2)^2`, for mode `mode`
/// read out by the probe.
pub fn detuning_slope(p: &SystemParams, mode: usize) -> f64 {
    let m = &p.mechanical[mode];
    let o = &p.optical[PROBE];
    let g = m.reference_coupling();
    let e2 = o.drive_rate().powi(2);
    let kappa = o.kappa();
    let w = m.omega;
    2.0 * g * g * e2 / (m.gamma * kappa) * 4.0 * w / (kappa * kappa + w * w).powi(2)
}

/// Forward model `dq^Delta / dq^th = 1 / sqrt(1 + C(Delta))`.
pub fn variance_ratio(delta: f64, mode: usize, p: &SystemParams) -> Result<f64> {
    let c = -detuning_slope(p, mode) * delta;
    if c <= -1.0 {
        return Err(Error::invalid(format!("C(Delta) = {c:.4} <= -1: detuning outside the validity of the estimate")));
    }
    Ok(1.0 / (1.0 + c).sqrt())
}

/// Closed-form inversion of [`variance_ratio`].
pub fn detuning_from_variance_ratio(ratio: f64, mode: usize, p: &SystemParams) -> Result<f64> {
    if !(ratio > 0.0) {
        return Err(Error::invalid("variance ratio must be positive"));
    }
    if ratio == 1.0 {
        return Ok(0.0);
    }
    let k = detuning_slope(p, mode);
    if k == 0.0 {
        return Err(Error::invalid("no optomechanical back-action: detuning cannot be inferred"));
    }
    let c = 1.0 / (ratio * ratio) - 1.0;
    Ok(-c / k)
}

/// Tone amplitudes [V] read from a spectrum; `None` when not resolved.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ToneAmplitudes {
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub wsm: Option<f64>,
    pub wb: Option<f64>,
    pub wsb: Option<f64>,
}

/// Integrates the PSD over `+-25 Hz` around each tone.
pub fn extract_tones(psd: &Psd, p: &SystemParams) -> ToneAmplitudes {
    let f = |tone: ToneId| tone_amplitude_from_psd(psd, tone.frequency(p) / TWO_PI, TONE_HALF_WIDTH);
    ToneAmplitudes {
        w1: f(ToneId::Omega1),
        w2: f(ToneId::Omega2),
        wsm: f(ToneId::OmegaSm),
        wb: f(ToneId::OmegaB),
        wsb: f(ToneId::OmegaSb),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    /// Ratio used to infer `xi`; falls back to the other when tones are missing.
    pub source: RatioKind,
    pub hint: Option<f64>,
    pub phi_lo: f64,
    pub truncation: Truncation,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { source: RatioKind::T1, hint: None, phi_lo: FRAC_PI_2, truncation: Truncation::Auto }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub xi: Option<f64>,
    pub xi_source: Option<RatioKind>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub tsb: Option<f64>,
    pub n1: Option<f64>,
    pub n2: Option<f64>,
    /// Displacement amplitudes corrected for the nonlinear readout [m].
    pub q_effective: [Option<f64>; 2],
    /// Displacement amplitudes from the linear calibration-tone scale [m].
    pub q_observed: [Option<f64>; 2],
    pub flags: Vec<String>,
}

impl CalibrationReport {
    fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("xi", self.xi),
            ("T1", self.t1),
            ("T2", self.t2),
            ("Tsb", self.tsb),
            ("N1", self.n1),
            ("N2", self.n2),
            ("q1_effective_m", self.q_effective[0]),
            ("q2_effective_m", self.q_effective[1]),
            ("q1_observed_m", self.q_observed[0]),
            ("q2_observed_m", self.q_observed[1]),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            match v {
                Some(v) => writeln!(s, "{k:>16} = {v:.6e}").unwrap(),
                None => writeln!(s, "{k:>16} = n/a").unwrap(),
            }
        }
        if let Some(src) = self.xi_source {
            writeln!(s, "{:>16} = {}", "xi_from", src.name()).unwrap();
        }
        for f in &self.flags {
            writeln!(s, "warning: {f}").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,value\n");
        for (k, v) in self.rows() {
            match v {
                Some(v) => writeln!(s, "{k},{v}").unwrap(),
                None => writeln!(s, "{k},").unwrap(),
            }
        }
        s
    }
}

/// Infers `xi`, the correction factors and the displacement amplitudes of
/// both modes from measured tone amplitudes. The calibration tone of known
/// depth sets the volts-to-meters scale.
pub fn calibrate(tones: &ToneAmplitudes, p: &SystemParams, opts: &CalibrationOptions) -> Result<CalibrationReport> {
    let trunc = opts.truncation;
    let mut rep = CalibrationReport {
        xi: None,
        xi_source: None,
        t1: None,
        t2: None,
        tsb: None,
        n1: None,
        n2: None,
        q_effective: [None, None],
        q_observed: [None, None],
        flags: Vec::new(),
    };
    let Some(vb) = tones.wb.filter(|v| *v > 0.0) else {
        rep.flags.push("calibration tone at w_b not resolved: no absolute scale".into());
        return Ok(rep);
    };
    let beta = p.modulation.depth;
    rep.t1 = tones.w1.map(|v| v * beta / vb);
    rep.t2 = tones.w2.map(|v| v * beta / vb);
    rep.tsb = match (tones.wsm, tones.w2) {
        (Some(s), Some(v2)) if v2 > 0.0 => Some(s / v2),
        _ => None,
    };
    if tones.w1.is_none() {
        rep.flags.push("tone at w_1 not resolved".into());
    }
    if tones.w2.is_none() {
        rep.flags.push("tone at w_2 not resolved".into());
    }

    let order = match opts.source {
        RatioKind::T1 => [RatioKind::T1, RatioKind::Tsb],
        RatioKind::Tsb => [RatioKind::Tsb, RatioKind::T1],
    };
    for kind in order {
        let measured = match kind {
            RatioKind::T1 => rep.t1,
            RatioKind::Tsb => rep.tsb,
        };
        let Some(m) = measured else { continue };
        match infer_xi_at(m, kind, p, trunc, opts.hint, opts.phi_lo) {
            Ok(xi) => {
                rep.xi = Some(xi);
                rep.xi_source = Some(kind);
                break;
            }
            Err(e) => rep.flags.push(format!("{}: {e}", kind.name())),
        }
    }

    let (c1, c2) = linear_scales(p, trunc, opts.phi_lo)?;
    let (m1, m2) = (&p.mechanical[0], &p.mechanical[1]);
    if let Some(t1) = rep.t1 {
        let xi_ob = t1 / c1;
        rep.q_observed[0] = Some(m1.displacement(m1.amplitude_of_xi(xi_ob)));
    }
    if let Some(t2) = rep.t2 {
        let a2 = t2 / c2 / m2.reference_coupling();
        rep.q_observed[1] = Some(m2.displacement(a2));
    }
    if let Some(xi) = rep.xi {
        let (n1, n2) = correction_factors_at(xi, p, trunc, opts.phi_lo)?;
        rep.n1 = Some(n1);
        rep.n2 = Some(n2);
        rep.q_effective[0] = Some(m1.displacement(m1.amplitude_of_xi(xi)));
        rep.q_effective[1] = rep.q_observed[1].map(|q| q / n2);
    } else {
        rep.flags.push("xi could not be inferred: no correction applied".into());
    }
    Ok(rep)
}

/// Steady-state detector record synthesised from the reflection series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDataset {
    pub xi: f64,
    /// Mode-2 perturbation `g2 |A2|` [rad/s].
    pub g2a2: f64,
    pub fs: f64,
    pub duration: f64,
    /// White voltage noise added to the record [V rms].
    pub noise_rms: f64,
    pub seed: u64,
}

/// Homodyne voltage of the six-tone reflection at `(xi, g2 |A2|)` plus white
/// noise.
pub fn synthetic_voltage(ds: &SyntheticDataset, p: &SystemParams, phi_lo: f64, trunc: Truncation) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    if !(ds.fs > 0.0 && ds.duration > 0.0) {
        return Err(Error::invalid("synthetic record needs positive rate and duration"));
    }
    let rs = reflection_set(ds.xi, ds.g2a2, p, trunc)?;
    let (phi1, phi2) = (0.3, 1.1);
    let phases = TonePhases { phi1, phi2, phi_sm: 2.0 * phi1 - phi2, phi_sb: 2.0 * phi1 };
    let n = (ds.fs * ds.duration).round() as usize;
    let t: Vec<f64> = (0..n).map(|k| k as f64 / ds.fs).collect();
    let r = reconstruct_reflection_time_series(&rs, &phases, p, &t);
    let mut v = voltage_signal(&r, &HomodyneConfig::from_params(p), phi_lo);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ds.seed);
    for x in v.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += ds.noise_rms * z;
    }
    Ok(v)
}

/// Welch segment giving about 4 Hz resolution.
pub fn calibration_segment(fs: f64) -> usize {
    ((fs / 4.0).max(2.0) as usize).next_power_of_two()
}

/// PSD, tone extraction and calibration of a voltage record.
pub fn calibrate_series(v: &[f64], fs: f64, p: &SystemParams, opts: &CalibrationOptions) -> Result<CalibrationReport> {
    let seg = calibration_segment(fs).min(v.len());
    let psd = welch_psd(v, fs, seg, 0.5, Window::Hann)?;
    calibrate(&extract_tones(&psd, p), p, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::reference_params;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn lock_real_dc() {
        assert_eq!(lo_phase_lock(c(-0.75, 0.0)).unwrap(), FRAC_PI_2);
        assert_eq!(lo_phase_lock(c(0.3, 0.0)).unwrap(), FRAC_PI_2);
        assert!(lo_phase_lock(c(0.0, 0.0)).is_err());
    }

    proptest! {
        #[test]
        fn lock_cancels_dc(re in -10.0..10.0f64, im in -10.0..10.0f64) {
            prop_assume!(re.hypot(im) > 1e-6);
            let r = c(re, im);
            let phi = lo_phase_lock(r).unwrap();
            prop_assert!(phi > 0.0 && phi <= PI);
            prop_assert!((r * Complex64::from_polar(1.0, -phi)).re.abs() < 1e-12 * r.norm());
        }
    }

    #[test]
    fn table1_lock_near_quadrature() {
        let p = reference_params();
        for &xi in &[0.0, 0.5, 1.0, 1.5, 2.0] {
            let rs = reflection_set(xi, 0.0, &p, Truncation::Auto).unwrap();
            let phi = lo_phase_lock(rs.dc()).unwrap();
            assert!((phi - FRAC_PI_2).abs() < 0.1, "xi {xi}: {phi}");
        }
    }

    #[test]
    fn asn_limits() {
        let rp = c(0.3, -0.2);
        assert_eq!(homodyne_asn(rp, rp.conj()), 0.0);
        assert!((homodyne_asn(rp, -rp.conj()) - rp.norm()).abs() < 1e-15);
        assert!((tone_asn(rp, c(0.1, 0.4), FRAC_PI_2) - homodyne_asn(rp, c(0.1, 0.4))).abs() < 1e-15);
    }

    #[test]
    fn voltage_of_imaginary_reflection() {
        let p = reference_params();
        let hc = HomodyneConfig::from_params(&p);
        let v = voltage_signal(&[c(0.0, 0.4); 3], &hc, FRAC_PI_2);
        let k = hc.transimpedance * hc.sensitivity * 2.0 * (hc.lo_power * hc.input_power).sqrt();
        for x in v {
            assert!((x - 0.4 * k).abs() < 1e-12 * k);
        }
    }

    #[test]
    fn auto_lock_zeroes_dc_voltage() {
        let p = reference_params();
        let hc = HomodyneConfig::from_params(&p);
        let phi = resolve_lo_phase(&hc, &p, Truncation::Auto).unwrap();
        let dc = reflection_set(0.0, 0.0, &p, Truncation::Auto).unwrap().dc();
        let v = voltage_signal(&[dc], &hc, phi);
        assert!(v[0].abs() < 1e-12 * hc.gain());
    }

    #[test]
    fn ratios_independent_of_depth_and_input_coupling() {
        let p = reference_params();
        let g2a2 = thermal_g2a2(&p);
        let base = ratios(1.05, g2a2, &p, Truncation::Auto).unwrap();
        for &beta in &[0.005, 0.05] {
            let mut q = p.clone();
            q.modulation.depth = beta;
            let r = ratios(1.05, g2a2, &q, Truncation::Auto).unwrap();
            // beta enters only through J_0 / J_1 of the tone and the explicit factor
            assert!((r.t1 / base.t1 - 1.0).abs() < 1e-3, "{beta}: {} {}", r.t1, base.t1);
            assert!((r.tsb / base.tsb - 1.0).abs() < 1e-12);
        }
        for &s in &[0.8, 1.2] {
            let mut q = p.clone();
            q.optical[PROBE].kappa_in *= s;
            q.optical[PROBE].kappa_ex = p.probe().kappa() - q.optical[PROBE].kappa_in;
            let r = ratios(1.05, g2a2, &q, Truncation::Auto).unwrap();
            assert!((r.tsb / base.tsb - 1.0).abs() < 1e-12);
        }
        let r = ratios(1.05, 3.0 * g2a2, &p, Truncation::Auto).unwrap();
        assert!((r.tsb / base.tsb - 1.0).abs() < 1e-12);
        assert!((r.t1 / base.t1 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sideband_ratio_vanishes_at_rest() {
        let p = reference_params();
        let r = ratios(0.0, thermal_g2a2(&p), &p, Truncation::Auto).unwrap();
        assert!(r.tsb.abs() < 1e-14);
        assert_eq!(r.t1, 0.0);
    }

    #[test]
    fn correction_factors_linear_limit() {
        let p = reference_params();
        let (n1, n2) = correction_factors(1e-3, &p, Truncation::Auto).unwrap();
        assert!((n1 - 1.0).abs() < 1e-4 && (n2 - 1.0).abs() < 1e-4, "{n1} {n2}");
        for &xi in &[0.3, 0.7, 1.05, 1.66, 2.0] {
            let (n1, n2) = correction_factors(xi, &p, Truncation::Auto).unwrap();
            assert!(n1 > 0.0 && n1 < 1.0 && n2 > 0.0 && n2 < 1.0, "{xi}: {n1} {n2}");
        }
    }

    #[test]
    fn calibration_tone_immunity() {
        let p = reference_params();
        let v = |xi| {
            let (rp, rm) = reflection_set(xi, 0.0, &p, Truncation::Auto).unwrap().get(ToneId::OmegaB);
            homodyne_asn(rp, rm)
        };
        // the m = 0 term of the tone response loses weight J0(xi)^2; the tone
        // drops by about 4.6 % at xi = 1.05
        let r = v(1.05) / v(0.0);
        assert!(r > 0.95 && r < 0.96, "{r}");
    }

    #[test]
    fn infer_round_trip() {
        let p = reference_params();
        for &xi in &[0.1, 0.5, 0.9] {
            let t = ratios(xi, 1.0, &p, Truncation::Auto).unwrap().t1;
            let back = infer_xi(t, RatioKind::T1, &p, Truncation::Auto, None).unwrap();
            assert!((back - xi).abs() < 1e-4, "{xi} {back}");
        }
        let t = ratios(1.66, 1.0, &p, Truncation::Auto).unwrap().tsb;
        let back = infer_xi(t, RatioKind::Tsb, &p, Truncation::Auto, Some(1.66)).unwrap();
        assert!((back - 1.66).abs() < 1e-4, "{back}");
    }

    #[test]
    fn infer_out_of_range() {
        let p = reference_params();
        let err = infer_xi(10.0, RatioKind::T1, &p, Truncation::Auto, None).unwrap_err();
        assert!(err.to_string().contains("achievable interval"), "{err}");
    }

    #[test]
    fn efficiency_from_table() {
        // 2 pi 8.35 / 2 pi 67.05 coupling, g1 = 2 pi 0.4225 Hz, FSR = 2 pi 1.67 GHz
        let p = reference_params();
        let xzpf = (1.054_571_817e-34 / (2.0 * 1.74e-10 * TWO_PI * 230_795.0)).sqrt();
        let want = (2.0 * 8.35 / 67.05) * (0.4225 * 1064e-9 / (2.0 * 1.67e9 * xzpf));
        let sn = shot_noise_sensitivity(&p, &HomodyneConfig::from_params(&p)).unwrap();
        assert!((sn.eta / want - 1.0).abs() < 1e-9, "{} {}", sn.eta, want);
    }

    #[test]
    fn shot_noise_wideband_limit() {
        let mut p = reference_params();
        let hc = HomodyneConfig::from_params(&p);
        let o = p.optical[PROBE];
        let s = 1e6;
        p.optical[PROBE].kappa_in = o.kappa_in * s;
        p.optical[PROBE].kappa_ex = o.kappa_ex * s;
        p.cavity.fsr *= s;
        let sn = shot_noise_sensitivity(&p, &hc).unwrap();
        let flux = 2.0 * hc.input_power / (HBAR * o.omega_laser());
        let flat = 1.0 / flux.sqrt() * (o.wavelength / p.finesse()) / sn.eta;
        assert!((sn.density / flat - 1.0).abs() < 1e-6);
    }

    #[test]
    fn detuning_round_trip() {
        let p = reference_params();
        assert_eq!(detuning_from_variance_ratio(1.0, 1, &p).unwrap(), 0.0);
        let d = TWO_PI * 1e3;
        let r = variance_ratio(d, 1, &p).unwrap();
        assert!(r > 1.0);
        let back = detuning_from_variance_ratio(r, 1, &p).unwrap();
        assert!((back / d - 1.0).abs() < 1e-6);
        assert!(detuning_from_variance_ratio(0.0, 1, &p).is_err());
    }

    #[test]
    fn calibrate_without_tone_flags() {
        let p = reference_params();
        let rep = calibrate(&ToneAmplitudes { w1: Some(1.0), ..Default::default() }, &p, &CalibrationOptions::default())
            .unwrap();
        assert!(rep.xi.is_none());
        assert!(!rep.flags.is_empty());
    }

    #[test]
    fn calibrate_exact_tones() {
        let p = reference_params();
        let xi = 0.8;
        let g2a2 = thermal_g2a2(&p);
        let rs = reflection_set(xi, g2a2, &p, Truncation::Auto).unwrap();
        let v = |t| {
            let (a, b) = rs.get(t);
            Some(homodyne_asn(a, b))
        };
        let tones = ToneAmplitudes {
            w1: v(ToneId::Omega1),
            w2: v(ToneId::Omega2),
            wsm: v(ToneId::OmegaSm),
            wb: v(ToneId::OmegaB),
            wsb: v(ToneId::OmegaSb),
        };
        let rep = calibrate(&tones, &p, &CalibrationOptions::default()).unwrap();
        assert!((rep.xi.unwrap() - xi).abs() < 1e-5);
        let m2 = &p.mechanical[1];
        let q2 = m2.thermal_displacement();
        assert!((rep.q_effective[1].unwrap() / q2 - 1.0).abs() < 1e-4);
        let q1 = rep.q_effective[0].unwrap();
        assert!(rep.flags.is_empty(), "{:?}", rep.flags);
        assert!((rep.q_observed[0].unwrap() / (q1 * rep.n1.unwrap()) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn calibrate_synthetic_record() {
        let p = reference_params();
        let ds = SyntheticDataset {
            xi: 0.9,
            g2a2: thermal_g2a2(&p),
            fs: 600e3,
            duration: 1.0,
            noise_rms: 1e-3,
            seed: 1,
        };
        let v = synthetic_voltage(&ds, &p, FRAC_PI_2, Truncation::Auto).unwrap();
        let rep = calibrate_series(&v, ds.fs, &p, &CalibrationOptions::default()).unwrap();
        assert!((rep.xi.unwrap() - 0.9).abs() < 2e-3, "{:?}", rep);
        let q2 = p.mechanical[1].thermal_displacement();
        assert!((rep.q_effective[1].unwrap() / q2 - 1.0).abs() < 0.01, "{:?}", rep);
    }
}
