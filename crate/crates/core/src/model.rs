//! Physical parameters of the two-membrane cavity, their configuration file and
//! the derived quantities (zero-point widths, thermal occupations, drive rates,
//! static radiation-pressure shifts).
//!
//! Conventions: every rate and angular frequency is stored in rad/s, optical and
//! mechanical amplitudes are dimensionless (mechanical ones in units of the
//! zero-point width), and a displacement amplitude is `q = 2 |A| x_zpf`.
//! Optical mode 0 is the pump, optical mode 1 the probe.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::ConfigError;

pub const HBAR: f64 = 1.054_571_817e-34;
pub const K_B: f64 = 1.380_649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const TWO_PI: f64 = 2.0 * PI;

pub const PUMP: usize = 0;
pub const PROBE: usize = 1;

/// Default Si3N4 density used for geometry-derived masses.
pub const SIN_DENSITY: f64 = 3100.0;

const STATIC_SHIFT_TOL: f64 = 1e-9;
const STATIC_SHIFT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembraneGeometry {
    pub lx: f64,
    pub ly: f64,
    pub thickness: f64,
    pub density: f64,
}

impl MembraneGeometry {
    /// Effective mass of the fundamental drum mode of a rectangular membrane.
    pub fn effective_mass(&self) -> f64 {
        self.density * self.lx * self.ly * self.thickness / 4.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MassSource {
    Explicit,
    Geometry(MembraneGeometry),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanicalMode {
    pub omega: f64,
    pub gamma: f64,
    /// Single-photon coupling to each optical mode, `[g_pump, g_probe]`.
    pub g: [f64; 2],
    pub mass: f64,
    pub temperature: f64,
    pub mass_source: MassSource,
}

impl MechanicalMode {
    pub fn x_zpf(&self) -> f64 {
        (HBAR / (2.0 * self.mass * self.omega)).sqrt()
    }

    /// Bose-Einstein occupation; zero at zero temperature.
    pub fn nbar(&self) -> f64 {
        if self.temperature <= 0.0 {
            return 0.0;
        }
        1.0 / ((HBAR * self.omega / (K_B * self.temperature)).exp_m1())
    }

    /// Thermal displacement standard deviation `sqrt(k_B T / m w^2)`.
    pub fn thermal_displacement(&self) -> f64 {
        (K_B * self.temperature / (self.mass * self.omega * self.omega)).sqrt()
    }

    /// Coupling used to define the modulation index of this mode.
    pub fn reference_coupling(&self) -> f64 {
        self.g[PROBE]
    }

    /// Physical displacement for a dimensionless amplitude.
    pub fn displacement(&self, amplitude: f64) -> f64 {
        2.0 * amplitude * self.x_zpf()
    }

    /// Modulation index `2 g |A| / w` of a dimensionless amplitude.
    pub fn xi_of_amplitude(&self, amplitude: f64) -> f64 {
        2.0 * self.reference_coupling() * amplitude / self.omega
    }

    pub fn amplitude_of_xi(&self, xi: f64) -> f64 {
        xi * self.omega / (2.0 * self.reference_coupling())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetuningSource {
    Effective,
    Bare,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalMode {
    /// Bare detuning `w_L - w_c` before static shifts.
    pub detuning0: f64,
    /// Effective detuning including the static mechanical shifts.
    pub detuning: f64,
    pub kappa_in: f64,
    pub kappa_ex: f64,
    pub power: f64,
    pub wavelength: f64,
    pub detuning_source: DetuningSource,
}

impl OpticalMode {
    pub fn kappa(&self) -> f64 {
        self.kappa_in + self.kappa_ex
    }

    pub fn omega_laser(&self) -> f64 {
        TWO_PI * SPEED_OF_LIGHT / self.wavelength
    }

    /// Photon flux amplitude `sqrt(P / hbar w_L)`.
    pub fn input_amplitude(&self) -> f64 {
        (self.power / (HBAR * self.omega_laser())).sqrt()
    }

    pub fn drive_rate_at(&self, power: f64) -> f64 {
        (2.0 * self.kappa_in * power / (HBAR * self.omega_laser())).sqrt()
    }

    /// `E = sqrt(2 kappa_in P / hbar w_L)`.
    pub fn drive_rate(&self) -> f64 {
        self.drive_rate_at(self.power)
    }

    /// Complex rate `i Delta - kappa` with the effective detuning.
    pub fn w(&self) -> Complex64 {
        Complex64::new(-self.kappa(), self.detuning)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeModulation {
    pub depth: f64,
    pub omega_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoPhase {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSettings {
    pub lo_power: f64,
    pub sensitivity: f64,
    pub transimpedance: f64,
    pub termination: f64,
    pub lo_phase: LoPhase,
}

impl Default for DetectionSettings {
    fn default() -> Self {
        Self {
            lo_power: 1e-3,
            sensitivity: 0.75,
            transimpedance: 1e4,
            termination: 50.0,
            lo_phase: LoPhase::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavityGeometry {
    pub fsr: f64,
    pub finesse: Option<f64>,
    pub length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub mechanical: [MechanicalMode; 2],
    pub optical: [OpticalMode; 2],
    pub modulation: ProbeModulation,
    pub detection: DetectionSettings,
    pub cavity: CavityGeometry,
    /// Metadata only; not used by any computation.
    pub kappa_loss: Option<f64>,
    /// Static mechanical displacements `beta_0,j`.
    pub static_shifts: [Complex64; 2],
    pub warnings: Vec<String>,
}

impl SystemParams {
    pub fn probe(&self) -> &OpticalMode {
        &self.optical[PROBE]
    }

    pub fn pump(&self) -> &OpticalMode {
        &self.optical[PUMP]
    }

    /// `g_ij`: optical mode `i`, mechanical mode `j`.
    pub fn coupling(&self, optical: usize, mechanical: usize) -> f64 {
        self.mechanical[mechanical].g[optical]
    }

    /// Finesse as given, or `FSR / 2 kappa` of the probe mode.
    pub fn finesse(&self) -> f64 {
        self.cavity
            .finesse
            .unwrap_or(self.cavity.fsr / (2.0 * self.probe().kappa()))
    }

    pub fn delta_omega(&self) -> f64 {
        self.mechanical[1].omega - self.mechanical[0].omega
    }

    /// Same system with a different pump power; bare detunings are held and the
    /// static shifts re-solved.
    pub fn with_pump_power(&self, power: f64) -> Result<Self, ConfigError> {
        let mut p = self.clone();
        p.optical[PUMP].power = power;
        for o in p.optical.iter_mut() {
            o.detuning_source = DetuningSource::Bare;
        }
        p.resolve_static_shifts()?;
        // keep the caller's declared source for serialization
        for (o, src) in p.optical.iter_mut().zip(self.optical.iter()) {
            o.detuning_source = src.detuning_source;
        }
        Ok(p)
    }

    /// Same system with the effective probe detuning replaced.
    pub fn with_probe_detuning(&self, detuning: f64) -> Result<Self, ConfigError> {
        let mut p = self.clone();
        p.optical[PROBE].detuning = detuning;
        p.optical[PROBE].detuning_source = DetuningSource::Effective;
        p.resolve_static_shifts()?;
        Ok(p)
    }

    /// Mean intracavity photon numbers for given effective detunings.
    fn photon_numbers(&self, detunings: [f64; 2]) -> [f64; 2] {
        let mut n = [0.0; 2];
        for i in 0..2 {
            let o = &self.optical[i];
            let e = o.drive_rate();
            n[i] = e * e / (o.kappa().powi(2) + detunings[i].powi(2));
        }
        n
    }

    fn shifts_for(&self, photons: [f64; 2]) -> [Complex64; 2] {
        let mut b0 = [Complex64::new(0.0, 0.0); 2];
        for (j, m) in self.mechanical.iter().enumerate() {
            let force: f64 = (0..2).map(|i| m.g[i] * photons[i]).sum();
            // 0 = (-i w - gamma) b0 + i force
            b0[j] = Complex64::i() * force / Complex64::new(m.gamma, m.omega);
        }
        b0
    }

    fn detuning_shift(&self, optical: usize, b0: &[Complex64; 2]) -> f64 {
        (0..2)
            .map(|j| 2.0 * self.coupling(optical, j) * b0[j].re)
            .sum()
    }

    /// Solves the time-averaged radiation-pressure balance for the static
    /// shifts by fixed-point iteration and fills in whichever of the bare or
    /// effective detunings was not given.
    pub(crate) fn resolve_static_shifts(&mut self) -> Result<(), ConfigError> {
        let mut detunings = [self.optical[0].detuning, self.optical[1].detuning];
        for i in 0..2 {
            if self.optical[i].detuning_source == DetuningSource::Bare {
                detunings[i] = self.optical[i].detuning0;
            }
        }
        let mut b0 = self.shifts_for(self.photon_numbers(detunings));
        let mut converged = false;
        for _ in 0..STATIC_SHIFT_MAX_ITER {
            let mut next = detunings;
            for (i, d) in next.iter_mut().enumerate() {
                if self.optical[i].detuning_source == DetuningSource::Bare {
                    *d = self.optical[i].detuning0 + self.detuning_shift(i, &b0);
                }
            }
            let nb0 = self.shifts_for(self.photon_numbers(next));
            let change = (0..2)
                .map(|j| (nb0[j] - b0[j]).norm() / nb0[j].norm().max(1e-300))
                .fold(0.0, f64::max);
            detunings = next;
            b0 = nb0;
            if change <= STATIC_SHIFT_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(ConfigError::InvalidValue {
                key: "detuning".into(),
                msg: "static shift iteration did not converge (optical bistability?)".into(),
            });
        }
        for i in 0..2 {
            let shift = self.detuning_shift(i, &b0);
            match self.optical[i].detuning_source {
                DetuningSource::Bare => self.optical[i].detuning = self.optical[i].detuning0 + shift,
                DetuningSource::Effective => {
                    self.optical[i].detuning0 = self.optical[i].detuning - shift
                }
            }
        }
        self.static_shifts = b0;
        Ok(())
    }

    /// Parses and validates a flat `key = value` configuration document.
    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        let doc = ConfigDoc::parse(text)?;
        doc.into_params()
    }

    pub fn derived(&self) -> DerivedReport {
        derived_params(self)
    }

    /// Serializes back to the configuration format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let hz = |w: f64| w / TWO_PI;
        let mut kv = |k: &str, v: f64| {
            let _ = writeln!(s, "{k} = {v:e}");
        };
        for (j, m) in self.mechanical.iter().enumerate() {
            let n = j + 1;
            kv(&format!("omega{n}_hz"), hz(m.omega));
            kv(&format!("gamma{n}_hz"), hz(m.gamma));
            kv(&format!("g{n}_hz"), hz(m.g[PROBE]));
            if m.g[PUMP] != m.g[PROBE] {
                kv(&format!("g1{n}_hz"), hz(m.g[PUMP]));
            }
            match m.mass_source {
                MassSource::Explicit => kv(&format!("mass{n}_kg"), m.mass),
                MassSource::Geometry(geo) => {
                    kv(&format!("membrane{n}_lx_m"), geo.lx);
                    kv(&format!("membrane{n}_ly_m"), geo.ly);
                    kv(&format!("membrane{n}_thickness_m"), geo.thickness);
                    kv(&format!("membrane{n}_density_kg_m3"), geo.density);
                }
            }
        }
        kv("temperature_k", self.mechanical[0].temperature);
        for (i, name) in ["pump", "probe"].iter().enumerate() {
            let o = &self.optical[i];
            match o.detuning_source {
                DetuningSource::Effective => kv(&format!("{name}_detuning_hz"), hz(o.detuning)),
                DetuningSource::Bare => kv(&format!("{name}_bare_detuning_hz"), hz(o.detuning0)),
            }
            kv(&format!("{name}_power_w"), o.power);
        }
        let probe = self.probe();
        let pump = self.pump();
        kv("kappa_in_hz", hz(probe.kappa_in));
        kv("kappa_ex_hz", hz(probe.kappa_ex));
        if pump.kappa_in != probe.kappa_in {
            kv("pump_kappa_in_hz", hz(pump.kappa_in));
        }
        if pump.kappa_ex != probe.kappa_ex {
            kv("pump_kappa_ex_hz", hz(pump.kappa_ex));
        }
        if let Some(k) = self.kappa_loss {
            kv("kappa_loss_hz", hz(k));
        }
        kv("wavelength_m", probe.wavelength);
        kv("fsr_hz", hz(self.cavity.fsr));
        if let Some(f) = self.cavity.finesse {
            kv("finesse", f);
        }
        if let Some(l) = self.cavity.length {
            kv("cavity_length_m", l);
        }
        kv("mod_depth_rad", self.modulation.depth);
        kv("omega_b_hz", hz(self.modulation.omega_b));
        let d = &self.detection;
        kv("lo_power_w", d.lo_power);
        kv("pd_sensitivity_a_per_w", d.sensitivity);
        kv("transimpedance_v_per_a", d.transimpedance);
        kv("termination_ohm", d.termination);
        match d.lo_phase {
            LoPhase::Auto => s.push_str("lo_phase = auto\n"),
            LoPhase::Fixed(phi) => {
                let _ = writeln!(s, "lo_phase_rad = {phi:e}");
            }
        }
        s
    }
}

/// Unit implied by a key suffix, and the SI scale applied to the stored value.
fn key_unit(key: &str) -> (&'static str, f64) {
    const TABLE: &[(&str, &str, f64)] = &[
        ("_density_kg_m3", "kg/m3", 1.0),
        ("_a_per_w", "A/W", 1.0),
        ("_v_per_a", "V/A", 1.0),
        ("_ohm", "Ohm", 1.0),
        ("_hz", "Hz", TWO_PI),
        ("_kg", "kg", 1.0),
        ("_rad", "rad", 1.0),
        ("_w", "W", 1.0),
        ("_m", "m", 1.0),
        ("_k", "K", 1.0),
    ];
    for (suffix, unit, scale) in TABLE {
        if key.ends_with(suffix) {
            return (unit, *scale);
        }
    }
    ("", 1.0)
}

fn prefix_scale(c: char) -> Option<f64> {
    Some(match c {
        'p' => 1e-12,
        'n' => 1e-9,
        'u' | 'µ' => 1e-6,
        'm' => 1e-3,
        'k' => 1e3,
        'M' => 1e6,
        'G' => 1e9,
        _ => return None,
    })
}

/// Parses `value [unit]`, where `unit` may carry an SI prefix on the unit the
/// key suffix declares. Returns the value in the key's base unit.
fn parse_quantity(key: &str, raw: &str) -> Result<f64, ConfigError> {
    let (expected, _) = key_unit(key);
    let mut parts = raw.split_whitespace();
    let num = parts.next().ok_or_else(|| ConfigError::InvalidValue {
        key: key.into(),
        msg: "empty value".into(),
    })?;
    let unit = parts.next();
    if parts.next().is_some() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            msg: format!("unexpected trailing text in '{raw}'"),
        });
    }
    let v: f64 = num.parse().map_err(|_| ConfigError::InvalidValue {
        key: key.into(),
        msg: format!("not a number: '{num}'"),
    })?;
    if !v.is_finite() {
        return Err(ConfigError::InvalidValue {
            key: key.into(),
            msg: "value must be finite".into(),
        });
    }
    let Some(unit) = unit else { return Ok(v) };
    if unit == expected {
        return Ok(v);
    }
    let mut chars = unit.chars();
    if let Some(first) = chars.next() {
        if let Some(scale) = prefix_scale(first) {
            if chars.as_str() == expected && !expected.is_empty() {
                return Ok(v * scale);
            }
        }
    }
    Err(ConfigError::Unit {
        key: key.into(),
        expected: if expected.is_empty() { "dimensionless".into() } else { expected.into() },
        found: unit.into(),
    })
}

const KNOWN_KEYS: &[&str] = &[
    "omega1_hz",
    "omega2_hz",
    "gamma1_hz",
    "gamma2_hz",
    "g1_hz",
    "g2_hz",
    "g11_hz",
    "g12_hz",
    "mass1_kg",
    "mass2_kg",
    "membrane1_lx_m",
    "membrane1_ly_m",
    "membrane2_lx_m",
    "membrane2_ly_m",
    "membrane1_thickness_m",
    "membrane2_thickness_m",
    "membrane1_density_kg_m3",
    "membrane2_density_kg_m3",
    "temperature_k",
    "pump_detuning_hz",
    "pump_bare_detuning_hz",
    "probe_detuning_hz",
    "probe_bare_detuning_hz",
    "pump_power_w",
    "probe_power_w",
    "kappa_in_hz",
    "kappa_ex_hz",
    "pump_kappa_in_hz",
    "pump_kappa_ex_hz",
    "kappa_loss_hz",
    "wavelength_m",
    "fsr_hz",
    "finesse",
    "cavity_length_m",
    "mod_depth_rad",
    "omega_b_hz",
    "lo_power_w",
    "pd_sensitivity_a_per_w",
    "transimpedance_v_per_a",
    "termination_ohm",
    "lo_phase",
    "lo_phase_rad",
];

struct ConfigDoc {
    entries: BTreeMap<String, String>,
}

impl ConfigDoc {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: lineno + 1,
                msg: format!("expected 'key = value', found '{line}'"),
            })?;
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Ok(Self { entries })
    }

    fn opt(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => {
                let v = parse_quantity(key, raw)?;
                Ok(Some(v * key_unit(key).1))
            }
        }
    }

    fn req(&self, key: &str) -> Result<f64, ConfigError> {
        self.opt(key)?
            .ok_or_else(|| ConfigError::MissingKey(key.into()))
    }

    fn positive(&self, key: &str, name: &str) -> Result<f64, ConfigError> {
        let v = self.req(key)?;
        if v <= 0.0 {
            return Err(ConfigError::NonPositiveRate(name.into()));
        }
        Ok(v)
    }

    fn non_negative(key: &str, v: f64) -> Result<f64, ConfigError> {
        if v < 0.0 {
            return Err(ConfigError::InvalidValue {
                key: key.into(),
                msg: "must be non-negative".into(),
            });
        }
        Ok(v)
    }

    fn strictly_positive(key: &str, v: f64) -> Result<f64, ConfigError> {
        if v <= 0.0 {
            return Err(ConfigError::InvalidValue {
                key: key.into(),
                msg: "must be positive".into(),
            });
        }
        Ok(v)
    }

    fn mass(&self, n: usize) -> Result<(f64, MassSource), ConfigError> {
        let key = format!("mass{n}_kg");
        if let Some(m) = self.opt(&key)? {
            return Ok((Self::strictly_positive(&key, m)?, MassSource::Explicit));
        }
        let lx_key = format!("membrane{n}_lx_m");
        let ly_key = format!("membrane{n}_ly_m");
        let lx = self.opt(&lx_key)?;
        let ly = self.opt(&ly_key)?;
        match (lx, ly) {
            (Some(lx), Some(ly)) => {
                let th_key = format!("membrane{n}_thickness_m");
                let rho_key = format!("membrane{n}_density_kg_m3");
                let geo = MembraneGeometry {
                    lx: Self::strictly_positive(&lx_key, lx)?,
                    ly: Self::strictly_positive(&ly_key, ly)?,
                    thickness: Self::strictly_positive(&th_key, self.req(&th_key)?)?,
                    density: Self::strictly_positive(
                        &rho_key,
                        self.opt(&rho_key)?.unwrap_or(SIN_DENSITY),
                    )?,
                };
                Ok((geo.effective_mass(), MassSource::Geometry(geo)))
            }
            (None, _) => Err(ConfigError::MissingKey(format!("{key} or {lx_key}"))),
            (Some(_), None) => Err(ConfigError::MissingKey(ly_key)),
        }
    }

    fn detuning(&self, name: &str) -> Result<(f64, DetuningSource), ConfigError> {
        let eff = format!("{name}_detuning_hz");
        let bare = format!("{name}_bare_detuning_hz");
        match (self.opt(&eff)?, self.opt(&bare)?) {
            (Some(d), None) => Ok((d, DetuningSource::Effective)),
            (None, Some(d)) => Ok((d, DetuningSource::Bare)),
            (Some(_), Some(_)) => Err(ConfigError::InvalidValue {
                key: eff,
                msg: format!("give only one of {name}_detuning_hz and {bare}"),
            }),
            (None, None) => Err(ConfigError::MissingKey(eff)),
        }
    }

    fn into_params(self) -> Result<SystemParams, ConfigError> {
        let temperature = Self::non_negative("temperature_k", self.opt("temperature_k")?.unwrap_or(300.0))?;
        let mut mech = Vec::with_capacity(2);
        for n in 1..=2 {
            let omega = self.positive(&format!("omega{n}_hz"), "omega")?;
            let gamma = self.positive(&format!("gamma{n}_hz"), "gamma")?;
            let g_key = format!("g{n}_hz");
            let g = Self::non_negative(&g_key, self.req(&g_key)?)?;
            let pump_key = format!("g1{n}_hz");
            let g_pump = match self.opt(&pump_key)? {
                Some(v) => Self::non_negative(&pump_key, v)?,
                None => g,
            };
            let (mass, mass_source) = self.mass(n)?;
            mech.push(MechanicalMode {
                omega,
                gamma,
                g: [g_pump, g],
                mass,
                temperature,
                mass_source,
            });
        }

        let kappa_in = self.positive("kappa_in_hz", "kappa_in")?;
        let kappa_ex = Self::non_negative("kappa_ex_hz", self.req("kappa_ex_hz")?)?;
        let pump_kappa_in = match self.opt("pump_kappa_in_hz")? {
            Some(v) if v <= 0.0 => return Err(ConfigError::NonPositiveRate("pump_kappa_in".into())),
            Some(v) => v,
            None => kappa_in,
        };
        let pump_kappa_ex = match self.opt("pump_kappa_ex_hz")? {
            Some(v) => Self::non_negative("pump_kappa_ex_hz", v)?,
            None => kappa_ex,
        };
        let wavelength = Self::strictly_positive("wavelength_m", self.req("wavelength_m")?)?;
        let mut optical = Vec::with_capacity(2);
        for (name, kin, kex) in [("pump", pump_kappa_in, pump_kappa_ex), ("probe", kappa_in, kappa_ex)] {
            let (d, src) = self.detuning(name)?;
            let power_key = format!("{name}_power_w");
            let power = Self::non_negative(&power_key, self.req(&power_key)?)?;
            optical.push(OpticalMode {
                detuning0: d,
                detuning: d,
                kappa_in: kin,
                kappa_ex: kex,
                power,
                wavelength,
                detuning_source: src,
            });
        }

        let fsr = self.positive("fsr_hz", "fsr")?;
        let finesse = match self.opt("finesse")? {
            Some(f) => Some(Self::strictly_positive("finesse", f)?),
            None => None,
        };
        let length = match self.opt("cavity_length_m")? {
            Some(l) => Some(Self::strictly_positive("cavity_length_m", l)?),
            None => None,
        };
        let kappa_loss = self.opt("kappa_loss_hz")?;

        let depth = Self::non_negative("mod_depth_rad", self.opt("mod_depth_rad")?.unwrap_or(0.02))?;
        let omega_b = self.positive("omega_b_hz", "omega_b")?;

        let defaults = DetectionSettings::default();
        let lo_phase = match (self.entries.get("lo_phase"), self.opt("lo_phase_rad")?) {
            (Some(v), None) if v.trim() == "auto" => LoPhase::Auto,
            (Some(v), None) => {
                return Err(ConfigError::InvalidValue {
                    key: "lo_phase".into(),
                    msg: format!("expected 'auto', found '{v}' (use lo_phase_rad for a fixed phase)"),
                })
            }
            (None, Some(phi)) => LoPhase::Fixed(phi),
            (None, None) => LoPhase::Auto,
            (Some(_), Some(_)) => {
                return Err(ConfigError::InvalidValue {
                    key: "lo_phase".into(),
                    msg: "give only one of lo_phase and lo_phase_rad".into(),
                })
            }
        };
        let detection = DetectionSettings {
            lo_power: Self::strictly_positive("lo_power_w", self.opt("lo_power_w")?.unwrap_or(defaults.lo_power))?,
            sensitivity: Self::strictly_positive(
                "pd_sensitivity_a_per_w",
                self.opt("pd_sensitivity_a_per_w")?.unwrap_or(defaults.sensitivity),
            )?,
            transimpedance: Self::strictly_positive(
                "transimpedance_v_per_a",
                self.opt("transimpedance_v_per_a")?.unwrap_or(defaults.transimpedance),
            )?,
            termination: Self::strictly_positive(
                "termination_ohm",
                self.opt("termination_ohm")?.unwrap_or(defaults.termination),
            )?,
            lo_phase,
        };

        let mut params = SystemParams {
            mechanical: [mech[0], mech[1]],
            optical: [optical[0], optical[1]],
            modulation: ProbeModulation { depth, omega_b },
            detection,
            cavity: CavityGeometry { fsr, finesse, length },
            kappa_loss,
            static_shifts: [Complex64::new(0.0, 0.0); 2],
            warnings: Vec::new(),
        };

        if let Some(f) = finesse {
            let two_kappa = 2.0 * params.probe().kappa();
            let expected = fsr / f;
            if ((two_kappa - expected) / expected).abs() > 0.05 {
                return Err(ConfigError::InvalidValue {
                    key: "finesse".into(),
                    msg: format!(
                        "2 kappa = 2pi*{:.4e} Hz disagrees with FSR/finesse = 2pi*{:.4e} Hz by more than 5%",
                        two_kappa / TWO_PI,
                        expected / TWO_PI
                    ),
                });
            }
        }
        params.resolve_static_shifts()?;

        for (j, m) in params.mechanical.iter().enumerate() {
            let nbar = m.nbar();
            if nbar < 100.0 {
                params
                    .warnings
                    .push(format!("mode {}: nbar = {nbar:.3e} < 100, classical treatment questionable", j + 1));
            }
        }
        if depth > 0.3 {
            params
                .warnings
                .push(format!("mod_depth_rad = {depth} exceeds the small-modulation regime (0.3)"));
        }
        Ok(params)
    }
}

/// Derived quantities reported by the `derived` command.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedReport {
    pub kappa: [f64; 2],
    pub drive_rate: [f64; 2],
    pub photon_number: [f64; 2],
    pub x_zpf: [f64; 2],
    pub nbar: [f64; 2],
    pub thermal_displacement: [f64; 2],
    pub xi_thermal: [f64; 2],
    pub mass: [f64; 2],
    pub static_shift: [Complex64; 2],
    pub bare_detuning: [f64; 2],
    pub detuning: [f64; 2],
    pub finesse: f64,
    pub response_length: f64,
    pub xi_cav: f64,
}

pub fn derived_params(p: &SystemParams) -> DerivedReport {
    let finesse = p.finesse();
    let response_length = p.probe().wavelength / (2.0 * finesse);
    let m1 = &p.mechanical[0];
    let xi_cav = 2.0 * m1.reference_coupling() / m1.omega * response_length / (2.0 * m1.x_zpf());
    let photons = p.photon_numbers([p.optical[0].detuning, p.optical[1].detuning]);
    let map_m = |f: &dyn Fn(&MechanicalMode) -> f64| [f(&p.mechanical[0]), f(&p.mechanical[1])];
    let map_o = |f: &dyn Fn(&OpticalMode) -> f64| [f(&p.optical[0]), f(&p.optical[1])];
    DerivedReport {
        kappa: map_o(&|o| o.kappa()),
        drive_rate: map_o(&|o| o.drive_rate()),
        photon_number: photons,
        x_zpf: map_m(&|m| m.x_zpf()),
        nbar: map_m(&|m| m.nbar()),
        thermal_displacement: map_m(&|m| m.thermal_displacement()),
        xi_thermal: map_m(&|m| m.xi_of_amplitude(m.thermal_displacement() / (2.0 * m.x_zpf()))),
        mass: map_m(&|m| m.mass),
        static_shift: p.static_shifts,
        bare_detuning: map_o(&|o| o.detuning0),
        detuning: map_o(&|o| o.detuning),
        finesse,
        response_length,
        xi_cav,
    }
}

impl DerivedReport {
    /// `(key, value, unit)` rows; angular rates are reported in Hz.
    pub fn rows(&self) -> Vec<(String, f64, &'static str)> {
        let mut r = Vec::new();
        for i in 0..2 {
            let name = ["pump", "probe"][i];
            r.push((format!("{name}_kappa"), self.kappa[i] / TWO_PI, "Hz"));
            r.push((format!("{name}_drive_rate"), self.drive_rate[i], "s^-1"));
            r.push((format!("{name}_photon_number"), self.photon_number[i], "1"));
            r.push((format!("{name}_bare_detuning"), self.bare_detuning[i] / TWO_PI, "Hz"));
            r.push((format!("{name}_detuning"), self.detuning[i] / TWO_PI, "Hz"));
        }
        for j in 0..2 {
            let n = j + 1;
            r.push((format!("mass{n}"), self.mass[j], "kg"));
            r.push((format!("x_zpf{n}"), self.x_zpf[j], "m"));
            r.push((format!("nbar{n}"), self.nbar[j], "1"));
            r.push((format!("q_th{n}"), self.thermal_displacement[j], "m"));
            r.push((format!("xi_th{n}"), self.xi_thermal[j], "1"));
            r.push((format!("static_shift{n}_re"), self.static_shift[j].re, "1"));
            r.push((format!("static_shift{n}_im"), self.static_shift[j].im, "1"));
        }
        r.push(("finesse".into(), self.finesse, "1"));
        r.push(("response_length".into(), self.response_length, "m"));
        r.push(("xi_cav".into(), self.xi_cav, "1"));
        r
    }

    pub fn to_text(&self) -> String {
        self.rows()
            .iter()
            .map(|(k, v, u)| format!("{k} = {v:e} {u}\n"))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("key,value,unit\n");
        for (k, v, u) in self.rows() {
            let _ = writeln!(s, "{k},{v:e},{u}");
        }
        s
    }
}

/// Reference parameter set of the measured device.
///
/// Masses are the effective masses implied by the reported thermal
/// displacements (3.365 pm and 3.32 pm at 300 K).
pub const REFERENCE_CONFIG: &str = "\
# Two-membrane sandwich, parameter set of the reported pre-synchronization run
omega1_hz = 230795
omega2_hz = 233759
gamma1_hz = 1.64
gamma2_hz = 9.37
g1_hz = 0.4225
g2_hz = 0.6965
mass1_kg = 1.74e-10
mass2_kg = 1.74e-10
temperature_k = 300
pump_detuning_hz = 259350
probe_detuning_hz = 3900
pump_power_w = 4.25e-6
probe_power_w = 5.9e-6
kappa_in_hz = 8350
kappa_ex_hz = 58700
kappa_loss_hz = 50350
wavelength_m = 1064e-9
fsr_hz = 1.67e9
mod_depth_rad = 0.02
omega_b_hz = 225350
lo_phase = auto
";

pub fn reference_params() -> SystemParams {
    SystemParams::from_config_str(REFERENCE_CONFIG).expect("built-in parameter table is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn reference_set_accepted() {
        let p = reference_params();
        assert!(rel(p.probe().kappa(), TWO_PI * 67.05e3) < 1e-12);
        assert!(rel(2.0 * p.probe().kappa(), TWO_PI * 134e3) < 0.01);
        assert!(p.warnings.is_empty(), "{:?}", p.warnings);
    }

    #[test]
    fn zero_gamma_rejected() {
        let text = REFERENCE_CONFIG.replace("gamma1_hz = 1.64", "gamma1_hz = 0");
        assert_eq!(
            SystemParams::from_config_str(&text).unwrap_err(),
            ConfigError::NonPositiveRate("gamma".into())
        );
        assert_eq!(
            SystemParams::from_config_str(&text).unwrap_err().to_string(),
            "non-positive rate: gamma"
        );
    }

    #[test]
    fn missing_and_unknown_keys() {
        let text = REFERENCE_CONFIG.replace("fsr_hz = 1.67e9\n", "");
        assert_eq!(
            SystemParams::from_config_str(&text).unwrap_err(),
            ConfigError::MissingKey("fsr_hz".into())
        );
        let text = format!("{REFERENCE_CONFIG}bogus_hz = 3\n");
        assert_eq!(
            SystemParams::from_config_str(&text).unwrap_err(),
            ConfigError::UnknownKey("bogus_hz".into())
        );
    }

    #[test]
    fn unit_tokens() {
        let text = REFERENCE_CONFIG.replace("pump_power_w = 4.25e-6", "pump_power_w = 4.25 uW");
        let p = SystemParams::from_config_str(&text).unwrap();
        assert!(rel(p.pump().power, 4.25e-6) < 1e-12);
        let text = REFERENCE_CONFIG.replace("pump_power_w = 4.25e-6", "pump_power_w = 4.25 Hz");
        assert!(matches!(
            SystemParams::from_config_str(&text),
            Err(ConfigError::Unit { .. })
        ));
    }

    #[test]
    fn nbar_matches_classical_formula() {
        let p = reference_params();
        let m = &p.mechanical[0];
        let classical = K_B * 300.0 / (HBAR * TWO_PI * 230.795e3);
        assert!(rel(m.nbar() + 0.5, classical) < 1e-9);
        assert!(rel(classical, 2.7083e7) < 1e-4);
    }

    #[test]
    fn zero_point_identity() {
        let p = reference_params();
        for m in &p.mechanical {
            let x = m.x_zpf();
            assert!(rel(x * x * 2.0 * m.mass * m.omega, HBAR) < 1e-14);
        }
    }

    #[test]
    fn thermal_displacement_and_response_length() {
        let d = reference_params().derived();
        assert!(rel(d.thermal_displacement[0], 3.365e-12) < 0.01);
        assert!(rel(d.thermal_displacement[1], 3.32e-12) < 0.01);
        assert!(rel(d.response_length, 43e-12) < 0.02);
        // (2 g1 / w1) (lambda / 2F) / (2 x_zpf), evaluated independently
        let x_zpf = (HBAR / (2.0 * 1.74e-10 * TWO_PI * 230.795e3)).sqrt();
        let f = 1.67e9 / (2.0 * 67.05e3);
        let expected = 2.0 * 0.4225 / 230.795e3 * (1064e-9 / (2.0 * f)) / (2.0 * x_zpf);
        assert!(rel(d.xi_cav, expected) < 1e-12);
    }

    #[test]
    fn geometry_mass() {
        let geo = MembraneGeometry { lx: 1.519e-3, ly: 1.536e-3, thickness: 106e-9, density: 3100.0 };
        let expected = 3100.0 * 1.519e-3 * 1.536e-3 * 106e-9 / 4.0;
        assert!(rel(geo.effective_mass(), expected) < 1e-15);
        let text = REFERENCE_CONFIG.replace(
            "mass1_kg = 1.74e-10",
            "membrane1_lx_m = 1.519e-3\nmembrane1_ly_m = 1.536e-3\nmembrane1_thickness_m = 106e-9",
        );
        let p = SystemParams::from_config_str(&text).unwrap();
        assert!(rel(p.mechanical[0].mass, expected) < 1e-15);
        // thermal displacement from geometry agrees with the explicit-mass value within 10%
        assert!(rel(p.mechanical[0].thermal_displacement(), 3.365e-12) < 0.10);
    }

    #[test]
    fn zero_temperature_limit() {
        let text = REFERENCE_CONFIG.replace("temperature_k = 300", "temperature_k = 0");
        let p = SystemParams::from_config_str(&text).unwrap();
        assert_eq!(p.mechanical[0].thermal_displacement(), 0.0);
        assert_eq!(p.mechanical[0].nbar(), 0.0);
    }

    #[test]
    fn static_shift_balance() {
        let p = reference_params();
        for (j, m) in p.mechanical.iter().enumerate() {
            let photons = p.photon_numbers([p.optical[0].detuning, p.optical[1].detuning]);
            let force: f64 = (0..2).map(|i| m.g[i] * photons[i]).sum();
            let residual = Complex64::new(-m.gamma, -m.omega) * p.static_shifts[j] + Complex64::i() * force;
            assert!(residual.norm() < 1e-9 * force);
        }
        for o in &p.optical {
            let shift = o.detuning - o.detuning0;
            assert!(shift > 0.0 && shift < TWO_PI * 200.0);
        }
    }

    #[test]
    fn bare_detuning_round_trip() {
        let p = reference_params();
        let text = REFERENCE_CONFIG.replace(
            "probe_detuning_hz = 3900",
            &format!("probe_bare_detuning_hz = {:e}", p.probe().detuning0 / TWO_PI),
        );
        let q = SystemParams::from_config_str(&text).unwrap();
        assert!(rel(q.probe().detuning, p.probe().detuning) < 1e-9);
    }

    #[test]
    fn finesse_consistency_checked() {
        let ok = format!("{REFERENCE_CONFIG}finesse = 12463\n");
        assert!(SystemParams::from_config_str(&ok).is_ok());
        let bad = format!("{REFERENCE_CONFIG}finesse = 20000\n");
        assert!(matches!(
            SystemParams::from_config_str(&bad),
            Err(ConfigError::InvalidValue { key, .. }) if key == "finesse"
        ));
    }

    #[test]
    fn derived_report_formats() {
        let d = reference_params().derived();
        let csv = d.to_csv();
        assert!(csv.starts_with("key,value,unit\n"));
        assert!(csv.contains("xi_cav,"));
        assert!(d.to_text().contains("q_th1 = "));
    }
}
