//! Classical stochastic Langevin equations for two optical and two mechanical
//! modes, with thermal noise, probe phase modulation and a pump power schedule.
//!
//! Optical amplitudes are in the frame of each laser; mechanical amplitudes in
//! the lab frame, in units of the zero-point width.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{ProbeModulation, SystemParams, PROBE, PUMP, TWO_PI};

const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default integration step [s].
pub const DEFAULT_DT: f64 = 20e-9;

/// Stored sample rate aimed at by the default decimation [Hz].
pub const DEFAULT_STORED_RATE: f64 = 2e6;

/// Stream offset for the initial-condition draws.
const INITIAL_STREAM: u64 = 1000;

/// Gaussian white input `beta_in` sampled on a grid of spacing `dt`: real and
/// imaginary parts independent with variance `(nbar + 1/2) / (2 dt)`.
#[derive(Debug, Clone)]
pub struct ThermalNoise {
    rng: ChaCha8Rng,
    sigma: f64,
}

impl ThermalNoise {
    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn new(seed: u64, stream: u64, nbar: f64, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let var = (nbar + 0.5) / (2.0 * dt);
        Self { rng, sigma: if var > 0.0 { var.sqrt() } else { 0.0 } }
    }

    #[inline]
    pub fn sample(&mut self) -> Complex64 {
        let re: f64 = StandardNormal.sample(&mut self.rng);
        let im: f64 = StandardNormal.sample(&mut self.rng);
        Complex64::new(re * self.sigma, im * self.sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// `n_steps` samples of the thermal input for one mode.
pub fn thermal_noise_stream(seed: u64, nbar: f64, dt: f64, n_steps: usize) -> Result<Vec<Complex64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut n = ThermalNoise::new(seed, 0, nbar, dt);
    Ok((0..n_steps).map(|_| n.sample()).collect())
}

/// Complex amplitude drawn from thermal equilibrium, `<|b|^2> = nbar + 1/2`.
pub fn thermal_draw(seed: u64, mode: usize, nbar: f64) -> Complex64 {
    let mut init = ThermalNoise::new(seed, INITIAL_STREAM + mode as u64, nbar, 0.5);
    // sigma^2 = (nbar + 1/2) / (2 * 0.5) per quadrature; halve for the total
    init.sample() * std::f64::consts::FRAC_1_SQRT_2
}

/// Probe drive `E exp(-i beta sin(w_b t))`.
#[inline]
pub fn probe_input(t: f64, e: f64, m: &ProbeModulation) -> Complex64 {
    let (s, c) = (-m.depth * (m.omega_b * t).sin()).sin_cos();
    Complex64::new(e * c, e * s)
}

/// Piecewise-constant pump power. Probe power is held at its configured value.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveSchedule {
    /// `(t_start [s], pump power [W])`, strictly increasing in time.
    segments: Vec<(f64, f64)>,
    /// End of the last segment, when the schedule was given with durations.
    end: Option<f64>,
}

impl DriveSchedule {
    pub fn new(segments: Vec<(f64, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("drive schedule is empty"));
        }
        for w in segments.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("drive schedule start times must increase strictly"));
            }
        }
        if segments.iter().any(|&(t, pw)| !(pw >= 0.0) || !t.is_finite()) {
            return Err(Error::invalid("drive schedule powers must be non-negative"));
        }
        Ok(Self { segments, end: None })
    }

    pub fn constant(power: f64) -> Self {
        Self { segments: vec![(0.0, power.max(0.0))], end: None }
    }

    /// Parses `power:duration,...`, e.g. `off:10,4.25uW:15,6.0uW:25`. Powers
    /// take `off`, a bare number in W, or a number with `W`, `mW`, `uW`, `nW`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut t = 0.0;
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (pw, dur) = part
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("schedule segment '{part}' is not power:duration")))?;
            let power = parse_power(pw.trim())?;
            let dur: f64 = dur
                .trim()
                .trim_end_matches('s')
                .parse()
                .map_err(|_| Error::invalid(format!("bad duration in schedule segment '{part}'")))?;
            if !(dur > 0.0) {
                return Err(Error::invalid(format!("non-positive duration in schedule segment '{part}'")));
            }
            segments.push((t, power));
            t += dur;
        }
        let mut s = Self::new(segments)?;
        s.end = Some(t);
        Ok(s)
    }

    pub fn power_at(&self, t: f64) -> f64 {
        let k = self.segments.partition_point(|&(ts, _)| ts <= t);
        if k == 0 {
            self.segments[0].1
        } else {
            self.segments[k - 1].1
        }
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    /// Total duration when the schedule was given as durations.
    pub fn duration(&self) -> Option<f64> {
        self.end
    }

    /// Next switching time after `t`, if any.
    fn next_switch(&self, t: f64) -> f64 {
        let k = self.segments.partition_point(|&(ts, _)| ts <= t);
        self.segments.get(k).map_or(f64::INFINITY, |s| s.0)
    }
}

/// Power token: `off`, a bare number in W, or a number with `W`, `mW`, `uW`, `nW`.
pub fn parse_power(s: &str) -> Result<f64> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(0.0);
    }
    let (num, scale) = if let Some(v) = s.strip_suffix("mW") {
        (v, 1e-3)
    } else if let Some(v) = s.strip_suffix("uW").or_else(|| s.strip_suffix("µW")) {
        (v, 1e-6)
    } else if let Some(v) = s.strip_suffix("nW") {
        (v, 1e-9)
    } else if let Some(v) = s.strip_suffix('W') {
        (v, 1.0)
    } else {
        (s, 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad power '{s}' in schedule")))?;
    if !(v >= 0.0) {
        return Err(Error::invalid(format!("negative power '{s}' in schedule")));
    }
    Ok(v * scale)
}

/// Instantaneous state handed to observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinState {
    pub t: f64,
    /// `[pump, probe]`.
    pub alpha: [Complex64; 2],
    pub beta: [Complex64; 2],
}

/// Uniformly sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub alpha1: Vec<Complex64>,
    pub alpha2: Vec<Complex64>,
    pub beta1: Vec<Complex64>,
    pub beta2: Vec<Complex64>,
    pub seed: u64,
    pub dt: f64,
    pub decimation: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sample_interval(&self) -> f64 {
        self.dt * self.decimation as f64
    }
}

/// Largest step resolving the fastest rate, `1 / (25 max(w, |Delta|, kappa) / 2 pi)`.
pub fn dt_limit(p: &SystemParams) -> f64 {
    let mut fastest: f64 = 0.0;
    for m in &p.mechanical {
        fastest = fastest.max(m.omega);
    }
    for o in &p.optical {
        fastest = fastest.max(o.detuning0.abs()).max(o.detuning.abs()).max(o.kappa());
    }
    1.0 / (25.0 * fastest / TWO_PI)
}

/// Decimation giving a stored rate close to 2 MS/s.
pub fn default_decimation(dt: f64) -> usize {
    ((1.0 / (DEFAULT_STORED_RATE * dt)).round() as usize).max(1)
}

#[inline]
fn phi1(z: Complex64) -> Complex64 {
    if z.norm_sqr() < 1e-12 {
        Complex64::new(1.0, 0.0) + z * 0.5 + z * z / 6.0
    } else {
        (z.exp() - 1.0) / z
    }
}

/// Integrates the Langevin equations, calling `observe` every `decimation`
/// steps starting at `t = 0`.
///
/// Per step the optical modes are advanced by the exact exponential of
/// `i Delta0 - kappa + 2 i sum_j g_ij Re beta_j`, with `beta` predicted at the
/// step midpoint by its free rotation and the drive taken at the midpoint; the
/// mechanical modes use the exact exponential of `-i w - gamma`, the
/// radiation-pressure force averaged over the step and the exact
/// Ornstein-Uhlenbeck noise increment.
pub fn simulate_langevin_with<F>(
    p: &SystemParams,
    sched: &DriveSchedule,
    seed: u64,
    dt: f64,
    duration: f64,
    decimation: usize,
    mut observe: F,
) -> Result<()>
where
    F: FnMut(&LangevinState),
{
    if !(duration > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let limit = dt_limit(p);
    if dt > limit {
        return Err(Error::Resolution { dt, limit });
    }
    let decimation = decimation.max(1);
    let i = Complex64::i();

    // Optical constants.
    let mut opt_lin = [Complex64::new(0.0, 0.0); 2];
    let mut opt_prop = [Complex64::new(0.0, 0.0); 2];
    for k in 0..2 {
        let o = &p.optical[k];
        opt_lin[k] = Complex64::new(-o.kappa(), o.detuning0);
        opt_prop[k] = (opt_lin[k] * dt).exp();
    }
    let g = [
        [p.coupling(0, 0), p.coupling(0, 1)],
        [p.coupling(1, 0), p.coupling(1, 1)],
    ];
    let e_probe = p.optical[PROBE].drive_rate();
    let pump_mode = &p.optical[PUMP];

    // Mechanical constants.
    let mut mech_prop = [Complex64::new(0.0, 0.0); 2];
    let mut mech_half = [Complex64::new(0.0, 0.0); 2];
    let mut mech_force = [Complex64::new(0.0, 0.0); 2];
    let mut noise_amp = [0.0; 2];
    let mut noise = Vec::with_capacity(2);
    for j in 0..2 {
        let m = &p.mechanical[j];
        let z = Complex64::new(-m.gamma, -m.omega) * dt;
        mech_prop[j] = z.exp();
        mech_half[j] = (z * 0.5).exp();
        mech_force[j] = phi1(z) * dt * i;
        let x = -2.0 * m.gamma * dt;
        noise_amp[j] = (2.0 * m.gamma).sqrt() * dt * (x.exp_m1() / x).sqrt();
        noise.push(ThermalNoise::new(seed, j as u64, m.nbar(), dt));
    }

    // Initial conditions: static displacement plus a thermal draw.
    let mut beta = [Complex64::new(0.0, 0.0); 2];
    for j in 0..2 {
        let m = &p.mechanical[j];
        beta[j] = p.static_shifts[j] + thermal_draw(seed, j, m.nbar());
    }
    let mut alpha = [Complex64::new(0.0, 0.0); 2];

    let n_steps = (duration / dt).round() as u64;
    let mut state = LangevinState { t: 0.0, alpha, beta };
    observe(&state);

    let mut pump_power = sched.power_at(0.0);
    let mut e_pump = pump_mode.drive_rate_at(pump_power);
    let mut next_switch = sched.next_switch(0.0);

    for step in 0..n_steps {
        let t = step as f64 * dt;
        if t >= next_switch {
            pump_power = sched.power_at(t);
            e_pump = pump_mode.drive_rate_at(pump_power);
            next_switch = sched.next_switch(t);
        }
        let t_mid = t + 0.5 * dt;

        let re_mid = [(mech_half[0] * beta[0]).re, (mech_half[1] * beta[1]).re];
        let drive = [Complex64::new(e_pump, 0.0), probe_input(t_mid, e_probe, &p.modulation)];
        let mut new_alpha = [Complex64::new(0.0, 0.0); 2];
        for k in 0..2 {
            let phase = 2.0 * dt * (g[k][0] * re_mid[0] + g[k][1] * re_mid[1]);
            let (s, c) = phase.sin_cos();
            let prop = opt_prop[k] * Complex64::new(c, s);
            let z = opt_lin[k] * dt + i * phase;
            // (e^z - 1) / z reusing e^z = prop; |z| >= kappa dt keeps it well conditioned
            let f = if z.norm_sqr() < 1e-8 { phi1(z) } else { (prop - 1.0) / z };
            new_alpha[k] = prop * alpha[k] + f * dt * drive[k];
        }
        let n_avg = [
            0.5 * (alpha[0].norm_sqr() + new_alpha[0].norm_sqr()),
            0.5 * (alpha[1].norm_sqr() + new_alpha[1].norm_sqr()),
        ];
        for j in 0..2 {
            let force = g[0][j] * n_avg[0] + g[1][j] * n_avg[1];
            beta[j] = mech_prop[j] * beta[j] + mech_force[j] * force + noise[j].sample() * noise_amp[j];
        }
        alpha = new_alpha;

        let done = step + 1;
        if done % decimation as u64 == 0 || done == n_steps {
            let bad = alpha
                .iter()
                .chain(beta.iter())
                .any(|v| !(v.norm_sqr() < DIVERGENCE_LIMIT * DIVERGENCE_LIMIT));
            if bad {
                return Err(Error::Divergence { time: done as f64 * dt });
            }
            if done % decimation as u64 == 0 {
                state = LangevinState { t: done as f64 * dt, alpha, beta };
                observe(&state);
            }
        }
    }
    Ok(())
}

/// Integrates and stores every `decimation`-th sample.
pub fn simulate_langevin(
    p: &SystemParams,
    sched: &DriveSchedule,
    seed: u64,
    dt: f64,
    duration: f64,
    decimation: usize,
) -> Result<Trajectory> {
    let k = decimation.max(1);
    let cap = (duration / dt / k as f64) as usize + 2;
    let mut tr = Trajectory {
        t: Vec::with_capacity(cap),
        alpha1: Vec::with_capacity(cap),
        alpha2: Vec::with_capacity(cap),
        beta1: Vec::with_capacity(cap),
        beta2: Vec::with_capacity(cap),
        seed,
        dt,
        decimation: k,
    };
    simulate_langevin_with(p, sched, seed, dt, duration, k, |s| {
        tr.t.push(s.t);
        tr.alpha1.push(s.alpha[0]);
        tr.alpha2.push(s.alpha[1]);
        tr.beta1.push(s.beta[0]);
        tr.beta2.push(s.beta[1]);
    })?;
    Ok(tr)
}

/// Output probe field `e_out = -e_in exp(-i beta sin w_b t) + sqrt(2 kappa_in) alpha`.
#[inline]
pub fn output_sample(t: f64, alpha_probe: Complex64, p: &SystemParams) -> Complex64 {
    let o = &p.optical[PROBE];
    -probe_input(t, o.input_amplitude(), &p.modulation) + alpha_probe * (2.0 * o.kappa_in).sqrt()
}

/// Reflection `e_out / e_in` of a single sample.
#[inline]
pub fn reflection_sample(t: f64, alpha_probe: Complex64, p: &SystemParams) -> Complex64 {
    output_sample(t, alpha_probe, p) / p.optical[PROBE].input_amplitude()
}

pub fn output_field(traj: &Trajectory, p: &SystemParams) -> Vec<Complex64> {
    traj.t
        .iter()
        .zip(&traj.alpha2)
        .map(|(&t, &a)| output_sample(t, a, p))
        .collect()
}

/// Reflection coefficient time series `R(t) = e_out(t) / e_in`.
pub fn reflection_series(traj: &Trajectory, p: &SystemParams) -> Vec<Complex64> {
    traj.t
        .iter()
        .zip(&traj.alpha2)
        .map(|(&t, &a)| reflection_sample(t, a, p))
        .collect()
}
