//! Command-line front end. Every subcommand reads one configuration file and
//! writes plot-ready CSV or binary files into the output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;

use crate::bessel::Truncation;
use crate::cavity_response::{reflection_set, ToneId};
use crate::detection::{
    calibrate_series, homodyne_asn, ratio_sweep, resolve_lo_phase, synthetic_voltage, thermal_g2a2,
    CalibrationOptions, HomodyneConfig, RatioKind, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::io::{self, ColumnarWriter, FileKind, Header};
use crate::langevin::{
    default_decimation, parse_power, reflection_sample, simulate_langevin_with, thermal_draw, DriveSchedule, DEFAULT_DT,
};
use crate::model::{SystemParams, PROBE, TWO_PI};
use crate::slowflow::{
    integrate_amplitude_eqs, limit_cycle_solve_mode, multistability_boundary, power_scan, second_mode_steady,
    sync_measure, threshold_power_with, window_samples, RootSearch, SlowFlowSettings,
};
use crate::spectral::{band_variance, spectrogram, welch_psd, Window};

#[derive(Debug, Parser)]
#[command(name = "twomembrane", version, about = "Two-membrane cavity optomechanics simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Parameter file (`key = value` lines)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Bessel series truncation order M (default ceil(3 xi) + 20)
    #[arg(long)]
    pub truncation: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Source {
    T1,
    Tsb,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full Langevin integration; writes trajectory.bin and voltage.bin
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Physical time [s]; defaults to the schedule length
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        /// Pump schedule `power:duration,...`, e.g. `off:10,4.25uW:15,6.0uW:25`
        #[arg(long)]
        schedule: Option<String>,
        /// Stored-sample decimation (default: about 2 MS/s)
        #[arg(long)]
        decimation: Option<usize>,
    },
    /// Amplitude equations; writes slow_trajectory.bin and sync.csv
    Slowflow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 2e-4)]
        dt: f64,
        /// Pump power (single value, e.g. 4.25uW)
        #[arg(long)]
        power: Option<String>,
        /// Synchronization window [s]
        #[arg(long, default_value_t = 0.1)]
        window: f64,
        #[arg(long, default_value_t = 10)]
        decimation: usize,
    },
    /// Limit-cycle roots, thresholds and pump-power scans
    LimitCycle {
        #[command(flatten)]
        common: Common,
        /// Pump power scan `start:step:stop`, e.g. 1uW:5uW:1mW
        #[arg(long)]
        power: Option<String>,
        #[arg(long, default_value_t = 5.0)]
        xi_max: f64,
        /// Also locate the multistability boundary (slower)
        #[arg(long)]
        multistability: bool,
    },
    /// Tone amplitudes, ratios and correction factors over a grid of xi
    ResponseSweep {
        #[command(flatten)]
        common: Common,
        /// `start:step:stop`
        #[arg(long, default_value = "0:0.01:2")]
        xi: String,
    },
    /// Calibration of a voltage record (or of a synthetic steady state)
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// voltage.bin from `simulate`; omitted: synthetic record
        #[arg(long)]
        input: Option<PathBuf>,
        /// xi of the synthetic record (default: limit-cycle root)
        #[arg(long)]
        xi: Option<String>,
        /// Ratio used to infer xi
        #[arg(long, value_enum, default_value_t = Source::T1)]
        source: Source,
        /// Branch hint for the inversion
        #[arg(long)]
        hint: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Only the last `duration` seconds of the input are analysed
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Spectrogram and band variances of a voltage record
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Band `LO:HI` in Hz; repeatable
        #[arg(long)]
        band: Vec<String>,
        /// Frequency span kept in the spectrogram files, `LO:HI` in Hz
        #[arg(long, default_value = "220000:240000")]
        span: String,
        /// Segment length [s]
        #[arg(long, default_value_t = 0.5)]
        segment: f64,
    },
    /// Synchronization measure of a stored trajectory
    Sync {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Window [s]
        #[arg(long, default_value_t = 0.1)]
        window: f64,
    },
    /// Derived-parameter report
    Derived {
        #[command(flatten)]
        common: Common,
    },
}

/// Exit code of an error: 1 configuration, 2 numerical, 3 i/o.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 2,
    }
}

/// Parses `argv` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(common: &Common) -> Result<(SystemParams, Truncation)> {
    let path = common.config.display().to_string();
    let text = std::fs::read_to_string(&common.config).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let p = SystemParams::from_config_str(&text)?;
    for w in &p.warnings {
        eprintln!("warning: {path}: {w}");
    }
    std::fs::create_dir_all(&common.out).map_err(|e| Error::Io {
        path: common.out.display().to_string(),
        source: e,
    })?;
    let trunc = common.truncation.map_or(Truncation::Auto, Truncation::Fixed);
    Ok((p, trunc))
}

fn seed_or_entropy(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s: u64 = rand::random();
        eprintln!("seed = {s} (from entropy)");
        s
    })
}

fn parse_number(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("'{s}' is not a number")))
}

/// `start:step:stop` (inclusive) or a single value.
pub fn parse_range(s: &str, value: impl Fn(&str) -> Result<f64>) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [v] => Ok(vec![value(v)?]),
        [a, b, c] => {
            let (a, step, c) = (value(a)?, value(b)?, value(c)?);
            if !(step > 0.0) || c < a {
                return Err(Error::invalid(format!("range '{s}' needs step > 0 and stop >= start")));
            }
            let n = ((c - a) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|k| a + k as f64 * step).collect())
        }
        _ => Err(Error::invalid(format!("range '{s}' is not start:step:stop"))),
    }
}

/// `LO:HI`.
pub fn parse_band(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("band '{s}' is not LO:HI")))?;
    let (a, b) = (parse_number(a)?, parse_number(b)?);
    if !(b > a) {
        return Err(Error::invalid(format!("band '{s}' needs HI > LO")));
    }
    Ok((a, b))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { common, seed, duration, dt, schedule, decimation } => {
            simulate(&common, seed, duration, dt, schedule, decimation)
        }
        Command::Slowflow { common, seed, duration, dt, power, window, decimation } => {
            slowflow(&common, seed, duration, dt, power, window, decimation)
        }
        Command::LimitCycle { common, power, xi_max, multistability } => {
            limit_cycle(&common, power, xi_max, multistability)
        }
        Command::ResponseSweep { common, xi } => response_sweep(&common, &xi),
        Command::Calibrate { common, input, xi, source, hint, seed, duration } => {
            calibrate_cmd(&common, input, xi, source, hint, seed, duration)
        }
        Command::Spectra { common, input, band, span, segment } => spectra(&common, &input, &band, &span, segment),
        Command::Sync { common, input, window } => sync(&common, &input, window),
        Command::Derived { common } => {
            let (p, _) = load(&common)?;
            let d = p.derived();
            print!("{}", d.to_text());
            io::write_text(&common.out.join("derived.csv"), &d.to_csv())
        }
    }
}

fn simulate(
    common: &Common,
    seed: Option<u64>,
    duration: Option<f64>,
    dt: f64,
    schedule: Option<String>,
    decimation: Option<usize>,
) -> Result<()> {
    let (p, trunc) = load(common)?;
    let sched = match &schedule {
        Some(s) => DriveSchedule::parse(s)?,
        None => DriveSchedule::constant(p.pump().power),
    };
    let duration = duration
        .or(sched.duration())
        .ok_or_else(|| Error::invalid("--duration is required without a timed --schedule"))?;
    let seed = seed_or_entropy(seed);
    let k = decimation.unwrap_or_else(|| default_decimation(dt));
    let hc = HomodyneConfig::from_params(&p);
    let phi = resolve_lo_phase(&hc, &p, trunc)?;
    let gain = hc.gain();
    let e_lo = Complex64::from_polar(1.0, -phi);

    let traj_path = common.out.join("trajectory.bin");
    let volt_path = common.out.join("voltage.bin");
    let mut tw = ColumnarWriter::create(&traj_path, &Header::new(FileKind::Langevin, &p, dt, k as u64, seed, 0.0))?;
    let mut vw = ColumnarWriter::create(&volt_path, &Header::new(FileKind::Voltage, &p, dt, k as u64, seed, 0.0))?;
    let mut failure: Option<Error> = None;
    simulate_langevin_with(&p, &sched, seed, dt, duration, k, |s| {
        if failure.is_some() {
            return;
        }
        let (a, b) = (s.alpha, s.beta);
        let row = [s.t, a[0].re, a[0].im, a[1].re, a[1].im, b[0].re, b[0].im, b[1].re, b[1].im];
        let v = gain * (reflection_sample(s.t, a[PROBE], &p) * e_lo).re;
        if let Err(e) = tw.write_row(&row).and_then(|_| vw.write_row(&[s.t, v])) {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let rows = tw.finish()?;
    vw.finish()?;
    println!("seed = {seed}");
    println!("samples = {rows} at {:.6e} s", dt * k as f64);
    println!("lo_phase_rad = {phi}");
    println!("wrote {} and {}", traj_path.display(), volt_path.display());
    Ok(())
}

fn slowflow(
    common: &Common,
    seed: Option<u64>,
    duration: f64,
    dt: f64,
    power: Option<String>,
    window: f64,
    decimation: usize,
) -> Result<()> {
    let (p, trunc) = load(common)?;
    let seed = seed_or_entropy(seed);
    let pump_power = power.as_deref().map(parse_power).transpose()?;
    let settings = SlowFlowSettings { dt, duration, truncation: trunc, decimation, pump_power };
    let a0 = [
        thermal_draw(seed, 0, p.mechanical[0].nbar()),
        thermal_draw(seed, 1, p.mechanical[1].nbar()),
    ];
    let tr = integrate_amplitude_eqs(&p, a0[0], a0[1], seed, &settings)?;
    io::write_slow_trajectory(&common.out.join("slow_trajectory.bin"), &tr, &p)?;
    let (th1, th2) = tr.phases();
    let w = window_samples(window, dt * tr.decimation as f64);
    let pm = sync_measure(&th1, &th2, w)?;
    let t0 = tr.t[(w - 1) / 2];
    let dts = tr.t.get(1).map_or(0.0, |t| t - tr.t[0]);
    io::write_csv(
        &common.out.join("sync.csv"),
        &["t_s", "p_theta_minus"],
        pm.iter().enumerate().map(|(k, v)| vec![t0 + k as f64 * dts, *v]),
    )?;
    let tail = &tr.a1[tr.a1.len() / 2..];
    let mean = tail.iter().map(|a| a.norm()).sum::<f64>() / tail.len() as f64;
    println!("seed = {seed}");
    println!(
        "mean 2|A1| x_zpf over second half = {:.6e} m",
        p.mechanical[0].displacement(mean)
    );
    Ok(())
}

fn limit_cycle(common: &Common, power: Option<String>, xi_max: f64, multistability: bool) -> Result<()> {
    let (p, trunc) = load(common)?;
    let search = RootSearch { xi_max, ..RootSearch::default() };
    let lc = limit_cycle_solve_mode(&p, 0, search, trunc)?;
    let m1 = &p.mechanical[0];
    io::write_csv(
        &common.out.join("roots.csv"),
        &["xi", "stable", "q_m"],
        lc.roots.iter().map(|r| {
            vec![r.xi, r.stable as u8 as f64, m1.displacement(r.xi * m1.omega / (2.0 * m1.reference_coupling()))]
        }),
    )?;
    match &lc.chosen {
        Some(c) => {
            println!("xi_st = {:.6}", c.xi);
            println!("q_st = {:.6e} m", c.displacement);
            println!("delta_omega_eff = {:.6e} rad/s ({:.4} Hz)", c.delta_omega_eff, c.delta_omega_eff / TWO_PI);
            match second_mode_steady(&p, &lc, trunc) {
                Ok(s) => {
                    println!("gamma2_eff = {:.6e} rad/s", s.gamma2_eff);
                    println!("sqrt(gamma2 / gamma2_eff) = {:.6}", s.enhancement);
                    println!("sync displacement = {:.6e} m", s.sync_displacement);
                    println!("|d12|^2 I1^2 = {:.6e}, gamma2 gamma2_eff nbar2 = {:.6e}", s.criterion_lhs, s.criterion_rhs);
                    println!("fully synchronized = {}", s.fully_synchronized);
                }
                Err(e) => println!("second mode: {e}"),
            }
        }
        None => println!("no stable limit cycle"),
    }
    let t1 = threshold_power_with(&p, 0, search, trunc)?;
    let t2 = threshold_power_with(&p, 1, search, trunc)?;
    println!("threshold mode 1 = {t1:.6e} W");
    println!("threshold mode 2 = {t2:.6e} W");
    let mut summary = vec![vec![t1, t2, f64::NAN]];
    if multistability {
        let b = multistability_boundary(&p, 10e-6, 2e-3, 200, 1e-4, search, trunc)?;
        match b {
            Some(b) => println!("multistability onset = {b:.6e} W"),
            None => println!("no multistability below 2 mW"),
        }
        summary[0][2] = b.unwrap_or(f64::NAN);
    }
    io::write_csv(
        &common.out.join("thresholds.csv"),
        &["threshold1_w", "threshold2_w", "multistability_w"],
        summary,
    )?;

    let spec = power.unwrap_or_else(|| "1uW:5uW:1mW".into());
    let powers = parse_range(&spec, parse_power)?;
    let scan = power_scan(&p, &powers, search, trunc)?;
    let mut rows = Vec::new();
    let mut all_roots = Vec::new();
    for (pw, sol) in &scan {
        for r in &sol.roots {
            all_roots.push(vec![*pw, r.xi, r.stable as u8 as f64]);
        }
        let q = p.with_pump_power(*pw)?;
        let (xi, disp) = sol.chosen.map_or((f64::NAN, f64::NAN), |c| (c.xi, c.displacement));
        let (g2, sync, enh) = match second_mode_steady(&q, sol, trunc) {
            Ok(s) => (s.gamma2_eff, s.sync_displacement, s.enhancement),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN),
        };
        rows.push(vec![*pw, sol.roots.len() as f64, xi, disp, g2, sync, enh]);
    }
    io::write_csv(
        &common.out.join("power_scan.csv"),
        &["power_w", "n_roots", "xi_st", "q1_m", "gamma2_eff", "sync_q2_m", "enhancement"],
        rows,
    )?;
    io::write_csv(&common.out.join("power_roots.csv"), &["power_w", "xi", "stable"], all_roots)?;
    Ok(())
}

fn response_sweep(common: &Common, xi: &str) -> Result<()> {
    let (p, trunc) = load(common)?;
    let xis = parse_range(xi, parse_number)?;
    if xis.iter().any(|x| *x < 0.0) {
        return Err(Error::invalid("xi must be non-negative"));
    }
    let g2a2 = thermal_g2a2(&p);
    let tones = [ToneId::Omega1, ToneId::Omega2, ToneId::OmegaSm, ToneId::OmegaB, ToneId::OmegaSb];
    let mut rows = Vec::with_capacity(xis.len());
    for &x in &xis {
        let rs = reflection_set(x, g2a2, &p, trunc)?;
        let mut row = vec![x];
        for t in tones {
            let (a, b) = rs.get(t);
            row.push(homodyne_asn(a, b));
        }
        let dc = rs.dc();
        row.extend([dc.re, dc.im, crate::detection::lo_phase_lock(dc)?]);
        rows.push(row);
    }
    io::write_csv(
        &common.out.join("response.csv"),
        &["xi", "vh_w1", "vh_w2", "vh_wsm", "vh_wb", "vh_wsb", "r_dc_re", "r_dc_im", "lo_phase_rad"],
        rows,
    )?;
    let sweep = ratio_sweep(&xis, &p, trunc)?;
    io::write_csv(
        &common.out.join("ratios.csv"),
        &["xi", "t1", "t2", "tsb", "n1", "n2"],
        sweep
            .iter()
            .map(|r| vec![r.xi, r.ratios.t1, r.ratios.t2, r.ratios.tsb, r.n1, r.n2]),
    )?;
    println!("wrote response.csv and ratios.csv ({} rows)", xis.len());
    Ok(())
}

fn calibrate_cmd(
    common: &Common,
    input: Option<PathBuf>,
    xi: Option<String>,
    source: Source,
    hint: Option<f64>,
    seed: Option<u64>,
    duration: Option<f64>,
) -> Result<()> {
    let (p, trunc) = load(common)?;
    let hc = HomodyneConfig::from_params(&p);
    let phi_lo = resolve_lo_phase(&hc, &p, trunc)?;
    let (v, fs) = match &input {
        Some(path) => {
            let (h, _, v) = io::read_voltage(path)?;
            let fs = 1.0 / h.sample_interval();
            let keep = duration.map_or(v.len(), |d| ((d * fs) as usize).min(v.len()));
            (v[v.len() - keep..].to_vec(), fs)
        }
        None => {
            let xi = match xi {
                Some(s) => parse_number(&s)?,
                None => limit_cycle_solve_mode(&p, 0, RootSearch::default(), trunc)?
                    .chosen
                    .ok_or_else(|| Error::NoSolution("no limit cycle: pass --xi".into()))?
                    .xi,
            };
            let ds = SyntheticDataset {
                xi,
                g2a2: thermal_g2a2(&p),
                fs: 600e3,
                duration: duration.unwrap_or(2.0),
                noise_rms: 1e-3,
                seed: seed_or_entropy(seed),
            };
            println!("synthetic record at xi = {xi}");
            (synthetic_voltage(&ds, &p, phi_lo, trunc)?, ds.fs)
        }
    };
    let opts = CalibrationOptions {
        source: match source {
            Source::T1 => RatioKind::T1,
            Source::Tsb => RatioKind::Tsb,
        },
        hint,
        phi_lo,
        truncation: trunc,
    };
    let rep = calibrate_series(&v, fs, &p, &opts)?;
    print!("{}", rep.to_text());
    io::write_text(&common.out.join("calibration.csv"), &rep.to_csv())?;
    io::write_text(&common.out.join("calibration.txt"), &rep.to_text())
}

fn spectra(common: &Common, input: &Path, bands: &[String], span: &str, segment: f64) -> Result<()> {
    let (_p, _) = load(common)?;
    let (h, _, v) = io::read_voltage(input)?;
    let fs = 1.0 / h.sample_interval();
    let seg = ((segment * fs).round() as usize).max(2);
    let range = parse_band(span)?;
    let sg = spectrogram(&v, fs, seg, (seg / 2).max(1), Window::Hann, Some(range))?;
    io::write_text(&common.out.join("spectrogram.csv"), &sg.to_csv_matrix())?;
    io::write_text(&common.out.join("spectrogram_long.csv"), &sg.to_csv_long())?;
    let psd = welch_psd(&v, fs, seg.min(v.len()), 0.5, Window::Hann)?;
    io::write_csv(
        &common.out.join("psd.csv"),
        &["f_hz", "psd_v2_per_hz"],
        psd.freqs
            .iter()
            .zip(&psd.values)
            .filter(|(f, _)| **f >= range.0 && **f <= range.1)
            .map(|(f, v)| vec![*f, *v]),
    )?;
    if !bands.is_empty() {
        let parsed: Vec<(f64, f64)> = bands.iter().map(|b| parse_band(b)).collect::<Result<_>>()?;
        let cols: Vec<Vec<f64>> = parsed
            .iter()
            .map(|&(lo, hi)| band_variance(&sg, lo, hi))
            .collect::<Result<_>>()?;
        let names: Vec<String> = parsed.iter().map(|(lo, hi)| format!("var_{lo}_{hi}")).collect();
        let mut header = vec!["t_s"];
        header.extend(names.iter().map(String::as_str));
        io::write_csv(
            &common.out.join("band_variance.csv"),
            &header,
            sg.times.iter().enumerate().map(|(k, t)| {
                let mut r = vec![*t];
                r.extend(cols.iter().map(|c| c[k]));
                r
            }),
        )?;
    }
    println!("{} columns, {} bins, df = {} Hz", sg.times.len(), sg.freqs.len(), sg.df);
    Ok(())
}

fn sync(common: &Common, input: &Path, window: f64) -> Result<()> {
    let (_p, _) = load(common)?;
    let (h, _) = io::read_columnar(input)?;
    let (t, th1, th2): (Vec<f64>, Vec<f64>, Vec<f64>) = match h.kind {
        FileKind::Slow => {
            let (_, tr) = io::read_slow_trajectory(input)?;
            let (a, b) = tr.phases();
            (tr.t, a, b)
        }
        FileKind::Langevin => {
            let (_, tr) = io::read_trajectory(input)?;
            let a = tr.beta1.iter().map(|b| b.arg()).collect();
            let b = tr.beta2.iter().map(|b| b.arg()).collect();
            (tr.t, a, b)
        }
        FileKind::Voltage => {
            return Err(Error::Format {
                path: input.display().to_string(),
                msg: "voltage files carry no mechanical phases".into(),
            })
        }
    };
    let w = window_samples(window, h.sample_interval());
    let pm = sync_measure(&th1, &th2, w)?;
    let off = (w - 1) / 2;
    io::write_csv(
        &common.out.join("sync.csv"),
        &["t_s", "p_theta_minus"],
        pm.iter().enumerate().map(|(k, v)| vec![t[k + off], *v]),
    )?;
    println!("{} points, window {} samples", pm.len(), w);
    Ok(())
}
