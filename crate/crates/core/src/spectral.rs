//! Time-series analysis: Welch PSD, spectrograms, band variances, lock-in
//! demodulation into slowly varying quadratures, moving averages.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Gain of a cascade of four identical one-pole low-pass stages at their
/// common corner: the -3 dB point sits at `0.43498 f_c`.
const CASCADE_3DB: f64 = 0.434_979_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|k| 0.5 - 0.5 * (std::f64::consts::TAU * k as f64 / n as f64).cos())
                .collect(),
        }
    }
}

/// Single-sided power spectral density [unit^2 / Hz].
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    pub df: f64,
    pub fs: f64,
    pub segment: usize,
    pub n_segments: usize,
}

impl Psd {
    /// `sum PSD df`, the mean square of the input.
    pub fn total_power(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.df
    }

    /// `sum PSD df` over bins with `lo <= f <= hi`.
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        band_sum(&self.freqs, &self.values, lo, hi) * self.df
    }
}

fn band_sum(freqs: &[f64], values: &[f64], lo: f64, hi: f64) -> f64 {
    freqs
        .iter()
        .zip(values)
        .filter(|(f, _)| **f >= lo && **f <= hi)
        .map(|(_, v)| v)
        .sum()
}

/// Periodogram engine shared by the PSD and spectrogram routines.
#[derive(Clone)]
struct Periodogram {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    scale: f64,
    n: usize,
}

impl Periodogram {
    fn new(n: usize, window: Window, fs: f64) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n);
        let window = window.coefficients(n);
        let u: f64 = window.iter().map(|w| w * w).sum();
        Self { fft, window, scale: 1.0 / (fs * u), n }
    }

    fn n_bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// Adds the single-sided periodogram of `x` (length `n`) to `acc`.
    fn accumulate(&self, x: &[f64], acc: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> = x
            .iter()
            .zip(&self.window)
            .map(|(v, w)| Complex::new(v * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        let nyq = self.n / 2;
        for (k, a) in acc.iter_mut().enumerate() {
            let two = if k == 0 || (self.n % 2 == 0 && k == nyq) { 1.0 } else { 2.0 };
            *a += two * self.scale * buf[k].norm_sqr();
        }
    }
}

fn check_segment(len: usize, segment: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::invalid("empty series"));
    }
    if segment < 2 || segment > len {
        return Err(Error::invalid(format!(
            "segment length {segment} must lie in [2, {len}]"
        )));
    }
    Ok(())
}

/// Welch estimate with fractional `overlap` in `[0, 1)`.
pub fn welch_psd(series: &[f64], fs: f64, segment: usize, overlap: f64, window: Window) -> Result<Psd> {
    check_segment(series.len(), segment)?;
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid("overlap must lie in [0, 1)"));
    }
    if !(fs > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let hop = (((1.0 - overlap) * segment as f64).round() as usize).max(1);
    let engine = Periodogram::new(segment, window, fs);
    let starts: Vec<usize> = (0..=series.len() - segment).step_by(hop).collect();
    let values = starts
        .par_iter()
        .fold(
            || vec![0.0; engine.n_bins()],
            |mut acc, &s| {
                engine.accumulate(&series[s..s + segment], &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0.0; engine.n_bins()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let m = starts.len() as f64;
    let df = fs / segment as f64;
    Ok(Psd {
        freqs: (0..engine.n_bins()).map(|k| k as f64 * df).collect(),
        values: values.into_iter().map(|v| v / m).collect(),
        df,
        fs,
        segment,
        n_segments: starts.len(),
    })
}

/// Amplitude of a sinusoid from the PSD: power within `f0 +- half_width`,
/// less the median floor of the adjacent bands out to five half widths,
/// gives `A = sqrt(2 P)`. `None` when the window leaves the spectrum or the
/// excess does not exceed the floor.
pub fn tone_amplitude_from_psd(psd: &Psd, f0: f64, half_width: f64) -> Option<f64> {
    let nyq = psd.fs / 2.0;
    if f0 - 5.0 * half_width < 0.0 || f0 + 5.0 * half_width > nyq {
        return None;
    }
    let mut inside = 0.0;
    let mut n_in = 0usize;
    let mut side = Vec::new();
    for (f, v) in psd.freqs.iter().zip(&psd.values) {
        let d = (f - f0).abs();
        if d <= half_width {
            inside += v;
            n_in += 1;
        } else if d <= 5.0 * half_width {
            side.push(*v);
        }
    }
    if n_in == 0 || side.is_empty() {
        return None;
    }
    side.sort_by(|a, b| a.total_cmp(b));
    let floor = side[side.len() / 2];
    let excess = (inside - floor * n_in as f64) * psd.df;
    if excess > floor * n_in as f64 * psd.df {
        Some((2.0 * excess).sqrt())
    } else {
        None
    }
}

/// Sequence of single-segment periodograms.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Centre time of each column [s].
    pub times: Vec<f64>,
    pub freqs: Vec<f64>,
    /// `power[column][bin]` [unit^2 / Hz].
    pub power: Vec<Vec<f64>>,
    pub df: f64,
    pub segment: usize,
    pub hop: usize,
    pub window: Window,
}

impl Spectrogram {
    pub fn to_csv_matrix(&self) -> String {
        let mut s = String::from("t_s");
        for f in &self.freqs {
            s.push_str(&format!(",{f}"));
        }
        s.push('\n');
        for (t, col) in self.times.iter().zip(&self.power) {
            s.push_str(&t.to_string());
            for v in col {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Long format `t,f,power` with blank lines between columns.
    pub fn to_csv_long(&self) -> String {
        let mut s = String::from("t_s,f_hz,psd\n");
        for (t, col) in self.times.iter().zip(&self.power) {
            for (f, v) in self.freqs.iter().zip(col) {
                s.push_str(&format!("{t},{f},{v}\n"));
            }
            s.push('\n');
        }
        s
    }
}

/// Spectrogram with columns every `hop` samples, keeping bins in
/// `[f_lo, f_hi]` (the whole spectrum when `range` is `None`).
pub fn spectrogram(
    series: &[f64],
    fs: f64,
    segment: usize,
    hop: usize,
    window: Window,
    range: Option<(f64, f64)>,
) -> Result<Spectrogram> {
    check_segment(series.len(), segment)?;
    if hop == 0 {
        return Err(Error::invalid("hop must be positive"));
    }
    let mut b = StreamingSpectrogram::new(fs, segment, hop, window, range)?;
    let starts: Vec<usize> = (0..=series.len() - segment).step_by(hop).collect();
    let cols: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| b.column(&series[s..s + segment]))
        .collect();
    b.columns = cols;
    b.times = starts
        .iter()
        .map(|&s| (s as f64 + segment as f64 / 2.0) / fs)
        .collect();
    Ok(b.finish())
}

/// Incremental spectrogram builder fed sample by sample.
pub struct StreamingSpectrogram {
    engine: Periodogram,
    fs: f64,
    hop: usize,
    window: Window,
    bins: std::ops::Range<usize>,
    buffer: Vec<f64>,
    start: usize,
    skip: usize,
    times: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl StreamingSpectrogram {
    pub fn new(fs: f64, segment: usize, hop: usize, window: Window, range: Option<(f64, f64)>) -> Result<Self> {
        if segment < 2 || hop == 0 || !(fs > 0.0) {
            return Err(Error::invalid("spectrogram needs segment >= 2, hop >= 1 and fs > 0"));
        }
        let engine = Periodogram::new(segment, window, fs);
        let df = fs / segment as f64;
        let nb = engine.n_bins();
        let bins = match range {
            None => 0..nb,
            Some((lo, hi)) => {
                let a = ((lo / df).ceil().max(0.0) as usize).min(nb);
                let b = (((hi / df).floor() as usize) + 1).min(nb);
                if a >= b {
                    return Err(Error::invalid("frequency range contains no bins"));
                }
                a..b
            }
        };
        Ok(Self {
            engine,
            fs,
            hop,
            window,
            bins,
            buffer: Vec::with_capacity(segment),
            start: 0,
            skip: 0,
            times: Vec::new(),
            columns: Vec::new(),
        })
    }

    fn column(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.engine.n_bins()];
        self.engine.accumulate(x, &mut acc);
        acc[self.bins.clone()].to_vec()
    }

    pub fn push(&mut self, v: f64) {
        if self.skip > 0 {
            self.skip -= 1;
            return;
        }
        self.buffer.push(v);
        let n = self.engine.n;
        if self.buffer.len() == n {
            let col = self.column(&self.buffer);
            self.columns.push(col);
            self.times.push((self.start as f64 + n as f64 / 2.0) / self.fs);
            if self.hop >= n {
                self.buffer.clear();
                self.skip = self.hop - n;
            } else {
                self.buffer.drain(..self.hop);
            }
            self.start += self.hop;
        }
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn finish(self) -> Spectrogram {
        let df = self.fs / self.engine.n as f64;
        Spectrogram {
            times: self.times,
            freqs: self.bins.clone().map(|k| k as f64 * df).collect(),
            power: self.columns,
            df,
            segment: self.engine.n,
            hop: self.hop,
            window: self.window,
        }
    }
}

/// Per-column `int PSD df` over `[f_lo, f_hi]`.
pub fn band_variance(sg: &Spectrogram, f_lo: f64, f_hi: f64) -> Result<Vec<f64>> {
    let n = sg.freqs.iter().filter(|f| **f >= f_lo && **f <= f_hi).count();
    if n == 0 || f_hi < f_lo {
        return Err(Error::invalid(format!("band [{f_lo}, {f_hi}] Hz contains no spectrogram bins")));
    }
    Ok(sg
        .power
        .iter()
        .map(|col| band_sum(&sg.freqs, col, f_lo, f_hi) * sg.df)
        .collect())
}

/// Slowly varying quadratures of one tone.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureTrace {
    pub t: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub f0: f64,
    pub bandwidth: f64,
}

impl QuadratureTrace {
    pub fn amplitude(&self) -> Vec<f64> {
        self.vx.iter().zip(&self.vy).map(|(x, y)| x.hypot(*y)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_s,vx,vy\n");
        for ((t, x), y) in self.t.iter().zip(&self.vx).zip(&self.vy) {
            s.push_str(&format!("{t},{x},{y}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemodSettings {
    pub f0: f64,
    /// Configured integration band [Hz]; the low-pass -3 dB point is half of it.
    pub bandwidth: f64,
    /// Reference phase offset [rad].
    pub phase: f64,
    /// Output decimation; `None` picks about 20 samples per band.
    pub decimation: Option<usize>,
}

/// `V_x = 2 LP[v cos(2 pi f0 t + phase)]`, `V_y = -2 LP[v sin(...)]`.
pub fn demodulate(series: &[f64], fs: f64, f0: f64, bandwidth: f64) -> Result<QuadratureTrace> {
    demodulate_with(series, fs, &DemodSettings { f0, bandwidth, phase: 0.0, decimation: None })
}

pub fn demodulate_with(series: &[f64], fs: f64, s: &DemodSettings) -> Result<QuadratureTrace> {
    if series.is_empty() {
        return Err(Error::invalid("empty series"));
    }
    if !(s.f0 > 0.0 && s.f0 < fs / 2.0) {
        return Err(Error::invalid(format!(
            "demodulation frequency {} Hz outside (0, fs/2 = {} Hz)",
            s.f0,
            fs / 2.0
        )));
    }
    if !(s.bandwidth > 0.0 && s.bandwidth < s.f0 / 10.0) {
        return Err(Error::invalid("demodulation bandwidth must be positive and well below f0"));
    }
    let decimation = s
        .decimation
        .unwrap_or_else(|| ((fs / (20.0 * s.bandwidth)).floor() as usize).max(1));
    if fs / (decimation as f64) < 2.0 * s.bandwidth {
        return Err(Error::invalid("output rate below twice the demodulation bandwidth"));
    }
    let fc = (s.bandwidth / 2.0) / CASCADE_3DB;
    let a = 1.0 - (-std::f64::consts::TAU * fc / fs).exp();
    let mut sx = [0.0f64; 4];
    let mut sy = [0.0f64; 4];
    let mut out = QuadratureTrace {
        t: Vec::with_capacity(series.len() / decimation + 1),
        vx: Vec::with_capacity(series.len() / decimation + 1),
        vy: Vec::with_capacity(series.len() / decimation + 1),
        f0: s.f0,
        bandwidth: s.bandwidth,
    };
    let w = std::f64::consts::TAU * s.f0 / fs;
    for (k, &v) in series.iter().enumerate() {
        let (sn, cs) = (w * k as f64 + s.phase).sin_cos();
        let mut x = 2.0 * v * cs;
        let mut y = -2.0 * v * sn;
        for st in 0..4 {
            sx[st] += a * (x - sx[st]);
            sy[st] += a * (y - sy[st]);
            x = sx[st];
            y = sy[st];
        }
        if k % decimation == 0 {
            out.t.push(k as f64 / fs);
            out.vx.push(x);
            out.vy.push(y);
        }
    }
    Ok(out)
}

/// Trailing moving average over `n` points; output length `len - n + 1`.
pub fn moving_average(x: &[f64], n: usize) -> Result<Vec<f64>> {
    if n == 0 || n > x.len() {
        return Err(Error::invalid(format!("moving average of {n} points over {} samples", x.len())));
    }
    let mut acc: f64 = x[..n].iter().sum();
    let mut out = Vec::with_capacity(x.len() - n + 1);
    out.push(acc / n as f64);
    for k in n..x.len() {
        acc += x[k] - x[k - n];
        out.push(acc / n as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::TAU;

    fn sine(n: usize, fs: f64, f: f64, a: f64, phi: f64) -> Vec<f64> {
        (0..n).map(|k| a * (TAU * f * k as f64 / fs + phi).cos()).collect()
    }

    fn mean_square(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn sinusoid_power() {
        let fs = 1024.0;
        let x = sine(16384, fs, 100.0, 1.0, 0.3);
        let psd = welch_psd(&x, fs, 1024, 0.5, Window::Hann).unwrap();
        assert!((psd.band_power(95.0, 105.0) - 0.5).abs() < 0.005);
        assert!((psd.total_power() / mean_square(&x) - 1.0).abs() < 0.01);
    }

    #[test]
    fn white_noise_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sigma = 0.7;
        let x: Vec<f64> = (0..1 << 18)
            .map(|_| sigma * { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect::<Vec<f64>>();
        let fs = 1000.0;
        let psd = welch_psd(&x, fs, 512, 0.5, Window::Hann).unwrap();
        assert!((psd.total_power() / (sigma * sigma) - 1.0).abs() < 0.03);
        let lo = psd.band_power(0.0, 250.0);
        let hi = psd.band_power(250.0 + psd.df, 500.0);
        assert!((lo / hi - 1.0).abs() < 0.05, "{lo} {hi}");
    }

    #[test]
    fn dc_in_zero_bin() {
        let x = vec![2.0; 4096];
        let psd = welch_psd(&x, 100.0, 256, 0.5, Window::Rectangular).unwrap();
        assert!((psd.values[0] * psd.df - 4.0).abs() < 1e-9);
        assert!(psd.values[1..].iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn errors() {
        assert!(welch_psd(&[], 1.0, 2, 0.5, Window::Hann).is_err());
        assert!(welch_psd(&[1.0; 10], 1.0, 20, 0.5, Window::Hann).is_err());
    }

    #[test]
    fn tone_extraction_over_noise() {
        let fs = 20_000.0;
        let n = 1 << 18;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = sine(n, fs, 3210.7, 0.02, 1.0)
            .into_iter()
            .map(|v| v + 0.05 * { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect::<Vec<f64>>();
        let psd = welch_psd(&x, fs, 8192, 0.5, Window::Hann).unwrap();
        let a = tone_amplitude_from_psd(&psd, 3210.7, 25.0).unwrap();
        assert!((a / 0.02 - 1.0).abs() < 0.05, "{a}");
        assert!(tone_amplitude_from_psd(&psd, 5000.0, 25.0).is_none());
    }

    #[test]
    fn spectrogram_parseval_and_bands() {
        let fs = 2048.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..1 << 15)
            .map(|k| (TAU * 300.0 * k as f64 / fs).sin() + 0.3 * { let z: f64 = StandardNormal.sample(&mut rng); z })
            .collect::<Vec<f64>>();
        let sg = spectrogram(&x, fs, 1024, 512, Window::Hann, None).unwrap();
        let full = band_variance(&sg, 0.0, fs / 2.0).unwrap();
        let a = band_variance(&sg, 0.0, 500.0).unwrap();
        let b = band_variance(&sg, 500.0 + sg.df / 2.0, fs / 2.0).unwrap();
        for (k, &v) in full.iter().enumerate() {
            let s = 512 * k;
            let ms = mean_square(&x[s..s + 1024]);
            assert!((v / ms - 1.0).abs() < 0.1, "{v} {ms}");
            assert!((a[k] + b[k] - v).abs() < 1e-12 * v);
        }
        assert!(band_variance(&sg, 2000.0, 1000.0).is_err());
    }

    #[test]
    fn streaming_matches_batch() {
        let fs = 1000.0;
        let x: Vec<f64> = (0..5000).map(|k| (k as f64 * 0.37).sin() + (k as f64 * 0.011).cos()).collect();
        for &hop in &[100, 256, 300] {
            let a = spectrogram(&x, fs, 256, hop, Window::Hann, Some((50.0, 200.0))).unwrap();
            let mut s = StreamingSpectrogram::new(fs, 256, hop, Window::Hann, Some((50.0, 200.0))).unwrap();
            x.iter().for_each(|&v| s.push(v));
            let b = s.finish();
            assert_eq!(a.times, b.times);
            assert_eq!(a.freqs, b.freqs);
            assert_eq!(a.power, b.power);
        }
    }

    #[test]
    fn chirp_peak_drifts() {
        let fs = 4000.0;
        let x: Vec<f64> = (0..40000)
            .map(|k| {
                let t = k as f64 / fs;
                (TAU * (200.0 * t + 40.0 * t * t)).sin()
            })
            .collect();
        let sg = spectrogram(&x, fs, 1024, 1024, Window::Hann, None).unwrap();
        let peaks: Vec<usize> = sg
            .power
            .iter()
            .map(|c| (0..c.len()).max_by(|&i, &j| c[i].total_cmp(&c[j])).unwrap())
            .collect();
        assert!(peaks.windows(2).all(|w| w[1] >= w[0]));
        assert!(peaks.last() > peaks.first());
    }

    #[test]
    fn demodulated_tone() {
        let fs = 50_000.0;
        let (f0, a, phi) = (2_000.0, 0.8, 0.7);
        let x = sine(100_000, fs, f0, a, phi);
        let q = demodulate(&x, fs, f0, 100.0).unwrap();
        let k = q.t.len() - 1;
        assert!((q.vx[k].hypot(q.vy[k]) / a - 1.0).abs() < 1e-3);
        assert!((q.vy[k].atan2(q.vx[k]) - phi).abs() < 1e-3);
    }

    #[test]
    fn demod_phase_and_bandwidth_invariance() {
        let fs = 50_000.0;
        let f0 = 3_000.0;
        let x: Vec<f64> = sine(150_000, fs, f0, 0.5, 0.2)
            .iter()
            .zip(sine(150_000, fs, f0 + 1_000.0, 0.5, 1.1))
            .map(|(a, b)| a + b)
            .collect();
        let base = demodulate(&x, fs, f0, 70.0).unwrap();
        let rot = demodulate_with(&x, fs, &DemodSettings { f0, bandwidth: 70.0, phase: 1.3, decimation: None }).unwrap();
        for (a, b) in base.amplitude().iter().zip(rot.amplitude()) {
            assert!((a - b).abs() < 1e-12);
        }
        let tail = |q: &QuadratureTrace| {
            let a = q.amplitude();
            let n = a.len();
            a[n / 2..].iter().sum::<f64>() / (n - n / 2) as f64
        };
        for bw in [100.0, 150.0] {
            let q = demodulate(&x, fs, f0, bw).unwrap();
            assert!((tail(&q) / tail(&base) - 1.0).abs() < 0.02);
            assert!((tail(&q) / 0.5 - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn demod_guards() {
        let x = vec![0.0; 100];
        assert!(demodulate(&x, 1000.0, 600.0, 10.0).is_err());
        assert!(demodulate(&x, 1000.0, 100.0, 50.0).is_err());
    }

    #[test]
    fn moving_average_values() {
        let m = moving_average(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(m, vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_err());
    }
}
