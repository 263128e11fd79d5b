use proptest::prelude::*;
use twomembrane::bessel::Truncation;
use twomembrane::detection::correction_factors;
use twomembrane::model::{reference_params, SystemParams, REFERENCE_CONFIG};
use twomembrane::slowflow::sync_measure;
use twomembrane::spectral::{demodulate_with, welch_psd, DemodSettings, Window};

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        ((a - b) / b).abs()
    }
}

fn assert_params_close(a: &SystemParams, b: &SystemParams, tol: f64) -> Result<(), TestCaseError> {
    for j in 0..2 {
        let (x, y) = (&a.mechanical[j], &b.mechanical[j]);
        for (u, v) in [
            (x.omega, y.omega),
            (x.gamma, y.gamma),
            (x.g[0], y.g[0]),
            (x.g[1], y.g[1]),
            (x.mass, y.mass),
            (x.temperature, y.temperature),
        ] {
            prop_assert!(rel(u, v) <= tol, "{u} {v}");
        }
        let (x, y) = (&a.optical[j], &b.optical[j]);
        for (u, v) in [
            (x.detuning, y.detuning),
            (x.detuning0, y.detuning0),
            (x.kappa_in, y.kappa_in),
            (x.kappa_ex, y.kappa_ex),
            (x.power, y.power),
            (x.wavelength, y.wavelength),
        ] {
            prop_assert!(rel(u, v) <= tol, "{u} {v}");
        }
    }
    prop_assert!(rel(a.modulation.depth, b.modulation.depth) <= tol);
    prop_assert!(rel(a.modulation.omega_b, b.modulation.omega_b) <= tol);
    prop_assert!(rel(a.cavity.fsr, b.cavity.fsr) <= tol);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn config_round_trip(
        w1 in 1e5..4e5f64,
        dw in 1e3..1e4f64,
        gamma in 0.5..20.0f64,
        g in 0.1..2.0f64,
        mass in 1e-11..1e-9f64,
        power in 1e-7..1e-3f64,
        det in -3e5..3e5f64,
        kin in 1e3..3e4f64,
        depth in 0.001..0.2f64,
    ) {
        let text = REFERENCE_CONFIG
            .replace("omega1_hz = 230795", &format!("omega1_hz = {w1}"))
            .replace("omega2_hz = 233759", &format!("omega2_hz = {}", w1 + dw))
            .replace("gamma2_hz = 9.37", &format!("gamma2_hz = {gamma}"))
            .replace("g1_hz = 0.4225", &format!("g1_hz = {g}"))
            .replace("mass2_kg = 1.74e-10", &format!("mass2_kg = {mass}"))
            .replace("pump_power_w = 4.25e-6", &format!("pump_power_w = {power}"))
            .replace("pump_detuning_hz = 259350", &format!("pump_detuning_hz = {det}"))
            .replace("kappa_in_hz = 8350", &format!("kappa_in_hz = {kin}"))
            .replace("mod_depth_rad = 0.02", &format!("mod_depth_rad = {depth}"));
        let a = SystemParams::from_config_str(&text).unwrap();
        let b = SystemParams::from_config_str(&a.to_config_string()).unwrap();
        assert_params_close(&a, &b, 1e-12)?;
        let c = SystemParams::from_config_str(&b.to_config_string()).unwrap();
        assert_params_close(&b, &c, 1e-14)?;
    }

    #[test]
    fn sync_measure_bounded(
        phases in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 20..400),
        w in 10usize..20,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = phases.into_iter().unzip();
        let p = sync_measure(&a, &b, w).unwrap();
        prop_assert_eq!(p.len(), a.len() - w + 1);
        prop_assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rectangular_welch_parseval(x in prop::collection::vec(-5.0..5.0f64, 64..512), seg_pow in 3u32..6) {
        let seg = 1usize << seg_pow;
        let n = x.len() / seg * seg;
        let x = &x[..n];
        let psd = welch_psd(x, 100.0, seg, 0.0, Window::Rectangular).unwrap();
        let ms = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        prop_assert!((psd.total_power() - ms).abs() <= 1e-10 * ms.max(1e-300));
    }

    #[test]
    fn demodulated_amplitude_phase_invariant(phase in 0.0..6.28f64, a in 0.1..3.0f64, phi in 0.0..6.28f64) {
        let fs = 20_000.0;
        let f0 = 1_500.0;
        let x: Vec<f64> = (0..20_000)
            .map(|k| a * (std::f64::consts::TAU * f0 * k as f64 / fs + phi).cos())
            .collect();
        let s0 = DemodSettings { f0, bandwidth: 100.0, phase: 0.0, decimation: None };
        let s1 = DemodSettings { phase, ..s0 };
        let q0 = demodulate_with(&x, fs, &s0).unwrap();
        let q1 = demodulate_with(&x, fs, &s1).unwrap();
        for (u, v) in q0.amplitude().iter().zip(q1.amplitude()) {
            prop_assert!((u - v).abs() < 1e-10 * a);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn correction_factors_below_one(xi in 0.3..2.0f64) {
        let (n1, n2) = correction_factors(xi, &reference_params(), Truncation::Auto).unwrap();
        prop_assert!(n1 > 0.0 && n1 < 1.0);
        prop_assert!(n2 > 0.0 && n2 < 1.0);
    }
}
