use chemoflow::diagnostics::{conditional_parameters, evaluate_report, DiagnosticsContext};
use chemoflow::grid::{GridSpec, MacVelocity, ScalarField};
use chemoflow::oracle::{brute_force_functional, Functional};
use chemoflow::sensitivity::SensitivitySpec;
use chemoflow::state::SimState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(rng: &mut ChaCha8Rng, g: GridSpec) -> SimState {
    let n = ScalarField::from_values(g, (0..g.cells()).map(|_| rng.gen_range(0.05..3.0)).collect()).unwrap();
    let c = ScalarField::from_values(g, (0..g.cells()).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap();
    let (a, b, k) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..4.0));
    let u = MacVelocity::from_stream_function(g, move |x, y| {
        (x * (1.0 - x) * y * (1.0 - y)) * (a * (k * x).sin() + b * (k * y).cos())
    });
    SimState { t: 0.0, n, c, u }
}

#[test]
fn every_report_entry_matches_brute_force_on_random_states() {
    let g = GridSpec::unit_square(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let spec = SensitivitySpec::power(2.0).unwrap();
    let cond = conditional_parameters(&g, 1.0, 1.0, 1.0, &spec, 0.1).unwrap();
    let mut worst = (0.0_f64, Functional::MassN);
    for _ in 0..100 {
        let state = random_state(&mut rng, g);
        let ctx = DiagnosticsContext {
            chi: rng.gen_range(0.2..2.0),
            c0_inf: 1.0,
            n_bar0: state.n.mean(),
            spec: spec.clone(),
            conditional: Some(cond),
        };
        let report = evaluate_report(&state, &ctx);
        for f in Functional::ALL {
            let (a, b) = (f.of(&report), brute_force_functional(&state, f, &ctx));
            let scale = a.abs().max(b.abs());
            let rel = if scale == 0.0 { 0.0 } else { (a - b).abs() / scale };
            if rel > worst.0 {
                worst = (rel, f);
            }
        }
    }
    assert!(worst.0 <= 1e-12, "worst disagreement {:e} in {:?}", worst.0, worst.1);
}

#[test]
fn two_valued_entropy_and_constant_fisher() {
    let g = GridSpec::unit_square(8);
    let spec = SensitivitySpec::power(2.0).unwrap();
    let ctx = DiagnosticsContext {
        chi: 1.0,
        c0_inf: 1.0,
        n_bar0: 2.0,
        spec,
        conditional: None,
    };
    let state = SimState {
        t: 0.0,
        n: ScalarField::from_fn(g, |x, _| if x < 0.5 { 1.0 } else { 3.0 }),
        c: ScalarField::constant(g, 1.0),
        u: MacVelocity::zero(g),
    };
    let e = brute_force_functional(&state, Functional::EntropyN, &ctx);
    assert!((e - (0.5 * 0.5_f64.ln() + 1.5 * 1.5_f64.ln())).abs() < 1e-12);
    assert!((e - 0.2616).abs() < 1e-4);
    let flat = SimState {
        n: ScalarField::constant(g, 2.0),
        ..state
    };
    assert_eq!(brute_force_functional(&flat, Functional::FisherN, &ctx), 0.0);
}
