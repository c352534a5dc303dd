use pvrf::degradations::{degrade, synth_image, DegradationParams, DegradationSpec, SynthParams};
use pvrf::metrics::psnr;
use pvrf::perception::N_TYPES;

const GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const SLACK_DB: f64 = 0.1;

/// Worst PSNR increase along the grid when one coordinate grows from `base`.
fn worst_rise(kind: usize, base: [f64; N_TYPES], seed: u64) -> f64 {
    let clean = synth_image(seed, 0, &SynthParams::default());
    let p = DegradationParams::default();
    let mut prev = f64::INFINITY;
    let mut worst = f64::NEG_INFINITY;
    for s in GRID {
        let mut sev = base;
        sev[kind] = s;
        let y = degrade(&clean, &DegradationSpec::new(sev).unwrap(), seed, &p);
        let q = psnr(&y, &clean).unwrap();
        if prev.is_finite() || q.is_finite() {
            worst = worst.max(q - prev);
        }
        prev = q;
    }
    worst
}

#[test]
fn single_type_psnr_is_non_increasing_in_severity() {
    for kind in 0..N_TYPES {
        for seed in 0..20 {
            let rise = worst_rise(kind, [0.0; N_TYPES], seed);
            assert!(rise <= SLACK_DB, "type {kind} seed {seed}: rise {rise} dB");
        }
    }
}
