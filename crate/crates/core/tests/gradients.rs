//! Reverse-mode gradients against central finite differences in f64.

#[path = "common/grad_cases.rs"]
mod grad_cases;

use grad_cases::{CASES, TOLERANCE};
use pvrf::numcore::gradcheck::check_params;
use pvrf::numcore::nn::{Init, Linear};
use pvrf::numcore::{ParamStore, Tensor};

#[test]
fn every_layer_matches_finite_differences() {
    for (name, case) in CASES {
        for seed in 0..10 {
            let g = case(seed).unwrap();
            assert!(g.checked > 0, "{name}: nothing checked");
            assert!(g.max_rel_error < TOLERANCE, "{name} seed {seed}: {g:?}");
        }
    }
}

#[test]
fn two_layer_network() {
    for seed in 0..10 {
        let mut s = ParamStore::<f64>::new();
        let l1 = Linear::new(&mut s, "l1", 3, 5, Init::He { gain: 1.0 }, seed).unwrap();
        let l2 = Linear::new(&mut s, "l2", 5, 2, Init::He { gain: 1.0 }, seed).unwrap();
        s.randomize(seed, 0.6);
        let x = Tensor::from_f64(
            &[4, 3],
            &[0.1, -0.4, 0.9, 1.2, 0.0, -0.3, 0.5, 0.5, 0.5, -1.0, 2.0, 0.25],
        )
        .unwrap();
        let y = Tensor::from_f64(&[4, 2], &[0.3, -0.2, 0.0, 1.0, 0.7, 0.1, -0.5, 0.4]).unwrap();
        let g = check_params(
            &s,
            |t, s| {
                let xv = t.constant(x.clone());
                let h = l1.forward(t, s, xv)?;
                let h = t.silu(h);
                let out = l2.forward(t, s, h)?;
                let yv = t.constant(y.clone());
                t.mse(out, yv)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(g.checked, 3 * 5 + 5 + 5 * 2 + 2);
        assert!(g.max_rel_error < 1e-6, "seed {seed}: {g:?}");
    }
}
