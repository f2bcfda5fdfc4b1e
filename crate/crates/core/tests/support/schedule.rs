//! Schedule and optimiser traces shared by the unit tests and the acceptance runner.

use compofuse::error::Error;
use compofuse::optim::{poly_lr, sgd_update};

/// Endpoints, midpoint and quarter point of the default schedule.
pub fn check_poly() {
    assert_eq!(poly_lr(0, 30_000, 0.007, 0.9).unwrap(), 0.007);
    assert_eq!(poly_lr(30_000, 30_000, 0.007, 0.9).unwrap(), 0.0);
    // 0.007 · 0.5^0.9 and 0.007 · 0.75^0.9, rounded to double precision
    let mid = 0.003_751_207_118_877_026;
    let quarter = 0.005_403_226_547_064_993;
    assert!((poly_lr(15_000, 30_000, 0.007, 0.9).unwrap() - mid).abs() < 1e-9);
    assert!((poly_lr(7_500, 30_000, 0.007, 0.9).unwrap() - quarter).abs() < 1e-9);
    assert!(matches!(poly_lr(30_001, 30_000, 0.007, 0.9), Err(Error::IterOutOfRange { .. })));
}

/// Three momentum steps with weight decay against an exact trace.
pub fn check_sgd_trace() {
    // exact rational arithmetic, rounded once
    let grads = [[0.1, -0.3, 0.25], [-0.2, 0.05, 0.0], [0.4, 0.1, -0.125]];
    let lrs = [0.01, 0.005, 0.0025];
    let expected_p = [
        [0.998995, -1.99699, 0.4974975],
        [0.9995402525125, -1.995880507525, 0.49637013125625],
        [0.9987843667178093, -1.9956287410606155, 0.4961746948588984],
    ];
    let expected_b = [
        [0.1005, -0.301, 0.25025],
        [-0.1090505025, -0.221898495, 0.22547374875],
        [0.3023543178762563, -0.1007065857537625, 0.07817455894062812],
    ];
    let mut p = [1.0f64, -2.0, 0.5];
    let mut b = [0.0f64; 3];
    for step in 0..3 {
        sgd_update(&mut p, &grads[step], &mut b, lrs[step], 0.9, 0.0005).unwrap();
        for i in 0..3 {
            assert!((p[i] - expected_p[step][i]).abs() < 1e-12, "step {step} p[{i}]");
            assert!((b[i] - expected_b[step][i]).abs() < 1e-12, "step {step} b[{i}]");
        }
    }
    assert!(sgd_update(&mut p, &[0.0; 2], &mut b, 0.1, 0.9, 0.0).is_err());
}
