use dwc::gradcheck::{self, DEFAULT_TOLERANCE};
use dwc::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_case_matches_central_differences() {
    for seed in [0, 1] {
        for case in gradcheck::suite(seed).unwrap() {
            println!(
                "seed {seed} {:<24} checked {:>5} max rel {:.2e}",
                case.name, case.report.checked, case.report.max_rel_error
            );
            assert!(case.report.checked > 0, "{} checked nothing", case.name);
            assert!(
                case.report.passes(DEFAULT_TOLERANCE),
                "{}: {:?}",
                case.name,
                case.report
            );
        }
    }
}

/// Direct sliding-window evaluation, written independently of the
/// patch-matrix kernel.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[0];
    let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
    let mut out = Vec::new();
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (2 * oy + ky, 2 * ox + kx);
                            if iy == 0 || ix == 0 || iy > h || ix > wd {
                                continue;
                            }
                            acc += w.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                * x.data()[(ci * h + iy - 1) * wd + ix - 1];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    for (cin, h, w, cout) in [(3, 16, 16, 5), (2, 7, 5, 3), (1, 3, 3, 1)] {
        let (x, k, b) = (rand(&[cin, h, w]), rand(&[cout, cin, 3, 3]), rand(&[cout]));
        let mut tape = Tape::new();
        let (xv, kv, bv) = (
            tape.constant(x.clone()),
            tape.constant(k.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv3x3_s2(xv, kv, bv).unwrap();
        let want = conv_oracle(&x, &k, &b);
        for (a, e) in tape.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
