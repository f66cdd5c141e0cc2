use proptest::prelude::*;
use samic_core::losses::{cc, kld, nss, term_grad, total, total_with_grad, LossFlags, Term, KLD_EPS};

fn map(n: usize, lo: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..=1.0, n).prop_filter("non-constant", |v| v.iter().any(|x| *x != v[0]))
}

fn with_fixation(mut g: Vec<f64>) -> Vec<f64> {
    if g.iter().all(|v| *v < 0.5) {
        g[0] = 1.0;
    }
    g
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let (mut p, mut m) = (x.to_vec(), x.to_vec());
    p[i] += h;
    m[i] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn identities_on_equal_maps(g in map(64, 0.0)) {
        let g = with_fixation(g);
        let k = kld(&g, &g).unwrap();
        prop_assert!(k.abs() < 1e-3);
        prop_assert!(k >= -(64.0 * (1.0 + KLD_EPS).ln()).abs() - 1e-15);
        prop_assert!(cc(&g, &g).unwrap().abs() < 1e-6);
        prop_assert!(nss(&g, &g).unwrap().abs() < 1e-6);
        let c = 1.7;
        let flipped: Vec<f64> = g.iter().map(|v| c - v).collect();
        prop_assert!((cc(&g, &flipped).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn cc_range_and_affine_invariance(g in map(64, 0.0), p in map(64, 0.0), a in 0.1f64..10.0, b in -5.0f64..5.0, swap in any::<bool>()) {
        let base = cc(&g, &p).unwrap();
        prop_assert!((0.0..=2.0).contains(&base));
        let t = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let moved = if swap { cc(&t(&g), &p).unwrap() } else { cc(&g, &t(&p)).unwrap() };
        prop_assert!((moved - base).abs() < 1e-9);
    }

    #[test]
    fn nss_is_affine_invariant_in_the_prediction(g in map(64, 0.0), p in map(64, 0.0), a in 0.5f64..2.0, b in -1.0f64..1.0) {
        let g = with_fixation(g);
        let base = nss(&p, &g).unwrap();
        let q: Vec<f64> = p.iter().map(|x| a * x + b).collect();
        prop_assert!((nss(&q, &g).unwrap() - base).abs() < 1e-5);
    }

    #[test]
    fn gradients_match_finite_differences(g in map(64, 0.0), p in map(64, 0.05)) {
        let g = with_fixation(g);
        let h = 1e-4;
        let cases: [(Term, fn(&[f64], &[f64]) -> f64); 4] = [
            (Term::Kld, |g, p| kld(g, p).unwrap()),
            (Term::KldSumNormalized, |g, p| samic_core::losses::kld_sum_normalized(g, p).unwrap()),
            (Term::Cc, |g, p| cc(g, p).unwrap()),
            (Term::Nss, |g, p| nss(p, g).unwrap()),
        ];
        for (term, f) in cases {
            let grad = term_grad(term, &g, &p).unwrap();
            for i in 0..p.len() {
                let fd = central_difference(|x| f(&g, x), &p, i, h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
                prop_assert!(err < 1e-4, "{:?}[{}]: fd {} analytic {}", term, i, fd, grad[i]);
            }
        }
    }

    #[test]
    fn total_is_the_sum_of_enabled_terms(g in map(64, 0.0), p in map(64, 0.05), bits in 1u8..8) {
        let g = with_fixation(g);
        let flags = LossFlags { kld: bits & 1 != 0, cc: bits & 2 != 0, nss: bits & 4 != 0, kld_sum_normalized: false };
        let (b, grad) = total_with_grad(&g, &p, &flags).unwrap();
        let sum = b.kld.unwrap_or(0.0) + b.cc.unwrap_or(0.0) + b.nss.unwrap_or(0.0);
        prop_assert_eq!(b.total, sum);
        let mut expected = vec![0.0; p.len()];
        for (on, t) in [(flags.kld, Term::Kld), (flags.cc, Term::Cc), (flags.nss, Term::Nss)] {
            if on {
                for (e, v) in expected.iter_mut().zip(term_grad(t, &g, &p).unwrap()) {
                    *e += v;
                }
            }
        }
        for (a, e) in grad.iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn nss_hand_case() {
    // One fixation in the corner, prediction mass elsewhere. Both maps have
    // σ = √3/4, so NSS = (3/4 + 1/4)/(√3/4) = 4/√3.
    let g = [1.0, 0.0, 0.0, 0.0];
    let p = [0.0, 1.0, 0.0, 0.0];
    let sd = (3.0f64 / 16.0).sqrt() + 1e-6;
    let zg = 0.75 / sd;
    let zp = -0.25 / sd;
    let expected = zg - zp;
    assert!((nss(&p, &g).unwrap() - expected).abs() < 1e-9);
    assert!((expected - 2.3094).abs() < 1e-4);
}

#[test]
fn all_flags_off_is_rejected() {
    let flags = LossFlags { kld: false, cc: false, nss: false, kld_sum_normalized: false };
    assert!(total(&[1.0, 0.0], &[0.5, 0.5], &flags).is_err());
}
