use fedsim_core::compressors::{unbiasedness_certificate, Compressor, CompressorSpec, Trials};
use fedsim_core::Vector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bind(spec: &str, d: usize) -> Compressor {
    spec.parse::<CompressorSpec>().unwrap().bind(d).unwrap()
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn point(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()
}

/// All k-subsets of 0..d, lexicographic.
fn k_subsets(d: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..d {
            cur.push(i);
            rec(i + 1, d, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, k, &mut Vec::new(), &mut out);
    out
}

/// Rand-K law written out by hand: uniform support, survivors scaled by d/k.
fn randk_law(x: &[f64], k: usize) -> Vec<(f64, Vec<f64>)> {
    let d = x.len();
    let supports = k_subsets(d, k);
    let p = 1.0 / supports.len() as f64;
    supports
        .into_iter()
        .map(|s| {
            let mut v = vec![0.0; d];
            for i in s {
                v[i] = x[i] * d as f64 / k as f64;
            }
            (p, v)
        })
        .collect()
}

fn same(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-12 * v.abs().max(1.0))
}

fn moments(law: &[(f64, Vec<f64>)]) -> (Vec<f64>, f64) {
    let d = law[0].1.len();
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    for (p, v) in law {
        for (m, vi) in mean.iter_mut().zip(v) {
            *m += p * vi;
        }
        second += p * norm_sq(v);
    }
    (mean, second)
}

#[test]
fn randk_exact_law_by_enumeration() {
    for d in 2..=6 {
        for k in 1..=d {
            let x = point(d, (10 * d + k) as u64);
            let law = randk_law(&x, k);
            let (mean, second) = moments(&law);
            for (m, xi) in mean.iter().zip(&x) {
                assert!((m - xi).abs() <= 1e-12, "d={d} k={k}");
            }
            let expected = d as f64 / k as f64 * norm_sq(&x);
            assert!((second - expected).abs() <= 1e-12 * expected.max(1.0));

            // the library's own enumeration agrees with the hand-written law
            let lib = bind(&format!("randk:{k}"), d).distribution(&x).unwrap();
            assert_eq!(lib.len(), law.len());
            for (p, v) in &lib {
                assert!(law.iter().any(|(q, w)| (p - q).abs() < 1e-15 && same(w, v)));
            }
            // and sampled outputs fall in the support of the law
            let c = bind(&format!("randk:{k}"), d);
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
            for _ in 0..50 {
                let v = c.compress(&x, &mut rng).unwrap().reconstructed;
                assert!(law.iter().any(|(_, w)| same(w, &v)));
            }
        }
    }
}

#[test]
fn randk_support_frequencies_are_uniform() {
    let c = bind("randk:2", 4);
    let x = [1.0, 2.0, 3.0, 4.0];
    let supports = k_subsets(4, 2);
    let mut counts = vec![0usize; supports.len()];
    let n = 60_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..n {
        let v = c.compress(&x, &mut rng).unwrap().reconstructed;
        let support: Vec<usize> = (0..4).filter(|&i| v[i] != 0.0).collect();
        counts[supports.iter().position(|s| *s == support).unwrap()] += 1;
    }
    let p = 1.0 / 6.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 4.0 * sd, "{c}");
    }
}

#[test]
fn bernoulli_two_branch_law() {
    for p in [0.1, 0.35, 0.8, 1.0] {
        let x = point(5, 3);
        let mut law = vec![(p, x.iter().map(|v| v / p).collect::<Vec<_>>())];
        if p < 1.0 {
            law.push((1.0 - p, vec![0.0; 5]));
        }
        let (mean, second) = moments(&law);
        for (m, xi) in mean.iter().zip(&x) {
            assert!((m - xi).abs() <= 1e-12);
        }
        let expected = norm_sq(&x) / p;
        assert!((second - expected).abs() <= 1e-12 * expected);
        let lib = bind(&format!("bern:{p}"), 5).distribution(&x).unwrap();
        assert_eq!(lib.len(), law.len());
        for ((p1, v1), (p2, v2)) in lib.iter().zip(&law) {
            assert!((p1 - p2).abs() < 1e-15);
            assert_eq!(&v1[..], &v2[..]);
        }
    }
}

#[test]
fn bit_model_examples() {
    let x = point(20, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bits = |s: &str, rng: &mut ChaCha8Rng| bind(s, 20).compress(&x, rng).unwrap().bits;
    assert_eq!(bits("identity", &mut rng), 640);
    assert_eq!(bits("randk:100%", &mut rng), 640);
    assert_eq!(bits("randk:40%", &mut rng), 8 * (32 + 5));
    assert_eq!(bits("topk:4", &mut rng), 4 * 37);
    assert_eq!(bits("natural", &mut rng), 9 * 20);
    assert_eq!(bits("terngrad", &mut rng), 32 + 40);
    assert_eq!(bits("qsgd:4", &mut rng), 32 + 20 * 4);
    let b = bits("bern:0.5", &mut rng);
    assert!(b == 1 || b == 641);
}

/// Monte-Carlo mean of C(x) with an independent per-coordinate 4σ check.
fn mc_unbiased(spec: &str, d: usize, draws: usize) {
    let c = bind(spec, d);
    let x = point(d, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..draws {
        let v = c.compress(&x, &mut rng).unwrap().reconstructed;
        for j in 0..d {
            sum[j] += v[j];
            sum_sq[j] += v[j] * v[j];
        }
    }
    let n = draws as f64;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = (sum_sq[j] / n - mean * mean).max(0.0) * n / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - x[j]).abs() <= 4.0 * se + 1e-12, "{spec} coord {j}: {mean} vs {}", x[j]);
    }
}

#[test]
fn randomized_quantizers_are_unbiased_in_monte_carlo() {
    for spec in ["natural", "qsgd:4", "terngrad", "dith:3", "ndith:3", "randk:2"] {
        mc_unbiased(spec, 6, 100_000);
    }
}

#[test]
fn certificates_agree() {
    for spec in ["natural", "qsgd:2", "terngrad", "dith:4", "ndith:2"] {
        let r = unbiasedness_certificate(&bind(spec, 5), Trials::Sampled(100_000), 3).unwrap();
        assert!(r.within_bound, "{spec}: {r:?}");
    }
    for spec in ["randk:2", "bern:0.3", "identity"] {
        let r = unbiasedness_certificate(&bind(spec, 4), Trials::Exhaustive, 0).unwrap();
        assert!(r.within_bound && r.max_abs_dev < 1e-12, "{spec}");
    }
}

#[test]
fn compressors_are_deterministic_given_the_stream() {
    for spec in ["natural", "qsgd:4", "randk:3", "switch:0.5(randk:1,topk:2)", "compose(natural,randk:2)"] {
        let c = bind(spec, 7);
        let x = point(7, 5);
        let a = c.compress(&x, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = c.compress(&x, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert_eq!(c.bit_cost(&a.realization), a.bits);
    }
}

fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
    (1usize..12).prop_flat_map(|d| prop::collection::vec(-100.0f64..100.0, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn topk_is_a_contraction(x in vec_strategy(), kf in 0.0f64..1.0) {
        let d = x.len();
        let k = 1 + (kf * d as f64) as usize % d;
        let c = bind(&format!("topk:{k}"), d);
        let v = c.compress(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().reconstructed;
        let err: f64 = v.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
        prop_assert!(err <= (1.0 - k as f64 / d as f64) * norm_sq(&x) + 1e-9);
        // kept entries are unmodified and no dropped entry is larger
        let kept_min = v.iter().filter(|a| **a != 0.0).map(|a| a.abs()).fold(f64::INFINITY, f64::min);
        for (a, b) in v.iter().zip(&x) {
            prop_assert!(*a == 0.0 || a == b);
            if *a == 0.0 && *b != 0.0 {
                prop_assert!(b.abs() <= kept_min);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn power_of_two_scaling_commutes(x in vec_strategy(), e in -4i32..5, seed in any::<u64>()) {
        let s = 2f64.powi(e);
        let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
        let d = x.len();
        for spec in ["identity", "natural", "qsgd:4", "dith:2", "ndith:3", "terngrad", "randk:1", "bern:0.5"] {
            let c = bind(spec, d);
            let a = c.compress(&scaled, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = c.compress(&x, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.reconstructed, b.reconstructed.scaled(s), "{}", spec);
            prop_assert_eq!(a.bits, b.bits);
        }
    }

    #[test]
    fn grammar_round_trips(spec in spec_strategy()) {
        let text = spec.to_string();
        let back: CompressorSpec = text.parse().unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn zero_maps_to_zero(d in 1usize..10, seed in any::<u64>()) {
        let zero = vec![0.0; d];
        for spec in ["identity", "natural", "qsgd:4", "dith:2", "ndith:3", "terngrad", "randk:1", "topk:1", "bern:0.5"] {
            let v = bind(spec, d).compress(&zero, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().reconstructed;
            prop_assert_eq!(v, Vector::zeros(d));
        }
    }
}

fn spec_strategy() -> impl Strategy<Value = CompressorSpec> {
    use fedsim_core::compressors::Amount;
    let leaf = prop_oneof![
        Just(CompressorSpec::Identity),
        (1u32..100).prop_map(|p| CompressorSpec::Bernoulli(p as f64 / 100.0)),
        (1usize..5).prop_map(|k| CompressorSpec::RandK(Amount::Absolute(k))),
        (1u32..100).prop_map(|p| CompressorSpec::TopK(Amount::Percent(p as f64))),
        Just(CompressorSpec::Natural),
        (1u32..8).prop_map(CompressorSpec::StdDithering),
        (1u32..8).prop_map(CompressorSpec::NaturalDithering),
        Just(CompressorSpec::TernGrad),
        (1u32..8).prop_map(CompressorSpec::Qsgd),
    ];
    leaf.prop_recursive(2, 8, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| CompressorSpec::Compose(Box::new(a), Box::new(b))),
            (1u32..100, inner.clone(), inner)
                .prop_map(|(p, a, b)| CompressorSpec::Switch(p as f64 / 100.0, Box::new(a), Box::new(b))),
        ]
    })
}
