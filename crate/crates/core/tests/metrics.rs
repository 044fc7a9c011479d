use msdm_core::metrics::{
    aggregate_runs, diversity, fbd, fid, fidelity, fit_gaussian, frechet_distance, matrix_sqrt_spd, CovMode,
    EmbeddingSet, GaussianStats, Source, COV_RIDGE,
};
use msdm_core::rng::Stream;
use proptest::prelude::*;

fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
    let mut r = Stream::new(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| r.normal_vec(d)).collect();
    EmbeddingSet::from_rows(&rows, Source::Real).unwrap()
}

fn frob(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn one_dimensional_closed_form() {
    let mut r = Stream::new(1);
    for _ in 0..100 {
        let (m1, m2) = (3.0 * r.normal(), 3.0 * r.normal());
        let (s1, s2) = (0.1 + 2.0 * r.uniform(), 0.1 + 2.0 * r.uniform());
        let g = |m: f64, s: f64| GaussianStats { mean: vec![m], cov: vec![s * s], mode: CovMode::Full };
        let got = frechet_distance(&g(m1, s1), &g(m2, s2)).unwrap();
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn square_root_squares_back() {
    let mut r = Stream::new(2);
    for d in [1, 2, 5, 16, 32] {
        let g = r.normal_vec(d * d);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| g[i * d + k] * g[j * d + k]).sum();
            }
        }
        let s = matrix_sqrt_spd(&a, d).unwrap();
        let mut sq = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                sq[i * d + j] = (0..d).map(|k| s[i * d + k] * s[k * d + j]).sum();
            }
        }
        let resid: Vec<f64> = sq.iter().zip(&a).map(|(x, y)| x - y).collect();
        assert!(frob(&resid) / frob(&a) < 1e-8, "d={d}");
    }
}

#[test]
fn fit_matches_two_pass_oracle() {
    let s = random_set(100, 5, 3);
    let g = fit_gaussian(&s, CovMode::Full).unwrap();
    let n = 100.0;
    let mut mean = [0.0; 5];
    for i in 0..100 {
        for j in 0..5 {
            mean[j] += s.row(i)[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for a in 0..5 {
        assert!((g.mean[a] - mean[a]).abs() < 1e-10);
        for b in 0..5 {
            let c: f64 = (0..100).map(|i| (s.row(i)[a] - mean[a]) * (s.row(i)[b] - mean[b])).sum::<f64>() / (n - 1.0);
            let want = c + if a == b { COV_RIDGE } else { 0.0 };
            assert!((g.cov[a * 5 + b] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn fid_of_a_set_with_itself_vanishes() {
    let s = random_set(60, 8, 4);
    assert!(fid(&s, &s).unwrap() <= 1e-6);
    let small = random_set(10, 32, 5);
    assert!(fid(&small, &small).unwrap() <= 1e-6);
    assert_eq!(fbd(&s, &s).unwrap(), fid(&s, &s).unwrap());
}

#[test]
fn mean_shift_law() {
    let mut r = Stream::new(6);
    for (n, d) in [(50, 4), (40, 32), (10, 32)] {
        let s = random_set(n, d, r.next_u64());
        let v = r.normal_vec(d);
        let want: f64 = v.iter().map(|x| x * x).sum();
        let got = fid(&s, &s.shifted(&v)).unwrap();
        assert!((got - want).abs() < 1e-8 * want.max(1.0), "n={n} d={d}: {got} vs {want}");
    }
}

#[test]
fn fid_matches_scripted_recomputation() {
    let x: Vec<Vec<f64>> =
        (0..12).map(|i| (0..4).map(|j| (1.3 * i as f64 + 0.7 * j as f64).sin() + 0.1 * j as f64).collect()).collect();
    let y: Vec<Vec<f64>> =
        (0..15).map(|i| (0..4).map(|j| (0.9 * i as f64 - 0.4 * j as f64).cos() * 0.8 + 0.3).collect()).collect();
    let got = fid(&EmbeddingSet::from_rows(&x, Source::Real).unwrap(), &EmbeddingSet::from_rows(&y, Source::Generated).unwrap())
        .unwrap();
    // numpy mean/cov (ddof=1, +1e-6 I) and scipy.linalg.sqrtm on the same rows.
    let want = 0.3631293832825262;
    assert!((got - want).abs() / want < 1e-8, "{got}");
}

#[test]
fn diversity_matches_double_loop() {
    let mut r = Stream::new(7);
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|_| {
            let v = r.normal_vec(16);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let mut acc = 0.0;
    let mut pairs = 0;
    for i in 0..10 {
        for j in 0..10 {
            if i < j {
                acc += 1.0 - rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
                pairs += 1;
            }
        }
    }
    assert_eq!(pairs, 45);
    let got = diversity(&EmbeddingSet::from_rows(&rows, Source::Generated).unwrap()).unwrap();
    assert!((got - acc / 45.0).abs() < 1e-12);
}

#[test]
fn table_style_formatting() {
    let s = aggregate_runs(&[70.0, 75.0, 68.0, 77.0, 74.8]).unwrap();
    assert_eq!(s.to_string(), format!("{:.2} ± {:.2}", s.mean, s.std));
    assert_eq!(format!("{:.2}", fidelity(&[2776.78]).unwrap()), "0.36");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn frechet_is_symmetric_and_non_negative(seed in 0u64..10_000, d in 1usize..6, n in 8usize..20) {
        let a = fit_gaussian(&random_set(n, d, seed), CovMode::Full).unwrap();
        let b = fit_gaussian(&random_set(n + 3, d, seed + 1), CovMode::Full).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn fidelity_strictly_decreasing(a in 0.0f64..1e4, delta in 1e-6f64..1e3) {
        prop_assert!(fidelity(&[a + delta]).unwrap() < fidelity(&[a]).unwrap());
    }

    #[test]
    fn diversity_bounded(seed in 0u64..10_000, n in 2usize..12) {
        let s = random_set(n, 6, seed);
        let v = diversity(&s).unwrap();
        prop_assert!((0.0..=2.0).contains(&v));
    }

    #[test]
    fn shift_law_random(seed in 0u64..10_000, scale in 0.0f64..5.0) {
        let s = random_set(30, 5, seed);
        let v: Vec<f64> = Stream::new(seed ^ 99).normal_vec(5).into_iter().map(|x| x * scale).collect();
        let want: f64 = v.iter().map(|x| x * x).sum();
        prop_assert!((fid(&s, &s.shifted(&v)).unwrap() - want).abs() < 1e-8 * want.max(1.0));
    }
}
