mod common;

use attnwalk::attention::{attention_forward, gaussian_kernel_rows, softmax, softmax_jacobian};
use attnwalk::brownian::{quadratic_variation, sample_path};
use attnwalk::geometry::{LayerNormParams, TokenMatrix};
use attnwalk::kfac::{cg_solve, fisher_vector_product, CgConfig, DampedFisher};
use attnwalk::markov::{validate_transition, TransitionMatrix};
use attnwalk::trainer::{synth_dataset, train, TrainConfig};
use common::*;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

fn tokens(max_n: usize, max_d: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n, 2..=max_d).prop_flat_map(|(n, d)| {
        proptest::collection::vec(-5.0f64..5.0, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

fn frob_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

fn check_stochastic(p: &TransitionMatrix) -> Result<(), TestCaseError> {
    for row in p.view().rows() {
        prop_assert!(row.iter().all(|v| *v >= 0.0));
        prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn attention_rows_are_distributions(x in tokens(12, 8)) {
        let out = attention_forward(&TokenMatrix::new(x).unwrap());
        check_stochastic(&out.p)?;
        prop_assert!(validate_transition(out.p.into_inner()).is_ok());
    }

    #[test]
    fn kernel_matches_attention_on_sphere(x in tokens(10, 16)) {
        let centered = &x - &x.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        prop_assume!(centered.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let on_sphere = TokenMatrix::new(x).unwrap().layer_normed(&LayerNormParams::default()).unwrap();
        let p = attention_forward(&on_sphere).p;
        let k = gaussian_kernel_rows(&on_sphere).unwrap();
        prop_assert!(max_abs(&(p.as_array() - k.as_array())) <= 1e-12);
    }

    #[test]
    fn permuting_tokens_permutes_outputs(x in tokens(8, 6), seed in any::<u64>()) {
        let n = x.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut r = attnwalk::rng::stream(seed, 0);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let y = attention_forward(&TokenMatrix::new(x.clone()).unwrap()).y.select(Axis(0), &perm);
        let yp = attention_forward(&TokenMatrix::new(x.select(Axis(0), &perm)).unwrap()).y;
        prop_assert!(max_abs(&(y - yp)) <= 1e-12);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(a in proptest::collection::vec(-30.0f64..30.0, 1..16), c in -500.0f64..500.0) {
        let a = Array1::from(a);
        let s = softmax(a.view());
        prop_assert!(s.iter().all(|v| *v > 0.0));
        prop_assert!((s.sum() - 1.0).abs() <= 1e-15 * s.len() as f64 + f64::EPSILON);
        let shifted = softmax(a.mapv(|v| v + c).view());
        prop_assert!((&s - &shifted).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero(a in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
        let j = softmax_jacobian(softmax(Array1::from(a).view()).view()).unwrap();
        for row in j.rows() {
            prop_assert!(row.sum().abs() <= 1e-14);
        }
    }

    #[test]
    fn brownian_paths_start_at_origin(horizon in 0.01f64..10.0, n_steps in 1usize..200, seed in any::<u64>()) {
        let path = sample_path(horizon, n_steps, seed).unwrap();
        prop_assert_eq!(path.values()[0], 0.0);
        prop_assert_eq!(path.times()[0], 0.0);
        prop_assert_eq!(path.values().len(), n_steps + 1);
        prop_assert!((path.horizon() - horizon).abs() <= 1e-12 * horizon);
        prop_assert!(quadratic_variation(&path) >= 0.0);
        prop_assert_eq!(&sample_path(horizon, n_steps, seed).unwrap(), &path);
    }
}

fn fisher_instance() -> impl Strategy<Value = (usize, usize, usize, f64, u64)> {
    (1usize..6, 1usize..6, 1usize..12, 1e-3f64..2.0, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn fv_is_linear_symmetric_and_positive((p, m, batch, gamma, seed) in fisher_instance(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let fisher = DampedFisher::new(random_captures(p, m, batch, seed), gamma).unwrap();
        let u = random_matrix(p, m, seed, 1);
        let v = random_matrix(p, m, seed, 2);
        let fu = fisher_vector_product(&fisher, u.view()).unwrap();
        let fv = fisher_vector_product(&fisher, v.view()).unwrap();

        let combo = &u * alpha + &v * beta;
        let lhs = fisher_vector_product(&fisher, combo.view()).unwrap();
        let rhs = &fu * alpha + &fv * beta;
        let scale = frob(&(&fu * alpha)) + frob(&(&fv * beta));
        prop_assert!(frob(&(&lhs - &rhs)) <= 1e-12 * scale.max(f64::MIN_POSITIVE));

        let uv = frob_dot(&u, &fv);
        let vu = frob_dot(&fu, &v);
        prop_assert!((uv - vu).abs() <= 1e-12 * frob(&u) * frob(&fv).max(frob(&fu)));

        prop_assert!(frob_dot(&v, &fv) >= gamma * frob_dot(&v, &v) - 1e-12);
    }

    #[test]
    fn cg_agrees_with_dense_solve((p, m, batch, gamma, seed) in fisher_instance()) {
        let captures = random_captures(p, m, batch, seed);
        let fisher = DampedFisher::new(captures.clone(), gamma).unwrap();
        let b = random_matrix(p, m, seed, 3);
        let cfg = CgConfig { max_iters: Some(p * m), ..CgConfig::default() };
        let sol = cg_solve(&fisher, b.view(), Array2::zeros((p, m)).view(), &cfg).unwrap();
        prop_assert!(sol.iterations <= p * m);
        prop_assert!(rel_err(&sol.x, &dense_solve(&captures, gamma, &b)) <= 1e-8);
        let true_residual = frob(&(&b - &dense_apply(&captures, gamma, &sol.x)));
        prop_assert!((true_residual - sol.final_residual).abs() <= 1e-8 * frob(&b));
    }

    #[test]
    fn single_capture_terminates_in_two_iterations((p, m, _, gamma, seed) in fisher_instance()) {
        let fisher = DampedFisher::new(random_captures(p, m, 1, seed), gamma).unwrap();
        let b = random_matrix(p, m, seed, 4);
        let sol = cg_solve(&fisher, b.view(), Array2::zeros((p, m)).view(), &CgConfig::default()).unwrap();
        prop_assert!(sol.converged);
        prop_assert!(sol.iterations <= 2);
    }

    #[test]
    fn warm_start_from_previous_solution_is_free((p, m, batch, gamma, seed) in fisher_instance()) {
        let fisher = DampedFisher::new(random_captures(p, m, batch, seed), gamma).unwrap();
        let b = random_matrix(p, m, seed, 5);
        let cold = cg_solve(&fisher, b.view(), Array2::zeros((p, m)).view(), &CgConfig::default()).unwrap();
        let warm = cg_solve(&fisher, b.view(), cold.x.view(), &CgConfig::default()).unwrap();
        prop_assert!(warm.iterations <= cold.iterations);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthetic_labels_are_balanced(seed in any::<u64>(), classes in 2usize..6, extra in 0usize..40, n in 2usize..10) {
        let vocab = 2 * classes + extra % 7;
        let n_samples = classes * 3 + extra;
        let data = synth_dataset(seed, n, vocab, classes, n_samples).unwrap();
        let mut counts = vec![0usize; classes];
        for s in &data.samples {
            prop_assert_eq!(s.tokens.len(), n);
            prop_assert!(s.tokens.iter().all(|&t| t < vocab));
            counts[s.label] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(synth_dataset(seed, n, vocab, classes, n_samples).unwrap(), data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn short_runs_are_reproducible_and_finite(seed in any::<u64>(), steps in 0usize..12, cgfac in any::<bool>()) {
        let cfg = TrainConfig {
            seed,
            steps,
            n_samples: 64,
            optimizer: if cgfac { attnwalk::trainer::Optimizer::Cgfac } else { attnwalk::trainer::Optimizer::Sgd },
            ..TrainConfig::default()
        };
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        prop_assert_eq!(a.len(), steps);
        prop_assert!(a.records.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
        prop_assert!(a.same_trajectory(&b));
    }
}
