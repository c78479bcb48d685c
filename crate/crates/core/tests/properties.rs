use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use ssl_lab::activation::sigmoid;
use ssl_lab::calculus::{active_block, grad_hat, grad_tilde, hessian_tilde_block};
use ssl_lab::data::{sample_dataset, template, Dataset, DistributionConfig};
use ssl_lab::landscape::{
    hoffman_wielandt_check, phi_prime, solve_tilde_minimum, inner_root, SolverOptions, TanhBounds,
};
use ssl_lab::metrics::{aggregate_ci, projection_onto_rowspan};
use ssl_lab::models::{loss_hat, loss_sl_bce, loss_ssl, loss_tilde, McSpec, SlModel, SslModel};
use ssl_lab::training::{flatten_w, gd_train, init_in_region, InitMode, TildeObjective, TrainConfig};
use ssl_lab::ActivationKind::{self, Sigmoid, Tanh};

const TAU: f64 = 7.0;
const ALPHA: f64 = 1.0 / 800.0;

fn dist(d: usize, n: usize, rho: f64, seed: u64) -> DistributionConfig {
    DistributionConfig { d, tau: TAU, rho, n, seed }
}

fn matrix(d: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, 2 * d).prop_map(move |v| DMatrix::from_row_slice(2, d, &v))
}

fn symmetric() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
    (1usize..7).prop_flat_map(|n| {
        (prop::collection::vec(-5.0f64..5.0, n * n), prop::collection::vec(-5.0f64..5.0, n * n)).prop_map(
            move |(a, b)| {
                let a = DMatrix::from_vec(n, n, a);
                let b = DMatrix::from_vec(n, n, b);
                ((&a + a.transpose()) * 0.5, (&b + b.transpose()) * 0.5)
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn datasets_are_bitwise_deterministic(seed in any::<u64>(), n in 4usize..60, rho in 0.0f64..0.5) {
        let cfg = dist(5, n, rho, seed);
        let (a, b) = (sample_dataset(&cfg).unwrap(), sample_dataset(&cfg).unwrap());
        for (p, q) in a.points.iter().zip(&b.points) {
            prop_assert!(p.x.iter().zip(q.x.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!((p.kind, p.label), (q.kind, q.label));
        }
    }

    #[test]
    fn labels_counts_and_noise_free_means(seed in any::<u64>(), n in 4usize..200) {
        let data = sample_dataset(&dist(6, n, 0.0, seed)).unwrap();
        prop_assert_eq!(data.counts.iter().sum::<usize>(), n);
        for p in &data.points {
            prop_assert_eq!(p.label, u8::from(p.kind >= 3));
            prop_assert_eq!(&p.x, &template(p.kind, TAU, 6));
        }
    }

    #[test]
    fn dataset_csv_round_trips(seed in any::<u64>(), n in 4usize..40) {
        let data = sample_dataset(&dist(4, n, 0.1, seed)).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        prop_assert_eq!(rows.len(), n);
        for (row, p) in rows.iter().zip(&data.points) {
            for k in 0..4 {
                prop_assert_eq!(row[k].parse::<f64>().unwrap().to_bits(), p.x[k].to_bits());
            }
            prop_assert_eq!(row[4].parse::<u8>().unwrap(), p.kind);
            prop_assert_eq!(row[5].parse::<u8>().unwrap(), p.label);
        }
    }

    #[test]
    fn activation_symmetries(x in -30.0f64..30.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        prop_assert!((Tanh.value(0, -x) + Tanh.value(0, x)).abs() < 1e-12);
        prop_assert!(Sigmoid.value(1, x).abs() <= 0.25);
        prop_assert!(Sigmoid.h(1, x).abs() < 0.25);
    }

    #[test]
    fn regulariser_shift_is_exact_delta(w in matrix(5, 3.0), a1 in 1e-4f64..1.0, a2 in 1e-4f64..1.0, seed in any::<u64>()) {
        let data = sample_dataset(&dist(5, 20, 0.05, seed)).unwrap();
        let r = w.norm_squared();
        let tol = |x: f64, y: f64| 1e-14 * (1.0 + x.abs() + y.abs());
        let m1 = SslModel::new(w.clone(), a1, Sigmoid).unwrap();
        let m2 = SslModel::new(w.clone(), a2, Sigmoid).unwrap();
        let (t1, t2) = (loss_tilde(&m1, TAU), loss_tilde(&m2, TAU));
        prop_assert!((t1 - t2 - (a1 - a2) * r).abs() <= tol(t1, t2));
        let (h1, h2) = (loss_hat(&m1, &data).unwrap(), loss_hat(&m2, &data).unwrap());
        prop_assert!((h1 - h2 - (a1 - a2) * r).abs() <= tol(h1, h2));
        let mc = McSpec::new(3, seed).unwrap();
        let (s1, s2) = (loss_ssl(&m1, &data, 0.05, &mc).unwrap(), loss_ssl(&m2, &data, 0.05, &mc).unwrap());
        prop_assert!((s1 - s2 - (a1 - a2) * r).abs() <= tol(s1, s2));
        let b1 = SlModel::new(w.clone(), [0.5, -0.5], a1, a2).unwrap();
        let b2 = SlModel::new(w.clone(), [0.5, -0.5], a2, a1).unwrap();
        let (l1, l2) = (loss_sl_bce(&b1, &data).unwrap(), loss_sl_bce(&b2, &data).unwrap());
        prop_assert!((l1 - l2 - (a1 - a2) * r - (a2 - a1) * 0.5).abs() <= tol(l1, l2));
    }

    #[test]
    fn noise_free_objectives_agree(w in matrix(5, 3.0), seed in any::<u64>(), k in 1usize..30) {
        let data = sample_dataset(&dist(5, 40, 0.0, seed)).unwrap();
        let m = SslModel::new(w, ALPHA, Sigmoid).unwrap();
        let hat = loss_hat(&m, &data).unwrap();
        let ssl = loss_ssl(&m, &data, 0.0, &McSpec::new(4, seed).unwrap()).unwrap();
        prop_assert!((hat - ssl).abs() <= 1e-14 * (1.0 + hat.abs()));
        let equal = Dataset::from_counts([k; 4], TAU, 5);
        prop_assert_eq!(loss_hat(&m, &equal).unwrap().to_bits(), loss_tilde(&m, TAU).to_bits());
    }

    #[test]
    fn regulariser_gradient_alone(w in matrix(6, 3.0), alpha in 1e-4f64..1.0) {
        let mut data = Dataset::from_counts([3, 1, 2, 2], TAU, 6);
        data.counts = [0; 4];
        let g = grad_hat(&SslModel::new(w.clone(), alpha, Sigmoid).unwrap(), &data).unwrap();
        prop_assert_eq!(g.w, &w * (2.0 * alpha));
    }

    #[test]
    fn hessian_block_structure(row in prop::collection::vec(-5.0f64..5.0, 8), tanh in any::<bool>()) {
        let act = if tanh { Tanh } else { Sigmoid };
        let h = hessian_tilde_block(&DVector::from_vec(row), TAU, ALPHA, act);
        for i in 0..8 {
            for j in 0..8 {
                if i < 2 && j < 2 {
                    continue;
                }
                let expected = if i == j { 2.0 * ALPHA } else { 0.0 };
                prop_assert_eq!(h[(i, j)], expected);
            }
        }
    }

    #[test]
    fn inner_curve_is_strictly_increasing(a in 3.1f64..3.9, x in 9.0f64..30.0) {
        prop_assert!(phi_prime(x, a, TAU, ALPHA, Sigmoid) > 4.0 * ALPHA / (TAU * TAU));
        let opts = SolverOptions::for_activation(Sigmoid, TanhBounds::Wide);
        prop_assert!(inner_root(a, TAU, ALPHA, Sigmoid, &opts).unwrap() >= 9.0);
    }

    #[test]
    fn hoffman_wielandt_holds((a, b) in symmetric()) {
        let (lhs, rhs, ok) = hoffman_wielandt_check(&a, &b).unwrap();
        prop_assert!(ok, "{} > {}", lhs, rhs);
    }

    #[test]
    fn projection_invariants(w in matrix(7, 2.0), m in prop::array::uniform4(-2.0f64..2.0), u in prop::collection::vec(-1.0f64..1.0, 7)) {
        let mix = DMatrix::from_row_slice(2, 2, &m);
        prop_assume!(mix.determinant().abs() > 0.05);
        prop_assume!((&w * w.transpose()).determinant().abs() > 1e-3);
        let u = DVector::from_vec(u);
        prop_assume!(u.norm() > 1e-3);
        let u = u.normalize();
        let p = projection_onto_rowspan(&w, &u).unwrap();
        prop_assert!((-1e-8..=1.0 + 1e-8).contains(&p));
        prop_assert!((p - projection_onto_rowspan(&(&mix * &w), &u).unwrap()).abs() < 1e-10);
        let total: f64 = (0..7)
            .map(|k| projection_onto_rowspan(&w, &DVector::from_fn(7, |i, _| f64::from(u8::from(i == k)))).unwrap().powi(2))
            .sum();
        prop_assert!((total - 2.0).abs() < 1e-8);
    }

    #[test]
    fn ci_ignores_order(mut v in prop::collection::vec(-10.0f64..10.0, 2..30), seed in any::<u64>()) {
        let a = aggregate_ci(&v).unwrap();
        let mut r = ssl_lab::rng::stream(seed, 0);
        use rand::seq::SliceRandom;
        v.shuffle(&mut r);
        let b = aggregate_ci(&v).unwrap();
        prop_assert_eq!((a.mean, a.half_width, a.min, a.max), (b.mean, b.half_width, b.min, b.max));
    }
}

#[test]
fn minimum_is_strict_for_both_activations() {
    for act in [Sigmoid, Tanh] {
        let m = solve_tilde_minimum(TAU, ALPHA, act, 1e-10).unwrap();
        let [a, b, c] = active_block(m.first, m.second, TAU, ALPHA, act);
        let lo = 0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt();
        assert!(lo >= 2.0 * ALPHA - 1e-8, "{act}: {lo}");
        assert!(grad_tilde(&m.model(6), TAU).norm() < 1e-10);
    }
}

#[test]
fn gd_on_tilde_decreases_loss_and_decays_rest_exactly() {
    let d = 10;
    let (mu, lm) = (2.0 * ALPHA, 0.4917);
    let eta = 2.0 / (mu + lm);
    let obj = TildeObjective { d, tau: TAU, alpha: ALPHA, activation: Sigmoid };
    let cfg = TrainConfig { eta, iters: 300, init_mode: InitMode::Region, mc: McSpec::new(1, 0).unwrap(), record_every: 1 };
    for seed in 0..4 {
        let w0 = init_in_region(TAU, d, &mut ssl_lab::rng::stream(seed, 0), Sigmoid);
        let traj = gd_train(&obj, &flatten_w(&w0), d, &cfg).unwrap();
        for pair in traj.snapshots.windows(2) {
            assert!(pair[1].loss <= pair[0].loss + 1e-12);
            for j in 0..2 {
                for k in 2..d {
                    let (x, y) = (pair[0].params[j * d + k], pair[1].params[j * d + k]);
                    assert!((y - (1.0 - 2.0 * ALPHA * eta) * x).abs() <= 1e-10 * x.abs());
                }
            }
        }
    }
}

#[test]
fn activation_parsing() {
    assert_eq!("tanh".parse::<ActivationKind>().unwrap(), Tanh);
}
