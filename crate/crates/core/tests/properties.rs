use proptest::prelude::*;

use feddag::bench::{make_benchmark, BenchSpec};
use feddag::losses::{self, CapM};
use feddag::metrics::auc_binary;
use feddag::model::{GenArch, TaskArch};
use feddag::ndag;
use feddag::params::{param_mean, ParamVector};
use feddag::rng::stream;
use feddag::sha::{self, ScoredSnapshot};

fn vec_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(|d| {
        (
            prop::collection::vec(-5.0..5.0f64, d),
            prop::collection::vec(-5.0..5.0f64, d),
        )
    })
}

fn nonzero(v: &[f64]) -> bool {
    v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_bounded_symmetric_scale_free((f, g) in vec_pair(12), scale in 0.01..100.0f64) {
        prop_assume!(nonzero(&f) && nonzero(&g));
        let d = losses::normalized_sq_dist(&f, &g).unwrap();
        prop_assert!((0.0..=4.0 + 1e-12).contains(&d));
        prop_assert!((d - losses::normalized_sq_dist(&g, &f).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = f.iter().map(|x| x * scale).collect();
        prop_assert!((d - losses::normalized_sq_dist(&scaled, &g).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn capped_discrepancy_is_min_of_distance_and_cap((f, g) in vec_pair(12), m in 1e-3..5.0f64) {
        prop_assume!(nonzero(&f) && nonzero(&g));
        let cap = CapM::new(m).unwrap();
        let raw = losses::loss_sim(&f, &g).unwrap();
        let dis = losses::loss_dis(&f, &g, cap).unwrap();
        prop_assert_eq!(dis, raw.min(m));
    }

    #[test]
    fn weights_form_a_simplex(scores in prop::collection::vec(1e-4..1e4f64, 1..16), beta in 0.0..8.0f64) {
        let w = sha::softmax_weights(&scores, beta).unwrap();
        let w = w.as_slice();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // higher score never gets less weight
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn perturbation_has_radius_rho(
        theta in prop::collection::vec(-2.0..2.0f64, 1..20),
        seed in any::<u64>(),
        rho in 0.0..1.0f64,
    ) {
        let g: Vec<f64> = theta.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 7) as f64 - 3.5).collect();
        let theta = ParamVector::new(theta);
        let p = sha::perturb_model(&theta, &ParamVector::new(g), rho).unwrap();
        let mut diff = p.params.clone();
        diff.axpy_in_place(-1.0, &theta).unwrap();
        prop_assert!(p.perturbed);
        prop_assert!((diff.norm() - rho).abs() < 1e-12);
    }

    #[test]
    fn dense_averaging_never_lowers_the_score(
        scores in prop::collection::vec(0.01..10.0f64, 0..10),
        current in 0.01..10.0f64,
        k in 0usize..6,
    ) {
        let snap = |s: f64, r: usize| ScoredSnapshot {
            params: ParamVector::filled(3, s),
            score: s,
            round: r,
        };
        let history: Vec<ScoredSnapshot> = scores.iter().enumerate().map(|(r, &s)| snap(s, r)).collect();
        let cur = snap(current, scores.len());
        let merged = sha::dense_average(&cur, &history, k).unwrap();
        prop_assert!(merged.score >= current - 1e-12);
        let picked = sha::select_history(&history, current, k);
        prop_assert!(picked.len() <= k);
        prop_assert!(picked.iter().all(|&i| history[i].score > current));
        if k == 0 {
            prop_assert_eq!(merged, cur);
        }
    }

    #[test]
    fn ema_stays_between_endpoints(
        pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..20),
        decay in 0.0..=1.0f64,
    ) {
        let (t, s): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let out = ndag::ema_update(&ParamVector::new(t.clone()), &ParamVector::new(s.clone()), decay).unwrap();
        for ((o, a), b) in out.as_slice().iter().zip(&t).zip(&s) {
            prop_assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn mean_of_copies_is_the_copy(v in prop::collection::vec(-1e3..1e3f64, 1..20), n in 1usize..8) {
        let p = ParamVector::new(v);
        let copies = vec![p.clone(); n];
        let m = param_mean(&copies).unwrap();
        prop_assert!(m.max_abs_diff(&p).unwrap() <= 1e-12 * (1.0 + p.norm()));
    }

    #[test]
    fn auc_flips_with_labels(
        rows in prop::collection::vec((any::<bool>(), 0u8..6), 2..30),
    ) {
        let labels: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        match (auc_binary(&labels, &scores), auc_binary(&flipped, &scores)) {
            (Some(a), Some(b)) => {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
            (None, None) => {}
            _ => prop_assert!(false, "AUC defined for only one labeling"),
        }
    }

    #[test]
    fn generated_inputs_stay_in_range(seed in any::<u64>(), alpha in 0.0..=1.0f64) {
        let spec = feddag::model::ModelSpec {
            task: TaskArch {
                input_dim: 4,
                hidden_dims: vec![5],
                feature_dim: 3,
                num_classes: 2,
                activation: feddag::model::Activation::Relu,
            },
            gen: GenArch { input_dim: 4, hidden_dims: vec![5] },
        };
        let nets = spec.build();
        let mut rng = stream(seed, &[0]);
        let g = nets.gen.init(&mut rng);
        let x: Vec<f64> = (0..4).map(|i| ((seed >> (8 * i)) & 255) as f64 / 255.0).collect();
        let x_hat = ndag::generate(&nets, &g, &x, alpha, (0.0, 1.0)).unwrap();
        prop_assert!(x_hat.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(x_hat.iter().zip(&x).all(|(a, b)| (a - b).abs() <= alpha + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn benchmarks_are_normalized_stratified_and_seeded(
        n_domains in 2usize..5,
        n_classes in 2usize..5,
        per_class in 10usize..40,
        style in 0.0..2.0f64,
        seed in any::<u64>(),
    ) {
        let spec = BenchSpec {
            n_domains,
            n_classes,
            input_dim: 6,
            samples_per_domain: per_class * n_classes,
            style_strength: style,
            seed,
            ..BenchSpec::default()
        };
        let data = make_benchmark(&spec).unwrap();
        prop_assert_eq!(&data, &make_benchmark(&spec).unwrap());
        prop_assert_eq!(data.len(), n_domains);
        for d in &data {
            prop_assert!(d.all().all(|s| s.domain == d.domain && s.x.len() == 6 && s.y < n_classes));
            prop_assert!(d.all().all(|s| s.x.iter().all(|v| (0.0..=1.0).contains(v))));
            for c in 0..n_classes {
                let n_val = d.val.iter().filter(|s| s.y == c).count() as f64;
                let n_all = d.all().filter(|s| s.y == c).count() as f64;
                prop_assert!((n_val - n_all / 10.0).abs() <= 1.0);
            }
        }
    }
}
