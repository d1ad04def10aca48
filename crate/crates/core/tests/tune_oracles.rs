mod support;

use evgust::tune::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_force(objs: &[Objectives]) -> Vec<usize> {
    (0..objs.len())
        .filter(|&i| !(0..objs.len()).any(|j| j != i && objs[j].dominates(&objs[i])))
        .collect()
}

#[test]
fn pareto_front_equals_brute_force() {
    for run in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(run);
        // coarse values force ties and duplicates
        let coarse = run % 2 == 0;
        let objs: Vec<Objectives> = (0..50)
            .map(|_| {
                let mut v: [f64; 3] = [r.random_range(0.0..3.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
                if coarse {
                    v.iter_mut().for_each(|x| *x = (*x * 2.0).round() / 2.0);
                }
                Objectives {
                    val_mae: v[0],
                    val_r2_rmse_sigma_total: v[1],
                    val_pitd_skill: v[2],
                }
            })
            .collect();
        assert_eq!(pareto_front(&objs), brute_force(&objs), "run {run}");
    }
}

#[test]
fn sampled_configs_stay_in_bounds() {
    let space = HyperSpace::default();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5000 {
        let c = sample(&space, &mut r);
        assert!(space.contains(&c), "{c:?}");
    }
}

#[test]
fn search_on_a_synthetic_task() {
    let train = support::linear_noisy(300, 0.2, 1);
    let val = support::linear_noisy(100, 0.2, 2);
    // shrink the space so each trial is quick
    let space = HyperSpace {
        hidden_layers: (1, 2),
        hidden_neurons: (2, 32),
        batch_size: (16, 128),
        ..Default::default()
    };
    let report = search(&space, 12, 3, DEFAULT_SCALAR_WEIGHT, &[], evidential_objective(&train, &val, 5, 3)).unwrap();
    assert_eq!(report.trials.len(), 12);
    assert!(report.trials.iter().all(|t| space.contains(&t.config)));
    let objs: Vec<Objectives> = report.trials.iter().filter_map(|t| t.objectives().copied()).collect();
    let ids: Vec<usize> = report.trials.iter().filter(|t| t.objectives().is_some()).map(|t| t.id).collect();
    let front: Vec<usize> = brute_force(&objs).into_iter().map(|i| ids[i]).collect();
    assert_eq!(report.pareto, front);
    assert!(report.pareto.contains(&report.recommended));
    let best = report
        .trials
        .iter()
        .filter_map(|t| t.objectives().map(|o| (t.id, o.scalarized(DEFAULT_SCALAR_WEIGHT))))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(best.0, report.recommended);

    let again = search(&space, 12, 3, DEFAULT_SCALAR_WEIGHT, &[], evidential_objective(&train, &val, 5, 3)).unwrap();
    let strip = |r: &SearchReport| r.trials.iter().map(|t| (t.id, t.config.clone(), t.status.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&report), strip(&again));
}
