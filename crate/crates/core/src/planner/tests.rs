use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::NetProfile;
use crate::latency::{total_latency, Client, DeviceProfile};

fn toy_profile(n: usize, seed: u64) -> ModelProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = || {
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(1e6..5e8)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(1e3..2e5)).collect();
        NetProfile::from_costs(&f, &a)
    };
    ModelProfile {
        generator: net(),
        discriminator: net(),
    }
}

fn edge_fleet(devices: &[usize]) -> Fleet {
    let base = Fleet::bundled("edge7").unwrap();
    Fleet {
        clients: devices
            .iter()
            .enumerate()
            .map(|(id, &d)| Client {
                id,
                ..base.clients[d].clone()
            })
            .collect(),
        server: base.server,
        batch: 64,
    }
}

/// Every quadruple for every client, no symmetry reduction.
fn brute_force(fleet: &Fleet, profile: &ModelProfile) -> f64 {
    let ev = Evaluator::new(fleet, profile).unwrap();
    let all = Cuts::all(
        profile.generator.major_count(),
        profile.discriminator.major_count(),
    );
    let k = fleet.len();
    let total = all.len().pow(k as u32);
    let mut best = f64::INFINITY;
    let mut cuts = vec![all[0]; k];
    for mut i in 0..total {
        for c in cuts.iter_mut() {
            *c = all[i % all.len()];
            i /= all.len();
        }
        best = best.min(ev.latency(&cuts));
    }
    best
}

fn quick_ga(seed: u64) -> GaConfig {
    GaConfig {
        population: 200,
        generations: 100,
        seed,
        ..GaConfig::default()
    }
}

#[test]
fn forced_cuts_leave_one_assignment() {
    let f = edge_fleet(&[0]);
    let p = toy_profile(3, 1);
    let ex = exhaustive_search(&f, &p).unwrap();
    assert_eq!(ex.evaluated, 1);
    assert_eq!(ex.assignment.cuts, vec![Cuts::new(1, 3, 1, 3)]);
}

#[test]
fn five_layers_enumerate_sixteen() {
    let f = edge_fleet(&[2]);
    let ex = exhaustive_search(&f, &toy_profile(5, 2)).unwrap();
    assert_eq!(ex.evaluated, 16);
}

#[test]
fn multiset_counts() {
    assert_eq!(multisets(3, 2).len(), 6);
    assert_eq!(multisets(16, 3).len() as u128, binomial(18, 3));
    assert!(multisets(4, 3).iter().all(|m| m.windows(2).all(|w| w[0] <= w[1])));
    // Two device-1 clients and one device-7: C(17, 2) * 16.
    let f = edge_fleet(&[0, 0, 6]);
    assert_eq!(search_space(&f, &toy_profile(5, 3)), 136 * 16);
}

#[test]
fn symmetry_reduction_matches_brute_force() {
    for (seed, devices) in [
        (1, vec![0, 0, 0]),
        (2, vec![0, 0, 6]),
        (3, vec![4, 1, 4]),
        (4, vec![3, 3]),
        (5, vec![0, 6, 2]),
    ] {
        let f = edge_fleet(&devices);
        let p = toy_profile(5, seed);
        let ex = exhaustive_search(&f, &p).unwrap();
        let bf = brute_force(&f, &p);
        assert_eq!(ex.latency, bf, "devices {devices:?}");
        let direct = total_latency(&f, &ex.assignment, &p).unwrap().total;
        assert_eq!(direct, ex.latency);
    }
}

#[test]
fn four_client_subfleet_on_six_layers() {
    let f = edge_fleet(&[0, 4, 4, 6]);
    let p = toy_profile(6, 9);
    let ex = exhaustive_search(&f, &p).unwrap();
    assert_eq!(ex.latency, brute_force(&f, &p));
}

#[test]
fn search_space_guard() {
    let f = Fleet::bundled("edge7").unwrap();
    let p = toy_profile(5, 4);
    match exhaustive_search(&f, &p) {
        Err(Error::SearchSpace { size, limit }) => {
            assert_eq!(size, 16u128.pow(7));
            assert_eq!(limit, EXHAUSTIVE_LIMIT);
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn ga_finds_optimum_for_two_clients() {
    let f = edge_fleet(&[0, 6]);
    let p = toy_profile(6, 5);
    let ex = exhaustive_search(&f, &p).unwrap();
    let ga = evolve(&quick_ga(3), &f, &p).unwrap();
    assert_eq!(ga.latency, ex.latency);
    ga.assignment.validate(&p).unwrap();
}

#[test]
fn closed_population_keeps_fitness() {
    let f = edge_fleet(&[0, 1, 2]);
    let p = toy_profile(5, 6);
    let problem = Problem::new(&f, &p, None).unwrap();
    let genome = vec![Cuts::new(1, 4, 2, 5); 3];
    let cfg = GaConfig {
        population: 20,
        generations: 15,
        mutation_rate: 0.0,
        stagnation: None,
        ..GaConfig::default()
    };
    let out = evolve_from(&cfg, &problem, vec![genome.clone(); 20]).unwrap();
    let f0 = problem.fitness(&genome);
    assert_eq!(out.history.len(), 16);
    assert!(out.history.iter().all(|h| h.best == f0 && h.current == f0));
    assert!(out.history.iter().all(|h| ((h.mean - f0) / f0).abs() < 1e-12));
}

#[test]
fn elites_keep_best_non_decreasing() {
    let f = edge_fleet(&[0, 1, 4, 5, 6]);
    let p = toy_profile(5, 7);
    let out = evolve(&quick_ga(11), &f, &p).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1].best >= w[0].best);
        assert!(w[1].current >= w[0].current);
    }
}

#[test]
fn seeded_ga_is_reproducible() {
    let f = Fleet::bundled("edge100").unwrap();
    let p = toy_profile(5, 8);
    let cfg = GaConfig {
        population: 60,
        generations: 20,
        seed: 42,
        ..GaConfig::default()
    };
    let a = evolve(&cfg, &f, &p).unwrap();
    let b = evolve(&cfg, &f, &p).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.assignment.len(), 100);
}

#[test]
fn fitness_is_negated_full_fleet_latency() {
    let f = edge_fleet(&[0, 1, 2, 3]);
    let p = toy_profile(5, 10);
    let problem = Problem::new(&f, &p, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = Vec::new();
    for _ in 0..20 {
        let cuts: Vec<Cuts> = (0..4).map(|_| problem.random_cuts(&mut rng)).collect();
        let direct = total_latency(&f, &CutAssignment::new(cuts.clone()), &p).unwrap().total;
        assert_eq!(problem.fitness(&cuts), -direct);
        seen.push((problem.fitness(&cuts), direct));
    }
    seen.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(seen.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn fitness_uses_expanded_fleet() {
    let f = Fleet::bundled("edge100").unwrap();
    let p = toy_profile(5, 12);
    let problem = Problem::new(&f, &p, Some(20)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cuts: Vec<Cuts> = (0..20).map(|_| problem.random_cuts(&mut rng)).collect();
    let full = problem.reduction.expand(&cuts);
    assert_eq!(full.len(), 100);
    assert_eq!(
        problem.fitness(&cuts),
        -total_latency(&f, &full, &p).unwrap().total
    );
}

#[test]
fn operators_emit_valid_assignments() {
    let f = edge_fleet(&[0, 1, 2, 3, 4, 5, 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for state in 0..10_000u64 {
        let n_g = 3 + (state % 5) as usize;
        let n_d = 3 + (state / 5 % 5) as usize;
        let p = ModelProfile {
            generator: NetProfile::from_costs(&vec![1.0; n_g], &vec![4.0; n_g]),
            discriminator: NetProfile::from_costs(&vec![1.0; n_d], &vec![4.0; n_d]),
        };
        let problem = Problem::new(&f, &p, None).unwrap();
        let a = problem.random_individual(&mut rng);
        let b = problem.random_individual(&mut rng);
        let (mut x, y) = crossover(&a, &b, &mut rng);
        for c in x.iter_mut() {
            problem.mutate_one(c, &mut rng);
        }
        CutAssignment::new(x).validate(&p).unwrap();
        CutAssignment::new(y).validate(&p).unwrap();
    }
}

#[test]
fn identical_clients_are_interchangeable() {
    let f = edge_fleet(&[3, 0, 3, 3, 5]);
    let p = toy_profile(6, 13);
    let ev = Evaluator::new(&f, &p).unwrap();
    let problem = Problem::new(&f, &p, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let mut cuts: Vec<Cuts> = (0..5).map(|_| problem.random_cuts(&mut rng)).collect();
        let before = ev.latency(&cuts);
        cuts.swap(0, 2);
        cuts.swap(2, 3);
        assert_eq!(ev.latency(&cuts), before);
    }
}

#[test]
fn bad_config_rejected() {
    let f = edge_fleet(&[0]);
    let p = toy_profile(5, 1);
    let cfg = GaConfig {
        population: 3,
        ..GaConfig::default()
    };
    assert!(evolve(&cfg, &f, &p).is_err());
    let cfg = GaConfig {
        tournament: 0,
        ..GaConfig::default()
    };
    assert!(evolve(&cfg, &f, &p).is_err());
}

#[test]
fn unused_device_profile_is_fine() {
    let f = edge_fleet(&[1]);
    let p = toy_profile(4, 1);
    let ex = exhaustive_search(&f, &p).unwrap();
    // n = 4, mid = 2: head 1, tail 3 or 4, per network.
    assert_eq!(ex.evaluated, 4);
    let _ = DeviceProfile::new(1.0, 1.0, 1.0);
}
