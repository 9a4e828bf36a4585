mod common;

use common::skewed_clients;
use fedprune::aggregation::fedavg_equivalence_form;
use fedprune::config::RunConfig;
use fedprune::data::{generate_synthetic, partition, PartitionPlan, PartitionScheme, SyntheticConfig};
use fedprune::federation::{
    assign_speed_classes, run_experiment, select_round_clients, ClientProfile, ExperimentConfig, Seeds, Simulation,
    Speed, Strategy,
};
use fedprune::nn::{backward, ModelSpec};
use fedprune::runner::load_dataset;
use proptest::prelude::*;

fn small_config(strategy: Strategy, slow_fraction: f64, rounds: u64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        strategy,
        rounds,
        clients_per_round: 5,
        epochs: 1,
        batch_size: 8,
        lr: 0.05,
        drop_rate: 0.5,
        mask_update_round: 3,
        slow_fraction,
        eval_every: 1,
        seeds: Seeds::from_master(seed),
    }
}

fn population(seed: u64, slow_fraction: f64) -> (ModelSpec, Vec<ClientProfile>) {
    let ds = generate_synthetic(&SyntheticConfig::new(600, 6, 4, seed)).unwrap();
    let spec = ModelSpec::mlp(vec![6], &[10, 6], 4).unwrap();
    let parts = partition(
        &ds,
        &PartitionPlan {
            scheme: PartitionScheme::SkewedNiid { classes_per_client: 2 },
            num_clients: 12,
            train_fraction: 0.75,
            seed,
        },
    )
    .unwrap();
    (spec, assign_speed_classes(parts, slow_fraction, seed).unwrap())
}

#[test]
fn no_slow_clients_and_no_clt_is_exactly_fedavg() {
    let (spec, clients) = population(3, 0.0);
    let avg = run_experiment(&spec, &clients, &small_config(Strategy::FedAvg, 0.0, 20, 7)).unwrap();
    let pruned = run_experiment(&spec, &clients, &small_config(Strategy::FedPruneNoClt, 0.0, 20, 7)).unwrap();
    assert_eq!(avg.final_state.global, pruned.final_state.global);
    for (a, b) in avg.reports.iter().zip(&pruned.reports) {
        assert_eq!(a.participants, b.participants);
        assert_eq!(a.client_accuracies, b.client_accuracies);
        assert_eq!(a.train_loss.map(f64::to_bits), b.train_loss.map(f64::to_bits));
    }
}

#[test]
fn one_full_batch_step_matches_gradient_form() {
    let (spec, clients) = population(5, 0.0);
    let mut cfg = small_config(Strategy::FedAvg, 0.0, 1, 2);
    cfg.epochs = 1;
    cfg.batch_size = 10_000;
    let sim = Simulation::new(&spec, &clients, &cfg).unwrap();
    let state = sim.initial_state().unwrap();
    let before = state.global.clone();
    let selected = select_round_clients(clients.len(), cfg.clients_per_round, 1, cfg.seeds.selection).unwrap();
    let (after, _) = sim.run_round(state, &selected, 1).unwrap();
    let gradients: Vec<(u64, _)> = selected
        .iter()
        .map(|&c| {
            let g = backward(&spec, &before, &clients[c].train.as_batch().unwrap()).unwrap();
            (clients[c].n_k(), g)
        })
        .collect();
    let expected = fedavg_equivalence_form(&before, &gradients, cfg.lr).unwrap();
    for (a, b) in after.global.to_flat().iter().zip(expected.to_flat()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fedprune_never_drops_a_selected_client(seed in any::<u64>(), slow in 0.0f64..0.95) {
        let (spec, clients) = population(seed, slow);
        for strategy in [Strategy::FedPrune, Strategy::FedPruneNoClt, Strategy::SmallModel] {
            let result = run_experiment(&spec, &clients, &small_config(strategy, slow, 4, seed)).unwrap();
            for r in &result.reports {
                prop_assert_eq!(&r.participants, &r.selected);
                prop_assert!(r.dropped.is_empty());
                prop_assert_eq!(r.participant_samples, r.weight_denominator);
            }
        }
    }

    #[test]
    fn fedavg_participants_are_exactly_the_fast_selected(seed in any::<u64>(), slow in 0.0f64..0.95) {
        let (spec, clients) = population(seed, slow);
        let result = run_experiment(&spec, &clients, &small_config(Strategy::FedAvg, slow, 4, seed)).unwrap();
        for r in &result.reports {
            let fast: Vec<usize> = r.selected.iter().copied().filter(|&c| clients[c].speed == Speed::Fast).collect();
            prop_assert_eq!(&r.participants, &fast);
            let expected: u64 = fast.iter().map(|&c| clients[c].n_k()).sum();
            prop_assert_eq!(r.participant_samples, expected);
            prop_assert_eq!(r.weight_denominator, expected);
            prop_assert_eq!(r.empty_round, fast.is_empty());
        }
    }
}

#[test]
fn sampling_seed_touches_only_the_aggregator() {
    let base = RunConfig::default();
    let mut other = base.clone();
    other.seeds.sampling = Some(base.seeds().sampling ^ 0xdead_beef);
    assert_eq!(base.partition_plan(), other.partition_plan());
    assert_eq!(load_dataset(&base).unwrap(), load_dataset(&other).unwrap());
    let (a, b) = (base.experiment().seeds, other.experiment().seeds);
    assert_eq!((a.selection, a.slow_assignment, a.init, a.shuffle, a.mask), (b.selection, b.slow_assignment, b.init, b.shuffle, b.mask));

    let (spec, clients) = population(1, 0.5);
    let mut cfg = small_config(Strategy::FedPrune, 0.5, 5, 4);
    let first = run_experiment(&spec, &clients, &cfg).unwrap();
    cfg.seeds.sampling ^= 0xdead_beef;
    let second = run_experiment(&spec, &clients, &cfg).unwrap();
    for (x, y) in first.reports.iter().zip(&second.reports) {
        assert_eq!(x.selected, y.selected);
    }
    assert_ne!(first.final_state.global, second.final_state.global);
}

#[test]
fn experiments_are_reproducible() {
    let (spec, parts) = skewed_clients(2);
    let clients = assign_speed_classes(parts, 0.5, 11).unwrap();
    let mut cfg = small_config(Strategy::FedPrune, 0.5, 6, 9);
    cfg.clients_per_round = 10;
    let a = run_experiment(&spec, &clients, &cfg).unwrap();
    let b = run_experiment(&spec, &clients, &cfg).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.final_state.global, b.final_state.global);
}

#[test]
fn mask_changes_only_on_refresh_rounds() {
    let (spec, clients) = population(8, 0.5);
    let result = run_experiment(&spec, &clients, &small_config(Strategy::FedPrune, 0.5, 9, 1)).unwrap();
    let prints: Vec<&str> = result.reports.iter().map(|r| r.mask_fingerprint.as_deref().unwrap()).collect();
    for (i, r) in result.reports.iter().enumerate().skip(1) {
        if !r.mask_refreshed {
            assert_eq!(prints[i], prints[i - 1], "round {}", r.round);
        }
    }
    assert!(result.reports.iter().filter(|r| r.mask_refreshed).map(|r| r.round).eq([3, 6, 9]));
}
