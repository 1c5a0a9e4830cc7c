mod common;

use common::{loss_table, run_bandit};

#[test]
fn bandit_greedy_policy_finds_every_minimum() {
    for seed in 0..10 {
        let table = loss_table(seed);
        let r = run_bandit(&table, 5000, seed);
        assert_eq!(r.greedy, r.argmin, "seed {seed}");
        assert!(r.converged_pairs >= 4);
        assert!(r.max_q_err < 0.01, "seed {seed}: {}", r.max_q_err);
    }
}

#[test]
fn loss_tables_have_unique_minima() {
    for seed in 0..20 {
        for row in loss_table(seed) {
            let mut sorted = row;
            sorted.sort_by(f64::total_cmp);
            assert!(sorted[0] < sorted[1]);
        }
    }
}

#[test]
fn oracle_losses_recover_the_task_map() {
    // loss 0 for the matched strategy, 1 otherwise
    let mut table = [[1.0; 4]; 4];
    for (t, row) in table.iter_mut().enumerate() {
        row[(t + 1) % 4] = 0.0;
    }
    let r = run_bandit(&table, 5000, 4);
    assert_eq!(r.greedy, vec![1, 2, 3, 0]);
    assert!(r.max_q_err < 0.01, "{}", r.max_q_err);
}
