use std::collections::BTreeSet;

use satmem::envs::{aba_memory, generate, stay_retained, strategy_memory, EnvConfig, Episode, TaskKind};
use satmem::memory::{EvictionStrategy, Layout};

const SEEDS: u64 = 1000;

fn room_of(ep: &Episode, dancer: usize) -> usize {
    ep.frames.iter().find(|f| f.meta.dancer == dancer).expect("query dancer was observed").place_id
}

fn dances_in(ep: &Episode, room: usize) -> BTreeSet<usize> {
    ep.frames.iter().filter(|f| f.place_id == room).map(|f| f.meta.dance).collect()
}

fn dance_of(ep: &Episode, dancer: usize) -> usize {
    ep.frames.iter().find(|f| f.meta.dancer == dancer).unwrap().meta.dance
}

fn stays(ep: &Episode, len: usize) -> Vec<usize> {
    ep.frames.chunks(len).map(|c| c[0].place_id).collect()
}

#[test]
fn next_ballet_labels() {
    let cfg = EnvConfig::default();
    let next = |r: usize| match r {
        0 => 1,
        1 => 2,
        2 => 5,
        5 => 8,
        8 => 7,
        7 => 6,
        6 => 3,
        3 => 0,
        _ => panic!("center has no successor"),
    };
    for seed in 0..SEEDS {
        let ep = generate(TaskKind::NextBallet, seed, &cfg).unwrap();
        let q = room_of(&ep, ep.query_dancer);
        assert_ne!(q, 4);
        assert_eq!(dances_in(&ep, next(q)), BTreeSet::from([ep.label]), "seed {seed}");
        assert_eq!(ep.frames.len(), cfg.visits * cfg.dance_len);
    }
}

#[test]
fn short_stay_labels() {
    let cfg = EnvConfig::default();
    for seed in 0..SEEDS {
        let ep = generate(TaskKind::ShortStay, seed, &cfg).unwrap();
        let q = room_of(&ep, ep.query_dancer);
        assert_eq!(dances_in(&ep, q), BTreeSet::from([ep.label]));
        // one step per frame, to a neighbour or in place
        for w in ep.frames.windows(2) {
            let (a, b) = (w[0].place_id, w[1].place_id);
            let (ax, ay, bx, by) = (a % 3, a / 3, b % 3, b / 3);
            assert!(ax.abs_diff(bx) + ay.abs_diff(by) <= 1);
        }
    }
}

#[test]
fn strategy_task_labels() {
    let cfg = EnvConfig::default();
    let half = cfg.stays * cfg.dance_len / 2;
    for seed in 0..SEEDS {
        let fifo = generate(TaskKind::BalletFifo, seed, &cfg).unwrap();
        assert_eq!(dance_of(&fifo, fifo.query_dancer), fifo.label);
        assert!(fifo.frames.iter().filter(|f| f.meta.dancer == fifo.query_dancer).all(|f| f.time_index >= half));

        let lifo = generate(TaskKind::BalletLifo, seed, &cfg).unwrap();
        assert_eq!(dance_of(&lifo, lifo.query_dancer), lifo.label);
        assert!(lifo.frames.iter().filter(|f| f.meta.dancer == lifo.query_dancer).all(|f| f.time_index < half));

        // the queried dancer is the last one seen in its room
        let mvfo = generate(TaskKind::BalletMvfo, seed, &cfg).unwrap();
        let room = room_of(&mvfo, mvfo.query_dancer);
        let last = mvfo.frames.iter().rev().find(|f| f.place_id == room).unwrap();
        assert_eq!(last.meta.dancer, mvfo.query_dancer);
        assert_eq!(last.meta.dance, mvfo.label);

        // the queried dancer sits in the uniquely most entered room
        let lvfo = generate(TaskKind::BalletLvfo, seed, &cfg).unwrap();
        let seq = stays(&lvfo, cfg.dance_len);
        let mut entries = [0usize; 9];
        for (i, &r) in seq.iter().enumerate() {
            if i == 0 || seq[i - 1] != r {
                entries[r] += 1;
            }
        }
        let top = *entries.iter().max().unwrap();
        assert_eq!(entries.iter().filter(|&&e| e == top).count(), 1);
        assert_eq!(entries[room_of(&lvfo, lvfo.query_dancer)], top);
        assert_eq!(dance_of(&lvfo, lvfo.query_dancer), lvfo.label);
    }
}

#[test]
fn matched_strategy_retains_the_answer() {
    let cfg = EnvConfig::default();
    for kind in TaskKind::STRATEGY_TASKS {
        let s = kind.matched_strategy().unwrap();
        for seed in 0..SEEDS {
            let ep = generate(kind, seed, &cfg).unwrap();
            let mem = ep.replay(strategy_memory(&cfg), s).unwrap();
            assert!(stay_retained(&ep.answer_times, &mem), "{kind} seed {seed}");
        }
    }
}

#[test]
fn opposing_strategy_drops_the_answer() {
    let cfg = EnvConfig::default();
    for (kind, wrong) in [
        (TaskKind::BalletFifo, EvictionStrategy::Lifo),
        (TaskKind::BalletLifo, EvictionStrategy::Fifo),
    ] {
        let dropped = (0..SEEDS)
            .filter(|&seed| {
                let ep = generate(kind, seed, &cfg).unwrap();
                !stay_retained(&ep.answer_times, &ep.replay(strategy_memory(&cfg), wrong).unwrap())
            })
            .count();
        assert!(dropped as f64 >= 0.95 * SEEDS as f64, "{kind}: {dropped}");
    }
}

#[test]
fn ballet_aba_replay() {
    let cfg = EnvConfig::default();
    for seed in 0..SEEDS {
        let ep = generate(TaskKind::BalletAba, seed, &cfg).unwrap();
        let rooms: BTreeSet<usize> = ep.frames.iter().map(|f| f.place_id).collect();
        assert_eq!(rooms.len(), 8);
        assert_eq!(dance_of(&ep, ep.query_dancer), ep.label);
        let flat = ep.replay(aba_memory(&cfg, Layout::Flat), EvictionStrategy::Fifo).unwrap();
        assert_eq!(ep.retained_answer_frames(&flat), 0);
        let place = ep.replay(aba_memory(&cfg, Layout::Place), EvictionStrategy::Fifo).unwrap();
        assert!(ep.retained_answer_frames(&place) >= 1);
    }
}

#[test]
fn opposite_ballet_labels() {
    let cfg = EnvConfig::default();
    for seed in 0..SEEDS {
        let ep = generate(TaskKind::OppositeBallet, seed, &cfg).unwrap();
        assert!(ep.frames.iter().all(|f| f.place_id != 4));
        let q = room_of(&ep, ep.query_dancer);
        let (x, y) = (q % 3, q / 3);
        let opposite = (2 - y) * 3 + (2 - x);
        assert_eq!(dances_in(&ep, opposite), BTreeSet::from([ep.label]));
    }
}

#[test]
fn dumps_are_stable() {
    let cfg = EnvConfig::default();
    for kind in TaskKind::ALL {
        let a = generate(kind, 7, &cfg).unwrap().dump();
        assert_eq!(a, generate(kind, 7, &cfg).unwrap().dump());
        assert_eq!(Episode::load(&a).unwrap().dump(), a);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let cfg = EnvConfig {
        n_dancers: 4,
        ..EnvConfig::default()
    };
    assert!(generate(TaskKind::NextBallet, 0, &cfg).is_err());
}
