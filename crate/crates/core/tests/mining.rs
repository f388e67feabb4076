mod common;

use common::*;
use nalgebra::DVector;
use rand::Rng;
use soap3d::synthgen::{self, OrchardSpec};
use soap3d::trainer::{self, TrainConfig};

#[test]
fn mined_tuples_pass_recheck_on_default_orchard() {
    let spec = OrchardSpec::default();
    let records = synthgen::generate_orchard(&spec).unwrap().records();
    assert!(records.len() >= 500, "only {} scans", records.len());
    let cfg = TrainConfig::default();
    let mined = trainer::mine_tuples(&records, &cfg).unwrap();
    assert!(mined.tuples.len() > 100, "only {} tuples", mined.tuples.len());
    assert_eq!(mined.skipped_short_pool, 0);
    for t in &mined.tuples {
        recheck_tuple(&records, t, &cfg).unwrap();
    }
    recheck_anchor_spacing(&records, &mined.tuples, cfg.anchor_spacing).unwrap();
}

#[test]
fn every_eligible_anchor_region_is_covered() {
    // Each first-pass scan with a second-pass partner within r_pos is either
    // an anchor or lies within anchor_spacing of the anchor retained before it.
    let spec = OrchardSpec::default();
    let records = synthgen::generate_orchard(&spec).unwrap().records();
    let cfg = TrainConfig::default();
    let mined = trainer::mine_tuples(&records, &cfg).unwrap();
    let anchors: std::collections::HashSet<u64> = mined.tuples.iter().map(|t| t.anchor_id).collect();
    let mut last: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        let has_pos = records.iter().any(|o| {
            o.segment_id == r.segment_id && o.pass_id != r.pass_id && (o.position - r.position).norm() <= cfg.r_pos
        });
        if !has_pos {
            continue;
        }
        if anchors.contains(&r.scan_id) {
            last = Some(i);
        } else {
            let l = last.expect("a skipped anchor follows a retained one");
            assert!((records[l].position - r.position).norm() < cfg.anchor_spacing);
        }
    }
}

#[test]
fn mining_is_deterministic_per_seed() {
    let records = synthgen::generate_orchard(&OrchardSpec::default()).unwrap().records();
    let cfg = TrainConfig::default();
    let a = trainer::mine_tuples(&records, &cfg).unwrap();
    let b = trainer::mine_tuples(&records, &cfg).unwrap();
    assert_eq!(a, b);
    let c = trainer::mine_tuples(&records, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.tuples, c.tuples);
}

#[test]
fn loss_fixtures_are_exact() {
    assert_eq!(trainer::hinge(0.2, 0.9, 0.5), 0.0);
    assert_eq!(trainer::hinge(0.8, 0.9, 0.5), 0.4);
}

fn on_ray(d: f64, dim: usize, axis: usize) -> DVector<f64> {
    DVector::from_fn(dim, |i, _| if i == axis { d } else { 0.0 })
}

#[test]
fn loss_fixtures_through_descriptors() {
    let a = DVector::zeros(3);
    let p = on_ray(0.8, 3, 0);
    let negs = [on_ray(0.9, 3, 1), on_ray(1.5, 3, 2)];
    let out = trainer::lazy_triplet_loss(&a, &p, &negs, 0.5).unwrap();
    assert_eq!(out.loss, 0.4);
    assert_eq!(out.hardest, 0);
    let inactive = trainer::lazy_triplet_loss(&a, &on_ray(0.2, 3, 0), &negs, 0.5).unwrap();
    assert_eq!(inactive.loss, 0.0);
    assert!(inactive.grad_negatives.iter().all(|g| g.amax() == 0.0));
}

#[test]
fn exactly_one_negative_gets_gradient() {
    let mut rng = soap3d::seed::rng(606);
    let mut active = 0;
    for _ in 0..100 {
        let dim = 8;
        let m = rng.random_range(2..25);
        let a = gaussian_vector(&mut rng, dim);
        let p = &a + gaussian_vector(&mut rng, dim) * 0.3;
        let negs: Vec<DVector<f64>> = (0..m).map(|_| &a + gaussian_vector(&mut rng, dim) * 0.5).collect();
        let out = trainer::lazy_triplet_loss(&a, &p, &negs, 0.5).unwrap();
        let nonzero: Vec<usize> = (0..m).filter(|&i| out.grad_negatives[i].amax() > 0.0).collect();
        let hardest = (0..m)
            .min_by(|&i, &j| (&a - &negs[i]).norm().total_cmp(&(&a - &negs[j]).norm()))
            .unwrap();
        assert_eq!(out.hardest, hardest);
        if out.loss > 0.0 {
            active += 1;
            assert_eq!(nonzero, vec![hardest]);
            let expected = trainer::hinge((&a - &p).norm(), (&a - &negs[hardest]).norm(), 0.5);
            assert_eq!(out.loss, expected);
        } else {
            assert!(nonzero.is_empty());
        }
    }
    assert!(active >= 50, "only {active} active tuples");
}
