mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use soap3d::head::{self, HeadParams, StageFlags, LOG_EPS};
use soap3d::localfeat::LocalFeatureSet;

#[test]
fn pooling_gradients() {
    for c in [4, 16] {
        let r = pooling_ratio(c);
        assert!(r <= 1.0, "c={c}: worst ratio {r}");
    }
}

#[test]
fn log_gradients() {
    for c in [4, 16] {
        let r = log_ratio(c);
        assert!(r <= 1.0, "c={c}: worst ratio {r}");
    }
}

#[test]
fn power_gradients() {
    for c in [4, 16] {
        let r = power_ratio(c);
        assert!(r <= 1.0, "c={c}: worst ratio {r}");
    }
}

#[test]
fn projection_and_norm_gradients() {
    let fc = StageFlags {
        use_log: false,
        use_pn: false,
        use_fc: true,
    };
    for c in [4, 16] {
        let r = head_ratio(c, 2 * c, 8, fc, 4000);
        assert!(r <= 1.0, "c={c}: worst ratio {r}");
    }
}

#[test]
fn composed_head_gradients() {
    let r = head_ratio(4, 10, 8, StageFlags::FULL, 5000);
    assert!(r <= 1.0, "worst ratio {r}");
}

#[test]
fn every_flag_combination_has_consistent_gradients() {
    for bits in 0..8 {
        let flags = StageFlags::from_bits(bits).unwrap();
        let r = head_ratio(3, 7, 5, flags, 6000 + 10 * bits as u64);
        assert!(r <= 1.0, "{}: worst ratio {r}", flags.label());
    }
}

#[test]
fn degenerate_log_spectrum_matches_fd() {
    // Repeated eigenvalues take the 1/λ limit of the divided difference.
    let mut rng = soap3d::seed::rng(77);
    let q = random_orthogonal(&mut rng, 5);
    let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0, 2.0, 0.5, 0.5]));
    let spd = &q * lam * q.transpose();
    let spd = (&spd + spd.transpose()) * 0.5;
    let g = gaussian_matrix(&mut rng, 5, 5);
    let (_, cache) = head::logm_spd(&spd, LOG_EPS).unwrap();
    let analytic = head::logm_spd_backward(&cache, &g);
    let r = symmetric_fd(&spd, &analytic, |m| inner(&g, &head::logm_spd(m, LOG_EPS).unwrap().0));
    assert!(r <= 1.0, "worst ratio {r}");
}

#[test]
fn rank_deficient_composed_head() {
    // c = 16, n' = 10: fourth-order stencil at 1e-4.
    let (c, n, d, step) = (16, 10, 8, 1e-4);
    for s in 0..5u64 {
        let mut rng = soap3d::seed::rng(5000 + s);
        let f = gaussian_matrix(&mut rng, n, c);
        let h = rng.random_range(0.3..1.0);
        let p = HeadParams::init(c, d, StageFlags::FULL, h, 5100 + s).unwrap();
        let g = gaussian_vector(&mut rng, p.descriptor_dim());
        let (_, cache) = head::head_forward(&LocalFeatureSet::new(f.clone(), 0).unwrap(), &p).unwrap();
        let grads = head::head_backward(&cache, &p, &g).unwrap();
        let objective = |x: &[f64]| {
            let fs = LocalFeatureSet::new(DMatrix::from_column_slice(n, c, x), 0).unwrap();
            head::head_forward(&fs, &p).unwrap().0 .0.dot(&g)
        };
        let mut probe = f.as_slice().to_vec();
        let numeric: Vec<f64> = (0..probe.len())
            .map(|i| {
                let x0 = probe[i];
                let mut at = |k: f64| {
                    probe[i] = x0 + k * step;
                    let v = objective(&probe);
                    probe[i] = x0;
                    v
                };
                (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * step)
            })
            .collect();
        let r = worst_ratio(grads.features.as_slice(), &numeric);
        assert!(r <= 1.0, "instance {s}: worst ratio {r}");
    }
}
