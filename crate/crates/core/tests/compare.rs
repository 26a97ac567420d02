mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tafs::compare::{concat_shots, correlation_map, CorrelationInputs};
use tafs::FeatureVolume;

use common::{correlation_oracle, random_matrix, rng};

fn inputs(q: &Array2<f64>, h: usize, w: usize, keys: Array2<f64>, values: Vec<f64>) -> CorrelationInputs {
    let vol = FeatureVolume::new(h, w, q.clone()).unwrap();
    CorrelationInputs::new(&vol, keys, values).unwrap()
}

#[test]
fn matches_loop_oracle() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (h, w, d) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..9));
        let n = r.gen_range(1..40);
        let q = random_matrix(h * w, d, &mut r) * 3.0;
        let k = random_matrix(n, d, &mut r) * 3.0;
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let got = correlation_map(&inputs(&q, h, w, k.clone(), v.clone())).unwrap();
        for (a, b) in got.as_slice().iter().zip(correlation_oracle(&q, &k, &v)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_query_returns_support_mask_mean() {
    let mut r = rng(3);
    let k = random_matrix(30, 5, &mut r);
    let v: Vec<f64> = (0..30).map(|_| r.gen_range(0.0..=1.0)).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let out = correlation_map(&inputs(&Array2::zeros((12, 5)), 3, 4, k, v)).unwrap();
    assert!(out.as_slice().iter().all(|s| (s - mean).abs() < 1e-12));
}

#[test]
fn duplicated_shots_change_nothing() {
    let mut r = rng(5);
    let q = random_matrix(16, 6, &mut r);
    let s = random_matrix(16, 6, &mut r);
    let m: Vec<f64> = (0..16).map(|_| r.gen_range(0.0..=1.0)).collect();
    let (k1, v1) = concat_shots(&[s.view()], &[&m]).unwrap();
    let (k3, v3) = concat_shots(&[s.view(), s.view(), s.view()], &[&m, &m, &m]).unwrap();
    let one = correlation_map(&inputs(&q, 4, 4, k1, v1)).unwrap();
    let three = correlation_map(&inputs(&q, 4, 4, k3, v3)).unwrap();
    for (a, b) in one.as_slice().iter().zip(three.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let q = FeatureVolume::new(2, 2, Array2::zeros((4, 3))).unwrap();
    assert!(CorrelationInputs::new(&q, Array2::zeros((5, 4)), vec![0.0; 5]).is_err());
    assert!(CorrelationInputs::new(&q, Array2::zeros((5, 3)), vec![0.0; 4]).is_err());
    assert!(CorrelationInputs::new(&q, Array2::zeros((0, 3)), vec![]).is_err());
    assert!(CorrelationInputs::new(&q, Array2::zeros((1, 3)), vec![1.5]).is_err());
}

proptest! {
    #[test]
    fn key_order_does_not_matter(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng(seed);
        let q = random_matrix(9, 4, &mut r);
        let k = random_matrix(n, 4, &mut r);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let kp = k.select(Axis(0), &perm);
        let vp: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
        let a = correlation_map(&inputs(&q, 3, 3, k, v)).unwrap();
        let b = correlation_map(&inputs(&q, 3, 3, kp, vp)).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn output_stays_within_value_range(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let q = random_matrix(4, 3, &mut r) * scale;
        let k = random_matrix(10, 3, &mut r) * scale;
        let v: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..=1.0)).collect();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = correlation_map(&inputs(&q, 2, 2, k, v)).unwrap();
        for &s in out.as_slice() {
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }
}
