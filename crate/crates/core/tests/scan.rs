use std::collections::HashSet;

use diffkit::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zigma::scan::{
    arrange_naive, factorized_plan, generate, render_arrows, scheme_for_layer, validate, GridDims, LayerOrders, Permutation,
    ScanFamily, ScanOrder, ScanScheme, Sweep, Zigzag, Zigzag3d,
};

fn random_perm(rng: &mut ChaCha8Rng, m: usize) -> Permutation {
    let mut v: Vec<usize> = (0..m).collect();
    v.shuffle(rng);
    Permutation::new(v).unwrap()
}

#[test]
fn plane_families_fill_without_breaks() {
    for w in 1..=16 {
        for h in 1..=16 {
            let dims = GridDims::plane(w, h);
            for family in [ScanFamily::Zigzag, ScanFamily::Hilbert] {
                for variant in 0..8 {
                    let p = generate(&ScanScheme::new(family, variant, dims)).unwrap();
                    let r = validate(p.order(), &dims).unwrap();
                    assert!(r.is_space_filling && r.breaks == 0, "{family} v{variant} {w}x{h}: {r:?}");
                }
            }
            let sweep = generate(&ScanScheme::new(ScanFamily::Sweep, 0, dims)).unwrap();
            let r = validate(sweep.order(), &dims).unwrap();
            assert_eq!(r.breaks, if w >= 2 { h - 1 } else { 0 });
        }
    }
}

#[test]
fn volume_scans_fill_without_breaks() {
    for t in 1..=4 {
        for w in 1..=4 {
            for h in 1..=4 {
                let dims = GridDims::volume(t, w, h);
                let p = Zigzag3d.generate(&dims, 0).unwrap();
                let r = validate(p.order(), &dims).unwrap();
                assert!(r.is_space_filling && r.breaks == 0, "{t}x{w}x{h}: {r:?}");
                let sweep = generate(&ScanScheme::new(ScanFamily::Sweep3d, 0, dims)).unwrap();
                assert!(validate(sweep.order(), &dims).unwrap().is_space_filling);
                for step in factorized_plan(&dims, "sstt").unwrap().steps {
                    assert_eq!(step.perm().len(), t * w * h);
                }
            }
        }
    }
}

#[test]
fn zigzag_variants_pairwise_distinct() {
    for w in 2..=9 {
        for h in 2..=9 {
            let dims = GridDims::plane(w, h);
            let all: HashSet<Vec<usize>> = (0..8).map(|v| Zigzag.generate(&dims, v).unwrap().order().to_vec()).collect();
            assert_eq!(all.len(), 8, "{w}x{h}");
        }
    }
}

#[test]
fn stated_small_orders() {
    let p = |f, v, w, h| generate(&ScanScheme::new(f, v, GridDims::plane(w, h))).unwrap().order().to_vec();
    assert_eq!(p(ScanFamily::Sweep, 0, 2, 2), [0, 1, 2, 3]);
    assert_eq!(p(ScanFamily::Zigzag, 0, 2, 2), [0, 1, 3, 2]);
    assert_eq!(p(ScanFamily::Zigzag, 0, 3, 3), [0, 1, 2, 5, 4, 3, 6, 7, 8]);
    assert_eq!(p(ScanFamily::Hilbert, 0, 5, 1), [0, 1, 2, 3, 4]);
}

/// Every continuous path on 2x2 starting top-left and moving right first is
/// found by brute force over all 24 orders.
#[test]
fn zigzag_two_by_two_is_the_unique_serpentine() {
    let dims = GridDims::plane(2, 2);
    let mut found = Vec::new();
    let mut cells = vec![0, 1, 2, 3];
    permute(&mut cells, 0, &mut |o| {
        if o[0] == 0 && o[1] == 1 && validate(o, &dims).unwrap().breaks == 0 {
            found.push(o.to_vec());
        }
    });
    assert_eq!(found, [vec![0, 1, 3, 2]]);
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn random_shuffle_breaks_continuity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = GridDims::plane(8, 8);
    let r = validate(random_perm(&mut rng, 64).order(), &dims).unwrap();
    assert!(r.breaks > 30, "{r:?}");
}

#[test]
fn validate_rejects_non_bijection() {
    assert!(validate(&[0, 0, 1, 2], &GridDims::plane(2, 2)).is_err());
    assert!(validate(&[0, 1, 2], &GridDims::plane(2, 2)).is_err());
}

#[test]
fn inverse_law_and_associativity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for m in [4, 64, 1024] {
        for _ in 0..100 {
            let (p, q, r) = (random_perm(&mut rng, m), random_perm(&mut rng, m), random_perm(&mut rng, m));
            assert!(p.inverse().compose(&p).unwrap().is_identity());
            let left = p.compose(&q).unwrap().compose(&r).unwrap();
            let right = p.compose(&q.compose(&r).unwrap()).unwrap();
            assert_eq!(left, right);
        }
    }
}

#[test]
fn every_generated_order_satisfies_inverse_law() {
    for (w, h) in [(64, 64), (1, 4096), (37, 61)] {
        let dims = GridDims::plane(w, h);
        for family in [ScanFamily::Sweep, ScanFamily::Zigzag, ScanFamily::Hilbert] {
            let n = if family == ScanFamily::Sweep { 1 } else { 8 };
            for v in 0..n {
                let p = generate(&ScanScheme::new(family, v, dims)).unwrap();
                let inv = p.inverse_order();
                assert!(p.order().iter().enumerate().all(|(k, &o)| inv[o] == k));
            }
        }
    }
}

#[test]
fn composed_gather_equals_two_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 64;
    let (p0, p1) = (random_perm(&mut rng, m), random_perm(&mut rng, m));
    let x = Tensor::from_fn(&[2, m, 3], |_| rng.random_range(-1.0..1.0));
    let two_step = p1.apply(&p0.inverse().apply(&x).unwrap()).unwrap();
    let once = p0.inverse().compose(&p1).unwrap().apply(&x).unwrap();
    assert!(two_step.bit_eq(&once));
}

#[test]
fn double_indexing_matches_naive_on_random_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let m = [4, 64, 1024, 4096][case % 4];
        let layers: Vec<Permutation> = (0..rng.random_range(1..6)).map(|_| random_perm(&mut rng, m)).collect();
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        // A position-dependent map stands in for the sequence model.
        let body = |i: usize, v: Vec<f64>| v.iter().enumerate().map(|(k, a)| a * (1.0 + 0.01 * k as f64) + i as f64).collect();
        let naive = arrange_naive(&x, &layers, body).unwrap();

        let orders = LayerOrders::new(layers.clone()).unwrap();
        let mut cur = x.clone();
        for i in 0..orders.len() {
            cur = body(i, orders.fused(i).apply_slice(&cur).unwrap());
        }
        let fused = orders.restore().apply_slice(&cur).unwrap();
        assert!(naive.iter().zip(&fused).all(|(a, b)| a.to_bits() == b.to_bits()), "case {case}");
        assert_eq!(orders.fused_gather_count(), layers.len() + 1);
    }
}

#[test]
fn round_trip_apply_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_perm(&mut rng, 16);
    let x = Tensor::from_fn(&[2, 16, 4], |_| rng.random_range(-1.0..1.0));
    assert!(p.inverse().apply(&p.apply(&x).unwrap()).unwrap().bit_eq(&x));

    let tape = Tape::new();
    let v = tape.param(x.clone());
    let y = p.inverse().apply_var(p.apply_var(v).unwrap()).unwrap();
    assert!(y.to_tensor().bit_eq(&x));
    let g = tape.backward(y.sum()).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
}

#[test]
fn apply_rejects_length_mismatch() {
    let p = Permutation::identity(3);
    assert!(p.apply(&Tensor::zeros(&[1, 4, 2])).is_err());
}

#[test]
fn layer_schemes_cycle_through_orf() {
    let dims = GridDims::plane(4, 4);
    assert_eq!(scheme_for_layer(9, 8, dims).unwrap().variant, 1);
    assert!((0..5).all(|i| scheme_for_layer(i, 1, dims).unwrap().variant == 0));
    let v: Vec<usize> = (0..4).map(|i| scheme_for_layer(i, 2, dims).unwrap().variant).collect();
    assert_eq!(v, [0, 1, 0, 1]);
    assert!(scheme_for_layer(0, 0, dims).is_err());
    assert!(scheme_for_layer(0, 9, dims).is_err());
}

#[test]
fn sweep_has_one_variant() {
    assert!(Sweep.generate(&GridDims::plane(2, 2), 1).is_err());
}

#[test]
fn text_rendering_marks_every_cell() {
    let dims = GridDims::plane(5, 4);
    let p = Zigzag.generate(&dims, 3).unwrap();
    let s = render_arrows(p.order(), &dims);
    assert_eq!(s.lines().count(), 4);
    assert_eq!(s.matches('●').count(), 1);
    assert!(!s.contains('*') && !s.contains('?'));
}

proptest! {
    #[test]
    fn compose_matches_sequential_application(seed in any::<u64>(), m in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (random_perm(&mut rng, m), random_perm(&mut rng, m));
        let items: Vec<usize> = (0..m).map(|i| i * 3 + 1).collect();
        let seq = q.apply_slice(&p.apply_slice(&items).unwrap()).unwrap();
        prop_assert_eq!(p.compose(&q).unwrap().apply_slice(&items).unwrap(), seq);
    }

    #[test]
    fn hilbert_any_rectangle_is_continuous(w in 1usize..40, h in 1usize..40, v in 0usize..8) {
        let dims = GridDims::plane(w, h);
        let p = generate(&ScanScheme::new(ScanFamily::Hilbert, v, dims)).unwrap();
        prop_assert_eq!(validate(p.order(), &dims).unwrap().breaks, 0);
    }
}
