use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{Coords, GradCheck};
use crate::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn config(c: [usize; 3], r4: usize, r23: usize, proj: bool) -> FusionConfig {
    FusionConfig {
        c_b2: c[0],
        c_b3: c[1],
        c_b4: c[2],
        r4,
        r23,
        use_projections: proj,
        ..FusionConfig::paper()
    }
}

fn pool_values(
    pool: &AttentionPool,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let f = Forward::new(store, false);
    let xv = f.tape().leaf(x).unwrap();
    let p = pool.forward(&f, xv, None).unwrap();
    let out = f.tape().value(p.output).to_vec();
    let w = f.tape().value(p.weights).to_vec();
    (out, w)
}

#[test]
fn reduce_b4_paper_and_desk_shapes() {
    let mut store = ParamStore::<f32>::new();
    let m = MsFusion::new(&mut store, FusionConfig::paper(), &mut rng(1)).unwrap();
    let f = Forward::new(&store, false);
    let x = f
        .tape()
        .leaf(&Tensor::full([1, 2048, 64, 64], 0.01))
        .unwrap();
    let y = m.reduce_b4(&f, x).unwrap();
    assert_eq!(f.tape().shape(y), vec![1, 64, 64, 64]);

    let mut store = ParamStore::<f32>::new();
    let m = MsFusion::new(&mut store, FusionConfig::desk(), &mut rng(1)).unwrap();
    let f = Forward::new(&store, false);
    let x = f.tape().leaf(&Tensor::zeros([1, 128, 8, 8])).unwrap();
    assert_eq!(
        f.tape().shape(m.reduce_b4(&f, x).unwrap()),
        vec![1, 16, 8, 8]
    );
    let bad = f.tape().leaf(&Tensor::zeros([1, 64, 8, 8])).unwrap();
    assert!(matches!(m.reduce_b4(&f, bad), Err(Error::Dimension { .. })));
}

#[test]
fn identity_reduction_is_exact() {
    let mut store = ParamStore::<f64>::new();
    let m = MsFusion::new(&mut store, config([2, 2, 4], 4, 2, false), &mut rng(2)).unwrap();
    let w = store.get_mut(m.reduce_b4.weight).data_mut();
    w.fill(0.0);
    for i in 0..4 {
        w[i * 4 + i] = 1.0;
    }
    let x = random(&mut rng(3), &[1, 4, 3, 5]);
    let f = Forward::new(&store, false);
    let xv = f.tape().leaf(&x).unwrap();
    let y = m.reduce_b4(&f, xv).unwrap();
    assert_eq!(&*f.tape().value(y), x.data());
}

#[test]
fn merge_paper_shape() {
    let mut store = ParamStore::<f32>::new();
    let m = MsFusion::new(&mut store, FusionConfig::paper(), &mut rng(1)).unwrap();
    let f = Forward::new(&store, false);
    let b2 = f.tape().leaf(&Tensor::full([1, 512, 64, 64], 0.1)).unwrap();
    let b3 = f
        .tape()
        .leaf(&Tensor::full([1, 1024, 64, 64], 0.1))
        .unwrap();
    let y = m.reduce_and_merge(&f, b2, b3).unwrap();
    assert_eq!(f.tape().shape(y), vec![1, 64, 64, 64]);
}

#[test]
fn merge_zero_reductions_give_zero() {
    let mut store = ParamStore::<f64>::new();
    let m = MsFusion::new(&mut store, FusionConfig::desk(), &mut rng(4)).unwrap();
    for conv in [m.reduce_b2.as_ref().unwrap(), m.reduce_b3.as_ref().unwrap()] {
        store.get_mut(conv.weight).data_mut().fill(0.0);
        store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
    }
    let mut r = rng(5);
    let f = Forward::new(&store, false);
    let b2 = f.tape().leaf(&random(&mut r, &[2, 32, 4, 4])).unwrap();
    let b3 = f.tape().leaf(&random(&mut r, &[2, 64, 4, 4])).unwrap();
    let y = m.reduce_and_merge(&f, b2, b3).unwrap();
    assert!(f.tape().value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn merge_channel_order_matches_slice_oracle() {
    let mut store = ParamStore::<f64>::new();
    let m = MsFusion::new(&mut store, FusionConfig::desk(), &mut rng(6)).unwrap();
    let mut r = rng(7);
    let x2 = random(&mut r, &[1, 32, 3, 3]);
    let x3 = random(&mut r, &[1, 64, 3, 3]);
    let f = Forward::new(&store, false);
    let b2 = f.tape().leaf(&x2).unwrap();
    let b3 = f.tape().leaf(&x3).unwrap();
    let merged = f
        .tape()
        .value(m.reduce_and_merge(&f, b2, b3).unwrap())
        .to_vec();

    // Direct per-pixel evaluation of each reduction.
    let reduce = |conv: &Conv2d, x: &Tensor<f64>| -> Vec<f64> {
        let w = store.get(conv.weight);
        let b = store.get(conv.bias.unwrap()).data();
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        let hw = 9;
        let mut out = vec![0.0; co * hw];
        for o in 0..co {
            for p in 0..hw {
                let mut acc = b[o];
                for i in 0..ci {
                    acc += w.data()[o * ci + i] * x.data()[i * hw + p];
                }
                out[o * hw + p] = acc;
            }
        }
        out
    };
    let r2 = reduce(m.reduce_b2.as_ref().unwrap(), &x2);
    let r3 = reduce(m.reduce_b3.as_ref().unwrap(), &x3);
    for (a, b) in merged[..8 * 9].iter().zip(&r2) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in merged[8 * 9..].iter().zip(&r3) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn merge_spatial_mismatch_is_an_error() {
    let mut store = ParamStore::<f64>::new();
    let m = MsFusion::new(&mut store, FusionConfig::desk(), &mut rng(8)).unwrap();
    let f = Forward::new(&store, false);
    let b2 = f.tape().leaf(&Tensor::zeros([1, 32, 4, 4])).unwrap();
    let b3 = f.tape().leaf(&Tensor::zeros([1, 64, 2, 2])).unwrap();
    assert!(matches!(
        m.reduce_and_merge(&f, b2, b3),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn attention_single_token_returns_it() {
    let mut store = ParamStore::<f64>::new();
    let pool = AttentionPool::new(&mut store, "p", 3, false, &mut rng(1));
    let x = Tensor::new([1, 3, 1, 1], vec![0.4, -1.5, 2.0]).unwrap();
    let (out, w) = pool_values(&pool, &store, &x);
    assert_eq!(out, vec![0.4, -1.5, 2.0]);
    assert_eq!(w, vec![1.0]);
}

#[test]
fn attention_constant_map_returns_token() {
    let mut store = ParamStore::<f64>::new();
    let pool = AttentionPool::new(&mut store, "p", 2, false, &mut rng(1));
    let mut data = vec![0.7; 6];
    data.extend([-0.3; 6]);
    let x = Tensor::new([1, 2, 2, 3], data).unwrap();
    let (out, w) = pool_values(&pool, &store, &x);
    assert!((out[0] - 0.7).abs() < 1e-12 && (out[1] + 0.3).abs() < 1e-12);
    assert!(w.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
}

#[test]
fn attention_two_token_hand_value() {
    let mut store = ParamStore::<f64>::new();
    let pool = AttentionPool::new(&mut store, "p", 1, false, &mut rng(1));
    let x = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
    let (out, w) = pool_values(&pool, &store, &x);
    let e2 = 2f64.exp();
    assert!((w[0] - 1.0 / (1.0 + e2)).abs() < 1e-12);
    assert!((w[1] - e2 / (1.0 + e2)).abs() < 1e-12);
    assert!((out[0] - 2.0 * e2 / (1.0 + e2)).abs() < 1e-12);
    assert!((out[0] - 1.7616).abs() < 1e-4);
}

#[test]
fn attention_rejects_wrong_width_and_query() {
    let mut store = ParamStore::<f64>::new();
    let pool = AttentionPool::new(&mut store, "p", 4, true, &mut rng(1));
    let f = Forward::new(&store, false);
    let x = f.tape().leaf(&Tensor::zeros([1, 3, 2, 2])).unwrap();
    assert!(matches!(
        pool.forward(&f, x, None),
        Err(Error::Dimension { .. })
    ));
    let x = f.tape().leaf(&Tensor::zeros([1, 4, 2, 2])).unwrap();
    let q = f.tape().leaf(&Tensor::zeros([1, 3])).unwrap();
    assert!(matches!(
        pool.forward(&f, x, Some(q)),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn zero_head_gives_one_half() {
    let mut store = ParamStore::<f64>::new();
    let m = MsFusion::new(&mut store, FusionConfig::desk(), &mut rng(9)).unwrap();
    store.get_mut(m.head.weight).data_mut().fill(0.0);
    store.get_mut(m.head.bias).data_mut().fill(0.0);
    let mut r = rng(10);
    let f = Forward::new(&store, false);
    let b2 = f.tape().leaf(&random(&mut r, &[3, 32, 4, 4])).unwrap();
    let b3 = f.tape().leaf(&random(&mut r, &[3, 64, 4, 4])).unwrap();
    let b4 = f.tape().leaf(&random(&mut r, &[3, 128, 4, 4])).unwrap();
    let out = m.forward(&f, b2, b3, b4).unwrap();
    assert_eq!(&*f.tape().value(out.prob), &[0.5, 0.5, 0.5]);
}

#[test]
fn paper_profile_feature_length_and_range() {
    let mut store = ParamStore::<f32>::new();
    let m = MsFusion::new(&mut store, FusionConfig::paper(), &mut rng(11)).unwrap();
    let mut r = rng(12);
    let f = Forward::new(&store, false);
    let b2 = f
        .tape()
        .leaf(&random(&mut r, &[2, 512, 2, 2]).cast())
        .unwrap();
    let b3 = f
        .tape()
        .leaf(&random(&mut r, &[2, 1024, 2, 2]).cast())
        .unwrap();
    let b4 = f
        .tape()
        .leaf(&random(&mut r, &[2, 2048, 2, 2]).cast())
        .unwrap();
    let out = m.forward(&f, b2, b3, b4).unwrap();
    assert_eq!(f.tape().shape(out.features), vec![2, 128]);
    assert_eq!(f.tape().shape(out.merged.unwrap()), vec![2, 64, 2, 2]);
    assert!(f.tape().value(out.prob).iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn ablation_layouts_have_expected_widths() {
    let mut c = FusionConfig::desk();
    c.branches = Branches::B4Only;
    assert_eq!(c.head_width(), 16);
    c.branches = Branches::Separate {
        b2: true,
        b3: false,
    };
    assert_eq!(c.head_width(), 24);
    c.branches = Branches::Separate { b2: true, b3: true };
    assert_eq!(c.head_width(), 32);
    c.use_transformer = false;
    let mut store = ParamStore::<f64>::new();
    let m = MsFusion::new(&mut store, c, &mut rng(1)).unwrap();
    assert_eq!(parameter_count(&store).attention, 0);
    let mut r = rng(2);
    let f = Forward::new(&store, false);
    let b2 = f.tape().leaf(&random(&mut r, &[1, 32, 2, 2])).unwrap();
    let b3 = f.tape().leaf(&random(&mut r, &[1, 64, 2, 2])).unwrap();
    let b4 = f.tape().leaf(&random(&mut r, &[1, 128, 2, 2])).unwrap();
    let out = m.forward(&f, b2, b3, b4).unwrap();
    assert_eq!(out.branch_features.len(), 3);
    assert!(out.attention.is_empty());
}

#[test]
fn merged_width_invariant_is_enforced() {
    assert!(config([8, 8, 8], 16, 4, true).validate().is_err());
    assert!(config([0, 8, 8], 16, 8, true).validate().is_err());
}

#[test]
fn bce_examples() {
    let store = ParamStore::<f64>::new();
    let eval = |p: &[f64], y: &[f64]| {
        let f = Forward::new(&store, false);
        let pv = f
            .tape()
            .leaf(&Tensor::new([p.len()], p.to_vec()).unwrap())
            .unwrap();
        let l = bce_loss(&f, pv, y).unwrap();
        let v = f.tape().value(l)[0];
        v
    };
    assert!(eval(&[1.0], &[1.0]) < 1e-6);
    assert!((eval(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-12);
    let want = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
    assert!((eval(&[0.9, 0.2], &[1.0, 0.0]) - want).abs() < 1e-12);
    assert!((want - 0.1643).abs() < 1e-4);
    let f = Forward::new(&store, false);
    let pv = f
        .tape()
        .leaf(&Tensor::new([2], vec![0.5, 0.5]).unwrap())
        .unwrap();
    assert!(bce_loss(&f, pv, &[1.0]).is_err());
}

#[test]
fn parameter_counts_match_hand_counts() {
    let mut store = ParamStore::<f32>::new();
    MsFusion::new(&mut store, FusionConfig::paper(), &mut rng(1)).unwrap();
    let count = parameter_count(&store);
    assert_eq!(count.head, 129);
    assert_eq!(
        count.reductions,
        2048 * 64 + 64 + 512 * 32 + 32 + 1024 * 32 + 32
    );
    assert_eq!(count.reductions, 180_352);
    assert_eq!(count.attention, 2 * 4 * (64 * 64 + 64));
    assert_eq!(count.attention, 33_280);
    assert_eq!(count.backbone, 0);
    assert_eq!(count.total, 180_352 + 33_280 + 129);
}

#[test]
fn classify_forward_gradients() {
    for proj in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let cfg = config([3, 5, 4], 4, 2, proj);
        let m = MsFusion::new(&mut store, cfg, &mut rng(13)).unwrap();
        let mut r = rng(14);
        let x2 = random(&mut r, &[2, 3, 2, 3]);
        let x3 = random(&mut r, &[2, 5, 2, 3]);
        let x4 = random(&mut r, &[2, 4, 2, 3]);
        let report = GradCheck::default()
            .run_store(
                &store,
                |f| {
                    let t = f.tape();
                    let out = m.forward(f, t.leaf(&x2)?, t.leaf(&x3)?, t.leaf(&x4)?)?;
                    bce_loss(f, out.prob, &[1.0, 0.0])
                },
                Coords::All,
                &mut r,
            )
            .unwrap();
        assert!(report.checked >= 49);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

fn map_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
        (
            Just(c),
            Just(h),
            Just(w),
            proptest::collection::vec(-2.0f64..2.0, c * h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_are_a_distribution((c, h, w, data) in map_strategy(), proj in any::<bool>(), seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let pool = AttentionPool::new(&mut store, "p", c, proj, &mut rng(seed));
        let x = Tensor::new([1, c, h, w], data).unwrap();
        let (out, wts) = pool_values(&pool, &store, &x);
        prop_assert_eq!(out.len(), c);
        prop_assert_eq!(wts.len(), h * w);
        prop_assert!(wts.iter().all(|&v| v >= 0.0));
        prop_assert!((wts.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pooling_is_permutation_invariant((c, h, w, data) in map_strategy(), proj in any::<bool>(), seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let pool = AttentionPool::new(&mut store, "p", c, proj, &mut rng(seed));
        let tokens = h * w;
        let mut perm: Vec<usize> = (0..tokens).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng(seed + 1));
        let mut permuted = vec![0.0; data.len()];
        for ch in 0..c {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[ch * tokens + dst] = data[ch * tokens + src];
            }
        }
        let (out_a, w_a) = pool_values(&pool, &store, &Tensor::new([1, c, h, w], data).unwrap());
        let (out_b, w_b) = pool_values(&pool, &store, &Tensor::new([1, c, h, w], permuted).unwrap());
        for (a, b) in out_a.iter().zip(&out_b) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert!((w_b[dst] - w_a[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_lies_in_token_hull((c, h, w, data) in map_strategy()) {
        let mut store = ParamStore::<f64>::new();
        let pool = AttentionPool::new(&mut store, "p", c, false, &mut rng(0));
        let tokens = h * w;
        let (out, _) = pool_values(&pool, &store, &Tensor::new([1, c, h, w], data.clone()).unwrap());
        for ch in 0..c {
            let row = &data[ch * tokens..(ch + 1) * tokens];
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[ch] >= lo - 1e-12 && out[ch] <= hi + 1e-12);
        }
    }
}
