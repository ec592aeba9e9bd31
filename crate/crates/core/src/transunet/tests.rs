use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{Coords, GradCheck};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn tiny() -> UNetConfig {
    UNetConfig {
        depth: 2,
        base_channels: 2,
        input_side: 16,
        use_projections: true,
    }
}

#[test]
fn desk_encoder_shapes() {
    let mut store = ParamStore::<f32>::new();
    let net = TransUnet::new(&mut store, UNetConfig::desk(), &mut rng(1)).unwrap();
    let f = Forward::new(&store, false);
    let x = f
        .tape()
        .constant(&Tensor::full([1, 1, 64, 64], 0.3))
        .unwrap();
    let (skips, trunk) = net.encode(&f, x).unwrap();
    let shapes: Vec<Vec<usize>> = skips.iter().map(|&s| f.tape().shape(s)).collect();
    assert_eq!(
        shapes,
        vec![
            vec![1, 8, 64, 64],
            vec![1, 16, 32, 32],
            vec![1, 32, 16, 16],
            vec![1, 64, 8, 8]
        ]
    );
    assert_eq!(f.tape().shape(trunk), vec![1, 64, 4, 4]);
    let (tokens, query) = net.bottleneck_tokens(&f, trunk).unwrap();
    assert_eq!(f.tape().shape(tokens), vec![1, 128, 4, 4]);
    assert_eq!(f.tape().shape(query), vec![1, 128]);
}

#[test]
fn zero_image_gives_zero_features() {
    let mut store = ParamStore::<f64>::new();
    let net = TransUnet::new(&mut store, UNetConfig::desk(), &mut rng(2)).unwrap();
    let f = Forward::new(&store, false);
    let x = f.tape().constant(&Tensor::zeros([1, 1, 64, 64])).unwrap();
    let (skips, trunk) = net.encode(&f, x).unwrap();
    for s in skips.into_iter().chain([trunk]) {
        assert!(f.tape().value(s).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rejects_wrong_image_size() {
    let mut store = ParamStore::<f64>::new();
    let net = TransUnet::new(&mut store, tiny(), &mut rng(2)).unwrap();
    let f = Forward::new(&store, false);
    let x = f.tape().constant(&Tensor::zeros([1, 1, 8, 8])).unwrap();
    assert!(matches!(net.forward(&f, x), Err(Error::Dimension { .. })));
    let mut bad = tiny();
    bad.input_side = 18;
    assert!(bad.validate().is_err());
}

#[test]
fn positional_encoding_origin_and_injectivity() {
    let pe = positional_encoding(8, 3, 3);
    let at = |y: usize, x: usize| -> Vec<f64> { (0..8).map(|c| pe[(c * 3 + y) * 3 + x]).collect() };
    assert_eq!(at(0, 0), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    for (c, h, w) in [(8, 3, 3), (128, 4, 4), (4, 5, 5)] {
        let pe = positional_encoding(c, h, w);
        let vec_at = |p: usize| -> Vec<f64> { (0..c).map(|ch| pe[ch * h * w + p]).collect() };
        for a in 0..h * w {
            for b in a + 1..h * w {
                let (va, vb) = (vec_at(a), vec_at(b));
                let dist: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y).abs()).sum();
                assert!(dist > 1e-6, "positions {a} and {b} collide at c={c}");
            }
        }
    }
}

fn gate_values(
    gate: &SkipGate,
    store: &ParamStore<f64>,
    skip: &Tensor<f64>,
    q: &Tensor<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let f = Forward::new(store, false);
    let s = f.tape().constant(skip).unwrap();
    let q = f.tape().constant(q).unwrap();
    let g = gate.forward(&f, s, q).unwrap();
    let gated = f.tape().value(g.gated).to_vec();
    let pooled = f.tape().value(g.pooled).to_vec();
    (gated, pooled)
}

fn plain_gate(store: &mut ParamStore<f64>, below: usize, c: usize) -> SkipGate {
    SkipGate {
        adapter: Linear::new(store, "g.adapter", below, c, &mut rng(3)),
        pool: AttentionPool::new(store, "g.attn", c, false, &mut rng(3)),
    }
}

#[test]
fn gate_saturation() {
    let mut store = ParamStore::<f64>::new();
    let gate = plain_gate(&mut store, 4, 2);
    let q = Tensor::new([1, 4], vec![0.2, -0.1, 0.3, 0.5]).unwrap();
    let skip = Tensor::full([1, 2, 3, 3], 50.0);
    let (gated, _) = gate_values(&gate, &store, &skip, &q);
    assert!(gated.iter().all(|&g| (g - 50.0).abs() < 1e-9));
    let skip = Tensor::full([1, 2, 3, 3], -50.0);
    let (gated, _) = gate_values(&gate, &store, &skip, &q);
    assert!(gated.iter().all(|&g| g.abs() < 1e-9));
}

#[test]
fn gate_two_token_hand_value() {
    let mut store = ParamStore::<f64>::new();
    let gate = plain_gate(&mut store, 1, 1);
    store.get_mut(gate.adapter.weight).data_mut()[0] = 1.0;
    let skip = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
    let q = Tensor::new([1, 1], vec![1.0]).unwrap();
    let (gated, pooled) = gate_values(&gate, &store, &skip, &q);
    let e2 = 2f64.exp();
    let f = 2.0 * e2 / (1.0 + e2);
    let sig = 1.0 / (1.0 + (-f).exp());
    assert!((pooled[0] - f).abs() < 1e-12);
    assert_eq!(gated[0], 0.0);
    assert!((gated[1] - 2.0 * sig).abs() < 1e-12);
}

#[test]
fn gate_rejects_mismatched_query() {
    let mut store = ParamStore::<f64>::new();
    let gate = plain_gate(&mut store, 4, 2);
    let f = Forward::new(&store, false);
    let s = f.tape().constant(&Tensor::zeros([1, 2, 2, 2])).unwrap();
    let q = f.tape().constant(&Tensor::zeros([1, 3])).unwrap();
    assert!(matches!(
        gate.forward(&f, s, q),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn output_is_one_channel_at_input_extent() {
    let mut store = ParamStore::<f32>::new();
    let net = TransUnet::new(&mut store, UNetConfig::desk(), &mut rng(4)).unwrap();
    let f = Forward::new(&store, true);
    let x = f
        .tape()
        .constant(&random(&mut rng(5), &[2, 1, 64, 64], 0.0, 1.0).cast())
        .unwrap();
    let y = net.forward(&f, x).unwrap();
    assert_eq!(f.tape().shape(y), vec![2, 1, 64, 64]);
}

#[test]
fn desk_parameter_count_matches_hand_count() {
    let mut store = ParamStore::<f32>::new();
    TransUnet::new(&mut store, UNetConfig::desk(), &mut rng(1)).unwrap();
    let double = |ci: usize, co: usize| 9 * ci * co + 2 * co + 9 * co * co + 2 * co;
    let pool = |c: usize| 4 * (c * c + c);
    let mut want = double(1, 8) + double(8, 16) + double(16, 32) + double(32, 64);
    want += double(64, 128) + 128 * 128 + 128 + pool(128);
    for c in [8, 16, 32, 64] {
        want += 2 * c * c + c + pool(c) + double(3 * c, c);
    }
    want += 8 + 1;
    assert_eq!(store.count(PREFIX, true), want);
}

#[test]
fn seg_loss_examples() {
    let store = ParamStore::<f64>::new();
    let eval = |z: Vec<f64>, m: &[f64], dice: f64| {
        let f = Forward::new(&store, false);
        let n = z.len();
        let zv = f.tape().constant(&Tensor::new([n], z).unwrap()).unwrap();
        let l = seg_loss(&f, zv, m, dice).unwrap();
        let v = f.tape().value(l)[0];
        v
    };
    let mask = [1.0, 0.0, 0.0, 1.0];
    assert!((eval(vec![0.0; 4], &mask, 0.0) - 2f64.ln()).abs() < 1e-12);
    assert!(eval(vec![40.0, -40.0, -40.0, 40.0], &mask, 0.0) < 1e-12);

    let mut r = rng(6);
    let z: Vec<f64> = (0..16).map(|_| r.random_range(-3.0..3.0)).collect();
    let m: Vec<f64> = (0..16).map(|_| f64::from(r.random_bool(0.5))).collect();
    let p: Vec<f64> = z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
    let bce: f64 = -p
        .iter()
        .zip(&m)
        .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        .sum::<f64>()
        / 16.0;
    assert!((eval(z.clone(), &m, 0.0) - bce).abs() < 1e-12);
    let inter: f64 = p.iter().zip(&m).map(|(a, b)| a * b).sum();
    let dice = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + m.iter().sum::<f64>() + 1.0);
    assert!((eval(z, &m, 0.5) - (bce + 0.5 * dice)).abs() < 1e-12);

    let f = Forward::new(&store, false);
    let zv = f.tape().constant(&Tensor::zeros([4])).unwrap();
    assert!(seg_loss(&f, zv, &[], 0.0).is_err());
}

#[test]
fn threshold_boundaries() {
    let logits = [-30.0f32, -1.0, 0.0, 2.0, 30.0];
    assert_eq!(threshold_logits(&logits, 0.0), vec![1; 5]);
    assert_eq!(threshold_logits(&logits, 1.0 + 1e-9), vec![0; 5]);
    assert_eq!(threshold_logits(&logits, 0.5), vec![0, 0, 1, 1, 1]);

    let mut store = ParamStore::<f32>::new();
    let net = TransUnet::new(&mut store, tiny(), &mut rng(7)).unwrap();
    let images = random(&mut rng(8), &[3, 1, 16, 16], 0.0, 1.0).cast::<f32>();
    let masks = net.predict_masks(&store, &images, 0.0).unwrap();
    assert_eq!(masks.len(), 3);
    assert!(masks
        .iter()
        .all(|m| m.len() == 256 && m.iter().all(|&v| v == 1)));
}

#[test]
fn query_chaining_trace() {
    let mut store = ParamStore::<f64>::new();
    let cfg = UNetConfig {
        depth: 3,
        base_channels: 2,
        input_side: 16,
        use_projections: false,
    };
    let net = TransUnet::new(&mut store, cfg, &mut rng(9)).unwrap();
    let f = Forward::new(&store, false);
    let x = f
        .tape()
        .constant(&random(&mut rng(10), &[2, 1, 16, 16], 0.0, 1.0))
        .unwrap();
    let trace = net.forward_trace(&f, x).unwrap();
    let tape = f.tape();
    // Recompute each adapter by hand from the pooled vector one level down.
    for level in 0..3 {
        let below = if level == 2 {
            tape.value(trace.bottleneck_query).to_vec()
        } else {
            tape.value(trace.gates[level + 1].pooled).to_vec()
        };
        let w = store.get(net.gates[level].adapter.weight);
        let b = store.get(net.gates[level].adapter.bias).data();
        let (c, d) = (w.shape()[0], w.shape()[1]);
        let got = tape.value(trace.gates[level].query).to_vec();
        for s in 0..2 {
            for o in 0..c {
                let want: f64 = b[o]
                    + (0..d)
                        .map(|i| w.data()[o * d + i] * below[s * d + i])
                        .sum::<f64>();
                assert!((got[s * c + o] - want).abs() < 1e-12);
            }
        }
        assert_eq!(tape.shape(trace.gates[level].pooled), vec![2, 2 << level]);
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut store = ParamStore::<f64>::new();
    let net = TransUnet::new(&mut store, tiny(), &mut rng(11)).unwrap();
    let mut r = rng(12);
    let image = random(&mut r, &[2, 1, 16, 16], 0.0, 1.0);
    let mask: Vec<f64> = (0..512).map(|i| f64::from((i % 16 > 4) as u8)).collect();
    let report = GradCheck::default()
        .run_store(
            &store,
            |f| {
                let x = f.tape().constant(&image)?;
                let z = net.forward(f, x)?;
                seg_loss(f, z, &mask, 0.5)
            },
            Coords::SampledPerInput(6),
            &mut r,
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shape_and_gate_bounds(depth in 1usize..4, base in prop::sample::select(vec![2usize, 4]), mult in 1usize..3, seed in 0u64..100) {
        let side = (1 << depth) * 2 * mult;
        let cfg = UNetConfig { depth, base_channels: base, input_side: side, use_projections: seed % 2 == 0 };
        let mut store = ParamStore::<f64>::new();
        let net = TransUnet::new(&mut store, cfg, &mut rng(seed)).unwrap();
        let f = Forward::new(&store, false);
        let x = f.tape().constant(&random(&mut rng(seed + 1), &[1, 1, side, side], 0.0, 1.0)).unwrap();
        let trace = net.forward_trace(&f, x).unwrap();
        let tape = f.tape();
        prop_assert_eq!(tape.shape(trace.logits), vec![1, 1, side, side]);
        for (g, &s) in trace.gates.iter().zip(&trace.skips) {
            let gated = tape.value(g.gated);
            let skip = tape.value(s);
            prop_assert!(gated.iter().zip(skip.iter()).all(|(a, b)| a.abs() <= b.abs()));
        }
    }
}
