use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::optim::TrainConfig;
use crate::pooling::AggregatorParams;
use crate::probe::{fit, LabeledSet, ProbeParams, Trainable};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn randomize(adapters: &mut AdapterParams, rng: &mut ChaCha8Rng, scale: f64) {
    let flat: Vec<f64> = (0..adapters.num_trainable())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    adapters.set_trainable(&flat).unwrap();
}

fn small_setup(
    layers: usize,
    dim: usize,
    heads: usize,
    seed: u64,
    adapter: AdapterConfig,
) -> (Arc<EncoderWeights>, AdapterParams) {
    let mut cfg = MiniEncoderConfig::new(layers, dim, heads, 2 * dim, seed);
    cfg.init_std = 0.3;
    let weights = Arc::new(EncoderWeights::init(&cfg).unwrap());
    let adapters = AdapterParams::init(&cfg, &adapter).unwrap();
    (weights, adapters)
}

fn tiny_adapter() -> AdapterConfig {
    AdapterConfig {
        rank: 2,
        alpha: 4.0,
        bottleneck_dim: 3,
        seed: 1,
    }
}

#[test]
fn zero_init_adapters_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (w, adapters) = small_setup(3, 8, 2, 4, AdapterConfig::default());
    let x = random_matrix(&mut rng, 5, 8, 1.0);
    let plain = encoder_forward(&w, None, &x).unwrap().into_outputs();
    let adapted = encoder_forward(&w, Some(&adapters), &x).unwrap().into_outputs();
    for (a, b) in plain.iter().zip(&adapted) {
        let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn rejects_bad_shapes() {
    let (w, adapters) = small_setup(2, 8, 2, 0, tiny_adapter());
    assert!(matches!(
        encoder_forward(&w, Some(&adapters), &DMatrix::zeros(3, 6)),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(MiniEncoderConfig::new(1, 10, 3, 4, 0).validate().is_err());
    let (_, other) = small_setup(3, 8, 2, 0, tiny_adapter());
    assert!(encoder_forward(&w, Some(&other), &DMatrix::zeros(3, 8)).is_err());
}

// ---- independent loop-based forward for a single layer ----

type Mat = Vec<Vec<f64>>;

fn to_rows(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `x · wᵀ`
fn mul_t(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| row.iter().zip(wr).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

fn oracle_layer_norm(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn oracle_layer(x: &Mat, w: &LayerWeights, a: &LayerAdapters, s: f64) -> Mat {
    let n1 = oracle_layer_norm(x);
    let q = add(
        &mul_t(&n1, &to_rows(&w.wq)),
        &scale(&mul_t(&mul_t(&n1, &to_rows(&a.query.a)), &to_rows(&a.query.b)), s),
    );
    let k = mul_t(&n1, &to_rows(&w.wk));
    let v = add(
        &mul_t(&n1, &to_rows(&w.wv)),
        &scale(&mul_t(&mul_t(&n1, &to_rows(&a.value.a)), &to_rows(&a.value.b)), s),
    );
    let t = x.len();
    let d = x[0].len();
    let mut attn = vec![vec![0.0; d]; t];
    for i in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        for j in 0..t {
            let p = scores[j].exp() / z;
            for c in 0..d {
                attn[i][c] += p * v[j][c];
            }
        }
    }
    let h1 = add(x, &mul_t(&attn, &to_rows(&w.wo)));
    let n2 = oracle_layer_norm(&h1);
    let pre = mul_t(&n2, &to_rows(&w.w1));
    let act: Mat = pre
        .iter()
        .map(|r| {
            r.iter()
                .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect()
        })
        .collect();
    let f = mul_t(&act, &to_rows(&w.w2));
    let z = mul_t(&f, &to_rows(&a.bottleneck.down));
    let r: Mat = z.iter().map(|row| row.iter().map(|v| v.max(0.0)).collect()).collect();
    let adapted = add(&f, &mul_t(&r, &to_rows(&a.bottleneck.up)));
    add(&h1, &adapted)
}

#[test]
fn single_layer_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..20 {
        let (w, mut adapters) = small_setup(1, 4, 1, seed, tiny_adapter());
        randomize(&mut adapters, &mut rng, 0.5);
        let x = random_matrix(&mut rng, 2, 4, 1.5);
        let got = encoder_forward(&w, Some(&adapters), &x).unwrap().into_outputs();
        let want = oracle_layer(
            &to_rows(&x),
            &w.layers[0],
            &adapters.layers[0],
            adapters.config.scaling(),
        );
        for i in 0..2 {
            for j in 0..4 {
                assert!((got[0][(i, j)] - want[i][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn identical_frames_give_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (w, mut adapters) = small_setup(2, 8, 2, 3, tiny_adapter());
    randomize(&mut adapters, &mut rng, 0.5);
    let frame = random_matrix(&mut rng, 1, 8, 1.0);
    let other = random_matrix(&mut rng, 1, 8, 1.0);
    let x = DMatrix::from_rows(&[
        frame.row(0).into_owned(),
        other.row(0).into_owned(),
        frame.row(0).into_owned(),
    ]);
    let mut swapped = x.clone();
    swapped.swap_rows(0, 2);
    let a = encoder_forward(&w, Some(&adapters), &x).unwrap().into_outputs();
    let b = encoder_forward(&w, Some(&adapters), &swapped).unwrap().into_outputs();
    for (ya, yb) in a.iter().zip(&b) {
        assert_eq!(ya, yb);
        assert_eq!(ya.row(0), ya.row(2));
    }
}

#[test]
fn permutation_equivariant_without_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (w, mut adapters) = small_setup(2, 8, 4, 5, tiny_adapter());
    randomize(&mut adapters, &mut rng, 0.5);
    let x = random_matrix(&mut rng, 4, 8, 1.0);
    let mut perm = x.clone();
    perm.swap_rows(1, 3);
    let a = encoder_forward(&w, Some(&adapters), &x).unwrap().into_outputs();
    let b = encoder_forward(&w, Some(&adapters), &perm).unwrap().into_outputs();
    for (ya, yb) in a.iter().zip(&b) {
        assert!((ya.row(1) - yb.row(3)).amax() < 1e-12);
        assert!((ya.row(0) - yb.row(0)).amax() < 1e-12);
    }
    // positions break the symmetry
    let mut cfg = w.config.clone();
    cfg.positional = true;
    let wp = EncoderWeights::init(&cfg).unwrap();
    let a = encoder_forward(&wp, None, &x).unwrap().into_outputs();
    let b = encoder_forward(&wp, None, &perm).unwrap().into_outputs();
    assert!((a[1].row(1) - b[1].row(3)).amax() > 1e-6);
}

fn pipeline(layers: usize, dim: usize, seed: u64, rng: &mut ChaCha8Rng) -> PeftPipeline {
    let (w, mut adapters) = small_setup(layers, dim, 2, seed, tiny_adapter());
    randomize(&mut adapters, rng, 0.5);
    let mut agg = AggregatorParams::weighting_gate(layers);
    let flat: Vec<f64> = (0..2 * layers).map(|_| rng.random_range(-1.0..1.0)).collect();
    agg.set_trainable(&flat).unwrap();
    let mut probe = ProbeParams::zeros(dim);
    let flat: Vec<f64> = (0..probe.num_trainable())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    probe.set_trainable(&flat).unwrap();
    peft_assemble(w, adapters, agg, probe).unwrap()
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h = 1e-4;
    let mut skipped = 0;
    let mut checked = 0;
    for seed in 0..10 {
        let p = pipeline(2, 8, seed, &mut rng);
        let xs: Vec<DMatrix<f64>> = (0..2).map(|_| random_matrix(&mut rng, 3, 8, 1.0)).collect();
        let refs: Vec<&DMatrix<f64>> = xs.iter().collect();
        let labels = [rng.random_range(0..6), rng.random_range(0..6)];
        let (_, grads) = peft_backward(&p, &refs, &labels).unwrap();
        let analytic = grads.flatten();
        let flat = p.trainable();
        for i in 0..flat.len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let mut f = flat.clone();
                f[i] += delta;
                q.set_trainable(&f).unwrap();
                let pattern: Vec<bool> = xs
                    .iter()
                    .flat_map(|x| {
                        encoder_forward(q.encoder(), Some(&q.adapters), x)
                            .unwrap()
                            .relu_pattern()
                    })
                    .collect();
                (q.forward_loss(&refs, &labels).unwrap(), pattern)
            };
            let ((plus, pp), (minus, pm)) = (eval(h), eval(-h));
            if pp != pm {
                skipped += 1;
                continue;
            }
            checked += 1;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-3,
                "seed {seed} coord {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
    assert!(
        skipped * 100 < checked,
        "{skipped} of {checked} coordinates crossed a kink"
    );
}

#[test]
fn gated_off_top_layer_gets_no_adapter_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut p = pipeline(3, 8, 2, &mut rng);
    p.aggregator.ws_logits[2] = -40.0;
    p.aggregator.gate_logits[2] = -40.0;
    let x = random_matrix(&mut rng, 4, 8, 1.0);
    let (_, grads) = peft_backward(&p, &[&x], &[3]).unwrap();
    let top = &grads.adapters.layers[2];
    for m in [
        &top.query.a,
        &top.query.b,
        &top.value.a,
        &top.value.b,
        &top.bottleneck.down,
        &top.bottleneck.up,
    ] {
        assert!(m.amax() < 1e-8, "{}", m.amax());
    }
    assert!(grads.adapters.layers[0].query.b.amax() > 1e-6);
}

#[test]
fn zero_upstream_gives_exactly_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (w, mut adapters) = small_setup(2, 8, 2, 0, tiny_adapter());
    randomize(&mut adapters, &mut rng, 0.5);
    let x = random_matrix(&mut rng, 3, 8, 1.0);
    let trace = encoder_forward(&w, Some(&adapters), &x).unwrap();
    let zeros = vec![DMatrix::zeros(3, 8); 2];
    let g = encoder_backward(&w, &adapters, &trace, &zeros).unwrap();
    assert!(g.trainable().iter().all(|&v| v == 0.0));
}

#[test]
fn non_finite_activation_names_layer() {
    let (w, adapters) = small_setup(2, 8, 2, 0, tiny_adapter());
    let mut x = DMatrix::zeros(2, 8);
    x[(0, 0)] = f64::NAN;
    let trace = encoder_forward(&w, Some(&adapters), &x).unwrap();
    match encoder_backward(&w, &adapters, &trace, &vec![DMatrix::zeros(2, 8); 2]) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("layer 2"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn trainable_count_matches_closed_form() {
    let cfg = MiniEncoderConfig::new(2, 64, 4, 128, 0);
    let w = Arc::new(EncoderWeights::init(&cfg).unwrap());
    let adapters = AdapterParams::init(&cfg, &AdapterConfig::default()).unwrap();
    let p = peft_assemble(w, adapters, AggregatorParams::weighting_gate(2), ProbeParams::zeros(64)).unwrap();
    let (l, d, r, db, c) = (2, 64, 8, 32, 6);
    let expected = l * 2 * (r * d + d * r) + l * (db * d + d * db) + 2 * l + (c * d + c);
    assert_eq!(expected, 12_682);
    assert_eq!(Trainable::num_trainable(&p), expected);
    assert_eq!(p.trainable().len(), expected);
    let named: usize = p.named_tensors().iter().map(|t| t.len()).sum();
    assert_eq!(named, expected);
}

#[test]
fn assemble_rejects_mismatches() {
    let cfg = MiniEncoderConfig::new(2, 8, 2, 16, 0);
    let w = Arc::new(EncoderWeights::init(&cfg).unwrap());
    let adapters = AdapterParams::init(&cfg, &tiny_adapter()).unwrap();
    assert!(peft_assemble(
        w.clone(),
        adapters.clone(),
        AggregatorParams::weighting_gate(3),
        ProbeParams::zeros(8)
    )
    .is_err());
    assert!(peft_assemble(
        w.clone(),
        adapters.clone(),
        AggregatorParams::weighting_gate(2),
        ProbeParams::zeros(7)
    )
    .is_err());
    let other = AdapterParams::init(&MiniEncoderConfig::new(3, 8, 2, 16, 0), &tiny_adapter()).unwrap();
    assert!(peft_assemble(w, other, AggregatorParams::weighting_gate(2), ProbeParams::zeros(8)).is_err());
}

#[test]
fn pipeline_identity_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let cfg = MiniEncoderConfig::new(3, 16, 4, 32, 7);
    let w = Arc::new(EncoderWeights::init(&cfg).unwrap());
    let adapters = AdapterParams::init(&cfg, &AdapterConfig::default()).unwrap();
    let mut probe = ProbeParams::zeros(16);
    let flat: Vec<f64> = (0..probe.num_trainable())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    probe.set_trainable(&flat).unwrap();
    let p = peft_assemble(w, adapters, AggregatorParams::weighting_gate(3), probe).unwrap();
    for _ in 0..10 {
        let x = random_matrix(&mut rng, 6, 16, 2.0);
        assert_eq!(p.logits(&x).unwrap(), p.frozen_logits(&x).unwrap());
    }
}

#[test]
fn lora_update_has_rank_at_most_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let cfg = MiniEncoderConfig::new(1, 24, 2, 8, 0);
    let mut adapters = AdapterParams::init(
        &cfg,
        &AdapterConfig {
            rank: 3,
            ..AdapterConfig::default()
        },
    )
    .unwrap();
    randomize(&mut adapters, &mut rng, 1.0);
    let lora = &adapters.layers[0].query;
    let delta = &lora.b * &lora.a;
    let mut sv: Vec<f64> = delta.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    assert!(sv[2] > 1e-3);
    assert!(sv[3..].iter().all(|&s| s < 1e-10));
}

#[test]
fn backbone_is_untouched_by_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cfg = MiniEncoderConfig::new(2, 8, 2, 16, 3);
    let w = Arc::new(EncoderWeights::init(&cfg).unwrap());
    let before = w.checksum();
    let adapters = AdapterParams::init(&cfg, &tiny_adapter()).unwrap();
    let p = peft_assemble(
        w.clone(),
        adapters,
        AggregatorParams::weighting_gate(2),
        ProbeParams::zeros(8),
    )
    .unwrap();
    let mk = |rng: &mut ChaCha8Rng, n: usize| {
        let samples = (0..n).map(|_| random_matrix(rng, 3, 8, 1.0)).collect();
        let labels = (0..n).map(|i| i % 6).collect();
        LabeledSet::new(samples, labels).unwrap()
    };
    let (train, val) = (mk(&mut rng, 24), mk(&mut rng, 6));
    let out = fit(
        p,
        &train,
        &val,
        &TrainConfig::default().with_learning_rate(1e-2).with_epochs(5),
    )
    .unwrap();
    assert_eq!(out.best.encoder().checksum(), before);
    assert_eq!(w.checksum(), before);
    assert_ne!(out.best.adapters.layers[0].query.b, DMatrix::zeros(8, 2));
}
