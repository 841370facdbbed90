use msdet::lska::{lska_param_count, Lska, LskaSpec};
use msdet::nn::{Ctx, ParamStore};
use msdet_tensor::{conv2d, mul, sum, ConvSpec, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data().iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn block(spec: LskaSpec, seed: u64) -> (ParamStore, Lska) {
    let mut store = ParamStore::new(seed);
    let b = Lska::new(&mut store, "lska", spec).unwrap();
    (store, b)
}

/// Taps enumerated one by one, independent of the closed form.
fn enumerate_taps(b: &Lska) -> (usize, usize) {
    let dw: usize = [&b.h_local, &b.v_local, &b.h_dilated, &b.v_dilated]
        .iter()
        .map(|c| c.spec.out_channels * c.spec.kernel_h * c.spec.kernel_w)
        .sum();
    (dw, b.pointwise.spec.in_channels * b.pointwise.spec.out_channels)
}

#[test]
fn economy_at_c64_k11_d3() {
    let spec = LskaSpec::new(64, 11, 3).unwrap();
    let c = lska_param_count(&spec);
    assert_eq!(c.lska_depthwise, 1152);
    assert_eq!(c.naive_depthwise, 7744);
    assert_eq!(c.pointwise, 64 * 64);
    assert!((c.ratio() - 1152.0 / 7744.0).abs() < 1e-15);
    assert!((c.ratio() - 0.149).abs() < 5e-4);
    let (_, b) = block(spec, 0);
    assert_eq!(enumerate_taps(&b), (1152, 4096));
}

#[test]
fn smallest_spec() {
    let spec = LskaSpec::new(1, 3, 1).unwrap();
    let c = lska_param_count(&spec);
    assert_eq!((c.lska_depthwise, c.naive_depthwise), (8, 9));
}

#[test]
fn counts_equal_serialized_buffer_sizes() {
    for (ch, k, d) in [(64, 11, 3), (1, 3, 1), (8, 7, 2), (16, 23, 4), (5, 9, 9)] {
        let spec = LskaSpec::new(ch, k, d).unwrap();
        let (store, _) = block(spec, 1);
        let counts = lska_param_count(&spec);
        let named = store.named();
        let weights = |suffixes: &[&str]| -> usize {
            named
                .iter()
                .filter(|(n, _)| suffixes.iter().any(|s| n == &format!("lska.{s}.weight")))
                .map(|(_, t)| t.numel())
                .sum()
        };
        assert_eq!(weights(&["h5", "v5", "hd", "vd"]), counts.lska_depthwise, "{spec:?}");
        assert_eq!(weights(&["pw"]), counts.pointwise, "{spec:?}");
        let biases: usize = named.iter().filter(|(n, _)| n.ends_with(".bias")).map(|(_, t)| t.numel()).sum();
        assert_eq!(biases, 5 * ch);
        assert_eq!(store.param_count(), counts.lska_depthwise + counts.pointwise + biases);
    }
}

#[test]
fn zero_attention_path_annihilates() {
    let (store, b) = block(LskaSpec::new(4, 7, 2).unwrap(), 2);
    for e in store.entries() {
        e.tensor.data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = b.forward(&Ctx::infer(), &random(&mut rng, &[2, 4, 9, 11])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unit_attention_is_the_identity() {
    let (_, b) = block(LskaSpec::new(4, 7, 2).unwrap(), 3);
    for c in b.convs() {
        c.weight.data_mut().fill(0.0);
        c.bias.as_ref().unwrap().data_mut().fill(0.0);
    }
    b.pointwise.bias.as_ref().unwrap().data_mut().fill(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 4, 10, 10]);
    let y = b.forward(&Ctx::infer(), &x).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn rank_one_local_pair_equals_full_5x5_depthwise() {
    let spec = LskaSpec::new(8, 11, 3).unwrap();
    let (_, b) = block(spec, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[1, 8, 16, 16]);
    assert_eq!(b.forward(&Ctx::infer(), &x).unwrap().shape(), &[1, 8, 16, 16]);

    for c in [&b.h_local, &b.v_local] {
        c.bias.as_ref().unwrap().data_mut().fill(0.0);
    }
    let ctx = Ctx::infer();
    let pair = b.v_local.forward(&ctx, &b.h_local.forward(&ctx, &x).unwrap()).unwrap();

    // outer product v ⊗ u per channel
    let (u, v) = (b.h_local.weight.to_vec(), b.v_local.weight.to_vec());
    let full = Tensor::from_fn(&[8, 1, 5, 5], |idx| {
        let (c, i, j) = (idx / 25, idx / 5 % 5, idx % 5);
        v[c * 5 + i] * u[c * 5 + j]
    });
    let spec5 = ConvSpec::depthwise(8, 5, 5).with_bias(false).same_padding();
    let oracle = conv2d(&x, &full, None, &spec5).unwrap();
    let diff = max_abs_diff(&pair, &oracle);
    assert!(diff <= 1e-12, "{diff:e}");
}

#[test]
fn output_is_the_attention_map_times_the_input() {
    let (_, b) = block(LskaSpec::new(6, 11, 3).unwrap(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 6, 12, 7]);
    let ctx = Ctx::infer();
    let a = b.attention_map(&ctx, &x).unwrap();
    assert_eq!(b.forward(&ctx, &x).unwrap().to_vec(), mul(&a, &x).unwrap().to_vec());
}

#[test]
fn every_buffer_receives_gradient() {
    let (store, b) = block(LskaSpec::new(4, 11, 3).unwrap(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for e in store.entries() {
        let n = e.tensor.numel();
        e.tensor.data_mut().copy_from_slice(&(0..n).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<_>>());
    }
    let x = random(&mut rng, &[1, 4, 12, 12]);
    sum(&b.forward(&Ctx::train(), &x).unwrap()).backward().unwrap();
    for name in ["h5", "v5", "hd", "vd", "pw"] {
        let w = store.get(&format!("lska.{name}.weight")).unwrap();
        let g = w.grad().unwrap_or_default();
        assert!(g.iter().map(|v| v.abs()).sum::<f64>() > 0.0, "lska.{name} got no gradient");
    }
}

#[test]
fn receptive_field_covers_the_kernel() {
    for k in (3..40).step_by(2) {
        for d in 1..=k {
            let s = LskaSpec::new(1, k, d).unwrap();
            assert!(s.receptive_field() >= k, "k={k} d={d}");
            assert_eq!(s.local_kernel() % 2, 1);
            assert!(s.dilated_kernel() >= 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn shape_is_preserved(
        c in 4usize..=32,
        h in 8usize..=40,
        w in 8usize..=40,
        k in prop::sample::select(vec![7usize, 11, 23]),
        d in 2usize..=4,
        seed in any::<u64>(),
    ) {
        let (_, b) = block(LskaSpec::new(c, k, d).unwrap(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, c, h, w]);
        let y = b.forward(&Ctx::infer(), &x).unwrap();
        prop_assert_eq!(y.shape(), &[1, c, h, w]);
    }
}
