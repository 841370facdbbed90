use std::collections::BTreeMap;
use std::time::Instant;

use msdet::lska::{lska_param_count, LskaSpec};
use msdet::nn::{Ctx, ParamStore};
use msdet::zoo::{build, count_params, estimate_macs, trace_shapes, Model, ModelConfig, ModelVariant};
use msdet::Error;
use msdet_tensor::{count_macs, no_grad, ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        widths: [4, 6, 8, 10],
        num_classes: 3,
        neck_channels: 6,
        fuse_channels: 6,
        ..ModelConfig::default()
    }
}

fn manifest(m: &Model) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
    m.store
        .named()
        .into_iter()
        .map(|(n, t)| (n, (t.shape().to_vec(), t.to_vec())))
        .collect()
}

#[test]
fn closed_form_conv_counts() {
    let mut store = ParamStore::new(0);
    let conv = msdet::nn::Conv::new(&mut store, "c", ConvSpec::new(16, 32, 3, 3).same_padding()).unwrap();
    assert_eq!(store.param_count(), 16 * 32 * 9 + 32);
    assert_eq!(store.param_count(), 4640);
    assert_eq!(conv.spec.macs(1, 32, 32), 4_718_592);
    let x = Tensor::zeros(&[1, 16, 32, 32]);
    let (_, counted) = count_macs(|| conv.forward(&Ctx::infer(), &x).unwrap());
    assert_eq!(counted, 4_718_592);

    let mut store = ParamStore::new(0);
    msdet::nn::Conv::new(&mut store, "dw", ConvSpec::depthwise(16, 3, 3).same_padding().with_bias(false)).unwrap();
    assert_eq!(store.param_count(), 144);
    let mut store = ParamStore::new(0);
    msdet::nn::Conv::new(&mut store, "dw", ConvSpec::depthwise(16, 3, 3).same_padding()).unwrap();
    assert_eq!(store.param_count(), 160);
}

#[test]
fn same_seed_gives_identical_manifests() {
    for v in ModelVariant::ALL {
        assert_eq!(manifest(&build(v, &small()).unwrap()), manifest(&build(v, &small()).unwrap()), "{v}");
    }
    let other = ModelConfig { seed: 1, ..small() };
    assert_ne!(
        manifest(&build(ModelVariant::Baseline, &small()).unwrap()),
        manifest(&build(ModelVariant::Baseline, &other).unwrap())
    );
}

#[test]
fn lska_variant_adds_exactly_one_block() {
    for cfg in [small(), ModelConfig::default(), ModelConfig::toy()] {
        let gd = count_params(&build(ModelVariant::GdOnly, &cfg).unwrap()).total;
        let lska_gd = build(ModelVariant::LskaGd, &cfg).unwrap();
        let spec = LskaSpec::new(cfg.widths[cfg.lska_stage], cfg.lska_kernel, cfg.lska_dilation).unwrap();
        let c = lska_param_count(&spec);
        let block = (c.lska_depthwise + c.pointwise + 5 * spec.channels) as u64;
        assert_eq!(count_params(&lska_gd).total - gd, block);
        assert_eq!(count_params(&lska_gd).get("lska"), Some(block));

        let base = count_params(&build(ModelVariant::Baseline, &cfg).unwrap()).total;
        let lska_only = count_params(&build(ModelVariant::LskaOnly, &cfg).unwrap()).total;
        assert_eq!(lska_only - base, block);
    }
}

#[test]
fn seam_variant_differs_only_in_head_names() {
    let gd = manifest(&build(ModelVariant::GdOnly, &small()).unwrap());
    let gs = manifest(&build(ModelVariant::GdSeam, &small()).unwrap());
    let only_gs: Vec<&String> = gs.keys().filter(|k| !gd.contains_key(*k)).collect();
    assert!(!only_gs.is_empty());
    assert!(gd.keys().all(|k| gs.contains_key(k)));
    for k in &only_gs {
        assert!(k.starts_with("head."), "{k}");
    }
    for (k, v) in &gd {
        assert_eq!(&gs[k], v, "{k}");
    }
    let delta: usize = only_gs.iter().filter(|k| !k.contains("running_")).map(|k| gs[*k].0.iter().product::<usize>()).sum();
    let t = |v| count_params(&build(v, &small()).unwrap());
    assert_eq!((t(ModelVariant::GdSeam).total - t(ModelVariant::GdOnly).total) as usize, delta);
    assert_eq!(t(ModelVariant::GdSeam).get("head.seam"), Some(delta as u64));
}

#[test]
fn macs_estimate_equals_counted_multiplies() {
    for v in ModelVariant::ALL {
        let m = build(v, &small()).unwrap();
        let estimate = estimate_macs(&m, 64).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let (_, counted) = count_macs(|| no_grad(|| m.forward(&Ctx::infer(), &x).unwrap()));
        assert_eq!(estimate.total, counted, "{v}");
        assert_eq!(estimate.rows.iter().map(|r| r.count).sum::<u64>(), estimate.total);
    }
}

#[test]
fn macs_on_tiny_convs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let groups = [1, 2][rng.gen_range(0..2)];
        let (cin, cout) = (groups * rng.gen_range(1..4), groups * rng.gen_range(1..4));
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let stride = rng.gen_range(1..3);
        let spec = ConvSpec::new(cin, cout, kh, kw).with_groups(groups).with_stride(stride).same_padding();
        let (h, w) = (rng.gen_range(kh..=8), rng.gen_range(kw..=8));
        let mut store = ParamStore::new(0);
        let conv = msdet::nn::Conv::new(&mut store, "c", spec.clone()).unwrap();
        let (y, counted) = count_macs(|| conv.forward(&Ctx::infer(), &Tensor::zeros(&[2, cin, h, w])).unwrap());
        let (n, _, oh, ow) = y.dims4("test").unwrap();
        let closed = (n * cout * oh * ow * (cin / groups) * kh * kw) as u64;
        assert_eq!(closed, counted, "{spec:?} on {h}x{w}");
        assert_eq!(spec.macs(n, oh, ow), closed);
    }
}

#[test]
fn trace_at_256() {
    let cfg = ModelConfig::default();
    let baseline = build(ModelVariant::Baseline, &cfg).unwrap();
    let trace = trace_shapes(&baseline, 256).unwrap();
    let outs: Vec<&[usize]> = trace.iter().filter(|t| t.op == "concat" && t.name.starts_with("head.")).map(|t| t.shape.as_slice()).collect();
    assert_eq!(outs, [&[1, 20, 32, 32][..], &[1, 20, 16, 16], &[1, 20, 8, 8]]);
    let deepest = trace.iter().rfind(|t| t.name.starts_with("backbone.stage3")).unwrap();
    assert_eq!(deepest.shape, [1, 128, 8, 8]);

    let lg = build(ModelVariant::LskaGd, &cfg).unwrap();
    let trace = trace_shapes(&lg, 256).unwrap();
    let lska: Vec<usize> = (0..trace.len()).filter(|&i| trace[i].name.starts_with("lska.")).collect();
    assert_eq!(lska.len(), 6);
    assert!(lska.windows(2).all(|w| w[1] == w[0] + 1), "lska nodes are one contiguous group");
}

#[test]
fn trace_is_pure() {
    let m = build(ModelVariant::GdSeam, &small()).unwrap();
    let before = m.store.snapshot();
    let a = trace_shapes(&m, 64).unwrap();
    let b = trace_shapes(&m, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, m.store.snapshot());
}

#[test]
fn attaching_lska_only_inserts_its_nodes() {
    let cfg = small();
    let mut store = ParamStore::new(0);
    let mut bb = msdet::backbone::Backbone::new(&mut store, cfg.widths).unwrap();
    let ctx = Ctx::traced(msdet_tensor::NormMode::Infer);
    let x = Tensor::zeros(&[1, 3, 64, 64]);
    bb.forward(&ctx, &x).unwrap();
    let plain = ctx.take_trace();
    let before = store.param_count();
    let spec = LskaSpec::new(10, 11, 3).unwrap();
    bb.attach_lska(&mut store, 3, spec).unwrap();
    let c = lska_param_count(&spec);
    assert_eq!(store.param_count() - before, c.lska_depthwise + c.pointwise + 5 * 10);
    bb.forward(&ctx, &x).unwrap();
    let with: Vec<_> = ctx.take_trace().into_iter().filter(|t| !t.name.starts_with("lska.")).collect();
    assert_eq!(with, plain);
    assert!(matches!(bb.attach_lska(&mut store, 3, spec), Err(Error::Config(_))));
    let mut fresh = msdet::backbone::Backbone::new(&mut ParamStore::new(0), cfg.widths).unwrap();
    assert!(matches!(fresh.attach_lska(&mut ParamStore::new(0), 4, spec), Err(Error::Config(_))));
}

#[test]
fn identity_block_then_detach_leaves_output_unchanged() {
    let mut store = ParamStore::new(5);
    let mut bb = msdet::backbone::Backbone::new(&mut store, [4, 6, 8, 10]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[1, 3, 64, 64], |_| rng.gen_range(0.0..1.0));
    let ctx = Ctx::infer();
    let plain = bb.forward(&ctx, &x).unwrap();
    bb.attach_lska(&mut store, 3, LskaSpec::new(10, 11, 3).unwrap()).unwrap();
    {
        let (_, block) = bb.lska().unwrap();
        for c in block.convs() {
            c.weight.data_mut().fill(0.0);
            c.bias.as_ref().unwrap().data_mut().fill(0.0);
        }
        block.pointwise.bias.as_ref().unwrap().data_mut().fill(1.0);
    }
    let identity = bb.forward(&ctx, &x).unwrap();
    bb.detach_lska().unwrap();
    let detached = bb.forward(&ctx, &x).unwrap();
    for ((p, i), d) in plain.iter().zip(&identity).zip(&detached) {
        assert_eq!(p.to_vec(), i.to_vec());
        assert_eq!(p.to_vec(), d.to_vec());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { input_size: 48, ..small() },
        ModelConfig { input_size: 100, ..small() },
        ModelConfig { widths: [4, 0, 8, 10], ..small() },
    ];
    for cfg in bad {
        assert!(matches!(build(ModelVariant::Baseline, &cfg), Err(Error::Config(_))), "{cfg:?}");
    }
    let cfg = ModelConfig { lska_stage: 4, ..small() };
    assert!(matches!(build(ModelVariant::LskaGd, &cfg), Err(Error::Config(_))));
    let cfg = ModelConfig { lska_kernel: 8, ..small() };
    assert!(matches!(build(ModelVariant::LskaOnly, &cfg), Err(Error::Config(_))));
}

#[test]
fn all_variants_forward_256_quickly() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[1, 3, 256, 256], |_| rng.gen_range(0.0..1.0));
    for v in ModelVariant::ALL {
        let m = build(v, &cfg).unwrap();
        let t = Instant::now();
        let out = no_grad(|| m.forward(&Ctx::infer(), &x)).unwrap();
        let secs = t.elapsed().as_secs_f64();
        assert!(secs < 2.0, "{v}: {secs:.2} s");
        let grids: Vec<usize> = out.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(grids, [32, 16, 8]);
        assert!(out.iter().all(|t| t.is_finite()));
    }
}
