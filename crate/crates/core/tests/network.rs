use samic_core::backbone::{extract_feature_pyramid, Backbone, FeaturePyramid, DEFAULT_BACKBONE_ID};
use samic_core::conv4d::Conv4dKind;
use samic_core::correlation::{build_hypercorrelation, mask_and_correlate, mask_features, HypercorrelationPyramid};
use samic_core::losses::{total, total_with_grad, LossFlags};
use samic_core::net::{context_mean, predict_heatmap, upsample_volume, CorrelationNet, NetConfig, Shot};
use samic_core::optim::{Adam, AdamConfig};
use samic_core::train::{train_step, Sample};
use samic_core::{average_heatmaps, encode_prompts, HeatmapConfig, PointPrompt, PromptSet, SaliencyHeatmap, Tensor};

fn image(h: usize, w: usize, seed: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13 + c * 29 + seed * 17) % 23) as f64 / 22.0;
                let dx = x as i64 - (w / 2) as i64;
                let dy = y as i64 - (h / 3 + seed % 5) as i64;
                let inside = dx * dx + dy * dy < (h * w / 16) as i64;
                data.push(if inside { 0.2 + 0.1 * c as f64 } else { v });
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

fn toy() -> (CorrelationNet, HypercorrelationPyramid, SaliencyHeatmap) {
    let cfg = NetConfig { num_4dconv_layers: 1, input_size: (32, 32), ..NetConfig::default() };
    let net = CorrelationNet::new(cfg).unwrap();
    let bb = Backbone::from_id(DEFAULT_BACKBONE_ID).unwrap();
    let ctx = extract_feature_pyramid(&bb, &image(32, 32, 1), (32, 32)).unwrap();
    let tgt = extract_feature_pyramid(&bb, &image(32, 32, 2), (32, 32)).unwrap();
    let hc = HeatmapConfig::default();
    let g_ctx = encode_prompts(&[PointPrompt::new(16.0, 10.0)], 32, 32, &hc).unwrap();
    let g_tgt = encode_prompts(&[PointPrompt::new(12.0, 20.0)], 32, 32, &hc).unwrap();
    (net, mask_and_correlate(&ctx, &g_ctx, &tgt).unwrap(), g_tgt)
}

#[test]
fn parameter_budget() {
    let net = CorrelationNet::new(NetConfig::default()).unwrap();
    let n = net.param_count();
    assert!((2_400_000..=2_800_000).contains(&n), "{n}");
    let shallow = CorrelationNet::new(NetConfig { num_4dconv_layers: 1, ..NetConfig::default() }).unwrap();
    let n1 = shallow.param_count() as f64;
    assert!((n1 - 200_000.0).abs() <= 100_000.0, "{n1}");
}

#[test]
fn parameter_names_cover_the_vector() {
    let net = CorrelationNet::new(NetConfig::default()).unwrap();
    let mut next = 0;
    for s in net.param_specs() {
        assert_eq!(s.offset, next, "{}", s.name);
        next += s.len();
    }
    assert_eq!(next, net.param_count());
    assert_eq!(net.param("squeeze.0.0.norm.weight").unwrap(), [1.0; 16]);
}

#[test]
fn toy_gradient_matches_finite_differences() {
    let (net, hcp, gt) = toy();
    let flags = LossFlags::default();
    let loss = |net: &CorrelationNet| total(gt.data(), net.forward(&hcp).unwrap().heatmap().data(), &flags).unwrap().total;
    let fwd = net.forward(&hcp).unwrap();
    let (_, gp) = total_with_grad(gt.data(), fwd.heatmap().data(), &flags).unwrap();
    let mut grads = vec![0.0; net.param_count()];
    net.backward(&fwd, &gp, &mut grads).unwrap();

    let mut probe = net.clone();
    let mut fd_at = |i: usize, h: f64| {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let lp = loss(&probe);
        probe.params_mut()[i] = orig - h;
        let lm = loss(&probe);
        probe.params_mut()[i] = orig;
        (lp - lm) / (2.0 * h)
    };
    // Every block, tiny step: checks the derivation itself.
    for spec in net.param_specs() {
        for i in [spec.offset, spec.offset + spec.len() / 2, spec.offset + spec.len() - 1] {
            let fd = fd_at(i, 1e-6);
            assert!((fd - grads[i]).abs() <= 1e-4 * fd.abs().max(grads[i].abs()) + 1e-6, "{}: fd {fd} analytic {}", spec.name, grads[i]);
        }
    }
}

#[test]
fn context_mean_of_constant() {
    let v = Tensor::full(&[2, 3, 2, 4, 5], 0.7);
    let m = context_mean(&v);
    assert_eq!(m.shape(), [2, 4, 5]);
    assert!(m.data().iter().all(|x| (x - 0.7).abs() < 1e-15));
}

#[test]
fn upsampling_constants_and_hand_values() {
    let v = Tensor::full(&[1, 2, 2, 2, 2], 3.5);
    assert!(upsample_volume(&v, &[4, 4, 4, 4]).data().iter().all(|x| (x - 3.5).abs() < 1e-15));
    let mut data = vec![0.0; 16];
    // Vary along the last axis only: values 0,1 repeated.
    for (i, d) in data.iter_mut().enumerate() {
        *d = (i % 2) as f64;
    }
    let v = Tensor::from_vec(&[1, 2, 2, 2, 2], data).unwrap();
    let up = upsample_volume(&v, &[2, 2, 2, 4]);
    assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn mask_features_bilinear_hand_case() {
    let layer = Tensor::full(&[1, 4, 4], 1.0);
    let pyr = FeaturePyramid { layers: vec![layer] };
    let g = SaliencyHeatmap::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let m = mask_features(&pyr, &g);
    for row in m.layers[0].data().chunks(4) {
        assert_eq!(row, [0.0, 0.25, 0.75, 1.0]);
    }
}

#[test]
fn mix_block_with_zero_upper_is_the_stack_on_lower() {
    let (net, hcp, _) = toy();
    let lower = net.squeeze_block(0, &hcp.levels[0]).unwrap();
    let upper = net.squeeze_block(1, &hcp.levels[1]).unwrap();
    let zero = Tensor::zeros(upper.shape());
    let a = net.mix_block(0, &zero, &lower).unwrap();
    let b = net.mix_block(0, &Tensor::zeros(lower.shape()), &lower).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| *v >= 0.0));
}

#[test]
fn squeeze_outputs_are_non_negative_and_context_reduced() {
    let (net, hcp, _) = toy();
    for (l, v) in hcp.levels.iter().enumerate() {
        let out = net.squeeze_block(l, v).unwrap();
        assert!(out.data().iter().all(|x| *x >= 0.0));
        assert_eq!(out.shape()[3..], v.shape()[3..]);
        assert!(out.shape()[1] <= v.shape()[1]);
    }
}

#[test]
fn encode_output_covers_the_finest_target_grid() {
    let (net, hcp, _) = toy();
    let (code, _) = net.encode_pyramid(&hcp).unwrap();
    assert_eq!(code.shape()[1..], hcp.levels[0].shape()[3..]);
    let zero = HypercorrelationPyramid { levels: hcp.levels.iter().map(|l| Tensor::zeros(l.shape())).collect() };
    assert_eq!(net.encode_pyramid(&zero).unwrap().0, net.encode_pyramid(&zero).unwrap().0);
}

#[test]
fn decoder_contract() {
    let (net, hcp, _) = toy();
    let f = net.forward(&hcp).unwrap();
    let d = &f.decoded;
    assert_eq!((d.heatmap.height(), d.heatmap.width()), (32, 32));
    assert!(d.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(d.heatmap.max(), 1.0);
    for (a, b) in d.foreground.iter().zip(&d.background) {
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let (net, hcp, _) = toy();
    assert_eq!(net.forward(&hcp).unwrap().heatmap(), net.forward(&hcp).unwrap().heatmap());
    let again = CorrelationNet::new(net.config().clone()).unwrap();
    assert_eq!(again.params(), net.params());
    let other = CorrelationNet::new(NetConfig { seed: 9, ..net.config().clone() }).unwrap();
    assert_ne!(other.params(), net.params());
}

#[test]
fn dense_and_center_pivot_share_an_interface() {
    let (net, hcp, _) = toy();
    let dense = CorrelationNet::new(NetConfig { conv4d: Conv4dKind::Dense, ..net.config().clone() }).unwrap();
    assert!(dense.param_count() > net.param_count());
    let h = dense.forward(&hcp).unwrap();
    assert!(h.heatmap().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn backbone_contract() {
    let bb = Backbone::from_id(DEFAULT_BACKBONE_ID).unwrap();
    let img = image(224, 224, 3);
    let a = extract_feature_pyramid(&bb, &img, (224, 224)).unwrap();
    let b = extract_feature_pyramid(&bb, &img, (224, 224)).unwrap();
    assert_eq!(a, b);
    let sizes: Vec<(usize, usize)> = a.groups().iter().map(|g| a.sizes()[g[0]]).collect();
    assert_eq!(sizes, [(28, 28), (14, 14), (7, 7)]);
    let zeros = extract_feature_pyramid(&bb, &Tensor::zeros(&[3, 64, 64]), (64, 64)).unwrap();
    let ones = extract_feature_pyramid(&bb, &Tensor::full(&[3, 64, 64], 1.0), (64, 64)).unwrap();
    assert_ne!(zeros, ones);
}

#[test]
fn hypercorrelation_matches_nested_loops() {
    let mut state = 7u64;
    let mut rnd = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let ctx = Tensor::from_vec(&[2, 3, 3], (0..18).map(|_| rnd()).collect()).unwrap();
    let tgt = Tensor::from_vec(&[2, 3, 3], (0..18).map(|_| rnd()).collect()).unwrap();
    let hcp = build_hypercorrelation(
        &FeaturePyramid { layers: vec![ctx.clone()] },
        &FeaturePyramid { layers: vec![tgt.clone()] },
    )
    .unwrap();
    let c = &hcp.levels[0];
    assert_eq!(c.shape(), [1, 3, 3, 3, 3]);
    for p in 0..9 {
        for q in 0..9 {
            let (a0, a1) = (ctx.data()[p], ctx.data()[9 + p]);
            let (b0, b1) = (tgt.data()[q], tgt.data()[9 + q]);
            let cos = (a0 * b0 + a1 * b1) / ((a0 * a0 + a1 * a1).sqrt() * (b0 * b0 + b1 * b1).sqrt());
            assert!((c.data()[p * 9 + q] - cos.max(0.0)).abs() < 1e-5);
        }
    }
}

#[test]
fn kshot_prediction_averages_single_shots() {
    let cfg = NetConfig { num_4dconv_layers: 1, input_size: (32, 32), ..NetConfig::default() };
    let net = CorrelationNet::new(cfg).unwrap();
    let bb = Backbone::from_id(DEFAULT_BACKBONE_ID).unwrap();
    let hc = HeatmapConfig::default();
    let imgs: Vec<Tensor> = (0..3).map(|s| image(32, 32, s)).collect();
    let prompts: Vec<PromptSet> =
        (0..3).map(|s| PromptSet::new(format!("i{s}"), vec![vec![PointPrompt::new(16.0, 10.0 + s as f64)]])).collect();
    let target = image(32, 32, 7);
    let shots: Vec<Shot> = imgs.iter().zip(&prompts).map(|(image, prompts)| Shot { image, prompts }).collect();
    let singles: Vec<SaliencyHeatmap> =
        shots.iter().map(|s| predict_heatmap(&bb, &net, std::slice::from_ref(s), &target, &hc).unwrap()).collect();
    let k3 = predict_heatmap(&bb, &net, &shots, &target, &hc).unwrap();
    assert_eq!(k3, average_heatmaps(&singles).unwrap());
    assert_eq!(predict_heatmap(&bb, &net, &shots[..1], &target, &hc).unwrap(), singles[0]);
}

#[test]
fn overfits_a_single_episode() {
    let cfg = NetConfig { input_size: (64, 64), ..NetConfig::default() };
    let mut net = CorrelationNet::new(cfg).unwrap();
    let bb = Backbone::from_id(DEFAULT_BACKBONE_ID).unwrap();
    let hc = HeatmapConfig::default();
    let ctx = extract_feature_pyramid(&bb, &image(64, 64, 1), (64, 64)).unwrap();
    let tgt = extract_feature_pyramid(&bb, &image(64, 64, 2), (64, 64)).unwrap();
    let g_ctx = encode_prompts(&[PointPrompt::new(32.0, 22.0)], 64, 64, &hc).unwrap();
    let target_point = PointPrompt::new(30.0, 40.0);
    let g_tgt = encode_prompts(&[target_point], 64, 64, &hc).unwrap();
    let hcp = mask_and_correlate(&ctx, &g_ctx, &tgt).unwrap();
    let flags = LossFlags::default();
    let mut adam = Adam::new(AdamConfig::default(), net.param_count());
    let batch = [Sample { hcp: &hcp, target: g_tgt.data() }];
    let mut first = None;
    for _ in 0..200 {
        let b = train_step(&mut net, &mut adam, &batch, &flags).unwrap()[0];
        let l = b.total;
        first.get_or_insert(l);
    }
    let last = total(g_tgt.data(), net.forward(&hcp).unwrap().heatmap().data(), &flags).unwrap().total;
    let first = first.unwrap();
    assert!(last < 0.1 * first, "initial {first}, final {last}");
    let pred = net.forward(&hcp).unwrap();
    let am = pred.heatmap().data().iter().position(|v| *v == 1.0).unwrap();
    let (px, py) = ((am % 64) as f64, (am / 64) as f64);
    let d = ((px - target_point.x).powi(2) + (py - target_point.y).powi(2)).sqrt();
    assert!(d <= 3.0, "peak at ({px}, {py}), {d} px away");
}
