use super::*;
use proptest::prelude::*;
use rand::Rng;

fn rand_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dense(l: &LayerRef, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
    assert_eq!(inp, x.len());
    (0..out)
        .map(|o| l.bias.data()[o] + (0..inp).map(|i| l.weight.data()[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

fn tiny_model(seed: u64) -> QualityModel {
    let mut m = QualityModel::new(IacaConfig::tiny(), seed).unwrap();
    // non-zero biases so the oracles exercise every term
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for i in 0..m.params.len() {
        if m.params.name(i).ends_with(".bias") {
            for v in m.params.get_mut(i).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    m
}

#[test]
fn max_rgb_examples() {
    let img = ImageBuffer::from_fn(1, 1, |_, _, c| [0.2, 0.5, 0.1][c]).unwrap();
    assert_eq!(max_rgb(&img).data(), &[0.5]);

    let gray = rand_image(8, 8, 1);
    let gray = ImageBuffer::from_fn(8, 8, |y, x, _| gray.get(y, x, 0)).unwrap();
    assert_eq!(max_rgb(&gray).data(), gray.plane(0));

    let img = rand_image(32, 32, 2);
    let lum = max_rgb(&img);
    assert_eq!(lum.shape(), &[1, 32, 32]);
    for y in 0..32 {
        for x in 0..32 {
            let mut m = img.get(y, x, 0);
            for c in 1..3 {
                if img.get(y, x, c) > m {
                    m = img.get(y, x, c);
                }
            }
            assert_eq!(lum.data()[y * 32 + x], m);
        }
    }
}

proptest! {
    #[test]
    fn max_rgb_dominates_and_hits_a_channel(vals in proptest::collection::vec(0.0f64..=1.0, 3 * 6 * 5)) {
        let img = ImageBuffer::from_planar(6, 5, vals).unwrap();
        let lum = max_rgb(&img);
        for y in 0..6 {
            for x in 0..5 {
                let m = lum.data()[y * 5 + x];
                prop_assert!((0..3).all(|c| m >= img.get(y, x, c)));
                prop_assert!((0..3).any(|c| m == img.get(y, x, c)));
            }
        }
    }

    #[test]
    fn attention_stays_in_open_unit_interval(
        mean in proptest::collection::vec(-50.0f64..50.0, 8),
        seed in any::<u64>(),
    ) {
        let m = tiny_model(seed);
        let att = content_attention(&mean, &m.attention_layers(0).unwrap()).unwrap();
        prop_assert_eq!(att.len(), 8);
        prop_assert!(att.iter().all(|a| *a > 0.0 && *a < 1.0));
    }

    #[test]
    fn norm_in_norm_affine_invariance(
        t in proptest::collection::vec(-1.0f64..1.0, 4..12),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
        a2 in 0.1f64..10.0,
        b2 in -5.0f64..5.0,
    ) {
        let spread = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 0.1);
        let p: Vec<f64> = t.iter().map(|v| a * v + b).collect();
        prop_assert!(norm_in_norm_loss(&p, &t).unwrap() <= 1e-6);
        let q: Vec<f64> = t.iter().map(|v| v.sin()).collect();
        let base = norm_in_norm_loss(&q, &t).unwrap();
        let qt: Vec<f64> = q.iter().map(|v| a * v + b).collect();
        let tt: Vec<f64> = t.iter().map(|v| a2 * v + b2).collect();
        prop_assert!((norm_in_norm_loss(&qt, &tt).unwrap() - base).abs() <= 1e-6);
    }
}

#[test]
fn pool_luminance_examples() {
    let c = Tensor::full(&[1, 4, 4], 0.3);
    assert_eq!(pool_luminance(&c, 2, 2).unwrap().data(), &[0.3; 4]);

    let mut d = vec![0.0; 16];
    d[0] = 1.0;
    let single = Tensor::from_vec(&[1, 4, 4], d).unwrap();
    assert_eq!(pool_luminance(&single, 2, 2).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

    let big = rand_tensor(&[1, 224, 224], 3);
    let pooled = pool_luminance(&big, 14, 14).unwrap();
    for oy in 0..14 {
        for ox in 0..14 {
            let mut m = f64::NEG_INFINITY;
            for y in oy * 16..oy * 16 + 16 {
                for x in ox * 16..ox * 16 + 16 {
                    m = m.max(big.data()[y * 224 + x]);
                }
            }
            assert_eq!(pooled.data()[oy * 14 + ox], m);
        }
    }
    assert!(pool_luminance(&c, 5, 2).is_err());
    assert!(pool_luminance(&c, 0, 2).is_err());
}

#[test]
fn pool_luminance_uneven_sizes_cover_every_cell() {
    let src = rand_tensor(&[1, 10, 7], 4);
    let out = pool_luminance(&src, 3, 2).unwrap();
    assert_eq!(out.shape(), &[1, 3, 2]);
    let global = src.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max), global);
}

#[test]
fn illumination_branch_examples() {
    let m = tiny_model(5);
    let layers = m.illumination_layers(1).unwrap();
    let mut zero = m.clone();
    for i in 0..zero.params.len() {
        if zero.params.name(i).contains(".illum.") && zero.params.name(i).ends_with(".bias") {
            zero.params.get_mut(i).data_mut().fill(0.0);
        }
    }
    let zl = zero.illumination_layers(1).unwrap();
    let out = illumination_branch(&Tensor::zeros(&[1, 3, 4]), &zl).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));

    for (h, w) in [(1, 1), (2, 5), (7, 3)] {
        let out = illumination_branch(&rand_tensor(&[1, h, w], 6), &layers).unwrap();
        assert_eq!(out.shape(), &[16, h, w]);
    }

    // at 1x1 only the centre tap of each 3x3 kernel sees data
    let x = 0.7;
    let centre = |l: &LayerRef, v: &[f64]| {
        let s = l.weight.shape();
        let (out, inp) = (s[0], s[1]);
        (0..out)
            .map(|o| l.bias.data()[o] + (0..inp).map(|i| l.weight.data()[(o * inp + i) * 9 + 4] * v[i]).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let a = relu(centre(&layers[0], &[x]));
    let b = relu(centre(&layers[1], &a));
    let c = centre(&layers[2], &b);
    let got = illumination_branch(&Tensor::full(&[1, 1, 1], x), &layers).unwrap();
    for (g, e) in got.data().iter().zip(&c) {
        assert!((g - e).abs() < 1e-12);
    }
    assert!(illumination_branch(&Tensor::zeros(&[2, 3, 3]), &layers).is_err());
}

#[test]
fn merge_features_examples() {
    let a = rand_tensor(&[4, 3, 5], 7);
    assert_eq!(merge_features(&a, &Tensor::zeros(&[4, 3, 5])).unwrap(), a);
    let ones = Tensor::full(&[2, 2, 2], 1.0);
    assert_eq!(merge_features(&ones, &ones).unwrap().data(), &[2.0; 8]);
    let b = rand_tensor(&[4, 3, 5], 8);
    let sum = merge_features(&a, &b).unwrap();
    for i in 0..a.len() {
        assert_eq!(sum.data()[i], a.data()[i] + b.data()[i]);
    }
    assert!(merge_features(&a, &Tensor::zeros(&[4, 5, 3])).is_err());
}

#[test]
fn full_fidelity_shapes_at_224() {
    let m = QualityModel::new(IacaConfig::full(), 1).unwrap();
    let b = backbone_forward(&rand_image(224, 224, 9), &m).unwrap();
    assert_eq!(b.s1.shape(), &[1024, 14, 14]);
    assert_eq!(b.s2.shape(), &[2048, 7, 7]);
    assert_eq!((b.f_s1_mean.len(), b.f_s1_std.len()), (1024, 1024));
    assert_eq!((b.f_s2_mean.len(), b.f_s2_std.len()), (2048, 2048));
    assert!(b.f_s1_std.iter().chain(&b.f_s2_std).all(|v| *v >= 0.0));
}

#[test]
fn tiny_shapes_and_pooled_stats_match_scalar_loops() {
    let m = tiny_model(10);
    for (h, w) in [(32, 32), (64, 96), (96, 64)] {
        let b = backbone_forward(&rand_image(h, w, 11), &m).unwrap();
        assert_eq!(b.s1.shape(), &[8, h / 16, w / 16]);
        assert_eq!(b.s2.shape(), &[16, h / 32, w / 32]);
        for (map, mean, std) in [(&b.s1, &b.f_s1_mean, &b.f_s1_std), (&b.s2, &b.f_s2_mean, &b.f_s2_std)] {
            let (c, mh, mw) = map.chw();
            let n = (mh * mw) as f64;
            for ch in 0..c {
                let vals = &map.data()[ch * mh * mw..(ch + 1) * mh * mw];
                let mu = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                assert!((mean[ch] - mu).abs() < 1e-12);
                assert!((std[ch] - (var + 1e-8).sqrt()).abs() < 1e-12);
            }
        }
    }
    assert!(matches!(
        backbone_forward(&rand_image(31, 64, 1), &m),
        Err(Error::TooSmall { .. })
    ));
}

#[test]
fn constant_map_has_zero_std() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[3, 4, 4], 0.25), false);
    let mean = g.spatial_mean(x);
    let std = g.spatial_std(x);
    assert_eq!(g.value(mean).data(), &[0.25; 3]);
    assert!(g.value(std).data().iter().all(|v| *v <= 1e-4));
}

#[test]
fn content_attention_examples() {
    let m = tiny_model(12);
    let layers = m.attention_layers(0).unwrap();
    let w0: Vec<Tensor> = layers.iter().map(|l| Tensor::zeros(l.weight.shape())).collect();
    let b0: Vec<Tensor> = layers.iter().map(|l| Tensor::zeros(l.bias.shape())).collect();
    let zeros: [LayerRef; 4] = std::array::from_fn(|i| LayerRef {
        weight: &w0[i],
        bias: &b0[i],
    });
    assert_eq!(content_attention(&[0.0; 8], &zeros).unwrap(), vec![0.5; 8]);

    let shapes: Vec<usize> = layers.iter().map(|l| l.weight.shape()[0]).collect();
    assert_eq!(shapes, vec![4, 2, 4, 8]);
    let mean: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
    let expect = sigmoid(dense(
        &layers[3],
        &relu(dense(&layers[2], &relu(dense(&layers[1], &relu(dense(&layers[0], &mean)))))),
    ));
    let got = content_attention(&mean, &layers).unwrap();
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-14);
    }
    assert!(content_attention(&[0.0; 7], &layers).is_err());
}

fn encode(m: &QualityModel, k: usize, v: &[f64]) -> Vec<f64> {
    let e = m.encoder_layers(k).unwrap();
    relu(dense(&e[2], &relu(dense(&e[1], &relu(dense(&e[0], v))))))
}

fn manual_head(m: &QualityModel, b: &FeatureBundle) -> (f64, f64, f64) {
    let stats = [(&b.f_s1_mean, &b.f_s1_std), (&b.f_s2_mean, &b.f_s2_std)];
    let mut enc = Vec::new();
    let mut scores = Vec::new();
    for (k, (mean, std)) in stats.into_iter().enumerate() {
        let a = m.attention_layers(k).unwrap();
        let att = sigmoid(dense(&a[3], &relu(dense(&a[2], &relu(dense(&a[1], &relu(dense(&a[0], mean))))))));
        let weighted: Vec<f64> = att.iter().zip(std.iter()).map(|(x, y)| x * y).collect();
        let e = encode(m, k, &weighted);
        scores.push(dense(&m.scale_head_layer(k).unwrap(), &e)[0]);
        enc.extend(e);
    }
    (dense(&m.final_head_layer(), &enc)[0], scores[0], scores[1])
}

#[test]
fn quality_head_matches_manual_chain_and_composition() {
    let m = tiny_model(13);
    let img = rand_image(64, 64, 14);
    let b = backbone_forward(&img, &m).unwrap();
    let (s, s1, s2) = manual_head(&m, &b);
    let p = quality_head(&b, &m).unwrap();
    assert!((p.score - s).abs() < 1e-12);
    assert!((p.score_s1 - s1).abs() < 1e-12);
    assert!((p.score_s2 - s2).abs() < 1e-12);
    let full = iaca_forward(&img, &m).unwrap();
    assert_eq!(full, p);
    assert_eq!(iaca_forward(&img, &m).unwrap(), full);
}

fn set_last_attention(m: &mut QualityModel, bias: f64) {
    for i in 0..m.params.len() {
        let name = m.params.name(i).to_string();
        if name.contains(".attn.3.") {
            let fill = if name.ends_with(".bias") { bias } else { 0.0 };
            m.params.get_mut(i).data_mut().fill(fill);
        }
    }
}

#[test]
fn saturated_attention_matches_limits() {
    let base = tiny_model(15);
    let img = rand_image(64, 64, 16);

    let mut open = base.clone();
    set_last_attention(&mut open, 800.0);
    let mut std_only = base.clone();
    std_only.config.use_content_adaptation = false;
    std_only.config.pooling_mode = PoolingMode::StdOnly;
    let (a, b) = (iaca_forward(&img, &open).unwrap(), iaca_forward(&img, &std_only).unwrap());
    assert!((a.score - b.score).abs() < 1e-12 && (a.score_s1 - b.score_s1).abs() < 1e-12);

    let mut shut = base.clone();
    set_last_attention(&mut shut, -800.0);
    let b = backbone_forward(&img, &shut).unwrap();
    let p = quality_head(&b, &shut).unwrap();
    let e1 = encode(&shut, 0, &[0.0; 8]);
    let e2 = encode(&shut, 1, &[0.0; 16]);
    let cat: Vec<f64> = e1.iter().chain(&e2).cloned().collect();
    assert!((p.score - dense(&shut.final_head_layer(), &cat)[0]).abs() < 1e-12);
    assert!((p.score_s1 - dense(&shut.scale_head_layer(0).unwrap(), &e1)[0]).abs() < 1e-12);
}

#[test]
fn mean_only_ignores_std_statistics() {
    let mut cfg = IacaConfig::tiny();
    cfg.use_content_adaptation = false;
    cfg.pooling_mode = PoolingMode::MeanOnly;
    let m = QualityModel::new(cfg, 17).unwrap();
    let mut b = backbone_forward(&rand_image(64, 64, 18), &m).unwrap();
    let before = quality_head(&b, &m).unwrap();
    b.f_s1_std.fill(0.0);
    b.f_s2_std.fill(0.0);
    assert_eq!(quality_head(&b, &m).unwrap(), before);
}

#[test]
fn single_scale_uses_stage5_only() {
    let mut cfg = IacaConfig::tiny();
    cfg.use_multi_scale = false;
    let m = QualityModel::new(cfg, 19).unwrap();
    assert!(m.params.names().all(|n| !n.starts_with("s1.")));
    let p = iaca_forward(&rand_image(64, 64, 20), &m).unwrap();
    assert_eq!(p.score_s1, p.score_s2);
    let b = backbone_forward(&rand_image(64, 64, 20), &m).unwrap();
    assert!(b.f_s1_mean.is_empty());
}

#[test]
fn illumination_toggle_keeps_shapes() {
    let mut cfg = IacaConfig::tiny();
    cfg.use_illumination = false;
    let off = QualityModel::new(cfg, 21).unwrap();
    let on = QualityModel::new(IacaConfig::tiny(), 21).unwrap();
    let img = rand_image(64, 64, 22);
    let a = backbone_forward(&img, &off).unwrap();
    let b = backbone_forward(&img, &on).unwrap();
    assert_eq!(a.s1.shape(), b.s1.shape());
    assert_eq!(a.s2.shape(), b.s2.shape());
    assert!(off.params.names().all(|n| !n.contains(".illum.")));
    assert!(iaca_forward(&img, &off).unwrap().score.is_finite());
}

#[test]
fn norm_in_norm_examples() {
    let t = [0.1, 0.4, 0.35, 0.9, 0.2];
    let p: Vec<f64> = t.iter().map(|v| 3.0 * v - 1.0).collect();
    assert!(norm_in_norm_loss(&p, &t).unwrap() < 1e-6);
    let t0 = [1.0, -1.0, 2.0, -2.0];
    let neg: Vec<f64> = t0.iter().map(|v| -v).collect();
    assert!((norm_in_norm_loss(&neg, &t0).unwrap() - 2.0).abs() < 1e-6);
    assert!(norm_in_norm_loss(&[1.0], &[1.0]).is_err());
    assert!(norm_in_norm_loss(&[1.0, 2.0], &[1.0]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let t: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
    let norm = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let c: Vec<f64> = v.iter().map(|x| x - m).collect();
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.into_iter().map(|x| x / (n + 1e-8)).collect::<Vec<f64>>()
    };
    let (pn, tn) = (norm(&p), norm(&t));
    let expect = pn.iter().zip(&tn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!((norm_in_norm_loss(&p, &t).unwrap() - expect).abs() < 1e-14);
}

#[test]
fn config_validation() {
    assert!(IacaConfig::full().validate().is_ok());
    let mut c = IacaConfig::tiny();
    c.use_content_adaptation = false;
    assert!(c.validate().is_err());
    c.pooling_mode = PoolingMode::StdOnly;
    assert!(c.validate().is_ok());
    let mut c = IacaConfig::tiny();
    c.backbone.stage5_channels = 17;
    assert!(c.validate().is_err());
    let mut c = IacaConfig::tiny();
    c.backbone.stage4_stride = 8;
    assert!(c.validate().is_err());
}

#[test]
fn model_roundtrip_and_overwrite_guard() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny_model(24);
    m.q_max = Some(0.123456789012345);
    m.train_split_digest = "d".into();
    m.save(dir.path(), false).unwrap();
    assert!(m.save(dir.path(), false).is_err());
    let back = QualityModel::load(dir.path()).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.manifest(), m.manifest());
    let img = rand_image(32, 32, 25);
    assert_eq!(iaca_forward(&img, &back).unwrap(), iaca_forward(&img, &m).unwrap());

    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let bad = text.replace("\"format_version\": 1", "\"format_version\": 9");
    assert!(ModelManifest::parse(&bad).is_err());
    let mut other = IacaConfig::tiny();
    other.encoder_units = [4, 4, 4];
    let mismatched = ModelManifest {
        config: other,
        ..m.manifest()
    };
    assert!(QualityModel::from_parts(mismatched, &m.params.to_bytes()).is_err());
}

#[test]
fn pretrained_backbone_is_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let donor = tiny_model(26);
    let path = dir.path().join("backbone.bin");
    std::fs::write(&path, donor.params.to_bytes()).unwrap();
    let mut cfg = IacaConfig::tiny();
    cfg.backbone.pretrained_weights_path = Some(path.clone());
    let m = QualityModel::new(cfg, 27).unwrap();
    for i in 0..m.params.len() {
        let name = m.params.name(i);
        let j = donor.params.index_of(name).unwrap();
        if name.starts_with("backbone.") {
            assert_eq!(m.params.get(i), donor.params.get(j));
        }
    }
    let mut wrong = IacaConfig::tiny();
    wrong.backbone.stage4_channels = 16;
    wrong.backbone.stage5_channels = 32;
    wrong.backbone.pretrained_weights_path = Some(path);
    assert!(QualityModel::new(wrong, 1).is_err());
}

fn train_items(n: usize, size: usize) -> Vec<TrainItem> {
    (0..n)
        .map(|i| {
            let level = (i as f64 + 0.5) / n as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let image = ImageBuffer::from_fn(size, size, |_, _, _| (level * rng.random_range(0.5..1.0)).min(1.0)).unwrap();
            TrainItem {
                id: format!("c{i:04}"),
                content_id: format!("c{i:04}"),
                image,
                score: level,
            }
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_q_max_bounds_predictions() {
    let items = train_items(6, 40);
    let hyper = IqaTrainHyper {
        batch_size: 3,
        learning_rate: 1e-3,
        epochs: 2,
        crop_size: 32,
        max_steps: None,
    };
    let (a, losses) = train_iqa_logged(&items, IacaConfig::tiny(), &hyper, 3).unwrap();
    let b = train_iqa(&items, IacaConfig::tiny(), &hyper, 3).unwrap();
    assert_eq!(losses.len(), 4);
    assert_eq!(a.params, b.params);
    let q = a.q_max.unwrap();
    for it in &items {
        assert!(iaca_forward(&it.image, &a).unwrap().score <= q);
    }
    assert_eq!(a.train_split_digest, crate::dataio::digest_ids(items.iter().map(|i| i.content_id.as_str())));
}

#[test]
fn training_rejects_bad_input() {
    let hyper = IqaTrainHyper {
        crop_size: 32,
        ..Default::default()
    };
    assert!(train_iqa(&[], IacaConfig::tiny(), &hyper, 1).is_err());
    let mut items = train_items(3, 32);
    items[1].score = f64::NAN;
    assert!(train_iqa(&items, IacaConfig::tiny(), &hyper, 1).is_err());
    let small = train_items(3, 24);
    assert!(train_iqa(&small, IacaConfig::tiny(), &hyper, 1).is_err());
}
