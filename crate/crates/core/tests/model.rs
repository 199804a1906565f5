use dgfnet_core::data::{sample_mixture, DataConfig};
use dgfnet_core::dsp::{log_resample, stft};
use dgfnet_core::fusion::FusionMode;
use dgfnet_core::masks::{apply_mask, ground_truth_mask, separation_loss, DEFAULT_CAP, DEFAULT_FLOOR};
use dgfnet_core::model::{is_transformer_param, make_batch, BatchInput, Model, ModelConfig, Prepared, SpectralConfig};
use dgfnet_core::nn::Ctx;
use dgfnet_core::transformer::TransformerConfig;
use dgfnet_core::unet::UNetConfig;
use dgfnet_core::{finite_diff_check_steps, BatchNormMode, Error, Graph, ParamStore, Tensor};

fn small_config(data: &DataConfig, fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        unet: UNetConfig {
            depth: 3,
            base_channels: 4,
            bottleneck_channels: 8,
            final_channels: 4,
            attention: true,
            attention_groups: 2,
        },
        transformer: TransformerConfig {
            width: 8,
            heads: 2,
            layers: 3,
            ffn_mult: 2,
            positional: false,
        },
        ..ModelConfig::desk(data, fusion)
    }
}

fn prepared(n: usize, seed: u64) -> Vec<Prepared> {
    let data = DataConfig::default();
    (0..n)
        .map(|i| Prepared::new(sample_mixture(&data, 2, seed + i as u64).unwrap(), &SpectralConfig::desk()).unwrap())
        .collect()
}

fn close_in_ulps(a: f64, b: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs())
}

#[test]
fn oracle_masks_rebuild_sources() {
    let data = DataConfig::default();
    let spectral = SpectralConfig::desk();
    for seed in 0..100 {
        let ex = sample_mixture(&data, 2, seed).unwrap();
        let mix_lin = stft(&ex.mixture, &spectral.stft).unwrap().magnitude();
        let mix_log = log_resample(&mix_lin, spectral.log_bins).unwrap();
        for src in &ex.sources {
            let lin = stft(src, &spectral.stft).unwrap().magnitude();
            let log = log_resample(&lin, spectral.log_bins).unwrap();
            for (s, m) in [(&lin, &mix_lin), (&log, &mix_log)] {
                let mask = ground_truth_mask(s, m, DEFAULT_FLOOR, DEFAULT_CAP).unwrap();
                let rebuilt = apply_mask(m, &mask).unwrap();
                for i in 0..s.data.len() {
                    if m.data[i] > DEFAULT_FLOOR {
                        let expected = s.data[i].min(DEFAULT_CAP * m.data[i]);
                        assert!(close_in_ulps(rebuilt.data[i], expected), "seed {seed} cell {i}");
                    } else {
                        assert_eq!(rebuilt.data[i], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn batch_layout() {
    let items = prepared(3, 10);
    let refs: Vec<&Prepared> = items.iter().collect();
    let (batch, gt) = make_batch(&refs).unwrap();
    assert_eq!(batch.spec.shape(), &[3, 1, 64, 64]);
    assert_eq!(batch.rows, vec![0, 0, 1, 1, 2, 2]);
    assert_eq!(batch.objects.shape(), &[6, 64]);
    assert_eq!(batch.motion.shape(), &[6, 16, 32]);
    assert_eq!(gt.shape(), &[6, 1, 64, 64]);
    let v = &items[1].example.visuals[1];
    // motion token t of row 3 is frame t of that source's visual feature
    assert_eq!(batch.motion.data()[(3 * 16 + 5) * 32 + 7], v.motion[7 * 16 + 5]);
    assert_eq!(&gt.data()[3 * 4096..4 * 4096], &items[1].gt_masks[1].values[..]);
    assert_eq!(batch.classes[3], items[1].example.labels[1]);
}

fn forward_masks(model: &Model, store: &ParamStore, batch: &BatchInput, mode: BatchNormMode) -> Tensor {
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, store, mode);
    let out = model.forward(&mut cx, batch).unwrap();
    g.value(out.masks).clone()
}

#[test]
fn masks_are_bounded_and_shaped() {
    let data = DataConfig::default();
    let items = prepared(2, 20);
    let refs: Vec<&Prepared> = items.iter().collect();
    let (batch, _) = make_batch(&refs).unwrap();
    for mode in FusionMode::ALL {
        let mut store = ParamStore::new(1);
        let model = Model::new(&mut store, small_config(&data, mode)).unwrap();
        let m = forward_masks(&model, &store, &batch, BatchNormMode::Train);
        assert_eq!(m.shape(), &[4, 1, 64, 64]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0), "{mode:?}");
    }
}

#[test]
fn arms_share_the_encoder_at_initialisation() {
    let data = DataConfig::default();
    let items = prepared(2, 30);
    let refs: Vec<&Prepared> = items.iter().collect();
    let (batch, _) = make_batch(&refs).unwrap();
    let mut bottlenecks = Vec::new();
    for mode in FusionMode::ALL {
        let mut store = ParamStore::new(7);
        let model = Model::new(&mut store, small_config(&data, mode)).unwrap();
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &store, BatchNormMode::Train);
        let out = model.forward(&mut cx, &batch).unwrap();
        bottlenecks.push(g.value(out.bottleneck).clone());
    }
    assert!(bottlenecks.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn changing_one_visual_feature_changes_only_its_mask() {
    let data = DataConfig::default();
    let items = prepared(2, 40);
    let refs: Vec<&Prepared> = items.iter().collect();
    let (batch, _) = make_batch(&refs).unwrap();
    let cells = 64 * 64;
    for mode in FusionMode::ALL {
        let mut store = ParamStore::new(3);
        let model = Model::new(&mut store, small_config(&data, mode)).unwrap();
        let before = forward_masks(&model, &store, &batch, BatchNormMode::Eval);
        let mut changed = batch.clone();
        for v in &mut changed.objects.data_mut()[64..128] {
            *v = -*v + 0.3;
        }
        for v in &mut changed.motion.data_mut()[16 * 32..2 * 16 * 32] {
            *v *= 2.0;
        }
        let after = forward_masks(&model, &store, &changed, BatchNormMode::Eval);
        for r in 0..4 {
            let same = before.data()[r * cells..(r + 1) * cells] == after.data()[r * cells..(r + 1) * cells];
            assert_eq!(same, r != 1, "{mode:?} row {r}");
        }
    }
}

#[test]
fn bad_batches_are_rejected() {
    let data = DataConfig::default();
    let items = prepared(1, 50);
    let (batch, _) = make_batch(&[&items[0]]).unwrap();
    let mut store = ParamStore::new(0);
    let model = Model::new(&mut store, small_config(&data, FusionMode::Dgfm)).unwrap();
    let mut bad = batch.clone();
    bad.classes[0] = 8;
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, BatchNormMode::Eval);
    assert!(matches!(model.forward(&mut cx, &bad).err().unwrap(), Error::Contract(_)));
    let mut bad = batch;
    bad.rows[1] = 1;
    assert!(matches!(model.forward(&mut cx, &bad).err().unwrap(), Error::Contract(_)));
    assert!(matches!(make_batch(&[]).err().unwrap(), Error::Contract(_)));
}

#[test]
fn end_to_end_loss_gradients_match_finite_differences() {
    let data = DataConfig::default();
    let items = prepared(2, 60);
    let refs: Vec<&Prepared> = items.iter().collect();
    let (batch, gt) = make_batch(&refs).unwrap();
    let mut store = ParamStore::new(11);
    let model = Model::new(&mut store, small_config(&data, FusionMode::DgfmAttention)).unwrap();
    for name in [
        "unet.stem.conv.w",
        "unet.down2.bn.gamma",
        "unet.att1.directional.w",
        "unet.head.w",
        "fusion.project.w",
        "fusion.gate_av.w",
        "fusion.gate_mid.b",
        "transformer.queries",
        "transformer.layer1.cross.attn.v.w",
        "transformer.mask_mlp.out.w",
    ] {
        let err = finite_diff_check_steps(&store, name, &[1e-4, 1e-5, 1e-6], 6, |g, s| {
            let mut cx = Ctx::new(g, s, BatchNormMode::Train);
            let out = model.forward(&mut cx, &batch)?;
            let t = cx.g.constant(gt.clone());
            separation_loss(cx.g, out.masks, t, 2)
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn loss_oracle() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(&[2, 1, 1, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap());
    let t = g.constant(Tensor::new(&[2, 1, 1, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap());
    let l = separation_loss(&mut g, p, t, 1).unwrap();
    // mean over the two cells of each row, summed over rows
    assert_eq!(g.value(l).item().unwrap(), 1.0);
    let same = separation_loss(&mut g, p, p, 1).unwrap();
    assert_eq!(g.value(same).item().unwrap(), 0.0);
}

#[test]
fn only_transformer_parameters_are_decayed() {
    let data = DataConfig::default();
    let mut store = ParamStore::new(0);
    Model::new(&mut store, small_config(&data, FusionMode::DgfmAttention)).unwrap();
    let decayed: Vec<&str> = store.trainable_names().filter(|n| is_transformer_param(n)).collect();
    assert!(decayed.contains(&"transformer.queries"));
    assert!(!decayed.iter().any(|n| n.starts_with("unet.") || n.starts_with("fusion.")));
}

#[test]
fn reconstruction_with_unit_mask_returns_the_mixture() {
    let items = prepared(1, 70);
    let p = &items[0];
    let ones = vec![1.0; 64 * 64];
    let w = p.reconstruct(&ones, &SpectralConfig::desk().stft).unwrap();
    let mix = p.example.mixture.samples();
    let err: f64 = w.samples().iter().zip(mix).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / norm < 1e-9, "{}", err / norm);
}
