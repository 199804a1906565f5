use std::collections::BTreeSet;
use std::f64::consts::PI;

use dgfnet_core::data::{self, make_visual, sample_mixture, sample_source, DataConfig, Split};
use dgfnet_core::dsp::{Waveform, SAMPLE_RATE};

/// Hann-windowed DTFT magnitude at `freq` Hz.
fn dtft(x: &[f64], freq: f64) -> f64 {
    let n = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos();
        let a = 2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64;
        re += w * v * a.cos();
        im -= w * v * a.sin();
    }
    re.hypot(im)
}

#[test]
fn spectral_peaks_sit_on_harmonics_of_the_drawn_fundamental() {
    let cfg = DataConfig::default();
    for id in 0..cfg.classes {
        let class = cfg.class(id).unwrap();
        let seed = 100 + id as u64;
        let f0 = class.fundamental(seed);
        assert!(f0 >= class.f0_range.0 && f0 < class.f0_range.1);
        let w = sample_source(&class, 8192, SAMPLE_RATE, seed).unwrap();
        let step = 1.0;
        let grid: Vec<f64> = (40..5000).map(|f| f as f64 * step).collect();
        let mag: Vec<f64> = grid.iter().map(|&f| dtft(w.samples(), f)).collect();
        let top = mag.iter().cloned().fold(0.0, f64::max);
        let mut peaks = 0;
        for i in 1..mag.len() - 1 {
            // tremolo sidebands reach a third of their carrier, so count only strong peaks
            if mag[i] > 0.5 * top && mag[i] >= mag[i - 1] && mag[i] >= mag[i + 1] {
                let h = (grid[i] / f0).round();
                assert!(h >= 1.0 && (grid[i] - h * f0).abs() <= 3.0, "class {id}: peak {} Hz vs f0 {f0}", grid[i]);
                peaks += 1;
            }
        }
        assert!(peaks >= 1, "class {id}");
        let (mut on, mut off) = (0.0, 0.0);
        for h in 1..=4 {
            on += dtft(w.samples(), h as f64 * f0);
            off += dtft(w.samples(), (h as f64 + 0.5) * f0);
        }
        assert!(on > 10.0 * off, "class {id}: {on} vs {off}");
    }
}

#[test]
fn sources_have_equal_rms_and_unit_peak_bound() {
    let cfg = DataConfig::default();
    for id in 0..cfg.classes {
        let w = sample_source(&cfg.class(id).unwrap(), 4096, SAMPLE_RATE, 3).unwrap();
        let rms = (w.energy() / w.len() as f64).sqrt();
        assert!((rms - 0.1).abs() < 1e-9, "class {id}: {rms}");
        assert!(w.samples().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn object_features_share_a_class_direction() {
    let cfg = DataConfig::default();
    let class = cfg.class(2).unwrap();
    let a = sample_source(&class, 4096, SAMPLE_RATE, 1).unwrap();
    let b = sample_source(&class, 4096, SAMPLE_RATE, 2).unwrap();
    let va = make_visual(&cfg, &class, &a, 10).unwrap();
    let vb = make_visual(&cfg, &class, &b, 11).unwrap();
    let dot: f64 = va.object.iter().zip(&vb.object).map(|(x, y)| x * y).sum();
    let na = va.object.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = vb.object.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (na * nb) > 0.95);
    let other = cfg.class(5).unwrap();
    let vc = make_visual(&cfg, &other, &a, 10).unwrap();
    let cross: f64 = va.object.iter().zip(&vc.object).map(|(x, y)| x * y).sum();
    assert!(cross.abs() / na < 0.6);
    // object feature ignores the audio
    assert_eq!(make_visual(&cfg, &class, &b, 10).unwrap().object, va.object);
}

#[test]
fn motion_follows_loudness() {
    let cfg = DataConfig::default();
    let class = cfg.class(1).unwrap();
    let silent = Waveform::silence(4096, SAMPLE_RATE);
    let v = make_visual(&cfg, &class, &silent, 0).unwrap();
    assert_eq!((v.motion_dim, v.motion_frames), (32, 16));
    assert!(v.motion.iter().all(|&m| m == 0.0));

    let s = sample_source(&class, 4096, SAMPLE_RATE, 9).unwrap();
    let norm = |w: &Waveform| {
        let v = make_visual(&cfg, &class, w, 0).unwrap();
        v.motion.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let quiet = norm(&s);
    let loud = norm(&s.scaled(2.0));
    assert!((loud - 2.0 * quiet).abs() < 1e-9 * loud);
    assert!(loud > quiet);
}

#[test]
fn mixture_is_exact_sum_and_deterministic() {
    let cfg = DataConfig::default();
    let ex = sample_mixture(&cfg, 2, 42).unwrap();
    assert_eq!(ex.labels.len(), 2);
    assert_ne!(ex.labels[0], ex.labels[1]);
    for i in 0..cfg.clip_len {
        assert_eq!(ex.mixture.samples()[i], ex.sources[0].samples()[i] + ex.sources[1].samples()[i]);
    }
    assert_eq!(sample_mixture(&cfg, 2, 42).unwrap(), ex);
    assert!(sample_mixture(&cfg, 1, 0).is_err());
    assert!(sample_mixture(&cfg, 9, 0).is_err());
    let three = sample_mixture(&cfg, 3, 5).unwrap();
    assert_eq!(three.labels.iter().collect::<BTreeSet<_>>().len(), 3);
}

#[test]
fn thousand_draws_cover_every_pair() {
    let cfg = DataConfig { clip_len: 64, ..Default::default() };
    let split = Split { base_seed: 77, len: 1000, k: 2 };
    let mut seen = BTreeSet::new();
    for i in 0..split.len {
        let ex = split.example(&cfg, i).unwrap();
        let (a, b) = (ex.labels[0].min(ex.labels[1]), ex.labels[0].max(ex.labels[1]));
        seen.insert((a, b));
    }
    assert_eq!(seen.len(), 8 * 7 / 2);
}

#[test]
fn serialized_dataset_is_byte_identical() {
    let cfg = DataConfig::default();
    let split = Split { base_seed: 5, len: 20, k: 2 };
    let a = data::write_manifest(&split.manifest(&cfg).unwrap());
    let b = data::write_manifest(&split.manifest(&cfg).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 20);
    let back = data::read_manifest(&a).unwrap();
    for (i, r) in back.iter().enumerate() {
        assert_eq!(r.seed, split.seed(i));
        assert_eq!(r.classes, split.example(&cfg, i).unwrap().labels);
    }
}
