use dgfnet_core::fusion::{blend, multiply_projected, Fusion};
use dgfnet_core::nn::Ctx;
use dgfnet_core::{finite_diff_check, BatchNormMode, Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn blended(f_av: &Tensor, mid: &Tensor, sigma: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (a, m, s) = (g.constant(f_av.clone()), g.constant(mid.clone()), g.constant(sigma.clone()));
    let d = blend(&mut g, a, m, s).unwrap();
    g.value(d).clone()
}

#[test]
fn injected_gates_select_either_input() {
    let shape = [2, 4, 3, 3];
    let (f_av, mid) = (random(&shape, 5.0, 1), random(&shape, 5.0, 2));
    assert_eq!(blended(&f_av, &mid, &Tensor::zeros(&shape)), mid);
    assert_eq!(blended(&f_av, &mid, &Tensor::ones(&shape)), f_av);
}

#[test]
fn scalar_midpoint() {
    let t = |v| Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap();
    assert_eq!(blended(&t(4.0), &t(2.0), &t(0.5)).data(), &[3.0]);
}

#[test]
fn blend_is_convex_on_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let a: f64 = rng.gen_range(-100.0..100.0);
        let m: f64 = rng.gen_range(-100.0..100.0);
        let s: f64 = rng.gen_range(f64::EPSILON..1.0);
        let t = |v| Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap();
        let d = blended(&t(a), &t(m), &t(s)).data()[0];
        // σ·a + (1 − σ)·m rounds twice; allow a few ulps of the operands
        let tol = 4.0 * f64::EPSILON * a.abs().max(m.abs());
        assert!(d >= a.min(m) - tol && d <= a.max(m) + tol, "{a} {m} {s} -> {d}");
    }
}

#[test]
fn blend_rejects_mismatched_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let m = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
    let s = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(blend(&mut g, a, m, s).err().unwrap(), Error::Contract(_)));
}

fn projected(p: Tensor, mid: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (p, m) = (g.constant(p), g.constant(mid.clone()));
    let y = multiply_projected(&mut g, p, m).unwrap();
    g.value(y).clone()
}

#[test]
fn multiplicative_identities() {
    let mid = random(&[2, 4, 3, 5], 3.0, 4);
    assert_eq!(projected(Tensor::ones(&[2, 4]), &mid), mid);
    assert_eq!(projected(Tensor::full(&[2, 4], 2.0), &mid), mid.map(|v| 2.0 * v));
    let zero = Tensor::zeros(&[2, 4, 3, 5]);
    assert_eq!(projected(random(&[2, 4], 1.0, 5), &zero), zero);
}

#[test]
fn projection_width_must_match() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::ones(&[2, 3]));
    let m = g.constant(Tensor::ones(&[2, 4, 1, 1]));
    assert!(matches!(multiply_projected(&mut g, p, m).err().unwrap(), Error::Contract(_)));
}

struct Setup {
    store: ParamStore,
    fusion: Fusion,
    object: Tensor,
    mid: Tensor,
}

fn setup(seed: u64) -> Setup {
    let mut store = ParamStore::new(seed);
    let fusion = Fusion::new(&mut store, "fusion", 16, 8, true).unwrap();
    Setup {
        store,
        fusion,
        object: random(&[3, 16], 1.0, seed + 1),
        mid: random(&[3, 8, 4, 4], 2.0, seed + 2),
    }
}

#[test]
fn mul_only_equals_multiplicative_and_open_gate() {
    let s = setup(6);
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &s.store, BatchNormMode::Train);
    let o = cx.g.constant(s.object.clone());
    let m = cx.g.constant(s.mid.clone());
    let av = s.fusion.fuse_multiplicative(&mut cx, o, m).unwrap();
    let only = s.fusion.fuse_mul_only(&mut cx, o, m).unwrap();
    let one = cx.g.constant(Tensor::ones(&[3, 8, 4, 4]));
    let open = blend(cx.g, av, m, one).unwrap();
    assert_eq!(g.value(av), g.value(only));
    assert_eq!(g.value(open), g.value(only));
}

#[test]
fn ungated_fusion_has_no_gate() {
    let mut store = ParamStore::new(0);
    let fusion = Fusion::new(&mut store, "fusion", 4, 2, false).unwrap();
    assert!(!store.contains("fusion.gate_av.w"));
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &store, BatchNormMode::Train);
    let m = cx.g.constant(Tensor::ones(&[1, 2, 1, 1]));
    assert!(matches!(fusion.gate(&mut cx, m, m).err().unwrap(), Error::Contract(_)));
}

#[test]
fn gate_stays_open_interval_for_extreme_inputs() {
    let s = setup(7);
    for scale in [1.0, 1e3, 1e6] {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &s.store, BatchNormMode::Train);
        let o = cx.g.constant(s.object.map(|v| v * scale));
        let m = cx.g.constant(s.mid.map(|v| v * scale));
        let av = s.fusion.fuse_multiplicative(&mut cx, o, m).unwrap();
        let (_, sigma) = s.fusion.dgfm(&mut cx, av, m).unwrap();
        assert!(g.value(sigma).data().iter().all(|&v| v > 0.0 && v < 1.0), "scale {scale}");
    }
}

#[test]
fn gate_biases_start_at_zero_and_gate_near_half() {
    let s = setup(8);
    for name in ["fusion.gate_av.b", "fusion.gate_mid.b"] {
        assert!(s.store.get(name).unwrap().data().iter().all(|&v| v == 0.0));
    }
    let mut g = Graph::new();
    let mut cx = Ctx::new(&mut g, &s.store, BatchNormMode::Train);
    let o = cx.g.constant(s.object.clone());
    let m = cx.g.constant(s.mid.clone());
    let av = s.fusion.fuse_multiplicative(&mut cx, o, m).unwrap();
    let (_, sigma) = s.fusion.dgfm(&mut cx, av, m).unwrap();
    assert!((g.value(sigma).mean() - 0.5).abs() < 0.05);
}

#[test]
fn both_blend_paths_carry_gradient() {
    let shape = [2, 4, 3, 3];
    let mut store = ParamStore::new(9);
    store.add_param("f_av", random(&shape, 2.0, 10)).unwrap();
    store.add_param("mid", random(&shape, 2.0, 11)).unwrap();
    let sigma = random(&shape, 1.0, 12).map(|v| 0.5 + 0.45 * v);
    let weights = random(&shape, 1.0, 13);
    let build = |g: &mut Graph, s: &ParamStore| {
        let a = g.param(s, "f_av")?;
        let m = g.param(s, "mid")?;
        let sg = g.constant(sigma.clone());
        let d = blend(g, a, m, sg)?;
        let w = g.constant(weights.clone());
        let p = g.mul(d, w)?;
        g.sum(p)
    };
    let mut g = Graph::new();
    let loss = build(&mut g, &store).unwrap();
    let grads = g.backward(loss).unwrap().for_params(&store);
    for name in ["f_av", "mid"] {
        assert!(grads[name].data().iter().any(|&v| v != 0.0), "{name}");
        assert!(finite_diff_check(&store, name, 1e-6, 100, build).unwrap() < 1e-4, "{name}");
    }
}

#[test]
fn fusion_parameters_match_finite_differences() {
    let s = setup(14);
    let weights = random(&[3, 8, 4, 4], 1.0, 15);
    for name in ["fusion.project.w", "fusion.project.b", "fusion.gate_av.w", "fusion.gate_mid.w", "fusion.gate_mid.b"] {
        let err = finite_diff_check(&s.store, name, 1e-6, 24, |g, st| {
            let mut cx = Ctx::new(g, st, BatchNormMode::Train);
            let o = cx.g.constant(s.object.clone());
            let m = cx.g.constant(s.mid.clone());
            let av = s.fusion.fuse_multiplicative(&mut cx, o, m)?;
            let (fd, _) = s.fusion.dgfm(&mut cx, av, m)?;
            let w = cx.g.constant(weights.clone());
            let p = cx.g.mul(fd, w)?;
            cx.g.sum(p)
        })
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

proptest! {
    #[test]
    fn convexity_holds_elementwise(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let shape = [1, 3, 2, 2];
        let f_av = random(&shape, scale, seed);
        let mid = random(&shape, scale, seed ^ 1);
        let sigma = random(&shape, 1.0, seed ^ 2).map(|v| 0.5 + 0.499 * v);
        let d = blended(&f_av, &mid, &sigma);
        for i in 0..d.numel() {
            let (a, m) = (f_av.data()[i], mid.data()[i]);
            let tol = 4.0 * f64::EPSILON * a.abs().max(m.abs());
            prop_assert!(d.data()[i] >= a.min(m) - tol && d.data()[i] <= a.max(m) + tol);
        }
    }
}
