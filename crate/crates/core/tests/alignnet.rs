use alignlab::alignnet::{align, fuse, init_alignnet, param_count, AlignDims, AlignNetConfig, HeadKind, Strategy};
use alignlab::encoders::HiddenStateStack;
use alignlab::params::ParamStore;
use diffcore::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn run_fuse(cfg: &AlignNetConfig, params: &ParamStore<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let bound = params.bind(&mut tape, false);
    let hv = tape.constant(h.clone());
    let out = fuse(&mut tape, &bound, cfg, hv).unwrap();
    tape.value(out).clone()
}

/// `[b, m, s, z]` layer `l` as `[b, s, z]`.
fn layer(h: &Tensor<f64>, l: usize) -> Vec<f64> {
    let (b, m) = (h.shape()[0], h.shape()[1]);
    (0..b).flat_map(|i| h.index0(i).index0(l).to_f64_vec()).collect::<Vec<_>>().into_iter().take(b * h.numel() / (b * m)).collect()
}

const DIMS: AlignDims = AlignDims { m: 6, z: 5, d_c: 7, d_p: 4 };

#[test]
fn a1_selects_the_last_layer() {
    let cfg = AlignNetConfig {
        strategy: Strategy::A1,
        ..Default::default()
    };
    let h = randn(&[2, 6, 3, 5], 1);
    let p = init_alignnet(&cfg, DIMS, 0).unwrap();
    assert_eq!(run_fuse(&cfg, &p, &h).to_f64_vec(), layer(&h, 5));
}

#[test]
fn a3_mean_and_equal_ada_average_layers() {
    let h = randn(&[2, 6, 3, 5], 2);
    let a3 = AlignNetConfig {
        strategy: Strategy::A3Mean,
        ..Default::default()
    };
    let p = init_alignnet(&a3, DIMS, 0).unwrap();
    let got = run_fuse(&a3, &p, &h);
    let (l0, l4, l5) = (layer(&h, 0), layer(&h, 4), layer(&h, 5));
    for (i, v) in got.data().iter().enumerate() {
        assert!((v - (l0[i] + l4[i] + l5[i]) / 3.0).abs() < 1e-14);
    }

    let ada = AlignNetConfig {
        strategy: Strategy::Ada,
        ..Default::default()
    };
    let mut p = init_alignnet(&ada, DIMS, 0).unwrap();
    p.insert("fuse.ada", Tensor::from_f64(&[6], &[0.3; 6]).unwrap());
    let got = run_fuse(&ada, &p, &h);
    let layers: Vec<Vec<f64>> = (0..6).map(|l| layer(&h, l)).collect();
    for (i, v) in got.data().iter().enumerate() {
        let mean = layers.iter().map(|l| l[i]).sum::<f64>() / 6.0;
        assert!((v - mean).abs() < 1e-14);
    }
}

#[test]
fn cnn_matches_explicit_sum() {
    for k in [1usize, 3, 5] {
        let cfg = AlignNetConfig {
            kernel: k,
            ..Default::default()
        };
        let mut p = init_alignnet(&cfg, DIMS, 0).unwrap();
        let kernel = randn(&[6, k], 10 + k as u64);
        p.insert("fuse.cnn", kernel.clone());
        let h = randn(&[2, 6, 4, 5], 3);
        let got = run_fuse(&cfg, &p, &h);
        let pad = (k - 1) / 2;
        let at = |b: usize, l: usize, s: isize, z: usize| -> f64 {
            if !(0..4).contains(&s) {
                0.0
            } else {
                h.data()[((b * 6 + l) * 4 + s as usize) * 5 + z]
            }
        };
        for b in 0..2 {
            for s in 0..4 {
                for z in 0..5 {
                    let mut want = 0.0;
                    for l in 0..6 {
                        for j in 0..k {
                            want += kernel.data()[l * k + j] * at(b, l, s as isize + j as isize - pad as isize, z);
                        }
                    }
                    assert!((got.data()[(b * 4 + s) * 5 + z] - want).abs() < 1e-12, "k={k}");
                }
            }
        }
    }
}

#[test]
fn fuse_is_linear_in_the_stack() {
    for strategy in Strategy::ALL {
        let cfg = AlignNetConfig {
            strategy,
            ..Default::default()
        };
        let mut p = init_alignnet(&cfg, DIMS, 0).unwrap();
        if strategy == Strategy::Ada {
            p.insert("fuse.ada", randn(&[6], 4));
        }
        if strategy == Strategy::Cnn {
            p.insert("fuse.cnn", randn(&[6, 3], 5));
        }
        let (h1, h2) = (randn(&[1, 6, 3, 5], 6), randn(&[1, 6, 3, 5], 7));
        let mix = h1.zip_map(&h2, |a, b| 2.0 * a - 0.5 * b).unwrap();
        let (f1, f2, fm) = (run_fuse(&cfg, &p, &h1), run_fuse(&cfg, &p, &h2), run_fuse(&cfg, &p, &mix));
        for i in 0..fm.numel() {
            assert!((fm.data()[i] - (2.0 * f1.data()[i] - 0.5 * f2.data()[i])).abs() < 1e-10, "{strategy:?}");
        }
    }
}

#[test]
fn fresh_bridge_emits_zero_condition() {
    let cfg = AlignNetConfig::default();
    let p = init_alignnet(&cfg, DIMS, 3).unwrap();
    let stack = HiddenStateStack {
        h: randn(&[2, 6, 4, 5], 8),
        mask: Tensor::from_f64(&[2, 4], &[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
    };
    let out = align(&p, &cfg, &stack).unwrap();
    assert_eq!(out.y.shape(), &[2, 4, 7]);
    assert_eq!(out.y_p.shape(), &[2, 4]);
    assert!(out.y.data().iter().chain(out.y_p.data()).all(|&v| v == 0.0));
}

#[test]
fn identity_heads_pass_features_through() {
    let dims = AlignDims { m: 3, z: 4, d_c: 4, d_p: 4 };
    let cfg = AlignNetConfig {
        strategy: Strategy::A1,
        head: HeadKind::Identity,
        pooled_head: HeadKind::Identity,
        ..Default::default()
    };
    let p = init_alignnet(&cfg, dims, 0).unwrap();
    assert!(p.is_empty());
    let h = randn(&[1, 3, 2, 4], 9);
    let stack = HiddenStateStack {
        h: h.clone(),
        mask: Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap(),
    };
    let out = align(&p, &cfg, &stack).unwrap();
    let last = layer(&h, 2);
    assert_eq!(out.y.to_f64_vec(), last);
    for z in 0..4 {
        assert!((out.y_p.data()[z] - 0.5 * (last[z] + last[4 + z])).abs() < 1e-15);
    }
    let bad = AlignDims { m: 3, z: 4, d_c: 5, d_p: 4 };
    assert!(init_alignnet(&cfg, bad, 0).unwrap_err().is_config());
}

#[test]
fn output_dims_follow_the_teacher() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::Rng;
    for i in 0..5 {
        let dims = AlignDims {
            m: rng.random_range(1..7),
            z: rng.random_range(2..9),
            d_c: rng.random_range(2..9),
            d_p: rng.random_range(2..9),
        };
        let strategy = Strategy::ALL[i % 4];
        let cfg = AlignNetConfig {
            strategy,
            layer_subset: (strategy == Strategy::A3Mean).then(|| vec![0, dims.m - 1]).map(|mut v| {
                v.dedup();
                v
            }),
            ..Default::default()
        };
        let p = init_alignnet(&cfg, dims, i as u64).unwrap();
        assert_eq!(p.num_elements(), param_count(&cfg, dims).unwrap());
        let stack = HiddenStateStack {
            h: randn(&[2, dims.m, 3, dims.z], i as u64),
            mask: Tensor::from_f64(&[2, 3], &[1.0; 6]).unwrap(),
        };
        let out = align(&p, &cfg, &stack).unwrap();
        assert_eq!(out.y.shape(), &[2, 3, dims.d_c]);
        assert_eq!(out.y_p.shape(), &[2, dims.d_p]);
    }
}

#[test]
fn default_parameter_count_by_hand() {
    // CNN kernel 6x3, then two MLP heads z -> 64 -> d.
    let dims = AlignDims { m: 6, z: 48, d_c: 64, d_p: 32 };
    let fuse = 6 * 3;
    let head_y = 48 * 64 + 64 + 64 * 64 + 64;
    let head_p = 48 * 64 + 64 + 64 * 32 + 32;
    let cfg = AlignNetConfig::default();
    assert_eq!(param_count(&cfg, dims).unwrap(), fuse + head_y + head_p);
    assert_eq!(init_alignnet(&cfg, dims, 0).unwrap().num_elements(), fuse + head_y + head_p);
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = AlignNetConfig::default();
    let a = init_alignnet(&cfg, DIMS, 5).unwrap();
    assert_eq!(a.hash(), init_alignnet(&cfg, DIMS, 5).unwrap().hash());
    assert_ne!(a.hash(), init_alignnet(&cfg, DIMS, 6).unwrap().hash());
}

#[test]
fn invalid_configs_are_rejected() {
    let even = AlignNetConfig {
        kernel: 4,
        ..Default::default()
    };
    assert!(init_alignnet(&even, DIMS, 0).unwrap_err().is_config());
    let subset = AlignNetConfig {
        strategy: Strategy::Ada,
        layer_subset: Some(vec![1, 6]),
        ..Default::default()
    };
    assert!(init_alignnet(&subset, DIMS, 0).unwrap_err().is_config());
    let ada = AlignNetConfig {
        strategy: Strategy::Ada,
        ..Default::default()
    };
    let mut p = init_alignnet(&ada, DIMS, 0).unwrap();
    p.insert("fuse.ada", Tensor::zeros(&[3]));
    let stack = HiddenStateStack {
        h: randn(&[1, 6, 2, 5], 1),
        mask: Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap(),
    };
    assert!(align(&p, &ada, &stack).unwrap_err().is_config());
}
