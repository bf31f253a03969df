use hsunmix::decoder::{Decoder, HEAD_WIDTH};
use hsunmix::encoder::{Ablation, ChannelAttention, Encoder, EncoderConfig, Fusion, SpatialBranch, SpectralBranch};
use hsunmix::init::{farthest_point_init, vca};
use hsunmix::mixing::{gen_endmembers, ppnmm_pixel, AbundanceTensor, EndmemberMatrix, HsiCube};
use hsunmix::model::UnmixingNet;
use hsunmix::params::{Init, ParamStore};
use hsunmix::tensor::{grad_check_with, GradCheckOptions, Tape, Tensor, COMPOSITE_DENOM_FLOOR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Row-normalized random abundances.
fn simplex(rows: usize, cols: usize, r: usize, seed: u64) -> Tensor {
    let mut t = random(&[rows, cols, r], seed, 0.01, 1.0);
    for px in t.data_mut().chunks_mut(r) {
        let s: f32 = px.iter().sum();
        px.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        channels: 6,
        spectral_channels: 4,
        ca_reduction: 2,
        ..EncoderConfig::default()
    }
}

fn assert_simplex(a: &Tensor) {
    let r = a.last_dim();
    for px in a.data().chunks(r) {
        assert!(px.iter().all(|&v| v >= 0.0));
        assert!((px.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn spatial_stage_extents() {
    let mut store = ParamStore::new();
    let branch = SpatialBranch::new(&mut Init::new(&mut store, 0), "s", 224, 108, 4, 3).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = tape.constant(random(&[100, 100, 224], 1, 0.0, 1.0));
    let shapes: Vec<Vec<usize>> = branch.stages(&p, y).unwrap().iter().map(|v| v.shape()).collect();
    assert_eq!(
        shapes,
        vec![vec![100, 100, 108], vec![50, 50, 216], vec![25, 25, 432], vec![13, 13, 864]]
    );
    assert_eq!(branch.forward(&p, y).unwrap().shape(), vec![100, 100, 4]);
}

#[test]
fn spatial_branch_rejects_tiny_images() {
    let mut store = ParamStore::new();
    let branch = SpatialBranch::new(&mut Init::new(&mut store, 0), "s", 4, 6, 2, 3).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    assert!(branch.forward(&p, tape.constant(Tensor::zeros(&[4, 20, 4]))).is_err());
}

#[test]
fn spectral_depth_and_attention_weights() {
    let mut store = ParamStore::new();
    let branch = SpectralBranch::new(&mut Init::new(&mut store, 0), "x", 224, 3, 4, 16, 4).unwrap();
    assert_eq!(branch.residual_depth(), 14);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = tape.constant(random(&[3, 4, 224], 2, 0.0, 1.0));
    let (x, weights) = branch.features(&p, y).unwrap();
    assert_eq!(x.shape(), vec![14, 3, 4, 16]);
    assert_eq!(weights.len(), 5);
    for w in weights {
        assert!(w.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    assert_eq!(branch.forward(&p, y).unwrap().shape(), vec![3, 4, 3]);
    assert!(SpectralBranch::new(&mut Init::new(&mut store, 0), "y", 8, 3, 4, 16, 4).is_err());
}

#[test]
fn channel_attention_matches_loop_oracle() {
    let mut store = ParamStore::new();
    let ca = ChannelAttention::new(&mut Init::new(&mut store, 3), "ca", 6, 2).unwrap();
    let x = random(&[3, 5, 6], 4, -1.0, 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = ca.forward(&p, tape.constant(x.clone())).unwrap();

    let mlp = |v: &[f64]| -> Vec<f64> {
        let (w1, b1) = (store.get(ca.fc1.weight), store.get(ca.fc1.bias));
        let (w2, b2) = (store.get(ca.fc2.weight), store.get(ca.fc2.bias));
        let h: Vec<f64> = (0..3)
            .map(|j| (f64::from(b1.data()[j]) + (0..6).map(|i| v[i] * f64::from(w1.data()[i * 3 + j])).sum::<f64>()).max(0.0))
            .collect();
        (0..6)
            .map(|j| f64::from(b2.data()[j]) + (0..3).map(|i| h[i] * f64::from(w2.data()[i * 6 + j])).sum::<f64>())
            .collect()
    };
    let pixels: Vec<&[f32]> = x.data().chunks(6).collect();
    let avg: Vec<f64> = (0..6).map(|c| pixels.iter().map(|p| f64::from(p[c])).sum::<f64>() / 15.0).collect();
    let max: Vec<f64> = (0..6).map(|c| pixels.iter().map(|p| f64::from(p[c])).fold(f64::MIN, f64::max)).collect();
    let (ma, mm) = (mlp(&avg), mlp(&max));
    for (k, v) in out.value().data().iter().enumerate() {
        let c = k % 6;
        let w = 1.0 / (1.0 + (-(ma[c] + mm[c])).exp());
        assert!((f64::from(*v) - f64::from(x.data()[k]) * w).abs() < 1e-5);
    }
}

#[test]
fn fusion_output_is_on_the_simplex() {
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut Init::new(&mut store, 5), "f", 3, 4, 1.0).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = tape.constant(random(&[5, 6, 3], 6, -3.0, 3.0));
    let b = tape.constant(random(&[5, 6, 3], 7, -3.0, 3.0));
    assert_simplex(&fusion.forward(&p, a, b).unwrap().value());
    let c = tape.constant(random(&[5, 5, 3], 8, -1.0, 1.0));
    assert!(fusion.forward(&p, a, c).is_err());
}

#[test]
fn encoder_ablations_give_valid_abundances() {
    let mut store = ParamStore::new();
    let mut enc = Encoder::new(&mut Init::new(&mut store, 9), &small_config(), 16, 3).unwrap();
    let y = random(&[16, 18, 16], 10, 0.0, 1.0);
    for ablation in [Ablation::None, Ablation::NoSpatial, Ablation::NoSpectral] {
        enc.ablation = ablation;
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = enc.forward(&p, tape.constant(y.clone())).unwrap();
        assert_eq!(a.shape(), vec![16, 18, 3]);
        assert_simplex(&a.value());
    }
}

/// Gradients of the reconstruction error with respect to parameters spread
/// over every stage, so each check runs through the whole network. These
/// accumulate over all pixels, which keeps them well above the 32-bit
/// finite-difference noise; per-entry input gradients do not.
#[test]
fn end_to_end_gradient_check() {
    let m = gen_endmembers(3, 16, 11).unwrap();
    let mut net = UnmixingNet::new(&small_config(), 16, &m, 12).unwrap();
    // give the zero-initialized head output a nonzero path
    let out = net.decoder.head.out;
    *net.store.get_mut(out.weight) = random(&[HEAD_WIDTH, 1], 13, -0.3, 0.3);
    let y = random(&[16, 16, 16], 14, 0.1, 0.9);
    let targets = [
        net.decoder.weights,
        net.encoder.fusion.conv.kernel,
        net.encoder.spatial.head.weight,
        net.encoder.spatial.stage1[0].attn.qkv.weight,
        net.encoder.spectral.head.kernel,
        net.decoder.head.conv0.kernel,
        net.decoder.head.out.weight,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for id in targets {
        let x0 = net.store.get(id).clone();
        let opts = GradCheckOptions {
            eps: 1e-2,
            floor: COMPOSITE_DENOM_FLOOR,
            entries: Some((0..x0.len().min(30)).map(|_| rng.random_range(0..x0.len())).collect()),
            kink_tolerance: Some(2e-3),
        };
        let report = grad_check_with(
            |x| {
                let mut p = net.store.bind(x.tape());
                p.replace(id, x);
                let y_hat = net.forward(&p, x.tape().constant(y.clone()))?.y_hat;
                let d = y_hat.sub(x.tape().constant(y.clone()))?;
                d.mul(d)?.sum()?.scale(1.0 / 256.0)
            },
            &x0,
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 2e-3, "{report:?}");
        assert!(report.checked * 2 > report.checked + report.skipped_kinks, "{report:?}");
    }
}

#[test]
fn linear_mixing_matches_mode3_loop() {
    let m = gen_endmembers(4, 7, 16).unwrap();
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut Init::new(&mut store, 0), &m);
    let a = simplex(3, 5, 4, 17);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = dec.linear_mixing(&p, tape.constant(a.clone())).unwrap();
    for (px, out) in a.data().chunks(4).zip(y.value().data().chunks(7)) {
        for l in 0..7 {
            let expected: f32 = (0..4).map(|r| px[r] * m.row(r)[l]).sum();
            assert!((out[l] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn decoder_is_the_ppnmm_forward_model() {
    let m = gen_endmembers(3, 12, 18).unwrap();
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut Init::new(&mut store, 19), &m);
    *store.get_mut(dec.head.out.weight) = random(&[HEAD_WIDTH, 1], 20, -0.5, 0.5);
    *store.get_mut(dec.head.out.bias) = Tensor::full(&[1], 0.1);
    let a = simplex(4, 3, 3, 21);
    let y = random(&[4, 3, 12], 22, 0.0, 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = dec.forward(&p, tape.constant(a.clone()), tape.constant(y)).unwrap();
    let abund = AbundanceTensor::new(a).unwrap();
    let b = out.b_hat.value();
    assert!(b.data().iter().any(|v| v.abs() > 1e-3));
    let y_hat = HsiCube::new(out.y_hat.value().as_ref().clone()).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let expected = ppnmm_pixel(&m, abund.pixel(i, j), b.get(&[i, j, 0])).unwrap();
            for (got, want) in y_hat.pixel(i, j).iter().zip(expected) {
                assert!((got - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn disabled_head_is_linear() {
    let m = gen_endmembers(2, 8, 23).unwrap();
    let mut store = ParamStore::new();
    let mut dec = Decoder::new(&mut Init::new(&mut store, 24), &m);
    *store.get_mut(dec.head.out.bias) = Tensor::full(&[1], 0.2);
    dec.nonlinear = false;
    let a = simplex(2, 2, 2, 25);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = dec.forward(&p, tape.constant(a), tape.constant(random(&[2, 2, 8], 26, 0.0, 1.0))).unwrap();
    assert_eq!(out.y_hat.value(), out.y_lin.value());
}

#[test]
fn head_is_pixel_permutation_equivariant() {
    let mut store = ParamStore::new();
    let m = gen_endmembers(2, 6, 27).unwrap();
    let dec = Decoder::new(&mut Init::new(&mut store, 28), &m);
    *store.get_mut(dec.head.out.weight) = random(&[HEAD_WIDTH, 1], 29, -1.0, 1.0);
    let y = random(&[2, 2, 6], 30, 0.0, 1.0);
    let y_lin = random(&[2, 2, 6], 31, 0.0, 1.0);
    let perm = [2, 0, 3, 1];
    let permute = |t: &Tensor| {
        let data: Vec<f32> = perm.iter().flat_map(|&k| t.data()[k * 6..(k + 1) * 6].to_vec()).collect();
        Tensor::new(&[2, 2, 6], data).unwrap()
    };
    let tape = Tape::new();
    let p = store.bind(&tape);
    let b = dec.head.forward(&p, tape.constant(y.clone()), tape.constant(y_lin.clone())).unwrap().value();
    let bp = dec.head.forward(&p, tape.constant(permute(&y)), tape.constant(permute(&y_lin))).unwrap().value();
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(bp.data()[k], b.data()[src]);
    }
}

#[test]
fn head_gradient_reaches_every_parameter() {
    let mut store = ParamStore::new();
    let m = gen_endmembers(2, 10, 32).unwrap();
    let dec = Decoder::new(&mut Init::new(&mut store, 33), &m);
    *store.get_mut(dec.head.out.weight) = random(&[HEAD_WIDTH, 1], 34, -1.0, 1.0);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let b = dec
        .head
        .forward(&p, tape.constant(random(&[3, 3, 10], 35, 0.0, 1.0)), tape.constant(random(&[3, 3, 10], 36, 0.0, 1.0)))
        .unwrap();
    let grads = tape.backward(b.mul(b).unwrap().sum().unwrap()).unwrap();
    let h = dec.head;
    for id in [h.conv0.kernel, h.conv0.bias, h.conv1.kernel, h.conv1.bias, h.conv2.kernel, h.conv2.bias, h.out.weight, h.out.bias] {
        let g = grads.get(p[id]).expect("gradient present");
        assert!(g.data().iter().any(|v| *v != 0.0));
    }
}

#[test]
fn fresh_network_reports_initial_endmembers() {
    let m = gen_endmembers(3, 16, 37).unwrap();
    let net = UnmixingNet::new(&small_config(), 16, &m, 38).unwrap();
    assert_eq!(net.endmembers().unwrap(), m);
    let pred = net.predict(&HsiCube::new(random(&[16, 16, 16], 39, 0.0, 1.0)).unwrap()).unwrap();
    // zero-initialized head output: the decoder starts linear
    assert!(pred.bfield.tensor().data().iter().all(|&v| v == 0.0));
    assert!(UnmixingNet::new(&small_config(), 15, &m, 38).is_err());
}

fn spectral_angle(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

/// Mean angle under the best of all row permutations.
fn best_mean_sad(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> f64 {
    let r = truth.count();
    let mut perm: Vec<usize> = (0..r).collect();
    let mut best = f64::INFINITY;
    permutations(&mut perm, 0, &mut |p| {
        let s: f64 = (0..r).map(|i| spectral_angle(est.row(p[i]), truth.row(i))).sum();
        best = best.min(s / r as f64);
    });
    best
}

fn permutations(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, f);
        v.swap(k, i);
    }
}

/// Noiseless linear mixtures over 10x10 pixels, the first `r` pure.
fn pure_pixel_cube(m: &EndmemberMatrix, seed: u64) -> HsiCube {
    let r = m.count();
    let mut a = simplex(10, 10, r, seed);
    for (i, px) in a.data_mut().chunks_mut(r).take(r).enumerate() {
        px.iter_mut().enumerate().for_each(|(k, v)| *v = if k == i { 1.0 } else { 0.0 });
    }
    let l = m.bands();
    let data: Vec<f32> = a
        .data()
        .chunks(r)
        .flat_map(|px| (0..l).map(move |b| (0..r).map(|k| px[k] * m.row(k)[b]).sum::<f32>()))
        .collect();
    HsiCube::new(Tensor::new(&[10, 10, l], data).unwrap()).unwrap()
}

#[test]
fn vca_recovers_pure_pixels() {
    let mut total = 0.0;
    for seed in 0..10 {
        let m = gen_endmembers(3, 40, 100 + seed).unwrap();
        let y = pure_pixel_cube(&m, 200 + seed);
        let est = vca(&y, 3, seed).unwrap();
        let sad = best_mean_sad(&est, &m);
        assert!(sad < 1e-3, "seed {seed}: {sad}");
        total += sad;
        assert_eq!(est, vca(&y, 3, seed).unwrap());
    }
    assert!(total / 10.0 < 0.01);
}

#[test]
fn vca_single_endmember_is_max_norm_pixel() {
    let y = HsiCube::new(random(&[5, 5, 6], 40, 0.0, 1.0)).unwrap();
    let norms: Vec<f32> = y.pixels().map(|p| p.iter().map(|v| v * v).sum()).collect();
    let brightest = (0..norms.len()).fold(0, |b, i| if norms[i] > norms[b] { i } else { b });
    let est = vca(&y, 1, 0).unwrap();
    assert_eq!(est.row(0), y.pixels().nth(brightest).unwrap());
}

#[test]
fn vca_rejects_rank_deficient_cubes() {
    let px = [0.2f32, 0.5, 0.3, 0.9];
    let y = HsiCube::new(Tensor::new(&[3, 3, 4], px.repeat(9)).unwrap()).unwrap();
    assert!(vca(&y, 2, 0).is_err());
    assert!(farthest_point_init(&y, 2).is_err());
}

#[test]
fn farthest_point_recovers_pure_pixels() {
    let m = gen_endmembers(3, 30, 41).unwrap();
    let y = pure_pixel_cube(&m, 42);
    let est = farthest_point_init(&y, 3).unwrap();
    assert!(est.rows().all(|r| r.iter().all(|&v| v >= 0.0)));
    assert_eq!(est, farthest_point_init(&y, 3).unwrap());
}
