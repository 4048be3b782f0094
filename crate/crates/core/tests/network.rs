use planar3d::autodiff::Tape;
use planar3d::model::{synthetic_encoder_2d, Network, NetworkSpec, Part, WidthScale};
use planar3d::tensor::{conv2d_reference, Kernel2D, Padding};
use planar3d::training::loss::LossKind;
use planar3d::transfer::{count_params, map_weightset, WeightManifest};
use planar3d::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> NetworkSpec {
    let mut spec = NetworkSpec::vgg16_unet(WidthScale::new(1, 16), [16, 16, 16]);
    spec.encoder.truncate(2);
    spec.decoder.drain(..3);
    spec
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Per-slice 2D VGG encoder: direct-loop convolutions, ReLU and 2×2 max pooling.
fn encoder_2d(manifest: &WeightManifest, spec: &NetworkSpec, slice: &Tensor) -> Vec<Tensor> {
    let mut layers = manifest.layers().iter();
    let mut x = slice.clone();
    let mut out = Vec::new();
    for stage in &spec.encoder {
        for _ in 0..stage.conv_count {
            let k = layers.next().unwrap().to_kernel2d().unwrap();
            x = conv2d_reference(&x, &k, Padding::Same).unwrap().map(|v| v.max(0.0));
        }
        out.push(x.clone());
        let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
        x = Tensor::from_fn(&[n, c, h / 2, w / 2], |i| {
            let (col, row, plane) = (i % (w / 2), (i / (w / 2)) % (h / 2), i / (w / 2 * (h / 2)));
            let at = |dy: usize, dx: usize| x.data()[(plane * h + 2 * row + dy) * w + 2 * col + dx];
            at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1))
        });
    }
    out
}

#[test]
fn transferred_encoder_matches_per_slice_2d_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = NetworkSpec::toy();
    let weights_2d = synthetic_encoder_2d(&spec, 7).unwrap();
    let net = Network::build(&spec, 0, Some(&map_weightset(&weights_2d).unwrap())).unwrap();
    for _ in 0..2 {
        let x = random_input(&mut rng, &[1, 3, 16, 64, 64]);
        let feats = net.encoder_features(&x).unwrap();
        assert_eq!(feats.len(), 5);
        for d in [0, 7, 15] {
            let reference = encoder_2d(&weights_2d, &spec, &x.depth_slice(d).unwrap());
            for (stage, (f, r)) in feats.iter().zip(&reference).enumerate() {
                let got = f.depth_slice(d).unwrap();
                assert_eq!(got.shape(), r.shape());
                for (a, b) in got.data().iter().zip(r.data()) {
                    assert!((a - b).abs() <= 1e-5, "stage {stage} slice {d}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn toy_forward_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = NetworkSpec::toy();
    assert_eq!(spec.encoder_channels(), [8, 16, 32, 64, 64]);
    let net = Network::build(&spec, 3, None).unwrap();
    let x = random_input(&mut rng, &[2, 3, 16, 64, 64]);
    let y = net.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 1, 16, 64, 64]);
    assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let swapped = Tensor::stack_batch(&[x.batch_item(1).unwrap(), x.batch_item(0).unwrap()]).unwrap();
    let ys = net.forward(&swapped).unwrap();
    assert_eq!(ys.batch_item(0).unwrap(), y.batch_item(1).unwrap());
    assert_eq!(ys.batch_item(1).unwrap(), y.batch_item(0).unwrap());
}

#[test]
fn residual_path_is_added_after_the_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = small_spec();
    let mut net = Network::build(&spec, 4, None).unwrap();
    let zero_ids: Vec<usize> = net
        .decoder_blocks()
        .iter()
        .flat_map(|b| b.convs.iter().flat_map(|c| [c.kernel, c.bias]))
        .collect();
    for id in zero_ids {
        let p = &mut net.parameters_mut()[id];
        p.value = Tensor::zeros(p.value.shape());
    }
    let trace = net.forward_trace(&random_input(&mut rng, &[1, 3, 16, 16, 16])).unwrap();
    assert_eq!(trace.decoder.len(), 2);
    for (out, residual) in trace.decoder.iter().zip(&trace.residual) {
        assert_eq!(out, residual);
        assert!(out.data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn planar_encoder_keeps_2d_parameter_count() {
    for scale in [WidthScale::FULL, WidthScale::TOY] {
        let spec = NetworkSpec::vgg16_unet(scale, [16, 64, 64]);
        let m2 = synthetic_encoder_2d(&spec, 0).unwrap();
        let net = Network::build(&spec, 0, Some(&map_weightset(&m2).unwrap())).unwrap();
        let encoder: usize = net
            .parameters()
            .iter()
            .filter(|p| p.part == Part::Encoder)
            .map(|p| p.value.numel())
            .sum();
        assert_eq!(encoder, count_params(&m2));
    }
}

#[test]
fn loaded_encoder_rejects_wrong_shapes() {
    let spec = small_spec();
    let other = NetworkSpec {
        width_scale: WidthScale::new(1, 8),
        ..small_spec()
    };
    let m = map_weightset(&synthetic_encoder_2d(&other, 0).unwrap()).unwrap();
    let err = Network::build(&spec, 0, Some(&m)).unwrap_err().to_string();
    assert!(err.contains("block1_conv1"), "{err}");
}

fn one_step(net: &Network) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_input(&mut rng, &[1, 3, 16, 16, 16]);
    let t = Tensor::from_fn(&[1, 1, 16, 16, 16], |_| rng.gen_bool(0.1) as u8 as f32);
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, true);
    let xv = tape.constant(x);
    let tv = tape.constant(t);
    let p = net.record(&mut tape, &vars, xv).unwrap();
    tape.loss(p, tv, LossKind::BceDice).unwrap();
    let grads = tape.backward(Tensor::scalar(1.0)).unwrap();
    let mut out = net.clone();
    for (id, g) in grads.iter() {
        let p = &mut out.parameters_mut()[id];
        p.value = p.value.zip_map(g, |w, d| w - 0.1 * d).unwrap();
    }
    out
}

#[test]
fn frozen_encoder_is_untouched_by_a_step() {
    let net = Network::build(&small_spec(), 6, None).unwrap().set_encoder_trainable(false);
    let after = one_step(&net);
    for (a, b) in net.parameters().iter().zip(after.parameters()) {
        if a.part == Part::Encoder {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
    assert!(net.parameters().iter().zip(after.parameters()).any(|(a, b)| a.part != Part::Encoder && a.value != b.value));

    let thawed = net.set_encoder_trainable(true).set_encoder_trainable(true);
    let after = one_step(&thawed);
    assert!(thawed
        .parameters()
        .iter()
        .zip(after.parameters())
        .any(|(a, b)| a.part == Part::Encoder && a.value != b.value));
}

#[test]
fn save_and_load_roundtrip() {
    let net = Network::build(&small_spec(), 8, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path()).unwrap();
    let back = Network::load(dir.path()).unwrap();
    for (a, b) in net.parameters().iter().zip(back.parameters()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn kernel2d_fixture_layers_load_as_2d() {
    let spec = small_spec();
    let m = synthetic_encoder_2d(&spec, 1).unwrap();
    for l in m.layers() {
        let k: Kernel2D = l.to_kernel2d().unwrap();
        assert_eq!(k.kernels().shape().len(), 4);
    }
}
