use std::fs;

use planar3d::model::{synthetic_encoder_2d, NetworkSpec, WidthScale};
use planar3d::tensor::{conv2d, conv3d, Kernel2D, Padding};
use planar3d::transfer::{
    count_params, flatten_planar, load_manifest, map_kernel_2d_to_3d, map_weightset, save_manifest,
    LayerKind, ManifestLayer, WeightManifest, MANIFEST_FILE,
};
use planar3d::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_2d_manifest(rng: &mut ChaCha8Rng, layers: usize) -> WeightManifest {
    let mut m = WeightManifest::new();
    for i in 0..layers {
        let shape = vec![rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=3)];
        let n: usize = shape.iter().product();
        let kernels = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let biases = (0..shape[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        m.push(ManifestLayer::new(format!("layer{i}"), LayerKind::Conv2d, shape, kernels, biases).unwrap())
            .unwrap();
    }
    m
}

#[test]
fn mapping_preserves_counts_biases_and_elements() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.gen_range(0..=6);
        let m = random_2d_manifest(&mut rng, n);
        let mapped = map_weightset(&m).unwrap();
        assert_eq!(count_params(&mapped), count_params(&m));
        assert_eq!(mapped.len(), m.len());
        for (a, b) in m.layers().iter().zip(mapped.layers()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.bias_bytes(), b.bias_bytes());
            assert_eq!(a.kernels, b.kernels);
            assert_eq!(b.kind, LayerKind::Conv3d);
            assert!(b.is_planar());
            assert_eq!(b.shape, [&a.shape[..2], &[1], &a.shape[2..]].concat());
        }
        assert!(matches!(map_weightset(&mapped), Err(Error::Contract(_))) || mapped.is_empty());
    }
}

#[test]
fn count_examples() {
    let layer = ManifestLayer::new("c", LayerKind::Conv2d, vec![2, 3, 3, 3], vec![0.0; 54], vec![0.0; 2]).unwrap();
    assert_eq!(count_params(&WeightManifest::from_layers(vec![layer]).unwrap()), 56);
    assert_eq!(count_params(&WeightManifest::new()), 0);
    assert!(map_weightset(&WeightManifest::new()).unwrap().is_empty());
}

#[test]
fn vgg16_manifest_maps_to_thirteen_planar_layers() {
    let spec = NetworkSpec::vgg16_unet(WidthScale::FULL, [16, 256, 256]);
    let m = synthetic_encoder_2d(&spec, 0).unwrap();
    assert_eq!(m.len(), 13);
    let channels: Vec<usize> = m.layers().iter().map(|l| l.shape[0]).collect();
    assert_eq!(channels, [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]);
    let mapped = map_weightset(&m).unwrap();
    assert!(mapped.layers().iter().all(|l| l.shape.len() == 5 && l.shape[2] == 1));
    // 14,714,688 is the parameter count of the VGG-16 convolutional stack.
    assert_eq!(count_params(&mapped), 14_714_688);
}

#[test]
fn mapped_kernel_is_slice_equivalent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = Kernel2D::new(
            Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-1.0..1.0)),
            (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = map_kernel_2d_to_3d(&k);
        assert_eq!(flatten_planar(&w).unwrap(), k);
        let depth = rng.gen_range(1..=16);
        let x = Tensor::from_fn(&[1, cin, depth, 7, 6], |_| rng.gen_range(-1.0..1.0));
        let y = conv3d(&x, &w).unwrap();
        for d in 0..depth {
            let expect = conv2d(&x.depth_slice(d).unwrap(), &k, Padding::Same).unwrap();
            for (a, b) in y.depth_slice(d).unwrap().data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn save_load_roundtrip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dir = tempfile::tempdir().unwrap();
    let m = map_weightset(&random_2d_manifest(&mut rng, 3)).unwrap();
    save_manifest(&m, dir.path()).unwrap();
    let loaded = load_manifest(dir.path()).unwrap();
    assert_eq!(loaded, m);
    let again = tempfile::tempdir().unwrap();
    save_manifest(&loaded, again.path()).unwrap();
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(dir.path().join(&name)).unwrap(), fs::read(again.path().join(&name)).unwrap());
    }
}

fn first_blob(dir: &std::path::Path) -> std::path::PathBuf {
    let mut blobs: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    blobs.sort();
    blobs.remove(0)
}

#[test]
fn corrupted_and_truncated_blobs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_2d_manifest(&mut rng, 2);

    let dir = tempfile::tempdir().unwrap();
    save_manifest(&m, dir.path()).unwrap();
    let blob = first_blob(dir.path());
    let mut bytes = fs::read(&blob).unwrap();
    bytes[1] ^= 0x40;
    fs::write(&blob, &bytes).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(Error::Integrity(_))));

    let dir = tempfile::tempdir().unwrap();
    save_manifest(&m, dir.path()).unwrap();
    let blob = first_blob(dir.path());
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    save_manifest(&m, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), text.replace("planar3d-weights", "other")).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(Error::Format(_))));
}
