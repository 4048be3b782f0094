use planar3d::pipeline::{
    binarize, compose, decompose, keep_ranges, normalize_scan, read_mask, read_volume, resample,
    write_mask, write_volume, MaskVolume, ThresholdMode, Volume,
};
use planar3d::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(rng: &mut ChaCha8Rng, extents: [usize; 3]) -> Volume {
    let n = extents.iter().product();
    Volume::new(extents, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn compose_inverts_decompose(
        seed in any::<u64>(),
        half_window in 1usize..=12,
        stride_frac in 0.0f64..1.0,
        steps in 0usize..=6,
        h in 1usize..=5,
        w in 1usize..=5,
    ) {
        let window = 2 * half_window;
        let stride = 2 * (1 + (stride_frac * half_window as f64) as usize).min(half_window);
        let depth = window + steps * stride;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_volume(&mut rng, [depth, h, w]);
        let ws = decompose(&v, window, stride).unwrap();
        prop_assert_eq!(ws.len(), steps + 1);
        let ranges = ws.keep_ranges();
        prop_assert_eq!(ranges.iter().map(|(a, b)| b - a + 1).sum::<usize>(), depth);
        // Global slices claimed by consecutive windows are contiguous and disjoint.
        let mut next = 1;
        for (win, (a, b)) in ws.windows.iter().zip(&ranges) {
            prop_assert_eq!(win.start + a - 1, next);
            next = win.start + b;
        }
        prop_assert_eq!(next, depth + 1);
        for pair in ws.windows.windows(2) {
            prop_assert_eq!(pair[1].start - pair[0].start, stride);
        }
        prop_assert_eq!(compose(&ws).unwrap(), v);
    }
}

#[test]
fn default_window_layout() {
    let v = Volume::from_fn([256, 2, 3], |d, h, w| (d * 6 + h * 3 + w) as f32);
    let ws = decompose(&v, 16, 8).unwrap();
    assert_eq!(ws.len(), 31);
    let r = keep_ranges(31, 16, 8);
    assert_eq!(r[0], (1, 12));
    assert!(r[1..30].iter().all(|&x| x == (5, 12)));
    assert_eq!(r[30], (5, 16));
    assert_eq!(compose(&ws).unwrap(), v);
}

#[test]
fn inferred_windows_are_recomposed_from_their_centres() {
    let v = Volume::from_fn([32, 1, 1], |d, _, _| d as f32);
    // Tag every slab with its window index, then check which window supplied each slice.
    let ws = decompose(&v, 16, 8).unwrap().map_slabs(|w| Ok(w.slab.map(|_| w.index as f32))).unwrap();
    let out = compose(&ws).unwrap();
    let owners: Vec<f32> = out.data().to_vec();
    let expected: Vec<f32> = (0..32).map(|d| if d < 12 { 1.0 } else if d < 20 { 2.0 } else { 3.0 }).collect();
    assert_eq!(owners, expected);
}

#[test]
fn normalization_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_volume(&mut rng, [4, 5, 6]);
    let n = normalize_scan(&v).unwrap();
    let (lo, hi) = n.min_max();
    assert_eq!((lo, hi), (-1.0, 1.0));
    let again = normalize_scan(&n).unwrap();
    for (a, b) in again.data().iter().zip(n.data()) {
        assert!((a - b).abs() <= 1e-7);
    }
    for i in 0..v.data().len() {
        for j in 0..v.data().len() {
            if v.data()[i] < v.data()[j] {
                assert!(n.data()[i] <= n.data()[j]);
            }
        }
    }
}

#[test]
fn literal_binarization_equals_threshold_one_sixteenth() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut data: Vec<f32> = (0..512).map(|_| rng.gen_range(0.0..1.0)).collect();
        data[0] = 0.0;
        data[1] = 1.0;
        let v = Volume::new([8, 8, 8], data).unwrap();
        let literal = binarize(&v, ThresholdMode::Literal).unwrap();
        let fixed = binarize(&v, ThresholdMode::Fixed(0.0625)).unwrap();
        assert_eq!(literal, fixed);
    }
}

#[test]
fn fixed_binarization_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Volume::new([4, 4, 4], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let mut last = usize::MAX;
    for t in [0.0, 0.1, 0.3, 0.5, 0.9, 1.1] {
        let n = binarize(&v, ThresholdMode::Fixed(t)).unwrap().positives();
        assert!(n <= last);
        last = n;
    }
    assert_eq!(last, 0);
}

/// Quadratic B-spline basis.
fn beta2(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        0.5 * (1.5 - a) * (1.5 - a)
    } else {
        0.0
    }
}

/// Interpolating quadratic spline of `s`, extended point-symmetrically by `margin`
/// samples, solved as a dense linear system and evaluated at `x`.
fn dense_spline(s: &[f64], margin: usize, xs: &[f64]) -> Vec<f64> {
    let n = s.len() as isize;
    let ext = |i: isize| -> f64 {
        let mut i = i;
        let mut sign = 1.0;
        let mut offset = 0.0;
        // Point reflection about the first and last samples.
        loop {
            if i < 0 {
                offset += sign * 2.0 * s[0];
                sign = -sign;
                i = -i;
            } else if i >= n {
                offset += sign * 2.0 * s[(n - 1) as usize];
                sign = -sign;
                i = 2 * (n - 1) - i;
            } else {
                return offset + sign * s[i as usize];
            }
        }
    };
    let m = margin as isize;
    let len = (n + 2 * m) as usize;
    let mut a = vec![vec![0.0; len]; len];
    let mut rhs: Vec<f64> = (0..len as isize).map(|k| ext(k - m)).collect();
    for (r, row) in a.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = beta2(r as f64 - c as f64);
        }
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..len {
        let p = (col..len).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        rhs.swap(col, p);
        for r in col + 1..len {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..len {
                    a[r][c] -= f * a[col][c];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut coef = vec![0.0; len];
    for r in (0..len).rev() {
        let tail: f64 = (r + 1..len).map(|c| a[r][c] * coef[c]).sum();
        coef[r] = (rhs[r] - tail) / a[r][r];
    }
    xs.iter()
        .map(|&x| (0..len).map(|k| coef[k] * beta2(x + m as f64 - k as f64)).sum())
        .collect()
}

#[test]
fn resample_matches_dense_spline_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let n_in = rng.gen_range(3..=12);
        let n_out = rng.gen_range(2..=20);
        let line: Vec<f32> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = Volume::new([1, 1, n_in], line.clone()).unwrap();
        let got = resample(&v, [1, 1, n_out]).unwrap();
        let xs: Vec<f64> = (0..n_out).map(|o| (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).collect();
        let s: Vec<f64> = line.iter().map(|&x| x as f64).collect();
        let expect = dense_spline(&s, 24, &xs);
        for (a, b) in got.data().iter().zip(&expect) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn resample_ramp_halves_slope() {
    let v = Volume::from_fn([2, 3, 8], |_, _, w| w as f32);
    let r = resample(&v, [2, 3, 16]).unwrap();
    for d in 0..2 {
        for h in 0..3 {
            for o in 0..16 {
                let expect = o as f32 / 2.0 - 0.25;
                assert!((r.get(d, h, o) - expect).abs() <= 1e-5, "{} vs {expect}", r.get(d, h, o));
            }
        }
    }
    let ramp = Volume::from_fn([6, 4, 5], |d, h, w| 0.5 * d as f32 - 2.0 * h as f32 + w as f32);
    let r = resample(&ramp, [9, 7, 3]).unwrap();
    let map = |o: usize, n_in: usize, n_out: usize| (o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5;
    for d in 0..9 {
        for h in 0..7 {
            for w in 0..3 {
                let expect = 0.5 * map(d, 6, 9) - 2.0 * map(h, 4, 7) + map(w, 5, 3);
                assert!((r.get(d, h, w) - expect).abs() <= 1e-4);
            }
        }
    }
    assert!(matches!(resample(&ramp, [0, 1, 1]), Err(Error::Geometry(_))));
}

#[test]
fn volume_files_roundtrip_on_disk() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir = tempfile::tempdir().unwrap();
    let v = random_volume(&mut rng, [3, 4, 5]);
    write_volume(&dir.path().join("v.pv3d"), &v).unwrap();
    let back = read_volume(&dir.path().join("v.pv3d")).unwrap();
    assert_eq!(back.data(), v.data());
    let m = MaskVolume::new([3, 4, 5], (0..60).map(|i| (i % 7 == 0) as u8).collect()).unwrap();
    write_mask(&dir.path().join("m.pv3d"), &m).unwrap();
    let bytes = std::fs::read(dir.path().join("m.pv3d")).unwrap();
    assert_eq!(&bytes[..4], b"PV3D");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
    assert_eq!(bytes[18], 1);
    assert_eq!(read_mask(&dir.path().join("m.pv3d")).unwrap(), m);
    assert!(matches!(read_mask(&dir.path().join("v.pv3d")), Err(Error::Format(_))));
}
