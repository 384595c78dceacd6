use std::collections::HashSet;

use proptest::prelude::*;
use sardino::geodata::{
    band_of, geographic_band_split, load_dataset, normalize_channels, read_tile, split_of, stack_seasonal_channels,
    subsample_fraction, synthesize_dataset, synthesize_tile, unstack_seasonal_channels, write_dataset, write_tile,
    RasterTile, Split, SynthConfig, NUM_CLASSES,
};
use sardino::{Error, Tensor};

fn plane(v: f32) -> Tensor {
    Tensor::from_fn([3, 2], |i| v + i as f32 * 0.5)
}

#[test]
fn seasonal_stack_layout() {
    let vv: Vec<Tensor> = (0..4).map(|s| plane(-5.0 - s as f32)).collect();
    let vh: Vec<Tensor> = (0..4).map(|s| plane(-12.0 - s as f32)).collect();
    let (stack, names) = stack_seasonal_channels(&vv, &vh).unwrap();
    assert_eq!(stack.shape(), &[12, 3, 2]);
    assert_eq!(names.len(), 12);
    assert_eq!(names[2], "s1_vv-vh");
    assert_eq!(stack.data()[2 * 6], 7.0);
    let (same, _) = stack_seasonal_channels(&vv, &vv).unwrap();
    for s in 0..4 {
        assert!(same.data()[(3 * s + 2) * 6..(3 * s + 3) * 6].iter().all(|&v| v == 0.0));
    }
    let (bv, bh) = unstack_seasonal_channels(&stack).unwrap();
    assert_eq!((bv, bh), (vv.clone(), vh.clone()));
    let wrong = vec![Tensor::zeros([2, 2]); 4];
    assert!(matches!(stack_seasonal_channels(&vv, &wrong), Err(Error::Data(_))));
}

#[test]
fn thousand_uniform_tiles_split_60_20_20() {
    let tiles = synthesize_dataset(&SynthConfig { size: 4, ..SynthConfig::default() }, 1000).unwrap();
    let lats: Vec<f64> = tiles.iter().map(|t| t.lat).collect();
    let s = geographic_band_split(&lats, 1.0).unwrap();
    let (tr, va, te) = s.fractions();
    assert!((0.58..=0.62).contains(&tr), "{tr}");
    assert!((0.18..=0.22).contains(&va), "{va}");
    assert!((0.18..=0.22).contains(&te), "{te}");
}

#[test]
fn split_degenerate_and_adjacent_cases() {
    let one_band = [40.1, 40.5, 40.9];
    let s = geographic_band_split(&one_band, 1.0).unwrap();
    assert!(s.splits.iter().all(|&x| x == s.splits[0]));
    assert_eq!(split_of(52.30, 1.0), split_of(52.31, 1.0));
    assert!(geographic_band_split(&[], 1.0).is_err());
    assert!(matches!(geographic_band_split(&[1.0], 0.0), Err(Error::Config(_))));
}

#[test]
fn subsample_rounding_and_nesting() {
    assert_eq!(subsample_fraction(10, 1.0, 3).unwrap(), (0..10).collect::<Vec<_>>());
    assert_eq!(subsample_fraction(5000, 0.001, 3).unwrap().len(), 5);
    assert_eq!(subsample_fraction(100, 0.001, 3).unwrap().len(), 1);
    let a: HashSet<_> = subsample_fraction(5000, 0.001, 7).unwrap().into_iter().collect();
    let b: HashSet<_> = subsample_fraction(5000, 0.01, 7).unwrap().into_iter().collect();
    let c: HashSet<_> = subsample_fraction(5000, 0.1, 7).unwrap().into_iter().collect();
    assert!(a.is_subset(&b) && b.is_subset(&c));
    for f in [0.0, -0.1, 1.5] {
        assert!(matches!(subsample_fraction(10, f, 0), Err(Error::Config(_))));
    }
}

#[test]
fn label_histogram_covers_all_classes() {
    let tiles = synthesize_dataset(&SynthConfig::default(), 100).unwrap();
    let mut seen = [0usize; NUM_CLASSES];
    for t in &tiles {
        for &l in t.labels.as_ref().unwrap() {
            seen[l as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
}

#[test]
fn normalization_uses_train_statistics_only() {
    let cfg = SynthConfig { size: 8, ..SynthConfig::default() };
    let mut tiles = synthesize_dataset(&cfg, 40).unwrap();
    let lats: Vec<f64> = tiles.iter().map(|t| t.lat).collect();
    let split = geographic_band_split(&lats, 1.0).unwrap();
    let (train, test) = (split.indices(Split::Train), split.indices(Split::Test));
    for &i in &test {
        tiles[i].channels = tiles[i].channels.map(|v| v + 100.0);
    }
    normalize_channels(&mut tiles, &train).unwrap();
    let stats = |idx: &[usize]| {
        let vals: Vec<f64> = idx.iter().flat_map(|&i| tiles[i].channels.data()[..64].iter().map(|&v| v as f64)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        (m, s)
    };
    let (m, s) = stats(&train);
    assert!(m.abs() < 1e-4, "{m}");
    assert!((s - 1.0).abs() < 1e-3, "{s}");
    let (shifted, _) = stats(&test);
    assert!(shifted > 10.0, "test tiles must keep their shift: {shifted}");
}

#[test]
fn constant_channel_becomes_zero() {
    let mk = |lat| RasterTile::new(Tensor::from_fn([1, 2, 2], |_| 3.5), 0.0, lat, None, vec!["c".into()]).unwrap();
    let mut tiles = vec![mk(1.0), mk(2.0)];
    normalize_channels(&mut tiles, &[0, 1]).unwrap();
    assert!(tiles.iter().all(|t| t.channels.data().iter().all(|&v| v == 0.0)));
    let mut single = vec![mk(1.0)];
    assert!(normalize_channels(&mut single, &[0]).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = std::env::temp_dir().join(format!("sardino-geodata-{}", std::process::id()));
    let tiles = synthesize_dataset(&SynthConfig { size: 8, ..SynthConfig::default() }, 3).unwrap();
    write_dataset(&dir, &tiles).unwrap();
    let manifest = std::fs::read_to_string(dir.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("id,file,lon,lat,split\n"));
    assert_eq!(manifest.lines().filter(|l| l.ends_with(",unassigned")).count(), 3);
    let (entries, back) = load_dataset(&dir).unwrap();
    assert_eq!(back, tiles);
    assert_eq!(entries[1].id, "tile_00001");
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn raster_invariants_enforced() {
    let t = Tensor::zeros([2, 2, 2]);
    assert!(RasterTile::new(t.clone(), 0.0, 0.0, Some(vec![11, 0, 0, 0]), vec!["a".into(), "b".into()]).is_err());
    assert!(RasterTile::new(t.clone(), 0.0, 0.0, None, vec!["a".into()]).is_err());
    assert!(RasterTile::new(t, 0.0, 0.0, Some(vec![0; 3]), vec!["a".into(), "b".into()]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_pure_function_of_latitude(mut lats in prop::collection::vec(-80.0f64..80.0, 1..50), h in 0.1f64..5.0) {
        let a = geographic_band_split(&lats, h).unwrap();
        for (i, &l) in lats.iter().enumerate() {
            prop_assert_eq!(a.splits[i], split_of(l, h));
        }
        let pairs: Vec<(f64, Split)> = lats.iter().copied().zip(a.splits.iter().copied()).collect();
        lats.reverse();
        let b = geographic_band_split(&lats, h).unwrap();
        for (l, s) in pairs {
            let j = lats.iter().position(|&x| x == l).unwrap();
            prop_assert_eq!(b.splits[j], s);
        }
    }

    #[test]
    fn same_band_shares_split(lat in -80.0f64..80.0, d in 0.0f64..1.0) {
        let h = 1.0;
        let other = band_of(lat, h) as f64 * h + d * h * 0.999;
        prop_assert_eq!(split_of(lat, h), split_of(other, h));
    }

    #[test]
    fn nested_subsamples(n in 1usize..400, seed in 0u64..1000, f1 in 0.001f64..1.0, f2 in 0.001f64..1.0) {
        let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
        let a: HashSet<_> = subsample_fraction(n, lo, seed).unwrap().into_iter().collect();
        let b: HashSet<_> = subsample_fraction(n, hi, seed).unwrap().into_iter().collect();
        prop_assert!(a.is_subset(&b));
        prop_assert_eq!(a.len(), ((lo * n as f64).round() as usize).clamp(1, n));
    }

    #[test]
    fn generated_tiles_are_valid_and_round_trip(seed in 0u64..500, index in 0usize..20) {
        let cfg = SynthConfig { seed, size: 8, ..SynthConfig::default() };
        let t = synthesize_tile(&cfg, index, 20).unwrap();
        prop_assert!(t.validate().is_ok());
        prop_assert_eq!(t.num_channels(), 12);
        let mut buf = Vec::new();
        write_tile(&mut buf, &t).unwrap();
        let back = read_tile(&buf[..]).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(synthesize_tile(&cfg, index, 20).unwrap(), t);
    }

    #[test]
    fn seasonal_stack_round_trips(seed in 0u64..1000) {
        let planes: Vec<Tensor> = (0..8).map(|i| Tensor::from_fn([3, 4], |j| ((seed as usize * 31 + i * 7 + j) % 17) as f32 - 8.0)).collect();
        let (stack, _) = stack_seasonal_channels(&planes[..4], &planes[4..]).unwrap();
        let (vv, vh) = unstack_seasonal_channels(&stack).unwrap();
        prop_assert_eq!(&vv[..], &planes[..4]);
        prop_assert_eq!(&vh[..], &planes[4..]);
    }
}
