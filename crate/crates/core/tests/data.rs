use std::fs;
use std::path::Path;

use aseg::data::*;
use aseg::{Error, Rng, Tensor};
use image::GrayImage;

fn write_gray(path: &Path, size: u32, f: impl Fn(u32, u32) -> u8) {
    let img = GrayImage::from_fn(size, size, |x, y| image::Luma([f(x, y)]));
    img.save(path).unwrap();
}

fn make_dataset(root: &Path, stems: &[&str], size: u32) {
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("masks")).unwrap();
    for s in stems {
        write_gray(&root.join("images").join(format!("{s}.png")), size, |x, y| ((x * 7 + y * 3) % 256) as u8);
        write_gray(&root.join("masks").join(format!("{s}.png")), size, |x, _| if x < size / 2 { 255 } else { 0 });
    }
}

#[test]
fn scan_empty_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(scan_dataset(dir.path()), Err(Error::MissingDirectory(_))));
    fs::create_dir_all(dir.path().join("images")).unwrap();
    assert!(matches!(scan_dataset(dir.path()), Err(Error::MissingDirectory(p)) if p.ends_with("masks")));
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    assert!(scan_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn scan_sorts_and_reports_orphans() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), &["c", "a", "b"], 8);
    let m = scan_dataset(dir.path()).unwrap();
    let stems: Vec<_> = m.entries().iter().map(|e| e.stem.as_str()).collect();
    assert_eq!(stems, ["a", "b", "c"]);
    assert!(m.entries().iter().all(|e| e.split.is_none()));

    write_gray(&dir.path().join("images/zz.png"), 8, |_, _| 0);
    write_gray(&dir.path().join("masks/aa_only.png"), 8, |_, _| 0);
    match scan_dataset(dir.path()) {
        Err(Error::UnmatchedStems(s)) => assert_eq!(s, ["aa_only", "zz"]),
        other => panic!("{other:?}"),
    }
    let msg = scan_dataset(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("zz") && msg.contains("aa_only"));
}

fn synthetic_manifest(n: usize) -> DatasetManifest {
    DatasetManifest::new(
        (0..n)
            .map(|i| ManifestEntry {
                stem: format!("s{i:03}"),
                image: format!("images/s{i:03}.png").into(),
                mask: format!("masks/s{i:03}.png").into(),
                split: None,
            })
            .collect(),
    )
}

#[test]
fn split_protocol_counts() {
    let m = synthetic_manifest(267);
    let s = split(&m, 237, SplitMode::FixedPrefix).unwrap();
    assert_eq!((s.count(Split::Train), s.count(Split::Test)), (237, 30));
    assert_eq!(s.subset(Split::Train).last().unwrap().stem, "s236");
    let sub = split(&m, 67, SplitMode::FixedPrefix).unwrap();
    assert_eq!(sub.count(Split::Train), 67);
    let all = split(&m, 267, SplitMode::FixedPrefix).unwrap();
    assert_eq!(all.count(Split::Test), 0);
    assert!(split(&m, 268, SplitMode::FixedPrefix).is_err());
}

#[test]
fn seeded_split_is_reproducible() {
    let m = synthetic_manifest(40);
    let a = split(&m, 30, SplitMode::Seeded(9)).unwrap();
    let b = split(&m, 30, SplitMode::Seeded(9)).unwrap();
    let c = split(&m, 30, SplitMode::Seeded(10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, split(&m, 30, SplitMode::FixedPrefix).unwrap());
}

#[test]
fn split_counts_holds_out_the_rest() {
    let m = synthetic_manifest(20);
    let s = split_counts(&m, 10, Some(4), SplitMode::FixedPrefix).unwrap();
    assert_eq!((s.count(Split::Train), s.count(Split::Test)), (10, 4));
    assert_eq!(s.entries().iter().filter(|e| e.split.is_none()).count(), 6);
    assert!(split_counts(&m, 10, Some(11), SplitMode::FixedPrefix).is_err());
}

#[test]
fn manifest_tsv_roundtrip() {
    let m = synthetic_manifest(5);
    let s = split_counts(&m, 2, Some(2), SplitMode::Seeded(1)).unwrap();
    let text = s.to_tsv();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
    assert_eq!(m.clone().apply_tsv(&text).unwrap(), s);
    assert!(m.clone().apply_tsv("unknown\ttrain\n").is_err());
    assert!(m.apply_tsv("s000 train\n").is_err());
}

proptest::proptest! {
    #[test]
    fn split_partitions(n in 1usize..60, frac in 0.0f64..=1.0, seed in 0u64..100, seeded in proptest::bool::ANY) {
        let m = synthetic_manifest(n);
        let n_train = ((n as f64) * frac).floor() as usize;
        let mode = if seeded { SplitMode::Seeded(seed) } else { SplitMode::FixedPrefix };
        let s = split(&m, n_train, mode).unwrap();
        proptest::prop_assert_eq!(s.count(Split::Train), n_train);
        proptest::prop_assert_eq!(s.count(Split::Train) + s.count(Split::Test), n);
        proptest::prop_assert!(s.entries().iter().all(|e| e.split.is_some()));
    }
}

#[test]
fn load_pair_normalization() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    write_gray(&dir.path().join("images/a.png"), 16, |_, _| 128);
    write_gray(&dir.path().join("masks/a.png"), 16, |_, _| 255);
    let m = scan_dataset(dir.path()).unwrap();
    let p = load_pair(&m.entries()[0], 16).unwrap();
    let expected = 128.0f32 / 127.5 - 1.0;
    assert!((expected - 0.00392).abs() < 1e-5);
    assert!(p.input.values().iter().all(|&v| v == expected));
    assert!(p.mask.values().iter().all(|&v| v == 1.0));
    assert!(p.target.values().iter().all(|&v| v == 1.0));
    assert_eq!(p.id, "a");
    assert_eq!(load_pair(&m.entries()[0], 16).unwrap(), p);
}

#[test]
fn load_pair_resizes_and_keeps_mask_binary() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), &["x"], 40);
    let m = scan_dataset(dir.path()).unwrap();
    let p = load_pair(&m.entries()[0], 16).unwrap();
    assert_eq!(p.input.dims(), &[1, 1, 16, 16]);
    assert_eq!(p.mask.dims(), p.input.dims());
    assert!(p.input.values().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    assert!(p.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(p.target.values().iter().zip(p.mask.values()).all(|(&t, &m)| t == 2.0 * m - 1.0));
    // left half foreground survives nearest-neighbour resampling
    assert_eq!(p.mask.values().iter().filter(|&&v| v == 1.0).count(), 16 * 8);
}

#[test]
fn load_pair_errors() {
    let dir = tempfile::tempdir().unwrap();
    let e = ManifestEntry {
        stem: "gone".into(),
        image: dir.path().join("gone.png"),
        mask: dir.path().join("gone_mask.png"),
        split: None,
    };
    assert!(load_pair(&e, 16).is_err());
    fs::write(dir.path().join("gone.png"), b"not a png").unwrap();
    assert!(matches!(load_pair(&e, 16), Err(Error::Image { .. })));
}

#[test]
fn save_image_boundaries_and_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let black = dir.path().join("black.png");
    save_image(&Tensor::filled(&[1, 1, 8, 8], -1.0).unwrap(), &black, ValueRange::Signed).unwrap();
    assert!(image::open(&black).unwrap().to_luma8().as_raw().iter().all(|&v| v == 0));
    let white = dir.path().join("white.png");
    save_image(&Tensor::filled(&[1, 1, 8, 8], 1.0).unwrap(), &white, ValueRange::Signed).unwrap();
    assert!(image::open(&white).unwrap().to_luma8().as_raw().iter().all(|&v| v == 255));

    let t = Tensor::uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut Rng::new(3)).unwrap();
    let path = dir.path().join("rt.png");
    save_image(&t, &path, ValueRange::Signed).unwrap();
    let back = load_image(&path, 16).unwrap();
    assert!(t.max_abs_diff(&back).unwrap() <= 1.0 / 255.0 + 1e-6);

    let u = Tensor::uniform(&[16, 16], 0.0, 1.0, &mut Rng::new(4)).unwrap();
    let path = dir.path().join("unit.png");
    save_image(&u, &path, ValueRange::Unit).unwrap();
    let raw = image::open(&path).unwrap().to_luma8();
    let max_err = raw
        .as_raw()
        .iter()
        .zip(u.values())
        .map(|(&b, &v)| (b as f32 / 255.0 - v).abs())
        .fold(0.0f32, f32::max);
    assert!(max_err <= 1.0 / 255.0);

    assert!(save_image(&t, dir.path().join("missing/dir/x.png"), ValueRange::Signed).is_err());
    assert!(save_image(&Tensor::zeros(&[2, 1, 4, 4]).unwrap(), dir.path().join("b.png"), ValueRange::Unit).is_err());
}

#[test]
fn save_strip_layout() {
    let dir = tempfile::tempdir().unwrap();
    let a = Tensor::filled(&[1, 1, 4, 4], -1.0).unwrap();
    let b = Tensor::filled(&[1, 1, 4, 4], 1.0).unwrap();
    let path = dir.path().join("s.png");
    save_strip(&[(&a, ValueRange::Signed), (&b, ValueRange::Unit)], &path).unwrap();
    let img = image::open(&path).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (8, 4));
    assert_eq!(img.get_pixel(0, 0).0[0], 0);
    assert_eq!(img.get_pixel(7, 3).0[0], 255);
}

fn cfg(seed: u64, noise: f64) -> PhantomConfig {
    PhantomConfig { count: 6, image_size: 48, seed, noise_level: noise, ..Default::default() }
}

#[test]
fn phantom_mask_matches_ellipse_oracle() {
    for p in generate_phantoms(&cfg(3, 0.02)).unwrap() {
        let s = 48;
        let mut expected = 0;
        for row in 0..s {
            for col in 0..s {
                let u = (col as f64 + 0.5) / s as f64;
                let v = (row as f64 + 0.5) / s as f64;
                let inside = p.geometry.lungs.iter().any(|e| {
                    ((u - e.cx) / e.rx).powi(2) + ((v - e.cy) / e.ry).powi(2) <= 1.0
                });
                expected += inside as usize;
                assert_eq!(p.mask_bytes[row * s + col] == 255, inside);
            }
        }
        let count = p.pair.mask.values().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(count, expected);
    }
}

#[test]
fn phantom_without_noise_is_piecewise_constant() {
    for p in generate_phantoms(&cfg(4, 0.0)).unwrap() {
        let g = &p.geometry;
        for row in 0..48 {
            for col in 0..48 {
                let want = if g.lungs.iter().any(|e| e.contains_pixel(row, col, 48)) {
                    g.lung_level
                } else if g.body.contains_pixel(row, col, 48) {
                    g.body_level
                } else {
                    g.background_level
                };
                assert_eq!(p.image_bytes[row * 48 + col], want);
            }
        }
        assert!(g.lung_level < g.body_level && g.background_level < g.lung_level);
    }
}

#[test]
fn phantoms_deterministic_and_nondegenerate() {
    let a = generate_phantoms(&PhantomConfig::default()).unwrap();
    let b = generate_phantoms(&PhantomConfig::default()).unwrap();
    assert_eq!(a, b);
    let c = generate_phantoms(&PhantomConfig { seed: 1, ..Default::default() }).unwrap();
    assert_ne!(a[0].image_bytes, c[0].image_bytes);
    for seed in 0..20 {
        for p in generate_phantoms(&PhantomConfig { seed, ..Default::default() }).unwrap() {
            let frac = p.pair.mask.values().iter().sum::<f32>() / p.pair.mask.len() as f32;
            assert!((0.02..=0.60).contains(&frac), "seed {seed} {}: {frac}", p.pair.id);
            assert!(p.pair.input.values().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn phantom_config_validation() {
    assert!(generate_phantoms(&PhantomConfig { count: 0, ..Default::default() }).is_err());
    assert!(generate_phantoms(&PhantomConfig { image_size: 15, ..Default::default() }).is_err());
    assert!(generate_phantoms(&PhantomConfig { lung: (90, 60), ..Default::default() }).is_err());
}

#[test]
fn written_phantoms_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ph = write_phantoms(&cfg(5, 0.02), dir.path()).unwrap();
    let m = scan_dataset(dir.path()).unwrap();
    assert_eq!(m.len(), 6);
    for (p, e) in ph.iter().zip(m.entries()) {
        assert_eq!(e.stem, p.pair.id);
        assert_eq!(load_pair(e, 48).unwrap(), p.pair);
    }
    assert_eq!(m.entries()[0].stem, phantom_stem(0));
}
