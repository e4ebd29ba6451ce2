use super::*;
use crate::grid::{token_permutation, GridShape, SpatialTransform};

fn small(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        num_samples: n,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small(20, 7)).unwrap();
    let b = generate(&small(20, 7)).unwrap();
    assert_eq!(a, b);
    let c = generate(&small(20, 8)).unwrap();
    assert_ne!(a.samples[0].image, c.samples[0].image);
}

#[test]
fn samples_do_not_depend_on_dataset_size() {
    let a = generate(&small(5, 3)).unwrap();
    let b = generate(&small(12, 3)).unwrap();
    assert_eq!(a.samples[..], b.samples[..5]);
}

#[test]
fn labels_agree_with_masks() {
    let ds = generate(&small(200, 1)).unwrap();
    for s in &ds.samples {
        let from_mask: Vec<usize> = s.mask.present_classes().iter().map(|&l| l as usize - 1).collect();
        assert_eq!(s.present_classes(), from_mask);
        assert!(!from_mask.is_empty());
        assert!(from_mask.len() <= 3);
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.image.data().iter().all(|&v| (v * 255.0).round() / 255.0 == v));
    }
}

#[test]
fn class_frequency_is_near_uniform() {
    let cfg = SynthConfig {
        num_samples: 1000,
        seed: 0,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let mut counts = vec![0usize; cfg.num_classes];
    for s in &ds.samples {
        for k in s.present_classes() {
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let prior = 1.0 / cfg.num_classes as f64;
    for (k, &c) in counts.iter().enumerate() {
        let share = c as f64 / total as f64;
        assert!(
            (share - prior).abs() <= 0.1 * prior,
            "class {k}: share {share:.4} vs prior {prior}"
        );
    }
}

#[test]
fn rejects_bad_configs() {
    assert!(generate(&SynthConfig { num_classes: 6, ..small(1, 0) }).is_err());
    assert!(generate(&SynthConfig { num_classes: 0, ..small(1, 0) }).is_err());
    assert!(generate(&SynthConfig { min_shapes: 4, ..small(1, 0) }).is_err());
}

#[test]
fn flips_and_rotations_are_exact_group_actions() {
    let s = &generate(&small(3, 4)).unwrap().samples[2];
    let img = &s.image;
    let f = |i: &Tensor, t| augment_image(i, t, 4).unwrap();
    assert_eq!(&f(&f(img, SpatialTransform::FlipH), SpatialTransform::FlipH), img);
    assert_eq!(&f(&f(img, SpatialTransform::FlipV), SpatialTransform::FlipV), img);
    let mut r = img.clone();
    for _ in 0..4 {
        r = f(&r, SpatialTransform::Rot90);
    }
    assert_eq!(&r, img);
    assert_eq!(
        f(&f(img, SpatialTransform::Rot90), SpatialTransform::Rot90),
        f(img, SpatialTransform::Rot180)
    );
    assert_eq!(f(img, SpatialTransform::Rot270), f(&f(img, SpatialTransform::Rot180), SpatialTransform::Rot90));
}

#[test]
fn rotation_changes_rectangular_shape() {
    let img = Tensor::new(vec![1, 2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
    let r = augment_image(&img, SpatialTransform::Rot90, 1).unwrap();
    assert_eq!(r.shape(), &[1, 3, 2]);
    // Counter-clockwise: the right column becomes the top row.
    assert_eq!(r.data(), &[2.0, 5.0, 1.0, 4.0, 0.0, 3.0]);
}

/// Pixel-level augmentation agrees with the token permutation when every
/// pixel carries the id of its patch.
#[test]
fn pixel_augmentation_matches_token_permutation() {
    let p = 4;
    for (h, w) in [(2, 2), (2, 3), (3, 5)] {
        let g = GridShape::new(h, w).unwrap();
        let (ph, pw) = (h * p, w * p);
        let data: Vec<f64> = (0..ph * pw).map(|q| g.index(q / pw / p, q % pw / p) as f64).collect();
        let img = Tensor::new(vec![1, ph, pw], data).unwrap();
        for t in SpatialTransform::PERMUTATIONS {
            let out = augment_image(&img, t, p).unwrap();
            let perm = token_permutation(t, g).unwrap();
            let og = perm.target_grid();
            let ow = og.w() * p;
            for (q, &v) in out.data().iter().enumerate() {
                let tok = og.index(q / ow / p, q % ow / p);
                assert_eq!(v as usize, perm.sigma()[tok], "{t} on {g}");
            }
        }
    }
}

#[test]
fn mask_augmentation_commutes_with_image_augmentation() {
    let ds = generate(&small(10, 9)).unwrap();
    for s in &ds.samples {
        // Encode every pixel's label into a one-channel image, augment both
        // ways and compare pixel by pixel.
        let size = s.mask.height();
        let as_img = Tensor::new(
            vec![1, size, size],
            s.mask.labels().iter().map(|&l| l as f64).collect(),
        )
        .unwrap();
        for t in SpatialTransform::PERMUTATIONS {
            let img = augment_image(&as_img, t, 4).unwrap();
            let mask = augment_mask(&s.mask, t, 4).unwrap();
            for (a, &b) in img.data().iter().zip(mask.labels()) {
                assert_eq!(*a, b as f64);
            }
            let rgb = augment_image(&s.image, t, 4).unwrap();
            assert_eq!(rgb.shape()[1..], [mask.height(), mask.width()]);
        }
    }
}

#[test]
fn resize_preserves_constants_and_keeps_labels_in_range() {
    let s = &generate(&small(1, 2)).unwrap().samples[0];
    let t = SpatialTransform::Resize(GridShape::new(6, 6).unwrap());
    let img = augment_image(&s.image, t, 4).unwrap();
    assert_eq!(img.shape(), &[3, 24, 24]);
    let mask = augment_mask(&s.mask, t, 4).unwrap();
    assert_eq!((mask.height(), mask.width()), (24, 24));
    assert!(mask.labels().iter().all(|&l| l as usize <= 5));
    let flat = Tensor::full(&[3, 32, 32], 0.4);
    let r = augment_image(&flat, t, 4).unwrap();
    assert!(r.data().iter().all(|v| (v - 0.4).abs() < 1e-15));
    let same = SpatialTransform::Resize(GridShape::new(8, 8).unwrap());
    assert_eq!(augment_image(&s.image, same, 4).unwrap(), s.image);
    assert_eq!(augment_mask(&s.mask, same, 4).unwrap(), s.mask);
}

#[test]
fn dataset_directory_round_trip() {
    let ds = generate(&small(6, 11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let index = read_index(dir.path()).unwrap();
    assert_eq!(index.len(), 6);
    assert_eq!(index[3].image, "images/00003.ppm");
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    let header = std::fs::read(dir.path().join("images/00000.ppm")).unwrap();
    assert_eq!(&header[..2], b"P6");
    let header = std::fs::read(dir.path().join("masks/00000.pgm")).unwrap();
    assert_eq!(&header[..2], b"P5");
}

#[test]
fn corrupted_index_is_rejected() {
    let ds = generate(&small(2, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let path = dir.path().join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap();
    let mut entry: IndexEntry = serde_json::from_str(first).unwrap();
    entry.labels = if entry.labels == [4] { vec![0] } else { vec![4] };
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[0] = serde_json::to_string(&entry).unwrap();
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(AcrError::Format(_))));
}
