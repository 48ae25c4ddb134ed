//! Scene generator envelope, splits, and PPM/PGM ingestion.

use std::collections::HashSet;
use std::path::Path;

use segdecoder::dataset::{
    generate_scene, load_manifest, load_pair, make_split, read_ppm, write_pgm, write_ppm, DatasetSplit, SegSample,
    CURB, LANES, NUM_CLASSES, ROAD,
};
use segdecoder::{Error, Tensor};

fn shares(mask: &[u8]) -> [f64; 4] {
    let mut c = [0usize; 4];
    for &m in mask {
        c[m as usize] += 1;
    }
    c.map(|v| v as f64 / mask.len() as f64)
}

#[test]
fn class_envelope_holds_for_a_thousand_seeds() {
    for seed in 0..1000 {
        let s = generate_scene(seed, 48, 160).unwrap();
        assert!(s.mask.iter().all(|&m| (m as usize) < NUM_CLASSES));
        let sh = shares(&s.mask);
        assert!((0.30..=0.70).contains(&sh[ROAD as usize]), "seed {seed}: {sh:?}");
        assert!(sh[LANES as usize] <= 0.05, "seed {seed}: {sh:?}");
        assert!(sh[CURB as usize] <= 0.05, "seed {seed}: {sh:?}");
        assert!(sh.iter().filter(|&&v| v > 0.0).count() >= 2, "seed {seed}");
        assert!(s.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generation_is_bit_identical_per_seed() {
    for (h, w) in [(48, 160), (96, 320)] {
        let a = generate_scene(42, h, w).unwrap();
        let b = generate_scene(42, h, w).unwrap();
        let bits = |s: &SegSample| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn seed_zero_has_few_lane_pixels() {
    let s = generate_scene(0, 48, 160).unwrap();
    let lanes = s.mask.iter().filter(|&&m| m == LANES).count();
    assert!(lanes as f64 <= 0.05 * (48.0 * 160.0));
}

/// Maximal runs of `class` in one row as (start, length).
fn runs(row: &[u8], class: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut x = 0;
    while x < row.len() {
        if row[x] == class {
            let start = x;
            while x < row.len() && row[x] == class {
                x += 1;
            }
            out.push((start, x - start));
        } else {
            x += 1;
        }
    }
    out
}

#[test]
fn bottom_row_stripes_are_three_pixels_and_curbs_two() {
    let (h, w) = (48, 160);
    for seed in 0..200 {
        let s = generate_scene(seed, h, w).unwrap();
        let row = &s.mask[(h - 1) * w..];
        let lanes = runs(row, LANES);
        assert!(!lanes.is_empty() && lanes.len() <= 3, "seed {seed}: {lanes:?}");
        assert!(lanes.iter().all(|&(_, n)| n == 3), "seed {seed}: {lanes:?}");
        for (start, n) in runs(row, CURB) {
            let clipped = start == 0 || start + n == w;
            assert!(n == 2 || (clipped && n < 2), "seed {seed}: curb run {start}+{n}");
        }
    }
}

#[test]
fn splits_are_disjoint_and_reproducible() {
    let a = make_split(300, 50, 50, 7, 48, 160).unwrap();
    let ids: HashSet<u64> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.id).collect();
    assert_eq!(ids.len(), 400);
    let b = make_split(300, 50, 50, 7, 48, 160).unwrap();
    assert!(a
        .parts()
        .iter()
        .zip(b.parts())
        .all(|(x, y)| x.iter().zip(y).all(|(p, q)| p.mask == q.mask)));
    assert!(make_split(0, 1, 1, 7, 48, 160).is_err());
}

#[test]
fn paper_sized_split_is_accepted() {
    let s = make_split(3016, 981, 1002, 1, 48, 160).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3016, 981, 1002));
}

fn write_bytes(path: &Path, bytes: &[u8]) {
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn tiny_pair_loads_as_all_void() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
    write_bytes(
        &img,
        b"P6\n# comment\n2 2\n255\n\x00\x00\x00\xff\xff\xff\x80\x80\x80\x01\x02\x03",
    );
    write_bytes(&mask, b"P5\n2 2\n255\n\x00\x00\x00\x00");
    let s = load_pair(&img, &mask, 4).unwrap();
    assert_eq!(s.mask, vec![0; 4]);
    assert_eq!(s.image.at(0, 0, 0, 1), 1.0);
    assert_eq!(s.image.at(0, 2, 1, 1), 3.0 / 255.0);
    s.validate(4).unwrap();
}

#[test]
fn out_of_range_label_reports_value_and_position() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
    write_bytes(&img, &[b"P6 3 2 255\n".as_slice(), &[0u8; 18]].concat());
    write_bytes(&mask, &[b"P5 3 2 255\n".as_slice(), &[0, 1, 2, 3, 7, 0]].concat());
    match load_pair(&img, &mask, 4) {
        Err(Error::Label {
            value,
            row,
            col,
            num_classes,
        }) => assert_eq!((value, row, col, num_classes), (7, 1, 1, 4)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_dimensions_are_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
    write_bytes(&img, &[b"P6 2 2 255\n".as_slice(), &[0u8; 12]].concat());
    write_bytes(&mask, &[b"P5 2 1 255\n".as_slice(), &[0u8; 2]].concat());
    assert!(matches!(load_pair(&img, &mask, 4), Err(Error::Ingestion(_))));
    write_bytes(&mask, b"P2 2 2 255\n0 0 0 0");
    assert!(matches!(load_pair(&img, &mask, 4), Err(Error::Ingestion(_))));
}

#[test]
fn generated_samples_survive_a_disk_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_scene(3, 48, 160).unwrap();
    let (img, mask) = (dir.path().join("s.ppm"), dir.path().join("s.pgm"));
    write_ppm(&img, &s.image).unwrap();
    write_pgm(&mask, &s.mask, 48, 160).unwrap();
    let back = load_pair(&img, &mask, 4).unwrap();
    assert_eq!(back.mask, s.mask);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.image), bits(&s.image));
    assert_eq!(bits(&read_ppm(&img).unwrap()), bits(&s.image));
    back.validate(4).unwrap();
}

#[test]
fn split_directories_round_trip_through_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let split = make_split(4, 2, 2, 9, 48, 160).unwrap();
    split.write(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("train.tsv")).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), "train/00000.ppm\ttrain/00000.pgm");
    let back = DatasetSplit::read(dir.path(), 4).unwrap();
    assert_eq!(back.seed, 9);
    for (a, b) in split.parts().iter().zip(back.parts()) {
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(b).all(|(x, y)| x.mask == y.mask && x.image == y.image));
    }
    assert_eq!(load_manifest(&dir.path().join("val.tsv"), 4).unwrap().len(), 2);
}
