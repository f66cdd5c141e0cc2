mod common;

use std::path::Path;

use samic::dataset::{benchmark_split_classes, load_split_manifest, Dataset, Manifest, ManifestItem, MANIFEST_FILE};
use samic::Error;

/// One image, prompt and mask file shared by every item.
fn shared_files(dir: &Path) {
    let tmp = dir.join("src");
    let ds = common::small_dataset(&tmp, 2, 2, 1, 32, 0);
    let it = &ds.items[0];
    for (from, to) in [(&it.image, "img.png"), (&it.prompts, "p.json"), (&it.mask, "m.png")] {
        std::fs::copy(from, dir.join(to)).unwrap();
    }
}

fn item(id: &str, class: &str, split: &str) -> ManifestItem {
    ManifestItem { id: id.into(), class: class.into(), split: split.into(), image: "img.png".into(), prompts: "p.json".into(), mask: "m.png".into() }
}

fn write(dir: &Path, m: &Manifest) -> std::path::PathBuf {
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, serde_json::to_string(m).unwrap()).unwrap();
    p
}

fn problems(r: samic::Result<Dataset>) -> Vec<String> {
    match r {
        Err(Error::Dataset(p)) => p,
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn fss_layout_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    shared_files(tmp.path());
    let mut classes = Vec::new();
    let mut items = Vec::new();
    for (split, n) in benchmark_split_classes("fss-1000").unwrap() {
        for c in 0..n {
            let class = format!("{split}-{c}");
            items.push(item(&format!("{class}-a"), &class, split));
            classes.push(class);
        }
    }
    assert_eq!(classes.len(), 1000);
    let path = write(tmp.path(), &Manifest { classes, items });
    let ds = load_split_manifest(&path, Some("fss-1000")).unwrap();
    assert_eq!(ds.class_index("train").len(), 520);
    assert_eq!(ds.class_index("val").len(), 240);
    assert_eq!(ds.class_index("test").len(), 240);
    // A directory works as well as the file.
    assert!(load_split_manifest(tmp.path(), None).is_ok());
}

#[test]
fn wrong_benchmark_counts_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    shared_files(tmp.path());
    let m = Manifest { classes: vec!["a".into(), "b".into()], items: vec![item("1", "a", "train"), item("2", "b", "test")] };
    let path = write(tmp.path(), &m);
    let p = problems(load_split_manifest(&path, Some("fss-1000")));
    assert_eq!(p.len(), 3);
    assert!(p[0].contains("train split has 1 classes, expected 520"));
    assert!(problems(load_split_manifest(&path, Some("pascal-9i")))[0].contains("unknown benchmark"));
}

#[test]
fn overlapping_classes_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    shared_files(tmp.path());
    let m = Manifest {
        classes: vec!["cat".into(), "dog".into(), "cow".into()],
        items: vec![item("1", "cat", "train"), item("2", "cat", "test"), item("3", "dog", "train"), item("4", "cow", "val"), item("5", "cow", "train")],
    };
    let p = problems(load_split_manifest(&write(tmp.path(), &m), None));
    assert_eq!(p.len(), 1);
    assert!(p[0].contains("cat (test, train)"), "{}", p[0]);
    assert!(p[0].contains("cow (train, val)"), "{}", p[0]);
    assert!(!p[0].contains("dog"));
}

#[test]
fn every_problem_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    shared_files(tmp.path());
    let mut missing = item("2", "a", "train");
    missing.image = "gone.png".into();
    missing.mask = "gone-too.png".into();
    let m = Manifest {
        classes: vec!["a".into(), "a".into()],
        items: vec![item("1", "a", "train"), missing, item("1", "zebra", "holdout")],
    };
    let p = problems(load_split_manifest(&write(tmp.path(), &m), None));
    let has = |s: &str| p.iter().any(|x| x.contains(s));
    assert!(has("class list contains duplicates"));
    assert!(has("missing image file"));
    assert!(has("missing mask file"));
    assert!(has("duplicate item id \"1\""));
    assert!(has("undeclared class \"zebra\""));
    assert!(has("unknown split \"holdout\""));
    assert_eq!(p.len(), 6, "{p:#?}");
}

#[test]
fn synthetic_items_load_consistently() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(tmp.path(), 4, 3, 1, 48, 9);
    assert_eq!(ds.items.len(), 12);
    assert_eq!(ds.class_index("test").len(), 1);
    for it in &ds.items {
        let l = ds.load(it).unwrap();
        assert_eq!((l.image.width(), l.image.height()), (48, 48));
        assert_eq!(l.prompts.instances.len(), 1);
        let [x, y] = l.prompts.instances[0][0];
        assert!(l.mask.get(x as usize, y as usize), "prompt of {} lies outside its mask", it.id);
    }
    // Generation is deterministic.
    let again = common::small_dataset(&tmp.path().join("again"), 4, 3, 1, 48, 9);
    for (a, b) in ds.items.iter().zip(&again.items) {
        assert_eq!(std::fs::read(&a.image).unwrap(), std::fs::read(&b.image).unwrap());
    }
}

#[test]
fn mismatched_sizes_fail_to_load() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = common::small_dataset(tmp.path(), 2, 2, 1, 32, 1);
    let other = common::small_dataset(&tmp.path().join("big"), 2, 2, 1, 40, 1);
    std::fs::copy(&other.items[0].mask, &ds.items[0].mask).unwrap();
    assert!(matches!(ds.load(&ds.items[0]), Err(Error::Format { .. })));
}
