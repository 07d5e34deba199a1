use std::fs;
use std::path::Path;

use tips_core::metrics::{GenderClassifier, TagClassifier};
use tips_core::synth::*;
use tips_core::text::{decode_manyhot, parse_description_text, AttributeSchema};
use tips_core::Error;

fn schema() -> AttributeSchema {
    AttributeSchema::default_synthetic()
}

fn small() -> SynthConfig {
    SynthConfig { samples: 12, test_samples: 4, size: 64, seed: 21 }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = build_dataset(&small(), &schema(), a.path()).unwrap();
    let mb = build_dataset(&small(), &schema(), b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    build_dataset(&SynthConfig { seed: 22, ..small() }, &schema(), c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn splits_keep_identities_apart() {
    let ds = generate_dataset(&small(), &schema()).unwrap();
    assert_eq!(ds.manifest.ids(Split::Train).count(), 8);
    assert_eq!(ds.manifest.ids(Split::Test).count(), 4);
    for split in [Split::Train, Split::Test] {
        for (a, b) in ds.pair_indices(split) {
            assert_eq!(ds.manifest.samples[a].identity, ds.manifest.samples[b].identity);
            assert_eq!(ds.manifest.samples[a].split, split);
            assert_eq!(TagClassifier.label(&ds.samples[a].image), TagClassifier.label(&ds.samples[b].image));
        }
    }
    assert_eq!(ds.pair_indices(Split::Test).len(), 4);
    let train_ids: Vec<usize> = ds.manifest.samples.iter().filter(|e| e.split == Split::Train).map(|e| e.identity).collect();
    assert!(ds.manifest.samples.iter().filter(|e| e.split == Split::Test).all(|e| !train_ids.contains(&e.identity)));
}

#[test]
fn annotations_decode_to_their_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(), &schema()).unwrap();
    ds.save(dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
    assert_eq!(text.lines().count(), 12);
    for (line, s) in text.lines().zip(&ds.samples) {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields[0], s.id);
        assert_eq!(parse_description_text(fields[2], &ds.schema).unwrap(), s.record);
        assert_eq!(decode_manyhot(&s.embedding, &ds.schema).unwrap(), s.record);
    }
}

#[test]
fn saved_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(), &schema()).unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.samples.len(), ds.samples.len());
    for (b, s) in back.samples.iter().zip(&ds.samples) {
        assert_eq!(b.id, s.id);
        let worst = b.image.data.iter().zip(&s.image.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(b.image == s.image, "{}: image differs by {worst}", s.id);
        assert_eq!(b.keypoints, s.keypoints, "{}", s.id);
        assert_eq!(b.record, s.record, "{}", s.id);
        assert_eq!(b.embedding, s.embedding, "{}", s.id);
    }
}

#[test]
fn empty_annotation_file_gives_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join(ANNOTATIONS_FILE);
    fs::write(&ann, "").unwrap();
    assert!(load_dfpass(&ann, dir.path(), &schema()).unwrap().is_empty());
}

#[test]
fn wrong_vector_length_is_a_schema_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join(ANNOTATIONS_FILE);
    fs::write(&ann, "s000000\t1,0,1\ta sentence\n").unwrap();
    assert!(matches!(load_dfpass(&ann, dir.path(), &schema()), Err(Error::SchemaMismatch(_))));
}

#[test]
fn malformed_vectors_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(), &schema()).unwrap();
    ds.save(dir.path()).unwrap();
    let ann = dir.path().join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&ann).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[0] = lines[0].replacen("\t", "\tx", 1);
    fs::write(&ann, lines.join("\n")).unwrap();
    let loaded = load_dfpass(&ann, &dir.path().join(IMAGES_DIR), &ds.schema).unwrap();
    assert_eq!(loaded.len(), 11);
    assert_eq!(loaded[0].keypoints, ds.samples[1].keypoints);
}

#[test]
fn keypoint_table_round_trips() {
    let ds = generate_dataset(&small(), &schema()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(KEYPOINTS_FILE);
    fs::write(&path, keypoint_table(ds.samples.iter().map(|s| (s.id.as_str(), &s.keypoints)))).unwrap();
    let back = load_keypoint_table(&path, 64, 64).unwrap();
    for s in &ds.samples {
        assert_eq!(back[&s.id], s.keypoints);
    }
}

#[test]
fn facial_sets_are_normalized_and_seeded() {
    let a = facial_sets(50, 3);
    assert_eq!(a.len(), 50);
    assert_eq!(a, facial_sets(50, 3));
    assert_ne!(a, facial_sets(50, 4));
    for v in &a {
        assert_eq!((v[0], v[1]), (0.0, 0.0));
        let max = v.iter().fold(0f64, |m, x| m.max(x.abs()));
        assert!((max - 1.0).abs() < 1e-12);
    }
}
