mod common;

use std::fs;
use std::io::BufReader;

use common::{fixture, randomize, small_config};
use stk_core::data::{load_bundle, save_bundle};
use stk_core::numerics::ParamStore;
use stk_core::pipeline::{read_examples, write_examples};
use stk_core::Error;

#[test]
fn bundle_survives_disk_and_rejects_truncation() {
    let f = fixture(small_config());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.bin");
    save_bundle(&path, &f.tkg, &f.split).unwrap();
    let (tkg, split) = load_bundle(&path).unwrap();
    assert_eq!(tkg.facts(), f.tkg.facts());
    assert_eq!(split, f.split);

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_bundle(&path), Err(Error::Format { .. })));
}

#[test]
fn examples_round_trip_through_jsonl() {
    let f = fixture(small_config());
    let examples = f.examples();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_examples(&mut fs::File::create(&path).unwrap(), &examples).unwrap();
    let back = read_examples(BufReader::new(fs::File::open(&path).unwrap()), "train.jsonl").unwrap();
    assert_eq!(back.len(), examples.len());
    for (a, b) in back.iter().zip(&examples) {
        assert_eq!(a.instruction, b.instruction);
        assert_eq!(a.graph.h0.data(), b.graph.h0.data());
    }
}

#[test]
fn checkpoints_restore_every_parameter() {
    let f = fixture(small_config());
    let mut model = f.model();
    randomize(model.store_mut(), "", 0.5, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.store().save(&path).unwrap();
    let back = ParamStore::load(&path).unwrap();
    for (id, p) in model.store().iter() {
        assert_eq!(back.get(id).name, p.name);
        assert_eq!(back.value(id).data(), model.store().value(id).data());
    }
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let f = fixture(small_config());
    let model = f.model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.store().save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(ParamStore::load(&path), Err(Error::Format { .. })));
}
