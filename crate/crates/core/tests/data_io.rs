mod common;

use std::fs;

use common::*;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgcir::data::{
    format_triplets, ingest_triplet_file, read_gallery, write_gallery, write_triplet_file, TripletFormat,
};
use tgcir::Error;

#[test]
fn sampled_triplets_survive_a_file_round_trip() {
    let world = small_world(3);
    let mut ts = small_triplets(&world, 60, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in ts.iter_mut().step_by(3) {
        let mut subset = index::sample(&mut rng, world.gallery.len(), 6).into_vec();
        if !subset.contains(&t.target_id) {
            subset[0] = t.target_id;
        }
        t.subset = Some(subset);
    }
    ts[1].changed_attributes = None;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("triplets.tsv");
    write_triplet_file(&path, &ts, &world.gallery).unwrap();
    let format = TripletFormat { text_dim: world.text_dim() };
    let back = ingest_triplet_file(&path, &format, &world.gallery).unwrap();
    assert_eq!(back, ts);
}

#[test]
fn non_integral_payloads_round_trip_exactly() {
    let world = small_world(5);
    let mut ts = small_triplets(&world, 5, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in &mut ts {
        t.modification.payload.iter_mut().for_each(|v| *v = rng.random_range(-1e3..1e3));
    }
    let text = format_triplets(&ts, &world.gallery).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tsv");
    fs::write(&path, text).unwrap();
    let back = ingest_triplet_file(&path, &TripletFormat { text_dim: world.text_dim() }, &world.gallery).unwrap();
    assert_eq!(back, ts);
}

#[test]
fn gallery_manifest_round_trip() {
    let world = small_world(7);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_gallery(dir.path(), &world.gallery).unwrap();
    let back = read_gallery(&manifest, Some(world.spec.image_dim)).unwrap();
    assert_eq!(back, world.gallery);
    assert!(matches!(read_gallery(&manifest, Some(3)), Err(Error::Parse { .. })));
}

#[test]
fn ingestion_errors_are_descriptive() {
    let world = small_world(8);
    let dir = tempfile::tempdir().unwrap();
    let format = TripletFormat { text_dim: world.text_dim() };
    let path = dir.path().join("t.tsv");

    fs::write(&path, "").unwrap();
    assert!(ingest_triplet_file(&path, &format, &world.gallery).unwrap().is_empty());

    let payload = vec!["0"; world.text_dim()].join(",");
    fs::write(&path, format!("# c\n\nimg_00001\t{payload}\tghost_17\n")).unwrap();
    let err = ingest_triplet_file(&path, &format, &world.gallery).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("ghost_17") && msg.contains(":3"), "{msg}");

    fs::write(&path, format!("img_00001\t{payload},x\timg_00002\n")).unwrap();
    let msg = ingest_triplet_file(&path, &format, &world.gallery).unwrap_err().to_string();
    assert!(msg.contains(":1") && msg.contains("`x`"), "{msg}");

    fs::write(&path, format!("img_00001\t{payload}\timg_00002\tsubset=img_00003,nobody\n")).unwrap();
    let msg = ingest_triplet_file(&path, &format, &world.gallery).unwrap_err().to_string();
    assert!(msg.contains("nobody"), "{msg}");

    let missing = dir.path().join("absent.tsv");
    assert!(matches!(ingest_triplet_file(&missing, &format, &world.gallery), Err(Error::Io { .. })));
}
