use anchornet::io::weights::{load_anchornet, save_anchornet};
use anchornet::io::{generate_samples, load_dataset, write_dataset, Raster, SynthConfig, WeightFile};
use anchornet::model::{AnchorNetModel, ArchSpec};

#[test]
fn default_weights_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.anet");
    let second = dir.path().join("b.anet");
    let m = AnchorNetModel::build(&ArchSpec::anchornet(4), 3).unwrap();
    save_anchornet(&m, &first).unwrap();
    let back = load_anchornet(&first).unwrap();
    save_anchornet(&back, &second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(back.rf_state().rf(), 95);
    let bytes = std::fs::read(&first).unwrap();
    assert!(WeightFile::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn raster_round_trip() {
    for channels in [1, 3] {
        let pixels: Vec<u8> = (0..5 * 7 * channels).map(|i| (i * 37 % 256) as u8).collect();
        let r = Raster::new(7, 5, channels, pixels).unwrap();
        let back = Raster::decode(&r.encode()).unwrap();
        assert_eq!(back, r);
    }
    let with_comment = b"P5\n# note\n2 1\n255\n\x01\x02";
    assert_eq!(Raster::decode(with_comment).unwrap().pixels, vec![1, 2]);
    assert!(Raster::decode(b"P5\n2 1\n65535\n\x00\x01\x00\x02").is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_samples(&SynthConfig::default(), 3, 2, 5).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path(), Some(3)).unwrap();
    assert_eq!(back.len(), 6);
    for (a, b) in ds.items.iter().zip(&back.items) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.object_box, b.object_box);
        assert_eq!(a.image.data(), b.image.data());
    }
}
