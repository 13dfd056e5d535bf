use ersm::dataset::{self, Dataset};
use ersm::{checkpoint, pgm};
use ersm_core::data::{generate, GeneratorConfig};
use ersm_core::model::{ModelConfig, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(n: usize) -> Dataset {
    let g = GeneratorConfig { height: 12, width: 12, object_size: 4, seed: 3, ..Default::default() };
    let samples = if n == 0 { Vec::new() } else { generate(&g, n).unwrap() };
    Dataset { classes: g.classes, channels: g.channels, height: g.height, width: g.width, samples }
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let ds = small_dataset(7);
    let bytes = dataset::encode(&ds).unwrap();
    assert_eq!(&bytes[..4], b"ERSD");
    assert_eq!(bytes.len(), 28 + 7 * (12 * 12 * 8 + 2 + 144));
    let back = dataset::decode(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(dataset::encode(&back).unwrap(), bytes);
}

#[test]
fn empty_dataset_is_a_valid_file() {
    let ds = small_dataset(0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ersd");
    dataset::write(&path, &ds).unwrap();
    assert!(dataset::read(&path).unwrap().samples.is_empty());
}

#[test]
fn corrupted_dataset_headers_are_rejected() {
    let good = dataset::encode(&small_dataset(3)).unwrap();
    let mut count = good.clone();
    count[8..12].copy_from_slice(&4u32.to_le_bytes());
    assert!(dataset::decode(&count).unwrap_err().contains("payload"));
    let mut huge = good.clone();
    huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(dataset::decode(&huge).is_err());
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(dataset::decode(&magic).unwrap_err().contains("magic"));
    assert!(dataset::decode(&good[..good.len() - 1]).is_err());
    let mut label = good.clone();
    let label_at = 28 + 144 * 8;
    label[label_at..label_at + 2].copy_from_slice(&9u16.to_le_bytes());
    assert!(dataset::decode(&label).unwrap_err().contains("label"));
}

#[test]
fn dataset_read_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ersd");
    std::fs::write(&path, b"ERSD").unwrap();
    let err = dataset::read(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("bad.ersd"));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ersm");
    checkpoint::write(&path, &params).unwrap();
    let back = checkpoint::load(&path, &cfg).unwrap();
    assert_eq!(checkpoint::encode(&back).unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(back.backbone, params.backbone);
    assert_eq!(back.head_w, params.head_w);
    assert_eq!(back.mask.w, params.mask.w);
}

#[test]
fn checkpoint_for_another_architecture_is_a_mismatch() {
    let params = ModelParams::init(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ersm");
    checkpoint::write(&path, &params).unwrap();
    let other = ModelConfig { classes: 5, ..ModelConfig::default() };
    assert_eq!(checkpoint::load(&path, &other).unwrap_err().exit_code(), 1);
    let bytes = checkpoint::encode(&params).unwrap();
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(checkpoint::decode(&trailing).is_err());
}

#[test]
fn pgm_files_are_well_formed() {
    let values: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let bytes = pgm::encode(&values, 3, 4).unwrap();
    assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
    let (w, h, px) = pgm::decode(&bytes).unwrap();
    assert_eq!((w, h), (4, 3));
    assert_eq!(px[0], 0);
    assert_eq!(px[11], 255);
    assert!(pgm::encode(&values, 2, 2).is_err());
    assert!(pgm::decode(&bytes[..bytes.len() - 1]).is_err());
}
