mod common;

use common::{rng, uniform};
use physgan::discriminator::{DiscriminatorConfig, DiscriminatorParams};
use physgan::dynsim::{make_dataset, ExcitationFamily, SimConfig};
use physgan::generator::{GeneratorConfig, GeneratorParams};
use physgan::io::{dataset_hash, read_dataset, read_manifest, write_dataset, MANIFEST};
use physgan::nn::{Checkpoint, ParamSet, Tensor};
use proptest::prelude::*;

fn sample_checkpoint() -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.insert("a.matrix", uniform(&mut rng(1), &[3, 4], -2.0, 2.0));
    ck.insert("b.cube", uniform(&mut rng(2), &[2, 2, 5], -1.0, 1.0));
    ck.insert_scalar("c.scalar", 0.125);
    ck
}

#[test]
fn checkpoint_bytes_round_trip() {
    let ck = sample_checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(
        back.names().collect::<Vec<_>>(),
        ["a.matrix", "b.cube", "c.scalar"]
    );
    assert_eq!(back.scalar("c.scalar"), Some(0.125));
}

#[test]
fn insertion_order_does_not_change_bytes() {
    let ck = sample_checkpoint();
    let mut other = Checkpoint::new();
    other.insert_scalar("c.scalar", 0.125);
    other.insert("b.cube", ck.get("b.cube").unwrap().clone());
    other.insert("a.matrix", ck.get("a.matrix").unwrap().clone());
    assert_eq!(other.to_bytes(), ck.to_bytes());
}

#[test]
fn every_flipped_byte_is_rejected() {
    let bytes = sample_checkpoint().to_bytes();
    for i in (0..bytes.len()).step_by(7) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(
            Checkpoint::from_bytes(&bad).is_err(),
            "flip at byte {i} accepted"
        );
    }
}

#[test]
fn truncated_and_padded_archives_are_rejected() {
    let bytes = sample_checkpoint().to_bytes();
    for cut in [0, 4, 8, 20, bytes.len() - 33, bytes.len() - 1] {
        assert!(
            Checkpoint::from_bytes(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(Checkpoint::from_bytes(&longer).is_err());
}

#[test]
fn corrupted_payload_reports_checksum() {
    let mut bytes = sample_checkpoint().to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let ck = sample_checkpoint();
    ck.save(&path).unwrap();
    assert!(!dir.path().join("model.bin.tmp").exists());
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing.bin")).is_err());
}

#[test]
fn model_parameters_survive_a_checkpoint() {
    let g = GeneratorParams::<f64>::new(
        3,
        2,
        &GeneratorConfig {
            filters: 5,
            hidden: 7,
            pool_window: 4,
            ..GeneratorConfig::default()
        },
        &mut rng(3),
    );
    let d = DiscriminatorParams::<f64>::new(3, &DiscriminatorConfig::default(), &mut rng(4));
    let mut ck = Checkpoint::new();
    g.save_to(&mut ck);
    d.export("disc.", &mut ck);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert_eq!(GeneratorParams::<f64>::from_checkpoint(&back).unwrap(), g);
    assert_eq!(
        DiscriminatorParams::<f64>::from_checkpoint(&back, "disc.").unwrap(),
        d
    );
}

#[test]
fn dataset_round_trips_through_csv() {
    let cfg = SimConfig::knee();
    let data = make_dataset::<f64>(12, &cfg, ExcitationFamily::Mixed, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    assert_eq!(manifest.n_cycles, 12);
    assert_eq!(manifest.emg_channels, 2);
    assert_eq!(manifest.muscles, 2);
    assert_eq!(manifest.frames, data.samples[0].frames());
    assert_eq!(manifest.dataset_sha256, dataset_hash(&data));
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);

    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.splits, data.splits);
    assert_eq!(back.patterns, data.patterns);
    for (a, b) in back.samples.iter().zip(&data.samples) {
        assert_eq!(a, b);
    }
    assert_eq!(dataset_hash(&back), dataset_hash(&data));
}

#[test]
fn edited_csv_fails_the_hash_check() {
    let data = make_dataset::<f64>(4, &SimConfig::knee(), ExcitationFamily::Mixed, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(&data, dir.path()).unwrap();
    let path = dir.path().join(&m.cycles[1].file);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[3].split(',').map(String::from).collect();
    let last = cells.len() - 1;
    cells[last] = format!("{:.17e}", cells[last].parse::<f64>().unwrap() + 1e-3);
    lines[3] = cells.join(",");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("hash"), "{err}");
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_dataset(dir.path()).is_err());
    std::fs::write(dir.path().join(MANIFEST), "{}").unwrap();
    assert!(read_manifest(dir.path()).is_err());
}

#[test]
fn dataset_hash_tracks_content() {
    let cfg = SimConfig::knee();
    let a = make_dataset::<f64>(5, &cfg, ExcitationFamily::Mixed, 1).unwrap();
    let b = make_dataset::<f64>(5, &cfg, ExcitationFamily::Mixed, 1).unwrap();
    let c = make_dataset::<f64>(5, &cfg, ExcitationFamily::Mixed, 2).unwrap();
    assert_eq!(dataset_hash(&a), dataset_hash(&b));
    assert_ne!(dataset_hash(&a), dataset_hash(&c));
    assert_eq!(dataset_hash(&a).len(), 64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arbitrary_checkpoints_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..6),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let mut ck = Checkpoint::new();
        for (i, shape) in shapes.iter().enumerate() {
            let t = if shape.is_empty() {
                Tensor::from_vec(&[1], vec![f64::from_bits(seed ^ i as u64).clamp(-1e300, 1e300)]).unwrap()
            } else {
                uniform(&mut r, shape, -1e6, 1e6)
            };
            ck.insert(format!("t{i}.é"), t);
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.len(), ck.len());
        for name in ck.names() {
            let (a, b) = (ck.get(name).unwrap(), back.get(name).unwrap());
            prop_assert_eq!(a.shape(), b.shape());
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
