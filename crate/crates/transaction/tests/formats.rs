use transaction::annotations::{self, Annotation};
use transaction::checkpoint::{checksum, Checkpoint};
use transaction::dataset::Dataset;
use transaction::error::AppError;
use transaction::features;
use transaction::frequency;
use transaction::synthetic::{generate, SyntheticConfig};
use transaction_core::data::{Split, TailRule};
use transaction_core::model::{ModelConfig, ModelParams, Variant};

fn small_data(seed: u64) -> Dataset {
    generate(&SyntheticConfig {
        seed,
        n_samples: 40,
        n_frames: 4,
        d_rgb: 6,
        d_flow: 4,
        d_obj: 5,
        n_verbs: 3,
        n_nouns: 4,
        n_actions: 6,
        n_participants: 4,
        ..Default::default()
    })
    .unwrap()
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_rgb: 4,
        d_flow: 4,
        d_obj: 4,
        n_frames: 3,
        n_blocks: 2,
        heads: 2,
        ff_mult: 2,
        n_verbs: 3,
        n_nouns: 4,
        n_actions: 6,
        variant,
    }
}

fn data_error(e: AppError) -> String {
    match e {
        AppError::Data(m) => m,
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn dataset_files_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_data(3);
    let (f1, a1) = (dir.path().join("a.tact"), dir.path().join("a.csv"));
    ds.write(&f1, &a1).unwrap();
    let back = Dataset::load(&f1, &a1, Some(ds.space.vocab()), TailRule::default()).unwrap();
    assert_eq!(back, ds);
    let (f2, a2) = (dir.path().join("b.tact"), dir.path().join("b.csv"));
    back.write(&f2, &a2).unwrap();
    assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    assert_eq!(std::fs::read(&a1).unwrap(), std::fs::read(&a2).unwrap());
}

#[test]
fn feature_header_is_little_endian_with_magic() {
    let ds = small_data(0);
    let bytes = features::encode(&ds.header, &ds.records()).unwrap();
    assert_eq!(&bytes[..4], b"TACT");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    let (h, recs) = features::decode(&bytes).unwrap();
    assert_eq!(h, ds.header);
    assert_eq!(recs.len(), 40);
}

#[test]
fn truncated_feature_file_reports_the_field() {
    let ds = small_data(0);
    let bytes = features::encode(&ds.header, &ds.records()).unwrap();
    for cut in [0, 3, 5, 9, 20, bytes.len() / 2, bytes.len() - 1] {
        let msg = data_error(features::decode(&bytes[..cut]).unwrap_err());
        assert!(msg.contains("truncated") || msg.contains("magic"), "cut {cut}: {msg}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    let msg = data_error(features::decode(&extra).unwrap_err());
    assert!(msg.contains("trailing"), "{msg}");
}

#[test]
fn feature_file_rejects_bad_magic_and_version() {
    let ds = small_data(0);
    let mut bytes = features::encode(&ds.header, &ds.records()).unwrap();
    bytes[0] = b'X';
    assert!(data_error(features::decode(&bytes).unwrap_err()).contains("magic"));
    bytes[0] = b'T';
    bytes[4] = 9;
    assert!(data_error(features::decode(&bytes).unwrap_err()).contains("version"));
}

#[test]
fn annotation_errors_name_the_line() {
    let good = "sample_id,participant,verb,noun,action,split\na,P1,0,1,2,train\n";
    assert_eq!(annotations::decode(good.as_bytes(), "x.csv").unwrap().len(), 1);

    let bad_split = "sample_id,participant,verb,noun,action,split\na,P1,0,1,2,train\nb,P1,0,1,2,dev\n";
    let msg = data_error(annotations::decode(bad_split.as_bytes(), "x.csv").unwrap_err());
    assert!(msg.contains("line 3") && msg.contains("dev"), "{msg}");

    let bad_int = "sample_id,participant,verb,noun,action,split\na,P1,zero,1,2,train\n";
    let msg = data_error(annotations::decode(bad_int.as_bytes(), "x.csv").unwrap_err());
    assert!(msg.contains("line 2") && msg.contains("verb"), "{msg}");

    let bad_header = "id,participant,verb,noun,action,split\n";
    let msg = data_error(annotations::decode(bad_header.as_bytes(), "x.csv").unwrap_err());
    assert!(msg.contains("line 1"), "{msg}");

    let short = "sample_id,participant,verb,noun,action,split\na,P1,0,1\n";
    let msg = data_error(annotations::decode(short.as_bytes(), "x.csv").unwrap_err());
    assert!(msg.contains("line 2"), "{msg}");
}

#[test]
fn annotation_csv_round_trips() {
    let rows = vec![
        Annotation {
            sample_id: "s1".into(),
            participant: "P01".into(),
            verb: 1,
            noun: 2,
            action: 3,
            split: Split::Train,
        },
        Annotation {
            sample_id: "s2".into(),
            participant: "P02".into(),
            verb: 0,
            noun: 0,
            action: 0,
            split: Split::Test,
        },
    ];
    let bytes = annotations::encode(&rows).unwrap();
    let back = annotations::decode(&bytes, "mem").unwrap();
    assert_eq!(back, rows);
    assert_eq!(annotations::encode(&back).unwrap(), bytes);
    assert!(annotations::decode(&annotations::encode(&[]).unwrap(), "mem").unwrap().is_empty());
}

#[test]
fn dangling_and_orphaned_samples_are_data_errors() {
    let ds = small_data(1);
    let mut rows = ds.annotations();
    let mut extra = rows[0].clone();
    extra.sample_id = "ghost".into();
    rows.push(extra);
    let msg = data_error(Dataset::assemble(ds.header, ds.records(), &rows, None, TailRule::default()).unwrap_err());
    assert!(msg.contains("dangling") && msg.contains("ghost"), "{msg}");

    let rows = ds.annotations()[1..].to_vec();
    let msg = data_error(Dataset::assemble(ds.header, ds.records(), &rows, None, TailRule::default()).unwrap_err());
    assert!(msg.contains("no annotation"), "{msg}");
}

#[test]
fn frequency_table_round_trips_and_rejects_duplicates() {
    let counts = vec![5, 0, 17, 3];
    let text = frequency::encode(&counts);
    assert_eq!(text, "0\t5\n1\t0\n2\t17\n3\t3\n");
    assert_eq!(frequency::decode(&text, "f").unwrap(), counts);
    assert_eq!(frequency::decode("1\t2\n0\t7\n", "f").unwrap(), vec![7, 2]);
    assert!(data_error(frequency::decode("0\t1\n0\t2\n", "f").unwrap_err()).contains("twice"));
    assert!(data_error(frequency::decode("0\t1\n5\t2\n", "f").unwrap_err()).contains("out of range"));
    assert!(data_error(frequency::decode("0 1\n", "f").unwrap_err()).contains("line 1"));
}

#[test]
fn checkpoint_round_trips_byte_identically_for_every_variant() {
    for variant in Variant::ALL {
        let params = ModelParams::<f32>::init(small_model(variant), 11).unwrap();
        let vel: Vec<Vec<f32>> = params
            .store
            .iter()
            .enumerate()
            .map(|(i, p)| (0..p.tensor.numel()).map(|j| (i * 7 + j) as f32 * 1e-3).collect())
            .collect();
        for velocity in [None, Some(vel)] {
            let ckpt = Checkpoint {
                params: params.clone(),
                epochs_completed: 4,
                velocity,
            };
            let bytes = ckpt.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ckpt, "{variant}");
            assert_eq!(back.encode().unwrap(), bytes, "{variant}");
        }
    }
}

#[test]
fn checkpoint_write_read_write_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        params: ModelParams::<f32>::init(small_model(Variant::Full), 2).unwrap(),
        epochs_completed: 1,
        velocity: None,
    };
    let p1 = dir.path().join("a.tack");
    let p2 = dir.path().join("b.tack");
    ckpt.write(&p1).unwrap();
    Checkpoint::read(&p1).unwrap().write(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn corrupted_checkpoint_fails_the_checksum() {
    let ckpt = Checkpoint {
        params: ModelParams::<f32>::init(small_model(Variant::Full), 2).unwrap(),
        epochs_completed: 1,
        velocity: None,
    };
    let bytes = ckpt.encode().unwrap();
    for at in [0, 10, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        assert!(data_error(Checkpoint::decode(&bad).unwrap_err()).contains("checksum"), "byte {at}");
    }
    let msg = data_error(Checkpoint::decode(&bytes[..bytes.len() - 20]).unwrap_err());
    assert!(msg.contains("checksum"), "{msg}");
    assert!(data_error(Checkpoint::decode(&bytes[..4]).unwrap_err()).contains("truncated"));
}

#[test]
fn checkpoint_with_valid_checksum_but_missing_tensor_is_rejected() {
    let ckpt = Checkpoint {
        params: ModelParams::<f32>::init(small_model(Variant::Full), 2).unwrap(),
        epochs_completed: 1,
        velocity: None,
    };
    let bytes = ckpt.encode().unwrap();
    // Rewrite the tensor count to one fewer, then cut the last tensor and re-seal.
    let header = 4 + 2 + 12 * 4;
    let count = u32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
    let last = ckpt.params.store.iter().last().unwrap();
    let last_len = 2 + last.name.len() + 4 + 4 * last.tensor.rank() + 4 * last.tensor.numel();
    let mut payload = bytes[..bytes.len() - 8 - last_len].to_vec();
    payload[header..header + 4].copy_from_slice(&(count - 1).to_le_bytes());
    let sum = checksum(&payload);
    payload.extend_from_slice(&sum.to_le_bytes());
    let msg = data_error(Checkpoint::decode(&payload).unwrap_err());
    assert!(msg.contains("missing") && msg.contains(&last.name), "{msg}");
}
