use super::*;

fn small(n: usize) -> DatasetConfig {
    DatasetConfig {
        num_samples: n,
        ..Default::default()
    }
}

#[test]
fn same_config_gives_identical_data() {
    let a = generate_dataset(&small(50)).unwrap();
    let b = generate_dataset(&small(50)).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&DatasetConfig { seed: 1, ..small(50) }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn samples_do_not_depend_on_dataset_size() {
    let a = generate_dataset(&small(30)).unwrap();
    let b = generate_dataset(&small(60)).unwrap();
    assert_eq!(a.samples[..], b.samples[..30]);
    assert_eq!(render_sample(&small(60), 42), b.samples[42]);
}

#[test]
fn clean_render_is_the_template() {
    let cfg = DatasetConfig {
        noise_std_a: 0.0,
        noise_std_b: 0.0,
        jitter: false,
        ..small(20)
    };
    for s in generate_dataset(&cfg).unwrap().samples {
        assert_eq!(s.mod_a, template(s.label as usize).to_vec());
    }
}

#[test]
fn classes_are_balanced() {
    let ds = generate_dataset(&small(10_000)).unwrap();
    let mut counts = [0usize; 10];
    for s in &ds.samples {
        counts[s.label as usize] += 1;
    }
    assert!(counts.iter().all(|&c| (950..=1050).contains(&c)), "{counts:?}");
}

#[test]
fn values_and_one_hot_rows_are_valid() {
    let ds = generate_dataset(&small(300)).unwrap();
    for s in &ds.samples {
        assert!(s.mod_a.iter().chain(&s.mod_b).all(|v| (0.0..=1.0).contains(v)));
        for row in s.mod_c.chunks(ALPHABET) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
        let text: String = s
            .mod_c
            .chunks(ALPHABET)
            .map(|r| {
                let k = r.iter().position(|&v| v == 1.0).unwrap();
                if k == BLANK {
                    ' '
                } else {
                    (b'a' + k as u8) as char
                }
            })
            .collect();
        assert_eq!(text.trim(), WORDS[s.label as usize]);
    }
}

#[test]
fn templates_stay_apart_under_jitter() {
    for a in 0..MAX_CLASSES {
        for b in 0..MAX_CLASSES {
            if a == b {
                continue;
            }
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let moved = shift(&template(b), dy, dx);
                    let d: f32 = template(a).iter().zip(&moved).map(|(x, y)| (x - y).abs()).sum();
                    assert!(d >= 2.0, "{a} vs {b} shifted ({dy},{dx}): {d}");
                }
            }
        }
    }
}

#[test]
fn config_errors() {
    assert!(generate_dataset(&DatasetConfig { text_length: 4, ..small(5) }).is_err());
    assert!(generate_dataset(&DatasetConfig { num_samples: 0, ..small(5) }).is_err());
    assert!(generate_dataset(&DatasetConfig { alphabet: 26, ..small(5) }).is_err());
    assert!(generate_dataset(&DatasetConfig { num_classes: 11, ..small(5) }).is_err());
    // two classes only need room for "zero" and "one"
    assert!(generate_dataset(&DatasetConfig {
        num_classes: 2,
        text_length: 4,
        ..small(5)
    })
    .is_ok());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mmds");
    let ds = generate_dataset(&small(100)).unwrap();
    save_dataset(&path, &ds).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_dataset(&path),
        Err(DataError::Container(ContainerError::BadMagic { .. }))
    ));
    bytes[1] = b'M';
    bytes[4] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_dataset(&path),
        Err(DataError::Container(ContainerError::UnsupportedVersion(9)))
    ));
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_dataset(&path).is_err());
}

#[test]
fn batching_covers_the_dataset() {
    let ds = generate_dataset(&small(10)).unwrap();
    let sizes: Vec<_> = ds.batches::<f32>(3, 5).unwrap().map(|b| b.len()).collect();
    assert_eq!(sizes, vec![3, 3, 3, 1]);
    let order = |seed| {
        ds.batches::<f32>(3, seed)
            .unwrap()
            .flat_map(|b| b.labels().to_vec())
            .collect::<Vec<_>>()
    };
    assert_eq!(order(5), order(5));
    let mut labels = order(5);
    labels.sort();
    let mut want = ds.labels();
    want.sort();
    assert_eq!(labels, want);
    let first = ds.batches::<f64>(4, 1).unwrap().next().unwrap();
    assert_eq!(first.data(2).cols(), 8 * ALPHABET);
    assert!(ds.batches::<f32>(0, 1).is_err());
    let empty = Dataset {
        num_classes: 10,
        text_length: 8,
        samples: vec![],
    };
    assert!(matches!(empty.batches::<f32>(2, 0), Err(DataError::Empty)));
}
