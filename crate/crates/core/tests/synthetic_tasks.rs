use php_av::oracles::nearest_class_mean_accuracy;
use php_av::synthetic::{
    class_text_embeddings, load_dataset, make_task, save_dataset, Flavor, Label, Split, TaskSpec,
};

/// Token-averaged video features (mean over time and positions) with labels.
fn pooled(split: &Split) -> Vec<(Vec<f64>, usize)> {
    let (n, t, p, c) = split.video.dim();
    (0..n)
        .map(|i| {
            let mut f = vec![0.0; c];
            for ti in 0..t {
                for pi in 0..p {
                    for ci in 0..c {
                        f[ci] += split.video[[i, ti, pi, ci]] as f64;
                    }
                }
            }
            f.iter_mut().for_each(|v| *v /= (t * p) as f64);
            let y = match &split.labels[i] {
                Label::Single(y) => *y,
                Label::Multi(_) => unreachable!("single-label spec"),
            };
            (f, y)
        })
        .collect()
}

fn ncm(classes: usize, seed: u64, sigma: f64) -> f64 {
    let ds = make_task(&TaskSpec::new(
        "t",
        Flavor::SingleLabelTemporal,
        classes,
        seed,
        sigma,
    ))
    .unwrap();
    nearest_class_mean_accuracy(&pooled(&ds.train), &pooled(&ds.test))
}

#[test]
fn nearest_class_mean_golden() {
    // Recorded from the scalar oracle on first generation.
    assert_eq!(ncm(4, 1, 0.5), 1.0);
}

#[test]
fn noiseless_two_class_task_is_separable() {
    assert_eq!(ncm(2, 9, 0.0), 1.0);
}

#[test]
fn accuracy_does_not_increase_with_noise() {
    for seed in [1, 2, 3] {
        let accs: Vec<f64> = [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|&s| ncm(4, seed, s))
            .collect();
        assert!(
            accs.windows(2).all(|w| w[1] <= w[0]),
            "seed {seed}: {accs:?}"
        );
    }
}

#[test]
fn same_spec_gives_identical_data_and_embeddings() {
    let spec = TaskSpec::new("x", Flavor::MultiLabel, 4, 77, 0.3);
    assert_eq!(make_task(&spec).unwrap(), make_task(&spec).unwrap());
    let e = class_text_embeddings(&spec, 8).unwrap();
    assert_eq!(e, class_text_embeddings(&spec, 8).unwrap());
    let gram = e.dot(&e.t());
    for i in 0..4 {
        for j in 0..4 {
            assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
        }
    }
    let small = TaskSpec::new("y", Flavor::QaStyle, 3, 1, 0.3);
    assert!(class_text_embeddings(&small, 2).is_err());
}

#[test]
fn saved_dataset_round_trips_and_second_save_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = TaskSpec::new("AVE", Flavor::SingleLabelTemporal, 4, 5, 1.0);
    spec.clips_train = 20;
    spec.clips_val = 5;
    spec.clips_test = 5;
    let ds = make_task(&spec).unwrap();
    let path = dir.path().join("AVE");
    let first = save_dataset(&ds, &path).unwrap();
    assert!(first.files_written > 0);
    let second = save_dataset(&ds, &path).unwrap();
    assert_eq!(second.files_written, 0);
    assert_eq!(first.manifest_sha256, second.manifest_sha256);
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let f = path.join("train_video.f32");
    let mut bytes = std::fs::read(&f).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&f, bytes).unwrap();
    assert!(load_dataset(&path).is_err());
}

#[test]
fn path_blocked_by_a_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = TaskSpec::new("AVE", Flavor::SingleLabelTemporal, 2, 5, 1.0);
    spec.clips_train = 4;
    spec.clips_val = 2;
    spec.clips_test = 2;
    let ds = make_task(&spec).unwrap();
    std::fs::write(dir.path().join("blocker"), b"x").unwrap();
    assert!(save_dataset(&ds, &dir.path().join("blocker/AVE")).is_err());
}
