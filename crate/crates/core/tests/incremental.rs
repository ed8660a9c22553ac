use kdlab::data::{make_blobs_from, train_test_split, BlobSpec, Dataset, Splits};
use kdlab::incremental::{
    il_train, il_train_model, split_tasks, ClassOrder, IlConfig, IlMethod, Task, TaskCurriculum, TeacherSnapshot,
    SI_DAMPING,
};
use kdlab::optim::Schedule;

fn splits(classes: usize, seed: u64) -> Splits {
    let mut spec = BlobSpec::new(classes, 6, 40, 3.0, seed);
    spec.modes_per_class = 2;
    let ds = make_blobs_from(&spec).unwrap();
    let (train, test) = train_test_split(&ds, 0.75, seed).unwrap();
    Splits::standardized(train, test)
}

fn cfg(lambda: f64, widths: Vec<usize>, epochs: usize) -> IlConfig {
    IlConfig {
        schedule: Schedule {
            epochs,
            batch_size: 16,
            ..Schedule::default()
        },
        widths,
        lambda,
        si_damping: SI_DAMPING,
        importance_samples: 64,
        seed: 4,
    }
}

#[test]
fn single_task_matches_vanilla_for_every_method() {
    let cur = split_tasks(&splits(4, 1), 1, ClassOrder::Identity).unwrap();
    let c = cfg(5.0, vec![6, 12, 4], 3);
    let (base, base_net) = il_train_model(&cur, IlMethod::Vanilla, &c).unwrap();
    for m in IlMethod::ALL {
        let (r, net) = il_train_model(&cur, m, &c).unwrap();
        assert_eq!(r.accuracy, base.accuracy, "{m}");
        assert_eq!(net, base_net, "{m}");
    }
}

#[test]
fn zero_lambda_matches_vanilla_for_every_method() {
    let cur = split_tasks(&splits(6, 2), 3, ClassOrder::Shuffled(1)).unwrap();
    let c = cfg(0.0, vec![6, 12, 4], 3);
    let (base, base_net) = il_train_model(&cur, IlMethod::Vanilla, &c).unwrap();
    for m in IlMethod::ALL.into_iter().filter(|&m| m != IlMethod::Joint) {
        let (r, net) = il_train_model(&cur, m, &c).unwrap();
        assert_eq!(r.accuracy, base.accuracy, "{m}");
        assert_eq!(net, base_net, "{m}");
    }
}

#[test]
fn tasks_are_disjoint_and_exhaustive() {
    let s = splits(6, 3);
    let cur = split_tasks(&s, 3, ClassOrder::Shuffled(8)).unwrap();
    let mut seen = Vec::new();
    for t in &cur.tasks {
        assert!(t.classes.iter().all(|c| !seen.contains(c)));
        seen.extend(&t.classes);
        for (r, &y) in t.train.labels.iter().enumerate() {
            let original = t.classes[y];
            let row = t.train.features.row(r);
            let found = (0..s.train.len()).any(|i| s.train.features.row(i) == row && s.train.labels[i] == original);
            assert!(found);
        }
    }
    assert_eq!(cur.tasks.iter().map(|t| t.train.len()).sum::<usize>(), s.train.len());
}

#[test]
fn snapshot_is_a_frozen_copy() {
    let cur = split_tasks(&splits(4, 5), 2, ClassOrder::Identity).unwrap();
    let (_, mut net) = il_train_model(&cur, IlMethod::Vanilla, &cfg(0.0, vec![6, 8, 4], 1)).unwrap();
    let snap = TeacherSnapshot::take(&net);
    let bytes = serde_json::to_vec(&kdlab::nets::Checkpoint::from_net(snap.net())).unwrap();
    for p in net.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    net.add_head(3).unwrap();
    assert_eq!(serde_json::to_vec(&kdlab::nets::Checkpoint::from_net(snap.net())).unwrap(), bytes);
    assert_eq!(snap.heads(), 2);
}

/// Two tasks over the same inputs whose labelings cut the data along
/// different directions, with a trunk too narrow to serve both.
fn adversarial() -> TaskCurriculum {
    let ds = make_blobs_from(&BlobSpec::new(4, 6, 40, 5.0, 7)).unwrap();
    let (train, test) = train_test_split(&ds, 0.75, 7).unwrap();
    let s = Splits::standardized(train, test);
    let relabel = |ds: &Dataset, map: [usize; 4]| {
        let labels = ds.labels.iter().map(|&y| map[y]).collect();
        Dataset::new(ds.features.clone(), labels, 2, ds.provenance.clone()).unwrap()
    };
    let task = |map: [usize; 4]| Task {
        classes: vec![0, 1],
        train: relabel(&s.train, map),
        test: relabel(&s.test, map),
    };
    TaskCurriculum {
        tasks: vec![task([0, 0, 1, 1]), task([0, 1, 0, 1])],
    }
}

#[test]
fn vanilla_forgets_on_adversarial_tasks() {
    let r = il_train(&adversarial(), IlMethod::Vanilla, &cfg(0.0, vec![6, 16, 1], 30)).unwrap();
    assert!(r.accuracy[0][0] >= 0.9, "{:?}", r.accuracy);
    assert!(r.first_task_drop() >= 0.2, "{:?}", r.accuracy);
}
