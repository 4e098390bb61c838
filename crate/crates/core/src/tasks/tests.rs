use super::*;
use crate::nn::Inputs;

fn small(kind: TaskKind) -> TaskSpec {
    TaskSpec {
        n_train: 300,
        n_val: 50,
        seed: 5,
        ..TaskSpec::new(kind)
    }
}

#[test]
fn generation_is_deterministic() {
    for kind in [TaskKind::PlantedClassify, TaskKind::ToyAcceptability, TaskKind::ToyPairRegression] {
        let a = make_task(&small(kind)).unwrap();
        let b = make_task(&small(kind)).unwrap();
        assert_eq!(a, b);
        let mut other = small(kind);
        other.seed = 6;
        assert_ne!(make_task(&other).unwrap().train, a.train);
    }
}

#[test]
fn planted_labels_are_balanced_and_teacher_is_exact() {
    let d = make_planted_task(&TaskSpec::new(TaskKind::PlantedClassify)).unwrap();
    let positives = d.train.iter().filter(|e| e.label == Label::Class(1)).count();
    let share = positives as f64 / d.train.len() as f64;
    assert!((0.45..=0.55).contains(&share), "{share}");
    assert!(d.train.iter().chain(&d.val).all(|e| d.teacher.label(e) == e.label));
    let support = d.teacher.support();
    assert_eq!(support.len(), 4);
    assert!(make_planted_task(&TaskSpec::new(TaskKind::ToyAcceptability)).is_err());
}

#[test]
fn acceptability_labels_follow_the_grammar() {
    let d = make_task(&small(TaskKind::ToyAcceptability)).unwrap();
    let Teacher::Bigram { forbidden } = &d.teacher else { panic!() };
    for e in &d.train {
        let text = detokenize(e);
        let bad = text
            .windows(2)
            .any(|w| forbidden.contains(&((w[0] - b'a') as usize, (w[1] - b'a') as usize)));
        assert_eq!(e.label, Label::Class(usize::from(!bad)));
    }
    let positives = d.train.iter().filter(|e| e.label == Label::Class(1)).count();
    assert!(positives > 60 && positives < 240, "{positives}");
}

#[test]
fn regression_labels_stay_in_range_and_segments_are_ordered() {
    let d = make_task(&small(TaskKind::ToyPairRegression)).unwrap();
    let mut seen_low = false;
    let mut seen_high = false;
    for e in &d.train {
        let Label::Score(s) = e.label else { panic!() };
        assert!((0.0..=5.0).contains(&s));
        seen_low |= s < 2.0;
        seen_high |= s > 3.0;
        assert_eq!(e.token_ids.len(), e.segment_ids.len());
        let first_sep = e.token_ids.iter().position(|&t| t == SEP_ID).unwrap();
        assert!(e.segment_ids[..=first_sep].iter().all(|&s| s == 0));
        assert!(e.segment_ids[first_sep + 1..].iter().all(|&s| s == 1));
        assert_eq!(*e.token_ids.last().unwrap(), SEP_ID);
    }
    assert!(seen_low && seen_high);
}

#[test]
fn tokenization_layouts() {
    let e = tokenize_single("", 8);
    assert_eq!(e.token_ids, vec![CLS_ID]);
    let e = tokenize_pair("a", "b", 32).unwrap();
    assert_eq!(e.token_ids, vec![1, b'a' as u32 + 3, 2, b'b' as u32 + 3, 2]);
    assert_eq!(e.segment_ids, vec![0, 0, 0, 1, 1]);
    assert!(matches!(tokenize_pair("", "", 32), Err(Error::Validation(_))));

    let text = "hello, world";
    assert_eq!(detokenize(&tokenize_single(text, 64)), text.as_bytes());

    let long = tokenize_pair("abcdefgh", "xy", 8).unwrap();
    assert_eq!(long.token_ids.len(), 8);
    assert_eq!(long.token_ids[0], CLS_ID);
    assert_eq!(*long.token_ids.last().unwrap(), SEP_ID);
    assert_eq!(detokenize(&long), b"abcxy");
}

#[test]
fn batches_cover_the_dataset_exactly() {
    let d = make_task(&TaskSpec {
        n_train: 10,
        n_val: 0,
        ..small(TaskKind::PlantedClassify)
    })
    .unwrap();
    let stream = batches(&d.train, 4, Some(3)).unwrap();
    let sizes: Vec<usize> = stream.iter().map(|b| b.inputs.batch_size()).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    assert_eq!(stream, batches(&d.train, 4, Some(3)).unwrap());
    assert_ne!(stream, batches(&d.train, 4, Some(4)).unwrap());
    assert!(matches!(batches(&d.train, 0, None), Err(Error::Validation(_))));

    let mut seen: Vec<Vec<u32>> = Vec::new();
    for b in &stream {
        let Inputs::Tokens { ids, lengths, seq_len, .. } = &b.inputs else { panic!() };
        assert_eq!(*seq_len, *lengths.iter().max().unwrap());
        for (i, &len) in lengths.iter().enumerate() {
            let row = &ids[i * seq_len..(i + 1) * seq_len];
            assert!(row[len..].iter().all(|&t| t == PAD_ID));
            seen.push(row[..len].to_vec());
        }
    }
    let mut expected: Vec<Vec<u32>> = d.train.iter().map(|e| e.token_ids.clone()).collect();
    seen.sort();
    expected.sort();
    assert_eq!(seen, expected);
}

#[test]
fn text_export_round_trips() {
    for kind in [TaskKind::PlantedClassify, TaskKind::ToyPairRegression] {
        let d = make_task(&small(kind)).unwrap();
        let text = export_examples(&d.train);
        let back = import_examples(&text, kind.is_regression()).unwrap();
        assert_eq!(back, d.train);
    }
    assert!(import_examples("1 2\t0\t1\n", false).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = TaskSpec::new(TaskKind::PlantedClassify);
    s.alphabet = 0;
    assert!(matches!(make_task(&s), Err(Error::Validation(_))));
    let mut s = TaskSpec::new(TaskKind::PlantedClassify);
    s.teacher_sparsity = 0.0;
    assert!(make_task(&s).is_err());
    assert_eq!(TaskKind::parse("toy_pair_regression"), Some(TaskKind::ToyPairRegression));
    assert_eq!(TaskKind::parse("sst2"), None);
}
