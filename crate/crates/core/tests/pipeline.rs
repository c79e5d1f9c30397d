use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use comoto_core::data::{generate_dataset, generate_sample, sample_id, Dataset, Modality, SyntheticSpec};
use comoto_core::eval::{cases_from_predictions, evaluate, predict_cases, predictions_jsonl, read_predictions};
use comoto_core::detector::PostProcess;
use comoto_core::train::{
    evaluate_split, parameter_hash, train_student, train_teacher, Checkpoint, Mode, Splits, TrainConfig,
};

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig { mode, epochs: 2, lr_drop_epoch: 1, seed: 3, ..TrainConfig::default() }
}

fn tiny_dataset() -> (Dataset, Splits) {
    let spec = SyntheticSpec { seed: 11, ..SyntheticSpec::default() };
    let ds = generate_dataset(&spec, 20, 20).unwrap();
    let splits = Splits::make(&ds, None, 1.0, 5).unwrap();
    (ds, splits)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn lesion_boxes_contain_their_peaks() {
    let spec = SyntheticSpec { seed: 2, ..SyntheticSpec::default() };
    let mut seen = 0;
    for i in 0.. {
        let (sample, lesions) = generate_sample(&spec, Modality::M, &sample_id(Modality::M, i));
        for (b, l) in sample.boxes.iter().zip(&lesions) {
            let (px, py) = (l.cx.round(), l.cy.round());
            assert!(b.bbox.contains_point(px, py), "{:?} misses peak ({px}, {py})", b.bbox);
            seen += 1;
        }
        if seen >= 200 {
            break;
        }
    }
}

#[test]
fn modalities_differ_in_mean_intensity() {
    let spec = SyntheticSpec { seed: 8, ..SyntheticSpec::default() };
    let means = |m: Modality| -> Vec<f64> {
        (0..100)
            .map(|i| {
                let (s, _) = generate_sample(&spec, m, &sample_id(m, i));
                s.pixels.data().iter().sum::<f64>() / s.pixels.len() as f64
            })
            .collect()
    };
    let (a, b) = (means(Modality::M), means(Modality::T));
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (mean, v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let ((ma, va, na), (mb, vb, nb)) = (stats(&a), stats(&b));
    let welch_t = (ma - mb) / (va / na + vb / nb).sqrt();
    assert!(welch_t.abs() > 5.0, "Welch t = {welch_t}");
}

#[test]
fn dataset_save_load_save_is_byte_identical() {
    let (ds, _) = tiny_dataset();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ds.save(&a).unwrap();
    let loaded = Dataset::load(&a).unwrap();
    assert_eq!(loaded.samples.len(), ds.samples.len());
    loaded.save(&b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn training_contracts() {
    let (ds, splits) = tiny_dataset();
    let tmp = tempfile::tempdir().unwrap();

    let teacher = train_teacher(&tiny_config(Mode::Teacher), &ds, &splits).unwrap();
    assert!(teacher.aborted.is_none());
    let again = train_teacher(&tiny_config(Mode::Teacher), &ds, &splits).unwrap();
    assert_eq!(teacher.checkpoint.hash(), again.checkpoint.hash());
    assert_eq!(teacher.history_csv(), again.history_csv());

    // checkpoint round trip and validation mAP reproduction
    let p1 = tmp.path().join("t1.ckpt");
    let p2 = tmp.path().join("t2.ckpt");
    teacher.checkpoint.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    let (val, _) = evaluate_split(&loaded, &ds, &splits.m.val).unwrap();
    assert_eq!(val.metrics.map, teacher.checkpoint.val_map);

    // frozen teacher
    let before = parameter_hash(&loaded.network);
    let comoto = train_student(&tiny_config(Mode::StudentComoto), &ds, &splits, &loaded).unwrap();
    assert_eq!(parameter_hash(&loaded.network), before);

    // logged objective is the weighted sum of its logged parts
    for s in &comoto.steps {
        assert_eq!(s.weight, 2.0);
        assert!((s.l_det + s.weight * s.l_aux - s.total).abs() <= 1e-9, "{s:?}");
    }
    for s in &comoto.steps {
        let want = if s.epoch > 1 { 0.001 } else { 0.01 };
        assert_eq!(s.lr, want);
    }

    // zero distillation weight reproduces the baseline trajectory
    let off = TrainConfig { alpha: 0.0, ..tiny_config(Mode::StudentComoto) };
    let a = train_student(&off, &ds, &splits, &loaded).unwrap();
    let b = train_student(&tiny_config(Mode::StudentBaseline), &ds, &splits, &loaded).unwrap();
    assert_eq!(parameter_hash(&a.checkpoint.network), parameter_hash(&b.checkpoint.network));
    let dets = |o: &comoto_core::train::TrainOutcome| o.steps.iter().map(|s| s.l_det).collect::<Vec<_>>();
    assert_eq!(dets(&a), dets(&b));
}

#[test]
fn predictions_interchange_matches_in_process_evaluation() {
    let (ds, splits) = tiny_dataset();
    let teacher = train_teacher(&TrainConfig { epochs: 1, lr_drop_epoch: 1, ..tiny_config(Mode::Teacher) }, &ds, &splits).unwrap();
    let samples = ds.select(&splits.t.test).unwrap();
    let cases = predict_cases(&teacher.checkpoint.network, &samples, &PostProcess::default()).unwrap();
    let direct = evaluate(&cases).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("pred.jsonl");
    fs::write(&path, predictions_jsonl(&cases)).unwrap();
    let back = cases_from_predictions(&samples, read_predictions(&path).unwrap()).unwrap();
    assert_eq!(back, cases);
    assert_eq!(evaluate(&back).unwrap().metrics, direct.metrics);
}
