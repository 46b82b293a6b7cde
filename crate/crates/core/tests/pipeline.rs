use std::fs;

use nft_ood::data::{
    crop_sets, label_bank, read_bank, read_manifest, role_rows, synth_dataset, training_mat, training_records,
    training_set, write_bank, write_manifest, ManifestRole, SynthConfig,
};
use nft_ood::mining::{build_training_set, select_outliers};
use nft_ood::model::{default_hidden, init_model, load_checkpoint, save_checkpoint};
use nft_ood::scoring::{evaluate, score_rows, ScoreMethod};
use nft_ood::trainer::{train, TrainConfig};
use nft_ood::TransformMode;

fn small() -> SynthConfig {
    SynthConfig {
        dim: 16,
        n_classes: 4,
        m_neg: 12,
        shots: 2,
        crops_per_sample: 8,
        select: 2,
        n_test_per_class: 5,
        n_test_ood: 20,
        ..SynthConfig::default()
    }
}

#[test]
fn data_written_to_disk_trains_and_scores_like_in_memory_data() {
    let cfg = small();
    let ds = synth_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_bank(p.join("labels.fbnk"), &ds.labels_mat()).unwrap();
    write_bank(p.join("train.fbnk"), &ds.train_mat()).unwrap();
    write_bank(p.join("test_id.fbnk"), &ds.test_id).unwrap();
    write_bank(p.join("test_ood.fbnk"), &ds.test_ood).unwrap();
    write_manifest(p.join("manifest.jsonl"), &ds.manifest).unwrap();

    let records = read_manifest(p.join("manifest.jsonl")).unwrap();
    let bank = label_bank(&read_bank(p.join("labels.fbnk")).unwrap(), &records).unwrap();
    let set = training_set(&read_bank(p.join("train.fbnk")).unwrap(), &records).unwrap();
    assert_eq!(bank, ds.bank);
    assert_eq!(set, ds.train);

    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let init = init_model(cfg.dim, default_hidden(cfg.dim), TransformMode::ScaleShift, 3).unwrap();
    let (a, ta) = train(init.clone(), &bank, &set, &tcfg).unwrap();
    let (b, tb) = train(init, &ds.bank, &ds.train, &tcfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.to_csv(), tb.to_csv());
    assert_eq!(a.meta.trace_digest, ta.digest());

    let ck = p.join("model.nftc");
    save_checkpoint(&a, &ck).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    assert_eq!(loaded, a);

    let test_id = read_bank(p.join("test_id.fbnk")).unwrap();
    assert_eq!(role_rows(&test_id, &records, ManifestRole::TestId).unwrap().len(), 20);
    let id = score_rows(ScoreMethod::Krnft, Some(&loaded.model), &test_id, &bank, 0.01).unwrap();
    let ood = score_rows(ScoreMethod::Krnft, Some(&loaded.model), &ds.test_ood, &bank, 0.01).unwrap();
    let report = evaluate(&id, &ood, 0.95).unwrap();
    assert_eq!((report.n_id, report.n_ood), (20, 20));
    assert!(report.auroc > 0.5);
}

#[test]
fn crops_on_disk_reselect_to_the_same_training_split() {
    let cfg = small();
    let ds = synth_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crops.fbnk");
    write_bank(&path, &ds.crops_mat()).unwrap();
    let sets = crop_sets(&read_bank(&path).unwrap(), &ds.manifest).unwrap();
    assert_eq!(sets, ds.crops);
    let sel: Vec<_> = sets
        .iter()
        .map(|c| select_outliers(c, ds.bank.row(c.label), cfg.select).unwrap())
        .collect();
    let train = build_training_set(&sel, &sets).unwrap();
    assert_eq!(training_mat(&train, cfg.dim).unwrap(), ds.train_mat());
    let recs = training_records(&sel, &sets);
    let want: Vec<_> = ds
        .manifest
        .iter()
        .filter(|r| matches!(r.role, ManifestRole::TrainPos | ManifestRole::TrainNeg))
        .cloned()
        .collect();
    assert_eq!(recs, want);
}

#[test]
fn rewriting_a_bank_is_byte_stable() {
    let ds = synth_dataset(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.fbnk"), dir.path().join("b.fbnk"));
    write_bank(&a, &ds.test_ood).unwrap();
    write_bank(&b, &read_bank(&a).unwrap()).unwrap();
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}
