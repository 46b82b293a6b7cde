use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nft_ood::data::{
    self, crop_sets, label_bank, read_bank, read_manifest, role_rows, training_mat, training_records,
    training_set, write_bank, write_manifest, ManifestRecord, ManifestRole,
};
use nft_ood::gradcheck;
use nft_ood::mining::{build_training_set, mine_negative_labels, select_outliers, CandidateLexicon};
use nft_ood::model::{default_hidden, init_model, load_checkpoint, save_checkpoint};
use nft_ood::scoring::{decide, evaluate, hmean, score_rows, ScoreMethod, Truth};
use nft_ood::trainer::train;
use nft_ood::{FeatureBank, Mat};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.jsonl";
pub const CHECKPOINT: &str = "checkpoint.nftc";
pub const TRACE: &str = "loss_trace.csv";
pub const SCORES: &str = "scores.csv";
pub const METRICS: &str = "metrics.json";
pub const GRADCHECK_REPORT: &str = "gradcheck.csv";
pub const NEGATIVES: &str = "negatives.csv";
pub const NEG_BANK: &str = "neg_labels.fbnk";

fn io(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core(nft_ood::Error::Format(e.to_string()))
}

/// Names the file in IO errors, which otherwise only carry the OS message.
fn at<T>(path: &Path, r: nft_ood::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        nft_ood::Error::Io(io) => {
            CliError::Core(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())).into())
        }
        nft_ood::Error::Format(m) => CliError::Core(nft_ood::Error::Format(format!("{}: {m}", path.display()))),
        other => CliError::Core(other),
    })
}

fn load_bank(path: &Path) -> Result<Mat, CliError> {
    at(path, read_bank(path))
}

fn kebab<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn load_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, CliError> {
    let p = dir.join(MANIFEST);
    at(&p, read_manifest(&p))
}

fn load_labels(dir: &Path, records: &[ManifestRecord]) -> Result<FeatureBank, CliError> {
    let labels = load_bank(&dir.join(ManifestRole::PosLabel.bank_file()))?;
    Ok(label_bank(&labels, records)?)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let ds = data::synth_dataset(&cfg.synth)?;
    cfg.echo(out)?;
    write_bank(out.join(ManifestRole::PosLabel.bank_file()), &ds.labels_mat())?;
    write_bank(out.join(ManifestRole::TrainPos.bank_file()), &ds.train_mat())?;
    write_bank(out.join(ManifestRole::TestId.bank_file()), &ds.test_id)?;
    write_bank(out.join(ManifestRole::TestOod.bank_file()), &ds.test_ood)?;
    write_bank(out.join(ManifestRole::Crop.bank_file()), &ds.crops_mat())?;
    write_manifest(out.join(MANIFEST), &ds.manifest)?;
    println!(
        "synth: {} labels ({} ID), {} train rows, {} ID / {} OOD test images -> {}",
        ds.bank.n_rows(),
        ds.bank.n_pos(),
        ds.train.pos.len() + ds.train.neg.len(),
        ds.test_id.rows(),
        ds.test_ood.rows(),
        out.display()
    );
    Ok(())
}

pub fn mine_neg(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    let need = |p: &Option<PathBuf>, flag: &str| {
        p.clone().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
    };
    let features = load_bank(&need(&cfg.paths.lexicon, "lexicon")?)?;
    let id_bank = load_bank(&need(&cfg.paths.id_bank, "id-bank")?)?;
    let names = match &cfg.paths.names {
        Some(p) => fs::read_to_string(p).map_err(io)?.lines().map(str::to_owned).collect(),
        None => (0..features.rows()).map(|i| format!("cand{i}")).collect(),
    };
    let lexicon = CandidateLexicon::new(features, names)?;
    let stat = cfg.mining.stat()?;
    let stats = nft_ood::mining::candidate_stats(&lexicon, &id_bank, stat)?;
    let picked = mine_negative_labels(&lexicon, &id_bank, cfg.mining.m, stat)?;
    cfg.echo(out)?;
    let mut w = csv::Writer::from_path(out.join(NEGATIVES)).map_err(csv_err)?;
    w.write_record(["rank", "index", "name", "stat"]).map_err(csv_err)?;
    for (rank, &i) in picked.iter().enumerate() {
        w.write_record([rank.to_string(), i.to_string(), lexicon.names[i].clone(), stats[i].to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    let rows: Vec<&[f64]> = picked.iter().map(|&i| lexicon.features.row(i)).collect();
    write_bank(out.join(NEG_BANK), &Mat::from_rows(&rows, lexicon.features.cols())?)?;
    println!("mine-neg: kept {} of {} candidates -> {}", picked.len(), lexicon.names.len(), out.display());
    Ok(())
}

fn is_train(r: &ManifestRecord) -> bool {
    matches!(r.role, ManifestRole::TrainPos | ManifestRole::TrainNeg)
}

fn is_label(r: &ManifestRecord) -> bool {
    matches!(r.role, ManifestRole::PosLabel | ManifestRole::NegLabel)
}

pub fn select_crops(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    let records = load_manifest(data)?;
    let bank = load_labels(data, &records)?;
    let crops = crop_sets(&load_bank(&data.join(ManifestRole::Crop.bank_file()))?, &records)?;
    let selections = crops
        .iter()
        .map(|c| {
            if c.label >= bank.n_pos() {
                return Err(nft_ood::Error::BadClassIndex {
                    index: c.label,
                    n_classes: bank.n_pos(),
                });
            }
            select_outliers(c, bank.row(c.label), cfg.mining.q)
        })
        .collect::<nft_ood::Result<Vec<_>>>()?;
    let train = build_training_set(&selections, &crops)?;
    let train_mat = training_mat(&train, bank.dim())?;

    // Labels, then the new training rows, then everything else in input order.
    let mut manifest: Vec<ManifestRecord> = records.iter().filter(|r| is_label(r)).cloned().collect();
    manifest.extend(training_records(&selections, &crops));
    manifest.extend(records.iter().filter(|r| !is_label(r) && !is_train(r)).cloned());

    cfg.echo(out)?;
    let same_dir = fs::canonicalize(data).map_err(io)? == fs::canonicalize(out).map_err(io)?;
    if !same_dir {
        let files: BTreeSet<&str> = manifest.iter().filter(|r| !is_train(r)).map(|r| r.role.bank_file()).collect();
        for f in files {
            fs::copy(data.join(f), out.join(f)).map_err(io)?;
        }
    }
    write_bank(out.join(ManifestRole::TrainPos.bank_file()), &train_mat)?;
    write_manifest(out.join(MANIFEST), &manifest)?;
    println!(
        "select-crops: {} crop sets, {} train_pos / {} train_neg rows -> {}",
        crops.len(),
        train.pos.len(),
        train.neg.len(),
        out.display()
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    let records = load_manifest(data)?;
    let bank = load_labels(data, &records)?;
    let set = training_set(&load_bank(&data.join(ManifestRole::TrainPos.bank_file()))?, &records)?;
    let hidden = cfg.model.hidden.unwrap_or_else(|| default_hidden(bank.dim()));
    let state = init_model(bank.dim(), hidden, cfg.model.mode, cfg.seed)?.with_shared_net(cfg.model.shared_net);
    let (ckpt, trace) = train(state, &bank, &set, &cfg.train)?;
    cfg.echo(out)?;
    save_checkpoint(&ckpt, out.join(CHECKPOINT))?;
    fs::write(out.join(TRACE), trace.to_csv()).map_err(io)?;
    for (e, m) in trace.epoch_means().iter().enumerate() {
        println!("epoch {e}: mean total loss {m:.6}");
    }
    println!("train: {} steps -> {}", trace.records.len(), out.display());
    Ok(())
}

struct Split {
    ids: Vec<String>,
    images: Mat,
    truth: Truth,
}

fn load_split(dir: &Path, records: &[ManifestRecord], role: ManifestRole, truth: Truth) -> Result<Option<Split>, CliError> {
    if !records.iter().any(|r| r.role == role) {
        return Ok(None);
    }
    let mat = load_bank(&dir.join(role.bank_file()))?;
    let recs = role_rows(&mat, records, role)?;
    let rows: Vec<&[f64]> = recs.iter().map(|r| mat.row(r.row)).collect();
    Ok(Some(Split {
        ids: recs.iter().map(|r| r.id.clone()).collect(),
        images: Mat::from_rows(&rows, mat.cols())?,
        truth,
    }))
}

pub fn score(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.data_dir()?;
    let out = cfg.out_dir()?;
    let records = load_manifest(data)?;
    let bank = load_labels(data, &records)?;
    let state = match (&cfg.paths.checkpoint, cfg.score.method) {
        (Some(p), _) => {
            let ckpt = load_checkpoint(p)?;
            ckpt.check_dim(bank.dim())?;
            Some(ckpt.model)
        }
        (None, ScoreMethod::Krnft) => return Err(CliError::Usage("--method krnft needs --checkpoint".into())),
        (None, _) => None,
    };
    let splits: Vec<Split> = [(ManifestRole::TestId, Truth::Id), (ManifestRole::TestOod, Truth::Ood)]
        .into_iter()
        .filter_map(|(role, truth)| load_split(data, &records, role, truth).transpose())
        .collect::<Result<_, _>>()?;
    if splits.is_empty() {
        return Err(CliError::Core(nft_ood::Error::Schema("manifest has no test_id or test_ood records".into())));
    }
    let mut rows = Vec::new();
    for s in &splits {
        let scores = score_rows(cfg.score.method, state.as_ref(), &s.images, &bank, cfg.score.tau_score)?;
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(CliError::Core(nft_ood::Error::NonFinite));
        }
        rows.extend(s.ids.iter().cloned().zip(scores).map(|(id, x)| (id, x, s.truth)));
    }
    cfg.echo(out)?;
    let mut w = csv::Writer::from_path(out.join(SCORES)).map_err(csv_err)?;
    w.write_record(["id", "score", "truth"]).map_err(csv_err)?;
    for (id, x, t) in &rows {
        w.write_record([id.as_str(), &x.to_string(), t.as_str()]).map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    let called_id = rows.iter().filter(|(_, x, _)| decide(*x, cfg.score.gamma) == Truth::Id).count();
    println!(
        "score: {} images with {}, {} at or above gamma={} -> {}",
        rows.len(),
        kebab(&cfg.score.method),
        called_id,
        cfg.score.gamma,
        out.display()
    );
    Ok(())
}

/// Reads `id,score,truth` files; rows with an empty truth are skipped.
fn read_scores(paths: &[PathBuf]) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for p in paths {
        let mut r = csv::Reader::from_path(p).map_err(csv_err)?;
        let headers = r.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "score", "truth"] {
            return Err(CliError::Core(nft_ood::Error::Format(format!(
                "{}: expected header id,score,truth",
                p.display()
            ))));
        }
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let bad = || CliError::Core(nft_ood::Error::Format(format!("{}: bad row {:?}", p.display(), rec)));
            let x: f64 = rec[1].parse().map_err(|_| bad())?;
            match &rec[2] {
                "ID" => id.push(x),
                "OOD" => ood.push(x),
                "" => skipped += 1,
                _ => return Err(bad()),
            }
        }
    }
    if skipped > 0 {
        log::warn!("ignored {skipped} rows without a truth label");
    }
    Ok((id, ood))
}

fn parse_pair(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Usage(format!("--pair expects two numbers `a,b`, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn eval(cfg: &RunConfig, files: &[PathBuf], pair: Option<&str>) -> Result<(), CliError> {
    let h = match pair {
        Some(s) => {
            let (a, b) = parse_pair(s)?;
            Some(hmean(a, b).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        None => None,
    };
    let json = if files.is_empty() {
        match h {
            Some(h) => format!("{{\"hmean\": {h:.4}}}\n"),
            None => return Err(CliError::Usage("eval needs score files or --pair".into())),
        }
    } else {
        let (id, ood) = read_scores(files)?;
        evaluate(&id, &ood, cfg.score.tpr)?.to_json(h)
    };
    if let Some(out) = &cfg.paths.out {
        cfg.echo(out)?;
        fs::write(out.join(METRICS), &json).map_err(io)?;
    }
    print!("{json}");
    Ok(())
}

pub fn gradcheck_cmd(cfg: &RunConfig, corrupt: bool) -> Result<(), CliError> {
    let results = gradcheck::run(&cfg.gradcheck, corrupt)?;
    if let Some(out) = &cfg.paths.out {
        cfg.echo(out)?;
        let mut w = csv::Writer::from_path(out.join(GRADCHECK_REPORT)).map_err(csv_err)?;
        w.write_record(["mode", "variant", "instance", "max_rel_error", "worst_param", "passed"])
            .map_err(csv_err)?;
        for r in &results {
            w.write_record([
                kebab(&r.mode),
                kebab(&r.variant),
                r.instance.to_string(),
                format!("{:e}", r.max_rel_error),
                r.worst_param.clone(),
                r.passed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    if let Some(w) = worst {
        println!(
            "gradcheck: {} cases, {} failed, worst relative error {:.3e} ({} / {} / {})",
            results.len(),
            failed,
            w.max_rel_error,
            kebab(&w.mode),
            kebab(&w.variant),
            w.worst_param
        );
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} gradient checks exceeded tolerance {:e}",
            cfg.gradcheck.tolerance
        )));
    }
    Ok(())
}
