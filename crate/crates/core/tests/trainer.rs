mod common;

use std::collections::BTreeMap;
use std::path::Path;

use alignlab::encoders::Modality;
use alignlab::trainer::align::{check_trainable_set, init_params};
use alignlab::trainer::{
    ablate, modality_gap_report, run_align, train_align, train_align_with, train_lightcontrol, train_lora, AblationAxis, Encoded, Lab,
    PipelineMode, PromptSet, RunConfig,
};
use common::short_run;
use diffcore::Tensor;

/// Lines of `metrics.jsonl` with the wall-clock field removed.
fn log_without_wall(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn trainable_set_is_checked_by_name() {
    let mut got = BTreeMap::new();
    got.insert("a.w".to_string(), Tensor::<f32>::zeros(&[1]));
    assert!(check_trainable_set(["a.w"].into_iter(), &got).is_ok());
    assert!(check_trainable_set(["a.w", "b.w"].into_iter(), &got).is_err());
    got.insert("frozen.w".to_string(), Tensor::zeros(&[1]));
    assert!(check_trainable_set(["a.w"].into_iter(), &got).is_err());
}

#[test]
fn training_moves_only_the_bridge() {
    let cfg = short_run(3);
    let lab = Lab::new(&cfg).unwrap();
    let frozen = lab.model.params().hash();
    let init = init_params(&cfg).unwrap();
    let out = train_align(&cfg, None).unwrap();
    assert_eq!(lab.model.params().hash(), frozen);
    assert_eq!(out.params.names().collect::<Vec<_>>(), init.names().collect::<Vec<_>>());
    assert_ne!(out.params.hash(), init.hash());
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|r| r.loss.is_finite() && r.loss_per_block.len() == cfg.mmdit.double_blocks));
}

#[test]
fn overlapped_pipeline_matches_sequential() {
    for strict in [true, false] {
        let mut cfg = short_run(10);
        cfg.strict = strict;
        let lab = Lab::new(&cfg).unwrap();
        let data = Encoded::new(&lab, &PromptSet::load(&cfg).unwrap().train).unwrap();
        let seq = train_align_with(&lab, &data, None).unwrap();
        let mut olab = lab.clone();
        olab.cfg.pipeline = PipelineMode::Overlapped;
        let mut params = init_params(&cfg).unwrap();
        let log = run_align(&olab, &data, &mut params, None).unwrap();
        if strict {
            assert_eq!(params.hash(), seq.params.hash());
        }
        for ((_, a), (_, b)) in params.iter().zip(seq.params.iter()) {
            let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
            assert!(diff <= 1e-6);
        }
        for (a, b) in log.iter().zip(&seq.log) {
            assert_eq!((a.step, a.seed, a.loss), (b.step, b.seed, b.loss));
        }
    }
}

#[test]
fn runs_are_deterministic_and_logged() {
    let cfg = short_run(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_align(&cfg, Some(a.path())).unwrap();
    let rb = train_align(&cfg, Some(b.path())).unwrap();
    assert_eq!(ra.hash, rb.hash);
    assert_eq!(ra.hash, alignlab::trainer::hash_file(&a.path().join("checkpoint.x2i")).unwrap());
    let (la, lb) = (log_without_wall(a.path()), log_without_wall(b.path()));
    assert_eq!(la.len(), 4);
    assert_eq!(la, lb);
    for key in ["step", "loss", "loss_per_block", "lr", "seed"] {
        assert!(la[0].get(key).is_some(), "{key}");
    }

    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train_align(&other, None).unwrap().hash, ra.hash);
}

#[test]
fn divergent_run_stops_with_a_dump() {
    let mut cfg = short_run(6);
    cfg.optim.lr = 1e30;
    let dir = tempfile::tempdir().unwrap();
    match train_align(&cfg, Some(dir.path())) {
        Err(alignlab::Error::NonFiniteLoss { step, .. }) => {
            assert!(step > 0);
            let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nan_dump.json")).unwrap()).unwrap();
            assert_eq!(dump["step"], step);
            assert_eq!(dump["prompts"].as_array().unwrap().len(), cfg.batch_size);
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.log.last().map(|r| r.loss))),
    }
}

#[test]
fn fresh_adapters_start_at_the_baseline() {
    let cfg = short_run(2);
    let stage1 = train_align(&cfg, None).unwrap().checkpoint;
    let lc = train_lightcontrol(&cfg, &stage1, None).unwrap();
    assert_eq!(lc.summary.initial_val, lc.summary.baseline_val);
    assert_eq!(lc.log.len(), 3);
    assert!(lc.checkpoint.arrays.names().any(|n| n.starts_with("lightcontrol.")));
    assert!(lc.checkpoint.arrays.names().any(|n| n.starts_with("alignnet.")));

    let lora = train_lora(&cfg, Some(&stage1), None).unwrap();
    assert_eq!(lora.summary.initial_val, lora.summary.baseline_val);
    assert!(lora.checkpoint.arrays.names().all(|n| n.starts_with("alignnet.") || n.starts_with("lora.")));

    let mut mismatched = cfg.clone();
    mismatched.model_seed = 7;
    assert!(train_lightcontrol(&mismatched, &stage1, None).unwrap_err().is_config());
}

#[test]
fn loss_axis_ablation_has_one_row_per_divergence() {
    let cfg = short_run(2);
    let dir = tempfile::tempdir().unwrap();
    let report = ablate(&cfg, AblationAxis::Loss, Some(dir.path())).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["mse", "kl", "js", "rkl"]);
    assert!(dir.path().join("ablation.json").exists());
    assert!(std::fs::read_to_string(dir.path().join("ablation.txt")).unwrap().contains("rkl"));
    assert!("depth".parse::<AblationAxis>().unwrap_err().is_config());
}

#[test]
fn gap_report_covers_each_modality() {
    let cfg = short_run(2);
    let trained = train_align(&cfg, None).unwrap().params;
    let all = [Modality::Text, Modality::Image, Modality::Video, Modality::Audio];
    let report = modality_gap_report(&cfg, &trained, &all, 4).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert_eq!(row.samples, 4);
        // A fresh bridge emits zeros, which sit at distance one.
        assert!((row.init_distance - 1.0).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&row.trained_distance));
    }
    assert!(modality_gap_report(&cfg, &trained, &all[..1], 4).is_err());
}

#[test]
fn invalid_configs_fail_before_any_work() {
    assert!(RunConfig::from_json(r#"{"steps": 3}"#).is_ok());
    assert!(RunConfig::from_json(r#"{"stpes": 3}"#).unwrap_err().is_config());
    assert!(RunConfig::from_json(r#"{"batch_size": 0}"#).unwrap_err().is_config());
    assert!(RunConfig::from_json(r#"{"alignnet": {"kernel": 2}}"#).unwrap_err().is_config());
    assert!(RunConfig::from_json(r#"{"tap": "middle"}"#).unwrap_err().is_config());
    let mut cfg = RunConfig::default();
    cfg.optim.lr = -1.0;
    assert!(Lab::new(&cfg).unwrap_err().is_config());
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}
