use smoa_core::checkpoint;
use smoa_core::experiment::{eval_checkpoint, train_run, ExperimentConfig};

#[test]
fn smoke_run_checkpoints_reload_with_identical_scores() {
    let cfg = ExperimentConfig::smoke();
    let dir = tempfile::tempdir().unwrap();
    let run = train_run(&cfg, Some(dir.path())).unwrap();
    assert_eq!(run.report.phases.len(), 2);
    assert_eq!(run.model.backbone_hash(), run.phase1.backbone_hash());

    let loaded = checkpoint::load(&dir.path().join("checkpoints/phase2.ckpt")).unwrap();
    let names: Vec<String> = ["test", "LX_A", "PI_EN", "OV_SH"].map(String::from).to_vec();
    let from_disk = eval_checkpoint(&cfg, &loaded, &names).unwrap();
    let in_memory = eval_checkpoint(&cfg, &run.model, &names).unwrap();
    assert_eq!(from_disk, in_memory);
    let reported = run.report.final_accuracy().unwrap();
    for (name, acc) in &from_disk {
        assert_eq!(reported[name], *acc, "{name}");
    }
}

#[test]
fn phase1_checkpoint_has_no_adapters() {
    let cfg = ExperimentConfig::smoke();
    let dir = tempfile::tempdir().unwrap();
    train_run(&cfg, Some(dir.path())).unwrap();
    let p1 = checkpoint::load(&dir.path().join("checkpoints/phase1.ckpt")).unwrap();
    let p2 = checkpoint::load(&dir.path().join("checkpoints/phase2.ckpt")).unwrap();
    assert!(p1.smoa.is_none());
    assert!(p2.smoa.is_some());
    assert_eq!(p1.backbone_hash(), p2.backbone_hash());
}
