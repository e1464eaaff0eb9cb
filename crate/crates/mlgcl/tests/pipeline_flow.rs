//! Cross-module flows: train, checkpoint to disk, reload, embed, probe, and
//! a learning-signal check on a graph where topology carries the classes.

use mlgcl::augment::AugmentationSpec;
use mlgcl::eval::{evaluate, stratified_split, ProbeConfig};
use mlgcl::model::{load_model, save_model};
use mlgcl::pipeline::{embed, train, TrainConfig};
use mlgcl::synth::{sbm_graph, toy_graph};

#[test]
fn train_checkpoint_reload_probe_round_trip() {
    let g = toy_graph();
    let cfg = TrainConfig {
        epochs: 25,
        embedding_dim: 8,
        augmentation: AugmentationSpec { k: 2, ..AugmentationSpec::default() },
        ..TrainConfig::default()
    };
    let out = train(&g, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_model(&out.params, &path).unwrap();
    let reloaded = load_model(&path).unwrap();

    let emb_direct = embed(&g, &out.params).unwrap();
    let emb_reloaded = embed(&g, &reloaded).unwrap();
    assert_eq!(emb_direct, emb_reloaded, "checkpoint round trip must be exact");

    let probe = ProbeConfig { runs: 3, epochs: 60, ..ProbeConfig::default() };
    let summary = evaluate(
        &emb_reloaded,
        g.labels.as_ref().unwrap(),
        g.splits.as_ref().unwrap(),
        &probe,
    )
    .unwrap();
    assert_eq!(summary.mean, 1.0, "toy classes are trivially separable after training");
}

#[test]
fn contrastive_embeddings_beat_noisy_raw_features_when_topology_is_informative() {
    // Two planted blocks: dense inside, sparse across. Features carry the
    // class too, but under heavy noise, so the probe on raw features leaves
    // room that only the topology can close.
    let g = sbm_graph(&[40, 40], 0.25, 0.02, 8, 0.9, 11).unwrap();
    let labels = g.labels.clone().unwrap();
    let split = stratified_split(&labels, 0.15, 0.15, 3).unwrap();
    let probe = ProbeConfig { runs: 5, ..ProbeConfig::default() };

    let raw = evaluate(&g.features, &labels, &split, &probe).unwrap();

    let cfg = TrainConfig {
        epochs: 60,
        embedding_dim: 16,
        augmentation: AugmentationSpec { k: 5, ..AugmentationSpec::default() },
        patience: 60,
        ..TrainConfig::default()
    };
    let out = train(&g, &cfg).unwrap();
    let emb = embed(&g, &out.params).unwrap();
    let learned = evaluate(&emb, &labels, &split, &probe).unwrap();

    eprintln!(
        "raw {:.4} +/- {:.4}, learned {:.4} +/- {:.4}",
        raw.mean, raw.std, learned.mean, learned.std
    );
    assert!(
        learned.mean >= raw.mean + 0.05,
        "learned {:.4} vs raw features {:.4}",
        learned.mean,
        raw.mean
    );
    assert!(learned.mean >= 0.9, "learned embeddings scored only {:.4}", learned.mean);
}
