mod common;

use common::{raw_encoder, small_data};
use l2c_core::encoders::TextTower;
use l2c_core::numerics::Module;
use l2c_core::stage1::{
    eval_caption2caption, train_stage1, LogEntry, Stage1Config, Stage1Method, Stage1Trainable,
    TrainLog,
};
use l2c_core::Error;

fn quick(methods: Vec<Stage1Method>, trainable: Stage1Trainable, epochs: usize) -> Stage1Config {
    Stage1Config {
        methods,
        trainable,
        epochs,
        batch_size: 32,
        warmup_steps: 4,
        eval_every_epoch: false,
        ..Stage1Config::default()
    }
}

#[test]
fn zero_epochs_leave_the_encoder_bit_identical() {
    let (train, _) = small_data(64, 16, 1);
    let enc = raw_encoder(1);
    for trainable in [Stage1Trainable::Lora, Stage1Trainable::FrozenPlusAdaptor] {
        let out = train_stage1(
            &quick(vec![Stage1Method::SimcseSupervised], trainable, 0),
            &train,
            None,
            enc.clone(),
            1,
        )
        .unwrap();
        assert_eq!(out.tower.encoder.base_checksum(), enc.base_checksum());
        for (a, b) in out
            .tower
            .encoder
            .base_params()
            .iter()
            .zip(enc.base_params())
        {
            assert_eq!(a.value, b.value);
        }
        assert!(out.log.entries.is_empty());
    }
}

#[test]
fn lora_training_freezes_base_weights() {
    let (train, _) = small_data(128, 16, 2);
    let enc = raw_encoder(2);
    let cfg = quick(
        vec![Stage1Method::Mntp, Stage1Method::SimcseSupervised],
        Stage1Trainable::Lora,
        1,
    );
    let out = train_stage1(&cfg, &train, None, enc.clone(), 2).unwrap();
    assert_eq!(out.tower.encoder.base_checksum(), enc.base_checksum());
    assert!(out.tower.encoder.has_lora());
    assert!(out.tower.encoder.lora_params().iter().any(|p| p
        .value
        .data()
        .iter()
        .any(|&v| v != 0.0)));
}

#[test]
fn frozen_plus_adaptor_trains_only_the_head() {
    let (train, _) = small_data(128, 16, 3);
    let enc = raw_encoder(3);
    let cfg = quick(
        vec![
            Stage1Method::SimcseSupervised,
            Stage1Method::SimcseUnsupervised,
        ],
        Stage1Trainable::FrozenPlusAdaptor,
        1,
    );
    let out = train_stage1(&cfg, &train, None, enc.clone(), 3).unwrap();
    assert_eq!(out.tower.encoder.checksum(), enc.checksum());
    assert!(!out.tower.encoder.has_lora());
    assert!(out.tower.head.is_some());
}

#[test]
fn supervised_loss_falls_over_epochs() {
    let (train, _) = small_data(256, 16, 4);
    let cfg = quick(
        vec![Stage1Method::SimcseSupervised],
        Stage1Trainable::Lora,
        3,
    );
    let out = train_stage1(&cfg, &train, None, raw_encoder(4), 4).unwrap();
    let means = out.log.epoch_means("simcse_supervised");
    assert_eq!(means.len(), 3);
    assert!(means[2] < means[0], "{means:?}");
}

#[test]
fn phases_run_in_fixed_order() {
    let cfg = Stage1Config {
        methods: vec![
            Stage1Method::SimcseUnsupervised,
            Stage1Method::Mntp,
            Stage1Method::SimcseSupervised,
            Stage1Method::Mntp,
        ],
        ..Stage1Config::default()
    };
    assert_eq!(
        cfg.phases(),
        vec![
            Stage1Method::Mntp,
            Stage1Method::SimcseSupervised,
            Stage1Method::SimcseUnsupervised
        ]
    );
    let (train, _) = small_data(64, 16, 5);
    let out = train_stage1(
        &quick(cfg.methods.clone(), Stage1Trainable::Lora, 1),
        &train,
        None,
        raw_encoder(5),
        5,
    )
    .unwrap();
    let phases: Vec<&str> = out
        .log
        .entries
        .iter()
        .filter_map(|e| match e {
            LogEntry::Epoch { phase, .. } => Some(phase.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(phases, ["mntp", "simcse_supervised", "simcse_unsupervised"]);
}

#[test]
fn mntp_without_lora_is_a_config_error() {
    let (train, _) = small_data(64, 16, 6);
    let cfg = quick(
        vec![Stage1Method::Mntp],
        Stage1Trainable::FrozenPlusAdaptor,
        1,
    );
    assert!(matches!(
        train_stage1(&cfg, &train, None, raw_encoder(6), 6),
        Err(Error::Config(_))
    ));
}

#[test]
fn unsupervised_without_dropout_is_rejected() {
    let (train, _) = small_data(64, 16, 7);
    let mut enc = raw_encoder(7);
    enc.config.dropout_rate = 0.0;
    let cfg = quick(
        vec![Stage1Method::SimcseUnsupervised],
        Stage1Trainable::Lora,
        1,
    );
    assert!(matches!(
        train_stage1(&cfg, &train, None, enc, 7),
        Err(Error::Usage(_))
    ));
}

#[test]
fn divergence_is_a_numeric_error() {
    let (train, _) = small_data(128, 16, 8);
    let cfg = Stage1Config {
        lr: 1e200,
        warmup_steps: 0,
        ..quick(
            vec![Stage1Method::SimcseSupervised],
            Stage1Trainable::Lora,
            2,
        )
    };
    match train_stage1(&cfg, &train, None, raw_encoder(8), 8) {
        Err(Error::Numeric(msg)) => {
            assert!(msg.contains("step") || msg.contains("non-finite"), "{msg}")
        }
        other => panic!("expected a numeric error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn same_seed_same_run() {
    let (train, eval) = small_data(128, 32, 9);
    let cfg = Stage1Config {
        eval_every_epoch: true,
        ..quick(
            vec![Stage1Method::SimcseSupervised],
            Stage1Trainable::Lora,
            1,
        )
    };
    let a = train_stage1(&cfg, &train, Some(&eval), raw_encoder(9), 9).unwrap();
    let b = train_stage1(&cfg, &train, Some(&eval), raw_encoder(9), 9).unwrap();
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    assert_eq!(a.tower, b.tower);
    let c = train_stage1(&cfg, &train, Some(&eval), raw_encoder(9), 10).unwrap();
    assert_ne!(a.log.losses(), c.log.losses());
}

#[test]
fn log_round_trips_and_tower_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let (train, eval) = small_data(64, 32, 10);
    let out = train_stage1(
        &quick(
            vec![Stage1Method::SimcseSupervised],
            Stage1Trainable::FrozenPlusAdaptor,
            1,
        ),
        &train,
        None,
        raw_encoder(10),
        10,
    )
    .unwrap();
    let path = dir.path().join("log.jsonl");
    out.log.write_jsonl(&path).unwrap();
    assert_eq!(TrainLog::read_jsonl(&path).unwrap(), out.log);
    out.tower.save(dir.path(), "text").unwrap();
    let back = TextTower::load(dir.path(), "text").unwrap();
    assert_eq!(back.checksum(), out.tower.checksum());
    assert_eq!(back.encoder.config, out.tower.encoder.config);
    assert_eq!(
        eval_caption2caption(&back, &eval).unwrap(),
        eval_caption2caption(&out.tower, &eval).unwrap()
    );
}
