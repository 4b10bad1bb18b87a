use d2k::backbone::{train_rec, BackboneConfig, Injection, RecModel};
use d2k::dataio::{gen_synthetic, partition, PartitionConfig, Sample, Side, SynthConfig, SynthField};
use d2k::encoder::{train_encoder, EncoderConfig, EncoderModel};
use d2k::harness::auc;
use d2k::kbase::{generate_kb, KnowledgeBase};
use d2k::numeric::TrainConfig;
use d2k::utilize::{retrieve, Adaptation, QueryPlan};

fn config() -> SynthConfig {
    SynthConfig {
        n_users: 40,
        n_items: 40,
        n_ctx: 4,
        fields: vec![
            SynthField::id("user", Side::User, 0.3),
            SynthField::multi("tags", Side::User, 6, (1, 3), 1.0),
            SynthField::id("item", Side::Item, 0.3),
            SynthField::attr("cat", Side::Item, 6, 1.0),
            SynthField::id("ctx", Side::Context, 1.0),
        ],
        n_samples: 12_000,
        n_windows: 4,
        window_seconds: 1000,
        sigma: 1.0,
        bias: -0.5,
        drift_rate: 0.0,
    }
}

fn pick(samples: &[Sample], idx: Vec<usize>) -> Vec<Sample> {
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

#[test]
fn knowledge_from_old_logs_lifts_a_model_trained_on_new_logs() {
    let data = gen_synthetic(&config(), 11).unwrap();
    let part = partition(
        &data.samples,
        PartitionConfig {
            window_seconds: 1000,
            p1: 2,
            p2: 3,
            gap: 0,
            origin: Some(0),
        },
    )
    .unwrap();
    // a short training window keeps the plain model data-starved
    let old = pick(&data.samples, part.indices(1..=2));
    let train = pick(&data.samples, part.indices(3..=3));
    let test = pick(&data.samples, part.indices(4..=4));
    let train = &train[..train.len() / 4];

    let train_cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let enc = train_encoder(
        &old,
        &data.schema,
        &data.vocab_sizes,
        EncoderConfig {
            train: train_cfg,
            ..EncoderConfig::default()
        },
    )
    .unwrap();
    let kb = generate_kb(&old, &enc, &data.schema).unwrap();
    let hits = retrieve(&test, &kb, &QueryPlan::new(&data.schema)).hit_rate();
    assert!(hits > 0.5, "hit rate {hits}");

    let labels: Vec<f64> = test.iter().map(Sample::label_f64).collect();
    let fit = |injection, adaptation| {
        let cfg = BackboneConfig {
            injection,
            adaptation,
            knowledge_dim: kb.dim(),
            train: train_cfg,
            ..BackboneConfig::default()
        };
        train_rec(train, Some(&kb), &data.schema, &data.vocab_sizes, cfg).unwrap()
    };
    let plain = fit(Injection::Plain, Adaptation::None);
    let with_kb = fit(Injection::TowerLr, Adaptation::Share);
    let plain_auc = auc(&plain.predict(&test, None).unwrap(), &labels).unwrap();
    let kb_auc = auc(&with_kb.predict(&test, Some(&kb)).unwrap(), &labels).unwrap();
    assert!(kb_auc > plain_auc + 0.01, "knowledge {kb_auc:.4} vs plain {plain_auc:.4}");

    // everything survives a trip through disk
    let dir = tempfile::tempdir().unwrap();
    enc.save(dir.path().join("enc")).unwrap();
    kb.save(dir.path().join("kb")).unwrap();
    with_kb.save(dir.path().join("rec")).unwrap();
    let enc2 = EncoderModel::load(dir.path().join("enc")).unwrap();
    let kb2 = KnowledgeBase::load(dir.path().join("kb")).unwrap();
    let rec2 = RecModel::load(dir.path().join("rec")).unwrap();
    assert_eq!(generate_kb(&old, &enc2, &data.schema).unwrap().checksum(), kb.checksum());
    assert_eq!(rec2.predict(&test, Some(&kb2)).unwrap(), with_kb.predict(&test, Some(&kb)).unwrap());
}
