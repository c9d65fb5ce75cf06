//! Train a small joint model on the synthetic corpus and score both tasks on
//! the test split, entirely through the library API.

use mtlseqlab::corpus::{build_vocabularies, default_inventory, gen_synthetic, SynthSpec};
use mtlseqlab::encoders::CharCnnConfig;
use mtlseqlab::evaluation::{boundary_inconsistency, concept_prf, corpus_spans, decode_entities};
use mtlseqlab::multitask::{train, FeedbackCache, MtlConfig, MtlModel, TaskId};
use mtlseqlab::numerics::{OptimizerState, Rng};

fn main() -> mtlseqlab::Result<()> {
    let spec = SynthSpec {
        train: 40,
        dev: 5,
        test: 20,
        noise: 0.0,
        seed: 7,
    };
    let (train_set, _, test_set) = gen_synthetic(&spec, &default_inventory())?;
    let vocab = build_vocabularies(&train_set, 1)?;
    let config = MtlConfig {
        layers: 2,
        hidden_dim: 32,
        word_dim: 32,
        char: CharCnnConfig {
            char_dim: 16,
            window: 3,
            num_filters: 16,
        },
        dropout: 0.5,
        ..MtlConfig::default()
    };

    let mut rng = Rng::new(1);
    let mut model = MtlModel::new(config, vocab, None, &mut rng)?;
    let mut opt = OptimizerState::new(0.001, 0.9)?;
    let mut cache = FeedbackCache::new();
    let records = train(
        &mut model, &train_set, &train_set, 150, &mut opt, &mut cache, false, &mut rng,
    )?;
    let tail: f64 = records[records.len() - 60..]
        .iter()
        .map(|r| r.loss)
        .sum::<f64>()
        / 60.0;
    println!("steps {}  mean loss over last 60: {tail:.4}", records.len());

    // predict both streams sentence by sentence, then score spans
    let mut mer_pred = Vec::new();
    let mut men_pred = Vec::new();
    for s in &test_set {
        let p = model.predict(&s.tokens, 1)?;
        mer_pred.extend(decode_entities(s.id, &p.mer_tags, model.tag_set(TaskId::Mer))?);
        men_pred.extend(decode_entities(s.id, &p.men_tags, model.tag_set(TaskId::Men))?);
    }
    let mer_gold = corpus_spans(&test_set, TaskId::Mer)?;
    let men_gold = corpus_spans(&test_set, TaskId::Men)?;
    let mer = concept_prf(&mer_gold, &mer_pred);
    let men = concept_prf(&men_gold, &men_pred);
    println!(
        "test MER  P {:.3} R {:.3} F1 {:.3}",
        mer.precision, mer.recall, mer.f1
    );
    println!(
        "test MEN  P {:.3} R {:.3} F1 {:.3}",
        men.precision, men.recall, men.f1
    );
    println!(
        "boundary inconsistency between streams: {:.4}",
        boundary_inconsistency(&mer_pred, &men_pred)
    );
    Ok(())
}
