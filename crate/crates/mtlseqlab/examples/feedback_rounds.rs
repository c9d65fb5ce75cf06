//! Watch the mutual-feedback loop at inference. Round 0 serves every head the
//! uniform vector; each later round re-encodes with the other task's previous
//! output distribution, so the two streams can pull each other's boundaries
//! into agreement.

use mtlseqlab::corpus::{build_vocabularies, default_inventory, gen_synthetic, SynthSpec};
use mtlseqlab::encoders::CharCnnConfig;
use mtlseqlab::evaluation::{boundary_inconsistency, decode_entities};
use mtlseqlab::multitask::{train, FeedbackCache, MtlConfig, MtlModel, TaskId};
use mtlseqlab::numerics::{OptimizerState, Rng};

fn main() -> mtlseqlab::Result<()> {
    let spec = SynthSpec {
        train: 40,
        dev: 5,
        test: 40,
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
    let mut rng = Rng::new(2);
    let mut model = MtlModel::new(config, vocab, None, &mut rng)?;
    let mut opt = OptimizerState::new(0.001, 0.9)?;
    let mut cache = FeedbackCache::new();
    train(
        &mut model, &train_set, &train_set, 150, &mut opt, &mut cache, false, &mut rng,
    )?;

    for rounds in 0..4 {
        let mut mer_pred = Vec::new();
        let mut men_pred = Vec::new();
        let mut flips = 0;
        for s in &test_set {
            let p = model.predict(&s.tokens, rounds)?;
            if rounds > 0 {
                let prev = model.predict(&s.tokens, rounds - 1)?;
                flips += p
                    .mer_tags
                    .iter()
                    .zip(&prev.mer_tags)
                    .chain(p.men_tags.iter().zip(&prev.men_tags))
                    .filter(|(a, b)| a != b)
                    .count();
            }
            mer_pred.extend(decode_entities(s.id, &p.mer_tags, model.tag_set(TaskId::Mer))?);
            men_pred.extend(decode_entities(s.id, &p.men_tags, model.tag_set(TaskId::Men))?);
        }
        println!(
            "rounds {rounds}: boundary inconsistency {:.4}  (tags changed vs previous round: {flips})",
            boundary_inconsistency(&mer_pred, &men_pred)
        );
    }
    Ok(())
}
