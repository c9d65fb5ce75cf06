//! Round-trip a pretrained-embedding text file and stratify test entities by
//! vocabulary membership (IV / OOTV / OOEV / OOBV).

use std::collections::BTreeSet;

use mtlseqlab::corpus::{
    default_inventory, gen_synthetic, partition_oov, OovClass, SynthSpec,
};
use mtlseqlab::encoders::{load_embeddings, save_embeddings, EmbeddingTable};
use mtlseqlab::multitask::TaskId;
use mtlseqlab::numerics::Rng;

fn main() -> mtlseqlab::Result<()> {
    let spec = SynthSpec {
        train: 25,
        dev: 5,
        test: 25,
        noise: 0.0,
        seed: 7,
    };
    let (train_set, _, test_set) = gen_synthetic(&spec, &default_inventory())?;
    let train_words: BTreeSet<String> = train_set
        .iter()
        .flat_map(|s| s.tokens.iter().cloned())
        .collect();

    // a pretrained table that knows the training words plus a few test-only
    // surfaces, written to disk and read back
    let mut rng = Rng::new(9);
    let mut known: Vec<String> = train_words.iter().cloned().collect();
    known.extend(["zomigon", "ventolin", "attack"].map(String::from));
    let table = EmbeddingTable::random(&known, 16, &mut rng)?;
    let path = std::env::temp_dir().join("mtlseqlab_example_vectors.txt");
    save_embeddings(&table, &path)?;
    let loaded = load_embeddings(&path, 16, &mut rng)?;
    assert_eq!(loaded.dim, table.dim);
    assert_eq!(
        loaded.embedding_vector("zomigon"),
        table.embedding_vector("zomigon")
    );
    println!(
        "round-tripped {} vectors of dim {} through {}",
        loaded.vocab.len(),
        loaded.dim,
        path.display()
    );

    let partition = partition_oov(&test_set, TaskId::Mer, &train_words, &loaded.word_set())?;
    let mut counts = [(OovClass::Iv, 0), (OovClass::Ootv, 0), (OovClass::Ooev, 0), (OovClass::Oobv, 0)];
    for (_, class) in partition.iter() {
        counts.iter_mut().find(|(c, _)| *c == class).unwrap().1 += 1;
    }
    println!("test-split MER entities by stratum:");
    for (class, n) in counts {
        println!("  {class:?}: {n}");
    }
    Ok(())
}
