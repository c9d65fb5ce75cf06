//! Generate the synthetic linked corpus and show what it looks like: parallel
//! MER/MEN tag streams, held-out surface forms in dev/test, optional concept
//! noise.

use std::collections::BTreeSet;

use mtlseqlab::corpus::{default_inventory, gen_synthetic, write_conll_string, SynthSpec};

fn main() -> mtlseqlab::Result<()> {
    let spec = SynthSpec {
        train: 20,
        dev: 5,
        test: 10,
        noise: 0.0,
        seed: 7,
    };
    let inventory = default_inventory();
    let (train, dev, test) = gen_synthetic(&spec, &inventory)?;
    println!(
        "train {} / dev {} / test {} sentences",
        train.len(),
        dev.len(),
        test.len()
    );

    println!("\nfirst three training sentences:");
    print!("{}", write_conll_string(&train[..3]));

    let train_words: BTreeSet<&str> = train
        .iter()
        .flat_map(|s| s.tokens.iter().map(String::as_str))
        .collect();
    let unseen: BTreeSet<&str> = test
        .iter()
        .flat_map(|s| s.tokens.iter().map(String::as_str))
        .filter(|w| !train_words.contains(*w))
        .collect();
    println!("test tokens never seen in training: {unseen:?}");
    Ok(())
}
