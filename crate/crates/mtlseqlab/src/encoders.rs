//! Word-level input representation: word embedding lookup (pretrained or
//! random), the character-level CNN, and their concatenation into the
//! encoder input.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::corpus::{CharVocab, WordVocab};
use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{dropout_mask, Rng, Tensor};

/// One vector of `dim` i.i.d. draws from `[−√(3/dim), +√(3/dim)]`.
pub fn init_uniform(dim: usize, rng: &mut Rng) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::EmptyInput("init_uniform"));
    }
    let bound = (3.0 / dim as f64).sqrt();
    Ok(Tensor::vector(
        (0..dim).map(|_| rng.range(-bound, bound)).collect(),
    ))
}

/// A row-major matrix whose every row is an [`init_uniform`] draw — the
/// embedding-table initialization, where each row is one `cols`-dimensional
/// vector.
pub fn init_uniform_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if rows == 0 {
        return Err(Error::EmptyInput("init_uniform_matrix"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        data.extend_from_slice(init_uniform(cols, rng)?.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// Projection-weight initialization for `x·W` with `W: [rows × cols]`:
/// uniform on ±√(3/rows), i.e. the same range formula applied to the fan-in
/// so pre-activations stay near unit scale regardless of layer width.
pub fn init_weight(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("init_weight"));
    }
    let bound = (3.0 / rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Word embedding matrix tied to a vocabulary with reserved PAD/UNK rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub vocab: WordVocab,
    pub dim: usize,
    pub matrix: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Fresh random table over the given tokens (PAD/UNK prepended).
    pub fn random<I, S>(tokens: I, dim: usize, rng: &mut Rng) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let vocab = WordVocab::from_tokens(tokens);
        let matrix = init_uniform_matrix(vocab.len(), dim, rng)?;
        Ok(EmbeddingTable {
            vocab,
            dim,
            matrix,
            trainable: true,
        })
    }

    /// Row index for a token: exact match, then lowercase, then UNK.
    pub fn row_of(&self, token: &str) -> usize {
        self.vocab.id(token)
    }

    pub fn embedding_vector(&self, token: &str) -> &[f64] {
        self.matrix.row_slice(self.row_of(token))
    }

    /// The non-reserved tokens, for OOV partitioning.
    pub fn word_set(&self) -> BTreeSet<String> {
        self.vocab.word_set()
    }
}

/// Hyperparameters of the character CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharCnnConfig {
    pub char_dim: usize,
    pub window: usize,
    pub num_filters: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        CharCnnConfig {
            char_dim: 30,
            window: 3,
            num_filters: 30,
        }
    }
}

impl CharCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.char_dim == 0 || self.num_filters == 0 {
            return Err(Error::Config(
                "char CNN dimensions must be positive".into(),
            ));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "char CNN window must be a positive odd integer, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Character CNN parameters as tape nodes: `embed [|chars| × d]`,
/// `filter [window·d × F]`, `bias [1 × F]`.
#[derive(Debug, Clone, Copy)]
pub struct CharCnnVars {
    pub embed: Var,
    pub filter: Var,
    pub bias: Var,
}

/// Character-level word representation: embedding lookup (dropout first in
/// training mode), minimal symmetric PAD padding, width-`window`
/// convolution, and max-over-time pooling down to `[1 × num_filters]`.
pub fn char_cnn_encode(
    tape: &Tape,
    char_ids: &[usize],
    cfg: &CharCnnConfig,
    vars: &CharCnnVars,
    dropout_rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    cfg.validate()?;
    if char_ids.is_empty() {
        return Err(Error::EmptyInput("char_cnn_encode"));
    }
    let table_rows = tape.value(vars.embed).rows();
    let pad = (cfg.window - 1) / 2;
    let mut ids = Vec::with_capacity(char_ids.len() + 2 * pad);
    ids.resize(pad, CharVocab::PAD);
    ids.extend(
        char_ids
            .iter()
            .map(|&c| if c < table_rows { c } else { CharVocab::UNK }),
    );
    ids.resize(ids.len() + pad, CharVocab::PAD);

    let mut embedded = tape.gather_rows(vars.embed, &ids)?;
    if training && dropout_rate > 0.0 {
        let mask = dropout_mask(tape.value(embedded).shape(), dropout_rate, rng)?;
        embedded = tape.mul_const(embedded, &mask)?;
    }
    let windows = tape.windows(embedded, cfg.window)?;
    let conv = tape.add(tape.matmul(windows, vars.filter)?, vars.bias)?;
    Ok(tape.max_over_rows(conv))
}

/// [`word_repr`] with vocabulary ids already resolved. Out-of-range word
/// ids fall back to the UNK row.
#[allow(clippy::too_many_arguments)]
pub fn word_repr_ids(
    tape: &Tape,
    word_id: usize,
    char_ids: &[usize],
    word_embed: Var,
    cfg: &CharCnnConfig,
    char_vars: &CharCnnVars,
    dropout_rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    let rows = tape.value(word_embed).rows();
    let wid = if word_id < rows { word_id } else { WordVocab::UNK };
    let w = tape.gather_rows(word_embed, &[wid])?;
    let c = char_cnn_encode(tape, char_ids, cfg, char_vars, dropout_rate, rng, training)?;
    tape.concat_cols(&[w, c])
}

/// Full token representation `[word embedding ∘ char CNN output]`,
/// `[1 × (word_dim + num_filters)]`. Unknown tokens fall back to UNK at
/// both the word and character level.
#[allow(clippy::too_many_arguments)]
pub fn word_repr(
    tape: &Tape,
    token: &str,
    words: &WordVocab,
    chars: &CharVocab,
    word_embed: Var,
    cfg: &CharCnnConfig,
    char_vars: &CharCnnVars,
    dropout_rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<Var> {
    word_repr_ids(
        tape,
        words.id(token),
        &chars.word_ids(token),
        word_embed,
        cfg,
        char_vars,
        dropout_rate,
        rng,
        training,
    )
}

fn is_integer_field(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Parse an embedding text file: one token plus `expected_dim` reals per
/// line, whitespace-delimited, with an optional auto-detected `count dim`
/// header (a first line of exactly two integer fields). Duplicate tokens
/// keep their first vector and emit a warning; dimension mismatches are
/// rejected with the offending line number.
pub fn parse_embeddings_str(
    text: &str,
    source: &str,
    expected_dim: usize,
    rng: &mut Rng,
) -> Result<EmbeddingTable> {
    if expected_dim == 0 {
        return Err(Error::EmptyInput("parse_embeddings_str"));
    }
    let mut tokens: Vec<String> = Vec::new();
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if idx == 0 && fields.len() == 2 && fields.iter().all(|f| is_integer_field(f)) {
            continue; // "count dim" header
        }
        if fields.len() != expected_dim + 1 {
            return Err(Error::Parse {
                path: source.to_string(),
                line: line_no,
                msg: format!(
                    "expected a token and {expected_dim} values, found {} fields",
                    fields.len()
                ),
            });
        }
        let token = fields[0].to_string();
        let mut vector = Vec::with_capacity(expected_dim);
        for f in &fields[1..] {
            vector.push(f.parse::<f64>().map_err(|_| Error::Parse {
                path: source.to_string(),
                line: line_no,
                msg: format!("invalid value `{f}`"),
            })?);
        }
        if !seen.insert(token.clone()) {
            eprintln!(
                "warning: {source}:{line_no}: duplicate token `{token}`, keeping the first occurrence"
            );
            continue;
        }
        tokens.push(token);
        vectors.push(vector);
    }
    let vocab = WordVocab::from_tokens(tokens.iter());
    let mut data = Vec::with_capacity(vocab.len() * expected_dim);
    data.extend_from_slice(init_uniform(expected_dim, rng)?.data()); // PAD
    data.extend_from_slice(init_uniform(expected_dim, rng)?.data()); // UNK
    for v in &vectors {
        data.extend_from_slice(v);
    }
    let matrix = Tensor::new(vec![vocab.len(), expected_dim], data)?;
    Ok(EmbeddingTable {
        vocab,
        dim: expected_dim,
        matrix,
        trainable: true,
    })
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    expected_dim: usize,
    rng: &mut Rng,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_embeddings_str(&text, &path.display().to_string(), expected_dim, rng)
}

/// Write the non-reserved rows back out, one `token v1 … vd` line each.
/// Loading the result reproduces the same token→vector map.
pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (row, token) in table.vocab.words().iter().enumerate() {
        if row < 2 {
            continue; // PAD, UNK are regenerated on load
        }
        out.push_str(token);
        for v in table.matrix.row_slice(row) {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{
        finite_diff_grad, max_relative_error, ModelParams, Tape,
    };
    use std::collections::BTreeMap;
    use std::sync::Arc;

    #[test]
    fn init_uniform_rejects_zero_dim() {
        let mut rng = Rng::new(1);
        assert!(init_uniform(0, &mut rng).is_err());
    }

    #[test]
    fn init_uniform_bound_is_exactly_one_at_dim_three() {
        let mut rng = Rng::new(2);
        assert_eq!((3.0_f64 / 3.0).sqrt(), 1.0);
        for _ in 0..10_000 {
            for &v in init_uniform(3, &mut rng).unwrap().data() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn init_uniform_stays_in_closed_bound() {
        let mut rng = Rng::new(3);
        for dim in [1usize, 30, 100] {
            let bound = (3.0 / dim as f64).sqrt();
            let draws = 1_000_000 / dim + 1;
            for _ in 0..draws {
                for &v in init_uniform(dim, &mut rng).unwrap().data() {
                    assert!(v.abs() <= bound, "dim {dim}: {v} out of ±{bound}");
                }
            }
        }
    }

    #[test]
    fn init_uniform_variance_matches_uniform_law() {
        let mut rng = Rng::new(4);
        let dim = 100;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n = 100_000;
        for _ in 0..n / dim {
            for &v in init_uniform(dim, &mut rng).unwrap().data() {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want = 1.0 / dim as f64;
        assert!(
            (var - want).abs() / want < 0.05,
            "variance {var} vs {want}"
        );
    }

    #[test]
    fn three_line_file_gives_five_rows() {
        let mut rng = Rng::new(5);
        let text = "alpha 1 2 3 4\nbeta 5 6 7 8\ngamma 9 10 11 12\n";
        let table = parse_embeddings_str(text, "mem", 4, &mut rng).unwrap();
        assert_eq!(table.vocab.len(), 5);
        assert_eq!(table.matrix.shape(), &[5, 4]);
        assert_eq!(table.embedding_vector("beta"), &[5.0, 6.0, 7.0, 8.0]);
        assert!(table.vocab.contains_exact("<PAD>"));
        assert!(table.vocab.contains_exact("<UNK>"));
    }

    #[test]
    fn count_dim_header_is_skipped() {
        let mut rng = Rng::new(6);
        let mut text = String::from("2 50\n");
        for tok in ["a", "b"] {
            text.push_str(tok);
            for i in 0..50 {
                text.push_str(&format!(" {}", i));
            }
            text.push('\n');
        }
        let table = parse_embeddings_str(&text, "mem", 50, &mut rng).unwrap();
        assert_eq!(table.dim, 50);
        assert_eq!(table.vocab.len(), 4);
        assert!(!table.vocab.contains_exact("2"));
    }

    #[test]
    fn short_line_is_rejected_with_its_line_number() {
        let mut rng = Rng::new(7);
        let mut text = String::from("ok");
        for i in 0..50 {
            text.push_str(&format!(" {i}"));
        }
        text.push_str("\nbad");
        for i in 0..49 {
            text.push_str(&format!(" {i}"));
        }
        text.push('\n');
        let err = parse_embeddings_str(&text, "mem", 50, &mut rng).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_token_keeps_first_vector() {
        let mut rng = Rng::new(8);
        let text = "foo 1 2\nfoo 3 4\nbar 5 6\n";
        let table = parse_embeddings_str(text, "mem", 2, &mut rng).unwrap();
        assert_eq!(table.vocab.len(), 4);
        assert_eq!(table.embedding_vector("foo"), &[1.0, 2.0]);
        assert_eq!(table.embedding_vector("bar"), &[5.0, 6.0]);
    }

    #[test]
    fn lowercase_fallback_then_unk() {
        let mut rng = Rng::new(9);
        let text = "zomig 1 2\n";
        let table = parse_embeddings_str(text, "mem", 2, &mut rng).unwrap();
        assert_eq!(table.row_of("Zomig"), table.row_of("zomig"));
        assert_eq!(table.row_of("absent"), WordVocab::UNK);
    }

    #[test]
    fn save_then_load_is_idempotent_on_the_vector_map() {
        let mut rng = Rng::new(10);
        let text = "alpha 0.125 -3.5\nbeta 0.1 2e-3\n";
        let table = parse_embeddings_str(text, "mem", 2, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        save_embeddings(&table, &path).unwrap();
        let again = load_embeddings(&path, 2, &mut rng).unwrap();
        assert_eq!(table.vocab.words(), again.vocab.words());
        for tok in ["alpha", "beta"] {
            assert_eq!(table.embedding_vector(tok), again.embedding_vector(tok));
        }
        // and once more, byte for byte
        let path2 = dir.path().join("emb2.txt");
        save_embeddings(&again, &path2).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            std::fs::read_to_string(&path2).unwrap()
        );
    }

    fn test_cnn(
        tape: &Tape,
        chars: usize,
        cfg: &CharCnnConfig,
        rng: &mut Rng,
    ) -> CharCnnVars {
        CharCnnVars {
            embed: tape.leaf(init_uniform_matrix(chars, cfg.char_dim, rng).unwrap()),
            filter: tape.leaf(
                init_uniform_matrix(cfg.window * cfg.char_dim, cfg.num_filters, rng).unwrap(),
            ),
            bias: tape.leaf(init_uniform_matrix(1, cfg.num_filters, rng).unwrap()),
        }
    }

    #[test]
    fn zero_filters_pool_to_the_bias() {
        let tape = Tape::new();
        let mut rng = Rng::new(11);
        let cfg = CharCnnConfig {
            char_dim: 4,
            window: 3,
            num_filters: 2,
        };
        let bias = [0.7, -0.3];
        let vars = CharCnnVars {
            embed: tape.leaf(init_uniform_matrix(6, 4, &mut rng).unwrap()),
            filter: tape.leaf(Tensor::zeros(&[12, 2])),
            bias: tape.leaf(Tensor::row(bias.to_vec())),
        };
        let out = char_cnn_encode(&tape, &[2, 3, 4], &cfg, &vars, 0.0, &mut rng, false).unwrap();
        assert_eq!(tape.value(out).data(), &bias);
    }

    #[test]
    fn single_char_word_works_via_padding() {
        let tape = Tape::new();
        let mut rng = Rng::new(12);
        let cfg = CharCnnConfig {
            char_dim: 3,
            window: 3,
            num_filters: 5,
        };
        let vars = test_cnn(&tape, 4, &cfg, &mut rng);
        let out = char_cnn_encode(&tape, &[2], &cfg, &vars, 0.0, &mut rng, false).unwrap();
        let v = tape.value(out);
        assert_eq!(v.shape(), &[1, 5]);
        assert!(v.all_finite());
    }

    #[test]
    fn zomig_matches_sliding_window_reference() {
        let tape = Tape::new();
        let mut rng = Rng::new(13);
        let vocab = CharVocab::from_chars("Zomig".chars());
        let cfg = CharCnnConfig {
            char_dim: 3,
            window: 3,
            num_filters: 2,
        };
        let vars = test_cnn(&tape, vocab.len(), &cfg, &mut rng);
        let ids = vocab.word_ids("Zomig");
        let out = char_cnn_encode(&tape, &ids, &cfg, &vars, 0.0, &mut rng, false).unwrap();

        // independent reference: explicit padding and scalar loops
        let emb = tape.value(vars.embed);
        let fil = tape.value(vars.filter);
        let b = tape.value(vars.bias);
        let mut padded = vec![CharVocab::PAD];
        padded.extend(&ids);
        padded.push(CharVocab::PAD);
        for f in 0..cfg.num_filters {
            let mut best = f64::NEG_INFINITY;
            for p in 0..ids.len() {
                let mut acc = b.at(0, f);
                for k in 0..cfg.window {
                    for c in 0..cfg.char_dim {
                        acc += emb.at(padded[p + k], c) * fil.at(k * cfg.char_dim + c, f);
                    }
                }
                best = best.max(acc);
            }
            assert!((tape.value(out).at(0, f) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_char_ids_fall_back_to_unk() {
        let tape = Tape::new();
        let mut rng = Rng::new(14);
        let cfg = CharCnnConfig {
            char_dim: 3,
            window: 3,
            num_filters: 4,
        };
        let vars = test_cnn(&tape, 5, &cfg, &mut rng);
        let a = char_cnn_encode(&tape, &[2, 999], &cfg, &vars, 0.0, &mut rng, false).unwrap();
        let b = char_cnn_encode(&tape, &[2, CharVocab::UNK], &cfg, &vars, 0.0, &mut rng, false)
            .unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn inference_encoding_is_deterministic() {
        let cfg = CharCnnConfig::default();
        let run = || {
            let tape = Tape::new();
            let mut rng = Rng::new(15);
            let vars = test_cnn(&tape, 8, &cfg, &mut rng);
            let out =
                char_cnn_encode(&tape, &[2, 3, 4, 5], &cfg, &vars, 0.5, &mut rng, false).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_dropout_perturbs_the_encoding() {
        let cfg = CharCnnConfig {
            char_dim: 4,
            window: 3,
            num_filters: 4,
        };
        let tape = Tape::new();
        let mut rng = Rng::new(16);
        let vars = test_cnn(&tape, 8, &cfg, &mut rng);
        let plain = char_cnn_encode(&tape, &[2, 3, 4], &cfg, &vars, 0.5, &mut rng, false).unwrap();
        let dropped = char_cnn_encode(&tape, &[2, 3, 4], &cfg, &vars, 0.5, &mut rng, true).unwrap();
        assert_ne!(tape.value(plain).data(), tape.value(dropped).data());
    }

    #[test]
    fn word_repr_concatenates_lookup_and_cnn() {
        let tape = Tape::new();
        let mut rng = Rng::new(17);
        let words = WordVocab::from_tokens(["took", "Zomig"]);
        let chars = CharVocab::from_chars("tookZmig".chars());
        let cfg = CharCnnConfig {
            char_dim: 3,
            window: 3,
            num_filters: 4,
        };
        let table = init_uniform_matrix(words.len(), 6, &mut rng).unwrap();
        let word_embed = tape.leaf(table.clone());
        let vars = test_cnn(&tape, chars.len(), &cfg, &mut rng);
        let v = word_repr(
            &tape, "Zomig", &words, &chars, word_embed, &cfg, &vars, 0.0, &mut rng, false,
        )
        .unwrap();
        let vv = tape.value(v);
        assert_eq!(vv.shape(), &[1, 10]);
        let row = words.id("Zomig");
        assert_eq!(&vv.data()[..6], table.row_slice(row));

        let u = word_repr(
            &tape, "warfarin", &words, &chars, word_embed, &cfg, &vars, 0.0, &mut rng, false,
        )
        .unwrap();
        assert_eq!(
            &tape.value(u).data()[..6],
            table.row_slice(WordVocab::UNK)
        );
    }

    #[test]
    fn word_repr_length_property() {
        let mut rng = Rng::new(18);
        for _ in 0..10 {
            let word_dim = 1 + rng.below(8);
            let filters = 1 + rng.below(8);
            let cfg = CharCnnConfig {
                char_dim: 1 + rng.below(5),
                window: [1, 3, 5][rng.below(3)],
                num_filters: filters,
            };
            let tape = Tape::new();
            let words = WordVocab::from_tokens(["a"]);
            let chars = CharVocab::from_chars("a".chars());
            let word_embed =
                tape.leaf(init_uniform_matrix(words.len(), word_dim, &mut rng).unwrap());
            let vars = test_cnn(&tape, chars.len(), &cfg, &mut rng);
            let v = word_repr(
                &tape, "a", &words, &chars, word_embed, &cfg, &vars, 0.0, &mut rng, false,
            )
            .unwrap();
            assert_eq!(tape.value(v).shape(), &[1, word_dim + filters]);
        }
    }

    #[test]
    fn char_cnn_gradients_match_finite_differences() {
        let cfg = CharCnnConfig {
            char_dim: 3,
            window: 3,
            num_filters: 4,
        };
        let mut rng = Rng::new(19);
        let mut params = ModelParams::new();
        params.insert("cnn.embed", init_uniform_matrix(6, 3, &mut rng).unwrap());
        params.insert("cnn.w", init_uniform_matrix(9, 4, &mut rng).unwrap());
        params.insert("cnn.b", init_uniform_matrix(1, 4, &mut rng).unwrap());
        let ids = [2usize, 3, 4, 5];

        let loss_of = |p: &ModelParams| -> crate::Result<f64> {
            let tape = Tape::new();
            let vars = CharCnnVars {
                embed: tape.leaf_arc(Arc::clone(p.get("cnn.embed")?)),
                filter: tape.leaf_arc(Arc::clone(p.get("cnn.w")?)),
                bias: tape.leaf_arc(Arc::clone(p.get("cnn.b")?)),
            };
            let mut rng = Rng::new(0);
            let out = char_cnn_encode(&tape, &ids, &cfg, &vars, 0.0, &mut rng, false)?;
            let s = tape.sum(out);
            Ok(tape.value(s).scalar_value())
        };

        let tape = Tape::new();
        let vars = CharCnnVars {
            embed: tape.leaf_arc(Arc::clone(params.get("cnn.embed").unwrap())),
            filter: tape.leaf_arc(Arc::clone(params.get("cnn.w").unwrap())),
            bias: tape.leaf_arc(Arc::clone(params.get("cnn.b").unwrap())),
        };
        let mut r0 = Rng::new(0);
        let out = char_cnn_encode(&tape, &ids, &cfg, &vars, 0.0, &mut r0, false).unwrap();
        let loss = tape.sum(out);
        let mut grads = tape.backward(loss).unwrap();
        let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
        analytic.insert("cnn.embed".into(), grads.take(vars.embed).unwrap());
        analytic.insert("cnn.w".into(), grads.take(vars.filter).unwrap());
        analytic.insert("cnn.b".into(), grads.take(vars.bias).unwrap());

        let numeric = finite_diff_grad(loss_of, &params, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "max rel err {err}");
    }
}
