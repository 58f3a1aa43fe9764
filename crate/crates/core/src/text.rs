//! Vocabulary, integer encoding and the trainable embedding table.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{read_to_string, write_file, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    fn with_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { index, tokens }
    }

    /// Tokens seen at least `min_freq` times, ordered by descending
    /// frequency and then lexicographically. Ids 0 and 1 are reserved.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for tok in text.as_ref().split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::with_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Two-column `token<TAB>id` text, one entry per line.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse("expected `token<TAB>id`".into()))?;
            let id: usize = id.trim().parse().map_err(|e| parse(format!("bad id: {e}")))?;
            if id != tokens.len() {
                return Err(parse(format!("expected id {}, found {id}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}",
                path.display()
            )));
        }
        Ok(Self::with_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_tsv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&read_to_string(path)?, path)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

/// Integer-encoded text padded to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
    true_len: usize,
}

impl TokenSeq {
    pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        let mut ids: Vec<usize> = text.split_whitespace().take(max_len).map(|t| vocab.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::Data("cannot encode an empty text".into()));
        }
        let true_len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSeq { ids, true_len })
    }

    pub fn from_ids(ids: Vec<usize>, true_len: usize) -> Result<Self> {
        if true_len == 0 || true_len > ids.len() || ids[true_len..].iter().any(|&i| i != PAD) {
            return Err(Error::Data("malformed token sequence".into()));
        }
        Ok(TokenSeq { ids, true_len })
    }

    /// All ids including padding.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Ids of real tokens only.
    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.true_len]
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn decode(&self, vocab: &Vocab) -> String {
        self.tokens()
            .iter()
            .map(|&i| vocab.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `|vocab| x dim` embedding matrix; row [`PAD`] stays zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable(pub Matrix);

impl EmbeddingTable {
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut m = Matrix::zeros(vocab_size, dim);
        for r in 1..vocab_size {
            for v in m.row_mut(r) {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        EmbeddingTable(m)
    }

    pub fn zero_pad_row(m: &mut Matrix) {
        m.row_mut(PAD).iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Embeds the real tokens of `seq` as the columns of a `dim x true_len` node.
pub fn embed(tape: &mut Tape, table: Var, seq: &TokenSeq) -> Result<Var> {
    tape.gather_rows(table, seq.tokens())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(v: &Vocab) -> Vec<&str> {
        (0..v.len()).map(|i| v.token(i).unwrap()).collect()
    }

    #[test]
    fn build_respects_min_freq() {
        let v = Vocab::build(&["a b", "b c"], 2).unwrap();
        assert_eq!(toks(&v), vec![PAD_TOKEN, UNK_TOKEN, "b"]);
        let v = Vocab::build(&["a b", "b c"], 1).unwrap();
        assert_eq!(toks(&v), vec![PAD_TOKEN, UNK_TOKEN, "b", "a", "c"]);
        assert_eq!(v, Vocab::build(&["a b", "b c"], 1).unwrap());
    }

    #[test]
    fn build_rejects_empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocab::build(&empty, 1), Err(Error::Data(_))));
    }

    #[test]
    fn encode_pads_truncates_and_maps_unknowns() {
        let v = Vocab::build(&["a b", "b c"], 1).unwrap();
        let s = TokenSeq::encode("a b", &v, 4).unwrap();
        assert_eq!(s.ids(), &[v.id("a"), v.id("b"), PAD, PAD]);
        assert_eq!(s.true_len(), 2);

        let long = vec!["a"; 40].join(" ");
        assert_eq!(TokenSeq::encode(&long, &v, 32).unwrap().true_len(), 32);

        let s = TokenSeq::encode("a zzz c", &v, 8).unwrap();
        assert_eq!(s.tokens()[1], UNK);
        assert!(matches!(TokenSeq::encode("   ", &v, 4), Err(Error::Data(_))));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(&["the quick brown fox", "jumps over the dog"], 1).unwrap();
        let text = "the dog jumps over the quick fox";
        assert_eq!(TokenSeq::encode(text, &v, 16).unwrap().decode(&v), text);
    }

    #[test]
    fn tsv_round_trip_and_hash() {
        let v = Vocab::build(&["x y y", "z"], 1).unwrap();
        let back = Vocab::from_tsv(&v.to_tsv(), Path::new("mem")).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.content_hash(), back.content_hash());
        let other = Vocab::build(&["x y"], 1).unwrap();
        assert_ne!(v.content_hash(), other.content_hash());
    }

    #[test]
    fn embed_gathers_rows_and_routes_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::random(5, 3, &mut rng);
        assert!(table.0.row(PAD).iter().all(|&v| v == 0.0));
        let seq = TokenSeq::from_ids(vec![3, 0, 0], 1).unwrap();
        let mut tape = Tape::new();
        let t = tape.leaf(table.0.clone());
        let e = embed(&mut tape, t, &seq).unwrap();
        assert_eq!(tape.shape(e), (3, 1));
        assert_eq!(tape.value(e).data(), table.0.row(3));

        let seq = TokenSeq::from_ids(vec![2, 4, 2, 0], 3).unwrap();
        let e = embed(&mut tape, t, &seq).unwrap();
        assert_eq!(tape.shape(e), (3, 3));
        let s = tape.sum(e);
        tape.backward(s).unwrap();
        let g = tape.grad(t);
        assert_eq!(g.row(2), &[2.0, 2.0, 2.0]);
        assert_eq!(g.row(4), &[1.0, 1.0, 1.0]);
        for r in [0, 1, 3] {
            assert!(g.row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let t = tape.leaf(Matrix::zeros(3, 2));
        let seq = TokenSeq::from_ids(vec![7], 1).unwrap();
        assert!(matches!(embed(&mut tape, t, &seq), Err(Error::Data(_))));
    }
}
