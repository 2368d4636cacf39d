//! Utterances with BIO slot tags, their TSV file format, vocabularies and
//! label sets.

mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, LanguageSplits, SyntheticData, SyntheticSpec};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const UNK_ID: usize = 3;

const RESERVED: [&str; 4] = [CLS, SEP, PAD, UNK];

/// `O`, `B-<type>` or `I-<type>` with a non-empty type.
pub fn is_valid_tag(tag: &str) -> bool {
    tag == "O"
        || tag
            .strip_prefix("B-")
            .or_else(|| tag.strip_prefix("I-"))
            .is_some_and(|ty| !ty.is_empty() && !ty.contains(char::is_whitespace))
}

/// One tokenized utterance with its gold annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SluExample {
    pub tokens: Vec<String>,
    pub slot_tags: Vec<String>,
    pub intent: String,
    pub lang: String,
}

impl SluExample {
    pub fn new(
        tokens: Vec<String>,
        slot_tags: Vec<String>,
        intent: impl Into<String>,
        lang: impl Into<String>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("utterance has no tokens"));
        }
        if tokens.len() != slot_tags.len() {
            return Err(Error::contract(format!(
                "tag count {} ≠ token count {}",
                slot_tags.len(),
                tokens.len()
            )));
        }
        if let Some(bad) = slot_tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(Error::contract(format!("malformed slot tag {bad:?}")));
        }
        Ok(SluExample {
            tokens,
            slot_tags,
            intent: intent.into(),
            lang: lang.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An ordered collection of utterances.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Corpus {
    examples: Vec<SluExample>,
}

impl Corpus {
    pub fn new(examples: Vec<SluExample>) -> Self {
        Corpus { examples }
    }

    pub fn examples(&self) -> &[SluExample] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<SluExample> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SluExample> {
        self.examples.iter()
    }

    /// Parses `tokens<TAB>tags<TAB>intent` lines. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_tsv_str(text: &str, lang: &str) -> Result<Self> {
        Self::parse_lines(text, lang, None)
    }

    fn parse_lines(text: &str, lang: &str, path: Option<&Path>) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.map(Path::to_path_buf),
            line,
            message,
        };
        let mut examples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(
                    line_no,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let tokens: Vec<String> = fields[0].split_whitespace().map(str::to_owned).collect();
            let tags: Vec<String> = fields[1].split_whitespace().map(str::to_owned).collect();
            let intent = fields[2].trim();
            if tokens.is_empty() {
                return Err(err(line_no, "empty token field".into()));
            }
            if tags.len() != tokens.len() {
                return Err(err(
                    line_no,
                    format!("tag count {} ≠ token count {}", tags.len(), tokens.len()),
                ));
            }
            if let Some(bad) = tags.iter().find(|t| !is_valid_tag(t)) {
                return Err(err(line_no, format!("malformed slot tag {bad:?}")));
            }
            if intent.is_empty() {
                return Err(err(line_no, "empty intent".into()));
            }
            examples.push(SluExample {
                tokens,
                slot_tags: tags,
                intent: intent.to_owned(),
                lang: lang.to_owned(),
            });
        }
        Ok(Corpus { examples })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                ex.tokens.join(" "),
                ex.slot_tags.join(" "),
                ex.intent
            );
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

impl FromIterator<SluExample> for Corpus {
    fn from_iter<I: IntoIterator<Item = SluExample>>(iter: I) -> Self {
        Corpus {
            examples: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a SluExample;
    type IntoIter = std::slice::Iter<'a, SluExample>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}

/// Reads a corpus file; every example is tagged with `lang`.
pub fn parse_tsv(path: impl AsRef<Path>, lang: &str) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Corpus::parse_lines(&text, lang, Some(path))
}

/// Bidirectional word/id map. Ids `0..4` are `[CLS] [SEP] [PAD] [UNK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocab {
    pub fn reserved_only() -> Self {
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Id of `word`, or `[UNK]`.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Appends `word` if absent; returns its id.
    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), self.words.len() - 1);
        self.words.len() - 1
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or(UNK).to_owned())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::contract(
                "vocabulary must start with the reserved tokens",
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Reserved tokens, then every word seen at least `min_count` times in
/// first-appearance order.
pub fn build_vocab<'a>(
    examples: impl IntoIterator<Item = &'a SluExample>,
    min_count: usize,
) -> Result<Vocab> {
    if min_count == 0 {
        return Err(Error::contract("min_count must be at least 1"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        for tok in &ex.tokens {
            let c = counts.entry(tok.as_str()).or_insert_with(|| {
                order.push(tok.as_str());
                0
            });
            *c += 1;
        }
    }
    let mut vocab = Vocab::reserved_only();
    for w in order {
        if counts[w] >= min_count {
            vocab.insert(w);
        }
    }
    Ok(vocab)
}

/// `[CLS] x_1 .. x_n [SEP]` as ids; unknown words map to `[UNK]`.
pub fn encode(example: &SluExample, vocab: &Vocab) -> Vec<usize> {
    let mut ids = Vec::with_capacity(example.len() + 2);
    ids.push(CLS_ID);
    ids.extend(example.tokens.iter().map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    ids
}

/// Dense label indices for intents and slot tags, in first-appearance order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabels", into = "RawLabels")]
pub struct LabelSets {
    intents: Vec<String>,
    slot_tags: Vec<String>,
    intent_index: HashMap<String, usize>,
    tag_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawLabels {
    intents: Vec<String>,
    slot_tags: Vec<String>,
}

impl TryFrom<RawLabels> for LabelSets {
    type Error = Error;

    fn try_from(raw: RawLabels) -> Result<Self> {
        LabelSets::new(raw.intents, raw.slot_tags)
    }
}

impl From<LabelSets> for RawLabels {
    fn from(l: LabelSets) -> Self {
        RawLabels {
            intents: l.intents,
            slot_tags: l.slot_tags,
        }
    }
}

impl LabelSets {
    pub fn new(intents: Vec<String>, slot_tags: Vec<String>) -> Result<Self> {
        if intents.is_empty() || slot_tags.is_empty() {
            return Err(Error::contract("label sets must be non-empty"));
        }
        let index = |labels: &[String]| -> Result<HashMap<String, usize>> {
            let mut map = HashMap::with_capacity(labels.len());
            for (i, l) in labels.iter().enumerate() {
                if map.insert(l.clone(), i).is_some() {
                    return Err(Error::contract(format!("duplicate label {l:?}")));
                }
            }
            Ok(map)
        };
        Ok(LabelSets {
            intent_index: index(&intents)?,
            tag_index: index(&slot_tags)?,
            intents,
            slot_tags,
        })
    }

    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a SluExample>) -> Result<Self> {
        let mut intents: Vec<String> = Vec::new();
        let mut tags: Vec<String> = Vec::new();
        let mut seen_i = std::collections::HashSet::new();
        let mut seen_t = std::collections::HashSet::new();
        for ex in examples {
            if seen_i.insert(ex.intent.as_str()) {
                intents.push(ex.intent.clone());
            }
            for t in &ex.slot_tags {
                if seen_t.insert(t.as_str()) {
                    tags.push(t.clone());
                }
            }
        }
        Self::new(intents, tags)
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn slot_tags(&self) -> &[String] {
        &self.slot_tags
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_slot_tags(&self) -> usize {
        self.slot_tags.len()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_index.get(intent).copied()
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }
}

/// Seeded shuffle into disjoint train/dev/test parts.
///
/// Part sizes are `round(ratio * n)` for train and dev; test takes the rest.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::contract(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_dev = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let pick =
        |idx: &[usize]| -> Corpus { idx.iter().map(|&i| corpus.examples[i].clone()).collect() };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(tokens: &str, tags: &str, intent: &str) -> SluExample {
        SluExample::new(
            tokens.split(' ').map(String::from).collect(),
            tags.split(' ').map(String::from).collect(),
            intent,
            "en",
        )
        .unwrap()
    }

    #[test]
    fn parses_one_line() {
        let c =
            Corpus::parse_tsv_str("watch sports movie\tO B-genre O\tPlayMovie\n", "en").unwrap();
        assert_eq!(c.len(), 1);
        let e = &c.examples()[0];
        assert_eq!(e.tokens, ["watch", "sports", "movie"]);
        assert_eq!(e.slot_tags, ["O", "B-genre", "O"]);
        assert_eq!(e.intent, "PlayMovie");
        assert_eq!(e.lang, "en");
    }

    #[test]
    fn empty_input_and_comments() {
        assert!(Corpus::parse_tsv_str("", "en").unwrap().is_empty());
        let c = Corpus::parse_tsv_str("# header\n\na\tO\tX\n", "en").unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn length_mismatch_reports_line() {
        let err = Corpus::parse_tsv_str("a b\tO\tX", "en").unwrap_err();
        assert!(
            err.to_string()
                .contains("tag count 1 ≠ token count 2 (line 1)"),
            "{err}"
        );
        let err = Corpus::parse_tsv_str("ok\tO\tX\nbad\tQ-x\tX\n", "en").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = Corpus::parse_tsv_str("two fields\tO O", "en").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn orphan_inside_tag_is_accepted() {
        let c = Corpus::parse_tsv_str("a b\tI-x O\tX", "en").unwrap();
        assert_eq!(c.examples()[0].slot_tags[0], "I-x");
    }

    #[test]
    fn tag_validation() {
        for ok in ["O", "B-city", "I-from.city"] {
            assert!(is_valid_tag(ok), "{ok}");
        }
        for bad in ["", "B-", "I", "X-a", "o", "B-a b"] {
            assert!(!is_valid_tag(bad), "{bad}");
        }
    }

    #[test]
    fn vocab_sizes() {
        let c = Corpus::new(vec![ex("a b", "O O", "X")]);
        assert_eq!(build_vocab(&c, 1).unwrap().len(), 6);
        assert_eq!(build_vocab(&c, 2).unwrap().len(), 4);

        let c = Corpus::new(vec![ex("a a b", "O O O", "X"), ex("a", "O", "X")]);
        let v = build_vocab(&c, 2).unwrap();
        assert!(v.contains("a"));
        assert_eq!(v.id("b"), UNK_ID);
        assert!(build_vocab(&c, 0).is_err());
    }

    #[test]
    fn vocab_first_appearance_order() {
        let c = Corpus::new(vec![ex("z y", "O O", "X"), ex("x z", "O O", "X")]);
        let v = build_vocab(&c, 1).unwrap();
        assert_eq!(&v.words()[4..], ["z", "y", "x"]);
        assert_eq!(v.word(CLS_ID), Some(CLS));
        assert_eq!(v.word(UNK_ID), Some(UNK));
    }

    #[test]
    fn encode_wraps_with_specials() {
        let e = ex("a b c", "O O O", "X");
        let v = build_vocab([&e], 1).unwrap();
        let ids = encode(&e, &v);
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(ids[4], SEP_ID);
        assert_eq!(v.decode(&ids[1..4]), e.tokens);

        let unknown = ex("p q r", "O O O", "X");
        assert_eq!(
            encode(&unknown, &v),
            [CLS_ID, UNK_ID, UNK_ID, UNK_ID, SEP_ID]
        );
    }

    #[test]
    fn vocab_serde_rejects_bad_reserved() {
        let v = build_vocab([&ex("a", "O", "X")], 1).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&s).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["a","[SEP]","[PAD]","[UNK]"]"#).is_err());
        assert!(
            serde_json::from_str::<Vocab>(r#"["[CLS]","[SEP]","[PAD]","[UNK]","a","a"]"#).is_err()
        );
    }

    #[test]
    fn label_sets_first_appearance() {
        let c = Corpus::new(vec![
            ex("a b", "B-x O", "Two"),
            ex("c", "I-x", "One"),
            ex("d", "O", "Two"),
        ]);
        let l = LabelSets::from_examples(&c).unwrap();
        assert_eq!(l.intents(), ["Two", "One"]);
        assert_eq!(l.slot_tags(), ["B-x", "O", "I-x"]);
        assert_eq!(l.intent_id("One"), Some(1));
        assert_eq!(l.tag_id("B-y"), None);
    }

    fn numbered(n: usize) -> Corpus {
        (0..n).map(|i| ex(&format!("w{i}"), "O", "X")).collect()
    }

    #[test]
    fn split_sizes_and_cover() {
        let c = numbered(100);
        let (tr, dv, te) = split_corpus(&c, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (80, 10, 10));
        let mut all: Vec<String> = tr
            .iter()
            .chain(&dv)
            .chain(&te)
            .map(|e| e.tokens[0].clone())
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);

        let (tr, dv, te) = split_corpus(&c, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (100, 0, 0));

        assert_eq!(
            split_corpus(&c, [0.8, 0.1, 0.1], 9).unwrap(),
            split_corpus(&c, [0.8, 0.1, 0.1], 9).unwrap()
        );
        assert!(split_corpus(&c, [0.8, 0.1, 0.2], 9).is_err());
    }
}
