//! Text preprocessing and subword encoding for the transformer path.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::is_punctuation;

pub const DEFAULT_MAX_LEN: usize = 512;
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessPipeline {
    LowercaseOnly,
    LowercaseAndStripPunct,
}

impl PreprocessPipeline {
    pub const ALL: [PreprocessPipeline; 2] = [
        PreprocessPipeline::LowercaseOnly,
        PreprocessPipeline::LowercaseAndStripPunct,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            PreprocessPipeline::LowercaseOnly => "Lowercasing",
            PreprocessPipeline::LowercaseAndStripPunct => "Lowercasing + punctuation removal",
        }
    }
}

pub fn preprocess(text: &str, pipeline: PreprocessPipeline) -> String {
    let lower = text.to_lowercase();
    match pipeline {
        PreprocessPipeline::LowercaseOnly => lower,
        PreprocessPipeline::LowercaseAndStripPunct => {
            let stripped: String = lower.chars().filter(|&c| !is_punctuation(c)).collect();
            stripped.split_whitespace().collect::<Vec<_>>().join(" ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub start: String,
    pub sep: String,
    pub pad: String,
    pub unk: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            start: "[CLS]".into(),
            sep: "[SEP]".into(),
            pad: "[PAD]".into(),
            unk: "[UNK]".into(),
        }
    }
}

/// Subword vocabulary. Continuation pieces carry a `##` prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: SpecialTokens,
    start_id: u32,
    sep_id: u32,
    pad_id: u32,
    unk_id: u32,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, specials: SpecialTokens) -> Result<Vocab> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        let id = |t: &str| {
            index.get(t).copied().ok_or_else(|| {
                Error::Validation(format!("special token {t:?} missing from vocabulary"))
            })
        };
        Ok(Vocab {
            start_id: id(&specials.start)?,
            sep_id: id(&specials.sep)?,
            pad_id: id(&specials.pad)?,
            unk_id: id(&specials.unk)?,
            tokens,
            index,
            specials,
        })
    }

    /// Builds a vocabulary from a corpus: specials, every character seen (as a
    /// word-initial piece and as a `##` continuation), then whole words with
    /// frequency at least `min_freq`, most frequent first, up to `max_size`.
    pub fn from_corpus<'a, I>(texts: I, min_freq: usize, max_size: usize) -> Vocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let specials = SpecialTokens::default();
        let mut tokens = vec![
            specials.pad.clone(),
            specials.unk.clone(),
            specials.start.clone(),
            specials.sep.clone(),
        ];
        let mut chars = std::collections::BTreeSet::new();
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for word in pre_tokenize(text) {
                chars.extend(word.chars());
                if word.chars().count() > 1 {
                    *freq.entry(word.to_string()).or_default() += 1;
                }
            }
        }
        for c in &chars {
            tokens.push(c.to_string());
            tokens.push(format!("##{c}"));
        }
        let mut words: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w));
        Vocab::new(tokens, specials).expect("generated vocabulary is consistent")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn start_id(&self) -> u32 {
        self.start_id
    }

    pub fn sep_id(&self) -> u32 {
        self.sep_id
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    /// Reads `vocab.txt` (one token per line, line index = id) and the
    /// `vocab.json` sidecar next to it declaring the specials.
    pub fn load(path: &Path) -> Result<Vocab> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let sidecar = path.with_extension("json");
        let specials = match fs::read_to_string(&sidecar) {
            Ok(s) => serde_json::from_str(&s)
                .map_err(|e| Error::json(sidecar.display().to_string(), e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => SpecialTokens::default(),
            Err(e) => return Err(Error::io(sidecar.display().to_string(), e)),
        };
        Vocab::new(text.lines().map(String::from).collect(), specials)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        let sidecar = path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.specials).expect("specials serialize");
        fs::write(&sidecar, json).map_err(|e| Error::io(sidecar.display().to_string(), e))
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(self.unk_id);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(id) = self.token_id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => pieces.push(id),
                None => {
                    out.push(self.unk_id);
                    return;
                }
            }
            start = end;
        }
        out.extend(pieces);
    }

    /// Subword ids of `text` without specials, truncation or padding.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            self.wordpiece(word, &mut ids);
        }
        ids
    }
}

/// Whitespace split with every punctuation character split off on its own.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if is_punctuation(c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}

/// Fixed-length model input: `[START] pieces [SEP]` then padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-padding positions; padding only ever occupies the tail.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for the two specials");
    let mut pieces = vocab.tokenize(text);
    pieces.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.start_id());
    ids.extend(pieces);
    ids.push(vocab.sep_id());
    let real = ids.len();
    ids.resize(max_len, vocab.pad_id());
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    TokenSequence {
        ids,
        attention_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::from_corpus(
            ["hallo welt, geld verloren!", "spielsucht hilfe geld"],
            1,
            1000,
        )
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(
            preprocess("Hallo, Welt!!!", PreprocessPipeline::LowercaseOnly),
            "hallo, welt!!!"
        );
        assert_eq!(
            preprocess("Hallo, Welt!!!", PreprocessPipeline::LowercaseAndStripPunct),
            "hallo welt"
        );
        for p in PreprocessPipeline::ALL {
            assert_eq!(preprocess("", p), "");
        }
        assert_eq!(
            preprocess(
                "Geld - weg … „alles“",
                PreprocessPipeline::LowercaseAndStripPunct
            ),
            "geld weg alles"
        );
    }

    #[test]
    fn empty_text_encoding() {
        let v = vocab();
        let seq = encode("", &v, 512);
        assert_eq!(seq.ids.len(), 512);
        assert_eq!(seq.real_len(), 2);
        assert_eq!(seq.ids[0], v.start_id());
        assert_eq!(seq.ids[1], v.sep_id());
        assert!(seq.ids[2..].iter().all(|&i| i == v.pad_id()));
    }

    #[test]
    fn long_text_truncates_and_keeps_sep() {
        let v = vocab();
        let text = vec!["geld"; 600].join(" ");
        assert_eq!(v.tokenize(&text).len(), 600);
        let seq = encode(&text, &v, 512);
        assert_eq!(seq.ids.len(), 512);
        assert!(seq.attention_mask.iter().all(|&m| m == 1));
        assert_eq!(*seq.ids.last().unwrap(), v.sep_id());
    }

    #[test]
    fn greedy_longest_match() {
        let v = Vocab::new(
            [
                "[PAD]", "[UNK]", "[CLS]", "[SEP]", "spiel", "##sucht", "##s", "s", "##u", "##c",
                "##h", "##t",
            ]
            .map(String::from)
            .to_vec(),
            SpecialTokens::default(),
        )
        .unwrap();
        let ids = v.tokenize("spielsucht");
        let toks: Vec<_> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["spiel", "##sucht"]);
        assert_eq!(v.tokenize("xyz"), vec![v.unk_id()]);
    }

    #[test]
    fn unseen_characters_fall_back_to_unk() {
        let v = vocab();
        let ids = v.tokenize("geld ✓");
        assert_eq!(*ids.last().unwrap(), v.unk_id());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn missing_special_is_an_error() {
        let err = Vocab::new(vec!["a".into()], SpecialTokens::default()).unwrap_err();
        assert_eq!(err.code(), "validation");
    }

    proptest! {
        #[test]
        fn preprocess_idempotent(s in "\\PC{0,40}") {
            for p in PreprocessPipeline::ALL {
                let once = preprocess(&s, p);
                prop_assert_eq!(preprocess(&once, p), once.clone());
            }
        }

        #[test]
        fn encode_shape_and_mask(s in "\\PC{0,200}", max_len in 2usize..64) {
            let v = vocab();
            let seq = encode(&s, &v, max_len);
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.attention_mask.len(), max_len);
            let real = seq.real_len();
            prop_assert!(seq.attention_mask[..real].iter().all(|&m| m == 1));
            prop_assert!(seq.ids[real..].iter().all(|&i| i == v.pad_id()));
            prop_assert_eq!(seq.ids[real - 1], v.sep_id());
            prop_assert_eq!(encode(&s, &v, max_len), seq);
        }
    }
}
