use std::collections::HashMap;
use std::path::Path;

use super::DataError;

pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token inventory. Id 0 is the blank; ids are dense.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from real tokens; the blank is prepended.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![BLANK_TOKEN.to_string()];
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_entries(all).map_err(|(line, msg)| format!("entry {line}: {msg}"))
    }

    fn from_entries(tokens: Vec<String>) -> Result<Self, (usize, String)> {
        if tokens.first().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err((
                1,
                format!("first entry must be the blank marker {BLANK_TOKEN}"),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err((i + 1, format!("invalid token {t:?}")));
            }
            if let Some(first) = index.insert(t.clone(), i) {
                return Err((
                    i + 1,
                    format!("duplicate token {t:?} (first on line {})", first + 1),
                ));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Real tokens `V` (blank excluded).
    pub fn size(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk(&self) -> Option<usize> {
        self.id(UNK_TOKEN)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_file_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

/// One token per line; line 1 must be the blank marker.
pub fn load_vocab(path: &Path) -> Result<Vocab, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let tokens = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect();
    Vocab::from_entries(tokens).map_err(|(line, message)| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Token ids plus how many symbols fell outside the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

/// Whitespace-separated symbols to ids. Out-of-vocabulary symbols map to the
/// unknown token when the vocabulary has one and are dropped otherwise;
/// either way they are counted.
pub fn tokenize(text: &str, vocab: &Vocab) -> Tokenized {
    let mut ids = Vec::new();
    let mut unknown = 0;
    for sym in text.split_whitespace() {
        match vocab.id(sym).filter(|&id| id != 0) {
            Some(id) => ids.push(id),
            None => {
                unknown += 1;
                if let Some(u) = vocab.unk() {
                    ids.push(u);
                }
            }
        }
    }
    Tokenized { ids, unknown }
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn three_line_file() {
        let f = write("<blank>\na\nb\n");
        let v = load_vocab(f.path()).unwrap();
        assert_eq!(v.size(), 2);
        assert_eq!(
            (v.id("<blank>"), v.id("a"), v.id("b")),
            (Some(0), Some(1), Some(2))
        );
        for id in 0..=2 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn duplicate_names_its_line() {
        let f = write("<blank>\na\nb\na\n");
        match load_vocab(f.path()) {
            Err(DataError::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_blank_is_rejected() {
        let f = write("a\n<blank>\n");
        assert!(matches!(
            load_vocab(f.path()),
            Err(DataError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tokenize_round_trip_and_unknowns() {
        let v = Vocab::from_tokens(["a", "b"]).unwrap();
        let t = tokenize("a b", &v);
        assert_eq!(t.ids, vec![1, 2]);
        assert_eq!(detokenize(&t.ids, &v), "a b");
        assert_eq!(
            tokenize("", &v),
            Tokenized {
                ids: vec![],
                unknown: 0
            }
        );
        let with_unk = Vocab::from_tokens([UNK_TOKEN, "a", "b"]).unwrap();
        let t = tokenize("a zz b", &with_unk);
        assert_eq!(t.ids, vec![2, 1, 3]);
        assert_eq!(t.unknown, 1);
        let t = tokenize("a zz", &v);
        assert_eq!((t.ids, t.unknown), (vec![1], 1));
    }
}
