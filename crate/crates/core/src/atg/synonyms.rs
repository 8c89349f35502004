//! Synonym providers.
//!
//! A provider returns the senses of a word, each sense being a list of lemma
//! names. Two sources are supported: a TSV file and the WordNet database files
//! (`index.noun` / `data.noun`).

use std::collections::HashMap;
use std::path::Path;

use super::AtgError;

pub trait SynonymProvider: Send + Sync {
    /// Senses of `word`, each as its list of lemmas. Unknown words yield `[]`.
    fn senses(&self, word: &str) -> Result<Vec<Vec<String>>, AtgError>;

    /// Distinct lemmas across all senses, excluding `word` itself.
    fn synonyms(&self, word: &str) -> Result<Vec<String>, AtgError> {
        let me = normalize(word);
        let mut out: Vec<String> = Vec::new();
        for sense in self.senses(word)? {
            for lemma in sense {
                let n = normalize(&lemma);
                if n.is_empty() || n == me || out.iter().any(|o| normalize(o) == n) {
                    continue;
                }
                out.push(lemma);
            }
        }
        Ok(out)
    }
}

fn normalize(s: &str) -> String {
    s.trim().replace('_', " ").to_lowercase()
}

/// No synonyms for anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoSynonyms;

impl SynonymProvider for NoSynonyms {
    fn senses(&self, _: &str) -> Result<Vec<Vec<String>>, AtgError> {
        Ok(Vec::new())
    }
}

/// `class<TAB>syn1, syn2, ...` per line. Repeating a class on several lines
/// declares several senses. `#` starts a comment line.
#[derive(Debug, Default, Clone)]
pub struct TsvSynonyms {
    map: HashMap<String, Vec<Vec<String>>>,
}

impl TsvSynonyms {
    pub fn parse(text: &str) -> Result<Self, AtgError> {
        let mut map: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (class, syns) = line.split_once('\t').ok_or_else(|| {
                AtgError::Synonyms(format!("line {}: expected <class>\\t<synonyms>", n + 1))
            })?;
            let sense: Vec<String> = syns
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            map.entry(normalize(class)).or_default().push(sense);
        }
        Ok(Self { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AtgError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl SynonymProvider for TsvSynonyms {
    fn senses(&self, word: &str) -> Result<Vec<Vec<String>>, AtgError> {
        Ok(self.map.get(&normalize(word)).cloned().unwrap_or_default())
    }
}

/// Noun synsets read from a WordNet `dict/` directory.
pub struct WordNetSynonyms {
    index: HashMap<String, Vec<usize>>,
    data: Vec<u8>,
}

impl WordNetSynonyms {
    pub fn open(dict_dir: impl AsRef<Path>) -> Result<Self, AtgError> {
        let dir = dict_dir.as_ref();
        let index = std::fs::read_to_string(dir.join("index.noun"))?;
        let data = std::fs::read(dir.join("data.noun"))?;
        Self::from_parts(&index, data)
    }

    pub fn from_parts(index_noun: &str, data_noun: Vec<u8>) -> Result<Self, AtgError> {
        let mut index = HashMap::new();
        for (n, line) in index_noun.lines().enumerate() {
            if line.starts_with(' ') || line.trim().is_empty() {
                continue;
            }
            let bad = || AtgError::Synonyms(format!("index.noun line {}: malformed", n + 1));
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() < 4 {
                return Err(bad());
            }
            let synset_cnt: usize = tok[2].parse().map_err(|_| bad())?;
            let p_cnt: usize = tok[3].parse().map_err(|_| bad())?;
            let first = 4 + p_cnt + 2;
            let offsets = tok
                .get(first..first + synset_cnt)
                .ok_or_else(bad)?
                .iter()
                .map(|o| o.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>, _>>()?;
            index.insert(tok[0].to_string(), offsets);
        }
        Ok(Self {
            index,
            data: data_noun,
        })
    }

    fn synset_lemmas(&self, offset: usize) -> Result<Vec<String>, AtgError> {
        let bad = || AtgError::Synonyms(format!("data.noun: no valid synset at offset {offset}"));
        let rest = self.data.get(offset..).ok_or_else(bad)?;
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad())?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 || tok[0].parse::<usize>().ok() != Some(offset) {
            return Err(bad());
        }
        let w_cnt = usize::from_str_radix(tok[3], 16).map_err(|_| bad())?;
        (0..w_cnt)
            .map(|i| {
                let word = tok.get(4 + 2 * i).ok_or_else(bad)?;
                // adjective syntactic markers such as "(a)" never appear on nouns,
                // but strip them anyway
                let word = word.split('(').next().unwrap_or(word);
                Ok(word.replace('_', " "))
            })
            .collect()
    }
}

impl SynonymProvider for WordNetSynonyms {
    fn senses(&self, word: &str) -> Result<Vec<Vec<String>>, AtgError> {
        let key = word.trim().to_lowercase().replace(' ', "_");
        match self.index.get(&key) {
            Some(offsets) => offsets.iter().map(|&o| self.synset_lemmas(o)).collect(),
            None => Ok(Vec::new()),
        }
    }
}
