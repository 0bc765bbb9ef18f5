//! Header stripping, token masking and verb extraction.
//!
//! Masking is token-for-token: every whitespace-separated token maps to
//! exactly one output token, so a skeleton always has the same length as
//! the message it came from.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use once_cell::sync::Lazy;
use regex::Regex;

use crate::error::{Error, Result};

const DEFAULT_RULES: &str = include_str!("../fixtures/mask_rules.tsv");
const DEFAULT_VERBS: &str = include_str!("../fixtures/verbs.txt");
const DEFAULT_IRREGULAR: &str = include_str!("../fixtures/irregular_verbs.tsv");

static DEFAULT_MASKER: Lazy<Masker> =
    Lazy::new(|| Masker::from_table(DEFAULT_RULES).expect("bundled mask rules are valid"));
static DEFAULT_LEXICON: Lazy<VerbLexicon> = Lazy::new(|| {
    VerbLexicon::from_lists(DEFAULT_VERBS, DEFAULT_IRREGULAR).expect("bundled verb lists are valid")
});

/// Trailing punctuation peeled before matching.
const TRAILING_PUNCT: &[char] = &[',', ';', ':', '.', '!', '?'];
const OPENERS: &[char] = &['(', '[', '{', '<', '"', '\''];
const CLOSERS: &[char] = &[')', ']', '}', '>', '"', '\''];

/// Tokens the masker itself emits, plus the template placeholder.
const MASK_TOKENS: &[&str] = &["<NUM>", "<CL>", "<UCL>", "<BL>", "<SL>", "<*>"];

pub fn is_mask_token(s: &str) -> bool {
    MASK_TOKENS.contains(&s)
}

pub fn contains_mask_token(s: &str) -> bool {
    s.contains('<') && MASK_TOKENS.iter().any(|m| s.contains(m))
}

fn starts_with_mask(s: &str) -> bool {
    MASK_TOKENS.iter().any(|m| s.starts_with(m))
}

fn ends_with_mask(s: &str) -> bool {
    MASK_TOKENS.iter().any(|m| s.ends_with(m))
}

/// The five variable shapes, in the order they are tried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskKind {
    Num,
    Cl,
    Ucl,
    Bl,
    Sl,
}

impl MaskKind {
    pub const ALL: [MaskKind; 5] = [
        MaskKind::Num,
        MaskKind::Cl,
        MaskKind::Ucl,
        MaskKind::Bl,
        MaskKind::Sl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Num => "NUM",
            MaskKind::Cl => "CL",
            MaskKind::Ucl => "UCL",
            MaskKind::Bl => "BL",
            MaskKind::Sl => "SL",
        }
    }

    pub fn replacement(self) -> &'static str {
        match self {
            MaskKind::Num => "<NUM>",
            MaskKind::Cl => "<CL>",
            MaskKind::Ucl => "<UCL>",
            MaskKind::Bl => "<BL>",
            MaskKind::Sl => "<SL>",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        MaskKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct MaskRule {
    pub kind: MaskKind,
    pub pattern: Regex,
}

impl MaskRule {
    pub fn replacement(&self) -> &'static str {
        self.kind.replacement()
    }
}

/// A masked message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub skeleton: String,
    pub key_tokens: Vec<String>,
}

/// Splits a token into (prefix, core, suffix) plus the "shell", which is the
/// token without trailing punctuation but with brackets kept.
struct Parts<'a> {
    shell: &'a str,
    prefix: &'a str,
    core: &'a str,
    suffix: &'a str,
    trailing: &'a str,
}

fn split_token(token: &str) -> Parts<'_> {
    let shell = token.trim_end_matches(TRAILING_PUNCT);
    let trailing = &token[shell.len()..];
    let mut start = 0;
    let mut end = shell.len();
    while start < end {
        let rest = &shell[start..end];
        match rest.chars().next() {
            Some(c) if OPENERS.contains(&c) && !starts_with_mask(rest) => start += c.len_utf8(),
            _ => break,
        }
    }
    while start < end {
        let rest = &shell[start..end];
        match rest.chars().next_back() {
            Some(c) if CLOSERS.contains(&c) && !ends_with_mask(rest) => end -= c.len_utf8(),
            _ => break,
        }
    }
    Parts {
        shell,
        prefix: &shell[..start],
        core: &shell[start..end],
        suffix: &shell[end..],
        trailing,
    }
}

/// Ordered mask rule table.
#[derive(Debug, Clone)]
pub struct Masker {
    rules: Vec<MaskRule>,
}

impl Default for Masker {
    fn default() -> Self {
        DEFAULT_MASKER.clone()
    }
}

impl Masker {
    /// Parses a `NAME<TAB>PATTERN` table. All five rules must be present;
    /// they are applied in the fixed NUM, CL, UCL, BL, SL order regardless
    /// of their order in the table.
    pub fn from_table(table: &str) -> Result<Self> {
        let mut rules: Vec<MaskRule> = Vec::new();
        for (lineno, line) in table.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (name, pattern) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "mask rule line {}: expected NAME<TAB>PATTERN",
                    lineno + 1
                ))
            })?;
            let kind = MaskKind::from_name(name.trim()).ok_or_else(|| {
                Error::Config(format!(
                    "mask rule line {}: unknown rule {name:?}",
                    lineno + 1
                ))
            })?;
            if rules.iter().any(|r| r.kind == kind) {
                return Err(Error::Config(format!("mask rule {kind} defined twice")));
            }
            let pattern = Regex::new(pattern)
                .map_err(|e| Error::Config(format!("mask rule {kind}: invalid pattern: {e}")))?;
            rules.push(MaskRule { kind, pattern });
        }
        for kind in MaskKind::ALL {
            if !rules.iter().any(|r| r.kind == kind) {
                return Err(Error::Config(format!("mask rule {kind} missing")));
            }
        }
        rules.sort_by_key(|r| r.kind);
        Ok(Masker { rules })
    }

    pub fn rules(&self) -> &[MaskRule] {
        &self.rules
    }

    fn rule(&self, kind: MaskKind) -> &MaskRule {
        &self.rules[kind as usize]
    }

    /// Which rule fires for `token`, if any.
    pub fn classify(&self, token: &str) -> Option<MaskKind> {
        if is_mask_token(token) {
            return None;
        }
        let parts = split_token(token);
        if parts.shell.is_empty() || contains_mask_token(parts.shell) {
            return None;
        }
        let core = parts.core;
        // Purely alphabetic words of two or more letters that are not all
        // caps cannot match any rule.
        if core.len() == parts.shell.len()
            && core.len() >= 2
            && core.bytes().all(|b| b.is_ascii_alphabetic())
            && !core.bytes().all(|b| b.is_ascii_uppercase())
        {
            return None;
        }
        if !core.is_empty() {
            for kind in [MaskKind::Num, MaskKind::Cl, MaskKind::Ucl, MaskKind::Bl] {
                if self.rule(kind).pattern.is_match(core) {
                    return Some(kind);
                }
            }
        }
        if self.rule(MaskKind::Sl).pattern.is_match(parts.shell) {
            return Some(MaskKind::Sl);
        }
        None
    }

    pub fn mask_token<'a>(&self, token: &'a str) -> Cow<'a, str> {
        match self.classify(token) {
            None => Cow::Borrowed(token),
            Some(MaskKind::Sl) => {
                let parts = split_token(token);
                Cow::Owned(format!("{}{}", MaskKind::Sl.replacement(), parts.trailing))
            }
            Some(kind) => {
                let p = split_token(token);
                Cow::Owned(format!(
                    "{}{}{}{}",
                    p.prefix,
                    kind.replacement(),
                    p.suffix,
                    p.trailing
                ))
            }
        }
    }

    pub fn mask_message(&self, content: &str) -> Result<Skeleton> {
        let key_tokens: Vec<String> = content
            .split_whitespace()
            .map(|t| self.mask_token(t).into_owned())
            .collect();
        if key_tokens.is_empty() {
            return Err(Error::EmptyMessage);
        }
        Ok(Skeleton {
            skeleton: key_tokens.join(" "),
            key_tokens,
        })
    }
}

/// Masks one token with the bundled rule table.
pub fn mask_token(token: &str) -> Cow<'_, str> {
    DEFAULT_MASKER.mask_token(token)
}

/// Masks a whole message with the bundled rule table.
pub fn mask_message(content: &str) -> Result<Skeleton> {
    DEFAULT_MASKER.mask_message(content)
}

pub fn default_masker() -> &'static Masker {
    &DEFAULT_MASKER
}

/// Optional per-dataset header pattern with a named `content` capture.
#[derive(Debug, Clone)]
pub struct HeaderPattern(Regex);

impl HeaderPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let anchored = if pattern.starts_with('^') {
            pattern.to_owned()
        } else {
            format!("^(?:{pattern})")
        };
        let re = Regex::new(&anchored)
            .map_err(|e| Error::Config(format!("invalid header pattern: {e}")))?;
        if !re.capture_names().flatten().any(|n| n == "content") {
            return Err(Error::Config(
                "header pattern needs a named capture group `(?P<content>...)`".into(),
            ));
        }
        Ok(HeaderPattern(re))
    }
}

/// Returns the message body of `raw_line`: the `content` capture when the
/// pattern matches, the whole line otherwise.
pub fn strip_header<'a>(raw_line: &'a str, pattern: Option<&HeaderPattern>) -> &'a str {
    let Some(HeaderPattern(re)) = pattern else {
        return raw_line;
    };
    match re.captures(raw_line).and_then(|c| c.name("content")) {
        Some(m) => m.as_str(),
        None => raw_line,
    }
}

/// Verb lemmas plus a small irregular-form table and a suffix lemmatizer.
#[derive(Debug, Clone)]
pub struct VerbLexicon {
    lemmas: HashSet<String>,
    irregular: HashMap<String, String>,
}

impl Default for VerbLexicon {
    fn default() -> Self {
        DEFAULT_LEXICON.clone()
    }
}

pub fn default_lexicon() -> &'static VerbLexicon {
    &DEFAULT_LEXICON
}

impl VerbLexicon {
    /// `lemmas` is newline-delimited; `irregular` holds `FORM<TAB>LEMMA` lines.
    pub fn from_lists(lemmas: &str, irregular: &str) -> Result<Self> {
        let lemmas: HashSet<String> = lemmas
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let mut irr = HashMap::new();
        for line in irregular.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (form, lemma) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad irregular verb line {line:?}")))?;
            irr.insert(form.trim().to_lowercase(), lemma.trim().to_lowercase());
        }
        Ok(VerbLexicon {
            lemmas,
            irregular: irr,
        })
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        VerbLexicon {
            lemmas: words
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
            irregular: HashMap::new(),
        }
    }

    pub fn contains(&self, lemma: &str) -> bool {
        self.lemmas.contains(lemma)
    }

    /// Maps a lowercase word to its verb lemma, if it is a known verb form.
    pub fn lemmatize(&self, word: &str) -> Option<String> {
        if let Some(l) = self.irregular.get(word) {
            return Some(l.clone());
        }
        if self.lemmas.contains(word) {
            return Some(word.to_owned());
        }
        let n = word.len();
        let mut candidates: Vec<String> = Vec::new();
        if n > 4 && word.ends_with("ing") {
            let stem = &word[..n - 3];
            candidates.push(stem.to_owned());
            candidates.push(format!("{stem}e"));
            if let Some(u) = undouble(stem) {
                candidates.push(u.to_owned());
            }
        } else if n > 3 && word.ends_with("ied") {
            candidates.push(format!("{}y", &word[..n - 3]));
        } else if n > 3 && word.ends_with("ed") {
            let stem = &word[..n - 2];
            candidates.push(stem.to_owned());
            candidates.push(word[..n - 1].to_owned());
            if let Some(u) = undouble(stem) {
                candidates.push(u.to_owned());
            }
        } else if n > 3 && word.ends_with("ies") {
            candidates.push(format!("{}y", &word[..n - 3]));
        } else if n > 2 && word.ends_with('s') && !word.ends_with("ss") {
            if word.ends_with("es") {
                candidates.push(word[..n - 2].to_owned());
            }
            candidates.push(word[..n - 1].to_owned());
        }
        candidates.into_iter().find(|c| self.lemmas.contains(c))
    }

    /// Verb lemmas appearing in a skeleton key. Mask tokens never match.
    pub fn extract_verbs(&self, key: &str) -> BTreeSet<String> {
        key.split_whitespace()
            .filter(|t| !contains_mask_token(t))
            .filter_map(|t| {
                let word = t.trim_matches(|c: char| !c.is_ascii_alphabetic());
                if word.is_empty() || !word.bytes().all(|b| b.is_ascii_alphabetic()) {
                    return None;
                }
                self.lemmatize(&word.to_ascii_lowercase())
            })
            .collect()
    }
}

/// "stopp" -> "stop"
fn undouble(stem: &str) -> Option<&str> {
    let b = stem.as_bytes();
    let n = b.len();
    (n >= 3 && b[n - 1] == b[n - 2] && !b"aeiou".contains(&b[n - 1])).then(|| &stem[..n - 1])
}
