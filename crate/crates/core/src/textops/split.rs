//! Rule-based sentence splitting that keeps every byte of the input.

use std::collections::HashSet;

use super::TextError;

/// A text decomposed into sentences and the whitespace around them.
///
/// `gaps[0] + sentences[0] + gaps[1] + ... + sentences[n-1] + gaps[n]` is the
/// original text, byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotatedText {
    pub gaps: Vec<String>,
    pub sentences: Vec<String>,
}

impl AnnotatedText {
    /// The original text.
    pub fn source(&self) -> String {
        let mut out = String::new();
        for (gap, sentence) in self.gaps.iter().zip(&self.sentences) {
            out.push_str(gap);
            out.push_str(sentence);
        }
        if let Some(last) = self.gaps.last() {
            out.push_str(last);
        }
        out
    }
}

/// Abbreviations that do not end a sentence, e.g. `Dr.` or `etc.`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Abbreviations(HashSet<String>);

impl Abbreviations {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(items: I) -> Self {
        Self(items.into_iter().map(|s| s.into().trim_end_matches('.').to_string()).collect())
    }

    /// One entry per line; blank lines and `#` comments are ignored. A trailing
    /// period on an entry is optional.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    /// Built-in list for a language code, empty for unknown languages.
    pub fn for_language(lang: &str) -> Self {
        match lang {
            "en" => Self::parse(include_str!("../../data/abbreviations/en.txt")),
            "de" => Self::parse(include_str!("../../data/abbreviations/de.txt")),
            "es" => Self::parse(include_str!("../../data/abbreviations/es.txt")),
            _ => Self::default(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word.trim_end_matches('.'))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '»', '”', '’'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '{', '«', '“', '‘', '¿', '¡'];

/// Whether a whitespace run between `before` and the character `next` ends a
/// sentence. `word` is the whitespace-free token immediately before the run.
fn is_boundary(word: &str, next: char, abbreviations: &Abbreviations) -> bool {
    let core = word.trim_end_matches(CLOSERS);
    let Some(last) = core.chars().last() else {
        return false;
    };
    if !matches!(last, '.' | '?' | '!') {
        return false;
    }
    if !(next.is_uppercase() || OPENERS.contains(&next)) {
        return false;
    }
    if core.ends_with("..") || !core.ends_with('.') {
        return true;
    }
    let stem = core.trim_start_matches(OPENERS).trim_end_matches('.');
    let mut chars = stem.chars();
    let single_initial = matches!((chars.next(), chars.next()), (Some(c), None) if c.is_uppercase());
    !(single_initial || abbreviations.contains(stem))
}

/// Splits `text` into sentences.
///
/// A sentence ends after `.`, `?` or `!` (optionally followed by closing
/// quotes or brackets) when whitespace and then an uppercase letter or an
/// opening quote/bracket follow, unless the word before is a known
/// abbreviation or a single uppercase initial. A blank line always ends a
/// sentence. Whitespace between sentences is kept in `gaps`.
pub fn split_sentences(text: &str, abbreviations: &Abbreviations) -> AnnotatedText {
    let body_start = text.len() - text.trim_start().len();
    let body_end = text.trim_end().len();
    if body_start >= body_end {
        return AnnotatedText { gaps: vec![text.to_string()], sentences: Vec::new() };
    }
    let mut gaps = vec![text[..body_start].to_string()];
    let mut sentences = Vec::new();

    let mut sentence_start = body_start;
    let mut word_start = body_start;
    let mut iter = text[body_start..body_end].char_indices().peekable();
    while let Some((off, c)) = iter.next() {
        if !c.is_whitespace() {
            continue;
        }
        let run_start = body_start + off;
        let mut run_end = run_start + c.len_utf8();
        while let Some(&(o, w)) = iter.peek() {
            if !w.is_whitespace() {
                break;
            }
            run_end = body_start + o + w.len_utf8();
            iter.next();
        }
        let run = &text[run_start..run_end];
        let next = text[run_end..].chars().next().expect("run is inside the body");
        let word = &text[word_start..run_start];
        if run.matches('\n').count() >= 2 || is_boundary(word, next, abbreviations) {
            sentences.push(text[sentence_start..run_start].to_string());
            gaps.push(run.to_string());
            sentence_start = run_end;
        }
        word_start = run_end;
    }
    sentences.push(text[sentence_start..body_end].to_string());
    gaps.push(text[body_end..].to_string());
    AnnotatedText { gaps, sentences }
}

/// Interleaves the original gaps with translated sentences.
pub fn reassemble(annotated: &AnnotatedText, translated: &[String]) -> Result<String, TextError> {
    if translated.len() != annotated.sentences.len() {
        return Err(TextError::SentenceCount {
            expected: annotated.sentences.len(),
            found: translated.len(),
        });
    }
    let mut out = String::new();
    for (gap, sentence) in annotated.gaps.iter().zip(translated) {
        out.push_str(gap);
        out.push_str(sentence);
    }
    if let Some(last) = annotated.gaps.last() {
        out.push_str(last);
    }
    Ok(out)
}
