//! Whitespace + punctuation tokenizer.
//!
//! Text is split on Unicode whitespace, then every punctuation character is
//! emitted as its own token. Nothing else is normalized unless lowercasing is
//! requested.

const EXTRA_PUNCT: &[char] = &[
    '«', '»', '„', '“', '”', '‘', '’', '‚', '–', '—', '…', '¿', '¡', '·', '§',
];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCT.contains(&c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenizerOptions {
    pub lowercase: bool,
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with(text, TokenizerOptions::default())
}

pub fn tokenize_with(text: &str, opts: TokenizerOptions) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    if opts.lowercase {
        for t in &mut out {
            *t = t.to_lowercase();
        }
    }
    out
}

/// Whitespace detokenization: tokens joined by single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
