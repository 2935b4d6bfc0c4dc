//! Punctuation-splitting tokenizer and its inverse.
//!
//! Tokens are split on whitespace, then punctuation is separated from word
//! characters. Word-internal hyphens and apostrophes stay attached, as do
//! `.`/`,`/`:` between digits and periods ending a known abbreviation.

/// Abbreviations whose trailing period is kept (lowercase, no period).
pub const ABBREVIATIONS: &[&str] = &[
    // Czech
    "např", "atd", "tzv", "tj", "mj", "resp", "apod", "tzn", "č", "str", "sv", "prof", "ing", "mgr",
    "dr", "doc", "odst", "písm", // Polish
    "np", "itd", "itp", "tzw", "ok", "tj", "ul", "wg", "nr", "godz", "ws", "pkt", "art", "ust",
];

/// Tokens that attach to the preceding token when detokenizing.
const CLOSING: &[&str] = &[".", ",", ";", ":", "!", "?", ")", "]", "}", "%", "..."];
/// Tokens that attach to the following token when detokenizing.
const OPENING: &[&str] = &["(", "[", "{", "¿", "¡"];

const ESCAPES: &[(char, &str)] = &[
    ('&', "&amp;"),
    ('|', "&#124;"),
    ('<', "&lt;"),
    ('>', "&gt;"),
    ('\'', "&apos;"),
    ('"', "&quot;"),
    ('[', "&#91;"),
    (']', "&#93;"),
];

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_abbreviation(word: &str) -> bool {
    let lower = word.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
        || (word.chars().count() == 1 && word.chars().all(char::is_uppercase))
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let n = chars.len();
    let mut i = 0;
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    while i < n {
        let c = chars[i];
        if is_word(c) {
            word.push(c);
            i += 1;
            continue;
        }
        let prev = i.checked_sub(1).map(|p| chars[p]);
        let next = chars.get(i + 1).copied();
        let between_words =
            prev.is_some_and(is_word) && next.is_some_and(is_word) && !word.is_empty();
        let between_digits = prev.is_some_and(|p| p.is_ascii_digit())
            && next.is_some_and(|q| q.is_ascii_digit())
            && !word.is_empty();
        if (between_words && matches!(c, '-' | '\''))
            || (between_digits && matches!(c, '.' | ',' | ':'))
        {
            word.push(c);
            i += 1;
            continue;
        }
        if c == '.' {
            let run = chars[i..].iter().take_while(|&&d| d == '.').count();
            if run == 1 && i + 1 == n && !word.is_empty() && is_abbreviation(&word) {
                word.push('.');
                i += 1;
                continue;
            }
            flush(&mut word, out);
            out.push(".".repeat(run));
            i += run;
            continue;
        }
        flush(&mut word, out);
        out.push(c.to_string());
        i += 1;
    }
    flush(&mut word, out);
}

/// Splits normalized text into tokens. With `no_escape` unset, special
/// characters are replaced by entity escapes.
pub fn tokenize(text: &str, no_escape: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        split_chunk(chunk, &mut tokens);
    }
    if !no_escape {
        for t in &mut tokens {
            *t = escape(t);
        }
    }
    tokens
}

pub fn escape(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match ESCAPES.iter().find(|(from, _)| *from == c) {
            Some((_, to)) => out.push_str(to),
            None => out.push(c),
        }
    }
    out
}

pub fn unescape(token: &str) -> String {
    let mut out = token.to_string();
    // &amp; last so "&amp;lt;" decodes to "&lt;", not "<".
    for (c, esc) in ESCAPES.iter().rev() {
        out = out.replace(esc, &c.to_string());
    }
    out
}

/// Joins tokens, re-attaching punctuation. Straight quotes alternate
/// between opening and closing.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    let mut double_quotes = 0usize;
    let mut single_quotes = 0usize;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let (attach_left, attach_right) = match tok {
            "\"" => {
                double_quotes += 1;
                if double_quotes % 2 == 1 {
                    (false, true)
                } else {
                    (true, false)
                }
            }
            "'" => {
                single_quotes += 1;
                if single_quotes % 2 == 1 {
                    (false, true)
                } else {
                    (true, false)
                }
            }
            t if CLOSING.contains(&t) => (true, false),
            t if OPENING.contains(&t) => (false, true),
            _ => (false, false),
        };
        if i > 0 && !attach_left && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = attach_right;
    }
    out
}
