//! Punctuation normalization.
//!
//! The substitution table is fixed; `tests/golden/punctuation.tsv` pins its
//! behaviour byte for byte. After substitution, runs of whitespace collapse
//! to one ASCII space and the line is trimmed.

use unicode_normalization::UnicodeNormalization;

/// Single-character substitutions applied before whitespace collapsing.
pub const PUNCTUATION_TABLE: &[(char, &str)] = &[
    ('\u{201E}', "\""),  // „ double low-9 quote
    ('\u{201C}', "\""),  // “
    ('\u{201D}', "\""),  // ”
    ('\u{201F}', "\""),  // ‟
    ('\u{00AB}', "\""),  // «
    ('\u{00BB}', "\""),  // »
    ('\u{201A}', "'"),   // ‚ single low-9 quote
    ('\u{2018}', "'"),   // ‘
    ('\u{2019}', "'"),   // ’
    ('\u{201B}', "'"),   // ‛
    ('\u{2039}', "'"),   // ‹
    ('\u{203A}', "'"),   // ›
    ('\u{2010}', "-"),   // hyphen
    ('\u{2011}', "-"),   // non-breaking hyphen
    ('\u{2012}', "-"),   // figure dash
    ('\u{2013}', "-"),   // en dash
    ('\u{2014}', "-"),   // em dash
    ('\u{2212}', "-"),   // minus sign
    ('\u{2026}', "..."), // ellipsis
    ('\u{00A0}', " "),   // no-break space
    ('\u{2007}', " "),   // figure space
    ('\u{2009}', " "),   // thin space
    ('\u{200A}', " "),   // hair space
    ('\u{202F}', " "),   // narrow no-break space
    ('\u{3000}', " "),   // ideographic space
    ('\t', " "),
    ('\u{200B}', ""), // zero-width space
    ('\u{FEFF}', ""), // byte-order mark
];

fn substitute(c: char) -> Option<&'static str> {
    PUNCTUATION_TABLE
        .iter()
        .find(|(from, _)| *from == c)
        .map(|(_, to)| *to)
}

/// Applies [`PUNCTUATION_TABLE`], collapses whitespace and trims. Idempotent.
pub fn normalize_punctuation(text: &str) -> String {
    let mut replaced = String::with_capacity(text.len());
    for c in text.chars() {
        match substitute(c) {
            Some(s) => replaced.push_str(s),
            None => replaced.push(c),
        }
    }
    replaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Unicode canonical composition (NFC).
pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}
