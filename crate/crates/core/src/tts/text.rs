//! Character front-end.

use crate::error::{Error, Result};

/// Symbols the encoder accepts, in id order.
pub const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz.,?!' ";

pub const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Lowercases letters and spells out digits one by one. Any character
/// outside letters, digits and `. , ? ! '` or space is rejected with its
/// position (in characters) in `text`.
pub fn normalize_text(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut after_digit = false;
    for (position, ch) in text.chars().enumerate() {
        if let Some(d) = ch.to_digit(10) {
            if !out.is_empty() && !out.ends_with(' ') {
                out.push(' ');
            }
            out.push_str(DIGIT_WORDS[d as usize]);
            after_digit = true;
            continue;
        }
        let lower = ch.to_ascii_lowercase();
        if !CHARSET.contains(lower) || !ch.is_ascii() {
            return Err(Error::UnknownCharacter { ch, position });
        }
        if after_digit && lower != ' ' && lower.is_ascii_alphabetic() {
            out.push(' ');
        }
        after_digit = false;
        out.push(lower);
    }
    Ok(out)
}

/// Ids of already-normalized text against `charset`.
pub fn text_to_ids(text: &str, charset: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(position, ch)| {
            charset
                .chars()
                .position(|c| c == ch)
                .ok_or(Error::UnknownCharacter { ch, position })
        })
        .collect()
}

/// Normalizes raw text and maps it to ids; empty input is an error.
pub fn encode_text(text: &str, charset: &str) -> Result<Vec<usize>> {
    let ids = text_to_ids(&normalize_text(text)?, charset)?;
    if ids.is_empty() {
        return Err(Error::invalid("empty text"));
    }
    Ok(ids)
}
