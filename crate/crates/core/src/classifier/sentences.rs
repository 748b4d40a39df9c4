//! Sentence splitting that respects inline and display math.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Math {
    Bracket,
    Paren,
    Dollar,
    DoubleDollar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSplit<'a> {
    pub sentences: Vec<&'a str>,
    /// Set when math delimiters were unbalanced and the text was split on
    /// newlines only.
    pub diagnostic: Option<String>,
}

/// Splits on `.`, `!`, `?` (followed by whitespace or end of text) and on
/// newlines, never inside `\[...\]`, `\(...\)`, `$...$` or `$$...$$`.
/// Sentences are trimmed and keep their terminator.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let split = split_sentences_checked(text);
    if let Some(d) = &split.diagnostic {
        log::debug!("{d}");
    }
    split.sentences
}

pub fn split_sentences_checked(text: &str) -> SentenceSplit<'_> {
    match split_math_aware(text) {
        Ok(sentences) => SentenceSplit { sentences, diagnostic: None },
        Err(reason) => SentenceSplit {
            sentences: text.split('\n').map(str::trim).filter(|s| !s.is_empty()).collect(),
            diagnostic: Some(format!("unbalanced math delimiters ({reason}); split on newlines only")),
        },
    }
}

fn split_math_aware(text: &str) -> Result<Vec<&str>, String> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut math: Option<Math> = None;
    let mut start = 0;
    let mut i = 0;

    fn push<'t>(text: &'t str, from: usize, to: usize, out: &mut Vec<&'t str>) {
        let s = text[from..to].trim();
        if !s.is_empty() {
            out.push(s);
        }
    }

    while i < bytes.len() {
        let c = bytes[i];
        let next = bytes.get(i + 1).copied();
        match math {
            Some(mode) => {
                let close = match (mode, c, next) {
                    (Math::Bracket, b'\\', Some(b']')) | (Math::Paren, b'\\', Some(b')')) => Some(2),
                    (Math::DoubleDollar, b'$', Some(b'$')) => Some(2),
                    (Math::Dollar, b'$', _) => Some(1),
                    (_, b'\\', Some(_)) => {
                        // skip escaped character such as \$ or \{
                        i += 2;
                        continue;
                    }
                    _ => None,
                };
                if let Some(len) = close {
                    math = None;
                    i += len;
                    continue;
                }
            }
            None => match (c, next) {
                (b'\\', Some(b'[')) => {
                    math = Some(Math::Bracket);
                    i += 2;
                    continue;
                }
                (b'\\', Some(b'(')) => {
                    math = Some(Math::Paren);
                    i += 2;
                    continue;
                }
                (b'\\', Some(b']')) | (b'\\', Some(b')')) => {
                    return Err(format!("closing delimiter without opener at byte {i}"));
                }
                (b'\\', Some(_)) => {
                    i += 2;
                    continue;
                }
                (b'$', Some(b'$')) => {
                    math = Some(Math::DoubleDollar);
                    i += 2;
                    continue;
                }
                (b'$', _) => {
                    math = Some(Math::Dollar);
                    i += 1;
                    continue;
                }
                (b'\n', _) => {
                    push(text, start, i, &mut out);
                    start = i + 1;
                }
                (b'.' | b'!' | b'?', _) => {
                    let mut end = i + 1;
                    while end < bytes.len() && matches!(bytes[end], b'.' | b'!' | b'?') {
                        end += 1;
                    }
                    if end == bytes.len() || bytes[end].is_ascii_whitespace() {
                        push(text, start, end, &mut out);
                        start = end;
                    }
                    i = end;
                    continue;
                }
                _ => {}
            },
        }
        i += 1;
    }
    if let Some(mode) = math {
        return Err(format!("unterminated {mode:?} math"));
    }
    push(text, start, bytes.len(), &mut out);
    Ok(out)
}
