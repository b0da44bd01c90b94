//! T-SQL subset: tokenizer, syntax tree and parser.

pub mod ast;
pub mod lexer;
pub mod parser;

pub use parser::{parse_script, parse_statement, ParseError, Parsed};

use lexer::{tokenize, Tok};

/// Canonical text form: keywords and bare identifiers uppercased, whitespace
/// and comments dropped, tokens separated by one space. With `mask_literals`
/// numbers and strings become `?`, so statements differing only in constants
/// normalize equally. Text that does not tokenize is whitespace-collapsed.
pub fn normalize(text: &str, mask_literals: bool) -> String {
    let mut out = String::with_capacity(text.len());
    normalize_into(text, mask_literals, &mut out);
    out
}

/// [`normalize`] appending to `out`.
pub fn normalize_into(text: &str, mask_literals: bool, out: &mut String) {
    let Ok(toks) = tokenize(text) else {
        for (i, w) in text.split_whitespace().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(w);
        }
        return;
    };
    for (i, t) in toks.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match &t.tok {
            Tok::Ident { text, quoted: false } | Tok::Var(text) => push_upper(out, text),
            Tok::Ident { text, quoted: true } => {
                out.push('[');
                out.push_str(&text.replace(']', "]]"));
                out.push(']');
            }
            Tok::Number(n) if !mask_literals => out.push_str(n),
            Tok::Str(s) if !mask_literals => {
                out.push('\'');
                out.push_str(&s.replace('\'', "''"));
                out.push('\'');
            }
            Tok::Number(_) | Tok::Str(_) => out.push('?'),
            Tok::LParen => out.push('('),
            Tok::RParen => out.push(')'),
            Tok::Comma => out.push(','),
            Tok::Dot => out.push('.'),
            Tok::Semi => out.push(';'),
            Tok::Star => out.push('*'),
            Tok::Op(o) => out.push_str(o),
        }
    }
}

fn push_upper(out: &mut String, s: &str) {
    if s.is_ascii() {
        out.extend(s.bytes().map(|b| b.to_ascii_uppercase() as char));
    } else {
        out.push_str(&s.to_uppercase());
    }
}

/// Tokens of [`normalize`], or `None` when the text does not tokenize.
pub fn normalized_tokens(text: &str, mask_literals: bool) -> Option<Vec<String>> {
    let toks = tokenize(text).ok()?;
    Some(
        toks.into_iter()
            .map(|t| match t.tok {
                Tok::Ident { text, quoted: false } => text.to_uppercase(),
                Tok::Ident { text, quoted: true } => format!("[{}]", text.replace(']', "]]")),
                Tok::Var(v) => v.to_uppercase(),
                Tok::Number(n) if !mask_literals => n,
                Tok::Str(s) if !mask_literals => format!("'{}'", s.replace('\'', "''")),
                Tok::Number(_) | Tok::Str(_) => "?".to_string(),
                Tok::LParen => "(".to_string(),
                Tok::RParen => ")".to_string(),
                Tok::Comma => ",".to_string(),
                Tok::Dot => ".".to_string(),
                Tok::Semi => ";".to_string(),
                Tok::Star => "*".to_string(),
                Tok::Op(o) => o,
            })
            .collect(),
    )
}

/// 16 hex chars of the SHA-256 of the normalized text; the identity of
/// ad-hoc statements and query outputs.
pub fn text_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    const HEX: &[u8; 16] = b"0123456789abcdef";
    let digest = Sha256::digest(normalize(text, false).as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push(HEX[(b >> 4) as usize] as char);
        out.push(HEX[(b & 15) as usize] as char);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_case_and_space() {
        assert_eq!(normalize("select  a\n from [t]  -- c", false), "SELECT A FROM [t]");
        assert_eq!(normalize("SELECT 1 + 'x'", true), "SELECT ? + ?");
        assert_eq!(
            normalize("update T set v = 3 where k = 17", true),
            normalize("UPDATE t SET v=42 WHERE k= 9", true)
        );
        assert_ne!(normalize("SELECT 1", false), normalize("SELECT 2", false));
    }

    #[test]
    fn hash_ignores_layout() {
        assert_eq!(text_hash("select a from T"), text_hash("SELECT  a\nFROM t"));
        assert_eq!(text_hash("x").len(), 16);
    }

    proptest::proptest! {
        #[test]
        fn normalize_joins_tokens(text in "[a-zA-Zé@_ 0-9'.,()*=<>\\[\\];-]{0,40}", mask in proptest::bool::ANY) {
            if let Some(toks) = normalized_tokens(&text, mask) {
                proptest::prop_assert_eq!(normalize(&text, mask), toks.join(" "));
            }
        }
    }

    #[test]
    fn normalize_untokenizable() {
        assert_eq!(normalize("a ?  b", false), "a ? b");
    }
}
