//! Tokenizer for the T-SQL subset.

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    /// Bare or delimited identifier. `quoted` is true for `[x]` and `"x"`,
    /// which are never keywords.
    Ident { text: String, quoted: bool },
    /// `@name` or `@@name`.
    Var(String),
    Number(String),
    Str(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Semi,
    Star,
    /// Any other operator, possibly multi-character (`<=`, `<>`, `+=`).
    Op(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    /// Byte offset in the source.
    pub pos: usize,
}

impl Token {
    /// Case-insensitive keyword test; quoted identifiers never match.
    pub fn is_kw(&self, kw: &str) -> bool {
        matches!(&self.tok, Tok::Ident { text, quoted: false } if text.eq_ignore_ascii_case(kw))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("lex error at byte {pos}: {msg}")]
pub struct LexError {
    pub pos: usize,
    pub msg: String,
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, LexError> {
    let b = src.as_bytes();
    let mut out = Vec::with_capacity(src.len() / 4);
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'-' if b.get(i + 1) == Some(&b'-') => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                let mut depth = 0;
                loop {
                    if i + 1 >= b.len() {
                        return Err(LexError { pos: start, msg: "unterminated comment".into() });
                    }
                    if b[i] == b'/' && b[i + 1] == b'*' {
                        depth += 1;
                        i += 2;
                    } else if b[i] == b'*' && b[i + 1] == b'/' {
                        depth -= 1;
                        i += 2;
                        if depth == 0 {
                            break;
                        }
                    } else {
                        i += 1;
                    }
                }
            }
            b'\'' => {
                let (s, next) = quoted(src, i + 1, b'\'').ok_or(LexError { pos: start, msg: "unterminated string".into() })?;
                out.push(Token { tok: Tok::Str(s), pos: start });
                i = next;
            }
            b'N' | b'n' if b.get(i + 1) == Some(&b'\'') => {
                let (s, next) = quoted(src, i + 2, b'\'').ok_or(LexError { pos: start, msg: "unterminated string".into() })?;
                out.push(Token { tok: Tok::Str(s), pos: start });
                i = next;
            }
            b'[' => {
                let (s, next) = quoted(src, i + 1, b']').ok_or(LexError { pos: start, msg: "unterminated identifier".into() })?;
                out.push(Token { tok: Tok::Ident { text: s, quoted: true }, pos: start });
                i = next;
            }
            b'"' => {
                let (s, next) = quoted(src, i + 1, b'"').ok_or(LexError { pos: start, msg: "unterminated identifier".into() })?;
                out.push(Token { tok: Tok::Ident { text: s, quoted: true }, pos: start });
                i = next;
            }
            b'@' => {
                i += 1;
                while i < b.len() && (is_ident_byte(b[i]) || b[i] == b'@') {
                    i += 1;
                }
                out.push(Token { tok: Tok::Var(src[start..i].to_string()), pos: start });
            }
            b'0'..=b'9' => {
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'.') {
                    i += 1;
                }
                out.push(Token { tok: Tok::Number(src[start..i].to_string()), pos: start });
            }
            b'.' if b.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                i += 1;
                while i < b.len() && b[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push(Token { tok: Tok::Number(src[start..i].to_string()), pos: start });
            }
            b'(' => {
                out.push(Token { tok: Tok::LParen, pos: start });
                i += 1;
            }
            b')' => {
                out.push(Token { tok: Tok::RParen, pos: start });
                i += 1;
            }
            b',' => {
                out.push(Token { tok: Tok::Comma, pos: start });
                i += 1;
            }
            b'.' => {
                out.push(Token { tok: Tok::Dot, pos: start });
                i += 1;
            }
            b';' => {
                out.push(Token { tok: Tok::Semi, pos: start });
                i += 1;
            }
            b'*' if b.get(i + 1) != Some(&b'=') => {
                out.push(Token { tok: Tok::Star, pos: start });
                i += 1;
            }
            _ if is_ident_start(c) => {
                i += 1;
                while i < b.len() && (is_ident_byte(b[i]) || b[i] >= 0x80) {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident { text: src[start..i].to_string(), quoted: false }, pos: start });
            }
            _ if c >= 0x80 => {
                // non-ASCII letters start identifiers
                let ch = src[i..].chars().next().unwrap();
                if ch.is_alphabetic() {
                    i += ch.len_utf8();
                    while i < b.len() && (is_ident_byte(b[i]) || b[i] >= 0x80) {
                        i += src[i..].chars().next().unwrap().len_utf8();
                    }
                    out.push(Token { tok: Tok::Ident { text: src[start..i].to_string(), quoted: false }, pos: start });
                } else {
                    return Err(LexError { pos: start, msg: format!("unexpected character {ch:?}") });
                }
            }
            _ => {
                let two = src.get(i..i + 2).unwrap_or("");
                let op = match two {
                    "<=" | ">=" | "<>" | "!=" | "!<" | "!>" | "+=" | "-=" | "*=" | "/=" | "%=" | "&=" | "|=" | "^=" | "||"
                    | "::" => two,
                    _ => {
                        if b"+-/%=<>&|^~!:".contains(&c) {
                            &src[i..i + 1]
                        } else {
                            return Err(LexError { pos: start, msg: format!("unexpected character {:?}", c as char) });
                        }
                    }
                };
                i += op.len();
                out.push(Token { tok: Tok::Op(op.to_string()), pos: start });
            }
        }
    }
    Ok(out)
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b'#'
}

fn is_ident_byte(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'#' || c == b'$'
}

/// Reads a delimited run ending at `close`; a doubled delimiter escapes itself.
fn quoted(src: &str, mut i: usize, close: u8) -> Option<(String, usize)> {
    let b = src.as_bytes();
    let mut s = String::new();
    let mut run = i;
    loop {
        if i >= b.len() {
            return None;
        }
        if b[i] == close {
            s.push_str(&src[run..i]);
            if b.get(i + 1) == Some(&close) {
                s.push(close as char);
                i += 2;
                run = i;
                continue;
            }
            return Some((s, i + 1));
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<Tok> {
        tokenize(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn basic_tokens() {
        let t = kinds("SELECT c.[Amount], 'it''s', @v, 1.5e3 FROM dbo.T -- tail\n/* x /* y */ */;");
        assert_eq!(t[0], Tok::Ident { text: "SELECT".into(), quoted: false });
        assert_eq!(t[3], Tok::Ident { text: "Amount".into(), quoted: true });
        assert_eq!(t[5], Tok::Str("it's".into()));
        assert_eq!(t[7], Tok::Var("@v".into()));
        assert_eq!(t[9], Tok::Number("1.5e3".into()));
        assert_eq!(*t.last().unwrap(), Tok::Semi);
    }

    #[test]
    fn operators() {
        let t = kinds("a<=b<>c != d += 1");
        assert!(t.contains(&Tok::Op("<=".into())));
        assert!(t.contains(&Tok::Op("<>".into())));
        assert!(t.contains(&Tok::Op("!=".into())));
        assert!(t.contains(&Tok::Op("+=".into())));
    }

    #[test]
    fn temp_tables_and_unicode() {
        let t = kinds("#tmp ##g Straße N'x'");
        assert_eq!(t[0], Tok::Ident { text: "#tmp".into(), quoted: false });
        assert_eq!(t[1], Tok::Ident { text: "##g".into(), quoted: false });
        assert_eq!(t[2], Tok::Ident { text: "Straße".into(), quoted: false });
        assert_eq!(t[3], Tok::Str("x".into()));
    }

    #[test]
    fn errors() {
        assert!(tokenize("'open").is_err());
        assert!(tokenize("/* open").is_err());
        assert!(tokenize("a ? b").is_err());
    }
}
