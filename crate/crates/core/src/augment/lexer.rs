//! Lossless Java-style lexer. Concatenating the text of every token yields
//! the input exactly, so mutations can edit single tokens and re-join.

use serde::Serialize;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Keyword,
    Identifier,
    NumberLiteral,
    /// Double-quoted strings, text blocks and char literals.
    StringLiteral,
    Punctuation,
    Whitespace,
    Comment,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeToken {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offset of the token in the source.
    pub offset: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexError {
    #[error("empty")]
    Empty,
    #[error("unterminated string literal at byte {0}")]
    UnterminatedString(usize),
    #[error("unterminated comment at byte {0}")]
    UnterminatedComment(usize),
}

impl LexError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            LexError::Empty => None,
            LexError::UnterminatedString(o) | LexError::UnterminatedComment(o) => Some(*o),
        }
    }
}

/// Java reserved words, literal keywords, primitive types and the
/// contextual type names that must never be renamed.
pub const KEYWORDS: &[&str] = &[
    "abstract",
    "assert",
    "boolean",
    "break",
    "byte",
    "case",
    "catch",
    "char",
    "class",
    "const",
    "continue",
    "default",
    "do",
    "double",
    "else",
    "enum",
    "extends",
    "false",
    "final",
    "finally",
    "float",
    "for",
    "goto",
    "if",
    "implements",
    "import",
    "instanceof",
    "int",
    "interface",
    "long",
    "native",
    "new",
    "null",
    "package",
    "permits",
    "private",
    "protected",
    "public",
    "record",
    "return",
    "sealed",
    "short",
    "static",
    "strictfp",
    "super",
    "switch",
    "synchronized",
    "this",
    "throw",
    "throws",
    "transient",
    "true",
    "try",
    "var",
    "void",
    "volatile",
    "while",
    "yield",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.contains(&word)
}

// Longest first so greedy matching picks `>>>=` over `>>`.
const OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "==", "!=", "<=", ">=", "&&", "||", "++", "--",
    "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<", ">>",
];

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b'$'
}

fn is_ident_continue(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'$'
}

/// Splits `source` into tokens. Fails on empty input and on unterminated
/// strings or block comments.
pub fn lex(source: &str) -> Result<Vec<CodeToken>, LexError> {
    if source.is_empty() {
        return Err(LexError::Empty);
    }
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = bytes[i];
        let kind = if c.is_ascii_whitespace() {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            TokenKind::Whitespace
        } else if source[i..].starts_with("//") {
            i = source[i..].find('\n').map_or(bytes.len(), |n| i + n);
            TokenKind::Comment
        } else if source[i..].starts_with("/*") {
            let end = source[i + 2..]
                .find("*/")
                .ok_or(LexError::UnterminatedComment(start))?;
            i += 2 + end + 2;
            TokenKind::Comment
        } else if source[i..].starts_with("\"\"\"") {
            let end = source[i + 3..]
                .find("\"\"\"")
                .ok_or(LexError::UnterminatedString(start))?;
            i += 3 + end + 3;
            TokenKind::StringLiteral
        } else if c == b'"' || c == b'\'' {
            i = scan_quoted(bytes, i, c).ok_or(LexError::UnterminatedString(start))?;
            TokenKind::StringLiteral
        } else if is_ident_start(c) {
            while i < bytes.len() && is_ident_continue(bytes[i]) {
                i += 1;
            }
            if is_keyword(&source[start..i]) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            }
        } else if c.is_ascii_digit()
            || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
        {
            i = scan_number(bytes, i);
            TokenKind::NumberLiteral
        } else if let Some(op) = OPERATORS.iter().find(|op| source[i..].starts_with(**op)) {
            i += op.len();
            TokenKind::Punctuation
        } else {
            // Any other character, including non-ASCII, is one punctuation token.
            i += source[i..].chars().next().map_or(1, char::len_utf8);
            TokenKind::Punctuation
        };
        tokens.push(CodeToken {
            kind,
            text: source[start..i].to_string(),
            offset: start,
        });
    }
    Ok(tokens)
}

/// Returns the index one past the closing quote. Newlines end the literal.
fn scan_quoted(bytes: &[u8], start: usize, quote: u8) -> Option<usize> {
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'\n' => return None,
            b if b == quote => return Some(i + 1),
            _ => i += 1,
        }
    }
    None
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    let at = |i: usize| bytes.get(i).copied().unwrap_or(0);
    if at(i) == b'0' && matches!(at(i + 1), b'x' | b'X') && at(i + 2).is_ascii_hexdigit() {
        i += 2;
        while at(i).is_ascii_hexdigit() || at(i) == b'_' {
            i += 1;
        }
        if matches!(at(i), b'l' | b'L') {
            i += 1;
        }
        return i;
    }
    while at(i).is_ascii_digit() || at(i) == b'_' {
        i += 1;
    }
    if at(i) == b'.' && at(i + 1).is_ascii_digit() {
        i += 1;
        while at(i).is_ascii_digit() || at(i) == b'_' {
            i += 1;
        }
    } else if at(i) == b'.' && !is_ident_start(at(i + 1)) && at(i + 1) != b'.' && i > start {
        // `1.` is a complete double literal; `1.foo` and `1..` are not ours.
        i += 1;
    }
    if matches!(at(i), b'e' | b'E') {
        let sign = usize::from(matches!(at(i + 1), b'+' | b'-'));
        if at(i + 1 + sign).is_ascii_digit() {
            i += 1 + sign;
            while at(i).is_ascii_digit() {
                i += 1;
            }
        }
    }
    if matches!(at(i), b'f' | b'F' | b'd' | b'D' | b'l' | b'L') {
        i += 1;
    }
    i
}
