//! Token-level mutations that alter non-critical lexical elements of a test:
//! local variable names, numeric constants, string contents and primitive
//! numeric types. The keyword/punctuation skeleton is never touched.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lexer::{lex, CodeToken, LexError, TokenKind};
use crate::dataset::FlakyTest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    /// Rename one locally declared variable at every occurrence.
    RenameIdentifier,
    /// Nudge one numeric literal.
    PerturbNumber,
    /// Replace the contents of one string literal with random alphanumerics.
    ReplaceString,
    /// Exchange one `int`/`long` or `float`/`double` keyword.
    SwapNumericType,
}

impl MutationOp {
    pub const ALL: [MutationOp; 4] = [
        MutationOp::RenameIdentifier,
        MutationOp::PerturbNumber,
        MutationOp::ReplaceString,
        MutationOp::SwapNumericType,
    ];
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MutateError {
    #[error("no mutation operators requested")]
    NoOps,
    #[error("no applicable site")]
    NoApplicableSite,
    #[error("mutations cancelled out; output equals input")]
    Unchanged,
    #[error("source does not lex: {0}")]
    Lex(#[from] LexError),
    #[error("mutated source does not re-lex: {0}")]
    Relex(LexError),
}

/// Applies `ops` in order to the test's source. Ops without a site are
/// skipped; it is an error only when none of them applies.
pub fn mutate<R: Rng + ?Sized>(
    test: &FlakyTest,
    ops: &[MutationOp],
    rng: &mut R,
) -> Result<String, MutateError> {
    mutate_source(&test.source, ops, rng)
}

pub fn mutate_source<R: Rng + ?Sized>(
    source: &str,
    ops: &[MutationOp],
    rng: &mut R,
) -> Result<String, MutateError> {
    if ops.is_empty() {
        return Err(MutateError::NoOps);
    }
    let mut tokens = lex(source)?;
    let mut applied = false;
    for op in ops {
        applied |= apply(&mut tokens, *op, rng);
    }
    if !applied {
        return Err(MutateError::NoApplicableSite);
    }
    let out: String = tokens.iter().map(|t| t.text.as_str()).collect();
    if out == source {
        return Err(MutateError::Unchanged);
    }
    lex(&out).map_err(MutateError::Relex)?;
    Ok(out)
}

/// Applies one op in place. Returns false when the op has no site.
pub fn apply<R: Rng + ?Sized>(tokens: &mut [CodeToken], op: MutationOp, rng: &mut R) -> bool {
    match op {
        MutationOp::RenameIdentifier => rename_identifier(tokens, rng),
        MutationOp::PerturbNumber => perturb_number(tokens, rng),
        MutationOp::ReplaceString => replace_string(tokens, rng),
        MutationOp::SwapNumericType => swap_numeric_type(tokens, rng),
    }
}

fn is_trivia(t: &CodeToken) -> bool {
    matches!(t.kind, TokenKind::Whitespace | TokenKind::Comment)
}

fn prev_significant(tokens: &[CodeToken], i: usize) -> Option<&CodeToken> {
    tokens[..i].iter().rev().find(|t| !is_trivia(t))
}

fn next_significant(tokens: &[CodeToken], i: usize) -> Option<&CodeToken> {
    tokens[i + 1..].iter().find(|t| !is_trivia(t))
}

const DECL_TYPES: &[&str] = &[
    "boolean", "byte", "char", "short", "int", "long", "float", "double", "var",
];

/// True when the identifier at `i` looks like a local declaration:
/// `Type name =`, `Type name;`, `Type name,`, `Type name)` or `Type name :`.
fn is_declaration(tokens: &[CodeToken], i: usize) -> bool {
    let typed = match prev_significant(tokens, i) {
        Some(p) => match p.kind {
            TokenKind::Identifier => true,
            TokenKind::Keyword => DECL_TYPES.contains(&p.text.as_str()),
            TokenKind::Punctuation => matches!(p.text.as_str(), ">" | ">>" | ">>>" | "]"),
            _ => false,
        },
        None => false,
    };
    typed
        && next_significant(tokens, i)
            .is_some_and(|n| matches!(n.text.as_str(), "=" | ";" | "," | ")" | ":"))
}

/// Names declared locally that never appear as a member access (`x.name`).
pub fn rename_candidates(tokens: &[CodeToken]) -> Vec<String> {
    let mut declared = BTreeSet::new();
    let mut accessed = HashSet::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.kind != TokenKind::Identifier {
            continue;
        }
        if prev_significant(tokens, i).is_some_and(|p| p.text == "." || p.text == "::") {
            accessed.insert(t.text.as_str());
        } else if is_declaration(tokens, i) {
            declared.insert(t.text.as_str());
        }
    }
    declared
        .into_iter()
        .filter(|n| !accessed.contains(n))
        .map(str::to_string)
        .collect()
}

/// Smallest `v{k}` not already used as an identifier or keyword.
fn fresh_name(tokens: &[CodeToken]) -> String {
    let used: HashSet<&str> = tokens
        .iter()
        .filter(|t| matches!(t.kind, TokenKind::Identifier | TokenKind::Keyword))
        .map(|t| t.text.as_str())
        .collect();
    (0..)
        .map(|k| format!("v{k}"))
        .find(|n| !used.contains(n.as_str()))
        .expect("unbounded name space")
}

/// Renames every identifier token spelled `from` to `to`.
pub fn rename_all(tokens: &mut [CodeToken], from: &str, to: &str) {
    for t in tokens.iter_mut() {
        if t.kind == TokenKind::Identifier && t.text == from {
            t.text = to.to_string();
        }
    }
}

fn rename_identifier<R: Rng + ?Sized>(tokens: &mut [CodeToken], rng: &mut R) -> bool {
    let candidates = rename_candidates(tokens);
    let Some(from) = candidates.choose(rng) else {
        return false;
    };
    let to = fresh_name(tokens);
    rename_all(tokens, from, &to);
    true
}

enum NumberLit<'a> {
    Int {
        value: u64,
        hex: Option<&'a str>,
        upper: bool,
        suffix: &'a str,
    },
    Float {
        value: f64,
        suffix: &'a str,
    },
}

fn parse_number(text: &str) -> Option<NumberLit<'_>> {
    let lower = text.to_ascii_lowercase();
    if lower.starts_with("0x") {
        let (body, suffix) = match text.strip_suffix(['l', 'L']) {
            Some(b) => (b, &text[b.len()..]),
            None => (text, ""),
        };
        let digits: String = body[2..].chars().filter(|c| *c != '_').collect();
        let value = u64::from_str_radix(&digits, 16).ok()?;
        return Some(NumberLit::Int {
            value,
            hex: Some(&body[..2]),
            upper: digits.chars().any(|c| c.is_ascii_uppercase()),
            suffix,
        });
    }
    let is_float = lower.contains(['.', 'e']) || lower.ends_with('f') || lower.ends_with('d');
    if is_float {
        let (body, suffix) = match text.strip_suffix(['f', 'F', 'd', 'D']) {
            Some(b) => (b, &text[b.len()..]),
            None => (text, ""),
        };
        let clean: String = body.chars().filter(|c| *c != '_').collect();
        let value: f64 = clean.parse().ok()?;
        return Some(NumberLit::Float { value, suffix });
    }
    let (body, suffix) = match text.strip_suffix(['l', 'L']) {
        Some(b) => (b, &text[b.len()..]),
        None => (text, ""),
    };
    // Leading zero means octal in Java; leave those alone.
    if body.len() > 1 && body.starts_with('0') {
        return None;
    }
    let digits: String = body.chars().filter(|c| *c != '_').collect();
    Some(NumberLit::Int {
        value: digits.parse().ok()?,
        hex: None,
        upper: false,
        suffix,
    })
}

/// Integer deltas in ±1..±9 that keep the literal positive and in range.
fn integer_deltas(value: u64, long: bool) -> Vec<i64> {
    let limit = if long {
        i64::MAX as u64
    } else {
        i32::MAX as u64
    };
    (-9i64..=9)
        .filter(|d| *d != 0)
        .filter(|d| {
            let v = value as i128 + *d as i128;
            v >= 1 && v <= limit as i128
        })
        .collect()
}

/// Adds `delta` to an integer literal, keeping its radix, digit case and
/// suffix. Returns `None` for non-integer literals, octal literals or when
/// the result would not stay positive and in range.
pub fn perturb_integer_literal(text: &str, delta: i64) -> Option<String> {
    match parse_number(text)? {
        NumberLit::Int {
            value,
            hex,
            upper,
            suffix,
        } => {
            if !integer_deltas(value, !suffix.is_empty()).contains(&delta) {
                return None;
            }
            let new = (value as i128 + delta as i128) as u64;
            Some(match hex {
                Some(prefix) if upper => format!("{prefix}{new:X}{suffix}"),
                Some(prefix) => format!("{prefix}{new:x}{suffix}"),
                None => format!("{new}{suffix}"),
            })
        }
        NumberLit::Float { .. } => None,
    }
}

/// Scales a floating literal by `factor`, keeping its suffix. The result is
/// always a floating literal.
pub fn scale_float_literal(text: &str, factor: f64) -> Option<String> {
    match parse_number(text)? {
        NumberLit::Float { value, suffix } if value != 0.0 && value.is_finite() => {
            let scaled = value * factor;
            if !scaled.is_finite() {
                return None;
            }
            let mut body = if suffix.eq_ignore_ascii_case("f") {
                format!("{}", scaled as f32)
            } else {
                format!("{scaled}")
            };
            if !body.contains(['.', 'e', 'E']) {
                body.push_str(".0");
            }
            let out = format!("{body}{suffix}");
            (out != text).then_some(out)
        }
        _ => None,
    }
}

fn number_is_mutable(text: &str) -> bool {
    match parse_number(text) {
        Some(NumberLit::Int { value, suffix, .. }) => {
            !integer_deltas(value, !suffix.is_empty()).is_empty()
        }
        Some(NumberLit::Float { value, .. }) => value != 0.0 && value.is_finite(),
        None => false,
    }
}

fn perturb_number<R: Rng + ?Sized>(tokens: &mut [CodeToken], rng: &mut R) -> bool {
    let sites: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::NumberLiteral && number_is_mutable(&t.text))
        .map(|(i, _)| i)
        .collect();
    let Some(&site) = sites.choose(rng) else {
        return false;
    };
    let text = tokens[site].text.clone();
    let replacement = match parse_number(&text) {
        Some(NumberLit::Int { value, suffix, .. }) => {
            let deltas = integer_deltas(value, !suffix.is_empty());
            let delta = *deltas.choose(rng).expect("site filtered for deltas");
            perturb_integer_literal(&text, delta)
        }
        Some(NumberLit::Float { .. }) => (0..8).find_map(|_| {
            let magnitude = rng.random_range(0.01..=0.10);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            scale_float_literal(&text, 1.0 + sign * magnitude)
        }),
        None => None,
    };
    match replacement {
        Some(new) => {
            tokens[site].text = new;
            true
        }
        None => false,
    }
}

const ALNUM: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

/// Splits string-literal contents into escape sequences (kept) and plain
/// characters (replaceable).
fn string_units(content: &str) -> Vec<(bool, String)> {
    let mut units = Vec::new();
    let mut chars = content.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\\' {
            let mut esc = String::from('\\');
            if let Some(n) = chars.next() {
                esc.push(n);
                if n == 'u' {
                    while chars.peek() == Some(&'u') {
                        esc.push(chars.next().unwrap());
                    }
                    for _ in 0..4 {
                        match chars.peek() {
                            Some(h) if h.is_ascii_hexdigit() => esc.push(chars.next().unwrap()),
                            _ => break,
                        }
                    }
                }
            }
            units.push((true, esc));
        } else {
            units.push((false, c.to_string()));
        }
    }
    units
}

fn string_content(text: &str) -> Option<&str> {
    if text.starts_with("\"\"\"") || text.len() < 2 || !text.starts_with('"') {
        return None;
    }
    Some(&text[1..text.len() - 1])
}

fn replace_string<R: Rng + ?Sized>(tokens: &mut [CodeToken], rng: &mut R) -> bool {
    let sites: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::StringLiteral)
        .filter(|(_, t)| {
            string_content(&t.text).is_some_and(|c| string_units(c).iter().any(|(esc, _)| !esc))
        })
        .map(|(i, _)| i)
        .collect();
    let Some(&site) = sites.choose(rng) else {
        return false;
    };
    let content = string_content(&tokens[site].text).unwrap().to_string();
    let units = string_units(&content);
    for _ in 0..8 {
        let fresh: String = units
            .iter()
            .map(|(esc, text)| {
                if *esc {
                    text.clone()
                } else {
                    char::from(*ALNUM.choose(rng).unwrap()).to_string()
                }
            })
            .collect();
        if fresh != content {
            tokens[site].text = format!("\"{fresh}\"");
            return true;
        }
    }
    false
}

fn numeric_partner(keyword: &str) -> Option<&'static str> {
    match keyword {
        "int" => Some("long"),
        "long" => Some("int"),
        "float" => Some("double"),
        "double" => Some("float"),
        _ => None,
    }
}

fn swap_numeric_type<R: Rng + ?Sized>(tokens: &mut [CodeToken], rng: &mut R) -> bool {
    let mut sites: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TokenKind::Keyword && numeric_partner(&t.text).is_some())
        .map(|(i, _)| i)
        .collect();
    sites.shuffle(rng);
    let Some(&site) = sites.first() else {
        return false;
    };
    let partner = numeric_partner(&tokens[site].text).unwrap();
    tokens[site].text = partner.to_string();
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn rename_is_consistent() {
        let out = mutate_source(
            "int a = a + 1;",
            &[MutationOp::RenameIdentifier],
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(out, "int v0 = v0 + 1;");
    }

    #[test]
    fn rename_picks_unused_name() {
        let out = mutate_source(
            "int v0 = 1; int a = v0;",
            &[MutationOp::RenameIdentifier],
            &mut rng(3),
        )
        .unwrap();
        assert!(
            out == "int v1 = 1; int a = v1;" || out == "int v0 = 1; int v1 = v0;",
            "{out}"
        );
    }

    #[test]
    fn rename_skips_member_access_and_calls() {
        let toks = lex("String s = foo.bar; bar(s); this.count = count;").unwrap();
        assert_eq!(rename_candidates(&toks), vec!["s"]);
        let toks = lex("void t(Runnable r, int n) { sleep(n); }").unwrap();
        assert_eq!(rename_candidates(&toks), vec!["n", "r"]);
    }

    #[test]
    fn integer_literal_increment() {
        assert_eq!(perturb_integer_literal("42", 1).as_deref(), Some("43"));
        assert_eq!(perturb_integer_literal("0x1F", 1).as_deref(), Some("0x20"));
        assert_eq!(perturb_integer_literal("0xff", 1).as_deref(), Some("0x100"));
        assert_eq!(perturb_integer_literal("100L", -9).as_deref(), Some("91L"));
        // never reaches zero or below
        assert_eq!(perturb_integer_literal("3", -3), None);
        assert_eq!(perturb_integer_literal("0", 2).as_deref(), Some("2"));
        assert_eq!(perturb_integer_literal("0", -1), None);
        assert_eq!(perturb_integer_literal("2147483647", 1), None);
        assert_eq!(
            perturb_integer_literal("2147483647L", 1).as_deref(),
            Some("2147483648L")
        );
        assert_eq!(perturb_integer_literal("017", 1), None);
        assert_eq!(perturb_integer_literal("1.5", 1), None);
    }

    #[test]
    fn perturb_sleep_argument() {
        let src = "sleep(42)";
        let mut toks = lex(src).unwrap();
        let site = toks.iter().position(|t| t.text == "42").unwrap();
        toks[site].text = perturb_integer_literal("42", 1).unwrap();
        let out: String = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(out, "sleep(43)");

        let out = mutate_source(src, &[MutationOp::PerturbNumber], &mut rng(1)).unwrap();
        let n: i64 = out["sleep(".len()..out.len() - 1].parse().unwrap();
        assert!(n != 42 && (33..=51).contains(&n), "{out}");
    }

    #[test]
    fn float_scaling_stays_float() {
        assert_eq!(scale_float_literal("2.0", 1.05).as_deref(), Some("2.1"));
        assert_eq!(
            scale_float_literal("1e10", 1.03).as_deref(),
            Some("10300000000.0")
        );
        assert!(scale_float_literal("2.5f", 0.9).unwrap().ends_with('f'));
        assert_eq!(scale_float_literal("0.0", 1.05), None);
        for seed in 0..50 {
            let out = mutate_source(
                "double d = 0.5;",
                &[MutationOp::PerturbNumber],
                &mut rng(seed),
            )
            .unwrap();
            let v: f64 = out["double d = ".len()..out.len() - 1].parse().unwrap();
            let rel = (v - 0.5).abs() / 0.5;
            assert!((0.0099..=0.1001).contains(&rel), "{out}");
        }
    }

    #[test]
    fn string_replacement_keeps_length_and_escapes() {
        for seed in 0..20 {
            let out = mutate_source(
                r#"s = "a\nbc";"#,
                &[MutationOp::ReplaceString],
                &mut rng(seed),
            )
            .unwrap();
            let lit = &out[4..out.len() - 1];
            assert_eq!(lit.len(), r#""a\nbc""#.len());
            assert_eq!(&lit[2..4], r"\n");
            assert_ne!(lit, r#""a\nbc""#);
        }
        // escapes only, empty string and char literals are not sites
        let err = mutate_source(
            r#"s = "\t"; c = 'x'; e = "";"#,
            &[MutationOp::ReplaceString],
            &mut rng(0),
        );
        assert_eq!(err, Err(MutateError::NoApplicableSite));
    }

    #[test]
    fn type_swap_stays_within_family() {
        let out = mutate_source("int a = 1;", &[MutationOp::SwapNumericType], &mut rng(0)).unwrap();
        assert_eq!(out, "long a = 1;");
        let out =
            mutate_source("float f = 1f;", &[MutationOp::SwapNumericType], &mut rng(0)).unwrap();
        assert_eq!(out, "double f = 1f;");
        assert_eq!(
            mutate_source(
                "boolean b = true;",
                &[MutationOp::SwapNumericType],
                &mut rng(0)
            ),
            Err(MutateError::NoApplicableSite)
        );
    }

    #[test]
    fn empty_ops_rejected() {
        assert_eq!(
            mutate_source("int a = 1;", &[], &mut rng(0)),
            Err(MutateError::NoOps)
        );
    }

    #[test]
    fn ops_without_sites_are_skipped_when_another_applies() {
        let out = mutate_source(
            "sleep(5);",
            &[MutationOp::RenameIdentifier, MutationOp::PerturbNumber],
            &mut rng(0),
        )
        .unwrap();
        assert!(out.starts_with("sleep(") && out != "sleep(5);");
    }

    fn skeleton(tokens: &[CodeToken]) -> Vec<String> {
        tokens
            .iter()
            .filter(|t| {
                matches!(
                    t.kind,
                    TokenKind::Punctuation | TokenKind::Whitespace | TokenKind::Comment
                ) || (t.kind == TokenKind::Keyword && numeric_partner(&t.text).is_none())
            })
            .map(|t| t.text.clone())
            .collect()
    }

    const SNIPPETS: &[&str] = &[
        "@Test public void testA() throws Exception { int count = 3; Thread.sleep(100); assertEquals(3, count); }",
        "void testB() { String msg = \"hello\"; long t = 5L; double r = 0.25; assertTrue(msg.length() > t * r); }",
        "void testC() { List<String> items = new ArrayList<>(); for (int i = 0; i < 10; i++) { items.add(\"x\" + i); } }",
        "void testD() { // waits\n float f = 2.5f; /* block */ int[] arr = new int[4]; arr[0] = 7; }",
    ];

    proptest! {
        #[test]
        fn mutations_preserve_skeleton(
            snippet in 0..SNIPPETS.len(),
            op in 0..4usize,
            seed in any::<u64>(),
        ) {
            let src = SNIPPETS[snippet];
            let op = MutationOp::ALL[op];
            let mut r = rng(seed);
            if let Ok(out) = mutate_source(src, &[op], &mut r) {
                let before = lex(src).unwrap();
                let after = lex(&out).unwrap();
                prop_assert_ne!(&out, src);
                prop_assert_eq!(before.len(), after.len());
                prop_assert_eq!(skeleton(&before), skeleton(&after));
                for (b, a) in before.iter().zip(&after) {
                    prop_assert_eq!(b.kind, a.kind);
                    if b.text != a.text {
                        prop_assert!(matches!(
                            b.kind,
                            TokenKind::Identifier | TokenKind::NumberLiteral | TokenKind::StringLiteral | TokenKind::Keyword
                        ));
                        if b.kind == TokenKind::Keyword {
                            prop_assert_eq!(numeric_partner(&b.text), Some(a.text.as_str()));
                        }
                    }
                }
                if op == MutationOp::RenameIdentifier {
                    // the renamed identifier changes at every occurrence
                    let changed: HashSet<&str> = before.iter().zip(&after)
                        .filter(|(b, a)| b.text != a.text)
                        .map(|(b, _)| b.text.as_str())
                        .collect();
                    prop_assert_eq!(changed.len(), 1);
                    let name = *changed.iter().next().unwrap();
                    for (b, a) in before.iter().zip(&after) {
                        if b.kind == TokenKind::Identifier && b.text == name {
                            prop_assert_ne!(&a.text, &b.text);
                        }
                    }
                }
            }
        }
    }
}
