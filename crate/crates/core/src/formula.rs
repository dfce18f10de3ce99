//! Model formulas: `response ~ term + term ...` where a term is `1`, `-1`,
//! a column name, or `a*b`.

use std::fmt;

use crate::error::{Result, RveError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Main(String),
    Interaction(String, String),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => f.write_str("1"),
            Term::Main(c) => f.write_str(c),
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formula {
    pub response: String,
    pub terms: Vec<Term>,
    pub has_intercept: bool,
    source: String,
}

impl Formula {
    /// The formula text as the user wrote it, whitespace-normalized.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Every column the formula references, response first.
    pub fn columns(&self) -> Vec<&str> {
        let mut out = vec![self.response.as_str()];
        for t in &self.terms {
            match t {
                Term::Intercept => {}
                Term::Main(c) => out.push(c),
                Term::Interaction(a, b) => {
                    out.push(a);
                    out.push(b);
                }
            }
        }
        out.dedup();
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl std::str::FromStr for Formula {
    type Err = RveError;

    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Tilde,
    Plus,
    Minus,
    Star,
    Other(char),
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '.' || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '.' || c == '_'
}

fn tokenize(text: &str) -> Vec<(usize, Tok)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if is_ident_start(c) && !(c == '.' && chars.get(i + 1).is_some_and(|n| n.1.is_ascii_digit())) {
            let mut s = String::new();
            while i < chars.len() && is_ident_char(chars[i].1) {
                s.push(chars[i].1);
                i += 1;
            }
            out.push((pos, Tok::Ident(s)));
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                s.push(chars[i].1);
                i += 1;
            }
            out.push((pos, Tok::Num(s)));
            continue;
        }
        out.push((
            pos,
            match c {
                '~' => Tok::Tilde,
                '+' => Tok::Plus,
                '-' => Tok::Minus,
                '*' => Tok::Star,
                other => Tok::Other(other),
            },
        ));
        i += 1;
    }
    out
}

enum Piece {
    Intercept,
    NoIntercept,
    Terms(Vec<Term>),
}

fn push_unique(terms: &mut Vec<Term>, t: Term) {
    let dup = terms.iter().any(|u| match (u, &t) {
        (Term::Interaction(a, b), Term::Interaction(c, d)) => (a == c && b == d) || (a == d && b == c),
        _ => *u == t,
    });
    if !dup {
        terms.push(t);
    }
}

/// Parses a model formula.
///
/// `a*b` expands to `a + b + a:b`; an intercept is implied unless `-1`
/// appears among the terms.
pub fn parse_formula(text: &str) -> Result<Formula> {
    let toks = tokenize(text);
    let end = text.len();
    let syntax = |position: usize, message: &str| RveError::SyntaxError {
        position,
        message: message.to_string(),
    };

    let response = match toks.first() {
        Some((_, Tok::Ident(name))) => name.clone(),
        Some((p, _)) => return Err(syntax(*p, "expected response column name")),
        None => return Err(syntax(0, "empty formula")),
    };
    match toks.get(1) {
        Some((_, Tok::Tilde)) => {}
        Some((p, _)) => return Err(syntax(*p, "expected `~` after response")),
        None => return Err(syntax(end, "expected `~` after response")),
    }

    let rhs = &toks[2..];
    if rhs.is_empty() {
        return Err(syntax(end, "expected at least one term after `~`"));
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 0..=rhs.len() {
        if i < rhs.len() && rhs[i].1 != Tok::Plus {
            continue;
        }
        let slice = &rhs[start..i];
        let here = rhs.get(i).map_or(end, |t| t.0);
        if slice.is_empty() {
            return Err(syntax(here, "expected a term"));
        }
        if let Some((p, _)) = slice.iter().find(|t| t.1 == Tok::Tilde) {
            return Err(syntax(*p, "unexpected `~`"));
        }
        let piece = match slice {
            [(_, Tok::Num(n))] if n == "1" => Piece::Intercept,
            [(_, Tok::Minus), (_, Tok::Num(n))] if n == "1" => Piece::NoIntercept,
            [(_, Tok::Ident(a))] => Piece::Terms(vec![Term::Main(a.clone())]),
            [(_, Tok::Ident(a)), (_, Tok::Star), (_, Tok::Ident(b))] => Piece::Terms(vec![
                Term::Main(a.clone()),
                Term::Main(b.clone()),
                Term::Interaction(a.clone(), b.clone()),
            ]),
            _ => {
                let from = slice[0].0;
                return Err(RveError::UnknownTermForm(text[from..here].trim().to_string()));
            }
        };
        pieces.push(piece);
        start = i + 1;
    }

    let has_intercept = !pieces.iter().any(|p| matches!(p, Piece::NoIntercept));
    let mut terms = Vec::new();
    if has_intercept {
        terms.push(Term::Intercept);
    }
    for piece in pieces {
        if let Piece::Terms(ts) = piece {
            for t in ts {
                push_unique(&mut terms, t);
            }
        }
    }

    let source = text.split_whitespace().collect::<Vec<_>>().join(" ");
    Ok(Formula {
        response,
        terms,
        has_intercept,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn main(c: &str) -> Term {
        Term::Main(c.into())
    }

    #[test]
    fn intercept_only() {
        let f = parse_formula("effect.size ~ 1").unwrap();
        assert_eq!(f.response, "effect.size");
        assert_eq!(f.terms, [Term::Intercept]);
        assert!(f.has_intercept);
    }

    #[test]
    fn no_intercept() {
        let f = parse_formula("y ~ -1 + x").unwrap();
        assert_eq!(f.terms, [main("x")]);
        assert!(!f.has_intercept);
    }

    #[test]
    fn star_expansion() {
        let f = parse_formula("y ~ a*b").unwrap();
        assert_eq!(
            f.terms,
            [Term::Intercept, main("a"), main("b"), Term::Interaction("a".into(), "b".into())]
        );
    }

    #[test]
    fn star_dedups_against_explicit_terms() {
        let f = parse_formula("y ~ a + b*a + a*b").unwrap();
        assert_eq!(
            f.terms,
            [Term::Intercept, main("a"), main("b"), Term::Interaction("b".into(), "a".into())]
        );
    }

    #[test]
    fn implicit_intercept_and_order() {
        let f = parse_formula("effectsize ~ followup_c + followup_m + binge").unwrap();
        assert_eq!(
            f.terms,
            [Term::Intercept, main("followup_c"), main("followup_m"), main("binge")]
        );
        assert_eq!(f.source(), "effectsize ~ followup_c + followup_m + binge");
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse_formula("y x").unwrap_err() {
            RveError::SyntaxError { position, .. } => assert_eq!(position, 2),
            e => panic!("{e}"),
        }
        match parse_formula("y ~ x +").unwrap_err() {
            RveError::SyntaxError { position, .. } => assert_eq!(position, 7),
            e => panic!("{e}"),
        }
        assert!(matches!(parse_formula("~ x"), Err(RveError::SyntaxError { position: 0, .. })));
        assert!(matches!(parse_formula("y ~"), Err(RveError::SyntaxError { .. })));
        assert!(matches!(parse_formula("y ~ a ~ b"), Err(RveError::SyntaxError { .. })));
    }

    #[test]
    fn unsupported_terms() {
        for bad in ["y ~ a:b", "y ~ log(x)", "y ~ a*b*c", "y ~ 0", "y ~ -x", "y ~ 2"] {
            assert!(
                matches!(parse_formula(bad), Err(RveError::UnknownTermForm(_))),
                "{bad}"
            );
        }
        assert!(matches!(parse_formula("y ~ a:b"), Err(RveError::UnknownTermForm(t)) if t == "a:b"));
    }
}
