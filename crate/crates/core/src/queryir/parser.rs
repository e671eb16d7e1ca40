//! Recursive-descent parser for the query language.
//!
//! ```text
//! query    = "select" target "where" expr
//! target   = "patients" | "studies" | "images"
//! expr     = conj { "or" conj }
//! conj     = unary { "and" unary }
//! unary    = "not" unary | atom
//! atom     = "(" expr ")" | "true" | "false"
//!          | attr cmp value
//!          | attr "in" "[" value "," value "]"
//! cmp      = "=" | "!=" | "<" | "<=" | ">" | ">="
//! attr     = "patient.sex" | "patient.age" | "patient.id" | "study.date"
//!          | "image.laterality" | "image.view" | "image.id" | "image.dose_mgy"
//!          | "derived." ident
//! value    = word | '"' chars '"'
//! ```
//!
//! Keywords are case-insensitive. Values are typed by the attribute they are
//! compared with.

use chrono::NaiveDate;

use super::ast::*;
use super::QueryError;
use crate::ids::GlobalId;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Op(CmpOp),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("{w:?}"),
            Tok::Quoted(s) => format!("\"{s}\""),
            Tok::Op(op) => format!("`{}`", op.as_str()),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let mut out = Vec::new();
    let mut it = text.char_indices().peekable();
    while let Some(&(pos, c)) = it.peek() {
        match c {
            c if c.is_whitespace() => {
                it.next();
            }
            '(' | ')' | '[' | ']' | ',' => {
                it.next();
                out.push((
                    pos,
                    match c {
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        '[' => Tok::LBracket,
                        ']' => Tok::RBracket,
                        _ => Tok::Comma,
                    },
                ));
            }
            '=' => {
                it.next();
                out.push((pos, Tok::Op(CmpOp::Eq)));
            }
            '!' | '<' | '>' => {
                it.next();
                let eq = it.next_if(|&(_, c)| c == '=').is_some();
                let op = match (c, eq) {
                    ('!', true) => CmpOp::Ne,
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    ('>', true) => CmpOp::Ge,
                    _ => return Err(syntax(pos, &["`!=`"], "`!`")),
                };
                out.push((pos, Tok::Op(op)));
            }
            '"' => {
                it.next();
                let mut s = String::new();
                loop {
                    match it.next() {
                        Some((_, '"')) => break,
                        Some((_, '\\')) => match it.next() {
                            Some((_, c)) => s.push(c),
                            None => return Err(syntax(text.len(), &["closing `\"`"], "end of input")),
                        },
                        Some((_, c)) => s.push(c),
                        None => return Err(syntax(text.len(), &["closing `\"`"], "end of input")),
                    }
                }
                out.push((pos, Tok::Quoted(s)));
            }
            c if is_word_char(c) => {
                let mut w = String::new();
                while let Some((_, c)) = it.next_if(|&(_, c)| is_word_char(c)) {
                    w.push(c);
                }
                out.push((pos, Tok::Word(w)));
            }
            other => return Err(syntax(pos, &["a word, operator or bracket"], &format!("{other:?}"))),
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

fn syntax(position: usize, expected: &[&str], found: &str) -> QueryError {
    QueryError::Syntax {
        position,
        expected: expected.iter().map(|s| s.to_string()).collect(),
        found: found.to_string(),
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].1
    }

    fn pos(&self) -> usize {
        self.toks[self.at].0
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].1.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), QueryError> {
        if self.is_kw(kw) {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&[&format!("`{kw}`")]))
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), QueryError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&[what]))
        }
    }

    fn unexpected(&self, expected: &[&str]) -> QueryError {
        syntax(self.pos(), expected, &self.peek().describe())
    }

    fn query(&mut self, source: &str) -> Result<FormalQuery, QueryError> {
        self.expect_kw("select")?;
        let target = match self.peek() {
            Tok::Word(w) if w.eq_ignore_ascii_case("patients") => Target::Patients,
            Tok::Word(w) if w.eq_ignore_ascii_case("studies") => Target::Studies,
            Tok::Word(w) if w.eq_ignore_ascii_case("images") => Target::Images,
            _ => return Err(self.unexpected(&["`patients`", "`studies`", "`images`"])),
        };
        self.bump();
        self.expect_kw("where")?;
        let expr = self.expr()?;
        if *self.peek() != Tok::End {
            return Err(self.unexpected(&["`and`", "`or`", "end of input"]));
        }
        Ok(FormalQuery {
            target,
            expr,
            source_text: source.to_string(),
        })
    }

    fn expr(&mut self) -> Result<Expr, QueryError> {
        let mut left = self.conj()?;
        while self.is_kw("or") {
            self.bump();
            let right = self.conj()?;
            left = Expr::or(left, right);
        }
        Ok(left)
    }

    fn conj(&mut self) -> Result<Expr, QueryError> {
        let mut left = self.unary()?;
        while self.is_kw("and") {
            self.bump();
            let right = self.unary()?;
            left = Expr::and(left, right);
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Expr, QueryError> {
        if self.is_kw("not") {
            self.bump();
            return Ok(Expr::not(self.unary()?));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, QueryError> {
        if *self.peek() == Tok::LParen {
            self.bump();
            let e = self.expr()?;
            self.expect(Tok::RParen, "`)`")?;
            return Ok(e);
        }
        if self.is_kw("true") || self.is_kw("false") {
            let b = self.is_kw("true");
            self.bump();
            return Ok(Expr::Const(b));
        }
        let name = match self.peek() {
            Tok::Word(w) if !is_reserved(w) => w.clone(),
            _ => return Err(self.unexpected(&["an attribute", "`not`", "`(`", "`true`", "`false`"])),
        };
        self.bump();
        let attr = Attribute::from_name(&name).ok_or_else(|| QueryError::UnknownAttribute(name.clone()))?;
        if self.is_kw("in") {
            self.bump();
            self.expect(Tok::LBracket, "`[`")?;
            let lo = self.value()?;
            self.expect(Tok::Comma, "`,`")?;
            let hi = self.value()?;
            self.expect(Tok::RBracket, "`]`")?;
            let (lo, hi) = (typed(&attr, lo)?, typed(&attr, hi)?);
            return range(attr, lo, hi);
        }
        let op = match self.peek() {
            Tok::Op(op) => *op,
            _ => return Err(self.unexpected(&["a comparison operator", "`in`"])),
        };
        self.bump();
        let raw = self.value()?;
        let value = typed(&attr, raw)?;
        if matches!(attr.ty(), AttrType::Categorical(_) | AttrType::Identifier(_)) && !matches!(op, CmpOp::Eq | CmpOp::Ne) {
            return Err(QueryError::TypeMismatch(format!(
                "{} only supports = and !=",
                attr.name()
            )));
        }
        Ok(Expr::Compare { attr, op, value })
    }

    fn value(&mut self) -> Result<RawValue, QueryError> {
        let v = match self.peek() {
            Tok::Word(w) => RawValue::Word(w.clone()),
            Tok::Quoted(s) => RawValue::Quoted(s.clone()),
            _ => return Err(self.unexpected(&["a value"])),
        };
        self.bump();
        Ok(v)
    }
}

fn is_reserved(w: &str) -> bool {
    ["select", "where", "and", "or", "not", "in", "true", "false"]
        .iter()
        .any(|k| w.eq_ignore_ascii_case(k))
}

enum RawValue {
    Word(String),
    Quoted(String),
}

impl RawValue {
    fn text(&self) -> &str {
        match self {
            RawValue::Word(w) | RawValue::Quoted(w) => w,
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (mantissa, exp) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int, frac) = match mantissa.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (mantissa, None),
    };
    let digits = |d: &str| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit());
    let exp_ok = exp.is_none_or(|e| digits(e.strip_prefix(['+', '-']).unwrap_or(e)));
    if digits(int) && frac.is_none_or(digits) && exp_ok {
        s.parse().ok().filter(|n: &f64| n.is_finite())
    } else {
        None
    }
}

fn typed(attr: &Attribute, raw: RawValue) -> Result<Literal, QueryError> {
    let text = raw.text();
    let mismatch = |what: &str| QueryError::TypeMismatch(format!("{} expects {what}, got {text:?}", attr.name()));
    match attr.ty() {
        AttrType::Categorical(allowed) => {
            if allowed.contains(&text) {
                Ok(Literal::Text(text.to_string()))
            } else {
                Err(mismatch(&format!("one of {allowed:?}")))
            }
        }
        AttrType::Identifier(kind) => GlobalId::parse_kind(text, kind)
            .map(Literal::Id)
            .map_err(|_| mismatch(&format!("a {kind} id"))),
        AttrType::Numeric => parse_number(text).map(Literal::Number).ok_or_else(|| mismatch("a number")),
        AttrType::Date => NaiveDate::parse_from_str(text, "%Y-%m-%d")
            .ok()
            .filter(|_| text.len() == 10)
            .map(Literal::Date)
            .ok_or_else(|| mismatch("a YYYY-MM-DD date")),
    }
}

fn range(attr: Attribute, lo: Literal, hi: Literal) -> Result<Expr, QueryError> {
    let ordered = match (&lo, &hi) {
        (Literal::Number(a), Literal::Number(b)) => a <= b,
        (Literal::Date(a), Literal::Date(b)) => a <= b,
        _ => {
            return Err(QueryError::TypeMismatch(format!(
                "range is not defined on {}",
                attr.name()
            )))
        }
    };
    if !ordered {
        return Err(QueryError::TypeMismatch(format!(
            "range on {} has lower bound {lo} above upper bound {hi}",
            attr.name()
        )));
    }
    Ok(Expr::Range { attr, lo, hi })
}

/// Parse and validate query text.
pub fn parse_query(text: &str) -> Result<FormalQuery, QueryError> {
    let toks = lex(text)?;
    Parser { toks, at: 0 }.query(text)
}
