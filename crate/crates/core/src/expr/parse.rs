use std::fmt;

use super::{param_in_range, Expr, Field, Node, Operator};

#[derive(Debug, Clone, PartialEq)]
pub enum ParseErrorKind {
    UnknownOperator(String),
    UnknownField(String),
    ArityMismatch {
        op: Operator,
        expected: usize,
        found: usize,
    },
    MalformedNumber(String),
    UnbalancedParens,
    WindowNotPositiveInteger(String),
    /// A real parameter (Power exponent, Quantile level) was not a literal.
    ExpectedLiteral(Operator),
    ParamOutOfRange {
        op: Operator,
        value: f64,
    },
    UnexpectedToken(String),
    UnexpectedEnd,
}

/// Parse failure with the byte offset into the source text.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{kind} at offset {offset}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub offset: usize,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::UnknownOperator(name) => write!(f, "unknown operator `{name}`"),
            ParseErrorKind::UnknownField(name) => write!(f, "unknown field `${name}`"),
            ParseErrorKind::ArityMismatch {
                op,
                expected,
                found,
            } => write!(f, "{op} takes {expected} argument(s), found {found}"),
            ParseErrorKind::MalformedNumber(text) => write!(f, "malformed number `{text}`"),
            ParseErrorKind::UnbalancedParens => f.write_str("unbalanced parentheses"),
            ParseErrorKind::WindowNotPositiveInteger(text) => {
                write!(f, "window `{text}` is not a positive integer")
            }
            ParseErrorKind::ExpectedLiteral(op) => {
                write!(f, "{op} expects a numeric literal parameter")
            }
            ParseErrorKind::ParamOutOfRange { op, value } => {
                write!(f, "parameter {value} out of range for {op}")
            }
            ParseErrorKind::UnexpectedToken(tok) => write!(f, "unexpected `{tok}`"),
            ParseErrorKind::UnexpectedEnd => f.write_str("unexpected end of input"),
        }
    }
}

/// Parses one expression. Whitespace between tokens is ignored.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text, pos: 0 };
    let arg = p.arg()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        let kind = if p.peek() == Some(b')') {
            ParseErrorKind::UnbalancedParens
        } else {
            ParseErrorKind::UnexpectedToken(p.rest_token())
        };
        return Err(p.err(kind, p.pos));
    }
    Ok(arg.into_expr())
}

/// A parsed argument; numeric literals keep their source text so that
/// window and parameter positions can be checked afterwards.
enum Arg {
    Expr(Expr),
    Number {
        value: f64,
        text: String,
        offset: usize,
    },
}

impl Arg {
    fn into_expr(self) -> Expr {
        match self {
            Arg::Expr(e) => e,
            Arg::Number { value, .. } => Expr::Const(value),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, kind: ParseErrorKind, offset: usize) -> ParseError {
        ParseError { kind, offset }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b) if b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn rest_token(&self) -> String {
        self.src[self.pos..]
            .chars()
            .take_while(|c| !c.is_whitespace())
            .take(16)
            .collect()
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if b.is_ascii_alphanumeric() || b == b'_') {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn arg(&mut self) -> Result<Arg, ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            None => Err(self.err(ParseErrorKind::UnexpectedEnd, start)),
            Some(b'$') => {
                self.pos += 1;
                let name = self.ident();
                Field::from_name(name)
                    .map(|f| Arg::Expr(Expr::Field(f)))
                    .ok_or_else(|| self.err(ParseErrorKind::UnknownField(name.to_string()), start))
            }
            Some(b) if b.is_ascii_digit() || b == b'-' || b == b'+' || b == b'.' => {
                self.number(start)
            }
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => self.call(start),
            Some(b')') => Err(self.err(ParseErrorKind::UnbalancedParens, start)),
            Some(_) => Err(self.err(ParseErrorKind::UnexpectedToken(self.rest_token()), start)),
        }
    }

    fn number(&mut self, start: usize) -> Result<Arg, ParseError> {
        while matches!(
            self.peek(),
            Some(b) if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'-' | b'+')
        ) {
            // only allow a sign at the very start or right after an exponent marker
            let b = self.peek().unwrap();
            if (b == b'-' || b == b'+') && self.pos != start {
                let prev = self.src.as_bytes()[self.pos - 1];
                if prev != b'e' && prev != b'E' {
                    break;
                }
            }
            self.pos += 1;
        }
        let text = &self.src[start..self.pos];
        let well_formed = text
            .trim_start_matches(['-', '+'])
            .starts_with(|c: char| c.is_ascii_digit() || c == '.')
            && !text.contains("inf")
            && !text.contains("nan");
        match text.parse::<f64>() {
            Ok(value) if well_formed && value.is_finite() => Ok(Arg::Number {
                value,
                text: text.to_string(),
                offset: start,
            }),
            _ => Err(self.err(ParseErrorKind::MalformedNumber(text.to_string()), start)),
        }
    }

    fn call(&mut self, start: usize) -> Result<Arg, ParseError> {
        let name = self.ident();
        let op = Operator::from_name(name)
            .ok_or_else(|| self.err(ParseErrorKind::UnknownOperator(name.to_string()), start))?;
        self.skip_ws();
        if self.peek() != Some(b'(') {
            return Err(match self.peek() {
                None => self.err(ParseErrorKind::UnexpectedEnd, self.pos),
                Some(_) => self.err(ParseErrorKind::UnexpectedToken(self.rest_token()), self.pos),
            });
        }
        self.pos += 1;
        let mut args = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b')') {
            self.pos += 1;
        } else {
            loop {
                args.push(self.arg()?);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    None => return Err(self.err(ParseErrorKind::UnbalancedParens, self.pos)),
                    Some(_) => {
                        return Err(
                            self.err(ParseErrorKind::UnexpectedToken(self.rest_token()), self.pos)
                        )
                    }
                }
            }
        }
        self.build(op, args, start)
    }

    fn build(&self, op: Operator, args: Vec<Arg>, start: usize) -> Result<Arg, ParseError> {
        if args.len() != op.total_args() {
            return Err(self.err(
                ParseErrorKind::ArityMismatch {
                    op,
                    expected: op.total_args(),
                    found: args.len(),
                },
                start,
            ));
        }
        let mut args = args.into_iter();
        let children: Vec<Expr> = args.by_ref().take(op.arity()).map(Arg::into_expr).collect();

        let mut windows = Vec::with_capacity(op.window_params());
        for arg in args.by_ref().take(op.window_params()) {
            match arg {
                Arg::Number { text, offset, .. } => {
                    let w = text
                        .parse::<usize>()
                        .ok()
                        .filter(|w| *w >= 1 && !text.starts_with('+'))
                        .ok_or_else(|| {
                            self.err(ParseErrorKind::WindowNotPositiveInteger(text.clone()), offset)
                        })?;
                    windows.push(w);
                }
                Arg::Expr(e) => {
                    return Err(self.err(
                        ParseErrorKind::WindowNotPositiveInteger(e.to_string()),
                        start,
                    ))
                }
            }
        }

        let mut reals = Vec::with_capacity(op.extra_params());
        for arg in args {
            match arg {
                Arg::Number { value, offset, .. } => {
                    if !param_in_range(op, value) {
                        return Err(self.err(ParseErrorKind::ParamOutOfRange { op, value }, offset));
                    }
                    reals.push(value);
                }
                Arg::Expr(_) => return Err(self.err(ParseErrorKind::ExpectedLiteral(op), start)),
            }
        }

        Ok(Arg::Expr(Expr::Node(Node {
            op,
            children,
            windows,
            reals,
        })))
    }
}
