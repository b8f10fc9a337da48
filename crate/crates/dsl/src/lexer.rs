use crate::diag::{codes, Diagnostic};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    Int(i64),
    /// Symbol literal `:name`.
    SymLit(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Colon,
    Dot,
    Arrow,    // ->
    FatArrow, // =>
    Pipe,     // |
    Dash,     // -
    DashDash, // --
    Assign,   // =
    EqEq,
    Ne,
    Le,
    Ge,
    Lt,
    Gt,
    AndAnd,
    OrOr,
    Bang,
    Plus,
    PlusPlus,
    Star,
    Slash,
    Percent,
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "'{s}'"),
            Tok::Int(n) => write!(f, "'{n}'"),
            Tok::SymLit(s) => write!(f, "':{s}'"),
            Tok::LBrace => write!(f, "'{{'"),
            Tok::RBrace => write!(f, "'}}'"),
            Tok::LParen => write!(f, "'('"),
            Tok::RParen => write!(f, "')'"),
            Tok::LBracket => write!(f, "'['"),
            Tok::RBracket => write!(f, "']'"),
            Tok::Comma => write!(f, "','"),
            Tok::Semi => write!(f, "';'"),
            Tok::Colon => write!(f, "':'"),
            Tok::Dot => write!(f, "'.'"),
            Tok::Arrow => write!(f, "'->'"),
            Tok::FatArrow => write!(f, "'=>'"),
            Tok::Pipe => write!(f, "'|'"),
            Tok::Dash => write!(f, "'-'"),
            Tok::DashDash => write!(f, "'--'"),
            Tok::Assign => write!(f, "'='"),
            Tok::EqEq => write!(f, "'=='"),
            Tok::Ne => write!(f, "'!='"),
            Tok::Le => write!(f, "'<='"),
            Tok::Ge => write!(f, "'>='"),
            Tok::Lt => write!(f, "'<'"),
            Tok::Gt => write!(f, "'>'"),
            Tok::AndAnd => write!(f, "'&&'"),
            Tok::OrOr => write!(f, "'||'"),
            Tok::Bang => write!(f, "'!'"),
            Tok::Plus => write!(f, "'+'"),
            Tok::PlusPlus => write!(f, "'++'"),
            Tok::Star => write!(f, "'*'"),
            Tok::Slash => write!(f, "'/'"),
            Tok::Percent => write!(f, "'%'"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub tok: Tok,
    pub line: u32,
    pub col: u32,
}

/// Total tokenizer: any byte sequence yields tokens or an error diagnostic.
pub fn lex(src: &str) -> Result<Vec<Token>, Diagnostic> {
    let mut out = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = src.chars().peekable();

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if let Some(c) = c {
                if c == '\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
            }
            c
        }};
    }

    loop {
        let (tline, tcol) = (line, col);
        let Some(&c) = chars.peek() else { break };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '/' => {
                bump!();
                match chars.peek() {
                    Some('/') => {
                        while let Some(&c) = chars.peek() {
                            if c == '\n' {
                                break;
                            }
                            bump!();
                        }
                    }
                    Some('*') => {
                        bump!();
                        let mut closed = false;
                        while let Some(c) = bump!() {
                            if c == '*' && chars.peek() == Some(&'/') {
                                bump!();
                                closed = true;
                                break;
                            }
                        }
                        if !closed {
                            return Err(Diagnostic::error(
                                codes::LEX,
                                "unterminated block comment",
                                tline,
                                tcol,
                            ));
                        }
                    }
                    _ => out.push(Token {
                        tok: Tok::Slash,
                        line: tline,
                        col: tcol,
                    }),
                }
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let mut name = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        name.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                out.push(Token {
                    tok: Tok::Ident(name),
                    line: tline,
                    col: tcol,
                });
            }
            '0'..='9' => {
                let mut digits = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() {
                        digits.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                match digits.parse::<i64>() {
                    Ok(n) => out.push(Token {
                        tok: Tok::Int(n),
                        line: tline,
                        col: tcol,
                    }),
                    Err(_) => {
                        return Err(Diagnostic::error(
                            codes::LEX,
                            format!("integer literal '{digits}' out of range"),
                            tline,
                            tcol,
                        ))
                    }
                }
            }
            ':' => {
                bump!();
                match chars.peek() {
                    Some(c) if c.is_ascii_alphabetic() || *c == '_' => {
                        let mut name = String::new();
                        while let Some(&c) = chars.peek() {
                            if c.is_ascii_alphanumeric() || c == '_' {
                                name.push(c);
                                bump!();
                            } else {
                                break;
                            }
                        }
                        out.push(Token {
                            tok: Tok::SymLit(name),
                            line: tline,
                            col: tcol,
                        });
                    }
                    _ => out.push(Token {
                        tok: Tok::Colon,
                        line: tline,
                        col: tcol,
                    }),
                }
            }
            _ => {
                bump!();
                let tok = match c {
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    ',' => Tok::Comma,
                    ';' => Tok::Semi,
                    '.' => Tok::Dot,
                    '*' => Tok::Star,
                    '%' => Tok::Percent,
                    '|' => {
                        if chars.peek() == Some(&'|') {
                            bump!();
                            Tok::OrOr
                        } else {
                            Tok::Pipe
                        }
                    }
                    '&' => {
                        if chars.peek() == Some(&'&') {
                            bump!();
                            Tok::AndAnd
                        } else {
                            return Err(Diagnostic::error(
                                codes::LEX,
                                "stray '&' (did you mean '&&'?)",
                                tline,
                                tcol,
                            ));
                        }
                    }
                    '-' => {
                        if chars.peek() == Some(&'>') {
                            bump!();
                            Tok::Arrow
                        } else if chars.peek() == Some(&'-') {
                            bump!();
                            Tok::DashDash
                        } else {
                            Tok::Dash
                        }
                    }
                    '=' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::EqEq
                        } else if chars.peek() == Some(&'>') {
                            bump!();
                            Tok::FatArrow
                        } else {
                            Tok::Assign
                        }
                    }
                    '!' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::Ne
                        } else {
                            Tok::Bang
                        }
                    }
                    '<' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::Le
                        } else {
                            Tok::Lt
                        }
                    }
                    '>' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::Ge
                        } else {
                            Tok::Gt
                        }
                    }
                    '+' => {
                        if chars.peek() == Some(&'+') {
                            bump!();
                            Tok::PlusPlus
                        } else {
                            Tok::Plus
                        }
                    }
                    other => {
                        return Err(Diagnostic::error(
                            codes::LEX,
                            format!("unexpected character '{}'", other.escape_default()),
                            tline,
                            tcol,
                        ))
                    }
                };
                out.push(Token {
                    tok,
                    line: tline,
                    col: tcol,
                });
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexes_the_minimal_document() {
        let toks = lex("pps { alphabet a b; }").unwrap();
        assert_eq!(toks[0].tok, Tok::Ident("pps".to_string()));
        assert_eq!(toks.last().unwrap().tok, Tok::Eof);
    }

    #[test]
    fn tracks_positions() {
        let toks = lex("a\n  b").unwrap();
        assert_eq!((toks[0].line, toks[0].col), (1, 1));
        assert_eq!((toks[1].line, toks[1].col), (2, 3));
    }

    #[test]
    fn comments_are_skipped() {
        let toks = lex("a // c\n/* x\ny */ b").unwrap();
        let idents: Vec<&Tok> = toks.iter().map(|t| &t.tok).collect();
        assert_eq!(
            idents[..2],
            [
                &Tok::Ident("a".to_string()),
                &Tok::Ident("b".to_string())
            ]
        );
    }

    #[test]
    fn unterminated_comment_is_reported() {
        assert!(lex("/* nope").is_err());
    }
}
