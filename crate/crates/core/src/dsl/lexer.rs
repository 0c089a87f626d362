use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Ident(String),
    Str(String),
    Number(String),
    Arrow,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Eq,
    Colon,
    /// Unlexable input, reported by the parser where it is met.
    Invalid {
        expected: String,
        found: String,
    },
    Eof,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Ident(s) => write!(f, "`{s}`"),
            TokenKind::Str(_) => f.write_str("string"),
            TokenKind::Number(n) => write!(f, "number {n}"),
            TokenKind::Arrow => f.write_str("`->`"),
            TokenKind::LBrace => f.write_str("`{`"),
            TokenKind::RBrace => f.write_str("`}`"),
            TokenKind::LBracket => f.write_str("`[`"),
            TokenKind::RBracket => f.write_str("`]`"),
            TokenKind::Comma => f.write_str("`,`"),
            TokenKind::Eq => f.write_str("`=`"),
            TokenKind::Colon => f.write_str("`:`"),
            TokenKind::Invalid { found, .. } => f.write_str(found),
            TokenKind::Eof => f.write_str("end of input"),
        }
    }
}

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pos {
    pub line: usize,
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub start: Pos,
    /// Position just past the token's last character.
    pub end: Pos,
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    pos: Pos,
}

impl Cursor<'_> {
    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.pos.line += 1;
            self.pos.column = 1;
        } else {
            self.pos.column += 1;
        }
        Some(c)
    }
}

fn invalid(expected: &str, found: impl Into<String>) -> TokenKind {
    TokenKind::Invalid {
        expected: expected.to_owned(),
        found: found.into(),
    }
}

/// Splits `text` into tokens. Never fails: bad input becomes
/// [`TokenKind::Invalid`] and lexing resumes after it.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut cur = Cursor {
        chars: text.chars().peekable(),
        pos: Pos { line: 1, column: 1 },
    };
    let mut tokens = Vec::new();
    loop {
        // whitespace and comments
        while let Some(c) = cur.peek() {
            if c.is_whitespace() {
                cur.bump();
            } else if c == '#' {
                while cur.peek().is_some_and(|c| c != '\n') {
                    cur.bump();
                }
            } else {
                break;
            }
        }
        let start = cur.pos;
        let Some(c) = cur.bump() else {
            tokens.push(Token {
                kind: TokenKind::Eof,
                start,
                end: start,
            });
            return tokens;
        };
        let kind = match c {
            '{' => TokenKind::LBrace,
            '}' => TokenKind::RBrace,
            '[' => TokenKind::LBracket,
            ']' => TokenKind::RBracket,
            ',' => TokenKind::Comma,
            '=' => TokenKind::Eq,
            ':' => TokenKind::Colon,
            '-' if cur.peek() == Some('>') => {
                cur.bump();
                TokenKind::Arrow
            }
            '"' => lex_string(&mut cur),
            c if c.is_ascii_digit() || c == '-' || c == '.' => {
                let mut s = String::from(c);
                while let Some(d) = cur.peek().filter(|d| d.is_ascii_digit() || *d == '.') {
                    s.push(d);
                    cur.bump();
                }
                if s.parse::<f64>().is_err() {
                    invalid("number", format!("`{s}`"))
                } else {
                    TokenKind::Number(s)
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::from(c);
                while let Some(d) = cur
                    .peek()
                    .filter(|d| d.is_ascii_alphanumeric() || *d == '_')
                {
                    s.push(d);
                    cur.bump();
                }
                TokenKind::Ident(s)
            }
            other => invalid("token", format!("character {other:?}")),
        };
        tokens.push(Token {
            kind,
            start,
            end: cur.pos,
        });
    }
}

/// Lexes a string body after the opening quote. An unterminated string
/// swallows the rest of its line.
fn lex_string(cur: &mut Cursor<'_>) -> TokenKind {
    let mut out = String::new();
    let mut bad_escape = None;
    loop {
        match cur.peek() {
            None | Some('\n') => return invalid("closing `\"`", "end of line"),
            Some('"') => {
                cur.bump();
                break;
            }
            Some('\\') => {
                cur.bump();
                match cur.peek() {
                    None | Some('\n') => continue,
                    Some(c) => {
                        cur.bump();
                        match c {
                            '"' => out.push('"'),
                            '\\' => out.push('\\'),
                            'n' => out.push('\n'),
                            't' => out.push('\t'),
                            other => {
                                bad_escape.get_or_insert(other);
                            }
                        }
                    }
                }
            }
            Some(c) => {
                cur.bump();
                out.push(c);
            }
        }
    }
    match bad_escape {
        Some(c) => invalid("escape sequence", format!("`\\{c}`")),
        None => TokenKind::Str(out),
    }
}
