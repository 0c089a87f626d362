use std::collections::HashMap;

use super::lexer::{tokenize, Pos, Token, TokenKind};
use super::ParseError;
use crate::model::{
    AccessMode, Automaton, CasePolicy, DisplayPolicy, HistoryBinding, Params, StateKind, StateNode,
    TriggerDef, TriggerEdge, TriggerKind,
};

const ITEM_KEYWORDS: [&str; 5] = ["state", "trigger", "history", "edge", "initial"];

pub fn parse_text(text: &str) -> Result<Automaton, Vec<ParseError>> {
    let tokens = tokenize(text);
    let mut parser = Parser {
        tokens: &tokens,
        index: 0,
        errors: Vec::new(),
        declared: HashMap::new(),
    };
    let automaton = parser.automaton();
    match automaton {
        Some(a) if parser.errors.is_empty() => Ok(a),
        _ => Err(parser.errors),
    }
}

enum Value {
    Str(String),
    Number(String),
    Ident(String),
    Binding(String, String),
    List(Vec<String>),
}

type Attr = (String, Value, Token);

struct Parser<'a> {
    tokens: &'a [Token],
    index: usize,
    errors: Vec<ParseError>,
    /// (namespace, id) -> line of first declaration
    declared: HashMap<(&'static str, String), usize>,
}

/// Marker for an error already recorded; the caller resynchronises.
struct Bail;

type PResult<T> = Result<T, Bail>;

impl<'a> Parser<'a> {
    fn peek(&self) -> &'a Token {
        &self.tokens[self.index]
    }

    fn peek_at(&self, offset: usize) -> &'a Token {
        let i = (self.index + offset).min(self.tokens.len() - 1);
        &self.tokens[i]
    }

    fn advance(&mut self) -> &'a Token {
        let t = &self.tokens[self.index];
        if self.index + 1 < self.tokens.len() {
            self.index += 1;
        }
        t
    }

    fn at_ident(&self, word: &str) -> bool {
        matches!(&self.peek().kind, TokenKind::Ident(s) if s == word)
    }

    fn at_item_start(&self) -> bool {
        match &self.peek().kind {
            TokenKind::Ident(s) => {
                ITEM_KEYWORDS.contains(&s.as_str()) && self.peek_at(1).kind != TokenKind::Eq
            }
            _ => false,
        }
    }

    /// Records an error at the current token. Inside a construct, a missing
    /// token is reported at the end of the previous token when the current
    /// one sits on a later line.
    fn fail(&mut self, expected: &str, continuation: bool) -> Bail {
        let found = self.peek();
        if let TokenKind::Invalid {
            expected,
            found: what,
        } = &found.kind
        {
            return self.fail_at(found, &expected.clone(), what.clone());
        }
        let mut at = found.start;
        if continuation && self.index > 0 {
            let prev: Pos = self.tokens[self.index - 1].end;
            if found.start.line > prev.line {
                at = prev;
            }
        }
        self.errors.push(ParseError {
            line: at.line,
            column: at.column,
            expected: expected.to_owned(),
            found: found.kind.to_string(),
        });
        Bail
    }

    fn fail_at(&mut self, token: &Token, expected: &str, found: String) -> Bail {
        self.errors.push(ParseError {
            line: token.start.line,
            column: token.start.column,
            expected: expected.to_owned(),
            found,
        });
        Bail
    }

    fn expect(&mut self, kind: TokenKind, expected: &str) -> PResult<&'a Token> {
        if self.peek().kind == kind {
            Ok(self.advance())
        } else {
            Err(self.fail(expected, true))
        }
    }

    fn expect_keyword(&mut self, word: &str, continuation: bool) -> PResult<()> {
        if self.at_ident(word) {
            self.advance();
            Ok(())
        } else {
            Err(self.fail(&format!("`{word}`"), continuation))
        }
    }

    fn ident(&mut self, expected: &str) -> PResult<(String, &'a Token)> {
        let tok = self.peek();
        match &tok.kind {
            TokenKind::Ident(s) if !self.at_item_start() => {
                self.advance();
                Ok((s.clone(), tok))
            }
            _ => Err(self.fail(expected, true)),
        }
    }

    fn declare(&mut self, namespace: &'static str, id: &str, token: &Token) -> PResult<()> {
        let key = (namespace, id.to_owned());
        if let Some(line) = self.declared.get(&key) {
            let found = format!("`{id}` (already declared on line {line})");
            return Err(self.fail_at(token, &format!("unique {namespace} id"), found));
        }
        self.declared.insert(key, token.start.line);
        Ok(())
    }

    fn automaton(&mut self) -> Option<Automaton> {
        let head = (|| {
            self.expect_keyword("automaton", false)?;
            let name = match &self.peek().kind {
                TokenKind::Str(s) => {
                    let s = s.clone();
                    self.advance();
                    s
                }
                _ => return Err(self.fail("automaton name string", true)),
            };
            self.expect(TokenKind::LBrace, "`{`")?;
            Ok(name)
        })();
        let name = head.ok()?;
        let mut automaton = Automaton::new(name);
        let mut initial_seen = false;

        loop {
            match &self.peek().kind {
                TokenKind::RBrace => {
                    self.advance();
                    break;
                }
                TokenKind::Eof => {
                    self.fail("`}`", false);
                    return None;
                }
                _ => {}
            }
            let outcome = if self.at_item_start() {
                let TokenKind::Ident(word) = &self.peek().kind else {
                    unreachable!()
                };
                let word = word.clone();
                let keyword_tok = self.advance();
                match word.as_str() {
                    "state" => self.state(&mut automaton),
                    "trigger" => self.trigger(&mut automaton),
                    "history" => self.history(&mut automaton),
                    "edge" => self.edge(&mut automaton),
                    "initial" => self.initial(&mut automaton, &mut initial_seen, keyword_tok),
                    _ => unreachable!(),
                }
            } else {
                Err(self.fail(
                    "`state`, `trigger`, `history`, `edge`, `initial` or `}`",
                    false,
                ))
            };
            if outcome.is_err() {
                self.recover();
            }
        }

        if self.peek().kind != TokenKind::Eof {
            self.fail("end of input", false);
        }
        Some(automaton)
    }

    /// Skips to the next item keyword, closing brace or end of input.
    fn recover(&mut self) {
        // always make progress past the offending token
        if !self.at_item_start() && !matches!(self.peek().kind, TokenKind::RBrace | TokenKind::Eof)
        {
            self.advance();
        }
        while !self.at_item_start()
            && !matches!(self.peek().kind, TokenKind::RBrace | TokenKind::Eof)
        {
            self.advance();
        }
    }

    fn state(&mut self, automaton: &mut Automaton) -> PResult<()> {
        let (id, id_tok) = self.ident("state id")?;
        let kind_tok = self.peek();
        let (kind_word, _) = self.ident("state kind (`user`, `dialer` or `writer`)")?;
        let kind = match kind_word.as_str() {
            "user" => StateKind::User,
            "dialer" => StateKind::Dialer,
            "writer" => StateKind::Writer,
            other => {
                return Err(self.fail_at(
                    kind_tok,
                    "state kind (`user`, `dialer` or `writer`)",
                    format!("`{other}`"),
                ))
            }
        };
        let mut node = StateNode::new(id.clone(), kind);
        if self.at_ident("final") && self.peek_at(1).kind != TokenKind::Eq {
            self.advance();
            node.is_final = true;
        }
        for (key, value, tok) in self.attrs()? {
            match key.as_str() {
                "display" => {
                    let word = self.ident_value(value, &tok, "`always`, `never` or `auto`")?;
                    node.display = Some(DisplayPolicy::parse(&word).ok_or_else(|| {
                        self.fail_at(&tok, "`always`, `never` or `auto`", format!("`{word}`"))
                    })?);
                }
                "history" => node.history.push(self.binding(value, &tok)?),
                _ => self.param(&mut node.params, &key, value, &tok, false)?,
            }
        }
        self.declare("state", &id, id_tok)?;
        automaton.add_state(node).map_err(|_| Bail)
    }

    fn trigger(&mut self, automaton: &mut Automaton) -> PResult<()> {
        let (id, id_tok) = self.ident("trigger id")?;
        let kind_tok = self.peek();
        let (kind_word, _) = self.ident("trigger kind")?;
        let kind = match kind_word.as_str() {
            "always" => TriggerKind::Always,
            "keyword" => TriggerKind::Keyword,
            "pattern" => TriggerKind::Pattern,
            "llm" => TriggerKind::Llm,
            other => {
                return Err(self.fail_at(
                    kind_tok,
                    "trigger kind (`always`, `keyword`, `pattern` or `llm`)",
                    format!("`{other}`"),
                ))
            }
        };
        let mut def = TriggerDef::new(id.clone(), kind);
        for (key, value, tok) in self.attrs()? {
            match key.as_str() {
                "priority" => {
                    let p = self.uint_value(value, &tok)?;
                    def.set_priority(p)
                        .map_err(|_| self.fail_at(&tok, "priority >= 1", p.to_string()))?;
                }
                "history" => def.history.push(self.binding(value, &tok)?),
                _ => self.param(&mut def.params, &key, value, &tok, true)?,
            }
        }
        self.declare("trigger", &id, id_tok)?;
        automaton.add_trigger(def).map_err(|_| Bail)
    }

    fn history(&mut self, automaton: &mut Automaton) -> PResult<()> {
        let (id, tok) = self.ident("history id")?;
        self.declare("history", &id, tok)?;
        automaton.add_archive(id).map_err(|_| Bail)
    }

    fn edge(&mut self, automaton: &mut Automaton) -> PResult<()> {
        let (from, _) = self.ident("source state id")?;
        self.expect(TokenKind::Arrow, "`->`")?;
        let (to, _) = self.ident("target state id")?;
        let mut edge = TriggerEdge::new(from, to);
        if self.at_ident("on") {
            self.advance();
            loop {
                let (t, _) = self.ident("trigger id")?;
                edge = edge.on(t);
                if self.peek().kind == TokenKind::Comma {
                    self.advance();
                } else {
                    break;
                }
            }
        }
        if self.at_ident("priority") {
            self.advance();
            let tok = self.peek();
            match &tok.kind {
                TokenKind::Number(n) => {
                    let p = n.parse::<u32>().map_err(|_| {
                        self.fail_at(tok, "non-negative integer priority", format!("number {n}"))
                    })?;
                    self.advance();
                    edge = edge.with_priority(p);
                }
                _ => return Err(self.fail("integer priority", true)),
            }
        }
        automaton.add_edge(edge);
        Ok(())
    }

    fn initial(
        &mut self,
        automaton: &mut Automaton,
        seen: &mut bool,
        keyword: &Token,
    ) -> PResult<()> {
        let (id, _) = self.ident("initial state id")?;
        if *seen {
            return Err(self.fail_at(
                keyword,
                "a single `initial` declaration",
                "second `initial`".into(),
            ));
        }
        *seen = true;
        automaton.set_initial(id);
        Ok(())
    }

    fn attrs(&mut self) -> PResult<Vec<Attr>> {
        let mut out = Vec::new();
        while let TokenKind::Ident(key) = &self.peek().kind {
            if self.peek_at(1).kind != TokenKind::Eq {
                break;
            }
            let key = key.clone();
            self.advance();
            self.advance();
            let tok = self.peek().clone();
            let value = self.value()?;
            out.push((key, value, tok));
        }
        Ok(out)
    }

    fn value(&mut self) -> PResult<Value> {
        let tok = self.peek();
        match &tok.kind {
            TokenKind::Str(s) => {
                self.advance();
                Ok(Value::Str(s.clone()))
            }
            TokenKind::Number(n) => {
                self.advance();
                Ok(Value::Number(n.clone()))
            }
            TokenKind::Ident(s) => {
                self.advance();
                if self.peek().kind == TokenKind::Colon {
                    self.advance();
                    let (mode, _) = self.ident("access mode (`r`, `w` or `rw`)")?;
                    Ok(Value::Binding(s.clone(), mode))
                } else {
                    Ok(Value::Ident(s.clone()))
                }
            }
            TokenKind::LBracket => {
                self.advance();
                let mut items = Vec::new();
                if self.peek().kind != TokenKind::RBracket {
                    loop {
                        match &self.peek().kind {
                            TokenKind::Str(s) => {
                                items.push(s.clone());
                                self.advance();
                            }
                            _ => return Err(self.fail("string list item", true)),
                        }
                        if self.peek().kind == TokenKind::Comma {
                            self.advance();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(TokenKind::RBracket, "`]`")?;
                Ok(Value::List(items))
            }
            _ => Err(self.fail("attribute value", true)),
        }
    }

    fn binding(&mut self, value: Value, tok: &Token) -> PResult<HistoryBinding> {
        match value {
            Value::Binding(archive, mode) => match AccessMode::parse(&mode) {
                Some(mode) => Ok(HistoryBinding {
                    archive: archive.into(),
                    mode,
                }),
                None => {
                    Err(self.fail_at(tok, "access mode (`r`, `w` or `rw`)", format!("`{mode}`")))
                }
            },
            other => Err(self.fail_at(tok, "history binding `id:mode`", describe(&other))),
        }
    }

    fn ident_value(&mut self, value: Value, tok: &Token, expected: &str) -> PResult<String> {
        match value {
            Value::Ident(s) => Ok(s),
            other => Err(self.fail_at(tok, expected, describe(&other))),
        }
    }

    fn string_value(&mut self, value: Value, tok: &Token) -> PResult<String> {
        match value {
            Value::Str(s) => Ok(s),
            other => Err(self.fail_at(tok, "string", describe(&other))),
        }
    }

    fn number_value(&mut self, value: Value, tok: &Token) -> PResult<f64> {
        match value {
            Value::Number(n) => n
                .parse()
                .map_err(|_| self.fail_at(tok, "number", format!("`{n}`"))),
            other => Err(self.fail_at(tok, "number", describe(&other))),
        }
    }

    fn uint_value(&mut self, value: Value, tok: &Token) -> PResult<u32> {
        match value {
            Value::Number(n) => n
                .parse()
                .map_err(|_| self.fail_at(tok, "non-negative integer", format!("number {n}"))),
            other => Err(self.fail_at(tok, "non-negative integer", describe(&other))),
        }
    }

    fn list_value(&mut self, value: Value, tok: &Token) -> PResult<Vec<String>> {
        match value {
            Value::List(items) => Ok(items),
            Value::Str(s) => Ok(vec![s]),
            other => Err(self.fail_at(tok, "string list", describe(&other))),
        }
    }

    fn param(
        &mut self,
        params: &mut Params,
        key: &str,
        value: Value,
        tok: &Token,
        is_trigger: bool,
    ) -> PResult<()> {
        fn set<T>(slot: &mut Option<T>, v: T) -> bool {
            let fresh = slot.is_none();
            *slot = Some(v);
            fresh
        }
        let fresh = match key {
            "prompt" => set(&mut params.prompt, self.string_value(value, tok)?),
            "prompt_file" => set(&mut params.prompt_file, self.string_value(value, tok)?),
            "script" => set(&mut params.script, self.list_value(value, tok)?),
            "script_file" => set(&mut params.script_file, self.string_value(value, tok)?),
            "endpoint" => set(&mut params.endpoint, self.string_value(value, tok)?),
            "model" => set(&mut params.model, self.string_value(value, tok)?),
            "temperature" => set(&mut params.temperature, self.number_value(value, tok)?),
            "api_key_env" => set(&mut params.api_key_env, self.string_value(value, tok)?),
            "timeout" => set(&mut params.timeout, self.number_value(value, tok)?),
            "pattern" => set(&mut params.pattern, self.string_value(value, tok)?),
            "keywords" if is_trigger => set(&mut params.keywords, self.list_value(value, tok)?),
            "case" if is_trigger => {
                let word = self.ident_value(value, tok, "`sensitive` or `insensitive`")?;
                let case = CasePolicy::parse(&word).ok_or_else(|| {
                    self.fail_at(tok, "`sensitive` or `insensitive`", format!("`{word}`"))
                })?;
                set(&mut params.case, case)
            }
            "sink" if !is_trigger => set(&mut params.sink, self.string_value(value, tok)?),
            "field" if !is_trigger => set(&mut params.field, self.string_value(value, tok)?),
            _ => {
                let owner = if is_trigger { "trigger" } else { "state" };
                let key_tok = &self.tokens[self.index_of(tok).saturating_sub(2)];
                return Err(self.fail_at(
                    key_tok,
                    &format!("{owner} attribute"),
                    format!("`{key}`"),
                ));
            }
        };
        if !fresh {
            let key_tok = &self.tokens[self.index_of(tok).saturating_sub(2)];
            return Err(self.fail_at(
                key_tok,
                "attribute declared once",
                format!("duplicate `{key}`"),
            ));
        }
        Ok(())
    }

    fn index_of(&self, tok: &Token) -> usize {
        self.tokens
            .iter()
            .position(|t| t.start == tok.start)
            .unwrap_or(self.index)
    }
}

fn describe(value: &Value) -> String {
    match value {
        Value::Str(_) => "string".into(),
        Value::Number(n) => format!("number {n}"),
        Value::Ident(s) => format!("`{s}`"),
        Value::Binding(a, m) => format!("`{a}:{m}`"),
        Value::List(_) => "list".into(),
    }
}
