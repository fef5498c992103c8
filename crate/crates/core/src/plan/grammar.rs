//! Tokenizer and a table-driven recognizer for the plan dialect.
//!
//! The grammar is plain data ([`PlanGrammar::rules`]); the recognizer is a
//! memoized all-parses interpreter, so the same tables give acceptance,
//! furthest-failure diagnostics, derivation counts and random generation.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;

use super::{PlanError, PlanErrorKind, Vocabulary};
use crate::types::Location;

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Colon,
    Comma,
    /// Decoded string contents.
    Str(String),
    /// Numbers and `true`/`false`/`null`: valid JSON, never valid here.
    Literal(String),
    Eof,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub offset: usize,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::LBrace => f.write_str("'{'"),
            TokenKind::RBrace => f.write_str("'}'"),
            TokenKind::LBracket => f.write_str("'['"),
            TokenKind::RBracket => f.write_str("']'"),
            TokenKind::Colon => f.write_str("':'"),
            TokenKind::Comma => f.write_str("','"),
            TokenKind::Str(s) => write!(f, "{}", serde_json::to_string(s).expect("string serializes")),
            TokenKind::Literal(s) => write!(f, "'{s}'"),
            TokenKind::Eof => f.write_str("end of input"),
        }
    }
}

struct Lexer<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    column: usize,
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn error(&self, message: String) -> PlanError {
        PlanError {
            kind: PlanErrorKind::Lexical,
            line: self.line,
            column: self.column,
            offset: self.pos,
            expected: Vec::new(),
            message,
        }
    }

    fn hex4(&mut self) -> Result<u32, PlanError> {
        let mut v = 0;
        for _ in 0..4 {
            let c = self.peek().ok_or_else(|| self.error("unterminated \\u escape".into()))?;
            let d = c.to_digit(16).ok_or_else(|| self.error(format!("invalid hex digit {c:?} in \\u escape")))?;
            self.bump();
            v = v * 16 + d;
        }
        Ok(v)
    }

    fn string(&mut self) -> Result<String, PlanError> {
        self.bump();
        let mut out = String::new();
        loop {
            let c = self.peek().ok_or_else(|| self.error("unterminated string".into()))?;
            match c {
                '"' => {
                    self.bump();
                    return Ok(out);
                }
                '\\' => {
                    self.bump();
                    let e = self.peek().ok_or_else(|| self.error("unterminated escape".into()))?;
                    let decoded = match e {
                        '"' => '"',
                        '\\' => '\\',
                        '/' => '/',
                        'b' => '\u{8}',
                        'f' => '\u{c}',
                        'n' => '\n',
                        'r' => '\r',
                        't' => '\t',
                        'u' => {
                            self.bump();
                            let hi = self.hex4()?;
                            let cp = if (0xD800..0xDC00).contains(&hi) {
                                if !self.text[self.pos..].starts_with("\\u") {
                                    return Err(self.error("unpaired surrogate in \\u escape".into()));
                                }
                                self.bump();
                                self.bump();
                                let lo = self.hex4()?;
                                if !(0xDC00..0xE000).contains(&lo) {
                                    return Err(self.error("unpaired surrogate in \\u escape".into()));
                                }
                                0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
                            } else {
                                hi
                            };
                            let ch = char::from_u32(cp).ok_or_else(|| self.error("unpaired surrogate in \\u escape".into()))?;
                            out.push(ch);
                            continue;
                        }
                        other => return Err(self.error(format!("invalid escape '\\{other}'"))),
                    };
                    self.bump();
                    out.push(decoded);
                }
                c if (c as u32) < 0x20 => return Err(self.error(format!("control character {:?} in string", c))),
                c => {
                    self.bump();
                    out.push(c);
                }
            }
        }
    }

    fn literal(&mut self) -> Result<String, PlanError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '+' | '.') {
                self.bump();
            } else {
                break;
            }
        }
        let word = &self.text[start..self.pos];
        let is_number = serde_json::from_str::<serde_json::Number>(word).is_ok();
        if is_number || matches!(word, "true" | "false" | "null") {
            Ok(word.to_string())
        } else {
            Err(PlanError {
                offset: start,
                ..self.error(format!("invalid token '{word}'"))
            })
        }
    }
}

/// Splits JSON text into tokens, ending with [`TokenKind::Eof`].
pub fn tokenize(text: &str) -> Result<Vec<Token>, PlanError> {
    let mut lx = Lexer {
        text,
        pos: 0,
        line: 1,
        column: 1,
    };
    let mut out = Vec::new();
    loop {
        while matches!(lx.peek(), Some(' ' | '\t' | '\n' | '\r')) {
            lx.bump();
        }
        let (offset, line, column) = (lx.pos, lx.line, lx.column);
        let Some(c) = lx.peek() else {
            out.push(Token {
                kind: TokenKind::Eof,
                offset,
                line,
                column,
            });
            return Ok(out);
        };
        let kind = match c {
            '{' | '}' | '[' | ']' | ':' | ',' => {
                lx.bump();
                match c {
                    '{' => TokenKind::LBrace,
                    '}' => TokenKind::RBrace,
                    '[' => TokenKind::LBracket,
                    ']' => TokenKind::RBracket,
                    ':' => TokenKind::Colon,
                    _ => TokenKind::Comma,
                }
            }
            '"' => TokenKind::Str(lx.string()?),
            c if c.is_ascii_alphanumeric() || c == '-' => TokenKind::Literal(lx.literal()?),
            other => return Err(lx.error(format!("unexpected character {other:?}"))),
        };
        out.push(Token {
            kind,
            offset,
            line,
            column,
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VocabClass {
    Object,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Terminal {
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Colon,
    Comma,
    /// A string token with exactly this decoded value.
    Keyword(&'static str),
    AnyString,
    Vocab(VocabClass),
    Eof,
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::LBrace => f.write_str("'{'"),
            Terminal::RBrace => f.write_str("'}'"),
            Terminal::LBracket => f.write_str("'['"),
            Terminal::RBracket => f.write_str("']'"),
            Terminal::Colon => f.write_str("':'"),
            Terminal::Comma => f.write_str("','"),
            Terminal::Keyword(k) => write!(f, "'\"{k}\"'"),
            Terminal::AnyString => f.write_str("string"),
            Terminal::Vocab(VocabClass::Object) => f.write_str("<object label>"),
            Terminal::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    T(Terminal),
    N(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rule {
    pub name: &'static str,
    pub alternatives: Vec<Vec<Symbol>>,
}

/// The plan dialect as a BNF production table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanGrammar {
    pub rules: Vec<Rule>,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParseTree {
    Node { rule: &'static str, children: Vec<ParseTree> },
    Leaf(Token),
}

impl ParseTree {
    /// Leaves in order.
    pub fn tokens(&self) -> Vec<&Token> {
        let mut out = Vec::new();
        fn walk<'t>(t: &'t ParseTree, out: &mut Vec<&'t Token>) {
            match t {
                ParseTree::Leaf(tok) => out.push(tok),
                ParseTree::Node { children, .. } => children.iter().for_each(|c| walk(c, out)),
            }
        }
        walk(self, &mut out);
        out
    }

    /// All nodes produced by `rule`, depth first.
    pub fn find<'t>(&'t self, rule: &str) -> Vec<&'t ParseTree> {
        let mut out = Vec::new();
        fn walk<'t>(t: &'t ParseTree, rule: &str, out: &mut Vec<&'t ParseTree>) {
            if let ParseTree::Node { rule: r, children } = t {
                if *r == rule {
                    out.push(t);
                }
                children.iter().for_each(|c| walk(c, rule, out));
            }
        }
        walk(self, rule, &mut out);
        out
    }
}

impl PlanGrammar {
    pub fn new() -> PlanGrammar {
        use Symbol::{N, T};
        use Terminal::*;
        const ROOT: usize = 0;
        const PLAN: usize = 1;
        const COT: usize = 2;
        const ACTIONS: usize = 3;
        const MORE: usize = 4;
        const ACTION: usize = 5;
        const PICK: usize = 6;
        const PLACE: usize = 7;
        const HANDOVER: usize = 8;
        const LOC: usize = 9;
        const OBJ: usize = 10;
        let rule = |name, alternatives| Rule { name, alternatives };
        let rules = vec![
            rule("root", vec![vec![N(PLAN), T(Eof)]]),
            rule("plan", vec![vec![T(LBrace), N(COT), T(Comma), N(ACTIONS), T(RBrace)]]),
            rule("cot", vec![vec![T(Keyword("chain_of_thought")), T(Colon), T(AnyString)]]),
            rule(
                "actions",
                vec![vec![T(Keyword("actions")), T(Colon), T(LBracket), N(ACTION), N(MORE), T(RBracket)]],
            ),
            rule("more_actions", vec![vec![T(Comma), N(ACTION), N(MORE)], vec![]]),
            rule("action", vec![vec![N(PICK)], vec![N(PLACE)], vec![N(HANDOVER)]]),
            rule(
                "pick",
                vec![vec![
                    T(LBrace),
                    T(Keyword("type")),
                    T(Colon),
                    T(Keyword("pick")),
                    T(Comma),
                    T(Keyword("object")),
                    T(Colon),
                    N(OBJ),
                    T(Comma),
                    T(Keyword("location")),
                    T(Colon),
                    N(LOC),
                    T(RBrace),
                ]],
            ),
            rule(
                "place",
                vec![vec![
                    T(LBrace),
                    T(Keyword("type")),
                    T(Colon),
                    T(Keyword("place")),
                    T(Comma),
                    T(Keyword("location")),
                    T(Colon),
                    N(LOC),
                    T(RBrace),
                ]],
            ),
            rule(
                "handover",
                vec![vec![T(LBrace), T(Keyword("type")), T(Colon), T(Keyword("handover")), T(RBrace)]],
            ),
            rule(
                "loc",
                vec![vec![T(Keyword("table"))], vec![T(Keyword("dishwasher"))], vec![T(Keyword("cabinet"))]],
            ),
            rule("objlabel", vec![vec![T(Vocab(VocabClass::Object))]]),
        ];
        PlanGrammar { rules, start: ROOT }
    }

    pub fn rule_index(&self, name: &str) -> Option<usize> {
        self.rules.iter().position(|r| r.name == name)
    }

    /// BNF rendering of the production table.
    pub fn to_bnf(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            let alts: Vec<String> = r
                .alternatives
                .iter()
                .map(|alt| {
                    if alt.is_empty() {
                        return "ε".to_string();
                    }
                    alt.iter()
                        .map(|s| match s {
                            Symbol::T(Terminal::Eof) => "EOF".to_string(),
                            Symbol::T(t) => t.to_string(),
                            Symbol::N(n) => self.rules[*n].name.to_string(),
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            out.push_str(&format!("{} ::= {} ;\n", r.name, alts.join(" | ")));
        }
        out
    }

    /// Parses `text`, returning the unique parse tree.
    pub fn parse(&self, text: &str, vocab: &Vocabulary) -> Result<ParseTree, PlanError> {
        let tokens = tokenize(text)?;
        let mut r = Recognizer::new(self, &tokens, vocab);
        let ends = r.nonterminal(self.start, 0);
        if ends.iter().any(|(e, _)| *e == tokens.len()) {
            Ok(r.build(Symbol::N(self.start), 0, tokens.len()).expect("accepted input has a tree"))
        } else {
            Err(r.failure())
        }
    }

    /// Number of distinct derivations of `text` from the start symbol
    /// (0 when rejected).
    pub fn count_derivations(&self, text: &str, vocab: &Vocabulary) -> u64 {
        let Ok(tokens) = tokenize(text) else { return 0 };
        let mut r = Recognizer::new(self, &tokens, vocab);
        r.nonterminal(self.start, 0)
            .iter()
            .filter(|(e, _)| *e == tokens.len())
            .map(|(_, c)| *c)
            .sum()
    }

    /// Random sentence of the grammar, rendered as text with random
    /// whitespace. Recursion is cut off after `max_actions` actions.
    pub fn generate<R: Rng>(&self, rng: &mut R, vocab: &Vocabulary, max_actions: usize) -> String {
        let mut out = String::new();
        let mut actions = 0;
        self.gen_symbol(&Symbol::N(self.start), rng, vocab, max_actions, &mut actions, &mut out);
        out
    }

    fn gen_symbol<R: Rng>(
        &self,
        sym: &Symbol,
        rng: &mut R,
        vocab: &Vocabulary,
        max_actions: usize,
        actions: &mut usize,
        out: &mut String,
    ) {
        match sym {
            Symbol::N(n) => {
                let rule = &self.rules[*n];
                let alt = if rule.name == "more_actions" {
                    // keep going with probability 1/2 while under the cap
                    let more = *actions < max_actions && rng.random_bool(0.5);
                    &rule.alternatives[if more { 0 } else { 1 }]
                } else {
                    &rule.alternatives[rng.random_range(0..rule.alternatives.len())]
                };
                if rule.name == "action" {
                    *actions += 1;
                }
                for s in alt {
                    self.gen_symbol(s, rng, vocab, max_actions, actions, out);
                }
            }
            Symbol::T(t) => {
                const WS: [&str; 5] = ["", "", " ", "\n", "\t "];
                out.push_str(WS[rng.random_range(0..WS.len())]);
                match t {
                    Terminal::LBrace => out.push('{'),
                    Terminal::RBrace => out.push('}'),
                    Terminal::LBracket => out.push('['),
                    Terminal::RBracket => out.push(']'),
                    Terminal::Colon => out.push(':'),
                    Terminal::Comma => out.push(','),
                    Terminal::Keyword(k) => out.push_str(&json_string(k)),
                    Terminal::AnyString => out.push_str(&random_json_string(rng)),
                    Terminal::Vocab(VocabClass::Object) => {
                        let labels: Vec<&str> = vocab.object_labels().collect();
                        out.push_str(&json_string(labels[rng.random_range(0..labels.len())]));
                    }
                    Terminal::Eof => {}
                }
            }
        }
    }
}

impl Default for PlanGrammar {
    fn default() -> Self {
        Self::new()
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// String literal exercising escapes, including ones serde would not emit.
fn random_json_string<R: Rng>(rng: &mut R) -> String {
    const PIECES: [&str; 12] = [
        "pick", " ", "the mug", "\\n", "\\\"", "\\u00e9", "\\ud83d\\ude00", "ü", "\\/", "\\t", "{[,:]}", "\\\\",
    ];
    let n = rng.random_range(0..6);
    let mut s = String::from("\"");
    for _ in 0..n {
        s.push_str(PIECES[rng.random_range(0..PIECES.len())]);
    }
    s.push('"');
    s
}

struct Recognizer<'g> {
    grammar: &'g PlanGrammar,
    tokens: &'g [Token],
    vocab: &'g Vocabulary,
    memo: HashMap<(usize, usize), Vec<(usize, u64)>>,
    furthest: usize,
    expected: BTreeSet<Terminal>,
}

impl<'g> Recognizer<'g> {
    fn new(grammar: &'g PlanGrammar, tokens: &'g [Token], vocab: &'g Vocabulary) -> Self {
        Self {
            grammar,
            tokens,
            vocab,
            memo: HashMap::new(),
            furthest: 0,
            expected: BTreeSet::new(),
        }
    }

    fn matches(&self, t: &Terminal, tok: &Token) -> bool {
        match (t, &tok.kind) {
            (Terminal::LBrace, TokenKind::LBrace)
            | (Terminal::RBrace, TokenKind::RBrace)
            | (Terminal::LBracket, TokenKind::LBracket)
            | (Terminal::RBracket, TokenKind::RBracket)
            | (Terminal::Colon, TokenKind::Colon)
            | (Terminal::Comma, TokenKind::Comma)
            | (Terminal::Eof, TokenKind::Eof)
            | (Terminal::AnyString, TokenKind::Str(_)) => true,
            (Terminal::Keyword(k), TokenKind::Str(s)) => k == s,
            (Terminal::Vocab(VocabClass::Object), TokenKind::Str(s)) => self.vocab.is_object(s),
            _ => false,
        }
    }

    fn terminal(&mut self, t: &Terminal, pos: usize) -> Option<usize> {
        if pos < self.tokens.len() && self.matches(t, &self.tokens[pos]) {
            return Some(pos + 1);
        }
        if pos > self.furthest {
            self.furthest = pos;
            self.expected.clear();
        }
        if pos == self.furthest {
            self.expected.insert(t.clone());
        }
        None
    }

    /// End positions reachable from `pos` with their derivation counts.
    fn nonterminal(&mut self, n: usize, pos: usize) -> Vec<(usize, u64)> {
        if let Some(v) = self.memo.get(&(n, pos)) {
            return v.clone();
        }
        let mut total: Vec<(usize, u64)> = Vec::new();
        let grammar = self.grammar;
        for alt in &grammar.rules[n].alternatives {
            for (end, count) in self.sequence(alt, pos) {
                match total.iter_mut().find(|(e, _)| *e == end) {
                    Some(slot) => slot.1 += count,
                    None => total.push((end, count)),
                }
            }
        }
        self.memo.insert((n, pos), total.clone());
        total
    }

    fn sequence(&mut self, symbols: &[Symbol], pos: usize) -> Vec<(usize, u64)> {
        let mut frontier = vec![(pos, 1u64)];
        for s in symbols {
            let mut next: Vec<(usize, u64)> = Vec::new();
            for (p, c) in frontier {
                let ends = match s {
                    Symbol::T(t) => self.terminal(t, p).map(|e| vec![(e, 1)]).unwrap_or_default(),
                    Symbol::N(n) => self.nonterminal(*n, p),
                };
                for (e, k) in ends {
                    match next.iter_mut().find(|(x, _)| *x == e) {
                        Some(slot) => slot.1 += c * k,
                        None => next.push((e, c * k)),
                    }
                }
            }
            if next.is_empty() {
                return next;
            }
            frontier = next;
        }
        frontier
    }

    fn build(&mut self, sym: Symbol, pos: usize, end: usize) -> Option<ParseTree> {
        match sym {
            Symbol::T(_) => (end == pos + 1).then(|| ParseTree::Leaf(self.tokens[pos].clone())),
            Symbol::N(n) => {
                let grammar = self.grammar;
                for alt in &grammar.rules[n].alternatives {
                    if let Some(children) = self.build_seq(alt, pos, end) {
                        return Some(ParseTree::Node {
                            rule: grammar.rules[n].name,
                            children,
                        });
                    }
                }
                None
            }
        }
    }

    fn build_seq(&mut self, symbols: &[Symbol], pos: usize, end: usize) -> Option<Vec<ParseTree>> {
        let Some((first, rest)) = symbols.split_first() else {
            return (pos == end).then(Vec::new);
        };
        let ends: Vec<usize> = match first {
            Symbol::T(t) => self.terminal(t, pos).into_iter().collect(),
            Symbol::N(n) => self.nonterminal(*n, pos).into_iter().map(|(e, _)| e).collect(),
        };
        for mid in ends {
            if mid > end {
                continue;
            }
            if let Some(mut tail) = self.build_seq(rest, mid, end) {
                let head = self.build(first.clone(), pos, mid)?;
                tail.insert(0, head);
                return Some(tail);
            }
        }
        None
    }

    fn failure(&self) -> PlanError {
        let tok = &self.tokens[self.furthest.min(self.tokens.len() - 1)];
        let expected: Vec<String> = self.expected.iter().map(|t| t.to_string()).collect();
        let wants_object = self.expected.contains(&Terminal::Vocab(VocabClass::Object));
        let wants_location = !self.expected.is_empty()
            && self
                .expected
                .iter()
                .all(|t| matches!(t, Terminal::Keyword(k) if k.parse::<Location>().is_ok()));
        let (kind, message) = match &tok.kind {
            TokenKind::Str(s) if wants_object => (
                PlanErrorKind::Vocabulary,
                format!("unknown object '{s}' (known: {})", self.vocab.object_labels().collect::<Vec<_>>().join(", ")),
            ),
            TokenKind::Str(s) if wants_location => (
                PlanErrorKind::Vocabulary,
                format!(
                    "unknown location '{s}' (known: {})",
                    Location::ALL.map(|l| l.as_str()).join(", ")
                ),
            ),
            found => (
                PlanErrorKind::Structural,
                format!("expected {}, found {found}", expected.join(" or ")),
            ),
        };
        PlanError {
            kind,
            line: tok.line,
            column: tok.column,
            offset: tok.offset,
            expected,
            message,
        }
    }
}
