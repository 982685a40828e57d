//! ACDL: a small directive language for access-control configuration.
//!
//! A configuration is an ordered list of blocks. Each block has a selector
//! and an ordered list of directives:
//!
//! ```text
//! # comment
//! default allow
//! location /app/vendor {
//!     deny from all
//!     allow from 10.0.0.0/8
//!     allow user alice
//!     allow group admin
//!     deny method TRACE
//! }
//! files "\.sql$" { deny from all }
//! files "*.bak" { deny from all }
//! root { allow from all }
//! ```
//!
//! Evaluation picks the most specific block whose selector matches the
//! request object, then applies its directives in order; the last matching
//! directive wins. `root` ranks lowest, then `location` blocks by number of
//! path segments, and `files` blocks rank above every `location` block.
//! Blocks of equal rank resolve by textual order, later wins. When no
//! directive applies the `default` policy is returned (ALLOW unless set).
//!
//! A `files` pattern is a regular expression when it starts with `^` or
//! ends with an unescaped `$`; otherwise it is a glob (`*`, `?`). Regular
//! expressions search the whole object path. Globs without a `/` match the
//! file name only; globs with a `/` match the whole path.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reqgen::{Action, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn from_bool(allowed: bool) -> Self {
        if allowed {
            Decision::Allow
        } else {
            Decision::Deny
        }
    }

    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Allow => "ALLOW",
            Decision::Deny => "DENY",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AcdlError {
    #[error("{line}:{col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("{line}:{col}: invalid pattern {pattern:?}: {message}")]
    Pattern {
        line: usize,
        col: usize,
        pattern: String,
        message: String,
    },
}

/// An IPv4 network in CIDR notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cidr {
    addr: Ipv4Addr,
    prefix: u8,
}

impl Cidr {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Option<Self> {
        if prefix > 32 {
            return None;
        }
        let cidr = Cidr { addr, prefix };
        Some(Cidr {
            addr: Ipv4Addr::from(u32::from(addr) & cidr.mask()),
            prefix,
        })
    }

    fn mask(&self) -> u32 {
        if self.prefix == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(self.prefix))
        }
    }

    pub fn network(&self) -> Ipv4Addr {
        self.addr
    }

    pub fn prefix(&self) -> u8 {
        self.prefix
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & self.mask() == u32::from(self.addr)
    }

    /// A host address inside the network, used as a representative.
    pub fn representative(&self) -> Ipv4Addr {
        if self.prefix >= 31 {
            self.addr
        } else {
            Ipv4Addr::from(u32::from(self.addr) + 1)
        }
    }
}

impl FromStr for Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, prefix) = match s.split_once('/') {
            Some((a, p)) => {
                let p: u8 = p
                    .parse()
                    .map_err(|_| format!("invalid prefix length in {s:?}"))?;
                (a, p)
            }
            None => (s, 32),
        };
        let addr: Ipv4Addr = addr
            .parse()
            .map_err(|_| format!("invalid IPv4 address in {s:?}"))?;
        Cidr::new(addr, prefix).ok_or_else(|| format!("prefix length out of range in {s:?}"))
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Match {
    FromIp(Cidr),
    FromAll,
    RequireUser(String),
    RequireGroup(String),
    Method(Action),
}

impl Match {
    pub fn matches(&self, req: &Request) -> bool {
        match self {
            Match::FromAll => true,
            Match::FromIp(cidr) => cidr.contains(req.source_ip),
            Match::RequireUser(name) => req.subject.name() == Some(name.as_str()),
            Match::RequireGroup(group) => req.subject.in_group(group),
            Match::Method(verb) => req.action == *verb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub effect: Decision,
    pub matcher: Match,
}

/// A compiled `files` pattern; keeps its source text for printing and
/// comparison.
#[derive(Debug, Clone)]
pub struct FilePattern {
    source: String,
    regex: Regex,
    mode: PatternMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternMode {
    /// Glob over the file name.
    NameGlob,
    /// Glob over the whole path.
    PathGlob,
    /// Regular expression searched in the whole path.
    Regex,
}

impl FilePattern {
    pub fn compile(source: &str) -> Result<Self, String> {
        let is_regex = source.starts_with('^') || ends_with_unescaped_dollar(source);
        let (mode, regex_src) = if is_regex {
            (PatternMode::Regex, source.to_string())
        } else {
            let mode = if source.contains('/') {
                PatternMode::PathGlob
            } else {
                PatternMode::NameGlob
            };
            (mode, glob_to_regex(source))
        };
        let regex = Regex::new(&regex_src).map_err(|e| e.to_string())?;
        Ok(FilePattern {
            source: source.to_string(),
            regex,
            mode,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn mode(&self) -> PatternMode {
        self.mode
    }

    pub fn matches(&self, path: &str) -> bool {
        match self.mode {
            PatternMode::NameGlob => {
                let name = path.rsplit('/').next().unwrap_or(path);
                self.regex.is_match(name)
            }
            PatternMode::PathGlob | PatternMode::Regex => self.regex.is_match(path),
        }
    }
}

impl PartialEq for FilePattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Eq for FilePattern {}

fn ends_with_unescaped_dollar(s: &str) -> bool {
    if !s.ends_with('$') {
        return false;
    }
    let backslashes = s[..s.len() - 1]
        .chars()
        .rev()
        .take_while(|&c| c == '\\')
        .count();
    backslashes % 2 == 0
}

fn glob_to_regex(glob: &str) -> String {
    let mut out = String::from("^");
    for c in glob.chars() {
        match c {
            '*' => out.push_str("[^/]*"),
            '?' => out.push_str("[^/]"),
            c => out.push_str(&regex::escape(&c.to_string())),
        }
    }
    out.push('$');
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    /// Matches the path itself and everything below it.
    LocationPrefix(String),
    FilesPattern(FilePattern),
    Root,
}

impl Selector {
    pub fn matches(&self, object: &str) -> bool {
        match self {
            Selector::Root => true,
            Selector::LocationPrefix(prefix) => path_has_prefix(object, prefix),
            Selector::FilesPattern(p) => p.matches(object),
        }
    }

    /// Ordering key; larger is more specific.
    fn specificity(&self) -> (u8, usize) {
        match self {
            Selector::Root => (0, 0),
            Selector::LocationPrefix(p) => (1, p.split('/').filter(|s| !s.is_empty()).count()),
            Selector::FilesPattern(_) => (2, 0),
        }
    }
}

/// Segment-aware prefix test: `/vendor` covers `/vendor` and `/vendor/x`
/// but not `/vendorx`.
pub fn path_has_prefix(path: &str, prefix: &str) -> bool {
    let prefix = prefix.trim_end_matches('/');
    if prefix.is_empty() {
        return true;
    }
    match path.strip_prefix(prefix) {
        Some(rest) => rest.is_empty() || rest.starts_with('/'),
        None => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub selector: Selector,
    pub directives: Vec<Directive>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcConfig {
    pub blocks: Vec<Block>,
    pub default_policy: Decision,
}

impl Default for AcConfig {
    fn default() -> Self {
        AcConfig {
            blocks: Vec::new(),
            default_policy: Decision::Allow,
        }
    }
}

impl AcConfig {
    pub fn parse(text: &str) -> Result<Self, AcdlError> {
        parse_config(text)
    }

    /// Every CIDR mentioned by an IP directive, in textual order.
    pub fn cidrs(&self) -> Vec<Cidr> {
        self.blocks
            .iter()
            .flat_map(|b| b.directives.iter())
            .filter_map(|d| match d.matcher {
                Match::FromIp(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    pub fn decide(&self, req: &Request) -> Decision {
        match_directives(self, req)
    }
}

/// Evaluates a configuration against a request. Total and deterministic.
pub fn match_directives(cfg: &AcConfig, req: &Request) -> Decision {
    let mut winner: Option<&Block> = None;
    for block in &cfg.blocks {
        if !block.selector.matches(&req.object) {
            continue;
        }
        // `>=` so that a later block of equal rank replaces an earlier one.
        if winner.is_none_or(|w| block.selector.specificity() >= w.selector.specificity()) {
            winner = Some(block);
        }
    }
    winner
        .and_then(|b| {
            b.directives
                .iter()
                .rev()
                .find(|d| d.matcher.matches(req))
                .map(|d| d.effect)
        })
        .unwrap_or(cfg.default_policy)
}

impl fmt::Display for AcConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let default = match self.default_policy {
            Decision::Allow => "allow",
            Decision::Deny => "deny",
        };
        writeln!(f, "default {default}")?;
        for block in &self.blocks {
            match &block.selector {
                Selector::Root => write!(f, "root {{")?,
                Selector::LocationPrefix(p) => write!(f, "location {p} {{")?,
                Selector::FilesPattern(p) => write!(f, "files {} {{", quote(p.source()))?,
            }
            writeln!(f)?;
            for d in &block.directives {
                let effect = match d.effect {
                    Decision::Allow => "allow",
                    Decision::Deny => "deny",
                };
                match &d.matcher {
                    Match::FromAll => writeln!(f, "    {effect} from all")?,
                    Match::FromIp(c) => writeln!(f, "    {effect} from {c}")?,
                    Match::RequireUser(u) => writeln!(f, "    {effect} user {u}")?,
                    Match::RequireGroup(g) => writeln!(f, "    {effect} group {g}")?,
                    Match::Method(m) => writeln!(f, "    {effect} method {m}")?,
                }
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        if c == '"' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Open,
    Close,
    Semi,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn tokenize(text: &str) -> Result<Vec<Spanned>, AcdlError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            match c {
                c if c.is_whitespace() => i += 1,
                '#' => break,
                '{' | '}' | ';' => {
                    let tok = match c {
                        '{' => Tok::Open,
                        '}' => Tok::Close,
                        _ => Tok::Semi,
                    };
                    out.push(Spanned {
                        tok,
                        line: line_no,
                        col,
                    });
                    i += 1;
                }
                '"' => {
                    // Only `\"` is an escape; other backslashes are kept so
                    // regular expressions can be written verbatim.
                    let mut s = String::new();
                    i += 1;
                    let mut closed = false;
                    while i < chars.len() {
                        match chars[i] {
                            '\\' if chars.get(i + 1) == Some(&'"') => {
                                s.push('"');
                                i += 2;
                            }
                            '"' => {
                                closed = true;
                                i += 1;
                                break;
                            }
                            ch => {
                                s.push(ch);
                                i += 1;
                            }
                        }
                    }
                    if !closed {
                        return Err(AcdlError::Syntax {
                            line: line_no,
                            col,
                            message: "unterminated string".into(),
                        });
                    }
                    out.push(Spanned {
                        tok: Tok::Quoted(s),
                        line: line_no,
                        col,
                    });
                }
                _ => {
                    let start = i;
                    while i < chars.len()
                        && !chars[i].is_whitespace()
                        && !matches!(chars[i], '{' | '}' | ';' | '#' | '"')
                    {
                        i += 1;
                    }
                    out.push(Spanned {
                        tok: Tok::Word(chars[start..i].iter().collect()),
                        line: line_no,
                        col,
                    });
                }
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err_at(&self, t: Option<&Spanned>, message: impl Into<String>) -> AcdlError {
        let (line, col) = t.map_or(self.eof, |t| (t.line, t.col));
        AcdlError::Syntax {
            line,
            col,
            message: message.into(),
        }
    }

    fn word(&mut self, what: &str) -> Result<(String, usize, usize), AcdlError> {
        match self.next() {
            Some(Spanned {
                tok: Tok::Word(w),
                line,
                col,
            }) => Ok((w, line, col)),
            other => Err(self.err_at(other.as_ref(), format!("expected {what}"))),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), AcdlError> {
        match self.next() {
            Some(t) if t.tok == tok => Ok(()),
            other => Err(self.err_at(other.as_ref(), format!("expected {what}"))),
        }
    }

    fn skip_semis(&mut self) {
        while matches!(self.peek(), Some(Spanned { tok: Tok::Semi, .. })) {
            self.pos += 1;
        }
    }
}

pub fn parse_config(text: &str) -> Result<AcConfig, AcdlError> {
    let toks = tokenize(text)?;
    let last_line = text.lines().count().max(1);
    let last_col = text.lines().last().map_or(1, |l| l.chars().count() + 1);
    let mut p = Parser {
        toks,
        pos: 0,
        eof: (last_line, last_col),
    };
    let mut cfg = AcConfig::default();
    loop {
        p.skip_semis();
        let Some(t) = p.next() else { break };
        let Tok::Word(kw) = &t.tok else {
            return Err(p.err_at(Some(&t), "expected `default`, `location`, `files` or `root`"));
        };
        match kw.as_str() {
            "default" => {
                let (w, line, col) = p.word("`allow` or `deny`")?;
                cfg.default_policy = parse_effect(&w).ok_or(AcdlError::Syntax {
                    line,
                    col,
                    message: format!("expected `allow` or `deny`, found {w:?}"),
                })?;
            }
            "root" => {
                p.expect(Tok::Open, "`{`")?;
                let directives = parse_directives(&mut p)?;
                cfg.blocks.push(Block {
                    selector: Selector::Root,
                    directives,
                });
            }
            "location" => {
                let (path, line, col) = match p.next() {
                    Some(Spanned {
                        tok: Tok::Word(w) | Tok::Quoted(w),
                        line,
                        col,
                    }) => (w, line, col),
                    other => return Err(p.err_at(other.as_ref(), "expected location path")),
                };
                if !path.starts_with('/') {
                    return Err(AcdlError::Syntax {
                        line,
                        col,
                        message: format!("location path must start with `/`: {path:?}"),
                    });
                }
                let path = crate::datastate::normalize_path(&path).map_err(|e| {
                    AcdlError::Syntax {
                        line,
                        col,
                        message: e.to_string(),
                    }
                })?;
                p.expect(Tok::Open, "`{`")?;
                let directives = parse_directives(&mut p)?;
                cfg.blocks.push(Block {
                    selector: Selector::LocationPrefix(path),
                    directives,
                });
            }
            "files" => {
                let (src, line, col) = match p.next() {
                    Some(Spanned {
                        tok: Tok::Word(w) | Tok::Quoted(w),
                        line,
                        col,
                    }) => (w, line, col),
                    other => return Err(p.err_at(other.as_ref(), "expected file pattern")),
                };
                let pattern = FilePattern::compile(&src).map_err(|message| AcdlError::Pattern {
                    line,
                    col,
                    pattern: src.clone(),
                    message,
                })?;
                p.expect(Tok::Open, "`{`")?;
                let directives = parse_directives(&mut p)?;
                cfg.blocks.push(Block {
                    selector: Selector::FilesPattern(pattern),
                    directives,
                });
            }
            other => {
                return Err(p.err_at(
                    Some(&t),
                    format!("unknown keyword {other:?}; expected `default`, `location`, `files` or `root`"),
                ))
            }
        }
    }
    Ok(cfg)
}

fn parse_effect(w: &str) -> Option<Decision> {
    match w {
        "allow" => Some(Decision::Allow),
        "deny" => Some(Decision::Deny),
        _ => None,
    }
}

fn parse_directives(p: &mut Parser) -> Result<Vec<Directive>, AcdlError> {
    let mut out = Vec::new();
    loop {
        p.skip_semis();
        let t = p.next();
        let (effect_word, line, col) = match t {
            Some(Spanned { tok: Tok::Close, .. }) => return Ok(out),
            Some(Spanned {
                tok: Tok::Word(ref w),
                line,
                col,
            }) => (w.clone(), line, col),
            other => return Err(p.err_at(other.as_ref(), "expected directive or `}`")),
        };
        let effect = parse_effect(&effect_word).ok_or(AcdlError::Syntax {
            line,
            col,
            message: format!("expected `allow` or `deny`, found {effect_word:?}"),
        })?;
        let (kind, kline, kcol) = p.word("`from`, `user`, `group` or `method`")?;
        let (arg, aline, acol) = p.word("directive argument")?;
        let syntax = |message: String| AcdlError::Syntax {
            line: aline,
            col: acol,
            message,
        };
        let matcher = match kind.as_str() {
            "from" if arg == "all" => Match::FromAll,
            "from" => Match::FromIp(arg.parse().map_err(syntax)?),
            "user" => Match::RequireUser(arg),
            "group" => Match::RequireGroup(arg),
            "method" => Match::Method(
                arg.parse()
                    .map_err(|_| syntax(format!("unknown method {arg:?}")))?,
            ),
            other => {
                return Err(AcdlError::Syntax {
                    line: kline,
                    col: kcol,
                    message: format!("unknown directive kind {other:?}"),
                })
            }
        };
        out.push(Directive { effect, matcher });
    }
}
