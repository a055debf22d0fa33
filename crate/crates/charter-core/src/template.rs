//! The chart template language: `{{ }}` actions with trim markers, field
//! chains, pipelines, define/with/if/range blocks and a small built-in
//! function set (printf, b64enc, b64dec, quote, upper, lower, default,
//! indent, nindent, include).

use base64::Engine;
use serde_yaml::Value;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template syntax error in {file} line {line}: {message}")]
    TemplateSyntax {
        file: String,
        line: usize,
        message: String,
    },
    #[error("duplicate define `{name}` in {first_file} and {second_file}")]
    DuplicateDefine {
        name: String,
        first_file: String,
        second_file: String,
    },
    #[error("no template at path `{0}`")]
    MissingPath(String),
    #[error("field not found: .{path}")]
    FieldNotFound { path: String },
    #[error("function `{function}`: {message}")]
    FunctionError { function: String, message: String },
    #[error("render of `{path}` failed: {source}")]
    RenderFailed {
        path: String,
        #[source]
        source: Box<TemplateError>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Str(String),
    Int(i64),
    Bool(bool),
    /// Field chain rooted at dot; empty chain is dot itself.
    Field(Vec<String>),
    Call { name: String, args: Vec<Expr> },
    Pipeline(Vec<Expr>),
}

#[derive(Debug, Clone)]
enum Node {
    Text(String),
    Output(Expr),
    If {
        cond: Expr,
        then: Vec<Node>,
        otherwise: Vec<Node>,
    },
    With {
        expr: Expr,
        body: Vec<Node>,
    },
    Range {
        expr: Expr,
        body: Vec<Node>,
    },
}

/// Parsed templates plus the registry of named definitions.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    files: BTreeMap<String, Vec<Node>>,
    defines: BTreeMap<String, Vec<Node>>,
    define_origin: BTreeMap<String, String>,
    library_paths: BTreeSet<String>,
}

/// Values and metadata exposed to templates as `.Values`, `.Chart`,
/// `.Release`.
#[derive(Debug, Clone)]
pub struct RenderContext {
    pub values: Value,
    pub chart_name: String,
    pub chart_version: String,
    pub release_name: String,
    pub release_namespace: String,
    /// When set, a missing field is an error instead of an empty render.
    pub strict: bool,
}

impl Default for RenderContext {
    fn default() -> Self {
        RenderContext {
            values: Value::Null,
            chart_name: String::new(),
            chart_version: String::new(),
            release_name: String::new(),
            release_namespace: String::new(),
            strict: false,
        }
    }
}

impl RenderContext {
    fn root(&self) -> Value {
        let mut map = serde_yaml::Mapping::new();
        map.insert(Value::from("Values"), self.values.clone());
        let mut chart = serde_yaml::Mapping::new();
        chart.insert(Value::from("Name"), Value::from(self.chart_name.clone()));
        chart.insert(
            Value::from("Version"),
            Value::from(self.chart_version.clone()),
        );
        map.insert(Value::from("Chart"), Value::Mapping(chart));
        let mut release = serde_yaml::Mapping::new();
        release.insert(Value::from("Name"), Value::from(self.release_name.clone()));
        release.insert(
            Value::from("Namespace"),
            Value::from(self.release_namespace.clone()),
        );
        map.insert(Value::from("Release"), Value::Mapping(release));
        Value::Mapping(map)
    }
}

// ---------------------------------------------------------------------------
// Lexing: split source into text and action pieces, applying trim markers.

struct Piece {
    text: Option<String>,
    action: Option<(String, usize)>, // content, line
}

/// Find the byte offset of the closing `}}`, skipping over string literals
/// so a quoted `}}` inside an action does not end it early.
fn find_action_end(s: &str) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut i = 0;
    let mut in_str = false;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => in_str = !in_str,
            b'\\' if in_str => i += 1, // skip the escaped byte
            b'}' if !in_str && bytes.get(i + 1) == Some(&b'}') => return Some(i),
            _ => {}
        }
        i += 1;
    }
    None
}

fn lex(file: &str, src: &str) -> Result<Vec<Piece>, TemplateError> {
    let mut pieces: Vec<Piece> = Vec::new();
    let mut rest = src;
    let mut offset = 0usize;
    let line_of = |off: usize| src[..off].matches('\n').count() + 1;

    while let Some(start) = rest.find("{{") {
        let mut text = rest[..start].to_string();
        let after = &rest[start + 2..];
        let (trim_left, after) = match after.strip_prefix('-') {
            Some(r) if r.starts_with(|c: char| c.is_whitespace()) => (true, r),
            _ => (false, after),
        };
        let close = find_action_end(after).ok_or_else(|| TemplateError::TemplateSyntax {
            file: file.to_string(),
            line: line_of(offset + start),
            message: "unclosed action: missing `}}`".into(),
        })?;
        let mut content = &after[..close];
        let mut trim_right = false;
        if let Some(c) = content.strip_suffix('-') {
            if c.ends_with(|ch: char| ch.is_whitespace()) {
                content = c;
                trim_right = true;
            }
        }
        if trim_left {
            text.truncate(text.trim_end().len());
        }
        pieces.push(Piece {
            text: Some(text),
            action: None,
        });
        pieces.push(Piece {
            text: None,
            action: Some((content.trim().to_string(), line_of(offset + start))),
        });
        let consumed = start + 2 + (after.as_ptr() as usize - rest[start + 2..].as_ptr() as usize)
            + close
            + 2;
        offset += consumed;
        rest = &rest[consumed..];
        if trim_right {
            let trimmed = rest.trim_start();
            offset += rest.len() - trimmed.len();
            rest = trimmed;
        }
    }
    pieces.push(Piece {
        text: Some(rest.to_string()),
        action: None,
    });
    Ok(pieces)
}

// ---------------------------------------------------------------------------
// Expression tokenizer and parser.

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Str(String),
    Int(i64),
    Ident(String),
    Field(Vec<String>),
    Pipe,
    LParen,
    RParen,
}

fn tokenize(file: &str, line: usize, s: &str) -> Result<Vec<Tok>, TemplateError> {
    let syntax = |message: String| TemplateError::TemplateSyntax {
        file: file.to_string(),
        line,
        message,
    };
    let mut toks = Vec::new();
    let chars: Vec<char> = s.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '|' => {
                toks.push(Tok::Pipe);
                i += 1;
            }
            '(' => {
                toks.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1;
            }
            '"' => {
                let mut out = String::new();
                i += 1;
                loop {
                    if i >= chars.len() {
                        return Err(syntax("unterminated string literal".into()));
                    }
                    match chars[i] {
                        '"' => {
                            i += 1;
                            break;
                        }
                        '\\' => {
                            i += 1;
                            let esc = *chars.get(i).ok_or_else(|| {
                                syntax("unterminated escape in string literal".into())
                            })?;
                            out.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                'r' => '\r',
                                '"' => '"',
                                '\\' => '\\',
                                other => {
                                    return Err(syntax(format!("unknown escape `\\{other}`")))
                                }
                            });
                            i += 1;
                        }
                        ch => {
                            out.push(ch);
                            i += 1;
                        }
                    }
                }
                toks.push(Tok::Str(out));
            }
            '.' => {
                let mut fields = Vec::new();
                while i < chars.len() && chars[i] == '.' {
                    i += 1;
                    let start = i;
                    while i < chars.len()
                        && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '-')
                    {
                        i += 1;
                    }
                    if i > start {
                        fields.push(chars[start..i].iter().collect());
                    } else {
                        break;
                    }
                }
                toks.push(Tok::Field(fields));
            }
            '-' | '0'..='9' => {
                let start = i;
                if c == '-' {
                    i += 1;
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let n = text
                    .parse::<i64>()
                    .map_err(|_| syntax(format!("bad integer literal `{text}`")))?;
                toks.push(Tok::Int(n));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push(Tok::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(syntax(format!("unexpected character `{other}`"))),
        }
    }
    Ok(toks)
}

struct ExprParser<'a> {
    toks: &'a [Tok],
    pos: usize,
    file: &'a str,
    line: usize,
}

impl<'a> ExprParser<'a> {
    fn syntax(&self, message: String) -> TemplateError {
        TemplateError::TemplateSyntax {
            file: self.file.to_string(),
            line: self.line,
            message,
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn pipeline(&mut self) -> Result<Expr, TemplateError> {
        let mut stages = vec![self.command(true)?];
        while matches!(self.peek(), Some(Tok::Pipe)) {
            self.pos += 1;
            let stage = self.command(false)?;
            match &stage {
                Expr::Call { .. } => {}
                _ => return Err(self.syntax("pipeline stage must be a function call".into())),
            }
            stages.push(stage);
        }
        if stages.len() == 1 {
            Ok(stages.pop().unwrap())
        } else {
            Ok(Expr::Pipeline(stages))
        }
    }

    // A command is `ident arg*` or a single operand. `head` distinguishes
    // the first stage, where a lone operand is legal.
    fn command(&mut self, head: bool) -> Result<Expr, TemplateError> {
        if let Some(Tok::Ident(name)) = self.peek() {
            let name = name.clone();
            self.pos += 1;
            match name.as_str() {
                "true" => return Ok(Expr::Bool(true)),
                "false" => return Ok(Expr::Bool(false)),
                _ => {}
            }
            let mut args = Vec::new();
            while let Some(arg) = self.try_operand()? {
                args.push(arg);
            }
            return Ok(Expr::Call { name, args });
        }
        match self.try_operand()? {
            Some(e) => {
                if head && self.try_operand_lookahead() {
                    return Err(self.syntax("operand cannot take arguments".into()));
                }
                Ok(e)
            }
            None => Err(self.syntax("expected expression".into())),
        }
    }

    fn try_operand_lookahead(&self) -> bool {
        matches!(
            self.peek(),
            Some(Tok::Str(_)) | Some(Tok::Int(_)) | Some(Tok::Field(_)) | Some(Tok::LParen)
        )
    }

    fn try_operand(&mut self) -> Result<Option<Expr>, TemplateError> {
        match self.peek().cloned() {
            Some(Tok::Str(s)) => {
                self.pos += 1;
                Ok(Some(Expr::Str(s)))
            }
            Some(Tok::Int(n)) => {
                self.pos += 1;
                Ok(Some(Expr::Int(n)))
            }
            Some(Tok::Field(f)) => {
                self.pos += 1;
                Ok(Some(Expr::Field(f)))
            }
            Some(Tok::Ident(w)) if w == "true" || w == "false" => {
                self.pos += 1;
                Ok(Some(Expr::Bool(w == "true")))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.pipeline()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(Some(inner))
                    }
                    _ => Err(self.syntax("missing `)`".into())),
                }
            }
            _ => Ok(None),
        }
    }
}

fn parse_expr(file: &str, line: usize, src: &str) -> Result<Expr, TemplateError> {
    let toks = tokenize(file, line, src)?;
    let mut p = ExprParser {
        toks: &toks,
        pos: 0,
        file,
        line,
    };
    let expr = p.pipeline()?;
    if p.pos != toks.len() {
        return Err(p.syntax("trailing tokens after expression".into()));
    }
    Ok(expr)
}

// ---------------------------------------------------------------------------
// Block structure parser.

enum Frame {
    Root(Vec<Node>),
    Define {
        name: String,
        line: usize,
        nodes: Vec<Node>,
    },
    If {
        cond: Expr,
        then: Vec<Node>,
        otherwise: Vec<Node>,
        in_else: bool,
    },
    With {
        expr: Expr,
        nodes: Vec<Node>,
    },
    Range {
        expr: Expr,
        nodes: Vec<Node>,
    },
}

impl Frame {
    fn push(&mut self, node: Node) {
        match self {
            Frame::Root(nodes)
            | Frame::Define { nodes, .. }
            | Frame::With { nodes, .. }
            | Frame::Range { nodes, .. } => nodes.push(node),
            Frame::If {
                then,
                otherwise,
                in_else,
                ..
            } => {
                if *in_else {
                    otherwise.push(node)
                } else {
                    then.push(node)
                }
            }
        }
    }
}

struct FileParse {
    body: Vec<Node>,
    defines: Vec<(String, usize, Vec<Node>)>,
}

fn parse_file(file: &str, src: &str, prefix: Option<&str>) -> Result<FileParse, TemplateError> {
    let pieces = lex(file, src)?;
    let mut stack = vec![Frame::Root(Vec::new())];
    let mut defines = Vec::new();
    let syntax = |line: usize, message: String| TemplateError::TemplateSyntax {
        file: file.to_string(),
        line,
        message,
    };

    for piece in pieces {
        if let Some(text) = piece.text {
            if !text.is_empty() {
                stack.last_mut().unwrap().push(Node::Text(text));
            }
            continue;
        }
        let (content, line) = piece.action.unwrap();
        if content.is_empty() {
            continue; // comment-like empty action
        }
        let (word, rest) = match content.split_once(char::is_whitespace) {
            Some((w, r)) => (w, r.trim()),
            None => (content.as_str(), ""),
        };
        match word {
            "define" => {
                let toks = tokenize(file, line, rest)?;
                let name = match toks.as_slice() {
                    [Tok::Str(s)] => s.clone(),
                    _ => return Err(syntax(line, "define needs a quoted name".into())),
                };
                let name = match prefix {
                    Some(p) => format!("{p}.{name}"),
                    None => name,
                };
                stack.push(Frame::Define {
                    name,
                    line,
                    nodes: Vec::new(),
                });
            }
            "if" => {
                let cond = parse_expr(file, line, rest)?;
                stack.push(Frame::If {
                    cond,
                    then: Vec::new(),
                    otherwise: Vec::new(),
                    in_else: false,
                });
            }
            "with" => {
                let expr = parse_expr(file, line, rest)?;
                stack.push(Frame::With {
                    expr,
                    nodes: Vec::new(),
                });
            }
            "range" => {
                let expr = parse_expr(file, line, rest)?;
                stack.push(Frame::Range {
                    expr,
                    nodes: Vec::new(),
                });
            }
            "else" => match stack.last_mut() {
                Some(Frame::If { in_else, .. }) if !*in_else => *in_else = true,
                _ => return Err(syntax(line, "`else` outside `if`".into())),
            },
            "end" => {
                if !rest.is_empty() {
                    return Err(syntax(line, "`end` takes no arguments".into()));
                }
                let frame = stack.pop().unwrap();
                match frame {
                    Frame::Root(_) => return Err(syntax(line, "unmatched `end`".into())),
                    Frame::Define { name, line, nodes } => defines.push((name, line, nodes)),
                    Frame::If {
                        cond,
                        then,
                        otherwise,
                        ..
                    } => stack.last_mut().unwrap().push(Node::If {
                        cond,
                        then,
                        otherwise,
                    }),
                    Frame::With { expr, nodes } => stack
                        .last_mut()
                        .unwrap()
                        .push(Node::With { expr, body: nodes }),
                    Frame::Range { expr, nodes } => stack
                        .last_mut()
                        .unwrap()
                        .push(Node::Range { expr, body: nodes }),
                }
            }
            "template" | "include" => {
                // `template "name" arg` and `include "name" arg` are the
                // same operation.
                let expr = parse_expr(file, line, &format!("include {rest}"))?;
                stack.last_mut().unwrap().push(Node::Output(expr));
            }
            _ => {
                let expr = parse_expr(file, line, &content)?;
                stack.last_mut().unwrap().push(Node::Output(expr));
            }
        }
    }

    match stack.pop().unwrap() {
        Frame::Root(body) if stack.is_empty() => Ok(FileParse { body, defines }),
        Frame::Define { line, .. } => Err(syntax(line, "unclosed `define`".into())),
        Frame::If { .. } => Err(syntax(0, "unclosed `if` (missing `end`)".into())),
        Frame::With { .. } => Err(syntax(0, "unclosed `with` (missing `end`)".into())),
        Frame::Range { .. } => Err(syntax(0, "unclosed `range` (missing `end`)".into())),
        Frame::Root(_) => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// TemplateSet construction.

/// Parse a chart's own template files into a set.
pub fn parse_templates(
    files: &BTreeMap<String, String>,
) -> Result<TemplateSet, TemplateError> {
    let mut set = TemplateSet::default();
    set.add_files(files, None)?;
    Ok(set)
}

impl TemplateSet {
    /// Add a library chart's files: their defines are registered under
    /// `<prefix>.` and their file bodies never render as chart output.
    pub fn add_library(
        &mut self,
        prefix: &str,
        files: &BTreeMap<String, String>,
    ) -> Result<(), TemplateError> {
        self.add_files(files, Some(prefix))
    }

    fn add_files(
        &mut self,
        files: &BTreeMap<String, String>,
        prefix: Option<&str>,
    ) -> Result<(), TemplateError> {
        for (path, src) in files {
            let parsed = parse_file(path, src, prefix)?;
            for (name, _line, nodes) in parsed.defines {
                if let Some(first) = self.define_origin.get(&name) {
                    return Err(TemplateError::DuplicateDefine {
                        name,
                        first_file: first.clone(),
                        second_file: path.clone(),
                    });
                }
                self.define_origin.insert(name.clone(), path.clone());
                self.defines.insert(name, nodes);
            }
            let stored_path = match prefix {
                Some(p) => format!("charts/{p}/{path}"),
                None => path.clone(),
            };
            if prefix.is_some() {
                self.library_paths.insert(stored_path.clone());
            }
            self.files.insert(stored_path, parsed.body);
        }
        Ok(())
    }

    pub fn has_define(&self, name: &str) -> bool {
        self.defines.contains_key(name)
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.files.keys()
    }
}

// ---------------------------------------------------------------------------
// Rendering.

struct Renderer<'a> {
    set: &'a TemplateSet,
    strict: bool,
    warnings: Vec<String>,
}

fn truthy(v: &Value) -> bool {
    match v {
        Value::Null => false,
        Value::Bool(b) => *b,
        Value::Number(n) => n.as_f64().map(|f| f != 0.0).unwrap_or(true),
        Value::String(s) => !s.is_empty(),
        Value::Sequence(s) => !s.is_empty(),
        Value::Mapping(m) => !m.is_empty(),
        Value::Tagged(t) => truthy(&t.value),
    }
}

fn value_to_string(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        other => serde_json::to_string(&other).unwrap_or_default(),
    }
}

fn quote_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            other => out.push(other),
        }
    }
    out.push('"');
    out
}

impl<'a> Renderer<'a> {
    fn func_err(&self, function: &str, message: String) -> TemplateError {
        TemplateError::FunctionError {
            function: function.to_string(),
            message,
        }
    }

    fn eval_field(&mut self, chain: &[String], dot: &Value) -> Result<Value, TemplateError> {
        let mut cur = dot.clone();
        for (i, key) in chain.iter().enumerate() {
            match cur.get(key.as_str()) {
                Some(next) => cur = next.clone(),
                None => {
                    let path = chain[..=i].join(".");
                    if self.strict {
                        return Err(TemplateError::FieldNotFound { path });
                    }
                    self.warnings.push(format!("missing field .{path}"));
                    return Ok(Value::Null);
                }
            }
        }
        Ok(cur)
    }

    // Condition evaluation stays lenient even in strict mode so that
    // `with`/`if` can guard optional values.
    fn eval_cond(&mut self, expr: &Expr, dot: &Value) -> Result<Value, TemplateError> {
        let strict = std::mem::replace(&mut self.strict, false);
        let result = self.eval(expr, dot);
        self.strict = strict;
        result
    }

    fn eval(&mut self, expr: &Expr, dot: &Value) -> Result<Value, TemplateError> {
        match expr {
            Expr::Str(s) => Ok(Value::String(s.clone())),
            Expr::Int(n) => Ok(Value::Number((*n).into())),
            Expr::Bool(b) => Ok(Value::Bool(*b)),
            Expr::Field(chain) => self.eval_field(chain, dot),
            Expr::Call { name, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a, dot)?);
                }
                self.call(name, vals)
            }
            Expr::Pipeline(stages) => {
                let mut acc = self.eval(&stages[0], dot)?;
                for stage in &stages[1..] {
                    let Expr::Call { name, args } = stage else {
                        unreachable!("parser enforces call stages");
                    };
                    let mut vals = Vec::with_capacity(args.len() + 1);
                    for a in args {
                        vals.push(self.eval(a, dot)?);
                    }
                    vals.push(acc);
                    acc = self.call(name, vals)?;
                }
                Ok(acc)
            }
        }
    }

    fn call(&mut self, name: &str, args: Vec<Value>) -> Result<Value, TemplateError> {
        match name {
            "printf" => self.printf(args),
            "b64enc" => {
                let s = self.one_arg("b64enc", args)?;
                Ok(Value::String(
                    base64::engine::general_purpose::STANDARD.encode(value_to_string(&s)),
                ))
            }
            "b64dec" => {
                let s = self.one_arg("b64dec", args)?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(value_to_string(&s))
                    .map_err(|e| self.func_err("b64dec", e.to_string()))?;
                let text = String::from_utf8(bytes)
                    .map_err(|_| self.func_err("b64dec", "decoded bytes are not UTF-8".into()))?;
                Ok(Value::String(text))
            }
            "quote" => {
                let s = self.one_arg("quote", args)?;
                Ok(Value::String(quote_string(&value_to_string(&s))))
            }
            "upper" => {
                let s = self.one_arg("upper", args)?;
                Ok(Value::String(value_to_string(&s).to_uppercase()))
            }
            "lower" => {
                let s = self.one_arg("lower", args)?;
                Ok(Value::String(value_to_string(&s).to_lowercase()))
            }
            "default" => {
                if args.len() != 2 {
                    return Err(self.func_err("default", "expects 2 arguments".into()));
                }
                let [fallback, value]: [Value; 2] = args.try_into().unwrap();
                Ok(if truthy(&value) { value } else { fallback })
            }
            "indent" | "nindent" => {
                if args.len() != 2 {
                    return Err(self.func_err(name, "expects 2 arguments".into()));
                }
                let width = args[0]
                    .as_i64()
                    .ok_or_else(|| self.func_err(name, "width must be an integer".into()))?;
                let pad = " ".repeat(width.max(0) as usize);
                let text = value_to_string(&args[1]);
                let indented = text
                    .split('\n')
                    .map(|l| if l.is_empty() { l.to_string() } else { format!("{pad}{l}") })
                    .collect::<Vec<_>>()
                    .join("\n");
                Ok(Value::String(if name == "nindent" {
                    format!("\n{indented}")
                } else {
                    indented
                }))
            }
            "include" => {
                if args.is_empty() || args.len() > 2 {
                    return Err(self.func_err("include", "expects a name and optional argument".into()));
                }
                let def_name = value_to_string(&args[0]);
                let arg = args.get(1).cloned().unwrap_or(Value::Null);
                let nodes = self
                    .set
                    .defines
                    .get(&def_name)
                    .ok_or_else(|| self.func_err("include", format!("no define `{def_name}`")))?
                    .clone();
                let mut out = String::new();
                self.render_nodes(&nodes, &arg, &mut out)?;
                Ok(Value::String(out))
            }
            other => Err(self.func_err(other, "unknown function".into())),
        }
    }

    fn one_arg(&self, name: &str, mut args: Vec<Value>) -> Result<Value, TemplateError> {
        if args.len() != 1 {
            return Err(self.func_err(name, "expects 1 argument".into()));
        }
        Ok(args.pop().unwrap())
    }

    fn printf(&self, args: Vec<Value>) -> Result<Value, TemplateError> {
        let err = |m: String| self.func_err("printf", m);
        let mut it = args.into_iter();
        let fmt = value_to_string(&it.next().ok_or_else(|| err("missing format string".into()))?);
        let mut out = String::new();
        let mut chars = fmt.chars().peekable();
        while let Some(c) = chars.next() {
            if c != '%' {
                out.push(c);
                continue;
            }
            match chars.next() {
                Some('%') => out.push('%'),
                Some('s') => {
                    let v = it.next().ok_or_else(|| err("too few arguments for %s".into()))?;
                    out.push_str(&value_to_string(&v));
                }
                Some('d') => {
                    let v = it.next().ok_or_else(|| err("too few arguments for %d".into()))?;
                    let n = v
                        .as_i64()
                        .ok_or_else(|| err(format!("%d needs an integer, got `{}`", value_to_string(&v))))?;
                    out.push_str(&n.to_string());
                }
                Some('q') => {
                    let v = it.next().ok_or_else(|| err("too few arguments for %q".into()))?;
                    out.push_str(&quote_string(&value_to_string(&v)));
                }
                Some(other) => return Err(err(format!("unsupported verb %{other}"))),
                None => return Err(err("dangling `%` at end of format".into())),
            }
        }
        if it.next().is_some() {
            return Err(err("too many arguments for format".into()));
        }
        Ok(Value::String(out))
    }

    fn render_nodes(
        &mut self,
        nodes: &[Node],
        dot: &Value,
        out: &mut String,
    ) -> Result<(), TemplateError> {
        for node in nodes {
            match node {
                Node::Text(t) => out.push_str(t),
                Node::Output(expr) => {
                    let v = self.eval(expr, dot)?;
                    out.push_str(&value_to_string(&v));
                }
                Node::If {
                    cond,
                    then,
                    otherwise,
                } => {
                    let v = self.eval_cond(cond, dot)?;
                    if truthy(&v) {
                        self.render_nodes(then, dot, out)?;
                    } else {
                        self.render_nodes(otherwise, dot, out)?;
                    }
                }
                Node::With { expr, body } => {
                    let v = self.eval_cond(expr, dot)?;
                    if truthy(&v) {
                        self.render_nodes(body, &v, out)?;
                    }
                }
                Node::Range { expr, body } => {
                    let v = self.eval_cond(expr, dot)?;
                    match v {
                        Value::Sequence(items) => {
                            for item in items {
                                self.render_nodes(body, &item, out)?;
                            }
                        }
                        Value::Mapping(map) => {
                            for (_, item) in map {
                                self.render_nodes(body, &item, out)?;
                            }
                        }
                        Value::Null => {}
                        other => {
                            return Err(self.func_err(
                                "range",
                                format!("cannot iterate over `{}`", value_to_string(&other)),
                            ))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Render one template file against a context.
pub fn render(
    set: &TemplateSet,
    path: &str,
    ctx: &RenderContext,
) -> Result<String, TemplateError> {
    let nodes = set
        .files
        .get(path)
        .ok_or_else(|| TemplateError::MissingPath(path.to_string()))?;
    let mut renderer = Renderer {
        set,
        strict: ctx.strict,
        warnings: Vec::new(),
    };
    let mut out = String::new();
    renderer.render_nodes(nodes, &ctx.root(), &mut out)?;
    Ok(out)
}

fn is_partial(path: &str) -> bool {
    path.rsplit('/')
        .next()
        .map(|base| base.starts_with('_'))
        .unwrap_or(false)
}

/// Render every concrete template in the set: partials (`_*`) and library
/// chart files are excluded, whitespace-only outputs are dropped.
pub fn render_chart_templates(
    set: &TemplateSet,
    ctx: &RenderContext,
) -> Result<BTreeMap<String, String>, TemplateError> {
    let mut out = BTreeMap::new();
    for path in set.files.keys() {
        if is_partial(path) || set.library_paths.contains(path) {
            continue;
        }
        let text = render(set, path, ctx).map_err(|e| TemplateError::RenderFailed {
            path: path.clone(),
            source: Box::new(e),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        out.insert(path.clone(), text);
    }
    Ok(out)
}
