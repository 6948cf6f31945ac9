//! LaTeX token vocabularies and the implicit-character stream.
//!
//! Ground truth is whitespace-tokenized. The implicit stream keeps the
//! structural tokens `^ _ { }` at their positions and turns every other
//! symbol into `<space>`, so it is index-aligned with the LaTeX sequence.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

pub const IMPLICIT_SPACE: &str = "<space>";
/// Tokens kept verbatim in the implicit stream.
pub const IMPLICIT_CHARS: [&str; 4] = ["^", "_", "{", "}"];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("unknown token `{symbol}` at position {position}")]
    UnknownToken { symbol: String, position: usize },
    #[error("vocabulary line {line}: duplicate symbol `{symbol}`")]
    Duplicate { symbol: String, line: usize },
    #[error("vocabulary line {line}: `{symbol}` is reserved")]
    Reserved { symbol: String, line: usize },
    #[error("token id {0} outside the vocabulary")]
    BadId(usize),
    #[error("reading vocabulary: {0}")]
    Io(String),
}

/// Split a whitespace-tokenized label.
pub fn tokenize(latex: &str) -> Vec<String> {
    latex.split_whitespace().map(str::to_owned).collect()
}

pub fn is_implicit(symbol: &str) -> bool {
    IMPLICIT_CHARS.contains(&symbol)
}

/// The implicit-character sequence of a token sequence (same length).
pub fn build_implicit<S: AsRef<str>>(tokens: &[S]) -> Vec<&'static str> {
    tokens
        .iter()
        .map(|t| {
            IMPLICIT_CHARS
                .iter()
                .find(|&&c| c == t.as_ref())
                .copied()
                .unwrap_or(IMPLICIT_SPACE)
        })
        .collect()
}

/// Decoding order of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub fn opposite(self) -> Self {
        match self {
            Direction::L2R => Direction::R2L,
            Direction::R2L => Direction::L2R,
        }
    }

    /// Marker fed as the first decoder input. The right-to-left stream starts
    /// from the end marker so one parameter set can serve both orders.
    pub fn start_id(self) -> usize {
        match self {
            Direction::L2R => SOS,
            Direction::R2L => EOS,
        }
    }

    /// Marker that terminates a sequence in this direction.
    pub fn end_id(self) -> usize {
        match self {
            Direction::L2R => EOS,
            Direction::R2L => SOS,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        })
    }
}

/// Ids framed as `SOS content.. EOS`; `content` is stored in decoding order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub direction: Direction,
}

impl TokenSeq {
    pub fn content(&self) -> &[usize] {
        let mut s = self.ids.as_slice();
        if s.first() == Some(&SOS) {
            s = &s[1..];
        }
        if let Some(end) = s.iter().position(|&i| i == EOS || i == PAD) {
            s = &s[..end];
        }
        s
    }

    /// Ids as fed to the model: the frame markers of a right-to-left
    /// sequence are swapped (see [`Direction::start_id`]).
    pub fn wire_ids(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.content().len() + 2);
        out.push(self.direction.start_id());
        out.extend_from_slice(self.content());
        out.push(self.direction.end_id());
        out
    }
}

/// Content ids framed in both decoding orders.
pub fn make_bidirectional(content: &[usize]) -> (TokenSeq, TokenSeq) {
    let frame = |body: Vec<usize>, direction| {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(SOS);
        ids.extend(body);
        ids.push(EOS);
        TokenSeq { ids, direction }
    };
    let l2r = frame(content.to_vec(), Direction::L2R);
    let r2l = frame(content.iter().rev().copied().collect(), Direction::R2L);
    (l2r, r2l)
}

/// Symbol table with the reserved ids `<pad>=0 <sos>=1 <eos>=2` in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self, VocabError> {
        let mut v = Vocab { symbols: Vec::new(), index: HashMap::new() };
        for r in RESERVED {
            v.push(r);
        }
        for (line, s) in symbols.iter().enumerate() {
            let s = s.as_ref();
            if RESERVED.contains(&s) {
                return Err(VocabError::Reserved { symbol: s.into(), line: line + 1 });
            }
            if v.index.contains_key(s) {
                return Err(VocabError::Duplicate { symbol: s.into(), line: line + 1 });
            }
            v.push(s);
        }
        Ok(v)
    }

    fn push(&mut self, s: &str) {
        self.index.insert(s.to_owned(), self.symbols.len());
        self.symbols.push(s.to_owned());
    }

    /// Parse the one-symbol-per-line format (`#` starts a comment line).
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut symbols = Vec::new();
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let s = line.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            symbols.push(s);
            lines.push(i + 1);
        }
        Vocab::new(&symbols).map_err(|e| match e {
            VocabError::Duplicate { symbol, line } => VocabError::Duplicate { symbol, line: lines[line - 1] },
            VocabError::Reserved { symbol, line } => VocabError::Reserved { symbol, line: lines[line - 1] },
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|e| VocabError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// File form, without the reserved entries.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for sym in &self.symbols[RESERVED.len()..] {
            s.push_str(sym);
            s.push('\n');
        }
        s
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    /// Symbols after the reserved entries, in id order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols[RESERVED.len()..]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Content symbols to an L2R sequence with SOS/EOS.
    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<TokenSeq, VocabError> {
        let mut ids = Vec::with_capacity(symbols.len() + 2);
        ids.push(SOS);
        ids.extend(self.encode_content(symbols)?);
        ids.push(EOS);
        Ok(TokenSeq { ids, direction: Direction::L2R })
    }

    /// Content symbols to ids, no framing.
    pub fn encode_content<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>, VocabError> {
        symbols
            .iter()
            .enumerate()
            .map(|(position, s)| {
                let s = s.as_ref();
                match self.id(s) {
                    Some(id) if id >= RESERVED.len() => Ok(id),
                    _ => Err(VocabError::UnknownToken { symbol: s.to_owned(), position }),
                }
            })
            .collect()
    }

    /// Space-joined symbols in reading order; frame and padding ids dropped.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String, VocabError> {
        let mut content = seq.content().to_vec();
        if seq.direction == Direction::R2L {
            content.reverse();
        }
        self.decode_ids(&content)
    }

    /// Space-joined symbols of raw ids, skipping reserved ids.
    pub fn decode_ids(&self, ids: &[usize]) -> Result<String, VocabError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < RESERVED.len() {
                continue;
            }
            out.push(self.symbol(id).ok_or(VocabError::BadId(id))?);
        }
        Ok(out.join(" "))
    }

    /// Implicit-vocabulary id for every main id (reserved ids map to themselves).
    pub fn implicit_map(&self) -> Vec<usize> {
        (0..self.len())
            .map(|id| {
                if id < RESERVED.len() {
                    id
                } else {
                    ImplicitVocab::class_of(&self.symbols[id])
                }
            })
            .collect()
    }
}

/// `<pad> <sos> <eos>` followed by `<space> ^ _ { }`.
pub struct ImplicitVocab;

impl ImplicitVocab {
    pub const SPACE: usize = 3;
    pub const SIZE: usize = 8;
    pub const SYMBOLS: [&'static str; 8] = ["<pad>", "<sos>", "<eos>", IMPLICIT_SPACE, "^", "_", "{", "}"];

    /// Implicit class id of a content symbol.
    pub fn class_of(symbol: &str) -> usize {
        IMPLICIT_CHARS
            .iter()
            .position(|&c| c == symbol)
            .map(|p| Self::SPACE + 1 + p)
            .unwrap_or(Self::SPACE)
    }

    pub fn symbol(id: usize) -> Option<&'static str> {
        Self::SYMBOLS.get(id).copied()
    }
}

/// Parse `<sample_id>\t<space-separated tokens>` lines (blank lines skipped).
pub fn parse_label_file(text: &str) -> Result<Vec<(String, Vec<String>)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| format!("label line {}: expected `<id>\\t<tokens>`", i + 1))?;
        out.push((id.to_owned(), tokenize(label)));
    }
    Ok(out)
}

pub fn format_label_line(id: &str, tokens: &[impl AsRef<str>]) -> String {
    let body: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
    format!("{id}\t{}", body.join(" "))
}
