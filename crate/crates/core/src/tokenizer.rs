//! Tokenizers and subject-span resolution.
//!
//! Two modes share one interface: GPT-2 byte-level BPE loaded from
//! `vocab.json` + `merges.txt`, and a whitespace tokenizer driven by a
//! vocabulary alone. Both report byte offsets so subject spans can be mapped
//! onto token positions.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token id with the byte range of `text` it was produced from.
pub type TokenSpan = (u32, Range<usize>);

#[derive(Clone, Debug)]
pub enum Tokenizer {
    Bpe(BpeTokenizer),
    Whitespace(WhitespaceTokenizer),
}

impl Tokenizer {
    /// Loads from a directory holding `vocab.json` and, for BPE, `merges.txt`.
    /// A path to a `vocab.json` file is also accepted. Without a merges file
    /// the whitespace mode is used.
    pub fn load(path: &Path) -> Result<Self> {
        let (vocab_path, dir) = if path.is_dir() {
            (path.join("vocab.json"), path.to_path_buf())
        } else {
            (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
        };
        let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::file(&vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        let merges_path = dir.join("merges.txt");
        if merges_path.exists() {
            let merges = fs::read_to_string(&merges_path).map_err(|e| Error::file(&merges_path, e))?;
            Ok(Tokenizer::Bpe(BpeTokenizer::new(vocab, &merges)?))
        } else {
            Ok(Tokenizer::Whitespace(WhitespaceTokenizer::new(vocab)?))
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bpe(t) => t.decoder.len(),
            Tokenizer::Whitespace(t) => t.words.len(),
        }
    }

    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        match self {
            Tokenizer::Bpe(t) => t.encode_with_offsets(text),
            Tokenizer::Whitespace(t) => t.encode_with_offsets(text, false),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.encode_with_offsets(text)?.into_iter().map(|(id, _)| id).collect())
    }

    /// Like `encode`, but drops pieces the vocabulary cannot represent.
    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Bpe(t) => t.encode_lossy(text),
            Tokenizer::Whitespace(t) => {
                t.encode_with_offsets(text, true).unwrap_or_default().into_iter().map(|(id, _)| id).collect()
            }
        }
    }

    /// Surface string of one token, including any leading space.
    pub fn token_string(&self, id: u32) -> String {
        match self {
            Tokenizer::Bpe(t) => t.decode_token(id),
            Tokenizer::Whitespace(t) => t.words.get(id as usize).cloned().unwrap_or_default(),
        }
    }

    /// First token of `word` as it would appear after preceding text.
    pub fn continuation_token(&self, word: &str) -> Result<u32> {
        let text = match self {
            Tokenizer::Bpe(_) => format!(" {}", word.trim_start()),
            Tokenizer::Whitespace(_) => word.trim().to_string(),
        };
        self.encode(&text)?
            .first()
            .copied()
            .ok_or_else(|| Error::Tokenizer(format!("attribute {word:?} encodes to no tokens")))
    }
}

/// Maps each byte to a printable character, GPT-2 style.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..=255u32 {
        let printable = (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).expect("latin-1 char")
        } else {
            let c = char::from_u32(256 + n).expect("shifted char");
            n += 1;
            c
        };
    }
    table
}

/// Splits text into GPT-2 pre-tokens, returning byte ranges.
///
/// Mirrors `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`.
pub fn pretokenize(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |&(b, _)| b);
    let is_letter = |c: char| c.is_alphabetic();
    let is_number = |c: char| c.is_numeric();
    let is_other = |c: char| !c.is_whitespace() && !c.is_alphabetic() && !c.is_numeric();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        let (_, c) = chars[i];
        if c == '\'' {
            let rest = &text[chars[i].0..];
            if let Some(len) = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"]
                .iter()
                .find(|p| rest.starts_with(**p))
                .map(|p| p.chars().count())
            {
                i += len;
                pieces.push(end_of(start)..end_of(i));
                continue;
            }
        }
        let body = if c == ' ' && i + 1 < chars.len() && !chars[i + 1].1.is_whitespace() { i + 1 } else { i };
        let bc = chars[body].1;
        let class: Option<&dyn Fn(char) -> bool> = if is_letter(bc) {
            Some(&is_letter)
        } else if is_number(bc) {
            Some(&is_number)
        } else if is_other(bc) {
            Some(&is_other)
        } else {
            None
        };
        if let Some(class) = class {
            i = body;
            while i < chars.len() && class(chars[i].1) {
                i += 1;
            }
        } else {
            // whitespace run
            while i < chars.len() && chars[i].1.is_whitespace() {
                i += 1;
            }
            if i < chars.len() && i - start >= 2 {
                i -= 1;
            }
        }
        pieces.push(end_of(start)..end_of(i));
    }
    pieces
}

#[derive(Clone, Debug)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
}

impl BpeTokenizer {
    pub fn new(vocab: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let decoder = dense_decoder(&vocab)?;
        let mut merge_ranks = HashMap::new();
        for line in merges.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Tokenizer(format!("malformed merge line {line:?}")));
            };
            let rank = merge_ranks.len();
            merge_ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
        }
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self { encoder: vocab, decoder, merge_ranks, byte_encoder, byte_decoder })
    }

    /// Merges one pre-token; returns symbols with their byte lengths.
    fn bpe(&self, bytes: &[u8]) -> Vec<(String, usize)> {
        let mut symbols: Vec<(String, usize)> =
            bytes.iter().map(|&b| (self.byte_encoder[b as usize].to_string(), 1)).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_ranks.get(&(w[0].0.clone(), w[1].0.clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i].0.clone(), symbols[i + 1].0.clone())) == Some(&rank)
                {
                    merged.push((format!("{}{}", symbols[i].0, symbols[i + 1].0), symbols[i].1 + symbols[i + 1].1));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    fn encode_pieces(&self, text: &str, lossy: bool) -> Result<Vec<TokenSpan>> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            let mut offset = piece.start;
            for (sym, len) in self.bpe(&text.as_bytes()[piece.clone()]) {
                match self.encoder.get(&sym) {
                    Some(&id) => out.push((id, offset..offset + len)),
                    None if lossy => {}
                    None => return Err(Error::Tokenizer(format!("symbol {sym:?} missing from vocabulary"))),
                }
                offset += len;
            }
        }
        Ok(out)
    }

    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        self.encode_pieces(text, false)
    }

    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        self.encode_pieces(text, true).unwrap_or_default().into_iter().map(|(id, _)| id).collect()
    }

    pub fn decode_token(&self, id: u32) -> String {
        let Some(sym) = self.decoder.get(id as usize) else { return String::new() };
        let bytes: Vec<u8> = sym.chars().filter_map(|c| self.byte_decoder.get(&c).copied()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[derive(Clone, Debug)]
pub struct WhitespaceTokenizer {
    vocab: HashMap<String, u32>,
    words: Vec<String>,
    unk: Option<u32>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl WhitespaceTokenizer {
    pub fn new(vocab: HashMap<String, u32>) -> Result<Self> {
        let words = dense_decoder(&vocab)?;
        let unk = vocab.get(UNK_TOKEN).copied();
        Ok(Self { vocab, words, unk })
    }

    /// Builds a vocabulary from words in the given order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let vocab = words.iter().enumerate().map(|(i, w)| (w.as_ref().to_string(), i as u32)).collect();
        Self::new(vocab)
    }

    pub fn vocab(&self) -> &HashMap<String, u32> {
        &self.vocab
    }

    fn encode_with_offsets(&self, text: &str, lossy: bool) -> Result<Vec<TokenSpan>> {
        let mut out = Vec::new();
        let mut start = None;
        let emit = |s: usize, e: usize, out: &mut Vec<TokenSpan>| -> Result<()> {
            let word = &text[s..e];
            match self.vocab.get(word).copied() {
                Some(id) => out.push((id, s..e)),
                None if lossy => {}
                None => match self.unk {
                    Some(id) => out.push((id, s..e)),
                    None => return Err(Error::Tokenizer(format!("unknown word {word:?}"))),
                },
            }
            Ok(())
        };
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    emit(s, i, &mut out)?;
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            emit(s, text.len(), &mut out)?;
        }
        Ok(out)
    }
}

fn dense_decoder(vocab: &HashMap<String, u32>) -> Result<Vec<String>> {
    let mut decoder = vec![None; vocab.len()];
    for (tok, &id) in vocab {
        let slot = decoder
            .get_mut(id as usize)
            .ok_or_else(|| Error::Tokenizer(format!("token id {id} exceeds vocabulary size {}", vocab.len())))?;
        if slot.is_some() {
            return Err(Error::Tokenizer(format!("token id {id} assigned twice")));
        }
        *slot = Some(tok.clone());
    }
    Ok(decoder.into_iter().map(Option::unwrap_or_default).collect())
}

/// A query with its subject and relation positions resolved.
///
/// Positions are 0-based. The last position belongs to neither set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedQuery {
    pub token_ids: Vec<u32>,
    pub subject_positions: Vec<usize>,
    pub relation_positions: Vec<usize>,
    pub attribute_token: Option<u32>,
    pub raw_text: String,
    pub subject_text: String,
    /// Set when the subject boundary fell inside a token and the span was widened.
    pub widened: bool,
}

impl TokenizedQuery {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn last_position(&self) -> usize {
        self.token_ids.len() - 1
    }

    pub fn first_subject(&self) -> usize {
        self.subject_positions[0]
    }

    pub fn last_subject(&self) -> usize {
        *self.subject_positions.last().expect("non-empty subject")
    }

    /// All positions outside the subject, including the last one.
    pub fn non_subject_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|p| !self.subject_positions.contains(p)).collect()
    }
}

pub fn tokenize_query(text: &str, subject: &str, tokenizer: &Tokenizer) -> Result<TokenizedQuery> {
    if subject.is_empty() {
        return Err(Error::SubjectNotFound { subject: subject.into(), text: text.into() });
    }
    let start = text
        .find(subject)
        .ok_or_else(|| Error::SubjectNotFound { subject: subject.into(), text: text.into() })?;
    let end = start + subject.len();
    let spans = tokenizer.encode_with_offsets(text)?;
    if spans.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let subject_positions: Vec<usize> = spans
        .iter()
        .enumerate()
        .filter(|(_, (_, r))| r.start < end && start < r.end)
        .map(|(i, _)| i)
        .collect();
    if subject_positions.is_empty() {
        return Err(Error::Tokenizer(format!("subject {subject:?} maps to no tokens")));
    }
    let n = spans.len();
    if subject_positions.contains(&(n - 1)) {
        return Err(Error::Tokenizer(format!("subject {subject:?} covers the final position")));
    }
    let first = &spans[subject_positions[0]].1;
    let last = &spans[*subject_positions.last().expect("non-empty")].1;
    // A leading space inside the first token is a word marker, not a misalignment.
    let first_content = first.start + (text[first.clone()].len() - text[first.clone()].trim_start().len());
    let widened = first_content != start || last.end != end;
    if widened {
        log::warn!("subject {subject:?} is not token-aligned in {text:?}; widened to covering tokens");
    }
    let relation_positions = (0..n - 1).filter(|p| !subject_positions.contains(p)).collect();
    Ok(TokenizedQuery {
        token_ids: spans.iter().map(|(id, _)| *id).collect(),
        subject_positions,
        relation_positions,
        attribute_token: None,
        raw_text: text.into(),
        subject_text: subject.into(),
        widened,
    })
}
