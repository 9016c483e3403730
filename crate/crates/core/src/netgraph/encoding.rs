//! Architecture strings: per-block conv output channels, blocks joined by
//! `-`, stages by `], [`, e.g. `[(8, 8)], [(16, 16)-(16, 16)], [(32, 32)], [(64, 64)]`.
//!
//! Stem and neck widths are not part of the block grammar. When they differ
//! from the base values a trailer `; stem: N; neck: M` is appended so that
//! decoding inverts encoding.

use std::fmt::Write as _;

use thiserror::Error;

use super::{ArchSpec, BlockKind, BlockSpec, NetError, BASE_NECK, BASE_STEM};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("architecture parse error at offset {offset}: {message}")]
pub struct ArchParseError {
    /// Character offset into the input.
    pub offset: usize,
    pub message: String,
}

pub fn encode_arch(a: &ArchSpec) -> String {
    let stages: Vec<String> = a
        .stages
        .iter()
        .map(|stage| {
            stage
                .iter()
                .map(|b| {
                    let c: Vec<String> = b.channels.iter().map(usize::to_string).collect();
                    format!("({})", c.join(", "))
                })
                .collect::<Vec<_>>()
                .join("-")
        })
        .collect();
    let mut s = format!("[{}]", stages.join("], ["));
    if a.stem_width != BASE_STEM {
        let _ = write!(s, "; stem: {}", a.stem_width);
    }
    if a.neck_width != BASE_NECK {
        let _ = write!(s, "; neck: {}", a.neck_width);
    }
    s
}

/// Parses an architecture string and validates the result.
///
/// A missing leading `[` or trailing `]` is tolerated, since published
/// encodings are sometimes clipped at either end.
pub fn decode_arch(s: &str) -> Result<ArchSpec, NetError> {
    let mut p = Parser { chars: s.chars().collect(), pos: 0, stem: None, neck: None };
    let raw = p.arch()?;
    let stages = raw
        .into_iter()
        .enumerate()
        .map(|(si, blocks)| {
            blocks
                .into_iter()
                .enumerate()
                .map(|(bi, (offset, channels))| {
                    let kind = match channels.len() {
                        2 => BlockKind::Basic,
                        3 => BlockKind::Bottleneck,
                        n => {
                            return Err(ArchParseError {
                                offset,
                                message: format!("block has {n} channel counts; expected 2 or 3"),
                            })
                        }
                    };
                    Ok(BlockSpec::at(kind, channels, si, bi))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let arch = ArchSpec { stages, stem_width: p.stem.unwrap_or(BASE_STEM), neck_width: p.neck.unwrap_or(BASE_NECK) };
    arch.validate()?;
    Ok(arch)
}

type RawBlock = (usize, Vec<usize>);

struct Parser {
    chars: Vec<char>,
    pos: usize,
    stem: Option<usize>,
    neck: Option<usize>,
}

impl Parser {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, ArchParseError> {
        Err(ArchParseError { offset: self.pos, message: message.into() })
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ArchParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            match self.peek() {
                Some(found) => self.err(format!("expected `{c}`, found `{found}`")),
                None => self.err(format!("expected `{c}`, found end of input")),
            }
        }
    }

    fn number(&mut self) -> Result<usize, ArchParseError> {
        self.ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.peek() {
                Some(found) => self.err(format!("expected a number, found `{found}`")),
                None => self.err("expected a number, found end of input"),
            };
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse().or_else(|_| {
            self.pos = start;
            self.err("number out of range")
        })
    }

    fn block(&mut self) -> Result<RawBlock, ArchParseError> {
        self.ws();
        let offset = self.pos;
        self.expect('(')?;
        let mut channels = vec![self.number()?];
        while self.eat(',') {
            channels.push(self.number()?);
        }
        self.expect(')')?;
        Ok((offset, channels))
    }

    fn stage(&mut self) -> Result<Vec<RawBlock>, ArchParseError> {
        let mut blocks = vec![self.block()?];
        while self.eat('-') {
            blocks.push(self.block()?);
        }
        Ok(blocks)
    }

    fn arch(&mut self) -> Result<Vec<Vec<RawBlock>>, ArchParseError> {
        self.eat('[');
        let mut stages = vec![self.stage()?];
        loop {
            if !self.eat(']') {
                break;
            }
            self.ws();
            if self.peek() != Some(',') {
                break;
            }
            self.pos += 1;
            self.expect('[')?;
            stages.push(self.stage()?);
        }
        self.trailer()?;
        self.ws();
        if let Some(c) = self.peek() {
            return self.err(format!("unexpected `{c}`"));
        }
        Ok(stages)
    }

    fn trailer(&mut self) -> Result<(), ArchParseError> {
        while self.eat(';') {
            self.ws();
            let start = self.pos;
            while self.peek().is_some_and(|c| c.is_ascii_alphabetic()) {
                self.pos += 1;
            }
            let key: String = self.chars[start..self.pos].iter().collect();
            if key != "stem" && key != "neck" {
                self.pos = start;
                return self.err(format!("unknown trailer key `{key}`"));
            }
            self.expect(':')?;
            let v = self.number()?;
            let slot = if key == "stem" { &mut self.stem } else { &mut self.neck };
            if slot.replace(v).is_some() {
                self.pos = start;
                return self.err(format!("duplicate `{key}`"));
            }
        }
        Ok(())
    }
}
