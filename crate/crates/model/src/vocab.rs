//! Toy vocabulary and greedy longest-match tokenizer.

use thiserror::Error;

pub const DET: &str = "[DET]";
pub const END_OF_ANSWER: &str = "[EOA]";
pub const FIND: &str = "find";

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("no token matches {found:?} at character {position}")]
    Unknown { position: usize, found: char },
    #[error("token id {0} is out of range")]
    BadId(usize),
}

/// Digits, `.`, `-`, space, `find`, one `sig_k` per signature and the
/// specials `[DET]` and `[EOA]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(signature_count: usize) -> Self {
        let mut tokens: Vec<String> = vec![DET.into(), END_OF_ANSWER.into()];
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend([".", "-", " ", FIND].map(String::from));
        tokens.extend((0..signature_count).map(|k| format!("sig_{k}")));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn det(&self) -> usize {
        0
    }

    pub fn end_of_answer(&self) -> usize {
        1
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, TokenizeError> {
        let mut out = Vec::new();
        let mut rest = text;
        let mut pos = 0;
        while let Some(c) = rest.chars().next() {
            let best = self
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| rest.starts_with(t.as_str()))
                .max_by_key(|(_, t)| t.len());
            let Some((id, t)) = best else {
                return Err(TokenizeError::Unknown { position: pos, found: c });
            };
            out.push(id);
            pos += t.chars().count();
            rest = &rest[t.len()..];
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, TokenizeError> {
        ids.iter()
            .map(|&i| self.token(i).ok_or(TokenizeError::BadId(i)))
            .collect()
    }
}
