//! Token, sequence and block-partition primitives.
//!
//! Block spans use 1-based local indices into the generation window, so a
//! span with `start = 1, size = 4` covers the first four generated positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Synthetic vocabulary: specials, digits, operators and a few keyword glyphs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub mask_id: TokenId,
    pub indicator_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
    pub glyphs: Vec<String>,
}

pub const INDICATOR_GLYPH: &str = "\\block";
pub const EOS_GLYPH: &str = "<eos>";
pub const MASK_GLYPH: &str = "<mask>";
pub const PAD_GLYPH: &str = "<pad>";

impl Vocabulary {
    /// The vocabulary shared by every task in this crate.
    pub fn standard() -> Self {
        let mut glyphs: Vec<String> = vec![
            PAD_GLYPH.into(),
            MASK_GLYPH.into(),
            EOS_GLYPH.into(),
            INDICATOR_GLYPH.into(),
        ];
        glyphs.extend((0..10).map(|d| d.to_string()));
        glyphs.extend(
            ["+", "-", "=", " ", "Numbers:", "Target:", "Answer:", "Compute:"]
                .iter()
                .map(|s| s.to_string()),
        );
        let v = Self {
            size: glyphs.len(),
            pad_id: 0,
            mask_id: 1,
            eos_id: 2,
            indicator_id: 3,
            glyphs,
        };
        debug_assert!(v.validate().is_ok());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let ids = [self.mask_id, self.indicator_id, self.eos_id, self.pad_id];
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= self.size {
                return Err(Error::Domain(format!("special token id {a} out of range")));
            }
            if ids[i + 1..].contains(a) {
                return Err(Error::Domain(format!("special token id {a} used twice")));
            }
        }
        if self.glyphs.len() != self.size {
            return Err(Error::Domain("glyph table does not match vocabulary size".into()));
        }
        Ok(())
    }

    pub fn id_of(&self, glyph: &str) -> Option<TokenId> {
        self.glyphs.iter().position(|g| g == glyph).map(|i| i as TokenId)
    }

    pub fn digit(&self, d: u32) -> TokenId {
        self.id_of(&d.to_string()).expect("digit glyph")
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.glyphs.get(t as usize).map(String::as_str).unwrap_or("?"))
            .collect()
    }

    /// Greedy longest-match tokenizer over the glyph table.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let best = self
                .glyphs
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.is_empty() && rest.starts_with(g.as_str()))
                .max_by_key(|(_, g)| g.len());
            match best {
                Some((id, g)) => {
                    out.push(id as TokenId);
                    rest = &rest[g.len()..];
                }
                None => {
                    return Err(Error::Domain(format!(
                        "cannot tokenize text at {:?}",
                        rest.chars().take(8).collect::<String>()
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Renders a non-negative integer as digit tokens.
    pub fn number(&self, n: u64) -> Vec<TokenId> {
        n.to_string()
            .chars()
            .map(|c| self.digit(c.to_digit(10).unwrap()))
            .collect()
    }
}

/// A prompt followed by a generation window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::Domain(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    /// Prompt followed by `window_len` mask tokens.
    pub fn masked_window(prompt: &[TokenId], window_len: usize, mask_id: TokenId) -> Self {
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + window_len, mask_id);
        Self { tokens, prompt_len: prompt.len() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn window(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= vocab.size) {
            Some(t) => Err(Error::Domain(format!("token id {t} outside vocabulary"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    /// 1-based block index.
    pub k: usize,
    /// 1-based local start position within the generation window.
    pub start: usize,
    pub size: usize,
    pub contains_indicator: bool,
}

impl BlockSpan {
    /// Last covered local position (1-based, inclusive).
    pub fn end(&self) -> usize {
        self.start + self.size - 1
    }

    /// 0-based half-open range of window offsets.
    pub fn offsets(&self) -> std::ops::Range<usize> {
        self.start - 1..self.start - 1 + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub spans: Vec<BlockSpan>,
    pub window_len: usize,
}

impl BlockPartition {
    pub fn k(&self) -> usize {
        self.spans.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.size).collect()
    }

    /// Builds a partition from consecutive block sizes starting at local position 1.
    pub fn from_sizes(sizes: &[usize], window_len: usize) -> Self {
        let mut start = 1;
        let spans = sizes
            .iter()
            .enumerate()
            .map(|(i, &size)| {
                let s = BlockSpan { k: i + 1, start, size, contains_indicator: false };
                start += size;
                s
            })
            .collect();
        Self { spans, window_len }
    }
}

/// Constant-size partition of the window; the last block may be shorter.
pub fn fixed_partition(window_len: usize, c: usize) -> Result<BlockPartition> {
    if window_len == 0 || c == 0 {
        return Err(Error::Domain(format!(
            "fixed partition needs window_len >= 1 and c >= 1 (got {window_len}, {c})"
        )));
    }
    let spans = (0..window_len.div_ceil(c))
        .map(|i| {
            let start = i * c + 1;
            BlockSpan { k: i + 1, start, size: c.min(window_len - i * c), contains_indicator: false }
        })
        .collect();
    Ok(BlockPartition { spans, window_len })
}

/// Local size `d` of the block starting at `block_start` (1-based): the offset of
/// the first committed indicator at or after the block start, counting the
/// indicator itself. `window` holds the generation-window tokens, masks included.
pub fn find_boundary(
    window: &[TokenId],
    block_start: usize,
    window_len: usize,
    indicator_id: TokenId,
) -> Option<usize> {
    if block_start == 0 || block_start > window_len {
        return None;
    }
    let end = window_len.min(window.len());
    window[block_start - 1..end]
        .iter()
        .position(|&t| t == indicator_id)
        .map(|j| j + 1)
}

pub fn validate_partition(p: &BlockPartition) -> bool {
    if p.spans.is_empty() || p.window_len == 0 {
        return false;
    }
    let mut expected_start = 1;
    for (i, s) in p.spans.iter().enumerate() {
        if s.k != i + 1 || s.size == 0 || s.start != expected_start {
            return false;
        }
        expected_start += s.size;
    }
    expected_start == p.window_len + 1
}
