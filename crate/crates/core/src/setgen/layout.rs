use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SetGenError;

/// Span bookkeeping for one joint attention call.
///
/// The key axis is ordered `[p_1 … p_n, g, v_1 … v_n]`. The query axis covers
/// visual tokens only, so `visual_spans` are stored relative to the query axis
/// (starting at 0); add [`TokenLayout::text_len`] to address them on the key
/// axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    prompt_spans: Vec<Range<usize>>,
    global_span: Range<usize>,
    visual_spans: Vec<Range<usize>>,
}

impl TokenLayout {
    pub fn n(&self) -> usize {
        self.prompt_spans.len()
    }

    /// Key-axis span of image `k`'s prompt.
    pub fn prompt_span(&self, k: usize) -> Range<usize> {
        self.prompt_spans[k].clone()
    }

    pub fn prompt_spans(&self) -> &[Range<usize>] {
        &self.prompt_spans
    }

    pub fn global_span(&self) -> Range<usize> {
        self.global_span.clone()
    }

    /// Query-axis span of image `k`'s visual tokens.
    pub fn visual_span(&self, k: usize) -> Range<usize> {
        self.visual_spans[k].clone()
    }

    pub fn visual_spans(&self) -> &[Range<usize>] {
        &self.visual_spans
    }

    /// Key-axis span of image `k`'s visual tokens.
    pub fn visual_key_span(&self, k: usize) -> Range<usize> {
        let off = self.text_len();
        let s = &self.visual_spans[k];
        s.start + off..s.end + off
    }

    /// `N_p`
    pub fn prompt_len(&self) -> usize {
        self.prompt_spans.iter().map(|s| s.len()).sum()
    }

    /// `N_g`
    pub fn global_len(&self) -> usize {
        self.global_span.len()
    }

    /// `N`
    pub fn visual_len(&self) -> usize {
        self.visual_spans.iter().map(|s| s.len()).sum()
    }

    pub fn text_len(&self) -> usize {
        self.prompt_len() + self.global_len()
    }

    /// `N_p + N_g + N`
    pub fn key_len(&self) -> usize {
        self.text_len() + self.visual_len()
    }

    /// Image owning query row `i`.
    pub fn image_of_query(&self, i: usize) -> Option<usize> {
        self.visual_spans.iter().position(|s| s.contains(&i))
    }

    /// Position of key-axis text token `j` inside its own span.
    pub fn text_position(&self, j: usize) -> Option<usize> {
        self.prompt_spans
            .iter()
            .chain(std::iter::once(&self.global_span))
            .find(|s| s.contains(&j))
            .map(|s| j - s.start)
    }
}

/// Lays out `[p_1 … p_n, g, v_1 … v_n]` contiguously in that order.
pub fn build_token_layout(
    prompt_lens: &[usize],
    global_len: usize,
    visual_lens: &[usize],
) -> Result<TokenLayout, SetGenError> {
    if prompt_lens.is_empty() {
        return Err(SetGenError::Layout("at least one image is required".into()));
    }
    if prompt_lens.len() != visual_lens.len() {
        return Err(SetGenError::Layout(format!(
            "{} prompt lengths but {} visual lengths",
            prompt_lens.len(),
            visual_lens.len()
        )));
    }
    if global_len == 0 || prompt_lens.contains(&0) || visual_lens.contains(&0) {
        return Err(SetGenError::Layout("span lengths must be at least 1".into()));
    }
    let mut cursor = 0;
    let mut take = |len: usize| {
        let s = cursor..cursor + len;
        cursor += len;
        s
    };
    let prompt_spans = prompt_lens.iter().map(|&l| take(l)).collect();
    let global_span = take(global_len);
    let mut q = 0;
    let visual_spans = visual_lens
        .iter()
        .map(|&l| {
            let s = q..q + l;
            q += l;
            s
        })
        .collect();
    Ok(TokenLayout {
        prompt_spans,
        global_span,
        visual_spans,
    })
}
