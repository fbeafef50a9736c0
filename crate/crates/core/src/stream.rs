//! Token streams flowing through an encoder: a body of `[time, space]`
//! tokens per clip, optionally preceded by prompt tokens from one or more
//! sources.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptSource {
    /// Instance-wise generated prompts (TMDG).
    Generated,
    /// Task-specific deep prompts (TMI).
    Deep,
    /// Anything else, e.g. test hooks.
    Custom(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSegment {
    pub source: PromptSource,
    pub len: usize,
}

/// Tokens `[batch, time, prefix + space, dim]`. Prompt tokens come first, in
/// the order listed by `segments`; every frame carries its own copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream<F> {
    pub tokens: Array4<F>,
    pub segments: Vec<PromptSegment>,
}

/// Bookkeeping of one prompt insertion, needed to route gradients back.
#[derive(Debug, Clone)]
pub struct SegmentEdit {
    /// `(offset, len)` of the segment that was replaced, if any.
    removed: Option<(usize, usize)>,
    offset: usize,
    len: usize,
}

impl<F: Real> TokenStream<F> {
    pub fn from_body(body: Array4<F>) -> Self {
        Self {
            tokens: body,
            segments: Vec::new(),
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn body_len(&self) -> usize {
        self.tokens.dim().2 - self.prefix_len()
    }

    pub fn body(&self) -> ArrayView4<'_, F> {
        let p = self.prefix_len();
        self.tokens.slice(s![.., .., p.., ..])
    }

    pub fn set_body(&mut self, body: ArrayView4<'_, F>) -> Result<()> {
        let p = self.prefix_len();
        let mut dst = self.tokens.slice_mut(s![.., .., p.., ..]);
        if dst.shape() != body.shape() {
            return Err(Error::shape("stream body", dst.shape(), body.shape()));
        }
        dst.assign(&body);
        Ok(())
    }

    fn segment_offset(&self, source: PromptSource) -> Option<(usize, usize)> {
        let mut off = 0;
        for seg in &self.segments {
            if seg.source == source {
                return Some((off, seg.len));
            }
            off += seg.len;
        }
        None
    }

    /// Prompt tokens `[batch, len, dim]` of `source`, read from the first frame.
    pub fn segment(&self, source: PromptSource) -> Option<Array3<F>> {
        self.segment_offset(source)
            .map(|(o, l)| self.tokens.slice(s![.., 0, o..o + l, ..]).to_owned())
    }

    /// Inserts `prompts: [batch, len, dim]` (broadcast over time) as the
    /// segment of `source`: replaces it in place when already present,
    /// otherwise prepends it in front of all tokens.
    pub fn put_segment(
        &self,
        source: PromptSource,
        prompts: ArrayView3<'_, F>,
    ) -> Result<(Self, SegmentEdit)> {
        let (b, t, n, d) = self.tokens.dim();
        let (pb, k, pd) = prompts.dim();
        if pb != b || pd != d {
            return Err(Error::shape("prompt segment", &[b, k, d], &[pb, k, pd]));
        }
        let removed = self.segment_offset(source);
        let (offset, keep_from, mut segments) = match removed {
            Some((o, l)) => {
                let mut segs = self.segments.clone();
                let idx = segs
                    .iter()
                    .position(|s| s.source == source)
                    .expect("present");
                segs[idx].len = k;
                (o, o + l, segs)
            }
            None => {
                let mut segs = vec![PromptSegment { source, len: k }];
                segs.extend(self.segments.iter().copied());
                (0, 0, segs)
            }
        };
        if k == 0 {
            segments.retain(|s| s.len > 0);
        }
        let new_n = n - (keep_from - offset) + k;
        let mut tokens = Array4::zeros((b, t, new_n, d));
        tokens
            .slice_mut(s![.., .., ..offset, ..])
            .assign(&self.tokens.slice(s![.., .., ..offset, ..]));
        for ti in 0..t {
            tokens
                .slice_mut(s![.., ti, offset..offset + k, ..])
                .assign(&prompts);
        }
        tokens
            .slice_mut(s![.., .., offset + k.., ..])
            .assign(&self.tokens.slice(s![.., .., keep_from.., ..]));
        let edit = SegmentEdit {
            removed,
            offset,
            len: k,
        };
        Ok((Self { tokens, segments }, edit))
    }

    /// Drops every prompt token, leaving the body.
    pub fn strip_prompts(&self) -> Self {
        Self::from_body(self.body().to_owned())
    }
}

impl SegmentEdit {
    /// Splits the gradient w.r.t. the edited stream into the gradient w.r.t.
    /// the stream before the edit and the gradient w.r.t. the inserted
    /// prompts (summed over time).
    pub fn backward<F: Real>(&self, d_after: ArrayView4<'_, F>) -> (Array4<F>, Array3<F>) {
        let (b, t, _, d) = d_after.dim();
        let (o, k) = (self.offset, self.len);
        let d_prompts = d_after.slice(s![.., .., o..o + k, ..]).sum_axis(Axis(1));
        let old_len = self.removed.map(|(_, l)| l).unwrap_or(0);
        let body_after_start = o + k;
        let n_after = d_after.dim().2;
        let n_before = n_after - k + old_len;
        let mut d_before = Array4::zeros((b, t, n_before, d));
        d_before
            .slice_mut(s![.., .., ..o, ..])
            .assign(&d_after.slice(s![.., .., ..o, ..]));
        d_before
            .slice_mut(s![.., .., o + old_len.., ..])
            .assign(&d_after.slice(s![.., .., body_after_start.., ..]));
        (d_before, d_prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn body() -> TokenStream<f64> {
        TokenStream::from_body(Array::from_shape_fn((2, 3, 4, 2), |(b, t, s, c)| {
            (b * 100 + t * 10 + s) as f64 + c as f64 * 0.5
        }))
    }

    #[test]
    fn prepend_then_strip_recovers_body_exactly() {
        let st = body();
        let prompts = Array3::from_elem((2, 3, 2), 7.0);
        let (out, _) = st.put_segment(PromptSource::Deep, prompts.view()).unwrap();
        assert_eq!(out.tokens.dim(), (2, 3, 7, 2));
        assert_eq!(out.prefix_len(), 3);
        assert_eq!(out.body(), st.tokens.view());
        assert_eq!(out.strip_prompts(), st);
    }

    #[test]
    fn replacing_a_segment_keeps_other_segments() {
        let st = body();
        let (a, _) = st
            .put_segment(PromptSource::Deep, Array3::from_elem((2, 2, 2), 1.0).view())
            .unwrap();
        let (b, _) = a
            .put_segment(
                PromptSource::Generated,
                Array3::from_elem((2, 1, 2), 2.0).view(),
            )
            .unwrap();
        let (c, _) = b
            .put_segment(
                PromptSource::Generated,
                Array3::from_elem((2, 3, 2), 3.0).view(),
            )
            .unwrap();
        assert_eq!(c.prefix_len(), 5);
        assert_eq!(
            c.segment(PromptSource::Generated).unwrap(),
            Array3::from_elem((2, 3, 2), 3.0)
        );
        assert_eq!(
            c.segment(PromptSource::Deep).unwrap(),
            Array3::from_elem((2, 2, 2), 1.0)
        );
        assert_eq!(c.body(), st.tokens.view());
    }

    #[test]
    fn empty_segment_is_identity() {
        let st = body();
        let (out, _) = st
            .put_segment(PromptSource::Generated, Array3::zeros((2, 0, 2)).view())
            .unwrap();
        assert_eq!(out, st);
    }

    #[test]
    fn edit_backward_routes_gradients() {
        let st = body();
        let (a, _) = st
            .put_segment(PromptSource::Deep, Array3::from_elem((2, 2, 2), 1.0).view())
            .unwrap();
        let (b, edit) = a
            .put_segment(PromptSource::Deep, Array3::from_elem((2, 1, 2), 2.0).view())
            .unwrap();
        let g = Array::from_shape_fn(b.tokens.raw_dim(), |(b, t, s, c)| {
            (b + t + s * 3 + c) as f64
        });
        let (d_before, d_prompts) = edit.backward(g.view());
        assert_eq!(d_before.dim(), a.tokens.dim());
        // Replaced segment receives nothing, body gradients shift by one slot.
        assert!(d_before
            .slice(s![.., .., 0..2, ..])
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            d_before.slice(s![.., .., 2.., ..]),
            g.slice(s![.., .., 1.., ..])
        );
        assert_eq!(d_prompts, g.slice(s![.., .., 0..1, ..]).sum_axis(Axis(1)));
    }
}
