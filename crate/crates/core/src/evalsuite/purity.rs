use std::collections::BTreeMap;

use serde::Serialize;

use super::datasets::LabeledSpan;
use crate::cochlea::HOP_SAMPLES;
use crate::{CoreError, Result};

/// Label of every frame: frame `t` of a token stream starting at sample
/// `offset` belongs to the span containing its window start `offset + 80 t`.
pub fn align_frames<'a>(n_frames: usize, offset: u64, spans: &'a [LabeledSpan]) -> Vec<Option<&'a str>> {
    let mut sorted: Vec<&LabeledSpan> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    let mut out = Vec::with_capacity(n_frames);
    let mut j = 0;
    for t in 0..n_frames {
        let s = offset + (t * HOP_SAMPLES) as u64;
        while j < sorted.len() && sorted[j].end <= s {
            j += 1;
        }
        // Spans may overlap; scan forward from the first candidate.
        let hit = sorted[j..].iter().take_while(|sp| sp.start <= s).find(|sp| s < sp.end);
        out.push(hit.map(|sp| sp.label.as_str()));
    }
    out
}

/// Token interval `[a, b)` of the frames [`align_frames`] assigns to `span`,
/// or `None` when no frame window starts inside it.
pub fn span_to_tokens(span: &LabeledSpan, offset: u64, n_frames: usize) -> Option<(usize, usize)> {
    let hop = HOP_SAMPLES as u64;
    let first = |s: u64| (s.saturating_sub(offset).div_ceil(hop) as usize).min(n_frames);
    let (a, b) = (first(span.start), first(span.end));
    (a < b).then_some((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenPurity {
    pub token: u32,
    pub count: u64,
    pub top_label: String,
    pub purity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PurityReport {
    pub per_token: Vec<TokenPurity>,
    /// Count-weighted mean purity.
    pub mean: f64,
    pub frames: u64,
    pub classes: usize,
}

/// Purity of every token id from aligned `(token, label)` pairs.
pub fn phoneme_purity<'a>(pairs: impl IntoIterator<Item = (u32, &'a str)>) -> Result<PurityReport> {
    let mut counts: BTreeMap<u32, BTreeMap<&str, u64>> = BTreeMap::new();
    let mut labels = std::collections::BTreeSet::new();
    for (tok, lab) in pairs {
        *counts.entry(tok).or_default().entry(lab).or_default() += 1;
        labels.insert(lab);
    }
    if counts.is_empty() {
        return Err(CoreError::Empty("no token frames aligned with a labelled span".into()));
    }
    let mut per_token = Vec::with_capacity(counts.len());
    let (mut top_sum, mut total) = (0u64, 0u64);
    for (token, by_label) in counts {
        let count: u64 = by_label.values().sum();
        // Ties resolve to the alphabetically first label.
        let (top_label, top) = by_label.iter().fold(("", 0u64), |best, (&l, &c)| if c > best.1 { (l, c) } else { best });
        top_sum += top;
        total += count;
        per_token.push(TokenPurity { token, count, top_label: top_label.to_string(), purity: top as f64 / count as f64 });
    }
    Ok(PurityReport { per_token, mean: top_sum as f64 / total as f64, frames: total, classes: labels.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: u64, end: u64, label: &str) -> LabeledSpan {
        LabeledSpan { start, end, label: label.into() }
    }

    #[test]
    fn purity_examples() {
        let r = phoneme_purity((0..4).map(|_| (7, "s"))).unwrap();
        assert_eq!(r.per_token[0].purity, 1.0);
        let r = phoneme_purity([(1, "a"), (1, "a"), (1, "b"), (1, "a")]).unwrap();
        assert_eq!(r.per_token[0].purity, 0.75);
        assert!(phoneme_purity(std::iter::empty()).is_err());
    }

    #[test]
    fn alignment_uses_window_start() {
        let spans = [span(0, 160, "a"), span(160, 400, "b"), span(800, 900, "c")];
        let got = align_frames(13, 0, &spans);
        assert_eq!(&got[..6], &[Some("a"), Some("a"), Some("b"), Some("b"), Some("b"), None]);
        assert_eq!(&got[10..], &[Some("c"), Some("c"), None]);
        let shifted = align_frames(2, 80, &spans);
        assert_eq!(shifted, vec![Some("a"), Some("b")]);
    }

    #[test]
    fn span_intervals_agree_with_frame_alignment() {
        let spans = [span(0, 160, "a"), span(161, 400, "b"), span(801, 840, "c"), span(900, 5000, "d")];
        for offset in [0, 80, 95] {
            let labels = align_frames(40, offset, &spans);
            for sp in &spans {
                let want: Vec<usize> = (0..40).filter(|&t| labels[t] == Some(sp.label.as_str())).collect();
                let got: Vec<usize> = span_to_tokens(sp, offset, 40).map_or(vec![], |(a, b)| (a..b).collect());
                assert_eq!(got, want, "{} at offset {offset}", sp.label);
            }
        }
    }
}
