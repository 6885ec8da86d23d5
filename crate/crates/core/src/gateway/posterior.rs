use serde::{Deserialize, Serialize};

use super::GenerationResponse;
use crate::dataset::TaskConfig;

/// Probability mass given to the matched class when only surface text is available.
pub const SURFACE_EPSILON: f64 = 0.02;

/// Distribution over the task's classes, in `TaskConfig::classes` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassPosterior(Vec<f64>);

impl ClassPosterior {
    pub fn uniform(p: usize) -> Self {
        Self(vec![1.0 / p as f64; p])
    }

    /// Normalizes non-negative scores. Returns `None` when they carry no mass.
    pub fn from_scores(scores: Vec<f64>) -> Option<Self> {
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return None;
        }
        let total: f64 = scores.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return None;
        }
        Some(Self(scores.into_iter().map(|s| s / total).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Index of the most probable class; ties go to the earlier class.
    pub fn argmax(&self) -> usize {
        argmax_first(&self.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorSource {
    Logprobs,
    SurfaceMatch,
    NoVerbaliserMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub posterior: ClassPosterior,
    pub source: PosteriorSource,
}

impl Extraction {
    pub fn no_verbaliser_match(&self) -> bool {
        self.source == PosteriorSource::NoVerbaliserMatch
    }
}

/// Maps a generation onto the task's classes through the verbaliser.
///
/// First-token candidate logprobs win when any candidate is a verbaliser
/// token: each class scores the summed probability of its tokens, then the
/// scores are renormalized. Otherwise the earliest verbaliser token in the
/// text takes `1 - SURFACE_EPSILON` and the other classes share the rest.
/// With no match at all the posterior is uniform.
pub fn extract_posterior(resp: &GenerationResponse, task: &TaskConfig) -> Extraction {
    let p = task.num_classes();
    let vocab: Vec<Vec<String>> = task
        .classes
        .iter()
        .map(|c| task.verbaliser.get(c).map(|ts| ts.iter().map(|t| t.trim().to_lowercase()).collect()).unwrap_or_default())
        .collect();

    if let Some(cands) = &resp.token_logprobs {
        let mut scores = vec![0.0; p];
        for cand in cands {
            let tok = cand.token.trim().to_lowercase();
            if let Some(ci) = vocab.iter().position(|ts| ts.contains(&tok)) {
                scores[ci] += cand.logprob.exp();
            }
        }
        if let Some(posterior) = ClassPosterior::from_scores(scores) {
            return Extraction { posterior, source: PosteriorSource::Logprobs };
        }
    }

    if let Some(ci) = first_surface_match(&resp.text, &vocab) {
        let rest = SURFACE_EPSILON / (p - 1) as f64;
        let mut probs = vec![rest; p];
        probs[ci] = 1.0 - SURFACE_EPSILON;
        return Extraction { posterior: ClassPosterior(probs), source: PosteriorSource::SurfaceMatch };
    }

    Extraction { posterior: ClassPosterior::uniform(p), source: PosteriorSource::NoVerbaliserMatch }
}

/// Class of the verbaliser token occurring earliest in `text` as a whole
/// word (case-insensitive). Longer tokens win ties at the same offset.
fn first_surface_match(text: &str, vocab: &[Vec<String>]) -> Option<usize> {
    let lower = text.to_lowercase();
    let mut best: Option<(usize, usize, usize)> = None; // (offset, -len as key, class)
    for (ci, tokens) in vocab.iter().enumerate() {
        for tok in tokens {
            if let Some(off) = find_word(&lower, tok) {
                let better = match best {
                    None => true,
                    Some((bo, blen, _)) => off < bo || (off == bo && tok.len() > blen),
                };
                if better {
                    best = Some((off, tok.len(), ci));
                }
            }
        }
    }
    best.map(|(_, _, ci)| ci)
}

fn find_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(needle) {
        let start = from + rel;
        let end = start + needle.len();
        let before_ok = haystack[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}
