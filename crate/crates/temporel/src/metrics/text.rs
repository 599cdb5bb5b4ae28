//! Text-similarity scores for generated scene descriptions.
//!
//! All scorers share one tokenization: lowercase, punctuation split into
//! standalone tokens, whitespace-delimited. Scores are sentence-level (one
//! prediction against one reference) except CIDEr-D, whose TF-IDF weights
//! come from the reference set of the whole run.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Smoothing floor for zero n-gram counts in precision scores.
const SMOOTH_EPS: f64 = 1e-9;

/// Highest n-gram order used by CIDEr-D.
const CIDER_MAX_ORDER: usize = 4;
/// Gaussian length-penalty width for CIDEr-D, in tokens.
const CIDER_SIGMA: f64 = 6.0;
/// Conventional CIDEr-D output scale.
const CIDER_SCALE: f64 = 10.0;

/// Lowercases, separates punctuation into its own tokens, and splits on
/// whitespace: `"A red car, turning."` becomes
/// `["a", "red", "car", ",", "turning", "."]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(|c| c.to_lowercase()) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Weighted n-gram precision score: per-order weights over clipped modified
/// precisions, combined as a weighted geometric mean, with an optional
/// brevity penalty. BLEU-N is the uniform-weight instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NgramConfig {
    pub max_order: usize,
    /// One non-negative weight per order `1..=max_order`; not all zero.
    pub weights: Vec<f64>,
    /// Apply `exp(1 - |ref| / |pred|)` when the prediction is shorter than
    /// the reference.
    pub brevity_penalty: bool,
}

impl NgramConfig {
    /// Uniform weights over orders `1..=order` with the brevity penalty on.
    pub fn bleu(order: usize) -> Self {
        NgramConfig {
            max_order: order,
            weights: vec![1.0; order],
            brevity_penalty: true,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |reason: &str| MetricsError::BadNgramConfig {
            reason: reason.to_string(),
        };
        if self.max_order == 0 {
            return Err(bad("max_order must be >= 1"));
        }
        if self.weights.len() != self.max_order {
            return Err(bad("need exactly one weight per order"));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(bad("weights must be finite and non-negative"));
        }
        if self.weights.iter().all(|w| *w == 0.0) {
            return Err(bad("weights must not all be zero"));
        }
        Ok(())
    }
}

/// Scores tokenized texts under an [`NgramConfig`].
///
/// Orders longer than the prediction contribute nothing (their weight is
/// dropped and the rest renormalized); a zero clipped count contributes the
/// smoothing floor of 1e-9 instead of collapsing the score to zero. An empty
/// prediction scores 0; identical non-empty texts score 1.
pub fn ngram_score(pred: &str, reference: &str, cfg: &NgramConfig) -> Result<f64, MetricsError> {
    cfg.validate()?;
    let pred_tok = tokenize(pred);
    let ref_tok = tokenize(reference);
    if pred_tok.is_empty() {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    let mut weight_sum = 0.0;
    for n in 1..=cfg.max_order.min(pred_tok.len()) {
        let w = cfg.weights[n - 1];
        if w == 0.0 {
            continue;
        }
        let pred_counts = ngram_counts(&pred_tok, n);
        let ref_counts = ngram_counts(&ref_tok, n);
        let total: u64 = pred_counts.values().sum();
        let clipped: u64 = pred_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if clipped == 0 {
            SMOOTH_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_sum += w * precision.ln();
        weight_sum += w;
    }
    if weight_sum == 0.0 {
        return Ok(0.0);
    }

    let mut score = (log_sum / weight_sum).exp();
    if cfg.brevity_penalty && pred_tok.len() < ref_tok.len() {
        score *= (1.0 - ref_tok.len() as f64 / pred_tok.len() as f64).exp();
    }
    Ok(score)
}

/// BLEU-N with uniform weights; `order` is typically 3 or 4.
pub fn bleu(pred: &str, reference: &str, order: usize) -> f64 {
    assert!(
        (1..=8).contains(&order),
        "bleu order must be in 1..=8, got {order}"
    );
    ngram_score(pred, reference, &NgramConfig::bleu(order)).expect("uniform config is valid")
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1: longest-common-subsequence precision and recall combined as
/// `2PR / (P + R)`; 0 when there is no common subsequence or either side is
/// empty.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let p_tok = tokenize(pred);
    let r_tok = tokenize(reference);
    let lcs = lcs_len(&p_tok, &r_tok);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / p_tok.len() as f64;
    let r = lcs as f64 / r_tok.len() as f64;
    2.0 * p * r / (p + r)
}

/// Finds the minimum chunk count over all maximum exact-match alignments.
///
/// Depth-first search over prediction positions with branch-and-bound on the
/// chunk count; exact for realistic sentence lengths, with a node budget
/// guarding adversarial inputs (the best alignment found is returned if the
/// budget trips).
fn min_chunks(pred: &[String], reference: &[String]) -> (usize, usize) {
    // Per-word match quota: every maximum matching matches exactly
    // min(pred count, ref count) occurrences of each word.
    let mut ref_positions: HashMap<&String, Vec<usize>> = HashMap::new();
    for (i, w) in reference.iter().enumerate() {
        ref_positions.entry(w).or_default().push(i);
    }
    let mut pred_count: HashMap<&String, usize> = HashMap::new();
    for w in pred {
        *pred_count.entry(w).or_insert(0) += 1;
    }
    let mut quota: HashMap<&String, usize> = HashMap::new();
    let mut matches = 0usize;
    for (w, pc) in &pred_count {
        let rc = ref_positions.get(*w).map_or(0, |v| v.len());
        let q = (*pc).min(rc);
        if q > 0 {
            quota.insert(w, q);
            matches += q;
        }
    }
    if matches == 0 {
        return (0, 0);
    }

    struct Search<'a> {
        pred: &'a [String],
        ref_positions: &'a HashMap<&'a String, Vec<usize>>,
        quota: HashMap<&'a String, usize>,
        left: HashMap<&'a String, usize>,
        ref_used: Vec<bool>,
        best: usize,
        nodes: usize,
    }

    const NODE_BUDGET: usize = 500_000;

    impl<'a> Search<'a> {
        fn dfs(&mut self, pos: usize, last: Option<(usize, usize)>, chunks: usize) {
            if chunks >= self.best {
                return;
            }
            self.nodes += 1;
            if self.nodes > NODE_BUDGET {
                return;
            }
            let Some(word) = self.pred.get(pos) else {
                self.best = chunks;
                return;
            };
            let q = self.quota.get(word).copied().unwrap_or(0);
            let left = self.left.get_mut(word).expect("word counted");
            *left -= 1;
            let can_skip = *left >= q;

            if q > 0 {
                self.quota.insert(word, q - 1);
                // Prefer the continuation that extends the current chunk so
                // the first completed path is already good.
                let positions = self.ref_positions[word].clone();
                let mut ordered: Vec<usize> = positions;
                if let Some((lp, lr)) = last {
                    if lp + 1 == pos {
                        ordered.sort_by_key(|&r| (r != lr + 1, r));
                    }
                }
                for r in ordered {
                    if self.ref_used[r] {
                        continue;
                    }
                    let contiguous = matches!(last, Some((lp, lr)) if lp + 1 == pos && lr + 1 == r);
                    let next_chunks = chunks + usize::from(!contiguous);
                    self.ref_used[r] = true;
                    self.dfs(pos + 1, Some((pos, r)), next_chunks);
                    self.ref_used[r] = false;
                }
                self.quota.insert(word, q);
            }
            if can_skip {
                self.dfs(pos + 1, last, chunks);
            }
            *self.left.get_mut(word).expect("word counted") += 1;
        }
    }

    let mut left: HashMap<&String, usize> = HashMap::new();
    for w in pred {
        *left.entry(w).or_insert(0) += 1;
    }
    let ref_used = vec![false; reference.len()];
    let mut search = Search {
        pred,
        ref_positions: &ref_positions,
        quota,
        left,
        ref_used,
        best: matches + 1,
        nodes: 0,
    };
    search.dfs(0, None, 0);
    // Every alignment has at most one chunk per match; the min() only
    // matters if the node budget tripped before the first leaf.
    (matches, search.best.min(matches))
}

/// METEOR with exact unigram matching only: harmonic mean weighted toward
/// recall (`10PR / (R + 9P)`) times a fragmentation penalty
/// `1 - 0.5 (chunks / matches)^3`, where the alignment maximizes matches and
/// then minimizes chunks. 0 when nothing matches.
pub fn meteor(pred: &str, reference: &str) -> f64 {
    let p_tok = tokenize(pred);
    let r_tok = tokenize(reference);
    if p_tok.is_empty() || r_tok.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = min_chunks(&p_tok, &r_tok);
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / p_tok.len() as f64;
    let r = matches as f64 / r_tok.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// TF-IDF tables for CIDEr-D, built from the reference set of a run.
///
/// IDF is `ln(n_docs / max(1, df))`. A context built from a single reference
/// makes every weight zero (ln 1 = 0), so single-pair scores degenerate to
/// 0; CIDEr is meaningful at corpus scale only.
#[derive(Debug, Clone)]
pub struct CiderContext {
    n_docs: usize,
    log_n_docs: f64,
    doc_freq: Vec<HashMap<Vec<String>, u64>>,
}

impl CiderContext {
    pub fn from_refs<S: AsRef<str>>(refs: &[S]) -> Self {
        let mut doc_freq: Vec<HashMap<Vec<String>, u64>> =
            vec![HashMap::new(); CIDER_MAX_ORDER];
        for r in refs {
            let tokens = tokenize(r.as_ref());
            for n in 1..=CIDER_MAX_ORDER {
                let mut seen: HashMap<&[String], ()> = HashMap::new();
                if tokens.len() >= n {
                    for gram in tokens.windows(n) {
                        seen.entry(gram).or_insert(());
                    }
                }
                for (gram, ()) in seen {
                    *doc_freq[n - 1].entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        CiderContext {
            n_docs: refs.len(),
            log_n_docs: (refs.len().max(1) as f64).ln(),
            doc_freq,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.doc_freq[n - 1].get(gram).copied().unwrap_or(0).max(1);
        self.log_n_docs - (df as f64).ln()
    }
}

fn tfidf_vec(tokens: &[String], n: usize, ctx: &CiderContext) -> HashMap<Vec<String>, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(gram, tf)| {
            let w = tf as f64 * ctx.idf(n, gram);
            (gram.to_vec(), w)
        })
        .collect()
}

/// CIDEr-D for one prediction/reference pair under a run-level IDF context:
/// for each order 1..=4, the clipped TF-IDF cosine times a Gaussian length
/// penalty (sigma = 6 tokens), averaged over orders and scaled by 10.
pub fn cider_pair(pred: &str, reference: &str, ctx: &CiderContext) -> f64 {
    let p_tok = tokenize(pred);
    let r_tok = tokenize(reference);
    let delta = p_tok.len() as f64 - r_tok.len() as f64;
    let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut acc = 0.0;
    for n in 1..=CIDER_MAX_ORDER {
        let hv = tfidf_vec(&p_tok, n, ctx);
        let rv = tfidf_vec(&r_tok, n, ctx);
        let hn: f64 = hv.values().map(|w| w * w).sum::<f64>().sqrt();
        let rn: f64 = rv.values().map(|w| w * w).sum::<f64>().sqrt();
        if hn > 0.0 && rn > 0.0 {
            // Clipped numerator: a prediction repeating an n-gram more often
            // than the reference gains nothing from the excess.
            let num: f64 = hv
                .iter()
                .filter_map(|(gram, &hw)| rv.get(gram).map(|&rw| hw.min(rw) * rw))
                .sum();
            acc += gauss * num / (hn * rn);
        }
    }
    CIDER_SCALE * acc / CIDER_MAX_ORDER as f64
}

/// Per-pair CIDEr-D scores plus their corpus mean.
#[derive(Debug, Clone, Serialize)]
pub struct CiderScores {
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

/// Scores each prediction against its paired reference, with IDF computed
/// over the full reference set.
pub fn cider<S: AsRef<str>>(preds: &[S], refs: &[S]) -> Result<CiderScores, MetricsError> {
    if preds.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            left: preds.len(),
            right: refs.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty { what: "cider corpus" });
    }
    let ctx = CiderContext::from_refs(refs);
    let per_pair: Vec<f64> = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| cider_pair(p.as_ref(), r.as_ref(), &ctx))
        .collect();
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(CiderScores { per_pair, mean })
}

/// The five text-similarity scores for one prediction/reference pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

/// Computes every sentence-level score plus CIDEr-D under `ctx`.
pub fn text_similarity(pred: &str, reference: &str, ctx: &CiderContext) -> SimilarityScores {
    SimilarityScores {
        bleu3: bleu(pred, reference, 3),
        bleu4: bleu(pred, reference, 4),
        rouge_l: rouge_l(pred, reference),
        meteor: meteor(pred, reference),
        cider: cider_pair(pred, reference, ctx),
    }
}

/// Unweighted mean of each score over measured horizons (the per-horizon
/// inputs are typically already item means). `None` for empty input.
pub fn mean_over_horizons(per_horizon: &[(u8, SimilarityScores)]) -> Option<SimilarityScores> {
    if per_horizon.is_empty() {
        return None;
    }
    let n = per_horizon.len() as f64;
    let mut acc = SimilarityScores {
        bleu3: 0.0,
        bleu4: 0.0,
        rouge_l: 0.0,
        meteor: 0.0,
        cider: 0.0,
    };
    for (_, s) in per_horizon {
        acc.bleu3 += s.bleu3;
        acc.bleu4 += s.bleu4;
        acc.rouge_l += s.rouge_l;
        acc.meteor += s.meteor;
        acc.cider += s.cider;
    }
    Some(SimilarityScores {
        bleu3: acc.bleu3 / n,
        bleu4: acc.bleu4 / n,
        rouge_l: acc.rouge_l / n,
        meteor: acc.meteor / n,
        cider: acc.cider / n,
    })
}
