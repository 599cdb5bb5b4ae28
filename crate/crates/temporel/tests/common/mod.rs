//! Shared fixtures and independent oracle implementations for the
//! integration suites. The oracles favor the most literal transcription of
//! each definition (string-keyed maps, exhaustive enumeration, direct 2D
//! convolution) so they share no shortcuts with the library code they check.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use temporel::corpus::{Category, Clip, FrameRef, Permutation, VqaItem};
use temporel::visual_prep::{ChangeMapConfig, GrayBuffer};

pub fn oracle_tokenize(text: &str) -> Vec<String> {
    let spaced: String = text
        .to_lowercase()
        .chars()
        .flat_map(|c| {
            if c.is_ascii_punctuation() {
                vec![' ', c, ' ']
            } else {
                vec![c]
            }
        })
        .collect();
    spaced.split_whitespace().map(str::to_string).collect()
}

fn oracle_ngrams(tokens: &[String], n: usize) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n && n > 0 {
        for start in 0..=(tokens.len() - n) {
            let gram = tokens[start..start + n].join("\u{1f}");
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-N by the book: clipped modified precision per order (orders longer
/// than the prediction dropped, weights renormalized), 1e-9 floor for zero
/// counts, geometric mean, brevity penalty when the prediction is shorter.
pub fn oracle_bleu(pred: &str, reference: &str, order: usize) -> f64 {
    let p = oracle_tokenize(pred);
    let r = oracle_tokenize(reference);
    if p.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=order.min(p.len()) {
        let pc = oracle_ngrams(&p, n);
        let rc = oracle_ngrams(&r, n);
        let total: u64 = pc.values().sum();
        let mut clipped = 0u64;
        for (gram, &c) in &pc {
            clipped += c.min(rc.get(gram).copied().unwrap_or(0));
        }
        let precision = if clipped == 0 {
            1e-9
        } else {
            clipped as f64 / total as f64
        };
        log_sum += precision.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let mut score = (log_sum / orders as f64).exp();
    if p.len() < r.len() {
        score *= (1.0 - r.len() as f64 / p.len() as f64).exp();
    }
    score
}

/// ROUGE-L F1 over a full LCS table.
pub fn oracle_rouge_l(pred: &str, reference: &str) -> f64 {
    let p = oracle_tokenize(pred);
    let r = oracle_tokenize(reference);
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut table = vec![vec![0usize; r.len() + 1]; p.len() + 1];
    for i in 1..=p.len() {
        for j in 1..=r.len() {
            table[i][j] = if p[i - 1] == r[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let lcs = table[p.len()][r.len()];
    if lcs == 0 {
        return 0.0;
    }
    let prec = lcs as f64 / p.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

/// Enumerates every exact-match alignment (each prediction token matched to
/// at most one unused reference occurrence, or skipped) and keeps the best
/// under (max matches, then min chunks). Exponential, fine for short
/// sentences.
fn oracle_alignment(pred: &[String], reference: &[String]) -> (usize, usize) {
    fn chunks_of(pairs: &[(usize, usize)]) -> usize {
        let mut chunks = 0;
        for (i, &(p, r)) in pairs.iter().enumerate() {
            let contiguous =
                i > 0 && pairs[i - 1].0 + 1 == p && pairs[i - 1].1 + 1 == r;
            if !contiguous {
                chunks += 1;
            }
        }
        chunks
    }
    fn rec(
        pos: usize,
        pred: &[String],
        reference: &[String],
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        best: &mut (usize, usize),
    ) {
        if pos == pred.len() {
            let matches = current.len();
            let chunks = chunks_of(current);
            if matches > best.0 || (matches == best.0 && chunks < best.1) {
                *best = (matches, chunks);
            }
            return;
        }
        for r in 0..reference.len() {
            if !used[r] && reference[r] == pred[pos] {
                used[r] = true;
                current.push((pos, r));
                rec(pos + 1, pred, reference, used, current, best);
                current.pop();
                used[r] = false;
            }
        }
        rec(pos + 1, pred, reference, used, current, best);
    }
    let mut best = (0, usize::MAX);
    let mut used = vec![false; reference.len()];
    rec(0, pred, reference, &mut used, &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

/// METEOR (exact-match stage): Fmean = 10PR/(R+9P), fragmentation penalty
/// 0.5 (chunks/matches)^3, alignment from exhaustive enumeration.
pub fn oracle_meteor(pred: &str, reference: &str) -> f64 {
    let p = oracle_tokenize(pred);
    let r = oracle_tokenize(reference);
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (matches, chunks) = oracle_alignment(&p, &r);
    if matches == 0 {
        return 0.0;
    }
    let prec = matches as f64 / p.len() as f64;
    let rec = matches as f64 / r.len() as f64;
    let fmean = 10.0 * prec * rec / (rec + 9.0 * prec);
    fmean * (1.0 - 0.5 * (chunks as f64 / matches as f64).powi(3))
}

/// CIDEr-D: clipped TF-IDF cosine per order 1..=4 with IDF over the
/// reference set, Gaussian length penalty sigma=6, mean over orders, x10.
pub fn oracle_cider(pred: &str, reference: &str, all_refs: &[&str]) -> f64 {
    let n_docs = all_refs.len() as f64;
    let tokenized_refs: Vec<Vec<String>> =
        all_refs.iter().map(|r| oracle_tokenize(r)).collect();
    let p = oracle_tokenize(pred);
    let r = oracle_tokenize(reference);
    let delta = p.len() as f64 - r.len() as f64;
    let gauss = (-delta * delta / 72.0).exp();
    let mut acc = 0.0;
    for n in 1..=4usize {
        let mut df: BTreeMap<String, u64> = BTreeMap::new();
        for tokens in &tokenized_refs {
            for gram in oracle_ngrams(tokens, n).into_keys() {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        let idf = |gram: &str| -> f64 {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            n_docs.max(1.0).ln() - d.ln()
        };
        let pv: BTreeMap<String, f64> = oracle_ngrams(&p, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * idf(&g);
                (g, w)
            })
            .collect();
        let rv: BTreeMap<String, f64> = oracle_ngrams(&r, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * idf(&g);
                (g, w)
            })
            .collect();
        let pn: f64 = pv.values().map(|w| w * w).sum::<f64>().sqrt();
        let rn: f64 = rv.values().map(|w| w * w).sum::<f64>().sqrt();
        if pn > 0.0 && rn > 0.0 {
            let mut num = 0.0;
            for (gram, &pw) in &pv {
                if let Some(&rw) = rv.get(gram) {
                    num += pw.min(rw) * rw;
                }
            }
            acc += gauss * num / (pn * rn);
        }
    }
    10.0 * acc / 4.0
}

fn gaussian_2d(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as isize;
    let mut kernel = vec![vec![0.0; size]; size];
    let mut sum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let dy = i as isize - r;
            let dx = j as isize - r;
            *cell = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            sum += *cell;
        }
    }
    for row in &mut kernel {
        for cell in row {
            *cell /= sum;
        }
    }
    kernel
}

fn clamped(data: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let xc = x.clamp(0, w as isize - 1) as usize;
    let yc = y.clamp(0, h as isize - 1) as usize;
    data[yc * w + xc]
}

/// The change-map pipeline as one naive pass: absolute difference, direct
/// (non-separable) 2D Gaussian convolution with clamp-to-edge borders, then
/// Sobel gradient magnitude.
pub fn oracle_change_map(
    current: &GrayBuffer,
    previous: &GrayBuffer,
    cfg: &ChangeMapConfig,
) -> Vec<f64> {
    let (w, h) = (current.width(), current.height());
    assert_eq!((w, h), (previous.width(), previous.height()));
    let diff: Vec<f64> = current
        .data()
        .iter()
        .zip(previous.data())
        .map(|(a, b)| (a - b).abs())
        .collect();

    let sigma = 0.3 * ((cfg.gaussian_kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let kernel = gaussian_2d(cfg.gaussian_kernel, sigma);
    let r = (cfg.gaussian_kernel / 2) as isize;
    let mut smoothed = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                for (j, &kv) in row.iter().enumerate() {
                    acc += kv
                        * clamped(&diff, w, h, x + j as isize - r, y + i as isize - r);
                }
            }
            smoothed[y as usize * w + x as usize] = acc;
        }
    }

    let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let sy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let v = clamped(&smoothed, w, h, x + dx, y + dy);
                    gx += sx[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy += sy[(dy + 1) as usize][(dx + 1) as usize] * v;
                }
            }
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// All k! permutations as slot maps, lexicographic.
pub fn all_permutations(k: usize) -> Vec<Permutation> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        let k = used.len();
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for s in 0..k {
            if !used[s] {
                used[s] = true;
                prefix.push(s);
                rec(prefix, used, out);
                prefix.pop();
                used[s] = false;
            }
        }
    }
    let mut slot_maps = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut slot_maps);
    slot_maps
        .into_iter()
        .map(|slots| Permutation::from_slots(slots).expect("bijective by construction"))
        .collect()
}

/// A K-option item answerable without any image.
pub fn mc_item(item_id: &str, k: usize, correct: usize, horizon: u8) -> VqaItem {
    VqaItem {
        item_id: item_id.to_string(),
        clip_id: "c0".to_string(),
        anchor_t: 6,
        horizon,
        question: format!("What does vehicle {item_id} do next?"),
        options: (0..k).map(|i| format!("option text {i}")).collect(),
        correct,
        categories: BTreeSet::from([Category::General]),
    }
}

/// A clip covering timestamps `t0..=t1` at 1 fps with fake frame paths.
pub fn clip(clip_id: &str, t0: i64, t1: i64) -> Clip {
    Clip {
        clip_id: clip_id.to_string(),
        fps: 1,
        frames: (t0..=t1)
            .map(|t| FrameRef {
                t,
                path: format!("frames/{clip_id}_{t}.png").into(),
            })
            .collect(),
    }
}

/// File names and contents of a directory, sorted by name.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("directory listable")
        .map(|e| {
            let e = e.expect("entry readable");
            (
                e.file_name().into_string().expect("utf-8 name"),
                std::fs::read(e.path()).expect("file readable"),
            )
        })
        .collect();
    out.sort();
    out
}

/// Writes a one-clip JSONL corpus with `n` four-option items (anchor 6,
/// horizon 4, correct index `i % 4`).
pub fn write_corpus(path: &Path, n: usize) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let c = clip("c0", 0, 20);
    let mut line = serde_json::to_value(&c).expect("clip serializes");
    line["kind"] = "clip".into();
    writeln!(f, "{line}")?;
    for i in 0..n {
        let mut item = mc_item(&format!("i{i:04}"), 4, i % 4, 4);
        item.question = format!("Which way does vehicle {i} turn at the junction?");
        let mut line = serde_json::to_value(&item).expect("item serializes");
        line["kind"] = "item".into();
        writeln!(f, "{line}")?;
    }
    f.flush()
}
