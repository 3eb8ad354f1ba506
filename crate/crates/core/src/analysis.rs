//! Unsupervised segmentation from attention maps, segmentation scoring by
//! optimal matching, and input perturbations for robustness curves.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::model::Model;
use crate::real::Real;
use crate::training::{char_accuracy, reconstruction_ce};
use crate::Result;

/// Inclusive `(start, end)` character spans, ascending and non-overlapping.
pub type Segmentation = Vec<(usize, usize)>;

/// True when `spans` are ascending, non-overlapping and inside `0..len`.
pub fn is_valid_segmentation(spans: &[(usize, usize)], len: usize) -> bool {
    let mut next = 0;
    spans.iter().all(|&(s, e)| {
        let ok = s >= next && s <= e && e < len;
        next = e + 1;
        ok
    })
}

/// For each query row, the retained data component with the largest weight.
/// Only the first `retained.len()` columns are data components, so the prior
/// column of an `m x (n+1)` map never wins. Ties go to the lowest index.
pub fn argmax_components<T: Real>(weights: &Matrix<T>, retained: &[bool]) -> Vec<Option<usize>> {
    let n = weights.cols().min(retained.len());
    (0..weights.rows())
        .map(|i| {
            let row = weights.row(i);
            (0..n)
                .filter(|&j| retained[j])
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
        })
        .collect()
}

/// Maximal runs of equal labels, as inclusive spans.
pub fn runs<L: PartialEq>(labels: &[L]) -> Segmentation {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push((start, i - 1));
            start = i;
        }
    }
    out
}

/// Segments a sequence from an `m x (n+1)` denoising attention map (or an
/// `m x n` standard one, with every flag set): each
/// position is labelled with its argmax retained component and equal runs
/// become segments.
pub fn extract_segments<T: Real>(weights: &Matrix<T>, retained: &[bool]) -> Segmentation {
    runs(&argmax_components(weights, retained))
}

/// Whitespace-delimited words of `text` as inclusive character spans.
pub fn word_spans(text: &[char]) -> Segmentation {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.iter().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len() - 1));
    }
    out
}

/// Length of the longest common contiguous substring.
pub fn longest_common_substring<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Maximum-weight assignment on a rectangular integer matrix. Returns, for
/// each row, the matched column (rows beyond the column count stay
/// unmatched) and the optimal total.
pub fn hungarian(weights: &[Vec<i64>]) -> (Vec<Option<usize>>, i64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return (Vec::new(), 0);
    }
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    // Square minimisation problem; padding cells cost as much as a zero weight.
    let cost = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            max - weights[i][j]
        } else {
            max
        }
    };
    // Shortest augmenting paths with potentials, 1-based with a virtual column 0.
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let c = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if c < minv[j] {
                        minv[j] = c;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![None; rows];
    let mut total = 0;
    for j in 1..=n {
        let i = owner[j] - 1;
        if i < rows && j - 1 < cols {
            assign[i] = Some(j - 1);
            total += weights[i][j - 1];
        }
    }
    (assign, total)
}

/// Among the maximum-weight assignments, the lexicographically smallest one
/// (row by row, columns ascending, "unmatched" last), where zero-weight
/// matches are left unmatched. Makes the result independent of how the
/// solver breaks ties.
pub fn canonical_assignment(weights: &[Vec<i64>]) -> (Vec<Option<usize>>, i64) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let (_, best) = hungarian(weights);
    let mut fixed: Vec<Option<usize>> = Vec::with_capacity(rows);
    let mut used = vec![false; cols];
    let mut gained = 0;
    for i in 0..rows {
        let free_cols: Vec<usize> = (0..cols).filter(|&j| !used[j]).collect();
        let rest_rows = i + 1..rows;
        // Best total of the remaining rows on the remaining columns.
        let rest = |skip: Option<usize>| -> i64 {
            let sub: Vec<Vec<i64>> = rest_rows
                .clone()
                .map(|r| {
                    free_cols
                        .iter()
                        .filter(|&&c| Some(c) != skip)
                        .map(|&c| weights[r][c])
                        .collect()
                })
                .collect();
            hungarian(&sub).1
        };
        let mut chosen = None;
        for &j in free_cols.iter().filter(|&&j| weights[i][j] > 0) {
            if gained + weights[i][j] + rest(Some(j)) == best {
                chosen = Some(j);
                break;
            }
        }
        debug_assert!(chosen.is_some() || gained + rest(None) == best);
        if let Some(j) = chosen {
            used[j] = true;
            gained += weights[i][j];
        }
        fixed.push(chosen);
    }
    (fixed, best)
}

/// One matched (segment, word) pair with positive overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegPair {
    pub segment: (usize, usize),
    pub word: (usize, usize),
    pub overlap: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pairs: Vec<SegPair>,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores predicted segments against reference words of `text`.
///
/// Overlap of a pair is the longest common substring of the two texts.
/// Segments and words are matched one-to-one maximising total overlap; each
/// matched pair scores `P = overlap / |segment|` and `R = overlap / |word|`.
/// P and R are averaged over the `max(#segments, #words)` pairs of a complete
/// matching, unmatched items counting as zero-score pairs, and F1 is their
/// harmonic mean. Whitespace-only segments are ignored; the order of
/// `pred` does not matter.
pub fn score_segmentation(text: &[char], pred: &[(usize, usize)], words: &[(usize, usize)]) -> SegScore {
    let mut segs: Vec<(usize, usize)> = pred
        .iter()
        .copied()
        .filter(|&(s, e)| !text[s..=e].iter().all(|c| c.is_whitespace()))
        .collect();
    segs.sort_unstable();
    if segs.is_empty() || words.is_empty() {
        return SegScore::default();
    }
    let overlap: Vec<Vec<i64>> = segs
        .iter()
        .map(|&(s, e)| {
            words
                .iter()
                .map(|&(ws, we)| longest_common_substring(&text[s..=e], &text[ws..=we]) as i64)
                .collect()
        })
        .collect();
    let (assign, _) = canonical_assignment(&overlap);
    let pairs: Vec<SegPair> = assign
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|j| (i, j)))
        .filter(|&(i, j)| overlap[i][j] > 0)
        .map(|(i, j)| {
            let (seg, word) = (segs[i], words[j]);
            let o = overlap[i][j] as usize;
            SegPair {
                segment: seg,
                word,
                overlap: o,
                precision: o as f64 / (seg.1 - seg.0 + 1) as f64,
                recall: o as f64 / (word.1 - word.0 + 1) as f64,
            }
        })
        .collect();
    // A complete one-to-one matching has max(#segments, #words) pairs; the
    // ones without overlap, matched or not, score zero.
    let k = segs.len().max(words.len()) as f64;
    let precision = pairs.iter().map(|p| p.precision).sum::<f64>() / k;
    let recall = pairs.iter().map(|p| p.recall).sum::<f64>() / k;
    SegScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
        pairs,
    }
}

/// Corpus-level average of per-sequence P, R and F1.
pub fn mean_score(scores: &[SegScore]) -> (f64, f64, f64) {
    let k = scores.len().max(1) as f64;
    let sum = |f: fn(&SegScore) -> f64| scores.iter().map(f).sum::<f64>() / k;
    (sum(|s| s.precision), sum(|s| s.recall), sum(|s| s.f1))
}

/// Character-level input perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    Swap,
    Delete,
    Insert,
    Substitute,
}

impl Perturbation {
    pub const ALL: [Perturbation; 4] = [Self::Swap, Self::Delete, Self::Insert, Self::Substitute];

    pub fn name(self) -> &'static str {
        match self {
            Self::Swap => "swap",
            Self::Delete => "delete",
            Self::Insert => "insert",
            Self::Substitute => "substitute",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Applies `kind` independently at each position with probability `rate`.
///
/// Exactly two numbers are drawn per input position whatever the rate, so
/// with a shared seed the positions hit at a lower rate are a subset of those
/// hit at a higher one. Swaps exchange a character with its right neighbour
/// (each character moves at most once); insertions go before the position;
/// inserted and substituted characters are uniform over `vocab`. Deletion
/// never empties a non-empty input: the position with the largest draw stays.
pub fn perturb<R: Rng + ?Sized>(
    tokens: &[usize],
    kind: Perturbation,
    rate: f64,
    vocab: Range<usize>,
    rng: &mut R,
) -> Vec<usize> {
    let draws: Vec<(f64, usize)> = tokens
        .iter()
        .map(|_| (rng.random::<f64>(), rng.random_range(vocab.clone())))
        .collect();
    let hit = |i: usize| draws[i].0 < rate;
    match kind {
        Perturbation::Swap => {
            let mut out = tokens.to_vec();
            let mut i = 0;
            while i + 1 < out.len() {
                if hit(i) {
                    out.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
            out
        }
        Perturbation::Delete => {
            let out: Vec<usize> = (0..tokens.len()).filter(|&i| !hit(i)).map(|i| tokens[i]).collect();
            if out.is_empty() && !tokens.is_empty() {
                let keep = (0..tokens.len()).fold(0, |b, i| if draws[i].0 > draws[b].0 { i } else { b });
                return vec![tokens[keep]];
            }
            out
        }
        Perturbation::Insert => {
            let mut out = Vec::with_capacity(tokens.len() * 2);
            for (i, &t) in tokens.iter().enumerate() {
                if hit(i) {
                    out.push(draws[i].1);
                }
                out.push(t);
            }
            out
        }
        Perturbation::Substitute => (0..tokens.len())
            .map(|i| if hit(i) { draws[i].1 } else { tokens[i] })
            .collect(),
    }
}

/// Random stream for perturbing sequence `idx` with `kind`, shared across rates.
pub fn perturbation_rng(seed: u64, kind: Perturbation, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 48) ^ idx as u64);
    rng
}

/// Eval-mode reconstruction of one perturbed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub accuracy: f64,
    /// `None` when every data vector of the last layer was pruned.
    pub ce: Option<f64>,
}

/// Reconstructs `clean` from its perturbed copy with greedy decoding; a
/// fully pruned encoder output counts as accuracy 0.
pub fn robustness_point<T: Real>(
    model: &Model<T>,
    clean: &[usize],
    kind: Perturbation,
    rate: f64,
    vocab: Range<usize>,
    seed: u64,
    idx: usize,
) -> Result<RobustnessPoint> {
    let input = perturb(clean, kind, rate, vocab, &mut perturbation_rng(seed, kind, idx));
    match model.greedy_decode(&input, clean.len() + clean.len() / 2 + 4) {
        Ok(decoded) => Ok(RobustnessPoint {
            accuracy: char_accuracy(&decoded, clean),
            ce: Some(reconstruction_ce(model, &input, clean)?),
        }),
        Err(crate::Error::FinalLayerPruned { .. }) => Ok(RobustnessPoint {
            accuracy: 0.0,
            ce: None,
        }),
        Err(e) => Err(e),
    }
}

/// One row of a robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: Perturbation,
    pub rate: f64,
    pub accuracy: f64,
    pub ce: f64,
}

/// Averages points in order; CE is averaged over sequences that produced one.
pub fn robustness_row(kind: Perturbation, rate: f64, points: &[RobustnessPoint]) -> RobustnessRow {
    let k = points.len().max(1) as f64;
    let ces: Vec<f64> = points.iter().filter_map(|p| p.ce).collect();
    RobustnessRow {
        kind,
        rate,
        accuracy: points.iter().map(|p| p.accuracy).sum::<f64>() / k,
        ce: if ces.is_empty() {
            f64::NAN
        } else {
            ces.iter().sum::<f64>() / ces.len() as f64
        },
    }
}

/// Sequential robustness table over `kinds x rates`.
pub fn robustness_curve<T: Real>(
    model: &Model<T>,
    seqs: &[Vec<usize>],
    kinds: &[Perturbation],
    rates: &[f64],
    vocab: Range<usize>,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &rate in rates {
            let points = seqs
                .iter()
                .enumerate()
                .map(|(i, s)| robustness_point(model, s, kind, rate, vocab.clone(), seed, i))
                .collect::<Result<Vec<_>>>()?;
            rows.push(robustness_row(kind, rate, &points));
        }
    }
    Ok(rows)
}
