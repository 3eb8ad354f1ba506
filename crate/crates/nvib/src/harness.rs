//! Corpus-level analysis: robustness tables, segmentation scoring and
//! layerwise probing. Work is spread over sequences with rayon and reduced
//! in input order, so results do not depend on the thread count.

use std::ops::Range;
use std::path::Path;

use nvib_core::analysis::{
    extract_segments, robustness_point, robustness_row, score_segmentation, word_spans, Perturbation, RobustnessRow,
    SegScore, Segmentation,
};
use nvib_core::model::Model;
use nvib_core::probing::{extract_representations, train_probe, ProbeConfig, ProbeKind, ProbeReport};
use nvib_core::tokenizer::Vocab;
use nvib_core::{Matrix, Real};
use rayon::prelude::*;
use serde::Serialize;

use crate::attention::AttentionMap;
use crate::config::ProbeSection;
use crate::{Error, Result};

/// Robustness table over `kinds x rates`; identical to the sequential
/// [`nvib_core::analysis::robustness_curve`].
pub fn robustness<T: Real>(
    model: &Model<T>,
    seqs: &[Vec<usize>],
    kinds: &[Perturbation],
    rates: &[f64],
    vocab: Range<usize>,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::with_capacity(kinds.len() * rates.len());
    for &kind in kinds {
        for &rate in rates {
            let points = seqs
                .par_iter()
                .enumerate()
                .map(|(i, s)| robustness_point(model, s, kind, rate, vocab.clone(), seed, i))
                .collect::<nvib_core::Result<Vec<_>>>()?;
            rows.push(robustness_row(kind, rate, &points));
        }
    }
    Ok(rows)
}

/// Writes rows as CSV with the header `kind,rate,accuracy,ce`.
pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Segmentation of one sequence against its whitespace words.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedLine {
    pub text: String,
    pub segments: Segmentation,
    pub score: SegScore,
}

impl SegmentedLine {
    fn new(text: &str, segments: Segmentation) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let score = score_segmentation(&chars, &segments, &word_spans(&chars));
        Self {
            text: text.to_string(),
            segments,
            score,
        }
    }

    /// The text with `|` between segments.
    pub fn display(&self) -> String {
        let chars: Vec<char> = self.text.chars().collect();
        self.segments
            .iter()
            .map(|&(s, e)| chars[s..=e].iter().collect::<String>())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// One CSV row of a segmentation report.
#[derive(Serialize)]
pub struct SegmentRecord<'a> {
    pub index: usize,
    pub text: &'a str,
    pub segments: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SegmentedLine {
    pub fn record(&self, index: usize) -> SegmentRecord<'_> {
        SegmentRecord {
            index,
            text: &self.text,
            segments: self.display(),
            precision: self.score.precision,
            recall: self.score.recall,
            f1: self.score.f1,
        }
    }
}

/// Segments a stored attention map against the words of its input text.
pub fn segment_map(map: &AttentionMap) -> Result<SegmentedLine> {
    let n_chars = map.header.input.chars().count();
    if map.header.rows != n_chars {
        return Err(Error::Usage(format!(
            "attention map has {} rows but its input has {n_chars} characters",
            map.header.rows
        )));
    }
    Ok(SegmentedLine::new(&map.header.input, extract_segments(&map.matrix(), &map.retained_mask())))
}

/// Segments `text` from the eval-mode self-attention of encoder `layer`
/// (default: the last). A fully pruned layer still yields its trace.
pub fn segment_text<T: Real>(model: &Model<T>, vocab: &Vocab, text: &str, layer: Option<usize>) -> Result<SegmentedLine> {
    let depth = model.config().n_enc_layers;
    let layer = layer.unwrap_or(depth - 1);
    if layer >= depth {
        return Err(nvib_core::Error::LayerOutOfRange { layer, depth }.into());
    }
    let tokens = vocab.encode(text);
    let traces = match model.traces(&tokens) {
        Ok(t) => t,
        Err(e) if matches!(e.error, nvib_core::Error::FinalLayerPruned { .. }) => e.traces,
        Err(e) => return Err(e.error.into()),
    };
    let trace = traces.iter().find(|t| t.layer == layer).ok_or(nvib_core::Error::LayerOutOfRange { layer, depth })?;
    Ok(SegmentedLine::new(text, extract_segments(&trace.weights, &trace.retained)))
}

pub fn segment_corpus<T: Real>(
    model: &Model<T>,
    vocab: &Vocab,
    lines: &[String],
    layer: Option<usize>,
) -> Result<Vec<SegmentedLine>> {
    lines.par_iter().map(|l| segment_text(model, vocab, l, layer)).collect()
}

/// A labelled classification dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Labelled {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    /// Class names, sorted; labels index into this.
    pub classes: Vec<String>,
}

/// Reads `text<TAB>label` lines (no header).
pub fn load_labelled(path: &Path) -> Result<Labelled> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            k => Error::format(path, format!("{k:?}")),
        })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::format(path, format!("line {}: expected text<TAB>label", i + 1)));
        }
        rows.push((rec[0].to_string(), rec[1].trim().to_string()));
    }
    let mut classes: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
    classes.sort();
    classes.dedup();
    let labels = rows.iter().map(|(_, l)| classes.binary_search(l).expect("class listed")).collect();
    Ok(Labelled {
        texts: rows.into_iter().map(|(t, _)| t).collect(),
        labels,
        classes,
    })
}

/// Per-layer probe reports. Representations are extracted in parallel;
/// examples fully pruned at a layer are skipped there.
pub fn probe_layers<T: Real>(
    model: &Model<T>,
    inputs: &[Vec<usize>],
    labels: &[usize],
    n_classes: usize,
    kinds: &[ProbeKind],
    settings: &ProbeSection,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for layer in 0..model.config().n_enc_layers {
        let extracted: Vec<Option<Matrix<T>>> = inputs
            .par_iter()
            .map(|x| match extract_representations(model, x, layer) {
                Ok(s) => Ok(Some(s)),
                Err(nvib_core::Error::FinalLayerPruned { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<nvib_core::Result<_>>()?;
        let (sets, ys): (Vec<Matrix<T>>, Vec<usize>) =
            extracted.into_iter().zip(labels).filter_map(|(s, &y)| s.map(|s| (s, y))).unzip();
        for &kind in kinds {
            let mut cfg = ProbeConfig::defaults(kind, layer, n_classes);
            cfg.seed = seed;
            settings.apply(&mut cfg);
            cfg.validate(model.config().n_enc_layers)?;
            out.push(train_probe(&sets, &ys, &cfg)?.1);
        }
    }
    Ok(out)
}
