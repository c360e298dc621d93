//! Evaluation: bidirectional recall@k, zero-shot macro F1, cosine
//! similarity matrices, per-language z-scores, and inference timing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::bank::{write_file, EmbeddingBank};
use crate::error::{Error, Result};
use crate::numerics;
use crate::projector::ProjectionHead;

/// One line of a JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub metric: String,
    pub direction: Option<String>,
    pub k: Option<usize>,
    pub value: f64,
}

pub fn write_report(records: &[ReportRecord], path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(records).expect("records serialize");
    write_file(path, &json)
}

fn by_score_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// For each query row, indices of the `k` candidates with the largest dot
/// product (cosine, for unit rows), best first; ties go to the lower index.
pub fn retrieve_topk(queries: ArrayView2<f64>, candidates: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k > candidates.nrows() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} candidates",
            candidates.nrows()
        )));
    }
    if queries.ncols() != candidates.ncols() {
        return Err(Error::dim("retrieval width", candidates.ncols(), queries.ncols()));
    }
    let chunk = (8_388_608 / candidates.nrows()).clamp(1, 1024);
    let mut out = Vec::with_capacity(queries.nrows());
    for block in queries.axis_chunks_iter(Axis(0), chunk) {
        let sims = block.dot(&candidates.t());
        for row in sims.rows() {
            let mut scored: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, by_score_then_index);
                scored.truncate(k);
            }
            scored.sort_unstable_by(by_score_then_index);
            out.push(scored.into_iter().map(|(i, _)| i).collect());
        }
    }
    Ok(out)
}

/// Percentage of queries with at least one ground-truth id in their top `k`.
pub fn recall_at_k(rankings: &[Vec<usize>], ground_truth: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    if rankings.len() != ground_truth.len() {
        return Err(Error::dim("ground truth entries", rankings.len(), ground_truth.len()));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("no queries"));
    }
    let mut hits = 0usize;
    for (i, (ranked, gt)) in rankings.iter().zip(ground_truth).enumerate() {
        if gt.is_empty() {
            return Err(Error::invalid(format!("query {i} has an empty ground truth")));
        }
        if k > ranked.len() {
            return Err(Error::invalid(format!("k = {k} exceeds ranking length {}", ranked.len())));
        }
        if ranked[..k].iter().any(|c| gt.contains(c)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// image query, caption candidates
    I2T,
    /// caption query, image candidates
    T2I,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: Direction,
    pub ks: Vec<usize>,
    /// Percentages, aligned with `ks`.
    pub recall: Vec<f64>,
    pub queries: usize,
    pub candidates: usize,
}

impl DirectionReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub directions: Vec<DirectionReport>,
}

impl RetrievalReport {
    pub fn get(&self, d: Direction) -> Option<&DirectionReport> {
        self.directions.iter().find(|r| r.direction == d)
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        self.directions
            .iter()
            .flat_map(|d| {
                d.ks.iter().zip(&d.recall).map(move |(&k, &v)| ReportRecord {
                    metric: "recall".into(),
                    direction: Some(d.direction.as_str().into()),
                    k: Some(k),
                    value: v,
                })
            })
            .collect()
    }
}

/// Ground-truth sets pairing each query with the candidates sharing its label.
pub fn label_ground_truth(query_labels: &[usize], candidate_labels: &[usize]) -> Vec<BTreeSet<usize>> {
    let mut by_label: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (j, &l) in candidate_labels.iter().enumerate() {
        by_label.entry(l).or_default().insert(j);
    }
    query_labels
        .iter()
        .map(|l| by_label.get(l).cloned().unwrap_or_default())
        .collect()
}

/// Recall@k in the requested directions between projected images and
/// projected captions. An image and a caption match when their labels agree.
pub fn evaluate_retrieval(
    images: ArrayView2<f64>,
    image_labels: &[usize],
    captions: ArrayView2<f64>,
    caption_labels: &[usize],
    ks: &[usize],
    directions: &[Direction],
) -> Result<RetrievalReport> {
    if image_labels.len() != images.nrows() {
        return Err(Error::dim("image labels", images.nrows(), image_labels.len()));
    }
    if caption_labels.len() != captions.nrows() {
        return Err(Error::dim("caption labels", captions.nrows(), caption_labels.len()));
    }
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::invalid("no k values"))?;
    let mut out = Vec::new();
    for &d in directions {
        let (q, ql, c, cl) = match d {
            Direction::I2T => (images, image_labels, captions, caption_labels),
            Direction::T2I => (captions, caption_labels, images, image_labels),
        };
        let rankings = retrieve_topk(q, c, kmax)?;
        let gt = label_ground_truth(ql, cl);
        let recall = ks
            .iter()
            .map(|&k| recall_at_k(&rankings, &gt, k))
            .collect::<Result<Vec<_>>>()?;
        out.push(DirectionReport {
            direction: d,
            ks: ks.to_vec(),
            recall,
            queries: q.nrows(),
            candidates: c.nrows(),
        });
    }
    Ok(RetrievalReport { directions: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl ClassifyReport {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::dim("predictions", labels.len(), predictions.len()));
        }
        if labels.is_empty() {
            return Err(Error::invalid("no samples"));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &t) in predictions.iter().zip(labels) {
            if p >= n_classes || t >= n_classes {
                return Err(Error::invalid(format!(
                    "label {} out of range for {n_classes} classes",
                    p.max(t)
                )));
            }
            confusion[t][p] += 1;
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let per_class: Vec<ClassScores> = (0..n_classes)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let support: usize = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes as f64;
        let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        Ok(Self {
            per_class,
            macro_f1,
            accuracy: correct as f64 / labels.len() as f64,
            confusion,
        })
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        let rec = |metric: String, value: f64| ReportRecord {
            metric,
            direction: Some("i2c".into()),
            k: Some(1),
            value,
        };
        let mut out = vec![
            rec("macro_f1".into(), self.macro_f1),
            rec("accuracy".into(), self.accuracy),
        ];
        for (c, s) in self.per_class.iter().enumerate() {
            out.push(rec(format!("precision[{c}]"), s.precision));
            out.push(rec(format!("recall[{c}]"), s.recall));
            out.push(rec(format!("f1[{c}]"), s.f1));
        }
        out
    }
}

/// Argmax-cosine prediction of each image against the class prototypes.
pub fn predict_classes(images: ArrayView2<f64>, classes: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(retrieve_topk(images, classes, 1)?.into_iter().map(|r| r[0]).collect())
}

/// Zero-shot classification of projected images against projected class
/// names (row `c` of `classes` is class `c`).
pub fn classify_zero_shot(images: ArrayView2<f64>, classes: ArrayView2<f64>, labels: &[usize]) -> Result<ClassifyReport> {
    if classes.nrows() < 2 {
        return Err(Error::invalid("zero-shot classification needs at least 2 classes"));
    }
    if labels.len() != images.nrows() {
        return Err(Error::dim("image labels", images.nrows(), labels.len()));
    }
    let preds = predict_classes(images, classes)?;
    ClassifyReport::from_predictions(&preds, labels, classes.nrows())
}

/// `m[i][j] = cosine(a_i, b_j)`.
pub fn similarity_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::dim("similarity matrix width", a.ncols(), b.ncols()));
    }
    let mut m = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        let ra = ra.as_slice().expect("standard layout");
        for (j, rb) in b.rows().into_iter().enumerate() {
            m[[i, j]] = numerics::cosine_sim(ra, rb.as_slice().expect("standard layout"))?;
        }
    }
    Ok(m)
}

/// Plain numeric CSV, one matrix row per line, no header.
pub fn write_matrix_csv(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Maps [-1, 1] to [0, 255].
pub fn to_gray(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary (P5) greymap, width = columns.
pub fn encode_pgm(m: &Array2<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.ncols(), m.nrows()).into_bytes();
    out.extend(m.iter().map(|&v| to_gray(v)));
    out
}

pub fn write_pgm(m: &Array2<f64>, path: &Path) -> Result<()> {
    write_file(path, &encode_pgm(m))
}

pub type ScoreTable = BTreeMap<String, BTreeMap<String, f64>>;

/// Population z-score of each language within each model, then the mean
/// over models per language.
pub fn zscore_per_language(scores: &ScoreTable) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (model, langs) in scores {
        if langs.len() < 2 {
            return Err(Error::invalid(format!("model {model} has fewer than 2 languages")));
        }
        let n = langs.len() as f64;
        let mean = langs.values().sum::<f64>() / n;
        let std = (langs.values().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::invalid(format!("zero std for model {model}")));
        }
        for (lang, x) in langs {
            let e = sums.entry(lang.clone()).or_insert((0.0, 0));
            e.0 += (x - mean) / std;
            e.1 += 1;
        }
    }
    if sums.is_empty() {
        return Err(Error::invalid("no scores"));
    }
    Ok(sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

/// Reads `model,language,value` rows; a non-numeric first row is a header.
pub fn read_scores_csv(path: &Path) -> Result<ScoreTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut table = ScoreTable::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 fields", n + 1)));
        }
        let value = match rec[2].parse::<f64>() {
            Ok(v) => v,
            Err(_) if n == 0 => continue,
            Err(_) => return Err(Error::format(path, format!("line {}: bad value {:?}", n + 1, &rec[2]))),
        };
        table.entry(rec[0].to_string()).or_default().insert(rec[1].to_string(), value);
    }
    Ok(table)
}

/// Normalizes rows and runs them through an inference-mode head, in chunks.
pub fn project_bank(head: &ProjectionHead, bank: &EmbeddingBank) -> Result<Array2<f64>> {
    project_rows(head, bank.to_array().view())
}

pub fn project_rows(head: &ProjectionHead, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    let unit = crate::alignment::normalize_rows(rows)?;
    let mut parts = Vec::new();
    for chunk in unit.axis_chunks_iter(Axis(0), 4096) {
        parts.push(head.project(chunk)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median: f64,
    pub mean: f64,
}

impl Timing {
    fn of(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        Self {
            median,
            mean: s.iter().sum::<f64>() / n as f64,
        }
    }
}

/// Per-sample wall time in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub timed_repeats: usize,
    pub projection_ms: Timing,
    pub search_ms: Timing,
    /// Per-repeat `projection + search`.
    pub total_ms: Timing,
}

pub const BENCH_WARMUP: usize = 3;
pub const BENCH_TOP_K: usize = 10;

/// Times projecting every bank row and searching it against the whole
/// projected bank (top-10). The first three repeats are warm-up.
pub fn bench_inference(head: &ProjectionHead, bank: &EmbeddingBank, repeats: usize) -> Result<BenchReport> {
    if repeats < 10 {
        return Err(Error::invalid(format!("repeats must be >= 10, got {repeats}")));
    }
    let raw = bank.to_array();
    let n = raw.nrows() as f64;
    let k = BENCH_TOP_K.min(bank.rows());
    let (mut proj, mut search) = (Vec::new(), Vec::new());
    for rep in 0..repeats {
        let t0 = Instant::now();
        let projected = project_rows(head, raw.view())?;
        let t1 = Instant::now();
        let ranked = retrieve_topk(projected.view(), projected.view(), k)?;
        let t2 = Instant::now();
        std::hint::black_box(&ranked);
        if rep >= BENCH_WARMUP {
            proj.push((t1 - t0).as_secs_f64() * 1e3 / n);
            search.push((t2 - t1).as_secs_f64() * 1e3 / n);
        }
    }
    let total: Vec<f64> = proj.iter().zip(&search).map(|(p, s)| p + s).collect();
    Ok(BenchReport {
        samples: bank.rows(),
        timed_repeats: proj.len(),
        projection_ms: Timing::of(&proj),
        search_ms: Timing::of(&search),
        total_ms: Timing::of(&total),
    })
}
