//! Metrics (final average accuracy, final forgetting), representation-drift
//! analysis (linear CKA against the initialization, kNN probes on the
//! pretraining labels), and report emission.

use crate::backbone::LayeredBackbone;
use crate::benchmark::{make_batch, ImageDataset, Normalization};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Evaluation protocol: prediction over all classes, or restricted to the
/// test item's task class set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ClassIl,
    TaskIl,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::ClassIl => "class_il",
            Protocol::TaskIl => "task_il",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_il" => Ok(Protocol::ClassIl),
            "task_il" => Ok(Protocol::TaskIl),
            other => Err(Error::config(format!(
                "unknown protocol '{}'; valid: class_il, task_il",
                other
            ))),
        }
    }
}

/// Row-wise argmax restricted to `classes` (first maximum wins, matching the
/// unrestricted argmax tie rule so Task-IL accuracy dominates Class-IL).
pub fn argmax_restricted<S: Scalar>(logits: &ndarray::ArrayD<S>, classes: &[usize]) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = classes[0];
            let mut best_v = row[classes[0]];
            for &c in &classes[1..] {
                if row[c] > best_v {
                    best = c;
                    best_v = row[c];
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// accuracy matrix

/// Lower-triangular grid `a[i][t]`: accuracy on task `i` after training task
/// `t`, defined only for `t >= i`. Stored column-wise, one column appended
/// after each finished task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    columns: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            columns: Vec::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn completed_tasks(&self) -> usize {
        self.columns.len()
    }

    pub fn is_complete(&self) -> bool {
        self.columns.len() == self.num_tasks
    }

    /// Append the per-task accuracies measured after training one more task;
    /// the column for task `t` carries entries for tasks `0..=t`.
    pub fn push_column(&mut self, col: Vec<f64>) -> Result<()> {
        let t = self.columns.len();
        if t >= self.num_tasks {
            return Err(Error::invalid("matrix already complete".to_string()));
        }
        if col.len() != t + 1 {
            return Err(Error::invalid(format!(
                "column after task {} must have {} entries, got {}",
                t,
                t + 1,
                col.len()
            )));
        }
        if col.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::invalid("accuracies must lie in [0, 1]".to_string()));
        }
        self.columns.push(col);
        Ok(())
    }

    /// `a[i][t]`; `None` in the undefined region `t < i`.
    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.columns.get(after).and_then(|c| c.get(task)).copied()
    }

    pub fn final_column(&self) -> Option<&[f64]> {
        self.columns.last().map(|c| c.as_slice())
    }
}

/// Final average accuracy: mean of the last column (equal task weighting).
pub fn faa(matrix: &AccuracyMatrix) -> Result<f64> {
    if !matrix.is_complete() {
        return Err(Error::invalid(format!(
            "matrix incomplete: {}/{} tasks",
            matrix.completed_tasks(),
            matrix.num_tasks()
        )));
    }
    let last = matrix.final_column().expect("complete matrix");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Final forgetting: `(1/(T−1)) Σ_i max_{t ∈ {i..T−2}} (a[i][t] − a[i][T−1])`,
/// the max restricted to checkpoints where task `i` had already been trained.
pub fn ff(matrix: &AccuracyMatrix) -> Result<f64> {
    if !matrix.is_complete() {
        return Err(Error::invalid("matrix incomplete".to_string()));
    }
    let t_total = matrix.num_tasks();
    if t_total < 2 {
        return Err(Error::invalid(
            "forgetting undefined for a single task".to_string(),
        ));
    }
    let mut sum = 0.0;
    for i in 0..t_total - 1 {
        let final_acc = matrix.get(i, t_total - 1).expect("complete");
        let peak = (i..t_total - 1)
            .map(|t| matrix.get(i, t).expect("t >= i"))
            .fold(f64::NEG_INFINITY, f64::max);
        sum += peak - final_acc;
    }
    Ok(sum / (t_total - 1) as f64)
}

// ---------------------------------------------------------------------------
// linear CKA

/// Linear centered kernel alignment between two feature matrices `(n, d1)`
/// and `(n, d2)`: `‖XᵀY‖_F² / (‖XᵀX‖_F · ‖YᵀY‖_F)` on column-centered data.
pub fn linear_cka<S: Scalar>(x: &Array2<S>, y: &Array2<S>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 || y.nrows() != n {
        return Err(Error::invalid(format!(
            "cka needs matching row counts >= 2, got {} and {}",
            n,
            y.nrows()
        )));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xx = frob_sq(&xc.t().dot(&xc));
    let yy = frob_sq(&yc.t().dot(&yc));
    if xx <= 1e-24 || yy <= 1e-24 {
        return Err(Error::numeric(
            "cka undefined for zero-variance features".to_string(),
        ));
    }
    let xy = frob_sq(&xc.t().dot(&yc));
    Ok(xy / (xx.sqrt() * yy.sqrt()))
}

fn center_columns<S: Scalar>(x: &Array2<S>) -> Array2<f64> {
    let mut out = x.mapv(|v| v.as_f64());
    let means = out.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    for mut row in out.rows_mut() {
        row -= &means;
    }
    out
}

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|&v| v * v).sum()
}

// ---------------------------------------------------------------------------
// kNN probe

/// Majority vote over the `k` nearest training points under Euclidean
/// distance; ties resolved toward the class of the closest tied member.
pub fn knn_probe<S: Scalar>(
    train_feats: &Array2<S>,
    train_labels: &[usize],
    test_feats: &Array2<S>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be positive".to_string()));
    }
    let n = train_feats.nrows();
    if k > n {
        return Err(Error::invalid(format!("k = {} exceeds {} train points", k, n)));
    }
    if train_labels.len() != n || test_labels.len() != test_feats.nrows() {
        return Err(Error::invalid("label count mismatch".to_string()));
    }
    let train: Array2<f64> = train_feats.mapv(|v| v.as_f64());
    let test: Array2<f64> = test_feats.mapv(|v| v.as_f64());
    let mut correct = 0usize;
    for (row, &truth) in test.rows().into_iter().zip(test_labels.iter()) {
        let mut dists: Vec<(f64, usize)> = train
            .rows()
            .into_iter()
            .zip(train_labels.iter())
            .map(|(tr, &lab)| {
                let d = tr
                    .iter()
                    .zip(row.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d, lab)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances"));
        let top = &dists[..k];
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(d, lab) in top {
            let e = votes.entry(lab).or_insert((0, f64::INFINITY));
            e.0 += 1;
            e.1 = e.1.min(d);
        }
        let best = votes
            .iter()
            .max_by(|a, b| {
                (a.1 .0, std::cmp::Reverse(ordered(a.1 .1)))
                    .cmp(&(b.1 .0, std::cmp::Reverse(ordered(b.1 .1))))
            })
            .map(|(&lab, _)| lab)
            .expect("k >= 1");
        if best == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}

fn ordered(v: f64) -> u64 {
    // total order for non-negative distances
    v.to_bits()
}

// ---------------------------------------------------------------------------
// feature extraction & drift

/// GAP-pooled tap features of a model over the given examples, per layer.
pub fn extract_features<S: Scalar>(
    model: &LayeredBackbone<S>,
    dataset: &ImageDataset,
    indices: &[u32],
    norm: &Normalization,
    batch_size: usize,
) -> Result<Vec<Array2<S>>> {
    let layers = model.num_taps();
    let mut feats: Vec<Array2<S>> = model
        .tap_shapes
        .iter()
        .map(|&(c, _, _)| Array2::zeros((indices.len(), c)))
        .collect();
    let mut row = 0usize;
    for chunk in indices.chunks(batch_size) {
        let batch = make_batch::<S>(dataset, chunk, norm, None, None);
        let (_, taps) = model.forward_with_taps(&Tensor::constant(batch.inputs), Mode::Eval)?;
        for l in 0..layers {
            let pooled = taps[l].gap().array();
            for (bi, r) in pooled.rows().into_iter().enumerate() {
                for (ci, &v) in r.iter().enumerate() {
                    feats[l][(row + bi, ci)] = v;
                }
            }
        }
        row += chunk.len();
    }
    Ok(feats)
}

/// One drift measurement: a checkpoint index, a tap layer, distance from the
/// initialization and probe accuracy on the pretraining labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftPoint {
    pub checkpoint: usize,
    pub layer: usize,
    pub one_minus_cka: f64,
    pub knn_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DriftReport {
    pub points: Vec<DriftPoint>,
}

impl DriftReport {
    #[allow(clippy::type_complexity)]
    pub fn layer_series(&self, layer: usize) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let mut cka = Vec::new();
        let mut knn = Vec::new();
        for p in self.points.iter().filter(|p| p.layer == layer) {
            cka.push((p.checkpoint as f64, p.one_minus_cka));
            knn.push((p.checkpoint as f64, p.knn_accuracy));
        }
        (cka, knn)
    }
}

/// Probe data for drift analysis: pretraining examples and their labels.
pub struct DriftProbe<'a> {
    pub dataset: &'a ImageDataset,
    pub norm: &'a Normalization,
    pub train_indices: Vec<u32>,
    pub test_indices: Vec<u32>,
    pub k: usize,
    pub batch_size: usize,
}

/// Deterministic probe subsample: disjoint train/test index lists drawn by a
/// seeded shuffle of the dataset order.
pub fn probe_subsample(n: usize, take_train: usize, take_test: usize, seed: u64) -> (Vec<u32>, Vec<u32>) {
    use rand::Rng;
    let take_train = take_train.min(n);
    let mut rng = crate::rng::SeedTree::new(seed).rng("probe_subsample");
    let mut order: Vec<u32> = (0..n as u32).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train: Vec<u32> = order[..take_train].to_vec();
    let test: Vec<u32> = order[take_train..(take_train + take_test).min(n)].to_vec();
    (train, test)
}

/// Per-layer drift curves across checkpoints. `checkpoints[0]` is the
/// initialization all later entries are compared against.
pub fn drift_report<S: Scalar>(
    checkpoints: &[&LayeredBackbone<S>],
    probe: &DriftProbe<'_>,
) -> Result<DriftReport> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::invalid("drift report needs at least one checkpoint"));
    };
    for c in checkpoints {
        if c.tap_shapes != first.tap_shapes {
            return Err(Error::invalid(
                "checkpoints have mismatched architectures".to_string(),
            ));
        }
    }
    let train_labels: Vec<usize> = probe
        .train_indices
        .iter()
        .map(|&i| probe.dataset.labels[i as usize] as usize)
        .collect();
    let test_labels: Vec<usize> = probe
        .test_indices
        .iter()
        .map(|&i| probe.dataset.labels[i as usize] as usize)
        .collect();

    let init_feats = extract_features(
        first,
        probe.dataset,
        &probe.train_indices,
        probe.norm,
        probe.batch_size,
    )?;
    let mut report = DriftReport::default();
    for (ci, ckpt) in checkpoints.iter().enumerate() {
        let feats = extract_features(
            ckpt,
            probe.dataset,
            &probe.train_indices,
            probe.norm,
            probe.batch_size,
        )?;
        let test_feats = extract_features(
            ckpt,
            probe.dataset,
            &probe.test_indices,
            probe.norm,
            probe.batch_size,
        )?;
        for l in 0..first.num_taps() {
            let cka = linear_cka(&init_feats[l], &feats[l])?;
            let knn = knn_probe(
                &feats[l],
                &train_labels,
                &test_feats[l],
                &test_labels,
                probe.k,
            )?;
            report.points.push(DriftPoint {
                checkpoint: ci,
                layer: l,
                one_minus_cka: 1.0 - cka,
                knn_accuracy: knn,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// report emission

/// One run's headline numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub protocol: String,
    pub buffer: usize,
    pub seed: u64,
    pub faa: f64,
    pub ff: Option<f64>,
}

/// Write the results table (rows = methods, columns = protocol/buffer cells
/// holding `FAA (FF)`), a machine-readable JSON, per-seed sidecar values, and
/// drift plots. Returns the written paths.
pub fn emit_report(
    dir: &Path,
    metrics: &[RunMetrics],
    drift: Option<(&str, &DriftReport)>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    // aggregate over seeds
    type Key = (String, String, usize);
    let mut groups: BTreeMap<Key, Vec<&RunMetrics>> = BTreeMap::new();
    for m in metrics {
        groups
            .entry((m.method.clone(), m.protocol.clone(), m.buffer))
            .or_default()
            .push(m);
    }
    let mut cells: BTreeMap<String, BTreeMap<(String, usize), String>> = BTreeMap::new();
    let mut cols: Vec<(String, usize)> = Vec::new();
    for ((method, protocol, buffer), runs) in &groups {
        let faa_mean = runs.iter().map(|r| r.faa).sum::<f64>() / runs.len() as f64;
        let ffs: Vec<f64> = runs.iter().filter_map(|r| r.ff).collect();
        let cell = if ffs.len() == runs.len() {
            let ff_mean = ffs.iter().sum::<f64>() / ffs.len() as f64;
            format!("{:.2} ({:.2})", 100.0 * faa_mean, 100.0 * ff_mean)
        } else {
            format!("{:.2} (-)", 100.0 * faa_mean)
        };
        let col = (protocol.clone(), *buffer);
        if !cols.contains(&col) {
            cols.push(col.clone());
        }
        cells.entry(method.clone()).or_default().insert(col, cell);
    }
    cols.sort();

    let table_path = dir.join("table.csv");
    {
        let mut f = std::fs::File::create(&table_path)?;
        write!(f, "method")?;
        for (protocol, buffer) in &cols {
            write!(f, ",{}_b{}", protocol, buffer)?;
        }
        writeln!(f)?;
        for (method, row) in &cells {
            write!(f, "{}", method)?;
            for col in &cols {
                write!(f, ",{}", row.get(col).map(String::as_str).unwrap_or("-"))?;
            }
            writeln!(f)?;
        }
    }
    written.push(table_path);

    let json_path = dir.join("metrics.json");
    let agg: Vec<serde_json::Value> = groups
        .iter()
        .map(|((method, protocol, buffer), runs)| {
            let faa_mean = runs.iter().map(|r| r.faa).sum::<f64>() / runs.len() as f64;
            let ffs: Vec<f64> = runs.iter().filter_map(|r| r.ff).collect();
            serde_json::json!({
                "method": method,
                "protocol": protocol,
                "buffer": buffer,
                "seeds": runs.iter().map(|r| r.seed).collect::<Vec<_>>(),
                "faa_mean": faa_mean,
                "ff_mean": if ffs.len() == runs.len() {
                    serde_json::json!(ffs.iter().sum::<f64>() / ffs.len() as f64)
                } else {
                    serde_json::Value::Null
                },
            })
        })
        .collect();
    let payload = serde_json::json!({ "runs": metrics, "aggregates": agg });
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&payload).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    written.push(json_path);

    if metrics.iter().map(|m| m.seed).collect::<std::collections::BTreeSet<_>>().len() > 1 {
        let sidecar = dir.join("per_seed.csv");
        let mut f = std::fs::File::create(&sidecar)?;
        writeln!(f, "method,protocol,buffer,seed,faa,ff")?;
        for m in metrics {
            writeln!(
                f,
                "{},{},{},{},{:.6},{}",
                m.method,
                m.protocol,
                m.buffer,
                m.seed,
                m.faa,
                m.ff.map_or("-".to_string(), |v| format!("{:.6}", v))
            )?;
        }
        written.push(sidecar);
    }

    if let Some((label, report)) = drift {
        let layers: std::collections::BTreeSet<usize> =
            report.points.iter().map(|p| p.layer).collect();
        let mut cka_series = Vec::new();
        let mut knn_series = Vec::new();
        for l in layers {
            let (cka, knn) = report.layer_series(l);
            cka_series.push((format!("layer {}", l + 1), cka));
            knn_series.push((format!("layer {}", l + 1), knn));
        }
        let p1 = dir.join(format!("drift_cka_{}.svg", label));
        svg_line_chart(&p1, &format!("1 - CKA vs init ({})", label), &cka_series)?;
        written.push(p1);
        let p2 = dir.join(format!("drift_knn_{}.svg", label));
        svg_line_chart(&p2, &format!("pretraining kNN accuracy ({})", label), &knn_series)?;
        written.push(p2);
        let pj = dir.join(format!("drift_{}.json", label));
        std::fs::write(
            &pj,
            serde_json::to_string_pretty(report).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        written.push(pj);
    }

    Ok(written)
}

/// Minimal SVG polyline chart (x = checkpoint index).
pub fn svg_line_chart(
    path: &Path,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    let (xmin, xmax) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (ymin, ymax) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let px = |x: f64| M + (x - xmin) / xspan * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - ymin) / yspan * (H - 2.0 * M);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n<text x=\"{}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n",
        4.0, H - M, ymin, 4.0, M, ymax
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let path_d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            color,
            path_d.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{}\">{}</text>\n",
            W - M + 4.0,
            M + 14.0 * i as f64,
            color,
            name
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn random_matrix(t: usize, rng: &mut impl Rng) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(t);
        for col in 0..t {
            m.push_column((0..=col).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
        }
        m
    }

    /// Independent literal evaluation of the two formulas.
    fn brute_faa(m: &AccuracyMatrix) -> f64 {
        let t = m.num_tasks();
        (0..t).map(|i| m.get(i, t - 1).unwrap()).sum::<f64>() / t as f64
    }

    fn brute_ff(m: &AccuracyMatrix) -> f64 {
        let t = m.num_tasks();
        let mut total = 0.0;
        for i in 0..t - 1 {
            let mut best = f64::NEG_INFINITY;
            for tt in i..=t - 2 {
                best = best.max(m.get(i, tt).unwrap());
            }
            total += best - m.get(i, t - 1).unwrap();
        }
        total / (t - 1) as f64
    }

    #[test]
    fn faa_examples() {
        let mut m = AccuracyMatrix::new(3);
        m.push_column(vec![0.9]).unwrap();
        m.push_column(vec![0.85, 0.8]).unwrap();
        m.push_column(vec![0.8, 0.6, 0.7]).unwrap();
        assert!((faa(&m).unwrap() - 0.7).abs() < 1e-12);

        let mut single = AccuracyMatrix::new(1);
        single.push_column(vec![0.55]).unwrap();
        assert_eq!(faa(&single).unwrap(), 0.55);
        assert!(ff(&single).is_err());
    }

    #[test]
    fn ff_spec_example() {
        let mut m = AccuracyMatrix::new(3);
        m.push_column(vec![0.9]).unwrap();
        m.push_column(vec![0.7, 0.8]).unwrap();
        m.push_column(vec![0.6, 0.5, 0.7]).unwrap();
        // (max(0.9, 0.7) - 0.6 + 0.8 - 0.5) / 2 = 0.3
        assert!((ff(&m).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ff_zero_for_nondecreasing() {
        let mut m = AccuracyMatrix::new(3);
        m.push_column(vec![0.5]).unwrap();
        m.push_column(vec![0.5, 0.6]).unwrap();
        m.push_column(vec![0.5, 0.6, 0.9]).unwrap();
        assert_eq!(ff(&m).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_brute_force_on_random_matrices() {
        let mut rng = SeedTree::new(0).rng("m");
        for _ in 0..100 {
            let t = rng.gen_range(2..8);
            let m = random_matrix(t, &mut rng);
            assert!((faa(&m).unwrap() - brute_faa(&m)).abs() <= 1e-12);
            assert!((ff(&m).unwrap() - brute_ff(&m)).abs() <= 1e-12);
        }
    }

    #[test]
    fn incomplete_matrix_errors() {
        let mut m = AccuracyMatrix::new(3);
        m.push_column(vec![0.9]).unwrap();
        assert!(faa(&m).is_err());
        assert!(m.push_column(vec![0.1, 0.2, 0.3]).is_err()); // wrong arity
    }

    fn randn2(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| {
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Array2<f64> {
        // Gram-Schmidt on a random Gaussian matrix
        let a = randn2(d, d, rng);
        let mut q = Array2::<f64>::zeros((d, d));
        for j in 0..d {
            let mut v = a.column(j).to_owned();
            for i in 0..j {
                let qi = q.column(i);
                let dot = qi.dot(&v);
                v = &v - &(&qi * dot);
            }
            let norm = v.dot(&v).sqrt();
            q.column_mut(j).assign(&(&v / norm));
        }
        q
    }

    #[test]
    fn cka_self_orthogonal_and_scale_invariance() {
        let mut rng = SeedTree::new(1).rng("cka");
        let x = randn2(40, 6, &mut rng);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-6);

        let r = random_orthogonal(6, &mut rng);
        let xr = x.dot(&r);
        assert!((linear_cka(&x, &xr).unwrap() - 1.0).abs() <= 1e-6);

        let xs = x.mapv(|v| v * -3.7);
        assert!((linear_cka(&x, &xs).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn cka_symmetric_and_bounded() {
        let mut rng = SeedTree::new(2).rng("cka");
        for _ in 0..50 {
            let x = randn2(20, 4, &mut rng);
            let y = randn2(20, 7, &mut rng);
            let a = linear_cka(&x, &y).unwrap();
            let b = linear_cka(&y, &x).unwrap();
            assert!((a - b).abs() <= 1e-10);
            assert!((0.0..=1.0 + 1e-12).contains(&a), "cka {}", a);
        }
    }

    #[test]
    fn cka_zero_variance_errors() {
        let x = Array2::<f64>::zeros((10, 3));
        let y = Array2::<f64>::ones((10, 3));
        assert!(linear_cka(&x, &y).is_err());
    }

    #[test]
    fn knn_self_match_and_clusters() {
        let mut rng = SeedTree::new(3).rng("knn");
        let x = randn2(30, 4, &mut rng);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        assert_eq!(knn_probe(&x, &labels, &x, &labels, 1).unwrap(), 1.0);

        // two well-separated Gaussian clusters
        let n = 250;
        let mut train = randn2(2 * n, 3, &mut rng);
        let mut test = randn2(500, 3, &mut rng);
        let mut train_labels = vec![0usize; 2 * n];
        for i in n..2 * n {
            train_labels[i] = 1;
            for d in 0..3 {
                train[(i, d)] += 10.0;
            }
        }
        let mut tl = vec![0usize; 500];
        for i in 250..500 {
            tl[i] = 1;
            for d in 0..3 {
                test[(i, d)] += 10.0;
            }
        }
        let acc = knn_probe(&train, &train_labels, &test, &tl, 5).unwrap();
        assert!(acc > 0.95, "cluster accuracy {}", acc);

        // orthogonal transform leaves accuracy exactly unchanged
        let r = random_orthogonal(3, &mut rng);
        let acc_rot = knn_probe(&train.dot(&r), &train_labels, &test.dot(&r), &tl, 5).unwrap();
        assert_eq!(acc, acc_rot);
    }

    #[test]
    fn knn_shuffled_labels_near_chance() {
        let mut rng = SeedTree::new(4).rng("knn");
        let c = 4;
        let train = randn2(400, 5, &mut rng);
        let test = randn2(1000, 5, &mut rng);
        let train_labels: Vec<usize> = (0..400).map(|_| rng.gen_range(0..c)).collect();
        let test_labels: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..c)).collect();
        let acc = knn_probe(&train, &train_labels, &test, &test_labels, 10).unwrap();
        let chance = 1.0 / c as f64;
        // binomial CI at n = 1000 is about ±0.045 at 3 sigma
        assert!((acc - chance).abs() < 0.05, "accuracy {} vs chance {}", acc, chance);
    }

    #[test]
    fn knn_input_validation() {
        let x = Array2::<f64>::zeros((5, 2));
        let labels = vec![0usize; 5];
        assert!(knn_probe(&x, &labels, &x, &labels, 0).is_err());
        assert!(knn_probe(&x, &labels, &x, &labels, 6).is_err());
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let metrics = vec![
            RunMetrics {
                method: "twf".into(),
                protocol: "class_il".into(),
                buffer: 500,
                seed: 0,
                faa: 0.81,
                ff: Some(0.12),
            },
            RunMetrics {
                method: "twf".into(),
                protocol: "class_il".into(),
                buffer: 500,
                seed: 1,
                faa: 0.83,
                ff: Some(0.10),
            },
            RunMetrics {
                method: "joint".into(),
                protocol: "class_il".into(),
                buffer: 0,
                seed: 0,
                faa: 0.9,
                ff: None,
            },
        ];
        let drift = DriftReport {
            points: vec![
                DriftPoint {
                    checkpoint: 0,
                    layer: 0,
                    one_minus_cka: 0.0,
                    knn_accuracy: 0.8,
                },
                DriftPoint {
                    checkpoint: 1,
                    layer: 0,
                    one_minus_cka: 0.2,
                    knn_accuracy: 0.7,
                },
            ],
        };
        let files = emit_report(dir.path(), &metrics, Some(("finetune", &drift))).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert!(table.contains("joint"), "table: {}", table);
        // missing FF rendered as '-'
        assert!(table.contains("(-)"), "table: {}", table);
        // two seeds -> sidecar with per-seed rows
        assert!(dir.path().join("per_seed.csv").exists());
    }
}
