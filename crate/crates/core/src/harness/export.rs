use std::fmt::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::memmodel::BITS_PER_KB;
use crate::mobo::{front_ids, Record};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub id: usize,
    pub stage: u8,
    pub error: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub model_size_bits: f64,
    pub working_memory_bits: f64,
    pub model_size_kb: f64,
    pub working_memory_kb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub id: usize,
    /// Weight entries before pruning.
    pub edges: usize,
    /// Nonzero weights after pruning.
    pub nonzero_weights: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub on_front: bool,
}

/// Front members in the first `n_objectives` objectives, by error then id.
pub fn pareto_rows(records: &[Record], n_objectives: usize) -> Vec<ParetoRow> {
    let mut rows: Vec<ParetoRow> = front_ids(records, n_objectives)
        .into_iter()
        .map(|id| {
            let r = &records[id];
            let m = r.metrics().expect("front members succeeded");
            let o = m.objectives;
            ParetoRow {
                id,
                stage: r.stage,
                error: o.error,
                val_accuracy: m.val_accuracy,
                test_accuracy: m.test_accuracy,
                model_size_bits: o.model_size_bits,
                working_memory_bits: o.working_memory_bits,
                model_size_kb: o.model_size_bits / BITS_PER_KB,
                working_memory_kb: o.working_memory_bits / BITS_PER_KB,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.error.total_cmp(&b.error).then(a.id.cmp(&b.id)));
    rows
}

pub fn scatter_rows(records: &[Record], n_objectives: usize) -> Vec<ScatterRow> {
    let front = front_ids(records, n_objectives);
    records
        .iter()
        .filter_map(|r| {
            r.metrics().map(|m| ScatterRow {
                id: r.id,
                edges: m.edges,
                nonzero_weights: m.nonzero_weights,
                val_accuracy: m.val_accuracy,
                test_accuracy: m.test_accuracy,
                on_front: front.binary_search(&r.id).is_ok(),
            })
        })
        .collect()
}

/// Acc / MS / WM columns of the front, by accuracy.
pub fn front_table(records: &[Record], n_objectives: usize) -> String {
    let mut s = format!(
        "{:>5} {:>5} {:>9} {:>9} {:>9} {:>9}\n",
        "id", "stage", "val acc", "test acc", "MS (KB)", "WM (KB)"
    );
    for r in pareto_rows(records, n_objectives) {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>8.2}% {:>8.2}% {:>9.2} {:>9.2}",
            r.id,
            r.stage,
            100.0 * r.val_accuracy,
            100.0 * r.test_accuracy,
            r.model_size_kb,
            r.working_memory_kb
        );
    }
    s
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Scatter of error against model size (KB) for every successful record,
/// front members highlighted and joined in error order.
pub fn pareto_svg(records: &[Record], n_objectives: usize) -> String {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(Record::metrics)
        .map(|m| {
            (
                m.objectives.model_size_bits / BITS_PER_KB,
                m.objectives.error,
            )
        })
        .collect();
    let front: Vec<(f64, f64)> = pareto_rows(records, n_objectives)
        .iter()
        .map(|r| (r.model_size_kb, r.error))
        .collect();
    let (w, h, pad) = (640.0, 420.0, 56.0);
    let xmax = pts.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9) * 1.05;
    let ymax = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-9) * 1.05;
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / ymax * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<path d=\"M{pad},{} H{} M{pad},{} V{pad}\" stroke=\"black\" fill=\"none\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    for i in 0..=4 {
        let (xv, yv) = (xmax * i as f64 / 4.0, ymax * i as f64 / 4.0);
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xv:.2}</text>",
            sx(xv),
            h - pad + 16.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.3}</text>",
            pad - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">model size (KB)</text>",
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">1 - validation accuracy</text>",
        h / 2.0,
        h / 2.0
    );
    for &(x, y) in &pts {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#9aa0a6\"/>",
            sx(x),
            sy(y)
        );
    }
    if !front.is_empty() {
        let line: Vec<String> = front
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" stroke=\"#d93025\" fill=\"none\"/>",
            line.join(" ")
        );
        for &(x, y) in &front {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"#d93025\"/>",
                sx(x),
                sy(y)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
