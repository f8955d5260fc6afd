//! CSV and aligned-text renderings of a [`MetricReport`].

use std::fmt::Write as _;

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::metrics::{Aggregate, MetricReport, MetricRow, Stat};

pub const ROW_HEADER: &str = "prompt_id,category,method,seed,k,clip,rsa,crc,mocq,ab,ab_tie,oracle,missing";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(ROW_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.prompt_id,
            r.category,
            r.method,
            r.seed,
            r.k,
            r.clip,
            r.rsa,
            r.crc,
            opt(r.mocq),
            opt(r.ab),
            r.ab_tie,
            r.oracle,
            r.missing
        );
    }
    s
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(ROW_HEADER) {
        return Err(Error::Format("metric CSV header mismatch".into()));
    }
    let bad = |what: &str, v: &str| Error::Format(format!("bad {what} {v:?}"));
    let f64_ = |v: &str| v.parse::<f64>().map_err(|_| bad("number", v));
    let opt_ = |v: &str| if v.is_empty() { Ok(None) } else { f64_(v).map(Some) };
    let usize_ = |v: &str| v.parse::<usize>().map_err(|_| bad("integer", v));
    let bool_ = |v: &str| v.parse::<bool>().map_err(|_| bad("flag", v));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(Error::Format(format!("metric row has {} fields: {line}", f.len())));
            }
            Ok(MetricRow {
                prompt_id: usize_(f[0])?,
                category: f[1].parse()?,
                method: f[2].to_string(),
                seed: usize_(f[3])?,
                k: usize_(f[4])?,
                clip: f64_(f[5])?,
                rsa: f64_(f[6])?,
                crc: f64_(f[7])?,
                mocq: opt_(f[8])?,
                ab: opt_(f[9])?,
                ab_tie: bool_(f[10])?,
                oracle: f64_(f[11])?,
                missing: bool_(f[12])?,
            })
        })
        .collect()
}

const METRICS: [&str; 6] = ["clip", "rsa", "crc", "mocq", "ab", "oracle"];

fn stats(a: &Aggregate) -> [&Stat; 6] {
    [&a.clip, &a.rsa, &a.crc, &a.mocq, &a.ab, &a.oracle]
}

/// One line per (method, category) with mean, std and count of each metric.
/// The CLIP-IQA and FID columns are reserved and left empty.
pub fn aggregates_to_csv(report: &MetricReport) -> String {
    let mut s = String::from("method,category");
    for m in METRICS {
        let _ = write!(s, ",{m}_mean,{m}_std,{m}_n");
    }
    s.push_str(",ab_ties,clip_iqa,fid\n");
    for a in &report.aggregates {
        let _ = write!(s, "{},{}", a.method, a.category);
        for st in stats(a) {
            let _ = write!(s, ",{},{},{}", st.mean, st.std, st.count);
        }
        let _ = writeln!(s, ",{},,", a.ties);
    }
    s
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| -> String {
        let mut out = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let pad = w[i] - c.chars().count();
            if i < 2 {
                out.push_str(c);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str(&" ".repeat(pad));
                out.push_str(c);
            }
        }
        out.trim_end().to_string()
    };
    let mut s = line(header.iter().map(|h| h.to_string()).collect());
    s.push('\n');
    s.push_str(&"-".repeat(w.iter().sum::<usize>() + 2 * (w.len() - 1)));
    s.push('\n');
    for r in rows {
        s.push_str(&line(r.clone()));
        s.push('\n');
    }
    s
}

fn cell(st: &Stat) -> String {
    if st.count == 0 {
        "-".into()
    } else {
        format!("{:.4}", st.mean)
    }
}

/// Aligned table in the column order CLIP, RSA, CRC, MOCQ, AB, followed by
/// the reserved CLIP-IQA/FID columns and the latent oracle score. One row
/// per method, plus one per category when `per_category` is set.
pub fn render_table(report: &MetricReport, per_category: bool) -> String {
    let header = ["method", "category", "CLIP", "RSA", "CRC", "MOCQ", "AB", "CLIP-IQA", "FID", "oracle", "n"];
    let rows: Vec<Vec<String>> = report
        .aggregates
        .iter()
        .filter(|a| per_category || a.category == "all")
        .map(|a| {
            vec![
                a.method.clone(),
                a.category.clone(),
                cell(&a.clip),
                cell(&a.rsa),
                cell(&a.crc),
                cell(&a.mocq),
                cell(&a.ab),
                "-".into(),
                "-".into(),
                cell(&a.oracle),
                a.rsa.count.to_string(),
            ]
        })
        .collect();
    let mut s = table(&header, &rows);
    if report.missing > 0 {
        let _ = writeln!(s, "{} rows had no image and were excluded", report.missing);
    }
    s
}

/// One row per adapter variant present in the report, in the order
/// film_only, v3, v4, with trainable parameter counts.
pub fn render_ablation(report: &MetricReport, param_counts: &[(Variant, usize)]) -> String {
    let header = ["row", "variant", "params", "CLIP", "RSA", "CRC", "MOCQ", "AB", "oracle"];
    let mut rows = Vec::new();
    for (label, v) in ["(a)", "(b)", "(c)"].into_iter().zip(Variant::ALL) {
        let Some(a) = report.aggregate(v.name(), "all") else {
            continue;
        };
        let params = param_counts
            .iter()
            .find(|(pv, _)| *pv == v)
            .map(|(_, n)| n.to_string())
            .unwrap_or_else(|| "-".into());
        rows.push(vec![
            label.to_string(),
            v.name().to_string(),
            params,
            cell(&a.clip),
            cell(&a.rsa),
            cell(&a.crc),
            cell(&a.mocq),
            cell(&a.ab),
            cell(&a.oracle),
        ]);
    }
    table(&header, &rows)
}
