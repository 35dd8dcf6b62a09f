use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{AblationReport, EvalError, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" | "markdown-table" => Ok(Self::Markdown),
            other => Err(format!("unknown report format `{other}` (json, csv, markdown)")),
        }
    }
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()?.to_str()?.parse().ok()
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn report_csv(report: &EvalReport) -> String {
    let names: std::collections::BTreeMap<u16, &str> =
        report.per_class.iter().map(|c| (c.class_label, c.class_name.as_str())).collect();
    let mut out = String::from("sample_id,subject_id,class_label,class_name,dice,gt_pixels,pred_pixels\n");
    for r in &report.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.sample_id),
            csv_field(&r.subject_id),
            r.class_label,
            csv_field(names.get(&r.class_label).copied().unwrap_or("")),
            r.dice,
            r.gt_pixels,
            r.pred_pixels
        );
    }
    out
}

fn report_markdown(report: &EvalReport) -> String {
    let c = &report.config;
    let mut out = String::new();
    let _ = writeln!(out, "```");
    let _ = writeln!(out, "engine: {}", c.engine);
    let _ = writeln!(out, "backbone: {}", c.backbone);
    let _ = writeln!(out, "k: {}", c.k);
    let _ = writeln!(out, "strategy: {}", c.strategy);
    let _ = writeln!(out, "seed: {}", c.seed);
    let _ = writeln!(out, "index_size: {}", c.index_size);
    let _ = writeln!(out, "test_size: {}", c.test_size);
    let _ = writeln!(out, "include_empty_gt: {}", c.include_empty_gt);
    let _ = writeln!(out, "```");
    let _ = writeln!(out);

    let header: Vec<&str> = report.per_class.iter().map(|p| p.class_name.as_str()).collect();
    let _ = writeln!(out, "| Method | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(header.len()));
    let cells: Vec<String> = report.per_class.iter().map(|p| fmt_opt(p.mean_dice)).collect();
    let _ = writeln!(out, "| {} ({}, k={}) | {} |", c.engine, c.strategy, c.k, cells.join(" | "));
    let _ = writeln!(out);

    let _ = writeln!(out, "| Class | < {0} px | n | >= {0} px | n |", c.stratify_threshold);
    let _ = writeln!(out, "|---|---|---|---|---|");
    for s in &report.stratified {
        let name = report
            .per_class
            .iter()
            .find(|p| p.class_label == s.class_label)
            .map_or_else(|| s.class_label.to_string(), |p| p.class_name.clone());
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {} | {} |",
            fmt_opt(s.small_mean),
            s.small_n,
            fmt_opt(s.large_mean),
            s.large_n
        );
    }
    let _ = writeln!(out);

    let t = &report.timing;
    let _ = writeln!(out, "| Stage | mean ms |");
    let _ = writeln!(out, "|---|---|");
    let _ = writeln!(out, "| embed + retrieve | {:.2} |", t.embed_retrieve_ms);
    let _ = writeln!(out, "| memory encode | {:.2} |", t.memory_encode_ms);
    let _ = writeln!(out, "| attention + decode | {:.2} |", t.attention_decode_ms);
    let _ = writeln!(out, "| total | {:.2} |", t.total_ms);
    for w in &report.warnings {
        let _ = writeln!(out, "\n> {w}");
    }
    out
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), EvalError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Markdown => report_markdown(report),
    };
    write_file(path, body.as_bytes())
}

/// JSON keeps every cell's full report; CSV and markdown give the
/// `(strategy, k) × class` grid of mean DSC.
pub fn write_ablation(ablation: &AblationReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let classes: Vec<(u16, String)> = ablation
        .cells
        .first()
        .map(|c| c.report.per_class.iter().map(|p| (p.class_label, p.class_name.clone())).collect())
        .unwrap_or_default();
    let body = match format {
        ReportFormat::Json => serde_json::to_string_pretty(ablation).expect("ablation serializes"),
        ReportFormat::Csv => {
            let mut out = String::from("strategy,k,class_label,class_name,mean_dice,n\n");
            for cell in &ablation.cells {
                for p in &cell.report.per_class {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        cell.strategy,
                        cell.k,
                        p.class_label,
                        csv_field(&p.class_name),
                        p.mean_dice.map_or_else(String::new, |v| v.to_string()),
                        p.n
                    );
                }
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            let names: Vec<&str> = classes.iter().map(|(_, n)| n.as_str()).collect();
            let _ = writeln!(out, "| Strategy | k | {} |", names.join(" | "));
            let _ = writeln!(out, "|---|---|{}", "---|".repeat(names.len()));
            for cell in &ablation.cells {
                let values: Vec<String> = classes.iter().map(|(l, _)| fmt_opt(cell.report.class_mean(*l))).collect();
                let _ = writeln!(out, "| {} | {} | {} |", cell.strategy, cell.k, values.join(" | "));
            }
            out
        }
    };
    write_file(path, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{DiceRecord, ReportConfig, TimingSummary};
    use crate::seg::RetrievalStrategy;
    use std::collections::BTreeMap;

    fn report() -> EvalReport {
        let classes: BTreeMap<u16, String> =
            [(1, "RV".to_string()), (2, "Myo".to_string()), (3, "LV".to_string())].into_iter().collect();
        let records = vec![
            DiceRecord {
                sample_id: "p1_03".into(),
                subject_id: "p1".into(),
                class_label: 1,
                dice: 0.1 + 0.2,
                gt_pixels: 150,
                pred_pixels: 140,
            },
            DiceRecord {
                sample_id: "p1,04".into(),
                subject_id: "p1".into(),
                class_label: 3,
                dice: 2.0 / 3.0,
                gt_pixels: 900,
                pred_pixels: 800,
            },
        ];
        let config = ReportConfig {
            engine: "toy:1".into(),
            backbone: "test:0".into(),
            k: 16,
            strategy: RetrievalStrategy::Random { seed: 9 },
            seed: 3,
            index_size: 50,
            test_size: 2,
            include_empty_gt: false,
            stratify_threshold: 200,
        };
        let timing = TimingSummary {
            embed_retrieve_ms: 1.0 / 3.0,
            memory_encode_ms: 2.5,
            attention_decode_ms: 0.1,
            total_ms: 2.9333,
            n: 2,
        };
        EvalReport::new(config, &classes, records, timing, vec!["note".into()])
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report();
        write_report(&r, &path, ReportFormat::Json).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_one_row_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(&report(), &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("sample_id,"));
        assert!(lines[2].starts_with("\"p1,04\",p1,3,LV,"));
    }

    #[test]
    fn markdown_has_header_block_and_class_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.md");
        write_report(&report(), &path, ReportFormat::Markdown).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("```\nengine: toy:1\n"));
        assert!(text.contains("| Method | RV | Myo | LV |"));
        assert!(text.contains("| toy:1 (random:9, k=16) | 0.3000 | n/a | 0.6667 |"));
    }

    #[test]
    fn format_parsing() {
        assert_eq!("markdown-table".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert_eq!(ReportFormat::from_path(Path::new("a/b.CSV")), Some(ReportFormat::Csv));
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
