//! CSV input and output for experiment rows, and trend checks over them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::experiments::{MeasurementRow, VersionsRow, WbcRow};
use super::BenchError;

pub fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), BenchError> {
    write_rows(File::create(path)?, rows)
}

pub fn read_rows<T: DeserializeOwned>(r: impl Read) -> Result<Vec<T>, BenchError> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(BenchError::from)).collect()
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, BenchError> {
    read_rows(File::open(path)?)
}

/// One verified (or refuted) expectation about a table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub table: String,
    pub check: String,
    pub holds: bool,
    pub detail: String,
}

impl TrendCheck {
    fn new(table: &str, check: String, holds: bool, detail: String) -> Self {
        TrendCheck { table: table.into(), check, holds, detail }
    }
}

fn refresh_key(label: &str) -> u64 {
    label.parse().unwrap_or(u64::MAX)
}

fn fmt_series(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" -> ")
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Overhead rises with the mobility fraction at every refresh interval, and
/// the shortest interval costs more than never refreshing, for both clocks.
pub fn refresh_trends(rows: &[MeasurementRow]) -> Vec<TrendCheck> {
    let mut cells: BTreeMap<u64, Vec<&MeasurementRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.refresh_ms != "none") {
        cells.entry(refresh_key(&r.refresh_ms)).or_default().push(r);
    }
    let mut checks = Vec::new();
    type Metric = fn(&MeasurementRow) -> f64;
    let metrics: [(&str, Metric); 2] = [("wall", |r| r.overhead_wall_pct), ("virtual", |r| r.overhead_virtual_pct)];
    for rs in cells.values() {
        let mut rs = rs.clone();
        rs.sort_by(|a, b| a.mobility_fraction.total_cmp(&b.mobility_fraction));
        for (name, metric) in metrics {
            let xs: Vec<f64> = rs.iter().map(|r| metric(r)).collect();
            checks.push(TrendCheck::new(
                "refresh",
                format!("{name} overhead increases with mobility at refresh {}", rs[0].refresh_ms),
                strictly_increasing(&xs),
                fmt_series(&xs),
            ));
        }
    }
    let (Some((&shortest, _)), Some(never)) = (cells.iter().next(), cells.get(&u64::MAX)) else {
        return checks;
    };
    if shortest == u64::MAX {
        return checks;
    }
    for n in never {
        let Some(s) = cells[&shortest].iter().find(|r| r.mobility_fraction == n.mobility_fraction) else {
            continue;
        };
        for (name, metric) in metrics {
            checks.push(TrendCheck::new(
                "refresh",
                format!(
                    "{name} overhead at fraction {} falls from refresh {} to inf",
                    n.mobility_fraction, s.refresh_ms
                ),
                metric(s) > metric(n),
                fmt_series(&[metric(s), metric(n)]),
            ));
        }
    }
    checks
}

/// Mobile functions never decrease with more variants, level off at the
/// top, and every run kept one static residue.
pub fn versions_trends(rows: &[VersionsRow]) -> Vec<TrendCheck> {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| r.variants);
    let xs: Vec<f64> = rows.iter().map(|r| r.mean_mobile_functions).collect();
    let mut checks = vec![
        TrendCheck::new(
            "versions",
            "mean mobile functions is non-decreasing in n".into(),
            xs.windows(2).all(|w| w[0] <= w[1]),
            fmt_series(&xs),
        ),
        TrendCheck::new(
            "versions",
            "residual static fraction is non-increasing in n".into(),
            rows.windows(2).all(|w| w[0].mean_residual_fraction >= w[1].mean_residual_fraction),
            fmt_series(&rows.iter().map(|r| r.mean_residual_fraction).collect::<Vec<_>>()),
        ),
        TrendCheck::new(
            "versions",
            "static residue identical across variants".into(),
            rows.iter().all(|r| r.residue_identical),
            format!("{} rows", rows.len()),
        ),
    ];
    let at = |n: usize| rows.iter().find(|r| r.variants == n).map(|r| r.mean_mobile_functions);
    if let (Some(a), Some(b), Some(c)) = (at(2), at(50), at(100)) {
        checks.push(TrendCheck::new(
            "versions",
            "increment from n=50 to n=100 is at most 20% of the n=2 to n=50 increase".into(),
            c - b <= 0.2 * (b - a),
            format!("n=2 {a:.2}, n=50 {b:.2}, n=100 {c:.2}"),
        ));
    }
    checks
}

/// Wall overhead falls as table lifetimes grow, and every transfer carries
/// exactly the tables plus the container header.
pub fn wbc_trends(rows: &[WbcRow]) -> Vec<TrendCheck> {
    let mut rs: Vec<&WbcRow> = rows.iter().filter(|r| r.refresh_ms != "none").collect();
    rs.sort_by_key(|r| refresh_key(&r.refresh_ms));
    let xs: Vec<f64> = rs.iter().map(|r| r.overhead_wall_pct).collect();
    let mut checks = vec![TrendCheck::new(
        "wbc",
        "wall overhead strictly decreases with the refresh interval".into(),
        xs.windows(2).all(|w| w[0] > w[1]),
        fmt_series(&xs),
    )];
    for r in rs {
        let expected = r.table_bytes + r.header_bytes;
        checks.push(TrendCheck::new(
            "wbc",
            format!("payload per transfer at refresh {} equals tables plus header", r.refresh_ms),
            r.bytes_per_transfer == expected && r.mean_transfers > 0.0,
            format!("{} = {} + {}", r.bytes_per_transfer, r.table_bytes, r.header_bytes),
        ));
    }
    checks
}

/// Fixed-width text rendering of any serializable rows.
pub fn render_table<T: Serialize>(rows: &[T]) -> Result<String, BenchError> {
    let mut buf = Vec::new();
    write_rows(&mut buf, rows)?;
    let text = String::from_utf8(buf).map_err(|e| BenchError::Internal(e.to_string()))?;
    let grid: Vec<Vec<String>> = text.lines().map(|l| l.split(',').map(shorten).collect()).collect();
    let cols = grid.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|i| grid.iter().map(|r| r.get(i).map_or(0, String::len)).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().enumerate().map(|(i, c)| format!("{c:>w$}", w = widths[i])).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

fn shorten(cell: &str) -> String {
    match cell.parse::<f64>() {
        Ok(x) if cell.contains('.') => format!("{x:.2}"),
        _ => cell.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fraction: f64, refresh: &str, wall: f64, virt: f64) -> MeasurementRow {
        MeasurementRow {
            program: "crunch".into(),
            mobility_fraction: fraction,
            refresh_ms: refresh.into(),
            repetitions: 1,
            mobile_functions: 1,
            mean_wall_ms: 0.0,
            stddev_wall_ms: 0.0,
            overhead_wall_pct: wall,
            mean_virtual_ms: 0.0,
            stddev_virtual_ms: 0.0,
            overhead_virtual_pct: virt,
            mean_blocks: 0.0,
            blocks_per_s: 0.0,
            bytes_per_s: 0.0,
        }
    }

    #[test]
    fn refresh_trends_detect_violations() {
        let good = vec![
            row(0.0, "none", 0.0, 0.0),
            row(0.2, "1000", 10.0, 5.0),
            row(0.5, "1000", 20.0, 9.0),
            row(0.2, "inf", 2.0, 1.0),
            row(0.5, "inf", 4.0, 2.0),
        ];
        let checks = refresh_trends(&good);
        assert_eq!(checks.len(), 8);
        assert!(checks.iter().all(|c| c.holds), "{checks:?}");
        let mut bad = good.clone();
        bad[3].overhead_wall_pct = 11.0;
        assert_eq!(refresh_trends(&bad).iter().filter(|c| !c.holds).count(), 2);
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let rows = vec![row(0.2, "1000", 1.5, 0.5), row(1.0, "inf", 3.0, 1.0)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("program,mobility_fraction,refresh_ms,repetitions,mobile_functions,mean_wall_ms"));
        assert_eq!(read_rows::<MeasurementRow>(&buf[..]).unwrap(), rows);
        assert!(render_table(&rows).unwrap().lines().count() == 3);
    }

    #[test]
    fn versions_saturation_rule() {
        let mk = |n, m| VersionsRow {
            variants: n,
            seeds: 1,
            mean_mobile_functions: m,
            stddev_mobile_functions: 0.0,
            min_mobile_functions: 0,
            max_mobile_functions: 0,
            mean_mobile_code_share: 0.0,
            mean_residual_fraction: 1.0,
            residue_identical: true,
        };
        let ok = versions_trends(&[mk(2, 3.0), mk(50, 20.0), mk(100, 22.0)]);
        assert!(ok.iter().all(|c| c.holds));
        let bad = versions_trends(&[mk(2, 3.0), mk(50, 10.0), mk(100, 20.0)]);
        assert!(!bad.last().unwrap().holds);
    }
}
