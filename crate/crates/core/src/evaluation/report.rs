use std::path::Path;

use serde::Serialize;

use super::{AblationTable, Rank1Report, VerificationReport};
use crate::data::{to_image, RgbImage};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// One row per pose bin, then an `average` row.
pub fn write_rank1_csv(path: &Path, report: &Rank1Report) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        bin: String,
        code_min: f64,
        code_max: f64,
        correct: usize,
        total: usize,
        accuracy: Option<f64>,
    }
    let mut rows: Vec<Row> = report
        .bins
        .iter()
        .map(|b| Row {
            bin: b.column.to_string(),
            code_min: b.code_min,
            code_max: b.code_max,
            correct: b.correct,
            total: b.total,
            accuracy: b.accuracy,
        })
        .collect();
    let correct = report.bins.iter().map(|b| b.correct).sum();
    let lo = report.bins.first().map_or(0.0, |b| b.code_min);
    let hi = report.bins.last().map_or(0.0, |b| b.code_max);
    rows.push(Row { bin: "average".into(), code_min: lo, code_max: hi, correct, total: report.probes, accuracy: Some(report.average) });
    write_rows(path, rows)
}

pub fn write_verification_csv(path: &Path, report: &VerificationReport) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        fold: usize,
        threshold: f64,
        accuracy: f64,
    }
    write_rows(
        path,
        report
            .fold_accuracy
            .iter()
            .zip(&report.thresholds)
            .enumerate()
            .map(|(fold, (&accuracy, &threshold))| Row { fold, threshold, accuracy }),
    )
}

/// One row per variant: `variant, bin_0 .. bin_k, average, steps, finite`.
pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let Some(first) = table.rows.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["variant".to_string()];
    header.extend(first.rank1.bins.iter().map(|b| format!("bin_{}", b.column)));
    header.extend(["average", "steps", "finite"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![r.variant.name().to_string()];
        rec.extend(r.rank1.bins.iter().map(|b| b.accuracy.map_or(String::new(), |a| a.to_string())));
        rec.push(r.rank1.average.to_string());
        rec.push(r.steps.to_string());
        rec.push(r.finite.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles `[N,3,S,S]` images into a grid `columns` wide, row-major.
pub fn image_grid(images: &Tensor<f32>, columns: usize) -> Result<RgbImage> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[0] == 0 || columns == 0 {
        return Err(Error::dim(format!("image grid needs [N,3,H,W] images and columns > 0, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = columns.min(n);
    let rows = n.div_ceil(cols);
    let mut grid = RgbImage::filled(cols * w, rows * h, [0, 0, 0]);
    for i in 0..n {
        let item = images.batch_item(i)?.reshape(&[3, h, w])?;
        let img = to_image(&item)?;
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            for x in 0..w {
                grid.set_pixel(ox + x, oy + y, img.pixel(x, y));
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{BinAccuracy, PoseBins};

    #[test]
    fn grid_layout() {
        let mut data = vec![-1.0f32; 3 * 3 * 2 * 2];
        data[3 * 4 * 2..].fill(1.0);
        let t = Tensor::new(&[3, 3, 2, 2], data).unwrap();
        let g = image_grid(&t, 2).unwrap();
        assert_eq!((g.width(), g.height()), (4, 4));
        assert_eq!(g.pixel(0, 0), [0, 0, 0]);
        assert_eq!(g.pixel(1, 3), [255, 255, 255]);
        assert_eq!(image_grid(&t, 9).unwrap().width(), 6);
    }

    #[test]
    fn csv_files_have_one_row_per_item() {
        let dir = tempfile::tempdir().unwrap();
        let bins = PoseBins::new(17.0, 9).unwrap();
        let report = Rank1Report {
            bins: (0..5)
                .map(|c| {
                    let (lo, hi) = bins.column_range(c);
                    BinAccuracy { column: c, code_min: lo, code_max: hi, correct: 1, total: 2, accuracy: Some(0.5) }
                })
                .collect(),
            average: 0.5,
            probes: 10,
        };
        let p = dir.path().join("r.csv");
        write_rank1_csv(&p, &report).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().last().unwrap().starts_with("average"));
    }
}
