//! Minimal line-chart rendering for run artifacts: read a numeric CSV
//! (loss curves, sweep summaries), draw each column as a polyline, and save
//! the result as an image. No text rendering — series are told apart by
//! color, with legend swatches in the top margin, in column order.

use std::path::Path;

use decloud_core::batch::ImageBatch;

use crate::data::save_image;
use crate::error::Error;

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// (x, y) pairs in data coordinates, in file order.
    pub points: Vec<(f64, f64)>,
}

/// Distinct series colors (RGB on the internal [−1, 1] scale).
const PALETTE: [[f64; 3]; 6] = [
    [-0.9, -0.2, 0.9],  // blue
    [0.9, -0.5, -0.5],  // red
    [-0.5, 0.6, -0.5],  // green
    [0.8, 0.4, -0.8],   // orange
    [0.5, -0.6, 0.8],   // purple
    [-0.7, 0.5, 0.9],   // cyan
];

const BACKGROUND: f64 = 1.0;
const AXIS: f64 = -0.6;

/// Parse a header-plus-rows CSV into one series per column after the first.
///
/// The first column supplies x; a first cell that does not parse as a number
/// (an image id, a "mean" marker) falls back to the data-row index. Blank or
/// non-numeric value cells skip that point for that column only.
pub fn read_csv_series(path: &Path) -> Result<Vec<Series>, Error> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty CSV", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need an x column plus at least one value column, got {:?}",
            path.display(),
            header
        )));
    }
    let mut series: Vec<Series> = columns[1..]
        .iter()
        .map(|label| Series { label: label.trim().to_string(), points: Vec::new() })
        .collect();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} cells, header has {}",
                path.display(),
                row + 1,
                cells.len(),
                columns.len()
            )));
        }
        let x = cells[0].trim().parse::<f64>().unwrap_or(row as f64);
        for (s, cell) in series.iter_mut().zip(&cells[1..]) {
            if let Ok(y) = cell.trim().parse::<f64>() {
                if y.is_finite() {
                    s.points.push((x, y));
                }
            }
        }
    }
    Ok(series)
}

struct Canvas {
    height: usize,
    width: usize,
    /// Planar RGB, (3, height, width).
    data: Vec<f64>,
}

impl Canvas {
    fn new(height: usize, width: usize) -> Canvas {
        Canvas { height, width, data: vec![BACKGROUND; 3 * height * width] }
    }

    fn set(&mut self, y: i64, x: i64, color: [f64; 3]) {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            return;
        }
        let plane = self.height * self.width;
        let at = y as usize * self.width + x as usize;
        for (c, v) in color.iter().enumerate() {
            self.data[c * plane + at] = *v;
        }
    }

    /// Parametric line sampling; adequate for chart-scale segments.
    fn line(&mut self, from: (f64, f64), to: (f64, f64), color: [f64; 3]) {
        let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let y = from.0 + (to.0 - from.0) * t;
            let x = from.1 + (to.1 - from.1) * t;
            self.set(y.round() as i64, x.round() as i64, color);
        }
    }

    fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, color: [f64; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set(y as i64, x as i64, color);
            }
        }
    }
}

fn data_range(series: &[Series], pick: impl Fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for p in &s.points {
            lo = lo.min(pick(p));
            hi = hi.max(pick(p));
        }
    }
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Draw `series` as polylines on a white background with framed axes.
/// Sides must satisfy the image-batch side rules (powers of two).
pub fn render_chart(series: &[Series], height: usize, width: usize) -> Result<ImageBatch, Error> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Data("nothing to plot: every series is empty".into()));
    }
    let margin_y = (height / 8).max(4);
    let margin_x = (width / 8).max(4);
    if height <= 2 * margin_y + 2 || width <= 2 * margin_x + 2 {
        return Err(Error::Config(format!(
            "chart size {height}x{width} leaves no plotting area"
        )));
    }
    let (x_lo, x_hi) = data_range(series, |p| p.0);
    let (y_lo, y_hi) = data_range(series, |p| p.1);
    let plot_h = (height - 2 * margin_y) as f64;
    let plot_w = (width - 2 * margin_x) as f64;
    let to_px = |&(x, y): &(f64, f64)| -> (f64, f64) {
        let fx = (x - x_lo) / (x_hi - x_lo);
        let fy = (y - y_lo) / (y_hi - y_lo);
        // Screen y grows downward; data y grows upward.
        (margin_y as f64 + (1.0 - fy) * plot_h, margin_x as f64 + fx * plot_w)
    };

    let mut canvas = Canvas::new(height, width);
    let frame = [
        ((margin_y, margin_x), (margin_y, width - margin_x)),
        ((height - margin_y, margin_x), (height - margin_y, width - margin_x)),
        ((margin_y, margin_x), (height - margin_y, margin_x)),
        ((margin_y, width - margin_x), (height - margin_y, width - margin_x)),
    ];
    for ((ay, ax), (by, bx)) in frame {
        canvas.line(
            (ay as f64, ax as f64),
            (by as f64, bx as f64),
            [AXIS, AXIS, AXIS],
        );
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // Legend swatch in the top margin.
        let sw = (margin_y / 2).max(2);
        canvas.fill_rect(1, margin_x + i * 2 * sw, sw, sw, color);
        if s.points.len() == 1 {
            let (py, px) = to_px(&s.points[0]);
            for (dy, dx) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                canvas.set(py.round() as i64 + dy, px.round() as i64 + dx, color);
            }
            continue;
        }
        for pair in s.points.windows(2) {
            canvas.line(to_px(&pair[0]), to_px(&pair[1]), color);
        }
    }
    Ok(ImageBatch::from_vec(canvas.data, (1, 3, height, width))?)
}

/// Read a CSV and write its chart next to wherever `output` points.
pub fn plot_csv(input: &Path, output: &Path, height: usize, width: usize) -> Result<(), Error> {
    let series = read_csv_series(input)?;
    let chart = render_chart(&series, height, width)?;
    save_image(&chart, 0, output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_image;

    #[test]
    fn csv_columns_become_series_and_blank_cells_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        std::fs::write(&path, "iteration,total,ddpm,wa\n0,3.0,3.0,\n1,2.0,2.0,\n2,1.5,,1.5\n")
            .unwrap();
        let series = read_csv_series(&path).unwrap();
        assert_eq!(series.len(), 3);
        assert_eq!(series[0].label, "total");
        assert_eq!(series[0].points, vec![(0.0, 3.0), (1.0, 2.0), (2.0, 1.5)]);
        assert_eq!(series[1].points.len(), 2);
        assert_eq!(series[2].points, vec![(2.0, 1.5)]);
    }

    #[test]
    fn non_numeric_x_cells_fall_back_to_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        std::fs::write(&path, "id,psnr\nimg-b,20.0\nimg-a,22.0\nmean,21.0\n").unwrap();
        let series = read_csv_series(&path).unwrap();
        assert_eq!(series[0].points, vec![(0.0, 20.0), (1.0, 22.0), (2.0, 21.0)]);
    }

    #[test]
    fn malformed_csvs_are_refused_with_the_path_named() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.csv");
        let err = read_csv_series(&missing).unwrap_err();
        assert!(err.to_string().contains("absent.csv"), "{err}");

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "x,y\n1,2\n3\n").unwrap();
        match read_csv_series(&ragged) {
            Err(Error::Data(msg)) => assert!(msg.contains("row 2"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }

        let narrow = dir.path().join("narrow.csv");
        std::fs::write(&narrow, "x\n1\n").unwrap();
        assert!(matches!(read_csv_series(&narrow), Err(Error::Data(_))));
    }

    #[test]
    fn charts_have_white_corners_and_colored_strokes() {
        let series = vec![Series {
            label: "loss".into(),
            points: (0..50).map(|i| (i as f64, (50 - i) as f64)).collect(),
        }];
        let chart = render_chart(&series, 128, 256).unwrap();
        assert_eq!(chart.shape(), (1, 3, 128, 256));
        let view = chart.image(0);
        // Outside the margins nothing is drawn.
        assert_eq!(view.band(0)[127 * 256 + 255], BACKGROUND);
        // Some pixel carries the first palette color exactly.
        let plane = 128 * 256;
        let data = view.data();
        let hit = (0..plane).any(|i| {
            (0..3).all(|c| data[c * plane + i] == PALETTE[0][c])
        });
        assert!(hit, "no stroke pixel found");
    }

    #[test]
    fn empty_input_cannot_be_plotted() {
        let none: Vec<Series> = vec![Series { label: "v".into(), points: vec![] }];
        assert!(matches!(render_chart(&none, 128, 128), Err(Error::Data(_))));
    }

    #[test]
    fn constant_series_render_despite_degenerate_ranges() {
        let series = vec![Series { label: "c".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] }];
        render_chart(&series, 64, 64).unwrap();
        let one = vec![Series { label: "p".into(), points: vec![(3.0, 4.0)] }];
        render_chart(&one, 64, 64).unwrap();
    }

    #[test]
    fn csv_to_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("curve.csv");
        std::fs::write(&csv, "iteration,total\n0,1.0\n1,0.5\n2,0.25\n").unwrap();
        let png = dir.path().join("curve.png");
        plot_csv(&csv, &png, 128, 128).unwrap();
        let loaded = load_image(&png).unwrap();
        assert_eq!(loaded.shape(), (1, 3, 128, 128));
    }
}
