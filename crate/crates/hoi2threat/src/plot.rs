//! Hand-drawn PNG plots: loss curves over training steps and grouped metric
//! bars for report rows. Filenames are fixed functions of the input so
//! repeated runs overwrite rather than accumulate.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::eval::Report;
use crate::trainer::TrainLog;

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const MARGIN: u32 = 48;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const CURVE: Rgb<u8> = Rgb([31, 119, 180]);
/// One bar color per metric column, cycled if a report has more columns.
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// Writes `loss-<stage>.png` with loss_total over steps.
pub fn plot_loss_curve(log: &TrainLog, out_dir: &Path) -> Result<PathBuf> {
    let rows = log.rows();
    if rows.is_empty() {
        return Err(Error::config("cannot plot an empty training log"));
    }
    let mut img = blank_canvas();

    let x_min = rows[0].step as f64;
    let x_max = rows[rows.len() - 1].step as f64;
    let (mut y_min, mut y_max) = rows.iter().fold((f64::MAX, f64::MIN), |(lo, hi), r| {
        (lo.min(r.loss_total), hi.max(r.loss_total))
    });
    if y_max - y_min < 1e-12 {
        y_min -= 1.0;
        y_max += 1.0;
    }

    let to_px = |step: f64, loss: f64| -> (i64, i64) {
        let span_x = (WIDTH - 2 * MARGIN) as f64;
        let span_y = (HEIGHT - 2 * MARGIN) as f64;
        let fx = if x_max > x_min { (step - x_min) / (x_max - x_min) } else { 0.5 };
        let fy = (loss - y_min) / (y_max - y_min);
        (
            (MARGIN as f64 + fx * span_x).round() as i64,
            (HEIGHT as f64 - MARGIN as f64 - fy * span_y).round() as i64,
        )
    };

    let points: Vec<(i64, i64)> = rows.iter().map(|r| to_px(r.step as f64, r.loss_total)).collect();
    for pair in points.windows(2) {
        draw_line(&mut img, pair[0], pair[1], CURVE);
    }
    for &(x, y) in &points {
        fill_rect(&mut img, x - 1, y - 1, 3, 3, CURVE);
    }

    let path = out_dir.join(format!("loss-{}.png", rows[0].stage));
    img.save(&path)?;
    Ok(path)
}

/// Writes `metric-bars.png`: one group of bars per report row, one color
/// per metric column. Trio cells are drawn at their F1 value.
pub fn plot_metric_bars(report: &Report, out_dir: &Path) -> Result<PathBuf> {
    if report.rows.is_empty() {
        return Err(Error::config("cannot plot an empty report"));
    }
    let mut img = blank_canvas();

    let top = report
        .rows
        .iter()
        .flat_map(|r| r.cells.iter().map(|c| c.key()))
        .fold(f64::MIN, f64::max)
        .max(1e-9);

    let groups = report.rows.len() as u32;
    let bars = report.columns.len() as u32;
    let span_x = WIDTH - 2 * MARGIN;
    let span_y = (HEIGHT - 2 * MARGIN) as f64;
    let group_w = span_x / groups;
    let bar_w = (group_w / (bars + 1)).max(2);

    for (g, row) in report.rows.iter().enumerate() {
        for (b, cell) in row.cells.iter().enumerate() {
            let h = ((cell.key().max(0.0) / top) * span_y).round() as i64;
            let x = MARGIN as i64
                + (g as u32 * group_w) as i64
                + (bar_w / 2) as i64
                + (b as u32 * bar_w) as i64;
            let y = HEIGHT as i64 - MARGIN as i64 - h;
            fill_rect(&mut img, x, y, bar_w.saturating_sub(1).max(1), h.max(1) as u32,
                PALETTE[b % PALETTE.len()]);
        }
    }

    let path = out_dir.join("metric-bars.png");
    img.save(&path)?;
    Ok(path)
}

fn blank_canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let left = MARGIN as i64;
    let right = (WIDTH - MARGIN) as i64;
    let top = MARGIN as i64;
    let bottom = (HEIGHT - MARGIN) as i64;
    draw_line(&mut img, (left, top), (left, bottom), AXIS);
    draw_line(&mut img, (left, bottom), (right, bottom), AXIS);
    for i in 0..=4 {
        let x = left + (right - left) * i / 4;
        let y = top + (bottom - top) * i / 4;
        draw_line(&mut img, (x, bottom), (x, bottom + 4), AXIS);
        draw_line(&mut img, (left - 4, y), (left, y), AXIS);
    }
    img
}

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = from;
    let dx = (to.0 - from.0).abs();
    let dy = -(to.1 - from.1).abs();
    let sx = if from.0 < to.0 { 1 } else { -1 };
    let sy = if from.1 < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put_pixel(img, x, y, color);
        if x == to.0 && y == to.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: Rgb<u8>) {
    for dy in 0..h as i64 {
        for dx in 0..w as i64 {
            put_pixel(img, x + dx, y + dy, color);
        }
    }
}

fn put_pixel(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{build_report, Cell, ReportRow};
    use crate::trainer::TrainStepRow;

    fn sample_log(n: u64) -> TrainLog {
        let mut log = TrainLog::new();
        for step in 1..=n {
            log.push(TrainStepRow {
                step,
                stage: "hoi".into(),
                loss_total: 10.0 / step as f64,
                loss_loc: 0.0,
                loss_act: 0.0,
                loss_box: 0.0,
                loss_lm: 0.0,
                lr: 1e-4,
                seconds: 0.1,
            });
        }
        log
    }

    #[test]
    fn loss_curve_is_written_with_stage_in_the_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = plot_loss_curve(&sample_log(10), dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "loss-hoi.png");
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        assert!(img.pixels().any(|p| *p == CURVE));
    }

    #[test]
    fn loss_curve_bytes_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = plot_loss_curve(&sample_log(7), a.path()).unwrap();
        let pb = plot_loss_curve(&sample_log(7), b.path()).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn empty_log_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = plot_loss_curve(&TrainLog::new(), dir.path()).unwrap_err();
        assert!(err.to_string().contains("empty training log"));
    }

    #[test]
    fn single_step_log_still_plots() {
        let dir = tempfile::tempdir().unwrap();
        plot_loss_curve(&sample_log(1), dir.path()).unwrap();
    }

    #[test]
    fn bar_chart_uses_one_color_per_metric() {
        let columns = ["coi_proxy", "bma_proxy", "tdo_proxy"].map(String::from).to_vec();
        let rows = ["full", "without_hoi_tag", "without_pos"]
            .iter()
            .enumerate()
            .map(|(i, name)| ReportRow {
                dataset: "synthetic".into(),
                model: name.to_string(),
                cells: vec![
                    Cell::Scalar(0.9 - 0.2 * i as f64),
                    Cell::Scalar(0.8 - 0.2 * i as f64),
                    Cell::Scalar(0.7 - 0.2 * i as f64),
                ],
            })
            .collect();
        let report = build_report(&columns, rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = plot_metric_bars(&report, dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "metric-bars.png");
        let img = image::open(&path).unwrap().to_rgb8();
        for color in &PALETTE[..3] {
            assert!(img.pixels().any(|p| p == color), "missing {color:?}");
        }
    }

    #[test]
    fn all_zero_metrics_do_not_panic() {
        let report = build_report(
            &["m".to_string()],
            vec![ReportRow {
                dataset: "d".into(),
                model: "a".into(),
                cells: vec![Cell::Scalar(0.0)],
            }],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        plot_metric_bars(&report, dir.path()).unwrap();
    }
}
