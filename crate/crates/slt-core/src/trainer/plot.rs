//! Curve output: a CSV that round-trips exactly, plus rendered PNG line
//! plots (losses and dev BLEU-4 over epochs).

use super::{io_err, EpochStats, RunRecord, TrainerError};
use std::fs;
use std::path::Path;

/// Write `curves.csv` and `plots/{loss,bleu4}.png` under `out_dir`.
pub fn emit_curves(record: &RunRecord, out_dir: &Path) -> Result<(), TrainerError> {
    if record.epochs.is_empty() {
        return Err(TrainerError::Config(
            "cannot emit curves for a record with no epochs".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut csv = String::from("epoch,train_loss,dev_loss,dev_bleu4\n");
    for (i, e) in record.epochs.iter().enumerate() {
        // `{}` prints the shortest representation that parses back to the
        // same f64, so re-reading the file reproduces the record exactly.
        csv.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            e.train_loss,
            e.dev_loss,
            e.dev_bleu4
        ));
    }
    let csv_path = out_dir.join("curves.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;

    let plots = out_dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| io_err(&plots, e))?;

    let train: Vec<f64> = record.epochs.iter().map(|e| e.train_loss).collect();
    let dev: Vec<f64> = record.epochs.iter().map(|e| e.dev_loss).collect();
    let bleu: Vec<f64> = record.epochs.iter().map(|e| e.dev_bleu4).collect();

    let loss_png = render_lines(&[(&train, BLUE), (&dev, RED)]);
    write_png(&plots.join("loss.png"), &loss_png)?;
    let bleu_png = render_lines(&[(&bleu, GREEN)]);
    write_png(&plots.join("bleu4.png"), &bleu_png)?;
    Ok(())
}

/// Parse a `curves.csv` back into per-epoch stats.
pub fn read_curves(path: &Path) -> Result<Vec<EpochStats>, TrainerError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainerError::Config(format!("{}: empty curves file", path.display())))?;
    if header != "epoch,train_loss,dev_loss,dev_bleu4" {
        return Err(TrainerError::Config(format!(
            "{}: unexpected curves header {header:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(TrainerError::Config(format!(
                "{}: line {} has {} fields, expected 4",
                path.display(),
                ln + 2,
                fields.len()
            )));
        }
        let epoch: usize = fields[0].parse().map_err(|_| {
            TrainerError::Config(format!("{}: bad epoch {:?}", path.display(), fields[0]))
        })?;
        if epoch != out.len() + 1 {
            return Err(TrainerError::Config(format!(
                "{}: epochs must count 1..n, found {epoch} at row {}",
                path.display(),
                out.len() + 1
            )));
        }
        let mut vals = [0.0; 3];
        for (slot, field) in vals.iter_mut().zip(&fields[1..]) {
            *slot = field.parse().map_err(|_| {
                TrainerError::Config(format!("{}: bad number {field:?}", path.display()))
            })?;
        }
        out.push(EpochStats {
            train_loss: vals[0],
            dev_loss: vals[1],
            dev_bleu4: vals[2],
        });
    }
    Ok(out)
}

const W: usize = 640;
const H: usize = 400;
const MARGIN: usize = 48;
const BLUE: [u8; 3] = [46, 96, 204];
const RED: [u8; 3] = [204, 64, 46];
const GREEN: [u8; 3] = [36, 150, 80];
const AXIS: [u8; 3] = [70, 70, 70];
const GRID: [u8; 3] = [225, 225, 225];

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Canvas {
        Canvas {
            px: vec![255; W * H * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= W as i64 || y >= H as i64 {
            return;
        }
        let o = (y as usize * W + x as usize) * 3;
        self.px[o..o + 3].copy_from_slice(&c);
    }

    fn dot(&mut self, x: i64, y: i64, c: [u8; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.set(x + dx, y + dy, c);
            }
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3], thick: bool) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            if thick {
                self.dot(x, y, c);
            } else {
                self.set(x, y, c);
            }
            if x == x1 && y == y1 {
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
}

/// Plot each series over epochs 1..n in the given color, with axes and a
/// light horizontal grid. No text: the CSV next to it carries the numbers.
fn render_lines(series: &[(&Vec<f64>, [u8; 3])]) -> Vec<u8> {
    let mut canvas = Canvas::new();
    let n = series.iter().map(|(s, _)| s.len()).max().unwrap_or(0);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (s, _) in series {
        for &v in s.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = (W - 2 * MARGIN) as f64;
    let plot_h = (H - 2 * MARGIN) as f64;
    let x_at = |i: usize| {
        let t = if n <= 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        (MARGIN as f64 + t * plot_w) as i64
    };
    let y_at = |v: f64| {
        let t = (v - lo) / (hi - lo);
        (H as f64 - MARGIN as f64 - t * plot_h) as i64
    };

    for k in 0..=4 {
        let y = MARGIN as i64 + (k as f64 / 4.0 * plot_h) as i64;
        canvas.line(MARGIN as i64, y, (W - MARGIN) as i64, y, GRID, false);
    }
    canvas.line(
        MARGIN as i64,
        MARGIN as i64,
        MARGIN as i64,
        (H - MARGIN) as i64,
        AXIS,
        false,
    );
    canvas.line(
        MARGIN as i64,
        (H - MARGIN) as i64,
        (W - MARGIN) as i64,
        (H - MARGIN) as i64,
        AXIS,
        false,
    );

    for (s, color) in series {
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            canvas.dot(x_at(i), y_at(v), *color);
            if i + 1 < s.len() && s[i + 1].is_finite() {
                canvas.line(x_at(i), y_at(v), x_at(i + 1), y_at(s[i + 1]), *color, true);
            }
        }
    }
    canvas.px
}

fn write_png(path: &Path, rgb: &[u8]) -> Result<(), TrainerError> {
    let img = image::RgbImage::from_raw(W as u32, H as u32, rgb.to_vec())
        .expect("canvas buffer matches dimensions");
    img.save(path)
        .map_err(|e| TrainerError::Config(format!("failed to write {}: {e}", path.display())))
}
