use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::EvalError;

const CELL: usize = 40;
const MARGIN: usize = 48;

/// `o1, h1, o2, …` in factor order: observed and hidden factors are
/// numbered separately from 1.
pub fn factor_labels(n_factors: usize, hidden: &[usize]) -> Vec<String> {
    let (mut ko, mut kh) = (0, 0);
    (0..n_factors)
        .map(|f| {
            if hidden.contains(&f) {
                kh += 1;
                format!("h{kh}")
            } else {
                ko += 1;
                format!("o{ko}")
            }
        })
        .collect()
}

/// Dark at 0, light at `δ` and above.
fn colour(v: f64, delta: f64) -> (u8, u8, u8) {
    let t = if v.is_finite() { (v / delta).clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(24.0, 255.0), lerp(28.0, 244.0), lerp(72.0, 196.0))
}

/// SVG of a `(d_S + 1) × d_S` CMI matrix; rows are parents (factors then the
/// action), columns are children. The colour scale is capped at `delta`.
pub fn render_heatmap(values: &[Vec<f64>], delta: f64, labels: &[String], title: &str) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let (w, h) = (MARGIN + cols * CELL + 8, MARGIN + rows * CELL + 8);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let label = |i: usize| if i < labels.len() { labels[i].clone() } else { "a".to_string() };
    for c in 0..cols {
        let x = MARGIN + c * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text class="col" x="{x}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, MARGIN - 10, escape(&label(c)));
    }
    for (r, row) in values.iter().enumerate() {
        let y = MARGIN + r * CELL;
        let _ = writeln!(
            s,
            r#"<text class="row" x="{}" y="{}" text-anchor="end" font-size="13">{}</text>"#,
            MARGIN - 8,
            y + CELL / 2 + 5,
            escape(&label(r))
        );
        for (c, &v) in row.iter().enumerate() {
            let (cr, cg, cb) = colour(v, delta);
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="#{cr:02x}{cg:02x}{cb:02x}"><title>{v:.4}</title></rect>"##,
                MARGIN + c * CELL
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One `cmi_step_XXXXXX.svg` per `(step, matrix)`.
pub fn write_heatmaps(
    snapshots: &[(u64, Vec<Vec<f64>>)],
    delta: f64,
    labels: &[String],
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let io = |p: &Path, source| EvalError::Io {
        path: p.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    snapshots
        .iter()
        .map(|(step, values)| {
            let path = dir.join(format!("cmi_step_{step:06}.svg"));
            let svg = render_heatmap(values, delta, labels, &format!("CMI at step {step}"));
            std::fs::write(&path, svg).map_err(|e| io(&path, e))?;
            Ok(path)
        })
        .collect()
}
