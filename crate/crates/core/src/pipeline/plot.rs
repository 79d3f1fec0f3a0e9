//! Self-contained SVG line charts of the exported CSVs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("CSV does not match the figure schema: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    /// Number of weakly and strongly connected components, log scale.
    Disconnected,
    /// Largest WCC and SCC as a share of all users.
    RelativeSize,
    /// Largest over second-largest component.
    Ratio,
    /// The four directed degree assortativity coefficients.
    Newman,
    /// Users, and users above the degree filter.
    Growth,
    PagerankGini,
    HitsGini,
    /// Rolling-sweep p-values.
    Sweep,
    /// Daily volatility index.
    Volatility,
}

impl FigureKind {
    pub const ALL: [FigureKind; 9] = [
        FigureKind::Disconnected,
        FigureKind::RelativeSize,
        FigureKind::Ratio,
        FigureKind::Newman,
        FigureKind::Growth,
        FigureKind::PagerankGini,
        FigureKind::HitsGini,
        FigureKind::Sweep,
        FigureKind::Volatility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureKind::Disconnected => "disconnected",
            FigureKind::RelativeSize => "relative-size",
            FigureKind::Ratio => "ratio",
            FigureKind::Newman => "newman",
            FigureKind::Growth => "growth",
            FigureKind::PagerankGini => "pagerank-gini",
            FigureKind::HitsGini => "hits-gini",
            FigureKind::Sweep => "sweep",
            FigureKind::Volatility => "volatility",
        }
    }

    fn spec(self) -> Spec {
        use Expr::{Col, Ratio};
        let (x, series, log_y, y_label): (&str, Vec<(&str, Expr)>, bool, &str) = match self {
            FigureKind::Disconnected => {
                ("week", vec![("weakly", Col("n_wcc")), ("strongly", Col("n_scc"))], true, "components")
            }
            FigureKind::RelativeSize => (
                "week",
                vec![("LWCC", Ratio("lwcc", "n_nodes")), ("LSCC", Ratio("lscc", "n_nodes"))],
                false,
                "share of users",
            ),
            FigureKind::Ratio => (
                "week",
                vec![("WCC", Ratio("lwcc", "wcc2")), ("SCC", Ratio("lscc", "scc2"))],
                true,
                "largest / second largest",
            ),
            FigureKind::Newman => (
                "week",
                vec![
                    ("r_out_out", Col("r_out_out")),
                    ("r_out_in", Col("r_out_in")),
                    ("r_in_out", Col("r_in_out")),
                    ("r_in_in", Col("r_in_in")),
                ],
                false,
                "assortativity",
            ),
            FigureKind::Growth => (
                "week",
                vec![("users", Col("total_nodes")), ("filtered users", Col("filtered_nodes"))],
                true,
                "users",
            ),
            FigureKind::PagerankGini => ("week", vec![("PageRank", Col("pr_gini"))], false, "Gini"),
            FigureKind::HitsGini => (
                "week",
                vec![("authority", Col("hits_auth_gini")), ("hub", Col("hits_hub_gini"))],
                false,
                "Gini",
            ),
            FigureKind::Sweep => ("event_date", vec![("p-value", Col("p_value"))], false, "p-value"),
            FigureKind::Volatility => ("date", vec![("VOL1", Col("vol1"))], false, "volatility"),
        };
        Spec { x, series, log_y, y_label }
    }
}

impl FromStr for FigureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        FigureKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = FigureKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown figure kind {s:?}; expected one of {}", names.join(", "))
        })
    }
}

enum Expr {
    Col(&'static str),
    Ratio(&'static str, &'static str),
}

struct Spec {
    x: &'static str,
    series: Vec<(&'static str, Expr)>,
    log_y: bool,
    y_label: &'static str,
}

const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Renders `csv` as an SVG chart of the given kind.
pub fn plot(csv: &str, kind: FigureKind) -> Result<String, PlotError> {
    let spec = kind.spec();
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> =
        lines.next().ok_or_else(|| PlotError::SchemaMismatch("empty CSV".into()))?.split(',').map(str::trim).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| PlotError::SchemaMismatch(format!("missing column {name:?} for {}", kind.name())))
    };
    let x_col = col(spec.x)?;
    let mut series_cols = Vec::new();
    for (_, e) in &spec.series {
        series_cols.push(match e {
            Expr::Col(c) => (col(c)?, None),
            Expr::Ratio(a, b) => (col(a)?, Some(col(b)?)),
        });
    }

    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').map(str::trim).collect()).collect();
    if rows.is_empty() {
        return Err(PlotError::SchemaMismatch("no data rows".into()));
    }
    let numeric_x = rows.iter().all(|r| r.get(x_col).is_some_and(|v| v.parse::<f64>().is_ok()));
    let xs: Vec<f64> =
        rows.iter().enumerate().map(|(i, r)| if numeric_x { r[x_col].parse().unwrap() } else { i as f64 }).collect();
    let value = |r: &Vec<&str>, c: usize| r.get(c).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite());
    let mut points: Vec<Vec<(f64, f64)>> = Vec::new();
    for (num, den) in &series_cols {
        let mut pts = Vec::new();
        for (r, &x) in rows.iter().zip(&xs) {
            let y = match den {
                None => value(r, *num),
                Some(d) => match (value(r, *num), value(r, *d)) {
                    (Some(a), Some(b)) if b != 0.0 => Some(a / b),
                    _ => None,
                },
            };
            if let Some(y) = y.filter(|y| !spec.log_y || *y > 0.0) {
                pts.push((x, y));
            }
        }
        points.push(pts);
    }

    let ty = |y: f64| if spec.log_y { y.log10() } else { y };
    let all: Vec<(f64, f64)> = points.iter().flatten().map(|&(x, y)| (x, ty(y))).collect();
    let (mut x0, mut x1) = (xs[0], xs[xs.len() - 1]);
    if x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if !y0.is_finite() {
        y0 = 0.0;
        y1 = 1.0;
    }
    if spec.log_y {
        y0 = y0.floor();
        y1 = y1.ceil().max(y0 + 1.0);
    } else if y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );

    let y_ticks: Vec<f64> = if spec.log_y {
        (y0 as i64..=y1 as i64).map(|e| e as f64).collect()
    } else {
        (0..=4).map(|i| y0 + (y1 - y0) * i as f64 / 4.0).collect()
    };
    for t in y_ticks {
        let label = if spec.log_y { format!("1e{t}") } else { tick_label(t) };
        let y = sy(t);
        let _ = writeln!(w, r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"##, LEFT - 5.0);
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, LEFT - 8.0, y + 4.0);
    }
    let x_ticks: Vec<usize> = if rows.len() <= 5 {
        (0..rows.len()).collect()
    } else {
        (0..=4).map(|i| i * (rows.len() - 1) / 4).collect()
    };
    for i in x_ticks {
        let x = sx(xs[i]);
        let base = TOP + plot_h;
        let label = escape(rows[i].get(x_col).copied().unwrap_or(""));
        let _ = writeln!(w, r#"<line x1="{x:.2}" y1="{base:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, base + 5.0);
        let _ = writeln!(w, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, base + 20.0);
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0,
        escape(spec.x)
    );
    let _ = writeln!(
        w,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + plot_h / 2.0,
        escape(spec.y_label)
    );

    for (i, ((name, _), pts)) in spec.series.iter().zip(&points).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(ty(y)))).collect();
        let _ = writeln!(
            w,
            r#"<polyline class="series" data-name="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 20.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ =
            writeln!(w, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(w, r#"<text x="{}" y="{}">{name}</text>"#, lx + 26.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn plot_file(input: &Path, kind: FigureKind, output: &Path) -> Result<(), PlotError> {
    let csv = fs::read_to_string(input)?;
    fs::write(output, plot(&csv, kind)?)?;
    Ok(())
}
