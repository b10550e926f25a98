//! Self-contained SVG figures.
//!
//! Every chart is a pure function from data to bytes: no system fonts are
//! measured, no randomness, no timestamps, and map-free iteration, so
//! identical inputs always produce identical files. Each figure embeds its
//! own data as a CSV table inside an XML comment, which keeps the artifacts
//! diffable and lets the numbers be recovered without an SVG parser.

/// Color-blind-safe palette (Tol bright); series cycle through it.
pub const PALETTE: [&str; 7] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 44.0;
const MARGIN_BOTTOM: f64 = 56.0;

/// One named sequence of (x, y) points with optional symmetric error bars.
#[derive(Debug, Clone, Default)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Half-height of the error bar per point; empty for none.
    pub errors: Vec<f64>,
}

impl Series {
    /// Series without error bars.
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            errors: Vec::new(),
        }
    }
}

/// Escape text content for SVG element bodies and attributes.
fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// XML comments must not contain `--`; soften any run of dashes.
fn comment_safe(s: &str) -> String {
    let mut out = s.replace("--", "- -");
    while out.contains("--") {
        out = out.replace("--", "- -");
    }
    out
}

/// Fixed-precision float for path data: enough digits to be faithful,
/// fixed so output bytes are stable.
fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick label with precision derived from the tick spacing.
fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as i32).clamp(0, 6) as usize
    };
    let s = format!("{v:.decimals$}");
    // Avoid the distinct bit pattern of negative zero leaking into bytes.
    if s.starts_with("-0") && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}

/// Round `raw` up to the nearest 1/2/5 x 10^k step.
fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    let frac = raw / mag;
    let nice = if frac <= 1.0 {
        1.0
    } else if frac <= 2.0 {
        2.0
    } else if frac <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// Tick positions covering `[min, max]` with roughly `target` intervals.
pub fn nice_ticks(min: f64, max: f64, target: usize) -> Vec<f64> {
    if !(min.is_finite() && max.is_finite()) || min >= max {
        return vec![min];
    }
    let step = nice_step((max - min) / target.max(1) as f64);
    let start = (min / step).ceil() as i64;
    let end = (max / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

/// Padded data range; degenerate spans widen so a scale always exists.
fn padded_range(lo: f64, hi: f64) -> (f64, f64) {
    let (lo, hi) = (lo.min(hi), hi.max(lo));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

/// Linear map from data to pixel coordinates inside the plot area.
struct Scale {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Scale {
    fn x(&self, v: f64) -> f64 {
        let t = (v - self.x0) / (self.x1 - self.x0);
        MARGIN_LEFT + t * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.y0) / (self.y1 - self.y0);
        // SVG y grows downward; data y grows upward.
        HEIGHT - MARGIN_BOTTOM - t * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

struct Frame {
    body: String,
}

impl Frame {
    fn new(title: &str) -> Self {
        let mut body = String::with_capacity(4096);
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
             viewBox=\"0 0 {w} {h}\" font-family=\"Helvetica, Arial, sans-serif\">\n",
            w = WIDTH as i64,
            h = HEIGHT as i64
        ));
        body.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
            WIDTH as i64, HEIGHT as i64
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"24\" font-size=\"15\" font-weight=\"bold\" \
             text-anchor=\"middle\">{}</text>\n",
            px(WIDTH / 2.0),
            esc(title)
        ));
        Self { body }
    }

    fn data_comment(&mut self, csv: &str) {
        self.body
            .push_str(&format!("<!-- data:\n{}\n-->\n", comment_safe(csv)));
    }

    fn axes(&mut self, scale: &Scale, x_label: &str, y_label: &str) {
        let left = MARGIN_LEFT;
        let right = WIDTH - MARGIN_RIGHT;
        let top = MARGIN_TOP;
        let bottom = HEIGHT - MARGIN_BOTTOM;
        self.body.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#333333\"/>\n\
             <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"#333333\"/>\n",
            l = px(left),
            r = px(right),
            t = px(top),
            b = px(bottom)
        ));

        let x_ticks = nice_ticks(scale.x0, scale.x1, 6);
        let x_step = if x_ticks.len() >= 2 {
            x_ticks[1] - x_ticks[0]
        } else {
            1.0
        };
        for &t in &x_ticks {
            let xp = scale.x(t);
            self.body.push_str(&format!(
                "<line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"#333333\"/>\n\
                 <text x=\"{x}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"middle\">{v}</text>\n",
                x = px(xp),
                b = px(bottom),
                b2 = px(bottom + 5.0),
                ty = px(bottom + 18.0),
                v = tick_label(t, x_step)
            ));
        }
        let y_ticks = nice_ticks(scale.y0, scale.y1, 5);
        let y_step = if y_ticks.len() >= 2 {
            y_ticks[1] - y_ticks[0]
        } else {
            1.0
        };
        for &t in &y_ticks {
            let yp = scale.y(t);
            self.body.push_str(&format!(
                "<line x1=\"{l2}\" y1=\"{y}\" x2=\"{l}\" y2=\"{y}\" stroke=\"#333333\"/>\n\
                 <line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#eeeeee\"/>\n\
                 <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"end\">{v}</text>\n",
                l = px(left),
                l2 = px(left - 5.0),
                r = px(right),
                y = px(yp),
                tx = px(left - 8.0),
                ty = px(yp + 4.0),
                v = tick_label(t, y_step)
            ));
        }

        self.body.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"middle\">{l}</text>\n",
            x = px((left + right) / 2.0),
            y = px(HEIGHT - 14.0),
            l = esc(x_label)
        ));
        self.body.push_str(&format!(
            "<text x=\"18\" y=\"{y}\" font-size=\"12\" text-anchor=\"middle\" \
             transform=\"rotate(-90 18 {y})\">{l}</text>\n",
            y = px((top + bottom) / 2.0),
            l = esc(y_label)
        ));
    }

    fn legend(&mut self, labels: &[&str]) {
        let x = MARGIN_LEFT + 10.0;
        for (i, label) in labels.iter().enumerate() {
            let y = MARGIN_TOP + 14.0 + i as f64 * 16.0;
            let color = PALETTE[i % PALETTE.len()];
            self.body.push_str(&format!(
                "<line x1=\"{x1}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{c}\" \
                 stroke-width=\"2\"/>\n\
                 <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\">{t}</text>\n",
                x1 = px(x),
                x2 = px(x + 18.0),
                ly = px(y - 4.0),
                tx = px(x + 24.0),
                ty = px(y),
                c = color,
                t = esc(label)
            ));
        }
    }

    fn note(&mut self, text: &str) {
        self.body.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\" \
             fill=\"#555555\">{t}</text>\n",
            x = px(WIDTH - MARGIN_RIGHT),
            y = px(MARGIN_TOP - 6.0),
            t = esc(text)
        ));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn series_csv(series: &[Series]) -> String {
    let mut csv = String::from("series,x,y,err\n");
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let err = s.errors.get(i).copied().unwrap_or(0.0);
            csv.push_str(&format!("{},{x:.9},{y:.9},{err:.9}\n", comment_safe(&s.label)));
        }
    }
    csv.pop();
    csv
}

fn series_bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let e = s.errors.get(i).copied().unwrap_or(0.0);
            let (lo, hi) = (y - e, y + e);
            bounds = Some(match bounds {
                None => (x, x, lo, hi),
                Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(lo), y1.max(hi)),
            });
        }
    }
    bounds
}

/// Line chart: one polyline with point markers per series, optional error
/// bars, legend in the top-left of the plot area.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut frame = Frame::new(title);
    frame.data_comment(&series_csv(series));
    let Some((x_lo, x_hi, y_lo, y_hi)) = series_bounds(series) else {
        frame.body.push_str(
            "<text x=\"320\" y=\"200\" font-size=\"13\" text-anchor=\"middle\">no data</text>\n",
        );
        return frame.finish();
    };
    let (x0, x1) = padded_range(x_lo, x_hi);
    let (y0, y1) = padded_range(y_lo, y_hi);
    let scale = Scale { x0, x1, y0, y1 };
    frame.axes(&scale, x_label, y_label);

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{},{}", px(scale.x(x)), px(scale.y(y))))
                .collect();
            frame.body.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                color,
                pts.join(" ")
            ));
        }
        for (i, &(x, y)) in s.points.iter().enumerate() {
            if let Some(&e) = s.errors.get(i) {
                if e > 0.0 {
                    frame.body.push_str(&format!(
                        "<line x1=\"{x}\" y1=\"{ylo}\" x2=\"{x}\" y2=\"{yhi}\" \
                         stroke=\"{c}\" stroke-width=\"1\"/>\n",
                        x = px(scale.x(x)),
                        ylo = px(scale.y(y - e)),
                        yhi = px(scale.y(y + e)),
                        c = color
                    ));
                }
            }
            frame.body.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                px(scale.x(x)),
                px(scale.y(y)),
                color
            ));
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    frame.legend(&labels);
    frame.finish()
}

/// Scatter chart: markers only, one color per series, optional annotation in
/// the top-right corner (e.g. a score).
pub fn scatter_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    annotation: Option<&str>,
) -> String {
    let mut frame = Frame::new(title);
    frame.data_comment(&series_csv(series));
    let Some((x_lo, x_hi, y_lo, y_hi)) = series_bounds(series) else {
        frame.body.push_str(
            "<text x=\"320\" y=\"200\" font-size=\"13\" text-anchor=\"middle\">no data</text>\n",
        );
        return frame.finish();
    };
    let (x0, x1) = padded_range(x_lo, x_hi);
    let (y0, y1) = padded_range(y_lo, y_hi);
    let scale = Scale { x0, x1, y0, y1 };
    frame.axes(&scale, x_label, y_label);
    if let Some(text) = annotation {
        frame.note(text);
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for &(x, y) in &s.points {
            frame.body.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.6\"/>\n",
                px(scale.x(x)),
                px(scale.y(y)),
                color
            ));
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    frame.legend(&labels);
    frame.finish()
}

/// Grouped bar chart. `values[g][b]` is the bar `b` within group `g`; the
/// baseline is always zero.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    group_labels: &[String],
    bar_labels: &[String],
    values: &[Vec<f64>],
) -> String {
    let mut frame = Frame::new(title);
    let mut csv = String::from("group,bar,value\n");
    for (g, row) in values.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{v:.9}\n",
                comment_safe(group_labels.get(g).map(String::as_str).unwrap_or("")),
                comment_safe(bar_labels.get(b).map(String::as_str).unwrap_or(""))
            ));
        }
    }
    csv.pop();
    frame.data_comment(&csv);

    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    if flat.is_empty() {
        frame.body.push_str(
            "<text x=\"320\" y=\"200\" font-size=\"13\" text-anchor=\"middle\">no data</text>\n",
        );
        return frame.finish();
    }
    let lo = flat.iter().copied().fold(0.0f64, f64::min);
    let hi = flat.iter().copied().fold(0.0f64, f64::max);
    let (y0, y1) = padded_range(lo, hi);
    let n_groups = values.len();
    let scale = Scale {
        x0: 0.0,
        x1: n_groups as f64,
        y0,
        y1,
    };
    // Horizontal axis carries group names, not numbers: draw the frame and
    // y-ticks, then label the group centers by hand.
    frame.axes(&scale, "", y_label);

    let n_bars = values.iter().map(Vec::len).max().unwrap_or(0);
    let group_width = 1.0f64;
    let slot = group_width / (n_bars as f64 + 1.0);
    let zero_y = scale.y(0.0);
    for (g, row) in values.iter().enumerate() {
        let g0 = g as f64;
        for (b, &v) in row.iter().enumerate() {
            let color = PALETTE[b % PALETTE.len()];
            let x_left = g0 + slot * (b as f64 + 0.5);
            let xp = scale.x(x_left);
            let wp = scale.x(x_left + slot * 0.9) - xp;
            let vy = scale.y(v);
            let (top, height) = if vy <= zero_y {
                (vy, zero_y - vy)
            } else {
                (zero_y, vy - zero_y)
            };
            frame.body.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"{c}\"/>\n",
                x = px(xp),
                y = px(top),
                w = px(wp),
                h = px(height.max(0.5)),
                c = color
            ));
        }
        let center = scale.x(g0 + 0.5);
        frame.body.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"11\" text-anchor=\"middle\">{t}</text>\n",
            x = px(center),
            y = px(HEIGHT - MARGIN_BOTTOM + 18.0),
            t = esc(group_labels.get(g).map(String::as_str).unwrap_or(""))
        ));
    }
    // Emphasize the zero baseline when negative bars exist.
    if lo < 0.0 {
        frame.body.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{y}\" x2=\"{r}\" y2=\"{y}\" stroke=\"#333333\"/>\n",
            l = px(MARGIN_LEFT),
            r = px(WIDTH - MARGIN_RIGHT),
            y = px(zero_y)
        ));
    }
    let labels: Vec<&str> = bar_labels.iter().map(String::as_str).collect();
    frame.legend(&labels);
    frame.finish()
}

/// A labeled point on the unit circle.
#[derive(Debug, Clone)]
pub struct CirclePoint {
    pub label: String,
    pub angle_degrees: f64,
    /// Index into [`PALETTE`].
    pub color: usize,
}

/// Unit-circle figure: the circle, labeled points at the given angles, and
/// dashed chords connecting the listed point-index pairs.
pub fn unit_circle_chart(title: &str, points: &[CirclePoint], chords: &[(usize, usize)]) -> String {
    let mut frame = Frame::new(title);
    let mut csv = String::from("label,angle_degrees\n");
    for p in points {
        csv.push_str(&format!(
            "{},{:.9}\n",
            comment_safe(&p.label),
            p.angle_degrees
        ));
    }
    csv.pop();
    frame.data_comment(&csv);

    let cx = WIDTH / 2.0;
    let cy = (HEIGHT + MARGIN_TOP) / 2.0 - 10.0;
    let r = ((HEIGHT - MARGIN_TOP) / 2.0 - 40.0).min(WIDTH / 2.0 - 40.0);
    let at = |deg: f64| {
        let rad = deg.to_radians();
        // SVG y points down; flip the sine so angles run counter-clockwise.
        (cx + r * rad.cos(), cy - r * rad.sin())
    };

    frame.body.push_str(&format!(
        "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"none\" stroke=\"#999999\"/>\n",
        px(cx),
        px(cy),
        px(r)
    ));
    // Faint axes through the center as an angular reference.
    frame.body.push_str(&format!(
        "<line x1=\"{x1}\" y1=\"{cy}\" x2=\"{x2}\" y2=\"{cy}\" stroke=\"#dddddd\"/>\n\
         <line x1=\"{cx}\" y1=\"{y1}\" x2=\"{cx}\" y2=\"{y2}\" stroke=\"#dddddd\"/>\n",
        x1 = px(cx - r),
        x2 = px(cx + r),
        y1 = px(cy - r),
        y2 = px(cy + r),
        cx = px(cx),
        cy = px(cy)
    ));

    for &(a, b) in chords {
        if let (Some(pa), Some(pb)) = (points.get(a), points.get(b)) {
            let (x1, y1) = at(pa.angle_degrees);
            let (x2, y2) = at(pb.angle_degrees);
            frame.body.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888888\" \
                 stroke-dasharray=\"4 3\"/>\n",
                px(x1),
                px(y1),
                px(x2),
                px(y2)
            ));
        }
    }

    for p in points {
        let (x, y) = at(p.angle_degrees);
        let color = PALETTE[p.color % PALETTE.len()];
        // Nudge the label outward along the radius so it clears the marker.
        let rad = p.angle_degrees.to_radians();
        let (lx, ly) = (x + 16.0 * rad.cos(), y - 16.0 * rad.sin());
        frame.body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            px(x),
            px(y),
            color,
            px(lx),
            px(ly + 4.0),
            esc(&p.label)
        ));
    }
    frame.finish()
}
