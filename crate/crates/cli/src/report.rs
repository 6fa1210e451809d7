//! Self-contained SVG charts: class histograms, embedding trajectories and
//! ripeness curves.

use std::collections::BTreeMap;
use std::fmt::Write;

use ripelab_core::ClassHistogram;

use crate::stages::EmbeddingRow;

/// Class 1 (green) to class 5 (red).
pub const CLASS_COLORS: [&str; 5] = ["#3c8c2e", "#8fae3a", "#d9a534", "#c8512c", "#8e1b2b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, width: f64, height: f64, title: &str, provenance: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, "<metadata>{}</metadata>", escape(provenance));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
}

/// Green-to-red ramp for a value in `[0, 1]`.
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(60.0, 142.0), lerp(140.0, 27.0), lerp(46.0, 43.0))
}

/// Distinct stroke color per trajectory.
fn hue(i: usize, n: usize) -> String {
    format!("hsl({:.0},60%,40%)", 360.0 * i as f64 / n.max(1) as f64)
}

fn legend(out: &mut String, x: f64, y: f64) {
    for (i, c) in CLASS_COLORS.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(out, r#"<rect x="{x:.1}" y="{yy:.1}" width="10" height="10" fill="{c}"/>"#);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">class {}</text>"#, x + 14.0, yy + 9.0, i + 1);
    }
}

/// Stacked class-fraction bars, one panel per bog and one bar per date.
pub fn histograms_svg(histograms: &[ClassHistogram], provenance: &str) -> String {
    let mut bogs: Vec<&str> = Vec::new();
    let mut by_bog: BTreeMap<&str, Vec<&ClassHistogram>> = BTreeMap::new();
    for h in histograms {
        if !by_bog.contains_key(h.bog_id.as_str()) {
            bogs.push(&h.bog_id);
        }
        by_bog.entry(&h.bog_id).or_default().push(h);
    }
    let (bar, gap, plot_h, left, top) = (22.0, 6.0, 180.0, 50.0, 30.0);
    let panel_h = plot_h + 110.0;
    let max_bars = by_bog.values().map(Vec::len).max().unwrap_or(0) as f64;
    let width = left + max_bars * (bar + gap) + 110.0;
    let height = top + panel_h * bogs.len().max(1) as f64;

    let mut out = String::new();
    open(&mut out, width, height, "Berry class fractions by date", provenance);
    if bogs.is_empty() {
        let _ = writeln!(out, r#"<text x="{left}" y="{:.1}">no detections</text>"#, top + 20.0);
    }
    for (p, bog) in bogs.iter().enumerate() {
        let y0 = top + p as f64 * panel_h;
        let base = y0 + plot_h;
        let _ = writeln!(out, r#"<g class="bog" data-bog="{}">"#, escape(bog));
        let _ = writeln!(out, r#"<text x="{left}" y="{:.1}" font-weight="bold">{}</text>"#, y0 - 8.0, escape(bog));
        let _ = writeln!(out, r#"<line x1="{left}" y1="{y0:.1}" x2="{left}" y2="{base:.1}" stroke="black"/>"#);
        for tick in 0..=4 {
            let f = tick as f64 / 4.0;
            let y = base - f * plot_h;
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{f:.2}</text>"#, left - 4.0, y + 4.0);
        }
        for (i, h) in by_bog[bog].iter().enumerate() {
            let x = left + gap + i as f64 * (bar + gap);
            match h.fractions {
                Some(fr) => {
                    let mut y = base;
                    for (c, f) in fr.iter().enumerate() {
                        let hgt = f * plot_h;
                        if hgt > 0.0 {
                            y -= hgt;
                            let _ = writeln!(
                                out,
                                r#"<rect x="{x:.1}" y="{y:.2}" width="{bar}" height="{hgt:.2}" fill="{}"><title>{} class {}: {}/{}</title></rect>"#,
                                CLASS_COLORS[c],
                                escape(&h.capture_date),
                                c + 1,
                                h.counts[c],
                                h.total()
                            );
                        }
                    }
                }
                None => {
                    let _ = writeln!(
                        out,
                        r##"<rect x="{x:.1}" y="{y0:.1}" width="{bar}" height="{plot_h:.1}" fill="none" stroke="#999" stroke-dasharray="3,3"/>"##
                    );
                    let (cx, cy) = (x + bar / 2.0 + 4.0, y0 + plot_h / 2.0);
                    let _ = writeln!(
                        out,
                        r#"<text x="{cx:.1}" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 {cx:.1} {cy:.1})">no detections</text>"#
                    );
                }
            }
            let (lx, ly) = (x + bar / 2.0, base + 10.0);
            let _ = writeln!(
                out,
                r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-60 {lx:.1} {ly:.1})">{}</text>"#,
                escape(&h.capture_date)
            );
        }
        out.push_str("</g>\n");
    }
    legend(&mut out, width - 90.0, top);
    out.push_str("</svg>\n");
    out
}

fn by_berry(rows: &[EmbeddingRow]) -> BTreeMap<u32, Vec<&EmbeddingRow>> {
    let mut m: BTreeMap<u32, Vec<&EmbeddingRow>> = BTreeMap::new();
    for r in rows {
        m.entry(r.berry_id).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.timepoint);
    }
    m
}

/// 2-D embedding with one trajectory polyline per berry; points colored by ripeness.
pub fn embedding_svg(rows: &[EmbeddingRow], provenance: &str) -> String {
    let (size, pad) = (520.0, 40.0);
    let fold = |f: fn(f64, f64) -> f64, init: f64, g: fn(&EmbeddingRow) -> f64| rows.iter().map(g).fold(init, f);
    let (x0, x1) = (fold(f64::min, f64::INFINITY, |r| r.x), fold(f64::max, f64::NEG_INFINITY, |r| r.x));
    let (y0, y1) = (fold(f64::min, f64::INFINITY, |r| r.y), fold(f64::max, f64::NEG_INFINITY, |r| r.y));
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let sx = |x: f64| pad + (x - x0) / span * (size - 2.0 * pad);
    let sy = |y: f64| size - pad - (y - y0) / span * (size - 2.0 * pad);

    let mut out = String::new();
    open(&mut out, size, size, "Feature embedding with per-berry trajectories", provenance);
    let groups = by_berry(rows);
    let n = groups.len();
    for (i, (berry, pts)) in groups.iter().enumerate() {
        let coords: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", sx(r.x), sy(r.y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline data-berry="{berry}" points="{}" fill="none" stroke="{}" stroke-width="1" stroke-opacity="0.7"/>"#,
            coords.join(" "),
            hue(i, n)
        );
    }
    for r in rows {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"><title>berry {} t{}: ripeness {:.3}</title></circle>"#,
            sx(r.x),
            sy(r.y),
            ramp(r.ripeness),
            r.berry_id,
            r.timepoint,
            r.ripeness
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Ripeness against timepoint, one line per berry. `labels` names the
/// timepoints on the x axis when available.
pub fn ripeness_svg(rows: &[EmbeddingRow], labels: &[String], provenance: &str) -> String {
    let (width, height, left, right, top, bottom) = (640.0, 360.0, 50.0, 20.0, 20.0, 70.0);
    let t_max = rows.iter().map(|r| r.timepoint).max().unwrap_or(0).max(1) as f64;
    let sx = |t: u32| left + t as f64 / t_max * (width - left - right);
    let sy = |v: f64| top + (1.0 - v) * (height - top - bottom);

    let mut out = String::new();
    open(&mut out, width, height, "Ripeness per berry over time", provenance);
    let base = sy(0.0);
    let _ = writeln!(out, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{base:.1}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{left}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#, width - right);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, sy(v) + 4.0);
    }
    let step = (t_max as usize / 12).max(1);
    for t in (0..=t_max as u32).step_by(step) {
        let label = labels.get(t as usize).cloned().unwrap_or_else(|| t.to_string());
        let (lx, ly) = (sx(t), base + 12.0);
        let _ = writeln!(
            out,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-45 {lx:.1} {ly:.1})">{}</text>"#,
            escape(&label)
        );
    }
    let groups = by_berry(rows);
    let n = groups.len();
    for (i, (berry, pts)) in groups.iter().enumerate() {
        let coords: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", sx(r.timepoint), sy(r.ripeness))).collect();
        let _ = writeln!(
            out,
            r#"<polyline data-berry="{berry}" points="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
            coords.join(" "),
            hue(i, n)
        );
    }
    out.push_str("</svg>\n");
    out
}
