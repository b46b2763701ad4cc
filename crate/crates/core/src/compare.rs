//! Merging evaluation reports and drawing the comparison curve.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::EvalRow;

/// Full-scale (5.76M-sample, 200-epoch) reference logical error rates of the
/// SoftMoE decoder at L=6, available as a plot overlay for judging
/// desk-scale runs against the published operating point.
pub const REFERENCE_L6: [(f64, f64); 6] = [
    (0.05, 0.0035),
    (0.07, 0.0124),
    (0.09, 0.0492),
    (0.11, 0.0985),
    (0.13, 0.169),
    (0.15, 0.256),
];

/// Merges at least two evaluation reports into one ranked row set: rows are
/// grouped by (L, p) and ordered best logical error rate first within each
/// group. Inputs must cover identical rate grids, every (decoder, L) series
/// must span the whole grid, and a (decoder, L, p) combination may appear
/// only once.
pub fn merge_reports(inputs: &[Vec<EvalRow>]) -> Result<Vec<EvalRow>> {
    if inputs.len() < 2 {
        return Err(Error::config(format!(
            "comparison needs at least two reports, got {}",
            inputs.len()
        )));
    }
    let grid_of = |rows: &[EvalRow]| -> Vec<u64> {
        let mut ps: Vec<u64> = rows.iter().map(|r| r.p.to_bits()).collect();
        ps.sort_unstable();
        ps.dedup();
        ps
    };
    let shared = grid_of(&inputs[0]);
    for (i, rows) in inputs.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::config(format!("report {i} is empty")));
        }
        if grid_of(rows) != shared {
            return Err(Error::config(format!(
                "report {i} covers a different rate grid than report 0"
            )));
        }
    }

    let mut merged: Vec<EvalRow> = Vec::new();
    let mut seen = BTreeSet::new();
    for rows in inputs {
        for r in rows {
            r.validate()?;
            if !seen.insert((r.decoder.clone(), r.l, r.p.to_bits())) {
                return Err(Error::config(format!(
                    "duplicate row for decoder {} at L={} p={}",
                    r.decoder, r.l, r.p
                )));
            }
            merged.push(r.clone());
        }
    }

    let mut coverage: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for r in &merged {
        *coverage.entry((r.decoder.clone(), r.l)).or_default() += 1;
    }
    for ((decoder, l), count) in &coverage {
        if *count != shared.len() {
            return Err(Error::config(format!(
                "decoder {decoder} at L={l} covers {count} of {} rates",
                shared.len()
            )));
        }
    }

    merged.sort_by(|a, b| {
        a.l.cmp(&b.l)
            .then(a.p.total_cmp(&b.p))
            .then(a.ler.total_cmp(&b.ler))
            .then(a.decoder.cmp(&b.decoder))
    });
    Ok(merged)
}

/// Human-readable ranking: per code size, decoders ordered by mean logical
/// error rate over the grid.
pub fn ranking_summary(rows: &[EvalRow]) -> String {
    let mut per_l: BTreeMap<usize, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let slot = per_l.entry(r.l).or_default().entry(&r.decoder).or_insert((0.0, 0));
        slot.0 += r.ler;
        slot.1 += 1;
    }
    let mut out = String::new();
    for (l, decoders) in per_l {
        let _ = writeln!(out, "L={l}, decoders by mean logical error rate over the grid:");
        let mut ranked: Vec<(&str, f64)> =
            decoders.into_iter().map(|(d, (sum, n))| (d, sum / n as f64)).collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        for (i, (decoder, mean)) in ranked.iter().enumerate() {
            let _ = writeln!(out, "  {}. {decoder:<10} {mean:.6}", i + 1);
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9", "#b22222", "#333333",
];

/// Renders logical error rate against physical rate as a standalone SVG:
/// one line per (decoder, L) series, logarithmic y axis, and the exact data
/// table embedded as an XML comment. Every row becomes exactly one marker
/// and one table line. Zero rates cannot be placed on a log axis, so their
/// markers sit on the lower plot edge while the table keeps the true value.
/// `overlay` adds a dashed reference curve that is not part of the data set.
pub fn curve_svg(rows: &[EvalRow], overlay: Option<&[(f64, f64)]>) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("nothing to plot"));
    }
    for r in rows {
        r.validate()?;
    }

    let (left, right, top, bottom) = (90.0f64, 930.0f64, 40.0f64, 570.0f64);
    let overlay_points = overlay.unwrap_or(&[]);

    let mut pmin = f64::INFINITY;
    let mut pmax = f64::NEG_INFINITY;
    for p in rows.iter().map(|r| r.p).chain(overlay_points.iter().map(|&(p, _)| p)) {
        pmin = pmin.min(p);
        pmax = pmax.max(p);
    }
    if pmax - pmin < 1e-12 {
        pmin -= 0.01;
        pmax += 0.01;
    }

    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for v in rows.iter().map(|r| r.ler).chain(overlay_points.iter().map(|&(_, v)| v)) {
        if v > 0.0 {
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
    }
    let (lo_exp, hi_exp) = if vmin.is_finite() {
        let lo = vmin.log10().floor() as i32;
        let mut hi = vmax.log10().ceil() as i32;
        if hi == lo {
            hi += 1;
        }
        (lo, hi)
    } else {
        (-6, 0)
    };
    let ymin = 10f64.powi(lo_exp);
    let ymax = 10f64.powi(hi_exp);

    let x = |p: f64| left + (p - pmin) / (pmax - pmin) * (right - left);
    let y = |v: f64| {
        let c = v.clamp(ymin, ymax);
        bottom - (c.log10() - lo_exp as f64) / (hi_exp - lo_exp) as f64 * (bottom - top)
    };

    let mut series: BTreeMap<(&str, usize), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        series.entry((&r.decoder, r.l)).or_default().push(r);
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.p.total_cmp(&b.p));
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 960 640" font-family="Helvetica, Arial, sans-serif">"#
    );
    s.push_str("<!-- data\ndecoder,L,p,ler\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.decoder, r.l, r.p, r.ler);
    }
    if !overlay_points.is_empty() {
        s.push_str("reference p,ler\n");
        for &(p, v) in overlay_points {
            let _ = writeln!(s, "{p},{v}");
        }
    }
    s.push_str("-->\n");
    s.push_str(r#"<rect width="960" height="640" fill="white"/>"#);
    s.push('\n');

    for exp in lo_exp..=hi_exp {
        let yy = y(10f64.powi(exp));
        let _ = writeln!(
            s,
            r##"<line x1="{left:.2}" y1="{yy:.2}" x2="{right:.2}" y2="{yy:.2}" stroke="#ddd" stroke-width="1"/>"##
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="14" fill="#333">1e{exp}</text>"##,
            left - 8.0,
            yy + 5.0
        );
    }

    let mut ticks: Vec<f64> = rows.iter().map(|r| r.p).collect();
    ticks.sort_by(|a, b| a.total_cmp(b));
    ticks.dedup();
    let step = ticks.len().div_ceil(10).max(1);
    for p in ticks.iter().step_by(step) {
        let xx = x(*p);
        let _ = writeln!(
            s,
            r##"<line x1="{xx:.2}" y1="{bottom:.2}" x2="{xx:.2}" y2="{:.2}" stroke="#444" stroke-width="1"/>"##,
            bottom + 6.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{xx:.2}" y="{:.2}" text-anchor="middle" font-size="14" fill="#333">{p:.3}</text>"##,
            bottom + 24.0
        );
    }
    let _ = writeln!(
        s,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444" stroke-width="1"/>"##,
        right - left,
        bottom - top
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="16" fill="#111">physical error rate p</text>"##,
        (left + right) / 2.0,
        bottom + 52.0
    );
    let _ = writeln!(
        s,
        r##"<text transform="rotate(-90)" x="{:.2}" y="26" text-anchor="middle" font-size="16" fill="#111">logical error rate</text>"##,
        -(top + bottom) / 2.0
    );

    if !overlay_points.is_empty() {
        let pts: Vec<String> = overlay_points
            .iter()
            .map(|&(p, v)| format!("{:.2},{:.2}", x(p), y(v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#777" stroke-width="2" stroke-dasharray="7 5"/>"##,
            pts.join(" ")
        );
        for &(p, v) in overlay_points {
            let (cx, cy) = (x(p), y(v));
            let _ = writeln!(
                s,
                r##"<path d="M {a:.2} {b:.2} L {c:.2} {d:.2} M {a:.2} {d:.2} L {c:.2} {b:.2}" stroke="#555" stroke-width="1.6"/>"##,
                a = cx - 4.0,
                b = cy - 4.0,
                c = cx + 4.0,
                d = cy + 4.0
            );
        }
    }

    for (i, points) in series.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            points.iter().map(|r| format!("{:.2},{:.2}", x(r.p), y(r.ler))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for r in points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" stroke="white" stroke-width="0.8"/>"#,
                x(r.p),
                y(r.ler)
            );
        }
    }

    let legend_x = left + 16.0;
    let mut legend_y = top + 20.0;
    for (i, (decoder, l)) in series.keys().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{legend_x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            legend_y - 4.0,
            legend_x + 28.0,
            legend_y - 4.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{legend_y:.2}" font-size="15" fill="#222">{decoder} L={l}</text>"##,
            legend_x + 36.0
        );
        legend_y += 22.0;
    }
    if !overlay_points.is_empty() {
        let _ = writeln!(
            s,
            r##"<line x1="{legend_x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#777" stroke-width="2" stroke-dasharray="7 5"/>"##,
            legend_y - 4.0,
            legend_x + 28.0,
            legend_y - 4.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{legend_y:.2}" font-size="15" fill="#222">full-scale reference</text>"##,
            legend_x + 36.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
