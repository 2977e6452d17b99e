//! Standalone SVG renderings of the standard figures: memorization-score
//! histograms, ROC overlays, and loss-distance histograms. No plotting
//! framework; each file is a single self-contained `<svg>` with the raw data
//! embedded in a comment for later inspection.

use std::path::{Path, PathBuf};

use crate::attack::{roc, MiauScore, RocCurve};
use crate::error::{Result, UlabError};
use crate::lab::experiment::RunReport;
use crate::memo::OutlierBounds;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const SERIES_COLORS: [&str; 4] = ["#4878cf", "#d65f5f", "#6acc65", "#b47cc7"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    body: String,
    x0: f64,
    y0: f64,
    plot_w: f64,
    plot_h: f64,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" font-size=\"15\" font-family=\"sans-serif\" \
             text-anchor=\"middle\" fill=\"#222\">{}</text>\n",
            W / 2.0,
            esc(title)
        ));
        Canvas {
            body,
            x0: MARGIN_L,
            y0: H - MARGIN_B,
            plot_w: W - MARGIN_L - MARGIN_R,
            plot_h: H - MARGIN_T - MARGIN_B,
        }
    }

    /// Map data coordinates ([0, xmax] x [0, ymax]) to pixels.
    fn px(&self, x: f64, xmax: f64) -> f64 {
        self.x0 + self.plot_w * (x / xmax)
    }

    fn py(&self, y: f64, ymax: f64) -> f64 {
        self.y0 - self.plot_h * (y / ymax)
    }

    fn axes(&mut self, x_label: &str, y_label: &str, xmax: f64, ymax: f64, x_ticks: usize) {
        self.body.push_str(&format!(
            "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"#333\"/>\n\
             <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{yt:.1}\" stroke=\"#333\"/>\n",
            x0 = self.x0,
            y0 = self.y0,
            x1 = self.x0 + self.plot_w,
            yt = MARGIN_T,
        ));
        for i in 0..=x_ticks {
            let v = xmax * i as f64 / x_ticks as f64;
            let x = self.px(v, xmax);
            self.body.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{x:.1}\" y2=\"{y2:.1}\" stroke=\"#333\"/>\n\
                 <text x=\"{x:.1}\" y=\"{ty:.1}\" font-size=\"11\" font-family=\"sans-serif\" \
                 text-anchor=\"middle\" fill=\"#333\">{v:.2}</text>\n",
                y = self.y0,
                y2 = self.y0 + 5.0,
                ty = self.y0 + 18.0,
            ));
        }
        for i in 0..=4 {
            let v = ymax * i as f64 / 4.0;
            let y = self.py(v, ymax);
            self.body.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{x2:.1}\" y2=\"{y:.1}\" stroke=\"#333\"/>\n\
                 <text x=\"{tx:.1}\" y=\"{ty:.1}\" font-size=\"11\" font-family=\"sans-serif\" \
                 text-anchor=\"end\" fill=\"#333\">{v:.2}</text>\n",
                x = self.x0 - 5.0,
                x2 = self.x0,
                tx = self.x0 - 8.0,
                ty = y + 4.0,
            ));
        }
        self.body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" font-family=\"sans-serif\" \
             text-anchor=\"middle\" fill=\"#222\">{}</text>\n",
            self.x0 + self.plot_w / 2.0,
            H - 10.0,
            esc(x_label)
        ));
        self.body.push_str(&format!(
            "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" font-family=\"sans-serif\" \
             text-anchor=\"middle\" fill=\"#222\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
            MARGIN_T + self.plot_h / 2.0,
            MARGIN_T + self.plot_h / 2.0,
            esc(y_label)
        ));
    }

    fn vline(&mut self, x: f64, xmax: f64, color: &str, label: &str) {
        let px = self.px(x, xmax);
        self.body.push_str(&format!(
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"{color}\" \
             stroke-dasharray=\"5,3\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\" \
             text-anchor=\"middle\" fill=\"{color}\">{}</text>\n",
            self.y0,
            MARGIN_T,
            MARGIN_T - 6.0,
            esc(label)
        ));
    }

    fn finish(self, data_comment: &str) -> String {
        let comment = data_comment.replace("--", "- -");
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\">\n\
             <!-- data: {comment} -->\n\
             <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Histogram of memorization scores in [0, 1] with the outlier bounds and
/// the forgetting threshold marked.
pub fn memorization_histogram_svg(
    title: &str,
    scores: &[f64],
    bounds: OutlierBounds,
    threshold: f64,
) -> String {
    let n_bins = 20;
    let mut bins = vec![0usize; n_bins];
    for &s in scores {
        let idx = ((s * n_bins as f64) as usize).min(n_bins - 1);
        bins[idx] += 1;
    }
    let ymax = bins.iter().copied().max().unwrap_or(1).max(1) as f64;
    let mut c = Canvas::new(title);
    c.axes("memorization score", "sequences", 1.0, ymax, 5);
    for (i, &count) in bins.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x_lo = i as f64 / n_bins as f64;
        let x_hi = (i + 1) as f64 / n_bins as f64;
        let px_lo = c.px(x_lo, 1.0);
        let px_hi = c.px(x_hi, 1.0);
        let py = c.py(count as f64, ymax);
        let height = c.y0 - py;
        c.body.push_str(&format!(
            "<rect x=\"{px_lo:.1}\" y=\"{py:.1}\" width=\"{:.1}\" height=\"{height:.1}\" \
             fill=\"#4878cf\" stroke=\"white\"/>\n",
            px_hi - px_lo,
        ));
    }
    c.vline(bounds.lb, 1.0, "#d65f5f", "lb");
    c.vline(bounds.ub, 1.0, "#d65f5f", "ub");
    c.vline(threshold, 1.0, "#6acc65", "threshold");
    let data = serde_json::json!({"bins": bins, "scores": scores, "threshold": threshold});
    c.finish(&data.to_string())
}

/// Overlayed ROC curves with AUC in the legend and the chance diagonal.
pub fn roc_overlay_svg(title: &str, curves: &[(String, &RocCurve)]) -> String {
    let mut c = Canvas::new(title);
    c.axes("false positive rate", "true positive rate", 1.0, 1.0, 5);
    c.body.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#bbb\" \
         stroke-dasharray=\"3,3\"/>\n",
        c.px(0.0, 1.0),
        c.py(0.0, 1.0),
        c.px(1.0, 1.0),
        c.py(1.0, 1.0),
    ));
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", c.px(fpr, 1.0), c.py(tpr, 1.0)))
            .collect();
        c.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * i as f64 + 12.0;
        c.body.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#222\">\
             {} (AUC {:.3})</text>\n",
            c.x0 + c.plot_w - 180.0,
            ly,
            c.x0 + c.plot_w - 162.0,
            ly + 5.0,
            esc(label),
            curve.auc,
        ));
    }
    let data: Vec<_> = curves
        .iter()
        .map(|(l, cv)| serde_json::json!({"label": l, "auc": cv.auc, "points": cv.points}))
        .collect();
    c.finish(&serde_json::Value::Array(data).to_string())
}

/// Side-by-side distance histograms for forget-set and unseen sequences,
/// with the measured unseen band marked.
pub fn loma_histogram_svg(
    title: &str,
    forget_distances: &[f64],
    unseen_distances: &[f64],
    bin_width: f64,
) -> String {
    let max_d = forget_distances
        .iter()
        .chain(unseen_distances)
        .cloned()
        .fold(0.0f64, f64::max)
        .max(bin_width);
    let n_bins = (max_d / bin_width).floor() as usize + 1;
    let hist = |ds: &[f64]| {
        let mut bins = vec![0usize; n_bins];
        for &d in ds {
            bins[((d / bin_width) as usize).min(n_bins - 1)] += 1;
        }
        bins
    };
    let forget_bins = hist(forget_distances);
    let unseen_bins = hist(unseen_distances);
    let band_hi = unseen_distances.iter().cloned().fold(0.0f64, f64::max);
    let xmax = n_bins as f64 * bin_width;
    let ymax = forget_bins
        .iter()
        .chain(&unseen_bins)
        .copied()
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let mut c = Canvas::new(title);
    c.axes("loss distance", "sequences", xmax, ymax, 6);
    for (i, (&f, &u)) in forget_bins.iter().zip(&unseen_bins).enumerate() {
        let x_lo = i as f64 * bin_width;
        let px_lo = c.px(x_lo, xmax);
        let width = (c.px(x_lo + bin_width, xmax) - px_lo) / 2.0 - 1.0;
        if f > 0 {
            let py = c.py(f as f64, ymax);
            let height = c.y0 - py;
            c.body.push_str(&format!(
                "<rect x=\"{px_lo:.1}\" y=\"{py:.1}\" width=\"{width:.1}\" height=\"{height:.1}\" \
                 fill=\"#d65f5f\"/>\n",
            ));
        }
        if u > 0 {
            let py = c.py(u as f64, ymax);
            let height = c.y0 - py;
            c.body.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{py:.1}\" width=\"{width:.1}\" height=\"{height:.1}\" \
                 fill=\"#4878cf\"/>\n",
                px_lo + width + 1.0,
            ));
        }
    }
    c.vline(band_hi, xmax, "#6acc65", "unseen band");
    let legend_y = MARGIN_T + 12.0;
    c.body.push_str(&format!(
        "<rect x=\"{lx:.1}\" y=\"{legend_y:.1}\" width=\"12\" height=\"8\" fill=\"#d65f5f\"/>\
         <text x=\"{tx:.1}\" y=\"{ty1:.1}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#222\">forget set</text>\n\
         <rect x=\"{lx:.1}\" y=\"{ly2:.1}\" width=\"12\" height=\"8\" fill=\"#4878cf\"/>\
         <text x=\"{tx:.1}\" y=\"{ty2:.1}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#222\">unseen</text>\n",
        lx = c.x0 + c.plot_w - 120.0,
        tx = c.x0 + c.plot_w - 102.0,
        ty1 = legend_y + 8.0,
        ly2 = legend_y + 16.0,
        ty2 = legend_y + 24.0,
    ));
    let data = serde_json::json!({
        "bin_width": bin_width,
        "forget": forget_bins,
        "unseen": unseen_bins,
        "band_hi": band_hi,
    });
    c.finish(&data.to_string())
}

#[derive(Debug, Default)]
pub struct PlotOutcome {
    pub written: Vec<PathBuf>,
    pub notices: Vec<String>,
}

/// Emit the figure set for a finished experiment: one memorization
/// histogram, one ROC overlay (base vs unlearned), and one distance
/// histogram per algorithm x forget size, pooled over replicas. Missing
/// data skips the plot with a notice instead of failing.
pub fn emit_plots(report: &RunReport, dir: impl AsRef<Path>) -> Result<PlotOutcome> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| UlabError::io(dir.display().to_string(), e))?;
    let mut outcome = PlotOutcome::default();

    let mut groups: Vec<(String, usize)> = report
        .replicas
        .iter()
        .map(|r| (r.algorithm.clone(), r.forget_size))
        .collect();
    groups.sort();
    groups.dedup();
    if groups.is_empty() {
        outcome.notices.push("no replica data; no plots emitted".into());
        return Ok(outcome);
    }

    for (algo, size) in groups {
        let rows: Vec<_> = report
            .replicas
            .iter()
            .filter(|r| r.algorithm == algo && r.forget_size == size)
            .collect();

        let scores: Vec<f64> = rows
            .iter()
            .flat_map(|r| r.memorization.scores.iter().map(|s| s.value))
            .collect();
        if scores.is_empty() {
            outcome
                .notices
                .push(format!("{algo}/s{size}: no scores; histogram skipped"));
        } else {
            let svg = memorization_histogram_svg(
                &format!("{algo}: memorization after unlearning ({} sequences)", scores.len()),
                &scores,
                rows[0].memorization.bounds,
                report.base.threshold,
            );
            let path = dir.join(format!("mem-hist-{algo}-s{size}.svg"));
            std::fs::write(&path, svg).map_err(|e| UlabError::io(path.display().to_string(), e))?;
            outcome.written.push(path);
        }

        let pool = |pick: &dyn Fn(&crate::lab::experiment::ReplicaResult) -> &Vec<MiauScore>| {
            rows.iter().flat_map(|r| pick(r).iter().cloned()).collect::<Vec<_>>()
        };
        let base_members = pool(&|r| &r.attack_base.members);
        let base_nonmembers = pool(&|r| &r.attack_base.nonmembers);
        let un_members = pool(&|r| &r.attack_unlearned.members);
        let un_nonmembers = pool(&|r| &r.attack_unlearned.nonmembers);

        if base_members.is_empty() || base_nonmembers.is_empty() || un_members.is_empty() {
            outcome
                .notices
                .push(format!("{algo}/s{size}: no attack data; roc and loma skipped"));
            continue;
        }
        let roc_base = roc(&base_members, &base_nonmembers)?;
        let roc_unlearned = roc(&un_members, &un_nonmembers)?;
        let svg = roc_overlay_svg(
            &format!("{algo}: membership inference"),
            &[
                ("base model".to_string(), &roc_base),
                ("after unlearning".to_string(), &roc_unlearned),
            ],
        );
        let path = dir.join(format!("roc-{algo}-s{size}.svg"));
        std::fs::write(&path, svg).map_err(|e| UlabError::io(path.display().to_string(), e))?;
        outcome.written.push(path);

        let forget_d: Vec<f64> = un_members.iter().map(|s| s.distance).collect();
        let unseen_d: Vec<f64> = un_nonmembers.iter().map(|s| s.distance).collect();
        let svg = loma_histogram_svg(
            &format!("{algo}: loss distances vs unseen band"),
            &forget_d,
            &unseen_d,
            report.config.attack.bin_width,
        );
        let path = dir.join(format!("loma-{algo}-s{size}.svg"));
        std::fs::write(&path, svg).map_err(|e| UlabError::io(path.display().to_string(), e))?;
        outcome.written.push(path);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_formed(svg: &str) {
        assert!(svg.starts_with("<svg "), "must open with a single svg root");
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("viewBox=\"0 0 "));
        assert_eq!(svg.matches("<svg ").count(), 1);
    }

    #[test]
    fn histogram_svg_is_well_formed() {
        let svg = memorization_histogram_svg(
            "test",
            &[0.05, 0.1, 0.5, 0.5, 0.9],
            OutlierBounds::default(),
            0.3,
        );
        well_formed(&svg);
        assert!(svg.contains("threshold"));
    }

    #[test]
    fn roc_svg_is_well_formed() {
        let curve = RocCurve {
            points: vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)],
            auc: 0.875,
        };
        let svg = roc_overlay_svg("roc", &[("one".to_string(), &curve)]);
        well_formed(&svg);
        assert!(svg.contains("AUC 0.875"));
    }

    #[test]
    fn loma_svg_is_well_formed() {
        let svg = loma_histogram_svg("loma", &[0.1, 0.4, 2.0], &[0.05, 0.2], 0.25);
        well_formed(&svg);
        assert!(svg.contains("unseen band"));
    }

    #[test]
    fn loma_bar_counts_conserve() {
        let forget = vec![0.0, 0.1, 0.25, 3.0, 3.0];
        let svg = loma_histogram_svg("loma", &forget, &[0.3], 0.5);
        // the data comment carries the histogram; counts must sum to the set size
        let data_line = svg.lines().find(|l| l.contains("<!-- data:")).unwrap();
        let json_str = data_line
            .trim_start_matches("<!-- data: ")
            .trim_end_matches(" -->");
        let v: serde_json::Value = serde_json::from_str(json_str).unwrap();
        let total: u64 = v["forget"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).sum();
        assert_eq!(total as usize, forget.len());
    }

    #[test]
    fn scores_hist_bar_heights_sum_to_set_size() {
        let scores = vec![0.0, 0.2, 0.2, 0.5, 0.99, 1.0];
        let svg = memorization_histogram_svg("t", &scores, OutlierBounds::default(), 0.3);
        let data_line = svg.lines().find(|l| l.contains("<!-- data:")).unwrap();
        let json_str = data_line
            .trim_start_matches("<!-- data: ")
            .trim_end_matches(" -->");
        let v: serde_json::Value = serde_json::from_str(json_str).unwrap();
        let total: u64 = v["bins"].as_array().unwrap().iter().map(|b| b.as_u64().unwrap()).sum();
        assert_eq!(total as usize, scores.len());
    }

    #[test]
    fn labels_are_escaped() {
        let curve = RocCurve {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            auc: 0.5,
        };
        let svg = roc_overlay_svg("a <b> & c", &[("x<y".to_string(), &curve)]);
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
        assert!(svg.contains("x&lt;y"));
    }
}
