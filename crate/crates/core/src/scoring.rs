//! PSNR, per-video anomaly scores, and frame-level ROC AUC, plus the CSV
//! and SVG report writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::PipelineError;
use crate::tensor::{Element, Tensor};

/// Peak convention for PSNR. The default follows the scoring formula as
/// written — peak taken from the predicted frame — with a conventional
/// fixed-range variant behind a flag.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrPeak {
    PredictedMax,
    Fixed(f64),
}

impl Default for PsnrPeak {
    fn default() -> Self {
        PsnrPeak::PredictedMax
    }
}

pub const PSNR_CLAMP_DB: f64 = 100.0;

/// Maps a frame from the model range [-1, 1] to [0, 1].
pub fn to_unit_range<E: Element>(frame: &Tensor<E>) -> Tensor<E> {
    let half = E::from_f64(0.5);
    frame.map(|v| ((v + E::one()) * half).max(E::zero()).min(E::one()))
}

/// PSNR between a real and a predicted frame, both already in [0, 1].
/// Near-zero MSE clamps to 100 dB.
pub fn psnr<E: Element>(real: &Tensor<E>, pred: &Tensor<E>, peak: PsnrPeak) -> f64 {
    debug_assert_eq!(real.shape(), pred.shape());
    let k = real.len() as f64;
    let mut mse = 0.0;
    for (&a, &b) in real.data().iter().zip(pred.data()) {
        let d = a.to_f64() - b.to_f64();
        mse += d * d;
    }
    mse /= k;
    if mse < 1e-10 {
        return PSNR_CLAMP_DB;
    }
    let peak = match peak {
        PsnrPeak::PredictedMax => pred
            .data()
            .iter()
            .map(|&v| Element::to_f64(v))
            .fold(f64::NEG_INFINITY, f64::max)
            .max(1e-6), // an all-black prediction still yields a finite score
        PsnrPeak::Fixed(v) => v,
    };
    10.0 * (peak * peak / mse).log10()
}

/// Anomaly scores from per-frame PSNR: an order-reversing affine map to
/// [0, 1] within the video. Constant PSNR maps to all zeros.
pub fn anomaly_scores(psnr: &[f64]) -> Vec<f64> {
    if psnr.is_empty() {
        return Vec::new();
    }
    let min = psnr.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = psnr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return vec![0.0; psnr.len()];
    }
    psnr.iter().map(|&p| 1.0 - (p - min) / range).collect()
}

/// Scores for one test video. `start_frame` is the first frame with a
/// prediction (earlier frames have no window and are excluded).
#[derive(Clone, Debug)]
pub struct VideoScores {
    pub video_id: String,
    pub start_frame: usize,
    pub psnr: Vec<f64>,
    pub score: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Frame-level ROC AUC over the concatenated scores of all videos.
/// Trapezoidal over thresholds with tie handling, which equals the
/// normalized Mann-Whitney U statistic.
pub fn frame_auc(videos: &[VideoScores]) -> Result<f64, PipelineError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for v in videos {
        scores.extend_from_slice(&v.score);
        labels.extend_from_slice(&v.labels);
    }
    roc_auc(&scores, &labels)
}

/// ROC AUC of anomaly scores (higher = more anomalous) against binary
/// labels.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, PipelineError> {
    if scores.len() != labels.len() {
        return Err(PipelineError::Eval("scores and labels differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PipelineError::Eval(format!(
            "AUC needs both classes; got {pos} positive / {neg} negative frames"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    // sweep descending, expanding tie groups together
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut prev_tp, mut prev_fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let (x0, x1) = (prev_fp as f64 / neg as f64, fp as f64 / neg as f64);
        let (y0, y1) = (prev_tp as f64 / pos as f64, tp as f64 / pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        prev_tp = tp;
        prev_fp = fp;
        i = j;
    }
    Ok(auc)
}

/// One CSV per video: frame_index, psnr, score, label.
pub fn write_scores_csv(v: &VideoScores, path: &Path) -> Result<(), PipelineError> {
    let mut out = String::from("frame_index,psnr,score,label\n");
    for i in 0..v.psnr.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            v.start_frame + i,
            v.psnr[i],
            v.score[i],
            v.labels[i]
        );
    }
    fs::write(path, out).map_err(|e| PipelineError::io(path, e))
}

/// Score curve with shaded ground-truth anomaly spans as a standalone SVG.
pub fn render_score_svg(v: &VideoScores) -> String {
    let (w, h) = (720.0f64, 220.0f64);
    let (ml, mr, mt, mb) = (45.0, 10.0, 12.0, 28.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let n = v.score.len().max(2);
    let x_at = |i: usize| ml + plot_w * i as f64 / (n - 1) as f64;
    let y_at = |s: f64| mt + plot_h * (1.0 - s.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);

    // shaded anomaly spans
    let mut i = 0;
    while i < v.labels.len() {
        if v.labels[i] != 0 {
            let mut j = i;
            while j < v.labels.len() && v.labels[j] != 0 {
                j += 1;
            }
            let (x0, x1) = (x_at(i), x_at(j - 1));
            let _ = writeln!(
                svg,
                r#"<rect x="{x0:.1}" y="{mt}" width="{:.1}" height="{plot_h:.1}" fill="salmon" opacity="0.6"/>"#,
                (x1 - x0).max(1.0)
            );
            i = j;
        } else {
            i += 1;
        }
    }

    // axes
    let _ = writeln!(
        svg,
        r#"<rect x="{ml}" y="{mt}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="gray"/>"#
    );
    for (s, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let y = y_at(s);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" fill="dimgray">{label}</text>"#,
            ml - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" fill="dimgray">frame (from {})</text>"#,
        ml + plot_w / 2.0,
        h - 8.0,
        v.start_frame
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="dimgray">{} anomaly score</text>"#,
        ml,
        mt - 2.0,
        v.video_id
    );

    // score polyline
    let points: Vec<String> =
        v.score.iter().enumerate().map(|(i, &s)| format!("{:.1},{:.1}", x_at(i), y_at(s))).collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_clamps_identical_frames() {
        let a = Tensor::<f32>::filled(&[1, 4, 4], 0.6);
        assert_eq!(psnr(&a, &a, PsnrPeak::PredictedMax), 100.0);
    }

    #[test]
    fn psnr_closed_form_uniform_error() {
        // peak 1, uniform error 0.1 -> mse 0.01 -> 20 dB
        let real = Tensor::<f64>::filled(&[1, 5, 5], 0.9);
        let mut pred = Tensor::<f64>::filled(&[1, 5, 5], 0.8);
        pred.data_mut()[0] = 1.0; // set the max to exactly 1; adjust real to keep error uniform
        let mut real = real;
        real.data_mut()[0] = 1.1;
        let got = psnr(&real, &pred, PsnrPeak::PredictedMax);
        assert!((got - 20.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_fixed_peak_flag() {
        let real = Tensor::<f64>::filled(&[1, 2, 2], 0.5);
        let pred = Tensor::<f64>::filled(&[1, 2, 2], 0.4);
        let got = psnr(&real, &pred, PsnrPeak::Fixed(1.0));
        assert!((got - 20.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let real = Tensor::<f64>::filled(&[1, 4, 4], 1.0);
        let near = real.map(|v| v - 0.05);
        let far = real.map(|v| v - 0.2);
        assert!(
            psnr(&real, &near, PsnrPeak::Fixed(1.0)) > psnr(&real, &far, PsnrPeak::Fixed(1.0))
        );
    }

    #[test]
    fn unit_range_endpoints() {
        let t = Tensor::<f32>::new(&[3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(to_unit_range(&t).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn anomaly_score_examples() {
        let s = anomaly_scores(&[30.0, 20.0, 25.0]);
        assert_eq!(s, vec![0.0, 1.0, 0.5]);
        assert_eq!(anomaly_scores(&[7.0, 7.0, 7.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn score_argmax_is_psnr_argmin() {
        let p = [31.2, 24.0, 29.9, 26.5, 33.0];
        let s = anomaly_scores(&p);
        let score_argmax = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        let psnr_argmin = (0..p.len()).fold(0, |b, i| if p[i] < p[b] { i } else { b });
        assert_eq!(score_argmax, psnr_argmin);
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn auc_perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn auc_single_class_errors() {
        assert!(roc_auc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        // include ties via quantization
        let scores: Vec<f64> = (0..100).map(|_| (rng.gen_range(0.0f64..1.0) * 20.0).round() / 20.0).collect();
        let labels: Vec<u8> = (0..100).map(|_| rng.gen_bool(0.4) as u8).collect();
        let got = roc_auc(&scores, &labels).unwrap();

        // O(n^2) Mann-Whitney U
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..100 {
            for j in 0..100 {
                if labels[i] != 0 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        let want = num / pairs;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn auc_random_scores_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(78);
        let n = 20000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.3) as u8).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(79);
        let scores: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..500).map(|_| rng.gen_bool(0.5) as u8).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (4.0 * s).tanh()).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 11.0).collect();
        assert!((roc_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
        assert!((roc_auc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn svg_contains_curve_and_spans() {
        let v = VideoScores {
            video_id: "test_0001".into(),
            start_frame: 4,
            psnr: vec![30.0, 20.0, 25.0, 28.0],
            score: vec![0.0, 1.0, 0.5, 0.2],
            labels: vec![0, 1, 1, 0],
        };
        let svg = render_score_svg(&v);
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("fill=\"salmon\""));
        assert!(svg.contains("test_0001"));
    }
}
