//! Evaluation metrics for reconstructed clips: N-way top-K semantic
//! classification at frame and clip level, SSIM, PSNR, and adjacent-frame
//! embedding consistency, plus the report that collects them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::stubs::StubClassifiers;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub n_way: usize,
    pub top_k: usize,
    pub repeats: usize,
    pub rng_seed: u64,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.top_k == 0 || self.top_k > self.n_way || self.repeats == 0 {
            return Err(Error::InvalidParameter(format!(
                "trial config n_way {} top_k {} repeats {}",
                self.n_way, self.top_k, self.repeats
            )));
        }
        Ok(())
    }
}

/// Fraction of trials in which the true label ranks within the top K among
/// itself and N-1 distractors drawn without replacement from the other
/// labels. Ties go to the smaller label index.
pub fn nway_topk_accuracy(probs: ArrayView2<f64>, labels: &[usize], cfg: &TrialConfig) -> Result<f64> {
    cfg.validate()?;
    let classes = probs.ncols();
    if probs.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} prediction rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if cfg.n_way > classes {
        return Err(Error::NWayExceedsClasses {
            n_way: cfg.n_way,
            classes,
        });
    }
    if let Some(&bad) = probs.iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::InvalidParameter(format!("class score {bad} is negative or NaN")));
    }
    if labels.is_empty() {
        return Err(Error::EmptyList("labels"));
    }
    let mut correct = 0usize;
    for (i, (row, &gt)) in probs.outer_iter().zip(labels).enumerate() {
        if gt >= classes {
            return Err(Error::LabelOutOfRange { label: gt, classes });
        }
        for r in 0..cfg.repeats {
            let mut rng = rng_for(cfg.rng_seed, Stream::Trials, ((i as u64) << 32) | r as u64);
            let target = row[gt];
            let mut better = 0;
            for d in sample_indices(&mut rng, classes - 1, cfg.n_way - 1) {
                let label = if d >= gt { d + 1 } else { d };
                if row[label] > target || (row[label] == target && label < gt) {
                    better += 1;
                }
            }
            if better < cfg.top_k {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (labels.len() * cfg.repeats) as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((size, size), |(i, j)| g[i] * g[j] / (total * total))
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("image {:?} against {:?}", a.dim(), b.dim())));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidParameter(format!("data range {data_range}")));
    }
    Ok(())
}

/// Mean SSIM over every fully contained Gaussian window (11x11, sigma 1.5;
/// the window shrinks to the image side for images smaller than that).
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    let (h, w) = a.dim();
    let size = SSIM_WINDOW.min(h).min(w);
    if size == 0 {
        return Err(Error::shape("empty image".to_string()));
    }
    let win = gaussian_window(size, SSIM_SIGMA);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((i, j), &g) in win.indexed_iter() {
                let (p, q) = (a[[y + i, x + j]], b[[y + i, x + j]]);
                ma += g * p;
                mb += g * q;
                saa += g * p * p;
                sbb += g * q * q;
                sab += g * p * q;
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn psnr(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    check_pair(a, b, data_range)?;
    let mse = (&a - &b).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// Mean cosine similarity of consecutive frame embeddings `[F, C]`.
pub fn clip_pcc(frames: ArrayView2<f64>) -> Result<f64> {
    if frames.nrows() < 2 {
        return Err(Error::SingleFrame);
    }
    for (i, row) in frames.outer_iter().enumerate() {
        if row.dot(&row) < 1e-24 {
            return Err(Error::ZeroNormRow(i));
        }
    }
    let n = frames.nrows() - 1;
    Ok((0..n).map(|i| cosine(frames.row(i), frames.row(i + 1))).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub repeats: usize,
    pub top_k: usize,
    pub rng_seed: u64,
    pub data_range: f64,
    /// Pair each reconstruction with another clip's ground truth.
    pub shuffle_pairing: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            repeats: 100,
            top_k: 1,
            rng_seed: 0,
            data_range: 1.0,
            shuffle_pairing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub gt_index: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub clip_pcc: f64,
    pub video_label: usize,
    pub video_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frame_50way: f64,
    pub frame_2way: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub video_50way: f64,
    pub video_2way: f64,
    pub clip_pcc: f64,
    pub samples: Vec<SampleRow>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

/// Deterministic derangement for the shuffled-pairing baseline.
pub fn shuffled_pairing(n: usize, seed: u64) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, Stream::Shuffle, 0));
    let mut out = vec![0; n];
    for i in 0..n {
        out[perm[i]] = perm[(i + 1) % n];
    }
    out
}

/// Score reconstructions `[F, H, W]` against ground-truth clips. Ground
/// truth labels are the stub classifiers' own predictions on the true clips.
pub fn build_report(
    recon: &[Array3<f64>],
    gt: &[Array3<f64>],
    classifiers: &StubClassifiers,
    cfg: &ReportConfig,
) -> Result<MetricsReport> {
    if recon.len() != gt.len() || recon.is_empty() {
        return Err(Error::PairingMismatch(format!(
            "{} reconstructions for {} ground-truth clips",
            recon.len(),
            gt.len()
        )));
    }
    for (r, g) in recon.iter().zip(gt) {
        if r.dim() != g.dim() {
            return Err(Error::PairingMismatch(format!("clip {:?} against {:?}", r.dim(), g.dim())));
        }
    }
    let pairing: Vec<usize> = if cfg.shuffle_pairing {
        shuffled_pairing(recon.len(), cfg.rng_seed)
    } else {
        (0..recon.len()).collect()
    };
    let classes = classifiers.classes();
    let frames = recon[0].shape()[0];
    let mut frame_probs = Vec::new();
    let mut frame_labels = Vec::new();
    let mut video_probs = Array2::zeros((recon.len(), classes));
    let mut video_labels = Vec::new();
    let mut samples = Vec::new();
    for (i, r) in recon.iter().enumerate() {
        let g = &gt[pairing[i]];
        let (mut s, mut p) = (Vec::new(), Vec::new());
        for f in 0..frames {
            let (rf, gf) = (r.index_axis(Axis(0), f), g.index_axis(Axis(0), f));
            frame_probs.push(classifiers.frame_probs(rf));
            frame_labels.push(argmax(classifiers.frame_probs(gf).view()));
            s.push(ssim(rf, gf, cfg.data_range)?);
            p.push(psnr(rf, gf, cfg.data_range)?);
        }
        let vecs = classifiers.clip().frame_vectors(r.view());
        let probs = classifiers.video_probs_from_vectors(vecs.view());
        let label = argmax(classifiers.video_probs(g.view()).view());
        video_probs.row_mut(i).assign(&probs);
        video_labels.push(label);
        samples.push(SampleRow {
            index: i,
            gt_index: pairing[i],
            ssim: mean(s),
            psnr: mean(p),
            clip_pcc: clip_pcc(vecs.view())?,
            video_label: label,
            video_pred: argmax(probs.view()),
        });
    }
    let frame_probs = Array2::from_shape_fn((frame_probs.len(), classes), |(i, j)| frame_probs[i][j]);
    let trial = |n_way| TrialConfig {
        n_way,
        top_k: cfg.top_k.min(n_way),
        repeats: cfg.repeats,
        rng_seed: cfg.rng_seed,
    };
    let ssim_all = mean(samples.iter().map(|s| s.ssim));
    let psnr_all = mean(samples.iter().map(|s| s.psnr));
    Ok(MetricsReport {
        frame_50way: nway_topk_accuracy(frame_probs.view(), &frame_labels, &trial(50))?,
        frame_2way: nway_topk_accuracy(frame_probs.view(), &frame_labels, &trial(2))?,
        ssim: ssim_all,
        psnr: psnr_all,
        video_50way: nway_topk_accuracy(video_probs.view(), &video_labels, &trial(50))?,
        video_2way: nway_topk_accuracy(video_probs.view(), &video_labels, &trial(2))?,
        clip_pcc: mean(samples.iter().map(|s| s.clip_pcc)),
        samples,
        meta: BTreeMap::new(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Pipeline(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Pipeline(format!("report parse: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Frame-level semantic, pixel-level, then clip-level columns.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let header = [
            "frame 50-way", "frame 2-way", "SSIM", "PSNR", "video 50-way", "video 2-way", "CLIP-pcc",
        ];
        let values = [
            format!("{:.3}", self.frame_50way),
            format!("{:.3}", self.frame_2way),
            format!("{:.3}", self.ssim),
            format!("{:.2}", self.psnr),
            format!("{:.3}", self.video_50way),
            format!("{:.3}", self.video_2way),
            format!("{:.3}", self.clip_pcc),
        ];
        let widths: Vec<usize> = header.iter().map(|h| h.len().max(8)).collect();
        for (h, w) in header.iter().zip(&widths) {
            let _ = write!(out, "| {h:>w$} ");
        }
        out.push_str("|\n");
        for w in &widths {
            let _ = write!(out, "|{}", "-".repeat(w + 2));
        }
        out.push_str("|\n");
        for (v, w) in values.iter().zip(&widths) {
            let _ = write!(out, "| {v:>w$} ");
        }
        out.push_str("|\n");
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }
}

/// Softmax class scores as an owned row, handy for tests and probes.
pub fn one_hot_scores(label: usize, classes: usize) -> Array1<f64> {
    let mut v = Array1::zeros(classes);
    v[label] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stubs::ClipStub;
    use ndarray::{s, Array};
    use rand::Rng as _;

    fn trial(n_way: usize, top_k: usize, repeats: usize) -> TrialConfig {
        TrialConfig {
            n_way,
            top_k,
            repeats,
            rng_seed: 3,
        }
    }

    fn random_probs(n: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, Stream::Probe, 0);
        Array2::from_shape_fn((n, k), |_| rng.random::<f64>())
    }

    #[test]
    fn perfect_and_full_candidate_sets() {
        let labels: Vec<usize> = (0..30).map(|i| (i * 7) % 60).collect();
        let mut probs = Array2::zeros((30, 60));
        for (i, &l) in labels.iter().enumerate() {
            probs.row_mut(i).assign(&one_hot_scores(l, 60));
        }
        for (n, k) in [(2, 1), (50, 1), (50, 5), (60, 1)] {
            assert_eq!(nway_topk_accuracy(probs.view(), &labels, &trial(n, k, 10)).unwrap(), 1.0);
        }
        let rnd = random_probs(30, 60, 1);
        assert_eq!(nway_topk_accuracy(rnd.view(), &labels, &trial(7, 7, 10)).unwrap(), 1.0);
        assert!(matches!(
            nway_topk_accuracy(rnd.view(), &labels, &trial(61, 1, 1)),
            Err(Error::NWayExceedsClasses { n_way: 61, classes: 60 })
        ));
    }

    #[test]
    fn uniform_scores_give_chance() {
        // Flat scores leave the decision to the distractor draw alone.
        let probs = Array2::from_elem((200, 10), 0.1);
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let acc = nway_topk_accuracy(probs.view(), &labels, &trial(2, 1, 100)).unwrap();
        let sigma = 0.5 / 20000f64.sqrt();
        assert!((acc - 0.5).abs() <= 3.0 * sigma, "{acc}");
        // Fixed random scores: each sample's hit rate is its rank fraction,
        // so the spread is set by the 200 samples rather than the 20000 trials.
        let probs = random_probs(200, 10, 2);
        let acc = nway_topk_accuracy(probs.view(), &labels, &trial(2, 1, 100)).unwrap();
        let sigma = (1.0f64 / 12.0 / 200.0).sqrt();
        assert!((acc - 0.5).abs() <= 3.0 * sigma, "{acc}");
    }

    #[test]
    fn ties_go_to_smaller_label() {
        let probs = Array2::from_elem((2, 2), 0.5);
        let acc0 = nway_topk_accuracy(probs.view(), &[0, 0], &trial(2, 1, 3)).unwrap();
        let acc1 = nway_topk_accuracy(probs.view(), &[1, 1], &trial(2, 1, 3)).unwrap();
        assert_eq!((acc0, acc1), (1.0, 0.0));
    }

    #[test]
    fn monotone_in_top_k_and_reproducible() {
        let probs = random_probs(40, 20, 4);
        let labels: Vec<usize> = (0..40).map(|i| (i * 3) % 20).collect();
        let mut prev = 0.0;
        for k in 1..=10 {
            let a = nway_topk_accuracy(probs.view(), &labels, &trial(10, k, 20)).unwrap();
            assert!(a >= prev);
            assert_eq!(a, nway_topk_accuracy(probs.view(), &labels, &trial(10, k, 20)).unwrap());
            prev = a;
        }
    }

    /// Direct 2-D loop without any window reuse.
    fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let size = 11;
        let c = 5.0;
        let mut g = vec![vec![0.0; size]; size];
        let mut total_w = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                *v = (-r2 / 4.5).exp();
                total_w += *v;
            }
        }
        let (h, w) = a.dim();
        let mut acc = Vec::new();
        for y in 0..=h - size {
            for x in 0..=w - size {
                let mut m = [0.0; 5];
                for i in 0..size {
                    for j in 0..size {
                        let wgt = g[i][j] / total_w;
                        let (p, q) = (a[[y + i, x + j]], b[[y + i, x + j]]);
                        m[0] += wgt * p;
                        m[1] += wgt * q;
                        m[2] += wgt * p * p;
                        m[3] += wgt * q * q;
                        m[4] += wgt * p * q;
                    }
                }
                let va = m[2] - m[0] * m[0];
                let vb = m[3] - m[1] * m[1];
                let cov = m[4] - m[0] * m[1];
                let (c1, c2) = (1e-4, 9e-4);
                acc.push((2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2) / ((m[0].powi(2) + m[1].powi(2) + c1) * (va + vb + c2)));
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn ssim_examples() {
        let mut rng = rng_for(5, Stream::Probe, 0);
        let a = Array::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let b = Array::from_shape_fn((16, 16), |_| rng.random::<f64>());
        assert!((ssim(a.view(), a.view(), 1.0).unwrap() - 1.0).abs() < 1e-9);
        let ab = ssim(a.view(), b.view(), 1.0).unwrap();
        assert!((ab - ssim(b.view(), a.view(), 1.0).unwrap()).abs() < 1e-12);
        assert!((ab - ssim_oracle(&a, &b)).abs() < 1e-9);
        let checker = Array::from_shape_fn((16, 16), |(i, j)| ((i + j) % 2) as f64);
        let inv = checker.mapv(|x| 1.0 - x);
        assert!(ssim(checker.view(), inv.view(), 1.0).unwrap() < 0.0);
        let wrong = Array2::<f64>::zeros((16, 15));
        assert!(matches!(ssim(a.view(), wrong.view(), 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = Array2::from_elem((4, 4), 0.5);
        let b = a.mapv(|x| x + 0.1);
        assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), PSNR_CAP);
        let mut rng = rng_for(6, Stream::Probe, 0);
        let x = Array::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let y = Array::from_shape_fn((16, 16), |_| rng.random::<f64>());
        let mut sq = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                sq += (x[[i, j]] - y[[i, j]]).powi(2);
            }
        }
        let want = 10.0 * (1.0 / (sq / 256.0)).log10();
        assert!((psnr(x.view(), y.view(), 1.0).unwrap() - want).abs() < 1e-9);
        assert!(psnr(x.view(), a.view(), 1.0).is_err());
    }

    #[test]
    fn clip_pcc_examples() {
        let same = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 + 1.0);
        assert!((clip_pcc(same.view()).unwrap() - 1.0).abs() < 1e-12);
        let ortho = Array2::from_shape_fn((3, 3), |(i, j)| (i == j) as u8 as f64);
        assert!(clip_pcc(ortho.view()).unwrap().abs() < 1e-12);
        let e = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0]).unwrap();
        assert!((clip_pcc(e.view()).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(clip_pcc(e.slice(s![..1, ..])), Err(Error::SingleFrame)));
        let mut z = e.clone();
        z.row_mut(1).fill(0.0);
        assert!(matches!(clip_pcc(z.view()), Err(Error::ZeroNormRow(1))));
        let mut rng = rng_for(7, Stream::Probe, 0);
        let f = Array::from_shape_fn((5, 3), |_| rng.random::<f64>() - 0.5);
        let (c, s_) = (0.28f64, 0.96f64);
        let rot = Array2::from_shape_vec((3, 3), vec![c, 0.0, -s_, 0.0, 1.0, 0.0, s_, 0.0, c]).unwrap();
        let r = f.dot(&rot);
        assert!((clip_pcc(f.view()).unwrap() - clip_pcc(r.view()).unwrap()).abs() < 1e-9);
    }

    fn clips(n: usize, seed: u64) -> Vec<Array3<f64>> {
        let mut rng = rng_for(seed, Stream::Probe, 1);
        (0..n)
            .map(|_| {
                let base = Array::from_shape_fn((16, 16), |_| rng.random::<f64>());
                let blurred = crate::stubs::gaussian_blur(base.view(), 1.5);
                Array3::from_shape_fn((4, 16, 16), |(f, i, j)| blurred[[(i + f) % 16, j]])
            })
            .collect()
    }

    fn classifiers() -> StubClassifiers {
        StubClassifiers::new(ClipStub::new(16, 4, 16, 4, 1).unwrap(), 100)
    }

    #[test]
    fn identity_report() {
        let gt = clips(6, 8);
        let cls = classifiers();
        let cfg = ReportConfig {
            repeats: 10,
            ..ReportConfig::default()
        };
        let r = build_report(&gt, &gt, &cls, &cfg).unwrap();
        assert_eq!((r.frame_50way, r.frame_2way, r.video_50way, r.video_2way), (1.0, 1.0, 1.0, 1.0));
        assert!((r.ssim - 1.0).abs() < 1e-9);
        assert_eq!(r.psnr, PSNR_CAP);
        let own = mean(gt.iter().map(|g| clip_pcc(cls.clip().frame_vectors(g.view()).view()).unwrap()));
        assert!((r.clip_pcc - own).abs() < 1e-12);
        let again = build_report(&gt, &gt, &cls, &cfg).unwrap();
        assert_eq!(r, again);
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.table().starts_with("| frame 50-way |"));
        assert!(matches!(
            build_report(&gt[..3], &gt, &cls, &cfg),
            Err(Error::PairingMismatch(_))
        ));
    }

    #[test]
    fn shuffled_pairing_is_a_derangement() {
        for n in 2..20 {
            let p = shuffled_pairing(n, n as u64);
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }
}
