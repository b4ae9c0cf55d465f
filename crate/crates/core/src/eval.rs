//! Counting and patch-map metrics, dataset evaluation, and the
//! content-error-mask diagnostic.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::LabeledImage;
use crate::data::{generate_pcm_gt, Image, PatchClassMap};
use crate::error::{Error, Result};
use crate::model::{compute_cem, write_atomic, CountingModel};

/// `(MAE, MSE)` where "MSE" is the root of the mean squared error.
pub fn counting_metrics(gt: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    if gt.is_empty() || gt.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal non-empty count lists, got {} and {}",
            gt.len(),
            pred.len()
        )));
    }
    let n = gt.len() as f64;
    let mae = gt.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mse = (gt.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

/// 2×2 confusion counts, `m[gt][pred]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 2]; 2]);

impl Confusion {
    pub fn add(&mut self, gt: &PatchClassMap, pred: &PatchClassMap) -> Result<()> {
        if (gt.rows, gt.cols) != (pred.rows, pred.cols) {
            return Err(Error::Shape(format!(
                "patch grids differ: {}x{} vs {}x{}",
                gt.rows, gt.cols, pred.rows, pred.cols
            )));
        }
        if !gt.is_binary() || !pred.is_binary() {
            return Err(Error::InvalidArgument("patch maps must be binary".into()));
        }
        for (g, p) in gt.values.iter().zip(&pred.values) {
            self.0[*g as usize][*p as usize] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> PcmMetrics {
        let m = &self.0;
        let (mut acc, mut iou, mut dice) = (0.0, 0.0, 0.0);
        for k in 0..2 {
            let tp = m[k][k] as f64;
            let gt_k = (m[k][0] + m[k][1]) as f64;
            let pred_k = (m[0][k] + m[1][k]) as f64;
            if gt_k == 0.0 && pred_k == 0.0 {
                acc += 1.0;
                iou += 1.0;
                dice += 1.0;
                continue;
            }
            acc += if gt_k > 0.0 { tp / gt_k } else { 0.0 };
            iou += tp / (gt_k + pred_k - tp);
            dice += 2.0 * tp / (gt_k + pred_k);
        }
        PcmMetrics {
            macc: acc / 2.0,
            miou: iou / 2.0,
            mdice: dice / 2.0,
        }
    }
}

/// Class-averaged accuracy, IoU and Dice over classes {0, 1}. A class absent
/// from both maps scores 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcmMetrics {
    pub macc: f64,
    pub miou: f64,
    pub mdice: f64,
}

pub fn pcm_metrics(gt: &PatchClassMap, pred_binary: &PatchClassMap) -> Result<PcmMetrics> {
    let mut c = Confusion::default();
    c.add(gt, pred_binary)?;
    Ok(c.metrics())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    pub macc: f64,
    pub miou: f64,
    pub mdice: f64,
    /// Percentage of feature elements removed by the content error mask, when measured.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pde: Option<f64>,
    /// Sorted by image id.
    pub per_image: Vec<ImageResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,gt_count,pred_count\n");
        for r in &self.per_image {
            s.push_str(&format!("{},{},{}\n", r.id, r.gt_count, r.pred_count));
        }
        s
    }

    /// Write `report.json` (and `counts.csv` when asked) into `dir`.
    pub fn write(&self, dir: &Path, csv: bool) -> Result<()> {
        write_atomic(&dir.join("report.json"), self.to_json().as_bytes())?;
        if csv {
            write_atomic(&dir.join("counts.csv"), self.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

/// Anything that maps an image to a count and a patch-probability grid
/// covering `ceil(H/P) × ceil(W/P)` cells.
pub trait CountPredictor {
    fn patch_size(&self) -> usize;
    fn pcm_threshold(&self) -> f64;
    fn predict(&self, image: &Image) -> Result<(f64, PatchClassMap)>;
}

/// A trained model together with the density scale its targets used.
pub struct ScaledModel<'a> {
    pub model: &'a CountingModel,
    pub density_scale: f64,
}

impl CountPredictor for ScaledModel<'_> {
    fn patch_size(&self) -> usize {
        self.model.config().patch_size
    }

    fn pcm_threshold(&self) -> f64 {
        self.model.config().pcm_threshold
    }

    fn predict(&self, image: &Image) -> Result<(f64, PatchClassMap)> {
        let out = self.model.forward_infer(image, self.density_scale)?;
        Ok((out.count, out.pcm))
    }
}

/// Ground-truth patch labels of an image; the density is zero-padded up to
/// a multiple of `patch_size` first.
pub fn pcm_target(sample: &LabeledImage, patch_size: usize) -> Result<PatchClassMap> {
    let h = sample.density.height.div_ceil(patch_size) * patch_size;
    let w = sample.density.width.div_ceil(patch_size) * patch_size;
    generate_pcm_gt(&sample.density.pad_to(h, w), patch_size)
}

/// Per-image inference over `dataset`; counting metrics plus patch metrics
/// pooled over every patch of every image.
pub fn evaluate<P: CountPredictor + ?Sized>(model: &P, dataset: &[LabeledImage]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data(vec!["evaluation set is empty".into()]));
    }
    let mut per_image = Vec::with_capacity(dataset.len());
    let mut confusion = Confusion::default();
    for s in dataset {
        let (count, probs) = model.predict(&s.image)?;
        let gt = pcm_target(s, model.patch_size())?;
        confusion.add(&gt, &probs.binarize(model.pcm_threshold()))?;
        per_image.push(ImageResult {
            id: s.id.clone(),
            gt_count: s.count(),
            pred_count: count,
        });
    }
    per_image.sort_by(|a, b| a.id.cmp(&b.id));
    let gt: Vec<f64> = per_image.iter().map(|r| r.gt_count).collect();
    let pred: Vec<f64> = per_image.iter().map(|r| r.pred_count).collect();
    let (mae, mse) = counting_metrics(&gt, &pred)?;
    let m = confusion.metrics();
    Ok(EvalReport {
        mae,
        mse,
        macc: m.macc,
        miou: m.miou,
        mdice: m.mdice,
        pde: None,
        per_image,
    })
}

/// Mean portion (percent) of reconstruction-level feature elements removed
/// by the content error mask over `(original, augmented)` pairs.
pub fn pde_diagnostic(model: &CountingModel, pairs: &[(Image, Image)], alpha: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs given".into()));
    }
    let mut total = 0.0;
    for (ori, aug) in pairs {
        let (fo, _) = model.encode(ori)?;
        let (fa, _) = model.encode(aug)?;
        total += compute_cem(&fo, &fa, alpha)?.pde();
    }
    Ok(100.0 * total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PointAnnotation;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn grid(v: &[f64]) -> PatchClassMap {
        PatchClassMap::new(2, 2, 16, v.to_vec())
    }

    #[test]
    fn counting_examples() {
        assert_eq!(counting_metrics(&[10.0, 20.0], &[10.0, 20.0]).unwrap(), (0.0, 0.0));
        assert_eq!(counting_metrics(&[10.0], &[13.0]).unwrap(), (3.0, 3.0));
        let (mae, mse) = counting_metrics(&[0.0, 10.0], &[4.0, 10.0]).unwrap();
        assert_eq!(mae, 2.0);
        assert!((mse - 8f64.sqrt()).abs() < 1e-12);
        assert!(counting_metrics(&[], &[]).is_err());
    }

    #[test]
    fn pcm_examples() {
        let gt = grid(&[1.0, 1.0, 0.0, 0.0]);
        let m = pcm_metrics(&gt, &gt).unwrap();
        assert_eq!((m.macc, m.miou, m.mdice), (1.0, 1.0, 1.0));
        let inv = grid(&[0.0, 0.0, 1.0, 1.0]);
        let m = pcm_metrics(&gt, &inv).unwrap();
        assert_eq!((m.macc, m.miou, m.mdice), (0.0, 0.0, 0.0));
        let m = pcm_metrics(&gt, &grid(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-12);
        let empty = grid(&[0.0; 4]);
        assert_eq!(pcm_metrics(&empty, &empty).unwrap().miou, 1.0);
        assert!(pcm_metrics(&gt, &PatchClassMap::new(1, 4, 16, vec![0.0; 4])).is_err());
    }

    struct Oracle;
    impl CountPredictor for Oracle {
        fn patch_size(&self) -> usize {
            8
        }
        fn pcm_threshold(&self) -> f64 {
            0.5
        }
        fn predict(&self, image: &Image) -> Result<(f64, PatchClassMap)> {
            // the stub reads the count back from the red channel
            let n = (image.get(0, 0, 0) * 10.0).round();
            let rows = image.height.div_ceil(8);
            let cols = image.width.div_ceil(8);
            let mut v = vec![0.0; rows * cols];
            if n > 0.0 {
                v[0] = 1.0;
            }
            Ok((n, PatchClassMap::new(rows, cols, 8, v)))
        }
    }

    fn sample(id: &str, n: usize) -> LabeledImage {
        let img = Image::filled(16, 16, [n as f64 / 10.0, 0.0, 0.0]);
        let pts = vec![[2.0, 2.0]; n];
        LabeledImage::from_parts(img, PointAnnotation::new(id, pts), 0.5, true).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly_and_reports_are_sorted() {
        let data = vec![sample("b", 3), sample("a", 1)];
        let r = evaluate(&Oracle, &data).unwrap();
        assert_eq!((r.mae, r.mse), (0.0, 0.0));
        assert_eq!(r.per_image[0].id, "a");
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.to_json(), evaluate(&Oracle, &data).unwrap().to_json());
        assert_eq!(evaluate(&Oracle, &data[..1]).unwrap().per_image.len(), 1);
    }

    #[test]
    fn pde_of_identical_pair_is_zero() {
        let model = CountingModel::new(&ModelConfig::tiny(), 0).unwrap();
        let img = Image::filled(32, 32, [0.2, 0.5, 0.7]);
        let mut other = img.clone();
        other.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 / 7.0);
        assert_eq!(pde_diagnostic(&model, &[(img.clone(), img.clone())], 0.5).unwrap(), 0.0);
        assert!(pde_diagnostic(&model, &[(img, other)], 0.0).unwrap() > 90.0);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..30)) {
            let (g, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let (mae, mse) = counting_metrics(&g, &p).unwrap();
            prop_assert!(mse + 1e-12 >= mae);
        }

        #[test]
        fn relabeling_symmetry(bits in prop::collection::vec(0u8..4, 4)) {
            let gt = grid(&bits.iter().map(|b| (b & 1) as f64).collect::<Vec<_>>());
            let pr = grid(&bits.iter().map(|b| (b >> 1) as f64).collect::<Vec<_>>());
            let flip = |m: &PatchClassMap| grid(&m.values.iter().map(|v| 1.0 - v).collect::<Vec<_>>());
            prop_assert_eq!(pcm_metrics(&gt, &pr).unwrap(), pcm_metrics(&flip(&gt), &flip(&pr)).unwrap());
        }
    }
}
