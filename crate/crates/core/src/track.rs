//! Template tracker, one-pass evaluation and pipeline comparison.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::{cle, iou, BoundingBox, ImagePatch};
use crate::model::Denoiser;
use crate::noise::{darken_enhance, EnhanceParams, NoiseParams};
use crate::rng::derive_seed;
use crate::sequence::Sequence;

/// CLE thresholds `0..=50` px.
pub const PRECISION_THRESHOLDS: usize = 51;
/// IoU thresholds `0, 0.05, …, 1`.
pub const SUCCESS_THRESHOLDS: usize = 21;
/// Default search-region side over template side.
pub const SEARCH_SCALE: f64 = 2.25;
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerState {
    pub template: ImagePatch,
    pub bbox: BoundingBox,
    pub search_scale: f64,
}

/// Result of one tracking step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackStep {
    pub bbox: BoundingBox,
    /// Best normalized cross-correlation, or 0 when flagged.
    pub score: f64,
    /// Set when no candidate window had non-zero variance; the box is kept.
    pub low_confidence: bool,
}

impl TrackerState {
    /// Crops the template at `bbox` (rounded to whole pixels) from `frame`.
    pub fn init(frame: &ImagePatch, bbox: BoundingBox, search_scale: f64) -> Result<Self> {
        let (top, left, h, w) = pixel_rect(&bbox);
        if top < 0 || left < 0 {
            return Err(Error::Tracking("initial box outside frame".into()));
        }
        let template = frame
            .crop(top as usize, left as usize, h, w)
            .map_err(|e| Error::Tracking(format!("initial box: {e}")))?;
        if search_scale < 1.0 {
            return Err(Error::Tracking("search scale must be ≥ 1".into()));
        }
        Ok(Self {
            template,
            bbox,
            search_scale,
        })
    }
}

fn pixel_rect(b: &BoundingBox) -> (i64, i64, usize, usize) {
    (
        b.top().round() as i64,
        b.left().round() as i64,
        b.h.round().max(1.0) as usize,
        b.w.round().max(1.0) as usize,
    )
}

/// Moves the box to the NCC maximum inside the search region around the
/// previous box. Ties keep the first position in raster order.
pub fn ncc_track_step(state: &TrackerState, frame: &ImagePatch) -> Result<(TrackerState, TrackStep)> {
    let (th, tw) = (state.template.height(), state.template.width());
    let (fh, fw) = (frame.height(), frame.width());
    if th > fh || tw > fw {
        return Err(Error::Tracking(format!("template {th}×{tw} larger than frame {fh}×{fw}")));
    }
    let sh = ((th as f64 * state.search_scale).round() as usize).clamp(th, fh);
    let sw = ((tw as f64 * state.search_scale).round() as usize).clamp(tw, fw);
    let clip = |centre: f64, side: usize, limit: usize| {
        ((centre - side as f64 / 2.0).round() as i64).clamp(0, (limit - side) as i64) as usize
    };
    let (sy, sx) = (clip(state.bbox.cy, sh, fh), clip(state.bbox.cx, sw, fw));

    let n = (3 * th * tw) as f64;
    let t = state.template.data();
    let t_mean = t.iter().map(|&v| v as f64).sum::<f64>() / n;
    let tc: Vec<f64> = t.iter().map(|&v| v as f64 - t_mean).collect();
    let t_norm = tc.iter().map(|v| v * v).sum::<f64>().sqrt();

    let f = frame.data();
    let plane = fh * fw;
    let mut best: Option<(f64, usize, usize)> = None;
    for y in sy..=sy + sh - th {
        for x in sx..=sx + sw - tw {
            let (mut s, mut s2, mut cross) = (0.0, 0.0, 0.0);
            let mut k = 0;
            for c in 0..3 {
                for ty in 0..th {
                    let row = c * plane + (y + ty) * fw + x;
                    for (tx, &v) in f[row..row + tw].iter().enumerate() {
                        let v = v as f64;
                        s += v;
                        s2 += v * v;
                        cross += v * tc[k + tx];
                    }
                    k += tw;
                }
            }
            let var = s2 - s * s / n;
            if var <= VARIANCE_FLOOR || t_norm * t_norm <= VARIANCE_FLOOR {
                continue;
            }
            let score = cross / (var.sqrt() * t_norm);
            if best.is_none_or(|(b, _, _)| score > b) {
                best = Some((score, y, x));
            }
        }
    }
    let step = match best {
        Some((score, y, x)) => TrackStep {
            bbox: BoundingBox {
                cx: x as f64 + state.bbox.w / 2.0,
                cy: y as f64 + state.bbox.h / 2.0,
                ..state.bbox
            },
            score,
            low_confidence: false,
        },
        None => TrackStep {
            bbox: state.bbox,
            score: 0.0,
            low_confidence: true,
        },
    };
    let next = TrackerState {
        bbox: step.bbox,
        ..state.clone()
    };
    Ok((next, step))
}

/// Per-frame context handed to frame transforms.
#[derive(Clone, Copy, Debug)]
pub struct FrameCtx {
    /// Shared across variants so comparisons are paired.
    pub sequence_seed: u64,
    pub index: usize,
}

pub trait FrameTransform {
    fn apply(&self, frame: &ImagePatch, ctx: FrameCtx) -> Result<ImagePatch>;
}

/// Low-light capture plus enhancement, seeded per frame.
#[derive(Clone, Copy, Debug)]
pub struct Degrade {
    pub noise: NoiseParams,
    pub enhance: EnhanceParams,
}

impl FrameTransform for Degrade {
    fn apply(&self, frame: &ImagePatch, ctx: FrameCtx) -> Result<ImagePatch> {
        let seed = derive_seed(derive_seed(self.noise.seed, ctx.sequence_seed), ctx.index as u64);
        Ok(darken_enhance(frame, &self.noise.with_seed(seed), &self.enhance)?.1)
    }
}

/// Deterministic denoising with a trained model.
pub struct Denoise<'a>(pub &'a Denoiser<f32>);

impl FrameTransform for Denoise<'_> {
    fn apply(&self, frame: &ImagePatch, _ctx: FrameCtx) -> Result<ImagePatch> {
        self.0.denoise(frame)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeResult {
    /// Fraction of frames with CLE ≤ t for t = 0..=50.
    pub precision: Vec<f64>,
    /// Fraction of frames with IoU ≥ t for t = 0, 0.05, …, 1.
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision_at_20: f64,
}

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_THRESHOLDS - 1) as f64
}

/// Scores predictions against ground truth.
pub fn ope_from_boxes(pred: &[BoundingBox], truth: &[BoundingBox]) -> Result<OpeResult> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Data(format!("{} predictions for {} ground-truth boxes", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let errs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| cle(p, t)).collect();
    let ious: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| iou(p, t)).collect();
    let precision: Vec<f64> = (0..PRECISION_THRESHOLDS)
        .map(|t| errs.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
        .collect();
    let success: Vec<f64> = (0..SUCCESS_THRESHOLDS)
        .map(|i| ious.iter().filter(|&&v| v >= success_threshold(i)).count() as f64 / n)
        .collect();
    Ok(OpeResult {
        auc: success.iter().sum::<f64>() / SUCCESS_THRESHOLDS as f64,
        precision_at_20: precision[20],
        precision,
        success,
    })
}

/// Tracker predictions over a transformed sequence, initialized from the
/// frame-0 ground truth only.
pub fn track_sequence(seq: &Sequence, pipeline: &[&dyn FrameTransform], search_scale: f64) -> Result<Vec<BoundingBox>> {
    if seq.frames.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    let transform = |i: usize| -> Result<ImagePatch> {
        let ctx = FrameCtx {
            sequence_seed: seq.spec.seed,
            index: i,
        };
        pipeline.iter().try_fold(seq.frames[i].clone(), |f, t| t.apply(&f, ctx))
    };
    let mut state = TrackerState::init(&transform(0)?, seq.boxes[0], search_scale)?;
    let mut pred = vec![seq.boxes[0]];
    for i in 1..seq.frames.len() {
        let (next, step) = ncc_track_step(&state, &transform(i)?)?;
        if step.low_confidence {
            log::debug!("frame {i}: low-confidence match");
        }
        pred.push(step.bbox);
        state = next;
    }
    Ok(pred)
}

pub fn run_ope(seq: &Sequence, pipeline: &[&dyn FrameTransform], search_scale: f64) -> Result<OpeResult> {
    let pred = track_sequence(seq, pipeline, search_scale)?;
    ope_from_boxes(&pred, &seq.boxes)
}

/// A named frame pipeline.
pub struct Variant<'a> {
    pub name: String,
    pub pipeline: Vec<Box<dyn FrameTransform + 'a>>,
}

/// Trained models available to [`build_variant`].
#[derive(Default)]
pub struct ModelSet<'a> {
    pub full: Option<&'a Denoiser<f32>>,
    pub no_mkcr: Option<&'a Denoiser<f32>>,
    pub no_nrtc: Option<&'a Denoiser<f32>>,
}

/// Names accepted by [`build_variant`], in table order.
pub const VARIANT_NAMES: [&str; 4] = ["baseline", "no-mkcr", "no-nrtc", "full"];

/// `baseline` degrades only; the other names append the matching denoiser.
pub fn build_variant<'a>(name: &str, degrade: Degrade, models: &ModelSet<'a>) -> Result<Variant<'a>> {
    let model = match name {
        "baseline" => None,
        "full" => Some(models.full),
        "no-mkcr" => Some(models.no_mkcr),
        "no-nrtc" => Some(models.no_nrtc),
        other => {
            return Err(Error::Config(format!(
                "unknown variant `{other}` (expected one of {VARIANT_NAMES:?})"
            )))
        }
    };
    let mut pipeline: Vec<Box<dyn FrameTransform + 'a>> = vec![Box::new(degrade)];
    if let Some(m) = model {
        let m = m.ok_or_else(|| Error::Config(format!("variant `{name}` needs a trained model")))?;
        pipeline.push(Box::new(Denoise(m)));
    }
    Ok(Variant {
        name: name.to_string(),
        pipeline,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantRow {
    pub name: String,
    pub precision: f64,
    pub success: f64,
    /// Relative change against the first row, in percent.
    pub delta_precision_pct: f64,
    pub delta_success_pct: f64,
    pub per_sequence: Vec<OpeResult>,
    /// Curves averaged over sequences.
    pub mean_precision_curve: Vec<f64>,
    pub mean_success_curve: Vec<f64>,
}

/// Runs every variant over every sequence. The first variant is the reference for the Δ columns.
pub fn compare_pipelines(sequences: &[Sequence], variants: &[Variant], search_scale: f64) -> Result<Vec<VariantRow>> {
    if sequences.is_empty() {
        return Err(Error::Data("no sequences".into()));
    }
    let mut rows: Vec<VariantRow> = Vec::with_capacity(variants.len());
    for v in variants {
        let pipe: Vec<&dyn FrameTransform> = v.pipeline.iter().map(|b| b.as_ref() as &dyn FrameTransform).collect();
        let per: Vec<OpeResult> = sequences
            .iter()
            .map(|s| run_ope(s, &pipe, search_scale))
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let mean_curve = |f: fn(&OpeResult) -> &Vec<f64>| {
            let len = f(&per[0]).len();
            (0..len).map(|i| per.iter().map(|r| f(r)[i]).sum::<f64>() / n).collect::<Vec<_>>()
        };
        let precision = per.iter().map(|r| r.precision_at_20).sum::<f64>() / n;
        let success = per.iter().map(|r| r.auc).sum::<f64>() / n;
        let (p0, s0) = rows.first().map_or((precision, success), |r| (r.precision, r.success));
        let pct = |x: f64, base: f64| if base > 0.0 { 100.0 * (x - base) / base } else { 0.0 };
        log::info!("variant {}: precision@20 {precision:.3}, AUC {success:.3}", v.name);
        rows.push(VariantRow {
            name: v.name.clone(),
            precision,
            success,
            delta_precision_pct: pct(precision, p0),
            delta_success_pct: pct(success, s0),
            mean_precision_curve: mean_curve(|r| &r.precision),
            mean_success_curve: mean_curve(|r| &r.success),
            per_sequence: per,
        })
    }
    Ok(rows)
}

/// `variant,precision,delta_precision_pct,success,delta_success_pct`
pub fn table_csv(rows: &[VariantRow]) -> String {
    let mut s = String::from("variant,precision,delta_precision_pct,success,delta_success_pct\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.3},{:.6},{:.3}",
            r.name, r.precision, r.delta_precision_pct, r.success, r.delta_success_pct
        );
    }
    s
}

/// Fixed-width table with the columns Prec., Δp%, Succ., Δs%.
pub fn table_text(rows: &[VariantRow]) -> String {
    let mut s = format!("{:<12} {:>7} {:>8} {:>7} {:>8}\n", "Variant", "Prec.", "Δp%", "Succ.", "Δs%");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>7.3} {:>+8.2} {:>7.3} {:>+8.2}",
            r.name, r.precision, r.delta_precision_pct, r.success, r.delta_success_pct
        );
    }
    s
}

/// `variant,curve,threshold,value` rows for both mean curves of every variant.
pub fn curves_csv(rows: &[VariantRow]) -> String {
    let mut s = String::from("variant,curve,threshold,value\n");
    for r in rows {
        for (t, v) in r.mean_precision_curve.iter().enumerate() {
            let _ = writeln!(s, "{},precision,{t},{v:.6}", r.name);
        }
        for (i, v) in r.mean_success_curve.iter().enumerate() {
            let _ = writeln!(s, "{},success,{},{v:.6}", r.name, success_threshold(i));
        }
    }
    s
}
