//! Graphic and composition layout metrics.
//!
//! Per-layout functions return `0` in degenerate cases (too few elements,
//! no underlay, …). Dataset-level aggregates average each metric only over
//! the layouts where it is defined, so emitting fewer elements cannot make a
//! score look better; the number of contributing layouts is reported.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::synth::pixel_span;
use crate::types::{BBox, ElementClass, GrayRaster, Layout, RgbRaster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Coverage at which an underlay counts as valid in the secondary fraction.
    pub tau_und: f64,
    /// Underlay coverage of a text above which the text is not judged for readability.
    pub beneath: f64,
    /// Saliency at or above which a pixel belongs to the subject.
    pub salient: f32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_und: 0.9,
            beneath: 0.5,
            salient: 0.5,
        }
    }
}

/// Six alignment axes: left, x-center, right, top, y-center, bottom.
fn axes(b: BBox) -> [f64; 6] {
    let [x1, y1, x2, y2] = b.to_corners();
    [x1, b.cx, x2, y1, b.cy, y2]
}

/// Mean over elements of the smallest axis distance to any other element.
pub fn alignment(layout: &Layout) -> f64 {
    let els = &layout.elements;
    if els.len() < 2 {
        return 0.0;
    }
    let total: f64 = els
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let a = axes(e.bbox);
            els.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, o)| {
                    let b = axes(o.bbox);
                    (0..6).map(|k| (a[k] - b[k]).abs()).fold(f64::INFINITY, f64::min)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / els.len() as f64
}

fn is_overlap_class(c: ElementClass) -> bool {
    matches!(c, ElementClass::Logo | ElementClass::Text)
}

/// Mean IoU over unordered pairs of logo/text elements.
pub fn overlap(layout: &Layout) -> f64 {
    let boxes: Vec<BBox> = layout
        .elements
        .iter()
        .filter(|e| is_overlap_class(e.cls))
        .map(|e| e.bbox)
        .collect();
    if boxes.len() < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            sum += boxes[i].iou(boxes[j]);
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Per-underlay best coverage of a non-underlay element.
fn underlay_scores(layout: &Layout) -> Vec<f64> {
    layout
        .elements
        .iter()
        .filter(|u| u.cls == ElementClass::Underlay)
        .map(|u| {
            layout
                .elements
                .iter()
                .filter(|e| e.cls != ElementClass::Underlay)
                .map(|e| e.bbox.covered_by(u.bbox))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Mean over underlays of the best coverage they give another element.
pub fn underlay_validity(layout: &Layout) -> f64 {
    let s = underlay_scores(layout);
    if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Fraction of non-empty layouts.
pub fn occupancy(layouts: &[Layout]) -> Result<f64> {
    if layouts.is_empty() {
        return Err(invalid("occupancy of an empty layout list"));
    }
    Ok(layouts.iter().filter(|l| !l.elements.is_empty()).count() as f64 / layouts.len() as f64)
}

/// Sobel gradient magnitude with kernels scaled by 1/8 and replicated border.
pub fn sobel_magnitude(gray: &GrayRaster) -> GrayRaster {
    let (w, h) = (gray.width as i64, gray.height as i64);
    let at = |x: i64, y: i64| gray.get(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32);
    GrayRaster::from_fn(gray.width, gray.height, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
        let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
            - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        (gx * gx + gy * gy).sqrt() / 8.0
    })
}

fn union_mask(boxes: &[BBox], width: u32, height: u32) -> Vec<bool> {
    let mut mask = vec![false; width as usize * height as usize];
    for b in boxes {
        if let Some((x1, y1, x2, y2)) = pixel_span(*b, width, height) {
            for y in y1..=y2 {
                for x in x1..=x2 {
                    mask[(y * width + x) as usize] = true;
                }
            }
        }
    }
    mask
}

fn masked_mean(values: &GrayRaster, mask: &[bool]) -> Option<f64> {
    let (sum, n) = values
        .data
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0f64, 0usize), |(s, n), (v, _)| (s + *v as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Text boxes without an underlay beneath them.
fn exposed_texts(layout: &Layout, beneath: f64) -> Vec<BBox> {
    let underlays: Vec<BBox> = layout
        .elements
        .iter()
        .filter(|e| e.cls == ElementClass::Underlay)
        .map(|e| e.bbox)
        .collect();
    layout
        .elements
        .iter()
        .filter(|e| e.cls == ElementClass::Text)
        .filter(|e| underlays.iter().all(|u| e.bbox.covered_by(*u) < beneath))
        .map(|e| e.bbox)
        .collect()
}

fn check_size(layout: &Layout, w: u32, h: u32) -> Result<()> {
    if (layout.canvas_w, layout.canvas_h) != (w, h) {
        return Err(invalid(format!(
            "raster {w}×{h} does not match layout canvas {}×{}",
            layout.canvas_w, layout.canvas_h
        )));
    }
    Ok(())
}

/// Mean gradient magnitude over the pixels of exposed text boxes.
pub fn readability(layout: &Layout, image: &RgbRaster, cfg: &MetricsConfig) -> Result<f64> {
    Ok(readability_with(layout, &sobel_magnitude(&image.to_gray()), cfg)?.unwrap_or(0.0))
}

fn readability_with(layout: &Layout, grad: &GrayRaster, cfg: &MetricsConfig) -> Result<Option<f64>> {
    check_size(layout, grad.width, grad.height)?;
    let texts = exposed_texts(layout, cfg.beneath);
    if texts.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        masked_mean(grad, &union_mask(&texts, grad.width, grad.height)).unwrap_or(0.0),
    ))
}

/// `(r_shm, r_sub)`: mean saliency under the element union, and the fraction
/// of subject pixels it covers.
pub fn subject_occlusion(layout: &Layout, saliency: &GrayRaster, cfg: &MetricsConfig) -> Result<(f64, f64)> {
    check_size(layout, saliency.width, saliency.height)?;
    let boxes: Vec<BBox> = layout.elements.iter().map(|e| e.bbox).collect();
    let mask = union_mask(&boxes, saliency.width, saliency.height);
    let shm = masked_mean(saliency, &mask).unwrap_or(0.0);
    let (covered, total) = saliency
        .data
        .iter()
        .zip(&mask)
        .filter(|(v, _)| **v >= cfg.salient)
        .fold((0usize, 0usize), |(c, t), (_, m)| (c + *m as usize, t + 1));
    let sub = if total == 0 { 0.0 } else { covered as f64 / total as f64 };
    Ok((shm, sub))
}

/// Class-aware greedy matching of `pred` to `gt` by descending IoU. Returns
/// one IoU per ground-truth element (0 when unmatched).
pub fn matched_ious(pred: &Layout, gt: &Layout) -> Vec<f64> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.elements.iter().enumerate() {
        for (j, g) in gt.elements.iter().enumerate() {
            if p.cls == g.cls {
                pairs.push((p.bbox.iou(g.bbox), i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.elements.len()];
    let mut out = vec![0.0; gt.elements.len()];
    let mut done = vec![false; gt.elements.len()];
    for (iou, i, j) in pairs {
        if !used_p[i] && !done[j] {
            used_p[i] = true;
            done[j] = true;
            out[j] = iou;
        }
    }
    out
}

/// Metric values of one layout; `None` where the metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutMetrics {
    pub id: String,
    pub r_ali: Option<f64>,
    pub r_ove: Option<f64>,
    pub r_und: Option<f64>,
    pub r_com: Option<f64>,
    pub r_shm: Option<f64>,
    pub r_sub: Option<f64>,
    pub elements: usize,
}

/// One evaluation input: a generated layout and its poster's rasters.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub layout: &'a Layout,
    pub image: &'a RgbRaster,
    pub saliency: &'a GrayRaster,
}

pub fn layout_metrics(item: &EvalItem, cfg: &MetricsConfig) -> Result<LayoutMetrics> {
    let l = item.layout;
    let count = |f: fn(ElementClass) -> bool| l.elements.iter().filter(|e| f(e.cls)).count();
    let grad = sobel_magnitude(&item.image.to_gray());
    let (shm, sub) = subject_occlusion(l, item.saliency, cfg)?;
    let has_subject = item.saliency.data.iter().any(|v| *v >= cfg.salient);
    Ok(LayoutMetrics {
        id: item.id.to_string(),
        r_ali: (l.elements.len() >= 2).then(|| alignment(l)),
        r_ove: (count(is_overlap_class) >= 2).then(|| overlap(l)),
        r_und: (count(|c| c == ElementClass::Underlay) > 0).then(|| underlay_validity(l)),
        r_com: readability_with(l, &grad, cfg)?,
        r_shm: (!l.elements.is_empty()).then_some(shm),
        r_sub: has_subject.then_some(sub),
        elements: l.elements.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_ali: f64,
    pub r_ove: f64,
    pub r_und: f64,
    /// Fraction of underlays whose coverage reaches `tau_und`.
    pub r_und_valid: f64,
    pub r_occ: f64,
    pub r_com: f64,
    pub r_shm: f64,
    pub r_sub: f64,
    /// Layouts evaluated.
    pub count: usize,
    /// Layouts contributing to each of ali, ove, und, com, shm, sub.
    pub defined: [usize; 6],
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 9] =
        ["r_ali", "r_ove", "r_und", "r_und_valid", "r_occ", "r_com", "r_shm", "r_sub", "count"];

    pub fn csv_values(&self) -> [String; 9] {
        [
            self.r_ali,
            self.r_ove,
            self.r_und,
            self.r_und_valid,
            self.r_occ,
            self.r_com,
            self.r_shm,
            self.r_sub,
        ]
        .map(|v| format!("{v}"))
        .into_iter()
        .chain([self.count.to_string()])
        .collect::<Vec<_>>()
        .try_into()
        .expect("nine columns")
    }

    pub fn is_finite(&self) -> bool {
        [self.r_ali, self.r_ove, self.r_und, self.r_und_valid, self.r_occ, self.r_com, self.r_shm, self.r_sub]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Evaluates every layout and aggregates the report.
pub fn evaluate(items: &[EvalItem], cfg: &MetricsConfig) -> Result<(MetricsReport, Vec<LayoutMetrics>)> {
    let per: Vec<LayoutMetrics> = items.iter().map(|i| layout_metrics(i, cfg)).collect::<Result<_>>()?;
    let layouts: Vec<Layout> = items.iter().map(|i| i.layout.clone()).collect();
    let r_occ = occupancy(&layouts)?;
    let mean = |f: fn(&LayoutMetrics) -> Option<f64>| {
        let v: Vec<f64> = per.iter().filter_map(f).collect();
        let m = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (m, v.len())
    };
    let (r_ali, n_ali) = mean(|m| m.r_ali);
    let (r_ove, n_ove) = mean(|m| m.r_ove);
    let (r_und, n_und) = mean(|m| m.r_und);
    let (r_com, n_com) = mean(|m| m.r_com);
    let (r_shm, n_shm) = mean(|m| m.r_shm);
    let (r_sub, n_sub) = mean(|m| m.r_sub);
    let und: Vec<f64> = layouts.iter().flat_map(underlay_scores).collect();
    let r_und_valid = if und.is_empty() {
        0.0
    } else {
        und.iter().filter(|s| **s >= cfg.tau_und).count() as f64 / und.len() as f64
    };
    Ok((
        MetricsReport {
            r_ali,
            r_ove,
            r_und,
            r_und_valid,
            r_occ,
            r_com,
            r_shm,
            r_sub,
            count: items.len(),
            defined: [n_ali, n_ove, n_und, n_com, n_shm, n_sub],
        },
        per,
    ))
}

/// CSV with a header row and one row per report, led by a label column.
pub fn reports_csv(label: &str, rows: &[(String, MetricsReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once(label).chain(MetricsReport::CSV_HEADER).collect();
    w.write_record(&header).map_err(csv_err)?;
    for (name, r) in rows {
        let rec: Vec<String> = std::iter::once(name.clone()).chain(r.csv_values()).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn per_sample_csv(rows: &[LayoutMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "elements", "r_ali", "r_ove", "r_und", "r_com", "r_shm", "r_sub"])
        .map_err(csv_err)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v}"));
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.elements.to_string(),
            cell(r.r_ali),
            cell(r.r_ove),
            cell(r.r_und),
            cell(r.r_com),
            cell(r.r_shm),
            cell(r.r_sub),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> crate::Error {
    invalid(format!("csv: {e}"))
}
