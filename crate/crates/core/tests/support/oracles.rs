//! Independent scalar and brute-force reimplementations of the losses and
//! metrics, and the checks that compare them with the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use radm_core::autograd::Tape;
use radm_core::diffusion::{DiffusionSchedule, SignalCodec};
use radm_core::loss::{focal_loss, giou_signal_loss, l1_loss, training_loss, FOCAL_ALPHA, FOCAL_GAMMA};
use radm_core::metrics::{alignment, layout_metrics, overlap, underlay_validity, EvalItem, MetricsConfig};
use radm_core::tensor::Tensor;
use radm_core::{BBox, Element, ElementClass, GrayRaster, Layout, RgbRaster, ScheduleKind};

fn corners(b: &[f64; 4]) -> (f64, f64, f64, f64) {
    (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0)
}

fn inter_area(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = corners(a);
    let (bx1, by1, bx2, by2) = corners(b);
    let w = f64::max(0.0, f64::min(ax2, bx2) - f64::max(ax1, bx1));
    let h = f64::max(0.0, f64::min(ay2, by2) - f64::max(ay1, by1));
    w * h
}

fn raw(b: BBox) -> [f64; 4] {
    [b.cx, b.cy, b.w, b.h]
}

/// `−α (1 − p_t)^γ ln p_t` averaged over rows, with a plain softmax.
pub fn focal_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (row, &y) in logits.iter().zip(targets) {
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        let p = row[y].exp() / denom;
        sum += -FOCAL_ALPHA * (1.0 - p).powi(2) * p.ln();
    }
    sum / targets.len() as f64
}

pub fn l1_oracle(pred: &[[f64; 4]], gt: &[[f64; 4]], keep: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..pred.len() {
        if keep[i] {
            for k in 0..4 {
                sum += (pred[i][k] - gt[i][k]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn giou_oracle(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    let (px1, py1, px2, py2) = corners(p);
    let (gx1, gy1, gx2, gy2) = corners(g);
    let inter = inter_area(p, g);
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    let hull = (f64::max(px2, gx2) - f64::min(px1, gx1)) * (f64::max(py2, gy2) - f64::min(py1, gy1));
    1.0 - (inter / union - (hull - union) / hull)
}

fn to_unit(codec: &SignalCodec, s: &[f64; 4]) -> [f64; 4] {
    let u = s.map(|v| (v / codec.scale + 1.0) / 2.0);
    [u[0], u[1], u[2].max(BBox::MIN_SIZE), u[3].max(BBox::MIN_SIZE)]
}

pub fn giou_signal_oracle(codec: &SignalCodec, pred: &[[f64; 4]], gt: &[[f64; 4]], keep: &[bool]) -> f64 {
    let terms: Vec<f64> = (0..pred.len())
        .filter(|i| keep[*i])
        .map(|i| giou_oracle(&to_unit(codec, &pred[i]), &to_unit(codec, &gt[i])))
        .collect();
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

/// Largest deviation of each loss term from its oracle over `instances`
/// random problems, and whether every total equals `5·cls + 5·l1 + giou`.
#[derive(Debug, Clone, Copy)]
pub struct LossOracleResult {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub totals_exact: bool,
}

pub fn loss_oracle(instances: usize, seed: u64) -> LossOracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ElementClass::ALL.len();
    let mut out = LossOracleResult {
        focal: 0.0,
        l1: 0.0,
        giou: 0.0,
        totals_exact: true,
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=12);
        let codec = SignalCodec::new(rng.random_range(0.5..3.0));
        let classes: Vec<ElementClass> = (0..n).map(|_| ElementClass::ALL[rng.random_range(0..k)]).collect();
        let targets: Vec<usize> = classes.iter().map(|c| c.index()).collect();
        let logits: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-6.0..6.0)).collect()).collect();
        let signal = |rng: &mut ChaCha8Rng| -> [f64; 4] {
            let b = BBox::new(
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.01..0.6),
                rng.random_range(0.01..0.6),
            );
            codec.encode(b)
        };
        let gt: Vec<[f64; 4]> = (0..n).map(|_| signal(&mut rng)).collect();
        let pred: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                if rng.random_bool(0.2) {
                    std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * codec.scale)
                } else {
                    signal(&mut rng)
                }
            })
            .collect();
        let keep: Vec<bool> = classes.iter().map(|c| *c != ElementClass::Background).collect();

        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let f = focal_loss(&flat, &targets, k, FOCAL_ALPHA, FOCAL_GAMMA).0;
        let l = l1_loss(&pred, &gt, &keep).0;
        let g = giou_signal_loss(&codec, &pred, &gt, &keep).0;
        out.focal = out.focal.max((f - focal_oracle(&logits, &targets)).abs());
        out.l1 = out.l1.max((l - l1_oracle(&pred, &gt, &keep)).abs());
        out.giou = out.giou.max((g - giou_signal_oracle(&codec, &pred, &gt, &keep)).abs());

        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![n, k], flat));
        let b = tape.constant(Tensor::new(vec![n, 4], pred.iter().flatten().copied().collect()));
        let (root, parts) = training_loss(&mut tape, z, b, &gt, &classes, &codec).unwrap();
        let want = 5.0 * parts.cls + 5.0 * parts.l1 + parts.giou;
        out.totals_exact &= parts.total == want && tape.value(root).data[0] == want;
        out.totals_exact &= (parts.cls, parts.l1, parts.giou) == (f, l, g);
    }
    out
}

/// Mean over elements of the nearest axis distance to another element.
pub fn alignment_oracle(boxes: &[[f64; 4]]) -> f64 {
    if boxes.len() < 2 {
        return 0.0;
    }
    let axes = |b: &[f64; 4]| {
        let (x1, y1, x2, y2) = corners(b);
        [x1, b[0], x2, y1, b[1], y2]
    };
    let mut sum = 0.0;
    for (i, a) in boxes.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in boxes.iter().enumerate() {
            if i == j {
                continue;
            }
            for (u, v) in axes(a).iter().zip(axes(b)) {
                best = best.min((u - v).abs());
            }
        }
        sum += best;
    }
    sum / boxes.len() as f64
}

pub fn overlap_oracle(els: &[(ElementClass, [f64; 4])]) -> f64 {
    let b: Vec<&[f64; 4]> = els
        .iter()
        .filter(|(c, _)| matches!(c, ElementClass::Logo | ElementClass::Text))
        .map(|(_, b)| b)
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..b.len() {
        for j in i + 1..b.len() {
            let inter = inter_area(b[i], b[j]);
            sum += inter / (b[i][2] * b[i][3] + b[j][2] * b[j][3] - inter);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

pub fn underlay_oracle(els: &[(ElementClass, [f64; 4])]) -> f64 {
    let mut scores = Vec::new();
    for (c, u) in els {
        if *c != ElementClass::Underlay {
            continue;
        }
        let mut best: f64 = 0.0;
        for (d, e) in els {
            if *d != ElementClass::Underlay {
                best = best.max(inter_area(e, u) / (e[2] * e[3]));
            }
        }
        scores.push(best);
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

fn center_inside(b: &[f64; 4], x: usize, y: usize, w: usize, h: usize) -> bool {
    let (x1, y1, x2, y2) = corners(b);
    let (px, py) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    px >= x1 && px <= x2 && py >= y1 && py <= y2
}

/// Sobel magnitude at one pixel by explicit 3×3 correlation, border replicated.
fn sobel_at(gray: &[Vec<f64>], x: usize, y: usize) -> f64 {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let h = gray.len() as i64;
    let w = gray[0].len() as i64;
    let (mut gx, mut gy) = (0.0, 0.0);
    for dy in 0..3 {
        for dx in 0..3 {
            let yy = (y as i64 + dy as i64 - 1).clamp(0, h - 1) as usize;
            let xx = (x as i64 + dx as i64 - 1).clamp(0, w - 1) as usize;
            gx += KX[dy][dx] * gray[yy][xx];
            gy += KX[dx][dy] * gray[yy][xx];
        }
    }
    (gx * gx + gy * gy).sqrt() / 8.0
}

/// `(r_com, r_shm, r_sub)` by enumerating every pixel.
pub fn raster_oracle(
    els: &[(ElementClass, [f64; 4])],
    image: &RgbRaster,
    saliency: &GrayRaster,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let (w, h) = (image.width as usize, image.height as usize);
    let gray: Vec<Vec<f64>> = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let [r, g, b] = image.pixel(x as u32, y as u32);
                    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
                })
                .collect()
        })
        .collect();
    let underlays: Vec<&[f64; 4]> = els.iter().filter(|(c, _)| *c == ElementClass::Underlay).map(|(_, b)| b).collect();
    let exposed: Vec<&[f64; 4]> = els
        .iter()
        .filter(|(c, b)| *c == ElementClass::Text && underlays.iter().all(|u| inter_area(b, u) / (b[2] * b[3]) < 0.5))
        .map(|(_, b)| b)
        .collect();
    let (mut com_sum, mut com_n) = (0.0, 0usize);
    let (mut shm_sum, mut shm_n) = (0.0, 0usize);
    let (mut sal_total, mut sal_cov) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if exposed.iter().any(|b| center_inside(b, x, y, w, h)) {
                com_sum += sobel_at(&gray, x, y);
                com_n += 1;
            }
            let s = saliency.get(x as u32, y as u32) as f64;
            let covered = els.iter().any(|(_, b)| center_inside(b, x, y, w, h));
            if covered {
                shm_sum += s;
                shm_n += 1;
            }
            if s >= 0.5 {
                sal_total += 1;
                sal_cov += covered as usize;
            }
        }
    }
    let com = (!exposed.is_empty()).then(|| if com_n == 0 { 0.0 } else { com_sum / com_n as f64 });
    let shm = (!els.is_empty()).then(|| if shm_n == 0 { 0.0 } else { shm_sum / shm_n as f64 });
    let sub = (sal_total > 0).then(|| sal_cov as f64 / sal_total as f64);
    (com, shm, sub)
}

/// Largest pair-metric deviation and largest raster-metric relative error
/// over `instances` random layouts on 64×64 rasters.
#[derive(Debug, Clone, Copy)]
pub struct MetricsOracleResult {
    pub pair_abs: f64,
    pub raster_rel: f64,
    pub hand_cases: bool,
}

fn random_layout(rng: &mut ChaCha8Rng) -> Vec<(ElementClass, [f64; 4])> {
    let classes = [ElementClass::Logo, ElementClass::Text, ElementClass::Underlay, ElementClass::Embellishment];
    let n = rng.random_range(0..=6);
    (0..n)
        .map(|_| {
            let c = if rng.random_bool(0.5) { ElementClass::Text } else { classes[rng.random_range(0..4)] };
            let w = rng.random_range(0.05..0.6);
            let h = rng.random_range(0.05..0.6);
            (c, [rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0), w, h])
        })
        .collect()
}

fn random_rasters(rng: &mut ChaCha8Rng) -> (RgbRaster, GrayRaster) {
    let kind = rng.random_range(0..3);
    let (a, b, c) = (rng.random_range(0..255u32), rng.random_range(1..9u32), rng.random_range(0..64u32));
    let image = RgbRaster::from_fn(64, 64, |x, y| match kind {
        0 => [((x * 4 + a) % 256) as u8, ((y * b * 3) % 256) as u8, 77],
        1 => if x < c { [20, 20, 20] } else { [230, 220, 210] },
        _ => [((x * y + a) % 256) as u8, ((x ^ y) * b % 256) as u8, ((x + y) * 2 % 256) as u8],
    });
    let (cx, cy, r) = (rng.random_range(10.0..54.0), rng.random_range(10.0..54.0), rng.random_range(4.0..20.0f32));
    let sal = GrayRaster::from_fn(64, 64, |x, y| {
        let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
        (1.0 - d / (2.0 * r)).clamp(0.0, 1.0)
    });
    (image, sal)
}

fn to_layout(els: &[(ElementClass, [f64; 4])]) -> Layout {
    Layout::new(64, 64, els.iter().map(|(c, b)| Element::new(*c, BBox::new(b[0], b[1], b[2], b[3]))).collect())
}

fn rel(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (None, None) => 0.0,
        (Some(a), Some(b)) => (a - b).abs() / a.abs().max(b.abs()).max(1e-9),
        _ => f64::INFINITY,
    }
}

pub fn hand_cases() -> bool {
    let l = |els: &[(ElementClass, [f64; 4])]| to_layout(els);
    let aligned = l(&[(ElementClass::Text, [0.25, 0.3, 0.25, 0.1]), (ElementClass::Logo, [0.375, 0.7, 0.5, 0.2])]);
    let same = l(&[(ElementClass::Text, [0.5, 0.5, 0.2, 0.1]), (ElementClass::Text, [0.5, 0.5, 0.2, 0.1])]);
    let covered = l(&[(ElementClass::Text, [0.5, 0.5, 0.2, 0.1]), (ElementClass::Underlay, [0.5, 0.5, 0.3, 0.2])]);
    alignment(&aligned) == 0.0 && overlap(&same) == 1.0 && underlay_validity(&covered) == 1.0
}

pub fn metrics_oracle(instances: usize, seed: u64) -> MetricsOracleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MetricsConfig::default();
    let mut out = MetricsOracleResult {
        pair_abs: 0.0,
        raster_rel: 0.0,
        hand_cases: hand_cases(),
    };
    for i in 0..instances {
        let els = random_layout(&mut rng);
        let (image, sal) = random_rasters(&mut rng);
        let layout = to_layout(&els);
        let boxes: Vec<[f64; 4]> = layout.elements.iter().map(|e| raw(e.bbox)).collect();
        let id = i.to_string();
        let m = layout_metrics(
            &EvalItem {
                id: &id,
                layout: &layout,
                image: &image,
                saliency: &sal,
            },
            &cfg,
        )
        .unwrap();
        for (got, want) in [
            (alignment(&layout), alignment_oracle(&boxes)),
            (overlap(&layout), overlap_oracle(&els)),
            (underlay_validity(&layout), underlay_oracle(&els)),
        ] {
            out.pair_abs = out.pair_abs.max((got - want).abs());
        }
        let (com, shm, sub) = raster_oracle(&els, &image, &sal);
        for e in [rel(m.r_com, com), rel(m.r_shm, shm), rel(m.r_sub, sub)] {
            out.raster_rel = out.raster_rel.max(e);
        }
    }
    out
}

/// Empirical mean and variance of `q_sample` against
/// `(sqrt(ᾱ)·x0, 1 − ᾱ)`, in units of standard error. Returns the largest
/// z-score over the checked steps and coordinates.
pub fn q_sample_monte_carlo(draws: usize, seed: u64) -> f64 {
    let sched = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let x0 = [[0.7, -1.3, 0.25, 1.9]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &i in &[1usize, 250, 500, 750, 1000] {
        let a = sched.alpha_bar(i);
        let var = 1.0 - a;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        let mut xs = Vec::with_capacity(draws);
        for _ in 0..draws {
            let eps = [std::array::from_fn(|_| rng.sample(StandardNormal))];
            let x = sched.q_sample(&x0, i, &eps).unwrap()[0];
            for k in 0..4 {
                sum[k] += x[k];
            }
            xs.push(x);
        }
        let n = draws as f64;
        for k in 0..4 {
            let mean = sum[k] / n;
            for x in &xs {
                sq[k] += (x[k] - mean).powi(2);
            }
            let s2 = sq[k] / (n - 1.0);
            let mean_se = (var / n).sqrt();
            // Standard error of the sample variance of a Gaussian.
            let var_se = var * (2.0 / (n - 1.0)).sqrt();
            worst = worst.max((mean - a.sqrt() * x0[0][k]).abs() / mean_se);
            worst = worst.max((s2 - var).abs() / var_se);
        }
    }
    worst
}

/// DDIM to step 0 returns the clean estimate bitwise, and every schedule
/// has strictly decreasing `ᾱ` with betas in (0, 1).
pub fn ddim_and_schedules() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &steps in &[1usize, 10, 1000] {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = DiffusionSchedule::new(steps, kind).map_err(|e| e.to_string())?;
            if s.alpha_bar(0) != 1.0 {
                return Err(format!("{kind:?}/{steps}: ᾱ_0 = {}", s.alpha_bar(0)));
            }
            for i in 1..=steps {
                if !(s.alpha_bar(i) < s.alpha_bar(i - 1)) || !(s.beta(i) > 0.0 && s.beta(i) < 1.0) {
                    return Err(format!("{kind:?}/{steps}: not monotone at {i}"));
                }
            }
            for i in 1..=steps {
                let x_i: Vec<[f64; 4]> = (0..5).map(|_| std::array::from_fn(|_| rng.sample(StandardNormal))).collect();
                let x0: Vec<[f64; 4]> = (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
                if s.ddim_step(&x_i, &x0, i, 0).map_err(|e| e.to_string())? != x0 {
                    return Err(format!("{kind:?}/{steps}: ddim to 0 from {i} is not x0_hat"));
                }
            }
        }
    }
    Ok(())
}
