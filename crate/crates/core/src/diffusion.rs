//! Forward corruption of box sets and the deterministic reverse sampler.
//!
//! Boxes live in a zero-centered *signal* domain during diffusion
//! (`s = scale · (2x − 1)`). Training corrupts ground truth with
//! [`DiffusionSchedule::q_sample`]; generation starts from standard Gaussian
//! boxes and applies [`DiffusionSchedule::ddim_step`] along a uniformly
//! strided subsequence of steps, re-imposing pinned elements after each step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{BBox, Element, ElementClass, Layout, ModelConfig, ScheduleKind};

/// Beta and cumulative-alpha tables for `T` diffusion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let betas = match kind {
            ScheduleKind::Linear => linspace(LINEAR_BETA_START, LINEAR_BETA_END, steps),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let a = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    a.cos().powi(2)
                };
                (1..=steps)
                    .map(|i| (1.0 - f(i as f64) / f(i as f64 - 1.0)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas (`betas[i - 1]` is β_i).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(invalid(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len() + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        if let Some(i) = (1..alphas_cumprod.len()).find(|&i| alphas_cumprod[i] >= alphas_cumprod[i - 1])
        {
            return Err(invalid(format!(
                "alphas_cumprod not strictly decreasing at step {i}"
            )));
        }
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_i for `1 ≤ i ≤ T`.
    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    /// ᾱ_i for `0 ≤ i ≤ T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alphas_cumprod[i]
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i > self.steps() {
            Err(invalid(format!("step {i} outside [0, {}]", self.steps())))
        } else {
            Ok(())
        }
    }

    /// `sqrt(ᾱ_i)·x0 + sqrt(1 − ᾱ_i)·eps`, elementwise. Step 0 returns `x0`.
    pub fn q_sample(&self, x0: &[[f64; 4]], i: usize, eps: &[[f64; 4]]) -> Result<Vec<[f64; 4]>> {
        self.check_step(i)?;
        if x0.len() != eps.len() {
            return Err(invalid(format!(
                "x0 has {} boxes but noise has {}",
                x0.len(),
                eps.len()
            )));
        }
        let a = self.alpha_bar(i);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| std::array::from_fn(|k| sa * x[k] + sn * e[k]))
            .collect())
    }

    /// Deterministic DDIM update from step `i` to `i_prev` given the model's
    /// clean-signal estimate.
    pub fn ddim_step(
        &self,
        x_i: &[[f64; 4]],
        x0_hat: &[[f64; 4]],
        i: usize,
        i_prev: usize,
    ) -> Result<Vec<[f64; 4]>> {
        self.ddim_step_eta(x_i, x0_hat, i, i_prev, 0.0, None)
    }

    /// Generalized DDIM update; `eta > 0` injects fresh noise drawn from `rng`
    /// (`eta = 1` recovers ancestral DDPM sampling).
    pub fn ddim_step_eta(
        &self,
        x_i: &[[f64; 4]],
        x0_hat: &[[f64; 4]],
        i: usize,
        i_prev: usize,
        eta: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<[f64; 4]>> {
        self.check_step(i)?;
        if i_prev >= i {
            return Err(invalid(format!("i_prev {i_prev} must be below i {i}")));
        }
        if x_i.len() != x0_hat.len() {
            return Err(invalid("x_i and x0_hat differ in length"));
        }
        let a = self.alpha_bar(i);
        if a >= 1.0 {
            return Err(Error::DegenerateSchedule { step: i });
        }
        let ap = self.alpha_bar(i_prev);
        let sigma = if eta > 0.0 {
            eta * ((1.0 - ap) / (1.0 - a) * (1.0 - a / ap)).max(0.0).sqrt()
        } else {
            0.0
        };
        let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
        let mut rng = rng;
        let mut out = Vec::with_capacity(x_i.len());
        for (x, x0) in x_i.iter().zip(x0_hat) {
            let mut v = [0.0; 4];
            for k in 0..4 {
                let eps = (x[k] - a.sqrt() * x0[k]) / (1.0 - a).sqrt();
                v[k] = ap.sqrt() * x0[k] + dir * eps;
                if sigma > 0.0 {
                    if let Some(r) = rng.as_deref_mut() {
                        let z: f64 = r.sample(StandardNormal);
                        v[k] += sigma * z;
                    }
                }
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Uniformly strided descending step sequence `[T, …, stride]` for
    /// `count` sampling steps; each entry is followed by its predecessor.
    pub fn sampling_steps(&self, count: usize) -> Result<Vec<(usize, usize)>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(invalid(format!("sampling steps {count} outside [1, {t}]")));
        }
        let grid: Vec<usize> = (0..=count)
            .map(|k| ((k as f64) * t as f64 / count as f64).round() as usize)
            .collect();
        Ok((1..=count).rev().map(|k| (grid[k], grid[k - 1])).collect())
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Maps unit-square box coordinates to and from the signal domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalCodec {
    pub scale: f64,
}

impl SignalCodec {
    pub fn new(scale: f64) -> Self {
        Self { scale }
    }

    pub fn encode(&self, b: BBox) -> [f64; 4] {
        b.to_array().map(|v| self.scale * (2.0 * v - 1.0))
    }

    pub fn decode(&self, s: [f64; 4]) -> BBox {
        BBox::from_array(s.map(|v| (v / self.scale + 1.0) / 2.0))
    }

    /// Clamps a signal into `[-scale, scale]`.
    pub fn clip(&self, s: [f64; 4]) -> [f64; 4] {
        s.map(|v| if v.is_finite() { v.clamp(-self.scale, self.scale) } else { 0.0 })
    }

    /// Decodes a (possibly out-of-range) signal into a valid box.
    pub fn decode_valid(&self, s: [f64; 4]) -> BBox {
        self.decode(self.clip(s)).clamp()
    }
}

/// User constraints for controllable generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationConstraints {
    /// `(slot, element)` pairs that must appear verbatim in the output.
    pub pinned: Vec<(usize, Element)>,
    pub slogans: Vec<String>,
    pub seed: u64,
}

impl GenerationConstraints {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let mut seen = vec![false; cfg.n_queries];
        for (slot, e) in &self.pinned {
            if *slot >= cfg.n_queries {
                return Err(invalid(format!(
                    "pinned slot {slot} is out of range (N = {})",
                    cfg.n_queries
                )));
            }
            if std::mem::replace(&mut seen[*slot], true) {
                return Err(invalid(format!("pinned slot {slot} appears twice")));
            }
            if e.cls == ElementClass::Background {
                return Err(invalid(format!("pinned slot {slot} uses the background class")));
            }
        }
        if self.slogans.len() > cfg.max_slogans {
            return Err(invalid(format!(
                "{} slogans exceed the limit of {}",
                self.slogans.len(),
                cfg.max_slogans
            )));
        }
        Ok(())
    }
}

/// Output of one denoiser evaluation over all `N` slots.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    /// `N × num_classes` unnormalized class scores.
    pub class_logits: Vec<Vec<f64>>,
    /// `N` clean-signal estimates.
    pub x0_hat: Vec<[f64; 4]>,
}

/// Anything that reconstructs a clean box set from a noisy one.
pub trait Denoiser {
    /// Per-request conditioning (encoded image and texts).
    type Context;

    fn config(&self) -> &ModelConfig;

    fn prepare(&self, image: &crate::types::RgbRaster, slogans: &[String]) -> Result<Self::Context>;

    fn denoise(&self, ctx: &Self::Context, x_t: &[[f64; 4]], step: usize) -> Result<DenoiseOutput>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub score_threshold: f64,
    /// 0 = deterministic DDIM.
    pub eta: f64,
    pub record_trajectory: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            score_threshold: 0.5,
            eta: 0.0,
            record_trajectory: false,
        }
    }
}

/// One record of the optional per-step trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub layout: Layout,
    pub trajectory: Vec<TrajectoryStep>,
}

/// Softmax probabilities of one logit row.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    crate::autograd::softmax_masked(&mut p, None);
    p
}

/// Runs the reverse process from Gaussian boxes to a layout.
pub fn sample<D: Denoiser>(
    model: &D,
    schedule: &DiffusionSchedule,
    image: &crate::types::RgbRaster,
    constraints: &GenerationConstraints,
    opts: &SampleOptions,
) -> Result<Generation> {
    let cfg = model.config();
    constraints.validate(cfg)?;
    let plan = schedule.sampling_steps(opts.steps)?;
    let n = cfg.n_queries;
    let codec = SignalCodec::new(cfg.signal_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(constraints.seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<[f64; 4]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.sample(StandardNormal)))
            .collect()
    };
    let mut x = draw(&mut rng);
    let pin_noise = draw(&mut rng);
    let pinned: Vec<(usize, [f64; 4])> = constraints
        .pinned
        .iter()
        .map(|(s, e)| (*s, codec.encode(e.bbox)))
        .collect();
    let impose = |x: &mut Vec<[f64; 4]>, step: usize| -> Result<()> {
        if pinned.is_empty() {
            return Ok(());
        }
        let clean: Vec<[f64; 4]> = pinned.iter().map(|p| p.1).collect();
        let noise: Vec<[f64; 4]> = pinned.iter().map(|p| pin_noise[p.0]).collect();
        let noisy = schedule.q_sample(&clean, step, &noise)?;
        for ((slot, _), v) in pinned.iter().zip(noisy) {
            x[*slot] = v;
        }
        Ok(())
    };
    impose(&mut x, plan[0].0)?;

    let ctx = model.prepare(image, &constraints.slogans)?;
    let mut trajectory = Vec::new();
    let mut last_logits = vec![vec![0.0; cfg.num_classes]; n];
    for &(t, t_prev) in &plan {
        let out = model.denoise(&ctx, &x, t)?;
        if out.x0_hat.len() != n || out.class_logits.len() != n {
            return Err(Error::Shape(format!("denoiser returned wrong slot count (N = {n})")));
        }
        let x0: Vec<[f64; 4]> = out.x0_hat.iter().map(|s| codec.clip(*s)).collect();
        x = if t_prev == 0 {
            x0
        } else {
            schedule.ddim_step_eta(&x, &x0, t, t_prev, opts.eta, Some(&mut rng))?
        };
        impose(&mut x, t_prev)?;
        last_logits = out.class_logits;
        if opts.record_trajectory {
            trajectory.push(TrajectoryStep {
                step: t_prev,
                boxes: x.iter().map(|s| codec.decode_valid(*s).to_array()).collect(),
                scores: last_logits
                    .iter()
                    .map(|l| probabilities(l).into_iter().fold(0.0, f64::max))
                    .collect(),
            });
        }
    }

    let (cw, ch) = (image.width, image.height);
    let mut elements = Vec::new();
    for slot in 0..n {
        if let Some((_, e)) = constraints.pinned.iter().find(|(s, _)| *s == slot) {
            elements.push(*e);
            continue;
        }
        let p = probabilities(&last_logits[slot]);
        let (k, score) = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
        let cls = ElementClass::from_index(k).unwrap_or(ElementClass::Background);
        if cls == ElementClass::Background || score < opts.score_threshold {
            continue;
        }
        elements.push(Element {
            cls,
            bbox: codec.decode_valid(x[slot]),
            score: score.clamp(0.0, 1.0),
        });
    }
    Ok(Generation {
        layout: Layout::new(cw, ch, elements),
        trajectory,
    })
}
