//! Finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::nn::{ParamId, ParamStore};

/// One compared gradient entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is zero from dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences of step `h` on `probes` entries drawn from `ids` in turn.
pub fn check<Fn>(store: &mut ParamStore<f64>, ids: &[ParamId], probes: usize, h: f64, seed: u64, mut f: Fn) -> GradCheck
where
    Fn: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Var,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store);
    let grads = tape.backward(root);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let r = f(&mut t, store);
        t.value(r).data[0]
    };
    let mut out = Vec::with_capacity(probes);
    for k in 0..probes {
        let id = ids[k % ids.len()];
        let len = store.get(id).len();
        let index = rng.random_range(0..len);
        let analytic = grads.param(id.0).map_or(0.0, |g| g.data[index]);
        let orig = store.get(id).data[index];
        store.get_mut(id).data[index] = orig + h;
        let up = eval(store);
        store.get_mut(id).data[index] = orig - h;
        let down = eval(store);
        store.get_mut(id).data[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        out.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, 1e-6),
        });
    }
    GradCheck { probes: out }
}
