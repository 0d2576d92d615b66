//! Hand-differentiated building blocks operating on row-major `n × d` token
//! matrices. Every `backward` accumulates parameter gradients into a flat
//! buffer laid out like [`ParamStore::values`] and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

pub type SlotId = usize;

/// All trainable parameters of a model in one flat vector.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub values: Vec<f64>,
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, len: usize, mut init: impl FnMut() -> f64) -> SlotId {
        let offset = self.values.len();
        self.values.extend((0..len).map(|_| init()));
        self.slots.push(Slot {
            name: name.into(),
            offset,
            len,
        });
        self.slots.len() - 1
    }

    pub fn get(&self, id: SlotId) -> &[f64] {
        let s = &self.slots[id];
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn slot(&self, id: SlotId) -> &Slot {
        &self.slots[id]
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Name of the slot that owns flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&str> {
        self.slots
            .iter()
            .find(|s| i >= s.offset && i < s.offset + s.len)
            .map(|s| s.name.as_str())
    }
}

fn grad_slot<'a>(store: &ParamStore, grads: &'a mut [f64], id: SlotId) -> &'a mut [f64] {
    let s = store.slot(id);
    &mut grads[s.offset..s.offset + s.len]
}

/// `y = x·W + b` with `W` stored `din × dout`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: SlotId,
    pub b: SlotId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / din as f64).sqrt()).unwrap();
        let w = store.add(format!("{name}.weight"), din * dout, || normal.sample(rng));
        let b = store.add(format!("{name}.bias"), dout, || 0.0);
        Self { w, b, din, dout }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.din);
        let (w, b) = (p.get(self.w), p.get(self.b));
        let mut y = Vec::with_capacity(n * self.dout);
        for _ in 0..n {
            y.extend_from_slice(b);
        }
        for i in 0..n {
            let yi = &mut y[i * self.dout..(i + 1) * self.dout];
            for (k, &xk) in x[i * self.din..(i + 1) * self.din].iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                for (yo, wo) in yi.iter_mut().zip(&w[k * self.dout..(k + 1) * self.dout]) {
                    *yo += xk * wo;
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &[f64], n: usize, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = p.get(self.w);
        {
            let gw = grad_slot(p, grads, self.w);
            for i in 0..n {
                let dyi = &dy[i * self.dout..(i + 1) * self.dout];
                for (k, &xk) in x[i * self.din..(i + 1) * self.din].iter().enumerate() {
                    for (g, d) in gw[k * self.dout..(k + 1) * self.dout].iter_mut().zip(dyi) {
                        *g += xk * d;
                    }
                }
            }
        }
        {
            let gb = grad_slot(p, grads, self.b);
            for i in 0..n {
                for (g, d) in gb.iter_mut().zip(&dy[i * self.dout..(i + 1) * self.dout]) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![0.0; n * self.din];
        for i in 0..n {
            let dyi = &dy[i * self.dout..(i + 1) * self.dout];
            for k in 0..self.din {
                dx[i * self.din + k] = w[k * self.dout..(k + 1) * self.dout]
                    .iter()
                    .zip(dyi)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        dx
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: SlotId,
    pub beta: SlotId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), dim, || 1.0);
        let beta = store.add(format!("{name}.beta"), dim, || 0.0);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, LayerNormCache) {
        let d = self.dim;
        let (g, b) = (p.get(self.gamma), p.get(self.beta));
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for k in 0..d {
                let h = (row[k] - mu) * is;
                xhat[i * d + k] = h;
                y[i * d + k] = g[k] * h + b[k];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, cache: &LayerNormCache, n: usize, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let g = p.get(self.gamma).to_vec();
        {
            let gg = grad_slot(p, grads, self.gamma);
            for i in 0..n {
                for k in 0..d {
                    gg[k] += dy[i * d + k] * cache.xhat[i * d + k];
                }
            }
        }
        {
            let gb = grad_slot(p, grads, self.beta);
            for i in 0..n {
                for k in 0..d {
                    gb[k] += dy[i * d + k];
                }
            }
        }
        let mut dx = vec![0.0; n * d];
        for i in 0..n {
            let xh = &cache.xhat[i * d..(i + 1) * d];
            let dxh: Vec<f64> = (0..d).map(|k| dy[i * d + k] * g[k]).collect();
            let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
            let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for k in 0..d {
                dx[i * d + k] = cache.inv_std[i] * (dxh[k] - mean_dxh - xh[k] * mean_dxh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Mean over the 3×3 neighbourhood of every grid cell (cells outside the
/// grid are skipped, so edge cells average fewer neighbours).
pub fn window_mean(x: &[f64], gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; gh * gw * d];
    for y in 0..gh {
        for xx in 0..gw {
            let dst = (y * gw + xx) * d;
            let mut count = 0usize;
            for ny in y.saturating_sub(1)..=(y + 1).min(gh - 1) {
                for nx in xx.saturating_sub(1)..=(xx + 1).min(gw - 1) {
                    let src = (ny * gw + nx) * d;
                    for k in 0..d {
                        out[dst + k] += x[src + k];
                    }
                    count += 1;
                }
            }
            let inv = 1.0 / count as f64;
            out[dst..dst + d].iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

pub fn window_mean_adjoint(dy: &[f64], gh: usize, gw: usize, d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; gh * gw * d];
    for y in 0..gh {
        for xx in 0..gw {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(gh - 1));
            let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(gw - 1));
            let inv = 1.0 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let src = (y * gw + xx) * d;
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    let dst = (ny * gw + nx) * d;
                    for k in 0..d {
                        dx[dst + k] += dy[src + k] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Linear → LayerNorm → GELU → Linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub ln: LayerNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Vec<f64>,
    h: Vec<f64>,
    ln: LayerNormCache,
    l: Vec<f64>,
    a: Vec<f64>,
    n: usize,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, hidden: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), din, hidden, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dout, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let h = self.fc1.forward(p, x, n);
        let (l, ln) = self.ln.forward(p, &h, n);
        let a: Vec<f64> = l.iter().map(|&v| gelu(v)).collect();
        let y = self.fc2.forward(p, &a, n);
        (
            y,
            MlpCache {
                x: x.to_vec(),
                h,
                ln,
                l,
                a,
                n,
            },
        )
    }

    pub fn backward(&self, p: &ParamStore, cache: &MlpCache, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let n = cache.n;
        let da = self.fc2.backward(p, &cache.a, n, dy, grads);
        let dl: Vec<f64> = da.iter().zip(&cache.l).map(|(g, &v)| g * gelu_grad(v)).collect();
        let dh = self.ln.backward(p, &cache.ln, n, &dl, grads);
        debug_assert_eq!(cache.h.len(), dh.len());
        self.fc1.backward(p, &cache.x, n, &dh, grads)
    }
}
