//! Patch-embedding student with per-teacher adaptor heads.
//!
//! Block `i` maps tokens `x` to
//! `y = x + Linear(WindowMean₃ₓ₃(x))`, `z = y + Linear(GELU(Linear(LN(y))))`.
//! The backbone summary token is the mean of the final patch tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{gelu, gelu_grad, window_mean, window_mean_adjoint, LayerNorm, LayerNormCache, Linear, Mlp, ParamStore};
use crate::error::{invalid, Result};
use crate::fmap::FeatureMap;

fn d_patch() -> usize {
    8
}
fn d_width() -> usize {
    16
}
fn d_depth() -> usize {
    2
}
fn d_hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentConfig {
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_hidden")]
    pub ff_hidden: usize,
    #[serde(default = "d_hidden")]
    pub adaptor_hidden: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            patch: d_patch(),
            width: d_width(),
            depth: d_depth(),
            ff_hidden: d_hidden(),
            adaptor_hidden: d_hidden(),
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.depth == 0 || self.ff_hidden == 0 || self.adaptor_hidden == 0 {
            return invalid("student dimensions must all be positive");
        }
        Ok(())
    }
}

/// Feature-selection request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Output of one block.
    Sparse(usize),
    /// Mean of the outputs of blocks `start..=end`.
    Dense { start: usize, end: usize },
}

#[derive(Debug, Clone)]
struct Block {
    mix: Linear,
    ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct BlockCache {
    mixed: Vec<f64>,
    ln: LayerNormCache,
    normed: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adaptor {
    pub teacher: String,
    pub channels: usize,
    pub patch: Mlp,
    pub summary: Mlp,
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    config: StudentConfig,
    params: ParamStore,
    embed: Linear,
    blocks: Vec<Block>,
    adaptors: Vec<Adaptor>,
}

/// Activations retained for a backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub grid: (usize, usize),
    patches: Vec<f64>,
    /// `outputs[0]` is the embedding, `outputs[i + 1]` the output of block `i`.
    outputs: Vec<Vec<f64>>,
    caches: Vec<BlockCache>,
}

impl Trace {
    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn tokens(&self) -> &[f64] {
        self.outputs.last().expect("embedding is always present")
    }

    pub fn block_output(&self, block: usize) -> &[f64] {
        &self.outputs[block + 1]
    }

    /// Mean over tokens.
    pub fn summary(&self) -> Vec<f64> {
        let n = self.num_tokens();
        let d = self.tokens().len() / n;
        let mut s = vec![0.0; d];
        for t in self.tokens().chunks_exact(d) {
            s.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        }
        s.iter_mut().for_each(|v| *v /= n as f64);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    pub taps: Vec<FeatureMap>,
    pub tokens: FeatureMap,
    pub summary: Vec<f64>,
}

impl StudentModel {
    /// `teachers` lists `(id, channels)` pairs; one adaptor pair per entry.
    pub fn new(config: StudentConfig, teachers: &[(String, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = config.width;
        let embed = Linear::new(&mut params, "embed", config.patch * config.patch * 3, d, &mut rng);
        let blocks = (0..config.depth)
            .map(|i| Block {
                mix: Linear::new(&mut params, &format!("block{i}.mix"), d, d, &mut rng),
                ln: LayerNorm::new(&mut params, &format!("block{i}.ln"), d),
                fc1: Linear::new(&mut params, &format!("block{i}.fc1"), d, config.ff_hidden, &mut rng),
                fc2: Linear::new(&mut params, &format!("block{i}.fc2"), config.ff_hidden, d, &mut rng),
            })
            .collect();
        let mut sorted: Vec<&(String, usize)> = teachers.iter().collect();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0].0 == w[1].0 {
                return invalid(format!("duplicate teacher id {}", w[0].0));
            }
        }
        let adaptors = sorted
            .into_iter()
            .map(|(id, c)| Adaptor {
                teacher: id.clone(),
                channels: *c,
                patch: Mlp::new(&mut params, &format!("{id}.patch"), d, config.adaptor_hidden, *c, &mut rng),
                summary: Mlp::new(&mut params, &format!("{id}.summary"), d, config.adaptor_hidden, *c, &mut rng),
            })
            .collect();
        Ok(Self {
            config,
            params,
            embed,
            blocks,
            adaptors,
        })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        &self.params.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn adaptors(&self) -> &[Adaptor] {
        &self.adaptors
    }

    pub fn adaptor(&self, teacher: &str) -> Result<&Adaptor> {
        match self.adaptors.binary_search_by(|a| a.teacher.as_str().cmp(teacher)) {
            Ok(i) => Ok(&self.adaptors[i]),
            Err(_) => invalid(format!("student has no adaptor for teacher {teacher}")),
        }
    }

    fn patchify(&self, image: &FeatureMap) -> Result<(usize, usize, Vec<f64>)> {
        let p = self.config.patch;
        let (h, w, c) = image.shape();
        if c != 3 {
            return invalid(format!("student input must have 3 channels, got {c}"));
        }
        if h % p != 0 || w % p != 0 {
            return invalid(format!("{h}x{w} image is not divisible by the {p}-pixel patch"));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Vec::with_capacity(h * w * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        out.extend(image.token(y, x).iter().map(|v| v - 0.5));
                    }
                }
            }
        }
        Ok((gh, gw, out))
    }

    pub fn trace(&self, image: &FeatureMap) -> Result<Trace> {
        let (gh, gw, patches) = self.patchify(image)?;
        let n = gh * gw;
        let d = self.config.width;
        let p = &self.params;
        let mut x = self.embed.forward(p, &patches, n);
        let mut outputs = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            outputs.push(x.clone());
            let mixed = window_mean(&x, gh, gw, d);
            let u = b.mix.forward(p, &mixed, n);
            let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + b).collect();
            let (normed, ln) = b.ln.forward(p, &y, n);
            let pre = b.fc1.forward(p, &normed, n);
            let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
            let o = b.fc2.forward(p, &act, n);
            x = y.iter().zip(&o).map(|(a, b)| a + b).collect();
            caches.push(BlockCache {
                mixed,
                ln,
                normed,
                pre,
                act,
            });
        }
        outputs.push(x);
        Ok(Trace {
            grid: (gh, gw),
            patches,
            outputs,
            caches,
        })
    }

    fn tap(&self, trace: &Trace, tap: Tap) -> Result<FeatureMap> {
        let depth = self.blocks.len();
        let (start, end) = match tap {
            Tap::Sparse(i) => (i, i),
            Tap::Dense { start, end } => (start, end),
        };
        if start > end {
            return invalid(format!("empty tap range {start}..={end}"));
        }
        if end >= depth {
            return invalid(format!("tap index {end} out of range for depth {depth}"));
        }
        let mut acc = trace.block_output(start).to_vec();
        for i in start + 1..=end {
            acc.iter_mut().zip(trace.block_output(i)).for_each(|(a, b)| *a += b);
        }
        let k = (end - start + 1) as f64;
        if k > 1.0 {
            acc.iter_mut().for_each(|v| *v /= k);
        }
        FeatureMap::new(trace.grid.0, trace.grid.1, self.config.width, acc)
    }

    pub fn forward(&self, image: &FeatureMap, taps: &[Tap]) -> Result<StudentOutput> {
        let trace = self.trace(image)?;
        let taps = taps.iter().map(|&t| self.tap(&trace, t)).collect::<Result<Vec<_>>>()?;
        Ok(StudentOutput {
            taps,
            tokens: FeatureMap::new(trace.grid.0, trace.grid.1, self.config.width, trace.tokens().to_vec())?,
            summary: trace.summary(),
        })
    }

    /// Final-layer token grid only.
    pub fn tokens(&self, image: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward(image, &[])?.tokens)
    }

    /// Backpropagates a gradient on the final tokens into `grads`.
    pub fn backward(&self, trace: &Trace, d_tokens: &[f64], grads: &mut [f64]) {
        let (gh, gw) = trace.grid;
        let n = gh * gw;
        let d = self.config.width;
        let p = &self.params;
        let mut dz = d_tokens.to_vec();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let c = &trace.caches[i];
            let d_act = b.fc2.backward(p, &c.act, n, &dz, grads);
            let d_pre: Vec<f64> = d_act.iter().zip(&c.pre).map(|(g, &v)| g * gelu_grad(v)).collect();
            let d_normed = b.fc1.backward(p, &c.normed, n, &d_pre, grads);
            let d_y_ln = b.ln.backward(p, &c.ln, n, &d_normed, grads);
            let dy: Vec<f64> = dz.iter().zip(&d_y_ln).map(|(a, b)| a + b).collect();
            let d_mixed = b.mix.backward(p, &c.mixed, n, &dy, grads);
            let dx_mix = window_mean_adjoint(&d_mixed, gh, gw, d);
            dz = dy.iter().zip(&dx_mix).map(|(a, b)| a + b).collect();
        }
        self.embed.backward(p, &trace.patches, n, &dz, grads);
    }
}
