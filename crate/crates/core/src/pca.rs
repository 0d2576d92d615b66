//! Principal-component projection of a token grid, used for RGB feature
//! visualizations.

use crate::error::{invalid, Result};
use crate::fmap::FeatureMap;
use crate::linalg::{sym_eig, Matrix};

/// Eigenvalues at or below this fraction of the leading one count as absent.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// `H × W × dims`, every channel rescaled to `[0, 1]`; channels without
    /// spread sit at 0.5.
    pub map: FeatureMap,
    /// Unit principal directions in the input channel space, one per output
    /// channel. Missing components are zero vectors.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// True when the token covariance has rank below `dims`; the missing
    /// output channels are zero.
    pub degenerate: bool,
}

/// Token covariance (population) and per-channel mean.
pub fn token_covariance(tokens: &[&[f64]], channels: usize) -> (Vec<f64>, Matrix) {
    let n = tokens.len() as f64;
    let mut mean = vec![0.0; channels];
    for t in tokens {
        for (m, v) in mean.iter_mut().zip(t.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix::zeros(channels, channels);
    let mut centered = vec![0.0; channels];
    for t in tokens {
        for ((d, v), m) in centered.iter_mut().zip(t.iter()).zip(&mean) {
            *d = v - m;
        }
        for i in 0..channels {
            let di = centered[i];
            for j in i..channels {
                cov[(i, j)] += di * centered[j];
            }
        }
    }
    for i in 0..channels {
        for j in i..channels {
            let v = cov[(i, j)] / n;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

pub fn pca_project(map: &FeatureMap, dims: usize) -> Result<PcaProjection> {
    let c = map.channels();
    if dims == 0 || dims > c {
        return invalid(format!("cannot project {c} channels onto {dims} components"));
    }
    if map.num_tokens() < dims {
        return invalid(format!(
            "{} tokens are too few for {dims} components",
            map.num_tokens()
        ));
    }
    let tokens: Vec<&[f64]> = map.tokens().collect();
    let (mean, cov) = token_covariance(&tokens, c);
    let eig = sym_eig(&cov)?;
    let lead = eig.eigenvalues[0].max(0.0);

    let mut components = Vec::with_capacity(dims);
    let mut degenerate = false;
    for k in 0..dims {
        let lambda = eig.eigenvalues[k];
        if lead == 0.0 || lambda <= RANK_TOLERANCE * lead {
            degenerate = true;
            components.push(vec![0.0; c]);
        } else {
            components.push(eig.eigenvectors.column(k));
        }
    }

    let n = tokens.len();
    let mut scores = vec![0.0; n * dims];
    for (i, t) in tokens.iter().enumerate() {
        for (k, u) in components.iter().enumerate() {
            scores[i * dims + k] = t.iter().zip(&mean).zip(u).map(|((x, m), u)| (x - m) * u).sum();
        }
    }
    for k in 0..dims {
        let (lo, hi) = (0..n)
            .map(|i| scores[i * dims + k])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for i in 0..n {
            let s = &mut scores[i * dims + k];
            *s = if span > 0.0 { (*s - lo) / span } else { 0.5 };
        }
    }
    Ok(PcaProjection {
        map: FeatureMap::new(map.height(), map.width(), dims, scores)?,
        components,
        eigenvalues: eig.eigenvalues[..dims].to_vec(),
        degenerate,
    })
}
