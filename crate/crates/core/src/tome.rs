//! One-shot bipartite soft matching over token grids with strided sink
//! layouts.
//!
//! Grid positions on the stride lattice are *targets*; every other position
//! is a *source*. Each source finds its most similar target (cosine
//! similarity of the criterion vectors), the `r` sources with the highest
//! best-affinity are merged into their targets, and the merged value is the
//! unweighted mean of the group. Unmerging broadcasts each survivor back to
//! every position it represents.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::fmap::FeatureMap;

/// Token grids are feature maps indexed as `rows × cols × channels`.
pub type TokenGrid = FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkLayout {
    pub stride_y: usize,
    pub stride_x: usize,
    #[serde(default)]
    pub offset_y: usize,
    #[serde(default)]
    pub offset_x: usize,
}

impl SinkLayout {
    pub fn square(stride: usize) -> Self {
        Self {
            stride_y: stride,
            stride_x: stride,
            offset_y: 0,
            offset_x: 0,
        }
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.stride_y == 0 || self.stride_x == 0 {
            return invalid("sink strides must be positive");
        }
        if self.offset_y >= self.stride_y || self.offset_x >= self.stride_x {
            return invalid("sink offsets must be smaller than the strides");
        }
        if self.offset_y >= rows || self.offset_x >= cols {
            return invalid(format!(
                "sink offset ({}, {}) leaves no targets in a {rows}x{cols} grid",
                self.offset_y, self.offset_x
            ));
        }
        Ok(())
    }

    pub fn is_target(&self, y: usize, x: usize) -> bool {
        y >= self.offset_y
            && x >= self.offset_x
            && (y - self.offset_y).is_multiple_of(self.stride_y)
            && (x - self.offset_x).is_multiple_of(self.stride_x)
    }

    pub fn num_targets(&self, rows: usize, cols: usize) -> usize {
        if self.offset_y >= rows || self.offset_x >= cols {
            return 0;
        }
        (rows - self.offset_y).div_ceil(self.stride_y) * (cols - self.offset_x).div_ceil(self.stride_x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePlan {
    pub rows: usize,
    pub cols: usize,
    pub layout: SinkLayout,
    pub r: usize,
    /// Per grid position (raster order): the target position a merged source
    /// collapses into, or `None` for targets and unmerged sources.
    pub assignment: Vec<Option<usize>>,
    /// Surviving positions in raster order.
    pub kept_order: Vec<usize>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Builds a merge plan for `tokens`, matching on `criterion` when given
/// (e.g. attention keys; it must share the grid extents but may have a
/// different channel count) or on the token values otherwise.
pub fn plan(
    tokens: &TokenGrid,
    criterion: Option<&TokenGrid>,
    layout: SinkLayout,
    r: usize,
) -> Result<MergePlan> {
    let (rows, cols) = (tokens.height(), tokens.width());
    let criterion = criterion.unwrap_or(tokens);
    if (criterion.height(), criterion.width()) != (rows, cols) {
        return shape_err(format!(
            "criterion grid {}x{} does not match tokens {rows}x{cols}",
            criterion.height(),
            criterion.width()
        ));
    }
    layout.validate(rows, cols)?;

    let n = rows * cols;
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for p in 0..n {
        if layout.is_target(p / cols, p % cols) {
            targets.push(p);
        } else {
            sources.push(p);
        }
    }
    if r > sources.len() {
        return invalid(format!(
            "r = {r} exceeds the {} available sources; use a denser sink layout",
            sources.len()
        ));
    }

    let token = |p: usize| criterion.token(p / cols, p % cols);
    // (best affinity, source position, best target position)
    let mut best: Vec<(f64, usize, usize)> = sources
        .iter()
        .map(|&s| {
            let src = token(s);
            let mut arg = targets[0];
            let mut aff = f64::NEG_INFINITY;
            for &t in &targets {
                let a = cosine(src, token(t));
                if a > aff {
                    aff = a;
                    arg = t;
                }
            }
            (aff, s, arg)
        })
        .collect();
    best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut assignment = vec![None; n];
    for &(_, s, t) in best.iter().take(r) {
        assignment[s] = Some(t);
    }
    let kept_order = (0..n).filter(|&p| assignment[p].is_none()).collect();
    Ok(MergePlan {
        rows,
        cols,
        layout,
        r,
        assignment,
        kept_order,
    })
}

impl MergePlan {
    /// The identity plan: nothing merged.
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            layout: SinkLayout::square(1),
            r: 0,
            assignment: vec![None; rows * cols],
            kept_order: (0..rows * cols).collect(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn survivors(&self) -> usize {
        self.kept_order.len()
    }

    /// Index into the compressed token list that represents grid position `p`.
    pub fn representative_slots(&self) -> Vec<usize> {
        let mut slot_of = vec![usize::MAX; self.num_tokens()];
        for (slot, &p) in self.kept_order.iter().enumerate() {
            slot_of[p] = slot;
        }
        (0..self.num_tokens())
            .map(|p| match self.assignment[p] {
                Some(t) => slot_of[t],
                None => slot_of[p],
            })
            .collect()
    }

    /// Checks structural invariants, e.g. after loading a plan from JSON.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_tokens();
        self.layout.validate(self.rows, self.cols)?;
        if self.assignment.len() != n {
            return shape_err("assignment length differs from grid size");
        }
        let merged = self.assignment.iter().filter(|a| a.is_some()).count();
        if merged != self.r {
            return invalid(format!("plan lists {merged} merged sources but r = {}", self.r));
        }
        for (p, a) in self.assignment.iter().enumerate() {
            if let Some(t) = *a {
                if t >= n || !self.layout.is_target(t / self.cols, t % self.cols) {
                    return invalid(format!("position {p} merges into non-target {t}"));
                }
                if self.layout.is_target(p / self.cols, p % self.cols) {
                    return invalid(format!("target {p} is assigned as a source"));
                }
            }
        }
        let expected: Vec<usize> = (0..n).filter(|&p| self.assignment[p].is_none()).collect();
        if expected != self.kept_order {
            return invalid("kept_order does not list the survivors in raster order");
        }
        Ok(())
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if (grid.height(), grid.width()) != (self.rows, self.cols) {
            return shape_err(format!(
                "plan is for a {}x{} grid, got {}x{}",
                self.rows,
                self.cols,
                grid.height(),
                grid.width()
            ));
        }
        Ok(())
    }
}

/// Survivor tokens as a `1 × M × C` map, plus how many original tokens each
/// one stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub tokens: FeatureMap,
    pub counts: Vec<usize>,
}

pub fn merge(tokens: &TokenGrid, plan: &MergePlan) -> Result<Compressed> {
    plan.check_grid(tokens)?;
    let c = tokens.channels();
    let m = plan.survivors();
    let slots = plan.representative_slots();
    // Deviations are accumulated relative to each group's first member so
    // that groups of identical tokens average to that token exactly.
    let mut base = vec![0.0; m * c];
    let mut dev = vec![0.0; m * c];
    let mut counts = vec![0usize; m];
    for (p, (tok, &slot)) in tokens.tokens().zip(&slots).enumerate() {
        debug_assert!(slot < m, "position {p} has no representative");
        let range = slot * c..(slot + 1) * c;
        if counts[slot] == 0 {
            base[range.clone()].copy_from_slice(tok);
        }
        counts[slot] += 1;
        for ((d, b), v) in dev[range.clone()].iter_mut().zip(&base[range]).zip(tok) {
            *d += v - b;
        }
    }
    let mut sums = base;
    for (slot, &k) in counts.iter().enumerate() {
        let inv = 1.0 / k as f64;
        for (s, d) in sums[slot * c..(slot + 1) * c].iter_mut().zip(&dev[slot * c..(slot + 1) * c]) {
            *s += d * inv;
        }
    }
    Ok(Compressed {
        tokens: FeatureMap::new(1, m, c, sums)?,
        counts,
    })
}

/// Broadcasts compressed tokens (a `1 × M × C` map) back onto the grid.
pub fn unmerge(compressed: &FeatureMap, plan: &MergePlan) -> Result<TokenGrid> {
    if compressed.num_tokens() != plan.survivors() {
        return shape_err(format!(
            "plan keeps {} tokens, compressed list has {}",
            plan.survivors(),
            compressed.num_tokens()
        ));
    }
    let list: Vec<&[f64]> = compressed.tokens().collect();
    let data: Vec<f64> = plan
        .representative_slots()
        .into_iter()
        .flat_map(|slot| list[slot].iter().copied())
        .collect();
    FeatureMap::new(plan.rows, plan.cols, compressed.channels(), data)
}

/// `Σ‖x − x̂‖² / Σ‖x − μ‖²` after a merge/unmerge round trip: 0 is a perfect
/// reconstruction, 1 is no better than predicting the mean token.
pub fn reconstruction_error(original: &TokenGrid, plan: &MergePlan) -> Result<f64> {
    let rebuilt = unmerge(&merge(original, plan)?.tokens, plan)?;
    let sse = original.mse(&rebuilt)?;
    let total_var = original.channel_stats().total_variance() / original.channels() as f64;
    if total_var == 0.0 {
        return Ok(if sse == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(sse / total_var)
}

/// Smallest square stride whose sink lattice fits inside `out_tokens`
/// survivors, and the merge count that lands exactly on the budget.
pub fn stride_for_budget(rows: usize, cols: usize, out_tokens: usize) -> Result<(SinkLayout, usize)> {
    let n = rows * cols;
    if n == 0 {
        return invalid("empty grid");
    }
    if out_tokens == 0 || out_tokens > n {
        return invalid(format!("token budget {out_tokens} must lie in 1..={n}"));
    }
    let stride = (1..=rows.max(cols))
        .find(|&s| SinkLayout::square(s).num_targets(rows, cols) <= out_tokens)
        .expect("the coarsest stride leaves a single target");
    Ok((SinkLayout::square(stride), n - out_tokens))
}
