//! Parameter-free visual token pruning by connectivity score.
//!
//! Each visual token gets `alpha_i = sigmoid(sum_j z_i . z_j / (N tau))` over the
//! L2-normalised last-block embeddings `z`, self term included. The `k`
//! highest-scoring tokens survive; ties go to the lower index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanomodel::kernels::dot as kernels_dot;
use crate::nanomodel::{LastOutput, Model, ModelInput, Slot};

const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retain {
    Count(usize),
    /// Fraction of visual tokens kept, rounded up, at least one.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub temperature: f64,
    pub retain: Retain,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            temperature: 1.0,
            retain: Retain::Fraction(1.0),
        }
    }
}

impl PruneConfig {
    pub fn fraction(f: f64) -> Self {
        PruneConfig {
            retain: Retain::Fraction(f),
            ..PruneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if let Retain::Fraction(f) = self.retain {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("retain fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Number of tokens kept out of `n`.
    pub fn k_for(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let k = match self.retain {
            Retain::Count(k) => k,
            Retain::Fraction(f) => ((f * n as f64).ceil() as usize).max(1),
        };
        if k == 0 || k > n {
            return Err(Error::config(format!("retain_k {k} outside 1..={n}")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub scores: Vec<f64>,
    /// Ascending.
    pub retained: Vec<usize>,
    /// Ascending.
    pub dropped: Vec<usize>,
}

impl PruneReport {
    pub fn retained_fraction(&self) -> f64 {
        self.retained.len() as f64 / self.scores.len() as f64
    }

    pub fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_normalised(z: &[Vec<f64>]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::data("no visual embeddings to score"));
    }
    for (i, v) in z.iter().enumerate() {
        let norm = kernels_dot(v, v).sqrt();
        if (norm - 1.0).abs() > NORM_TOL || v.len() != z[0].len() {
            return Err(Error::data(format!("embedding {i} is not unit length (norm {norm})")));
        }
    }
    Ok(())
}

/// `(1/N) sum_j z_i . z_j` for each `i`.
pub fn mean_similarity(z: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_normalised(z)?;
    let n = z.len();
    // sum_j z_i . z_j = z_i . (sum_j z_j)
    let mut total = vec![0.0; z[0].len()];
    for v in z {
        for (t, x) in total.iter_mut().zip(v) {
            *t += x;
        }
    }
    Ok(z.iter().map(|v| kernels_dot(v, &total) / n as f64).collect())
}

pub fn connectivity_scores(z: &[Vec<f64>], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(mean_similarity(z)?.into_iter().map(|s| sigmoid(s / temperature)).collect())
}

pub fn top_k_retain(scores: &[f64], cfg: &PruneConfig) -> Result<PruneReport> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::data(format!("score {i} is not finite")));
    }
    let n = scores.len();
    let k = cfg.k_for(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut retained = order[..k].to_vec();
    let mut dropped = order[k..].to_vec();
    retained.sort_unstable();
    dropped.sort_unstable();
    Ok(PruneReport {
        scores: scores.to_vec(),
        retained,
        dropped,
    })
}

/// Removes the dropped visual slots. Indices in `report` count visual slots in
/// sequence order; everything else, including position ids, is kept.
pub fn apply_pruning(input: &ModelInput, report: &PruneReport) -> Result<ModelInput> {
    let n_vis = input.n_visual();
    if let Some(&bad) = report.retained.iter().find(|&&i| i >= n_vis) {
        return Err(Error::data(format!("retained index {bad} out of range for {n_vis} visual tokens")));
    }
    let mut keep = vec![false; n_vis];
    for &i in &report.retained {
        keep[i] = true;
    }
    let mut out = ModelInput {
        slots: Vec::with_capacity(input.len()),
        positions: Vec::with_capacity(input.len()),
        patches: input.patches.clone(),
    };
    let mut v = 0;
    for (&s, &p) in input.slots.iter().zip(&input.positions) {
        if let Slot::Patch(_) = s {
            v += 1;
            if !keep[v - 1] {
                continue;
            }
        }
        out.slots.push(s);
        out.positions.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PrunedDecision {
    pub output: LastOutput,
    pub report: PruneReport,
    pub reduced: ModelInput,
}

/// Scores the visual tokens with a full pass, then reruns on the survivors.
pub fn pruned_forward(model: &Model, input: &ModelInput, cfg: &PruneConfig) -> Result<PrunedDecision> {
    let full = model.forward_last(input)?;
    let scores = connectivity_scores(&full.visual_embeddings, cfg.temperature)?;
    let report = top_k_retain(&scores, cfg)?;
    let reduced = apply_pruning(input, &report)?;
    let output = model.forward_last(&reduced)?;
    Ok(PrunedDecision { output, report, reduced })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn single_token() {
        let a = connectivity_scores(&[unit(vec![0.3, -0.2, 0.9])], 1.0).unwrap();
        assert!((a[0] - 0.731_058_578_6).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_pair() {
        let a = connectivity_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        for x in a {
            assert!((x - 0.622_459_331_2).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let err = connectivity_scores(&[vec![1.0, 0.0], vec![2.0, 0.0]], 1.0).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("embedding 1")));
        assert!(matches!(connectivity_scores(&[vec![1.0]], 0.0), Err(Error::Config(_))));
        assert!(matches!(top_k_retain(&[0.5; 4], &PruneConfig { temperature: 1.0, retain: Retain::Count(5) }), Err(Error::Config(_))));
        assert!(matches!(top_k_retain(&[0.5; 4], &PruneConfig { temperature: 1.0, retain: Retain::Count(0) }), Err(Error::Config(_))));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let cfg = PruneConfig { temperature: 1.0, retain: Retain::Count(3) };
        let r = top_k_retain(&[0.5; 8], &cfg).unwrap();
        assert_eq!(r.retained, vec![0, 1, 2]);
        assert_eq!(r.dropped, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn k_equals_n_keeps_all() {
        let r = top_k_retain(&[0.1, 0.9, 0.4], &PruneConfig::fraction(1.0)).unwrap();
        assert_eq!(r.retained, vec![0, 1, 2]);
        assert!(r.dropped.is_empty());
    }

    #[test]
    fn fraction_rounds_up() {
        assert_eq!(PruneConfig::fraction(0.25).k_for(64).unwrap(), 16);
        assert_eq!(PruneConfig::fraction(0.25).k_for(3).unwrap(), 1);
        assert!(PruneConfig::fraction(1.5).k_for(3).is_err());
    }

    #[test]
    fn apply_keeps_positions() {
        let input = ModelInput {
            slots: vec![Slot::Token(3), Slot::Patch(0), Slot::Patch(1), Slot::Patch(2), Slot::Token(2)],
            positions: vec![0, 1, 2, 3, 4],
            patches: vec![0.0; 3],
        };
        let report = PruneReport { scores: vec![0.9, 0.1, 0.8], retained: vec![0, 2], dropped: vec![1] };
        let out = apply_pruning(&input, &report).unwrap();
        assert_eq!(out.slots, vec![Slot::Token(3), Slot::Patch(0), Slot::Patch(2), Slot::Token(2)]);
        assert_eq!(out.positions, vec![0, 1, 3, 4]);
        let bad = PruneReport { retained: vec![3], ..report };
        assert!(matches!(apply_pruning(&input, &bad), Err(Error::Data(_))));
    }
}
