//! Deterministic weight normalization under position-count, position-cap and
//! sector-cap constraints.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum WeightError {
    #[error("infeasible allocation: {0}")]
    Infeasible(String),
    #[error("duplicate symbol {0}")]
    DuplicateSymbol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Caps {
    pub max_weight: f64,
    pub max_sector_share: f64,
    pub min_positions: usize,
    pub max_positions: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            max_weight: 0.10,
            max_sector_share: 0.30,
            min_positions: 15,
            max_positions: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub symbol: String,
    pub weight: f64,
    pub confidence: f64,
    pub sector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weighted {
    pub symbol: String,
    pub weight: f64,
    pub sector: String,
}

const TOL: f64 = 1e-15;
const MAX_ROUNDS: usize = 100_000;

/// Turns proposed weights into a feasible allocation.
///
/// Non-positive proposals are dropped; above `max_positions` the lowest-confidence
/// positions go. Weights are then scaled to sum to one and alternately clipped at the
/// position cap and the sector cap, with any clipped mass handed to the still-unconstrained
/// positions in proportion to their current weight. Output keeps input order.
pub fn normalize(proposals: &[Proposal], caps: &Caps) -> Result<Vec<Weighted>, WeightError> {
    let mut seen = HashSet::new();
    for p in proposals {
        if !seen.insert(p.symbol.as_str()) {
            return Err(WeightError::DuplicateSymbol(p.symbol.clone()));
        }
    }
    let mut kept: Vec<&Proposal> = proposals
        .iter()
        .filter(|p| p.weight.is_finite() && p.weight > 0.0)
        .collect();
    if kept.len() > caps.max_positions {
        let mut ranked = kept.clone();
        ranked.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.symbol.cmp(&b.symbol))
        });
        let survivors: HashSet<&str> = ranked[..caps.max_positions]
            .iter()
            .map(|p| p.symbol.as_str())
            .collect();
        kept.retain(|p| survivors.contains(p.symbol.as_str()));
    }
    if kept.len() < caps.min_positions {
        return Err(WeightError::Infeasible(format!(
            "{} positions with positive weight, need at least {}",
            kept.len(),
            caps.min_positions
        )));
    }
    check_capacity(&kept, caps)?;

    let total: f64 = kept.iter().map(|p| p.weight).sum();
    let mut w: Vec<f64> = kept.iter().map(|p| p.weight / total).collect();
    let sectors: Vec<&str> = kept.iter().map(|p| p.sector.as_str()).collect();

    let mut converged = false;
    for _ in 0..MAX_ROUNDS {
        for x in w.iter_mut() {
            *x = x.min(caps.max_weight);
        }
        let shares = sector_shares(&w, &sectors);
        for (x, s) in w.iter_mut().zip(&sectors) {
            let share = shares[s];
            if share > caps.max_sector_share {
                *x *= caps.max_sector_share / share;
            }
        }
        let deficit = 1.0 - w.iter().sum::<f64>();
        if deficit.abs() <= TOL {
            converged = true;
            break;
        }
        let shares = sector_shares(&w, &sectors);
        let free: Vec<usize> = (0..w.len())
            .filter(|&i| w[i] < caps.max_weight - TOL && shares[sectors[i]] < caps.max_sector_share - TOL)
            .collect();
        let free_mass: f64 = free.iter().map(|&i| w[i]).sum();
        if free.is_empty() || free_mass <= 0.0 {
            return Err(WeightError::Infeasible(format!(
                "{deficit:.3e} of weight cannot be placed under the caps"
            )));
        }
        for &i in &free {
            w[i] += deficit * w[i] / free_mass;
        }
    }
    if !converged {
        return Err(WeightError::Infeasible("weight normalization did not converge".into()));
    }

    // Absorb the last rounding residue in the largest position that has room.
    let residual = 1.0 - w.iter().sum::<f64>();
    if residual != 0.0 {
        let shares = sector_shares(&w, &sectors);
        if let Some(i) = (0..w.len())
            .filter(|&i| {
                w[i] + residual <= caps.max_weight
                    && shares[sectors[i]] + residual <= caps.max_sector_share
            })
            .max_by(|&a, &b| w[a].total_cmp(&w[b]))
        {
            w[i] += residual;
        }
    }

    Ok(kept
        .iter()
        .zip(w)
        .map(|(p, weight)| Weighted {
            symbol: p.symbol.clone(),
            weight,
            sector: p.sector.clone(),
        })
        .collect())
}

fn check_capacity(kept: &[&Proposal], caps: &Caps) -> Result<(), WeightError> {
    let mut per_sector: BTreeMap<&str, usize> = BTreeMap::new();
    for p in kept {
        *per_sector.entry(p.sector.as_str()).or_default() += 1;
    }
    let capacity: f64 = per_sector
        .values()
        .map(|&n| (n as f64 * caps.max_weight).min(caps.max_sector_share))
        .sum();
    if capacity < 1.0 - 1e-12 {
        return Err(WeightError::Infeasible(format!(
            "caps admit at most {capacity:.4} total weight across {} sectors",
            per_sector.len()
        )));
    }
    Ok(())
}

fn sector_shares<'a>(w: &[f64], sectors: &[&'a str]) -> BTreeMap<&'a str, f64> {
    let mut shares = BTreeMap::new();
    for (x, s) in w.iter().zip(sectors) {
        *shares.entry(*s).or_insert(0.0) += x;
    }
    shares
}

/// Largest single weight and largest sector share.
pub fn concentration(weights: &[Weighted]) -> (f64, f64) {
    let max_weight = weights.iter().map(|w| w.weight).fold(0.0, f64::max);
    let mut shares: BTreeMap<&str, f64> = BTreeMap::new();
    for w in weights {
        *shares.entry(w.sector.as_str()).or_default() += w.weight;
    }
    (max_weight, shares.values().copied().fold(0.0, f64::max))
}
