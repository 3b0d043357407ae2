//! Simulated secure aggregation: pairwise cancelling pseudorandom masks
//! over a participant group. The construction is deliberately trivial
//! cryptographically; what matters to the protocol and to the evasion
//! attack is the observable interface, namely that a group member learns
//! only the sum of the surviving participants' inputs.

use super::ProtocolError;
use crate::numkit::{ParamVec, StreamRng};
use std::collections::{BTreeMap, BTreeSet};

/// One aggregation group: who participates, who dropped out before the
/// aggregate was opened, and the minimum number of survivors the protocol
/// will tolerate.
#[derive(Clone, Debug)]
pub struct SAGroup {
    pub participants: Vec<usize>,
    pub dropout: BTreeSet<usize>,
    pub threshold: usize,
}

impl SAGroup {
    pub fn new(participants: Vec<usize>, threshold: usize) -> Self {
        Self {
            participants,
            dropout: BTreeSet::new(),
            threshold,
        }
    }

    pub fn survivors(&self) -> Vec<usize> {
        self.participants
            .iter()
            .copied()
            .filter(|p| !self.dropout.contains(p))
            .collect()
    }
}

/// Masked shares plus their sum, for inspection by tests and by the
/// engine's observation surface.
#[derive(Clone, Debug)]
pub struct SaRound {
    pub masked_shares: BTreeMap<usize, ParamVec>,
    pub sum: ParamVec,
}

const MASK_SCALE: f64 = 1.0e3;

/// Run one masked-sum round. Masks are drawn pairwise in sorted
/// participant order, added on the lower id and subtracted on the higher,
/// so the mask contributions over survivors cancel identically.
pub fn sa_round(
    group: &SAGroup,
    inputs: &BTreeMap<usize, ParamVec>,
    rng: &mut StreamRng,
) -> Result<SaRound, ProtocolError> {
    let survivors = group.survivors();
    if survivors.len() < group.threshold {
        return Err(ProtocolError::SaThreshold {
            surviving: survivors.len(),
            threshold: group.threshold,
        });
    }
    let mut len = None;
    for &p in &survivors {
        let input = inputs
            .get(&p)
            .ok_or(ProtocolError::SaMissingInput { participant: p })?;
        match len {
            None => len = Some(input.len()),
            Some(l) if l != input.len() => {
                return Err(ProtocolError::Mismatch(format!(
                    "secure aggregation input lengths differ: {l} vs {}",
                    input.len()
                )));
            }
            _ => {}
        }
    }
    let len = len.ok_or(ProtocolError::Mismatch("empty aggregation group".into()))?;

    let mut shares: BTreeMap<usize, Vec<f64>> = survivors
        .iter()
        .map(|&p| (p, inputs[&p].as_slice().to_vec()))
        .collect();
    for (i, &a) in survivors.iter().enumerate() {
        for &b in &survivors[i + 1..] {
            for coord in 0..len {
                let mask = rng.range_f64(-MASK_SCALE, MASK_SCALE);
                shares.get_mut(&a).unwrap()[coord] += mask;
                shares.get_mut(&b).unwrap()[coord] -= mask;
            }
        }
    }

    let mut sum = vec![0.0; len];
    for share in shares.values() {
        for (acc, v) in sum.iter_mut().zip(share) {
            *acc += v;
        }
    }
    let masked_shares = shares
        .into_iter()
        .map(|(p, s)| Ok((p, ParamVec::from_values(s)?)))
        .collect::<Result<BTreeMap<_, _>, ProtocolError>>()?;
    Ok(SaRound {
        masked_shares,
        sum: ParamVec::from_values(sum)?,
    })
}

/// The exact sum over surviving participants, computed through the masked
/// path. Individual inputs are never exposed.
pub fn secure_aggregate(
    group: &SAGroup,
    inputs: &BTreeMap<usize, ParamVec>,
    rng: &mut StreamRng,
) -> Result<ParamVec, ProtocolError> {
    sa_round(group, inputs, rng).map(|r| r.sum)
}
