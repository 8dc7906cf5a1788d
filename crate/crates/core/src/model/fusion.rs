use super::config::FusionMode;
use crate::error::{Error, Result};

/// Modality subsets fed to each encoder, in encoder order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub encoder_inputs: Vec<Vec<usize>>,
}

impl FusionSpec {
    pub fn num_encoders(&self) -> usize {
        self.encoder_inputs.len()
    }
}

/// Encoder composition for `mode` over `n` modalities (0-based indices).
///
/// Hybrid modes put the all-modality encoder first, followed by one encoder per
/// modality: the singleton for `Hybrid`, the set excluding it for `HybridStar`.
pub fn make_fusion_spec(mode: &FusionMode, n: usize) -> Result<FusionSpec> {
    if n == 0 {
        return Err(Error::Config("fusion needs at least one modality".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let encoder_inputs = match mode {
        FusionMode::Early => vec![all],
        FusionMode::Middle => (0..n).map(|m| vec![m]).collect(),
        FusionMode::Hybrid => std::iter::once(all)
            .chain((0..n).map(|m| vec![m]))
            .collect(),
        FusionMode::HybridStar => {
            if n < 2 {
                return Err(Error::Config(
                    "hybrid_star needs at least two modalities".into(),
                ));
            }
            std::iter::once(all.clone())
                .chain((0..n).map(|skip| all.iter().copied().filter(|&m| m != skip).collect()))
                .collect()
        }
        FusionMode::Custom(sets) => {
            if sets.is_empty() {
                return Err(Error::Config(
                    "custom fusion needs at least one encoder".into(),
                ));
            }
            for set in sets {
                if set.is_empty() {
                    return Err(Error::Config(
                        "custom fusion has an empty encoder input".into(),
                    ));
                }
                if let Some(&bad) = set.iter().find(|&&m| m >= n) {
                    return Err(Error::Config(format!(
                        "modality index {bad} out of range for {n} modalities"
                    )));
                }
                let mut sorted = set.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != set.len() {
                    return Err(Error::Config(format!(
                        "duplicate modality in encoder input {set:?}"
                    )));
                }
            }
            sets.clone()
        }
    };
    Ok(FusionSpec { encoder_inputs })
}
