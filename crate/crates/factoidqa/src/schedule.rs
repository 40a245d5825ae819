//! Gradual-unfreezing schedules over layer groups: the task head first, then
//! transformer layers top-down in fixed-size groups, with the embedding block
//! kept permanently frozen; plus the full-fine-tune baseline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerGroup, SpanBackend};

/// One training epoch and the layer groups trainable during it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    /// 1-based epoch ordinal; phase k runs during epoch k.
    pub epoch: usize,
    pub trainable: BTreeSet<LayerGroup>,
}

/// An ordered unfreezing plan: one phase per epoch, trainable sets that only
/// ever grow, the head trainable throughout, and `always_frozen` groups never
/// trainable. Total epochs equal the phase count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnfreezeSchedule {
    pub phases: Vec<Phase>,
    pub always_frozen: BTreeSet<LayerGroup>,
}

impl UnfreezeSchedule {
    /// Head-first gradual unfreezing. Phase 1 trains only the head; each
    /// later phase adds the next `group_size` transformer layers counting
    /// down from layer `num_layers`, so when `num_layers` is not a multiple
    /// of `group_size` the remainder forms the final, bottom group. Total
    /// phases: 1 + ceil(num_layers / group_size). The embedding block is
    /// never unfrozen; `freeze_embedding` only controls whether it is also
    /// pinned in `always_frozen`.
    pub fn gradual_top_down(
        num_layers: usize,
        group_size: usize,
        freeze_embedding: bool,
    ) -> Result<UnfreezeSchedule> {
        if num_layers == 0 {
            return Err(Error::config(
                "gradual_top_down requires at least one transformer layer",
            ));
        }
        if group_size == 0 {
            return Err(Error::config(
                "gradual_top_down requires a positive group size",
            ));
        }
        let mut trainable = BTreeSet::from([LayerGroup::Head]);
        let mut phases = vec![Phase {
            epoch: 1,
            trainable: trainable.clone(),
        }];
        let mut top = num_layers;
        while top > 0 {
            let take = group_size.min(top);
            for layer in top - take + 1..=top {
                trainable.insert(LayerGroup::Transformer(layer));
            }
            top -= take;
            phases.push(Phase {
                epoch: phases.len() + 1,
                trainable: trainable.clone(),
            });
        }
        let mut always_frozen = BTreeSet::new();
        if freeze_embedding {
            always_frozen.insert(LayerGroup::Embedding);
        }
        let schedule = UnfreezeSchedule {
            phases,
            always_frozen,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// The no-unfreezing baseline: `epochs` identical phases training the
    /// head and every transformer layer, plus the embedding block unless
    /// `freeze_embedding`.
    pub fn full_finetune(
        num_layers: usize,
        epochs: usize,
        freeze_embedding: bool,
    ) -> Result<UnfreezeSchedule> {
        if num_layers == 0 {
            return Err(Error::config(
                "full_finetune requires at least one transformer layer",
            ));
        }
        if epochs == 0 {
            return Err(Error::config("full_finetune requires at least one epoch"));
        }
        let mut trainable = BTreeSet::from([LayerGroup::Head]);
        for layer in 1..=num_layers {
            trainable.insert(LayerGroup::Transformer(layer));
        }
        let mut always_frozen = BTreeSet::new();
        if freeze_embedding {
            always_frozen.insert(LayerGroup::Embedding);
        } else {
            trainable.insert(LayerGroup::Embedding);
        }
        let phases = (1..=epochs)
            .map(|epoch| Phase {
                epoch,
                trainable: trainable.clone(),
            })
            .collect();
        let schedule = UnfreezeSchedule {
            phases,
            always_frozen,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Checks the schedule invariants: consecutive 1-based epochs, trainable
    /// sets that never shrink, the head trainable in every phase, and no
    /// overlap with `always_frozen`.
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::validation("a schedule needs at least one phase"));
        }
        let mut previous: Option<&BTreeSet<LayerGroup>> = None;
        for (i, phase) in self.phases.iter().enumerate() {
            if phase.epoch != i + 1 {
                return Err(Error::validation(format!(
                    "phase {} has epoch ordinal {}, expected {}",
                    i,
                    phase.epoch,
                    i + 1
                )));
            }
            if !phase.trainable.contains(&LayerGroup::Head) {
                return Err(Error::validation(format!(
                    "phase {} does not train the head",
                    phase.epoch
                )));
            }
            if let Some(group) = phase.trainable.intersection(&self.always_frozen).next() {
                return Err(Error::validation(format!(
                    "phase {} trains always-frozen group {group}",
                    phase.epoch
                )));
            }
            if let Some(prev) = previous {
                if !prev.is_subset(&phase.trainable) {
                    return Err(Error::validation(format!(
                        "phase {} shrinks the trainable set",
                        phase.epoch
                    )));
                }
            }
            previous = Some(&phase.trainable);
        }
        Ok(())
    }

    /// Total training epochs: one per phase.
    pub fn num_epochs(&self) -> usize {
        self.phases.len()
    }

    /// The phase that runs during `epoch` (1-based).
    pub fn phase_at(&self, epoch: usize) -> Result<&Phase> {
        if epoch == 0 || epoch > self.phases.len() {
            return Err(Error::validation(format!(
                "epoch {epoch} is outside this schedule's 1..={} range",
                self.phases.len()
            )));
        }
        Ok(&self.phases[epoch - 1])
    }
}

/// Marks the phase's groups trainable on the backend and returns the
/// resulting (trainable, total) parameter counts for logging. Re-applying
/// the same phase is idempotent.
pub fn apply(backend: &mut dyn SpanBackend, phase: &Phase) -> Result<(usize, usize)> {
    backend.set_trainable(&phase.trainable)?;
    let groups = backend.parameter_groups();
    let total = groups.values().sum();
    let trainable = groups
        .iter()
        .filter(|(group, _)| phase.trainable.contains(group))
        .map(|(_, count)| count)
        .sum();
    Ok((trainable, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SpanModel};

    fn layers(set: &BTreeSet<LayerGroup>) -> Vec<usize> {
        set.iter()
            .filter_map(|g| match g {
                LayerGroup::Transformer(i) => Some(*i),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn six_layers_in_groups_of_three_is_the_published_plan() {
        let schedule = UnfreezeSchedule::gradual_top_down(6, 3, true).unwrap();
        assert_eq!(schedule.num_epochs(), 3);
        assert_eq!(
            schedule.always_frozen,
            BTreeSet::from([LayerGroup::Embedding])
        );
        assert_eq!(
            schedule.phases[0].trainable,
            BTreeSet::from([LayerGroup::Head])
        );
        assert_eq!(layers(&schedule.phases[1].trainable), vec![4, 5, 6]);
        assert_eq!(
            layers(&schedule.phases[2].trainable),
            vec![1, 2, 3, 4, 5, 6]
        );
        for phase in &schedule.phases {
            assert!(!phase.trainable.contains(&LayerGroup::Embedding));
        }
    }

    #[test]
    fn remainder_layers_form_the_bottom_group() {
        let schedule = UnfreezeSchedule::gradual_top_down(7, 3, true).unwrap();
        assert_eq!(schedule.num_epochs(), 4);
        assert_eq!(layers(&schedule.phases[1].trainable), vec![5, 6, 7]);
        assert_eq!(
            layers(&schedule.phases[2].trainable),
            vec![2, 3, 4, 5, 6, 7]
        );
        assert_eq!(
            layers(&schedule.phases[3].trainable),
            vec![1, 2, 3, 4, 5, 6, 7]
        );
    }

    #[test]
    fn oversized_groups_collapse_to_two_phases() {
        for g in 6..10 {
            let schedule = UnfreezeSchedule::gradual_top_down(6, g, true).unwrap();
            assert_eq!(schedule.num_epochs(), 2, "g={g}");
            assert_eq!(layers(&schedule.phases[1].trainable).len(), 6);
        }
        let twelve = UnfreezeSchedule::gradual_top_down(12, 3, true).unwrap();
        assert_eq!(twelve.num_epochs(), 5);
    }

    #[test]
    fn invariants_hold_across_the_configuration_sweep() {
        for num_layers in 1..=24 {
            for group_size in 1..=8 {
                let schedule =
                    UnfreezeSchedule::gradual_top_down(num_layers, group_size, true).unwrap();
                schedule.validate().unwrap();
                let expected = 1 + num_layers.div_ceil(group_size);
                assert_eq!(
                    schedule.num_epochs(),
                    expected,
                    "L={num_layers} g={group_size}"
                );
                for phase in &schedule.phases {
                    assert!(phase.trainable.contains(&LayerGroup::Head));
                    assert!(!phase.trainable.contains(&LayerGroup::Embedding));
                }
                let last = schedule.phases.last().unwrap();
                assert_eq!(layers(&last.trainable).len(), num_layers);
            }
        }
    }

    #[test]
    fn builders_reject_zero_sizes() {
        assert!(UnfreezeSchedule::gradual_top_down(0, 3, true).is_err());
        assert!(UnfreezeSchedule::gradual_top_down(6, 0, true).is_err());
        assert!(UnfreezeSchedule::full_finetune(0, 3, true).is_err());
        assert!(UnfreezeSchedule::full_finetune(6, 0, true).is_err());
    }

    #[test]
    fn full_finetune_repeats_one_phase() {
        let frozen = UnfreezeSchedule::full_finetune(6, 3, true).unwrap();
        assert_eq!(frozen.num_epochs(), 3);
        for phase in &frozen.phases {
            assert_eq!(phase.trainable, frozen.phases[0].trainable);
            assert!(!phase.trainable.contains(&LayerGroup::Embedding));
        }
        assert!(frozen.always_frozen.contains(&LayerGroup::Embedding));

        let all = UnfreezeSchedule::full_finetune(6, 3, false).unwrap();
        assert!(all.phases[0].trainable.contains(&LayerGroup::Embedding));
        assert_eq!(all.phases[0].trainable.len(), 8);
        assert!(all.always_frozen.is_empty());

        let single = UnfreezeSchedule::full_finetune(6, 1, false).unwrap();
        assert_eq!(single.num_epochs(), 1);
    }

    #[test]
    fn validate_catches_broken_schedules() {
        let good = UnfreezeSchedule::gradual_top_down(4, 2, true).unwrap();

        let mut shrinking = good.clone();
        shrinking.phases[2].trainable = BTreeSet::from([LayerGroup::Head]);
        assert!(shrinking.validate().is_err());

        let mut headless = good.clone();
        headless.phases[0].trainable.clear();
        assert!(headless.validate().is_err());

        let mut thawed = good.clone();
        thawed.phases[1].trainable.insert(LayerGroup::Embedding);
        assert!(thawed.validate().is_err());

        let mut renumbered = good.clone();
        renumbered.phases[1].epoch = 7;
        assert!(renumbered.validate().is_err());

        assert!(UnfreezeSchedule {
            phases: Vec::new(),
            always_frozen: BTreeSet::new(),
        }
        .validate()
        .is_err());
    }

    #[test]
    fn phase_lookup_is_one_based() {
        let schedule = UnfreezeSchedule::gradual_top_down(6, 3, true).unwrap();
        assert_eq!(schedule.phase_at(1).unwrap().trainable.len(), 1);
        assert_eq!(schedule.phase_at(3).unwrap().trainable.len(), 7);
        assert!(schedule.phase_at(0).is_err());
        assert!(schedule.phase_at(4).is_err());
    }

    #[test]
    fn schedules_serialize_with_group_names() {
        let schedule = UnfreezeSchedule::gradual_top_down(2, 1, true).unwrap();
        let json = serde_json::to_string(&schedule).unwrap();
        assert!(json.contains("\"head\""));
        assert!(json.contains("\"layer_2\""));
        assert!(json.contains("\"embedding\""));
        let back: UnfreezeSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, schedule);
    }

    #[test]
    fn apply_reports_group_parameter_counts() {
        let config = ModelConfig {
            vocab_size: 20,
            max_positions: 16,
            hidden: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            segments: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        };
        let counts = config.group_parameter_counts();
        let head_count = counts[&LayerGroup::Head];
        let total: usize = counts.values().sum();

        let mut model = SpanModel::new(config, 7).unwrap();
        let schedule = UnfreezeSchedule::gradual_top_down(2, 1, true).unwrap();

        let (trainable, reported_total) = apply(&mut model, &schedule.phases[0]).unwrap();
        assert_eq!(trainable, head_count);
        assert_eq!(reported_total, total);
        assert_eq!(model.trainable(), schedule.phases[0].trainable);

        let again = apply(&mut model, &schedule.phases[0]).unwrap();
        assert_eq!(again, (trainable, reported_total));

        let (full, _) = apply(&mut model, schedule.phases.last().unwrap()).unwrap();
        assert_eq!(full, total - counts[&LayerGroup::Embedding]);
    }

    #[test]
    fn distilbert_final_phase_matches_the_published_fraction() {
        let config = ModelConfig::distilbert_shaped();
        let counts = config.group_parameter_counts();
        let total: usize = counts.values().sum();
        let schedule = UnfreezeSchedule::gradual_top_down(config.num_layers, 3, true).unwrap();
        let last = schedule.phases.last().unwrap();
        let trainable: usize = counts
            .iter()
            .filter(|(group, _)| last.trainable.contains(group))
            .map(|(_, count)| count)
            .sum();
        let fraction = trainable as f64 / total as f64;
        assert!((0.63..=0.67).contains(&fraction), "fraction {fraction}");
    }

    #[test]
    fn apply_rejects_groups_the_backend_lacks() {
        let config = ModelConfig {
            vocab_size: 20,
            max_positions: 16,
            hidden: 8,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            segments: 2,
            dropout: 0.0,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        };
        let mut model = SpanModel::new(config, 7).unwrap();
        // A schedule built for a deeper model names layers 3 and 4, which
        // this backend does not have.
        let schedule = UnfreezeSchedule::gradual_top_down(4, 2, true).unwrap();
        let err = apply(&mut model, &schedule.phases[1]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
