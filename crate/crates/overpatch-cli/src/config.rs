//! The experiment configuration file: one JSON document with optional
//! sections for each pipeline stage. Missing sections take the library
//! defaults; a `--seed` flag overrides every stage's seed at once.

use serde::{Deserialize, Serialize};

use overpatch::attack::Phase;
use overpatch::edges::PenaltyWeights;
use overpatch::geodata::FilterRules;
use overpatch::model::{ModelConfig, TrainOptions};
use overpatch::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    /// Target class labels; each admissible sequence is attacked once per
    /// target, skipping pairs where the target equals the true label.
    pub targets: Vec<usize>,
    pub frames_attacked: usize,
    pub patch_elements: usize,
    pub element_size_m: f64,
    pub weights: PenaltyWeights,
    pub phases: Vec<Phase>,
    pub jitter_px: i32,
    /// Cap on the number of admissible sequences attacked (in split order).
    pub max_sequences: Option<usize>,
    /// Which dataset split supplies the sequences: "val" or "train".
    pub split: String,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            targets: vec![1, 4],
            frames_attacked: 1,
            patch_elements: 18,
            element_size_m: 0.5,
            weights: PenaltyWeights::default(),
            phases: vec![
                Phase {
                    epochs: 220,
                    learning_rate: 3.0,
                },
                Phase {
                    epochs: 80,
                    learning_rate: 0.6,
                },
            ],
            jitter_px: 2,
            max_sequences: None,
            split: "val".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub attack: AttackSection,
    pub filter: FilterRules,
}

impl ExperimentConfig {
    /// Propagates one master seed into every stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.synth.master_seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }
}
