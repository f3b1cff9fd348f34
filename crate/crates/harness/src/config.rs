use std::path::{Path, PathBuf};

use mtrlab_core::attacks::{AttackConfig, AttackKind, AttackObjective, Steps};
use mtrlab_core::data::{toy_task_spec, SceneParams};
use mtrlab_core::nn::{ModelConfig, SgdConfig};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GenData,
    Train,
    AttackEval,
    VulnScan,
    SubsampleCurve,
    TheoryCheck,
    Advtrain,
    #[serde(alias = "attack-matrix")]
    Sweep,
    Report,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::GenData => "gen-data",
            ExperimentKind::Train => "train",
            ExperimentKind::AttackEval => "attack-eval",
            ExperimentKind::VulnScan => "vuln-scan",
            ExperimentKind::SubsampleCurve => "subsample-curve",
            ExperimentKind::TheoryCheck => "theory-check",
            ExperimentKind::Advtrain => "advtrain",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Report => "report",
        }
    }
}

/// One JSON document describing a run. Every section has defaults so a
/// config only names what it changes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelSection,
    /// Trained tasks and their loss weights λ, in head order.
    pub tasks: Vec<TaskWeight>,
    pub training: TrainingSection,
    pub attacks: Vec<AttackSection>,
    pub attack_objective: ObjectiveSection,
    /// Tasks scored by attack evaluation; defaults to the trained tasks.
    pub score_tasks: Vec<String>,
    /// Existing MTCK checkpoint to evaluate instead of training.
    pub checkpoint: Option<PathBuf>,
    pub theory: TheorySection,
    pub subsample: SubsampleSection,
    pub vuln: VulnSection,
    pub matrix: MatrixSection,
    pub advtrain: AdvTrainSection,
    pub report: ReportSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            model: ModelSection::default(),
            tasks: vec![TaskWeight {
                name: "seg".into(),
                weight: 1.0,
            }],
            training: TrainingSection::default(),
            attacks: vec![AttackSection::default()],
            attack_objective: ObjectiveSection::default(),
            score_tasks: Vec::new(),
            checkpoint: None,
            theory: TheorySection::default(),
            subsample: SubsampleSection::default(),
            vuln: VulnSection::default(),
            matrix: MatrixSection::default(),
            advtrain: AdvTrainSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise: f64,
    pub correlated: bool,
    /// Read these MTDS files instead of generating scenes.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Test examples used by evaluations (all when absent).
    pub eval_examples: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = SceneParams::default();
        Self {
            train_size: 256,
            test_size: 64,
            height: p.height,
            width: p.width,
            classes: p.classes,
            noise: p.noise,
            correlated: p.correlated,
            train_path: None,
            test_path: None,
            eval_examples: None,
        }
    }
}

impl DataConfig {
    pub fn scene_params(&self) -> SceneParams {
        SceneParams {
            height: self.height,
            width: self.width,
            classes: self.classes,
            noise: self.noise,
            correlated: self.correlated,
            ..SceneParams::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub head_width: usize,
    pub head_depth: usize,
    /// Heads built on the model; defaults to every toy task so that
    /// models differing only in their loss weights share an initialization.
    pub heads: Vec<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            trunk_width: 8,
            trunk_depth: 3,
            head_width: 8,
            head_depth: 2,
            heads: mtrlab_core::data::TOY_TASKS.iter().map(|t| t.to_string()).collect(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, params: &SceneParams, seed: u64) -> Result<ModelConfig, HarnessError> {
        let tasks = self
            .heads
            .iter()
            .map(|h| toy_task_spec(h, params).map(|s| s.with_head_depth(self.head_depth)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(ModelConfig {
            input_shape: [1, params.height, params.width],
            trunk_width: self.trunk_width,
            trunk_depth: self.trunk_depth,
            head_width: self.head_width,
            tasks,
            seed,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let s = SgdConfig::default();
        Self {
            epochs: 20,
            batch_size: 16,
            lr: s.lr,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
        }
    }
}

impl TrainingSection {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_drops: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepsSpec {
    Fixed(usize),
    Named(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kind: String,
    pub epsilon: f64,
    pub steps: StepsSpec,
    pub step_size: f64,
    pub random_start: Option<bool>,
    pub momentum: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: "pgd".into(),
            epsilon: 4.0,
            steps: StepsSpec::Named("auto".into()),
            step_size: 1.0,
            random_start: None,
            momentum: 1.0,
        }
    }
}

impl AttackSection {
    pub fn to_config(&self, seed: u64) -> Result<AttackConfig, HarnessError> {
        let kind = AttackKind::parse(&self.kind).map_err(|e| HarnessError::Config(e.to_string()))?;
        let steps = match &self.steps {
            StepsSpec::Fixed(n) => Steps::Fixed(*n),
            StepsSpec::Named(s) if s == "auto" => Steps::Auto,
            StepsSpec::Named(s) => return Err(HarnessError::Config(format!("steps must be an integer or \"auto\", got {s:?}"))),
        };
        let base = AttackConfig::new(kind, self.epsilon);
        let cfg = AttackConfig {
            steps,
            step_size: self.step_size,
            random_start: self.random_start.unwrap_or(base.random_start),
            momentum: self.momentum,
            seed,
            ..base
        };
        cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if kind != AttackKind::Fgsm && cfg.epsilon > 0.0 {
            cfg.resolved_steps().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(cfg)
    }
}

/// `{"single": "seg"}` or `{"multi": [{"name": .., "weight": ..}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ObjectiveSection {
    Single(String),
    Multi(Vec<TaskWeight>),
    /// Single-task attack on the first trained task.
    Main,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection::Main
    }
}

impl ObjectiveSection {
    pub fn resolve(&self, trained: &[TaskWeight]) -> Result<AttackObjective, HarnessError> {
        Ok(match self {
            ObjectiveSection::Single(t) => AttackObjective::SingleTask(t.clone()),
            ObjectiveSection::Multi(w) => AttackObjective::MultiTask(w.iter().map(|t| (t.name.clone(), t.weight)).collect()),
            ObjectiveSection::Main => AttackObjective::SingleTask(
                trained
                    .first()
                    .ok_or_else(|| HarnessError::Config("no tasks configured".into()))?
                    .name
                    .clone(),
            ),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub dim: usize,
    pub samples: usize,
    pub variance: f64,
    pub task_counts: Vec<usize>,
    pub rhos: Vec<f64>,
    /// Maximum allowed relative error before exit code 4.
    pub tolerance: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            dim: 100,
            samples: 10_000,
            variance: 1.0,
            task_counts: vec![1, 2, 4, 8, 16],
            rhos: vec![0.0, 0.25, 0.5, 1.0],
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsampleSection {
    pub task: String,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub examples: usize,
    /// Also attack the k-pixel loss and score the full task.
    pub attacked_metric: bool,
}

impl Default for SubsampleSection {
    fn default() -> Self {
        Self {
            task: "seg".into(),
            ks: vec![1, 4, 16, 64, 256, 1024],
            repeats: 20,
            examples: 16,
            attacked_metric: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VulnSection {
    /// Models are trained on the first `M` of these tasks for each `M`.
    pub tasks: Vec<String>,
    pub task_counts: Vec<usize>,
    pub examples: usize,
}

impl Default for VulnSection {
    fn default() -> Self {
        Self {
            tasks: mtrlab_core::data::TOY_TASKS.iter().map(|t| t.to_string()).collect(),
            task_counts: vec![1, 2, 3, 4, 5],
            examples: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixSection {
    pub tasks: Vec<String>,
    pub lambdas: Vec<f64>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            tasks: mtrlab_core::data::TOY_TASKS.iter().map(|t| t.to_string()).collect(),
            lambdas: vec![0.1, 0.01],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvTrainSection {
    pub main: String,
    pub auxiliary: Vec<String>,
    pub lambda_a: f64,
    /// Training-time PGD.
    pub attack: AttackSection,
    /// ε of the PGD50/PGD100/MIM100 evaluation suite.
    pub eval_epsilon: f64,
}

impl Default for AdvTrainSection {
    fn default() -> Self {
        Self {
            main: "seg".into(),
            auxiliary: vec!["depth".into()],
            lambda_a: 0.01,
            attack: AttackSection::default(),
            eval_epsilon: 4.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Run directories whose manifests are collated.
    pub inputs: Vec<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn weights(&self) -> Vec<(String, f64)> {
        self.tasks.iter().map(|t| (t.name.clone(), t.weight)).collect()
    }

    /// Task names to score: `score_tasks`, or the trained tasks.
    pub fn scored(&self) -> Vec<String> {
        if self.score_tasks.is_empty() {
            self.tasks.iter().map(|t| t.name.clone()).collect()
        } else {
            self.score_tasks.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.data.scene_params().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return bad("data sizes must be >= 1".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        for t in &self.tasks {
            if !(t.weight >= 0.0) {
                return bad(format!("task `{}` has negative weight", t.name));
            }
            if !self.model.heads.contains(&t.name) {
                return bad(format!("task `{}` has no head in model.heads", t.name));
            }
        }
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return bad("training.epochs and training.batch_size must be >= 1".into());
        }
        for a in &self.attacks {
            a.to_config(0)?;
        }
        Ok(())
    }
}
