//! Derives a model architecture and training DAG from a dataset descriptor.
//!
//! Only specifications come out of here: shapes, a backbone/head pairing and
//! the operator graph. Training cost and progress are left to the cluster
//! training profiles.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app_model::{ModelClass, OperatorKind, OperatorSpec, TrainingApp};

/// Sample count at which a dataset is big enough for a heavy backbone.
pub const HEAVY_THRESHOLD: u64 = 10_000;

/// Single-scale detection layout: grid cells per side and anchors per cell.
pub const DETECTION_GRID: u32 = 13;
pub const DETECTION_ANCHORS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleType {
    Image { h: u32, w: u32, channels: u32 },
    LidarPoints { dims: u32 },
    GpsSequence { len: u32, features: u32 },
    LogTrace { len: u32, features: u32 },
}

impl SampleType {
    pub fn name(&self) -> &'static str {
        match self {
            SampleType::Image { .. } => "image",
            SampleType::LidarPoints { .. } => "lidar_points",
            SampleType::GpsSequence { .. } => "gps_sequence",
            SampleType::LogTrace { .. } => "log_trace",
        }
    }

    fn is_sequence(&self) -> bool {
        matches!(
            self,
            SampleType::GpsSequence { .. } | SampleType::LogTrace { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelType {
    ClassLabel { n_classes: u32 },
    Bbox2d { n_classes: u32 },
    SegmentationMask { n_classes: u32 },
    SequenceLabel { n_classes: u32 },
}

impl LabelType {
    pub fn name(&self) -> &'static str {
        match self {
            LabelType::ClassLabel { .. } => "class_label",
            LabelType::Bbox2d { .. } => "bbox2d",
            LabelType::SegmentationMask { .. } => "segmentation_mask",
            LabelType::SequenceLabel { .. } => "sequence_label",
        }
    }

    fn n_classes(&self) -> u32 {
        match *self {
            LabelType::ClassLabel { n_classes }
            | LabelType::Bbox2d { n_classes }
            | LabelType::SegmentationMask { n_classes }
            | LabelType::SequenceLabel { n_classes } => n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub shard: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDescriptor {
    pub sample_type: SampleType,
    pub label_type: LabelType,
    pub n_samples: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive_dataset: Option<String>,
    #[serde(default)]
    pub partitions: Vec<Partition>,
    /// Overrides [`HEAVY_THRESHOLD`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heavy_threshold: Option<u64>,
}

impl DataDescriptor {
    pub fn capacity(&self) -> CapacityClass {
        capacity_class_with(
            self.n_samples,
            self.heavy_threshold.unwrap_or(HEAVY_THRESHOLD),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityClass {
    Light,
    Heavy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    VGG16,
    MobileNetV2,
    Darknet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    YoloV3,
    YoloV4,
    YoloV5,
    RetinaNet,
    SSD,
    SoftmaxClassifier,
    LSTMSequence,
}

/// Detection heads, most recent first.
const DETECTION_HEADS: [Head; 5] = [
    Head::YoloV5,
    Head::YoloV4,
    Head::YoloV3,
    Head::RetinaNet,
    Head::SSD,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<u32>,
    pub output_shape: Vec<u32>,
    /// `None` for recurrent models over sequences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<Backbone>,
    pub head: Head,
    pub capacity_class: CapacityClass,
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let backbone = self
            .backbone
            .map_or("none".to_string(), |b| format!("{b:?}"));
        write!(
            f,
            "{backbone}+{:?} ({:?}) in={:?} out={:?}",
            self.head, self.capacity_class, self.input_shape, self.output_shape
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("n_samples must be >= 1")]
    NoSamples,
    #[error("class count must be >= 1")]
    NoClasses,
    #[error("unsupported combination {sample} + {label}")]
    Unsupported {
        sample: &'static str,
        label: &'static str,
    },
    #[error("no compatible architecture for {sample} + {label}")]
    NoArchitecture {
        sample: &'static str,
        label: &'static str,
    },
    #[error("descriptor has no partitions")]
    NoPartitions,
    #[error("architecture does not match the descriptor: {0}")]
    Mismatch(String),
    #[error("descriptor syntax: {0}")]
    Syntax(String),
}

pub fn parse_descriptor(text: &str) -> Result<DataDescriptor, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax(e.message().to_string()))
}

pub fn capacity_class(n_samples: u64) -> CapacityClass {
    capacity_class_with(n_samples, HEAVY_THRESHOLD)
}

pub fn capacity_class_with(n_samples: u64, threshold: u64) -> CapacityClass {
    if n_samples < threshold {
        CapacityClass::Light
    } else {
        CapacityClass::Heavy
    }
}

fn unsupported(d: &DataDescriptor) -> ConfigError {
    ConfigError::Unsupported {
        sample: d.sample_type.name(),
        label: d.label_type.name(),
    }
}

pub fn infer_io_shapes(d: &DataDescriptor) -> Result<(Vec<u32>, Vec<u32>), ConfigError> {
    if d.n_samples == 0 {
        return Err(ConfigError::NoSamples);
    }
    let n = d.label_type.n_classes();
    if n == 0 {
        return Err(ConfigError::NoClasses);
    }
    let input = match d.sample_type {
        SampleType::Image { h, w, channels } => vec![h, w, channels],
        SampleType::LidarPoints { dims } => vec![dims],
        SampleType::GpsSequence { len, features } | SampleType::LogTrace { len, features } => {
            vec![len, features]
        }
    };
    let output = match (d.sample_type, d.label_type) {
        (_, LabelType::ClassLabel { .. }) => vec![n],
        (SampleType::Image { .. }, LabelType::Bbox2d { .. }) => {
            vec![DETECTION_GRID, DETECTION_GRID, DETECTION_ANCHORS, 5 + n]
        }
        (SampleType::Image { h, w, .. }, LabelType::SegmentationMask { .. }) => vec![h, w, n],
        (s, LabelType::SequenceLabel { .. }) if s.is_sequence() => vec![n],
        _ => return Err(unsupported(d)),
    };
    Ok((input, output))
}

fn backbones(sample: &SampleType, capacity: CapacityClass) -> Vec<Option<Backbone>> {
    match sample {
        SampleType::Image { .. } => match capacity {
            CapacityClass::Light => vec![
                Some(Backbone::VGG16),
                Some(Backbone::MobileNetV2),
                Some(Backbone::Darknet),
            ],
            CapacityClass::Heavy => vec![
                Some(Backbone::Darknet),
                Some(Backbone::VGG16),
                Some(Backbone::MobileNetV2),
            ],
        },
        _ => vec![None],
    }
}

fn heads(sample: &SampleType, label: &LabelType) -> Vec<Head> {
    match label {
        LabelType::Bbox2d { .. } => DETECTION_HEADS.to_vec(),
        LabelType::ClassLabel { .. } if sample.is_sequence() => {
            vec![Head::LSTMSequence, Head::SoftmaxClassifier]
        }
        LabelType::ClassLabel { .. } => vec![Head::SoftmaxClassifier],
        LabelType::SequenceLabel { .. } => vec![Head::LSTMSequence],
        // No dense-prediction head is modelled.
        LabelType::SegmentationMask { .. } => vec![],
    }
}

fn compatible(head: Head, label: &LabelType) -> bool {
    match head {
        Head::YoloV3 | Head::YoloV4 | Head::YoloV5 | Head::RetinaNet | Head::SSD => {
            matches!(label, LabelType::Bbox2d { .. })
        }
        Head::LSTMSequence => matches!(
            label,
            LabelType::SequenceLabel { .. } | LabelType::ClassLabel { .. }
        ),
        Head::SoftmaxClassifier => matches!(label, LabelType::ClassLabel { .. }),
    }
}

/// Candidate architectures, best first: the backbone matching the capacity
/// class leads, and within a backbone newer detection heads come first.
pub fn suggest_architectures(d: &DataDescriptor) -> Result<Vec<ArchSpec>, ConfigError> {
    let (input, output) = infer_io_shapes(d)?;
    let capacity = d.capacity();
    let heads = heads(&d.sample_type, &d.label_type);
    let mut out = Vec::new();
    for backbone in backbones(&d.sample_type, capacity) {
        for &head in &heads {
            out.push(ArchSpec {
                input_shape: input.clone(),
                output_shape: output.clone(),
                backbone,
                head,
                capacity_class: capacity,
            });
        }
    }
    if out.is_empty() {
        return Err(ConfigError::NoArchitecture {
            sample: d.sample_type.name(),
            label: d.label_type.name(),
        });
    }
    Ok(out)
}

/// Per-tuple costs (reference-CPU seconds) and trainer state for a class.
fn costs(capacity: CapacityClass) -> (f64, f64, f64) {
    match capacity {
        CapacityClass::Light => (0.002, 0.004, 10.0),
        CapacityClass::Heavy => (0.002, 0.02, 50.0),
    }
}

/// Emits `ingest -> train -> engine`. `ingest` reads and preprocesses the
/// shards with one instance per shard, confined to the shard's dataset when
/// the data is sensitive. `engine` produces the inference engine.
pub fn generate_training_dag(
    arch: &ArchSpec,
    d: &DataDescriptor,
) -> Result<TrainingApp, ConfigError> {
    if d.partitions.is_empty() {
        return Err(ConfigError::NoPartitions);
    }
    let (input, output) = infer_io_shapes(d)?;
    if arch.input_shape != input || arch.output_shape != output {
        return Err(ConfigError::Mismatch(format!(
            "expected in={input:?} out={output:?}"
        )));
    }
    if !compatible(arch.head, &d.label_type) {
        return Err(ConfigError::Mismatch(format!(
            "{:?} head cannot predict {}",
            arch.head,
            d.label_type.name()
        )));
    }
    let shards = d.partitions.len() as u32;
    let (ingest_cost, train_cost, train_state) = costs(arch.capacity_class);
    let model_class = match d.sample_type {
        SampleType::Image { .. } => ModelClass::Cnn,
        _ => ModelClass::Mlp,
    };
    let ingest = OperatorSpec {
        id: "ingest".into(),
        kind: OperatorKind::Source,
        sensitivity: d.sensitive_dataset.clone().filter(|s| !s.is_empty()),
        selectivity: 1.0,
        cost_per_tuple: ingest_cost,
        parallelism_min: shards,
        parallelism_max: shards,
        state_size: 0.0,
    };
    let train = OperatorSpec {
        id: "train".into(),
        kind: OperatorKind::Trainer,
        sensitivity: None,
        selectivity: 0.0,
        cost_per_tuple: train_cost,
        parallelism_min: 1,
        parallelism_max: shards.max(2),
        state_size: train_state,
    };
    let engine = OperatorSpec {
        id: "engine".into(),
        kind: OperatorKind::Sink,
        sensitivity: None,
        selectivity: 0.0,
        cost_per_tuple: 0.001,
        parallelism_min: 1,
        parallelism_max: 1,
        state_size: 0.0,
    };
    Ok(TrainingApp {
        model_class,
        edges: vec![
            ("ingest".into(), "train".into()),
            ("train".into(), "engine".into()),
        ],
        operators: vec![ingest, train, engine],
    })
}

/// Renders `app` as the `[app]` section of a scenario document.
pub fn render_app(app: &TrainingApp) -> String {
    #[derive(Serialize)]
    struct Section<'a> {
        app: &'a TrainingApp,
    }
    toml::to_string(&Section { app }).expect("apps are always representable")
}
