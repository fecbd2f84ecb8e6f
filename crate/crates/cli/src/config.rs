//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use gebd_core::data::SyntheticSpec;
use gebd_core::inference::{DEFAULT_PEAK_RADIUS, DEFAULT_THRESHOLD};
use gebd_core::training::{OptimizerConfig, Schedule, TrainConfig, ValidationSettings};
use gebd_core::{SupervisionConfig, TrunkConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Modalities {
    #[default]
    Rgb,
    RgbFlow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_dir: "data/train".into(),
            test_dir: "data/test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames: usize,
    pub channels: usize,
    pub flow_channels: usize,
    pub fps: f64,
    pub boundary_rate: f64,
    pub min_gap: usize,
    pub noise_scale: f64,
    pub categories: usize,
    pub id_prefix: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            train_videos: 400,
            test_videos: 100,
            frames: s.frames,
            channels: s.channels,
            flow_channels: s.flow_channels,
            fps: s.fps,
            boundary_rate: s.boundary_rate,
            min_gap: s.min_gap,
            noise_scale: s.noise_scale,
            categories: s.categories,
            id_prefix: s.id_prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub batch_size: usize,
    /// Score the test split after every epoch.
    pub validate: bool,
    pub out_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        let (o, s) = (OptimizerConfig::default(), Schedule::default());
        Self {
            epochs: s.total_epochs,
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            drop_epochs: s.drop_epochs,
            drop_factor: s.drop_factor,
            batch_size: 2,
            validate: false,
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostSection {
    pub radius: usize,
    pub threshold: f64,
}

impl Default for PostSection {
    fn default() -> Self {
        Self {
            radius: DEFAULT_PEAK_RADIUS,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub rel_dis: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            rel_dis: vec![gebd_core::evaluation::DEFAULT_REL_DIS],
        }
    }
}

/// Labels describing a model variant in an ensemble matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub modalities: Modalities,
    pub size: String,
    /// Must agree with `model.category_head` when given.
    pub category: Option<bool>,
}

impl Default for MetaSection {
    fn default() -> Self {
        Self {
            modalities: Modalities::Rgb,
            size: "base".into(),
            category: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: TrunkConfig,
    pub synth: SynthSection,
    pub supervision: SupervisionConfig,
    pub train: TrainSection,
    pub post: PostSection,
    pub eval: EvalSection,
    pub meta: MetaSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message().trim()).context(location(text, e.span())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn use_flow(&self) -> bool {
        self.meta.modalities == Modalities::RgbFlow
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.supervision.validate().context("supervision")?;
        self.synth_spec().validate().context("synth")?;
        self.train_config().schedule.validate().context("train")?;
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be >= 1");
        }
        for (name, v) in [
            ("train.lr", self.train.lr),
            ("train.momentum", self.train.momentum),
            ("train.weight_decay", self.train.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!("{name} must be finite and >= 0, got {v}");
            }
        }
        if !(0.0..=1.0).contains(&self.post.threshold) {
            bail!("post.threshold must be in [0, 1], got {}", self.post.threshold);
        }
        if self.eval.rel_dis.is_empty() {
            bail!("eval.rel_dis must list at least one threshold");
        }
        if let Some(&r) = self.eval.rel_dis.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            bail!("eval.rel_dis entries must be >= 0, got {r}");
        }
        if self.meta.category.is_some_and(|c| c != self.model.category_head) {
            bail!("meta.category disagrees with model.category_head");
        }
        if self.meta.size.chars().any(char::is_whitespace) || self.meta.size.is_empty() {
            bail!("meta.size must be a non-empty word");
        }
        Ok(())
    }

    /// Train and test videos in one sequence; the first
    /// `synth.train_videos` go to the train split.
    pub fn synth_spec(&self) -> SyntheticSpec {
        let s = &self.synth;
        SyntheticSpec {
            num_videos: s.train_videos + s.test_videos,
            frames: s.frames,
            channels: s.channels,
            flow_channels: s.flow_channels,
            fps: s.fps,
            boundary_rate: s.boundary_rate,
            min_gap: s.min_gap,
            noise_scale: s.noise_scale,
            categories: s.categories,
            seed: self.seed,
            id_prefix: s.id_prefix.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: OptimizerConfig {
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            },
            schedule: Schedule {
                total_epochs: t.epochs,
                drop_epochs: t.drop_epochs.clone(),
                drop_factor: t.drop_factor,
            },
            supervision: self.supervision,
            batch_size: t.batch_size,
            seed: self.seed,
            validation: ValidationSettings {
                peak_radius: self.post.radius,
                threshold: self.post.threshold,
                rel_dis: self.eval.rel_dis[0],
            },
        }
    }
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}")
        }
        None => "document".into(),
    }
}

/// One flag per configuration field; a given flag replaces the file value.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long, global = true, help_heading = "Config")]
    pub seed: Option<u64>,

    #[arg(long, global = true, help_heading = "Data")]
    pub train_dir: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "Data")]
    pub test_dir: Option<PathBuf>,

    #[arg(long, global = true, help_heading = "Model")]
    pub channels: Option<usize>,
    /// SPoS window length L.
    #[arg(long, global = true, help_heading = "Model")]
    pub window: Option<usize>,
    /// SPoS group stride s.
    #[arg(long, global = true, help_heading = "Model")]
    pub stride: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub encoder_blocks: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub decoder_blocks: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub heads: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub feedforward_width: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub similarity_groups: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub similarity_channels: Option<usize>,
    /// Number of boundary categories K.
    #[arg(long, global = true, help_heading = "Model")]
    pub categories: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub category_head: Option<bool>,
    #[arg(long, global = true, help_heading = "Model")]
    pub positional: Option<bool>,

    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_train_videos: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_test_videos: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_frames: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_channels: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_flow_channels: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_fps: Option<f64>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_boundary_rate: Option<f64>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_min_gap: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_noise_scale: Option<f64>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_categories: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub synth_id_prefix: Option<String>,

    #[arg(long, global = true, help_heading = "Supervision")]
    pub sigma: Option<f64>,
    /// Soft-label radius in frames (default 3 sigma).
    #[arg(long, global = true, help_heading = "Supervision")]
    pub label_radius: Option<f64>,
    /// Weight of the category loss.
    #[arg(long, global = true, help_heading = "Supervision")]
    pub lambda: Option<f64>,

    #[arg(long, global = true, help_heading = "Training")]
    pub epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub lr: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub momentum: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',', help_heading = "Training")]
    pub drop_epochs: Option<Vec<usize>>,
    #[arg(long, global = true, help_heading = "Training")]
    pub drop_factor: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub validate: Option<bool>,
    #[arg(long, global = true, help_heading = "Training")]
    pub out_dir: Option<PathBuf>,

    /// Peak-selection half window in frames.
    #[arg(long, global = true, help_heading = "Post-processing")]
    pub peak_radius: Option<usize>,
    #[arg(long, global = true, help_heading = "Post-processing")]
    pub threshold: Option<f64>,

    #[arg(long, global = true, value_delimiter = ',', help_heading = "Evaluation")]
    pub rel_dis: Option<Vec<f64>>,

    #[arg(long, global = true, help_heading = "Metadata")]
    pub modalities: Option<Modalities>,
    #[arg(long, global = true, help_heading = "Metadata")]
    pub size: Option<String>,
    #[arg(long, global = true, help_heading = "Metadata")]
    pub category: Option<bool>,
}

macro_rules! apply {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        apply! {
            self.seed => c.seed,
            self.train_dir => c.data.train_dir,
            self.test_dir => c.data.test_dir,
            self.channels => c.model.channels,
            self.window => c.model.window,
            self.stride => c.model.stride,
            self.encoder_blocks => c.model.encoder_blocks,
            self.decoder_blocks => c.model.decoder_blocks,
            self.heads => c.model.heads,
            self.feedforward_width => c.model.feedforward_width,
            self.similarity_groups => c.model.similarity_groups,
            self.similarity_channels => c.model.similarity_channels,
            self.categories => c.model.categories,
            self.category_head => c.model.category_head,
            self.positional => c.model.positional,
            self.synth_train_videos => c.synth.train_videos,
            self.synth_test_videos => c.synth.test_videos,
            self.synth_frames => c.synth.frames,
            self.synth_channels => c.synth.channels,
            self.synth_flow_channels => c.synth.flow_channels,
            self.synth_fps => c.synth.fps,
            self.synth_boundary_rate => c.synth.boundary_rate,
            self.synth_min_gap => c.synth.min_gap,
            self.synth_noise_scale => c.synth.noise_scale,
            self.synth_categories => c.synth.categories,
            self.synth_id_prefix => c.synth.id_prefix,
            self.sigma => c.supervision.sigma,
            self.lambda => c.supervision.lambda,
            self.epochs => c.train.epochs,
            self.lr => c.train.lr,
            self.momentum => c.train.momentum,
            self.weight_decay => c.train.weight_decay,
            self.drop_epochs => c.train.drop_epochs,
            self.drop_factor => c.train.drop_factor,
            self.batch_size => c.train.batch_size,
            self.validate => c.train.validate,
            self.out_dir => c.train.out_dir,
            self.peak_radius => c.post.radius,
            self.threshold => c.post.threshold,
            self.rel_dis => c.eval.rel_dis,
            self.modalities => c.meta.modalities,
            self.size => c.meta.size,
        }
        if let Some(r) = self.label_radius {
            c.supervision.radius = Some(r);
        }
        if let Some(cat) = self.category {
            c.meta.category = Some(cat);
        }
    }
}
