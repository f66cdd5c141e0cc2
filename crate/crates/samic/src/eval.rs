//! K-shot evaluation: predict a heatmap for every test target, turn its
//! peaks into prompts, segment, and score the mask.

use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samic_core::backbone::Backbone;
use samic_core::episode::kshot_contexts;
use samic_core::metrics::{iou, IouAccumulator, Mask, MetricReport};
use samic_core::net::CorrelationNet;
use samic_core::{average_heatmaps, encode_prompts, extract_peaks, HeatmapConfig, PointPrompt, PromptSet, SaliencyHeatmap};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Item, LoadedItem};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, SegmentationResult};
use crate::io::image_tensor;
use crate::prompts::{rescale_points, PromptRecord};
use crate::trainer::FeatureBank;

/// Produces the target heatmap of one episode. `contexts` are the K shots;
/// their ground-truth prompts are available through `dataset`.
pub trait HeatmapPredictor {
    fn name(&self) -> &str;
    fn predict(&mut self, dataset: &Dataset, contexts: &[&Item], target: &Item) -> Result<SaliencyHeatmap>;
}

/// The trained network: one prediction per shot, then the average.
pub struct NetPredictor {
    net: CorrelationNet,
    bank: FeatureBank,
}

impl NetPredictor {
    pub fn new(net: CorrelationNet, heatmap: HeatmapConfig) -> Result<Self> {
        let backbone = Arc::new(Backbone::from_id(&net.config().backbone_id)?);
        Self::with_backbone(net, backbone, heatmap)
    }

    pub fn with_backbone(net: CorrelationNet, backbone: Arc<Backbone>, heatmap: HeatmapConfig) -> Result<Self> {
        if backbone.id() != net.config().backbone_id {
            return Err(Error::Config(format!("network expects backbone {:?}, got {:?}", net.config().backbone_id, backbone.id())));
        }
        let bank = FeatureBank::new(backbone, net.config().input_size, heatmap);
        Ok(Self { net, bank })
    }

    pub fn net(&self) -> &CorrelationNet {
        &self.net
    }
}

impl HeatmapPredictor for NetPredictor {
    fn name(&self) -> &str {
        "samic"
    }

    fn predict(&mut self, dataset: &Dataset, contexts: &[&Item], target: &Item) -> Result<SaliencyHeatmap> {
        let tgt = self.bank.get(dataset, target)?;
        let maps = contexts
            .iter()
            .map(|c| {
                let ctx = self.bank.get(dataset, c)?;
                Ok(self.net.predict_from_features(&ctx.features, &ctx.heatmap, &tgt.features)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(average_heatmaps(&maps)?)
    }
}

/// Ignores the contexts and encodes the target's own ground-truth prompts:
/// the upper bound of the pipeline.
pub struct OraclePredictor {
    pub heatmap: HeatmapConfig,
}

impl HeatmapPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "ground-truth heatmap"
    }

    fn predict(&mut self, _dataset: &Dataset, _contexts: &[&Item], target: &Item) -> Result<SaliencyHeatmap> {
        let rec = crate::prompts::PromptRecord::load(&target.prompts)?;
        Ok(encode_prompts(&rec.prompt_set().points(), rec.height(), rec.width(), &self.heatmap)?)
    }
}

/// Uniform noise, max-normalized.
pub struct NoisePredictor {
    rng: ChaCha8Rng,
    size: (usize, usize),
}

impl NoisePredictor {
    pub fn new(seed: u64, size: (usize, usize)) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), size }
    }
}

impl HeatmapPredictor for NoisePredictor {
    fn name(&self) -> &str {
        "noise"
    }

    fn predict(&mut self, _dataset: &Dataset, _contexts: &[&Item], _target: &Item) -> Result<SaliencyHeatmap> {
        let (h, w) = self.size;
        let data = (0..h * w).map(|_| self.rng.random::<f64>()).collect();
        Ok(SaliencyHeatmap::max_normalized(h, w, data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shots: usize,
    pub seed: u64,
    pub split: String,
    pub heatmap: HeatmapConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { shots: 1, seed: 0, split: "test".into(), heatmap: HeatmapConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub class: String,
    pub target: String,
    pub contexts: Vec<String>,
    /// Prompts sent to the segmenter, in target image pixels.
    pub prompts: Vec<[f64; 2]>,
    pub fallback: bool,
    pub confidence: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub episodes: Vec<EpisodeResult>,
}

/// Peaks of `heatmap`, mapped into an image of `native` size, one instance
/// group per peak.
pub fn heatmap_prompts(heatmap: &SaliencyHeatmap, native: (usize, usize), config: &HeatmapConfig, image_id: &str) -> (PromptSet, bool) {
    let peaks = extract_peaks(heatmap, config);
    let pts = rescale_points(&peaks.points, (heatmap.height(), heatmap.width()), native);
    (PromptSet::new(image_id, pts.into_iter().map(|p: PointPrompt| vec![p]).collect()), peaks.fallback)
}

/// What [`predict_image`] produced for one target.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// At the network input size.
    pub heatmap: SaliencyHeatmap,
    /// In target image pixels, one group per peak.
    pub prompts: PromptSet,
    pub fallback: bool,
    pub segmentation: SegmentationResult,
}

/// The full inference path for files outside a dataset: K annotated
/// context images and one target image.
pub fn predict_image(
    net: &CorrelationNet,
    bank: &FeatureBank,
    contexts: &[(RgbImage, PromptRecord)],
    target: &RgbImage,
    target_id: &str,
    heatmap: &HeatmapConfig,
    gateway: &Gateway,
) -> Result<Prediction> {
    if contexts.is_empty() {
        return Err(Error::Argument("at least one context image is needed".into()));
    }
    let size = net.config().input_size;
    if bank.input_size() != size || bank.backbone().id() != net.config().backbone_id {
        return Err(Error::Config("feature bank does not match the network".into()));
    }
    let tgt = bank.features_of(&image_tensor(target, size))?;
    let maps = contexts
        .iter()
        .map(|(img, rec)| {
            let ctx = bank.prepare(img, rec)?;
            Ok(net.predict_from_features(&ctx.features, &ctx.heatmap, &tgt)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let heat = average_heatmaps(&maps)?;
    let native = (target.height() as usize, target.width() as usize);
    let (prompts, fallback) = heatmap_prompts(&heat, native, heatmap, target_id);
    let segmentation = gateway.segment_instances(target, &prompts)?;
    Ok(Prediction { heatmap: heat, prompts, fallback, segmentation })
}

/// Runs every target of the configured split once, in manifest order.
pub fn evaluate_kshot(predictor: &mut dyn HeatmapPredictor, dataset: &Dataset, gateway: &Gateway, config: &EvalConfig) -> Result<Evaluation> {
    if config.shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let index = dataset.class_index(&config.split);
    let mut acc = IouAccumulator::new();
    let mut episodes = Vec::new();
    let mut fallbacks = 0;
    for target in dataset.split(&config.split) {
        let pool = &index[&target.class];
        let ctx_ids = kshot_contexts(pool, &target.id, config.shots, config.seed);
        if ctx_ids.len() < config.shots {
            return Err(Error::Dataset(vec![format!(
                "class {} has {} other items, {}-shot evaluation needs {}",
                target.class,
                ctx_ids.len(),
                config.shots,
                config.shots
            )]));
        }
        let contexts: Vec<&Item> = ctx_ids.iter().map(|id| dataset.item(id).expect("index ids exist")).collect();
        let heat = predictor.predict(dataset, &contexts, target)?;
        let LoadedItem { image, mask: gt, .. } = dataset.load(target)?;
        let (prompts, fallback) = heatmap_prompts(&heat, (gt.height, gt.width), &config.heatmap, &target.id);
        fallbacks += usize::from(fallback);
        let seg = gateway.segment_instances(&image, &prompts)?;
        acc.add(&target.class, &seg.mask, &gt)?;
        episodes.push(EpisodeResult {
            class: target.class.clone(),
            target: target.id.clone(),
            contexts: ctx_ids,
            prompts: prompts.points().iter().map(|p| [p.x, p.y]).collect(),
            fallback,
            confidence: seg.confidence,
            iou: iou(&seg.mask, &gt)?,
        });
    }
    if episodes.is_empty() {
        return Err(Error::Dataset(vec![format!("split {:?} has no items", config.split)]));
    }
    let mut report = MetricReport::from_accumulator(&acc);
    report.fallback_prompts = fallbacks;
    report.episodes = episodes.len();
    Ok(Evaluation { report, episodes })
}

/// mIoU of predicting every pixel as foreground: a prior-only baseline that
/// needs no prompt at all.
pub fn whole_image_baseline(dataset: &Dataset, split: &str) -> Result<f64> {
    let mut acc = IouAccumulator::new();
    for it in dataset.split(split) {
        let gt = dataset.load(it)?.mask;
        let all = Mask::new(gt.height, gt.width, vec![true; gt.height * gt.width])?;
        acc.add(&it.class, &all, &gt)?;
    }
    Ok(acc.mean())
}
