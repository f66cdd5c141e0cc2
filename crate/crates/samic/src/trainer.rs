//! Episodic training of the correlation network.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samic_core::backbone::{extract_feature_pyramid, Backbone, FeaturePyramid};
use samic_core::correlation::mask_and_correlate;
use samic_core::episode::{subsample_training_set, EarlyStopping, EpisodeSampler, StopDecision, Subsample};
use samic_core::losses::{LossBreakdown, LossFlags};
use samic_core::net::{CorrelationNet, NetConfig};
use samic_core::optim::{Adam, AdamConfig};
use samic_core::train::{train_step, Sample};
use samic_core::{encode_prompts, HeatmapConfig, SaliencyHeatmap, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::save_checkpoint;
use crate::dataset::{Dataset, Item};
use crate::error::{Error, Result};
use crate::io::image_tensor;
use crate::prompts::{rescale_points, PromptRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub subsample_fraction: f64,
    pub seed: u64,
    /// Context shots used at evaluation time.
    pub shots: usize,
    pub loss: LossFlags,
    /// Training runs single-threaded with ordered reductions either way;
    /// the flag is recorded so runs can assert it.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 4,
            max_epochs: 300,
            patience: 10,
            subsample_fraction: 0.2,
            seed: 0,
            shots: 1,
            loss: LossFlags::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.shots == 0 {
            return bad("batch_size and shots must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction must lie in (0,1]");
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Backbone features and ground-truth heatmap of an item at the network
/// input size.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub features: FeaturePyramid,
    pub heatmap: SaliencyHeatmap,
}

/// Lazily computed [`Prepared`] entries keyed by item id. The backbone is
/// frozen, so entries never go stale.
pub struct FeatureBank {
    backbone: Arc<Backbone>,
    input_size: (usize, usize),
    heatmap: HeatmapConfig,
    entries: HashMap<String, Arc<Prepared>>,
}

impl FeatureBank {
    pub fn new(backbone: Arc<Backbone>, input_size: (usize, usize), heatmap: HeatmapConfig) -> Self {
        Self { backbone, input_size, heatmap, entries: HashMap::new() }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    pub fn features_of(&self, image: &Tensor) -> Result<FeaturePyramid> {
        Ok(extract_feature_pyramid(&self.backbone, image, self.input_size)?)
    }

    pub fn get(&mut self, dataset: &Dataset, item: &Item) -> Result<Arc<Prepared>> {
        if let Some(p) = self.entries.get(&item.id) {
            return Ok(p.clone());
        }
        let loaded = dataset.load(item)?;
        let p = Arc::new(self.prepare(&loaded.image, &loaded.prompts)?);
        self.entries.insert(item.id.clone(), p.clone());
        Ok(p)
    }

    /// Features of `image` and the heatmap of its prompts, both at the
    /// network input size.
    pub fn prepare(&self, image: &RgbImage, prompts: &PromptRecord) -> Result<Prepared> {
        let (h, w) = self.input_size;
        let points = rescale_points(&prompts.prompt_set().points(), (prompts.height(), prompts.width()), (h, w));
        let heatmap = encode_prompts(&points, h, w, &self.heatmap)?;
        let features = self.features_of(&image_tensor(image, (h, w)))?;
        Ok(Prepared { features, heatmap })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopSummary {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub early_stopped: bool,
}

/// Runs `epoch` until `max_epochs` or until the epoch loss stops improving
/// for `patience` epochs. `on_improve` is called after every new best. Both
/// callbacks share `state`.
pub fn run_epochs<S>(
    state: &mut S,
    max_epochs: usize,
    patience: usize,
    mut epoch: impl FnMut(&mut S, usize) -> Result<f64>,
    mut on_improve: impl FnMut(&mut S, usize, f64) -> Result<()>,
) -> Result<StopSummary> {
    let mut es = EarlyStopping::new(patience)?;
    let mut epochs = Vec::new();
    let mut early_stopped = false;
    for e in 0..max_epochs {
        let loss = epoch(state, e)?;
        let (improved, decision) = es.observe(loss);
        epochs.push(EpochSummary { epoch: e, mean_total: loss, improved });
        if improved {
            on_improve(state, e, loss)?;
        }
        if decision == StopDecision::Stop {
            early_stopped = true;
            break;
        }
    }
    let (best_epoch, best_loss) = es.best().ok_or_else(|| Error::Config("max_epochs must be at least 1".into()))?;
    Ok(StopSummary { epochs, best_epoch, best_loss, early_stopped })
}

pub struct TrainOutcome {
    /// Network holding the best epoch's parameters.
    pub net: CorrelationNet,
    pub backbone: Arc<Backbone>,
    pub subsample: Subsample,
    pub summary: StopSummary,
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";

fn log_line(log: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io("<training log>", e))
}

/// Trains on the subsampled training split. Writes `best.ckpt` into `out`
/// whenever the epoch loss improves and one JSON line per step and per
/// epoch into `log`.
pub fn train(
    dataset: &Dataset,
    net_config: &NetConfig,
    config: &TrainConfig,
    heatmap: &HeatmapConfig,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    heatmap.validate()?;
    let backbone = Arc::new(Backbone::from_id(&net_config.backbone_id)?);
    let fingerprint = backbone.fingerprint();
    let subsample = subsample_training_set(&dataset.class_index("train"), config.subsample_fraction, config.seed)?;
    for c in &subsample.skipped {
        log::warn!("class {c} has no training items and was skipped");
    }
    let test_ids: Vec<&str> = dataset.split("test").iter().map(|i| i.id.as_str()).collect();
    if let Some(id) = subsample.ids().into_iter().find(|id| test_ids.contains(id)) {
        return Err(Error::Dataset(vec![format!("item {id:?} is both a training and a test item")]));
    }
    let sampler = EpisodeSampler::new(&subsample.selected)?;
    for c in &sampler.skipped {
        log::warn!("class {c} has fewer than two training items and was skipped");
    }
    struct State<'a> {
        bank: FeatureBank,
        net: CorrelationNet,
        adam: Adam,
        rng: ChaCha8Rng,
        best: Vec<f64>,
        steps: usize,
        log: &'a mut dyn Write,
    }
    let net = CorrelationNet::new(net_config.clone())?;
    let mut st = State {
        bank: FeatureBank::new(backbone.clone(), net_config.input_size, *heatmap),
        adam: Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, net.param_count()),
        best: net.params().to_vec(),
        net,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        steps: 0,
        log,
    };
    let checkpoint = out.map(|d| d.join(BEST_CHECKPOINT));

    let epoch_fn = |st: &mut State<'_>, epoch: usize| -> Result<f64> {
        let episodes = sampler.epoch(&mut st.rng);
        let mut totals = Vec::with_capacity(episodes.len());
        for batch in episodes.chunks(config.batch_size) {
            let mut hcps = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for ep in batch {
                let ctx = st.bank.get(dataset, dataset.item(&ep.context).expect("sampled ids exist"))?;
                let tgt = st.bank.get(dataset, dataset.item(&ep.target).expect("sampled ids exist"))?;
                hcps.push(mask_and_correlate(&ctx.features, &ctx.heatmap, &tgt.features)?);
                targets.push(tgt);
            }
            let samples: Vec<Sample<'_>> =
                hcps.iter().zip(&targets).map(|(h, t)| Sample { hcp: h, target: t.heatmap.data() }).collect();
            let before = st.net.params().to_vec();
            // A prediction collapsed to a constant map has no defined
            // correlation; like a non-finite loss it means training diverged.
            let losses = match train_step(&mut st.net, &mut st.adam, &samples, &config.loss) {
                Err(samic_core::Error::DegenerateVariance("prediction")) => Vec::new(),
                r => r?,
            };
            let mean = LossBreakdown::mean(&losses);
            if !mean.total.is_finite() || st.net.params().iter().any(|p| !p.is_finite()) {
                st.net.set_params(before)?;
                let path = out.map(|d| d.join(DIVERGED_CHECKPOINT)).unwrap_or_else(|| {
                    std::env::temp_dir().join(format!("samic-{}-{DIVERGED_CHECKPOINT}", std::process::id()))
                });
                save_checkpoint(&path, &st.net, fingerprint, Some(epoch))?;
                return Err(Error::Divergence { step: st.steps, loss: mean.total, snapshot: path });
            }
            log_line(st.log, json!({"step": st.steps, "kld": mean.kld, "cc": mean.cc, "nss": mean.nss, "total": mean.total}))?;
            st.steps += 1;
            totals.extend(losses.iter().map(|l| l.total));
        }
        let mean_total = totals.iter().sum::<f64>() / totals.len() as f64;
        log_line(st.log, json!({"epoch": epoch, "mean_total": mean_total}))?;
        Ok(mean_total)
    };
    let on_improve = |st: &mut State<'_>, epoch: usize, _loss: f64| -> Result<()> {
        st.best = st.net.params().to_vec();
        if let Some(path) = &checkpoint {
            save_checkpoint(path, &st.net, fingerprint, Some(epoch))?;
        }
        Ok(())
    };
    let summary = run_epochs(&mut st, config.max_epochs, config.patience, epoch_fn, on_improve)?;
    if backbone.fingerprint() != fingerprint {
        return Err(Error::Config("backbone parameters changed during training".into()));
    }
    let State { mut net, best, steps, .. } = st;
    net.set_params(best)?;
    Ok(TrainOutcome { net, backbone, subsample, summary, steps, checkpoint })
}
