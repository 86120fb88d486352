//! Episodic meta-training on the source domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{Model, ModelConfig, Shot};
use super::sampler::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::objectives::{adam_step, OptimState};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub episodes: usize,
    pub lr: f64,
    pub episode: EpisodeSpec,
    pub model: ModelConfig,
    /// Trailing window of the smoothed loss column.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 500,
            lr: 1e-3,
            episode: EpisodeSpec::default(),
            model: ModelConfig::default(),
            window: 50,
        }
    }
}

impl TrainConfig {
    /// Published schedule for 400×400 images: 19 epochs over
    /// `source_images`, an epoch being the episodes needed to draw each image
    /// once on average. Strides 25/50/100 keep every level divisible into
    /// local tiles and the correlations small enough for a desktop.
    pub fn paper_scale(source_images: usize) -> Self {
        let d = Self::default();
        let per_episode = d.episode.shots + d.episode.queries;
        let mut model = d.model.clone();
        model.pyramid.strides = vec![25, 50, 100];
        Self { episodes: 19 * source_images.div_ceil(per_episode), model, ..d }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.model.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.window == 0 {
            return Err(Error::config("smoothing window must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub class: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub smoothed: f64,
}

/// Model, optimizer and history; everything needed to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: OptimState,
    pub episodes_done: usize,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            model: Model::new(cfg.model.clone(), cfg.seed)?,
            opt: OptimState::new(cfg.lr),
            episodes_done: 0,
            log: Vec::new(),
        })
    }
}

/// Pyramids of every image in a dataset; the extractor is frozen, so this
/// is computed once.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub pyramids: Vec<FeaturePyramid>,
}

impl FeatureBank {
    pub fn build(model: &Model, ds: &Dataset) -> Result<Self> {
        let pyramids = ds.samples.par_iter().map(|s| model.extract(&s.image)).collect::<Result<Vec<_>>>()?;
        Ok(Self { pyramids })
    }

    pub fn shots<'a>(&'a self, ds: &'a Dataset, idx: &[usize]) -> Vec<Shot<'a>> {
        idx.iter().map(|&i| Shot { features: &self.pyramids[i], mask: &ds.samples[i].mask }).collect()
    }
}

/// Episode `e` of a training run; keyed by absolute index so resuming draws
/// the same sequence.
pub fn train_episode(ds: &Dataset, cfg: &TrainConfig, e: usize) -> Result<Episode> {
    let mut r = rng::stream(cfg.seed, &[rng::tag("train"), e as u64]);
    sample_episode(ds, &cfg.episode, &mut r)
}

/// Runs `cfg.episodes` further episodes on `state`. Each episode averages the
/// loss and gradients over its queries and takes one Adam step.
pub fn meta_train(
    cfg: &TrainConfig,
    ds: &Dataset,
    bank: &FeatureBank,
    state: &mut TrainState,
    mut on_row: impl FnMut(&LogRow),
) -> Result<()> {
    cfg.validate()?;
    if bank.pyramids.len() != ds.len() {
        return Err(Error::shape("feature bank does not match dataset"));
    }
    state.opt.lr = cfg.lr;
    let start = state.episodes_done;
    for e in start..start + cfg.episodes {
        let ep = train_episode(ds, cfg, e)?;
        let shots = bank.shots(ds, &ep.support);
        let q = ep.query.len() as f64;
        let per_query = ep
            .query
            .par_iter()
            .map(|&i| state.model.loss_and_grads(&shots, &bank.pyramids[i], &ds.samples[i].mask))
            .collect::<Result<Vec<_>>>()?;
        let (mut l1, mut l2, mut total) = (0.0, 0.0, 0.0);
        let mut grads = super::model::Gradients::new();
        for (losses, g) in per_query {
            l1 += losses.l1 / q;
            l2 += losses.l2 / q;
            total += losses.total / q;
            for (name, t) in g {
                let t = t.scale((1.0 / q) as f32);
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&t)?,
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        let bad_grad = grads.iter().find(|(_, t)| t.data().iter().any(|v| !v.is_finite()));
        if !total.is_finite() || bad_grad.is_some() {
            let what = bad_grad.map(|(n, _)| format!(", gradient {n}")).unwrap_or_default();
            return Err(Error::NonFiniteLoss(format!(
                "episode {e} class {} support {:?} query {:?}: l1={l1} l2={l2} total={total}{what}",
                ep.class, ep.support, ep.query
            )));
        }
        adam_step(state.model.named_mut(), &grads, &mut state.opt)?;
        let mut row = LogRow { episode: e, class: ep.class, l1, l2, total, smoothed: 0.0 };
        let tail = state.log.len().saturating_sub(cfg.window - 1);
        let recent: Vec<f64> = state.log[tail..].iter().map(|r| r.total).chain([total]).collect();
        row.smoothed = recent.iter().sum::<f64>() / recent.len() as f64;
        on_row(&row);
        state.log.push(row);
        state.episodes_done = e + 1;
    }
    Ok(())
}
