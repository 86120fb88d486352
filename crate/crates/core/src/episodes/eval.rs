//! Meta-testing with optional self-finetuning, and transform diagnostics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::metrics::{domain_means, iou, level_distances, mean, std_dev};
use super::model::{Model, Shot};
use super::sampler::{sample_episode, EpisodeSpec};
use super::train::FeatureBank;
use super::tsf::{tsf_finetune, TsfConfig};
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::rng;
use crate::smt::{self, build_prototype_matrix, Role};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    pub seed: u64,
    pub runs: usize,
    pub episodes: usize,
    pub episode: EpisodeSpec,
    pub tsf: TsfConfig,
    /// Also evaluate every episode without finetuning.
    pub compare_no_tsf: bool,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 5,
            episodes: 100,
            episode: EpisodeSpec::default(),
            tsf: TsfConfig::default(),
            compare_no_tsf: true,
        }
    }
}

impl TestConfig {
    /// Published evaluation protocol per target dataset: 5 runs of 1200
    /// tasks (2400 for `fss`) with that dataset's finetuning rate.
    pub fn preset(name: &str) -> Option<Self> {
        let tsf = TsfConfig::preset(name)?;
        let episodes = if name == "fss" { 2400 } else { 1200 };
        Some(Self { runs: 5, episodes, tsf, ..Self::default() })
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.tsf.validate()?;
        if self.runs == 0 || self.episodes == 0 {
            return Err(Error::config("runs and episodes must be positive"));
        }
        Ok(())
    }

    fn tsf_enabled(&self) -> bool {
        self.tsf.steps > 0
    }
}

/// One test episode. `iou`, `l1`, `l2` are means over the episode's queries
/// under the primary configuration (finetuned when enabled).
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub run: usize,
    pub episode: usize,
    pub class: usize,
    pub query: Vec<usize>,
    pub iou: f64,
    pub l1: f64,
    pub l2: f64,
    pub tsf_loss_before: Option<f64>,
    pub tsf_loss_after: Option<f64>,
    pub iou_no_tsf: Option<f64>,
    /// Binary predictions, one per query.
    pub masks: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(per_run: Vec<f64>) -> Self {
        Self { mean: mean(&per_run), std: std_dev(&per_run), per_run }
    }
}

/// Per-level channel means of a domain before and after the self transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distances {
    pub pre: f64,
    pub post: f64,
    pub pre_per_level: Vec<f64>,
    pub post_per_level: Vec<f64>,
}

impl Distances {
    pub fn between(a: &DomainStats, b: &DomainStats) -> Result<Self> {
        let pre_per_level = level_distances(&a.pre, &b.pre)?;
        let post_per_level = level_distances(&a.post, &b.post)?;
        Ok(Self { pre: mean(&pre_per_level), post: mean(&post_per_level), pre_per_level, post_per_level })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub episodes: usize,
    pub shots: usize,
    pub tsf: Option<TsfConfig>,
    /// `tsf` and/or `no_tsf`.
    pub miou: BTreeMap<String, Stat>,
    pub feature_distance: Option<Distances>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub records: Vec<EpisodeRecord>,
    pub summary: Summary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Report {
    pub fn csv(&self) -> String {
        let mut s = String::from("run,episode,class,iou,l1,l2,tsf_loss_before,tsf_loss_after\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.run,
                r.episode,
                r.class,
                r.iou,
                r.l1,
                r.l2,
                fmt_opt(r.tsf_loss_before),
                fmt_opt(r.tsf_loss_after)
            ));
        }
        s
    }

    /// Per-run mIoU with and without finetuning; `None` unless both ran.
    pub fn ablation_csv(&self) -> Option<String> {
        let (t, n) = (self.summary.miou.get("tsf")?, self.summary.miou.get("no_tsf")?);
        let mut s = String::from("run,miou_tsf,miou_no_tsf\n");
        for (i, (a, b)) in t.per_run.iter().zip(&n.per_run).enumerate() {
            s.push_str(&format!("{i},{a},{b}\n"));
        }
        Some(s)
    }

    pub fn json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

#[derive(Clone)]
struct QueryEval {
    iou: f64,
    l1: f64,
    l2: f64,
    mask: Tensor,
}

fn eval_queries(
    model: &Model,
    shots: &[Shot],
    ds: &Dataset,
    bank: &FeatureBank,
    query: &[usize],
) -> Result<Vec<QueryEval>> {
    query
        .iter()
        .map(|&q| {
            let gt = &ds.samples[q].mask;
            let fwd = model.forward(shots, &bank.pyramids[q], gt.dims2()?)?;
            let losses = model.losses(&fwd, gt)?;
            let pred = model.prediction(&fwd);
            Ok(QueryEval { iou: iou(&pred.binary, gt)?, l1: losses.l1, l2: losses.l2, mask: pred.binary })
        })
        .collect()
}

fn run_episode(
    model: &Model,
    ds: &Dataset,
    bank: &FeatureBank,
    cfg: &TestConfig,
    run: usize,
    e: usize,
) -> Result<EpisodeRecord> {
    let mut r = rng::stream(cfg.seed, &[rng::tag("test"), run as u64, e as u64]);
    let ep = sample_episode(ds, &cfg.episode, &mut r)?;
    let shots = bank.shots(ds, &ep.support);
    let nq = ep.query.len() as f64;
    let plain = if cfg.compare_no_tsf || !cfg.tsf_enabled() {
        Some(eval_queries(model, &shots, ds, bank, &ep.query)?)
    } else {
        None
    };
    let (primary, before, after) = if cfg.tsf_enabled() {
        let out = tsf_finetune(model, &shots, &cfg.tsf)?;
        let res = eval_queries(&out.model, &shots, ds, bank, &ep.query)?;
        (res, out.losses.first().copied(), out.losses.last().copied())
    } else {
        (plain.clone().expect("evaluated above"), None, None)
    };
    let avg = |f: fn(&QueryEval) -> f64, v: &[QueryEval]| v.iter().map(f).sum::<f64>() / nq;
    Ok(EpisodeRecord {
        run,
        episode: e,
        class: ep.class,
        query: ep.query.clone(),
        iou: avg(|q| q.iou, &primary),
        l1: avg(|q| q.l1, &primary),
        l2: avg(|q| q.l2, &primary),
        tsf_loss_before: before,
        tsf_loss_after: after,
        iou_no_tsf: if cfg.tsf_enabled() { plain.as_deref().map(|p| avg(|q| q.iou, p)) } else { None },
        masks: primary.into_iter().map(|q| q.mask).collect(),
    })
}

/// Runs `cfg.runs × cfg.episodes` episodes. Episodes are independent and
/// evaluated in parallel; results are bit-identical for any thread count.
pub fn meta_test(
    model: &Model,
    ds: &Dataset,
    bank: &FeatureBank,
    cfg: &TestConfig,
    source: Option<&DomainStats>,
) -> Result<Report> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.runs).flat_map(|r| (0..cfg.episodes).map(move |e| (r, e))).collect();
    let records = jobs.par_iter().map(|&(r, e)| run_episode(model, ds, bank, cfg, r, e)).collect::<Result<Vec<_>>>()?;
    let per_run = |f: &dyn Fn(&EpisodeRecord) -> Option<f64>| -> Option<Vec<f64>> {
        (0..cfg.runs)
            .map(|r| {
                let v: Option<Vec<f64>> = records.iter().filter(|x| x.run == r).map(f).collect();
                v.map(|v| mean(&v))
            })
            .collect()
    };
    let mut miou = BTreeMap::new();
    if cfg.tsf_enabled() {
        miou.insert("tsf".to_string(), Stat::of(per_run(&|x| Some(x.iou)).expect("always present")));
        if let Some(v) = per_run(&|x| x.iou_no_tsf) {
            miou.insert("no_tsf".to_string(), Stat::of(v));
        }
    } else {
        miou.insert("no_tsf".to_string(), Stat::of(per_run(&|x| Some(x.iou)).expect("always present")));
    }
    let feature_distance = match source {
        Some(s) => Some(Distances::between(s, &domain_stats(model, ds, bank)?)?),
        None => None,
    };
    let summary = Summary {
        runs: cfg.runs,
        episodes: cfg.episodes,
        shots: cfg.episode.shots,
        tsf: cfg.tsf_enabled().then(|| cfg.tsf.clone()),
        miou,
        feature_distance,
    };
    Ok(Report { records, summary })
}

fn self_transform_set(model: &Model, ds: &Dataset, bank: &FeatureBank) -> Result<Vec<Vec<Tensor>>> {
    let cfg = &model.config;
    bank.pyramids
        .par_iter()
        .zip(&ds.samples)
        .map(|(p, s)| smt::self_transforms(p, &s.mask, &model.anchors, &cfg.pyramid, &cfg.smt))
        .collect()
}

/// Channel-mean statistics of a domain, raw and under each image's own
/// support transform.
pub fn domain_stats(model: &Model, ds: &Dataset, bank: &FeatureBank) -> Result<DomainStats> {
    let ws = self_transform_set(model, ds, bank)?;
    Ok(DomainStats { pre: domain_means(&bank.pyramids, None)?, post: domain_means(&bank.pyramids, Some(&ws))? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRow {
    pub level: usize,
    pub dist_pre: f64,
    pub dist_post: f64,
    pub residual_s: f64,
    pub residual_q: f64,
}

pub fn transform_csv(rows: &[TransformRow]) -> String {
    let mut s = String::from("level,dist_pre,dist_post,residual_s,residual_q\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.level, r.dist_pre, r.dist_post, r.residual_s, r.residual_q));
    }
    s
}

/// Prototype matrices with a smaller singular value are skipped by the
/// residual columns.
pub const WELL_CONDITIONED: f64 = 1e-3;

/// `‖A C⁺ C − A‖_max` with the unregularized pseudo-inverse, or `None` when
/// `C` is ill-conditioned.
fn solve_residual(a: &Tensor, c: &Tensor) -> Result<Option<f64>> {
    if tensor::sigma_min2(c)? < WELL_CONDITIONED {
        return Ok(None);
    }
    let w = tensor::matmul(a, &tensor::pinv2(c, 0.0)?)?;
    Ok(Some(tensor::matmul(&w, c)?.max_abs_diff(a)? as f64))
}

/// Episodes drawn for the query-role residual.
pub const INSPECT_EPISODES: usize = 20;

/// Per-level feature distances between `source` and `ds`, and the worst solve
/// residuals `‖W C − A‖_max` over well-conditioned prototype matrices of the
/// domain (NaN when there are none). The support residual uses each image's
/// own prototypes; the query residual uses query prototypes from sampled
/// 1-shot episodes, solved without blending.
pub fn inspect_transform(
    model: &Model,
    source: &DomainStats,
    ds: &Dataset,
    bank: &FeatureBank,
    seed: u64,
) -> Result<Vec<TransformRow>> {
    let cfg = &model.config;
    let spec = &cfg.pyramid;
    let target = domain_stats(model, ds, bank)?;
    let d = Distances::between(source, &target)?;
    let levels = spec.levels();
    let fold = |a: Vec<Option<f64>>, b: Vec<Option<f64>>| -> Vec<Option<f64>> {
        a.iter()
            .zip(&b)
            .map(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => Some(x.max(*y)),
                _ => x.or(*y),
            })
            .collect()
    };

    let support = bank
        .pyramids
        .par_iter()
        .zip(&ds.samples)
        .map(|(p, s)| -> Result<Vec<Option<f64>>> {
            let protos = smt::support_prototypes(&[(p, &s.mask)], spec, &cfg.smt)?;
            (0..levels)
                .map(|l| {
                    let lp = &protos.levels[l];
                    let a = model.anchors.matrix(spec.group(l), Role::Support)?;
                    solve_residual(&a, &build_prototype_matrix(&lp.fg, &lp.bg)?)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(vec![None; levels], fold);

    let one_shot = EpisodeSpec::default();
    let query = (0..INSPECT_EPISODES)
        .into_par_iter()
        .map(|e| -> Result<Vec<Option<f64>>> {
            let mut r = rng::stream(seed, &[rng::tag("inspect"), e as u64]);
            let ep = sample_episode(ds, &one_shot, &mut r)?;
            let (si, qi) = (ep.support[0], ep.query[0]);
            let pairs: [(&FeaturePyramid, &Tensor); 1] = [(&bank.pyramids[si], &ds.samples[si].mask)];
            let out = smt::smt_forward(&pairs, &bank.pyramids[qi], &model.anchors, spec, &cfg.smt)?;
            (0..levels)
                .map(|l| {
                    let (qf, qb) = &out.query_prototypes[l];
                    let a = model.anchors.matrix(spec.group(l), Role::Query)?;
                    solve_residual(&a, &build_prototype_matrix(qf, qb)?)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(vec![None; levels], fold);

    Ok((0..levels)
        .map(|l| TransformRow {
            level: l,
            dist_pre: d.pre_per_level[l],
            dist_post: d.post_per_level[l],
            residual_s: support[l].unwrap_or(f64::NAN),
            residual_q: query[l].unwrap_or(f64::NAN),
        })
        .collect())
}
