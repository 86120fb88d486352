//! Test-time self-finetuning: adapt one parameter group by predicting the
//! support masks themselves, then freeze.

use serde::{Deserialize, Serialize};

use super::model::{Gradients, Model, Shot};
use crate::error::{Error, Result};
use crate::fusion::Depth;
use crate::objectives::{adam_step, bce_f64, bce_grad_f64, OptimState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsfGroup {
    /// The two fusion convolutions.
    #[default]
    Encoder,
    Low,
    Mid,
    High,
    /// The two decoder convolutions.
    Decoder,
}

impl TsfGroup {
    pub fn contains(self, name: &str) -> bool {
        match self {
            Self::Encoder => name.starts_with("fusion.conv1.") || name.starts_with("fusion.conv2."),
            Self::Decoder => name.starts_with("fusion.conv3.") || name.starts_with("fusion.conv4."),
            Self::Low => name.starts_with("anchor.low."),
            Self::Mid => name.starts_with("anchor.mid."),
            Self::High => name.starts_with("anchor.high."),
        }
    }

    fn depth(self) -> Depth {
        match self {
            Self::Encoder | Self::Decoder => Depth::Tail,
            _ => Depth::Corr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsfConfig {
    pub steps: usize,
    pub lr: f64,
    pub group: TsfGroup,
}

impl Default for TsfConfig {
    fn default() -> Self {
        Self { steps: 40, lr: 1e-3, group: TsfGroup::Encoder }
    }
}

impl TsfConfig {
    /// Published per-dataset learning rates: `isic`, `deepglobe`, `fss`
    /// use 1e-6 and `chest` uses 1e-1.
    pub fn preset(name: &str) -> Option<Self> {
        let lr = match name {
            "isic" | "deepglobe" | "fss" => 1e-6,
            "chest" => 1e-1,
            _ => return None,
        };
        Some(Self { lr, ..Self::default() })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("finetuning lr {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TsfOutcome {
    pub model: Model,
    /// `loss_tsf` before each update plus once after the last; empty when
    /// `steps == 0`.
    pub losses: Vec<f64>,
}

/// Self-prediction tasks: `(support indices, held-out index)`.
fn tasks(k: usize) -> Vec<(Vec<usize>, usize)> {
    if k == 1 {
        return vec![(vec![0], 0)];
    }
    (0..k).map(|i| ((0..k).filter(|&j| j != i).collect(), i)).collect()
}

pub fn tsf_finetune(model: &Model, shots: &[Shot], cfg: &TsfConfig) -> Result<TsfOutcome> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::config("finetuning needs at least one support shot"));
    }
    let mut tuned = model.clone();
    if cfg.steps == 0 {
        return Ok(TsfOutcome { model: tuned, losses: Vec::new() });
    }
    if !tuned.named().iter().any(|(n, _)| cfg.group.contains(n)) {
        return Err(Error::config(format!("model has no parameters in group {:?}", cfg.group)));
    }
    let depth = cfg.group.depth();
    let plan = tasks(shots.len());
    let out_hw = shots[0].mask.dims2()?;
    let run = |m: &Model| -> Result<Vec<_>> {
        plan.iter()
            .map(|(sup, held)| {
                let s: Vec<Shot> = sup.iter().map(|&i| shots[i]).collect();
                m.forward(&s, shots[*held].features, out_hw)
            })
            .collect()
    };
    let targets: Vec<Vec<f64>> = plan.iter().map(|(_, held)| shots[*held].mask.to_f64()).collect();
    let mut fwds = run(&tuned)?;
    let mut opt = OptimState::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let k = plan.len() as f64;
    for step in 0..=cfg.steps {
        if step > 0 {
            if depth == Depth::Tail {
                for f in &mut fwds {
                    tuned.refresh_tail(f);
                }
            } else {
                fwds = run(&tuned)?;
            }
        }
        let loss = fwds.iter().zip(&targets).map(|(f, t)| bce_f64(&f.m_f, t)).sum::<f64>() / k;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("finetuning step {step}")));
        }
        losses.push(loss);
        if step == cfg.steps {
            break;
        }
        let mut grads = Gradients::new();
        for ((f, t), (_, held)) in fwds.iter().zip(&targets).zip(&plan) {
            let gf: Vec<f64> = bce_grad_f64(&f.m_f, t).iter().map(|g| g / k).collect();
            let zero = vec![0.0; gf.len()];
            for (name, g) in tuned.backward(f, shots[*held].features, &gf, &zero, depth)? {
                if !cfg.group.contains(&name) {
                    continue;
                }
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&g)?,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        let params = tuned.named_mut().into_iter().filter(|(n, _)| cfg.group.contains(n)).collect();
        adam_step(params, &grads, &mut opt)?;
    }
    Ok(TsfOutcome { model: tuned, losses })
}
