use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule: geometric decay with a floor for training from
/// scratch, or the two-phase constant profile used when finetuning from an
/// existing checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Decay {
        base_lr: f64,
        decay: f64,
        interval: usize,
        floor: f64,
    },
    Finetune {
        high_lr: f64,
        high_epochs: usize,
        low_lr: f64,
    },
}

impl Schedule {
    /// 0.001 decaying x0.8 every 3 epochs down to the 0.0001 floor.
    pub fn scratch_default() -> Self {
        Schedule::Decay {
            base_lr: 0.001,
            decay: 0.8,
            interval: 3,
            floor: 0.0001,
        }
    }

    /// 0.001 for 10 epochs, then 0.0001.
    pub fn finetune_default() -> Self {
        Schedule::Finetune {
            high_lr: 0.001,
            high_epochs: 10,
            low_lr: 0.0001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Decay {
                base_lr,
                decay,
                interval,
                floor,
            } => {
                if *base_lr <= 0.0 || *floor <= 0.0 || *base_lr < *floor {
                    return Err(Error::Config(format!(
                        "decay schedule needs base_lr >= floor > 0, got {base_lr} / {floor}"
                    )));
                }
                if !(0.0..=1.0).contains(decay) || *interval == 0 {
                    return Err(Error::Config(
                        "decay must be in (0, 1] and interval >= 1".into(),
                    ));
                }
            }
            Schedule::Finetune {
                high_lr, low_lr, ..
            } => {
                if *high_lr <= 0.0 || *low_lr <= 0.0 {
                    return Err(Error::Config("finetune rates must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Rate for a zero-based epoch. Decay: max(floor, base * decay^(epoch/interval)).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self {
            Schedule::Decay {
                base_lr,
                decay,
                interval,
                floor,
            } => {
                let steps = (epoch / interval) as i32;
                floor.max(base_lr * decay.powi(steps))
            }
            Schedule::Finetune {
                high_lr,
                high_epochs,
                low_lr,
            } => {
                if epoch < *high_epochs {
                    *high_lr
                } else {
                    *low_lr
                }
            }
        }
    }
}
