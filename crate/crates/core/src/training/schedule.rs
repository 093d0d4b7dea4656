use crate::error::{Error, Result};

/// Linear warmup from `ratio·base` followed by polynomial decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_epochs: f64,
    pub warmup_epochs: f64,
    pub warmup_ratio: f64,
    pub power: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            total_epochs: 100.0,
            warmup_epochs: 10.0,
            warmup_ratio: 0.1,
            power: 0.9,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && self.total_epochs >= 0.0
            && (0.0..=self.total_epochs).contains(&self.warmup_epochs)
            && (0.0..=1.0).contains(&self.warmup_ratio)
            && self.power > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }

    /// Learning rate at a (fractional) epoch in `[0, total]`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs).contains(&epoch) {
            return Err(Error::invalid(
                "lr_at",
                format!("epoch {epoch} outside [0, {}]", self.total_epochs),
            ));
        }
        if epoch < self.warmup_epochs {
            let frac = epoch / self.warmup_epochs;
            return Ok(self.base_lr * (self.warmup_ratio + (1.0 - self.warmup_ratio) * frac));
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return Ok(0.0);
        }
        let frac = (epoch - self.warmup_epochs) / span;
        Ok(self.base_lr * (1.0 - frac).powf(self.power))
    }
}
