/// Outcome of observing one epoch's validation score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    /// Patience exhausted; training should stop after this epoch.
    Stop,
    /// Score undefined (single-class validation set); the epoch is ignored.
    Skipped,
}

/// Patience-based stopping on a maximized score. Ties keep the earlier epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, score: Option<f64>) -> Verdict {
        let Some(score) = score.filter(|s| s.is_finite()) else {
            return Verdict::Skipped;
        };
        match self.best {
            Some((_, best)) if score <= best => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::NoImprovement
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                Verdict::Improved
            }
        }
    }
}
