use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A temporal action: `[t_start, t_end)` in seconds, its class and a confidence.
/// Ground truth carries `score = 1.0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: usize,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl ActionInstance {
    pub fn new(t_start: f64, t_end: f64, class_id: usize, score: f64) -> Self {
        Self { t_start, t_end, class_id, score }
    }

    pub fn ground_truth(t_start: f64, t_end: f64, class_id: usize) -> Self {
        Self::new(t_start, t_end, class_id, 1.0)
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.t_start >= 0.0 && self.t_start < self.t_end) {
            return Err(Error::Argument(format!(
                "segment [{}, {}) must satisfy 0 <= start < end",
                self.t_start, self.t_end
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Argument(format!(
                "class {} out of range for {num_classes} classes",
                self.class_id
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Argument(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

/// Temporal intersection over union of `[a0, a1)` and `[b0, b1)`.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s < e) {
            return Err(Error::Argument(format!("degenerate segment [{s}, {e})")));
        }
    }
    Ok(tiou_unchecked(a, b))
}

pub(crate) fn tiou_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub(crate) fn segment(i: &ActionInstance) -> (f64, f64) {
    (i.t_start, i.t_end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_values() {
        assert_eq!(tiou((0.0, 10.0), (0.0, 10.0)).unwrap(), 1.0);
        assert!((tiou((0.0, 10.0), (5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!(matches!(tiou((2.0, 2.0), (0.0, 1.0)), Err(Error::Argument(_))));
    }

    #[test]
    fn instance_validation() {
        assert!(ActionInstance::ground_truth(0.0, 1.0, 0).validate(1).is_ok());
        assert!(ActionInstance::ground_truth(1.0, 1.0, 0).validate(1).is_err());
        assert!(ActionInstance::ground_truth(0.0, 1.0, 2).validate(2).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a0 in 0.0..50.0f64, la in 0.01..20.0f64, b0 in 0.0..50.0f64, lb in 0.01..20.0f64) {
            let a = (a0, a0 + la);
            let b = (b0, b0 + lb);
            let ab = tiou(a, b).unwrap();
            prop_assert_eq!(ab, tiou(b, a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(tiou(a, a).unwrap(), 1.0);
        }
    }
}
