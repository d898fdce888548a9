use crate::error::{Error, Result};

/// How much of each forecast's target has been observed at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelCalendar {
    horizon: usize,
}

impl LabelCalendar {
    pub fn new(horizon: usize) -> Self {
        LabelCalendar { horizon }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `clamp(s - t_star, 0, H)`.
    pub fn observed(&self, t_star: usize, s: usize) -> usize {
        s.saturating_sub(t_star).min(self.horizon)
    }
}

/// Gateway to the series during a run: at step `now` only rows before `now` exist.
///
/// With `poison` set, reads past `now` come back as NaN instead of failing, so
/// a leak shows up as NaN somewhere downstream.
#[derive(Debug, Clone, Copy)]
pub struct ObservedStream<'a> {
    values: &'a [f64],
    vars: usize,
    poison: bool,
}

impl<'a> ObservedStream<'a> {
    pub fn new(values: &'a [f64], vars: usize, poison: bool) -> Self {
        ObservedStream { values, vars, poison }
    }

    pub fn poisoned(&self) -> bool {
        self.poison
    }

    /// Rows `[start, start + len)` as seen at step `now`, row-major.
    pub fn rows(&self, start: usize, len: usize, now: usize) -> Result<Vec<f64>> {
        let v = self.vars;
        let mut out = Vec::with_capacity(len * v);
        for r in start..start + len {
            if r >= now {
                if !self.poison {
                    return Err(Error::invalid(format!(
                        "causality violation: row {r} requested at step {now}"
                    )));
                }
                out.extend(std::iter::repeat_n(f64::NAN, v));
            } else {
                out.extend_from_slice(&self.values[r * v..(r + 1) * v]);
            }
        }
        Ok(out)
    }
}
