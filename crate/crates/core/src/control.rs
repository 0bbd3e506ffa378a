//! Iteration-boundary callbacks shared by the iterative optimizers.

use crate::evaluate::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Directive {
    Continue,
    Stop,
}

/// State exposed to a hook after each completed iteration.
#[derive(Debug, Clone, Copy)]
pub struct Progress<'a> {
    pub iter: usize,
    /// The trace row just appended, CSV-formatted without a newline.
    pub trace_row: &'a str,
    /// Best feasible schedule so far and its objective.
    pub incumbent: Option<(&'a Schedule, f64)>,
}

pub trait IterationHook {
    fn on_iteration(&mut self, progress: &Progress<'_>) -> Directive;
}

/// Never interrupts.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHook;

impl IterationHook for NoHook {
    fn on_iteration(&mut self, _: &Progress<'_>) -> Directive {
        Directive::Continue
    }
}

impl<F: FnMut(&Progress<'_>) -> Directive> IterationHook for F {
    fn on_iteration(&mut self, progress: &Progress<'_>) -> Directive {
        self(progress)
    }
}
