//! Plan critics: an exact oracle over decoded frames, a task-agnostic pixel
//! heuristic, and an HTTP client for an external vision-language judge.

mod local;
mod mock;
mod remote;

use std::fmt;

use crate::diffusion::{Feedback, FeedbackMode};
use crate::gridworld::Task;
use crate::video::VideoPlan;

pub use local::{
    decode_frame, palette_counts, Cell, DecodeError, DecodedFrame, HeuristicCritic, OracleCritic, DECODE_TOLERANCE,
};
pub use mock::{MockCriticServer, MockPolicy, MockReply};
pub use remote::{
    build_prompt, decode_png_frame, encode_png_frame, CriticConfig, CriticMode, EvaluateRequest, EvaluateResponse,
    RemoteCritic, DEFAULT_TIMEOUT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CriticSource {
    Oracle,
    Heuristic,
    Remote,
    /// Test doubles and scripted critics.
    Fixed,
}

impl fmt::Display for CriticSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriticSource::Oracle => "oracle",
            CriticSource::Heuristic => "heuristic",
            CriticSource::Remote => "remote",
            CriticSource::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub accept: bool,
    /// Free-text advice, at most twenty words.
    pub suggestion: Option<String>,
    pub source: CriticSource,
    /// Set when the critic could not be reached or replied nonsense.
    pub transport_error: bool,
}

impl Verdict {
    pub fn new(accept: bool, source: CriticSource) -> Self {
        Self {
            accept,
            suggestion: None,
            source,
            transport_error: false,
        }
    }

    pub fn with_suggestion(mut self, text: &str) -> Self {
        if let Feedback::Suggestive(s) = Feedback::suggestive(text) {
            self.suggestion = Some(s);
        }
        self
    }

    pub fn transport_failure(source: CriticSource) -> Self {
        Self {
            accept: false,
            suggestion: None,
            source,
            transport_error: true,
        }
    }

    /// Feedback carried by the verdict itself: the suggestion if any,
    /// otherwise the binary decision.
    pub fn feedback(&self) -> Feedback {
        match &self.suggestion {
            Some(s) => Feedback::Suggestive(s.clone()),
            None => Feedback::Binary(self.accept),
        }
    }
}

pub trait Critic: Send + Sync {
    fn evaluate(&self, plan: &VideoPlan, task: Task) -> Verdict;
}

impl<C: Critic + ?Sized> Critic for &C {
    fn evaluate(&self, plan: &VideoPlan, task: Task) -> Verdict {
        (**self).evaluate(plan, task)
    }
}

impl<C: Critic + ?Sized> Critic for Box<C> {
    fn evaluate(&self, plan: &VideoPlan, task: Task) -> Verdict {
        (**self).evaluate(plan, task)
    }
}

/// Returns the same answer for every plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstantCritic(pub bool);

impl Critic for ConstantCritic {
    fn evaluate(&self, _plan: &VideoPlan, _task: Task) -> Verdict {
        Verdict::new(self.0, CriticSource::Fixed)
    }
}

/// Converts a verdict into the conditioning signal for the configured mode.
pub fn make_feedback(verdict: &Verdict, mode: FeedbackMode) -> Feedback {
    match mode {
        FeedbackMode::None => Feedback::None,
        FeedbackMode::Binary => Feedback::Binary(verdict.accept),
        FeedbackMode::Suggestive => match &verdict.suggestion {
            Some(s) if !s.trim().is_empty() => Feedback::suggestive(s),
            _ => Feedback::Binary(verdict.accept),
        },
    }
}

/// Binary classification metrics with "accept" as the positive class.
/// Undefined ratios are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// Panics on empty or mismatched inputs.
pub fn classification_metrics(predicted: &[bool], labels: &[bool]) -> CriticMetrics {
    assert!(!labels.is_empty(), "labeled set must be nonempty");
    assert_eq!(predicted.len(), labels.len());
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (p, l) in predicted.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let single_class = labels.iter().all(|l| *l) || labels.iter().all(|l| !*l);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if !single_class && p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    CriticMetrics {
        precision,
        recall,
        f1,
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fneg,
    }
}

/// Scores `critic` against human (or reference) labels.
pub fn critic_accuracy(critic: &dyn Critic, labeled: &[(VideoPlan, Task, bool)]) -> CriticMetrics {
    let predicted: Vec<bool> = labeled
        .iter()
        .map(|(plan, task, _)| critic.evaluate(plan, *task).accept)
        .collect();
    let labels: Vec<bool> = labeled.iter().map(|(_, _, l)| *l).collect();
    classification_metrics(&predicted, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_per_mode() {
        let yes = Verdict::new(true, CriticSource::Oracle);
        assert_eq!(make_feedback(&yes, FeedbackMode::Binary), Feedback::Binary(true));
        let no = Verdict::new(false, CriticSource::Oracle);
        assert_eq!(make_feedback(&no, FeedbackMode::None), Feedback::None);
        assert_eq!(make_feedback(&no, FeedbackMode::Suggestive), Feedback::Binary(false));
        let hint = no.with_suggestion("move arm lower");
        assert_eq!(
            make_feedback(&hint, FeedbackMode::Suggestive),
            Feedback::Suggestive("move arm lower".into())
        );
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let labels = [true, false, true, false];
        let m = classification_metrics(&labels, &labels);
        assert_eq!((m.precision, m.recall, m.accuracy), (Some(1.0), Some(1.0), 1.0));
        let m = classification_metrics(&[true; 4], &labels);
        assert_eq!((m.precision, m.recall), (Some(0.5), Some(1.0)));
    }

    #[test]
    fn single_class_labels_leave_f1_undefined() {
        let m = classification_metrics(&[true, false], &[true, true]);
        assert_eq!(m.f1, None);
        assert_eq!(m.recall, Some(0.5));
        let m = classification_metrics(&[false, false], &[true, false]);
        assert_eq!(m.precision, None);
    }
}
