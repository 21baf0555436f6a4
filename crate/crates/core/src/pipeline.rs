//! The full classifier: exhaustive nearest-neighbour labelling, hard-sample
//! tagging, rotation episodes for the hard samples, and the report.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledImageSet, MAX_DIGIT_LABEL};
use crate::featstore::{emissions, normalize_rows, FeatureStore, NnResult};
use crate::imgops::AngleDeg;
use crate::nn::CnnModel;
use crate::qlearn::{nearest, run_image_episode, EpisodeTrace, QConfig};
use crate::{Error, Result, Tensor};

const NUM_LABELS: usize = MAX_DIGIT_LABEL as usize + 1;

/// Which samples receive a rotation episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    /// Samples the nearest-neighbour search got wrong (uses ground truth).
    #[default]
    Oracle,
    /// Samples whose nearest-neighbour distance exceeds `tau`.
    Margin { tau: f64 },
    /// Every sample.
    All,
}

impl SelectionMode {
    /// Build from a mode name, with `tau` needed only for `margin`.
    pub fn parse(name: &str, tau: Option<f64>) -> Result<Self> {
        let mode = match name {
            "oracle" => SelectionMode::Oracle,
            "all" => SelectionMode::All,
            "margin" => SelectionMode::Margin {
                tau: tau.ok_or_else(|| Error::invalid("margin selection needs a tau"))?,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown selection mode '{other}' (oracle, margin, all)"
                )))
            }
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionMode::Oracle => "oracle",
            SelectionMode::Margin { .. } => "margin",
            SelectionMode::All => "all",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SelectionMode::Margin { tau } = *self {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::invalid(format!("margin tau {tau} must be positive")));
            }
        }
        Ok(())
    }

    pub fn is_hard(&self, nn: &NnResult, truth: u8) -> bool {
        match *self {
            SelectionMode::Oracle => nn.label != truth,
            SelectionMode::Margin { tau } => nn.distance > tau,
            SelectionMode::All => true,
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMode::Margin { tau } => write!(f, "margin(tau={tau})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Accepts `oracle`, `all`, `margin:<tau>` or `margin=<tau>`.
impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once([':', '=']) {
            Some(("margin", tau)) => {
                let tau = tau
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad margin tau '{tau}'")))?;
                SelectionMode::parse("margin", Some(tau))
            }
            _ => SelectionMode::parse(s, None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample: usize,
    pub truth: u8,
    pub nn_label: u8,
    pub nn_distance: f64,
    pub nn_index: usize,
    pub hard: bool,
    pub rl_label: Option<u8>,
    pub rl_distance: Option<f64>,
    pub chosen_angle: Option<AngleDeg>,
    pub final_label: u8,
}

impl SampleOutcome {
    fn easy(sample: usize, truth: u8, nn: &NnResult) -> Self {
        Self {
            sample,
            truth,
            nn_label: nn.label,
            nn_distance: nn.distance,
            nn_index: nn.index,
            hard: false,
            rl_label: None,
            rl_distance: None,
            chosen_angle: None,
            final_label: nn.label,
        }
    }

    fn hard(mut self, rl: &NnResult, trace: &EpisodeTrace) -> Self {
        self.hard = true;
        self.rl_label = Some(rl.label);
        self.rl_distance = Some(rl.distance);
        self.chosen_angle = Some(trace.chosen_angle);
        self.final_label = rl.label;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub easy: usize,
    pub hard: usize,
    /// Hard samples wrong under the neighbour search and right after rotation.
    pub corrected: usize,
    /// Hard samples right under the neighbour search and wrong after rotation.
    pub broken: usize,
    pub nn_correct: usize,
    pub proposed_correct: usize,
}

/// Rows are true labels, columns predicted labels.
pub type Confusion = [[usize; NUM_LABELS]; NUM_LABELS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub selection: SelectionMode,
    pub counts: Counts,
    pub nn_only_accuracy: f64,
    pub proposed_accuracy: f64,
    pub hard_count: usize,
    pub corrected_count: usize,
    pub confusion_nn: Confusion,
    pub confusion_proposed: Confusion,
    /// Wall-clock time; kept out of the JSON so reports compare byte for byte.
    #[serde(skip)]
    pub runtime_seconds: f64,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_outcomes(
        dataset: impl Into<String>,
        selection: SelectionMode,
        outcomes: &[SampleOutcome],
        config: serde_json::Value,
    ) -> Self {
        let mut counts = Counts {
            total: outcomes.len(),
            ..Counts::default()
        };
        let mut confusion_nn = [[0; NUM_LABELS]; NUM_LABELS];
        let mut confusion_proposed = [[0; NUM_LABELS]; NUM_LABELS];
        for o in outcomes {
            let (t, nn, fin) = (
                o.truth as usize,
                o.nn_label as usize,
                o.final_label as usize,
            );
            confusion_nn[t][nn] += 1;
            confusion_proposed[t][fin] += 1;
            counts.nn_correct += (nn == t) as usize;
            counts.proposed_correct += (fin == t) as usize;
            if o.hard {
                counts.hard += 1;
                counts.corrected += (nn != t && fin == t) as usize;
                counts.broken += (nn == t && fin != t) as usize;
            } else {
                counts.easy += 1;
            }
        }
        let frac = |c: usize| {
            if counts.total == 0 {
                0.0
            } else {
                c as f64 / counts.total as f64
            }
        };
        Self {
            dataset: dataset.into(),
            selection,
            nn_only_accuracy: frac(counts.nn_correct),
            proposed_accuracy: frac(counts.proposed_correct),
            hard_count: counts.hard,
            corrected_count: counts.corrected,
            counts,
            confusion_nn,
            confusion_proposed,
            runtime_seconds: 0.0,
            config,
        }
    }

    pub fn improvement(&self) -> f64 {
        self.proposed_accuracy - self.nn_only_accuracy
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<SampleOutcome>,
    /// Episode traces of the hard samples, in sample order.
    pub traces: Vec<(usize, EpisodeTrace)>,
}

impl Evaluation {
    /// One JSON object per sample.
    pub fn write_outcomes<W: Write>(&self, mut w: W) -> Result<()> {
        for o in &self.outcomes {
            serde_json::to_writer(&mut w, o).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// One JSON object per episode.
    pub fn write_traces<W: Write>(&self, mut w: W) -> Result<()> {
        for (sample, t) in &self.traces {
            w.write_all(t.to_json_line(*sample).as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Label of the nearest stored emission, and the search result.
pub fn classify_nn(
    image: &Tensor,
    model: &CnnModel,
    store: &FeatureStore,
) -> Result<(u8, NnResult)> {
    let nn = nearest(model, store, image)?;
    Ok((nn.label, nn))
}

/// Run the rotation episode, rotate the original image by the chosen angle
/// and return its neighbour's label. `sample` selects the episode's RNG stream.
pub fn classify_rl(
    image: &Tensor,
    base: &NnResult,
    model: &CnnModel,
    store: &FeatureStore,
    cfg: &QConfig,
    sample: u64,
) -> Result<(u8, EpisodeTrace)> {
    let (trace, nn) = run_image_episode(image, base, model, store, cfg, sample)?;
    Ok((nn.label, trace))
}

/// Neighbour search for every image of `set`, batched.
pub fn classify_nn_batch(
    set: &LabeledImageSet,
    model: &CnnModel,
    store: &FeatureStore,
) -> Result<Vec<NnResult>> {
    let em = emissions(model, set.images())?;
    let dim = em.shape()[1];
    let mut q = em.into_data();
    normalize_rows(&mut q, dim, store.norm_mode())?;
    store.nn_query_batch(&q)
}

/// Classify `test_set` with and without rotation episodes.
///
/// Episodes run in parallel; each draws from its own RNG stream keyed by the
/// sample index, so the result does not depend on scheduling.
pub fn evaluate(
    test_set: &LabeledImageSet,
    model: &CnnModel,
    store: &FeatureStore,
    selection: SelectionMode,
    cfg: &QConfig,
) -> Result<Evaluation> {
    selection.validate()?;
    cfg.validate()?;
    let start = Instant::now();
    let base = classify_nn_batch(test_set, model, store)?;
    let labels = test_set.labels();

    let hard: Vec<usize> = (0..test_set.len())
        .filter(|&i| selection.is_hard(&base[i], labels[i]))
        .collect();
    let episodes: Vec<(usize, NnResult, EpisodeTrace)> = hard
        .par_iter()
        .map(|&i| {
            let image = test_set.image(i);
            run_image_episode(&image, &base[i], model, store, cfg, i as u64)
                .map(|(trace, nn)| (i, nn, trace))
                .map_err(|e| Error::Sample {
                    sample: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;

    let mut outcomes: Vec<SampleOutcome> = base
        .iter()
        .enumerate()
        .map(|(i, nn)| SampleOutcome::easy(i, labels[i], nn))
        .collect();
    let mut traces = Vec::with_capacity(episodes.len());
    for (i, nn, trace) in episodes {
        outcomes[i] = outcomes[i].clone().hard(&nn, &trace);
        traces.push((i, trace));
    }

    let config = serde_json::json!({
        "selection": selection,
        "norm_mode": store.norm_mode(),
        "qlearn": cfg,
    });
    let mut report = EvalReport::from_outcomes(test_set.source(), selection, &outcomes, config);
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(Evaluation {
        report,
        outcomes,
        traces,
    })
}
