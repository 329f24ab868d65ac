//! Sequential early-exit inference and the two evaluation protocols.
//!
//! Stage 1 classifies the whole image resized to 95×95 with the global
//! network. Every later stage classifies one localized patch with the local
//! network and adds its softmax output to the running score, unnormalized,
//! so the score at stage `t` sums to `t`. A sample leaves at the first
//! non-final stage whose top score exceeds that stage's threshold.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{cam, AnchorNetModel, DownstreamModel, DOWNSTREAM_INPUT};
use crate::ops::resize_bilinear;
use crate::rf::PatchBox;
use crate::select::{extract_patch, select_patches, Cam, SelectedPatch, SelectionConfig};
use crate::tensor::Tensor;

/// Default sequence length: the resized image plus four patches.
pub const DEFAULT_STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Provenance {
    ResizedGlobal,
    Patch { patch: PatchBox, activation: f64 },
}

#[derive(Clone, Debug)]
pub struct InputSequence {
    pub items: Vec<Tensor<f32>>,
    pub provenance: Vec<Provenance>,
    /// Class whose activation map drove the selection.
    pub cam_class: usize,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Confidence thresholds for the non-final stages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdSchedule {
    pub values: Vec<f64>,
}

impl ThresholdSchedule {
    pub fn new(values: Vec<f64>) -> Self {
        ThresholdSchedule { values }
    }

    /// `ρ_t = t`: an accumulated score never exceeds `t`, so nobody exits early.
    pub fn unreachable(stages: usize) -> Self {
        ThresholdSchedule {
            values: (1..stages).map(|t| t as f64).collect(),
        }
    }

    /// All zeros: every sample exits at stage 1.
    pub fn zeros(stages: usize) -> Self {
        ThresholdSchedule {
            values: vec![0.0; stages.saturating_sub(1)],
        }
    }
}

/// Forward cost of each pipeline component for one input size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostModel {
    /// One FLOP per resized output element.
    pub resize: u64,
    pub anchornet: u64,
    pub global: u64,
    pub local: u64,
}

impl CostModel {
    pub fn new(
        anchornet: &AnchorNetModel,
        f_global: &DownstreamModel,
        f_local: &DownstreamModel,
        image: (usize, usize),
    ) -> Result<Self> {
        let d = (DOWNSTREAM_INPUT, DOWNSTREAM_INPUT);
        Ok(CostModel {
            resize: (anchornet.spec().in_channels * d.0 * d.1) as u64,
            anchornet: anchornet.flops(image)?.total(),
            global: f_global.flops(d)?.total(),
            local: f_local.flops(d)?.total(),
        })
    }

    /// Cost of a sample that ran `stages` stages. The proposal network is
    /// charged once, and only when a patch stage ran.
    pub fn spent(&self, stages: usize) -> u64 {
        let mut total = self.resize + self.global;
        if stages > 1 {
            total += self.anchornet + (stages as u64 - 1) * self.local;
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InferenceTrace {
    pub exit_stage: usize,
    pub predicted_class: usize,
    /// Accumulated score after each stage that ran.
    pub scores: Vec<Vec<f64>>,
    /// Top accumulated score after each stage that ran.
    pub confidences: Vec<f64>,
    pub flops_spent: u64,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// The exit rule over per-stage softmax outputs, evaluated lazily:
/// `stage_probs(t)` is only called for stages that actually run.
pub fn run_exit_rule(
    len: usize,
    thresholds: &ThresholdSchedule,
    costs: &CostModel,
    mut stage_probs: impl FnMut(usize) -> Result<Vec<f64>>,
) -> Result<InferenceTrace> {
    if len == 0 {
        return Err(Error::Invalid("empty input sequence".into()));
    }
    if thresholds.values.len() < len - 1 {
        return Err(Error::Thresholds {
            needed: len - 1,
            got: thresholds.values.len(),
        });
    }
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut confidences = Vec::with_capacity(len);
    for t in 1..=len {
        let p = stage_probs(t - 1)?;
        let acc = match scores.last() {
            None => p,
            Some(prev) => {
                if prev.len() != p.len() {
                    return Err(Error::Shape("class count changed between stages".into()));
                }
                prev.iter().zip(&p).map(|(a, b)| a + b).collect()
            }
        };
        let conf = max_of(&acc);
        scores.push(acc);
        confidences.push(conf);
        if t < len && conf > thresholds.values[t - 1] {
            break;
        }
    }
    let exit_stage = scores.len();
    let predicted_class = argmax(scores.last().expect("at least one stage"));
    Ok(InferenceTrace {
        exit_stage,
        predicted_class,
        scores,
        confidences,
        flops_spent: costs.spent(exit_stage),
    })
}

/// The three networks plus selection settings.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub anchornet: AnchorNetModel,
    pub f_global: DownstreamModel,
    pub f_local: DownstreamModel,
    pub selection: SelectionConfig,
}

/// What the proposal network produced for one image.
#[derive(Clone, Debug)]
pub struct Localization {
    pub probs: Vec<f64>,
    pub cam: Cam,
    pub patches: Vec<SelectedPatch>,
}

/// Activation map of the proposal network's own top class and the patches
/// it selects.
pub fn localize(
    image: &Tensor<f32>,
    anchornet: &AnchorNetModel,
    cfg: &SelectionConfig,
) -> Result<Localization> {
    let s = image.shape();
    let (features, probs) = anchornet.features_and_probs(image)?;
    let class = argmax(&probs);
    let map = cam(&features, &anchornet.classifier(), class)?;
    let patches = select_patches(&map, anchornet.rf_state(), (s.h, s.w), cfg)?;
    Ok(Localization {
        probs,
        cam: map,
        patches,
    })
}

pub fn resize_global(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    resize_bilinear(image, (DOWNSTREAM_INPUT, DOWNSTREAM_INPUT))
}

pub fn make_sequence(
    image: &Tensor<f32>,
    anchornet: &AnchorNetModel,
    cfg: &SelectionConfig,
) -> Result<InputSequence> {
    if image.shape().n != 1 {
        return Err(Error::Shape("sequences are built from a single image".into()));
    }
    let mut items = vec![resize_global(image)?];
    let mut provenance = vec![Provenance::ResizedGlobal];
    let loc = localize(image, anchornet, cfg)?;
    for sel in &loc.patches {
        items.push(extract_patch(image, &sel.patch)?);
        provenance.push(Provenance::Patch {
            patch: sel.patch,
            activation: sel.activation,
        });
    }
    Ok(InputSequence {
        items,
        provenance,
        cam_class: loc.cam.class_id(),
    })
}

/// Runs a prepared sequence: item 1 through `f_global`, the rest through
/// `f_local`.
pub fn run_sequence(
    f_global: &DownstreamModel,
    f_local: &DownstreamModel,
    seq: &InputSequence,
    thresholds: &ThresholdSchedule,
    costs: &CostModel,
) -> Result<InferenceTrace> {
    run_exit_rule(seq.len(), thresholds, costs, |i| {
        let net = if i == 0 { f_global } else { f_local };
        Ok(net.classify(&seq.items[i])?.remove(0))
    })
}

impl Pipeline {
    pub fn costs(&self, image: (usize, usize)) -> Result<CostModel> {
        CostModel::new(&self.anchornet, &self.f_global, &self.f_local, image)
    }

    pub fn stages(&self) -> usize {
        self.selection.max_patches + 1
    }

    /// Full inference on one image; the proposal network runs only when the
    /// sample survives stage 1.
    pub fn infer(&self, image: &Tensor<f32>, thresholds: &ThresholdSchedule) -> Result<InferenceTrace> {
        let s = image.shape();
        let costs = self.costs((s.h, s.w))?;
        let grid = self.anchornet.rf_state().num_locations((s.h, s.w))?;
        let len = 1 + self.selection.max_patches.min(grid.0 * grid.1);
        let mut patches: Option<Vec<SelectedPatch>> = None;
        let trace = run_exit_rule(len, thresholds, &costs, |i| {
            if i == 0 {
                let x = resize_global(image)?;
                return Ok(self.f_global.classify(&x)?.remove(0));
            }
            if patches.is_none() {
                patches = Some(localize(image, &self.anchornet, &self.selection)?.patches);
            }
            let sel = patches.as_ref().expect("localized");
            let patch = sel.get(i - 1).ok_or_else(|| Error::Invalid("sequence shorter than planned".into()))?;
            let x = extract_patch(image, &patch.patch)?;
            Ok(self.f_local.classify(&x)?.remove(0))
        })?;
        Ok(trace)
    }

    /// Runs every stage of every image once so the evaluation protocols can
    /// be replayed without touching the networks again.
    pub fn record(&self, images: &[(Tensor<f32>, usize)]) -> Result<Vec<SampleRecord>> {
        images
            .iter()
            .map(|(img, label)| {
                let seq = make_sequence(img, &self.anchornet, &self.selection)?;
                let stage_probs = seq
                    .items
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let net = if i == 0 { &self.f_global } else { &self.f_local };
                        Ok(net.classify(x)?.remove(0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SampleRecord {
                    label: *label,
                    stage_probs,
                })
            })
            .collect()
    }
}

/// Softmax output of every stage of one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub label: usize,
    pub stage_probs: Vec<Vec<f64>>,
}

impl SampleRecord {
    pub fn len(&self) -> usize {
        self.stage_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stage_probs.is_empty()
    }

    pub fn replay(&self, thresholds: &ThresholdSchedule, costs: &CostModel) -> Result<InferenceTrace> {
        run_exit_rule(self.len(), thresholds, costs, |i| Ok(self.stage_probs[i].clone()))
    }

    /// Accumulated scores after `stages` stages (capped at the sequence length).
    pub fn accumulated(&self, stages: usize) -> Vec<f64> {
        let t = stages.min(self.len()).max(1);
        let mut acc = self.stage_probs[0].clone();
        for p in &self.stage_probs[1..t] {
            acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnytimeResult {
    pub stage: usize,
    pub accuracy: f64,
    pub mean_flops: f64,
}

/// Every sample runs exactly `stage` stages (fewer if its sequence is shorter).
pub fn anytime_eval(records: &[SampleRecord], stage: usize, costs: &CostModel) -> Result<AnytimeResult> {
    if stage == 0 {
        return Err(Error::Invalid("stages are numbered from 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    let mut flops = 0u64;
    for r in records {
        let t = stage.min(r.len());
        if argmax(&r.accumulated(t)) == r.label {
            correct += 1;
        }
        flops += costs.spent(t);
    }
    let n = records.len() as f64;
    Ok(AnytimeResult {
        stage,
        accuracy: correct as f64 / n,
        mean_flops: flops as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetedResult {
    pub accuracy: f64,
    pub mean_flops: f64,
    /// `exit_counts[t-1]` samples left at stage `t`.
    pub exit_counts: Vec<usize>,
}

pub fn budgeted_eval(
    records: &[SampleRecord],
    thresholds: &ThresholdSchedule,
    costs: &CostModel,
    stages: usize,
) -> Result<BudgetedResult> {
    if records.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut exit_counts = vec![0usize; stages];
    let mut correct = 0usize;
    let mut flops = 0u64;
    for r in records {
        let trace = r.replay(thresholds, costs)?;
        if trace.exit_stage > stages {
            return Err(Error::Invalid(format!(
                "sample ran {} stages, histogram holds {stages}",
                trace.exit_stage
            )));
        }
        exit_counts[trace.exit_stage - 1] += 1;
        correct += usize::from(trace.predicted_class == r.label);
        flops += trace.flops_spent;
    }
    let n = records.len() as f64;
    Ok(BudgetedResult {
        accuracy: correct as f64 / n,
        mean_flops: flops as f64 / n,
        exit_counts,
    })
}

pub const BUDGET_TOLERANCE: f64 = 0.02;
const BISECTION_STEPS: usize = 40;

/// Thresholds for exit rate `q`: at each non-final stage, the top `q`
/// fraction of still-running samples (by accumulated confidence) exits.
pub fn thresholds_for_rate(records: &[SampleRecord], q: f64, stages: usize) -> ThresholdSchedule {
    let mut alive: Vec<&SampleRecord> = records.iter().collect();
    let mut values = Vec::with_capacity(stages.saturating_sub(1));
    for t in 1..stages {
        let mut confs: Vec<f64> = alive
            .iter()
            .filter(|r| r.len() > t)
            .map(|r| max_of(&r.accumulated(t)))
            .collect();
        confs.sort_by(f64::total_cmp);
        let n = confs.len();
        let stay = ((1.0 - q) * n as f64).round() as usize;
        let rho = if stay >= n {
            t as f64
        } else if stay == 0 {
            0.0
        } else {
            let (lo, hi) = (confs[stay - 1], confs[stay]);
            if hi > lo {
                0.5 * (lo + hi)
            } else {
                lo
            }
        };
        values.push(rho);
        alive.retain(|r| r.len() > t && max_of(&r.accumulated(t)) <= rho);
    }
    ThresholdSchedule { values }
}

fn mean_cost(records: &[SampleRecord], th: &ThresholdSchedule, costs: &CostModel) -> Result<f64> {
    let mut total = 0u64;
    for r in records {
        total += r.replay(th, costs)?.flops_spent;
    }
    Ok(total as f64 / records.len() as f64)
}

/// Finds a schedule whose replayed mean cost on `records` is within 2% of
/// `budget`, by bisection over the exit rate.
///
/// `records` must hold every stage of every sample.
pub fn tune_thresholds(
    records: &[SampleRecord],
    budget: f64,
    costs: &CostModel,
    stages: usize,
) -> Result<ThresholdSchedule> {
    if records.is_empty() || stages == 0 {
        return Err(Error::Invalid("threshold tuning needs samples and stages".into()));
    }
    let full = ThresholdSchedule::unreachable(stages);
    let max = mean_cost(records, &full, costs)?;
    let min = mean_cost(records, &ThresholdSchedule::zeros(stages), costs)?;
    let slack = 1e-9 * max;
    if !(min - slack..=max + slack).contains(&budget) {
        return Err(Error::InfeasibleBudget { budget, min, max });
    }
    let within = |c: f64| (c - budget).abs() <= BUDGET_TOLERANCE * budget;
    if within(max) && budget >= max - slack {
        return Ok(full);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best: Option<(f64, ThresholdSchedule)> = None;
    for _ in 0..BISECTION_STEPS {
        let q = 0.5 * (lo + hi);
        let th = thresholds_for_rate(records, q, stages);
        let c = mean_cost(records, &th, costs)?;
        let err = (c - budget).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, th.clone()));
        }
        if within(c) {
            return Ok(th);
        }
        // a higher exit rate lowers the cost
        if c > budget {
            lo = q;
        } else {
            hi = q;
        }
    }
    for q in [0.0, 1.0] {
        let th = thresholds_for_rate(records, q, stages);
        if within(mean_cost(records, &th, costs)?) {
            return Ok(th);
        }
    }
    let got = best.map_or(f64::NAN, |(e, _)| e);
    Err(Error::Invalid(format!(
        "no schedule within {:.0}% of budget {budget}; closest is off by {got}",
        BUDGET_TOLERANCE * 100.0
    )))
}

fn counts_header(stages: usize) -> String {
    (1..=stages).map(|t| format!(",exit_counts_{t}")).collect()
}

fn counts_row(counts: &[usize]) -> String {
    counts.iter().map(|c| format!(",{c}")).collect()
}

/// `stage,mean_flops,accuracy,exit_counts_1..T`, one row per forced stage.
pub fn anytime_csv(rows: &[AnytimeResult], samples: usize, stages: usize) -> String {
    let mut s = format!("stage,mean_flops,accuracy{}\n", counts_header(stages));
    for r in rows {
        let mut counts = vec![0; stages];
        if (1..=stages).contains(&r.stage) {
            counts[r.stage - 1] = samples;
        }
        s.push_str(&format!("{},{},{}{}\n", r.stage, r.mean_flops, r.accuracy, counts_row(&counts)));
    }
    s
}

/// `budget,mean_flops,accuracy,exit_counts_1..T`, one row per budget.
pub fn budgeted_csv(rows: &[(f64, BudgetedResult)], stages: usize) -> String {
    let mut s = format!("budget,mean_flops,accuracy{}\n", counts_header(stages));
    for (budget, r) in rows {
        s.push_str(&format!(
            "{budget},{},{}{}\n",
            r.mean_flops,
            r.accuracy,
            counts_row(&r.exit_counts)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn costs() -> CostModel {
        CostModel {
            resize: 1,
            anchornet: 100,
            global: 10,
            local: 10,
        }
    }

    fn mock(global: Vec<f64>, local: Vec<f64>, len: usize) -> SampleRecord {
        let mut stage_probs = vec![global];
        stage_probs.extend(std::iter::repeat_n(local, len - 1));
        SampleRecord {
            label: 0,
            stage_probs,
        }
    }

    #[test]
    fn hand_traced_exit() {
        let r = mock(vec![0.6, 0.4], vec![0.8, 0.2], 5);
        let th = ThresholdSchedule::new(vec![0.7, 1.2, 1.9, 2.8]);
        let t = r.replay(&th, &costs()).unwrap();
        assert_eq!(t.exit_stage, 2);
        assert_eq!(t.predicted_class, 0);
        assert!((t.scores[1][0] - 1.4).abs() < 1e-12 && (t.scores[1][1] - 0.6).abs() < 1e-12);
        assert_eq!(t.flops_spent, 1 + 10 + 100 + 10);
    }

    #[test]
    fn degenerate_thresholds() {
        let r = mock(vec![0.3, 0.7], vec![0.5, 0.5], 5);
        let first = r.replay(&ThresholdSchedule::zeros(5), &costs()).unwrap();
        assert_eq!(first.exit_stage, 1);
        assert_eq!(first.flops_spent, 11);
        let all = r.replay(&ThresholdSchedule::unreachable(5), &costs()).unwrap();
        assert_eq!(all.exit_stage, 5);
        assert_eq!(all.flops_spent, 11 + 100 + 40);
    }

    #[test]
    fn short_schedule_is_an_error() {
        let r = mock(vec![0.3, 0.7], vec![0.5, 0.5], 5);
        assert!(matches!(
            r.replay(&ThresholdSchedule::new(vec![0.9, 0.9]), &costs()),
            Err(Error::Thresholds { needed: 4, got: 2 })
        ));
        // shorter sequences only need their own non-final stages
        let short = mock(vec![0.3, 0.7], vec![0.5, 0.5], 3);
        assert!(short.replay(&ThresholdSchedule::new(vec![2.0, 2.0]), &costs()).is_ok());
    }

    #[test]
    fn anytime_stage_one_is_global_accuracy() {
        let recs = vec![
            mock(vec![0.9, 0.1], vec![0.1, 0.9], 5),
            mock(vec![0.2, 0.8], vec![0.9, 0.1], 5),
        ];
        let a1 = anytime_eval(&recs, 1, &costs()).unwrap();
        assert_eq!(a1.accuracy, 0.5);
        assert_eq!(a1.mean_flops, 11.0);
        let a3 = anytime_eval(&recs, 3, &costs()).unwrap();
        assert_eq!(a3.accuracy, 0.5);
        assert_eq!(a3.mean_flops, 131.0);
    }

    #[test]
    fn tuner_boundaries_and_infeasibility() {
        let recs: Vec<SampleRecord> = (0..50)
            .map(|i| {
                let p = 0.5 + 0.49 * (i as f64 / 50.0);
                mock(vec![p, 1.0 - p], vec![0.9, 0.1], 5)
            })
            .collect();
        let c = costs();
        let full = c.spent(5) as f64;
        let first = c.spent(1) as f64;
        let th = tune_thresholds(&recs, full, &c, 5).unwrap();
        assert_eq!(th, ThresholdSchedule::unreachable(5));
        let th = tune_thresholds(&recs, first, &c, 5).unwrap();
        assert!((mean_cost(&recs, &th, &c).unwrap() - first).abs() <= 0.02 * first);
        assert!(matches!(
            tune_thresholds(&recs, first - 1.0, &c, 5),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(tune_thresholds(&recs, full + 1.0, &c, 5).is_err());
        let mid = 0.5 * (full + first);
        let th = tune_thresholds(&recs, mid, &c, 5).unwrap();
        assert!((mean_cost(&recs, &th, &c).unwrap() - mid).abs() <= 0.02 * mid);
    }
}
