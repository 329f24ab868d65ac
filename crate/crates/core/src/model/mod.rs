//! The patch-proposal network, the downstream classifier, class activation
//! maps and cost accounting.

pub mod arch;
pub mod flops;
pub mod network;
pub mod params;

pub use arch::{ArchSpec, HeadSpec, StageGeometry, StageOp, StageSpec};
pub use flops::{count_flops, FlopReport, LayerFlops};
pub use network::{probabilities, ForwardPass, Network};
pub use params::{Param, ParamKind, ParamSet};

use crate::error::{Error, Result};
use crate::ops::LinearLayer;
use crate::rf::{RfState, SpatialStack};
use crate::select::Cam;
use crate::tensor::{Real, Tensor};
#[cfg(test)]
use crate::tensor::Shape;

/// Padding-free patch-proposal network with a bias-free classifier.
#[derive(Clone, Debug)]
pub struct AnchorNetModel<T = f32> {
    net: Network<T>,
    rf: RfState,
    trained: bool,
}

impl<T: Real> AnchorNetModel<T> {
    /// Builds the network, requiring its field to fit the declared input.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        if spec.head.classifier_bias {
            return Err(Error::Invalid(
                "the proposal classifier must be bias-free for exact activation maps".into(),
            ));
        }
        let rf = spec.rf_state()?;
        rf.num_locations((spec.input_size, spec.input_size))?;
        Ok(AnchorNetModel {
            net: Network::build(spec, seed)?,
            rf,
            trained: false,
        })
    }

    pub fn from_network(net: Network<T>, trained: bool) -> Result<Self> {
        let rf = net.spec().rf_state()?;
        Ok(AnchorNetModel { net, rf, trained })
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn spec(&self) -> &ArchSpec {
        self.net.spec()
    }

    pub fn rf_state(&self) -> &RfState {
        &self.rf
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn classifier(&self) -> LinearLayer<T> {
        self.net.classifier()
    }

    /// Feature map before pooling; its grid is the location grid of the
    /// accumulated field on this input.
    pub fn forward_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        self.rf.num_locations((s.h, s.w))?;
        Ok(self.net.infer(images)?.0)
    }

    /// Feature map plus class probabilities of a single image.
    pub fn features_and_probs(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
        let s = image.shape();
        self.rf.num_locations((s.h, s.w))?;
        let (f, logits) = self.net.infer(image)?;
        Ok((f, probabilities(&logits.data()[..self.num_classes()])))
    }

    /// Softmax distribution over classes for each image of the batch.
    pub fn classify(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let s = images.shape();
        self.rf.num_locations((s.h, s.w))?;
        Ok(self.net.logits(images)?.iter().map(|l| probabilities(l)).collect())
    }

    pub fn flops(&self, input: (usize, usize)) -> Result<FlopReport> {
        count_flops(self.spec(), input)
    }

    pub fn cast<U: Real>(&self) -> AnchorNetModel<U> {
        AnchorNetModel {
            net: self.net.cast(),
            rf: self.rf.clone(),
            trained: self.trained,
        }
    }
}

impl SpatialStack for AnchorNetModel<f64> {
    fn rf_state(&self) -> RfState {
        self.rf.clone()
    }

    fn in_channels(&self) -> usize {
        self.spec().in_channels
    }

    fn forward_map(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.net.infer(input).map(|(f, _)| f)
    }
}

/// Class activation map: `M_n = Σ_c w[n, c] · F_c` over a batch-1 feature map.
pub fn cam<T: Real>(features: &Tensor<T>, classifier: &LinearLayer<T>, class_id: usize) -> Result<Cam> {
    let s = features.shape();
    if s.n != 1 {
        return Err(Error::Shape(format!("activation map needs one sample, got {}", s.n)));
    }
    if class_id >= classifier.classes() {
        return Err(Error::Invalid(format!(
            "class {class_id} out of range for {} classes",
            classifier.classes()
        )));
    }
    if classifier.features() != s.c {
        return Err(Error::Shape(format!(
            "classifier has {} inputs, feature map {} channels",
            classifier.features(),
            s.c
        )));
    }
    let plane = s.plane();
    let mut values = vec![0.0f64; plane];
    for c in 0..s.c {
        let w = classifier.weight(class_id, c).f64();
        let ch = &features.data()[c * plane..(c + 1) * plane];
        for (m, &f) in values.iter_mut().zip(ch) {
            *m += w * f.f64();
        }
    }
    Cam::new(values, s.h, s.w, class_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Consumes the resized whole image.
    Global,
    /// Consumes localized patches.
    Local,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::Local => "local",
        }
    }
}

/// Downstream classifier consuming 95×95 inputs.
#[derive(Clone, Debug)]
pub struct DownstreamModel<T = f32> {
    net: Network<T>,
    variant: Variant,
}

pub const DOWNSTREAM_INPUT: usize = 95;

impl<T: Real> DownstreamModel<T> {
    pub fn build(num_classes: usize, seed: u64, variant: Variant) -> Result<Self> {
        Self::with_spec(&ArchSpec::downstream(num_classes), seed, variant)
    }

    pub fn with_spec(spec: &ArchSpec, seed: u64, variant: Variant) -> Result<Self> {
        Ok(DownstreamModel {
            net: Network::build(spec, seed)?,
            variant,
        })
    }

    pub fn from_network(net: Network<T>, variant: Variant) -> Self {
        DownstreamModel { net, variant }
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.variant = v;
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn classify(&self, images: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        Ok(self.net.logits(images)?.iter().map(|l| probabilities(l)).collect())
    }

    pub fn flops(&self, input: (usize, usize)) -> Result<FlopReport> {
        count_flops(self.net.spec(), input)
    }
}
