use super::forward::{frame_control_error, FrameOutput};
use super::params::KernelParameters;
use super::KernelError;
use crate::geometry::{GeometricFeature, KernelKind};
use crate::Scalar;

/// A skill formed by several independently trained kernels.
#[derive(Clone, Debug)]
pub struct KernelEnsemble<T = f64> {
    pub members: Vec<KernelParameters<T>>,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutput<T = f64> {
    /// Per-member output; `None` when the frame has no instance of that kind.
    pub members: Vec<(KernelKind, Option<FrameOutput<T>>)>,
    /// Member control errors stacked in member order; members without
    /// instances contribute zeros.
    pub control_error: Vec<T>,
}

impl<T: Scalar> KernelEnsemble<T> {
    pub fn new(members: Vec<KernelParameters<T>>) -> Self {
        KernelEnsemble { members }
    }

    /// Length of the stacked control-error vector.
    pub fn error_dim(&self) -> usize {
        self.members
            .iter()
            .map(|p| p.config.kind.template().error_dim)
            .sum()
    }

    pub fn infer(
        &self,
        frame: &[GeometricFeature<T>],
        cap: usize,
        top_p: usize,
        seed: u64,
    ) -> Result<EnsembleOutput<T>, KernelError> {
        let mut members = Vec::with_capacity(self.members.len());
        let mut control_error = Vec::with_capacity(self.error_dim());
        for params in &self.members {
            let kind = params.config.kind;
            match frame_control_error(frame, params, cap, top_p, seed) {
                Ok(out) => {
                    control_error.extend_from_slice(&out.ec);
                    members.push((kind, Some(out)));
                }
                Err(KernelError::NoInstances) => {
                    control_error.extend(std::iter::repeat_n(T::zero(), kind.template().error_dim));
                    members.push((kind, None));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(EnsembleOutput {
            members,
            control_error,
        })
    }
}
