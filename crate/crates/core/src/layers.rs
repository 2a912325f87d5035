//! Parameterized building blocks shared by the network modules.

use crate::autodiff::Var;
use crate::error::Result;
use crate::ops::conv::ConvSpec;
use crate::params::{join, Bound, Init, ParamSpec};

/// Standard deviation of the truncated-normal weight initialization.
pub const WEIGHT_STD: f64 = 0.02;

/// Convolution with bias; parameters `{prefix}.w` and `{prefix}.b`.
pub struct Conv<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
    pub spec: ConvSpec,
}

impl<'t> Conv<'t> {
    pub fn specs(prefix: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                join(prefix, "w"),
                &spec.weight_shape(c_in, c_out),
                Init::TruncNormal(WEIGHT_STD),
            ),
            ParamSpec::new(join(prefix, "b"), &[c_out], Init::Zeros),
        ]
    }

    pub fn bind(bound: &Bound<'t>, prefix: &str, spec: ConvSpec) -> Result<Self> {
        Ok(Conv {
            weight: bound.param(prefix, "w")?,
            bias: bound.param(prefix, "b")?,
            spec,
        })
    }

    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&self.weight, Some(&self.bias), self.spec)
    }
}

/// Affine map over the last axis, weight `[C_out, C_in]`.
pub struct Linear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> Linear<'t> {
    pub fn specs(prefix: &str, c_in: usize, c_out: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                join(prefix, "w"),
                &[c_out, c_in],
                Init::TruncNormal(WEIGHT_STD),
            ),
            ParamSpec::new(join(prefix, "b"), &[c_out], Init::Zeros),
        ]
    }

    pub fn bind(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(Linear {
            weight: bound.param(prefix, "w")?,
            bias: bound.param(prefix, "b")?,
        })
    }

    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.linear(&self.weight, Some(&self.bias))
    }
}

pub struct LayerNorm<'t> {
    pub gain: Var<'t>,
    pub shift: Var<'t>,
}

impl<'t> LayerNorm<'t> {
    pub fn specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(join(prefix, "gain"), &[c], Init::Ones),
            ParamSpec::new(join(prefix, "shift"), &[c], Init::Zeros),
        ]
    }

    pub fn bind(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(LayerNorm {
            gain: bound.param(prefix, "gain")?,
            shift: bound.param(prefix, "shift")?,
        })
    }

    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&self.gain, &self.shift)
    }
}
