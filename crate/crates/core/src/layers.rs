//! Small parameterised building blocks shared by the CST block and the network.

use crate::error::Result;
use crate::params::{Bound, Builder, Init, ParamId};
use crate::tensor::{Scalar, Var};

pub const LN_EPS: f64 = 1e-5;
const LINEAR_STD: f64 = 0.02;

/// Layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: b.param("weight", &[dim], Init::Ones)?,
            beta: b.param("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Dense map over the last axis, weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Result<Self> {
        Ok(Linear {
            weight: b.param("weight", &[output, input], Init::TruncNormal(LINEAR_STD))?,
            bias: if bias {
                Some(b.param("bias", &[output], Init::Zeros)?)
            } else {
                None
            },
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Square 2-D convolution on NCHW input.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in / groups * kernel * kernel;
        Ok(Conv {
            weight: b.param(
                "weight",
                &[c_out, c_in / groups, kernel, kernel],
                Init::FanIn(fan_in),
            )?,
            bias: if bias {
                Some(b.param("bias", &[c_out], Init::FanIn(fan_in))?)
            } else {
                None
            },
            stride,
            padding,
            groups,
        })
    }

    /// Depthwise `kernel x kernel`, stride 1, same-size output.
    pub fn depthwise<T: Scalar>(
        b: &mut Builder<'_, T>,
        channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build(b, channels, channels, kernel, 1, kernel / 2, channels, bias)
    }

    /// Transposed convolution, weight `[c_in, c_out, k, k]`, no padding.
    pub fn transposed<T: Scalar>(
        b: &mut Builder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_out * kernel * kernel;
        Ok(Conv {
            weight: b.param("weight", &[c_in, c_out, kernel, kernel], Init::FanIn(fan_in))?,
            bias: Some(b.param("bias", &[c_out], Init::FanIn(fan_in))?),
            stride,
            padding: 0,
            groups: 1,
        })
    }

    pub fn forward_transposed<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.conv_transpose2d(p[self.weight], self.bias.map(|b| p[b]), self.stride, self.padding)
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            p[self.weight],
            self.bias.map(|b| p[b]),
            self.stride,
            self.padding,
            self.groups,
        )
    }

    /// Applies the convolution to a channels-last map `[N, H, W, C]`.
    pub fn forward_nhwc<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let c = x.shape()[3];
        if self.groups == c && self.stride == 1 && self.padding * 2 + 1 == p[self.weight].shape()[2] {
            return x.depthwise_conv_nhwc(p[self.weight], self.bias.map(|b| p[b]));
        }
        to_nhwc(self.forward(p, to_nchw(x)?)?)
    }
}

pub fn to_nchw<T: Scalar>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    x.permute(&[0, 3, 1, 2])
}

pub fn to_nhwc<T: Scalar>(x: Var<'_, T>) -> Result<Var<'_, T>> {
    x.permute(&[0, 2, 3, 1])
}
