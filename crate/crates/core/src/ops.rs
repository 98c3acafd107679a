//! The candidate operation library shared by every search space.
//!
//! Parameterized operations run `ReLU -> conv(s) -> instance norm + affine`. All operations
//! map `C` channels to `C` channels with "same" padding; `stride` is 2 only on reduction
//! edges.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{strided_len, ConvGeom};
use crate::params::Init;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OpKind {
    /// Plain `k x k` convolution.
    Conv(u8),
    /// Depthwise `k x k` followed by pointwise, named in the `sep_conv_kxk` style.
    SepConv(u8),
    /// Same kernel as [`OpKind::SepConv`], named in the `depthconv2d_i` style.
    DepthConv(u8),
    /// `k x 1` followed by `1 x k`.
    SplitConv(u8),
    /// Depthwise `k x k` with dilation 2, followed by pointwise.
    DilConv(u8),
    AvgPool,
    MaxPool,
    Skip,
    Zero,
    /// Same kernel as [`OpKind::Zero`].
    Cut,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Conv(3),
        OpKind::Conv(5),
        OpKind::Conv(7),
        OpKind::DepthConv(3),
        OpKind::DepthConv(5),
        OpKind::DepthConv(7),
        OpKind::SplitConv(3),
        OpKind::SplitConv(5),
        OpKind::SplitConv(7),
        OpKind::SepConv(3),
        OpKind::SepConv(5),
        OpKind::SepConv(7),
        OpKind::DilConv(3),
        OpKind::DilConv(5),
        OpKind::AvgPool,
        OpKind::MaxPool,
        OpKind::Skip,
        OpKind::Zero,
    ];

    pub fn name(self) -> String {
        let idx = |k: u8| (k - 1) / 2;
        match self {
            OpKind::Conv(k) => alloc::format!("conv2d_{}", idx(k)),
            OpKind::DepthConv(k) => alloc::format!("depthconv2d_{}", idx(k)),
            OpKind::SplitConv(k) => alloc::format!("splitconv2d_{}", idx(k)),
            OpKind::SepConv(k) => alloc::format!("sep_conv_{k}x{k}"),
            OpKind::DilConv(k) => alloc::format!("dil_conv_{k}x{k}"),
            OpKind::AvgPool => "avg_pool_3x3".into(),
            OpKind::MaxPool => "max_pool_3x3".into(),
            OpKind::Skip => "skip".into(),
            OpKind::Zero => "zero".into(),
            OpKind::Cut => "cut".into(),
        }
    }

    pub fn valid_names() -> String {
        let mut names: Vec<String> = Self::ALL.iter().map(|k| k.name()).collect();
        names.push("cut".into());
        names.join(", ")
    }

    pub fn is_zero(self) -> bool {
        matches!(self, OpKind::Zero | OpKind::Cut)
    }

    pub fn is_parameter_free(self) -> bool {
        matches!(
            self,
            OpKind::AvgPool | OpKind::MaxPool | OpKind::Skip | OpKind::Zero | OpKind::Cut
        )
    }

    /// Learnable tensors of this op at width `c`: `(suffix, shape, init)`.
    pub fn param_specs(self, c: usize) -> Vec<(&'static str, Vec<usize>, Init)> {
        let norm = |v: &mut Vec<(&'static str, Vec<usize>, Init)>| {
            v.push(("scale", vec![c], Init::Ones));
            v.push(("shift", vec![c], Init::Zeros));
        };
        let mut specs = Vec::new();
        match self {
            OpKind::Conv(k) => {
                let k = k as usize;
                specs.push(("w", vec![c, c, k, k], Init::KaimingUniform { fan_in: c * k * k }));
            }
            OpKind::SepConv(k) | OpKind::DepthConv(k) | OpKind::DilConv(k) => {
                let k = k as usize;
                specs.push(("dw", vec![c, 1, k, k], Init::KaimingUniform { fan_in: k * k }));
                specs.push(("pw", vec![c, c, 1, 1], Init::KaimingUniform { fan_in: c }));
            }
            OpKind::SplitConv(k) => {
                let k = k as usize;
                specs.push(("wv", vec![c, c, k, 1], Init::KaimingUniform { fan_in: c * k }));
                specs.push(("wh", vec![c, c, 1, k], Init::KaimingUniform { fan_in: c * k }));
            }
            _ => return specs,
        }
        norm(&mut specs);
        specs
    }

    /// Applies the op to `x`; `params` follow the order of [`OpKind::param_specs`].
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var, params: &[Var], stride: usize) -> Result<Var> {
        let expect = self.param_specs(1).len();
        if params.len() != expect {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} expects {expect} parameter tensors, got {}",
                self.name(),
                params.len()
            )));
        }
        let stride = stride.max(1);
        match self {
            OpKind::Conv(k) => {
                let k = k as usize;
                let r = tape.relu(x);
                let y = tape.conv2d(r, params[0], ConvGeom::same(k, k, stride, 1, 1))?;
                tape.instance_norm(y, params[1], params[2])
            }
            OpKind::SepConv(k) | OpKind::DepthConv(k) | OpKind::DilConv(k) => {
                let k = k as usize;
                let dil = if matches!(self, OpKind::DilConv(_)) { 2 } else { 1 };
                let c = tape.shape(x)[1];
                let r = tape.relu(x);
                let d = tape.conv2d(r, params[0], ConvGeom::same(k, k, stride, dil, c))?;
                let p = tape.conv2d(d, params[1], ConvGeom::same(1, 1, 1, 1, 1))?;
                tape.instance_norm(p, params[2], params[3])
            }
            OpKind::SplitConv(k) => {
                let k = k as usize;
                let r = tape.relu(x);
                let v = tape.conv2d(r, params[0], ConvGeom::same(k, 1, stride, 1, 1))?;
                let h = tape.conv2d(v, params[1], ConvGeom::same(1, k, 1, 1, 1))?;
                tape.instance_norm(h, params[2], params[3])
            }
            OpKind::AvgPool => tape.avg_pool3(x, stride),
            OpKind::MaxPool => tape.max_pool3(x, stride),
            OpKind::Skip => tape.subsample(x, stride),
            OpKind::Zero | OpKind::Cut => {
                let s = tape.shape(x);
                if s.len() != 4 {
                    return Err(Error::ShapeMismatch {
                        context: "zero op input".into(),
                        expected: vec![0, 0, 0, 0],
                        actual: s.to_vec(),
                    });
                }
                let shape = [s[0], s[1], strided_len(s[2], stride), strided_len(s[3], stride)];
                Ok(tape.leaf(Tensor::zeros(&shape), false))
            }
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cut" {
            return Ok(OpKind::Cut);
        }
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "operation",
                name: s.into(),
                valid: OpKind::valid_names(),
            })
    }
}

impl TryFrom<String> for OpKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OpKind> for String {
    fn from(k: OpKind) -> String {
        k.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in OpKind::ALL.iter().copied().chain([OpKind::Cut]) {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("conv9".parse::<OpKind>().is_err());
    }

    #[test]
    fn large_space_naming() {
        assert_eq!(OpKind::Conv(7).name(), "conv2d_3");
        assert_eq!(OpKind::DepthConv(3).name(), "depthconv2d_1");
        assert_eq!(OpKind::SplitConv(5).name(), "splitconv2d_2");
    }

    #[test]
    fn every_op_preserves_width_and_strides_spatially() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f64 * 0.37).sin()), true);
        for k in OpKind::ALL {
            for stride in [1, 2] {
                let params: Vec<Var> = k
                    .param_specs(4)
                    .iter()
                    .map(|(_, s, _)| tape.leaf(Tensor::full(s, 0.1), true))
                    .collect();
                let y = k.apply(&mut tape, x, &params, stride).unwrap();
                let side = if stride == 1 { 8 } else { 4 };
                assert_eq!(tape.shape(y), &[1, 4, side, side], "{k} stride {stride}");
            }
        }
    }
}
