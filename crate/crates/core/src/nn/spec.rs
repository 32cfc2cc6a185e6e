use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Architecture descriptor for one layer.
///
/// The textual form (`conv2d(1,8,3,1,1)`, `linear(784,64)`, `relu`, ...) is
/// used in config files and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
    },
    /// Global average pooling, `[N,C,H,W] -> [N,C]`.
    AvgPool,
    Flatten,
    /// Per-channel learned gain, a continuous parameter.
    Scale {
        channels: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Scale { .. } => "scale",
        }
    }

    /// Prefix used when auto-naming layers (`conv1`, `fc2`, `bn1`, ...).
    pub(crate) fn name_prefix(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "fc",
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::BatchNorm2d { .. } => "bn",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "pool",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Scale { .. } => "gain",
        }
    }

    pub fn has_weight(&self) -> bool {
        matches!(self, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Linear { inputs, outputs } => write!(f, "linear({inputs},{outputs})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "conv2d({in_channels},{out_channels},{kernel},{stride},{pad})"
            ),
            LayerSpec::BatchNorm2d { channels } => write!(f, "batchnorm2d({channels})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool2d { size } => write!(f, "maxpool2d({size})"),
            LayerSpec::AvgPool => write!(f, "avgpool"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Scale { channels } => write!(f, "scale({channels})"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, args) = match s.find('(') {
            Some(open) => {
                let close = s
                    .strip_suffix(')')
                    .ok_or_else(|| bad(s, "missing closing parenthesis"))?;
                let args = close[open + 1..]
                    .split(',')
                    .map(|a| {
                        a.trim()
                            .parse::<usize>()
                            .map_err(|_| bad(s, "arguments must be non-negative integers"))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (&s[..open], args)
            }
            None => (s, Vec::new()),
        };
        let spec = match (kind.trim(), &args[..]) {
            ("linear", &[inputs, outputs]) => LayerSpec::Linear { inputs, outputs },
            ("conv2d", &[in_channels, out_channels, kernel]) => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                pad: 0,
            },
            ("conv2d", &[in_channels, out_channels, kernel, stride, pad]) => LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            },
            ("batchnorm2d", &[channels]) => LayerSpec::BatchNorm2d { channels },
            ("relu", &[]) => LayerSpec::Relu,
            ("maxpool2d", &[size]) => LayerSpec::MaxPool2d { size },
            ("avgpool", &[]) => LayerSpec::AvgPool,
            ("flatten", &[]) => LayerSpec::Flatten,
            ("scale", &[channels]) => LayerSpec::Scale { channels },
            _ => return Err(bad(s, "unknown layer or wrong number of arguments")),
        };
        let zero_extent = match spec {
            LayerSpec::Linear { inputs, outputs } => inputs == 0 || outputs == 0,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0,
            LayerSpec::BatchNorm2d { channels } | LayerSpec::Scale { channels } => channels == 0,
            LayerSpec::MaxPool2d { size } => size == 0,
            _ => false,
        };
        if zero_extent {
            return Err(bad(s, "extents must be positive"));
        }
        Ok(spec)
    }
}

fn bad(s: &str, why: &str) -> Error {
    Error::Config(format!("invalid layer `{s}`: {why}"))
}

/// Parses a list of layer descriptors.
pub fn parse_layers<S: AsRef<str>>(items: &[S]) -> Result<Vec<LayerSpec>> {
    items.iter().map(|s| s.as_ref().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parses_back() {
        let all = [
            "linear(784,64)",
            "conv2d(1,8,3,1,1)",
            "batchnorm2d(8)",
            "relu",
            "maxpool2d(2)",
            "avgpool",
            "flatten",
            "scale(1)",
        ];
        for s in all {
            let spec: LayerSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
    }

    #[test]
    fn short_conv_form_defaults_stride_and_pad() {
        let spec: LayerSpec = "conv2d(3, 4, 5)".parse().unwrap();
        assert_eq!(spec.to_string(), "conv2d(3,4,5,1,0)");
    }

    #[test]
    fn rejects_garbage() {
        for s in ["lineer(1,2)", "linear(1)", "relu(3)", "conv2d(1,2,x)", "linear(0,4)", "linear(1,2"] {
            assert!(s.parse::<LayerSpec>().is_err(), "{s}");
        }
    }
}
