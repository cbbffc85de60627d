//! Desk-scale architecture families, addressed by id.
//!
//! Base ids: `mlp`, `small-conv`, `small-conv-wide`, `vgg-lite`,
//! `resnet18-lite`, `resnet34-lite`. A `-x<k>` suffix multiplies every
//! channel width by `k` (e.g. `small-conv-x2`).

use crate::dataio::ImageShape;
use crate::nn::{Layer, Network};
use crate::{Error, Result};

const BASES: &[&str] = &["mlp", "small-conv", "small-conv-wide", "vgg-lite", "resnet18-lite", "resnet34-lite"];

fn parse(arch_id: &str) -> Result<(&'static str, usize)> {
    let (base, mult) = match arch_id.rsplit_once("-x") {
        Some((b, m)) if !m.is_empty() && m.bytes().all(|c| c.is_ascii_digit()) => {
            let m: usize = m.parse().map_err(|_| Error::config(format!("bad width multiplier in `{arch_id}`")))?;
            (b, m)
        }
        _ => (arch_id, 1),
    };
    if mult == 0 {
        return Err(Error::config(format!("zero width multiplier in `{arch_id}`")));
    }
    BASES
        .iter()
        .find(|&&b| b == base)
        .map(|&b| (b, mult))
        .ok_or_else(|| Error::config(format!("unknown architecture `{arch_id}`")))
}

pub fn is_registered(arch_id: &str) -> bool {
    parse(arch_id).is_ok()
}

/// The next more expressive architecture on the registry ladder
/// `mlp < small-conv < small-conv-wide < resnet18-lite < resnet34-lite`.
pub fn stronger(arch_id: &str) -> Result<String> {
    let (base, mult) = parse(arch_id)?;
    let suffix = |m: usize| if m == 1 { String::new() } else { format!("-x{m}") };
    Ok(match base {
        "mlp" => format!("small-conv{}", suffix(mult)),
        "small-conv" => format!("small-conv-wide{}", suffix(mult)),
        "small-conv-wide" | "vgg-lite" => format!("resnet18-lite{}", suffix(mult)),
        "resnet18-lite" => format!("resnet34-lite{}", suffix(mult)),
        _ => format!("resnet34-lite{}", suffix(mult * 2)),
    })
}

fn conv(cin: usize, cout: usize, stride: usize) -> Layer {
    Layer::Conv {
        cin,
        cout,
        kernel: 3,
        stride,
        pad: 1,
    }
}

fn basic_block(cin: usize, cout: usize, stride: usize) -> Layer {
    let shortcut = (stride != 1 || cin != cout).then(|| {
        Box::new(Layer::Conv {
            cin,
            cout,
            kernel: 1,
            stride,
            pad: 0,
        })
    });
    Layer::Residual {
        body: vec![conv(cin, cout, stride), Layer::Relu, conv(cout, cout, 1)],
        shortcut,
    }
}

/// Appends pooling down to at most 4×4 and a dense head onto `feature_dim`.
fn head(mut layers: Vec<Layer>, input: ImageShape, feature_dim: usize) -> Result<Network> {
    let mut shape = input.as_tuple();
    for l in &layers {
        shape = l
            .output_shape(shape)
            .ok_or_else(|| Error::config(format!("architecture does not fit input {input}")))?;
    }
    while shape.0 > 4 && shape.0 % 2 == 0 && shape.1 % 2 == 0 {
        layers.push(Layer::AvgPool2);
        shape = (shape.0 / 2, shape.1 / 2, shape.2);
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense {
        cin: shape.0 * shape.1 * shape.2,
        cout: feature_dim,
    });
    Network::new(layers, input.as_tuple()).ok_or_else(|| Error::config(format!("architecture does not fit input {input}")))
}

pub fn build(arch_id: &str, feature_dim: usize, input: ImageShape) -> Result<Network> {
    if feature_dim == 0 {
        return Err(Error::config("feature_dim must be positive"));
    }
    if input.is_empty() {
        return Err(Error::config("input shape must be non-empty"));
    }
    let (base, mult) = parse(arch_id)?;
    let c = input.channels;
    match base {
        "mlp" => {
            let hidden = 256 * mult;
            let layers = vec![
                Layer::Flatten,
                Layer::Dense {
                    cin: input.len(),
                    cout: hidden,
                },
                Layer::Relu,
                Layer::Dense {
                    cin: hidden,
                    cout: feature_dim,
                },
            ];
            Network::new(layers, input.as_tuple()).ok_or_else(|| Error::config("mlp does not fit input"))
        }
        "small-conv" | "small-conv-wide" => {
            let w = if base == "small-conv" { 16 } else { 24 } * mult;
            head(
                vec![
                    conv(c, w, 2),
                    Layer::Relu,
                    conv(w, 2 * w, 2),
                    Layer::Relu,
                    conv(2 * w, 4 * w, 2),
                    Layer::Relu,
                ],
                input,
                feature_dim,
            )
        }
        "vgg-lite" => {
            let w = 16 * mult;
            head(
                vec![
                    conv(c, w, 1),
                    Layer::Relu,
                    Layer::AvgPool2,
                    conv(w, 2 * w, 1),
                    Layer::Relu,
                    Layer::AvgPool2,
                    conv(2 * w, 2 * w, 1),
                    Layer::Relu,
                ],
                input,
                feature_dim,
            )
        }
        _ => {
            let blocks = if base == "resnet18-lite" { 1 } else { 2 };
            let w = 16 * mult;
            let mut layers = vec![conv(c, w, 2), Layer::Relu];
            for _ in 0..blocks {
                layers.push(basic_block(w, w, 1));
                layers.push(Layer::Relu);
            }
            layers.push(basic_block(w, 2 * w, 2));
            layers.push(Layer::Relu);
            for _ in 1..blocks {
                layers.push(basic_block(2 * w, 2 * w, 1));
                layers.push(Layer::Relu);
            }
            head(layers, input, feature_dim)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_base_builds_at_canonical_shape() {
        for base in BASES {
            let net = build(base, 512, ImageShape::default()).unwrap();
            assert_eq!(net.output_dim(), 512, "{base}");
        }
    }

    #[test]
    fn width_suffix_scales_parameters() {
        let a = build("small-conv", 64, ImageShape::default()).unwrap();
        let b = build("small-conv-x2", 64, ImageShape::default()).unwrap();
        assert!(b.param_count() > a.param_count());
    }

    #[test]
    fn ladder_steps_up() {
        assert_eq!(stronger("small-conv").unwrap(), "small-conv-wide");
        assert_eq!(stronger("resnet18-lite").unwrap(), "resnet34-lite");
        assert_eq!(stronger("small-conv-x2").unwrap(), "small-conv-wide-x2");
        let (small, big) = (
            build("small-conv", 512, ImageShape::default()).unwrap(),
            build(&stronger("small-conv").unwrap(), 512, ImageShape::default()).unwrap(),
        );
        assert!(big.param_count() > small.param_count());
    }

    #[test]
    fn unknown_ids_rejected() {
        assert!(matches!(build("bogus-arch", 8, ImageShape::default()), Err(Error::Config(_))));
        assert!(build("small-conv-x0", 8, ImageShape::default()).is_err());
        assert!(build("small-conv", 0, ImageShape::default()).is_err());
    }

    #[test]
    fn odd_inputs_still_build() {
        let net = build("small-conv", 16, ImageShape::new(28, 28, 1)).unwrap();
        assert_eq!(net.output_dim(), 16);
    }
}
