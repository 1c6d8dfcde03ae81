//! Architecture strings and network construction.
//!
//! The grammar is a dash-separated token list:
//!
//! ```text
//! C<m>(<k1>x<k2>)   convolution with m output channels, followed by ReLU
//! P(<k>x<k>)        k x k max pooling with stride k
//! F<units>          fully connected layer, followed by ReLU unless final
//! BN                batch normalization of the preceding C or F output
//! ```
//!
//! `C6(5x5)-P(2x2)-C16(5x5)-P(2x2)-F120-F84-F10` is the reference network.
//! A `Flatten` is inserted automatically where a dense layer follows a
//! spatial shape; activations always come after any batch normalization.

use crate::error::{Error, Result};
use crate::nn::network::{AffineLayer, NormLayer};
use crate::nn::{ActKind, Layer, LayerParams, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        k1: usize,
        k2: usize,
    },
    Pool {
        k: usize,
    },
    Dense {
        units: usize,
    },
    BatchNorm,
}

fn parse_window(token: &str, body: &str) -> Result<(usize, usize)> {
    let inner = body
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Parse(format!("'{token}': expected (<k>x<k>)")))?;
    let (a, b) = inner
        .split_once('x')
        .ok_or_else(|| Error::Parse(format!("'{token}': expected (<k>x<k>)")))?;
    let parse = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::Parse(format!("'{token}': bad extent '{s}'")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn parse_count(token: &str, digits: &str) -> Result<usize> {
    digits
        .parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Parse(format!("'{token}': bad count '{digits}'")))
}

/// Parses an architecture string into layer specs.
pub fn parse_architecture(s: &str) -> Result<Vec<LayerSpec>> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::Parse("empty architecture".into()));
    }
    let mut specs = Vec::new();
    for token in s.split('-') {
        if token == "BN" {
            match specs.last() {
                Some(LayerSpec::Conv { .. }) | Some(LayerSpec::Dense { .. }) => {
                    specs.push(LayerSpec::BatchNorm)
                }
                _ => {
                    return Err(Error::Parse(
                        "BN must directly follow a C or F layer".into(),
                    ))
                }
            }
        } else if let Some(rest) = token.strip_prefix('C') {
            let open = rest
                .find('(')
                .ok_or_else(|| Error::Parse(format!("'{token}': expected C<m>(<k>x<k>)")))?;
            let filters = parse_count(token, &rest[..open])?;
            let (k1, k2) = parse_window(token, &rest[open..])?;
            specs.push(LayerSpec::Conv { filters, k1, k2 });
        } else if let Some(rest) = token.strip_prefix('P') {
            let (k1, k2) = parse_window(token, rest)?;
            if k1 != k2 {
                return Err(Error::Parse(format!(
                    "'{token}': pooling windows must be square"
                )));
            }
            specs.push(LayerSpec::Pool { k: k1 });
        } else if let Some(rest) = token.strip_prefix('F') {
            specs.push(LayerSpec::Dense {
                units: parse_count(token, rest)?,
            });
        } else {
            return Err(Error::Parse(format!("unrecognized layer token '{token}'")));
        }
    }
    Ok(specs)
}

/// The canonical string for a spec list; inverse of [`parse_architecture`].
pub fn format_architecture(specs: &[LayerSpec]) -> String {
    specs
        .iter()
        .map(|spec| match spec {
            LayerSpec::Conv { filters, k1, k2 } => format!("C{filters}({k1}x{k2})"),
            LayerSpec::Pool { k } => format!("P({k}x{k})"),
            LayerSpec::Dense { units } => format!("F{units}"),
            LayerSpec::BatchNorm => "BN".to_string(),
        })
        .collect::<Vec<_>>()
        .join("-")
}

/// Inserts `BN` after every affine layer except the final one. Specs that
/// already place any batch normalization are returned unchanged.
pub fn with_batchnorm(specs: &[LayerSpec]) -> Vec<LayerSpec> {
    if specs.contains(&LayerSpec::BatchNorm) {
        return specs.to_vec();
    }
    let last_affine = specs
        .iter()
        .rposition(|s| matches!(s, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }));
    let mut out = Vec::with_capacity(specs.len() * 2);
    for (i, spec) in specs.iter().enumerate() {
        out.push(*spec);
        let affine = matches!(spec, LayerSpec::Conv { .. } | LayerSpec::Dense { .. });
        if affine && Some(i) != last_affine {
            out.push(LayerSpec::BatchNorm);
        }
    }
    out
}

/// Builds a network for the given per-example input shape. Convolution
/// sharing counts are fixed here from the spatial extents; a ReLU follows
/// every affine layer (after its normalizer, if any) except the last one.
pub fn build_network(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Network> {
    if specs.is_empty() {
        return Err(Error::Parse("empty architecture".into()));
    }
    let last_affine = specs
        .iter()
        .rposition(|s| matches!(s, LayerSpec::Conv { .. } | LayerSpec::Dense { .. }))
        .ok_or_else(|| Error::Parse("architecture has no trainable layers".into()))?;

    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    let mut conv_count = 0;
    let mut fc_count = 0;
    let mut bn_count = 0;
    for (i, spec) in specs.iter().enumerate() {
        // The activation belongs after any BN that follows this layer.
        let needs_act = |idx: usize| idx != last_affine;
        match *spec {
            LayerSpec::Conv { filters, k1, k2 } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::Parse(format!(
                        "convolution needs a [c, h, w] input, has {shape:?}"
                    )));
                };
                if h < k1 || w < k2 {
                    return Err(Error::Parse(format!(
                        "{k1}x{k2} kernel does not fit a {h}x{w} input"
                    )));
                }
                let (ho, wo) = (h - k1 + 1, w - k2 + 1);
                conv_count += 1;
                layers.push(Layer::Affine(AffineLayer::new(
                    format!("conv{conv_count}"),
                    LayerParams::conv(c, filters, k1, k2, ho * wo),
                )));
                shape = vec![filters, ho, wo];
                if specs.get(i + 1) != Some(&LayerSpec::BatchNorm) && needs_act(i) {
                    layers.push(Layer::act(ActKind::Relu));
                }
            }
            LayerSpec::Pool { k } => {
                layers.push(Layer::pool(k));
                let [c, h, w] = shape[..] else {
                    return Err(Error::Parse(format!(
                        "pooling needs a [c, h, w] input, has {shape:?}"
                    )));
                };
                if h % k != 0 || w % k != 0 {
                    return Err(Error::Parse(format!(
                        "{k}x{k} pooling does not tile a {h}x{w} input"
                    )));
                }
                shape = vec![c, h / k, w / k];
            }
            LayerSpec::Dense { units } => {
                if shape.len() > 1 {
                    layers.push(Layer::flatten());
                    shape = vec![shape.iter().product()];
                }
                fc_count += 1;
                layers.push(Layer::Affine(AffineLayer::new(
                    format!("fc{fc_count}"),
                    LayerParams::dense(shape[0], units),
                )));
                shape = vec![units];
                if specs.get(i + 1) != Some(&LayerSpec::BatchNorm) && needs_act(i) {
                    layers.push(Layer::act(ActKind::Relu));
                }
            }
            LayerSpec::BatchNorm => {
                bn_count += 1;
                layers.push(Layer::Norm(NormLayer::new(
                    format!("bn{bn_count}"),
                    shape[0],
                )));
                if i > 0 && needs_act(i - 1) {
                    layers.push(Layer::act(ActKind::Relu));
                }
            }
        }
    }
    Network::new(input_shape.to_vec(), layers)
}

pub const REFERENCE_ARCH: &str = "C6(5x5)-P(2x2)-C16(5x5)-P(2x2)-F120-F84-F10";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format_round_trip() {
        for s in [
            REFERENCE_ARCH,
            "F30-F10",
            "C4(3x3)-BN-P(2x2)-F10",
            "C4(3x2)-F10",
            "F20-BN-F10",
        ] {
            let specs = parse_architecture(s).unwrap();
            assert_eq!(format_architecture(&specs), s);
            assert_eq!(
                parse_architecture(&format_architecture(&specs)).unwrap(),
                specs
            );
        }
    }

    #[test]
    fn malformed_strings_are_rejected() {
        for s in [
            "",
            "C6",
            "C6(5x5",
            "C6(5xq)",
            "C0(3x3)-F10",
            "P(2x3)",
            "BN-F10",
            "P(2x2)-BN",
            "G10",
            "F0",
        ] {
            assert!(parse_architecture(s).is_err(), "accepted '{s}'");
        }
    }

    #[test]
    fn reference_network_has_the_expected_geometry() {
        let specs = parse_architecture(REFERENCE_ARCH).unwrap();
        let net = build_network(&specs, &[3, 32, 32]).unwrap();
        assert_eq!(net.output_shape().unwrap(), vec![10]);

        let affine: Vec<_> = net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::Affine(a) => Some(a),
                _ => None,
            })
            .collect();
        assert_eq!(affine.len(), 5);
        assert_eq!(affine[0].name, "conv1");
        assert_eq!(affine[0].params.sharing, 28 * 28);
        assert_eq!(affine[1].name, "conv2");
        assert_eq!(affine[1].params.fanin(), 150);
        assert_eq!(affine[1].params.sharing, 100);
        assert_eq!(affine[2].name, "fc1");
        assert_eq!(affine[2].params.fanin(), 400);
        assert_eq!(affine[3].params.fanout, 84);
        assert_eq!(affine[4].params.fanout, 10);

        // One flatten before fc1, a ReLU after every affine except the last.
        assert_eq!(
            net.layers
                .iter()
                .filter(|l| matches!(l, Layer::Flatten { .. }))
                .count(),
            1
        );
        assert_eq!(
            net.layers
                .iter()
                .filter(|l| matches!(l, Layer::Act { .. }))
                .count(),
            4
        );
        assert!(matches!(net.layers.last(), Some(Layer::Affine(a)) if a.name == "fc3"));
    }

    #[test]
    fn batchnorm_sits_between_affine_and_activation() {
        let specs = parse_architecture("C4(3x3)-BN-P(2x2)-F10").unwrap();
        let net = build_network(&specs, &[1, 8, 8]).unwrap();
        assert!(matches!(&net.layers[0], Layer::Affine(a) if a.name == "conv1"));
        assert!(matches!(&net.layers[1], Layer::Norm(n) if n.name == "bn1"));
        assert!(matches!(&net.layers[2], Layer::Act { .. }));
        assert!(matches!(&net.layers[3], Layer::Pool { .. }));
    }

    #[test]
    fn with_batchnorm_covers_all_but_the_head() {
        let specs = parse_architecture(REFERENCE_ARCH).unwrap();
        let bn = with_batchnorm(&specs);
        assert_eq!(
            format_architecture(&bn),
            "C6(5x5)-BN-P(2x2)-C16(5x5)-BN-P(2x2)-F120-BN-F84-BN-F10"
        );
        // Re-application changes nothing.
        assert_eq!(with_batchnorm(&bn), bn);
        build_network(&bn, &[3, 32, 32]).unwrap();
    }

    #[test]
    fn dense_after_dense_does_not_reflatten() {
        let specs = parse_architecture("F20-F10").unwrap();
        let net = build_network(&specs, &[6]).unwrap();
        assert!(net
            .layers
            .iter()
            .all(|l| !matches!(l, Layer::Flatten { .. })));
        assert_eq!(net.output_shape().unwrap(), vec![10]);
    }
}
