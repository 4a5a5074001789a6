//! Plain-text model checkpoints.
//!
//! ```text
//! gradmark-checkpoint v1
//! segment bottom 2
//! layer 32 64 relu
//! layer 64 64 relu
//! segment middle 1
//! layer 64 64 relu
//! segment head 1
//! layer 64 10 identity
//! params 7434
//! <one value per line: each layer's weights row-major, then its bias,
//!  bottom → middle → head>
//! end
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so writing the same model
//! twice gives identical bytes and reading restores every bit.

use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, Layer, LayerSpec, Segment, SplitModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &str = "gradmark-checkpoint v1";
const SEGMENTS: [&str; 3] = ["bottom", "middle", "head"];

impl SplitModel {
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let segments = [&self.bottom, &self.middle, &self.head];
        for (name, seg) in SEGMENTS.iter().zip(segments) {
            let _ = writeln!(out, "segment {name} {}", seg.layers().len());
            for l in seg.layers() {
                let _ = writeln!(
                    out,
                    "layer {} {} {}",
                    l.spec.in_dim,
                    l.spec.out_dim,
                    l.spec.activation.name()
                );
            }
        }
        let count: usize = segments.iter().map(|s| s.parameter_count()).sum();
        let _ = writeln!(out, "params {count}");
        for seg in segments {
            for t in seg.tensors() {
                for v in t.as_slice() {
                    let _ = writeln!(out, "{v:?}");
                }
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != MAGIC {
            return Err(Error::Parse {
                line,
                message: format!("not a checkpoint (expected `{MAGIC}`)"),
            });
        }

        let mut all_specs: Vec<Vec<LayerSpec>> = Vec::new();
        for name in SEGMENTS {
            let (line, header) = next("segment header")?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            let n_layers = match parts.as_slice() {
                ["segment", n, count] if *n == name => parse_num::<usize>(count, line)?,
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected `segment {name} <layers>`"),
                    })
                }
            };
            let mut specs = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let (line, l) = next("layer line")?;
                let parts: Vec<&str> = l.split_whitespace().collect();
                match parts.as_slice() {
                    ["layer", i, o, act] => {
                        let activation = Activation::parse(act).ok_or_else(|| Error::Parse {
                            line,
                            message: format!("unknown activation `{act}`"),
                        })?;
                        specs.push(LayerSpec::new(parse_num(i, line)?, parse_num(o, line)?, activation));
                    }
                    _ => {
                        return Err(Error::Parse {
                            line,
                            message: "expected `layer <in> <out> <activation>`".into(),
                        })
                    }
                }
            }
            all_specs.push(specs);
        }

        let (line, header) = next("params header")?;
        let expected: usize = all_specs
            .iter()
            .flatten()
            .map(|s| s.in_dim * s.out_dim + s.out_dim)
            .sum();
        match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["params", n] if parse_num::<usize>(n, line)? == expected => {}
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected `params {expected}`"),
                })
            }
        }

        let mut segments = Vec::with_capacity(3);
        for specs in all_specs {
            let mut layers = Vec::with_capacity(specs.len());
            for spec in specs {
                let mut read = |rows: usize, cols: usize| -> Result<Matrix> {
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows * cols {
                        let (line, v) = next("parameter value")?;
                        data.push(parse_num::<f64>(v, line)?);
                    }
                    Matrix::from_vec(rows, cols, data)
                };
                let weights = read(spec.in_dim, spec.out_dim)?;
                let bias = read(1, spec.out_dim)?;
                layers.push(Layer::from_parts(spec, weights, bias)?);
            }
            segments.push(Segment::new(layers)?);
        }
        let (line, end) = next("end marker")?;
        if end != "end" {
            return Err(Error::Parse {
                line,
                message: "expected `end`".into(),
            });
        }
        let head = segments.pop().expect("three segments");
        let middle = segments.pop().expect("three segments");
        let bottom = segments.pop().expect("three segments");
        SplitModel::new(bottom, middle, head)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{s}` as a number"),
    })
}

pub fn write_checkpoint(model: &SplitModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_string())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<SplitModel> {
    let text = std::fs::read_to_string(path)?;
    SplitModel::from_checkpoint_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{RngStream, StreamLabel};
    use crate::nn::ModelSpec;

    fn model() -> SplitModel {
        let spec = ModelSpec {
            input_dim: 3,
            bottom: vec![4, 5],
            middle: vec![4],
            n_classes: 2,
        };
        SplitModel::init(&spec, &mut RngStream::new(2, StreamLabel::ModelInit)).unwrap()
    }

    #[test]
    fn roundtrip_is_exact_and_byte_stable() {
        let m = model();
        let text = m.to_checkpoint_string();
        let back = SplitModel::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_string(), text);
    }

    #[test]
    fn corrupted_checkpoint_reports_line() {
        let text = model()
            .to_checkpoint_string()
            .replacen("layer 3 4 relu", "layer 3 4 tanh", 1);
        match SplitModel::from_checkpoint_str(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(SplitModel::from_checkpoint_str("hello").is_err());
    }
}
