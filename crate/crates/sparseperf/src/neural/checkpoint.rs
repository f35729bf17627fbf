//! Text checkpoint for network parameters: named arrays with shapes.
//!
//! Values are written with Rust's shortest round-trip float formatting,
//! so `load(save(p))` reproduces `p` bit-exactly.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array4};

use super::{BnParams, LayerParams, NetParams};
use crate::error::{Error, Result};

const MAGIC: &str = "sparseperf-params v1";

fn write_values<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut first = true;
    for v in values {
        if first {
            write!(w, "{v}")?;
            first = false;
        } else {
            write!(w, " {v}")?;
        }
    }
    writeln!(w)?;
    Ok(())
}

/// Serialize all parameters, including batch-norm running statistics.
pub fn save_params<W: Write>(params: &NetParams, w: &mut W) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    for (li, l) in params.layers.iter().enumerate() {
        let (co, ci, kh, kw) = l.weight.dim();
        writeln!(w, "tensor layer{li}.weight 4 {co} {ci} {kh} {kw}")?;
        write_values(w, l.weight.iter().copied())?;
        writeln!(w, "tensor layer{li}.bias 1 {}", l.bias.len())?;
        write_values(w, l.bias.iter().copied())?;
        if let Some(bn) = &l.bn {
            for (name, arr) in [
                ("bn_gamma", &bn.gamma),
                ("bn_beta", &bn.beta),
                ("bn_mean", &bn.running_mean),
                ("bn_var", &bn.running_var),
            ] {
                writeln!(w, "tensor layer{li}.{name} 1 {}", arr.len())?;
                write_values(w, arr.iter().copied())?;
            }
        }
    }
    writeln!(w, "end")?;
    Ok(())
}

struct NamedArray {
    layer: usize,
    field: String,
    dims: Vec<usize>,
    values: Vec<f64>,
}

fn parse_header(line: &str) -> Result<(usize, String, Vec<usize>)> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() < 3 || parts[0] != "tensor" {
        return Err(Error::Checkpoint(format!("bad tensor header `{line}`")));
    }
    let name = parts[1];
    let (layer_part, field) = name
        .split_once('.')
        .ok_or_else(|| Error::Checkpoint(format!("bad tensor name `{name}`")))?;
    let layer: usize = layer_part
        .strip_prefix("layer")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad layer in `{name}`")))?;
    let ndim: usize = parts[2]
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad ndim in `{line}`")))?;
    if parts.len() != 3 + ndim {
        return Err(Error::Checkpoint(format!("dim count mismatch in `{line}`")));
    }
    let dims = parts[3..]
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::Checkpoint(format!("bad dim in `{line}`")))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok((layer, field.to_string(), dims))
}

/// Load a checkpoint written by [`save_params`].
pub fn load_params<R: BufRead>(r: R) -> Result<NetParams> {
    let mut lines = r.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint".to_string()))??;
    if magic.trim() != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic `{magic}`")));
    }
    let mut arrays: Vec<NamedArray> = Vec::new();
    loop {
        let header = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".to_string()))??;
        if header.trim() == "end" {
            break;
        }
        let (layer, field, dims) = parse_header(&header)?;
        let data_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint("missing value line".to_string()))??;
        let values = data_line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("bad value `{t}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let expect: usize = dims.iter().product();
        if values.len() != expect {
            return Err(Error::Checkpoint(format!(
                "layer{layer}.{field}: expected {expect} values, found {}",
                values.len()
            )));
        }
        arrays.push(NamedArray {
            layer,
            field,
            dims,
            values,
        });
    }
    let layer_count = arrays
        .iter()
        .map(|a| a.layer + 1)
        .max()
        .ok_or_else(|| Error::Checkpoint("no tensors in checkpoint".to_string()))?;
    let mut layers = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let find = |field: &str| arrays.iter().find(|a| a.layer == li && a.field == field);
        let weight = find("weight")
            .ok_or_else(|| Error::Checkpoint(format!("layer{li} missing weight")))?;
        if weight.dims.len() != 4 {
            return Err(Error::Checkpoint(format!("layer{li}.weight must be 4-d")));
        }
        let wdims = (
            weight.dims[0],
            weight.dims[1],
            weight.dims[2],
            weight.dims[3],
        );
        let weight = Array4::from_shape_vec(wdims, weight.values.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bias = find("bias")
            .ok_or_else(|| Error::Checkpoint(format!("layer{li} missing bias")))?;
        let bias = Array1::from_vec(bias.values.clone());
        let bn = match find("bn_gamma") {
            Some(g) => {
                let get = |f: &str| {
                    find(f)
                        .map(|a| Array1::from_vec(a.values.clone()))
                        .ok_or_else(|| Error::Checkpoint(format!("layer{li} missing {f}")))
                };
                Some(BnParams {
                    gamma: Array1::from_vec(g.values.clone()),
                    beta: get("bn_beta")?,
                    running_mean: get("bn_mean")?,
                    running_var: get("bn_var")?,
                })
            }
            None => None,
        };
        layers.push(LayerParams { weight, bias, bn });
    }
    Ok(NetParams { layers })
}
