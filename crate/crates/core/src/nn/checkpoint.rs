//! Binary checkpoint format.
//!
//! ```text
//! ITTACKPT 1\n
//! <group-tag> <name> <dims, comma separated, or "-" for a scalar>\n
//! <numel little-endian f64 values>
//! ... one record per tensor ...
//! END\n
//! ```
//! Normalization buffers are stored under the extractor tag.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{
    hex, AdaptiveBlock, DimwiseStack, ExtractorBlock, Group, Linear, Network, WeightSubnetwork,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ITTACKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub group: Group,
    pub name: String,
    pub tensor: Tensor,
}

/// Serialized model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        let mut records: Vec<Record> = net
            .params()
            .into_iter()
            .map(|(k, t)| Record {
                group: k.group,
                name: k.name,
                tensor: t.clone(),
            })
            .collect();
        for (i, b) in net.blocks.iter().enumerate() {
            let buf = |name: &str, t: Tensor| Record {
                group: Group::Extractor,
                name: format!("extractor.{i}.{name}"),
                tensor: t,
            };
            records.push(buf("running_mean", b.running_mean.clone()));
            records.push(buf("running_var", b.running_var.clone()));
            records.push(buf("inst_mu", Tensor::scalar(b.inst_mu)));
            records.push(buf("inst_sigma", Tensor::scalar(b.inst_sigma)));
        }
        Self { records }
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.find(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn find(&self, name: &str) -> Option<&Tensor> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| &r.tensor)
    }

    fn count_prefixed(&self, prefix: &str, suffix: &str) -> usize {
        let mut n = 0;
        while self.find(&format!("{prefix}{n}{suffix}")).is_some() {
            n += 1;
        }
        n
    }

    pub fn to_network(&self) -> Result<Network> {
        let blocks_n = self.count_prefixed("extractor.", ".weight");
        if blocks_n == 0 {
            return Err(Error::MissingParam("extractor.0.weight".into()));
        }
        let mut blocks = Vec::with_capacity(blocks_n);
        for i in 0..blocks_n {
            let p = |n: &str| format!("extractor.{i}.{n}");
            let norm = match (self.find(&p("gamma")), self.find(&p("beta"))) {
                (Some(g), Some(b)) => Some((g.clone(), b.clone())),
                _ => None,
            };
            blocks.push(ExtractorBlock {
                weight: self.get(&p("weight"))?.clone(),
                bias: self.get(&p("bias"))?.clone(),
                norm,
                running_mean: self.get(&p("running_mean"))?.clone(),
                running_var: self.get(&p("running_var"))?.clone(),
                inst_mu: self.get(&p("inst_mu"))?.item(),
                inst_sigma: self.get(&p("inst_sigma"))?.item(),
            });
        }
        let linear = |prefix: &str| -> Result<Linear> {
            Ok(Linear {
                weight: self.get(&format!("{prefix}.weight"))?.clone(),
                bias: self.get(&format!("{prefix}.bias"))?.clone(),
            })
        };
        let stack = |prefix: &str| -> Result<DimwiseStack> {
            let n = self.count_prefixed(prefix, ".a");
            let layers = (0..n)
                .map(|l| {
                    Ok((
                        self.get(&format!("{prefix}{l}.a"))?.clone(),
                        self.get(&format!("{prefix}{l}.b"))?.clone(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DimwiseStack { layers })
        };
        let adapters = (0..blocks_n)
            .map(|i| {
                let s = stack(&format!("adapter.{i}."))?;
                Ok((!s.layers.is_empty()).then_some(AdaptiveBlock {
                    stack: s,
                    enabled: true,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network {
            blocks,
            classifier: linear("classifier")?,
            rotation: linear("rotation")?,
            fw: WeightSubnetwork {
                stack: stack("fw.")?,
            },
            adapters,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        for r in &self.records {
            let dims = if r.tensor.rank() == 0 {
                "-".to_string()
            } else {
                r.tensor
                    .shape()
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            writeln!(w, "{} {} {}", r.group.tag(), r.name, dims)?;
            for v in r.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        writeln!(w, "END")?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                expected: CHECKPOINT_MAGIC.into(),
                found: line.trim_end().chars().take(32).collect(),
            });
        }
        let mut records = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format {
                    expected: "record or END".into(),
                    found: "end of file".into(),
                });
            }
            if !line.ends_with('\n') {
                return Err(Error::Format {
                    expected: "newline-terminated record header".into(),
                    found: "truncated file".into(),
                });
            }
            let header = line.trim_end_matches('\n');
            if header == "END" {
                break;
            }
            let parts: Vec<&str> = header.split(' ').collect();
            let bad = || Error::Format {
                expected: "`<group> <name> <dims>`".into(),
                found: header.chars().take(64).collect(),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            let group = Group::from_tag(parts[0]).ok_or_else(bad)?;
            let shape: Vec<usize> = if parts[2] == "-" {
                Vec::new()
            } else {
                parts[2]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?
            };
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|_| Error::Format {
                expected: format!("{} payload bytes for `{}`", n * 8, parts[1]),
                found: "truncated file".into(),
            })?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(Record {
                group,
                name: parts[1].to_string(),
                tensor: Tensor::new(shape, data)?,
            });
        }
        Ok(Self { records })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    /// SHA-256 of the serialized bytes.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
