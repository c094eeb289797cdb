//! Partition-and-compression strategies and their string notation.
//!
//! A strategy string is a space-separated token list: `P:<partition>` plus one
//! `<layer>:<technique>` per compressed layer, e.g. `P:23 18:C2 22:C1`. The
//! canonical form puts the partition first and sorts compressions by index.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::model::{LayerKind, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TechniqueId {
    F1,
    F2,
    F3,
    C1,
    C2,
    C3,
    W1,
    W2,
}

impl TechniqueId {
    pub const ALL: [TechniqueId; 8] = [
        TechniqueId::F1,
        TechniqueId::F2,
        TechniqueId::F3,
        TechniqueId::C1,
        TechniqueId::C2,
        TechniqueId::C3,
        TechniqueId::W1,
        TechniqueId::W2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TechniqueId::F1 => "F1",
            TechniqueId::F2 => "F2",
            TechniqueId::F3 => "F3",
            TechniqueId::C1 => "C1",
            TechniqueId::C2 => "C2",
            TechniqueId::C3 => "C3",
            TechniqueId::W1 => "W1",
            TechniqueId::W2 => "W2",
        }
    }

    /// Position in [`TechniqueId::ALL`].
    pub fn ordinal(self) -> usize {
        TechniqueId::ALL
            .iter()
            .position(|t| *t == self)
            .expect("listed")
    }

    /// Layer-type applicability: F* on fc, C* on conv, W1 on either, W2 on conv.
    pub fn applies_to_kind(self, kind: &LayerKind) -> bool {
        match kind {
            LayerKind::Fc { .. } => matches!(
                self,
                TechniqueId::F1 | TechniqueId::F2 | TechniqueId::F3 | TechniqueId::W1
            ),
            LayerKind::Conv { .. } => {
                matches!(
                    self,
                    TechniqueId::C1
                        | TechniqueId::C2
                        | TechniqueId::C3
                        | TechniqueId::W1
                        | TechniqueId::W2
                )
            }
            _ => false,
        }
    }
}

impl fmt::Display for TechniqueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TechniqueId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TechniqueId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown technique id {:?}", s)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Strategy {
    pub partition: usize,
    pub compressions: BTreeMap<usize, TechniqueId>,
}

impl Strategy {
    pub fn new(partition: usize) -> Self {
        Strategy {
            partition,
            compressions: BTreeMap::new(),
        }
    }

    pub fn with(mut self, index: usize, technique: TechniqueId) -> Self {
        self.compressions.insert(index, technique);
        self
    }

    /// Parses and checks the strategy against `graph`.
    pub fn parse_for(s: &str, graph: &ModelGraph) -> Result<Self> {
        let st: Strategy = s.parse()?;
        st.validate(graph)?;
        Ok(st)
    }

    /// Checks index ranges, layer-type applicability and the encoder-only rule.
    pub fn validate(&self, graph: &ModelGraph) -> Result<()> {
        let l = graph.layers.len();
        if self.partition > l {
            bail!(Parse, "partition {} out of range 0..={}", self.partition, l);
        }
        for (&idx, &tech) in &self.compressions {
            let Some(layer) = graph.layers.get(idx) else {
                bail!(Parse, "layer index {} out of range for {} layers", idx, l)
            };
            if !layer.kind.is_compressible() {
                bail!(
                    Parse,
                    "layer {} ({}) is not compressible",
                    idx,
                    layer.kind.name()
                );
            }
            if !tech.applies_to_kind(&layer.kind) {
                bail!(
                    Parse,
                    "{} does not apply to layer {} ({})",
                    tech,
                    idx,
                    layer.kind.name()
                );
            }
            if idx >= self.partition {
                bail!(
                    Parse,
                    "layer {} is not on the device side of partition {}",
                    idx,
                    self.partition
                );
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P:{}", self.partition)?;
        for (idx, tech) in &self.compressions {
            write!(f, " {}:{}", idx, tech)?;
        }
        Ok(())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut partition = None;
        let mut compressions = BTreeMap::new();
        for tok in s.split_whitespace() {
            let Some((lhs, rhs)) = tok.split_once(':') else {
                bail!(Parse, "token {:?} is not of the form <key>:<value>", tok)
            };
            if lhs == "P" {
                let p = rhs
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("bad partition {:?}", rhs)))?;
                if partition.replace(p).is_some() {
                    bail!(Parse, "partition given twice");
                }
                continue;
            }
            let idx = lhs
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad layer index {:?}", lhs)))?;
            let tech: TechniqueId = rhs.parse()?;
            if compressions.insert(idx, tech).is_some() {
                bail!(Parse, "layer {} assigned twice", idx);
            }
        }
        let Some(partition) = partition else {
            bail!(Parse, "missing P:<partition> token in {:?}", s)
        };
        Ok(Strategy {
            partition,
            compressions,
        })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
