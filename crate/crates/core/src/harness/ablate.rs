//! Interaction × fusion and path ablation sweeps.
//!
//! A matrix file is a run config plus four extra keys:
//!
//! ```text
//! ablate.interactions = fullfc,sum,conv1d
//! ablate.fusions = fullfc,sum,conv1d
//! ablate.paths = local,global,both
//! ablate.train = false
//! ```
//!
//! Every interaction is paired with every fusion (paths taken from the base
//! config), then every listed path setting runs with the base interaction
//! and fusion.

use std::fmt::Write as _;

use super::config::{parse_pairs, AttentionChoice, RunConfig};
use super::train::{load_dataset, train};
use crate::complexity::{count_flops, Convention};
use crate::error::{Error, Result};
use crate::pkcam::{Fusion, Interaction, Paths};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub interactions: Vec<Interaction>,
    pub fusions: Vec<Fusion>,
    pub paths: Vec<Paths>,
    pub train: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub interaction: Interaction,
    pub fusion: Fusion,
    pub paths: Paths,
    pub params: u64,
    pub flops: u64,
    pub top1: Option<f64>,
}

pub const ABLATE_HEADER: &str = "interaction,fusion,paths,params,flops,top1";

fn keywords<T: std::str::FromStr<Err = Error>>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

impl AblationMatrix {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rest = String::new();
        let (mut interactions, mut fusions, mut paths, mut train) =
            (Vec::new(), Vec::new(), Vec::new(), false);
        for (k, v, _) in parse_pairs(text)? {
            match k.as_str() {
                "ablate.interactions" => interactions = keywords(&v)?,
                "ablate.fusions" => fusions = keywords(&v)?,
                "ablate.paths" => paths = keywords(&v)?,
                "ablate.train" => {
                    train = match v.as_str() {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(Error::config(format!(
                                "ablate.train: expected true or false, got '{v}'"
                            )))
                        }
                    }
                }
                _ => writeln!(rest, "{k} = {v}").unwrap(),
            }
        }
        let mut base = RunConfig::parse(&rest)?;
        base.model.attention = AttentionChoice::Pkcam;
        let m = AblationMatrix {
            base,
            interactions,
            fusions,
            paths,
            train,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interactions.is_empty() != self.fusions.is_empty() {
            return Err(Error::Usage(
                "ablate.interactions and ablate.fusions must both be listed or both be empty"
                    .into(),
            ));
        }
        if self.cells().is_empty() {
            return Err(Error::Usage("ablation matrix has no cells".into()));
        }
        Ok(())
    }

    /// `(interaction, fusion, paths)` for every row, in output order.
    pub fn cells(&self) -> Vec<(Interaction, Fusion, Paths)> {
        let pk = self.base.model.pkcam;
        let mut cells = Vec::new();
        for &i in &self.interactions {
            for &f in &self.fusions {
                cells.push((i, f, pk.paths));
            }
        }
        for &p in &self.paths {
            cells.push((pk.interaction, pk.fusion, p));
        }
        cells
    }

    pub fn cell_config(&self, cell: (Interaction, Fusion, Paths)) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.model.pkcam.interaction = cell.0;
        cfg.model.pkcam.fusion = cell.1;
        cfg.model.pkcam.paths = cell.2;
        cfg
    }
}

/// Costs every cell on a `1×C×H×W` input under `mac1`, training each one
/// first when the matrix asks for it.
pub fn ablate(matrix: &AblationMatrix) -> Result<Vec<AblationRow>> {
    matrix.validate()?;
    let data = if matrix.train {
        Some(load_dataset(&matrix.base)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for cell in matrix.cells() {
        let cfg = matrix.cell_config(cell);
        let graph = cfg.build()?;
        let shape = [1, graph.spec.in_channels, cfg.data.height, cfg.data.width];
        let report = count_flops(&graph, shape, Convention::Mac1)?;
        let top1 = match &data {
            Some(d) => Some(train(&cfg, d, None)?.last().top1),
            None => None,
        };
        rows.push(AblationRow {
            interaction: cell.0,
            fusion: cell.1,
            paths: cell.2,
            params: report.total_params(),
            flops: report.total_flops(),
            top1,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATE_HEADER}\n");
    for r in rows {
        let top1 = r.top1.map_or(String::new(), |t| format!("{t:.6}"));
        writeln!(
            s,
            "{},{},{},{},{},{top1}",
            r.interaction, r.fusion, r.paths, r.params, r.flops
        )
        .unwrap();
    }
    s
}
