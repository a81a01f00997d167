//! Module ablation grid: rows (a)-(g) over toggle combinations and seeds.

use crate::config::{Toggles, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{run, EpochObserver, EvalReport};
use std::fmt::Write as _;

/// Row letters with their `(fgf, cra, lls)` switches. Every row but the
/// baseline also crops.
pub const ROWS: [(char, bool, bool, bool); 7] = [
    ('a', false, false, false),
    ('b', true, false, false),
    ('c', false, true, false),
    ('d', false, false, true),
    ('e', true, false, true),
    ('f', false, true, true),
    ('g', true, true, true),
];

pub fn row_toggles(id: char) -> Option<Toggles> {
    ROWS.iter().find(|r| r.0 == id).map(|&(id, fgf, cra, lls)| Toggles {
        fgf,
        cra,
        lls,
        crop: id != 'a',
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub base: TrainConfig,
    #[serde(default = "all_rows")]
    pub rows: Vec<char>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn all_rows() -> Vec<char> {
    ROWS.iter().map(|r| r.0).collect()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl AblationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg.split('`').nth(1).map_or_else(|| "<document>".to_string(), str::to_string);
            Error::Config { field, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.rows.is_empty() {
            return Err(Error::config("rows", "empty grid"));
        }
        if let Some(r) = self.rows.iter().find(|&&r| row_toggles(r).is_none()) {
            return Err(Error::config("rows", format!("unknown row `{r}`, expected one of a-g")));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Config for one cell: the row's toggles, the seed for weights and
    /// counterfactual draws. The data seed stays fixed so every cell sees
    /// the same images.
    pub fn cell(&self, row: char, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.toggles = row_toggles(row).expect("validated row");
        cfg.seeds.weights = seed;
        cfg.seeds.counterfactual = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub top1: f64,
    pub top5: f64,
    pub stage1_top1: f64,
    pub counterfactual_gap: Option<f64>,
    pub localization: Option<f64>,
}

impl From<&EvalReport> for CellMetrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            top1: r.top1,
            top5: r.top5,
            stage1_top1: r.stage1_top1,
            counterfactual_gap: r.counterfactual_gap,
            localization: r.localization,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub row: char,
    pub seed: u64,
    /// Failure message when the run aborted.
    pub result: std::result::Result<CellMetrics, String>,
}

/// Runs every `(row, seed)` cell in order. A failing cell is recorded and the
/// grid continues. `progress` sees each finished epoch; `done` each cell.
pub fn run_ablation(
    cfg: &AblationConfig,
    train: &Dataset,
    test: &Dataset,
    progress: &mut dyn EpochObserver,
    done: &mut dyn FnMut(&Cell),
) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &row in &cfg.rows {
        for &seed in &cfg.seeds {
            let result = run(&cfg.cell(row, seed), train, test, progress)
                .map(|o| CellMetrics::from(&o.final_eval))
                .map_err(|e| e.to_string());
            let cell = Cell { row, seed, result };
            done(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Per-row arithmetic means over successful seeds: `(row, top1, top5)`.
pub fn row_means(cells: &[Cell]) -> Vec<(char, Option<(f64, f64)>)> {
    let mut rows: Vec<char> = Vec::new();
    for c in cells {
        if !rows.contains(&c.row) {
            rows.push(c.row);
        }
    }
    rows.into_iter()
        .map(|row| {
            let ok: Vec<&CellMetrics> = cells.iter().filter(|c| c.row == row).filter_map(|c| c.result.as_ref().ok()).collect();
            let n = ok.len() as f64;
            let mean = (!ok.is_empty()).then(|| (ok.iter().map(|m| m.top1).sum::<f64>() / n, ok.iter().map(|m| m.top5).sum::<f64>() / n));
            (row, mean)
        })
        .collect()
}

pub const CSV_HEADER: &str = "row,fgf,cra,lls,crop,seed,top1,top5,stage1_top1,counterfactual_gap,localization,error";

/// One line per cell, then one `mean` line per row.
pub fn to_csv(cells: &[Cell]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let flags = |row: char| {
        let t = row_toggles(row).expect("known row");
        format!("{},{},{},{}", t.fgf as u8, t.cra as u8, t.lls as u8, t.crop as u8)
    };
    let mut out = format!("{CSV_HEADER}\n");
    for c in cells {
        let _ = match &c.result {
            Ok(m) => writeln!(
                out,
                "{},{},{},{},{},{},{},{},",
                c.row,
                flags(c.row),
                c.seed,
                m.top1,
                m.top5,
                m.stage1_top1,
                opt(m.counterfactual_gap),
                opt(m.localization)
            ),
            Err(e) => writeln!(out, "{},{},{},,,,,,{}", c.row, flags(c.row), c.seed, e.replace([',', '\n'], ";")),
        };
    }
    for (row, mean) in row_means(cells) {
        let (t1, t5) = mean.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        let _ = writeln!(out, "{row},{},mean,{t1},{t5},,,,", flags(row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(row: char, seed: u64, top1: f64) -> Cell {
        Cell {
            row,
            seed,
            result: Ok(CellMetrics {
                top1,
                top5: 1.0,
                stage1_top1: top1,
                counterfactual_gap: None,
                localization: None,
            }),
        }
    }

    #[test]
    fn rows_a_and_g_are_the_extremes() {
        let a = row_toggles('a').unwrap();
        assert!(!a.fgf && !a.cra && !a.lls && !a.crop);
        let g = row_toggles('g').unwrap();
        assert!(g.fgf && g.cra && g.lls && g.crop);
        assert!(row_toggles('h').is_none());
    }

    #[test]
    fn csv_has_a_line_per_cell_and_per_row_mean() {
        let mut cells = Vec::new();
        for (row, ..) in ROWS {
            for seed in 0..3 {
                cells.push(cell(row, seed, 0.25 * seed as f64));
            }
        }
        cells[4].result = Err("non-finite loss, at step 3".into());
        let csv = to_csv(&cells);
        assert_eq!(csv.lines().count(), 1 + 21 + 7);
        let means = row_means(&cells);
        assert_eq!(means[0], ('a', Some((0.25, 1.0))));
        assert_eq!(means[1], ('b', Some((0.25, 1.0))));
        assert!(csv.contains("b,1,0,0,1,1,,,,,,non-finite loss; at step 3"));
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), CSV_HEADER.split(',').count(), "{line}");
        }
    }

    #[test]
    fn config_rejects_unknown_rows_and_keys() {
        let err = AblationConfig::from_json(r#"{"base": {}, "rows": ["z"]}"#).unwrap_err();
        assert!(err.to_string().contains('z'), "{err}");
        let err = AblationConfig::from_json(r#"{"base": {}, "grid": 1}"#).unwrap_err();
        assert!(err.to_string().contains("grid"), "{err}");
        let c = AblationConfig::from_json(r#"{"base": {"epochs": 3}}"#).unwrap();
        assert_eq!((c.rows.len(), c.seeds.len()), (7, 3));
        assert_eq!(c.cell('c', 2).seeds.weights, 2);
        assert!(c.cell('c', 2).toggles.cra);
    }
}
