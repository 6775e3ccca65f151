use std::fmt::Write as _;

use serde::Serialize;

use crate::losses::LossBreakdown;

pub const CSV_HEADER: &str = "epoch,step,loss_total,loss_sim,loss_decorr,loss_decorr_on,loss_decorr_off,\
loss_contrastive,loss_action,loss_recon,feat_rank,cos_k1,cos_k3,cos_k5,wall_secs";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: LossBreakdown,
    pub feature_rank: usize,
    /// Mean cosine at lags 1, 3 and 5; `None` when trajectories are too short.
    pub cos: [Option<f64>; 3],
    /// Elapsed seconds; omitted in deterministic mode.
    pub wall_secs: Option<f64>,
}

fn cell(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        write!(out, "{v}").expect("writing to a String");
    }
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let mut s = format!("{},{},", self.epoch, self.step);
        for v in [
            Some(l.total),
            l.sim,
            Some(l.decorr),
            Some(l.decorr_on_diag),
            Some(l.decorr_off_diag),
            l.contrastive,
            l.action,
            l.recon,
        ] {
            cell(&mut s, v);
            s.push(',');
        }
        write!(s, "{},", self.feature_rank).expect("writing to a String");
        for c in self.cos {
            cell(&mut s, c);
            s.push(',');
        }
        cell(&mut s, self.wall_secs);
        s
    }
}

/// One parsed CSV row: column name to optional value.
pub fn parse_csv(text: &str) -> Vec<Vec<(String, Option<f64>)>> {
    let mut lines = text.lines();
    let Some(header) = lines.next() else { return Vec::new() };
    let cols: Vec<&str> = header.split(',').collect();
    lines
        .map(|line| {
            cols.iter()
                .zip(line.split(','))
                .map(|(c, v)| (c.to_string(), if v.is_empty() { None } else { v.parse().ok() }))
                .collect()
        })
        .collect()
}
