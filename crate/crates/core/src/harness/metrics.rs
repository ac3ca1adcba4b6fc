use std::fmt::Write as _;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

pub const CSV_HEADER: &str = "step,phase,loss,reward_mean,released_frac,dev_ter,dev_nll";

#[derive(Clone, Debug, PartialEq)]
pub enum MetricsRow {
    Train {
        step: usize,
        loss: f64,
        reward_mean: f64,
        released_frac: f64,
    },
    Eval {
        step: usize,
        ter: Option<f64>,
        nll: f64,
    },
}

/// In-memory metrics, rendered as CSV on demand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, Option<f64>, f64)> + '_ {
        self.rows.iter().filter_map(|r| match *r {
            MetricsRow::Eval { step, ter, nll } => Some((step, ter, nll)),
            _ => None,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            match r {
                MetricsRow::Train {
                    step,
                    loss,
                    reward_mean,
                    released_frac,
                } => writeln!(out, "{step},train,{loss:.6},{reward_mean:.6},{released_frac:.4},,"),
                MetricsRow::Eval { step, ter, nll } => {
                    let ter = ter.map(|v| format!("{v:.6}")).unwrap_or_default();
                    writeln!(out, "{step},eval,,,,{ter},{nll:.6}")
                }
            }
            .expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_counts_once() {
        assert_eq!(edit_distance(&['a', 'b', 'c'], &['a', 'x', 'c']), 1);
        assert_eq!(edit_distance::<char>(&['a', 'b', 'c'], &[]), 3);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2], &[2, 1, 2]), 1);
    }

    #[test]
    fn csv_shape() {
        let mut m = MetricsLog::default();
        m.push(MetricsRow::Eval {
            step: 10,
            ter: Some(0.5),
            nll: 1.25,
        });
        assert_eq!(m.to_csv(), format!("{CSV_HEADER}\n10,eval,,,,0.500000,1.250000\n"));
    }
}
