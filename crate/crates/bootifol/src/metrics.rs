//! CSV outputs. Floats use the shortest representation that round-trips,
//! so repeated runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bootifol_core::interact::{EpisodeMetrics, EvalReport};
use bootifol_core::losses::LossReport;

use crate::error::{Error, Result};

/// Row-at-a-time CSV file with optional `# key=value` preamble lines.
pub struct CsvSink {
    path: PathBuf,
    out: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    pub fn create(path: &Path, preamble: &[(&str, String)], header: &[String]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = BufWriter::new(file);
        for (k, v) in preamble {
            writeln!(buf, "# {k}={v}").map_err(|e| Error::io(path, e))?;
        }
        let mut sink = Self {
            path: path.to_path_buf(),
            out: csv::Writer::from_writer(buf),
        };
        sink.row(header)?;
        Ok(sink)
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<()> {
        self.out
            .write_record(fields.iter().map(|f| f.as_ref()))
            .map_err(|e| Error::io(&self.path, e.into()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

fn strings(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

pub fn align_header() -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend(strings(&LossReport::COLUMNS));
    h
}

pub fn align_row(step: usize, r: &LossReport) -> Vec<String> {
    let mut row = vec![step.to_string()];
    row.extend(r.values().iter().map(|&v| num(v)));
    row
}

const EVAL_COLUMNS: [&str; 4] = ["eval_scaled_return", "eval_scaled_std", "eval_return", "eval_return_std"];

pub fn train_header() -> Vec<String> {
    let mut h = strings(&["episode", "step", "learned_return", "true_return", "scaled_return"]);
    h.extend(strings(&LossReport::COLUMNS));
    h.extend(strings(&EVAL_COLUMNS));
    h
}

/// Loss and evaluation columns stay empty on episodes without them.
pub fn train_row(m: &EpisodeMetrics) -> Vec<String> {
    let mut row = vec![
        m.episode.to_string(),
        m.step.to_string(),
        num(m.learned_return),
        num(m.true_return),
        num(m.scaled_return),
    ];
    match &m.encoder {
        Some(r) => row.extend(r.values().iter().map(|&v| num(v))),
        None => row.extend(std::iter::repeat(String::new()).take(LossReport::COLUMNS.len())),
    }
    match &m.eval {
        Some(e) => row.extend([e.scaled_return, e.scaled_std, e.mean_return, e.std_return].map(num)),
        None => row.extend(std::iter::repeat(String::new()).take(EVAL_COLUMNS.len())),
    }
    row
}

pub fn eval_header() -> Vec<String> {
    strings(&[
        "policy",
        "episodes",
        "return_mean",
        "return_std",
        "scaled_mean",
        "scaled_std",
        "expert_return",
        "random_return",
    ])
}

pub fn eval_row(policy: &str, e: &EvalReport) -> Vec<String> {
    vec![
        policy.to_string(),
        e.episodes.to_string(),
        num(e.mean_return),
        num(e.std_return),
        num(e.scaled_return),
        num(e.scaled_std),
        num(e.expert_return),
        num(e.random_return),
    ]
}

pub fn embedding_header(dim: usize) -> Vec<String> {
    let mut h = vec!["label".to_string()];
    h.extend((0..dim).map(|i| format!("z{i}")));
    h
}

pub fn embedding_row(label: &str, z: &[f32]) -> Vec<String> {
    let mut row = vec![label.to_string()];
    row.extend(z.iter().map(|&v| format!("{v}")));
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn align_rows_have_six_losses() {
        let r = LossReport::from_parts(1.0, 2.0, 3.0, 4.0, 0.5);
        assert_eq!(align_header().len(), 7);
        assert_eq!(align_row(3, &r), ["3", "1", "2", "3", "4", "0.5", "10.5"]);
    }

    #[test]
    fn train_rows_match_header_width() {
        let m = EpisodeMetrics {
            episode: 0,
            step: 40,
            learned_return: -3.0,
            true_return: 1.0,
            scaled_return: 0.1,
            encoder: None,
            eval: None,
        };
        assert_eq!(train_row(&m).len(), train_header().len());
    }
}
