//! Sampled closed-loop time series and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid_model::StateVec;
use crate::multiphase::Phase;

pub const TRACE_CSV_HEADER: &str = "t,f_hz,g,l,p,u,w,phase";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: StateVec,
    /// Participation applied over `[t, t + tau)`.
    pub u: f64,
    /// Hz-scaled loss over the same interval.
    pub w: f64,
    pub phase: Phase,
}

/// Uniformly sampled run; sample `k` sits at `k·tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub tau: f64,
    pub f_nom: f64,
    pub samples: Vec<Sample>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Absolute frequency of sample `k` in Hz.
    pub fn f_hz(&self, k: usize) -> f64 {
        self.samples[k].x.f() + self.f_nom
    }

    pub fn min_f_hz(&self) -> f64 {
        (0..self.len()).map(|k| self.f_hz(k)).fold(f64::INFINITY, f64::min)
    }

    pub fn final_f_hz(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.f_hz(self.len() - 1))
    }

    /// Time of the first sample at or after which the predicate holds on
    /// every remaining sample.
    pub fn settle_time(&self, mut pred: impl FnMut(f64) -> bool) -> Option<f64> {
        let mut first = None;
        for k in 0..self.len() {
            if pred(self.f_hz(k)) {
                first.get_or_insert(self.samples[k].t);
            } else {
                first = None;
            }
        }
        first
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.len() + 1));
        out.push_str(TRACE_CSV_HEADER);
        out.push('\n');
        for (k, s) in self.samples.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.t,
                self.f_hz(k),
                s.x.g(),
                s.x.l(),
                s.x.p(),
                s.u,
                s.w,
                s.phase.as_str()
            );
        }
        out
    }

    /// Parses the CSV written by [`Trace::to_csv`].
    ///
    /// Leading `#` comment lines are skipped. The sampling period is
    /// recovered from the first two timestamps.
    pub fn from_csv(text: &str, f_nom: f64) -> Result<Trace> {
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Format("empty trace file".into()))?;
        if header.trim() != TRACE_CSV_HEADER {
            return Err(Error::Format(format!("unexpected trace header `{header}`")));
        }
        let mut samples = Vec::new();
        for (no, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::Format(format!("data line {}: expected 8 fields", no + 1)));
            }
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("data line {}: field {}: {e}", no + 1, i + 1)))
            };
            let f_hz = num(1)?;
            samples.push(Sample {
                t: num(0)?,
                x: StateVec::new(f_hz - f_nom, num(2)?, num(3)?, num(4)?),
                u: num(5)?,
                w: num(6)?,
                phase: fields[7].parse()?,
            });
        }
        let tau = match samples.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => 1.0,
        };
        Ok(Trace { tau, f_nom, samples })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path, f_nom: f64) -> Result<Trace> {
        Trace::from_csv(&std::fs::read_to_string(path)?, f_nom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, f: f64, phase: Phase) -> Sample {
        Sample {
            t,
            x: StateVec::new(f, 0.1, 0.2, 0.3),
            u: 0.25,
            w: 4.8,
            phase,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let tr = Trace {
            tau: 0.25,
            f_nom: 50.0,
            samples: vec![
                sample(0.0, 0.0, Phase::NoControl),
                sample(0.25, -0.312345678901, Phase::C1),
                sample(0.5, -0.2, Phase::C2),
                sample(0.75, -0.1, Phase::FixedControl),
            ],
        };
        let csv = tr.to_csv();
        assert!(csv.starts_with("t,f_hz,g,l,p,u,w,phase\n"));
        assert!(csv.contains(",c1\n") && csv.contains(",fixed\n"));
        let back = Trace::from_csv(&csv, 50.0).unwrap();
        for k in 0..tr.len() {
            assert_eq!(back.f_hz(k), tr.f_hz(k));
            assert_eq!(back.samples[k].phase, tr.samples[k].phase);
        }
        assert_eq!(back.tau, 0.25);
        let tagged = crate::io::with_hash_comment("feed", &csv);
        assert_eq!(Trace::from_csv(&tagged, 50.0).unwrap(), back);
    }

    #[test]
    fn rejects_bad_header() {
        assert!(Trace::from_csv("a,b\n1,2\n", 50.0).is_err());
    }

    #[test]
    fn settle_time_finds_last_entry() {
        let fs = [-0.5, -0.1, -0.5, -0.1, -0.05];
        let tr = Trace {
            tau: 1.0,
            f_nom: 50.0,
            samples: fs
                .iter()
                .enumerate()
                .map(|(k, f)| sample(k as f64, *f, Phase::NoControl))
                .collect(),
        };
        assert_eq!(tr.settle_time(|f| f > 49.8), Some(3.0));
        assert_eq!(tr.settle_time(|f| f > 51.0), None);
    }
}
