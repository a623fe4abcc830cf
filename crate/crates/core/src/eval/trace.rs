//! Knowledge-selection traces and their CSV / PGM exports.
//!
//! The CSV has one row per (decoding step, background position) followed by
//! one `global` row per window carrying the window distribution. The PGM is a
//! plain-text graymap with one row per decoding step and one column per
//! background position.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::data::targets::windows;
use crate::error::{GlksError, Result};
use crate::model::Generation;

#[derive(Clone, Debug, PartialEq)]
pub struct KSTrace {
    pub background: Vec<String>,
    pub windows: Vec<Range<usize>>,
    /// Pointer distribution per decoding step, `T × |K|`.
    pub alpha: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
    /// Global window distribution, absent without global selection.
    pub unit_dist: Option<Vec<f64>>,
    pub gold_span: Option<(usize, usize)>,
}

const GLOBAL: &str = "global";

impl KSTrace {
    pub fn from_generation(
        background: &[String],
        m: usize,
        gen: &Generation,
        gold_span: Option<(usize, usize)>,
    ) -> Self {
        KSTrace {
            background: background.to_vec(),
            windows: windows(background.len(), m),
            alpha: gen.alpha.clone(),
            gate: gen.gate.clone(),
            unit_dist: gen.unit_dist.clone(),
            gold_span,
        }
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn in_gold(&self, r: Range<usize>) -> bool {
        self.gold_span
            .is_some_and(|(s, e)| r.start < e && s < r.end)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let gold = self.gold_span.is_some();
        let mut header = vec!["step", "position", "token", "alpha", "gate"];
        if gold {
            header.push("gold");
        }
        out.write_record(&header)?;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        for (t, row) in self.alpha.iter().enumerate() {
            for (i, a) in row.iter().enumerate() {
                let mut rec = vec![
                    t.to_string(),
                    i.to_string(),
                    self.background[i].clone(),
                    format!("{a}"),
                    format!("{}", self.gate[t]),
                ];
                if gold {
                    rec.push(flag(self.in_gold(i..i + 1)));
                }
                out.write_record(&rec)?;
            }
        }
        for (w, r) in self.windows.iter().enumerate() {
            let mut rec = vec![
                GLOBAL.to_string(),
                w.to_string(),
                self.background[r.clone()].join(" "),
                self.unit_dist
                    .as_ref()
                    .map_or(String::new(), |p| format!("{}", p[w])),
                String::new(),
            ];
            if gold {
                rec.push(flag(self.in_gold(r.clone())));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let bad = |message: String| GlksError::Parse {
            location: "trace csv".into(),
            message,
        };
        let mut rdr = csv::Reader::from_reader(r);
        let has_gold = rdr.headers()?.iter().any(|h| h == "gold");
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let idx = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));

        let mut alpha: Vec<Vec<f64>> = Vec::new();
        let mut gate: Vec<f64> = Vec::new();
        let mut gold_positions: Vec<usize> = Vec::new();
        let mut background = Vec::new();
        let mut wins = Vec::new();
        let mut unit: Vec<Option<f64>> = Vec::new();
        let mut gold_windows: Vec<usize> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| {
                rec.get(i)
                    .ok_or_else(|| bad(format!("short record {rec:?}")))
            };
            if field(0)? == GLOBAL {
                let start = background.len();
                background.extend(field(2)?.split(' ').map(String::from));
                wins.push(start..background.len());
                let a = field(3)?;
                unit.push(if a.is_empty() { None } else { Some(num(a)?) });
                if has_gold && field(5)? == "1" {
                    gold_windows.push(wins.len() - 1);
                }
                continue;
            }
            let t = idx(field(0)?)?;
            let i = idx(field(1)?)?;
            if t == alpha.len() {
                alpha.push(Vec::new());
                gate.push(num(field(4)?)?);
            }
            if t + 1 != alpha.len() || i != alpha[t].len() {
                return Err(bad(format!("rows out of order at step {t}, position {i}")));
            }
            alpha[t].push(num(field(3)?)?);
            if t == 0 && has_gold && field(5)? == "1" {
                gold_positions.push(i);
            }
        }
        let unit_dist = if unit.iter().all(Option::is_some) && !unit.is_empty() {
            Some(unit.into_iter().map(|u| u.expect("checked")).collect())
        } else {
            None
        };
        let gold_span = if !has_gold {
            None
        } else if !alpha.is_empty() {
            match (gold_positions.first(), gold_positions.last()) {
                (Some(&s), Some(&e)) => Some((s, e + 1)),
                _ => None,
            }
        } else {
            // without decoding steps the span is only known to window precision
            match (gold_windows.first(), gold_windows.last()) {
                (Some(&s), Some(&e)) => Some((wins[s].start, wins[e].end)),
                _ => None,
            }
        };
        Ok(KSTrace {
            background,
            windows: wins,
            alpha,
            gate,
            unit_dist,
            gold_span,
        })
    }

    /// Plain (P2) graymap, width `|K|`, height `T`, brightness proportional
    /// to `α` relative to the largest value in the trace.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.background.len();
        let max = self.alpha.iter().flatten().copied().fold(0.0f64, f64::max);
        writeln!(w, "P2")?;
        writeln!(w, "{k} {}", self.alpha.len())?;
        writeln!(w, "255")?;
        for row in &self.alpha {
            let px: Vec<String> = row
                .iter()
                .map(|&a| {
                    let v = if max > 0.0 {
                        (255.0 * a / max).round()
                    } else {
                        0.0
                    };
                    (v as u32).to_string()
                })
                .collect();
            writeln!(w, "{}", px.join(" "))?;
        }
        Ok(())
    }

    /// Writes `{stem}.csv` and `{stem}.pgm` into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let pgm_path = dir.join(format!("{stem}.pgm"));
        self.write_csv(BufWriter::new(File::create(&csv_path)?))?;
        let mut pgm = BufWriter::new(File::create(&pgm_path)?);
        self.write_pgm(&mut pgm)?;
        pgm.flush()?;
        Ok((csv_path, pgm_path))
    }
}

/// A parsed plain graymap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub pixels: Vec<u32>,
}

pub fn read_pgm(text: &str) -> Result<Graymap> {
    let bad = |message: &str| GlksError::Parse {
        location: "pgm".into(),
        message: message.into(),
    };
    let mut it = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if it.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut next = || -> Result<u32> {
        it.next()
            .ok_or_else(|| bad("truncated"))?
            .parse()
            .map_err(|_| bad("non-numeric value"))
    };
    let width = next()? as usize;
    let height = next()? as usize;
    let maxval = next()?;
    let pixels = (0..width * height)
        .map(|_| next())
        .collect::<Result<Vec<_>>>()?;
    if pixels.iter().any(|&p| p > maxval) {
        return Err(bad("pixel exceeds maxval"));
    }
    Ok(Graymap {
        width,
        height,
        maxval,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(gold: Option<(usize, usize)>) -> KSTrace {
        let background: Vec<String> = "the movie , was \"great\" fun"
            .split(' ')
            .map(String::from)
            .collect();
        KSTrace {
            windows: windows(background.len(), 4),
            background,
            alpha: vec![
                vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.2],
                vec![1.0 / 3.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
            ],
            gate: vec![0.25, 0.123456789012345],
            unit_dist: Some(vec![0.7, 0.3]),
            gold_span: gold,
        }
    }

    #[test]
    fn csv_round_trip_and_row_count() {
        for gold in [None, Some((1, 3))] {
            let t = trace(gold);
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert_eq!(text.lines().count() - 1, 2 * 6 + 2);
            assert_eq!(
                text.lines().next().unwrap().ends_with(",gold"),
                gold.is_some()
            );
            assert_eq!(KSTrace::read_csv(buf.as_slice()).unwrap(), t);
        }
    }

    #[test]
    fn missing_global_distribution_round_trips() {
        let mut t = trace(None);
        t.unit_dist = None;
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(KSTrace::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn pgm_dimensions() {
        let t = trace(None);
        let mut buf = Vec::new();
        t.write_pgm(&mut buf).unwrap();
        let g = read_pgm(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!((g.width, g.height, g.maxval), (6, 2, 255));
        assert_eq!(g.pixels[6], 255);
        assert_eq!(g.pixels[1], 153);
    }

    #[test]
    fn export_writes_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let (c, p) = trace(Some((0, 2))).export(dir.path(), "episode_0").unwrap();
        assert!(c.exists() && p.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 2);
    }
}
