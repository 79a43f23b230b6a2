//! CSV trace output: one row per timestep, floats in 17 significant digits
//! so values round-trip exactly.

use std::io::{self, Write};

use cloud_uzawa::{TraceRecord, TraceSink};

pub fn header(n: usize, m: usize) -> String {
    let mut cols = vec!["timestep".to_string(), "phase".to_string()];
    cols.extend((1..=n).map(|i| format!("x_c{i}")));
    cols.extend((1..=m).map(|j| format!("mu_c{j}")));
    cols.extend((1..=n).map(|i| format!("own{i}")));
    cols.push("V".into());
    cols.push("in_ball".into());
    cols.join(",")
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvTrace<W: Write> {
    out: W,
}

impl<W: Write> CsvTrace<W> {
    pub fn new(mut out: W, n: usize, m: usize) -> io::Result<Self> {
        writeln!(out, "{}", header(n, m))?;
        Ok(CsvTrace { out })
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> TraceSink for CsvTrace<W> {
    fn record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        write!(self.out, "{},{}", rec.timestep, rec.phase.as_str())?;
        for v in rec.x_c.iter().chain(&rec.mu_c).chain(&rec.own_states) {
            write!(self.out, ",{}", fmt_f64(*v))?;
        }
        let v = rec.v.map(fmt_f64).unwrap_or_default();
        let in_ball = rec.in_ball.map(|b| if b { "1" } else { "0" }).unwrap_or_default();
        writeln!(self.out, ",{v},{in_ball}")
    }
}
