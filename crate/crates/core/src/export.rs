//! JSON and CSV serialisation with round-trip exact floats.
//!
//! Floats are written in scientific notation with 17 significant digits,
//! enough to identify every `f64` uniquely. Non-finite values become `null`.

use std::fmt::Write as _;
use std::io;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter};

use crate::integrators::DiscreteTrajectory;

#[derive(Debug, Clone, Copy, Default)]
pub struct PreciseFormatter;

impl Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        CompactFormatter.begin_array(writer)
    }
}

/// Serialises `value` as compact JSON followed by a newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

fn float(out: &mut String, x: f64) {
    if x.is_finite() {
        let _ = write!(out, "{x:.16e}");
    } else {
        out.push_str("nan");
    }
}

/// CSV with columns `t, q_1..q_n, lambda_1..lambda_m`; one row per time
/// level `t_k = k dt`. Multipliers are aligned with their time level (DEL:
/// `lambda_k` for `k = 1..N-1`; midpoint rule: `k = 0..N-1`) and left
/// empty where undefined.
pub fn trajectory_csv(traj: &DiscreteTrajectory, lambda_offset: usize) -> String {
    let n = traj.qs.first().map_or(0, Vec::len);
    let m = traj.lambdas.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",q{i}");
    }
    for i in 1..=m {
        let _ = write!(out, ",lambda{i}");
    }
    out.push('\n');
    for (k, q) in traj.qs.iter().enumerate() {
        float(&mut out, k as f64 * traj.dt);
        for x in q {
            out.push(',');
            float(&mut out, *x);
        }
        let lambda = k.checked_sub(lambda_offset).and_then(|j| traj.lambdas.get(j));
        for i in 0..m {
            out.push(',');
            if let Some(l) = lambda {
                float(&mut out, l[i]);
            }
        }
        out.push('\n');
    }
    out
}
