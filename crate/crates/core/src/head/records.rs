//! Whitespace-separated detection records, one box per line:
//! `frame class score x y z w l h yaw vx vy`. Ground truth uses score 1.

use std::io::{BufRead, Write};

use super::{Box3, Detection, GroundTruthBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: Box3,
    pub velocity: [f64; 2],
}

impl Record {
    pub fn from_detection(frame: usize, d: &Detection) -> Self {
        Self {
            frame,
            class: d.class,
            score: d.score,
            bbox: d.bbox,
            velocity: d.velocity,
        }
    }

    pub fn from_ground_truth(frame: usize, g: &GroundTruthBox) -> Self {
        Self {
            frame,
            class: g.class,
            score: 1.0,
            bbox: g.bbox,
            velocity: g.velocity,
        }
    }
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_g(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    // rounding can carry into the next decade; re-derive the exponent from the rounded value
    let sci = format!("{:.5e}", v);
    let (mant, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    if (-4..6).contains(&e) {
        trim(format!("{:.*}", (5 - e).max(0) as usize, v))
    } else {
        format!("{}e{}{:02}", trim(mant.to_string()), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    for r in records {
        let b = &r.bbox;
        let fields = [
            r.score,
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            r.velocity[0],
            r.velocity[1],
        ];
        let rest: Vec<String> = fields.iter().map(|&v| format_g(v)).collect();
        writeln!(w, "{} {} {}", r.frame, r.class, rest.join(" "))?;
    }
    Ok(())
}

/// Blank lines and `#` comments are skipped.
pub fn parse_records<R: BufRead>(r: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::Format(format!("line {}: {what}", n + 1));
        if tok.len() != 12 {
            return Err(bad(&format!("expected 12 fields, found {}", tok.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer {s:?}")));
        let mut f = [0.0f64; 10];
        for (k, s) in tok[2..].iter().enumerate() {
            f[k] = s.parse().map_err(|_| bad(&format!("bad number {s:?}")))?;
            if !f[k].is_finite() {
                return Err(bad("non-finite value"));
            }
        }
        out.push(Record {
            frame: int(tok[0])?,
            class: int(tok[1])?,
            score: f[0],
            bbox: Box3 {
                center: [f[1], f[2], f[3]],
                size: [f[4], f[5], f[6]],
                yaw: f[7],
            },
            velocity: [f[8], f[9]],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_formatting() {
        assert_eq!(format_g(0.0), "0");
        assert_eq!(format_g(1.0), "1");
        assert_eq!(format_g(-2.5), "-2.5");
        assert_eq!(format_g(3.14159265), "3.14159");
        assert_eq!(format_g(123456.7), "123457");
        assert_eq!(format_g(1234567.0), "1.23457e+06");
        assert_eq!(format_g(0.0001), "0.0001");
        assert_eq!(format_g(0.00001234), "1.234e-05");
        assert_eq!(format_g(999999.6), "1e+06");
    }

    #[test]
    fn round_trip_within_six_digits() {
        let recs = vec![
            Record {
                frame: 3,
                class: 0,
                score: 0.87654321,
                bbox: Box3 {
                    center: [-4.25, 7.125, -0.9],
                    size: [1.9, 4.5, 1.6],
                    yaw: -3.0,
                },
                velocity: [0.0, 12.5],
            },
            Record {
                frame: 4,
                class: 1,
                score: 1.0,
                bbox: Box3 {
                    center: [1e-7, 0.5, 0.0],
                    size: [0.3, 0.3, 0.3],
                    yaw: 1.5707963,
                },
                velocity: [-1.0, 0.25],
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3 0 0.876543 -4.25 7.125 -0.9 1.9 4.5 1.6 -3 0 12.5\n"));
        let back = parse_records(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].score - 0.876543).abs() < 1e-12);
        assert_eq!(back[1].bbox.center, recs[1].bbox.center);
        assert_eq!(back[1].bbox.yaw, 1.5708);
        assert_eq!(back[0].bbox, recs[0].bbox);
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(matches!(parse_records(&b"0 0 1 2 3"[..]), Err(Error::Format(_))));
        assert!(parse_records(&b"0 x 1 0 0 0 1 1 1 0 0 0"[..]).is_err());
        assert!(parse_records(&b"0 0 nan 0 0 0 1 1 1 0 0 0"[..]).is_err());
        assert_eq!(parse_records(&b"# header\n\n"[..]).unwrap(), vec![]);
    }
}
