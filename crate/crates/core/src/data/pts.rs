//! IBUG `.pts` landmark files.
//!
//! ```text
//! version: 1
//! n_points: 68
//! {
//! 123.4 56.7
//! ...
//! }
//! ```
//!
//! File coordinates are 1-based; shapes in memory are 0-based.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::shape::{LandmarkShape, Point};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_pts(text: &str) -> Result<LandmarkShape> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let mut n_points = None;
    let mut last_line = 0;
    for (no, line) in lines.by_ref() {
        last_line = no;
        if line == "{" {
            break;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| parse_err(no, format!("expected `key: value` header, got {line:?}")))?;
        match key.trim() {
            "version" => {}
            "n_points" => {
                let n: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(no, format!("invalid n_points {:?}", value.trim())))?;
                n_points = Some(n);
            }
            other => return Err(parse_err(no, format!("unknown header key {other:?}"))),
        }
    }
    let n = n_points.ok_or_else(|| parse_err(last_line, "missing n_points header"))?;

    let mut points = Vec::with_capacity(n);
    for (no, line) in lines.by_ref() {
        last_line = no;
        if line == "}" {
            if points.len() != n {
                return Err(parse_err(
                    no,
                    format!("expected {n} points, found {}", points.len()),
                ));
            }
            return Ok(LandmarkShape::new(points));
        }
        let mut fields = line.split_whitespace();
        let mut coord = |name: &str| -> Result<f64> {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(no, format!("missing {name} coordinate")))?;
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(no, format!("non-numeric {name} coordinate {tok:?}")))
        };
        let x = coord("x")?;
        let y = coord("y")?;
        if fields.next().is_some() {
            return Err(parse_err(no, "more than two coordinates"));
        }
        if points.len() == n {
            return Err(parse_err(no, format!("more than {n} points")));
        }
        points.push(Point::new(x - 1.0, y - 1.0));
    }
    Err(parse_err(last_line, "missing closing `}`"))
}

/// Shortest fixed-point text `t` of `v + 1` with `parse(t) - 1 == v`, so a
/// parse after a write gives back the same 0-based value.
fn one_based(v: f64) -> String {
    let shifted = v + 1.0;
    (0..=17)
        .map(|prec| format!("{shifted:.prec$}"))
        .find(|t| t.parse::<f64>().map(|p| p - 1.0) == Ok(v))
        .unwrap_or_else(|| shifted.to_string())
}

/// Serializes with 1-based coordinates.
pub fn write_pts(shape: &LandmarkShape) -> String {
    let mut out = format!("version: 1\nn_points: {}\n{{\n", shape.len());
    for p in shape.points() {
        let _ = writeln!(out, "{} {}", one_based(p.x), one_based(p.y));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_shifts_to_zero_based() {
        let s = parse_pts("version: 1\nn_points: 3\n{\n10 20\n30 40\n50 60\n}\n").unwrap();
        assert_eq!(s, LandmarkShape::from_pairs(&[(9.0, 19.0), (29.0, 39.0), (49.0, 59.0)]));
    }

    #[test]
    fn round_trip() {
        let text = "version: 1\nn_points: 2\n{\n101.25 33.5\n7 8.125\n}\n";
        let s = parse_pts(text).unwrap();
        assert_eq!(parse_pts(&write_pts(&s)).unwrap(), s);
        assert_eq!(write_pts(&s), text);
    }

    #[test]
    fn decimal_file_values_survive_the_base_shift() {
        let text = "version: 1\nn_points: 2\n{\n0.1 12.345678\n1e3 0.3\n}\n";
        let out = write_pts(&parse_pts(text).unwrap());
        assert_eq!(out, "version: 1\nn_points: 2\n{\n0.1 12.345678\n1000 0.3\n}\n");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut body = String::from("version: 1\nn_points: 68\n{\n");
        for i in 0..67 {
            body.push_str(&format!("{i} {i}\n"));
        }
        body.push_str("}\n");
        match parse_pts(&body) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 71);
                assert!(message.contains("68"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_pts("version: 1\nn_points: 1\n{\n1 abc\n}\n"),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(matches!(parse_pts("n_points three\n{\n}\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_pts("version: 1\n{\n}\n").is_err());
        assert!(parse_pts("version: 1\nn_points: 1\n{\n1 2\n").is_err());
    }

    proptest::proptest! {
        // Sub-pixel grid values, as produced by annotation tools.
        #[test]
        fn write_then_parse_is_exact(raw in proptest::collection::vec(-4_000_000i64..4_000_000, 1..30)) {
            let flat: Vec<f64> = raw.iter().map(|&k| k as f64 / 1024.0).collect();
            let flat = if flat.len() % 2 == 1 { &flat[1..] } else { &flat[..] };
            let s = LandmarkShape::from_flat(flat).unwrap();
            proptest::prop_assert_eq!(parse_pts(&write_pts(&s)).unwrap(), s);
        }
    }
}
