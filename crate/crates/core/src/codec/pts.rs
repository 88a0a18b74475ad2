//! The 300W `.pts` landmark text format.
//!
//! ```text
//! version: 1
//! n_points: 68
//! {
//! 123.456 78.9
//! ...
//! }
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_pts(text: &str, source: &str) -> Result<Vec<[f64; 2]>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| err(text.lines().count(), format!("missing {what}")));

    let header_value = |(no, line): (usize, &str), key: &str| -> Result<String> {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| err(no, format!("expected `{key}: ...`, found `{line}`")))?;
        if k.trim() != key {
            return Err(err(no, format!("expected `{key}`, found `{}`", k.trim())));
        }
        Ok(v.trim().to_string())
    };

    let version = next("version header")?;
    header_value(version, "version")?;
    let count_line = next("n_points header")?;
    let n: usize = header_value(count_line, "n_points")?
        .parse()
        .map_err(|_| err(count_line.0, "n_points is not a non-negative integer".into()))?;
    let open = next("`{`")?;
    if open.1 != "{" {
        return Err(err(open.0, format!("expected `{{`, found `{}`", open.1)));
    }
    let mut points = Vec::with_capacity(n);
    loop {
        let (no, line) = next("`}`")?;
        if line == "}" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(no, format!("expected two coordinates, found {}", fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(no, format!("invalid coordinate `{s}`")))
        };
        points.push([parse(fields[0])?, parse(fields[1])?]);
    }
    if points.len() != n {
        return Err(err(0, format!("header declares {n} points, found {}", points.len())));
    }
    if let Some((no, extra)) = lines.next() {
        return Err(err(no, format!("unexpected content after `}}`: `{extra}`")));
    }
    Ok(points)
}

/// Three decimals when that reproduces the value exactly, otherwise the
/// shortest representation that does.
fn format_coord(v: f64) -> String {
    let short = format!("{v:.3}");
    if short.parse::<f64>() == Ok(v) {
        short
    } else {
        format!("{v}")
    }
}

pub fn emit_pts(points: &[[f64; 2]]) -> String {
    let mut s = format!("version: 1\nn_points: {}\n{{\n", points.len());
    for p in points {
        let _ = writeln!(s, "{} {}", format_coord(p[0]), format_coord(p[1]));
    }
    s.push_str("}\n");
    s
}

pub fn read_pts(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pts(&text, &path.display().to_string())
}

pub fn write_pts(path: &Path, points: &[[f64; 2]]) -> Result<()> {
    std::fs::write(path, emit_pts(points)).map_err(|e| Error::io(path, e))
}
